//! Gaussian map with per-pixel keyframe linkage and the mask-driven
//! update / prune / spawn lifecycle.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::frontend::{FactorGraph, Keyframe};
use crate::geometry::{back_project, pixel, Intrinsics};

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    /// World-frame mean.
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// `R S Sᵀ Rᵀ` with `S = diag(s)`.
pub fn covariance_from(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let m = r * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

impl Gaussian {
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.rotation, &self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Link {
    pub keyframe: u64,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatConfig {
    pub initial_opacity: f64,
    /// Initial scale is `kappa · z / fx`.
    pub kappa: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Spawn grid spacing in pixels.
    pub stride: usize,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            initial_opacity: 0.5,
            kappa: 2.0,
            scale_min: 1e-6,
            scale_max: 1.0,
            stride: 4,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.initial_opacity) {
            return Err(Error::Config("initial opacity must lie in [0, 1]".into()));
        }
        if !(self.kappa > 0.0) || !(self.scale_min > 0.0) || self.scale_max < self.scale_min {
            return Err(Error::Config("scale bounds must satisfy 0 < min ≤ max and kappa > 0".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("spawn stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which parts of the lifecycle run on mask transitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiadMode {
    /// Update, prune and spawn.
    Full,
    /// Positions follow the keyframes; nothing is pruned or spawned.
    PositionsOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiadReport {
    pub updated: usize,
    pub pruned: usize,
    pub spawned: usize,
}

/// Builds the gaussian for pixel `(x, y)` of a keyframe.
pub fn spawn_from_pixel(kf: &Keyframe, x: usize, y: usize, k: &Intrinsics, cfg: &SplatConfig) -> Result<Gaussian> {
    if !kf.mask.is_valid(x, y) {
        return Err(Error::SpawnRefused {
            keyframe: kf.id,
            x,
            y,
            reason: "pixel is masked out",
        });
    }
    let d = kf.disparity.get(x, y).ok_or(Error::SpawnRefused {
        keyframe: kf.id,
        x,
        y,
        reason: "disparity is not positive",
    })?;
    let xc = back_project(&pixel(x, y), d, k)?;
    let s = (cfg.kappa * xc.z / k.fx).clamp(cfg.scale_min, cfg.scale_max);
    Ok(Gaussian {
        mean: kf.pose.inverse().transform(&xc),
        rotation: UnitQuaternion::identity(),
        scale: Vector3::repeat(s),
        opacity: cfg.initial_opacity,
        color: *kf.image.get(x, y),
    })
}

/// World position implied by a keyframe's current pose and disparity at `(x, y)`.
pub fn linked_position(kf: &Keyframe, x: usize, y: usize, k: &Intrinsics) -> Option<Vector3<f64>> {
    let d = kf.disparity.get(x, y)?;
    Some(kf.pose.inverse().transform(&(k.ray(&pixel(x, y)) / d)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Meta {
    pub id: u64,
    pub link: Option<Link>,
    pub frozen: bool,
}

/// Gaussians kept in creation order; `meta[i]` describes `gaussians[i]`.
#[derive(Clone, Debug, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    meta: Vec<Meta>,
    provenance: HashMap<Link, u64>,
    next_id: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn meta(&self) -> &[Meta] {
        &self.meta
    }

    pub fn frozen_count(&self) -> usize {
        self.meta.iter().filter(|m| m.frozen).count()
    }

    /// Gaussians linked to a windowed keyframe pixel.
    pub fn live_count(&self) -> usize {
        self.provenance.len()
    }

    /// Index of the live gaussian linked to a pixel.
    pub fn linked(&self, link: &Link) -> Option<usize> {
        let id = self.provenance.get(link)?;
        self.index_of(*id)
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.meta.binary_search_by_key(&id, |m| m.id).ok()
    }

    /// Appends a gaussian that is not tied to any keyframe pixel.
    pub fn push(&mut self, g: Gaussian) -> u64 {
        self.insert(g, None)
    }

    fn insert(&mut self, g: Gaussian, link: Option<Link>) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.gaussians.push(g);
        self.meta.push(Meta { id, link, frozen: false });
        if let Some(l) = link {
            self.provenance.insert(l, id);
        }
        id
    }

    /// Spawns the gaussian for a keyframe pixel. Refused if the pixel is
    /// invalid or already has a live gaussian.
    pub fn spawn(&mut self, kf: &Keyframe, x: usize, y: usize, k: &Intrinsics, cfg: &SplatConfig) -> Result<u64> {
        let link = Link { keyframe: kf.id, x, y };
        if self.provenance.contains_key(&link) {
            return Err(Error::SpawnRefused {
                keyframe: kf.id,
                x,
                y,
                reason: "pixel already has a gaussian",
            });
        }
        let g = spawn_from_pixel(kf, x, y, k, cfg)?;
        Ok(self.insert(g, Some(link)))
    }

    /// Spawns at every valid, unlinked pixel `(stride·a, stride·b)`.
    pub fn densify_stride_grid(&mut self, kf: &Keyframe, k: &Intrinsics, cfg: &SplatConfig) -> usize {
        let mut n = 0;
        for y in (0..kf.mask.height()).step_by(cfg.stride) {
            for x in (0..kf.mask.width()).step_by(cfg.stride) {
                if kf.mask.is_valid(x, y) && kf.disparity.get(x, y).is_some() && self.spawn(kf, x, y, k, cfg).is_ok() {
                    n += 1;
                }
            }
        }
        n
    }

    /// Detaches every gaussian of an evicted keyframe. They stay in the map
    /// but no longer follow tracking updates.
    pub fn freeze_keyframe(&mut self, keyframe: u64) -> usize {
        self.provenance.retain(|l, _| l.keyframe != keyframe);
        let mut n = 0;
        for m in &mut self.meta {
            if !m.frozen && m.link.is_some_and(|l| l.keyframe == keyframe) {
                m.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Whether the mapping optimizer may move this gaussian's mean.
    pub fn mean_is_free(&self, index: usize) -> bool {
        let m = &self.meta[index];
        m.frozen || m.link.is_none()
    }

    fn remove_ids(&mut self, ids: &[u64]) {
        if ids.is_empty() {
            return;
        }
        let mut keep = Vec::with_capacity(self.meta.len());
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        for m in &self.meta {
            keep.push(ids.binary_search(&m.id).is_err());
        }
        let mut it = keep.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.meta.retain(|_| *it.next().unwrap());
        self.provenance.retain(|_, id| ids.binary_search(id).is_err());
    }

    /// Applies mask transitions of every windowed keyframe.
    ///
    /// On the spawn grid: 1→1 recomputes the linked mean from the keyframe's
    /// current pose and disparity; 1→0 removes the linked gaussian; 0→1
    /// spawns. In [`SiadMode::PositionsOnly`] only the position update runs,
    /// for every linked gaussian whose pixel is currently valid.
    pub fn siad_apply(&mut self, graph: &FactorGraph, cfg: &SplatConfig, mode: SiadMode) -> Result<SiadReport> {
        let k = &graph.intrinsics;
        let mut report = SiadReport::default();
        let live_before = self.live_count();
        for kf in graph.keyframes() {
            if kf.prev_mask.0.dims() != kf.mask.0.dims() || kf.mask.0.dims() != kf.disparity.dims() {
                return Err(Error::DimensionMismatch {
                    expected: kf.disparity.dims(),
                    actual: kf.prev_mask.0.dims(),
                });
            }
            let mut doomed = Vec::new();
            for y in (0..kf.mask.height()).step_by(cfg.stride) {
                for x in (0..kf.mask.width()).step_by(cfg.stride) {
                    let link = Link { keyframe: kf.id, x, y };
                    let (before, now) = (kf.prev_mask.is_valid(x, y), kf.mask.is_valid(x, y));
                    let idx = self.linked(&link);
                    match (mode, before, now) {
                        (SiadMode::Full, true, false) => {
                            if let Some(i) = idx {
                                doomed.push(self.meta[i].id);
                            }
                        }
                        (SiadMode::Full, false, true) if idx.is_none() => {
                            if kf.disparity.get(x, y).is_some() {
                                self.spawn(kf, x, y, k, cfg)?;
                                report.spawned += 1;
                            }
                        }
                        (_, _, true) => match idx {
                            Some(i) => {
                                if let Some(mu) = linked_position(kf, x, y, k) {
                                    self.gaussians[i].mean = mu;
                                    report.updated += 1;
                                }
                            }
                            None if mode == SiadMode::Full => {
                                return Err(Error::Consistency(format!(
                                    "pixel ({x}, {y}) of keyframe {} stayed valid but has no gaussian",
                                    kf.id
                                )));
                            }
                            None => {}
                        },
                        _ => {}
                    }
                }
            }
            report.pruned += doomed.len();
            self.remove_ids(&doomed);
        }
        debug_assert_eq!(self.live_count(), live_before - report.pruned + report.spawned);
        Ok(report)
    }

    /// Largest distance between a live gaussian's mean and the position its
    /// keyframe pixel implies.
    pub fn max_link_error(&self, graph: &FactorGraph) -> f64 {
        let mut worst: f64 = 0.0;
        for (link, &id) in &self.provenance {
            let Some(kf) = graph.keyframe(link.keyframe) else {
                return f64::INFINITY;
            };
            let Some(i) = self.index_of(id) else { return f64::INFINITY };
            match linked_position(kf, link.x, link.y, &graph.intrinsics) {
                Some(mu) => worst = worst.max((mu - self.gaussians[i].mean).norm()),
                None => return f64::INFINITY,
            }
        }
        worst
    }

    /// Mean distance of all gaussians from their centroid, used to scale
    /// position step sizes.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 1.0;
        }
        let n = self.gaussians.len() as f64;
        let c: Vector3<f64> = self.gaussians.iter().map(|g| g.mean).sum::<Vector3<f64>>() / n;
        let e = self.gaussians.iter().map(|g| (g.mean - c).norm()).sum::<f64>() / n;
        if e > 0.0 {
            e
        } else {
            1.0
        }
    }
}

const RECORD_FLOATS: usize = 14;

/// Writes the binary point file (14 little-endian f32 per gaussian:
/// mean xyz, rotation xyzw, scale xyz, opacity, color rgb) and a text sidecar
/// `<path>.txt` with counts and camera intrinsics.
pub fn write_map(map: &GaussianMap, k: &Intrinsics, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for g in map.gaussians() {
        let q = g.rotation.quaternion();
        let vals = [
            g.mean.x, g.mean.y, g.mean.z, q.i, q.j, q.k, q.w, g.scale.x, g.scale.y, g.scale.z, g.opacity, g.color.x, g.color.y, g.color.z,
        ];
        for v in vals {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = format!(
        "count {}\nlive {}\nfrozen {}\nrecord_floats {}\nwidth {}\nheight {}\nfx {}\nfy {}\ncx {}\ncy {}\n",
        map.len(),
        map.live_count(),
        map.frozen_count(),
        RECORD_FLOATS,
        k.width,
        k.height,
        k.fx,
        k.fy,
        k.cx,
        k.cy
    );
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}

/// Reads a map written by [`write_map`]. Loaded gaussians carry no linkage.
pub fn read_map(path: &Path) -> Result<(GaussianMap, Intrinsics)> {
    let side = sidecar_path(path);
    let f = File::open(&side).map_err(|e| Error::io(&side, e))?;
    let mut fields = HashMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&side, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(key), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(&side, n + 1, "expected `key value`"));
        };
        let v: f64 = val.parse().map_err(|_| Error::parse(&side, n + 1, format!("bad number `{val}`")))?;
        fields.insert(key.to_string(), v);
    }
    let get = |key: &str| fields.get(key).copied().ok_or_else(|| Error::parse(&side, 0, format!("missing `{key}`")));
    let k = Intrinsics::new(get("fx")?, get("fy")?, get("cx")?, get("cy")?, get("width")? as usize, get("height")? as usize)?;
    let count = get("count")? as usize;

    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * RECORD_FLOATS * 4 {
        return Err(Error::Input(format!(
            "{}: expected {} records, found {} bytes",
            path.display(),
            count,
            bytes.len()
        )));
    }
    let mut map = GaussianMap::new();
    for rec in bytes.chunks_exact(RECORD_FLOATS * 4) {
        let v: Vec<f64> = rec.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        map.push(Gaussian {
            mean: Vector3::new(v[0], v[1], v[2]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5])),
            scale: Vector3::new(v[7], v[8], v[9]),
            opacity: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    Ok((map, k))
}
