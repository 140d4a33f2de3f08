//! Keyframe window, co-visibility edges and per-pixel reliability masks.
//!
//! Poses are stored camera-from-world, so the relative pose of an edge is
//! `T_ij = T_j ∘ T_i⁻¹`. Each edge carries flow observed on the pixels of its
//! source keyframe `i`.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pixel, project, FlowField, Intrinsics, InverseDepthMap, Pose};
use crate::grid::{Grid, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskReason {
    Ok,
    DepthInconsistent,
    GeomInconsistent,
    LowConfidence,
    Unobserved,
}

impl MaskReason {
    #[inline]
    pub fn is_valid(self) -> bool {
        self == MaskReason::Ok
    }
}

/// Per-pixel validity; a pixel is valid iff its reason is [`MaskReason::Ok`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMask(pub Grid<MaskReason>);

impl ReliabilityMask {
    pub fn all(width: usize, height: usize, reason: MaskReason) -> Self {
        Self(Grid::filled(width, height, reason))
    }

    /// Valid wherever the disparity is valid, `DepthInconsistent` elsewhere.
    pub fn from_disparity(d: &InverseDepthMap) -> Self {
        Self(d.validity().map(|&ok| if ok { MaskReason::Ok } else { MaskReason::DepthInconsistent }))
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.0.get(x, y).is_valid()
    }

    #[inline]
    pub fn reason(&self, x: usize, y: usize) -> MaskReason {
        *self.0.get(x, y)
    }

    pub fn set(&mut self, x: usize, y: usize, reason: MaskReason) {
        self.0.set(x, y, reason);
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn valid_count(&self) -> usize {
        self.0.as_slice().iter().filter(|r| r.is_valid()).count()
    }

    pub fn count(&self, reason: MaskReason) -> usize {
        self.0.as_slice().iter().filter(|&&r| r == reason).count()
    }
}

/// Flow, correction and confidence for one ordered frame pair, indexed by
/// pixels of the source frame.
#[derive(Clone, Debug)]
pub struct FlowObservation {
    pub flow: FlowField,
    pub correction: FlowField,
    pub weights: Grid<Vector2<f64>>,
}

impl FlowObservation {
    pub fn new(flow: FlowField, weights: Grid<Vector2<f64>>) -> Self {
        let correction = Grid::filled(flow.width(), flow.height(), Vector2::zeros());
        Self { flow, correction, weights }
    }

    /// Mean displacement magnitude over pixels with positive weight (all pixels if none).
    pub fn mean_magnitude(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (f, w) in self.flow.as_slice().iter().zip(self.weights.as_slice()) {
            if w.x > 0.0 || w.y > 0.0 {
                sum += f.norm();
                n += 1;
            }
        }
        if n == 0 {
            let all = self.flow.as_slice();
            return all.iter().map(|f| f.norm()).sum::<f64>() / all.len().max(1) as f64;
        }
        sum / n as f64
    }
}

/// Source of flow observations between frames, addressed by input frame index.
pub trait FlowObservationProvider {
    fn observe(&self, source: usize, target: usize) -> Result<FlowObservation>;
}

/// An input frame offered to the frontend.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub image: RgbImage,
    /// Initial disparity estimate for this frame, if the source provides one.
    pub disparity: Option<InverseDepthMap>,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: u64,
    pub frame_index: usize,
    pub timestamp: f64,
    pub image: RgbImage,
    pub disparity: InverseDepthMap,
    /// Camera-from-world.
    pub pose: Pose,
    pub mask: ReliabilityMask,
    /// Mask before the most recent refresh.
    pub prev_mask: ReliabilityMask,
    /// Disparity each pixel had when it last passed a committed mask refresh
    /// (the insertion value before the first one).
    pub reference: Grid<f64>,
}

impl Keyframe {
    /// Takes the current disparity of every valid pixel as its new reference.
    pub fn commit_reference(&mut self) {
        for (x, y) in self.mask.0.coords().collect::<Vec<_>>() {
            if self.mask.is_valid(x, y) {
                self.reference.set(x, y, self.disparity.raw(x, y));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdgeFactor {
    pub i: u64,
    pub j: u64,
    pub obs: FlowObservation,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub window_capacity: usize,
    /// Mean flow (px) a candidate needs against the last keyframe.
    pub keyframe_flow_threshold: f64,
    /// Edges connect keyframes whose ids differ by at most this much.
    pub edge_radius: u64,
    /// Optional co-visibility test: fraction of in-frame reprojections.
    pub covis_threshold: Option<f64>,
    /// ε of the confidence test.
    pub confidence_eps: f64,
    /// Relative depth tolerance of the depth-consistency test.
    pub depth_tau: f64,
    /// 3D distance threshold (scene units) of the geometric test.
    pub geom_thresh: f64,
    pub k_min: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            window_capacity: 25,
            keyframe_flow_threshold: 2.5,
            edge_radius: 3,
            covis_threshold: None,
            confidence_eps: 0.1,
            depth_tau: 0.05,
            geom_thresh: 0.05,
            k_min: 1,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_capacity < 2 {
            return Err(Error::Config("window capacity must be at least 2".into()));
        }
        if self.edge_radius == 0 || self.k_min == 0 {
            return Err(Error::Config("edge radius and k_min must be at least 1".into()));
        }
        let positive = [self.confidence_eps, self.depth_tau, self.geom_thresh];
        if !(self.keyframe_flow_threshold >= 0.0) || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("frontend thresholds must be positive".into()));
        }
        if self.covis_threshold.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Config("co-visibility threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject,
}

#[derive(Clone, Debug)]
pub struct Insertion {
    pub id: u64,
    pub evicted: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FactorGraph {
    pub intrinsics: Intrinsics,
    pub config: GraphConfig,
    window: VecDeque<Keyframe>,
    edges: Vec<EdgeFactor>,
    next_id: u64,
}

impl FactorGraph {
    pub fn new(intrinsics: Intrinsics, config: GraphConfig) -> Self {
        Self {
            intrinsics,
            config,
            window: VecDeque::new(),
            edges: Vec::new(),
            next_id: 0,
        }
    }

    pub fn keyframes(&self) -> impl ExactSizeIterator<Item = &Keyframe> + DoubleEndedIterator {
        self.window.iter()
    }

    pub fn keyframes_mut(&mut self) -> impl Iterator<Item = &mut Keyframe> {
        self.window.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn edges(&self) -> &[EdgeFactor] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [EdgeFactor] {
        &mut self.edges
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.window.back()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.window.iter().position(|k| k.id == id)
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.window.iter().find(|k| k.id == id)
    }

    pub fn keyframe_mut(&mut self, id: u64) -> Option<&mut Keyframe> {
        self.window.iter_mut().find(|k| k.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.window.iter().map(|k| k.id).collect()
    }

    /// Keyframes sharing an edge with `id`, in window order.
    pub fn neighbors(&self, id: u64) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.i == id {
                    Some(e.j)
                } else if e.j == id {
                    Some(e.i)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `T_ij = T_j ∘ T_i⁻¹`.
    pub fn relative_pose(&self, i: u64, j: u64) -> Result<Pose> {
        let ki = self.keyframe(i).ok_or_else(|| Error::Graph(format!("keyframe {i} not in window")))?;
        let kj = self.keyframe(j).ok_or_else(|| Error::Graph(format!("keyframe {j} not in window")))?;
        Ok(kj.pose.compose(&ki.pose.inverse()))
    }

    /// Accept iff the window is empty or the mean observed flow against the
    /// last keyframe reaches the threshold.
    pub fn motion_filter(&self, candidate: &Frame, provider: &dyn FlowObservationProvider) -> Result<FilterDecision> {
        let Some(last) = self.window.back() else {
            return Ok(FilterDecision::Accept);
        };
        let obs = provider.observe(last.frame_index, candidate.index)?;
        Ok(if obs.mean_magnitude() >= self.config.keyframe_flow_threshold {
            FilterDecision::Accept
        } else {
            FilterDecision::Reject
        })
    }

    /// Appends a keyframe, links it to its co-visible predecessors and evicts
    /// the oldest keyframe when the window overflows.
    ///
    /// The new keyframe starts with a mask that trusts every pixel of valid
    /// disparity; the first refresh after tracking replaces it.
    pub fn add_keyframe(&mut self, frame: &Frame, pose: Pose, disparity: InverseDepthMap, provider: &dyn FlowObservationProvider) -> Result<Insertion> {
        let k = &self.intrinsics;
        if frame.image.dims() != (k.width, k.height) {
            return Err(Error::DimensionMismatch {
                expected: (k.width, k.height),
                actual: frame.image.dims(),
            });
        }
        if disparity.dims() != (k.width, k.height) {
            return Err(Error::DimensionMismatch {
                expected: (k.width, k.height),
                actual: disparity.dims(),
            });
        }
        let id = self.next_id;
        let mask = ReliabilityMask::from_disparity(&disparity);
        let kf = Keyframe {
            id,
            frame_index: frame.index,
            timestamp: frame.timestamp,
            image: frame.image.clone(),
            reference: disparity.values().clone(),
            disparity,
            pose,
            prev_mask: mask.clone(),
            mask,
        };

        let mut new_edges = Vec::new();
        for other in &self.window {
            let close = id - other.id <= self.config.edge_radius;
            let overlapping = !close
                && self
                    .config
                    .covis_threshold
                    .is_some_and(|tau| covisible_fraction(other, &kf, &self.intrinsics) >= tau);
            if close || overlapping {
                let obs = provider.observe(other.frame_index, frame.index)?;
                check_observation(&obs, &self.intrinsics, other.frame_index, frame.index)?;
                new_edges.push(EdgeFactor { i: other.id, j: id, obs });
            }
        }

        self.next_id += 1;
        self.window.push_back(kf);
        self.edges.extend(new_edges);

        let mut evicted = None;
        if self.window.len() > self.config.window_capacity {
            let old = self.window.pop_front().expect("window is non-empty");
            self.edges.retain(|e| e.i != old.id && e.j != old.id);
            evicted = Some(old.id);
        }
        Ok(Insertion { id, evicted })
    }

    /// Depth-consistency mask of keyframe `id` against its neighbors.
    ///
    /// For each neighbor the pixel is reprojected and compared with the
    /// neighbor's depth at the nearest pixel. A neighbor agrees when the
    /// relative depth error is within `depth_tau`, disagrees when the point
    /// lands in front of the neighbor's surface by more than that, and gives no
    /// evidence when the point is hidden behind the surface or leaves the frame.
    /// A pixel is valid iff its disparity is positive, no more neighbors
    /// disagree than agree, and either `k_min` neighbors agree or none
    /// disagrees and the disparity is stable: within a relative `depth_tau` of
    /// the keyframe's reference value.
    pub fn depth_consistency_mask(&self, id: u64) -> Result<ReliabilityMask> {
        let kf = self.keyframe(id).ok_or_else(|| Error::Graph(format!("keyframe {id} not in window")))?;
        let (w, h) = kf.disparity.dims();
        let neighbors = self.neighbors(id);
        if neighbors.is_empty() {
            return Ok(ReliabilityMask::all(w, h, MaskReason::Unobserved));
        }
        let rel: Vec<(Pose, &Keyframe)> = neighbors
            .iter()
            .map(|&j| Ok((self.relative_pose(id, j)?, self.keyframe(j).expect("neighbor in window"))))
            .collect::<Result<_>>()?;
        let k = &self.intrinsics;
        let tau = self.config.depth_tau;
        let mut mask = ReliabilityMask::all(w, h, MaskReason::Ok);
        for y in 0..h {
            for x in 0..w {
                let Some(d) = kf.disparity.get(x, y) else {
                    mask.set(x, y, MaskReason::DepthInconsistent);
                    continue;
                };
                let xi = k.ray(&pixel(x, y)) / d;
                let (mut agree, mut disagree) = (0usize, 0usize);
                for (t_ij, nb) in &rel {
                    let xj = t_ij.transform(&xi);
                    let Some(q) = project(&xj, k) else { continue };
                    let Some((qx, qy)) = k.nearest_pixel(&q) else { continue };
                    let Some(dj) = nb.disparity.get(qx, qy) else { continue };
                    let zj = 1.0 / dj;
                    let r = (xj.z - zj) / zj;
                    if r.abs() <= tau {
                        agree += 1;
                    } else if r < -tau {
                        disagree += 1;
                    }
                }
                let reference = *kf.reference.get(x, y);
                let unstable = !((d / reference - 1.0).abs() <= tau);
                if disagree > agree || (agree < self.config.k_min && (disagree > 0 || unstable)) {
                    mask.set(x, y, MaskReason::DepthInconsistent);
                }
            }
        }
        Ok(mask)
    }

    /// Per-pixel 3D distance between `T_ij · x_i` and the point back-projected
    /// from keyframe `j` along the same ray at the nearest pixel's disparity.
    ///
    /// `None` marks pixels excluded from the test: invalid disparity, behind
    /// the camera, out of frame, or occluded in `j` (the back-projected point
    /// is closer than `x_j` by more than `geom_thresh`).
    pub fn geometric_consistency_check(&self, i: u64, j: u64) -> Result<Grid<Option<f64>>> {
        if !self.edges.iter().any(|e| (e.i == i && e.j == j) || (e.i == j && e.j == i)) {
            return Err(Error::Graph(format!("no edge between {i} and {j}")));
        }
        let t_ij = self.relative_pose(i, j)?;
        let ki = self.keyframe(i).expect("checked by relative_pose");
        let kj = self.keyframe(j).expect("checked by relative_pose");
        let k = &self.intrinsics;
        let thresh = self.config.geom_thresh;
        let (w, h) = ki.disparity.dims();
        Ok(Grid::from_fn(w, h, |x, y| {
            let d = ki.disparity.get(x, y)?;
            let xj = t_ij.transform(&(k.ray(&pixel(x, y)) / d));
            let q = project(&xj, k)?;
            let (qx, qy) = k.nearest_pixel(&q)?;
            let dj = kj.disparity.get(qx, qy)?;
            let xhat: Vector3<f64> = k.ray(&q) / dj;
            if xj.z - xhat.z > thresh {
                return None;
            }
            Some((xj - xhat).norm())
        }))
    }

    /// Invalidates pixels whose mean weight over outgoing edges (and both flow
    /// components) is below `eps`. Keyframes without outgoing edges are left valid.
    pub fn confidence_mask(&self, id: u64, eps: f64) -> Result<ReliabilityMask> {
        let kf = self.keyframe(id).ok_or_else(|| Error::Graph(format!("keyframe {id} not in window")))?;
        let (w, h) = kf.disparity.dims();
        let incident: Vec<&EdgeFactor> = self.edges.iter().filter(|e| e.i == id).collect();
        let mut mask = ReliabilityMask::all(w, h, MaskReason::Ok);
        if incident.is_empty() {
            return Ok(mask);
        }
        let n = incident.len() as f64;
        for y in 0..h {
            for x in 0..w {
                let mean = incident
                    .iter()
                    .map(|e| {
                        let wv = e.obs.weights.get(x, y);
                        0.5 * (wv.x + wv.y)
                    })
                    .sum::<f64>()
                    / n;
                if mean < eps {
                    mask.set(x, y, MaskReason::LowConfidence);
                }
            }
        }
        Ok(mask)
    }

    /// Conjunction of the depth, geometric and confidence criteria for one
    /// keyframe; the reported reason is the first failing check in that order.
    pub fn compute_mask(&self, id: u64) -> Result<ReliabilityMask> {
        let depth = self.depth_consistency_mask(id)?;
        let conf = self.confidence_mask(id, self.config.confidence_eps)?;
        let mut geom_fail = Grid::filled(depth.width(), depth.height(), false);
        for j in self.neighbors(id) {
            let dist = self.geometric_consistency_check(id, j)?;
            for (flag, d) in geom_fail.as_mut_slice().iter_mut().zip(dist.as_slice()) {
                if d.is_some_and(|d| d > self.config.geom_thresh) {
                    *flag = true;
                }
            }
        }
        let mut out = depth;
        for (idx, r) in out.0.as_mut_slice().iter_mut().enumerate() {
            if !r.is_valid() {
                continue;
            }
            if geom_fail.as_slice()[idx] {
                *r = MaskReason::GeomInconsistent;
            } else if !conf.0.as_slice()[idx].is_valid() {
                *r = MaskReason::LowConfidence;
            }
        }
        Ok(out)
    }

    /// Fresh masks for every windowed keyframe, in window order.
    pub fn compute_masks(&self) -> Result<Vec<ReliabilityMask>> {
        let ids = self.ids();
        ids.par_iter().map(|&id| self.compute_mask(id)).collect()
    }

    /// Recomputes every mask. The mask in place before the call becomes
    /// `prev_mask`, and pixels that pass take their disparity as reference.
    pub fn update_masks(&mut self) -> Result<()> {
        let fresh = self.compute_masks()?;
        for (kf, m) in self.window.iter_mut().zip(fresh) {
            kf.prev_mask = std::mem::replace(&mut kf.mask, m);
            kf.commit_reference();
        }
        Ok(())
    }

    /// Replaces current masks without touching `prev_mask`.
    pub(crate) fn set_masks(&mut self, masks: Vec<ReliabilityMask>) {
        for (kf, m) in self.window.iter_mut().zip(masks) {
            kf.mask = m;
        }
    }
}

fn check_observation(obs: &FlowObservation, k: &Intrinsics, i: usize, j: usize) -> Result<()> {
    let dims = (k.width, k.height);
    if obs.flow.dims() != dims || obs.weights.dims() != dims || obs.correction.dims() != dims {
        return Err(Error::Provider {
            i,
            j,
            reason: format!("observation is {:?}, image is {:?}", obs.flow.dims(), dims),
        });
    }
    let bad_weight = obs
        .weights
        .as_slice()
        .iter()
        .any(|w| !(w.x >= 0.0 && w.y >= 0.0 && w.x.is_finite() && w.y.is_finite()));
    let bad_flow = obs.flow.as_slice().iter().any(|f| !(f.x.is_finite() && f.y.is_finite()));
    if bad_weight || bad_flow {
        return Err(Error::Provider {
            i,
            j,
            reason: "non-finite flow or negative weight".into(),
        });
    }
    Ok(())
}

/// Fraction of `a`'s valid pixels that reproject inside `b`.
fn covisible_fraction(a: &Keyframe, b: &Keyframe, k: &Intrinsics) -> f64 {
    let t_ab = b.pose.compose(&a.pose.inverse());
    let (w, h) = a.disparity.dims();
    let (mut inside, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = a.disparity.get(x, y) else { continue };
            total += 1;
            let xb = t_ab.transform(&(k.ray(&pixel(x, y)) / d));
            if project(&xb, k).is_some_and(|q| k.contains(&q)) {
                inside += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}
