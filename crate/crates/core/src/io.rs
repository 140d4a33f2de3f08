//! Image, trajectory, flow-record and scene-bundle files.
//!
//! A bundle directory holds:
//!
//! - `intrinsics.txt`: one line `fx fy cx cy width height`
//! - `frames.txt`: one line per frame, `timestamp rgb_path [depth_path]`, paths relative to the bundle
//! - `rgb/NNNNNN.png`: color, 8- or 16-bit
//! - `depth/NNNNNN.png`: optional 16-bit depth prior, value = depth · 5000, 0 = unknown
//! - `flows.bin`: flow records, see [`write_flow_records`]
//! - `groundtruth.txt`: optional TUM trajectory

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::frontend::{FlowObservation, FlowObservationProvider, Frame};
use crate::geometry::{Intrinsics, InverseDepthMap, Pose};
use crate::grid::{Grid, RgbImage, ScalarImage};
use crate::synth::{FlowNoise, SyntheticProvider, SyntheticScene};

pub const DEPTH_FACTOR: f64 = 5000.0;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Reads an 8- or 16-bit color image (PNG or PPM) into `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x as u32, y as u32);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }))
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes an 8-bit color image; the format follows the extension.
pub fn write_rgb8(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([0, 1, 2].map(|i| quantize(c[i], 255.0) as u8))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes a 16-bit color image; the format follows the extension.
pub fn write_rgb16(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([0, 1, 2].map(|i| quantize(c[i], 65535.0) as u16))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads a 16-bit depth image scaled by `factor`; zero stays zero (unknown).
pub fn read_depth(path: &Path, factor: f64) -> Result<ScalarImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Grid::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32)[0] as f64 / factor))
}

pub fn write_depth(path: &Path, depth: &ScalarImage, factor: f64) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        let d = *depth.get(x as usize, y as usize);
        let v = if d.is_finite() && d > 0.0 {
            (d * factor).round().clamp(1.0, 65535.0)
        } else {
            0.0
        };
        Luma([v as u16])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// One TUM trajectory line: world-from-camera translation and quaternion
/// `(qx, qy, qz, qw)`, kept verbatim so text round trips are exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumEntry {
    pub timestamp: f64,
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl TumEntry {
    /// From a camera-from-world pose.
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        let wc = pose.inverse();
        let q = wc.rotation.quaternion();
        Self {
            timestamp,
            translation: wc.translation.into(),
            quaternion: [q.i, q.j, q.k, q.w],
        }
    }

    /// The camera-from-world pose.
    pub fn pose(&self) -> Pose {
        let [x, y, z, w] = self.quaternion;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Pose::new(q, Vector3::from(self.translation)).inverse()
    }
}

pub fn format_tum(entries: &[TumEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let [tx, ty, tz] = e.translation;
        let [qx, qy, qz, qw] = e.quaternion;
        s.push_str(&format!("{} {tx} {ty} {tz} {qx} {qy} {qz} {qw}\n", e.timestamp));
    }
    s
}

/// Parses TUM text; `#` comments and blank lines are skipped. `path` is only
/// used in error messages.
pub fn parse_tum(text: &str, path: &Path) -> Result<Vec<TumEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, n + 1, format!("not a number: {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(Error::parse(path, n + 1, format!("expected 8 fields, found {}", vals.len())));
        }
        let q = [vals[4], vals[5], vals[6], vals[7]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-9) || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, n + 1, "quaternion must be finite and non-zero"));
        }
        out.push(TumEntry {
            timestamp: vals[0],
            translation: [vals[1], vals[2], vals[3]],
            quaternion: q,
        });
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Vec<TumEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn write_tum(path: &Path, entries: &[TumEntry]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, format_tum(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (n, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| Error::parse(path, 1, "missing intrinsics line"))?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 {
        return Err(Error::parse(path, n + 1, "expected `fx fy cx cy width height`"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(path, n + 1, format!("not a number: {s:?}")));
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, n + 1, format!("not a size: {s:?}")));
    Intrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, dim(f[4])?, dim(f[5])?)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    ensure_parent(path)?;
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flow for one ordered frame pair.
#[derive(Clone, Debug)]
pub struct FlowRecord {
    pub i: usize,
    pub j: usize,
    pub obs: FlowObservation,
}

/// Concatenated little-endian records: `i, j, H, W` as u32, then `H·W·2`
/// f32 flow values (row-major, x then y) and `H·W·2` f32 weights.
pub fn write_flow_records(path: &Path, records: &[FlowRecord]) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    for r in records {
        let (width, height) = r.obs.flow.dims();
        for v in [r.i, r.j, height, width] {
            put(&(v as u32).to_le_bytes())?;
        }
        for grid in [&r.obs.flow, &r.obs.weights] {
            for p in grid.as_slice() {
                put(&(p.x as f32).to_le_bytes())?;
                put(&(p.y as f32).to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_flow_records(path: &Path) -> Result<Vec<FlowRecord>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut out = Vec::new();
    // Records are binary, so the "line" in errors is the record number.
    let bad = |rec: usize, msg: &str| Error::parse(path, rec + 1, msg.to_string());
    while pos < bytes.len() {
        let rec = out.len();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad(rec, "truncated flow record"))?;
            *pos += n;
            Ok(s)
        };
        let mut hdr = [0usize; 4];
        for h in &mut hdr {
            *h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let [i, j, height, width] = hdr;
        if width == 0 || height == 0 {
            return Err(bad(rec, "empty flow record"));
        }
        let mut grids = Vec::with_capacity(2);
        for _ in 0..2 {
            let raw = take(&mut pos, width * height * 8)?;
            let vals: Vec<Vector2<f64>> = raw
                .chunks_exact(8)
                .map(|c| {
                    Vector2::new(
                        f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                        f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
                    )
                })
                .collect();
            grids.push(Grid::from_vec(width, height, vals));
        }
        let weights = grids.pop().unwrap();
        let flow = grids.pop().unwrap();
        out.push(FlowRecord {
            i,
            j,
            obs: FlowObservation::new(flow, weights),
        });
    }
    Ok(out)
}

/// Provider serving precomputed flow records.
#[derive(Clone, Debug, Default)]
pub struct RecordedFlows {
    records: HashMap<(usize, usize), FlowObservation>,
}

impl RecordedFlows {
    pub fn new(records: Vec<FlowRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| ((r.i, r.j), r.obs)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FlowObservationProvider for RecordedFlows {
    fn observe(&self, source: usize, target: usize) -> Result<FlowObservation> {
        self.records.get(&(source, target)).cloned().ok_or_else(|| Error::Provider {
            i: source,
            j: target,
            reason: "no flow record for this pair".into(),
        })
    }
}

/// Frames, camera and flows loaded from a bundle directory.
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    /// Ground-truth camera-from-world poses, one per frame, if present.
    pub truth: Option<Vec<Pose>>,
    pub flows: RecordedFlows,
}

/// Options for exporting a synthetic scene.
#[derive(Clone, Debug)]
pub struct BundleOptions {
    pub noise: FlowNoise,
    /// Largest frame-index gap for which flow records are written.
    pub max_gap: usize,
    pub write_depth: bool,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            noise: FlowNoise::default(),
            max_gap: usize::MAX,
            write_depth: true,
        }
    }
}

pub fn write_bundle(dir: &Path, scene: &SyntheticScene, opts: &BundleOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_intrinsics(&dir.join("intrinsics.txt"), &scene.intrinsics)?;
    let mut listing = String::new();
    for i in 0..scene.len() {
        let rgb = format!("rgb/{i:06}.png");
        write_rgb8(&dir.join(&rgb), &scene.images[i])?;
        listing.push_str(&format!("{} {rgb}", scene.timestamps[i]));
        if opts.write_depth {
            let depth = format!("depth/{i:06}.png");
            write_depth(&dir.join(&depth), &scene.depths[i], DEPTH_FACTOR)?;
            listing.push_str(&format!(" {depth}"));
        }
        listing.push('\n');
    }
    let frames = dir.join("frames.txt");
    std::fs::write(&frames, listing).map_err(|e| Error::io(&frames, e))?;
    let provider = SyntheticProvider::new(scene, opts.noise);
    let mut records = Vec::new();
    for i in 0..scene.len() {
        for j in i + 1..scene.len() {
            if j - i <= opts.max_gap {
                records.push(FlowRecord {
                    i,
                    j,
                    obs: provider.observe(i, j)?,
                });
            }
        }
    }
    write_flow_records(&dir.join("flows.bin"), &records)?;
    let gt: Vec<TumEntry> = scene.poses.iter().zip(&scene.timestamps).map(|(p, &t)| TumEntry::from_pose(t, p)).collect();
    write_tum(&dir.join("groundtruth.txt"), &gt)
}

pub fn read_bundle(dir: &Path) -> Result<Dataset> {
    let k = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let listing_path = dir.join("frames.txt");
    let listing = std::fs::read_to_string(&listing_path).map_err(|e| Error::io(&listing_path, e))?;
    let mut frames = Vec::new();
    for (n, line) in listing.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() < 2 || f.len() > 3 {
            return Err(Error::parse(&listing_path, n + 1, "expected `timestamp rgb_path [depth_path]`"));
        }
        let timestamp = f[0]
            .parse::<f64>()
            .map_err(|_| Error::parse(&listing_path, n + 1, format!("bad timestamp {:?}", f[0])))?;
        let image = read_rgb(&dir.join(f[1]))?;
        if image.dims() != (k.width, k.height) {
            return Err(Error::parse(&listing_path, n + 1, "image size differs from intrinsics"));
        }
        let disparity = match f.get(2) {
            Some(p) => Some(InverseDepthMap::from_depth(&read_depth(&dir.join(p), DEPTH_FACTOR)?)),
            None => None,
        };
        frames.push(Frame {
            index: frames.len(),
            timestamp,
            image,
            disparity,
        });
    }
    let gt_path = dir.join("groundtruth.txt");
    let truth = if gt_path.exists() {
        let entries = read_tum(&gt_path)?;
        if entries.len() != frames.len() {
            return Err(Error::Input(format!(
                "{} has {} poses for {} frames",
                gt_path.display(),
                entries.len(),
                frames.len()
            )));
        }
        Some(entries.iter().map(TumEntry::pose).collect())
    } else {
        None
    };
    let flows = RecordedFlows::new(read_flow_records(&dir.join("flows.bin"))?);
    Ok(Dataset {
        intrinsics: k,
        frames,
        truth,
        flows,
    })
}

/// Paths of per-keyframe outputs inside an output directory.
pub fn render_path(dir: &Path, frame_index: usize) -> PathBuf {
    dir.join("renders").join(format!("{frame_index:06}.png"))
}
