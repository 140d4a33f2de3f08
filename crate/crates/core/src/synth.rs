//! Ray-cast synthetic room with exact depth, poses and pairwise flow.
//!
//! The world frame is the first camera's frame, so ground-truth pose 0 is the
//! identity and depths are metric.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::{FlowObservation, FlowObservationProvider, Frame};
use crate::geometry::{induced_flow, Intrinsics, InverseDepthMap, Pose};
use crate::grid::{Grid, RgbImage, ScalarImage};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    /// Lateral travel of the camera over the whole sequence, scene units.
    pub travel: f64,
    /// Fraction of the lateral motion compensated by turning toward the scene centre.
    pub yaw_follow: f64,
    /// Sub-samples per pixel side used to anti-alias the color images.
    pub supersample: usize,
    pub fps: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 56.0,
            frames: 16,
            travel: 1.6,
            yaw_follow: 0.5,
            supersample: 3,
            fps: 30.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || self.frames == 0 || self.supersample == 0 {
            return Err(Error::Config("synthetic scene needs at least 8×8 pixels, one frame and one sample".into()));
        }
        if !(self.focal > 0.0) || !(self.fps > 0.0) || !self.travel.is_finite() {
            return Err(Error::Config("synthetic focal length and frame rate must be positive".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Smooth procedural color: a base color plus two sinusoids in the surface's
/// two in-plane world coordinates.
#[derive(Clone, Debug)]
struct Texture {
    base: Vector3<f64>,
    waves: [(Vector2<f64>, f64, Vector3<f64>); 2],
}

impl Texture {
    fn color(&self, uv: Vector2<f64>) -> Vector3<f64> {
        let mut c = self.base;
        for (freq, phase, amp) in &self.waves {
            c += amp * (freq.dot(&uv) + phase).sin();
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug)]
enum Shape {
    /// Axis-aligned plane `x[axis] = offset`.
    Plane {
        axis: usize,
        offset: f64,
    },
    Cuboid {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    texture: Texture,
}

struct Hit {
    t: f64,
    point: Vector3<f64>,
    axis: usize,
    object: usize,
}

impl Object {
    fn intersect(&self, o: &Vector3<f64>, r: &Vector3<f64>) -> Option<(f64, usize)> {
        match &self.shape {
            Shape::Plane { axis, offset } => {
                if r[*axis].abs() < 1e-12 {
                    return None;
                }
                let t = (offset - o[*axis]) / r[*axis];
                (t > 1e-9).then_some((t, *axis))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for a in 0..3 {
                    if r[a].abs() < 1e-12 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / r[a], (max[a] - o[a]) / r[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                    }
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > 1e-9).then_some((t0, axis))
            }
        }
    }
}

fn texture(base: [f64; 3], f1: [f64; 2], f2: [f64; 2], amp1: f64, amp2: f64, phase: f64) -> Texture {
    Texture {
        base: Vector3::from(base),
        waves: [
            (Vector2::from(f1), phase, Vector3::new(amp1, -0.6 * amp1, 0.4 * amp1)),
            (Vector2::from(f2), 1.3 * phase + 0.7, Vector3::new(0.5 * amp2, amp2, -0.8 * amp2)),
        ],
    }
}

/// Room interior: back wall, floor, ceiling, side walls and three boxes.
fn room() -> Vec<Object> {
    let plane = |axis, offset| Shape::Plane { axis, offset };
    let cuboid = |min: [f64; 3], max: [f64; 3]| Shape::Cuboid {
        min: Vector3::from(min),
        max: Vector3::from(max),
    };
    vec![
        Object {
            shape: plane(2, 3.4),
            texture: texture([0.55, 0.5, 0.45], [2.1, 1.3], [5.0, -3.7], 0.12, 0.05, 0.3),
        },
        Object {
            shape: plane(1, 1.0),
            texture: texture([0.45, 0.4, 0.35], [1.7, 2.6], [-4.1, 3.3], 0.1, 0.05, 1.1),
        },
        Object {
            shape: plane(1, -1.6),
            texture: texture([0.6, 0.6, 0.6], [1.2, 0.9], [3.1, 2.2], 0.06, 0.03, 2.0),
        },
        Object {
            shape: plane(0, -2.2),
            texture: texture([0.4, 0.5, 0.55], [1.5, 1.9], [3.9, -2.8], 0.1, 0.04, 0.9),
        },
        Object {
            shape: plane(0, 2.2),
            texture: texture([0.5, 0.45, 0.55], [1.1, 2.3], [-3.3, 4.2], 0.1, 0.04, 2.4),
        },
        Object {
            shape: cuboid([-0.95, 0.35, 1.7], [-0.35, 1.0, 2.3]),
            texture: texture([0.7, 0.4, 0.3], [3.0, 2.2], [6.5, -5.1], 0.1, 0.05, 0.5),
        },
        Object {
            shape: cuboid([0.2, 0.45, 1.4], [0.7, 1.0, 1.9]),
            texture: texture([0.3, 0.55, 0.4], [2.6, -3.1], [7.2, 4.4], 0.1, 0.05, 1.7),
        },
        Object {
            shape: cuboid([-0.15, 0.0, 2.5], [0.45, 1.0, 3.0]),
            texture: texture([0.35, 0.4, 0.7], [-2.4, 2.9], [5.8, 6.1], 0.1, 0.05, 2.9),
        },
    ]
}

fn cast(objects: &[Object], o: &Vector3<f64>, r: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, obj) in objects.iter().enumerate() {
        if let Some((t, axis)) = obj.intersect(o, r) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point: o + r * t,
                    axis,
                    object: i,
                });
            }
        }
    }
    best
}

fn shade(objects: &[Object], hit: &Hit) -> Vector3<f64> {
    let (a, b) = match hit.axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    objects[hit.object].texture.color(Vector2::new(hit.point[a], hit.point[b]))
}

/// Camera-from-world pose of a camera at `c` looking at `target`, image y down.
fn look_at(c: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - c).normalize();
    let down = Vector3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let r_wc = Matrix3::from_columns(&[x, y, z]);
    let r_cw = Rotation3::from_matrix_unchecked(r_wc.transpose());
    let q = UnitQuaternion::from_rotation_matrix(&r_cw);
    Pose::new(q, -(q * c))
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub intrinsics: Intrinsics,
    /// Ground-truth camera-from-world poses.
    pub poses: Vec<Pose>,
    pub images: Vec<RgbImage>,
    /// Camera-space depth (z) per pixel centre.
    pub depths: Vec<ScalarImage>,
    pub timestamps: Vec<f64>,
}

impl SyntheticScene {
    pub fn generate(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let k = config.intrinsics()?;
        let objects = room();
        let n = config.frames;
        let raw_poses: Vec<Pose> = (0..n)
            .map(|f| {
                let s = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
                let arc = (std::f64::consts::PI * s).sin();
                let c = Vector3::new(config.travel * (s - 0.5), -0.2 - 0.08 * arc, -0.2 + 0.25 * arc);
                look_at(c, Vector3::new(config.yaw_follow * c.x, 0.45, 2.3))
            })
            .collect();
        let world_from_first = raw_poses[0].inverse();
        let ss = config.supersample;
        let mut images = Vec::with_capacity(n);
        let mut depths = Vec::with_capacity(n);
        for pose in &raw_poses {
            let r_wc = pose.inverse();
            let origin = r_wc.translation;
            let ray_world = |u: f64, v: f64| r_wc.rotation * k.ray(&Vector2::new(u, v));
            let depth = Grid::from_fn(k.width, k.height, |x, y| {
                cast(&objects, &origin, &ray_world(x as f64, y as f64)).map_or(0.0, |h| h.t)
            });
            let image = Grid::from_fn(k.width, k.height, |x, y| {
                let mut c = Vector3::zeros();
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        if let Some(h) = cast(&objects, &origin, &ray_world(x as f64 + du, y as f64 + dv)) {
                            c += shade(&objects, &h);
                        }
                    }
                }
                c / (ss * ss) as f64
            });
            images.push(image);
            depths.push(depth);
        }
        // Rays are (u, v, 1)-scaled, so the hit parameter is the camera-space depth.
        let poses = raw_poses.iter().map(|p| p.compose(&world_from_first)).collect();
        Ok(Self {
            config: config.clone(),
            intrinsics: k,
            poses,
            images,
            depths,
            timestamps: (0..n).map(|i| i as f64 / config.fps).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn disparity(&self, i: usize) -> InverseDepthMap {
        InverseDepthMap::from_depth(&self.depths[i])
    }

    /// Frame `i` with its exact disparity as the depth prior.
    pub fn frame(&self, i: usize) -> Frame {
        Frame {
            index: i,
            timestamp: self.timestamps[i],
            image: self.images[i].clone(),
            disparity: Some(self.disparity(i)),
        }
    }

    /// Frame `i` whose disparity prior has a seeded fraction of pixels scaled
    /// by `factor`. Returns the corrupted pixel coordinates as well.
    pub fn corrupted_frame(&self, i: usize, rate: f64, factor: f64, seed: u64) -> (Frame, Vec<(usize, usize)>) {
        let mut f = self.frame(i);
        let mut d = f.disparity.take().expect("synthetic frames carry disparity");
        let hits = corrupt_disparity(&mut d, rate, factor, pair_seed(seed, i, usize::MAX));
        f.disparity = Some(d);
        (f, hits)
    }
}

/// Scales the disparity of a seeded random subset of pixels (each pixel
/// independently with probability `rate`).
pub fn corrupt_disparity(d: &mut InverseDepthMap, rate: f64, factor: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = Vec::new();
    for y in 0..d.height() {
        for x in 0..d.width() {
            if rng.random_bool(rate.clamp(0.0, 1.0)) {
                if let Some(v) = d.get(x, y) {
                    d.set(x, y, v * factor);
                    hits.push((x, y));
                }
            }
        }
    }
    hits
}

fn pair_seed(seed: u64, i: usize, j: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [i as u64, j as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weight 1 for correct flow, 0 for injected outliers.
    Oracle,
    /// Weight 1 everywhere.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowNoise {
    /// Standard deviation of Gaussian noise added to every flow component, pixels.
    pub sigma: f64,
    /// Fraction of pixels whose flow is replaced by a gross outlier.
    pub outlier_fraction: f64,
    pub weights: WeightMode,
    pub seed: u64,
}

impl Default for FlowNoise {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            outlier_fraction: 0.0,
            weights: WeightMode::Oracle,
            seed: 0,
        }
    }
}

/// Flow generator backed by the scene's exact depth and poses.
pub struct SyntheticProvider<'a> {
    pub scene: &'a SyntheticScene,
    pub noise: FlowNoise,
}

impl<'a> SyntheticProvider<'a> {
    pub fn new(scene: &'a SyntheticScene, noise: FlowNoise) -> Self {
        Self { scene, noise }
    }
}

impl FlowObservationProvider for SyntheticProvider<'_> {
    fn observe(&self, source: usize, target: usize) -> Result<FlowObservation> {
        let s = self.scene;
        if source >= s.len() || target >= s.len() {
            return Err(Error::Provider {
                i: source,
                j: target,
                reason: format!("scene has {} frames", s.len()),
            });
        }
        let t_ij = s.poses[target].compose(&s.poses[source].inverse());
        let exact = induced_flow(&t_ij, &s.disparity(source), &s.intrinsics);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(self.noise.seed, source, target));
        let noise = rand_distr::Normal::new(0.0, self.noise.sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let (w, h) = (s.intrinsics.width, s.intrinsics.height);
        let mut flow = Grid::filled(w, h, Vector2::zeros());
        let mut weights = Grid::filled(w, h, Vector2::zeros());
        for y in 0..h {
            for x in 0..w {
                if !*exact.valid.get(x, y) {
                    continue;
                }
                let mut f = *exact.flow.get(x, y);
                if self.noise.sigma > 0.0 {
                    f += Vector2::new(rng.sample(noise), rng.sample(noise));
                }
                let outlier = self.noise.outlier_fraction > 0.0 && rng.random_bool(self.noise.outlier_fraction.min(1.0));
                if outlier {
                    let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let mag: f64 = rng.random_range(4.0..12.0);
                    f += Vector2::new(ang.cos(), ang.sin()) * mag;
                }
                flow.set(x, y, f);
                let wt = match (self.noise.weights, outlier) {
                    (WeightMode::Oracle, true) => 0.0,
                    _ => 1.0,
                };
                weights.set(x, y, Vector2::repeat(wt));
            }
        }
        Ok(FlowObservation::new(flow, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pixel, project};

    fn scene() -> SyntheticScene {
        SyntheticScene::generate(&SceneConfig {
            frames: 4,
            supersample: 1,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_pose_is_identity_and_depths_are_in_range() {
        let s = scene();
        assert!(s.poses[0].log().norm() < 1e-12);
        for d in &s.depths {
            for &z in d.as_slice() {
                assert!(z > 1.0 && z < 4.5, "depth {z}");
            }
        }
        for img in &s.images {
            assert!(img.as_slice().iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn depths_agree_with_independent_ray_cast_through_other_frame() {
        // A pixel of frame 0 back-projected and seen from frame 3 lands on the
        // surface frame 3 sees there, unless occluded.
        let s = scene();
        let k = &s.intrinsics;
        let t = s.poses[3].compose(&s.poses[0].inverse());
        let mut checked = 0;
        for y in (0..64).step_by(5) {
            for x in (0..64).step_by(5) {
                let z = *s.depths[0].get(x, y);
                let xc = t.transform(&(k.ray(&pixel(x, y)) * z));
                let Some(p) = project(&xc, k) else { continue };
                let Some((u, v)) = k.nearest_pixel(&p) else { continue };
                let zt = *s.depths[3].get(u, v);
                if (p - pixel(u, v)).norm() < 0.05 && (xc.z - zt).abs() < 0.02 * zt {
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn noiseless_flow_is_exact_and_weights_are_one() {
        let s = scene();
        let p = SyntheticProvider::new(&s, FlowNoise::default());
        let obs = p.observe(0, 2).unwrap();
        let t = s.poses[2].compose(&s.poses[0].inverse());
        let want = induced_flow(&t, &s.disparity(0), &s.intrinsics);
        assert_eq!(obs.flow, want.flow);
        assert!(obs.weights.as_slice().iter().all(|w| *w == Vector2::repeat(1.0)));
        assert!(p.observe(0, 9).is_err());
    }

    #[test]
    fn outliers_get_zero_oracle_weight_and_are_seeded() {
        let s = scene();
        let noise = FlowNoise {
            outlier_fraction: 0.1,
            seed: 7,
            ..FlowNoise::default()
        };
        let a = SyntheticProvider::new(&s, noise).observe(1, 3).unwrap();
        let b = SyntheticProvider::new(&s, noise).observe(1, 3).unwrap();
        assert_eq!(a.flow, b.flow);
        let zero = a.weights.as_slice().iter().filter(|w| w.x == 0.0).count();
        let frac = zero as f64 / a.weights.len() as f64;
        assert!((0.07..0.13).contains(&frac), "{frac}");
        let uni = SyntheticProvider::new(
            &s,
            FlowNoise {
                weights: WeightMode::Uniform,
                ..noise
            },
        )
        .observe(1, 3)
        .unwrap();
        assert_eq!(uni.flow, a.flow);
        assert!(uni.weights.as_slice().iter().all(|w| w.x == 1.0));
    }

    #[test]
    fn corruption_scales_a_seeded_fraction() {
        let s = scene();
        let (f, hits) = s.corrupted_frame(1, 0.1, 3.0, 5);
        let frac = hits.len() as f64 / 4096.0;
        assert!((0.08..0.12).contains(&frac), "{frac}");
        let d = f.disparity.unwrap();
        let clean = s.disparity(1);
        for &(x, y) in &hits {
            assert!((d.raw(x, y) - 3.0 * clean.raw(x, y)).abs() < 1e-12);
        }
        assert_eq!(s.corrupted_frame(1, 0.1, 3.0, 5).1, hits);
    }
}
