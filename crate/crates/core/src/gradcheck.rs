//! Central finite-difference checks of the rasterizer backward pass and the
//! loss gradients, shared by the test suites.
//!
//! Each check returns the worst relative error it saw; inputs are chosen away
//! from the few non-smooth points of each function so that an `FD_STEP` probe
//! measures the derivative.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Intrinsics, Pose};
use crate::grid::{Grid, RgbImage, ScalarImage};
use crate::losses::{geo_loss_from_depth, l1_loss, ms_ssim, normal_from_depth, rgb_loss, ssim, total_loss, EdgeWeighting, LossWeights};
use crate::raster::{project_gaussian, render, render_backward, MIN_TRANSMITTANCE};
use crate::splat::Gaussian;

pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const H: f64 = FD_STEP;
const PROBES: usize = 120;
const DEPTH_SCALE: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Distance of the splat's tile-binning box edges from the nearest tile
/// boundary, in pixels. Binning is piecewise constant, so a finite-difference
/// probe is only meaningful when no edge sits on a boundary.
fn boundary_margin(g: &Gaussian, setup: &Setup) -> f64 {
    let Some(s) = project_gaussian(g, &setup.pose, &setup.k) else {
        return f64::INFINITY;
    };
    let mut m = f64::INFINITY;
    for e in [s.mean2d.x - s.radius, s.mean2d.x + s.radius, s.mean2d.y - s.radius, s.mean2d.y + s.radius] {
        let v = e + 0.5;
        m = m.min((v - (v / 16.0).round() * 16.0).abs()).min((v - v.round()).abs());
    }
    m
}

/// Eight random gaussians placed away from the renderer's non-smooth points:
/// tile-binning edges, the transmittance cutoff and the floor on the
/// accumulated opacity used to normalize depth.
fn scene(seed: u64, setup: &Setup) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut out = Vec::new();
        while out.len() < 8 {
            let g = random_gaussian(&mut rng);
            if boundary_margin(&g, setup) > 0.05 {
                out.push(g);
            }
        }
        let r = render(&out, &setup.pose, &setup.k, setup.bg);
        let smooth = r.alpha.as_slice().iter().all(|&a| {
            let near_floor = (2e-7..5e-6).contains(&a);
            !near_floor && 1.0 - a > 10.0 * MIN_TRANSMITTANCE
        });
        if smooth {
            return out;
        }
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
    Gaussian {
        mean: Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.8..2.6)),
        rotation: UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random_range(0.5..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        )),
        scale: Vector3::new(rng.random_range(0.08..0.3), rng.random_range(0.08..0.3), rng.random_range(0.08..0.3)),
        opacity: rng.random_range(0.2..0.7),
        color: Vector3::new(rng.random(), rng.random(), rng.random()),
    }
}

struct Setup {
    k: Intrinsics,
    pose: Pose,
    bg: Vector3<f64>,
    dc: Grid<Vector3<f64>>,
    dd: Grid<f64>,
}

impl Setup {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        Self {
            k: Intrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32).unwrap(),
            pose: Pose::new(UnitQuaternion::from_euler_angles(0.03, -0.05, 0.02), Vector3::new(0.05, -0.02, 0.1)),
            bg: Vector3::new(0.2, 0.3, 0.1),
            dc: Grid::from_fn(32, 32, |_, _| {
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
            dd: Grid::from_fn(32, 32, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn loss(&self, gs: &[Gaussian]) -> f64 {
        let out = render(gs, &self.pose, &self.k, self.bg);
        let c: f64 = out.color.as_slice().iter().zip(self.dc.as_slice()).map(|(a, b)| a.dot(b)).sum();
        let d: f64 = out.depth.as_slice().iter().zip(self.dd.as_slice()).map(|(a, b)| a * b).sum();
        c + d
    }
}

fn central(setup: &Setup, gs: &[Gaussian], i: usize, f: impl Fn(&mut Gaussian, f64)) -> f64 {
    let mut p = gs.to_vec();
    f(&mut p[i], H);
    let mut m = gs.to_vec();
    f(&mut m[i], -H);
    (setup.loss(&p) - setup.loss(&m)) / (2.0 * H)
}

fn rel(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    let num: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(scale);
    num / den
}

fn quat_nudge(g: &mut Gaussian, c: usize, h: f64) {
    let q = g.rotation.quaternion();
    let mut v = Vector4::new(q.w, q.i, q.j, q.k);
    v[c] += h;
    g.rotation = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
}

/// Eight gaussians on a 32×32 image; every parameter of every gaussian is
/// probed against a random linear functional of color and depth.
pub fn rasterizer(seed: u64) -> f64 {
    let s = Setup::new(seed);
    let gs = scene(seed, &s);
    let out = render(&gs, &s.pose, &s.k, s.bg);
    let g = render_backward(&gs, &s.pose, &s.k, &out, &s.dc, &s.dd);
    // Relative errors are floored at a small absolute scale so that
    // near-zero gradients do not dominate.
    let floor = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..gs.len() {
        let mean: Vec<f64> = (0..3).map(|a| central(&s, &gs, i, |g, h| g.mean[a] += h)).collect();
        worst = worst.max(rel(g.mean[i].as_slice(), &mean, floor));
        let scale: Vec<f64> = (0..3).map(|a| central(&s, &gs, i, |g, h| g.scale[a] += h)).collect();
        worst = worst.max(rel(g.scale[i].as_slice(), &scale, floor));
        let rot: Vec<f64> = (0..4).map(|c| central(&s, &gs, i, |g, h| quat_nudge(g, c, h))).collect();
        worst = worst.max(rel(g.rotation[i].as_slice(), &rot, floor));
        let op = central(&s, &gs, i, |g, h| g.opacity += h);
        worst = worst.max(rel(&[g.opacity[i]], &[op], floor));
        let col: Vec<f64> = (0..3).map(|a| central(&s, &gs, i, |g, h| g.color[a] += h)).collect();
        worst = worst.max(rel(g.color[i].as_slice(), &col, floor));
    }
    worst
}

fn image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    Grid::from_fn(w, h, |_, _| {
        Vector3::new(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95))
    })
}

/// A target whose every channel differs from `img` by at least 0.01, so an
/// `h`-sized probe never crosses an L1 tie.
fn target_away_from_ties(rng: &mut ChaCha8Rng, img: &RgbImage) -> RgbImage {
    img.map(|p| {
        p.map(|v| {
            let d: f64 = rng.random_range(0.01..0.3);
            if rng.random_bool(0.5) {
                v + d
            } else {
                v - d
            }
        })
    })
}

/// A tilted, curved and twisted surface, resampled until every per-channel
/// normal gradient magnitude stays clear of the kink at zero. Normals do not
/// change under uniform depth scaling, so the surface sits far away: an
/// `h`-sized depth probe then moves normals much less than they vary between
/// neighboring pixels.
fn smooth_depth(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ScalarImage {
    let k = intrinsics(w, h);
    loop {
        let (a, b) = (rng.random_range(0.02..0.04), rng.random_range(0.015..0.03));
        let (c, d, e) = (rng.random_range(5e-4..1e-3), rng.random_range(5e-4..1e-3), rng.random_range(-8e-4..8e-4));
        let depth = Grid::from_fn(w, h, |x, y| {
            let (u, v) = (x as f64, y as f64);
            DEPTH_SCALE * (2.0 + a * u + b * v + c * u * u + d * v * v + e * u * v)
        });
        if min_channel_gradient(&depth, &k) > 5e-4 {
            return depth;
        }
    }
}

fn min_channel_gradient(depth: &ScalarImage, k: &Intrinsics) -> f64 {
    let nm = normal_from_depth(depth, k);
    let (w, h) = depth.dims();
    let mut m = f64::INFINITY;
    for y in 0..h {
        for x in 0..w {
            // Both differences vanish identically at the last pixel.
            if x + 1 == w && y + 1 == h {
                continue;
            }
            let n = nm.normals.get(x, y);
            let gx = if x + 1 < w { nm.normals.get(x + 1, y) - n } else { Vector3::zeros() };
            let gy = if y + 1 < h { nm.normals.get(x, y + 1) - n } else { Vector3::zeros() };
            for c in 0..3 {
                m = m.min((gx[c] * gx[c] + gy[c] * gy[c]).sqrt());
            }
        }
    }
    m
}

fn intrinsics(w: usize, h: usize) -> Intrinsics {
    Intrinsics::new(30.0, 32.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

/// Worst relative error over random probes, normalized per entry by the
/// larger of the two estimates with a floor tied to the gradient's scale.
fn worst_error(analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let i = rng.random_range(0..analytic.len());
        let fd = (f(i, H) - f(i, -H)) / (2.0 * H);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

fn flatten(img: &RgbImage) -> Vec<f64> {
    img.as_slice().iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn perturbed(img: &RgbImage, i: usize, d: f64) -> RgbImage {
    let mut out = img.clone();
    out.as_mut_slice()[i / 3][i % 3] += d;
    out
}

fn color_loss(w: usize, h: usize, seed: u64, loss: impl Fn(&RgbImage, &RgbImage) -> (f64, RgbImage)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = image(&mut rng, w, h);
    let y = target_away_from_ties(&mut rng, &x);
    let (_, g) = loss(&x, &y);
    worst_error(&flatten(&g), |i, d| loss(&perturbed(&x, i, d), &y).0, seed)
}

pub fn l1(seed: u64) -> f64 {
    color_loss(32, 32, seed, |a, b| {
        let l = l1_loss(a, b).expect("same size");
        (l.value, l.d_color.expect("color gradient"))
    })
}

pub fn ssim_term(seed: u64) -> f64 {
    color_loss(32, 32, seed, |a, b| {
        let l = ssim(a, b).expect("same size");
        (l.value, l.d_color.expect("color gradient"))
    })
}

/// Three scales of an 11×11 window need at least 44×44 pixels.
pub fn ms_ssim_term(seed: u64) -> f64 {
    color_loss(45, 44, seed, |a, b| {
        let l = ms_ssim(a, b).expect("large enough");
        (l.value, l.d_color.expect("color gradient"))
    })
}

pub fn rgb(seed: u64) -> f64 {
    let w = LossWeights::default();
    color_loss(44, 44, seed, |a, b| {
        let l = rgb_loss(a, b, &w).expect("large enough");
        (l.value, l.d_color.expect("color gradient"))
    })
}

pub fn geo(seed: u64, weighting: EdgeWeighting) -> f64 {
    let (w, h) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = image(&mut rng, w, h);
    let depth = smooth_depth(&mut rng, w, h);
    let k = intrinsics(w, h);
    let g = geo_loss_from_depth(&depth, &img, &k, weighting)
        .expect("same size")
        .d_depth
        .expect("depth gradient");
    worst_error(
        g.as_slice(),
        |i, d| {
            let mut dd = depth.clone();
            dd.as_mut_slice()[i] += d;
            geo_loss_from_depth(&dd, &img, &k, weighting).expect("same size").value
        },
        seed,
    )
}

/// Worst errors of the combined objective with respect to color and depth.
pub fn total(seed: u64) -> (f64, f64) {
    let (w, h) = (44, 44);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = image(&mut rng, w, h);
    let target = target_away_from_ties(&mut rng, &color);
    let depth = smooth_depth(&mut rng, w, h);
    let k = intrinsics(w, h);
    let weights = LossWeights {
        weighting: EdgeWeighting::Smooth { sigma: 0.5 },
        ..LossWeights::default()
    };
    let value = |c: &RgbImage, d: &ScalarImage| total_loss(c, d, &target, &k, &weights).expect("large enough").value;
    let l = total_loss(&color, &depth, &target, &k, &weights).expect("large enough");
    let gc = flatten(l.d_color.as_ref().expect("color gradient"));
    let worst_c = worst_error(&gc, |i, d| value(&perturbed(&color, i, d), &depth), seed);
    let gd = l.d_depth.expect("depth gradient");
    let worst_d = worst_error(
        gd.as_slice(),
        |i, d| {
            let mut dd = depth.clone();
            dd.as_mut_slice()[i] += d;
            value(&color, &dd)
        },
        seed + 1,
    );
    (worst_c, worst_d)
}

/// The whole suite with fixed seeds.
pub fn all() -> Vec<GradCheck> {
    let mut out = Vec::new();
    let mut push = |name: String, worst: f64| out.push(GradCheck { name, worst });
    for seed in [1, 2, 3] {
        push(format!("rasterizer seed {seed}"), rasterizer(seed));
    }
    push("l1".into(), l1(1));
    for seed in [2, 3] {
        push(format!("ssim seed {seed}"), ssim_term(seed));
    }
    push("ms-ssim".into(), ms_ssim_term(4));
    push("rgb".into(), rgb(5));
    push("geo power".into(), geo(6, EdgeWeighting::Power { q: 2.0 }));
    push("geo smooth".into(), geo(7, EdgeWeighting::Smooth { sigma: 0.5 }));
    let (c, d) = total(8);
    push("total color".into(), c);
    push("total depth".into(), d);
    out
}
