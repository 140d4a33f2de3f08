//! Tile-based CPU splatting renderer and its exact reverse-mode gradient.
//!
//! Splats are composited front to back per 16×16 tile. Each tile holds the
//! splats whose 3σ box touches it, sorted by camera depth with the gaussian
//! index as tie-break, so output does not depend on input order or thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::geometry::{Intrinsics, Pose, EPS_Z};
use crate::grid::{Grid, RgbImage, ScalarImage};
use crate::splat::Gaussian;

pub const TILE: usize = 16;
/// Screen-space covariance floor (px²).
pub const AA_FLOOR: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
const DEPTH_NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// 3σ radius of the footprint in pixels.
    pub radius: f64,
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
fn rotation_of(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q / q.norm();
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn quat_vec(g: &Gaussian) -> Vector4<f64> {
    let q = g.rotation.quaternion();
    Vector4::new(q.w, q.i, q.j, q.k)
}

fn projection_jacobian(t: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * t.x * iz * iz, 0.0, k.fy * iz, -k.fy * t.y * iz * iz)
}

/// EWA projection of one gaussian, or `None` if it is behind the camera or
/// its 3σ footprint lies entirely outside the image.
pub fn project_gaussian(g: &Gaussian, pose: &Pose, k: &Intrinsics) -> Option<Splat2D> {
    let t = pose.transform(&g.mean);
    if t.z <= EPS_Z {
        return None;
    }
    let w = pose.rotation_matrix();
    let r = rotation_of(&quat_vec(g));
    let m = r * Matrix3::from_diagonal(&g.scale);
    let sigma = m * m.transpose();
    let j = projection_jacobian(&t, k);
    let cov2d = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * AA_FLOOR;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let (wf, hf) = (k.width as f64, k.height as f64);
    if mean2d.x + radius < -0.5 || mean2d.x - radius > wf - 0.5 || mean2d.y + radius < -0.5 || mean2d.y - radius > hf - 0.5 {
        return None;
    }
    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        color: g.color,
        opacity: g.opacity,
        radius,
    })
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    pub background: Vector3<f64>,
    /// Projected splat per gaussian (`None` when culled).
    pub splats: Vec<Option<Splat2D>>,
    /// Sorted splat indices per tile, row-major over tiles.
    pub tiles: Vec<Vec<usize>>,
    /// Number of entries of the pixel's tile list that were composited.
    pub n_contrib: Grid<usize>,
}

impl RenderOutput {
    pub fn tiles_x(&self) -> usize {
        self.color.width().div_ceil(TILE)
    }

    /// Gaussian indices composited at `(x, y)`, front to back.
    pub fn contributors(&self, x: usize, y: usize) -> &[usize] {
        let t = (y / TILE) * self.tiles_x() + x / TILE;
        &self.tiles[t][..*self.n_contrib.get(x, y)]
    }
}

#[inline]
fn splat_alpha(s: &Splat2D, p: &Vector2<f64>) -> (f64, f64, Vector2<f64>) {
    let d = p - s.mean2d;
    let power = -0.5 * d.dot(&(s.conic * d));
    let g = power.exp();
    (s.opacity * g, g, d)
}

fn bin_tiles(splats: &[Option<Splat2D>], w: usize, h: usize) -> Vec<Vec<usize>> {
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut tiles = vec![Vec::new(); tx * ty];
    for (idx, s) in splats.iter().enumerate() {
        let Some(s) = s else { continue };
        let lo_x = ((s.mean2d.x - s.radius + 0.5).floor().max(0.0) as usize) / TILE;
        let hi_x = (((s.mean2d.x + s.radius + 0.5).floor().max(0.0) as usize).min(w - 1)) / TILE;
        let lo_y = ((s.mean2d.y - s.radius + 0.5).floor().max(0.0) as usize) / TILE;
        let hi_y = (((s.mean2d.y + s.radius + 0.5).floor().max(0.0) as usize).min(h - 1)) / TILE;
        for ty_ in lo_y..=hi_y.min(ty - 1) {
            for tx_ in lo_x..=hi_x.min(tx - 1) {
                tiles[ty_ * tx + tx_].push(idx);
            }
        }
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (da, db) = (splats[a].as_ref().unwrap().depth, splats[b].as_ref().unwrap().depth);
            da.total_cmp(&db).then(a.cmp(&b))
        });
    }
    tiles
}

struct TilePixels {
    color: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    n: Vec<usize>,
}

/// Renders color, expected depth and accumulated opacity.
pub fn render(gaussians: &[Gaussian], pose: &Pose, k: &Intrinsics, background: Vector3<f64>) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let splats: Vec<Option<Splat2D>> = gaussians.par_iter().map(|g| project_gaussian(g, pose, k)).collect();
    let tiles = bin_tiles(&splats, w, h);
    let tx = w.div_ceil(TILE);
    let per_tile: Vec<TilePixels> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (x0, y0) = ((t % tx) * TILE, (t / tx) * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            let mut out = TilePixels {
                color: Vec::new(),
                depth: Vec::new(),
                alpha: Vec::new(),
                n: Vec::new(),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Vector2::new(x as f64, y as f64);
                    let mut tr = 1.0;
                    let mut c = Vector3::zeros();
                    let (mut zs, mut acc) = (0.0, 0.0);
                    let mut n = 0;
                    for (pos, &idx) in list.iter().enumerate() {
                        let s = splats[idx].as_ref().unwrap();
                        let a = splat_alpha(s, &p).0.min(MAX_ALPHA);
                        let next = tr * (1.0 - a);
                        if next < MIN_TRANSMITTANCE {
                            break;
                        }
                        let wgt = a * tr;
                        c += s.color * wgt;
                        zs += s.depth * wgt;
                        acc += wgt;
                        tr = next;
                        n = pos + 1;
                    }
                    out.color.push(c + background * tr);
                    out.depth.push(zs / acc.max(DEPTH_NORM_FLOOR));
                    out.alpha.push(1.0 - tr);
                    out.n.push(n);
                }
            }
            out
        })
        .collect();

    let mut color = Grid::filled(w, h, background);
    let mut depth = Grid::filled(w, h, 0.0);
    let mut alpha = Grid::filled(w, h, 0.0);
    let mut n_contrib = Grid::filled(w, h, 0usize);
    for (t, px) in per_tile.into_iter().enumerate() {
        let (x0, y0) = ((t % tx) * TILE, (t / tx) * TILE);
        let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                color.set(x, y, px.color[i]);
                depth.set(x, y, px.depth[i]);
                alpha.set(x, y, px.alpha[i]);
                n_contrib.set(x, y, px.n[i]);
                i += 1;
            }
        }
    }
    RenderOutput {
        color,
        depth,
        alpha,
        background,
        splats,
        tiles,
        n_contrib,
    }
}

/// Per-gaussian loss gradients. Rotation gradients are w.r.t. the quaternion
/// components `(w, x, y, z)` taken through normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffers {
    pub mean: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl GradBuffers {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
}

impl std::ops::AddAssign for SplatGrad {
    fn add_assign(&mut self, o: Self) {
        self.mean2d += o.mean2d;
        self.cov2d += o.cov2d;
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Reverse pass of [`render`] for upstream gradients on the color and depth images.
pub fn render_backward(gaussians: &[Gaussian], pose: &Pose, k: &Intrinsics, fwd: &RenderOutput, d_color: &RgbImage, d_depth: &ScalarImage) -> GradBuffers {
    let (w, h) = (k.width, k.height);
    let tx = w.div_ceil(TILE);
    let bg = fwd.background;
    let per_tile: Vec<Vec<SplatGrad>> = fwd
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![SplatGrad::default(); list.len()];
            let (x0, y0) = ((t % tx) * TILE, (t / tx) * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let n = *fwd.n_contrib.get(x, y);
                    if n == 0 {
                        continue;
                    }
                    let p = Vector2::new(x as f64, y as f64);
                    let g_c = *d_color.get(x, y);
                    let g_d = *d_depth.get(x, y);
                    // Recompute the forward quantities of this pixel.
                    let mut a = Vec::with_capacity(n);
                    let mut ts = Vec::with_capacity(n);
                    let mut tr = 1.0;
                    let (mut zs, mut tot) = (0.0, 0.0);
                    for &idx in &list[..n] {
                        let s = fwd.splats[idx].as_ref().unwrap();
                        let ak = splat_alpha(s, &p).0.min(MAX_ALPHA);
                        a.push(ak);
                        ts.push(tr);
                        zs += s.depth * ak * tr;
                        tot += ak * tr;
                        tr *= 1.0 - ak;
                    }
                    let denom = tot.max(DEPTH_NORM_FLOOR);
                    let g_zs = g_d / denom;
                    let g_tot = if tot > DEPTH_NORM_FLOOR { -g_d * zs / (tot * tot) } else { 0.0 };
                    // Suffix: Σ_{m>k} g_w(m)·w_m plus the background term.
                    let mut suffix = g_c.dot(&bg) * tr;
                    for pos in (0..n).rev() {
                        let idx = list[pos];
                        let s = fwd.splats[idx].as_ref().unwrap();
                        let (ak, tk) = (a[pos], ts[pos]);
                        let wk = ak * tk;
                        let g_w = g_c.dot(&s.color) + g_zs * s.depth + g_tot;
                        let g_a = tk * g_w - suffix / (1.0 - ak);
                        suffix += g_w * wk;
                        let slot = &mut acc[pos];
                        slot.color += g_c * wk;
                        slot.depth += g_zs * wk;
                        let (raw, gauss, d) = splat_alpha(s, &p);
                        if raw > MAX_ALPHA {
                            continue;
                        }
                        slot.opacity += gauss * g_a;
                        let g_g = s.opacity * g_a;
                        let qd = s.conic * d;
                        slot.mean2d += qd * (gauss * g_g);
                        // dG/dQ = −½ G d dᵀ, dL/dΣ2 = −Q (dL/dQ) Q
                        let g_q = d * d.transpose() * (-0.5 * gauss * g_g);
                        slot.cov2d -= s.conic * g_q * s.conic;
                    }
                }
            }
            acc
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); gaussians.len()];
    for (list, acc) in fwd.tiles.iter().zip(per_tile) {
        for (&idx, g) in list.iter().zip(acc) {
            splat_grads[idx] += g;
        }
    }

    let wmat = pose.rotation_matrix();
    let mut out = GradBuffers::zeros(gaussians.len());
    for (idx, (g, sg)) in gaussians.iter().zip(&splat_grads).enumerate() {
        if fwd.splats[idx].is_none() {
            continue;
        }
        let t = pose.transform(&g.mean);
        let (iz, iz2) = (1.0 / t.z, 1.0 / (t.z * t.z));
        let mut g_t = Vector3::new(
            k.fx * iz * sg.mean2d.x,
            k.fy * iz * sg.mean2d.y,
            -k.fx * t.x * iz2 * sg.mean2d.x - k.fy * t.y * iz2 * sg.mean2d.y + sg.depth,
        );

        let q = quat_vec(g);
        let r = rotation_of(&q);
        let mx = r * Matrix3::from_diagonal(&g.scale);
        let sigma = mx * mx.transpose();
        let m = wmat * sigma * wmat.transpose();
        let j = projection_jacobian(&t, k);
        let g_cov = 0.5 * (sg.cov2d + sg.cov2d.transpose());
        let g_m = j.transpose() * g_cov * j;
        let g_j = 2.0 * g_cov * j * m;
        let iz3 = iz2 * iz;
        g_t.x += g_j[(0, 2)] * (-k.fx * iz2);
        g_t.y += g_j[(1, 2)] * (-k.fy * iz2);
        g_t.z += g_j[(0, 0)] * (-k.fx * iz2) + g_j[(0, 2)] * (2.0 * k.fx * t.x * iz3) + g_j[(1, 1)] * (-k.fy * iz2) + g_j[(1, 2)] * (2.0 * k.fy * t.y * iz3);
        out.mean[idx] = wmat.transpose() * g_t;

        let g_sigma = wmat.transpose() * g_m * wmat;
        let g_mx = 2.0 * g_sigma * mx;
        out.scale[idx] = Vector3::from_fn(|i, _| (0..3).map(|row| r[(row, i)] * g_mx[(row, i)]).sum());
        let g_r = g_mx * Matrix3::from_diagonal(&g.scale);
        out.rotation[idx] = quaternion_grad(&q, &g_r);
        out.opacity[idx] = sg.opacity;
        out.color[idx] = sg.color;
    }
    out
}

/// Chains `dL/dR` through the rotation formula and quaternion normalization.
fn quaternion_grad(q: &Vector4<f64>, g_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let n = q / norm;
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_n = Vector4::new(g_r.dot(&dw), g_r.dot(&dx), g_r.dot(&dy), g_r.dot(&dz));
    (g_n - n * n.dot(&g_n)) / norm
}
