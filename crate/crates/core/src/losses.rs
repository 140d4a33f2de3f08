//! Photometric and edge-aware geometric losses with analytic gradients.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pixel, Intrinsics};
use crate::grid::{Grid, RgbImage, ScalarImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_SCALES: usize = 3;
/// Width of the smooth edge weighting when none is configured.
pub const DEFAULT_SMOOTH_SIGMA: f64 = 0.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EdgeWeighting {
    /// `|x − 1|^q`
    Power { q: f64 },
    /// `exp(−(x − 1)² / σ²)`
    Smooth { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ms_ssim: f64,
    pub geo: f64,
    pub weighting: EdgeWeighting,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ms_ssim: 0.2,
            geo: 0.1,
            weighting: EdgeWeighting::Power { q: 2.0 },
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ms_ssim) {
            return Err(Error::Config("ms-ssim weight must lie in [0, 1]".into()));
        }
        if !(self.geo >= 0.0) {
            return Err(Error::Config("geometry weight must be non-negative".into()));
        }
        match self.weighting {
            EdgeWeighting::Smooth { sigma } if !(sigma > 0.0) => Err(Error::Config("smooth weighting needs sigma > 0".into())),
            EdgeWeighting::Power { q } if !(q > 0.0) => Err(Error::Config("power weighting needs q > 0".into())),
            _ => Ok(()),
        }
    }
}

/// Scalar value plus gradients w.r.t. the rendered color and/or depth.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub d_color: Option<RgbImage>,
    pub d_depth: Option<ScalarImage>,
}

fn check_dims<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: b.dims(),
            actual: a.dims(),
        })
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(rendered: &RgbImage, target: &RgbImage) -> Result<LossValue> {
    check_dims(rendered, target)?;
    let n = (rendered.len() * 3) as f64;
    let mut value = 0.0;
    let grad = Grid::from_vec(
        rendered.width(),
        rendered.height(),
        rendered
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(r, t)| {
                let d = r - t;
                value += d.abs().sum();
                d.map(|v| {
                    if v > 0.0 {
                        1.0 / n
                    } else if v < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
            })
            .collect(),
    );
    Ok(LossValue {
        value: value / n,
        d_color: Some(grad),
        d_depth: None,
    })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode correlation with the SSIM window.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters window-space values back to pixels.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Sum of local SSIM over all windows of one channel, and its gradient w.r.t. `x`.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, grad: bool) -> (f64, usize, Option<Vec<f64>>) {
    let k = gaussian_kernel();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let exx = filter_valid(&sq(x, x), w, h, &k);
    let eyy = filter_valid(&sq(y, y), w, h, &k);
    let exy = filter_valid(&sq(x, y), w, h, &k);
    let n = mx.len();
    let mut total = 0.0;
    let (mut g_mx, mut g_exx, mut g_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for o in 0..n {
        let (a, b) = (mx[o], my[o]);
        let a1 = 2.0 * a * b + C1;
        let a2 = 2.0 * (exy[o] - a * b) + C2;
        let b1 = a * a + b * b + C1;
        let b2 = (exx[o] - a * a) + (eyy[o] - b * b) + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if grad {
            g_mx[o] = s * (2.0 * b / a1 - 2.0 * a / b1 - 2.0 * b / a2 + 2.0 * a / b2);
            g_exx[o] = -s / b2;
            g_exy[o] = 2.0 * s / a2;
        }
    }
    if !grad {
        return (total, n, None);
    }
    let bm = filter_valid_adjoint(&g_mx, w, h, &k);
    let bxx = filter_valid_adjoint(&g_exx, w, h, &k);
    let bxy = filter_valid_adjoint(&g_exy, w, h, &k);
    let g = (0..w * h).map(|p| bm[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p]).collect();
    (total, n, Some(g))
}

fn channels(img: &RgbImage) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|c| img.as_slice().iter().map(|p| p[c]).collect())
}

fn ssim_impl(rendered: &RgbImage, target: &RgbImage, grad: bool) -> Result<(f64, Option<RgbImage>)> {
    check_dims(rendered, target)?;
    let (w, h) = rendered.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::UndersizedImage {
            width: w,
            height: h,
            min: SSIM_WINDOW,
        });
    }
    let xs = channels(rendered);
    let ys = channels(target);
    let per: Vec<_> = (0..3).into_par_iter().map(|c| ssim_channel(&xs[c], &ys[c], w, h, grad)).collect();
    let count: usize = per.iter().map(|p| p.1).sum();
    let value = per.iter().map(|p| p.0).sum::<f64>() / count as f64;
    let g = grad.then(|| {
        let inv = 1.0 / count as f64;
        let gs: Vec<&Vec<f64>> = per.iter().map(|p| p.2.as_ref().unwrap()).collect();
        Grid::from_fn(w, h, |x, y| {
            let i = y * w + x;
            Vector3::new(gs[0][i], gs[1][i], gs[2][i]) * inv
        })
    });
    Ok((value, g))
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, valid windows only,
/// averaged over channels). The gradient is w.r.t. `rendered`.
pub fn ssim(rendered: &RgbImage, target: &RgbImage) -> Result<LossValue> {
    let (value, g) = ssim_impl(rendered, target, true)?;
    Ok(LossValue {
        value,
        d_color: g,
        d_depth: None,
    })
}

/// 2×2 average pooling with stride 2; a trailing odd row or column is dropped.
pub fn avg_pool2(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    Grid::from_fn(w, h, |x, y| {
        (img.get(2 * x, 2 * y) + img.get(2 * x + 1, 2 * y) + img.get(2 * x, 2 * y + 1) + img.get(2 * x + 1, 2 * y + 1)) * 0.25
    })
}

fn avg_pool2_adjoint(g: &RgbImage, w: usize, h: usize) -> RgbImage {
    let mut out = Grid::filled(w, h, Vector3::zeros());
    for y in 0..g.height() {
        for x in 0..g.width() {
            let v = g.get(x, y) * 0.25;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                *out.get_mut(2 * x + dx, 2 * y + dy) += v;
            }
        }
    }
    out
}

/// Equal-weight mean of SSIM over the image and two successive 2×2 average
/// poolings.
pub fn ms_ssim(rendered: &RgbImage, target: &RgbImage) -> Result<LossValue> {
    check_dims(rendered, target)?;
    let min = SSIM_WINDOW << (MS_SSIM_SCALES - 1);
    let (w, h) = rendered.dims();
    if w < min || h < min {
        return Err(Error::UndersizedImage { width: w, height: h, min });
    }
    let mut xs = vec![rendered.clone()];
    let mut ys = vec![target.clone()];
    for s in 1..MS_SSIM_SCALES {
        xs.push(avg_pool2(&xs[s - 1]));
        ys.push(avg_pool2(&ys[s - 1]));
    }
    let scale = 1.0 / MS_SSIM_SCALES as f64;
    let mut value = 0.0;
    let mut grad: Option<RgbImage> = None;
    for s in (0..MS_SSIM_SCALES).rev() {
        let (v, g) = ssim_impl(&xs[s], &ys[s], true)?;
        value += v * scale;
        let mut g = g.unwrap().map(|p| p * scale);
        if let Some(coarser) = grad.take() {
            let up = avg_pool2_adjoint(&coarser, xs[s].width(), xs[s].height());
            for (a, b) in g.as_mut_slice().iter_mut().zip(up.as_slice()) {
                *a += b;
            }
        }
        grad = Some(g);
    }
    Ok(LossValue {
        value,
        d_color: grad,
        d_depth: None,
    })
}

/// `(1 − λ)·L1 + λ·(1 − MS-SSIM)`.
pub fn rgb_loss(rendered: &RgbImage, target: &RgbImage, w: &LossWeights) -> Result<LossValue> {
    let l1 = l1_loss(rendered, target)?;
    let lam = w.ms_ssim;
    if lam == 0.0 {
        return Ok(l1);
    }
    let ms = ms_ssim(rendered, target)?;
    let g1 = l1.d_color.unwrap();
    let g2 = ms.d_color.unwrap();
    let grad = Grid::from_vec(
        g1.width(),
        g1.height(),
        g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| a * (1.0 - lam) - b * lam).collect(),
    );
    Ok(LossValue {
        value: (1.0 - lam) * l1.value + lam * (1.0 - ms.value),
        d_color: Some(grad),
        d_depth: None,
    })
}

/// Unit camera-space normals facing the camera, with a validity flag.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub normals: Grid<Vector3<f64>>,
    pub valid: Grid<bool>,
}

/// Central-difference stencil along one axis: `(lo, hi, 1/spacing)`.
#[inline]
fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        (i, i, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

fn positions(depth: &ScalarImage, k: &Intrinsics) -> Grid<Vector3<f64>> {
    Grid::from_fn(depth.width(), depth.height(), |x, y| k.ray(&pixel(x, y)) * *depth.get(x, y))
}

/// Normals of the back-projected position map:
/// `N = −normalize(∂u P × ∂v P)`, central differences inside and one-sided at
/// borders. A pixel is invalid if any stencil depth is non-positive or the
/// cross product vanishes.
pub fn normal_from_depth(depth: &ScalarImage, k: &Intrinsics) -> NormalMap {
    let (w, h) = depth.dims();
    let p = positions(depth, k);
    let mut normals = Grid::filled(w, h, Vector3::zeros());
    let mut valid = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let (xl, xh, sx) = stencil(x, w);
            let (yl, yh, sy) = stencil(y, h);
            let ok = [(x, y), (xl, y), (xh, y), (x, yl), (x, yh)].iter().all(|&(a, b)| *depth.get(a, b) > 0.0);
            if !ok || sx == 0.0 || sy == 0.0 {
                continue;
            }
            let du = (p.get(xh, y) - p.get(xl, y)) * sx;
            let dv = (p.get(x, yh) - p.get(x, yl)) * sy;
            let c = du.cross(&dv);
            let n = c.norm();
            if n > 1e-300 && n.is_finite() {
                normals.set(x, y, -c / n);
                valid.set(x, y, true);
            }
        }
    }
    NormalMap { normals, valid }
}

/// Pulls a gradient on the normal map back to the depth image.
pub fn normal_from_depth_backward(depth: &ScalarImage, k: &Intrinsics, nm: &NormalMap, d_normals: &Grid<Vector3<f64>>) -> ScalarImage {
    let (w, h) = depth.dims();
    let p = positions(depth, k);
    let mut g = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            if !nm.valid.get(x, y) {
                continue;
            }
            let gn = d_normals.get(x, y);
            if gn.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (xl, xh, sx) = stencil(x, w);
            let (yl, yh, sy) = stencil(y, h);
            let du = (p.get(xh, y) - p.get(xl, y)) * sx;
            let dv = (p.get(x, yh) - p.get(x, yl)) * sy;
            let c = du.cross(&dv);
            let n = c.norm();
            let chat = c / n;
            // N = −c/|c|  ⇒  dL/dc = −(I − ĉĉᵀ) g / |c|
            let gc = -(gn - chat * chat.dot(gn)) / n;
            // c = du × dv
            let g_du = dv.cross(&gc);
            let g_dv = gc.cross(&du);
            let mut add = |a: usize, b: usize, gp: Vector3<f64>| {
                *g.get_mut(a, b) += gp.dot(&k.ray(&pixel(a, b)));
            };
            add(xh, y, g_du * sx);
            add(xl, y, -g_du * sx);
            add(x, yh, g_dv * sy);
            add(x, yl, -g_dv * sy);
        }
    }
    g
}

/// Elementwise edge weight.
pub fn edge_weight(grad_mag: &ScalarImage, weighting: EdgeWeighting) -> ScalarImage {
    grad_mag.map(|&x| edge_weight_at(x, weighting))
}

#[inline]
pub fn edge_weight_at(x: f64, weighting: EdgeWeighting) -> f64 {
    match weighting {
        EdgeWeighting::Power { q } => (x - 1.0).abs().powf(q),
        EdgeWeighting::Smooth { sigma } => (-(x - 1.0).powi(2) / (sigma * sigma)).exp(),
    }
}

/// Forward-difference gradient magnitude of the gray image, divided by its
/// 99th percentile and clamped to `[0, 1]`.
pub fn image_gradient_magnitude(image: &RgbImage) -> ScalarImage {
    let gray = image.gray();
    let (w, h) = gray.dims();
    let mag = Grid::from_fn(w, h, |x, y| {
        let c = *gray.get(x, y);
        let gx = if x + 1 < w { gray.get(x + 1, y) - c } else { 0.0 };
        let gy = if y + 1 < h { gray.get(x, y + 1) - c } else { 0.0 };
        (gx * gx + gy * gy).sqrt()
    });
    let mut sorted = mag.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = if sorted.is_empty() {
        0.0
    } else {
        sorted[((sorted.len() - 1) as f64 * 0.99).round() as usize]
    };
    if p99 <= 0.0 {
        return mag.map(|_| 0.0);
    }
    mag.map(|&m| (m / p99).clamp(0.0, 1.0))
}

/// Forward differences of the normal map at `(x, y)`, or `None` when a
/// neighbor needed by the stencil is invalid.
#[inline]
fn normal_diffs(nm: &NormalMap, x: usize, y: usize) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if !nm.valid.get(x, y) {
        return None;
    }
    let (w, h) = nm.normals.dims();
    let n = nm.normals.get(x, y);
    let gx = if x + 1 < w {
        if !nm.valid.get(x + 1, y) {
            return None;
        }
        nm.normals.get(x + 1, y) - n
    } else {
        Vector3::zeros()
    };
    let gy = if y + 1 < h {
        if !nm.valid.get(x, y + 1) {
            return None;
        }
        nm.normals.get(x, y + 1) - n
    } else {
        Vector3::zeros()
    };
    Some((gx, gy))
}

/// Edge-aware normal smoothness: mean over pixels of `|∇N| · ω(|∇I|)`, where
/// `|∇N|` averages the forward-difference gradient magnitude of the three
/// normal channels. Returns the value and its gradient w.r.t. the normals.
pub fn geo_loss(nm: &NormalMap, image: &RgbImage, weighting: EdgeWeighting) -> Result<(f64, Grid<Vector3<f64>>)> {
    check_dims(&nm.normals, image)?;
    let (w, h) = image.dims();
    let omega = edge_weight(&image_gradient_magnitude(image), weighting);
    let inv = 1.0 / (w * h) as f64;
    let mut value = 0.0;
    let mut g = Grid::filled(w, h, Vector3::zeros());
    for y in 0..h {
        for x in 0..w {
            let Some((gx, gy)) = normal_diffs(nm, x, y) else { continue };
            let om = *omega.get(x, y);
            let mut gnx = Vector3::zeros();
            let mut gny = Vector3::zeros();
            for c in 0..3 {
                let m = (gx[c] * gx[c] + gy[c] * gy[c]).sqrt();
                value += om * m / 3.0 * inv;
                if m > 0.0 {
                    let s = om / 3.0 * inv / m;
                    gnx[c] = s * gx[c];
                    gny[c] = s * gy[c];
                }
            }
            if x + 1 < w {
                *g.get_mut(x + 1, y) += gnx;
            }
            if y + 1 < h {
                *g.get_mut(x, y + 1) += gny;
            }
            *g.get_mut(x, y) -= gnx + gny;
        }
    }
    Ok((value, g))
}

/// Geometry loss of a depth image with its gradient w.r.t. depth.
pub fn geo_loss_from_depth(depth: &ScalarImage, image: &RgbImage, k: &Intrinsics, weighting: EdgeWeighting) -> Result<LossValue> {
    check_dims(depth, image)?;
    let nm = normal_from_depth(depth, k);
    let (value, gn) = geo_loss(&nm, image, weighting)?;
    Ok(LossValue {
        value,
        d_color: None,
        d_depth: Some(normal_from_depth_backward(depth, k, &nm, &gn)),
    })
}

/// `L_rgb + λ_geo · L_geo`, with the geometry term evaluated on `depth` and
/// weighted by the target image's edges.
pub fn total_loss(color: &RgbImage, depth: &ScalarImage, target: &RgbImage, k: &Intrinsics, w: &LossWeights) -> Result<LossValue> {
    let rgb = rgb_loss(color, target, w)?;
    if w.geo == 0.0 {
        return Ok(LossValue {
            value: rgb.value,
            d_color: rgb.d_color,
            d_depth: Some(depth.map(|_| 0.0)),
        });
    }
    let geo = geo_loss_from_depth(depth, target, k, w.weighting)?;
    Ok(LossValue {
        value: rgb.value + w.geo * geo.value,
        d_color: rgb.d_color,
        d_depth: Some(geo.d_depth.unwrap().map(|g| g * w.geo)),
    })
}
