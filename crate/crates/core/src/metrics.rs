//! Trajectory and image quality metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::grid::RgbImage;
use crate::losses::{ms_ssim, ssim, MS_SSIM_SCALES, SSIM_WINDOW};

pub const PSNR_CAP: f64 = 99.0;

/// Similarity transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity aligning `src` onto `dst` (closed form via SVD of
/// the cross-covariance). Degenerate inputs with no spread fall back to a pure
/// translation.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::Input(format!("cannot align {} points onto {}", src.len(), dst.len())));
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    if var_s < 1e-24 {
        return Ok(Sim3 {
            translation: mu_d - mu_s,
            ..Sim3::identity()
        });
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / var_s;
    Ok(Sim3 {
        scale,
        rotation,
        translation: mu_d - rotation * mu_s * scale,
    })
}

/// Camera centre in world coordinates of a camera-from-world pose.
pub fn camera_center(p: &Pose) -> Vector3<f64> {
    p.inverse().translation
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ate {
    pub rmse: f64,
    pub std: f64,
    pub alignment: Sim3,
}

/// Absolute trajectory error of camera centres after similarity alignment of
/// the estimate onto the ground truth. Needs at least three pose pairs.
pub fn ate(estimate: &[Pose], truth: &[Pose]) -> Result<Ate> {
    if estimate.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} estimated poses but {} ground-truth poses",
            estimate.len(),
            truth.len()
        )));
    }
    if estimate.len() < 3 {
        return Err(Error::TooFewPoses {
            needed: 3,
            got: estimate.len(),
        });
    }
    let src: Vec<_> = estimate.iter().map(camera_center).collect();
    let dst: Vec<_> = truth.iter().map(camera_center).collect();
    let alignment = umeyama(&src, &dst)?;
    let errs: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (alignment.apply(s) - d).norm()).collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Ate { rmse, std, alignment })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(rendered: &RgbImage, target: &RgbImage) -> Result<f64> {
    if !rendered.same_dims(target) {
        return Err(Error::DimensionMismatch {
            expected: target.dims(),
            actual: rendered.dims(),
        });
    }
    let n = (rendered.len() * 3) as f64;
    let mse = rendered
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// `None` when the image is too small for three scales.
    pub ms_ssim: Option<f64>,
}

pub fn image_metrics(rendered: &RgbImage, target: &RgbImage) -> Result<ImageMetrics> {
    let (w, h) = target.dims();
    let min = SSIM_WINDOW << (MS_SSIM_SCALES - 1);
    Ok(ImageMetrics {
        psnr: psnr(rendered, target)?,
        ssim: ssim(rendered, target)?.value,
        ms_ssim: if w >= min && h >= min { Some(ms_ssim(rendered, target)?.value) } else { None },
    })
}

/// Averages per-image metrics; the multi-scale term is kept only if every
/// image has one.
pub fn mean_metrics(all: &[ImageMetrics]) -> Option<ImageMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let ms: Option<Vec<f64>> = all.iter().map(|m| m.ms_ssim).collect();
    Some(ImageMetrics {
        psnr: all.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: all.iter().map(|m| m.ssim).sum::<f64>() / n,
        ms_ssim: ms.map(|v| v.iter().sum::<f64>() / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, UnitQuaternion};
    use proptest::prelude::*;

    fn trajectory(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let s = i as f64;
                Pose::exp(&Twist::new(
                    Vector3::new(0.02 * s, -0.03 * s, 0.01),
                    Vector3::new(0.3 * s, 0.1 * (0.7 * s).sin(), 0.05 * s * s),
                ))
            })
            .collect()
    }

    /// Applies a similarity to every camera: centres map by `c ↦ s R c + t`.
    fn transform(traj: &[Pose], s: f64, r: UnitQuaternion<f64>, t: Vector3<f64>) -> Vec<Pose> {
        traj.iter()
            .map(|p| {
                let wc = p.inverse();
                Pose::new(r * wc.rotation, r * wc.translation * s + t).inverse()
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = trajectory(10);
        let a = ate(&t, &t).unwrap();
        assert!(a.rmse < 1e-12 && a.std < 1e-12);
    }

    #[test]
    fn similarity_is_absorbed() {
        let t = trajectory(10);
        let r = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let moved = transform(&t, 2.0, r, Vector3::new(1.0, -4.0, 0.5));
        let a = ate(&t, &moved).unwrap();
        assert!(a.rmse < 1e-9, "{}", a.rmse);
        assert_relative_eq!(a.alignment.scale, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn single_offset_pose_matches_direct_evaluation() {
        let truth = trajectory(10);
        let mut est = truth.clone();
        let wc = est[4].inverse();
        est[4] = Pose::new(wc.rotation, wc.translation + Vector3::new(0.3, 0.0, 0.0)).inverse();
        let a = ate(&est, &truth).unwrap();
        let src: Vec<_> = est.iter().map(camera_center).collect();
        let dst: Vec<_> = truth.iter().map(camera_center).collect();
        let rmse_of = |s: &Sim3| (src.iter().zip(&dst).map(|(p, q)| (s.apply(p) - q).norm_squared()).sum::<f64>() / 10.0).sqrt();
        assert_relative_eq!(a.rmse, rmse_of(&a.alignment), epsilon = 1e-12);
        // Without alignment the error is exactly one 0.3 offset among ten poses.
        assert_relative_eq!(rmse_of(&Sim3::identity()), 0.3 / 10f64.sqrt(), epsilon = 1e-12);
        assert!(a.rmse <= 0.3 / 10f64.sqrt() + 1e-12);
        // Local optimality against perturbed alignments.
        for k in 0..7 {
            let mut s = a.alignment;
            let e = 1e-4;
            match k {
                0 => s.scale *= 1.0 + e,
                1 => s.scale *= 1.0 - e,
                2..=4 => s.translation[k - 2] += e,
                _ => s.rotation = Rotation3::from_euler_angles(e, -e, e).matrix() * s.rotation,
            }
            assert!(rmse_of(&s) >= a.rmse - 1e-12);
        }
    }

    #[test]
    fn too_few_poses() {
        let t = trajectory(2);
        assert!(matches!(ate(&t, &t), Err(Error::TooFewPoses { needed: 3, got: 2 })));
    }

    #[test]
    fn degenerate_trajectory_aligns_by_translation() {
        let t = vec![Pose::identity(); 4];
        let shifted = vec![Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)); 4];
        assert!(ate(&t, &shifted).unwrap().rmse < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = Grid::filled(8, 8, Vector3::repeat(0.4));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|p| p.add_scalar(0.1));
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        let checker = Grid::from_fn(8, 8, |x, y| Vector3::repeat(((x + y) % 2) as f64));
        let inverse = checker.map(|p| Vector3::repeat(1.0) - p);
        assert_relative_eq!(psnr(&checker, &inverse).unwrap(), 0.0, epsilon = 1e-12);
        assert!(psnr(&a, &Grid::filled(4, 8, Vector3::zeros())).is_err());
    }

    proptest! {
        #[test]
        fn ate_is_non_negative_and_similarity_invariant(s in 0.2f64..5.0, ax in -3.0f64..3.0, tx in -5.0f64..5.0, seed in 0u64..100) {
            let mut truth = trajectory(8);
            truth[(seed % 8) as usize] = Pose::from_translation(Vector3::new(0.1 * seed as f64, 0.0, 0.3)).compose(&truth[(seed % 8) as usize]);
            let est = trajectory(8);
            let a = ate(&est, &truth).unwrap();
            let moved = transform(&est, s, UnitQuaternion::from_euler_angles(ax, 0.5, -ax), Vector3::new(tx, 1.0, -tx));
            let b = ate(&moved, &truth).unwrap();
            prop_assert!(a.rmse >= 0.0 && a.std >= 0.0);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-8 * (1.0 + a.rmse));
        }
    }
}
