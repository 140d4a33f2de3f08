//! Offline evaluation of saved trajectories and image sets.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{read_rgb, TumEntry};
use crate::metrics::{ate, image_metrics};
use crate::pipeline::AteReport;

/// Pairs estimate and ground-truth entries whose timestamps differ by at most
/// `max_dt`, each ground-truth entry used once. Both lists must be sorted by
/// time.
pub fn associate(estimate: &[TumEntry], truth: &[TumEntry], max_dt: f64) -> Vec<(TumEntry, TumEntry)> {
    let mut out = Vec::new();
    let mut j = 0;
    for e in estimate {
        while j < truth.len() && truth[j].timestamp < e.timestamp - max_dt {
            j += 1;
        }
        let best = (j..truth.len())
            .take_while(|&k| truth[k].timestamp <= e.timestamp + max_dt)
            .min_by(|&a, &b| (truth[a].timestamp - e.timestamp).abs().total_cmp(&(truth[b].timestamp - e.timestamp).abs()));
        if let Some(k) = best {
            out.push((*e, truth[k]));
            j = k + 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    /// `1 − MS-SSIM`, reported in place of a learned perceptual distance.
    pub ms_ssim_distance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub associated_poses: usize,
    pub ate: Option<AteReport>,
    pub images: Vec<ImageReport>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn trajectory_error(estimate: &[TumEntry], truth: &[TumEntry], max_dt: f64) -> Result<(usize, AteReport)> {
    let pairs = associate(estimate, truth, max_dt);
    let (est, gt): (Vec<_>, Vec<_>) = pairs.iter().map(|(e, t)| (e.pose(), t.pose())).unzip();
    let a = ate(&est, &gt)?;
    Ok((
        pairs.len(),
        AteReport {
            rmse: a.rmse,
            std: a.std,
            scale: a.alignment.scale,
        },
    ))
}

/// Compares every PNG in `rendered` with the file of the same name in
/// `reference`, in name order.
pub fn image_set_metrics(rendered: &Path, reference: &Path) -> Result<Vec<ImageReport>> {
    let listing = std::fs::read_dir(rendered).map_err(|e| Error::io(rendered, e))?;
    let mut names = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(rendered, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let other = reference.join(&name);
        if !other.exists() {
            return Err(Error::Input(format!("{} has no counterpart in {}", name, reference.display())));
        }
        let m = image_metrics(&read_rgb(&rendered.join(&name))?, &read_rgb(&other)?)?;
        out.push(ImageReport {
            name,
            psnr: m.psnr,
            ssim: m.ssim,
            ms_ssim: m.ms_ssim,
            ms_ssim_distance: m.ms_ssim.map(|v| 1.0 - v),
        });
    }
    Ok(out)
}

impl EvalReport {
    pub fn with_images(mut self, images: Vec<ImageReport>) -> Self {
        let n = images.len() as f64;
        if !images.is_empty() {
            self.mean_psnr = Some(images.iter().map(|i| i.psnr).sum::<f64>() / n);
            self.mean_ssim = Some(images.iter().map(|i| i.ssim).sum::<f64>() / n);
        }
        self.images = images;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::grid::Grid;
    use crate::io::write_rgb8;
    use nalgebra::Vector3;

    fn entry(t: f64, x: f64) -> TumEntry {
        TumEntry::from_pose(t, &Pose::from_translation(Vector3::new(x, 0.5 * x * x, 0.1)))
    }

    #[test]
    fn association_matches_nearest_within_tolerance() {
        let est = [entry(0.0, 0.0), entry(1.01, 1.0), entry(2.5, 2.0), entry(3.0, 3.0)];
        let gt = [entry(0.0, 0.0), entry(1.0, 1.0), entry(1.02, 9.0), entry(3.0, 3.0)];
        let pairs = associate(&est, &gt, 0.02);
        let times: Vec<(f64, f64)> = pairs.iter().map(|(e, t)| (e.timestamp, t.timestamp)).collect();
        assert_eq!(times, vec![(0.0, 0.0), (1.01, 1.0), (3.0, 3.0)]);
    }

    #[test]
    fn trajectory_against_itself() {
        let t: Vec<TumEntry> = (0..5).map(|i| entry(i as f64, i as f64)).collect();
        let (n, a) = trajectory_error(&t, &t, 1e-6).unwrap();
        assert_eq!(n, 5);
        assert!(a.rmse < 1e-12);
        let short = &t[..2];
        assert!(trajectory_error(short, short, 1e-6).is_err());
    }

    #[test]
    fn image_sets_by_name() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let img = Grid::from_fn(16, 16, |x, y| Vector3::new(x as f64 / 15.0, y as f64 / 15.0, 0.5));
        write_rgb8(&a.path().join("000001.png"), &img).unwrap();
        write_rgb8(&b.path().join("000001.png"), &img).unwrap();
        let r = image_set_metrics(a.path(), b.path()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].psnr, crate::metrics::PSNR_CAP);
        assert!(r[0].ms_ssim.is_none());
        write_rgb8(&a.path().join("000002.png"), &img).unwrap();
        assert!(image_set_metrics(a.path(), b.path()).is_err());
    }
}
