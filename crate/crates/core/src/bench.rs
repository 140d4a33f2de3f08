//! Synthetic benches: tracking accuracy, map lifecycle under corrupted
//! disparity, and the five-variant ablation.

use std::collections::HashSet;
use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::frontend::{FactorGraph, Frame, GraphConfig};
use crate::geometry::{Pose, Twist};
use crate::losses::{EdgeWeighting, DEFAULT_SMOOTH_SIGMA};
use crate::metrics::ate;
use crate::pipeline::{run_pipeline, MetricsReport};
use crate::splat::{GaussianMap, Link, SiadMode, SplatConfig};
use crate::synth::{corrupt_disparity, FlowNoise, SceneConfig, SyntheticProvider, SyntheticScene};
use crate::tracking::{track_batch, SolverConfig};

/// Scene and input frames described by the synthetic section of `cfg`,
/// with the configured disparity corruption applied.
pub fn synthetic_input(cfg: &PipelineConfig) -> Result<(SyntheticScene, Vec<Frame>)> {
    let s = &cfg.synthetic;
    let scene = SyntheticScene::generate(&s.scene)?;
    let frames = (0..scene.len())
        .map(|i| scene.corrupted_frame(i, s.corruption_rate, s.corruption_factor, cfg.seed).0)
        .collect();
    Ok((scene, frames))
}

/// Frames 0, 2, 4, … of the scene, `count` of them.
fn even_frames(scene: &SyntheticScene, count: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..count).map(|i| 2 * i).collect();
    if idx.last().is_some_and(|&l| l >= scene.len()) {
        return Err(Error::Input(format!("scene has {} frames, bench needs {}", scene.len(), 2 * count - 1)));
    }
    Ok(idx)
}

/// Window of keyframes at the given frames with exact disparity and the
/// given poses; every keyframe is linked to all others.
fn window(scene: &SyntheticScene, frames: &[usize], poses: &[Pose], provider: &SyntheticProvider) -> Result<FactorGraph> {
    let cfg = GraphConfig {
        edge_radius: frames.len() as u64,
        keyframe_flow_threshold: 0.0,
        ..GraphConfig::default()
    };
    let mut g = FactorGraph::new(scene.intrinsics, cfg);
    for (&f, pose) in frames.iter().zip(poses) {
        g.add_keyframe(&scene.frame(f), *pose, scene.disparity(f), provider)?;
    }
    Ok(g)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingResult {
    pub ate_rmse: f64,
    /// Cost before the batch and after every step.
    pub costs: Vec<f64>,
    pub cost_non_increasing: bool,
}

/// Eight keyframes with exact depth; every pose but the first is perturbed by
/// a seeded rotation of `rot` radians and translation of `trans` units, then
/// one batch of `iterations` Gauss–Newton steps is run.
pub fn tracking_bench(scene: &SyntheticScene, noise: FlowNoise, rot: f64, trans: f64, iterations: usize, seed: u64) -> Result<TrackingResult> {
    let frames = even_frames(scene, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        v.normalize()
    };
    let truth: Vec<Pose> = frames.iter().map(|&f| scene.poses[f]).collect();
    let start: Vec<Pose> = truth
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                *p
            } else {
                p.left_update(&Twist::new(unit() * rot, unit() * trans))
            }
        })
        .collect();
    let provider = SyntheticProvider::new(scene, noise);
    let mut g = window(scene, &frames, &start, &provider)?;
    let cfg = SolverConfig {
        iterations,
        ..SolverConfig::default()
    };
    let batch = track_batch(&mut g, &cfg)?;
    let est: Vec<Pose> = g.keyframes().map(|k| k.pose).collect();
    let cost_non_increasing = batch.costs.windows(2).all(|w| w[1] <= w[0]);
    Ok(TrackingResult {
        ate_rmse: ate(&est, &truth)?.rmse,
        costs: batch.costs,
        cost_non_increasing,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SiadBenchResult {
    pub corrupted: usize,
    pub corrupted_pruned: usize,
    pub clean: usize,
    pub clean_pruned: usize,
    /// `live_after = live_before − pruned + spawned` held on every call.
    pub ledger_exact: bool,
}

impl SiadBenchResult {
    pub fn corrupted_fraction(&self) -> f64 {
        self.corrupted_pruned as f64 / self.corrupted.max(1) as f64
    }

    pub fn clean_fraction(&self) -> f64 {
        self.clean_pruned as f64 / self.clean.max(1) as f64
    }
}

/// Eight keyframes with exact poses and depth run one clean track/lifecycle
/// cycle; then the disparity of a seeded `rate` of pixels in every keyframe is
/// multiplied by `factor` and `cycles` more cycles run. Reports which of the
/// gaussians linked at injection time were pruned.
pub fn siad_bench(scene: &SyntheticScene, rate: f64, factor: f64, cycles: usize, seed: u64) -> Result<SiadBenchResult> {
    let frames = even_frames(scene, 8)?;
    let truth: Vec<Pose> = frames.iter().map(|&f| scene.poses[f]).collect();
    let provider = SyntheticProvider::new(scene, FlowNoise::default());
    let mut g = window(scene, &frames, &truth, &provider)?;
    let splat = SplatConfig::default();
    let solver = SolverConfig::default();
    let mut map = GaussianMap::new();
    for kf in g.keyframes() {
        map.densify_stride_grid(kf, &g.intrinsics, &splat);
    }
    let mut ledger_exact = true;
    let mut cycle = |g: &mut FactorGraph, map: &mut GaussianMap| -> Result<()> {
        track_batch(g, &solver)?;
        let before = map.live_count();
        let rep = map.siad_apply(g, &splat, SiadMode::Full)?;
        ledger_exact &= map.live_count() + rep.pruned == before + rep.spawned;
        Ok(())
    };
    cycle(&mut g, &mut map)?;

    let mut corrupted_ids = HashSet::new();
    let ids = g.ids();
    for (n, id) in ids.iter().enumerate() {
        let kf = g.keyframe_mut(*id).expect("id from window");
        let hits = corrupt_disparity(&mut kf.disparity, rate, factor, seed.wrapping_add(n as u64));
        for (x, y) in hits {
            if let Some(idx) = map.linked(&Link { keyframe: *id, x, y }) {
                corrupted_ids.insert(map.meta()[idx].id);
            }
        }
    }
    let clean_ids: HashSet<u64> = map.meta().iter().map(|m| m.id).filter(|id| !corrupted_ids.contains(id)).collect();
    for _ in 0..cycles {
        cycle(&mut g, &mut map)?;
    }
    let live: HashSet<u64> = map.meta().iter().map(|m| m.id).collect();
    Ok(SiadBenchResult {
        corrupted: corrupted_ids.len(),
        corrupted_pruned: corrupted_ids.iter().filter(|id| !live.contains(id)).count(),
        clean: clean_ids.len(),
        clean_pruned: clean_ids.iter().filter(|id| !live.contains(id)).count(),
        ledger_exact,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn siad(self) -> bool {
        matches!(self, Variant::B | Variant::D | Variant::E)
    }

    pub fn smooth(self) -> bool {
        matches!(self, Variant::C | Variant::D | Variant::E)
    }

    pub fn ms_ssim(self) -> bool {
        self == Variant::E
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "base",
            Variant::B => "base+SIAD",
            Variant::C => "base+SMOOTH",
            Variant::D => "base+SMOOTH+SIAD",
            Variant::E => "base+SMOOTH+SIAD+MS-SSIM",
        }
    }

    /// `base` with this variant's switches. The base uses power weighting, the
    /// position-only lifecycle and no multi-scale term; the smooth width and
    /// multi-scale weight come from `base` when it sets them.
    pub fn configure(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        let q = match base.loss.weighting {
            EdgeWeighting::Power { q } => q,
            _ => 2.0,
        };
        let sigma = match base.loss.weighting {
            EdgeWeighting::Smooth { sigma } => sigma,
            _ => DEFAULT_SMOOTH_SIGMA,
        };
        cfg.mapping.siad = if self.siad() { SiadMode::Full } else { SiadMode::PositionsOnly };
        cfg.loss.weighting = if self.smooth() {
            EdgeWeighting::Smooth { sigma }
        } else {
            EdgeWeighting::Power { q }
        };
        cfg.loss.ms_ssim = if self.ms_ssim() {
            if base.loss.ms_ssim > 0.0 {
                base.loss.ms_ssim
            } else {
                crate::losses::LossWeights::default().ms_ssim
            }
        } else {
            0.0
        };
        cfg
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
    /// `1 − MS-SSIM`, in the column a learned perceptual distance would use.
    pub ms_ssim_distance: Option<f64>,
    pub gaussians: usize,
    pub pruned: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Tolerance of the D ≥ max(B, C) ordering check, dB.
pub const ORDER_TOLERANCE: f64 = 0.05;
/// Required margin of E over A, dB.
pub const FULL_MARGIN: f64 = 0.3;

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn psnr(&self, v: Variant) -> f64 {
        self.rows.iter().find(|r| r.variant == v).map(|r| r.psnr).unwrap_or(f64::NAN)
    }

    /// Named ordering checks with their outcome.
    pub fn ordering(&self) -> Vec<(String, bool)> {
        let p = |v| self.psnr(v);
        vec![
            (format!("E - A >= {FULL_MARGIN} dB"), p(Variant::E) - p(Variant::A) >= FULL_MARGIN),
            ("B >= A".into(), p(Variant::B) >= p(Variant::A)),
            ("C >= A".into(), p(Variant::C) >= p(Variant::A)),
            (
                format!("D >= max(B, C) - {ORDER_TOLERANCE} dB"),
                p(Variant::D) >= p(Variant::B).max(p(Variant::C)) - ORDER_TOLERANCE,
            ),
        ]
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<3} {:<26} {:>5} {:>6} {:>5} {:>8} {:>8} {:>12}",
            "", "variant", "SIAD", "SMOOTH", "SSIM", "PSNR", "SSIM", "1-MS-SSIM"
        )?;
        let mark = |b: bool| if b { "x" } else { "" };
        for r in &self.rows {
            let v = r.variant;
            let dist = r.ms_ssim_distance.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into());
            writeln!(
                f,
                "{:<3} {:<26} {:>5} {:>6} {:>5} {:>8.3} {:>8.4} {:>12}",
                format!("{v:?}"),
                v.label(),
                mark(v.siad()),
                mark(v.smooth()),
                mark(v.ms_ssim()),
                r.psnr,
                r.ssim,
                dist
            )?;
        }
        for (name, ok) in self.ordering() {
            writeln!(f, "{} {name}", if ok { "PASS" } else { "FAIL" })?;
        }
        Ok(())
    }
}

/// Runs the five variants on the synthetic input of `base` with a shared seed.
/// The input should carry disparity corruption so the lifecycle has work to do.
pub fn run_ablation(base: &PipelineConfig) -> Result<AblationTable> {
    let (scene, frames) = synthetic_input(base)?;
    let provider = SyntheticProvider::new(&scene, base.synthetic.flow);
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = v.configure(base);
        let out = run_pipeline(&cfg, scene.intrinsics, &frames, Some(&scene.poses), &provider)?;
        if let Some(e) = out.stalled {
            return Err(e);
        }
        let m = out.metrics;
        rows.push(AblationRow {
            variant: v,
            psnr: m.mean_psnr.unwrap_or(f64::NAN),
            ssim: m.mean_ssim.unwrap_or(f64::NAN),
            ms_ssim_distance: m.mean_ms_ssim.map(|s| 1.0 - s),
            gaussians: m.gaussians,
            pruned: out.reports.iter().filter_map(|r| r.siad).map(|s| s.pruned).sum(),
            metrics: m,
        });
    }
    Ok(AblationTable { rows })
}

/// The corrupted bench used for the ablation: default pipeline settings with
/// 10% of disparity priors scaled by 3.
pub fn ablation_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.synthetic.corruption_rate = 0.1;
    cfg.synthetic.corruption_factor = 3.0;
    cfg
}

/// Clean bench for the mapping floor: every training frame becomes a keyframe.
pub fn mapping_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.frontend.keyframe_flow_threshold = 0.0;
    cfg
}

/// Scene used by the tracking and lifecycle benches.
pub fn bench_scene() -> Result<SyntheticScene> {
    SyntheticScene::generate(&SceneConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_switches() {
        let base = PipelineConfig::default();
        let a = Variant::A.configure(&base);
        assert_eq!(a.mapping.siad, SiadMode::PositionsOnly);
        assert_eq!(a.loss.ms_ssim, 0.0);
        assert!(matches!(a.loss.weighting, EdgeWeighting::Power { .. }));
        let e = Variant::E.configure(&base);
        assert_eq!(e.mapping.siad, SiadMode::Full);
        assert_eq!(e.loss.ms_ssim, 0.2);
        assert_eq!(e.loss.weighting, EdgeWeighting::Smooth { sigma: DEFAULT_SMOOTH_SIGMA });
        assert_eq!(Variant::D.configure(&base).loss.ms_ssim, 0.0);
        assert!(Variant::B.siad() && !Variant::B.smooth() && !Variant::C.siad());
    }
}
