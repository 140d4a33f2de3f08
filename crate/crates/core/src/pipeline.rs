//! Streaming SLAM + mapping pipeline and its evaluation.
//!
//! Per input frame: motion filter, pose initialization against the last
//! keyframe, keyframe insertion, spawn on the new
//! keyframe, one tracking batch (which refreshes the masks), the mask-driven
//! map lifecycle, then a fixed budget of photometric optimizer steps.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::frontend::{FactorGraph, FilterDecision, FlowObservationProvider, Frame};
use crate::geometry::{Intrinsics, InverseDepthMap, Pose, Twist};
use crate::grid::RgbImage;
use crate::io::{render_path, write_rgb8, write_tum, TumEntry};
use crate::metrics::{ate, image_metrics, Sim3};
use crate::optim::{MapOptimizer, View};
use crate::raster::render;
use crate::splat::{write_map, GaussianMap, SiadReport};
use crate::tracking::{align_frame, track_batch};

/// Disparity assumed for the first frame when the input carries no prior.
const DEFAULT_DISPARITY: f64 = 0.5;

/// A keyframe as last estimated, kept after it leaves the window.
#[derive(Clone, Debug)]
pub struct KeyframeRecord {
    pub id: u64,
    pub frame_index: usize,
    pub timestamp: f64,
    /// Camera-from-world.
    pub pose: Pose,
    pub image: RgbImage,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameReport {
    pub frame_index: usize,
    pub keyframe: Option<u64>,
    pub evicted: Option<u64>,
    /// Cost before and after the tracking batch.
    pub tracking_cost: Option<(f64, f64)>,
    pub siad: Option<SiadReport>,
    /// Mean loss over the mapping steps of this frame.
    pub mapping_loss: Option<f64>,
    pub gaussians: usize,
}

/// Wall-clock seconds spent per stage.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub filter: f64,
    pub insert: f64,
    pub track: f64,
    pub siad: f64,
    pub mapping: f64,
}

pub struct Pipeline {
    config: PipelineConfig,
    graph: FactorGraph,
    map: GaussianMap,
    optimizer: MapOptimizer,
    history: Vec<KeyframeRecord>,
    rng: ChaCha8Rng,
    timings: Timings,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl Pipeline {
    pub fn new(config: PipelineConfig, intrinsics: Intrinsics) -> Result<Self> {
        config.validate()?;
        let side = intrinsics.width.min(intrinsics.height);
        let min = crate::losses::SSIM_WINDOW << (crate::losses::MS_SSIM_SCALES - 1);
        if config.loss.ms_ssim > 0.0 && side < min {
            return Err(Error::UndersizedImage {
                width: intrinsics.width,
                height: intrinsics.height,
                min,
            });
        }
        let bg = Vector3::from(config.mapping.background);
        Ok(Self {
            graph: FactorGraph::new(intrinsics, config.frontend.clone()),
            map: GaussianMap::new(),
            optimizer: MapOptimizer::new(config.adam.clone(), config.loss.clone(), bg),
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            timings: Timings::default(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.graph.intrinsics
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn timings(&self) -> &Timings {
        &self.timings
    }

    /// Every keyframe so far, oldest first, with its latest pose.
    pub fn keyframes(&self) -> &[KeyframeRecord] {
        &self.history
    }

    fn initial_pose(&self, frame_index: usize) -> Pose {
        match self.history.as_slice() {
            [] => Pose::identity(),
            [only] => only.pose,
            [.., a, b] => {
                // Constant velocity in frame-index time.
                let step = b.pose.compose(&a.pose.inverse()).log();
                let ratio = (frame_index - b.frame_index) as f64 / (b.frame_index - a.frame_index).max(1) as f64;
                Pose::exp(&Twist(step.0 * ratio)).compose(&b.pose)
            }
        }
    }

    fn initial_disparity(&self, frame: &Frame) -> InverseDepthMap {
        if let Some(d) = &frame.disparity {
            return d.clone();
        }
        let k = &self.graph.intrinsics;
        let d = self.graph.last().and_then(|kf| kf.disparity.median()).unwrap_or(DEFAULT_DISPARITY);
        InverseDepthMap::constant(k.width, k.height, d)
    }

    fn sync_history(&mut self) {
        for kf in self.graph.keyframes() {
            if let Some(rec) = self.history.iter_mut().rev().find(|r| r.id == kf.id) {
                rec.pose = kf.pose;
            }
        }
    }

    /// Processes one frame. On a solver stall the error is returned and the
    /// pipeline keeps its last accepted state, so outputs can still be written.
    pub fn push_frame(&mut self, frame: &Frame, provider: &dyn FlowObservationProvider) -> Result<FrameReport> {
        let mut report = FrameReport {
            frame_index: frame.index,
            ..FrameReport::default()
        };
        let t = Instant::now();
        let decision = self.graph.motion_filter(frame, provider)?;
        self.timings.filter += secs(t);
        if decision == FilterDecision::Reject {
            report.gaussians = self.map.live_count();
            return Ok(report);
        }

        let t = Instant::now();
        let mut pose = self.initial_pose(frame.index);
        if let Some(last) = self.graph.last() {
            let obs = provider.observe(last.frame_index, frame.index)?;
            pose = align_frame(last, &obs, pose, &self.graph.intrinsics, &self.config.solver)?;
        }
        let disparity = self.initial_disparity(frame);
        let ins = self.graph.add_keyframe(frame, pose, disparity, provider)?;
        if let Some(old) = ins.evicted {
            self.map.freeze_keyframe(old);
        }
        let kf = self.graph.keyframe(ins.id).expect("new keyframe is in the window");
        self.map.densify_stride_grid(kf, &self.graph.intrinsics, &self.config.splat);
        self.history.push(KeyframeRecord {
            id: ins.id,
            frame_index: frame.index,
            timestamp: frame.timestamp,
            pose,
            image: frame.image.clone(),
        });
        report.keyframe = Some(ins.id);
        report.evicted = ins.evicted;
        self.timings.insert += secs(t);

        if self.graph.len() >= 2 {
            let t = Instant::now();
            let batch = track_batch(&mut self.graph, &self.config.solver);
            self.timings.track += secs(t);
            let batch = batch?;
            self.sync_history();
            report.tracking_cost = Some((batch.costs[0], *batch.costs.last().unwrap()));

            let t = Instant::now();
            report.siad = Some(self.map.siad_apply(&self.graph, &self.config.splat, self.config.mapping.siad)?);
            self.timings.siad += secs(t);
        }

        let t = Instant::now();
        let steps = self.config.mapping.steps_per_keyframe;
        let mut total = 0.0;
        for _ in 0..steps {
            let pick = self.rng.random_range(0..self.history.len());
            let rec = &self.history[pick];
            let view = [View {
                pose: rec.pose,
                image: &rec.image,
            }];
            total += self.optimizer.step(&mut self.map, &view, &self.graph.intrinsics, &self.config.splat)?;
        }
        if steps > 0 {
            report.mapping_loss = Some(total / steps as f64);
        }
        self.timings.mapping += secs(t);
        report.gaussians = self.map.live_count();
        Ok(report)
    }

    /// Renders the map from a camera-from-world pose in the map's frame.
    pub fn render(&self, pose: &Pose) -> RgbImage {
        render(self.map.gaussians(), pose, &self.graph.intrinsics, self.optimizer.background).color
    }
}

/// Pose, in the estimate's frame, of a camera given in the ground-truth frame,
/// where `s` maps estimated camera centres onto ground-truth ones.
pub fn pose_in_estimate_frame(truth: &Pose, s: &Sim3) -> Pose {
    let r = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(s.rotation));
    let t = (truth.rotation * s.translation + truth.translation) / s.scale;
    Pose::new(truth.rotation * r, t)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AteReport {
    pub rmse: f64,
    pub std: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewReport {
    pub frame_index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    /// `1 − MS-SSIM`, reported in place of a learned perceptual distance.
    pub ms_ssim_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub keyframes: usize,
    pub gaussians: usize,
    pub frozen_gaussians: usize,
    /// Over keyframes; absent without ground truth or with fewer than three keyframes.
    pub ate: Option<AteReport>,
    pub views: Vec<ViewReport>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_ms_ssim: Option<f64>,
    pub stalled: bool,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Result of a whole run. A solver stall ends the stream early and is kept
/// in `stalled` rather than discarding the state reached so far.
pub struct Outcome {
    pub pipeline: Pipeline,
    pub reports: Vec<FrameReport>,
    pub metrics: MetricsReport,
    /// Held-out frame indices with their renders.
    pub renders: Vec<(usize, RgbImage)>,
    pub stalled: Option<Error>,
}

/// Runs the pipeline over `frames`, skipping the configured held-out indices,
/// then evaluates. `truth` is indexed by frame index.
pub fn run_pipeline(
    config: &PipelineConfig,
    intrinsics: Intrinsics,
    frames: &[Frame],
    truth: Option<&[Pose]>,
    provider: &dyn FlowObservationProvider,
) -> Result<Outcome> {
    if frames.is_empty() {
        return Err(Error::Input("no input frames".into()));
    }
    let holdout = &config.eval.holdout;
    let mut pipeline = Pipeline::new(config.clone(), intrinsics)?;
    let mut reports = Vec::new();
    let mut stalled = None;
    for f in frames.iter().filter(|f| !holdout.contains(&f.index)) {
        match pipeline.push_frame(f, provider) {
            Ok(r) => reports.push(r),
            Err(e) if e.is_solver_stall() => {
                stalled = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let (metrics, renders) = evaluate(&pipeline, frames, truth, stalled.is_some())?;
    Ok(Outcome {
        pipeline,
        reports,
        metrics,
        renders,
        stalled,
    })
}

/// Trajectory error over keyframes and image metrics on held-out frames.
///
/// Held-out cameras are moved into the estimate's frame with the trajectory
/// alignment, so the rendered views match the ground-truth viewpoints whatever
/// gauge the tracker settled in. Without ground truth, or when there is no
/// held-out frame, the keyframes themselves are evaluated at their estimated poses.
pub fn evaluate(pipeline: &Pipeline, frames: &[Frame], truth: Option<&[Pose]>, stalled: bool) -> Result<(MetricsReport, Vec<(usize, RgbImage)>)> {
    let kfs = pipeline.keyframes();
    let mut alignment = Sim3::identity();
    let mut ate_report = None;
    if let Some(truth) = truth {
        if let Some(bad) = kfs.iter().find(|r| r.frame_index >= truth.len()) {
            return Err(Error::Input(format!("no ground-truth pose for frame {}", bad.frame_index)));
        }
        if kfs.len() >= 3 {
            let est: Vec<Pose> = kfs.iter().map(|r| r.pose).collect();
            let gt: Vec<Pose> = kfs.iter().map(|r| truth[r.frame_index]).collect();
            let a = ate(&est, &gt)?;
            alignment = a.alignment;
            ate_report = Some(AteReport {
                rmse: a.rmse,
                std: a.std,
                scale: a.alignment.scale,
            });
        }
    }
    // Without a trajectory alignment, map ground truth through the first keyframe.
    let gauge_fix = |t: &Pose| match (&ate_report, kfs.first(), truth) {
        (None, Some(first), Some(gt)) => first.pose.compose(&gt[first.frame_index].inverse()).compose(t),
        _ => *t,
    };

    let holdout: Vec<&Frame> = frames.iter().filter(|f| pipeline.config().eval.holdout.contains(&f.index)).collect();
    let mut targets: Vec<(usize, Pose, &RgbImage)> = Vec::new();
    match truth {
        Some(gt) if !holdout.is_empty() => {
            for f in holdout {
                let t = gt
                    .get(f.index)
                    .ok_or_else(|| Error::Input(format!("no ground-truth pose for frame {}", f.index)))?;
                let pose = if ate_report.is_some() {
                    pose_in_estimate_frame(t, &alignment)
                } else {
                    gauge_fix(t)
                };
                targets.push((f.index, pose, &f.image));
            }
        }
        _ => targets.extend(kfs.iter().map(|r| (r.frame_index, r.pose, &r.image))),
    }

    let mut views = Vec::new();
    let mut renders = Vec::new();
    for (index, pose, target) in targets {
        let img = pipeline.render(&pose);
        let m = image_metrics(&img, target)?;
        views.push(ViewReport {
            frame_index: index,
            psnr: m.psnr,
            ssim: m.ssim,
            ms_ssim: m.ms_ssim,
            ms_ssim_distance: m.ms_ssim.map(|v| 1.0 - v),
        });
        renders.push((index, img));
    }
    let n = views.len() as f64;
    let mean = |f: fn(&ViewReport) -> f64| (!views.is_empty()).then(|| views.iter().map(f).sum::<f64>() / n);
    let mean_ms = (!views.is_empty())
        .then(|| views.iter().map(|v| v.ms_ssim).collect::<Option<Vec<f64>>>())
        .flatten()
        .map(|v| v.iter().sum::<f64>() / n);
    let map = pipeline.map();
    Ok((
        MetricsReport {
            frames: frames.len(),
            keyframes: kfs.len(),
            gaussians: map.live_count(),
            frozen_gaussians: map.frozen_count(),
            ate: ate_report,
            mean_psnr: mean(|v| v.psnr),
            mean_ssim: mean(|v| v.ssim),
            mean_ms_ssim: mean_ms,
            views,
            stalled,
        },
        renders,
    ))
}

/// Writes `trajectory.txt` (keyframes, TUM), `map.bin`, `renders/`,
/// `metrics.json` and `timings.json` into `dir`.
pub fn write_outputs(dir: &Path, outcome: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &outcome.pipeline;
    let traj: Vec<TumEntry> = p.keyframes().iter().map(|r| TumEntry::from_pose(r.timestamp, &r.pose)).collect();
    write_tum(&dir.join("trajectory.txt"), &traj)?;
    write_map(p.map(), p.intrinsics(), &dir.join("map.bin"))?;
    for r in p.keyframes() {
        write_rgb8(&render_path(dir, r.frame_index), &p.render(&r.pose))?;
    }
    for (index, img) in &outcome.renders {
        write_rgb8(&dir.join("heldout").join(format!("{index:06}.png")), img)?;
    }
    let metrics = dir.join("metrics.json");
    std::fs::write(&metrics, outcome.metrics.to_json() + "\n").map_err(|e| Error::io(&metrics, e))?;
    let timings = dir.join("timings.json");
    let text = serde_json::to_string_pretty(p.timings()).expect("timings serialize") + "\n";
    std::fs::write(&timings, text).map_err(|e| Error::io(&timings, e))
}
