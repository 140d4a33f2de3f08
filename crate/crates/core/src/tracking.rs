//! Confidence-weighted Gauss–Newton over window poses and disparities.
//!
//! Disparities are solved on a subsampled grid of block centers and the
//! resulting increments are copied to the pixels of the block whose disparity
//! is close to the center's. Depth is
//! eliminated with a Schur complement before the pose system is solved.
//!
//! The oldest window keyframe is held fixed. Monocular scale is pinned by
//! keeping the second keyframe's translation update orthogonal to its baseline.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{FactorGraph, FlowObservation, Keyframe, ReliabilityMask};
use crate::geometry::{flow_jacobians_at, pixel, reproject, Intrinsics, Pose, Twist};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub iterations: usize,
    /// Initial Levenberg damping.
    pub damping: f64,
    /// Huber threshold in pixels; `None` is plain weighted least squares.
    pub huber_delta: Option<f64>,
    pub stride: usize,
    pub min_disparity: f64,
    pub max_retries: usize,
    /// A block increment reaches a pixel only if the pixel's disparity is
    /// within this relative distance of the block center's.
    pub block_coherence: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            damping: 1e-4,
            huber_delta: Some(1.0),
            stride: 4,
            min_disparity: 1e-4,
            max_retries: 5,
            block_coherence: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("solver iterations must be at least 1".into()));
        }
        if !(self.damping > 0.0) {
            return Err(Error::Config("solver damping must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("solver stride must be at least 1".into()));
        }
        if !(self.block_coherence > 0.0) {
            return Err(Error::Config("block coherence must be positive".into()));
        }
        if self.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::Config("huber delta must be positive".into()));
        }
        Ok(())
    }
}

/// Solver pixel coordinates along one axis: block centers at the given stride.
pub fn solver_coords(len: usize, stride: usize) -> Vec<usize> {
    let off = stride / 2;
    (0..len.div_ceil(stride)).map(|a| (a * stride + off).min(len - 1)).collect()
}

#[derive(Clone, Debug)]
pub struct Residual {
    pub edge: usize,
    pub x: usize,
    pub y: usize,
    pub r: Vector2<f64>,
    pub w: Vector2<f64>,
}

/// `f_obs − induced − correction` at every solver pixel valid in the source
/// mask, with positive disparity and a reprojection in front of the target.
pub fn residuals(graph: &FactorGraph, stride: usize) -> Result<Vec<Residual>> {
    let k = &graph.intrinsics;
    let xs = solver_coords(k.width, stride);
    let ys = solver_coords(k.height, stride);
    let mut out = Vec::new();
    for (e_idx, e) in graph.edges().iter().enumerate() {
        let t_ij = graph.relative_pose(e.i, e.j)?;
        let src = graph.keyframe(e.i).expect("edge endpoint in window");
        for &y in &ys {
            for &x in &xs {
                if !src.mask.is_valid(x, y) {
                    continue;
                }
                let Some(d) = src.disparity.get(x, y) else { continue };
                let p = pixel(x, y);
                let Some((q, _)) = reproject(&t_ij, &p, d, k) else { continue };
                let r = e.obs.flow.get(x, y) - (q - p) - e.obs.correction.get(x, y);
                out.push(Residual {
                    edge: e_idx,
                    x,
                    y,
                    r,
                    w: *e.obs.weights.get(x, y),
                });
            }
        }
    }
    Ok(out)
}

/// Robust cost and IRLS weight of one residual component.
#[inline]
fn robust(r: f64, w: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if r.abs() > d => (w * d * (r.abs() - 0.5 * d), w * d / r.abs()),
        _ => (0.5 * w * r * r, w),
    }
}

/// Weighted robust cost of the current graph state.
pub fn cost(graph: &FactorGraph, cfg: &SolverConfig) -> Result<f64> {
    Ok(residuals(graph, cfg.stride)?
        .iter()
        .map(|r| robust(r.r.x, r.w.x, cfg.huber_delta).0 + robust(r.r.y, r.w.y, cfg.huber_delta).0)
        .sum())
}

/// One disparity unknown: its pixel, its diagonal Hessian entry, gradient
/// and sparse coupling to pose unknowns.
#[derive(Clone, Debug)]
pub struct DepthVar {
    pub keyframe: usize,
    pub x: usize,
    pub y: usize,
    pub c: f64,
    pub b: f64,
    pub e: Vec<(usize, Vector6<f64>)>,
}

/// Undamped normal equations `[B E; Eᵀ C] [Δξ; Δd] = [b_ξ; b_d]`.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    /// Window position of each pose unknown.
    pub pose_keyframes: Vec<usize>,
    pub b_mat: DMatrix<f64>,
    pub b_pose: DVector<f64>,
    pub depth: Vec<DepthVar>,
    /// Scale gauge: pose unknown index and a 6×5 basis its update is restricted to.
    pub gauge: Option<(usize, SMatrix<f64, 6, 5>)>,
    pub cost: f64,
}

struct EdgeSystem {
    i: usize,
    j: usize,
    hii: Matrix6<f64>,
    hij: Matrix6<f64>,
    hjj: Matrix6<f64>,
    bi: Vector6<f64>,
    bj: Vector6<f64>,
    /// (solver pixel, c, b, e_i, e_j)
    depth: Vec<((usize, usize), f64, f64, Vector6<f64>, Vector6<f64>)>,
    cost: f64,
}

fn edge_system(graph: &FactorGraph, e_idx: usize, stride: usize, delta: Option<f64>) -> Result<EdgeSystem> {
    let k = &graph.intrinsics;
    let e = &graph.edges()[e_idx];
    let i = graph.position(e.i).expect("edge endpoint in window");
    let j = graph.position(e.j).expect("edge endpoint in window");
    let t_ij = graph.relative_pose(e.i, e.j)?;
    let ad = t_ij.adjoint();
    let src = graph.keyframe(e.i).expect("edge endpoint in window");
    let mut sys = EdgeSystem {
        i,
        j,
        hii: Matrix6::zeros(),
        hij: Matrix6::zeros(),
        hjj: Matrix6::zeros(),
        bi: Vector6::zeros(),
        bj: Vector6::zeros(),
        depth: Vec::new(),
        cost: 0.0,
    };
    for &y in &solver_coords(k.height, stride) {
        for &x in &solver_coords(k.width, stride) {
            if !src.mask.is_valid(x, y) {
                continue;
            }
            let Some(d) = src.disparity.get(x, y) else { continue };
            let p = pixel(x, y);
            let Some((q, _)) = reproject(&t_ij, &p, d, k) else { continue };
            let Some(jac) = flow_jacobians_at(&t_ij, &p, d, k) else { continue };
            let r = e.obs.flow.get(x, y) - (q - p) - e.obs.correction.get(x, y);
            let w = e.obs.weights.get(x, y);
            // dr/dδ_j = −J, dr/dδ_i = J·Ad(T_ij), dr/dd = −J_d
            let ji = jac.pose * ad;
            let (mut c, mut b) = (0.0, 0.0);
            let (mut ei, mut ej) = (Vector6::zeros(), Vector6::zeros());
            for comp in 0..2 {
                let (rho, wt) = robust(r[comp], w[comp], delta);
                sys.cost += rho;
                if wt == 0.0 {
                    continue;
                }
                let ai: Vector6<f64> = ji.row(comp).transpose();
                let aj: Vector6<f64> = -jac.pose.row(comp).transpose();
                let ad_ = -jac.depth[comp];
                let rc = r[comp];
                sys.hii += wt * ai * ai.transpose();
                sys.hij += wt * ai * aj.transpose();
                sys.hjj += wt * aj * aj.transpose();
                sys.bi -= wt * ai * rc;
                sys.bj -= wt * aj * rc;
                c += wt * ad_ * ad_;
                b -= wt * ad_ * rc;
                ei += wt * ai * ad_;
                ej += wt * aj * ad_;
            }
            sys.depth.push(((x, y), c, b, ei, ej));
        }
    }
    Ok(sys)
}

/// Builds the normal equations at the current state. Per-edge partial systems
/// are computed in parallel and merged in edge order.
pub fn normal_equations(graph: &FactorGraph, cfg: &SolverConfig) -> Result<NormalEquations> {
    let n = graph.len();
    if n < 2 || graph.edges().is_empty() {
        return Err(Error::Graph("tracking needs at least two keyframes and one edge".into()));
    }
    // Position 0 is the gauge anchor.
    let pose_var: Vec<Option<usize>> = (0..n).map(|p| p.checked_sub(1)).collect();
    let np = n - 1;
    let systems: Vec<EdgeSystem> = (0..graph.edges().len())
        .into_par_iter()
        .map(|e| edge_system(graph, e, cfg.stride, cfg.huber_delta))
        .collect::<Result<_>>()?;

    let k = &graph.intrinsics;
    let gx = solver_coords(k.width, cfg.stride).len();
    let gy = solver_coords(k.height, cfg.stride).len();
    let solver_index = |x: usize, y: usize| (y / cfg.stride).min(gy - 1) * gx + (x / cfg.stride).min(gx - 1);
    let mut depth_var: Vec<Vec<Option<usize>>> = vec![vec![None; gx * gy]; n];

    let mut b_mat = DMatrix::zeros(6 * np, 6 * np);
    let mut b_pose = DVector::zeros(6 * np);
    let mut depth: Vec<DepthVar> = Vec::new();
    let mut total = 0.0;
    for s in &systems {
        total += s.cost;
        let (vi, vj) = (pose_var[s.i], pose_var[s.j]);
        if let Some(a) = vi {
            add_block(&mut b_mat, a, a, &s.hii);
            add_vec(&mut b_pose, a, &s.bi);
        }
        if let Some(b) = vj {
            add_block(&mut b_mat, b, b, &s.hjj);
            add_vec(&mut b_pose, b, &s.bj);
        }
        if let (Some(a), Some(b)) = (vi, vj) {
            add_block(&mut b_mat, a, b, &s.hij);
            add_block(&mut b_mat, b, a, &s.hij.transpose());
        }
        for &((x, y), c, b, ei, ej) in &s.depth {
            let slot = &mut depth_var[s.i][solver_index(x, y)];
            let idx = *slot.get_or_insert_with(|| {
                depth.push(DepthVar {
                    keyframe: s.i,
                    x,
                    y,
                    c: 0.0,
                    b: 0.0,
                    e: Vec::new(),
                });
                depth.len() - 1
            });
            let v = &mut depth[idx];
            v.c += c;
            v.b += b;
            for (pv, ev) in [(vi, ei), (vj, ej)] {
                let Some(pv) = pv else { continue };
                match v.e.iter_mut().find(|(q, _)| *q == pv) {
                    Some((_, acc)) => *acc += ev,
                    None => v.e.push((pv, ev)),
                }
            }
        }
    }

    let poses: Vec<&Pose> = graph.keyframes().map(|kf| &kf.pose).collect();
    let baseline = poses[1].compose(&poses[0].inverse()).translation;
    let gauge = (baseline.norm() > 1e-9).then(|| (0, scale_gauge_basis(&baseline.normalize())));

    Ok(NormalEquations {
        pose_keyframes: (1..n).collect(),
        b_mat,
        b_pose,
        depth,
        gauge,
        cost: total,
    })
}

fn add_block(m: &mut DMatrix<f64>, a: usize, b: usize, blk: &Matrix6<f64>) {
    let mut v = m.fixed_view_mut::<6, 6>(6 * a, 6 * b);
    v += blk;
}

fn add_vec(v: &mut DVector<f64>, a: usize, blk: &Vector6<f64>) {
    let mut s = v.fixed_rows_mut::<6>(6 * a);
    s += blk;
}

/// Basis of twists whose translational part is orthogonal to `dir`.
fn scale_gauge_basis(dir: &Vector3<f64>) -> SMatrix<f64, 6, 5> {
    let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u1 = dir.cross(&helper).normalize();
    let u2 = dir.cross(&u1);
    let mut p = SMatrix::<f64, 6, 5>::zeros();
    for a in 0..3 {
        p[(a, a)] = 1.0;
    }
    p.fixed_view_mut::<3, 1>(3, 3).copy_from(&u1);
    p.fixed_view_mut::<3, 1>(3, 4).copy_from(&u2);
    p
}

/// Reduced-coordinate map `Δξ = Q y` for the pose block.
fn pose_basis(ne: &NormalEquations) -> DMatrix<f64> {
    let np = ne.b_pose.len();
    let reduced = np - if ne.gauge.is_some() { 1 } else { 0 };
    let mut q = DMatrix::zeros(np, reduced);
    let mut col = 0;
    for v in 0..np / 6 {
        match &ne.gauge {
            Some((g, basis)) if *g == v => {
                q.view_mut((6 * v, col), (6, 5)).copy_from(basis);
                col += 5;
            }
            _ => {
                q.view_mut((6 * v, col), (6, 6)).fill_with_identity();
                col += 6;
            }
        }
    }
    q
}

#[inline]
fn damp(h: f64, lambda: f64) -> f64 {
    h + lambda * (1.0 + h)
}

/// Solves the damped system by eliminating depth first.
pub fn solve_schur(ne: &NormalEquations, lambda: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = ne.b_pose.len();
    let mut s = ne.b_mat.clone();
    for a in 0..np {
        s[(a, a)] = damp(s[(a, a)], lambda);
    }
    let mut g = ne.b_pose.clone();
    for v in &ne.depth {
        let c = damp(v.c, lambda);
        for (pa, ea) in &v.e {
            for (pb, eb) in &v.e {
                let blk = ea * eb.transpose() / c;
                let mut view = s.fixed_view_mut::<6, 6>(6 * pa, 6 * pb);
                view -= blk;
            }
            let mut gv = g.fixed_rows_mut::<6>(6 * pa);
            gv -= ea * (v.b / c);
        }
    }
    let q = pose_basis(ne);
    let sr = q.transpose() * &s * &q;
    let gr = q.transpose() * &g;
    let y = sr.cholesky()?.solve(&gr);
    let dxi = &q * y;
    let dd = DVector::from_iterator(
        ne.depth.len(),
        ne.depth.iter().map(|v| {
            let coupled: f64 = v.e.iter().map(|(pa, ea)| ea.dot(&dxi.fixed_rows::<6>(6 * pa))).sum();
            (v.b - coupled) / damp(v.c, lambda)
        }),
    );
    Some((dxi, dd))
}

/// Per-keyframe increments of one tracking batch.
#[derive(Clone, Debug)]
pub struct KeyframeIncrement {
    pub keyframe_id: u64,
    /// World-side twist: `T_wc_after = exp(Δξ) ∘ T_wc_before`.
    pub delta_pose: Twist,
    /// Applied disparity change per pixel (zero where the disparity is invalid).
    pub delta_disparity: Grid<f64>,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub cost_before: f64,
    pub cost_after: f64,
    pub lambda: f64,
    pub accepted: bool,
    /// Left twist applied to each keyframe's camera-from-world pose, in window order.
    pub pose_updates: Vec<(u64, Twist)>,
}

/// Solver state carried across the steps of one batch.
#[derive(Clone, Debug)]
pub struct Solver {
    pub cfg: SolverConfig,
    pub lambda: f64,
}

impl Solver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.damping;
        Ok(Self { cfg, lambda })
    }

    /// One damped Gauss–Newton step. A step that would raise the cost is
    /// retried with doubled damping; if every retry fails the state is left
    /// untouched and the step is reported as not accepted.
    pub fn step(&mut self, graph: &mut FactorGraph) -> Result<StepReport> {
        let ne = normal_equations(graph, &self.cfg)?;
        let before_poses: Vec<Pose> = graph.keyframes().map(|k| k.pose).collect();
        let before_disp: Vec<_> = graph.keyframes().map(|k| k.disparity.clone()).collect();
        let ids = graph.ids();
        for attempt in 0..=self.cfg.max_retries {
            let Some((dxi, dd)) = solve_schur(&ne, self.lambda) else {
                if attempt == self.cfg.max_retries {
                    return Err(Error::SolverStall {
                        reason: "reduced pose system is not positive definite".into(),
                        lambda: self.lambda,
                        cost: ne.cost,
                    });
                }
                self.lambda *= 2.0;
                continue;
            };
            let updates = apply_update(graph, &ne, &dxi, &dd, &self.cfg);
            let after = cost(graph, &self.cfg)?;
            if after <= ne.cost {
                self.lambda = (self.lambda * 0.5).max(f64::MIN_POSITIVE);
                return Ok(StepReport {
                    cost_before: ne.cost,
                    cost_after: after,
                    lambda: self.lambda,
                    accepted: true,
                    pose_updates: ids.iter().copied().zip(updates).collect(),
                });
            }
            for ((kf, pose), disp) in graph.keyframes_mut().zip(&before_poses).zip(&before_disp) {
                kf.pose = *pose;
                kf.disparity = disp.clone();
            }
            self.lambda *= 2.0;
        }
        Ok(StepReport {
            cost_before: ne.cost,
            cost_after: ne.cost,
            lambda: self.lambda,
            accepted: false,
            pose_updates: ids.iter().map(|&id| (id, Twist::zero())).collect(),
        })
    }
}

fn apply_update(graph: &mut FactorGraph, ne: &NormalEquations, dxi: &DVector<f64>, dd: &DVector<f64>, cfg: &SolverConfig) -> Vec<Twist> {
    let (w, h) = (graph.intrinsics.width, graph.intrinsics.height);
    let n = graph.len();
    let mut twists = vec![Twist::zero(); n];
    for (v, &pos) in ne.pose_keyframes.iter().enumerate() {
        twists[pos] = Twist(dxi.fixed_rows::<6>(6 * v).into_owned());
    }
    let gx = solver_coords(w, cfg.stride).len();
    let gy = solver_coords(h, cfg.stride).len();
    // (increment, center disparity before the update) per block.
    let mut block_dd: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 0.0); gx * gy]; n];
    let kfs: Vec<&Keyframe> = graph.keyframes().collect();
    let centers: Vec<f64> = ne
        .depth
        .iter()
        .map(|var| kfs[var.keyframe].disparity.get(var.x, var.y).unwrap_or(0.0))
        .collect();
    for ((var, &delta), &center) in ne.depth.iter().zip(dd.iter()).zip(&centers) {
        block_dd[var.keyframe][(var.y / cfg.stride).min(gy - 1) * gx + (var.x / cfg.stride).min(gx - 1)] = (delta, center);
    }
    for (pos, kf) in graph.keyframes_mut().enumerate() {
        if pos > 0 {
            kf.pose = kf.pose.left_update(&twists[pos]);
        }
        let blocks = &block_dd[pos];
        if blocks.iter().all(|&(d, _)| d == 0.0) {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let Some(d) = kf.disparity.get(x, y) else { continue };
                let (delta, center) = blocks[(y / cfg.stride).min(gy - 1) * gx + (x / cfg.stride).min(gx - 1)];
                if delta != 0.0 && (d / center - 1.0).abs() <= cfg.block_coherence {
                    kf.disparity.set(x, y, (d + delta).max(cfg.min_disparity));
                }
            }
        }
    }
    twists
}

#[derive(Clone, Debug)]
pub struct BatchReport {
    /// Cost before the first step followed by the cost after each step.
    pub costs: Vec<f64>,
    pub increments: Vec<KeyframeIncrement>,
}

/// Runs one batch of Gauss–Newton steps and refreshes the masks.
///
/// Masks are re-evaluated once before the steps so that residual gating
/// reflects the current state; the masks in place when the batch started
/// become `prev_mask`. On a stall the graph keeps the last accepted state and
/// its masks are restored.
pub fn track_batch(graph: &mut FactorGraph, cfg: &SolverConfig) -> Result<BatchReport> {
    let mut solver = Solver::new(cfg.clone())?;
    let snapshot: Vec<ReliabilityMask> = graph.keyframes().map(|k| k.mask.clone()).collect();
    let poses_before: Vec<Pose> = graph.keyframes().map(|k| k.pose).collect();
    let disp_before: Vec<_> = graph.keyframes().map(|k| k.disparity.clone()).collect();

    let gating = graph.compute_masks()?;
    graph.set_masks(gating);
    let mut costs = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        match solver.step(graph) {
            Ok(rep) => {
                if it == 0 {
                    costs.push(rep.cost_before);
                }
                costs.push(rep.cost_after);
            }
            Err(e) => {
                graph.set_masks(snapshot);
                return Err(e);
            }
        }
    }

    let fresh = graph.compute_masks()?;
    let increments = graph
        .keyframes_mut()
        .zip(fresh)
        .zip(snapshot)
        .zip(poses_before.iter().zip(&disp_before))
        .map(|(((kf, mask), prev), (pose0, disp0))| {
            kf.mask = mask;
            kf.prev_mask = prev;
            kf.commit_reference();
            let (w, h) = kf.disparity.dims();
            let delta_disparity = Grid::from_fn(w, h, |x, y| match (kf.disparity.get(x, y), disp0.get(x, y)) {
                (Some(a), Some(b)) => a - b,
                _ => 0.0,
            });
            let delta_pose = kf.pose.inverse().compose(pose0).log();
            KeyframeIncrement {
                keyframe_id: kf.id,
                delta_pose,
                delta_disparity,
            }
        })
        .collect();
    Ok(BatchReport { costs, increments })
}

/// Pose of a new frame from its observed flow against a keyframe whose pose
/// and disparity are held fixed. Damped Gauss–Newton over the frame pose
/// only, on the keyframe's valid solver pixels, starting from `init`.
pub fn align_frame(source: &Keyframe, obs: &FlowObservation, init: Pose, k: &Intrinsics, cfg: &SolverConfig) -> Result<Pose> {
    cfg.validate()?;
    let mut samples = Vec::new();
    for &y in &solver_coords(k.height, cfg.stride) {
        for &x in &solver_coords(k.width, cfg.stride) {
            if let (true, Some(d)) = (source.mask.is_valid(x, y), source.disparity.get(x, y)) {
                samples.push((x, y, d));
            }
        }
    }
    let residual = |t_ij: &Pose, &(x, y, d): &(usize, usize, f64)| {
        let p = pixel(x, y);
        reproject(t_ij, &p, d, k).map(|(q, _)| (p, obs.flow.get(x, y) - (q - p) - obs.correction.get(x, y)))
    };
    let eval = |pose: &Pose, inliers: &[bool], build: bool| {
        let t_ij = pose.compose(&source.pose.inverse());
        let mut cost = 0.0;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (s, _) in samples.iter().zip(inliers).filter(|(_, &keep)| keep) {
            let Some((p, r)) = residual(&t_ij, s) else { continue };
            let w = obs.weights.get(s.0, s.1);
            let jac = if build { flow_jacobians_at(&t_ij, &p, s.2, k) } else { None };
            for comp in 0..2 {
                let (rho, wt) = robust(r[comp], w[comp], cfg.huber_delta);
                cost += rho;
                if let Some(j) = &jac {
                    let a: Vector6<f64> = j.pose.row(comp).transpose();
                    h += wt * a * a.transpose();
                    g += wt * a * r[comp];
                }
            }
        }
        (cost, h, g)
    };
    let solve = |mut pose: Pose, inliers: &[bool]| {
        let mut lambda = cfg.damping;
        for _ in 0..cfg.iterations.max(ALIGN_ITERATIONS) {
            let (cost, h, g) = eval(&pose, inliers, true);
            let mut accepted = false;
            for _ in 0..=cfg.max_retries {
                let damped = h + Matrix6::identity() * lambda * (1.0 + h.diagonal().max());
                let Some(delta) = damped.cholesky().map(|c| c.solve(&g)) else {
                    lambda *= 2.0;
                    continue;
                };
                let candidate = pose.left_update(&Twist(delta));
                if eval(&candidate, inliers, false).0 <= cost {
                    pose = candidate;
                    lambda *= 0.5;
                    accepted = true;
                    break;
                }
                lambda *= 2.0;
            }
            if !accepted {
                break;
            }
        }
        pose
    };
    // Gross disparity errors bias even a robust fit, so the fit is repeated
    // without samples whose residual is far outside the robust spread.
    let mut inliers = vec![true; samples.len()];
    let mut pose = solve(init, &inliers);
    for _ in 0..ALIGN_TRIM_ROUNDS {
        let t_ij = pose.compose(&source.pose.inverse());
        let norms: Vec<f64> = samples.iter().map(|s| residual(&t_ij, s).map_or(f64::INFINITY, |(_, r)| r.norm())).collect();
        let mut sorted: Vec<f64> = norms.iter().copied().filter(|n| n.is_finite()).collect();
        if sorted.is_empty() {
            break;
        }
        sorted.sort_by(f64::total_cmp);
        let spread = 1.4826 * sorted[sorted.len() / 2];
        let cut = (ALIGN_TRIM_SIGMAS * spread).max(ALIGN_TRIM_FLOOR);
        let next: Vec<bool> = norms.iter().map(|&n| n <= cut).collect();
        if next == inliers || next.iter().filter(|&&b| b).count() < samples.len() / 2 {
            break;
        }
        inliers = next;
        pose = solve(pose, &inliers);
    }
    Ok(pose)
}

const ALIGN_TRIM_ROUNDS: usize = 5;
const ALIGN_TRIM_SIGMAS: f64 = 3.0;
/// Residuals below this many pixels are never trimmed.
const ALIGN_TRIM_FLOOR: f64 = 0.05;
const ALIGN_ITERATIONS: usize = 10;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{FlowObservationProvider, Frame, GraphConfig};
    use crate::geometry::{induced_flow, InverseDepthMap};
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use std::collections::HashMap;

    /// Sinusoidal height field seen by cameras on a short arc.
    struct Scene {
        k: Intrinsics,
        poses: Vec<Pose>,
        depths: Vec<InverseDepthMap>,
    }

    fn scene(n: usize) -> Scene {
        let k = Intrinsics::new(30.0, 30.0, 11.5, 11.5, 24, 24).unwrap();
        let mut poses = Vec::new();
        let mut depths = Vec::new();
        for f in 0..n {
            let a = 0.04 * f as f64;
            let rot = UnitQuaternion::from_euler_angles(0.01 * f as f64, -a, 0.0);
            let c = Vector3::new(0.6 * a.sin(), 0.03 * f as f64, 2.0 - 2.0 * a.cos());
            // camera-from-world: X_c = R (X_w − c)
            let pose = Pose::new(rot, -(rot * c));
            let wc = pose.inverse();
            let d = Grid::from_fn(k.width, k.height, |x, y| {
                // Intersect the pixel ray with z_w = 2 + 0.2 sin(x_w) cos(y_w).
                let dir = wc.rotation * k.ray(&pixel(x, y));
                let o = wc.translation;
                let mut t = 2.0;
                for _ in 0..50 {
                    let pt = o + dir * t;
                    let f = pt.z - (2.0 + 0.2 * (2.0 * pt.x).sin() * (2.0 * pt.y).cos());
                    let grad = Vector3::new(
                        -0.4 * (2.0 * pt.x).cos() * (2.0 * pt.y).cos(),
                        0.4 * (2.0 * pt.x).sin() * (2.0 * pt.y).sin(),
                        1.0,
                    );
                    t -= f / grad.dot(&dir);
                }
                // Depth along the optical axis equals t since ray z = 1.
                1.0 / t
            });
            poses.push(pose);
            depths.push(InverseDepthMap::new(d));
        }
        Scene { k, poses, depths }
    }

    struct Oracle<'a> {
        s: &'a Scene,
    }

    impl FlowObservationProvider for Oracle<'_> {
        fn observe(&self, i: usize, j: usize) -> Result<FlowObservation> {
            let t = self.s.poses[j].compose(&self.s.poses[i].inverse());
            let f = induced_flow(&t, &self.s.depths[i], &self.s.k);
            let w = f.valid.map(|&v| if v { Vector2::new(1.0, 1.0) } else { Vector2::zeros() });
            Ok(FlowObservation::new(f.flow, w))
        }
    }

    fn graph_from(s: &Scene, poses: &[Pose], disp: &[InverseDepthMap]) -> FactorGraph {
        let mut g = FactorGraph::new(s.k, GraphConfig::default());
        let oracle = Oracle { s };
        for f in 0..poses.len() {
            let frame = Frame {
                index: f,
                timestamp: f as f64,
                image: Grid::filled(s.k.width, s.k.height, Vector3::zeros()),
                disparity: None,
            };
            g.add_keyframe(&frame, poses[f], disp[f].clone(), &oracle).unwrap();
        }
        g
    }

    fn stride1() -> SolverConfig {
        SolverConfig {
            stride: 1,
            ..SolverConfig::default()
        }
    }

    /// Rotation angle and translation-direction angle between relative poses,
    /// ignoring scale.
    fn relative_error(a: &Pose, b: &Pose) -> f64 {
        let rot = (a.rotation.inverse() * b.rotation).angle();
        let dir = a.translation.normalize().dot(&b.translation.normalize()).clamp(-1.0, 1.0).acos();
        rot.max(dir)
    }

    #[test]
    fn exact_state_has_zero_residuals() {
        let s = scene(3);
        let g = graph_from(&s, &s.poses, &s.depths);
        let r = residuals(&g, 1).unwrap();
        assert!(!r.is_empty());
        assert!(r.iter().all(|r| r.r.norm() < 1e-9));
    }

    #[test]
    fn full_correction_cancels_observation() {
        let s = scene(2);
        let poses = vec![Pose::identity(); 2];
        let mut g = graph_from(&s, &poses, &s.depths);
        for e in g.edges_mut() {
            e.obs.correction = e.obs.flow.clone();
        }
        assert!(residuals(&g, 1).unwrap().iter().all(|r| r.r.norm() < 1e-12));
    }

    #[test]
    fn residual_change_matches_linearization() {
        let s = scene(2);
        let g0 = graph_from(&s, &s.poses, &s.depths);
        let r0 = residuals(&g0, 2).unwrap();
        let t01 = g0.relative_pose(0, 1).unwrap();
        let delta = Twist(Vector6::new(1e-3, -2e-3, 1.5e-3, 2e-3, 1e-3, -1e-3));
        for scale in [1.0, 0.5] {
            let d = Twist(delta.0 * scale);
            let mut poses = s.poses.clone();
            poses[1] = poses[1].left_update(&d);
            let g1 = graph_from(&s, &poses, &s.depths);
            let r1 = residuals(&g1, 2).unwrap();
            let mut worst: f64 = 0.0;
            for (a, b) in r0.iter().zip(&r1) {
                let jac = flow_jacobians_at(&t01, &pixel(a.x, a.y), s.depths[0].get(a.x, a.y).unwrap(), &s.k).unwrap();
                let predicted = -(jac.pose * d.0);
                worst = worst.max((b.r - a.r - predicted).norm());
            }
            assert!(worst < 0.5 * (d.norm() * 30.0).powi(2), "second-order remainder {worst}");
        }
    }

    #[test]
    fn zero_residuals_give_zero_update() {
        let s = scene(3);
        let mut g = graph_from(&s, &s.poses, &s.depths);
        let mut solver = Solver::new(stride1()).unwrap();
        let rep = solver.step(&mut g).unwrap();
        assert!(rep.cost_before < 1e-18);
        for (_, t) in &rep.pose_updates {
            assert!(t.norm() < 1e-12);
        }
        for (kf, p) in g.keyframes().zip(&s.poses) {
            assert_eq!(kf.pose, *p);
        }
    }

    #[test]
    fn schur_matches_dense_solve() {
        let s = scene(3);
        let mut poses = s.poses.clone();
        poses[1] = poses[1].left_update(&Twist(Vector6::new(0.01, 0.0, -0.01, 0.01, 0.0, 0.01)));
        poses[2] = poses[2].left_update(&Twist(Vector6::new(0.0, 0.01, 0.0, -0.01, 0.01, 0.0)));
        let g = graph_from(&s, &poses, &s.depths);
        let cfg = SolverConfig {
            stride: 2,
            ..SolverConfig::default()
        };
        let ne = normal_equations(&g, &cfg).unwrap();
        assert!(ne.depth.len() <= 500 && !ne.depth.is_empty());
        let lambda = 1e-3;
        let (dxi, dd) = solve_schur(&ne, lambda).unwrap();

        // Dense joint system in reduced pose coordinates.
        let np = ne.b_pose.len();
        let nd = ne.depth.len();
        let mut h = DMatrix::zeros(np + nd, np + nd);
        let mut b = DVector::zeros(np + nd);
        h.view_mut((0, 0), (np, np)).copy_from(&ne.b_mat);
        b.rows_mut(0, np).copy_from(&ne.b_pose);
        for (k, v) in ne.depth.iter().enumerate() {
            h[(np + k, np + k)] = v.c;
            b[np + k] = v.b;
            for (pa, ea) in &v.e {
                h.view_mut((6 * pa, np + k), (6, 1)).copy_from(ea);
                h.view_mut((np + k, 6 * pa), (1, 6)).copy_from(&ea.transpose());
            }
        }
        for a in 0..np + nd {
            h[(a, a)] = damp(h[(a, a)], lambda);
        }
        let qp = pose_basis(&ne);
        let mut q = DMatrix::zeros(np + nd, qp.ncols() + nd);
        q.view_mut((0, 0), (np, qp.ncols())).copy_from(&qp);
        q.view_mut((np, qp.ncols()), (nd, nd)).fill_with_identity();
        let y = (q.transpose() * &h * &q).lu().solve(&(q.transpose() * &b)).unwrap();
        let full = &q * y;
        let joint = DVector::from_iterator(np + nd, dxi.iter().chain(dd.iter()).copied());
        assert!((&joint - &full).norm() / full.norm() < 1e-8);
    }

    #[test]
    fn frame_alignment_recovers_pose_from_the_keyframe_pose() {
        let s = scene(4);
        let g = graph_from(&s, &s.poses[..1], &s.depths[..1]);
        let kf = g.keyframes().next().unwrap();
        let obs = Oracle { s: &s }.observe(0, 3).unwrap();
        let est = align_frame(kf, &obs, s.poses[0], &s.k, &stride1()).unwrap();
        let (rot, trans) = est.distance(&s.poses[3]);
        assert!(rot < 1e-9 && trans < 1e-9, "{rot} {trans}");
    }

    #[test]
    fn two_keyframe_pose_recovery() {
        let s = scene(2);
        let mut poses = s.poses.clone();
        poses[1] = poses[1].left_update(&Twist(Vector6::new(0.01, 0.0, 0.0, 0.0, 0.01, 0.0)));
        let mut g = graph_from(&s, &poses, &s.depths);
        let truth = s.poses[1].compose(&s.poses[0].inverse());
        let mut solver = Solver::new(stride1()).unwrap();
        let mut err = f64::INFINITY;
        for _ in 0..10 {
            solver.step(&mut g).unwrap();
            err = relative_error(&g.relative_pose(0, 1).unwrap(), &truth);
            if err < 1e-6 {
                break;
            }
        }
        assert!(err < 1e-6, "relative pose error {err}");
    }

    #[test]
    fn depth_only_perturbation_is_recovered() {
        let s = scene(2);
        let mut disp = s.depths.clone();
        let (w, h) = disp[0].dims();
        for y in 0..h {
            for x in 0..w / 2 {
                let d = disp[0].raw(x, y);
                disp[0].set(x, y, 1.1 * d);
            }
        }
        let mut g = graph_from(&s, &s.poses, &disp);
        let mut solver = Solver::new(stride1()).unwrap();
        for _ in 0..10 {
            solver.step(&mut g).unwrap();
        }
        let kf = g.keyframe(0).unwrap();
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (kf.disparity.raw(x, y), s.depths[0].raw(x, y));
                worst = worst.max((a - b).abs() / b);
            }
        }
        assert!(worst < 1e-4, "worst relative disparity error {worst}");
    }

    #[test]
    fn gauge_pose_is_untouched_and_cost_decreases() {
        let s = scene(4);
        let mut poses = s.poses.clone();
        for (f, p) in poses.iter_mut().enumerate().skip(1) {
            *p = p.left_update(&Twist(Vector6::new(0.005 * f as f64, -0.004, 0.003, 0.01, -0.005, 0.004)));
        }
        let mut g = graph_from(&s, &poses, &s.depths);
        let anchor = g.keyframe(0).unwrap().pose;
        let rep = track_batch(
            &mut g,
            &SolverConfig {
                iterations: 6,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        assert_eq!(g.keyframe(0).unwrap().pose, anchor);
        assert_eq!(rep.costs.len(), 7);
        for w in rep.costs.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(rep.costs.last().unwrap() < &(0.1 * rep.costs[0]));
        assert_eq!(rep.increments.len(), 4);
        assert!(rep.increments[0].delta_pose.norm() == 0.0);
    }

    #[test]
    fn increments_describe_the_pose_change() {
        let s = scene(3);
        let mut poses = s.poses.clone();
        poses[2] = poses[2].left_update(&Twist(Vector6::new(0.0, 0.01, 0.0, 0.01, 0.0, 0.0)));
        let mut g = graph_from(&s, &poses, &s.depths);
        let before: HashMap<u64, Pose> = g.keyframes().map(|k| (k.id, k.pose)).collect();
        let rep = track_batch(&mut g, &stride1()).unwrap();
        for inc in &rep.increments {
            let kf = g.keyframe(inc.keyframe_id).unwrap();
            let predicted = Pose::exp(&inc.delta_pose).compose(&before[&inc.keyframe_id].inverse());
            let (a, t) = predicted.distance(&kf.pose.inverse());
            assert!(a < 1e-9 && t < 1e-9);
        }
    }

    #[test]
    fn solver_coords_are_block_centers() {
        assert_eq!(solver_coords(8, 4), vec![2, 6]);
        assert_eq!(solver_coords(5, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(solver_coords(10, 4), vec![2, 6, 9]);
    }

    #[test]
    fn huber_cost_is_continuous() {
        let (a, _) = robust(1.0, 2.0, Some(1.0));
        let (b, _) = robust(1.0 + 1e-12, 2.0, Some(1.0));
        assert_relative_eq!(a, b, epsilon = 1e-9);
        assert_eq!(robust(3.0, 1.0, None).0, 4.5);
        assert_eq!(robust(3.0, 1.0, Some(1.0)).0, 2.5);
    }
}
