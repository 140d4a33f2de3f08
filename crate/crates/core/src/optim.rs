//! Photometric map refinement with per-gaussian Adam state.

use std::collections::HashMap;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::grid::RgbImage;
use crate::losses::{total_loss, LossWeights};
use crate::raster::{render, render_backward, GradBuffers};
use crate::splat::{GaussianMap, SplatConfig};

/// Parameters per gaussian: mean (3), quaternion w,x,y,z (4), log-scale (3),
/// opacity logit (1), color (3).
const NPARAM: usize = 14;
const OPACITY_CLAMP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    /// Step size of the mean, multiplied by the map's spatial extent.
    pub lr_mean: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_mean: 1.6e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_mean, self.lr_rotation, self.lr_scale, self.lr_opacity, self.lr_color];
        if lrs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: [f64; NPARAM],
    v: [f64; NPARAM],
    t: u32,
}

/// A training view: camera pose and the image it should reproduce.
#[derive(Clone, Debug)]
pub struct View<'a> {
    pub pose: Pose,
    pub image: &'a RgbImage,
}

#[derive(Clone, Debug)]
pub struct MapOptimizer {
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub background: Vector3<f64>,
    moments: HashMap<u64, Moments>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MapOptimizer {
    pub fn new(adam: AdamConfig, weights: LossWeights, background: Vector3<f64>) -> Self {
        Self {
            adam,
            weights,
            background,
            moments: HashMap::new(),
        }
    }

    /// Loss averaged over `views` with the summed gradient buffers.
    pub fn loss_and_gradients(&self, map: &GaussianMap, views: &[View], k: &Intrinsics) -> Result<(f64, GradBuffers)> {
        let gs = map.gaussians();
        let mut total = GradBuffers::zeros(gs.len());
        let mut value = 0.0;
        let inv = 1.0 / views.len().max(1) as f64;
        for view in views {
            let fwd = render(gs, &view.pose, k, self.background);
            let l = total_loss(&fwd.color, &fwd.depth, view.image, k, &self.weights)?;
            value += l.value * inv;
            let dc = l.d_color.unwrap().map(|g| g * inv);
            let dd = l.d_depth.unwrap().map(|g| g * inv);
            let g = render_backward(gs, &view.pose, k, &fwd, &dc, &dd);
            for i in 0..gs.len() {
                total.mean[i] += g.mean[i];
                total.rotation[i] += g.rotation[i];
                total.scale[i] += g.scale[i];
                total.opacity[i] += g.opacity[i];
                total.color[i] += g.color[i];
            }
        }
        Ok((value, total))
    }

    /// One Adam step over all gaussians against `views`; returns the loss
    /// before the update. Means of gaussians still linked to a windowed
    /// keyframe are left to tracking.
    pub fn step(&mut self, map: &mut GaussianMap, views: &[View], k: &Intrinsics, splat: &SplatConfig) -> Result<f64> {
        if views.is_empty() || map.is_empty() {
            return Ok(0.0);
        }
        let (value, g) = self.loss_and_gradients(map, views, k)?;
        let extent = map.extent().max(1e-6);
        let a = &self.adam;
        let lr = {
            let mut lr = [0.0; NPARAM];
            lr[0..3].fill(a.lr_mean * extent);
            lr[3..7].fill(a.lr_rotation);
            lr[7..10].fill(a.lr_scale);
            lr[10] = a.lr_opacity;
            lr[11..14].fill(a.lr_color);
            lr
        };
        let live: std::collections::HashSet<u64> = map.meta().iter().map(|m| m.id).collect();
        self.moments.retain(|id, _| live.contains(id));
        let ids: Vec<(u64, bool)> = (0..map.len()).map(|i| (map.meta()[i].id, map.mean_is_free(i))).collect();
        for (i, gauss) in map.gaussians_mut().iter_mut().enumerate() {
            let (id, free_mean) = ids[i];
            let q = gauss.rotation.quaternion();
            let mut grad = [0.0; NPARAM];
            if free_mean {
                grad[0..3].copy_from_slice(g.mean[i].as_slice());
            }
            grad[3..7].copy_from_slice(g.rotation[i].as_slice());
            for c in 0..3 {
                grad[7 + c] = g.scale[i][c] * gauss.scale[c];
            }
            let op = gauss.opacity.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
            grad[10] = g.opacity[i] * op * (1.0 - op);
            grad[11..14].copy_from_slice(g.color[i].as_slice());

            let st = self.moments.entry(id).or_insert(Moments {
                m: [0.0; NPARAM],
                v: [0.0; NPARAM],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - a.beta1.powi(st.t as i32);
            let bc2 = 1.0 - a.beta2.powi(st.t as i32);
            let mut delta = [0.0; NPARAM];
            for p in 0..NPARAM {
                st.m[p] = a.beta1 * st.m[p] + (1.0 - a.beta1) * grad[p];
                st.v[p] = a.beta2 * st.v[p] + (1.0 - a.beta2) * grad[p] * grad[p];
                let mh = st.m[p] / bc1;
                let vh = st.v[p] / bc2;
                delta[p] = -lr[p] * mh / (vh.sqrt() + a.eps);
            }
            if free_mean {
                gauss.mean += Vector3::new(delta[0], delta[1], delta[2]);
            }
            let raw = Quaternion::new(q.w + delta[3], q.i + delta[4], q.j + delta[5], q.k + delta[6]);
            if raw.norm() > 1e-12 {
                gauss.rotation = UnitQuaternion::from_quaternion(raw);
            }
            for c in 0..3 {
                gauss.scale[c] = (gauss.scale[c].ln() + delta[7 + c]).exp().clamp(splat.scale_min, splat.scale_max);
            }
            gauss.opacity = sigmoid(logit(gauss.opacity) + delta[10]).clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
            for c in 0..3 {
                gauss.color[c] = (gauss.color[c] + delta[11 + c]).clamp(0.0, 1.0);
            }
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::splat::Gaussian;

    fn k() -> Intrinsics {
        Intrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32).unwrap()
    }

    fn blob(mean: Vector3<f64>, color: Vector3<f64>) -> Gaussian {
        Gaussian {
            mean,
            rotation: UnitQuaternion::identity(),
            scale: Vector3::repeat(0.15),
            opacity: 0.5,
            color,
        }
    }

    #[test]
    fn logit_round_trip() {
        for p in [0.01, 0.3, 0.5, 0.9] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_reduce_loss_toward_a_reachable_target() {
        let kk = k();
        let truth = vec![
            blob(Vector3::new(-0.2, 0.0, 2.0), Vector3::new(0.9, 0.2, 0.1)),
            blob(Vector3::new(0.25, 0.1, 2.2), Vector3::new(0.1, 0.6, 0.9)),
        ];
        let bg = Vector3::repeat(0.1);
        let target = render(&truth, &Pose::identity(), &kk, bg).color;
        let mut map = GaussianMap::new();
        for g in &truth {
            let mut g = g.clone();
            g.color = Vector3::repeat(0.5);
            g.opacity = 0.3;
            map.push(g);
        }
        let weights = LossWeights {
            ms_ssim: 0.0,
            geo: 0.0,
            ..LossWeights::default()
        };
        let adam = AdamConfig {
            lr_color: 2e-2,
            ..AdamConfig::default()
        };
        let mut opt = MapOptimizer::new(adam, weights, bg);
        let views = [View {
            pose: Pose::identity(),
            image: &target,
        }];
        let first = opt.step(&mut map, &views, &kk, &SplatConfig::default()).unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = opt.step(&mut map, &views, &kk, &SplatConfig::default()).unwrap();
        }
        assert!(last < 0.25 * first, "{first} -> {last}");
    }

    #[test]
    fn linked_means_are_not_moved() {
        use crate::frontend::{Keyframe, ReliabilityMask};
        use crate::geometry::InverseDepthMap;
        let kk = k();
        let disp = InverseDepthMap::new(Grid::filled(32, 32, 0.5));
        let kf = Keyframe {
            id: 0,
            frame_index: 0,
            timestamp: 0.0,
            image: Grid::filled(32, 32, Vector3::repeat(0.5)),
            mask: ReliabilityMask::from_disparity(&disp),
            prev_mask: ReliabilityMask::from_disparity(&disp),
            reference: disp.values().clone(),
            disparity: disp,
            pose: Pose::identity(),
        };
        let mut map = GaussianMap::new();
        let cfg = SplatConfig::default();
        map.spawn(&kf, 16, 16, &kk, &cfg).unwrap();
        map.push(blob(Vector3::new(0.1, 0.0, 2.0), Vector3::repeat(0.2)));
        let before: Vec<_> = map.gaussians().iter().map(|g| g.mean).collect();
        let target = Grid::filled(32, 32, Vector3::new(0.9, 0.1, 0.4));
        let weights = LossWeights {
            ms_ssim: 0.0,
            ..LossWeights::default()
        };
        let mut opt = MapOptimizer::new(AdamConfig::default(), weights, Vector3::zeros());
        for _ in 0..3 {
            opt.step(
                &mut map,
                &[View {
                    pose: Pose::identity(),
                    image: &target,
                }],
                &kk,
                &cfg,
            )
            .unwrap();
        }
        assert_eq!(map.gaussians()[0].mean, before[0]);
        assert_ne!(map.gaussians()[1].mean, before[1]);
    }
}
