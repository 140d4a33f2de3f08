//! Pinhole camera, SE(3) poses, back-projection and the flow induced by a
//! relative pose and an inverse-depth map.
//!
//! Conventions:
//! - pixel centers sit at integer coordinates, origin top-left, x right, y down;
//! - depth is carried as disparity `d = 1/z`;
//! - twists are ordered `(ω, v)` and increments act by left multiplication,
//!   `T ← exp(δ) ∘ T`;
//! - flow is a displacement, `target − source`.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Minimum camera-frame depth for a point to be considered in front of the camera.
pub const EPS_Z: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image size must be non-zero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x < self.width as f64 - 0.5 && p.y < self.height as f64 - 0.5
    }

    /// Nearest pixel to `p`, if it lies inside the image.
    #[inline]
    pub fn nearest_pixel(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let x = p.x.round().max(0.0) as usize;
        let y = p.y.round().max(0.0) as usize;
        Some((x.min(self.width - 1), y.min(self.height - 1)))
    }

    /// Ray direction `((u−cx)/fx, (v−cy)/fy, 1)`.
    #[inline]
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Jacobian of the projection at camera-frame point `x`.
    #[inline]
    pub fn projection_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        Matrix2x3::new(self.fx * iz, 0.0, -self.fx * x.x * iz2, 0.0, self.fy * iz, -self.fy * x.y * iz2)
    }
}

/// A 6-vector in se(3): rotational part first, translational second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Left Jacobian of SO(3) (the `V` matrix of the SE(3) exponential).
fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (a, b) = if theta2 < 1e-6 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let c = if theta2 < 1e-6 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn exp(xi: &Twist) -> Pose {
        let w = xi.omega();
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(w),
            translation: so3_left_jacobian(&w) * xi.v(),
        }
    }

    pub fn log(&self) -> Twist {
        let w = self.rotation.scaled_axis();
        Twist::new(w, so3_left_jacobian_inv(&w) * self.translation)
    }

    /// `exp(δ) ∘ self`.
    pub fn left_update(&self, delta: &Twist) -> Pose {
        Pose::exp(delta).compose(self)
    }

    /// Adjoint in `(ω, v)` ordering: `T exp(δ) T⁻¹ = exp(Ad_T δ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Rotation angle (rad) and translation distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let angle = self.rotation.angle_to(&other.rotation);
        (angle, (self.translation - other.translation).norm())
    }
}

/// Per-pixel disparity with a validity flag. Valid entries are finite and positive.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthMap {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl InverseDepthMap {
    /// Entries that are non-finite or non-positive are marked invalid.
    pub fn new(values: Grid<f64>) -> Self {
        let valid = values.map(|&d| d.is_finite() && d > 0.0);
        Self { values, valid }
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Self {
        Self::new(Grid::filled(width, height, d))
    }

    pub fn from_depth(depth: &Grid<f64>) -> Self {
        Self::new(depth.map(|&z| if z > 0.0 && z.is_finite() { 1.0 / z } else { 0.0 }))
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// Disparity at `(x, y)`, if valid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }

    /// Raw stored value regardless of validity.
    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f64 {
        *self.values.get(x, y)
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.values.set(x, y, d);
        self.valid.set(x, y, d.is_finite() && d > 0.0);
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.values.set(x, y, 0.0);
        self.valid.set(x, y, false);
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn validity(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn to_depth(&self) -> Grid<f64> {
        Grid::from_fn(self.width(), self.height(), |x, y| match self.get(x, y) {
            Some(d) => 1.0 / d,
            None => 0.0,
        })
    }

    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .values
            .as_slice()
            .iter()
            .zip(self.valid.as_slice())
            .filter(|(_, &ok)| ok)
            .map(|(&d, _)| d)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        Some(v[v.len() / 2])
    }
}

pub type FlowField = Grid<Vector2<f64>>;

/// Output of [`induced_flow`]: displacement plus a per-pixel validity flag.
#[derive(Clone, Debug)]
pub struct InducedFlow {
    pub flow: FlowField,
    pub valid: Grid<bool>,
}

/// Camera-frame point for pixel `p` at disparity `d`; its depth is `1/d`.
pub fn back_project(p: &Vector2<f64>, d: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDepth(d));
    }
    Ok(k.ray(p) / d)
}

/// Pixel coordinates of a camera-frame point, or `None` if it is not in front of the camera.
#[inline]
pub fn project(x: &Vector3<f64>, k: &Intrinsics) -> Option<Vector2<f64>> {
    if x.z <= EPS_Z {
        return None;
    }
    Some(Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
}

#[inline]
pub fn pixel(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64, y as f64)
}

/// Transformed point and its projection for pixel `p` of the source frame.
#[inline]
pub fn reproject(t_ij: &Pose, p: &Vector2<f64>, d: f64, k: &Intrinsics) -> Option<(Vector2<f64>, Vector3<f64>)> {
    let xi = k.ray(p) / d;
    let xj = t_ij.transform(&xi);
    project(&xj, k).map(|q| (q, xj))
}

/// Displacement field `Π(T_ij ∘ Π⁻¹(p, d_i(p))) − p`.
pub fn induced_flow(t_ij: &Pose, d_i: &InverseDepthMap, k: &Intrinsics) -> InducedFlow {
    let (w, h) = d_i.dims();
    let mut flow = Grid::filled(w, h, Vector2::zeros());
    let mut valid = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = d_i.get(x, y) else { continue };
            let p = pixel(x, y);
            if let Some((q, _)) = reproject(t_ij, &p, d, k) {
                flow.set(x, y, q - p);
                valid.set(x, y, true);
            }
        }
    }
    InducedFlow { flow, valid }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowJacobians {
    /// d(flow)/d(δ) for `T_ij ← exp(δ) ∘ T_ij`.
    pub pose: SMatrix<f64, 2, 6>,
    /// d(flow)/d(d_i(p)).
    pub depth: Vector2<f64>,
}

/// Jacobians of the induced flow at pixel `(x, y)` w.r.t. a left twist on
/// `T_ij` and the source disparity.
pub fn flow_jacobians(t_ij: &Pose, d_i: &InverseDepthMap, k: &Intrinsics, x: usize, y: usize) -> Result<FlowJacobians> {
    let d = d_i.get(x, y).ok_or(Error::NoJacobian { x, y })?;
    flow_jacobians_at(t_ij, &pixel(x, y), d, k).ok_or(Error::NoJacobian { x, y })
}

pub(crate) fn flow_jacobians_at(t_ij: &Pose, p: &Vector2<f64>, d: f64, k: &Intrinsics) -> Option<FlowJacobians> {
    let xi = k.ray(p) / d;
    let xj = t_ij.transform(&xi);
    if xj.z <= EPS_Z {
        return None;
    }
    let jp = k.projection_jacobian(&xj);
    // exp(δ)·X ≈ X + ω×X + v
    let mut dx = SMatrix::<f64, 3, 6>::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&xj)));
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let dxj_dd = t_ij.rotation * (-xi / d);
    Some(FlowJacobians {
        pose: jp * dx,
        depth: jp * dxj_dd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k64() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let w = Vector3::new(rng.random_range(-rot..rot), rng.random_range(-rot..rot), rng.random_range(-rot..rot));
        let t = Vector3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        );
        Pose::exp(&Twist::new(w, t))
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, -0.1, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn back_project_principal_ray() {
        let k = k64();
        let x = back_project(&Vector2::new(k.cx, k.cy), 1.0, &k).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn back_project_hand_value() {
        let k = k64();
        let x = back_project(&Vector2::new(k.cx + k.fx, k.cy), 2.0, &k).unwrap();
        assert_relative_eq!(x, Vector3::new(0.5, 0.0, 0.5), epsilon = 1e-15);
    }

    #[test]
    fn back_project_rejects_nonpositive_disparity() {
        let k = k64();
        assert!(matches!(back_project(&Vector2::new(1.0, 1.0), 0.0, &k), Err(Error::InvalidDepth(_))));
        assert!(back_project(&Vector2::new(1.0, 1.0), -1.0, &k).is_err());
    }

    #[test]
    fn back_project_round_trip_random() {
        let k = k64();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
            let d = rng.random_range(0.05..5.0);
            let x = back_project(&p, d, &k).unwrap();
            assert_relative_eq!(x.z, 1.0 / d, max_relative = 1e-14);
            assert_relative_eq!(project(&x, &k).unwrap(), p, epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_flow_is_zero() {
        let k = k64();
        let d = InverseDepthMap::new(Grid::from_fn(64, 64, |x, y| 0.2 + 0.01 * (x + y) as f64));
        let f = induced_flow(&Pose::identity(), &d, &k);
        assert!(f.valid.as_slice().iter().all(|&v| v));
        assert!(f.flow.as_slice().iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn frontal_plane_translation_flow() {
        // X_j = X_i + (0.01, 0, 0) at depth 1 → u shifts by fx·0.01 = 1 px.
        // The camera moving +x (t_cw = −0.01) gives flow −1 px.
        let k = k64();
        let d = InverseDepthMap::constant(64, 64, 1.0);
        let t_ij = Pose::from_translation(Vector3::new(-0.01, 0.0, 0.0));
        let f = induced_flow(&t_ij, &d, &k);
        for v in f.flow.as_slice() {
            assert_relative_eq!(v.x, -1.0, epsilon = 1e-12);
            assert_relative_eq!(v.y, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn optical_axis_half_turn_mirrors_pixels() {
        let k = Intrinsics::new(50.0, 50.0, 16.0, 16.0, 33, 33).unwrap();
        let d = InverseDepthMap::constant(33, 33, 0.5);
        let t = Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::PI)), Vector3::zeros());
        let f = induced_flow(&t, &d, &k);
        for (x, y) in f.flow.coords() {
            let (u, v) = (x as f64 - k.cx, y as f64 - k.cy);
            let target = pixel(x, y) + f.flow.get(x, y);
            assert_relative_eq!(target, Vector2::new(k.cx - u, k.cy - v), epsilon = 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_flagged() {
        let k = k64();
        let d = InverseDepthMap::constant(64, 64, 1.0);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let f = induced_flow(&t, &d, &k);
        assert!(f.valid.as_slice().iter().all(|&v| !v));
    }

    fn numeric_jacobians(t: &Pose, p: &Vector2<f64>, d: f64, k: &Intrinsics, h: f64) -> (SMatrix<f64, 2, 6>, Vector2<f64>) {
        let f = |t: &Pose, d: f64| reproject(t, p, d, k).unwrap().0 - p;
        let mut jp = SMatrix::<f64, 2, 6>::zeros();
        for c in 0..6 {
            let mut e = Vector6::zeros();
            e[c] = h;
            let plus = f(&t.left_update(&Twist(e)), d);
            let minus = f(&t.left_update(&Twist(-e)), d);
            jp.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        let jd = (f(t, d + h) - f(t, d - h)) / (2.0 * h);
        (jp, jd)
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn jacobians_match_central_differences() {
        let k = k64();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < 200 {
            let t = random_pose(&mut rng, 0.3, 0.3);
            let p = Vector2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
            let d = rng.random_range(0.2..2.0);
            let Some(j) = flow_jacobians_at(&t, &p, d, &k) else { continue };
            if reproject(&t, &p, d, &k).unwrap().1.z < 0.1 {
                continue;
            }
            let (jp, jd) = numeric_jacobians(&t, &p, d, &k, 1e-6);
            worst = worst.max(max_rel(j.pose.as_slice(), jp.as_slice()));
            worst = worst.max(max_rel(j.depth.as_slice(), jd.as_slice()));
            n += 1;
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn z_rotation_column_vanishes_on_optical_axis() {
        // Principal point on a pixel center so the pixel ray is the optical axis.
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let d = InverseDepthMap::constant(64, 64, 0.5);
        let j = flow_jacobians(&Pose::identity(), &d, &k, 32, 32).unwrap();
        assert_eq!(j.pose.column(2).norm(), 0.0);
    }

    #[test]
    fn depth_jacobian_zero_under_identity() {
        let k = k64();
        let d = InverseDepthMap::constant(64, 64, 0.7);
        for (x, y) in [(0, 0), (10, 50), (63, 63)] {
            let j = flow_jacobians(&Pose::identity(), &d, &k, x, y).unwrap();
            assert!(j.depth.norm() < 1e-12);
        }
    }

    #[test]
    fn invalid_pixel_has_no_jacobian() {
        let k = k64();
        let mut d = InverseDepthMap::constant(64, 64, 0.7);
        d.invalidate(3, 4);
        assert!(matches!(flow_jacobians(&Pose::identity(), &d, &k, 3, 4), Err(Error::NoJacobian { x: 3, y: 4 })));
    }

    #[test]
    fn flow_round_trip_through_inverse() {
        let k = k64();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = random_pose(&mut rng, 0.1, 0.1);
            let p = Vector2::new(rng.random_range(5.0..58.0), rng.random_range(5.0..58.0));
            let d = rng.random_range(0.3..1.5);
            let (q, xj) = reproject(&t, &p, d, &k).unwrap();
            let (back, _) = reproject(&t.inverse(), &q, 1.0 / xj.z, &k).unwrap();
            assert!((back - p).norm() < 1e-6);
        }
    }

    #[test]
    fn adjoint_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_pose(&mut rng, 1.0, 1.0);
        let xi = Twist(Vector6::new(0.01, -0.02, 0.03, 0.1, 0.0, -0.05));
        let lhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
        let rhs = Pose::exp(&Twist(t.adjoint() * xi.0));
        let (a, b) = lhs.distance(&rhs);
        assert!(a < 1e-12 && b < 1e-12);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-2.0f64..2.0)).prop_map(|(w, v)| {
            let w = Vector3::from(w);
            let w = if w.norm() > 3.0 { w * (3.0 / w.norm()) } else { w };
            Pose::exp(&Twist::new(w, Vector3::from(v)))
        })
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(w in prop::array::uniform3(-1.7f64..1.7), v in prop::array::uniform3(-3.0f64..3.0)) {
            let w = Vector3::from(w);
            prop_assume!(w.norm() < 3.0);
            let xi = Twist::new(w, Vector3::from(v));
            let back = Pose::exp(&xi).log();
            prop_assert!((back.0 - xi.0).norm() < 1e-9);
        }

        #[test]
        fn compose_inverse_is_identity(p in pose_strategy()) {
            let (a, b) = p.compose(&p.inverse()).distance(&Pose::identity());
            prop_assert!(a < 1e-9 && b < 1e-9);
            prop_assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            let (da, dt) = l.distance(&r);
            prop_assert!(da < 1e-9 && dt < 1e-9);
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(Pose::exp(&Twist::zero()), Pose::identity());
    }
}
