//! Pinhole intrinsics, rigid transforms and the planar velocity motion model.
//!
//! Vehicle frame: x forward, y left, z up. Camera frame: z forward, x right,
//! y down.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this heading change a step is treated as a straight line.
pub const STRAIGHT_EPS: f64 = 1e-8;

/// Drift in `RᵀR − I` tolerated before a transform is re-orthonormalized.
pub const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::config("principal point must be finite"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Principal point at the image centre. Pixel centres sit at integer
    /// coordinates, so the centre of a `w`-wide image is `(w − 1) / 2`.
    pub fn centered(fx: f64, fy: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    /// Camera-frame point at depth `z` (along the optical axis) behind pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z]
    }

    /// Continuous pixel coordinates `(u, v)` of a camera-frame point with `z > 0`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Homogeneous 4×4 rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Matrix4<f64>);

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform(Matrix4::identity())
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        RigidTransform(m).renormalized()
    }

    /// Validates the bottom row, orthonormality and orientation of `m`.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let t = RigidTransform(m);
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("transform has non-finite entries".into()));
        }
        if m.fixed_view::<1, 4>(3, 0) != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(Error::Input("transform bottom row must be [0, 0, 0, 1]".into()));
        }
        if t.orthonormality_error() >= ORTHO_TOL || t.rotation().determinant() <= 0.0 {
            return Err(Error::Input("transform rotation block is not a proper rotation".into()));
        }
        Ok(t)
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_row_slice(v))
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::new(x, y, z))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn offset(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.offset());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        RigidTransform(m)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let f = |r: usize| m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)];
        [f(0), f(1), f(2)]
    }

    /// Rotates a direction (no translation).
    pub fn apply_dir(&self, d: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let f = |r: usize| m[(r, 0)] * d[0] + m[(r, 1)] * d[1] + m[(r, 2)] * d[2];
        [f(0), f(1), f(2)]
    }

    /// `‖RᵀR − I‖∞`
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).amax()
    }

    pub fn is_valid(&self) -> bool {
        Self::from_matrix(self.0).is_ok()
    }

    fn renormalized(self) -> Self {
        if self.orthonormality_error() < ORTHO_TOL {
            return self;
        }
        // nearest rotation in Frobenius norm: U Vᵀ from the SVD
        let svd = self.rotation().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        let mut m = self.0;
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        RigidTransform(m)
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform(self.0 * rhs.0).renormalized()
    }
}

/// One odometry reading: speed, yaw rate, and the time to the next frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Odometry {
    pub v: f64,
    pub yaw_rate: f64,
    pub dt: f64,
}

impl Odometry {
    pub fn new(v: f64, yaw_rate: f64, dt: f64) -> Result<Self> {
        if !(v.is_finite() && yaw_rate.is_finite() && dt.is_finite() && dt > 0.0) {
            return Err(Error::Input(format!(
                "odometry must be finite with dt > 0, got v={v}, yaw_rate={yaw_rate}, dt={dt}"
            )));
        }
        Ok(Odometry { v, yaw_rate, dt })
    }
}

/// Planar vehicle displacement.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Vehicle displacement over one reading, expressed in the vehicle frame at
/// the start of the interval.
pub fn step_pose(o: &Odometry) -> Pose2 {
    let theta = o.yaw_rate * o.dt;
    if theta.abs() < STRAIGHT_EPS {
        return Pose2 {
            x: o.v * o.dt,
            y: 0.0,
            theta,
        };
    }
    let r = o.v / o.yaw_rate;
    let half = (theta / 2.0).sin();
    Pose2 {
        x: r * theta.sin(),
        // r − r·cos θ without the cancellation
        y: r * 2.0 * half * half,
        theta,
    }
}

pub fn vehicle_transform(p: Pose2) -> RigidTransform {
    let (s, c) = p.theta.sin_cos();
    let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    RigidTransform::from_parts(r, Vector3::new(p.x, p.y, 0.0))
}

/// Planar pose of a rigid transform whose rotation is about z.
pub fn planar_pose(t: &RigidTransform) -> Pose2 {
    let m = t.matrix();
    Pose2 {
        x: m[(0, 3)],
        y: m[(1, 3)],
        theta: m[(1, 0)].atan2(m[(0, 0)]),
    }
}

/// Vehicle → camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics(pub RigidTransform);

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics(RigidTransform::identity())
    }

    /// Forward-looking camera `height` metres above the vehicle origin.
    pub fn forward_camera(height: f64) -> Self {
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        Extrinsics(RigidTransform::from_parts(r, Vector3::new(0.0, height, 0.0)))
    }
}

/// Camera-frame transform taking points seen at frame t to frame t+1.
pub fn camera_step(o: &Odometry, ext: &Extrinsics) -> RigidTransform {
    let e = ext.0;
    e * vehicle_transform(step_pose(o)).inverse() * e.inverse()
}

/// Composes consecutive transforms; the first element is applied first.
pub fn chain(transforms: &[RigidTransform]) -> Result<RigidTransform> {
    let (first, rest) = transforms
        .split_first()
        .ok_or_else(|| Error::usage("chain needs at least one transform"))?;
    Ok(rest.iter().fold(*first, |acc, t| *t * acc))
}

/// Composed vehicle displacement over consecutive readings.
pub fn compose_steps(odos: &[Odometry]) -> Pose2 {
    let t = odos
        .iter()
        .fold(RigidTransform::identity(), |acc, o| acc * vehicle_transform(step_pose(o)));
    planar_pose(&t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        (a.matrix() - b.matrix()).amax() < tol
    }

    #[test]
    fn straight_and_zero_speed_steps() {
        let p = step_pose(&Odometry::new(1.0, 0.0, 1.0).unwrap());
        assert_eq!(p, Pose2 { x: 1.0, y: 0.0, theta: 0.0 });
        let p = step_pose(&Odometry::new(0.0, 0.3, 1.0).unwrap());
        assert_eq!((p.x, p.y), (0.0, 0.0));
        assert!((p.theta - 0.3).abs() < 1e-15);
    }

    #[test]
    fn quarter_circle() {
        let p = step_pose(&Odometry::new(FRAC_PI_2, FRAC_PI_2, 1.0).unwrap());
        assert!((p.x - 1.0).abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);
        assert!((p.theta - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn vehicle_transform_cases() {
        assert_eq!(vehicle_transform(Pose2::default()), RigidTransform::identity());
        let t = vehicle_transform(Pose2 { x: 1.0, y: 1.0, theta: FRAC_PI_2 });
        let o = t.apply([0.0; 3]);
        assert_eq!(o, [1.0, 1.0, 0.0]);
        let r = vehicle_transform(Pose2 { x: 0.0, y: 0.0, theta: PI }).rotation();
        let expect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expect).amax() < 1e-15);
    }

    #[test]
    fn camera_step_cases() {
        let still = Odometry::new(0.0, 0.0, 1.0).unwrap();
        assert!(close(&camera_step(&still, &Extrinsics::identity()), &RigidTransform::identity(), 1e-15));
        let fwd = Odometry::new(1.0, 0.0, 1.0).unwrap();
        let t = camera_step(&fwd, &Extrinsics::identity());
        assert!(close(&t, &RigidTransform::translation(-1.0, 0.0, 0.0), 1e-15));
        let ext = Extrinsics::forward_camera(1.4);
        assert!(close(&camera_step(&still, &ext), &RigidTransform::identity(), 1e-15));
    }

    #[test]
    fn forward_motion_brings_points_closer() {
        let ext = Extrinsics::forward_camera(1.4);
        let t = camera_step(&Odometry::new(2.0, 0.0, 0.5).unwrap(), &ext);
        let p = t.apply([0.5, 0.2, 10.0]);
        assert!((p[2] - 9.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn chain_translations_and_empty() {
        let t = chain(&[RigidTransform::translation(1.0, 0.0, 0.0), RigidTransform::translation(0.0, 1.0, 0.0)])
            .unwrap();
        assert!(close(&t, &RigidTransform::translation(1.0, 1.0, 0.0), 1e-15));
        let i = RigidTransform::identity();
        assert_eq!(chain(&[i, i, i]).unwrap(), i);
        assert!(matches!(chain(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn from_matrix_rejects_bad_rows() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(RigidTransform::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        assert!(RigidTransform::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(0, 1)] = 0.1;
        assert!(RigidTransform::from_matrix(m).is_err());
    }

    #[test]
    fn drifted_rotation_is_repaired() {
        let r = Matrix3::new(1.0, 1e-6, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let t = RigidTransform::from_parts(r, Vector3::zeros());
        assert!(t.is_valid());
    }

    #[test]
    fn odometry_validation() {
        assert!(Odometry::new(1.0, 0.0, 0.0).is_err());
        assert!(Odometry::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn centered_intrinsics() {
        let k = Intrinsics::centered(64.0, 64.0, 64, 96).unwrap();
        assert_eq!((k.cx, k.cy), (47.5, 31.5));
        let (u, v) = k.project(k.backproject(10.0, 3.0, 7.5));
        assert!((u - 10.0).abs() < 1e-12 && (v - 3.0).abs() < 1e-12);
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
