//! Rigid-body math: world-to-camera poses, the SE(3) exponential and
//! logarithm, and the quaternion derivatives the rasterizer and the
//! deformation field backpropagate through.
//!
//! Quaternions that are optimized directly are stored as raw `[w, x, y, z]`
//! arrays and normalized on use.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Twist ordering is `(v, ω)`: translational part first, rotational second.
pub type Twist = [f64; 6];

/// World-to-camera rigid transform: `p_cam = R · p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rinv = self.rotation.inverse();
        PoseSE3 {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplicative update `exp(δ) ∘ self`, the convention used by all
    /// pose gradients in this crate.
    pub fn retract(&self, delta: &Twist) -> PoseSE3 {
        se3_exp(delta).compose(self)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exact SE(3) exponential map.
pub fn se3_exp(twist: &Twist) -> PoseSE3 {
    let v = Vector3::new(twist[0], twist[1], twist[2]);
    let w = Vector3::new(twist[3], twist[4], twist[5]);
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&w);
    let k2 = k * k;
    // V = I + b K + c K²
    let (b, c) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let vmat = Matrix3::identity() + k * b + k2 * c;
    PoseSE3 {
        rotation: quat_from_axis_angle(&w),
        translation: vmat * v,
    }
}

/// SE(3) logarithm, inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &PoseSE3) -> Twist {
    let w = quat_to_axis_angle(&pose.rotation);
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&w);
    let k2 = k * k;
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let vinv = Matrix3::identity() - k * 0.5 + k2 * c;
    let v = vinv * pose.translation;
    [v.x, v.y, v.z, w.x, w.y, w.z]
}

pub fn quat_from_axis_angle(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = w.norm();
    let (s, c) = if theta < 1e-8 {
        (0.5 - theta * theta / 48.0, 1.0 - theta * theta / 8.0)
    } else {
        ((theta * 0.5).sin() / theta, (theta * 0.5).cos())
    };
    UnitQuaternion::new_normalize(Quaternion::new(c, s * w.x, s * w.y, s * w.z))
}

pub fn quat_to_axis_angle(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = if q.w < 0.0 {
        -q.into_inner()
    } else {
        q.into_inner()
    };
    let vn = q.imag().norm();
    if vn < 1e-12 {
        return q.imag() * 2.0;
    }
    let angle = 2.0 * vn.atan2(q.w);
    q.imag() * (angle / vn)
}

/// Rotation matrix of a raw (not necessarily unit) quaternion `[w, x, y, z]`.
pub fn rotation_from_raw(q: &[f64; 4]) -> Matrix3<f64> {
    let n = norm4(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Pulls `dL/dR` back to the raw quaternion that produced `R`.
pub fn rotation_from_raw_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = norm4(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    normalize4_backward(q, &[gw, gx, gy, gz])
}

#[inline]
pub fn norm4(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize4(q: &[f64; 4]) -> [f64; 4] {
    let n = norm4(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Backward of `q ↦ q/|q|`.
pub fn normalize4_backward(q: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let n = norm4(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let d = dot4(&u, g);
    [
        (g[0] - u[0] * d) / n,
        (g[1] - u[1] * d) / n,
        (g[2] - u[2] * d) / n,
        (g[3] - u[3] * d) / n,
    ]
}

#[inline]
pub fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Hamilton product of `[w, x, y, z]` quaternions.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[inline]
pub fn quat_conj(q: &[f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Backward of `r = a ⊗ b`: returns `(dL/da, dL/db)`.
pub fn quat_mul_backward(a: &[f64; 4], b: &[f64; 4], g: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
    (quat_mul(g, &quat_conj(b)), quat_mul(&quat_conj(a), g))
}

/// Raw unit quaternion `[w, x, y, z]` of an axis-angle vector.
pub fn axis_angle_to_raw(a: &[f64; 3]) -> [f64; 4] {
    let theta2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let (f, c) = axis_angle_coeffs(theta2);
    [c, f * a[0], f * a[1], f * a[2]]
}

// f(θ) = sin(θ/2)/θ and cos(θ/2).
fn axis_angle_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-10 {
        (0.5 - theta2 / 48.0, 1.0 - theta2 / 8.0)
    } else {
        let t = theta2.sqrt();
        ((t * 0.5).sin() / t, (t * 0.5).cos())
    }
}

/// Backward of [`axis_angle_to_raw`].
pub fn axis_angle_to_raw_backward(a: &[f64; 3], g: &[f64; 4]) -> [f64; 3] {
    let theta2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let (f, _) = axis_angle_coeffs(theta2);
    // f'(θ)/θ, with its series near zero.
    let fp_over_t = if theta2 < 1e-10 {
        -1.0 / 24.0 + theta2 / 960.0
    } else {
        let t = theta2.sqrt();
        (0.5 * t * (t * 0.5).cos() - (t * 0.5).sin()) / (t * t * t)
    };
    let gv = [g[1], g[2], g[3]];
    let adotg = a[0] * gv[0] + a[1] * gv[1] + a[2] * gv[2];
    let mut out = [0.0; 3];
    for i in 0..3 {
        // dw/da = -f/2 · a
        out[i] = f * gv[i] + fp_over_t * a[i] * adotg - 0.5 * f * a[i] * g[0];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_twist_is_identity() {
        let p = se3_exp(&[0.0; 6]);
        assert_abs_diff_eq!(p.rotation.angle(), 0.0);
        assert_abs_diff_eq!(p.translation.norm(), 0.0);
    }

    #[test]
    fn half_turn_about_x() {
        let p = se3_exp(&[0.0, 0.0, 0.0, PI, 0.0, 0.0]);
        let r = p.rotation_matrix();
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        assert!((r - expected).abs().max() < 1e-12);
        assert!(p.translation.norm() < 1e-12);
    }

    #[test]
    fn exp_of_negated_twist_is_inverse() {
        let t = [0.3, -0.2, 0.5, 0.4, -0.1, 0.7];
        let neg = t.map(|v| -v);
        let id = se3_exp(&t).compose(&se3_exp(&neg));
        assert!(id.rotation.angle() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = se3_exp(&[1.0, 2.0, -0.5, 0.2, 0.9, -1.3]);
        let id = p.compose(&p.inverse());
        assert!(id.rotation.angle() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn quaternion_derivatives_match_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.25];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.5, 0.9, -0.6);
        let analytic = rotation_from_raw_backward(&q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = ((rotation_from_raw(&qp) - rotation_from_raw(&qm)).component_mul(&g)).sum()
                / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-7,
                "{i}: {fd} vs {}",
                analytic[i]
            );
        }

        for a in [[0.3, -0.2, 0.5], [1e-7, 2e-7, -1e-7], [2.0, 1.0, -1.5]] {
            let gq = [0.3, -0.5, 0.8, 0.1];
            let analytic = axis_angle_to_raw_backward(&a, &gq);
            for i in 0..3 {
                let h = 1e-6;
                let mut ap = a;
                let mut am = a;
                ap[i] += h;
                am[i] -= h;
                let fd = (dot4(&axis_angle_to_raw(&ap), &gq) - dot4(&axis_angle_to_raw(&am), &gq))
                    / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn axis_angle_matches_nalgebra() {
        let a = [0.3, -0.2, 0.5];
        let q = axis_angle_to_raw(&a);
        let r = rotation_from_raw(&q);
        let expected = quat_from_axis_angle(&Vector3::from(a))
            .to_rotation_matrix()
            .into_inner();
        assert!((r - expected).abs().max() < 1e-12);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(v in prop::array::uniform3(-3.0f64..3.0),
                              axis in prop::array::uniform3(-1.0f64..1.0),
                              angle in 0.0f64..3.1) {
            let n = (axis[0]*axis[0] + axis[1]*axis[1] + axis[2]*axis[2]).sqrt();
            prop_assume!(n > 1e-3);
            let w = axis.map(|a| a / n * angle);
            let t = [v[0], v[1], v[2], w[0], w[1], w[2]];
            let back = se3_log(&se3_exp(&t));
            for i in 0..6 {
                prop_assert!((back[i] - t[i]).abs() < 1e-9, "{:?} vs {:?}", back, t);
            }
        }
    }
}
