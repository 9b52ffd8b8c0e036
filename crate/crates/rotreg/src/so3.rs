//! Rotation representations, conversions, metrics and samplers.
//!
//! Conventions fixed here and used everywhere else:
//! - Rotations are proper 3x3 orthogonal matrices acting on column vectors.
//! - Euler angles are intrinsic Y-X-Z (yaw about +y, then pitch about +x,
//!   then roll about +z), reported in degrees with yaw/roll in [-180, 180]
//!   and pitch in [-90, 90].
//! - The in-plane rotation `inplane_rotation(theta)` uses the layout
//!   [[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]].

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

/// Tolerance for the rotation invariants (orthogonality and determinant).
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum So3Error {
    #[error("quaternion norm {norm} deviates from 1 by more than 1e-6")]
    NonUnitQuaternion { norm: f64 },
    #[error("matrix violates rotation invariants: {defect}")]
    NotARotation { defect: f64 },
}

/// A proper rotation matrix (R R^T = I, det R = +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates the rotation invariants before wrapping.
    pub fn try_new(m: Matrix3<f64>) -> Result<Self, So3Error> {
        let defect = rotation_defect(&m);
        if defect > ROTATION_TOL {
            return Err(So3Error::NotARotation { defect });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that is known to be a rotation by construction.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix3<f64> {
        self.0
    }

    /// Inverse rotation (transpose).
    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Combined orthogonality + determinant defect of a candidate rotation:
/// ||m m^T - I||_F + |det m - 1|.
pub fn rotation_defect(m: &Matrix3<f64>) -> f64 {
    let ortho = (m * m.transpose() - Matrix3::identity()).norm();
    ortho + (m.determinant() - 1.0).abs()
}

/// Unit quaternion (w, x, y, z). `q` and `-q` represent the same rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn negated(&self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Euler angles in degrees. `gimbal_lock` flags |pitch| >= 89.99 deg, where
/// yaw and roll are no longer separable; the returned values are still usable
/// (roll is folded into yaw).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
    pub gimbal_lock: bool,
}

/// SVD with both orthogonal factors forced to determinant +1; the sign is
/// absorbed into the smallest singular value, so s1 >= s2 >= |s3| and s3 < 0
/// exactly when det(input) < 0.
#[derive(Debug, Clone, Copy)]
pub struct ProperSvd {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl ProperSvd {
    pub fn reconstruct(&self) -> Matrix3<f64> {
        self.u * Matrix3::from_diagonal(&self.s) * self.v.transpose()
    }
}

/// Standard unit-quaternion to rotation-matrix transform.
///
/// Errors if the quaternion norm deviates from 1 by more than 1e-6; smaller
/// deviations are normalized away.
pub fn quat_to_matrix(q: &Quaternion) -> Result<Rotation, So3Error> {
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(So3Error::NonUnitQuaternion { norm: n });
    }
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Ok(Rotation(m))
}

/// Extracts intrinsic Y-X-Z Euler angles from a rotation.
pub fn euler_from_matrix(r: &Rotation) -> EulerAngles {
    let m = r.matrix();
    // R = Ry(yaw) Rx(pitch) Rz(roll):
    //   m13 = sin(yaw) cos(pitch)   m23 = -sin(pitch)   m33 = cos(yaw) cos(pitch)
    //   m21 = cos(pitch) sin(roll)  m22 = cos(pitch) cos(roll)
    let sp = (-m[(1, 2)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    let gimbal = sp.abs() >= (89.99f64.to_radians()).sin();
    let (yaw, roll) = if gimbal {
        // cos(pitch) ~ 0: only yaw +/- roll is observable. Fold into yaw.
        (f64::atan2(-m[(2, 0)], m[(0, 0)]), 0.0)
    } else {
        (
            f64::atan2(m[(0, 2)], m[(2, 2)]),
            f64::atan2(m[(1, 0)], m[(1, 1)]),
        )
    };
    EulerAngles {
        pitch_deg: pitch.to_degrees(),
        yaw_deg: yaw.to_degrees(),
        roll_deg: roll.to_degrees(),
        gimbal_lock: gimbal,
    }
}

/// Builds the rotation for intrinsic Y-X-Z Euler angles (degrees).
pub fn euler_to_matrix(e: &EulerAngles) -> Rotation {
    let (sy, cy) = e.yaw_deg.to_radians().sin_cos();
    let (sp, cp) = e.pitch_deg.to_radians().sin_cos();
    let (sr, cr) = e.roll_deg.to_radians().sin_cos();
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    Rotation(ry * rx * rz)
}

/// Geodesic distance between two rotations in degrees: the rotation angle of
/// R1 R2^T, in [0, 180].
pub fn geodesic_angle_deg(r1: &Rotation, r2: &Rotation) -> f64 {
    let rel = r1.matrix() * r2.matrix().transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// ||I - R1 R2^T||_F, in [0, 2 sqrt(2)]. Equals 2 sqrt(2) sin(theta/2) where
/// theta is the geodesic angle.
pub fn frobenius_metric(r1: &Rotation, r2: &Rotation) -> f64 {
    let rel = r1.matrix() * r2.matrix().transpose();
    (Matrix3::identity() - rel).norm()
}

/// In-plane (camera-axis) rotation by `theta_deg`:
/// [[cos, sin, 0], [-sin, cos, 0], [0, 0, 1]].
pub fn inplane_rotation(theta_deg: f64) -> Rotation {
    let (s, c) = theta_deg.to_radians().sin_cos();
    Rotation(Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Draws a Haar-uniform unit quaternion (4 iid normals, normalized).
pub fn sample_uniform_quaternion<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    use rand_distr::StandardNormal;
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n > 1e-12 {
            return Quaternion::new(w / n, x / n, y / n, z / n);
        }
    }
}

/// Draws a Haar-uniform rotation.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let q = sample_uniform_quaternion(rng);
    quat_to_matrix(&q).expect("normalized quaternion")
}

/// Deterministic low-discrepancy covering of SO(3) with `n` rotations
/// (super-Fibonacci spiral on S^3). Covering radius ~ 8 deg at n = 1e4,
/// noticeably tighter than iid Haar samples.
pub fn super_fibonacci_rotations(n: usize) -> Vec<Rotation> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533751168755204288118041;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = i as f64 + 0.5;
        let t = s / n as f64;
        let d = 2.0 * std::f64::consts::PI * s;
        let r = t.sqrt();
        let big_r = (1.0 - t).sqrt();
        let alpha = d / PHI;
        let beta = d / PSI;
        let q = Quaternion::new(
            r * alpha.sin(),
            r * alpha.cos(),
            big_r * beta.sin(),
            big_r * beta.cos(),
        );
        out.push(quat_to_matrix(&q).expect("unit by construction"));
    }
    out
}

/// SVD of an arbitrary real 3x3 matrix with det(U) = det(V) = +1.
///
/// Singular values come out descending; any reflection is absorbed into the
/// sign of the smallest one (negate the matching column of U or V). Ties are
/// broken by the stable descending sort.
pub fn proper_svd(a: &Matrix3<f64>) -> ProperSvd {
    let svd = a.svd_unordered(true, true);
    let u_raw = svd.u.expect("svd requested u");
    let vt_raw = svd.v_t.expect("svd requested v_t");
    let sv = svd.singular_values;

    // Stable descending order of singular values.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = Matrix3::zeros();
    let mut v = Matrix3::zeros();
    let mut s = Vector3::zeros();
    let v_raw = vt_raw.transpose();
    for (col, &src) in idx.iter().enumerate() {
        u.set_column(col, &u_raw.column(src));
        v.set_column(col, &v_raw.column(src));
        s[col] = sv[src];
    }

    // Degenerate input (all singular values ~ 0): pin the factors to identity.
    if s[0] <= f64::MIN_POSITIVE {
        return ProperSvd {
            u: Matrix3::identity(),
            s: Vector3::zeros(),
            v: Matrix3::identity(),
        };
    }

    if u.determinant() < 0.0 {
        let c = -u.column(2).clone_owned();
        u.set_column(2, &c);
        s[2] = -s[2];
    }
    if v.determinant() < 0.0 {
        let c = -v.column(2).clone_owned();
        v.set_column(2, &c);
        s[2] = -s[2];
    }
    ProperSvd { u, s, v }
}

/// Wraps an angle in degrees into [-180, 180].
pub fn wrap_angle_deg(x: f64) -> f64 {
    let mut w = x % 360.0;
    if w > 180.0 {
        w -= 360.0;
    } else if w < -180.0 {
        w += 360.0;
    }
    w
}
