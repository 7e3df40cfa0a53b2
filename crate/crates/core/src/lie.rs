//! Rigid transformations in SE(3) and their se(3) twist coordinates.
//!
//! The exponential map uses the closed-form Rodrigues expansion. The
//! logarithm goes through a real Schur factorization of the homogeneous
//! matrix, which stays well defined for rotations by exactly pi (where
//! the rotation block has negative real eigenvalues and the usual
//! inverse scaling-and-squaring approach does not apply).

use std::fmt;

use nalgebra::{linalg::Schur, Matrix3, Matrix4, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Block angles below this are folded into the identity part of the log.
const MIN_BLOCK_ANGLE: f64 = 1e-12;
/// Below this angle the exponential uses Taylor coefficients.
const SMALL_ANGLE: f64 = 1e-4;

/// Skew-symmetric matrix `v^` with `v^ w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] on the skew-symmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A rotation plus translation, acting as `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let axis = axis.normalize();
        let k = hat(&axis);
        let r = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Self::new(r, t)
    }

    /// Homogeneous 4x4 form `[R t; 0 1]`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3x4 block of a homogeneous matrix. The bottom row is
    /// checked to be `[0 0 0 1]`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if bottom.iter().any(|v| v.abs() > 1e-9) {
            return Err(Error::InvalidParameter(
                "bottom row of a rigid transform must be [0 0 0 1]".into(),
            ));
        }
        Ok(Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        ))
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// Frobenius norm of the difference of the homogeneous matrices.
    pub fn frobenius_distance(&self, other: &RigidTransform) -> f64 {
        ((self.rotation - other.rotation).norm_squared()
            + (self.translation - other.translation).norm_squared())
        .sqrt()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = 0.5 * (self.rotation.trace() - 1.0);
        let s = vee(&self.rotation).norm();
        s.atan2(c)
    }

    /// `(||R^T R - I||_F, |det R - 1|)`.
    pub fn orthogonality_error(&self) -> (f64, f64) {
        let r = &self.rotation;
        (
            (r.transpose() * r - Matrix3::identity()).norm(),
            (r.determinant() - 1.0).abs(),
        )
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (o, d) = self.orthogonality_error();
        o < tol && d < tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// Four lines of four whitespace-separated values, row-major.
    pub fn to_text(&self) -> String {
        let m = self.to_matrix();
        let mut out = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`RigidTransform::to_text`]. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut rows = Vec::with_capacity(4);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if vals.len() != 4 {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno + 1,
                    msg: format!("expected 4 values, found {}", vals.len()),
                });
            }
            rows.push(vals);
        }
        if rows.len() != 4 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: text.lines().count(),
                msg: format!("expected 4 rows, found {}", rows.len()),
            });
        }
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        Self::from_matrix(&m)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.to_matrix();
        let rows: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(deserializer)?;
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        RigidTransform::from_matrix(&m).map_err(serde::de::Error::custom)
    }
}

/// se(3) coordinates: rotation generator `delta` and translation generator `u`.
/// The matrix form is `[delta^ u; 0 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub delta: Vector3<f64>,
    pub u: Vector3<f64>,
}

impl Twist {
    pub fn new(delta: Vector3<f64>, u: Vector3<f64>) -> Self {
        Self { delta, u }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Flattened `(delta, u)`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.delta.x,
            self.delta.y,
            self.delta.z,
            self.u.x,
            self.u.y,
            self.u.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.delta));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.u);
        m
    }

    /// Reads the skew part and the last column of an se(3) matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let s: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Self::new(vee(&s), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Coefficients `(sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3)` for `t = |delta|`.
pub(crate) fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let s = theta * theta;
        (
            1.0 - s / 6.0 + s * s / 120.0,
            0.5 - s / 24.0 + s * s / 720.0,
            1.0 / 6.0 - s / 120.0 + s * s / 5040.0,
        )
    } else {
        let (sn, cs) = theta.sin_cos();
        let t2 = theta * theta;
        (sn / theta, (1.0 - cs) / t2, (theta - sn) / (t2 * theta))
    }
}

/// Matrix exponential of a twist.
pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let theta = xi.delta.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = hat(&xi.delta);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    RigidTransform::new(r, v * xi.u)
}

/// Real Schur factorization `T = Q U Q^T` of a homogeneous transform.
///
/// The homogeneous matrix is block upper triangular, so factoring the
/// rotation block and padding with the homogeneous coordinate yields a valid
/// real Schur form of the whole 4x4 matrix.
///
/// The QR iteration can stall when all three eigenvalues cluster near 1; in
/// that case the factor is built from the rotation axis instead.
pub fn real_schur(t: &RigidTransform) -> Result<(Matrix4<f64>, Matrix4<f64>)> {
    if !t.rotation.iter().chain(t.translation.iter()).all(|v| v.is_finite()) {
        return Err(Error::SchurFailed);
    }
    let q3 = match Schur::try_new(t.rotation, f64::EPSILON, 500) {
        Some(schur) => schur.unpack().0,
        None => axis_schur_basis(&t.rotation),
    };
    let mut q = Matrix4::identity();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&q3);
    let u = q.transpose() * t.to_matrix() * q;
    Ok((q, u))
}

/// Orthonormal basis `[e1 e2 a]` with `a` the rotation axis, so that
/// `Q^T R Q` is block diagonal up to roundoff.
fn axis_schur_basis(r: &Matrix3<f64>) -> Matrix3<f64> {
    let w = vee(r);
    let axis = if r.trace() > 1.0 {
        if w.norm() > 1e-12 {
            w.normalize()
        } else {
            // Rotation below ~1e-12 rad: any axis is accurate to that level.
            Vector3::z()
        }
    } else {
        // Angles past pi/2: the symmetric part has the axis as its top
        // eigenvector, separated from the others by 1 - cos(theta) >= 1.
        let eig = SymmetricEigen::new((r + r.transpose()) * 0.5);
        eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned()
    };
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    Matrix3::from_columns(&[e1, e2, axis])
}

fn permutation_matrix(order: [usize; 4]) -> Matrix4<f64> {
    let mut p = Matrix4::zeros();
    for (col, &src) in order.iter().enumerate() {
        p[(src, col)] = 1.0;
    }
    p
}

/// Reorders a real Schur pair `(Q, U)` of a rigid transform into
/// `Q' = [Q1 0; 0 1]`, `U' = [D y; 0 1]` with `D = diag(D1, 1)` and
/// `D1` a planar rotation by an angle in `[0, pi]`.
///
/// `Q` must carry the homogeneous coordinate in exactly one column (as
/// produced by [`real_schur`]); otherwise the input is rejected.
pub fn block_rearrange(q: &Matrix4<f64>, u: &Matrix4<f64>) -> Result<(Matrix4<f64>, Matrix4<f64>)> {
    let h = (0..4)
        .find(|&k| (q[(3, k)].abs() - 1.0).abs() < 1e-9)
        .ok_or_else(|| {
            Error::MalformedSchur("no Schur vector isolates the homogeneous coordinate".into())
        })?;
    let rest: Vec<usize> = (0..4).filter(|&k| k != h).collect();
    let (a, b, c) = (rest[0], rest[1], rest[2]);

    // Pick the 2x2 rotation block among the three remaining Schur indices.
    let tol = 1e-13;
    let (pair, ident) = if u[(b, a)].abs() > tol {
        ((a, b), c)
    } else if u[(c, b)].abs() > tol {
        ((b, c), a)
    } else {
        // All 1x1 blocks: the +1 eigenvalue stays in the identity part, the
        // other two form the block (a pair of -1 at angle pi, or +1 at zero).
        let ident = *rest
            .iter()
            .max_by(|&&i, &&j| u[(i, i)].total_cmp(&u[(j, j)]))
            .unwrap();
        let others: Vec<usize> = rest.iter().copied().filter(|&k| k != ident).collect();
        ((others[0], others[1]), ident)
    };

    let p = permutation_matrix([pair.0, pair.1, ident, h]);
    let mut q2 = q * p;
    let mut u2 = p.transpose() * u * p;

    // Sign conventions: homogeneous column is +e4 and sin(theta) >= 0.
    let flip = |k: usize, q2: &mut Matrix4<f64>, u2: &mut Matrix4<f64>| {
        q2.column_mut(k).neg_mut();
        u2.column_mut(k).neg_mut();
        u2.row_mut(k).neg_mut();
    };
    if q2[(3, 3)] < 0.0 {
        flip(3, &mut q2, &mut u2);
    }
    if u2[(1, 0)] < 0.0 {
        flip(1, &mut q2, &mut u2);
    }
    if (q2[(3, 3)] - 1.0).abs() > 1e-9 || u2[(3, 3)].is_nan() {
        return Err(Error::MalformedSchur(
            "homogeneous row could not be isolated".into(),
        ));
    }
    Ok((q2, u2))
}

/// Angle of the leading 2x2 block of a rearranged Schur factor, in `[0, pi]`.
pub fn block_angle(u: &Matrix4<f64>) -> f64 {
    u[(1, 0)].abs().atan2(u[(0, 0)])
}

/// Logarithm of a rearranged factor `U' = [D y; 0 1]`, returned in se(3)
/// matrix form `[B  V y; 0 0]`.
pub fn log_upper(u: &Matrix4<f64>) -> Matrix4<f64> {
    let theta = block_angle(u);
    let y: Vector3<f64> = u.fixed_view::<3, 1>(0, 3).into_owned();
    let mut out = Matrix4::zeros();
    if theta < MIN_BLOCK_ANGLE {
        out.fixed_view_mut::<3, 1>(0, 3).copy_from(&y);
        return out;
    }
    // Unit generator of the rotation block; the log block is theta * J.
    let mut j = Matrix3::zeros();
    j[(0, 1)] = -1.0;
    j[(1, 0)] = 1.0;
    let (s, c) = theta.sin_cos();
    let coeff = 1.0 - theta * s / (2.0 * (1.0 - c));
    let v = Matrix3::identity() - j * (theta / 2.0) + j * j * coeff;
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(j * theta));
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(v * y));
    out
}

/// Logarithm of a rigid transform via its rearranged real Schur factor.
pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    let (q, u) = real_schur(t)?;
    let (q2, u2) = block_rearrange(&q, &u)?;
    let l = q2 * log_upper(&u2) * q2.transpose();
    Ok(Twist::from_matrix(&l))
}

/// Truncated power series `sum_{i<=terms} X^i / i!` of an se(3) matrix.
pub fn exp_series(x: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
    let mut acc = Matrix4::identity();
    let mut term = Matrix4::identity();
    for i in 1..=terms {
        term = term * x / i as f64;
        acc += term;
    }
    acc
}
