//! Matrix algebra on SO(3) and SE2(3).
//!
//! Rotations are stored as plain 3x3 matrices (body-to-inertial). Navigation
//! states pack into the 5x5 homogeneous layout
//!
//! ```text
//!     | R  P  V |
//! X = | 0  1  0 |
//!     | 0  0  1 |
//! ```
//!
//! and inputs/corrections use the 5x5 tangent layout
//!
//! ```text
//!     | [w]x  v    a |
//! u = | 0     0    0 |
//!     | 0     rho  0 |
//! ```
//!
//! where the `rho` coupling entry (row 5, column 4) carries velocity into
//! position during integration.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Matrix5 = SMatrix<f64, 5, 5>;

/// Frobenius tolerance for `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Below this rotation angle the Rodrigues kernel switches to its Taylor form.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not skew-symmetric (|S + Sᵀ|_F = {asymmetry:.3e})")]
    NotSkew { asymmetry: f64 },
    #[error("matrix is not a rotation (|RᵀR - I|_F = {residual:.3e}, det = {det:.12})")]
    NotRotation { residual: f64, det: f64 },
    #[error("malformed SE2(3) bottom rows (max deviation {deviation:.3e})")]
    MalformedNav { deviation: f64 },
    #[error("matrix too far from SO(3) to re-project (|RᵀR - I|_F = {residual:.3e})")]
    TooFarFromRotation { residual: f64 },
    #[error("projection is a reflection (det = {det:.6})")]
    Degenerate { det: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// `[y]x`, the matrix with `[y]x · x = y × x`.
pub fn skew(y: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0)
}

/// Inverse of [`skew`]. Rejects inputs whose symmetric part exceeds 1e-9.
pub fn vex(s: &Matrix3<f64>) -> Result<Vec3, LieError> {
    let asymmetry = (s + s.transpose()).norm();
    if !(asymmetry <= 1e-9) {
        return Err(LieError::NotSkew { asymmetry });
    }
    Ok(vex_unchecked(s))
}

/// `½[S32 - S23, S13 - S31, S21 - S12]`; equals `vex` on skew input and
/// `vex(pa(S))` on any input.
pub fn vex_unchecked(s: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (s[(2, 1)] - s[(1, 2)]),
        0.5 * (s[(0, 2)] - s[(2, 0)]),
        0.5 * (s[(1, 0)] - s[(0, 1)]),
    )
}

/// Anti-symmetric projection `½(Y - Yᵀ)`.
pub fn pa(y: &Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (y - y.transpose())
}

/// A proper orthogonal 3x3 matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthogonality and determinant to [`ROTATION_TOLERANCE`].
    pub fn new(m: Matrix3<f64>) -> Result<Self, LieError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LieError::NonFinite("rotation"));
        }
        let residual = orthogonality_residual(&m);
        let det = m.determinant();
        if residual > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(LieError::NotRotation { residual, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without checking. Used on products of rotations whose
    /// round-off drift is bounded by periodic [`reorthonormalize`].
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis * (angle / n)), 1.0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rotation{:?}", self.0.as_slice())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

pub fn orthogonality_residual(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Normalized attitude distance `¼Tr{M - M·R}`; `M = I` when `weight` is `None`.
pub fn att_dist(r: &Rotation, weight: Option<&Matrix3<f64>>) -> f64 {
    match weight {
        None => 0.25 * (3.0 - r.trace()),
        Some(m) => 0.25 * (m - m * r.matrix()).trace(),
    }
}

/// Attitude, position and velocity; one element of SE2(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub rot: Rotation,
    pub pos: Vec3,
    pub vel: Vec3,
}

impl NavState {
    pub fn new(rot: Rotation, pos: Vec3, vel: Vec3) -> Self {
        NavState { rot, pos, vel }
    }

    pub fn identity() -> Self {
        NavState::new(Rotation::identity(), Vec3::zeros(), Vec3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.rot.0.iter().chain(self.pos.iter()).chain(self.vel.iter()).all(|v| v.is_finite())
    }
}

pub fn pack_nav(s: &NavState) -> Matrix5 {
    let mut x = Matrix5::identity();
    x.fixed_view_mut::<3, 3>(0, 0).copy_from(s.rot.matrix());
    x.fixed_view_mut::<3, 1>(0, 3).copy_from(&s.pos);
    x.fixed_view_mut::<3, 1>(0, 4).copy_from(&s.vel);
    x
}

/// Inverse of [`pack_nav`]; bottom rows must be exactly `[0 0 0 1 0]` and
/// `[0 0 0 0 1]`, and the rotation block must pass [`Rotation::new`].
pub fn unpack_nav(x: &Matrix5) -> Result<NavState, LieError> {
    let s = unpack_nav_unchecked(x)?;
    Rotation::new(*s.rot.matrix())?;
    Ok(s)
}

/// Like [`unpack_nav`] but skips the rotation tolerance check.
pub(crate) fn unpack_nav_unchecked(x: &Matrix5) -> Result<NavState, LieError> {
    let expected = Matrix5::identity();
    let deviation = (3..5)
        .flat_map(|r| (0..5).map(move |c| (r, c)))
        .map(|(r, c)| (x[(r, c)] - expected[(r, c)]).abs())
        .fold(0.0, f64::max);
    if deviation != 0.0 {
        return Err(LieError::MalformedNav { deviation });
    }
    Ok(NavState {
        rot: Rotation(x.fixed_view::<3, 3>(0, 0).into_owned()),
        pos: x.fixed_view::<3, 1>(0, 3).into_owned(),
        vel: x.fixed_view::<3, 1>(0, 4).into_owned(),
    })
}

/// Element of the 5x5 input/correction manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentElement {
    pub omega: Vec3,
    pub vcol: Vec3,
    pub acol: Vec3,
    pub rho: f64,
}

impl TangentElement {
    pub fn new(omega: Vec3, vcol: Vec3, acol: Vec3, rho: f64) -> Self {
        TangentElement { omega, vcol, acol, rho }
    }

    pub fn zero() -> Self {
        TangentElement::new(Vec3::zeros(), Vec3::zeros(), Vec3::zeros(), 0.0)
    }

    pub fn to_matrix(&self) -> Matrix5 {
        let mut u = Matrix5::zeros();
        u.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.omega));
        u.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.vcol);
        u.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.acol);
        u[(4, 3)] = self.rho;
        u
    }

    pub fn scaled(&self, k: f64) -> Self {
        TangentElement::new(self.omega * k, self.vcol * k, self.acol * k, self.rho * k)
    }
}

/// Series coefficients of the SO(3) exponential and its first two
/// integrals, as functions of the rotation angle `theta`:
/// `sin θ/θ`, `(1 - cos θ)/θ²`, `(θ - sin θ)/θ³`, `(θ²/2 - 1 + cos θ)/θ⁴`.
struct Kernel {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Kernel {
    fn new(theta: f64) -> Self {
        let t2 = theta * theta;
        if theta < 0.1 {
            // Alternating Taylor series, truncation error below 1e-17 at θ = 0.1.
            let t4 = t2 * t2;
            let t6 = t4 * t2;
            let t8 = t4 * t4;
            Kernel {
                a: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0 + t8 / 362_880.0,
                b: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40_320.0 + t8 / 3_628_800.0,
                c: 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362_880.0 + t8 / 39_916_800.0,
                d: 1.0 / 24.0 - t2 / 720.0 + t4 / 40_320.0 - t6 / 3_628_800.0
                    + t8 / 479_001_600.0,
            }
        } else {
            let s = theta.sin();
            let half = (0.5 * theta).sin();
            let one_minus_cos = 2.0 * half * half;
            Kernel {
                a: s / theta,
                b: one_minus_cos / t2,
                c: (theta - s) / (t2 * theta),
                d: (0.5 * t2 - one_minus_cos) / (t2 * t2),
            }
        }
    }
}

/// `exp([omega]x · dt)` by the Rodrigues formula.
pub fn so3_exp(omega: &Vec3, dt: f64) -> Rotation {
    let phi = omega * dt;
    let theta = phi.norm();
    let k = skew(&phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + 0.5 * k2);
    }
    let (s, _) = theta.sin_cos();
    let half = (0.5 * theta).sin();
    Rotation(Matrix3::identity() + (s / theta) * k + (2.0 * half * half / (theta * theta)) * k2)
}

/// Matrix exponential of `u.to_matrix() · dt`.
///
/// Uses the closed form: with `S = [omega·dt]x`,
/// `exp = [[exp(S), J1·v·dt + rho·dt·J2·a·dt, J1·a·dt], [0, 1, 0], [0, rho·dt, 1]]`
/// where `J1 = Σ Sᵏ/(k+1)!` and `J2 = Σ Sᵏ/(k+2)!`.
pub fn se23_exp(u: &TangentElement, dt: f64) -> Matrix5 {
    let phi = u.omega * dt;
    let theta = phi.norm();
    let s = skew(&phi);
    let s2 = s * s;
    let kern = Kernel::new(theta);
    let i3 = Matrix3::identity();

    let rot = if theta < SMALL_ANGLE {
        i3 + s + 0.5 * s2
    } else {
        i3 + kern.a * s + kern.b * s2
    };
    let j1 = i3 + kern.b * s + kern.c * s2;
    let j2 = 0.5 * i3 + kern.c * s + kern.d * s2;

    let v = u.vcol * dt;
    let a = u.acol * dt;
    let rho = u.rho * dt;

    let mut e = Matrix5::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    e.fixed_view_mut::<3, 1>(0, 3).copy_from(&(j1 * v + rho * (j2 * a)));
    e.fixed_view_mut::<3, 1>(0, 4).copy_from(&(j1 * a));
    e[(4, 3)] = rho;
    e
}

/// Rotation vector of `r` (inverse of [`so3_exp`] on angles in [0, π]).
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let s = vex_unchecked(m);
    let sin = s.norm();
    let cos = 0.5 * (m.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return s;
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return s * (theta / sin);
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part.
    let sym = 0.5 * (m + m.transpose()) - Matrix3::identity() * cos;
    let (mut best, mut idx) = (f64::MIN, 0);
    for i in 0..3 {
        if sym[(i, i)] > best {
            best = sym[(i, i)];
            idx = i;
        }
    }
    let mut axis = sym.column(idx).into_owned().normalize();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Nearest rotation to `m` in the Frobenius sense (orthogonal polar factor),
/// computed by Newton iteration `X ← ½(X + X⁻ᵀ)`.
pub fn reorthonormalize(m: &Matrix3<f64>) -> Result<Rotation, LieError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LieError::NonFinite("rotation"));
    }
    let residual = orthogonality_residual(m);
    if !(residual < 0.1) {
        return Err(LieError::TooFarFromRotation { residual });
    }
    let mut x = *m;
    for _ in 0..16 {
        let inv_t = match x.try_inverse() {
            Some(inv) => inv.transpose(),
            None => return Err(LieError::Degenerate { det: 0.0 }),
        };
        let next = 0.5 * (x + inv_t);
        let delta = (next - x).norm();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    let det = x.determinant();
    if det <= 0.0 {
        return Err(LieError::Degenerate { det });
    }
    Ok(Rotation(x))
}
