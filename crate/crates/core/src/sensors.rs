//! IMU measurement models and the vector-triad attitude innovation.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::liegroup::{Rotation, Vec3};

/// Gravity magnitude with sign, `g⃗ = [0, 0, GRAVITY]`.
pub const GRAVITY: f64 = -9.8;
/// Non-collinearity threshold on `‖v₁ × v₂‖` before normalization.
pub const COLLINEAR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("{0} vector has near-zero norm")]
    ZeroVector(&'static str),
    #[error("{0} pair is near-collinear (|v1 x v2| = {1:.3e})")]
    TriadDegenerate(&'static str, f64),
    #[error("confidence weights must be non-negative and sum to 3, got {0:?}")]
    BadWeights([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// rad/s, body frame
    pub gyro: Vec3,
    /// m/s², body frame
    pub accel: Vec3,
    pub mag: Vec3,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().chain(self.accel.iter()).chain(self.mag.iter()).all(|v| v.is_finite())
    }
}

/// Inertial-frame gravity and earth magnetic field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceVectors {
    pub gravity: Vec3,
    pub mag_ref: Vec3,
}

impl ReferenceVectors {
    pub fn new(gravity: Vec3, mag_ref: Vec3) -> Result<Self, SensorError> {
        if gravity.norm() <= 1e-9 {
            return Err(SensorError::ZeroVector("gravity"));
        }
        if mag_ref.norm() <= 1e-9 {
            return Err(SensorError::ZeroVector("magnetic reference"));
        }
        let c = gravity.normalize().cross(&mag_ref.normalize()).norm();
        if c <= COLLINEAR_TOLERANCE {
            return Err(SensorError::TriadDegenerate("reference", c));
        }
        Ok(ReferenceVectors { gravity, mag_ref })
    }

    /// `g = -9.8` and the field `[-1.7, 0, 1.2]`.
    pub fn standard() -> Self {
        ReferenceVectors::new(Vec3::new(0.0, 0.0, GRAVITY), Vec3::new(-1.7, 0.0, 1.2)).unwrap()
    }
}

impl Default for ReferenceVectors {
    fn default() -> Self {
        Self::standard()
    }
}

/// Per-vector confidence levels, non-negative with `Σ sᵢ = 3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceWeights([f64; 3]);

impl ConfidenceWeights {
    pub fn new(s: [f64; 3]) -> Result<Self, SensorError> {
        let sum: f64 = s.iter().sum();
        if s.iter().any(|&v| !(v >= 0.0)) || (sum - 3.0).abs() > 1e-12 {
            return Err(SensorError::BadWeights(s));
        }
        Ok(ConfidenceWeights(s))
    }

    pub fn unit() -> Self {
        ConfidenceWeights([1.0; 3])
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for ConfidenceWeights {
    fn default() -> Self {
        Self::unit()
    }
}

/// Body-frame observations `v` paired with inertial references `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriadPair {
    pub v: [Vec3; 3],
    pub r: [Vec3; 3],
    pub s: [f64; 3],
}

fn unit(v: &Vec3, what: &'static str) -> Result<Vec3, SensorError> {
    let n = v.norm();
    if !(n > 1e-9) {
        return Err(SensorError::ZeroVector(what));
    }
    Ok(v / n)
}

fn cross_unit(a: &Vec3, b: &Vec3, what: &'static str) -> Result<Vec3, SensorError> {
    let c = a.cross(b);
    let n = c.norm();
    if !(n > COLLINEAR_TOLERANCE) {
        return Err(SensorError::TriadDegenerate(what, n));
    }
    Ok(c / n)
}

/// Normalized accelerometer/magnetometer directions and their cross product,
/// against `-g⃗`, `m_r` and their cross product.
pub fn build_triads(
    sample: &ImuSample,
    refs: &ReferenceVectors,
    weights: &ConfidenceWeights,
) -> Result<TriadPair, SensorError> {
    let v1 = unit(&sample.accel, "accelerometer")?;
    let v2 = unit(&sample.mag, "magnetometer")?;
    let v3 = cross_unit(&v1, &v2, "measurement")?;
    let r1 = unit(&(-refs.gravity), "gravity")?;
    let r2 = unit(&refs.mag_ref, "magnetic reference")?;
    let r3 = cross_unit(&r1, &r2, "reference")?;
    Ok(TriadPair { v: [v1, v2, v3], r: [r1, r2, r3], s: weights.get() })
}

/// `M_r = Σ sᵢ rᵢ rᵢᵀ`.
pub fn weighted_matrix(t: &TriadPair) -> Matrix3<f64> {
    (0..3).fold(Matrix3::zeros(), |m, i| m + t.s[i] * t.r[i] * t.r[i].transpose())
}

/// `M_B = Σ sᵢ vᵢ vᵢᵀ`. Not used by the observer.
pub fn body_weighted_matrix(t: &TriadPair) -> Matrix3<f64> {
    (0..3).fold(Matrix3::zeros(), |m, i| m + t.s[i] * t.v[i] * t.v[i].transpose())
}

/// `v̂ᵢ = R̂ᵀ rᵢ`.
pub fn predicted_body_vectors(rhat: &Rotation, t: &TriadPair) -> [Vec3; 3] {
    let rt = rhat.matrix().transpose();
    [rt * t.r[0], rt * t.r[1], rt * t.r[2]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Innovation {
    /// `Σ sᵢ (vᵢ × v̂ᵢ)`
    pub body_sum: Vec3,
    /// `R̂ · body_sum`, equal to `2·vex(Pa(M_r R̃))`
    pub inertial_sum: Vec3,
}

impl Innovation {
    pub fn zero() -> Self {
        Innovation { body_sum: Vec3::zeros(), inertial_sum: Vec3::zeros() }
    }
}

pub fn attitude_innovation(t: &TriadPair, vhat: &[Vec3; 3], rhat: &Rotation) -> Innovation {
    let body_sum = (0..3).fold(Vec3::zeros(), |acc, i| acc + t.s[i] * t.v[i].cross(&vhat[i]));
    Innovation { body_sum, inertial_sum: rhat.rotate(&body_sum) }
}
