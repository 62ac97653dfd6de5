//! Nonlinear navigation observer on SE2(3) with gyro and accelerometer bias
//! estimation.
//!
//! Each discrete step evaluates the correction terms at the current estimate
//! and measurement, then advances
//!
//! ```text
//! X̂ ← exp(-W·dt) · X̂ · exp(Û·dt)
//! Û = u([Ω_m - b̂_Ω]x, 0, a_m - b̂_a, 1)
//! W = u([w_Ω]x, w_V, w_a - g⃗, 1)
//! ```
//!
//! followed by explicit Euler updates of both bias estimates. The gravity
//! term rides in `W` so that the unit coupling entries of `Û` and `W` cancel
//! and the product lands back on SE2(3).

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{
    att_dist, pack_nav, reorthonormalize, se23_exp, skew, unpack_nav_unchecked, LieError, NavState,
    Rotation, TangentElement, Vec3,
};
use crate::sensors::{
    attitude_innovation, build_triads, predicted_body_vectors, weighted_matrix, ConfidenceWeights,
    ImuSample, Innovation, ReferenceVectors, SensorError, TriadPair,
};
use crate::tdoa::{reconstruct, AnchorSet, ReconstructedPosition, SolveOptions, TdoaError, TdoaFrame};

/// Largest accepted step, seconds.
pub const MAX_STEP: f64 = 0.1;
/// Steps between re-projections of R̂ onto SO(3).
pub const REORTHONORMALIZE_EVERY: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("gain {name} must be positive and finite, got {value}")]
    BadGain { name: &'static str, value: f64 },
    #[error("time step {0} outside (0, {MAX_STEP}]")]
    BadTimeStep(f64),
    #[error("observer state became non-finite at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gains {
    pub k_omega: f64,
    pub k_v: f64,
    pub k_a: f64,
    pub gamma_omega: f64,
    pub gamma_a: f64,
}

impl Gains {
    pub fn new(k_omega: f64, k_v: f64, k_a: f64, gamma_omega: f64, gamma_a: f64) -> Result<Self, ObserverError> {
        let g = Gains { k_omega, k_v, k_a, gamma_omega, gamma_a };
        g.validate()?;
        Ok(g)
    }

    /// `k_Ω = 3, k_v = 2, k_a = 70, γ_Ω = 0.1, γ_a = 2`.
    pub fn paper() -> Self {
        Gains { k_omega: 3.0, k_v: 2.0, k_a: 70.0, gamma_omega: 0.1, gamma_a: 2.0 }
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        for (name, value) in [
            ("k_omega", self.k_omega),
            ("k_v", self.k_v),
            ("k_a", self.k_a),
            ("gamma_omega", self.gamma_omega),
            ("gamma_a", self.gamma_a),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ObserverError::BadGain { name, value });
            }
        }
        Ok(())
    }
}

impl Default for Gains {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverState {
    pub nav: NavState,
    pub b_omega_hat: Vec3,
    pub b_a_hat: Vec3,
    pub step_count: u64,
}

impl ObserverState {
    pub fn new(nav: NavState) -> Self {
        ObserverState { nav, b_omega_hat: Vec3::zeros(), b_a_hat: Vec3::zeros(), step_count: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.nav.is_finite()
            && self.b_omega_hat.iter().chain(self.b_a_hat.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub w_omega: Vec3,
    pub w_v: Vec3,
    /// Excludes the gravity term; the stepper adds `-g⃗`.
    pub w_a: Vec3,
    pub b_omega_dot: Vec3,
    pub b_a_dot: Vec3,
}

/// Correction terms from the attitude triads and the TDOA position fix.
///
/// A missing triad zeroes `w_Ω` and `ḃ_Ω`; a missing fix zeroes the position
/// innovation, leaving only the `-[w_Ω]x P̂` and `-[w_Ω]x V̂` terms.
pub fn compute_correction(
    state: &ObserverState,
    triads: Option<&TriadPair>,
    p_y: Option<&Vec3>,
    gains: &Gains,
) -> Correction {
    let innovation = match triads {
        Some(t) => {
            let vhat = predicted_body_vectors(&state.nav.rot, t);
            attitude_innovation(t, &vhat, &state.nav.rot)
        }
        None => Innovation::zero(),
    };
    let w_omega = -0.5 * gains.k_omega * innovation.inertial_sum;
    let b_omega_dot = -0.5 * gains.gamma_omega * innovation.body_sum;

    let e = p_y.map(|p| p - state.nav.pos).unwrap_or_else(Vec3::zeros);
    let w_cross = skew(&w_omega);
    Correction {
        w_omega,
        w_v: -gains.k_v * e - w_cross * state.nav.pos,
        w_a: -gains.k_a * e - w_cross * state.nav.vel,
        b_omega_dot,
        b_a_dot: -gains.gamma_a * (state.nav.rot.matrix().transpose() * e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverConfig {
    pub gains: Gains,
    pub refs: ReferenceVectors,
    pub weights: ConfidenceWeights,
    /// Body-frame lever arm from the navigation origin to the UWB tag.
    pub tag_offset: Vec3,
    pub solve: SolveOptions,
    pub reorthonormalize_every: u64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            gains: Gains::paper(),
            refs: ReferenceVectors::standard(),
            weights: ConfidenceWeights::unit(),
            tag_offset: Vec3::zeros(),
            solve: SolveOptions::default(),
            reorthonormalize_every: REORTHONORMALIZE_EVERY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepFlags {
    /// No usable position fix this step.
    pub dead_reckoning: bool,
    pub tdoa_error: Option<TdoaError>,
    pub triad_error: Option<SensorError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ObserverState,
    /// Raw TDOA solution (tag position), when a frame was solved.
    pub fix: Option<ReconstructedPosition>,
    /// Lever-arm compensated position used for the correction.
    pub p_y: Option<Vec3>,
    pub correction: Correction,
    pub flags: StepFlags,
}

#[derive(Debug, Clone)]
pub struct Observer {
    config: ObserverConfig,
    anchors: AnchorSet,
}

impl Observer {
    pub fn new(config: ObserverConfig, anchors: AnchorSet) -> Result<Self, ObserverError> {
        config.gains.validate()?;
        Ok(Observer { config, anchors })
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.config
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// One discrete update. A TDOA frame that fails to solve degrades to a
    /// dead-reckoning step and is reported in the flags.
    pub fn step(
        &self,
        state: &ObserverState,
        imu: &ImuSample,
        frame: Option<&TdoaFrame>,
        dt: f64,
    ) -> Result<StepOutcome, ObserverError> {
        let mut flags = StepFlags::default();
        let fix = match frame {
            None => None,
            Some(f) => match reconstruct(&self.anchors, f, &[], self.config.solve) {
                Ok(sol) => Some(sol),
                Err(e) => {
                    log::debug!("t={}: TDOA solve failed: {e}", f.timestamp);
                    flags.tdoa_error = Some(e);
                    None
                }
            },
        };
        let p_y = fix
            .as_ref()
            .map(|sol| sol.p - state.nav.rot.rotate(&self.config.tag_offset));
        let mut out = self.advance(state, imu, p_y, dt, flags)?;
        out.fix = fix;
        Ok(out)
    }

    /// Like [`Observer::step`] with an already reconstructed position.
    pub fn step_with_position(
        &self,
        state: &ObserverState,
        imu: &ImuSample,
        p_y: Option<Vec3>,
        dt: f64,
    ) -> Result<StepOutcome, ObserverError> {
        self.advance(state, imu, p_y, dt, StepFlags::default())
    }

    fn advance(
        &self,
        state: &ObserverState,
        imu: &ImuSample,
        p_y: Option<Vec3>,
        dt: f64,
        mut flags: StepFlags,
    ) -> Result<StepOutcome, ObserverError> {
        if !(dt > 0.0 && dt <= MAX_STEP) {
            return Err(ObserverError::BadTimeStep(dt));
        }
        let cfg = &self.config;
        let triads = match build_triads(imu, &cfg.refs, &cfg.weights) {
            Ok(t) => Some(t),
            Err(e) => {
                flags.triad_error = Some(e);
                None
            }
        };
        flags.dead_reckoning = p_y.is_none();
        let corr = compute_correction(state, triads.as_ref(), p_y.as_ref(), &cfg.gains);

        let input = TangentElement::new(imu.gyro - state.b_omega_hat, Vec3::zeros(), imu.accel - state.b_a_hat, 1.0);
        let w = TangentElement::new(corr.w_omega, corr.w_v, corr.w_a - cfg.refs.gravity, 1.0);
        let x = se23_exp(&w.scaled(-1.0), dt) * pack_nav(&state.nav) * se23_exp(&input, dt);
        let mut nav = unpack_nav_unchecked(&x)?;

        let step_count = state.step_count + 1;
        if cfg.reorthonormalize_every > 0 && step_count % cfg.reorthonormalize_every == 0 {
            nav.rot = reorthonormalize(nav.rot.matrix())?;
        }
        let next = ObserverState {
            nav,
            b_omega_hat: state.b_omega_hat + dt * corr.b_omega_dot,
            b_a_hat: state.b_a_hat + dt * corr.b_a_dot,
            step_count,
        };
        if !next.is_finite() {
            return Err(ObserverError::NonFinite(step_count));
        }
        Ok(StepOutcome { state: next, fix: None, p_y, correction: corr, flags })
    }
}

/// True navigation state with the true sensor biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub nav: NavState,
    pub b_omega: Vec3,
    pub b_a: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    /// `¼Tr{I - R·R̂ᵀ}` in [0, 1]
    pub att_err: f64,
    pub pos_err: f64,
    pub vel_err: f64,
    pub b_omega_err: f64,
    pub b_a_err: f64,
}

impl ErrorMetrics {
    /// `att_err + pos_err + vel_err`.
    pub fn total(&self) -> f64 {
        self.att_err + self.pos_err + self.vel_err
    }
}

pub fn attitude_error(truth: &Rotation, estimate: &Rotation) -> Rotation {
    Rotation::from_matrix_unchecked(truth.matrix() * estimate.matrix().transpose())
}

pub fn error_metrics(truth: &TruthState, state: &ObserverState) -> ErrorMetrics {
    let rtilde = attitude_error(&truth.nav.rot, &state.nav.rot);
    ErrorMetrics {
        att_err: att_dist(&rtilde, None).clamp(0.0, 1.0),
        pos_err: (truth.nav.pos - state.nav.pos).norm(),
        vel_err: (truth.nav.vel - state.nav.vel).norm(),
        b_omega_err: (truth.b_omega - state.b_omega_hat).norm(),
        b_a_err: (truth.b_a - state.b_a_hat).norm(),
    }
}

/// `2‖M_r R̃‖_I + ‖b̃_Ω‖² / (2γ_Ω)`.
pub fn lyapunov_l1(triads: &TriadPair, rtilde: &Rotation, b_omega_err: &Vec3, gains: &Gains) -> f64 {
    let m = weighted_matrix(triads);
    2.0 * att_dist(rtilde, Some(&m)) + b_omega_err.norm_squared() / (2.0 * gains.gamma_omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainReport {
    pub delta: f64,
    /// `4k_v / (k_v² + 4k_a)`
    pub bound: f64,
    /// `bound - delta`
    pub margin: f64,
    pub bound_ok: bool,
    pub q4_eigenvalues: [f64; 2],
    pub q4_positive: bool,
    pub q6_eigenvalues: [f64; 2],
    pub q6_positive: bool,
    pub pass: bool,
}

fn sym2_eigenvalues(m: &Matrix2<f64>) -> [f64; 2] {
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let rad = half_diff.hypot(m[(0, 1)]);
    [mean - rad, mean + rad]
}

/// Position/velocity coupling matrix bounding the cross-term function from below.
pub fn q4_matrix(gains: &Gains, delta: f64) -> Matrix2<f64> {
    Matrix2::new(0.5, -0.5 * delta, -0.5 * delta, 0.5 / gains.k_a)
}

/// Decay matrix of the position/velocity cross-term function.
pub fn q6_matrix(gains: &Gains, delta: f64) -> Matrix2<f64> {
    let off = -0.5 * delta * gains.k_v;
    Matrix2::new(gains.k_v - delta * gains.k_a, off, off, delta)
}

/// Checks `δ < 4k_v/(k_v² + 4k_a)` and positive definiteness of the
/// position/velocity matrices for the analysis parameter `delta`.
pub fn validate_gains(gains: &Gains, delta: f64) -> Result<GainReport, ObserverError> {
    gains.validate()?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(ObserverError::BadGain { name: "delta", value: delta });
    }
    let bound = 4.0 * gains.k_v / (gains.k_v * gains.k_v + 4.0 * gains.k_a);
    let margin = bound - delta;
    let q4 = sym2_eigenvalues(&q4_matrix(gains, delta));
    let q6 = sym2_eigenvalues(&q6_matrix(gains, delta));
    let bound_ok = margin > 0.0;
    let q4_positive = q4[0] > 0.0;
    let q6_positive = q6[0] > 0.0;
    Ok(GainReport {
        delta,
        bound,
        margin,
        bound_ok,
        q4_eigenvalues: q4,
        q4_positive,
        q6_eigenvalues: q6,
        q6_positive,
        pass: bound_ok && q4_positive && q6_positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{pa, vex_unchecked};
    use std::f64::consts::PI;

    fn refs() -> ReferenceVectors {
        ReferenceVectors::standard()
    }

    fn exact_imu(r: &Rotation, gyro: Vec3) -> ImuSample {
        let rt = r.matrix().transpose();
        ImuSample { timestamp: 0.0, gyro, accel: -(rt * refs().gravity), mag: rt * refs().mag_ref }
    }

    fn anchors() -> AnchorSet {
        AnchorSet::box_vertices(Vec3::new(-4.0, -4.0, 0.0), Vec3::new(4.0, 4.0, 3.0))
    }

    #[test]
    fn equilibrium_correction_is_zero() {
        let r = Rotation::about_axis(&Vec3::new(0.1, 0.4, 1.0), 0.9);
        let state = ObserverState::new(NavState::new(r, Vec3::new(1.0, 2.0, 1.5), Vec3::new(0.3, 0.0, -0.1)));
        let t = build_triads(&exact_imu(&r, Vec3::zeros()), &refs(), &ConfidenceWeights::unit()).unwrap();
        let c = compute_correction(&state, Some(&t), Some(&state.nav.pos), &Gains::paper());
        for v in [c.w_omega, c.w_v, c.w_a, c.b_omega_dot, c.b_a_dot] {
            assert!(v.norm() < 1e-14, "{v:?}");
        }
    }

    #[test]
    fn position_innovation_substitution() {
        let state = ObserverState::new(NavState::identity());
        let c = compute_correction(&state, None, Some(&Vec3::new(1.0, 0.0, 0.0)), &Gains::paper());
        assert_eq!(c.w_v, Vec3::new(-2.0, 0.0, 0.0));
        assert_eq!(c.w_a, Vec3::new(-70.0, 0.0, 0.0));
        assert_eq!(c.b_a_dot, Vec3::new(-2.0, 0.0, 0.0));
        assert_eq!(c.w_omega, Vec3::zeros());
    }

    #[test]
    fn attitude_correction_matches_matrix_form() {
        let r = Rotation::about_axis(&Vec3::new(0.5, -0.2, 0.3), 1.1);
        let rhat = Rotation::about_axis(&Vec3::new(-0.1, 0.8, 0.4), 0.4);
        let state = ObserverState::new(NavState::new(rhat, Vec3::zeros(), Vec3::zeros()));
        let t = build_triads(&exact_imu(&r, Vec3::zeros()), &refs(), &ConfidenceWeights::unit()).unwrap();
        let g = Gains::paper();
        let c = compute_correction(&state, Some(&t), None, &g);
        let m = weighted_matrix(&t);
        let vex = vex_unchecked(&pa(&(m * r.matrix() * rhat.matrix().transpose())));
        assert!((c.w_omega + g.k_omega * vex).norm() < 1e-12);
        assert!((c.b_omega_dot + g.gamma_omega * (rhat.matrix().transpose() * vex)).norm() < 1e-12);
    }

    #[test]
    fn dead_reckoning_free_fall() {
        let obs = Observer::new(ObserverConfig::default(), anchors()).unwrap();
        let state = ObserverState::new(NavState::identity());
        let imu = ImuSample { timestamp: 0.0, gyro: Vec3::zeros(), accel: Vec3::zeros(), mag: Vec3::zeros() };
        let out = obs.step(&state, &imu, None, 0.01).unwrap();
        assert!(out.flags.dead_reckoning);
        assert!(out.flags.triad_error.is_some());
        let s = out.state;
        assert_eq!(s.nav.rot, Rotation::identity());
        assert!((s.nav.vel - Vec3::new(0.0, 0.0, -0.098)).norm() < 1e-15);
        assert!((s.nav.pos - Vec3::new(0.0, 0.0, -0.5 * 9.8 * 1e-4)).norm() < 1e-15);
        assert_eq!(s.b_a_hat, Vec3::zeros());
        assert_eq!(s.b_omega_hat, Vec3::zeros());
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn bad_time_step() {
        let obs = Observer::new(ObserverConfig::default(), anchors()).unwrap();
        let state = ObserverState::new(NavState::identity());
        let imu = exact_imu(&Rotation::identity(), Vec3::zeros());
        assert!(matches!(obs.step(&state, &imu, None, 0.0), Err(ObserverError::BadTimeStep(_))));
        assert!(matches!(obs.step(&state, &imu, None, 0.2), Err(ObserverError::BadTimeStep(_))));
    }

    #[test]
    fn failed_frame_degrades_to_dead_reckoning() {
        let obs = Observer::new(ObserverConfig::default(), anchors()).unwrap();
        let state = ObserverState::new(NavState::identity());
        let imu = exact_imu(&Rotation::identity(), Vec3::zeros());
        let frame = TdoaFrame::new(0.0, vec![0.0; 8]);
        let out = obs.step(&state, &imu, Some(&frame), 0.01).unwrap();
        assert!(out.flags.dead_reckoning);
        assert!(matches!(out.flags.tdoa_error, Some(TdoaError::GeometryDegenerate { .. })));
        assert_eq!(out.state.b_a_hat, Vec3::zeros());
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let obs = Observer::new(ObserverConfig::default(), anchors()).unwrap();
        let r = Rotation::about_axis(&Vec3::new(0.2, 0.1, 1.0), 0.7);
        let p = Vec3::new(0.5, -1.0, 1.2);
        let mut state = ObserverState::new(NavState::new(r, p, Vec3::zeros()));
        let imu = exact_imu(&r, Vec3::zeros());
        for _ in 0..100 {
            state = obs.step_with_position(&state, &imu, Some(p), 0.01).unwrap().state;
        }
        assert!((state.nav.pos - p).norm() < 1e-12);
        assert!(state.nav.vel.norm() < 1e-12);
        assert!((state.nav.rot.matrix() - r.matrix()).norm() < 1e-12);
    }

    #[test]
    fn error_metrics_examples() {
        let nav = NavState::new(Rotation::identity(), Vec3::new(1.237, 0.124, 1.534), Vec3::zeros());
        let truth = TruthState { nav, b_omega: Vec3::zeros(), b_a: Vec3::zeros() };
        let m = error_metrics(&truth, &ObserverState::new(nav));
        assert_eq!(m.total(), 0.0);

        let est = ObserverState::new(NavState::new(Rotation::about_axis(&Vec3::z(), PI), Vec3::new(-3.0, -1.0, 0.0), Vec3::zeros()));
        let m = error_metrics(&truth, &est);
        let expect = (4.237f64.powi(2) + 1.124f64.powi(2) + 1.534f64.powi(2)).sqrt();
        assert!((m.pos_err - expect).abs() < 1e-12);
        assert!((m.pos_err - 4.644).abs() < 1e-3);
        assert!((m.att_err - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_examples() {
        let ortho = [Vec3::x(), Vec3::y(), Vec3::z()];
        let t = TriadPair { v: ortho, r: ortho, s: [1.0; 3] };
        let g = Gains::paper();
        assert_eq!(lyapunov_l1(&t, &Rotation::identity(), &Vec3::zeros(), &g), 0.0);
        assert!((lyapunov_l1(&t, &Rotation::identity(), &Vec3::x(), &g) - 5.0).abs() < 1e-12);
        let rt = Rotation::about_axis(&Vec3::new(1.0, 1.0, 0.0), 0.5);
        let b = Vec3::new(0.1, -0.2, 0.3);
        let direct = 0.5 * (3.0 - rt.trace()) + b.norm_squared() / 0.2;
        assert!((lyapunov_l1(&t, &rt, &b, &g) - direct).abs() < 1e-12);
    }

    #[test]
    fn gain_validation() {
        let r = validate_gains(&Gains::paper(), 0.01).unwrap();
        assert!((r.bound - 8.0 / 284.0).abs() < 1e-15);
        assert!((r.bound - 0.0282).abs() < 1e-4);
        assert!(r.pass && r.margin > 0.0);

        let r = validate_gains(&Gains::paper(), 0.05).unwrap();
        assert!(!r.pass && !r.bound_ok && !r.q6_positive);
        let at = validate_gains(&Gains::paper(), 8.0 / 284.0).unwrap();
        assert!(!at.bound_ok && at.margin <= 0.0);

        let g = Gains::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let r = validate_gains(&g, 0.1).unwrap();
        let eig = q6_matrix(&g, 0.1).symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        assert!((r.q6_eigenvalues[0] - lo).abs() < 1e-14 && (r.q6_eigenvalues[1] - hi).abs() < 1e-14);

        assert!(Gains::new(0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(Gains::new(1.0, 1.0, -1.0, 1.0, 1.0).is_err());
        assert!(validate_gains(&Gains::paper(), 0.0).is_err());
    }
}
