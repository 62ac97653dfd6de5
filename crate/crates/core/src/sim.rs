//! Ground-truth propagation and measurement synthesis.
//!
//! Truth follows `Ẋ = X·U - G·X` with `U = u([Ω]x, 0, a, 1)` and
//! `G = u(0, 0, -g⃗, 1)`. With the inputs held over a step this linear ODE
//! integrates exactly to `X ← exp(-G·dt) · X · exp(U·dt)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{pack_nav, se23_exp, unpack_nav_unchecked, NavState, Rotation, TangentElement, Vec3};
use crate::observer::{Gains, Observer, ObserverConfig, ObserverError, ObserverState};
use crate::replay::{
    quat_from_rotation, run_observer, Dataset, GroundTruthRecord, RunOutput, SummaryOptions, TruthTrack,
};
use crate::sensors::{ImuSample, ReferenceVectors};
use crate::tdoa::{synthesize_tdoa, Anchor, AnchorSet, TdoaError, TdoaFrame};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown scenario preset {0:?} (expected static, circle or figure8)")]
    UnknownPreset(String),
    #[error(transparent)]
    Anchors(#[from] TdoaError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

/// Body-frame angular rate and specific force as functions of time.
pub trait Motion: Send + Sync {
    fn omega(&self, t: f64) -> Vec3;
    /// Specific force `a` in `V̇ = R·a + g⃗`.
    fn accel(&self, t: f64) -> Vec3;
}

/// Preset trajectories. Each one defines its own initial state and analytic
/// body-frame inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// Stationary at `pos` with a fixed attitude given as a rotation vector.
    Static { pos: [f64; 3], attitude: [f64; 3] },
    /// Level flight around a horizontal circle at a constant yaw rate.
    Circle { center: [f64; 3], radius: f64, rate: f64 },
    /// Lissajous figure-eight `c + [ax sin ωt, ay sin 2ωt, az sin ωt]` with
    /// yaw `yaw_amp·sin ωt`.
    FigureEight { center: [f64; 3], ax: f64, ay: f64, az: f64, period: f64, yaw_amp: f64 },
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn rot_z(angle: f64) -> Rotation {
    Rotation::about_axis(&Vec3::z(), angle)
}

impl Trajectory {
    pub fn initial_nav(&self) -> NavState {
        match self {
            Trajectory::Static { pos, attitude } => {
                NavState::new(crate::liegroup::so3_exp(&v3(attitude), 1.0), v3(pos), Vec3::zeros())
            }
            Trajectory::Circle { center, radius, rate } => NavState::new(
                Rotation::identity(),
                v3(center) + Vec3::new(*radius, 0.0, 0.0),
                Vec3::new(0.0, radius * rate, 0.0),
            ),
            Trajectory::FigureEight { center, ax, ay, az, period, .. } => {
                let w = 2.0 * PI / period;
                NavState::new(Rotation::identity(), v3(center), Vec3::new(ax * w, 2.0 * ay * w, az * w))
            }
        }
    }

    pub fn motion(&self, gravity: Vec3) -> PresetMotion {
        PresetMotion { trajectory: self.clone(), gravity }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Trajectory::Static { pos, attitude } => pos.iter().chain(attitude).all(|v| v.is_finite()),
            Trajectory::Circle { center, radius, rate } => {
                center.iter().all(|v| v.is_finite()) && radius.is_finite() && rate.is_finite()
            }
            Trajectory::FigureEight { center, ax, ay, az, period, yaw_amp } => {
                center.iter().chain([ax, ay, az, yaw_amp]).all(|v| v.is_finite()) && *period > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Invalid(format!("bad trajectory parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PresetMotion {
    trajectory: Trajectory,
    gravity: Vec3,
}

impl Motion for PresetMotion {
    fn omega(&self, t: f64) -> Vec3 {
        match &self.trajectory {
            Trajectory::Static { .. } => Vec3::zeros(),
            Trajectory::Circle { rate, .. } => Vec3::new(0.0, 0.0, *rate),
            Trajectory::FigureEight { period, yaw_amp, .. } => {
                let w = 2.0 * PI / period;
                Vec3::new(0.0, 0.0, yaw_amp * w * (w * t).cos())
            }
        }
    }

    fn accel(&self, t: f64) -> Vec3 {
        match &self.trajectory {
            Trajectory::Static { attitude, .. } => {
                let r = crate::liegroup::so3_exp(&v3(attitude), 1.0);
                -(r.matrix().transpose() * self.gravity)
            }
            Trajectory::Circle { radius, rate, .. } => {
                let r = rot_z(rate * t);
                let inertial = -radius * rate * rate * Vec3::new((rate * t).cos(), (rate * t).sin(), 0.0);
                r.matrix().transpose() * (inertial - self.gravity)
            }
            Trajectory::FigureEight { ax, ay, az, period, yaw_amp, .. } => {
                let w = 2.0 * PI / period;
                let (s1, s2) = ((w * t).sin(), (2.0 * w * t).sin());
                let inertial = Vec3::new(-ax * w * w * s1, -4.0 * ay * w * w * s2, -az * w * w * s1);
                let r = rot_z(yaw_amp * s1);
                r.matrix().transpose() * (inertial - self.gravity)
            }
        }
    }
}

/// Per-sensor Gaussian standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub gyro_sd: f64,
    pub accel_sd: f64,
    pub mag_sd: f64,
    pub tdoa_sd: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { gyro_sd: 0.0, accel_sd: 0.0, mag_sd: 0.2, tdoa_sd: 0.0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { gyro_sd: 0.0, accel_sd: 0.0, mag_sd: 0.0, tdoa_sd: 0.0 }
    }

    fn validate(&self) -> Result<(), SimError> {
        if [self.gyro_sd, self.accel_sd, self.mag_sd, self.tdoa_sd].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::Invalid(format!("noise standard deviations must be >= 0: {self:?}")))
        }
    }
}

/// One exact step of the truth kinematics with inputs held constant.
pub fn propagate_nav(nav: &NavState, omega: &Vec3, accel: &Vec3, gravity: &Vec3, dt: f64) -> NavState {
    let u = TangentElement::new(*omega, Vec3::zeros(), *accel, 1.0);
    let g = TangentElement::new(Vec3::zeros(), Vec3::zeros(), -gravity, 1.0);
    let x = se23_exp(&g.scaled(-1.0), dt) * pack_nav(nav) * se23_exp(&u, dt);
    unpack_nav_unchecked(&x).expect("unit couplings cancel")
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> Vec3 {
    if sd == 0.0 {
        return Vec3::zeros();
    }
    let n = Normal::new(0.0, sd).expect("finite sd");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// True vehicle state, its inputs, constant sensor biases and the noise source.
pub struct TruthModel {
    pub nav: NavState,
    pub time: f64,
    pub motion: Box<dyn Motion>,
    pub b_omega: Vec3,
    pub b_a: Vec3,
    pub noise: NoiseModel,
    pub refs: ReferenceVectors,
    rng: ChaCha8Rng,
}

impl TruthModel {
    pub fn new(
        nav: NavState,
        motion: Box<dyn Motion>,
        b_omega: Vec3,
        b_a: Vec3,
        noise: NoiseModel,
        refs: ReferenceVectors,
        seed: u64,
    ) -> Self {
        TruthModel { nav, time: 0.0, motion, b_omega, b_a, noise, refs, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Advances by `dt` using the inputs at the current time.
    pub fn propagate(&mut self, dt: f64) {
        let omega = self.motion.omega(self.time);
        let accel = self.motion.accel(self.time);
        self.nav = propagate_nav(&self.nav, &omega, &accel, &self.refs.gravity, dt);
        self.time += dt;
    }

    /// Biased, noisy IMU reading at the current time.
    pub fn synthesize_imu(&mut self) -> ImuSample {
        let rt = self.nav.rot.matrix().transpose();
        let gyro = self.motion.omega(self.time) + self.b_omega + gaussian(&mut self.rng, self.noise.gyro_sd);
        let accel = self.motion.accel(self.time) + self.b_a + gaussian(&mut self.rng, self.noise.accel_sd);
        let mag = rt * self.refs.mag_ref + gaussian(&mut self.rng, self.noise.mag_sd);
        ImuSample { timestamp: self.time, gyro, accel, mag }
    }

    pub fn synthesize_tdoa(&mut self, anchors: &AnchorSet, tag_offset: &Vec3) -> TdoaFrame {
        let nav = self.nav;
        synthesize_tdoa(self.time, &nav.pos, Some(&nav.rot), anchors, tag_offset, self.noise.tdoa_sd, &mut self.rng)
    }
}

/// Initial observer estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateInit {
    /// Unit quaternion `[w, x, y, z]`.
    pub quat: [f64; 4],
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub b_omega: [f64; 3],
    pub b_a: [f64; 3],
}

impl Default for EstimateInit {
    fn default() -> Self {
        EstimateInit { quat: [1.0, 0.0, 0.0, 0.0], pos: [-3.0, -1.0, 0.0], vel: [0.0; 3], b_omega: [0.0; 3], b_a: [0.0; 3] }
    }
}

impl EstimateInit {
    pub fn from_nav(nav: &NavState) -> Self {
        let q = quat_from_rotation(&nav.rot);
        EstimateInit {
            quat: q,
            pos: [nav.pos.x, nav.pos.y, nav.pos.z],
            vel: [nav.vel.x, nav.vel.y, nav.vel.z],
            b_omega: [0.0; 3],
            b_a: [0.0; 3],
        }
    }

    pub fn to_state(&self) -> Result<ObserverState, crate::replay::ReplayError> {
        let rot = crate::replay::quat_to_rotation(self.quat)?;
        let mut s = ObserverState::new(NavState::new(rot, v3(&self.pos), v3(&self.vel)));
        s.b_omega_hat = v3(&self.b_omega);
        s.b_a_hat = v3(&self.b_a);
        Ok(s)
    }
}

fn default_imu_rate() -> f64 {
    100.0
}

fn default_tdoa_rate() -> f64 {
    10.0
}

/// A complete simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub anchors: Vec<Anchor>,
    pub duration: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_tdoa_rate")]
    pub tdoa_rate: f64,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub b_omega: [f64; 3],
    #[serde(default)]
    pub b_a: [f64; 3],
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub tag_offset: [f64; 3],
    #[serde(default)]
    pub estimate: EstimateInit,
    #[serde(default)]
    pub seed: u64,
}

/// The default 8-anchor box around the presets.
pub fn default_anchors() -> AnchorSet {
    AnchorSet::box_vertices(Vec3::new(-4.0, -4.0, 0.0), Vec3::new(5.0, 4.0, 3.2))
}

/// Starting position of every preset; the default estimate sits ≈4.64 m away.
pub const PRESET_START: [f64; 3] = [1.237, 0.124, 1.534];

impl Scenario {
    /// `static`, `circle` or `figure8`.
    pub fn preset(name: &str, seed: u64) -> Result<Self, SimError> {
        let trajectory = match name {
            "static" => Trajectory::Static { pos: PRESET_START, attitude: [0.1, -0.2, 0.6] },
            "circle" => {
                let radius = 1.5;
                let c = PRESET_START;
                Trajectory::Circle { center: [c[0] - radius, c[1], c[2]], radius, rate: 0.4 }
            }
            "figure8" => Trajectory::FigureEight {
                center: PRESET_START,
                ax: 1.5,
                ay: 1.0,
                az: 0.2,
                period: 20.0,
                yaw_amp: 0.5,
            },
            other => return Err(SimError::UnknownPreset(other.to_string())),
        };
        Ok(Scenario {
            name: name.to_string(),
            anchors: default_anchors().anchors().to_vec(),
            duration: 30.0,
            imu_rate: default_imu_rate(),
            tdoa_rate: default_tdoa_rate(),
            trajectory,
            b_omega: [0.0; 3],
            b_a: [0.0; 3],
            noise: NoiseModel::default(),
            tag_offset: [0.0; 3],
            estimate: EstimateInit::default(),
            seed,
        })
    }

    pub fn validate(&self) -> Result<AnchorSet, SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::Invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if !(self.imu_rate > 0.0 && self.tdoa_rate > 0.0) {
            return Err(SimError::Invalid("rates must be positive".into()));
        }
        if 1.0 / self.imu_rate > crate::observer::MAX_STEP {
            return Err(SimError::Invalid(format!("IMU rate {} Hz is below 10 Hz", self.imu_rate)));
        }
        self.trajectory.validate()?;
        self.noise.validate()?;
        Ok(AnchorSet::new(self.anchors.clone())?)
    }
}

/// Everything a simulated run produced, in dataset form.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: Dataset,
    pub anchors: AnchorSet,
    /// Exact truth at every IMU timestamp.
    pub truth: TruthTrack,
    pub b_omega: Vec3,
    pub b_a: Vec3,
}

/// Propagates truth at the IMU rate and emits IMU samples at every step and
/// TDOA frames every `round(imu_rate / tdoa_rate)` steps.
pub fn generate(sc: &Scenario) -> Result<SimData, SimError> {
    let anchors = sc.validate()?;
    let refs = ReferenceVectors::standard();
    let dt = 1.0 / sc.imu_rate;
    let steps = (sc.duration * sc.imu_rate).round() as usize;
    let frame_every = ((sc.imu_rate / sc.tdoa_rate).round() as usize).max(1);
    let tag_offset = v3(&sc.tag_offset);

    let mut truth = TruthModel::new(
        sc.trajectory.initial_nav(),
        Box::new(sc.trajectory.motion(refs.gravity)),
        v3(&sc.b_omega),
        v3(&sc.b_a),
        sc.noise,
        refs,
        sc.seed,
    );
    let mut imu = Vec::with_capacity(steps + 1);
    let mut tdoa = Vec::with_capacity(steps / frame_every + 1);
    let mut track = Vec::with_capacity(steps + 1);
    let mut gt = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        truth.time = k as f64 * dt;
        imu.push(truth.synthesize_imu());
        if k % frame_every == 0 {
            tdoa.push(truth.synthesize_tdoa(&anchors, &tag_offset));
        }
        track.push((truth.time, truth.nav));
        gt.push(GroundTruthRecord {
            timestamp: truth.time,
            quat: quat_from_rotation(&truth.nav.rot),
            pos: truth.nav.pos,
            vel: Some(truth.nav.vel),
        });
        if k < steps {
            truth.propagate(dt);
        }
    }
    Ok(SimData {
        dataset: Dataset { imu, tdoa, ground_truth: gt, has_mag: true },
        anchors,
        truth: TruthTrack::new(track),
        b_omega: truth.b_omega,
        b_a: truth.b_a,
    })
}

pub struct SimRun {
    pub data: SimData,
    pub output: RunOutput,
}

/// Generates the scenario and runs the observer over it with default
/// summary options.
pub fn run_scenario(sc: &Scenario, gains: &Gains) -> Result<SimRun, SimError> {
    run_scenario_with(sc, gains, &SummaryOptions::default())
}

pub fn run_scenario_with(sc: &Scenario, gains: &Gains, summary: &SummaryOptions) -> Result<SimRun, SimError> {
    let config = ObserverConfig { gains: *gains, tag_offset: v3(&sc.tag_offset), ..ObserverConfig::default() };
    run_scenario_configured(sc, config, summary)
}

/// Like [`run_scenario_with`] with a full observer configuration.
pub fn run_scenario_configured(
    sc: &Scenario,
    config: ObserverConfig,
    summary: &SummaryOptions,
) -> Result<SimRun, SimError> {
    let data = generate(sc)?;
    let observer = Observer::new(config, data.anchors.clone())?;
    let init = sc.estimate.to_state().map_err(|e| SimError::Invalid(e.to_string()))?;
    let output = run_observer(&observer, init, &data.dataset, &data.truth, Some((data.b_omega, data.b_a)), summary)?;
    Ok(SimRun { data, output })
}
