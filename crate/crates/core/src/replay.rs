//! Dataset ingestion, ground-truth handling and the observer run loop shared
//! by simulation and replay.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{so3_exp, so3_log, NavState, Rotation, Vec3};
use crate::observer::{
    error_metrics, ErrorMetrics, Observer, ObserverConfig, ObserverError, ObserverState, TruthState, MAX_STEP,
};
use crate::sensors::ImuSample;
use crate::tdoa::{AnchorSet, TdoaFrame};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{file}: missing required column {column:?}")]
    MissingColumn { file: String, column: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

impl ReplayError {
    /// True for errors caused by configuration rather than data or runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, ReplayError::MissingColumn { .. } | ReplayError::Config(_))
    }
}

/// One ground-truth pose, velocity optional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthRecord {
    pub timestamp: f64,
    /// `[w, x, y, z]`
    pub quat: [f64; 4],
    pub pos: Vec3,
    pub vel: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FramePayload {
    Imu(ImuSample),
    Tdoa(TdoaFrame),
    GroundTruth(GroundTruthRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub timestamp: f64,
    pub payload: FramePayload,
}

/// Three time-sorted streams.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub tdoa: Vec<TdoaFrame>,
    pub ground_truth: Vec<GroundTruthRecord>,
    /// False when the IMU stream carried no magnetometer columns.
    pub has_mag: bool,
}

impl Dataset {
    /// All records merged by timestamp. Ties keep IMU, TDOA, ground-truth order.
    pub fn frames(&self) -> Vec<DatasetFrame> {
        let mut out: Vec<DatasetFrame> = self
            .imu
            .iter()
            .map(|s| DatasetFrame { timestamp: s.timestamp, payload: FramePayload::Imu(*s) })
            .chain(self.tdoa.iter().map(|f| DatasetFrame { timestamp: f.timestamp, payload: FramePayload::Tdoa(f.clone()) }))
            .chain(
                self.ground_truth
                    .iter()
                    .map(|g| DatasetFrame { timestamp: g.timestamp, payload: FramePayload::GroundTruth(*g) }),
            )
            .collect();
        out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UwbKind {
    /// Absolute range to each anchor; converted to cyclic differences.
    Ranges,
    /// Cyclic differences `d_k = r_{k+1} - r_k` already formed.
    #[default]
    Differences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuColumns {
    pub time: String,
    pub gyro: [String; 3],
    pub accel: [String; 3],
    /// Used when every column is present in the header.
    pub mag: Option<[String; 3]>,
}

impl Default for ImuColumns {
    fn default() -> Self {
        ImuColumns {
            time: "t".into(),
            gyro: ["gx".into(), "gy".into(), "gz".into()],
            accel: ["ax".into(), "ay".into(), "az".into()],
            mag: Some(["mx".into(), "my".into(), "mz".into()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UwbColumns {
    pub time: String,
    /// Measurement columns in anchor order. `None` takes every other column
    /// in header order.
    pub columns: Option<Vec<String>>,
    pub kind: UwbKind,
}

impl Default for UwbColumns {
    fn default() -> Self {
        UwbColumns { time: "t".into(), columns: None, kind: UwbKind::Differences }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtColumns {
    pub time: String,
    pub quat: [String; 4],
    pub pos: [String; 3],
    /// Used when every column is present; otherwise velocity is derived.
    pub vel: Option<[String; 3]>,
}

impl Default for GtColumns {
    fn default() -> Self {
        GtColumns {
            time: "t".into(),
            quat: ["qw".into(), "qx".into(), "qy".into(), "qz".into()],
            pos: ["px".into(), "py".into(), "pz".into()],
            vel: Some(["vx".into(), "vy".into(), "vz".into()]),
        }
    }
}

/// Multipliers converting file units to seconds, rad/s, m/s² and meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scales {
    pub time: f64,
    pub gyro: f64,
    pub accel: f64,
    pub mag: f64,
    pub uwb: f64,
    pub pos: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Scales { time: 1.0, gyro: 1.0, accel: 1.0, mag: 1.0, uwb: 1.0, pos: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub imu: ImuColumns,
    pub uwb: UwbColumns,
    pub gt: GtColumns,
    pub scale: Scales,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub imu: PathBuf,
    pub uwb: PathBuf,
    pub gt: PathBuf,
}

impl DatasetPaths {
    /// `imu.csv`, `uwb.csv` and `gt.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths { imu: dir.join("imu.csv"), uwb: dir.join("uwb.csv"), gt: dir.join("gt.csv") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalformedRow {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct StreamReport {
    pub rows: usize,
    pub kept: usize,
    pub reordered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct LoadReport {
    pub imu: StreamReport,
    pub uwb: StreamReport,
    pub gt: StreamReport,
    pub malformed: Vec<MalformedRow>,
}

struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, ReplayError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|source| ReplayError::Io { path: path.to_path_buf(), source })?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|source| ReplayError::Csv { file: name.clone(), source })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|source| ReplayError::Csv { file: name.clone(), source })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Table { name, headers, rows })
    }

    fn index(&self, column: &str) -> Result<usize, ReplayError> {
        self.headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| ReplayError::MissingColumn { file: self.name.clone(), column: column.to_string() })
    }

    fn indices(&self, columns: &[String]) -> Result<Vec<usize>, ReplayError> {
        columns.iter().map(|c| self.index(c)).collect()
    }

    fn optional(&self, columns: Option<&[String]>) -> Option<Vec<usize>> {
        columns.and_then(|c| self.indices(c).ok())
    }

    /// Parses each row with `f`, recording failures as malformed rows and
    /// counting rows whose timestamp is below an earlier one.
    fn parse<T>(
        &self,
        report: &mut LoadReport,
        f: impl Fn(&csv::StringRecord) -> Result<(f64, T), String>,
    ) -> (Vec<(f64, T)>, StreamReport) {
        let mut out = Vec::with_capacity(self.rows.len());
        let mut stream = StreamReport { rows: self.rows.len(), ..StreamReport::default() };
        let mut latest = f64::NEG_INFINITY;
        for (line, rec) in &self.rows {
            match f(rec) {
                Ok((t, v)) => {
                    if t < latest {
                        stream.reordered += 1;
                    }
                    latest = latest.max(t);
                    out.push((t, v));
                }
                Err(reason) => {
                    log::debug!("{}:{line}: skipped ({reason})", self.name);
                    report.malformed.push(MalformedRow { file: self.name.clone(), line: *line, reason })
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        stream.kept = out.len();
        (out, stream)
    }
}

fn field(rec: &csv::StringRecord, idx: usize, scale: f64) -> Result<f64, String> {
    let raw = rec.get(idx).ok_or_else(|| format!("row has {} fields, expected more than {idx}", rec.len()))?;
    let v: f64 = raw.parse().map_err(|_| format!("cannot parse {raw:?} as a number"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value {raw:?}"));
    }
    Ok(v * scale)
}

fn vec3(rec: &csv::StringRecord, idx: &[usize], scale: f64) -> Result<Vec3, String> {
    Ok(Vec3::new(field(rec, idx[0], scale)?, field(rec, idx[1], scale)?, field(rec, idx[2], scale)?))
}

fn read_uwb(path: &Path, map: &ColumnMap, report: &mut LoadReport) -> Result<Vec<(f64, TdoaFrame)>, ReplayError> {
    let sc = map.scale;
    let uwb_table = Table::read(path)?;
    let ut = uwb_table.index(&map.uwb.time)?;
    let ucols = match &map.uwb.columns {
        Some(c) => uwb_table.indices(c)?,
        None => (0..uwb_table.headers.len()).filter(|&i| i != ut).collect(),
    };
    if ucols.is_empty() {
        return Err(ReplayError::Config(format!("{}: no measurement columns", uwb_table.name)));
    }
    let kind = map.uwb.kind;
    let (tdoa, uwb_report) = uwb_table.parse(report, |r| {
        let t = field(r, ut, sc.time)?;
        let vals = ucols.iter().map(|&i| field(r, i, sc.uwb)).collect::<Result<Vec<_>, _>>()?;
        let frame = match kind {
            UwbKind::Ranges => TdoaFrame::from_ranges(t, &vals),
            UwbKind::Differences => TdoaFrame::new(t, vals),
        };
        Ok((t, frame))
    });
    report.uwb = uwb_report;
    Ok(tdoa)
}

/// Reads only the UWB stream, sorted by timestamp.
pub fn load_uwb(path: &Path, map: &ColumnMap) -> Result<(Vec<TdoaFrame>, LoadReport), ReplayError> {
    let mut report = LoadReport::default();
    let frames = read_uwb(path, map, &mut report)?;
    if frames.is_empty() {
        return Err(ReplayError::Data(format!("uwb stream is empty ({} rows read)", report.uwb.rows)));
    }
    Ok((frames.into_iter().map(|(_, f)| f).collect(), report))
}

/// Reads the three CSV streams named by `paths` using `map`.
///
/// Required columns that are absent yield [`ReplayError::MissingColumn`]. Rows
/// that fail to parse are skipped and listed in the report with their line
/// numbers. A stream with no usable row is a data error.
pub fn load_dataset(paths: &DatasetPaths, map: &ColumnMap) -> Result<(Dataset, LoadReport), ReplayError> {
    let sc = map.scale;
    let mut report = LoadReport::default();

    let imu_table = Table::read(&paths.imu)?;
    let it = imu_table.index(&map.imu.time)?;
    let ig = imu_table.indices(&map.imu.gyro)?;
    let ia = imu_table.indices(&map.imu.accel)?;
    let im = imu_table.optional(map.imu.mag.as_ref().map(|m| &m[..]));
    let (imu, imu_report) = imu_table.parse(&mut report, |r| {
        let mag = match &im {
            Some(i) => vec3(r, i, sc.mag)?,
            None => Vec3::zeros(),
        };
        let t = field(r, it, sc.time)?;
        Ok((t, ImuSample { timestamp: t, gyro: vec3(r, &ig, sc.gyro)?, accel: vec3(r, &ia, sc.accel)?, mag }))
    });
    report.imu = imu_report;

    let tdoa = read_uwb(&paths.uwb, map, &mut report)?;

    let gt_table = Table::read(&paths.gt)?;
    let gtt = gt_table.index(&map.gt.time)?;
    let gq = gt_table.indices(&map.gt.quat)?;
    let gp = gt_table.indices(&map.gt.pos)?;
    let gv = gt_table.optional(map.gt.vel.as_ref().map(|v| &v[..]));
    let (gt, gt_report) = gt_table.parse(&mut report, |r| {
        let t = field(r, gtt, sc.time)?;
        let quat = [field(r, gq[0], 1.0)?, field(r, gq[1], 1.0)?, field(r, gq[2], 1.0)?, field(r, gq[3], 1.0)?];
        let vel = match &gv {
            Some(i) => Some(vec3(r, i, sc.pos)?),
            None => None,
        };
        Ok((t, GroundTruthRecord { timestamp: t, quat, pos: vec3(r, &gp, sc.pos)?, vel }))
    });
    report.gt = gt_report;

    for (name, kept, stream) in [("imu", imu.len(), &report.imu), ("uwb", tdoa.len(), &report.uwb), ("gt", gt.len(), &report.gt)] {
        if kept == 0 {
            return Err(ReplayError::Data(format!("{name} stream is empty ({} rows read)", stream.rows)));
        }
        if stream.reordered > 0 {
            log::warn!("{name}: {} out-of-order rows sorted", stream.reordered);
        }
    }
    if !report.malformed.is_empty() {
        log::warn!("{} malformed rows skipped", report.malformed.len());
    }
    let dataset = Dataset {
        imu: imu.into_iter().map(|(_, v)| v).collect(),
        tdoa: tdoa.into_iter().map(|(_, v)| v).collect(),
        ground_truth: gt.into_iter().map(|(_, v)| v).collect(),
        has_mag: im.is_some(),
    };
    Ok((dataset, report))
}

/// Hamilton unit quaternion `[w, x, y, z]` to a rotation matrix. The input is
/// renormalized.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Rotation, ReplayError> {
    let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = quat.norm();
    if !(n > 1e-9) || !n.is_finite() {
        return Err(ReplayError::Data(format!("quaternion {q:?} has near-zero norm")));
    }
    if (n - 1.0).abs() > 1e-6 {
        log::debug!("renormalizing quaternion with norm {n}");
    }
    let m: Matrix3<f64> = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
    Ok(Rotation::from_matrix_unchecked(m))
}

/// Inverse of [`quat_to_rotation`] with `w ≥ 0`.
pub fn quat_from_rotation(r: &Rotation) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r.matrix());
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

/// Velocity by local least-squares polynomial fits (Savitzky–Golay style).
///
/// Each sample uses the `window` nearest samples, shifted inward at the ends,
/// and differentiates a degree-`order` fit at its own timestamp.
pub fn derive_velocity(times: &[f64], pos: &[Vec3], window: usize, order: usize) -> Result<Vec<Vec3>, ReplayError> {
    if window % 2 == 0 || window < order + 2 {
        return Err(ReplayError::Config(format!(
            "velocity window must be odd and at least order + 2 (window {window}, order {order})"
        )));
    }
    if times.len() != pos.len() {
        return Err(ReplayError::Data("time and position series differ in length".into()));
    }
    let n = times.len();
    if n < window {
        return Err(ReplayError::Data(format!("{n} ground-truth samples, need at least {window}")));
    }
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i.saturating_sub(half).min(n - window);
        let ts = &times[start..start + window];
        let span = (ts[window - 1] - ts[0]).max(f64::MIN_POSITIVE);
        let scale = 0.5 * span;
        let design = DMatrix::from_fn(window, order + 1, |r, c| ((ts[r] - times[i]) / scale).powi(c as i32));
        let targets = DMatrix::from_fn(window, 3, |r, c| pos[start + r][c]);
        let coeffs = design
            .svd(true, true)
            .solve(&targets, 1e-12)
            .map_err(|e| ReplayError::Data(format!("velocity fit failed at sample {i}: {e}")))?;
        out.push(Vec3::new(coeffs[(1, 0)], coeffs[(1, 1)], coeffs[(1, 2)]) / scale);
    }
    Ok(out)
}

/// Time-sorted truth samples with interpolation inside their range only.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrack {
    samples: Vec<(f64, NavState)>,
}

impl TruthTrack {
    pub fn new(mut samples: Vec<(f64, NavState)>) -> Self {
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        TruthTrack { samples }
    }

    /// Builds a track from ground-truth records, deriving velocity with
    /// [`derive_velocity`] unless every record carries one.
    pub fn from_records(records: &[GroundTruthRecord], window: usize, order: usize) -> Result<Self, ReplayError> {
        let times: Vec<f64> = records.iter().map(|r| r.timestamp).collect();
        let pos: Vec<Vec3> = records.iter().map(|r| r.pos).collect();
        let vel: Vec<Vec3> = if records.iter().all(|r| r.vel.is_some()) {
            records.iter().map(|r| r.vel.unwrap_or_default()).collect()
        } else {
            derive_velocity(&times, &pos, window, order)?
        };
        let samples = records
            .iter()
            .zip(vel)
            .map(|(r, v)| Ok((r.timestamp, NavState::new(quat_to_rotation(r.quat)?, r.pos, v))))
            .collect::<Result<Vec<_>, ReplayError>>()?;
        Ok(TruthTrack::new(samples))
    }

    pub fn samples(&self) -> &[(f64, NavState)] {
        &self.samples
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }

    /// Exact sample on a node, geodesic/linear blend between nodes, `None`
    /// outside the covered interval.
    pub fn at(&self, t: f64) -> Option<NavState> {
        let (t0, t1) = self.range()?;
        if !(t >= t0 && t <= t1) {
            return None;
        }
        let k = self.samples.partition_point(|s| s.0 < t);
        let (tb, nb) = self.samples[k];
        if tb == t || k == 0 {
            return Some(nb);
        }
        let (ta, na) = self.samples[k - 1];
        let s = (t - ta) / (tb - ta);
        let delta = so3_log(&(na.rot.transpose() * nb.rot));
        Some(NavState::new(
            na.rot * so3_exp(&delta, s),
            na.pos + s * (nb.pos - na.pos),
            na.vel + s * (nb.vel - na.vel),
        ))
    }
}

/// Parameters of the per-run summary and magnetometer synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryOptions {
    /// Position error (m) that counts as settled.
    pub settling_threshold: f64,
    /// Seconds the error must stay below the threshold.
    pub dwell: f64,
    /// Trailing fraction of the run used for steady-state statistics.
    pub steady_fraction: f64,
    /// Leading fraction of the run used for the log-slope fit.
    pub transient_fraction: f64,
    /// Noise on magnetometer readings synthesized from ground truth.
    pub mag_sd: f64,
    pub mag_seed: u64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions {
            settling_threshold: 0.2,
            dwell: 5.0,
            steady_fraction: 0.5,
            transient_fraction: 0.25,
            mag_sd: 0.2,
            mag_seed: 0,
        }
    }
}

/// One metrics row, evaluated at an IMU timestamp before the step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    pub metrics: ErrorMetrics,
    pub biases_known: bool,
    pub truth: NavState,
    pub estimate: ObserverState,
    /// Raw TDOA solution consumed by the step starting here.
    pub fix: Option<Vec3>,
    /// Lever-arm compensated fix.
    pub p_y: Option<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStats {
    pub start: f64,
    pub att_rms: f64,
    pub pos_rms: f64,
    pub vel_rms: f64,
    /// RMS of compensated TDOA positions against truth over the same window.
    pub raw_tdoa_pos_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub samples: usize,
    pub steps: usize,
    pub duration: f64,
    pub dropped_imu: usize,
    pub tdoa_frames: usize,
    pub tdoa_used: usize,
    pub tdoa_failures: usize,
    pub dead_reckoning_steps: usize,
    pub triad_failures: usize,
    pub initial: ErrorMetrics,
    #[serde(rename = "final")]
    pub last: ErrorMetrics,
    pub settling_threshold: f64,
    pub settling_time: Option<f64>,
    /// Least-squares slope of `ln(pos_err)` over the transient window (1/s).
    pub pos_err_log_slope: Option<f64>,
    pub steady: SteadyStats,
    pub biases_known: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub final_state: ObserverState,
}

#[derive(Default)]
struct Counters {
    steps: usize,
    tdoa_used: usize,
    tdoa_failures: usize,
    dead_reckoning: usize,
    triad_failures: usize,
}

/// Steps `observer` over the IMU stream, attaching each TDOA frame to the last
/// IMU sample at or before its timestamp and scoring every IMU timestamp
/// against `truth`. IMU samples outside the truth interval are dropped.
///
/// Gaps longer than the maximum step are split into equal sub-steps; samples
/// with repeated timestamps are skipped. When the dataset has no magnetometer,
/// readings are synthesized from the truth attitude.
pub fn run_observer(
    observer: &Observer,
    init: ObserverState,
    dataset: &Dataset,
    truth: &TruthTrack,
    biases: Option<(Vec3, Vec3)>,
    opts: &SummaryOptions,
) -> Result<RunOutput, ObserverError> {
    let (t_lo, t_hi) = truth.range().unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
    let imu: Vec<&ImuSample> = dataset.imu.iter().filter(|s| s.timestamp >= t_lo && s.timestamp <= t_hi).collect();
    let dropped_imu = dataset.imu.len() - imu.len();
    if dropped_imu > 0 {
        log::warn!("{dropped_imu} IMU samples outside the ground-truth interval dropped");
    }
    let (b_omega, b_a) = biases.unwrap_or_default();
    let refs = observer.config().refs;
    let mut mag_rng = ChaCha8Rng::seed_from_u64(opts.mag_seed);
    let mag_noise = (opts.mag_sd > 0.0).then(|| Normal::new(0.0, opts.mag_sd).expect("finite sd"));

    let mut rows = Vec::with_capacity(imu.len());
    let mut state = init;
    let mut counts = Counters::default();
    let mut next_frame = dataset.tdoa.partition_point(|f| imu.first().is_none_or(|s| f.timestamp < s.timestamp));
    for (k, sample) in imu.iter().enumerate() {
        let t = sample.timestamp;
        let nav = truth.at(t).expect("sample inside truth interval");
        let truth_state = TruthState { nav, b_omega, b_a };
        let metrics = error_metrics(&truth_state, &state);

        let t_next = imu.get(k + 1).map(|s| s.timestamp);
        let mut frame = None;
        while let (Some(tn), Some(f)) = (t_next, dataset.tdoa.get(next_frame)) {
            if f.timestamp >= tn {
                break;
            }
            if frame.is_some() {
                log::debug!("t={t}: superseded TDOA frame dropped");
            }
            frame = Some(f);
            next_frame += 1;
        }

        let mut row = MetricsRow {
            t,
            metrics,
            biases_known: biases.is_some(),
            truth: nav,
            estimate: state,
            fix: None,
            p_y: None,
        };
        if let Some(tn) = t_next {
            let gap = tn - t;
            if gap > 0.0 {
                let mut reading = **sample;
                if !dataset.has_mag {
                    reading.mag = nav.rot.matrix().transpose() * refs.mag_ref;
                    if let Some(n) = &mag_noise {
                        reading.mag += Vec3::new(n.sample(&mut mag_rng), n.sample(&mut mag_rng), n.sample(&mut mag_rng));
                    }
                }
                let pieces = (gap / MAX_STEP).ceil().max(1.0) as usize;
                let dt = gap / pieces as f64;
                for piece in 0..pieces {
                    let used = if piece == 0 { frame } else { None };
                    let out = observer.step(&state, &reading, used, dt)?;
                    counts.steps += 1;
                    counts.dead_reckoning += out.flags.dead_reckoning as usize;
                    counts.triad_failures += out.flags.triad_error.is_some() as usize;
                    if used.is_some() {
                        if out.flags.tdoa_error.is_some() {
                            counts.tdoa_failures += 1;
                        } else {
                            counts.tdoa_used += 1;
                        }
                    }
                    if piece == 0 {
                        row.fix = out.fix.as_ref().map(|f| f.p);
                        row.p_y = out.p_y;
                    }
                    state = out.state;
                }
            } else if frame.is_some() {
                log::debug!("t={t}: repeated timestamp, frame dropped");
            }
        }
        rows.push(row);
    }
    let summary = summarize(&rows, &counts, dataset.tdoa.len(), dropped_imu, opts);
    Ok(RunOutput { rows, summary, final_state: state })
}

fn rms(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

fn summarize(rows: &[MetricsRow], c: &Counters, tdoa_frames: usize, dropped_imu: usize, opts: &SummaryOptions) -> Summary {
    let zero = ErrorMetrics { att_err: 0.0, pos_err: 0.0, vel_err: 0.0, b_omega_err: 0.0, b_a_err: 0.0 };
    let (t0, t1) = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0.0, 0.0),
    };
    let duration = t1 - t0;

    let mut settling_time = None;
    let mut candidate: Option<f64> = None;
    for r in rows {
        if r.metrics.pos_err < opts.settling_threshold {
            let start = *candidate.get_or_insert(r.t);
            if r.t - start >= opts.dwell {
                settling_time = Some(start - t0);
                break;
            }
        } else {
            candidate = None;
        }
    }

    let steady_start = t1 - opts.steady_fraction * duration;
    let steady: Vec<&MetricsRow> = rows.iter().filter(|r| r.t >= steady_start).collect();
    let steady_stats = SteadyStats {
        start: steady_start,
        att_rms: rms(steady.iter().map(|r| r.metrics.att_err)).unwrap_or(0.0),
        pos_rms: rms(steady.iter().map(|r| r.metrics.pos_err)).unwrap_or(0.0),
        vel_rms: rms(steady.iter().map(|r| r.metrics.vel_err)).unwrap_or(0.0),
        raw_tdoa_pos_rms: rms(steady.iter().filter_map(|r| r.p_y.map(|p| (p - r.truth.pos).norm()))),
    };

    let transient_end = t0 + opts.transient_fraction * duration;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t <= transient_end && r.metrics.pos_err > 0.0)
        .map(|r| (r.t - t0, r.metrics.pos_err.ln()))
        .collect();
    let pos_err_log_slope = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });

    Summary {
        samples: rows.len(),
        steps: c.steps,
        duration,
        dropped_imu,
        tdoa_frames,
        tdoa_used: c.tdoa_used,
        tdoa_failures: c.tdoa_failures,
        dead_reckoning_steps: c.dead_reckoning,
        triad_failures: c.triad_failures,
        initial: rows.first().map_or(zero, |r| r.metrics),
        last: rows.last().map_or(zero, |r| r.metrics),
        settling_threshold: opts.settling_threshold,
        settling_time,
        pos_err_log_slope: pos_err_log_slope.filter(|s| s.is_finite()),
        steady: steady_stats,
        biases_known: rows.first().is_some_and(|r| r.biases_known),
    }
}

/// Replay settings beyond the observer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub observer: ObserverConfig,
    pub init: ObserverState,
    pub summary: SummaryOptions,
    pub velocity_window: usize,
    pub velocity_order: usize,
}

impl ReplayConfig {
    pub fn new(observer: ObserverConfig, init: ObserverState) -> Self {
        ReplayConfig { observer, init, summary: SummaryOptions::default(), velocity_window: 11, velocity_order: 2 }
    }
}

/// Runs the observer on a loaded dataset and scores it against its ground truth.
pub fn run_replay(dataset: &Dataset, anchors: &AnchorSet, config: &ReplayConfig) -> Result<RunOutput, ReplayError> {
    if let Some(bad) = dataset.tdoa.iter().find(|f| f.d.len() != anchors.len()) {
        return Err(ReplayError::Config(format!(
            "TDOA frame at t={} has {} values but {} anchors are configured",
            bad.timestamp,
            bad.d.len(),
            anchors.len()
        )));
    }
    let truth = TruthTrack::from_records(&dataset.ground_truth, config.velocity_window, config.velocity_order)?;
    let observer = Observer::new(config.observer.clone(), anchors.clone())?;
    Ok(run_observer(&observer, config.init, dataset, &truth, None, &config.summary)?)
}

const METRICS_HEADER: [&str; 27] = [
    "t", "att_err", "pos_err", "vel_err", "b_omega_err", "b_a_err", "px_true", "py_true", "pz_true", "vx_true",
    "vy_true", "vz_true", "px_est", "py_est", "pz_est", "vx_est", "vy_est", "vz_est", "py_raw_x", "py_raw_y",
    "py_raw_z", "bgx_est", "bgy_est", "bgz_est", "bax_est", "bay_est", "baz_est",
];

fn push3(out: &mut Vec<String>, v: &Vec3) {
    out.extend(v.iter().map(|x| x.to_string()));
}

/// Writes the per-timestamp metrics. Empty cells mark a missing TDOA fix or
/// unknown true biases.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![r.t.to_string(), m.att_err.to_string(), m.pos_err.to_string(), m.vel_err.to_string()];
        if r.biases_known {
            rec.push(m.b_omega_err.to_string());
            rec.push(m.b_a_err.to_string());
        } else {
            rec.extend([String::new(), String::new()]);
        }
        push3(&mut rec, &r.truth.pos);
        push3(&mut rec, &r.truth.vel);
        push3(&mut rec, &r.estimate.nav.pos);
        push3(&mut rec, &r.estimate.nav.vel);
        match &r.fix {
            Some(p) => push3(&mut rec, p),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        push3(&mut rec, &r.estimate.b_omega_hat);
        push3(&mut rec, &r.estimate.b_a_hat);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}

/// Writes `imu.csv`, `uwb.csv`, `gt.csv` and `anchors.json` in the default
/// column layout, with differences in the UWB file.
pub fn export_dataset(dataset: &Dataset, anchors: &AnchorSet, dir: &Path) -> Result<(), ReplayError> {
    let paths = DatasetPaths::in_dir(dir);
    let csv_err = |p: &Path| {
        let file = p.display().to_string();
        move |source| ReplayError::Csv { file: file.clone(), source }
    };

    let mut w = csv::Writer::from_path(&paths.imu).map_err(csv_err(&paths.imu))?;
    let mut header = vec!["t", "gx", "gy", "gz", "ax", "ay", "az"];
    if dataset.has_mag {
        header.extend(["mx", "my", "mz"]);
    }
    w.write_record(&header).map_err(csv_err(&paths.imu))?;
    for s in &dataset.imu {
        let mut rec = vec![s.timestamp.to_string()];
        push3(&mut rec, &s.gyro);
        push3(&mut rec, &s.accel);
        if dataset.has_mag {
            push3(&mut rec, &s.mag);
        }
        w.write_record(&rec).map_err(csv_err(&paths.imu))?;
    }
    w.flush().map_err(|source| ReplayError::Io { path: paths.imu.clone(), source })?;

    let mut w = csv::Writer::from_path(&paths.uwb).map_err(csv_err(&paths.uwb))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=anchors.len()).map(|k| format!("d{k}")));
    w.write_record(&header).map_err(csv_err(&paths.uwb))?;
    for f in &dataset.tdoa {
        let mut rec = vec![f.timestamp.to_string()];
        rec.extend(f.d.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(&paths.uwb))?;
    }
    w.flush().map_err(|source| ReplayError::Io { path: paths.uwb.clone(), source })?;

    let mut w = csv::Writer::from_path(&paths.gt).map_err(csv_err(&paths.gt))?;
    let with_vel = dataset.ground_truth.iter().all(|g| g.vel.is_some());
    let mut header = vec!["t", "qw", "qx", "qy", "qz", "px", "py", "pz"];
    if with_vel {
        header.extend(["vx", "vy", "vz"]);
    }
    w.write_record(&header).map_err(csv_err(&paths.gt))?;
    for g in &dataset.ground_truth {
        let mut rec = vec![g.timestamp.to_string()];
        rec.extend(g.quat.iter().map(|v| v.to_string()));
        push3(&mut rec, &g.pos);
        if let (true, Some(v)) = (with_vel, g.vel) {
            push3(&mut rec, &v);
        }
        w.write_record(&rec).map_err(csv_err(&paths.gt))?;
    }
    w.flush().map_err(|source| ReplayError::Io { path: paths.gt.clone(), source })?;

    let anchors_path = dir.join("anchors.json");
    std::fs::write(&anchors_path, anchors.to_json_string())
        .map_err(|source| ReplayError::Io { path: anchors_path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn fixture(dir: &Path, imu: &str, uwb: &str, gt: &str) -> DatasetPaths {
        DatasetPaths {
            imu: write(dir, "imu.csv", imu),
            uwb: write(dir, "uwb.csv", uwb),
            gt: write(dir, "gt.csv", gt),
        }
    }

    const GT: &str = "t,qw,qx,qy,qz,px,py,pz\n0,1,0,0,0,0,0,0\n1,1,0,0,0,1,0,0\n";

    #[test]
    fn two_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(
            dir.path(),
            "t,gx,gy,gz,ax,ay,az\n0.0,0,0,0,0,0,9.8\n0.01,0.1,0,0,0,0,9.8\n",
            "t,d1,d2,d3,d4\n0.0,1,2,3,-6\n",
            GT,
        );
        let (ds, report) = load_dataset(&paths, &ColumnMap::default()).unwrap();
        assert_eq!(ds.imu.len(), 2);
        assert!(ds.imu[0].timestamp < ds.imu[1].timestamp);
        assert!(!ds.has_mag);
        assert_eq!(ds.tdoa[0].d, vec![1.0, 2.0, 3.0, -6.0]);
        assert_eq!(report.imu.reordered, 0);
        assert!(ds.ground_truth[0].vel.is_none());
        let frames = ds.frames();
        assert_eq!(frames.len(), 2 + 1 + 2);
        assert!(frames.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn out_of_order_and_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(
            dir.path(),
            "t,gx,gy,gz,ax,ay,az\n0.2,0,0,0,0,0,9.8\n0.1,0,0,0,0,0,9.8\nbad,0,0,0,0,0,9.8\n0.0,0,0,0,0,0,9.8\n0.3,0,0\n",
            "t,r1,r2,r3,r4\n0.0,1,2,3,4\n",
            GT,
        );
        let mut map = ColumnMap::default();
        map.uwb.kind = UwbKind::Ranges;
        let (ds, report) = load_dataset(&paths, &map).unwrap();
        let ts: Vec<f64> = ds.imu.iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, vec![0.0, 0.1, 0.2]);
        assert_eq!(report.imu.reordered, 2);
        let lines: Vec<u64> = report.malformed.iter().map(|m| m.line).collect();
        assert_eq!(lines, vec![4, 6]);
        assert_eq!(ds.tdoa[0].d, vec![1.0, 1.0, 1.0, -3.0]);
    }

    #[test]
    fn missing_column_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "t,gx,gy,gz,ax,ay\n0,0,0,0,0,0\n", "t,d1\n0,1\n", GT);
        let err = load_dataset(&paths, &ColumnMap::default()).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("\"az\""), "{err}");
    }

    #[test]
    fn empty_stream_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), "t,gx,gy,gz,ax,ay,az\n0,0,0,0,0,0,9.8\n", "t,d1,d2\n", GT);
        let err = load_dataset(&paths, &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, ReplayError::Data(_)), "{err}");
    }

    #[test]
    fn quaternion_cases() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(*r.matrix(), Matrix3::identity());
        let r = quat_to_rotation([FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2]).unwrap();
        assert!((r.rotate(&Vec3::x()) - Vec3::y()).norm() < 1e-15);
        assert!(quat_to_rotation([1e-12, 0.0, 0.0, 0.0]).is_err());
        let r2 = quat_to_rotation([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((r2.matrix() - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn quaternion_matches_axis_angle() {
        let axis = Vec3::new(0.3, -0.5, 0.81).normalize();
        for &angle in &[0.1, 1.0, 2.5, 3.1] {
            let (s, c) = (0.5 * angle as f64).sin_cos();
            let q = [c, s * axis.x, s * axis.y, s * axis.z];
            let r = quat_to_rotation(q).unwrap();
            let e = so3_exp(&(axis * angle), 1.0);
            assert!((r.matrix() - e.matrix()).norm() < 1e-12);
            let back = quat_from_rotation(&r);
            assert!(back.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn velocity_from_ramp_and_constant() {
        let times: Vec<f64> = (0..40).map(|k| 0.01 * k as f64 + 0.003 * (k % 3) as f64).collect();
        let v0 = Vec3::new(0.4, -1.2, 2.0);
        let ramp: Vec<Vec3> = times.iter().map(|&t| Vec3::new(1.0, 2.0, 3.0) + v0 * t).collect();
        for v in derive_velocity(&times, &ramp, 11, 2).unwrap() {
            assert!((v - v0).norm() < 1e-9);
        }
        let flat = vec![Vec3::new(1.0, 1.0, 1.0); 40];
        for v in derive_velocity(&times, &flat, 11, 2).unwrap() {
            assert!(v.norm() < 1e-9);
        }
        let quad: Vec<Vec3> = times.iter().map(|&t| Vec3::new(t * t, 0.0, 0.0)).collect();
        for (v, t) in derive_velocity(&times, &quad, 7, 2).unwrap().iter().zip(&times) {
            assert!((v.x - 2.0 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn velocity_on_sinusoid() {
        let dt = 0.01;
        let times: Vec<f64> = (0..500).map(|k| k as f64 * dt).collect();
        let pos: Vec<Vec3> = times.iter().map(|&t| Vec3::new(t.sin(), 0.0, 0.0)).collect();
        let vel = derive_velocity(&times, &pos, 11, 2).unwrap();
        let bound = (11.0 * dt) * (11.0 * dt);
        let worst = vel.iter().zip(&times).map(|(v, t)| (v.x - t.cos()).abs()).fold(0.0, f64::max);
        assert!(worst < bound, "{worst} vs {bound}");
    }

    #[test]
    fn velocity_argument_checks() {
        let t = [0.0, 1.0, 2.0];
        let p = [Vec3::zeros(); 3];
        assert!(derive_velocity(&t, &p, 4, 2).is_err());
        assert!(derive_velocity(&t, &p, 3, 2).is_err());
        assert!(derive_velocity(&t, &p, 5, 2).is_err());
    }

    #[test]
    fn truth_track_interpolation() {
        let a = NavState::new(Rotation::identity(), Vec3::zeros(), Vec3::x());
        let b = NavState::new(Rotation::about_axis(&Vec3::z(), 0.4), Vec3::new(2.0, 0.0, 0.0), Vec3::y());
        let track = TruthTrack::new(vec![(1.0, b), (0.0, a)]);
        assert_eq!(track.at(0.0), Some(a));
        assert_eq!(track.at(1.0), Some(b));
        assert_eq!(track.at(-0.01), None);
        assert_eq!(track.at(1.01), None);
        let mid = track.at(0.5).unwrap();
        assert!((mid.pos - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let expect = Rotation::about_axis(&Vec3::z(), 0.2);
        assert!((mid.rot.matrix() - expect.matrix()).norm() < 1e-14);
    }

    #[test]
    fn metrics_csv_header_and_blanks() {
        let nav = NavState::identity();
        let row = MetricsRow {
            t: 0.5,
            metrics: ErrorMetrics { att_err: 0.0, pos_err: 1.0, vel_err: 0.0, b_omega_err: 0.0, b_a_err: 0.0 },
            biases_known: false,
            truth: nav,
            estimate: ObserverState::new(nav),
            fix: None,
            p_y: None,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("t,att_err,pos_err,vel_err,"));
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells.len(), METRICS_HEADER.len());
        assert_eq!(cells[4], "");
        assert_eq!(cells[18], "");
    }
}
