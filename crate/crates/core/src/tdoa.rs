//! TDOA position reconstruction.
//!
//! Range differences are carried in cyclic order: for anchors `h_0..h_{N-1}`
//! (zero-based), entry `k` of a [`TdoaFrame`] is
//! `‖P - h_{k+1}‖ - ‖P - h_k‖`, with the last entry wrapping to
//! `‖P - h_0‖ - ‖P - h_{N-1}‖`. Chaining the differences expresses every
//! anchor range through the unknown range to the first anchor, which turns
//! the problem into the linear system `A·[P, ‖P - h_0‖] = B`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{Rotation, Vec3};

/// Relative singular-value threshold below which `A` is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Relative threshold on the centered anchor matrix for the coplanarity check.
pub const COPLANAR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdoaError {
    #[error("need at least 4 anchors for a 3D fix, got {0}")]
    TooFewAnchors(usize),
    #[error("duplicate anchor id {0}")]
    DuplicateAnchor(u32),
    #[error("anchors are coplanar (singular value ratio {ratio:.3e})")]
    CoplanarAnchors { ratio: f64 },
    #[error("non-finite anchor position for id {0}")]
    NonFiniteAnchor(u32),
    #[error("frame has {got} range differences but the anchor set has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("extra pair references anchor index {0} outside the set")]
    PairOutOfRange(usize),
    #[error("TDOA geometry is degenerate: numerical rank {rank} < {needed} (σ_min/σ_max = {ratio:.3e})")]
    GeometryDegenerate { rank: usize, needed: usize, ratio: f64 },
    #[error("anchor file: {0}")]
    Io(String),
    #[error("anchor file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub id: u32,
    #[serde(with = "vec3_array")]
    pub pos: Vec3,
}

impl Anchor {
    pub fn new(id: u32, pos: Vec3) -> Self {
        Anchor { id, pos }
    }
}

/// An ordered set of at least four non-coplanar anchors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorDoc {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self, TdoaError> {
        if anchors.len() < 4 {
            return Err(TdoaError::TooFewAnchors(anchors.len()));
        }
        let mut seen = HashSet::new();
        for a in &anchors {
            if !a.pos.iter().all(|v| v.is_finite()) {
                return Err(TdoaError::NonFiniteAnchor(a.id));
            }
            if !seen.insert(a.id) {
                return Err(TdoaError::DuplicateAnchor(a.id));
            }
        }
        let n = anchors.len() as f64;
        let centroid = anchors.iter().fold(Vec3::zeros(), |acc, a| acc + a.pos) / n;
        let mut scatter = Matrix3::zeros();
        for a in &anchors {
            let d = a.pos - centroid;
            scatter += d * d.transpose();
        }
        // Singular values of the centered anchor matrix are the square roots
        // of the scatter eigenvalues.
        let eig = scatter.symmetric_eigenvalues();
        let max = eig.max().max(0.0).sqrt();
        let min = eig.min().max(0.0).sqrt();
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if !(ratio > COPLANAR_TOLERANCE) {
            return Err(TdoaError::CoplanarAnchors { ratio });
        }
        Ok(AnchorSet { anchors })
    }

    /// Parses `{"anchors": [{"id": 1, "pos": [x, y, z]}, ...]}`.
    pub fn from_json_str(s: &str) -> Result<Self, TdoaError> {
        let doc: AnchorDoc = serde_json::from_str(s).map_err(|e| TdoaError::Parse(e.to_string()))?;
        AnchorSet::new(doc.anchors)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TdoaError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TdoaError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("anchor set serializes")
    }

    /// Eight anchors on the vertices of an axis-aligned box.
    pub fn box_vertices(min: Vec3, max: Vec3) -> Self {
        let mut anchors = Vec::with_capacity(8);
        let mut id = 1;
        for &z in &[min.z, max.z] {
            for &(x, y) in &[(min.x, min.y), (max.x, min.y), (max.x, max.y), (min.x, max.y)] {
                anchors.push(Anchor::new(id, Vec3::new(x, y, z)));
                id += 1;
            }
        }
        AnchorSet::new(anchors).expect("box vertices are a valid anchor set")
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn position(&self, index: usize) -> Vec3 {
        self.anchors[index].pos
    }

    /// Largest anchor-to-anchor distance.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.anchors.iter().enumerate() {
            for b in &self.anchors[i + 1..] {
                d = d.max((a.pos - b.pos).norm());
            }
        }
        d
    }
}

/// One epoch of cyclic range differences (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaFrame {
    pub timestamp: f64,
    pub d: Vec<f64>,
}

impl TdoaFrame {
    pub fn new(timestamp: f64, d: Vec<f64>) -> Self {
        TdoaFrame { timestamp, d }
    }

    /// Cyclic differences from absolute tag-to-anchor ranges.
    pub fn from_ranges(timestamp: f64, ranges: &[f64]) -> Self {
        let n = ranges.len();
        let d = (0..n).map(|k| ranges[(k + 1) % n] - ranges[k]).collect();
        TdoaFrame { timestamp, d }
    }

    /// `|d_k| ≤ diameter + slack` for every entry.
    pub fn is_plausible(&self, anchors: &AnchorSet, slack: f64) -> bool {
        let bound = anchors.diameter() + slack;
        self.d.iter().all(|v| v.is_finite() && v.abs() <= bound)
    }
}

/// An additional measured difference `‖P - h_j‖ - ‖P - h_i‖` for zero-based
/// anchor indices, stacked under the cyclic rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtraPair {
    pub j: usize,
    pub i: usize,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedPosition {
    pub p: Vec3,
    /// Fourth unknown, the range to the first anchor. Not clamped.
    pub range_to_h1: f64,
    /// RMS of `A·x - B`.
    pub residual: f64,
    /// `|range_to_h1 - ‖p - h_1‖|`, present when the anchor set was supplied.
    pub consistency: Option<f64>,
    pub negative_range: bool,
    /// True when produced by the 3-unknown fallback.
    pub reduced: bool,
}

pub fn build_system(anchors: &AnchorSet, frame: &TdoaFrame) -> Result<(DMatrix<f64>, DVector<f64>), TdoaError> {
    build_system_with_extra(anchors, frame, &[])
}

pub fn build_system_with_extra(
    anchors: &AnchorSet,
    frame: &TdoaFrame,
    extra: &[ExtraPair],
) -> Result<(DMatrix<f64>, DVector<f64>), TdoaError> {
    let n = anchors.len();
    if frame.d.len() != n {
        return Err(TdoaError::DimensionMismatch { expected: n, got: frame.d.len() });
    }
    // chain[i] expresses ‖P - h_i‖ - ‖P - h_0‖ through the cyclic differences.
    let mut chain = vec![0.0; n];
    for i in 1..n {
        chain[i] = chain[i - 1] + frame.d[i - 1];
    }

    let rows = n + extra.len();
    let mut a = DMatrix::zeros(rows, 4);
    let mut b = DVector::zeros(rows);
    let mut fill = |row: usize, i: usize, j: usize, d: f64| {
        let hi = anchors.position(i);
        let hj = anchors.position(j);
        let diff = hi - hj;
        a[(row, 0)] = diff.x;
        a[(row, 1)] = diff.y;
        a[(row, 2)] = diff.z;
        a[(row, 3)] = -d;
        b[row] = 0.5 * (d * d + hi.norm_squared() - hj.norm_squared() + 2.0 * d * chain[i]);
    };
    for k in 0..n {
        fill(k, k, (k + 1) % n, frame.d[k]);
    }
    for (r, pair) in extra.iter().enumerate() {
        if pair.i >= n || pair.j >= n {
            return Err(TdoaError::PairOutOfRange(pair.i.max(pair.j)));
        }
        fill(n + r, pair.i, pair.j, pair.d);
    }
    Ok((a, b))
}

/// Least-squares solve of `A·x = B` for `x = [P, ‖P - h_1‖]` by QR.
pub fn solve_position(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<ReconstructedPosition, TdoaError> {
    let ratio = singular_ratio(a);
    if !(ratio >= RANK_TOLERANCE) {
        return Err(TdoaError::GeometryDegenerate { rank: numerical_rank(a), needed: 4, ratio });
    }
    let x = least_squares(a, b);
    let residual = rms(&(a * &x - b));
    let range = x[3];
    Ok(ReconstructedPosition {
        p: Vec3::new(x[0], x[1], x[2]),
        range_to_h1: range,
        residual,
        consistency: None,
        negative_range: range < 0.0,
        reduced: false,
    })
}

/// Drops the range unknown (treating the `-d` column as zero) and solves for
/// `P` alone. Only meaningful when the range differences are near zero.
pub fn solve_position_reduced(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<ReconstructedPosition, TdoaError> {
    let a3 = a.columns(0, 3).into_owned();
    let ratio = singular_ratio(&a3);
    if !(ratio >= RANK_TOLERANCE) {
        return Err(TdoaError::GeometryDegenerate { rank: numerical_rank(&a3), needed: 3, ratio });
    }
    let x = least_squares(&a3, b);
    let residual = rms(&(&a3 * &x - b));
    Ok(ReconstructedPosition {
        p: Vec3::new(x[0], x[1], x[2]),
        range_to_h1: f64::NAN,
        residual,
        consistency: None,
        negative_range: false,
        reduced: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveOptions {
    /// Retry with [`solve_position_reduced`] when the full system is rank deficient.
    pub reduced_fallback: bool,
}

/// Builds, solves and annotates one frame.
pub fn reconstruct(
    anchors: &AnchorSet,
    frame: &TdoaFrame,
    extra: &[ExtraPair],
    opts: SolveOptions,
) -> Result<ReconstructedPosition, TdoaError> {
    let (a, b) = build_system_with_extra(anchors, frame, extra)?;
    let mut sol = match solve_position(&a, &b) {
        Err(TdoaError::GeometryDegenerate { .. }) if opts.reduced_fallback => solve_position_reduced(&a, &b)?,
        other => other?,
    };
    if !sol.reduced {
        sol.consistency = Some((sol.range_to_h1 - (sol.p - anchors.position(0)).norm()).abs());
        if sol.negative_range {
            log::warn!("t={}: negative range to first anchor ({:.4} m)", frame.timestamp, sol.range_to_h1);
        }
    }
    Ok(sol)
}

/// Cyclic range differences seen by a tag at `p + R·tag_offset` (the offset
/// term is dropped when `rot` is `None`), plus optional Gaussian noise.
pub fn synthesize_tdoa<R: Rng + ?Sized>(
    timestamp: f64,
    p: &Vec3,
    rot: Option<&Rotation>,
    anchors: &AnchorSet,
    tag_offset: &Vec3,
    noise_sd: f64,
    rng: &mut R,
) -> TdoaFrame {
    let tag = match rot {
        Some(r) => p + r.rotate(tag_offset),
        None => *p,
    };
    let ranges: Vec<f64> = anchors.anchors().iter().map(|a| (tag - a.pos).norm()).collect();
    let mut frame = TdoaFrame::from_ranges(timestamp, &ranges);
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("finite noise sd");
        for v in &mut frame.d {
            *v += normal.sample(rng);
        }
    }
    frame
}

/// [`synthesize_tdoa`] with a dedicated generator seeded from `seed`.
pub fn synthesize_tdoa_seeded(
    timestamp: f64,
    p: &Vec3,
    rot: Option<&Rotation>,
    anchors: &AnchorSet,
    tag_offset: &Vec3,
    noise_sd: f64,
    seed: u64,
) -> TdoaFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize_tdoa(timestamp, p, rot, anchors, tag_offset, noise_sd, &mut rng)
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let qr = a.clone().qr();
    let qtb = qr.q().transpose() * b;
    qr.r()
        .solve_upper_triangular(&qtb)
        .expect("full column rank checked before solving")
}

fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().svd(false, false).singular_values
}

fn singular_ratio(a: &DMatrix<f64>) -> f64 {
    let sv = singular_values(a);
    let max = sv.max();
    if max > 0.0 {
        sv.min() / max
    } else {
        0.0
    }
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = singular_values(a);
    let max = sv.max();
    sv.iter().filter(|&&s| max > 0.0 && s / max >= RANK_TOLERANCE).count()
}

fn rms(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.norm_squared() / v.len() as f64).sqrt()
    }
}

mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([v.x, v.y, v.z])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let [x, y, z] = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(x, y, z))
    }
}
