//! Prediction sets, logit sets, ensembles and binning schemes.
//!
//! Labels are 0-based everywhere inside the crate. The file formats in
//! [`crate::io`] store 1-based labels and convert at the boundary.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Tolerance on row sums for a probability matrix.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Row-sum deviations up to this size are repaired by renormalisation.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// Default probability floor used before taking logarithms.
pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Anything carrying one row per sample and a label per row.
pub trait SampleSet {
    fn n(&self) -> usize;
    fn k(&self) -> usize;
    fn labels(&self) -> &[usize];
}

/// An N×K matrix of class probabilities with the true label of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPredictionSet {
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl LabeledPredictionSet {
    /// Builds a validated set. Rows that miss unit sum by at most
    /// [`RENORMALIZE_TOLERANCE`] are renormalised with a warning.
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        check_shape(probs.view(), &labels)?;
        let mut probs = standard(probs);
        let mut repaired = 0usize;
        for (i, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
            if let Some(j) = row.iter().position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::Validation(format!(
                    "row {i} entry {j} = {} is not a probability",
                    row[j]
                )));
            }
            let sum: f64 = row.sum();
            let dev = (sum - 1.0).abs();
            if dev > RENORMALIZE_TOLERANCE {
                return Err(Error::Validation(format!("row {i} sums to {sum}")));
            }
            if dev > ROW_SUM_TOLERANCE {
                row.mapv_inplace(|p| p / sum);
                repaired += 1;
            }
        }
        if repaired > 0 {
            log::warn!("renormalised {repaired} probability rows with small sum deviations");
        }
        Ok(Self { probs, labels })
    }

    /// Trusted constructor for matrices the crate produced itself.
    pub(crate) fn from_parts(probs: Array2<f64>, labels: Vec<usize>) -> Self {
        debug_assert_eq!(probs.nrows(), labels.len());
        Self { probs, labels }
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.probs.ncols();
        &self.probs.as_slice().expect("standard layout")[i * k..(i + 1) * k]
    }

    /// Predicted class (lowest index on ties) and its probability.
    pub fn top_label(&self, i: usize) -> (usize, f64) {
        let row = self.row(i);
        let j = argmax(row);
        (j, row[j])
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.probs, self.labels)
    }
}

impl SampleSet for LabeledPredictionSet {
    fn n(&self) -> usize {
        self.probs.nrows()
    }
    fn k(&self) -> usize {
        self.probs.ncols()
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// An N×K matrix of finite logits with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl LogitSet {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        check_shape(logits.view(), &labels)?;
        if let Some((idx, v)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "logit at row {} column {} is not finite ({v})",
                idx.0, idx.1
            )));
        }
        Ok(Self {
            logits: standard(logits),
            labels,
        })
    }

    pub(crate) fn from_parts(logits: Array2<f64>, labels: Vec<usize>) -> Self {
        Self { logits, labels }
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.logits.ncols();
        &self.logits.as_slice().expect("standard layout")[i * k..(i + 1) * k]
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.logits, self.labels)
    }
}

impl SampleSet for LogitSet {
    fn n(&self) -> usize {
        self.logits.nrows()
    }
    fn k(&self) -> usize {
        self.logits.ncols()
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn standard(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn check_shape(m: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    let (n, k) = m.dim();
    if n == 0 {
        return Err(Error::Validation("at least one sample is required".into()));
    }
    if k < 2 {
        return Err(Error::Validation(format!("at least two classes are required, got {k}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&y| y >= k) {
        return Err(Error::Validation(format!(
            "label out of range at row {i}: class index {} with {k} classes",
            labels[i]
        )));
    }
    Ok(())
}

/// Members over the same samples: identical N, K and label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<S> {
    members: Vec<S>,
}

pub type EnsemblePredictions = Ensemble<LabeledPredictionSet>;
pub type LogitEnsemble = Ensemble<LogitSet>;

impl<S: SampleSet> Ensemble<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Shape("an ensemble needs at least one member".into()))?;
        for (m, member) in members.iter().enumerate().skip(1) {
            if member.n() != first.n() || member.k() != first.k() {
                return Err(Error::Shape(format!(
                    "member {m} is {}x{}, member 0 is {}x{}",
                    member.n(),
                    member.k(),
                    first.n(),
                    first.k()
                )));
            }
            if member.labels() != first.labels() {
                return Err(Error::Shape(format!("member {m} has different labels")));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[S] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n(&self) -> usize {
        self.members[0].n()
    }

    pub fn k(&self) -> usize {
        self.members[0].k()
    }

    pub fn labels(&self) -> &[usize] {
        self.members[0].labels()
    }

    pub fn into_members(self) -> Vec<S> {
        self.members
    }
}

impl LogitEnsemble {
    /// Plain softmax of every member.
    pub fn softmax(&self) -> EnsemblePredictions {
        Ensemble {
            members: self.members.iter().map(softmax).collect(),
        }
    }
}

/// How predicted probabilities are grouped into calibration regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BinningScheme {
    /// `bins` equal-width intervals. Bin z (1-based) covers ((z-1)/B, z/B],
    /// with 0 folded into the first bin.
    FixedWidth { bins: usize },
    /// Every distinct floating-point probability is its own region.
    ExactValue,
}

impl Default for BinningScheme {
    fn default() -> Self {
        BinningScheme::FixedWidth { bins: 15 }
    }
}

impl BinningScheme {
    pub fn fixed(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Parameter("bin count must be positive".into()));
        }
        Ok(BinningScheme::FixedWidth { bins })
    }

    /// Half-width ε = 1/(2B); `None` in exact-value mode.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            BinningScheme::FixedWidth { bins } => Some(0.5 / *bins as f64),
            BinningScheme::ExactValue => None,
        }
    }

    pub fn bin_count(&self) -> Option<usize> {
        match self {
            BinningScheme::FixedWidth { bins } => Some(*bins),
            BinningScheme::ExactValue => None,
        }
    }

    /// 0-based bin index of `p` in fixed-width mode.
    pub(crate) fn fixed_bin(bins: usize, p: f64) -> usize {
        let b = bins as f64;
        let mut z = (p * b).ceil().clamp(1.0, b) as usize;
        // Correct rounding in p*B against the exact interval edges.
        if z > 1 && p <= (z - 1) as f64 / b {
            z -= 1;
        } else if z < bins && p > z as f64 / b {
            z += 1;
        }
        z - 1
    }

    /// Center of 0-based fixed-width bin `z0`: min{1, (2z-1)ε}.
    pub fn center(bins: usize, z0: usize) -> f64 {
        let eps = 0.5 / bins as f64;
        (((2 * (z0 + 1)) as f64 - 1.0) * eps).min(1.0)
    }

    /// Interval (lo, hi] of 0-based fixed-width bin `z0`.
    pub fn interval(bins: usize, z0: usize) -> (f64, f64) {
        (z0 as f64 / bins as f64, (z0 + 1) as f64 / bins as f64)
    }
}

/// Key for exact-value grouping: the bit pattern with -0 folded onto +0.
pub(crate) fn exact_key(p: f64) -> u64 {
    if p == 0.0 {
        0
    } else {
        p.to_bits()
    }
}

/// How labels in a raw matrix are numbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelBase {
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: &'static str,
    pub passed: bool,
    pub first_row: Option<usize>,
    pub message: Option<String>,
}

/// Pass/fail per invariant of a raw probability matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Report-only validation of a raw probability matrix and label vector.
pub fn validate(probs: ArrayView2<'_, f64>, labels: &[usize], base: LabelBase) -> ValidationReport {
    let (n, k) = probs.dim();
    let mut checks = Vec::new();

    let dims_ok = n >= 1 && k >= 2;
    checks.push(ValidationCheck {
        name: "dimensions",
        passed: dims_ok,
        first_row: None,
        message: (!dims_ok).then(|| format!("need N >= 1 and K >= 2, got {n}x{k}")),
    });

    let len_ok = labels.len() == n;
    checks.push(ValidationCheck {
        name: "label_count",
        passed: len_ok,
        first_row: None,
        message: (!len_ok).then(|| format!("{n} rows but {} labels", labels.len())),
    });

    let range = probs
        .outer_iter()
        .position(|row| row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0));
    checks.push(ValidationCheck {
        name: "entry_range",
        passed: range.is_none(),
        first_row: range,
        message: range.map(|i| format!("row {i} has an entry outside [0, 1]")),
    });

    let bad_sum = probs.outer_iter().enumerate().find_map(|(i, row)| {
        let s = row.sum();
        ((s - 1.0).abs() > ROW_SUM_TOLERANCE).then_some((i, s))
    });
    checks.push(ValidationCheck {
        name: "row_sum",
        passed: bad_sum.is_none(),
        first_row: bad_sum.map(|(i, _)| i),
        message: bad_sum.map(|(i, s)| format!("row {i} sums to {s}")),
    });

    let (lo, hi) = match base {
        LabelBase::Zero => (0, k),
        LabelBase::One => (1, k + 1),
    };
    let bad_label = labels.iter().position(|&y| y < lo || y >= hi);
    checks.push(ValidationCheck {
        name: "label_range",
        passed: bad_label.is_none(),
        first_row: bad_label,
        message: bad_label.map(|i| format!("label out of range at row {i}: {}", labels[i])),
    });

    ValidationReport { checks }
}

/// Writes softmax(z / t) into `out`.
pub(crate) fn scaled_softmax_into(z: &[f64], t: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / t).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Applies `row_fn(i, logits_row, out_row)` to every row in parallel chunks.
pub(crate) fn map_rows<F>(n: usize, k: usize, row_fn: F) -> Array2<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = par::map_chunks(n, par::ROW_CHUNK, |range| {
        let mut buf = vec![0.0; range.len() * k];
        for (local, i) in range.enumerate() {
            row_fn(i, &mut buf[local * k..(local + 1) * k]);
        }
        buf
    });
    let data: Vec<f64> = chunks.into_iter().flatten().collect();
    Array2::from_shape_vec((n, k), data).expect("row buffers match shape")
}

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: &LogitSet) -> LabeledPredictionSet {
    let (n, k) = logits.logits.dim();
    let probs = map_rows(n, k, |i, out| scaled_softmax_into(logits.row(i), 1.0, out));
    LabeledPredictionSet::from_parts(probs, logits.labels.clone())
}

/// Element-wise ln(max(p, floor)).
pub fn log_probs(preds: &LabeledPredictionSet, floor: f64) -> Result<LogitSet> {
    if !(floor > 0.0) {
        return Err(Error::Parameter(format!("log floor must be positive, got {floor}")));
    }
    let logits = preds.probs.mapv(|p| p.max(floor).ln());
    Ok(LogitSet::from_parts(logits, preds.labels.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn validate_accepts_simplex_rows() {
        let p = array![[0.6, 0.4], [0.3, 0.7]];
        assert!(validate(p.view(), &[1, 2], LabelBase::One).passed());
    }

    #[test]
    fn validate_reports_bad_row_sum() {
        let p = array![[0.6, 0.6]];
        let report = validate(p.view(), &[1], LabelBase::One);
        let fail: Vec<_> = report.failures().collect();
        assert_eq!(fail.len(), 1);
        assert_eq!(fail[0].name, "row_sum");
        assert_eq!(fail[0].first_row, Some(0));
        assert_eq!(fail[0].message.as_deref(), Some("row 0 sums to 1.2"));
    }

    #[test]
    fn validate_reports_label_zero_in_one_based() {
        let p = array![[0.25, 0.25, 0.25, 0.25], [0.25, 0.25, 0.25, 0.25]];
        let report = validate(p.view(), &[1, 0], LabelBase::One);
        let fail: Vec<_> = report.failures().collect();
        assert_eq!(fail[0].name, "label_range");
        assert_eq!(fail[0].first_row, Some(1));
        assert!(fail[0].message.as_ref().unwrap().contains("label out of range"));
    }

    #[test]
    fn small_sum_errors_are_renormalised() {
        let p = array![[0.6, 0.4 + 5e-7]];
        let set = LabeledPredictionSet::new(p, vec![0]).unwrap();
        assert!((set.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(LabeledPredictionSet::new(array![[0.6, 0.41]], vec![0]).is_err());
    }

    #[test]
    fn construction_rejects_bad_labels_and_shapes() {
        assert!(matches!(
            LabeledPredictionSet::new(array![[0.5, 0.5]], vec![2]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            LabeledPredictionSet::new(array![[0.5, 0.5]], vec![0, 1]),
            Err(Error::Shape(_))
        ));
        assert!(LabeledPredictionSet::new(array![[1.0]], vec![0]).is_err());
        assert!(LogitSet::new(array![[f64::NAN, 0.0]], vec![0]).is_err());
    }

    #[test]
    fn softmax_known_rows() {
        let z = LogitSet::new(array![[0.0, 0.0, 0.0, 0.0]], vec![0]).unwrap();
        for p in softmax(&z).row(0) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let z = LogitSet::new(array![[2f64.ln(), 0.0]], vec![0]).unwrap();
        let p = softmax(&z);
        assert!((p.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.row(0)[1] - 1.0 / 3.0).abs() < 1e-15);
        let z = LogitSet::new(array![[1000.0, 0.0]], vec![0]).unwrap();
        let p = softmax(&z);
        assert_eq!(p.row(0)[0], 1.0);
        assert!(p.row(0)[1] >= 0.0 && p.row(0)[1] < 1e-300);
    }

    #[test]
    fn log_probs_floor() {
        let p = LabeledPredictionSet::new(array![[0.5, 0.5], [1.0, 0.0]], vec![0, 0]).unwrap();
        let z = log_probs(&p, DEFAULT_LOG_FLOOR).unwrap();
        assert_eq!(z.row(0), &[0.5f64.ln(), 0.5f64.ln()]);
        assert_eq!(z.row(1), &[0.0, 1e-12f64.ln()]);
        assert!(log_probs(&p, 0.0).is_err());
    }

    #[test]
    fn fixed_bins_follow_left_open_convention() {
        assert_eq!(BinningScheme::fixed_bin(15, 0.6), 8);
        assert_eq!(BinningScheme::fixed_bin(15, 0.0), 0);
        assert_eq!(BinningScheme::fixed_bin(15, 1.0), 14);
        assert_eq!(BinningScheme::fixed_bin(10, 0.1), 0);
        assert_eq!(BinningScheme::fixed_bin(10, 0.1 + 1e-12), 1);
        assert_eq!(BinningScheme::fixed_bin(3, 2.0 / 3.0), 1);
        assert_eq!(BinningScheme::fixed_bin(1, 0.37), 0);
        for z in 0..15 {
            let (lo, hi) = BinningScheme::interval(15, z);
            let c = BinningScheme::center(15, z);
            assert!(lo < c && c <= hi);
        }
        assert_eq!(BinningScheme::center(1, 0), 0.5);
        assert_eq!(BinningScheme::default().epsilon(), Some(1.0 / 30.0));
    }

    #[test]
    fn ensemble_rejects_mismatched_members() {
        let a = LabeledPredictionSet::new(array![[0.5, 0.5]], vec![0]).unwrap();
        let b = LabeledPredictionSet::new(array![[0.5, 0.5]], vec![1]).unwrap();
        let c = LabeledPredictionSet::new(array![[0.2, 0.3, 0.5]], vec![0]).unwrap();
        assert!(Ensemble::new(vec![a.clone(), b]).is_err());
        assert!(Ensemble::new(vec![a.clone(), c]).is_err());
        assert!(Ensemble::<LabeledPredictionSet>::new(vec![]).is_err());
        assert_eq!(Ensemble::new(vec![a.clone(), a]).unwrap().len(), 2);
    }
}
