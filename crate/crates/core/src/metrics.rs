//! Sample-based calibration regions and metrics.
//!
//! All-label errors group every (sample, class) probability into regions;
//! top-label errors only use each sample's predicted class and its
//! probability. With `N` samples and `K` classes:
//!
//! - ACE  = 1/(NK) Σ_p |Σ_j Σ_{i∈S_j^p} (P_ij − δ(y_i, j))|
//! - ACCE = 1/(NK) Σ_p Σ_j |Σ_{i∈S_j^p} (P_ij − δ(y_i, j))|
//! - ECE  = 1/N    Σ_p |Σ_j Σ_{i∈S̃_j^p} (P_ij − δ(y_i, j))|
//! - ECCE = 1/N    Σ_p Σ_j |Σ_{i∈S̃_j^p} (P_ij − δ(y_i, j))|
//!
//! The same engine evaluates weighted populations against soft targets, which
//! is how the distribution-level errors in [`crate::synth`] are computed.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use serde::Serialize;

use crate::data::{argmax, exact_key, BinningScheme, LabeledPredictionSet, SampleSet};
use crate::error::{Error, Result};
use crate::par;

/// Probability floor applied inside the NLL.
pub const NLL_FLOOR: f64 = 1e-12;

/// Rows used for the median-heuristic bandwidth.
pub const SKCE_BANDWIDTH_ROWS: usize = 1000;

/// Default row cap for the quadratic SKCE estimator.
pub const SKCE_MAX_ROWS: usize = 10_000;

/// What predictions are compared against.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Observed classes: the target row is one-hot.
    Labels(&'a [usize]),
    /// True posterior rows.
    Distribution(ArrayView2<'a, f64>),
}

impl Targets<'_> {
    #[inline]
    fn value(&self, i: usize, j: usize) -> f64 {
        match self {
            Targets::Labels(y) => (y[i] == j) as u8 as f64,
            Targets::Distribution(t) => t[[i, j]],
        }
    }

    fn len(&self) -> usize {
        match self {
            Targets::Labels(y) => y.len(),
            Targets::Distribution(t) => t.nrows(),
        }
    }
}

/// Per-region, per-class signed sums.
#[derive(Debug, Clone)]
struct CellSums {
    k: usize,
    fixed: Option<usize>,
    dense: Vec<f64>,
    sparse: BTreeMap<u64, (f64, Vec<f64>)>,
}

impl CellSums {
    fn new(k: usize, scheme: BinningScheme) -> Self {
        let fixed = scheme.bin_count();
        Self {
            k,
            fixed,
            dense: vec![0.0; fixed.unwrap_or(0) * k],
            sparse: BTreeMap::new(),
        }
    }

    #[inline]
    fn add(&mut self, p: f64, j: usize, v: f64) {
        match self.fixed {
            Some(bins) => self.dense[BinningScheme::fixed_bin(bins, p) * self.k + j] += v,
            None => {
                let k = self.k;
                let entry = self.sparse.entry(exact_key(p)).or_insert_with(|| (p, vec![0.0; k]));
                entry.1[j] += v;
            }
        }
    }

    fn merge(&mut self, other: CellSums) {
        if self.fixed.is_some() {
            for (a, b) in self.dense.iter_mut().zip(other.dense) {
                *a += b;
            }
        } else {
            for (key, (p, sums)) in other.sparse {
                let entry = self.sparse.entry(key).or_insert_with(|| (p, vec![0.0; sums.len()]));
                for (a, b) in entry.1.iter_mut().zip(sums) {
                    *a += b;
                }
            }
        }
    }

    fn regions(&self) -> Box<dyn Iterator<Item = &[f64]> + '_> {
        match self.fixed {
            Some(_) => Box::new(self.dense.chunks(self.k)),
            None => Box::new(self.sparse.values().map(|(_, s)| s.as_slice())),
        }
    }

    /// (Σ_p |Σ_j s|, Σ_p Σ_j |s|)
    fn abs_totals(&self) -> (f64, f64) {
        self.regions().fold((0.0, 0.0), |(outer, inner), s| {
            (
                outer + s.iter().sum::<f64>().abs(),
                inner + s.iter().map(|v| v.abs()).sum::<f64>(),
            )
        })
    }
}

/// ACE, ACCE, ECE and ECCE evaluated together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationErrors {
    pub ace: f64,
    pub acce: f64,
    pub ece: f64,
    pub ecce: f64,
}

/// Evaluates all four region errors of `probs` against `targets`.
///
/// With `masses = None` every row weighs 1/N. Otherwise each row carries its
/// own probability mass and the masses should sum to one.
pub fn calibration_errors(
    probs: ArrayView2<'_, f64>,
    targets: Targets<'_>,
    masses: Option<&[f64]>,
    scheme: BinningScheme,
) -> CalibrationErrors {
    let (n, k) = probs.dim();
    assert_eq!(targets.len(), n, "targets must match prediction rows");
    if let Some(w) = masses {
        assert_eq!(w.len(), n, "masses must match prediction rows");
    }
    let parts = par::map_chunks(n, par::ROW_CHUNK, |range| {
        let mut all = CellSums::new(k, scheme);
        let mut top = CellSums::new(k, scheme);
        for i in range {
            let row = probs.index_axis(Axis(0), i);
            let row = row.as_slice().expect("contiguous rows");
            let w = masses.map_or(1.0, |m| m[i]);
            for (j, &p) in row.iter().enumerate() {
                all.add(p, j, w * (p - targets.value(i, j)));
            }
            let a = argmax(row);
            top.add(row[a], a, w * (row[a] - targets.value(i, a)));
        }
        (all, top)
    });
    let mut all = CellSums::new(k, scheme);
    let mut top = CellSums::new(k, scheme);
    for (a, t) in parts {
        all.merge(a);
        top.merge(t);
    }
    let (ace, acce) = all.abs_totals();
    let (ece, ecce) = top.abs_totals();
    let (all_norm, top_norm) = match masses {
        None => ((n * k) as f64, n as f64),
        Some(_) => (k as f64, 1.0),
    };
    CalibrationErrors {
        ace: ace / all_norm,
        acce: acce / all_norm,
        ece: ece / top_norm,
        ecce: ecce / top_norm,
    }
}

fn sample_errors(preds: &LabeledPredictionSet, scheme: BinningScheme) -> CalibrationErrors {
    calibration_errors(preds.probs(), Targets::Labels(preds.labels()), None, scheme)
}

pub fn ace(preds: &LabeledPredictionSet, scheme: BinningScheme) -> f64 {
    sample_errors(preds, scheme).ace
}

pub fn acce(preds: &LabeledPredictionSet, scheme: BinningScheme) -> f64 {
    sample_errors(preds, scheme).acce
}

pub fn ece(preds: &LabeledPredictionSet, scheme: BinningScheme) -> f64 {
    sample_errors(preds, scheme).ece
}

pub fn ecce(preds: &LabeledPredictionSet, scheme: BinningScheme) -> f64 {
    sample_errors(preds, scheme).ecce
}

/// One calibration region: a class and a probability bin with its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCell {
    pub class: usize,
    /// Bin center in fixed-width mode, the exact value otherwise.
    pub center: f64,
    /// 0-based bin index in fixed-width mode.
    pub bin: Option<usize>,
    pub samples: Vec<usize>,
}

/// Non-empty regions ordered by probability, then class.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIndex {
    pub top_label: bool,
    pub cells: Vec<RegionCell>,
}

impl RegionIndex {
    pub fn cell(&self, class: usize, bin: usize) -> Option<&RegionCell> {
        self.cells.iter().find(|c| c.class == class && c.bin == Some(bin))
    }
}

/// Assigns samples (top-label) or (sample, class) pairs (all-label) to regions.
pub fn assign_regions(preds: &LabeledPredictionSet, scheme: BinningScheme, top_label: bool) -> RegionIndex {
    let mut cells: BTreeMap<(u64, usize), RegionCell> = BTreeMap::new();
    let mut push = |i: usize, j: usize, p: f64| {
        let (key, center, bin) = match scheme {
            BinningScheme::FixedWidth { bins } => {
                let z = BinningScheme::fixed_bin(bins, p);
                (z as u64, BinningScheme::center(bins, z), Some(z))
            }
            BinningScheme::ExactValue => (exact_key(p), p, None),
        };
        cells
            .entry((key, j))
            .or_insert_with(|| RegionCell {
                class: j,
                center,
                bin,
                samples: Vec::new(),
            })
            .samples
            .push(i);
    };
    for i in 0..preds.n() {
        let row = preds.row(i);
        if top_label {
            let a = argmax(row);
            push(i, a, row[a]);
        } else {
            for (j, &p) in row.iter().enumerate() {
                push(i, j, p);
            }
        }
    }
    RegionIndex {
        top_label,
        cells: cells.into_values().collect(),
    }
}

/// Signed global calibration gaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalGaps {
    /// Per class: mean predicted probability minus mean target.
    pub all_label: Vec<f64>,
    /// Mean top-label confidence minus (expected) accuracy.
    pub top_label: f64,
}

pub fn global_gaps(preds: &LabeledPredictionSet) -> GlobalGaps {
    global_gaps_against(preds.probs(), Targets::Labels(preds.labels()))
}

pub fn global_gaps_against(probs: ArrayView2<'_, f64>, targets: Targets<'_>) -> GlobalGaps {
    let (n, k) = probs.dim();
    let parts = par::map_chunks(n, par::ROW_CHUNK, |range| {
        let mut pred = vec![0.0; k];
        let mut tgt = vec![0.0; k];
        let (mut conf, mut hit) = (0.0, 0.0);
        for i in range {
            let row = probs.index_axis(Axis(0), i);
            let row = row.as_slice().expect("contiguous rows");
            for j in 0..k {
                pred[j] += row[j];
                tgt[j] += targets.value(i, j);
            }
            let a = argmax(row);
            conf += row[a];
            hit += targets.value(i, a);
        }
        (pred, tgt, conf, hit)
    });
    let mut pred = vec![0.0; k];
    let mut tgt = vec![0.0; k];
    let (mut conf, mut hit) = (0.0, 0.0);
    for (p, t, c, h) in parts {
        for j in 0..k {
            pred[j] += p[j];
            tgt[j] += t[j];
        }
        conf += c;
        hit += h;
    }
    let nf = n as f64;
    GlobalGaps {
        all_label: pred.iter().zip(&tgt).map(|(p, t)| p / nf - t / nf).collect(),
        top_label: conf / nf - hit / nf,
    }
}

/// Fraction of samples whose argmax (lowest index on ties) is the label.
pub fn accuracy(preds: &LabeledPredictionSet) -> f64 {
    accuracy_against(preds.probs(), Targets::Labels(preds.labels()))
}

/// Mean target mass on the predicted class; the plain accuracy for labels.
pub fn accuracy_against(probs: ArrayView2<'_, f64>, targets: Targets<'_>) -> f64 {
    let n = probs.nrows();
    let parts = par::map_chunks(n, par::ROW_CHUNK, |range| {
        range
            .map(|i| {
                let row = probs.index_axis(Axis(0), i);
                targets.value(i, argmax(row.as_slice().expect("contiguous rows")))
            })
            .sum::<f64>()
    });
    parts.into_iter().sum::<f64>() / n as f64
}

/// Mean negative log-likelihood of the labels, in nats.
pub fn nll(preds: &LabeledPredictionSet) -> f64 {
    let labels = preds.labels();
    let parts = par::map_chunks(preds.n(), par::ROW_CHUNK, |range| {
        range.map(|i| -preds.row(i)[labels[i]].max(NLL_FLOOR).ln()).sum::<f64>()
    });
    parts.into_iter().sum::<f64>() / preds.n() as f64
}

/// Laplacian kernel bandwidth for the SKCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise L1 distance over a deterministic subsample.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkceOptions {
    pub bandwidth: Bandwidth,
    /// Stride-subsample to at most this many rows; `None` uses every row.
    pub max_rows: Option<usize>,
}

impl Default for SkceOptions {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Auto,
            max_rows: Some(SKCE_MAX_ROWS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkceEstimate {
    pub value: f64,
    pub bandwidth: f64,
    pub rows_used: usize,
    pub subsampled: bool,
}

/// Evenly strided row indices, `count` of `n`.
fn stride_rows(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    (0..count).map(|r| r * n / count).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Median heuristic. Falls back to 1 when all sampled rows coincide, where
/// the kernel is 1 for any bandwidth.
pub fn median_bandwidth(preds: &LabeledPredictionSet) -> f64 {
    let rows = stride_rows(preds.n(), SKCE_BANDWIDTH_ROWS);
    let mut dists: Vec<f64> = par::map_indices(rows.len(), |a| {
        rows[a + 1..]
            .iter()
            .map(|&b| l1(preds.row(rows[a]), preds.row(b)))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Unbiased quadratic estimator of the squared kernel calibration error
/// with a Laplacian kernel exp(-‖p − q‖₁/ν). The estimate may be negative.
pub fn skce_uq(preds: &LabeledPredictionSet, options: SkceOptions) -> Result<SkceEstimate> {
    let n = preds.n();
    if n < 2 {
        return Err(Error::Parameter("SKCE needs at least two samples".into()));
    }
    let bandwidth = match options.bandwidth {
        Bandwidth::Auto => median_bandwidth(preds),
        Bandwidth::Fixed(v) if v > 0.0 && v.is_finite() => v,
        Bandwidth::Fixed(v) => return Err(Error::Parameter(format!("bandwidth must be positive, got {v}"))),
    };
    let cap = options.max_rows.unwrap_or(n).max(2);
    let rows = stride_rows(n, cap);
    let labels = preds.labels();
    let partial = par::map_indices(rows.len(), |a| {
        let i = rows[a];
        let (pi, yi) = (preds.row(i), labels[i]);
        rows[a + 1..]
            .iter()
            .map(|&j| {
                let (pj, yj) = (preds.row(j), labels[j]);
                let kernel = (-l1(pi, pj) / bandwidth).exp();
                let dot: f64 = pi.iter().zip(pj).map(|(x, y)| x * y).sum();
                let agree = (yi == yj) as u8 as f64;
                kernel * (agree - pi[yj] - pj[yi] + dot)
            })
            .sum::<f64>()
    });
    let m = rows.len() as f64;
    Ok(SkceEstimate {
        value: 2.0 * partial.into_iter().sum::<f64>() / (m * (m - 1.0)),
        bandwidth,
        rows_used: rows.len(),
        subsampled: rows.len() < n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    /// Fraction of all samples in this bin.
    pub occupancy: f64,
    /// Mean top-label probability; 0 for empty bins.
    pub confidence: f64,
    /// Empirical accuracy; 0 for empty bins.
    pub accuracy: f64,
    pub count: usize,
    pub empty: bool,
}

/// Top-label reliability data. Every fixed-width bin is listed, empty ones
/// flagged; in exact-value mode each distinct confidence is a bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityCurve {
    pub bins: Vec<ReliabilityBin>,
}

pub const RELIABILITY_CSV_HEADER: &str = "bin_center,occupancy,confidence,accuracy,count";

impl ReliabilityCurve {
    pub fn non_empty(&self) -> impl Iterator<Item = &ReliabilityBin> {
        self.bins.iter().filter(|b| !b.empty)
    }

    /// Occupancy-weighted |confidence − accuracy|.
    pub fn weighted_gap(&self) -> f64 {
        self.non_empty()
            .map(|b| b.occupancy * (b.confidence - b.accuracy).abs())
            .sum()
    }

    /// Non-empty bins, columns `bin_center,occupancy,confidence,accuracy,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RELIABILITY_CSV_HEADER);
        out.push('\n');
        for b in self.non_empty() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.center, b.occupancy, b.confidence, b.accuracy, b.count
            ));
        }
        out
    }
}

pub fn reliability(preds: &LabeledPredictionSet, scheme: BinningScheme) -> ReliabilityCurve {
    // key -> (value, count, Σconf, Σcorrect)
    let mut acc: BTreeMap<u64, (f64, usize, f64, f64)> = BTreeMap::new();
    if let BinningScheme::FixedWidth { bins } = scheme {
        for z in 0..bins {
            acc.insert(z as u64, (BinningScheme::center(bins, z), 0, 0.0, 0.0));
        }
    }
    for i in 0..preds.n() {
        let (a, conf) = preds.top_label(i);
        let key = match scheme {
            BinningScheme::FixedWidth { bins } => BinningScheme::fixed_bin(bins, conf) as u64,
            BinningScheme::ExactValue => exact_key(conf),
        };
        let e = acc.entry(key).or_insert((conf, 0, 0.0, 0.0));
        e.1 += 1;
        e.2 += conf;
        e.3 += (preds.labels()[i] == a) as u8 as f64;
    }
    let n = preds.n() as f64;
    let bins = acc
        .into_iter()
        .map(|(key, (center, count, sum_conf, sum_hit))| {
            let (lower, upper) = match scheme {
                BinningScheme::FixedWidth { bins } => BinningScheme::interval(bins, key as usize),
                BinningScheme::ExactValue => (center, center),
            };
            let c = count.max(1) as f64;
            ReliabilityBin {
                center,
                lower,
                upper,
                occupancy: count as f64 / n,
                confidence: sum_conf / c,
                accuracy: sum_hit / c,
                count,
                empty: count == 0,
            }
        })
        .collect();
    ReliabilityCurve { bins }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReportOptions {
    pub scheme: BinningScheme,
    pub skce: Option<SkceOptions>,
}

/// Flat summary of every metric for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub k: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ace: f64,
    pub acce: f64,
    pub ece: f64,
    pub ecce: f64,
    pub skce: Option<f64>,
    pub skce_bandwidth: Option<f64>,
    pub skce_subsampled: Option<bool>,
    pub global_gap_all_label: Vec<f64>,
    pub global_gap_top_label: f64,
    /// 0 in exact-value mode.
    pub bin_count: usize,
    pub binning: &'static str,
}

/// Key set of the serialized [`MetricReport`].
pub const METRIC_REPORT_KEYS: [&str; 15] = [
    "n",
    "k",
    "accuracy",
    "nll",
    "ace",
    "acce",
    "ece",
    "ecce",
    "skce",
    "skce_bandwidth",
    "skce_subsampled",
    "global_gap_all_label",
    "global_gap_top_label",
    "bin_count",
    "binning",
];

impl MetricReport {
    pub fn compute(preds: &LabeledPredictionSet, options: ReportOptions) -> Result<Self> {
        let errors = sample_errors(preds, options.scheme);
        let gaps = global_gaps(preds);
        let skce = options.skce.map(|o| skce_uq(preds, o)).transpose()?;
        Ok(Self {
            n: preds.n(),
            k: preds.k(),
            accuracy: accuracy(preds),
            nll: nll(preds),
            ace: errors.ace,
            acce: errors.acce,
            ece: errors.ece,
            ecce: errors.ecce,
            skce: skce.map(|s| s.value),
            skce_bandwidth: skce.map(|s| s.bandwidth),
            skce_subsampled: skce.map(|s| s.subsampled),
            global_gap_all_label: gaps.all_label,
            global_gap_top_label: gaps.top_label,
            bin_count: options.scheme.bin_count().unwrap_or(0),
            binning: match options.scheme {
                BinningScheme::FixedWidth { .. } => "fixed_width",
                BinningScheme::ExactValue => "exact_value",
            },
        })
    }

    /// One header line and one value line; the gap vector is spread over
    /// `global_gap_1..global_gap_K`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut header = vec![
            "n",
            "k",
            "accuracy",
            "nll",
            "ace",
            "acce",
            "ece",
            "ecce",
            "skce",
            "skce_bandwidth",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        header.extend((1..=self.k).map(|j| format!("global_gap_{j}")));
        header.extend(["global_gap_top_label", "bin_count", "binning"].map(String::from));
        let mut values = vec![
            self.n.to_string(),
            self.k.to_string(),
            self.accuracy.to_string(),
            self.nll.to_string(),
            self.ace.to_string(),
            self.acce.to_string(),
            self.ece.to_string(),
            self.ecce.to_string(),
            opt(self.skce),
            opt(self.skce_bandwidth),
        ];
        values.extend(self.global_gap_all_label.iter().map(f64::to_string));
        values.extend([
            self.global_gap_top_label.to_string(),
            self.bin_count.to_string(),
            self.binning.to_string(),
        ]);
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn set(p: Array2<f64>, y: Vec<usize>) -> LabeledPredictionSet {
        LabeledPredictionSet::new(p, y).unwrap()
    }

    const B15: BinningScheme = BinningScheme::FixedWidth { bins: 15 };

    #[test]
    fn top_label_region_for_point_six() {
        let idx = assign_regions(&set(array![[0.6, 0.4]], vec![0]), B15, true);
        assert_eq!(idx.cells.len(), 1);
        let cell = idx.cell(0, 8).expect("bin 9 of class 1");
        assert_eq!(cell.samples, vec![0]);
        let (lo, hi) = BinningScheme::interval(15, 8);
        assert!(lo < 0.6 && 0.6 <= hi);
    }

    #[test]
    fn top_label_tie_goes_to_lowest_class() {
        let idx = assign_regions(&set(array![[0.5, 0.5]], vec![1]), B15, true);
        assert_eq!(idx.cells[0].class, 0);
    }

    #[test]
    fn one_hot_correct_is_perfect() {
        let p = set(array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], vec![0, 2, 1]);
        let e = sample_errors(&p, B15);
        assert_eq!((e.ace, e.acce, e.ece, e.ecce), (0.0, 0.0, 0.0, 0.0));
        let g = global_gaps(&p);
        assert!(g.all_label.iter().all(|v| *v == 0.0) && g.top_label == 0.0);
        assert_eq!(accuracy(&p), 1.0);
        assert_eq!(nll(&p), 0.0);
        let curve = reliability(&p, B15);
        let rows: Vec<_> = curve.non_empty().collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(
            (rows[0].center, rows[0].confidence, rows[0].accuracy, rows[0].occupancy),
            (29.0 / 30.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn two_sample_ece_hand_value() {
        let p = set(array![[0.8, 0.2], [0.8, 0.2]], vec![0, 1]);
        assert!((ece(&p, B15) - 0.3).abs() < 1e-15);
        let curve = reliability(&p, B15);
        let rows: Vec<_> = curve.non_empty().collect();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].confidence - 0.8).abs() < 1e-15);
        assert_eq!((rows[0].accuracy, rows[0].count), (0.5, 2));
    }

    #[test]
    fn single_sample_gaps() {
        let g = global_gaps(&set(array![[0.9, 0.1]], vec![1]));
        assert!((g.all_label[0] - 0.9).abs() < 1e-15);
        assert!((g.all_label[1] + 0.9).abs() < 1e-15);
        assert!((g.top_label - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nll_of_coin_flip() {
        assert!((nll(&set(array![[0.5, 0.5]], vec![0])) - 2f64.ln()).abs() < 1e-15);
        // floored
        assert!((nll(&set(array![[1.0, 0.0]], vec![1])) + NLL_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn skce_two_sample_hand_value() {
        let p = set(array![[0.5, 0.5], [0.5, 0.5]], vec![0, 1]);
        let opts = SkceOptions {
            bandwidth: Bandwidth::Fixed(1.0),
            max_rows: None,
        };
        let s = skce_uq(&p, opts).unwrap();
        assert!((s.value + 0.5).abs() < 1e-15);
        assert!(!s.subsampled);
    }

    #[test]
    fn skce_errors() {
        let one = set(array![[0.5, 0.5]], vec![0]);
        assert!(skce_uq(&one, SkceOptions::default()).is_err());
        let two = set(array![[0.5, 0.5], [0.2, 0.8]], vec![0, 1]);
        let bad = SkceOptions {
            bandwidth: Bandwidth::Fixed(0.0),
            max_rows: None,
        };
        assert!(skce_uq(&two, bad).is_err());
    }

    #[test]
    fn skce_subsample_flag() {
        let n = 50;
        let p = Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                i as f64 / n as f64
            } else {
                1.0 - i as f64 / n as f64
            }
        });
        let p = set(p, (0..n).map(|i| i % 2).collect());
        let s = skce_uq(
            &p,
            SkceOptions {
                bandwidth: Bandwidth::Auto,
                max_rows: Some(10),
            },
        )
        .unwrap();
        assert!(s.subsampled);
        assert_eq!(s.rows_used, 10);
    }

    #[test]
    fn exact_value_mode_groups_identical_values() {
        let p = set(array![[0.5, 0.5], [0.5, 0.5], [1.0, 0.0], [0.0, 1.0]], vec![0, 1, 0, 1]);
        let e = sample_errors(&p, BinningScheme::ExactValue);
        assert_eq!(e.ace, 0.0);
        assert_eq!(e.ece, 0.0);
        let idx = assign_regions(&p, BinningScheme::ExactValue, false);
        let total: usize = idx.cells.iter().map(|c| c.samples.len()).sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn single_bin_ace_is_zero_for_any_simplex_rows() {
        let p = set(array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]], vec![1, 1]);
        let e = sample_errors(&p, BinningScheme::FixedWidth { bins: 1 });
        let gaps = global_gaps(&p);
        let from_gaps = gaps.all_label.iter().sum::<f64>().abs() / 3.0;
        assert!((e.ace - from_gaps).abs() < 1e-12);
        assert!(e.ace < 1e-15);
        assert!(e.acce > 0.0);
    }

    #[test]
    fn report_serializes_documented_keys() {
        let p = set(array![[0.6, 0.4], [0.3, 0.7]], vec![0, 1]);
        let r = MetricReport::compute(
            &p,
            ReportOptions {
                scheme: B15,
                skce: Some(SkceOptions::default()),
            },
        )
        .unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), METRIC_REPORT_KEYS.len());
        for key in METRIC_REPORT_KEYS {
            assert!(obj.contains_key(key), "{key}");
        }
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}
