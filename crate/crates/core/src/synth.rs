//! Synthetic generators with known calibration structure, the
//! distribution-level evaluator for finite-region models, bin-count sweeps
//! and the ensemble calibration property harness.
//!
//! Every generator is a pure function of its configuration and seed. Random
//! streams come from ChaCha8: the truth sampler uses stream 0 of the seed and
//! member `m` uses stream `m + 1`, so members can be generated in parallel.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, exact_key, BinningScheme, Ensemble, EnsemblePredictions, LabeledPredictionSet, SampleSet};
use crate::ensemble::{combine, CombinationWeights};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_against, calibration_errors, global_gaps_against, CalibrationErrors, Targets};
use crate::par;

/// Tolerance on model masses and rows.
pub const MODEL_TOLERANCE: f64 = 1e-12;

/// Slack allowed for the exact linear identities, which hold up to rounding.
pub const LINEARITY_TOLERANCE: f64 = 1e-12;

/// Largest τ for which the `example1_model` rows stay in [0, 1].
pub const EXAMPLE1_MAX_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub bin_size: usize,
    pub classes: usize,
    pub members: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            bin_size: 2,
            classes: 4,
            members: 10,
            samples: 1_000_000,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_size == 0 {
            return Err(Error::Parameter("bin size must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        if self.members == 0 {
            return Err(Error::Parameter("need at least one member".into()));
        }
        if self.samples == 0 {
            return Err(Error::Parameter("need at least one sample".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// True posterior rows with labels drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    pub distribution: Array2<f64>,
    pub labels: Vec<usize>,
}

fn draw_label<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Dirichlet(1, ..., 1) rows, each from K normalized exponential draws,
/// followed by one label per row sampled from it.
pub fn sample_dirichlet_truth(config: &SynthesisConfig) -> Result<TruthSample> {
    config.validate()?;
    let (n, k) = (config.samples, config.classes);
    let mut rng = stream(config.seed, 0);
    let mut distribution = Array2::zeros((n, k));
    for mut row in distribution.rows_mut() {
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(Exp1);
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
    let labels = sample_labels(distribution.view(), &mut rng);
    Ok(TruthSample { distribution, labels })
}

fn sample_labels<R: Rng>(truth: ArrayView2<'_, f64>, rng: &mut R) -> Vec<usize> {
    truth
        .rows()
        .into_iter()
        .map(|row| draw_label(row.as_slice().expect("contiguous rows"), rng))
        .collect()
}

/// Fresh labels for fixed truth rows.
pub fn resample_labels(truth: ArrayView2<'_, f64>, seed: u64) -> Vec<usize> {
    sample_labels(truth, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Members that are calibrated on their own exact-value regions but whose
/// average is not. Each member shuffles the samples with its own stream,
/// cuts them into bins of `b` and predicts every bin's mean true row.
pub fn gen_calibrated_members(truth: &TruthSample, config: &SynthesisConfig) -> Result<EnsemblePredictions> {
    config.validate()?;
    let (n, k) = truth.distribution.dim();
    if k != config.classes || n != config.samples {
        return Err(Error::Shape(format!(
            "truth is {n}x{k}, configuration asks for {}x{}",
            config.samples, config.classes
        )));
    }
    let b = config.bin_size;
    let members = par::map_indices(config.members, |m| {
        let mut rng = stream(config.seed, m as u64 + 1);
        let order = shuffled(n, &mut rng);
        let mut probs = Array2::zeros((n, k));
        let mut mean = vec![0.0; k];
        for bin in order.chunks(b) {
            mean.fill(0.0);
            for &i in bin {
                for (acc, v) in mean.iter_mut().zip(truth.distribution.row(i)) {
                    *acc += v;
                }
            }
            let count = bin.len() as f64;
            mean.iter_mut().for_each(|v| *v /= count);
            for &i in bin {
                probs.row_mut(i).iter_mut().zip(&mean).for_each(|(o, v)| *o = *v);
            }
        }
        LabeledPredictionSet::from_parts(probs, truth.labels.clone())
    });
    Ensemble::new(members)
}

/// `n` labels with counts as equal as possible, in shuffled order.
pub fn balanced_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut stream(seed, 0));
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedPredictions {
    pub predictions: LabeledPredictionSet,
    /// The class counts were not all equal.
    pub unequal_class_counts: bool,
}

/// Shuffles the samples, cuts them into bins of `b` and predicts each bin's
/// empirical one-hot average.
pub fn gen_binned_predictions(labels: &[usize], config: &SynthesisConfig) -> Result<BinnedPredictions> {
    if config.bin_size == 0 || config.classes < 2 {
        return Err(Error::Parameter("need b >= 1 and K >= 2".into()));
    }
    let (n, k, b) = (labels.len(), config.classes, config.bin_size);
    if n == 0 {
        return Err(Error::Shape("no labels".into()));
    }
    if let Some(i) = labels.iter().position(|&y| y >= k) {
        return Err(Error::Validation(format!("label out of range at row {i}")));
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&y| counts[y] += 1);
    let unequal_class_counts = counts.iter().any(|&c| c != counts[0]);
    if unequal_class_counts {
        log::warn!("class counts {counts:?} are not equal");
    }
    let order = shuffled(n, &mut stream(config.seed, 1));
    let mut probs = Array2::zeros((n, k));
    let mut mean = vec![0.0; k];
    for bin in order.chunks(b) {
        mean.fill(0.0);
        bin.iter().for_each(|&i| mean[labels[i]] += 1.0);
        let count = bin.len() as f64;
        mean.iter_mut().for_each(|v| *v /= count);
        for &i in bin {
            probs.row_mut(i).iter_mut().zip(&mean).for_each(|(o, v)| *o = *v);
        }
    }
    Ok(BinnedPredictions {
        predictions: LabeledPredictionSet::from_parts(probs, labels.to_vec()),
        unequal_class_counts,
    })
}

/// Share of samples at each distinct predicted value of `class`, by
/// descending value.
pub fn value_frequencies(preds: &LabeledPredictionSet, class: usize) -> Vec<(f64, f64)> {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for i in 0..preds.n() {
        let p = preds.row(i)[class];
        counts.entry(exact_key(p)).or_insert((p, 0)).1 += 1;
    }
    let n = preds.n() as f64;
    let mut out: Vec<(f64, f64)> = counts.into_values().map(|(p, c)| (p, c as f64 / n)).collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// One region of a piecewise-constant model of the input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegion {
    pub mass: f64,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// An input space made of finitely many regions, each with a probability
/// mass, a true posterior and a predicted posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseDistributionModel {
    regions: Vec<ModelRegion>,
    predicted: Array2<f64>,
    truth: Array2<f64>,
    masses: Vec<f64>,
}

fn on_simplex(row: &[f64]) -> bool {
    row.iter().all(|p| (0.0..=1.0).contains(p)) && (row.iter().sum::<f64>() - 1.0).abs() <= MODEL_TOLERANCE
}

impl PiecewiseDistributionModel {
    pub fn new(regions: Vec<ModelRegion>) -> Result<Self> {
        let first = regions
            .first()
            .ok_or_else(|| Error::Shape("model has no regions".into()))?;
        let k = first.truth.len();
        if k < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        for (r, region) in regions.iter().enumerate() {
            if region.truth.len() != k || region.predicted.len() != k {
                return Err(Error::Shape(format!("region {r} does not have {k} classes")));
            }
            if !(region.mass >= 0.0) {
                return Err(Error::Validation(format!("region {r} has negative mass")));
            }
            if !on_simplex(&region.truth) || !on_simplex(&region.predicted) {
                return Err(Error::Validation(format!("region {r} has a row off the simplex")));
            }
        }
        let total: f64 = regions.iter().map(|r| r.mass).sum();
        if (total - 1.0).abs() > MODEL_TOLERANCE {
            return Err(Error::Validation(format!("region masses sum to {total}")));
        }
        let n = regions.len();
        let predicted = Array2::from_shape_fn((n, k), |(r, j)| regions[r].predicted[j]);
        let truth = Array2::from_shape_fn((n, k), |(r, j)| regions[r].truth[j]);
        let masses = regions.iter().map(|r| r.mass).collect();
        Ok(Self {
            regions,
            predicted,
            truth,
            masses,
        })
    }

    pub fn regions(&self) -> &[ModelRegion] {
        &self.regions
    }

    pub fn k(&self) -> usize {
        self.predicted.ncols()
    }

    pub fn predicted(&self) -> ArrayView2<'_, f64> {
        self.predicted.view()
    }

    pub fn truth(&self) -> ArrayView2<'_, f64> {
        self.truth.view()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// Population-level ACE, ACCE, ECE and ECCE of a finite-region model.
pub fn dist_calibration_errors(model: &PiecewiseDistributionModel, scheme: BinningScheme) -> CalibrationErrors {
    calibration_errors(
        model.predicted(),
        Targets::Distribution(model.truth()),
        Some(model.masses()),
        scheme,
    )
}

/// Signed calibration gap of one exact-value region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionGap {
    pub class: usize,
    pub value: f64,
    /// Mass (or share of samples) in the region.
    pub mass: f64,
    /// Integrated predicted minus true probability over the region.
    pub gap: f64,
}

/// Exact-value region gaps, ordered by class then value. With
/// `top_label`, each row contributes only to its argmax class.
pub fn region_gaps(
    probs: ArrayView2<'_, f64>,
    targets: Targets<'_>,
    masses: Option<&[f64]>,
    top_label: bool,
) -> Vec<RegionGap> {
    let n = probs.nrows();
    let uniform = 1.0 / n as f64;
    let mut cells: BTreeMap<(usize, u64), RegionGap> = BTreeMap::new();
    let target = |i: usize, j: usize| match targets {
        Targets::Labels(y) => (y[i] == j) as u8 as f64,
        Targets::Distribution(t) => t[[i, j]],
    };
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        let row = row.as_slice().expect("contiguous rows");
        let w = masses.map_or(uniform, |m| m[i]);
        let classes = if top_label {
            let a = argmax(row);
            a..a + 1
        } else {
            0..row.len()
        };
        for j in classes {
            let cell = cells.entry((j, exact_key(row[j]))).or_insert(RegionGap {
                class: j,
                value: row[j],
                mass: 0.0,
                gap: 0.0,
            });
            cell.mass += w;
            cell.gap += w * (row[j] - target(i, j));
        }
    }
    cells.into_values().collect()
}

pub fn dist_region_gaps(model: &PiecewiseDistributionModel, top_label: bool) -> Vec<RegionGap> {
    region_gaps(
        model.predicted(),
        Targets::Distribution(model.truth()),
        Some(model.masses()),
        top_label,
    )
}

/// The three-region, four-class model contrasting all-label and top-label
/// calibration. Region masses are 1/3.
pub fn example1_model(tau: f64) -> Result<PiecewiseDistributionModel> {
    if !(0.0..=EXAMPLE1_MAX_TAU).contains(&tau) {
        return Err(Error::Parameter(format!("tau must lie in [0, {EXAMPLE1_MAX_TAU}]")));
    }
    let predicted = [[0.5, 0.4, 0.05, 0.05], [0.3, 0.4, 0.2, 0.1], [0.3, 0.3, 0.35, 0.05]];
    let truth = [
        [0.5, 0.4 - tau, 0.05, 0.05 + tau],
        [0.3 - tau, 0.4 + tau, 0.2, 0.1],
        [0.3 + tau, 0.3, 0.35, 0.05 - tau],
    ];
    PiecewiseDistributionModel::new(
        predicted
            .iter()
            .zip(&truth)
            .map(|(p, t)| ModelRegion {
                mass: 1.0 / 3.0,
                truth: t.to_vec(),
                predicted: p.to_vec(),
            })
            .collect(),
    )
}

/// Population limit of pairwise binning of one-hot labels with a uniform
/// true posterior over `k` balanced classes: a pair of classes (a, b) occurs
/// with mass 2/k² and predicts (e_a + e_b)/2, a repeated class with mass 1/k²
/// and predicts e_a.
pub fn example3_population_model(k: usize) -> Result<PiecewiseDistributionModel> {
    if k < 2 {
        return Err(Error::Parameter("need at least two classes".into()));
    }
    let kf = k as f64;
    let truth = vec![1.0 / kf; k];
    let mut regions = Vec::new();
    for a in 0..k {
        for b in a..k {
            let mut predicted = vec![0.0; k];
            predicted[a] += 0.5;
            predicted[b] += 0.5;
            let mass = if a == b { 1.0 } else { 2.0 } / (kf * kf);
            regions.push(ModelRegion {
                mass,
                truth: truth.clone(),
                predicted,
            });
        }
    }
    PiecewiseDistributionModel::new(regions)
}

/// One row of a bin-count sweep; `bins` is `None` for exact-value regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub bins: Option<usize>,
    pub ace: f64,
    pub ece: f64,
}

pub const SWEEP_CSV_HEADER: &str = "bins,ace,ece";

/// ACE and ECE for each scheme.
pub fn epsilon_sweep(
    probs: ArrayView2<'_, f64>,
    targets: Targets<'_>,
    masses: Option<&[f64]>,
    schemes: &[BinningScheme],
) -> Vec<SweepRow> {
    schemes
        .iter()
        .map(|&scheme| {
            let e = calibration_errors(probs, targets, masses, scheme);
            SweepRow {
                bins: scheme.bin_count(),
                ace: e.ace,
                ece: e.ece,
            }
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let bins = r.bins.map_or_else(|| "exact".to_string(), |b| b.to_string());
        out.push_str(&format!("{bins},{},{}\n", r.ace, r.ece));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    PreconditionUnmet,
    /// The data hold no counterexample; only meaningful for non-implications.
    NoWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub proposition: u8,
    pub status: VerdictStatus,
    pub message: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub tolerance: f64,
    pub verdicts: Vec<Verdict>,
    /// No verdict failed.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub propositions: Vec<u8>,
    pub tolerance: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            propositions: vec![1, 2, 3, 4],
            tolerance: 1e-9,
        }
    }
}

struct Harness<'a> {
    ens: &'a EnsemblePredictions,
    weights: &'a [f64],
    combined: LabeledPredictionSet,
    truth: Option<ArrayView2<'a, f64>>,
    tol: f64,
}

fn verdict(proposition: u8, status: VerdictStatus, message: impl Into<String>, values: &[(&str, f64)]) -> Verdict {
    Verdict {
        proposition,
        status,
        message: message.into(),
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

impl Harness<'_> {
    fn targets(&self) -> Targets<'_> {
        match self.truth {
            Some(t) => Targets::Distribution(t),
            None => Targets::Labels(self.ens.labels()),
        }
    }

    fn member_gaps(&self) -> Vec<crate::metrics::GlobalGaps> {
        self.ens
            .members()
            .iter()
            .map(|m| global_gaps_against(m.probs(), self.targets()))
            .collect()
    }

    fn mean_accuracy(&self) -> f64 {
        self.ens
            .members()
            .iter()
            .zip(self.weights)
            .map(|(m, w)| w * accuracy_against(m.probs(), self.targets()))
            .sum()
    }

    fn p1(&self) -> Verdict {
        let members = self.member_gaps();
        let ensemble = global_gaps_against(self.combined.probs(), self.targets());
        let worst = members.iter().map(|g| g.top_label.abs()).fold(0.0, f64::max);
        let ens_acc = accuracy_against(self.combined.probs(), self.targets());
        let mem_acc = self.mean_accuracy();
        let values = [
            ("ensemble_accuracy", ens_acc),
            ("member_accuracy", mem_acc),
            ("ensemble_top_label_gap", ensemble.top_label),
            ("max_member_top_label_gap", worst),
        ];
        if worst > self.tol || ensemble.top_label.abs() > self.tol {
            return verdict(
                1,
                VerdictStatus::PreconditionUnmet,
                "members or ensemble not globally top-label calibrated",
                &values,
            );
        }
        if ens_acc <= mem_acc + self.tol {
            verdict(
                1,
                VerdictStatus::Pass,
                "ensemble accuracy does not exceed the mean member accuracy",
                &values,
            )
        } else {
            verdict(
                1,
                VerdictStatus::Fail,
                "ensemble accuracy exceeds the mean member accuracy",
                &values,
            )
        }
    }

    fn p2(&self) -> Verdict {
        let members = self.member_gaps();
        let ensemble = global_gaps_against(self.combined.probs(), self.targets());
        let k = self.ens.k();
        let mut residual: f64 = 0.0;
        for j in 0..k {
            let mix: f64 = members.iter().zip(self.weights).map(|(g, w)| w * g.all_label[j]).sum();
            residual = residual.max((ensemble.all_label[j] - mix).abs());
        }
        let max_member = members
            .iter()
            .flat_map(|g| g.all_label.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let max_ensemble = ensemble.all_label.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let calibrated = max_member <= self.tol;
        let values = [
            ("linearity_residual", residual),
            ("max_member_gap", max_member),
            ("max_ensemble_gap", max_ensemble),
            ("members_calibrated", calibrated as u8 as f64),
        ];
        if residual > LINEARITY_TOLERANCE {
            return verdict(
                2,
                VerdictStatus::Fail,
                "ensemble gap is not the weighted mean of member gaps",
                &values,
            );
        }
        if calibrated && max_ensemble > self.tol + LINEARITY_TOLERANCE {
            return verdict(
                2,
                VerdictStatus::Fail,
                "calibrated members give an uncalibrated ensemble",
                &values,
            );
        }
        verdict(
            2,
            VerdictStatus::Pass,
            "ensemble gap equals the weighted mean of member gaps",
            &values,
        )
    }

    /// Group id per sample and class when every member induces the same
    /// exact-value partition, `None` otherwise.
    fn shared_partition(&self) -> Option<Vec<Vec<u32>>> {
        let members = self.ens.members();
        let (n, k) = (self.ens.n(), self.ens.k());
        let mut groups = vec![vec![0u32; n]; k];
        for (j, ids) in groups.iter_mut().enumerate() {
            let mut first: HashMap<u64, u32> = HashMap::new();
            for (i, id) in ids.iter_mut().enumerate() {
                let next = first.len() as u32;
                *id = *first.entry(exact_key(members[0].row(i)[j])).or_insert(next);
            }
            for member in &members[1..] {
                let mut forward: HashMap<u32, u64> = HashMap::new();
                let mut backward: HashMap<u64, u32> = HashMap::new();
                for (i, &id) in ids.iter().enumerate() {
                    let key = exact_key(member.row(i)[j]);
                    if *forward.entry(id).or_insert(key) != key || *backward.entry(key).or_insert(id) != id {
                        return None;
                    }
                }
            }
        }
        Some(groups)
    }

    fn p3(&self) -> Verdict {
        let Some(groups) = self.shared_partition() else {
            return verdict(
                3,
                VerdictStatus::PreconditionUnmet,
                "members do not share exact-value regions",
                &[],
            );
        };
        let targets = self.targets();
        let (n, k) = (self.ens.n(), self.ens.k());
        let nf = n as f64;
        let (mut residual, mut max_member, mut max_ensemble, mut regions) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        let target = |i: usize, j: usize| match targets {
            Targets::Labels(y) => (y[i] == j) as u8 as f64,
            Targets::Distribution(t) => t[[i, j]],
        };
        for (j, ids) in groups.iter().enumerate().take(k) {
            let count = ids.iter().copied().max().map_or(0, |m| m as usize + 1);
            regions += count;
            let mut member_gaps = vec![vec![0.0; count]; self.ens.len()];
            let mut ensemble_gaps = vec![0.0; count];
            for (i, &id) in ids.iter().enumerate() {
                let t = target(i, j);
                for (g, member) in member_gaps.iter_mut().zip(self.ens.members()) {
                    g[id as usize] += member.row(i)[j] - t;
                }
                ensemble_gaps[id as usize] += self.combined.row(i)[j] - t;
            }
            for (r, e) in ensemble_gaps.iter().enumerate() {
                let mix: f64 = member_gaps.iter().zip(self.weights).map(|(g, w)| w * g[r]).sum();
                residual = residual.max((e - mix).abs() / nf);
                max_ensemble = max_ensemble.max(e.abs() / nf);
                for g in &member_gaps {
                    max_member = max_member.max(g[r].abs() / nf);
                }
            }
        }
        let values = [
            ("regions", regions as f64),
            ("linearity_residual", residual),
            ("max_member_region_gap", max_member),
            ("max_ensemble_region_gap", max_ensemble),
        ];
        if residual > LINEARITY_TOLERANCE {
            return verdict(
                3,
                VerdictStatus::Fail,
                "region gaps are not the weighted mean of member gaps",
                &values,
            );
        }
        if max_member <= self.tol && max_ensemble > self.tol + LINEARITY_TOLERANCE {
            return verdict(
                3,
                VerdictStatus::Fail,
                "calibrated members give uncalibrated shared regions",
                &values,
            );
        }
        verdict(
            3,
            VerdictStatus::Pass,
            "region gaps are the weighted mean of member gaps",
            &values,
        )
    }

    fn p4(&self) -> Verdict {
        let members = self.member_gaps();
        let ensemble = global_gaps_against(self.combined.probs(), self.targets());
        let worst = members.iter().map(|g| g.top_label.abs()).fold(0.0, f64::max);
        let values = [
            ("ensemble_top_label_gap", ensemble.top_label),
            ("max_member_top_label_gap", worst),
        ];
        if worst > self.tol {
            return verdict(
                4,
                VerdictStatus::PreconditionUnmet,
                "members not globally top-label calibrated",
                &values,
            );
        }
        if ensemble.top_label.abs() > self.tol {
            let direction = if ensemble.top_label < 0.0 { "under" } else { "over" };
            verdict(
                4,
                VerdictStatus::Pass,
                format!("calibrated members, {direction}-confident ensemble"),
                &values,
            )
        } else {
            verdict(
                4,
                VerdictStatus::NoWitness,
                "ensemble is also globally top-label calibrated",
                &values,
            )
        }
    }
}

/// Checks the ensemble calibration propositions on concrete data. Gaps are
/// measured against `truth` rows when given, against the labels otherwise.
pub fn verify_propositions(
    ens: &EnsemblePredictions,
    w: &CombinationWeights,
    truth: Option<ArrayView2<'_, f64>>,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    if let Some(p) = options.propositions.iter().find(|p| !(1..=4).contains(*p)) {
        return Err(Error::Parameter(format!("unknown proposition {p}")));
    }
    if !(options.tolerance >= 0.0) {
        return Err(Error::Parameter("tolerance must be non-negative".into()));
    }
    if let Some(t) = truth {
        if t.dim() != (ens.n(), ens.k()) {
            return Err(Error::Shape(format!(
                "truth is {}x{}, ensemble is {}x{}",
                t.nrows(),
                t.ncols(),
                ens.n(),
                ens.k()
            )));
        }
    }
    let harness = Harness {
        ens,
        weights: w.as_slice(),
        combined: combine(ens, w)?,
        truth,
        tol: options.tolerance,
    };
    let mut props = options.propositions.clone();
    props.sort_unstable();
    props.dedup();
    let verdicts: Vec<Verdict> = props
        .iter()
        .map(|p| match p {
            1 => harness.p1(),
            2 => harness.p2(),
            3 => harness.p3(),
            _ => harness.p4(),
        })
        .collect();
    let passed = verdicts.iter().all(|v| v.status != VerdictStatus::Fail);
    Ok(VerificationReport {
        tolerance: options.tolerance,
        verdicts,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::global_gaps;

    fn small(seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            samples: 2_000,
            seed,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn truth_rows_are_on_simplex_and_reproducible() {
        let a = sample_dirichlet_truth(&small(3)).unwrap();
        for row in a.distribution.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, sample_dirichlet_truth(&small(3)).unwrap());
        assert_ne!(a, sample_dirichlet_truth(&small(4)).unwrap());
    }

    #[test]
    fn members_are_calibrated_against_truth() {
        let cfg = SynthesisConfig { members: 3, ..small(1) };
        let truth = sample_dirichlet_truth(&cfg).unwrap();
        let ens = gen_calibrated_members(&truth, &cfg).unwrap();
        for m in ens.members() {
            let t = Targets::Distribution(truth.distribution.view());
            assert!(global_gaps_against(m.probs(), t)
                .all_label
                .iter()
                .all(|g| g.abs() < 1e-12));
            for r in region_gaps(m.probs(), t, None, false) {
                assert!(r.gap.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_sample_count_keeps_short_bin() {
        let cfg = SynthesisConfig {
            samples: 7,
            members: 1,
            bin_size: 3,
            ..small(2)
        };
        let truth = sample_dirichlet_truth(&cfg).unwrap();
        let ens = gen_calibrated_members(&truth, &cfg).unwrap();
        let t = Targets::Distribution(truth.distribution.view());
        assert!(global_gaps_against(ens.members()[0].probs(), t)
            .all_label
            .iter()
            .all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn binned_predictions_have_half_steps() {
        let labels = balanced_labels(1000, 4, 9);
        let cfg = SynthesisConfig {
            samples: 1000,
            ..small(9)
        };
        let out = gen_binned_predictions(&labels, &cfg).unwrap();
        assert!(!out.unequal_class_counts);
        assert!(out.predictions.probs().iter().all(|p| [0.0, 0.5, 1.0].contains(p)));
        let g = global_gaps(&out.predictions);
        assert!(g.all_label.iter().all(|v| *v == 0.0));
        assert!(gen_binned_predictions(&[0, 0, 1], &cfg).unwrap().unequal_class_counts);
        assert!(gen_binned_predictions(&[0, 7], &cfg).is_err());
    }

    #[test]
    fn example1_rows_and_gaps() {
        assert!(example1_model(0.06).is_err());
        assert!(example1_model(-0.01).is_err());
        let m = example1_model(0.05).unwrap();
        let e = dist_calibration_errors(&m, BinningScheme::ExactValue);
        assert!(e.ace.abs() < 1e-12 && e.acce.abs() < 1e-12);
        let top = dist_region_gaps(&m, true);
        let cell = top.iter().find(|g| g.class == 1 && g.value == 0.4).unwrap();
        assert!((cell.gap + 0.05 / 3.0).abs() < 1e-12);
        let zero = dist_calibration_errors(&example1_model(0.0).unwrap(), BinningScheme::ExactValue);
        assert_eq!((zero.ace, zero.acce, zero.ece, zero.ecce), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn example3_population_ace() {
        let m = example3_population_model(4).unwrap();
        let e = dist_calibration_errors(&m, BinningScheme::ExactValue);
        assert!((e.ace - 9.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn model_validation() {
        let region = |mass: f64, p: Vec<f64>| ModelRegion {
            mass,
            truth: vec![0.5, 0.5],
            predicted: p,
        };
        assert!(PiecewiseDistributionModel::new(vec![]).is_err());
        assert!(PiecewiseDistributionModel::new(vec![region(0.5, vec![0.5, 0.5])]).is_err());
        assert!(PiecewiseDistributionModel::new(vec![region(1.0, vec![0.6, 0.5])]).is_err());
        assert!(PiecewiseDistributionModel::new(vec![region(1.0, vec![0.6, 0.3, 0.1])]).is_err());
        assert!(PiecewiseDistributionModel::new(vec![region(1.0, vec![0.6, 0.4])]).is_ok());
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = [
            SweepRow {
                bins: Some(1),
                ace: 0.0,
                ece: 0.125,
            },
            SweepRow {
                bins: None,
                ace: 0.5,
                ece: 0.25,
            },
        ];
        assert_eq!(sweep_csv(&rows), "bins,ace,ece\n1,0,0.125\nexact,0.5,0.25\n");
    }

    #[test]
    fn verify_rejects_unknown_proposition() {
        let cfg = SynthesisConfig { members: 2, ..small(5) };
        let truth = sample_dirichlet_truth(&cfg).unwrap();
        let ens = gen_calibrated_members(&truth, &cfg).unwrap();
        let opts = VerifyOptions {
            propositions: vec![5],
            ..VerifyOptions::default()
        };
        assert!(verify_propositions(&ens, &CombinationWeights::uniform(2), None, &opts).is_err());
    }

    #[test]
    fn algorithm1_witness() {
        let cfg = SynthesisConfig {
            samples: 20_000,
            ..small(6)
        };
        let truth = sample_dirichlet_truth(&cfg).unwrap();
        let ens = gen_calibrated_members(&truth, &cfg).unwrap();
        let report = verify_propositions(
            &ens,
            &CombinationWeights::uniform(cfg.members),
            Some(truth.distribution.view()),
            &VerifyOptions::default(),
        )
        .unwrap();
        let status: Vec<_> = report.verdicts.iter().map(|v| v.status).collect();
        assert_eq!(status[1], VerdictStatus::Pass);
        assert_eq!(status[2], VerdictStatus::PreconditionUnmet);
        assert_eq!(status[3], VerdictStatus::Pass);
        assert!(report.verdicts[3].values["ensemble_top_label_gap"] < 0.0);
        assert!(report.passed);
    }

    #[test]
    fn identical_members_satisfy_everything() {
        let cfg = SynthesisConfig { members: 1, ..small(7) };
        let truth = sample_dirichlet_truth(&cfg).unwrap();
        let member = gen_calibrated_members(&truth, &cfg).unwrap().into_members().remove(0);
        let ens = Ensemble::new(vec![member.clone(), member.clone(), member]).unwrap();
        let report = verify_propositions(
            &ens,
            &CombinationWeights::uniform(3),
            Some(truth.distribution.view()),
            &VerifyOptions::default(),
        )
        .unwrap();
        let status: Vec<_> = report.verdicts.iter().map(|v| v.status).collect();
        assert_eq!(
            status,
            vec![
                VerdictStatus::Pass,
                VerdictStatus::Pass,
                VerdictStatus::Pass,
                VerdictStatus::NoWitness
            ]
        );
        let v = &report.verdicts[0].values;
        assert!((v["ensemble_accuracy"] - v["member_accuracy"]).abs() < 1e-12);
    }
}
