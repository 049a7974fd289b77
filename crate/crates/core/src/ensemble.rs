//! Ensemble combination, pre-/post-combination calibration and weight
//! estimation.

use serde::{Deserialize, Serialize};

use crate::data::{
    argmax, log_probs, map_rows, Ensemble, EnsemblePredictions, LabeledPredictionSet, LogitEnsemble, SampleSet,
    DEFAULT_LOG_FLOOR,
};
use crate::error::{Error, Result};
use crate::par;
use crate::scaling::{scale, scale_dynamic, TemperatureModel};

/// Tolerance on the weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Non-negative member weights summing to one. Serialized as a JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CombinationWeights(Vec<f64>);

impl CombinationWeights {
    /// Validates and rescales so the weights sum to one exactly in the
    /// floating-point sense.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Parameter("weights need at least one member".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("weights must be finite and non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Parameter(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(members: usize) -> Self {
        Self(vec![1.0 / members as f64; members])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for CombinationWeights {
    type Error = Error;
    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<CombinationWeights> for Vec<f64> {
    fn from(w: CombinationWeights) -> Self {
        w.0
    }
}

fn check_weights<S: SampleSet>(ens: &Ensemble<S>, w: &CombinationWeights) -> Result<()> {
    if w.len() != ens.len() {
        return Err(Error::Shape(format!("{} weights for {} members", w.len(), ens.len())));
    }
    Ok(())
}

/// P(j|x;Θ) = Σ_m w_m P(j|x;θ_m), summed in member order.
pub fn combine(ens: &EnsemblePredictions, w: &CombinationWeights) -> Result<LabeledPredictionSet> {
    check_weights(ens, w)?;
    let weights = w.as_slice();
    let members = ens.members();
    let probs = map_rows(ens.n(), ens.k(), |i, out| {
        out.fill(0.0);
        for (member, &wm) in members.iter().zip(weights) {
            for (o, &p) in out.iter_mut().zip(member.row(i)) {
                *o += wm * p;
            }
        }
    });
    Ok(LabeledPredictionSet::from_parts(probs, ens.labels().to_vec()))
}

/// Scales each member by its own temperature, then combines.
pub fn calibrate_pre(
    ens: &LogitEnsemble,
    temps: &TemperatureModel,
    w: &CombinationWeights,
) -> Result<LabeledPredictionSet> {
    let TemperatureModel::PerMember(ts) = temps else {
        return Err(Error::Parameter(
            "pre-combination calibration needs per-member temperatures".into(),
        ));
    };
    temps.validate()?;
    if ts.len() != ens.len() {
        return Err(Error::Shape(format!(
            "{} temperatures for {} members",
            ts.len(),
            ens.len()
        )));
    }
    let scaled = ens
        .members()
        .iter()
        .zip(ts)
        .map(|(m, &t)| scale(m, t))
        .collect::<Result<Vec<_>>>()?;
    combine(&Ensemble::new(scaled)?, w)
}

/// Log-probabilities of the combined prediction; the logits that
/// post-combination temperatures act on.
pub fn post_logits(ens: &EnsemblePredictions, w: &CombinationWeights) -> Result<crate::data::LogitSet> {
    log_probs(&combine(ens, w)?, DEFAULT_LOG_FLOOR)
}

/// Combines first, then applies a global or regional temperature to the
/// logarithm of the combined probabilities.
pub fn calibrate_post(
    ens: &EnsemblePredictions,
    w: &CombinationWeights,
    model: &TemperatureModel,
) -> Result<LabeledPredictionSet> {
    model.validate()?;
    let z = post_logits(ens, w)?;
    match model {
        TemperatureModel::Global(t) => scale(&z, *t),
        TemperatureModel::Regional { .. } => scale_dynamic(&z, model),
        TemperatureModel::PerMember(_) => Err(Error::Parameter(
            "post-combination calibration needs a global or regional model".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxLlOptions {
    pub step: f64,
    pub max_iterations: usize,
    /// Stop once an iteration gains less than this.
    pub tolerance: f64,
    /// Starting point; uniform when `None`.
    pub init: Option<Vec<f64>>,
}

impl Default for MaxLlOptions {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_iterations: 1000,
            tolerance: 1e-10,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxLlFit {
    pub weights: CombinationWeights,
    /// Mean log-likelihood at the returned weights.
    pub objective: f64,
    /// Objective at the start and after every accepted update.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Probability floor for the likelihood of the true class.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

struct Likelihoods {
    /// Row-major N×M true-class probabilities.
    values: Vec<f64>,
    m: usize,
}

impl Likelihoods {
    fn new(ens: &EnsemblePredictions) -> Self {
        let (n, m) = (ens.n(), ens.len());
        let labels = ens.labels();
        let mut values = vec![0.0; n * m];
        let mut floored = 0usize;
        for i in 0..n {
            let mut all_zero = true;
            for (mm, member) in ens.members().iter().enumerate() {
                let p = member.row(i)[labels[i]];
                all_zero &= p <= 0.0;
                values[i * m + mm] = p.max(LIKELIHOOD_FLOOR);
            }
            floored += all_zero as usize;
        }
        if floored > 0 {
            log::warn!(
                "{floored} samples have zero true-class probability under every member; floored at {LIKELIHOOD_FLOOR}"
            );
        }
        Self { values, m }
    }

    fn n(&self) -> usize {
        self.values.len() / self.m
    }

    /// Mean log-likelihood and its gradient.
    fn evaluate(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let m = self.m;
        let parts = par::map_chunks(self.n(), par::ROW_CHUNK, |range| {
            let mut ll = 0.0;
            let mut grad = vec![0.0; m];
            for i in range {
                let row = &self.values[i * m..(i + 1) * m];
                let mix: f64 = row.iter().zip(w).map(|(p, wm)| p * wm).sum();
                ll += mix.ln();
                for (g, p) in grad.iter_mut().zip(row) {
                    *g += p / mix;
                }
            }
            (ll, grad)
        });
        let mut ll = 0.0;
        let mut grad = vec![0.0; m];
        for (l, g) in parts {
            ll += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let n = self.n() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (ll / n, grad)
    }
}

fn eg_step(w: &[f64], grad: &[f64], step: f64) -> Vec<f64> {
    let top = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut next: Vec<f64> = w
        .iter()
        .zip(grad)
        .map(|(wm, g)| wm * (step * (g - top)).exp())
        .collect();
    let z: f64 = next.iter().sum();
    next.iter_mut().for_each(|v| *v /= z);
    next
}

/// Maximises the mean log-likelihood of the combined prediction over the
/// simplex by exponentiated-gradient ascent. A step that would lower the
/// objective is halved until it does not, so the trace is non-decreasing.
pub fn fit_weights_max_ll(ens: &EnsemblePredictions, options: &MaxLlOptions) -> Result<MaxLlFit> {
    let m = ens.len();
    if !(options.step > 0.0) {
        return Err(Error::Parameter("step must be positive".into()));
    }
    let mut w = match &options.init {
        Some(init) => {
            if init.len() != m {
                return Err(Error::Shape(format!("{} initial weights for {m} members", init.len())));
            }
            CombinationWeights::new(init.clone())?.0
        }
        None => CombinationWeights::uniform(m).0,
    };
    let lik = Likelihoods::new(ens);
    let (mut objective, mut grad) = lik.evaluate(&w);
    let mut trace = vec![objective];
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let mut step = options.step;
        let accepted = loop {
            let candidate = eg_step(&w, &grad, step);
            let (value, g) = lik.evaluate(&candidate);
            if value >= objective {
                break Some((candidate, value, g));
            }
            step *= 0.5;
            if step < 1e-12 {
                break None;
            }
        };
        let Some((candidate, value, g)) = accepted else {
            break;
        };
        let gain = value - objective;
        w = candidate;
        objective = value;
        grad = g;
        trace.push(objective);
        if gain < options.tolerance {
            break;
        }
    }
    Ok(MaxLlFit {
        weights: CombinationWeights(w),
        objective,
        trace,
        iterations,
    })
}

/// Mann–Whitney AUC of `scores` for the rows flagged positive, with average
/// ranks for ties. `None` when either class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share the average 1-based rank
        let avg_rank = (start + end + 1) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| positive[i]).count();
        rank_sum_pos += avg_rank * tied_pos as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Macro-averaged one-vs-rest AUC; classes without positives or negatives
/// are skipped.
pub fn macro_auc(preds: &LabeledPredictionSet) -> Result<f64> {
    let labels = preds.labels();
    let per_class = par::map_indices(preds.k(), |j| {
        let scores: Vec<f64> = (0..preds.n()).map(|i| preds.row(i)[j]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == j).collect();
        auc(&scores, &positive)
    });
    let usable: Vec<f64> = per_class.into_iter().flatten().collect();
    if usable.is_empty() {
        return Err(Error::Validation("AUC needs at least two distinct labels".into()));
    }
    Ok(usable.iter().sum::<f64>() / usable.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucWeights {
    pub weights: CombinationWeights,
    pub aucs: Vec<f64>,
}

/// w_m = AUC_m / Σ AUC.
pub fn fit_weights_auc(ens: &EnsemblePredictions) -> Result<AucWeights> {
    let aucs = ens.members().iter().map(macro_auc).collect::<Result<Vec<_>>>()?;
    let total: f64 = aucs.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("every member has AUC 0".into()));
    }
    Ok(AucWeights {
        weights: CombinationWeights(aucs.iter().map(|a| a / total).collect()),
        aucs,
    })
}

/// Ensemble-versus-member confidence and accuracy comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceBoundReport {
    /// Mean of P(ŷ_E | x; Θ).
    pub ensemble_confidence: f64,
    /// Weighted mean over members of the mean of P(ŷ_m | x; θ_m).
    pub member_confidence: f64,
    pub confidence_bound_holds: bool,
    pub ensemble_accuracy: f64,
    /// Weighted mean of member accuracies.
    pub member_accuracy: f64,
    /// Ensemble confidence does not exceed the mean member accuracy; this
    /// bounds the ensemble when the members are top-label calibrated.
    pub ensemble_confidence_within_member_accuracy: bool,
    /// Count of (i, m) with P(ŷ_E | x_i; θ_m) > P(ŷ_m | x_i; θ_m).
    pub per_sample_violations: usize,
}

pub fn confidence_bound_report(ens: &EnsemblePredictions, w: &CombinationWeights) -> Result<ConfidenceBoundReport> {
    check_weights(ens, w)?;
    let combined = combine(ens, w)?;
    let labels = ens.labels();
    let weights = w.as_slice();
    let members = ens.members();
    // Both confidence sums run over the same members in the same order, so
    // the term-wise inequality survives rounding.
    let parts = par::map_chunks(ens.n(), par::ROW_CHUNK, |range| {
        let (mut ens_conf, mut mem_conf, mut ens_hit, mut mem_hit) = (0.0, 0.0, 0.0, 0.0);
        let mut violations = 0usize;
        for i in range {
            let e = argmax(combined.row(i));
            let (mut conf_i, mut mem_i, mut hit_i) = (0.0, 0.0, 0.0);
            for (member, &wm) in members.iter().zip(weights) {
                let row = member.row(i);
                let a = argmax(row);
                conf_i += wm * row[e];
                mem_i += wm * row[a];
                hit_i += wm * ((labels[i] == a) as u8 as f64);
                violations += (row[e] > row[a]) as usize;
            }
            ens_conf += conf_i;
            mem_conf += mem_i;
            mem_hit += hit_i;
            ens_hit += (labels[i] == e) as u8 as f64;
        }
        (ens_conf, mem_conf, ens_hit, mem_hit, violations)
    });
    let (mut ens_conf, mut mem_conf, mut ens_hit, mut mem_hit, mut violations) = (0.0, 0.0, 0.0, 0.0, 0);
    for (a, b, c, d, v) in parts {
        ens_conf += a;
        mem_conf += b;
        ens_hit += c;
        mem_hit += d;
        violations += v;
    }
    let n = ens.n() as f64;
    let (ensemble_confidence, member_confidence) = (ens_conf / n, mem_conf / n);
    let (ensemble_accuracy, member_accuracy) = (ens_hit / n, mem_hit / n);
    Ok(ConfidenceBoundReport {
        ensemble_confidence,
        member_confidence,
        confidence_bound_holds: ensemble_confidence <= member_confidence,
        ensemble_accuracy,
        member_accuracy,
        ensemble_confidence_within_member_accuracy: ensemble_confidence <= member_accuracy,
        per_sample_violations: violations,
    })
}
