//! Temperature scaling: global, per-member and region-dynamic.
//!
//! A temperature `t > 0` maps logits `z` to `softmax(z / t)`. Scaling never
//! changes a row's argmax, so only the top-label confidence moves with `t`,
//! and ECE can be evaluated from one `exp` sweep per row without building
//! the scaled matrix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    argmax, exact_key, map_rows, scaled_softmax_into, BinningScheme, LabeledPredictionSet, LogitSet, SampleSet,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::par;

/// A fitted calibration map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelJson", into = "ModelJson")]
pub enum TemperatureModel {
    Global(f64),
    PerMember(Vec<f64>),
    /// Regions are `[0, b₁), [b₁, b₂), …, [b_{R-1}, 1]` over the temperature-1
    /// top-label probability.
    Regional {
        boundaries: Vec<f64>,
        temps: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    variant: String,
    temps: Vec<f64>,
    #[serde(default)]
    boundaries: Vec<f64>,
}

impl From<TemperatureModel> for ModelJson {
    fn from(m: TemperatureModel) -> Self {
        let (variant, temps, boundaries) = match m {
            TemperatureModel::Global(t) => ("global", vec![t], vec![]),
            TemperatureModel::PerMember(ts) => ("per_member", ts, vec![]),
            TemperatureModel::Regional { boundaries, temps } => ("regional", temps, boundaries),
        };
        ModelJson {
            variant: variant.into(),
            temps,
            boundaries,
        }
    }
}

impl TryFrom<ModelJson> for TemperatureModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        let model = match j.variant.as_str() {
            "global" if j.temps.len() == 1 && j.boundaries.is_empty() => TemperatureModel::Global(j.temps[0]),
            "per_member" if j.boundaries.is_empty() => TemperatureModel::PerMember(j.temps),
            "regional" => TemperatureModel::Regional {
                boundaries: j.boundaries,
                temps: j.temps,
            },
            other => {
                return Err(Error::Parameter(format!(
                    "cannot read a '{other}' temperature model with {} temps and {} boundaries",
                    j.temps.len(),
                    j.boundaries.len()
                )))
            }
        };
        model.validate()?;
        Ok(model)
    }
}

impl TemperatureModel {
    pub fn validate(&self) -> Result<()> {
        let temps = match self {
            TemperatureModel::Global(t) => std::slice::from_ref(t),
            TemperatureModel::PerMember(ts) => ts.as_slice(),
            TemperatureModel::Regional { boundaries, temps } => {
                check_boundaries(boundaries)?;
                if temps.len() != boundaries.len() + 1 {
                    return Err(Error::Parameter(format!(
                        "{} boundaries need {} temperatures, got {}",
                        boundaries.len(),
                        boundaries.len() + 1,
                        temps.len()
                    )));
                }
                temps.as_slice()
            }
        };
        if temps.is_empty() {
            return Err(Error::Parameter(
                "a temperature model needs at least one temperature".into(),
            ));
        }
        for &t in temps {
            check_temperature(t)?;
        }
        Ok(())
    }

    pub fn temps(&self) -> &[f64] {
        match self {
            TemperatureModel::Global(t) => std::slice::from_ref(t),
            TemperatureModel::PerMember(ts) => ts,
            TemperatureModel::Regional { temps, .. } => temps,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            TemperatureModel::Global(_) => "global",
            TemperatureModel::PerMember(_) => "per_member",
            TemperatureModel::Regional { .. } => "regional",
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )))
    }
}

fn check_boundaries(b: &[f64]) -> Result<()> {
    if b.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Parameter(
            "region boundaries must lie strictly inside (0, 1)".into(),
        ));
    }
    if b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("region boundaries must be strictly ascending".into()));
    }
    Ok(())
}

/// Largest softmax probability of a logit row at temperature 1.
pub fn max_softmax(z: &[f64]) -> f64 {
    confidence_at(z, z.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0)
}

#[inline]
fn confidence_at(z: &[f64], max: f64, t: f64) -> f64 {
    1.0 / z.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>()
}

/// Region index of a temperature-1 confidence: left-closed intervals.
pub fn region_of(boundaries: &[f64], confidence: f64) -> usize {
    boundaries.partition_point(|&b| b <= confidence)
}

/// softmax(z / t) for every row.
pub fn scale(logits: &LogitSet, t: f64) -> Result<LabeledPredictionSet> {
    check_temperature(t)?;
    let (n, k) = (logits.n(), logits.k());
    let probs = map_rows(n, k, |i, out| scaled_softmax_into(logits.row(i), t, out));
    Ok(LabeledPredictionSet::from_parts(probs, logits.labels().to_vec()))
}

/// Region-dynamic scaling. Each row's region is fixed from its unscaled
/// confidence before its region temperature is applied.
pub fn scale_dynamic(logits: &LogitSet, model: &TemperatureModel) -> Result<LabeledPredictionSet> {
    let TemperatureModel::Regional { boundaries, temps } = model else {
        return Err(Error::Parameter("dynamic scaling needs a regional model".into()));
    };
    model.validate()?;
    let (n, k) = (logits.n(), logits.k());
    let probs = map_rows(n, k, |i, out| {
        let z = logits.row(i);
        let r = region_of(boundaries, max_softmax(z));
        scaled_softmax_into(z, temps[r], out);
    });
    Ok(LabeledPredictionSet::from_parts(probs, logits.labels().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Log-spaced grid scan, then golden-section refinement.
    GridRefine,
    /// Subgradient descent on ECE with bin assignments held fixed per step.
    Sgd { learning_rate: f64, iterations: usize },
}

impl Optimizer {
    pub const DEFAULT_SGD: Optimizer = Optimizer::Sgd {
        learning_rate: 0.1,
        iterations: 400,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub t_min: f64,
    pub t_max: f64,
    pub grid_points: usize,
    /// Golden-section refinement stops below this bracket width.
    pub refine_width: f64,
    pub scheme: BinningScheme,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::GridRefine,
            t_min: 0.05,
            t_max: 10.0,
            grid_points: 200,
            refine_width: 1e-4,
            scheme: BinningScheme::default(),
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min <= 1.0 && self.t_max >= 1.0 && self.t_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "search range [{}, {}] must be positive and contain 1",
                self.t_min, self.t_max
            )));
        }
        if self.grid_points < 2 || !(self.refine_width > 0.0) {
            return Err(Error::Parameter(
                "grid needs at least two points and a positive refine width".into(),
            ));
        }
        if let Optimizer::Sgd { learning_rate, .. } = self.optimizer {
            if !(learning_rate > 0.0) {
                return Err(Error::Parameter("learning rate must be positive".into()));
            }
        }
        Ok(())
    }

    fn grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.t_min.ln(), self.t_max.ln());
        let steps = (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|g| (lo + (hi - lo) * g as f64 / steps).exp())
            .collect()
    }
}

/// Signed top-label sums per bin.
#[derive(Debug, Clone)]
enum BinSums {
    Dense(Vec<f64>),
    Sparse(BTreeMap<u64, f64>),
}

impl BinSums {
    fn new(scheme: BinningScheme) -> Self {
        match scheme {
            BinningScheme::FixedWidth { bins } => BinSums::Dense(vec![0.0; bins]),
            BinningScheme::ExactValue => BinSums::Sparse(BTreeMap::new()),
        }
    }

    #[inline]
    fn add(&mut self, conf: f64, v: f64) {
        match self {
            BinSums::Dense(s) => {
                let z = BinningScheme::fixed_bin(s.len(), conf);
                s[z] += v;
            }
            BinSums::Sparse(m) => *m.entry(exact_key(conf)).or_insert(0.0) += v,
        }
    }

    fn merge(&mut self, other: &BinSums) {
        match (self, other) {
            (BinSums::Dense(a), BinSums::Dense(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (BinSums::Sparse(a), BinSums::Sparse(b)) => {
                for (k, v) in b {
                    *a.entry(*k).or_insert(0.0) += v;
                }
            }
            _ => unreachable!("mixed binning schemes"),
        }
    }

    fn abs_total(&self) -> f64 {
        match self {
            BinSums::Dense(s) => s.iter().map(|v| v.abs()).sum(),
            BinSums::Sparse(m) => m.values().map(|v| v.abs()).sum(),
        }
    }
}

/// ECE of temperature-scaled logits as a function of the temperature.
struct EceObjective<'a> {
    logits: &'a LogitSet,
    maxes: Vec<f64>,
    hits: Vec<f64>,
    scheme: BinningScheme,
}

impl<'a> EceObjective<'a> {
    fn new(logits: &'a LogitSet, scheme: BinningScheme) -> Self {
        let labels = logits.labels();
        let (maxes, hits) = (0..logits.n())
            .map(|i| {
                let z = logits.row(i);
                let a = argmax(z);
                (z[a], (labels[i] == a) as u8 as f64)
            })
            .unzip();
        Self {
            logits,
            maxes,
            hits,
            scheme,
        }
    }

    fn n(&self) -> usize {
        self.maxes.len()
    }

    fn confidence(&self, i: usize, t: f64) -> f64 {
        confidence_at(self.logits.row(i), self.maxes[i], t)
    }

    /// Bin sums of (confidence − hit) over `rows` at temperature `t`.
    fn sums(&self, rows: &[usize], t: f64) -> BinSums {
        let parts = par::map_chunks(rows.len(), par::ROW_CHUNK, |range| {
            let mut s = BinSums::new(self.scheme);
            for &i in &rows[range] {
                let c = self.confidence(i, t);
                s.add(c, c - self.hits[i]);
            }
            s
        });
        let mut total = BinSums::new(self.scheme);
        for p in &parts {
            total.merge(p);
        }
        total
    }

    fn ece_with_base(&self, base: &BinSums, rows: &[usize], t: f64) -> f64 {
        let mut s = base.clone();
        s.merge(&self.sums(rows, t));
        s.abs_total() / self.n() as f64
    }
}

/// Keeps the lower value; on exact ties prefers the temperature closer to 1.
fn better(candidate: (f64, f64), incumbent: (f64, f64)) -> bool {
    let (t, v) = candidate;
    let (t0, v0) = incumbent;
    v < v0 || (v == v0 && t.ln().abs() < t0.ln().abs())
}

/// Deterministic grid scan plus golden-section refinement of `f` over
/// temperatures. Returns (t, f(t)).
fn grid_refine<F>(f: F, config: &FitConfig) -> (f64, f64)
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    let grid = config.grid();
    let values = par::map_indices(grid.len(), |g| f(grid[g]));
    let mut best = (grid[0], values[0]);
    for (&t, &v) in grid.iter().zip(&values).skip(1) {
        if better((t, v), best) {
            best = (t, v);
        }
    }

    // Refine around the strongest local minima of the scan.
    let mut minima: Vec<usize> = (0..grid.len())
        .filter(|&g| (g == 0 || values[g] <= values[g - 1]) && (g + 1 == grid.len() || values[g] <= values[g + 1]))
        .collect();
    minima.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    minima.truncate(3);

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    for g in minima {
        let mut lo = grid[g.saturating_sub(1)].ln();
        let mut hi = grid[(g + 1).min(grid.len() - 1)].ln();
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = f(x1.exp());
        let mut f2 = f(x2.exp());
        for (x, v) in [(x1, f1), (x2, f2)] {
            if better((x.exp(), v), best) {
                best = (x.exp(), v);
            }
        }
        while hi.exp() - lo.exp() > config.refine_width {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = f(x1.exp());
                if better((x1.exp(), f1), best) {
                    best = (x1.exp(), f1);
                }
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = f(x2.exp());
                if better((x2.exp(), f2), best) {
                    best = (x2.exp(), f2);
                }
            }
        }
    }

    let at_one = f(1.0);
    if at_one <= best.1 {
        (1.0, at_one)
    } else {
        best
    }
}

/// Subgradient descent with bin assignments frozen at each step.
fn sgd(obj: &EceObjective<'_>, rows: &[usize], config: &FitConfig, learning_rate: f64, iterations: usize) -> f64 {
    let n = obj.n() as f64;
    let mut t = 1.0;
    for _ in 0..iterations {
        let parts = par::map_chunks(rows.len(), par::ROW_CHUNK, |range| {
            let mut s = BinSums::new(obj.scheme);
            let mut d = BinSums::new(obj.scheme);
            for &i in &rows[range] {
                let z = obj.logits.row(i);
                let max = obj.maxes[i];
                let (mut total, mut dtotal) = (0.0, 0.0);
                for &v in z {
                    let shifted = v - max;
                    let e = (shifted / t).exp();
                    total += e;
                    dtotal += e * (-shifted / (t * t));
                }
                let c = 1.0 / total;
                s.add(c, c - obj.hits[i]);
                d.add(c, -dtotal / (total * total));
            }
            (s, d)
        });
        let mut s = BinSums::new(obj.scheme);
        let mut d = BinSums::new(obj.scheme);
        for (ps, pd) in &parts {
            s.merge(ps);
            d.merge(pd);
        }
        let grad = match (&s, &d) {
            (BinSums::Dense(s), BinSums::Dense(d)) => s.iter().zip(d).map(|(a, b)| a.signum() * b).sum::<f64>(),
            (BinSums::Sparse(s), BinSums::Sparse(d)) => s.iter().map(|(k, a)| a.signum() * d[k]).sum::<f64>(),
            _ => unreachable!(),
        } / n;
        t = (t - learning_rate * grad).clamp(config.t_min, config.t_max);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub t: f64,
    /// ECE after scaling by `t`.
    pub ece: f64,
    /// ECE of the unscaled logits.
    pub ece_at_one: f64,
}

/// Fits one temperature minimising ECE.
pub fn fit_temperature(logits: &LogitSet, config: &FitConfig) -> Result<TemperatureFit> {
    config.validate()?;
    let obj = EceObjective::new(logits, config.scheme);
    let rows: Vec<usize> = (0..obj.n()).collect();
    let empty = BinSums::new(config.scheme);
    let t = match config.optimizer {
        Optimizer::GridRefine => grid_refine(|t| obj.ece_with_base(&empty, &rows, t), config).0,
        Optimizer::Sgd {
            learning_rate,
            iterations,
        } => sgd(&obj, &rows, config, learning_rate, iterations),
    };
    Ok(TemperatureFit {
        t,
        ece: metrics::ece(&scale(logits, t)?, config.scheme),
        ece_at_one: metrics::ece(&crate::data::softmax(logits), config.scheme),
    })
}

/// Where regional boundaries come from.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionBoundaries {
    /// Equal-mass quantiles of the temperature-1 confidences.
    Quantile,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicFit {
    pub model: TemperatureModel,
    pub ece: f64,
    pub global: TemperatureFit,
    pub region_counts: Vec<usize>,
}

/// Sweeps of block-coordinate descent over region temperatures.
pub const DYNAMIC_SWEEPS: usize = 3;

/// Equal-mass cut points; duplicates and values outside (0, 1) are dropped.
pub fn quantile_boundaries(confidences: &[f64], regions: usize) -> Vec<f64> {
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(regions.saturating_sub(1));
    for r in 1..regions {
        let q = sorted[(r * n / regions).min(n - 1)];
        if q > 0.0 && q < 1.0 && cuts.last().is_none_or(|&last| q > last) {
            cuts.push(q);
        }
    }
    cuts
}

/// Fits region-specific temperatures.
///
/// Starts every region at the global fit, then for [`DYNAMIC_SWEEPS`] sweeps
/// re-fits each region's temperature by grid refinement of the total ECE
/// with the other regions held fixed. A region's temperature only changes
/// when the ECE strictly drops. Regions without samples inherit their left
/// neighbour's temperature (the leftmost inherits the global fit).
pub fn fit_dynamic(
    logits: &LogitSet,
    regions: usize,
    boundaries: RegionBoundaries,
    config: &FitConfig,
) -> Result<DynamicFit> {
    if regions == 0 {
        return Err(Error::Parameter("region count must be at least 1".into()));
    }
    let global = fit_temperature(logits, config)?;
    let confidences: Vec<f64> = (0..logits.n()).map(|i| max_softmax(logits.row(i))).collect();
    let cuts = match boundaries {
        RegionBoundaries::Quantile => quantile_boundaries(&confidences, regions),
        RegionBoundaries::Fixed(b) => {
            check_boundaries(&b)?;
            b
        }
    };
    let r_count = cuts.len() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); r_count];
    for (i, &c) in confidences.iter().enumerate() {
        members[region_of(&cuts, c)].push(i);
    }

    let obj = EceObjective::new(logits, config.scheme);
    let mut temps = vec![global.t; r_count];
    let mut cached: Vec<BinSums> = members.iter().map(|rows| obj.sums(rows, global.t)).collect();
    let grid_config = FitConfig {
        optimizer: Optimizer::GridRefine,
        ..*config
    };
    for _ in 0..DYNAMIC_SWEEPS {
        for r in 0..r_count {
            if members[r].is_empty() {
                continue;
            }
            let mut base = BinSums::new(config.scheme);
            for (other, sums) in cached.iter().enumerate() {
                if other != r {
                    base.merge(sums);
                }
            }
            let current = obj.ece_with_base(&base, &members[r], temps[r]);
            let (t, value) = grid_refine(|t| obj.ece_with_base(&base, &members[r], t), &grid_config);
            if value < current {
                temps[r] = t;
                cached[r] = obj.sums(&members[r], t);
            }
        }
    }
    for r in 0..r_count {
        if members[r].is_empty() {
            temps[r] = if r == 0 { global.t } else { temps[r - 1] };
        }
    }

    let model = TemperatureModel::Regional {
        boundaries: cuts,
        temps,
    };
    let ece = metrics::ece(&scale_dynamic(logits, &model)?, config.scheme);
    Ok(DynamicFit {
        model,
        ece,
        global,
        region_counts: members.iter().map(Vec::len).collect(),
    })
}
