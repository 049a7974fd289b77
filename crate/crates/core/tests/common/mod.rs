#![allow(dead_code)]

use enscal::{Ensemble, EnsemblePredictions, LabeledPredictionSet, LogitSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dirichlet_row<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / total).collect()
}

pub fn dirichlet_rows<R: Rng>(rng: &mut R, n: usize, k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, k));
    for mut row in out.rows_mut() {
        for (o, v) in row.iter_mut().zip(dirichlet_row(rng, k)) {
            *o = v;
        }
    }
    out
}

pub fn draw_label<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.len() - 1
}

pub fn random_simplex<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    dirichlet_row(rng, m)
}

/// Members with sharpened or flattened random rows and shared random labels.
pub fn random_ensemble<R: Rng>(rng: &mut R, m: usize, n: usize, k: usize) -> EnsemblePredictions {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let members = (0..m)
        .map(|_| {
            let sharpness = rng.random_range(0.3..4.0);
            let z = Array2::from_shape_fn((n, k), |_| sharpness * rng.sample::<f64, _>(StandardNormal));
            enscal::softmax(&LogitSet::new(z, labels.clone()).unwrap())
        })
        .collect();
    Ensemble::new(members).unwrap()
}

/// Calibrated rows turned into logits and multiplied by `c`.
pub fn scaled_calibrated_logits(seed: u64, n: usize, k: usize, c: f64) -> LogitSet {
    let mut r = rng(seed);
    let p = dirichlet_rows(&mut r, n, k);
    let labels: Vec<usize> = p
        .rows()
        .into_iter()
        .map(|row| draw_label(&mut r, row.as_slice().unwrap()))
        .collect();
    LogitSet::new(p.mapv(|v| c * v.ln()), labels).unwrap()
}

pub fn rows(set: &LabeledPredictionSet) -> Vec<Vec<f64>> {
    set.probs().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Term-by-term transcriptions of the sample-based definitions, with no
/// shared code with the library.
pub mod oracle {
    /// Regions as predicates on a probability value.
    pub enum Regions {
        Bins(usize),
        Exact(Vec<f64>),
    }

    impl Regions {
        pub fn count(&self) -> usize {
            match self {
                Regions::Bins(b) => *b,
                Regions::Exact(values) => values.len(),
            }
        }

        /// Whether `p` falls in region `z` (1-based for bins).
        pub fn contains(&self, z: usize, p: f64) -> bool {
            match self {
                Regions::Bins(b) => {
                    let b = *b as f64;
                    let zf = z as f64;
                    (z == 1 && p == 0.0) || ((zf - 1.0) / b < p && p <= zf / b)
                }
                Regions::Exact(values) => values[z - 1] == p,
            }
        }

        pub fn exact(probs: &[Vec<f64>]) -> Self {
            let mut values: Vec<f64> = Vec::new();
            for row in probs {
                for &p in row {
                    if !values.contains(&p) {
                        values.push(p);
                    }
                }
            }
            Regions::Exact(values)
        }
    }

    fn delta(y: usize, j: usize) -> f64 {
        if y == j {
            1.0
        } else {
            0.0
        }
    }

    fn top(row: &[f64]) -> usize {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }

    /// Σ_{i ∈ S_j^p} (P_ij − δ), optionally restricted to top-label regions.
    fn region_sum(probs: &[Vec<f64>], labels: &[usize], regions: &Regions, z: usize, j: usize, top_label: bool) -> f64 {
        let mut s = 0.0;
        for i in 0..probs.len() {
            if top_label && top(&probs[i]) != j {
                continue;
            }
            if regions.contains(z, probs[i][j]) {
                s += probs[i][j] - delta(labels[i], j);
            }
        }
        s
    }

    fn outer(probs: &[Vec<f64>], labels: &[usize], regions: &Regions, top_label: bool) -> f64 {
        let k = probs[0].len();
        let mut total = 0.0;
        for z in 1..=regions.count() {
            let mut inner = 0.0;
            for j in 0..k {
                inner += region_sum(probs, labels, regions, z, j, top_label);
            }
            total += inner.abs();
        }
        total
    }

    fn inner(probs: &[Vec<f64>], labels: &[usize], regions: &Regions, top_label: bool) -> f64 {
        let k = probs[0].len();
        let mut total = 0.0;
        for z in 1..=regions.count() {
            for j in 0..k {
                total += region_sum(probs, labels, regions, z, j, top_label).abs();
            }
        }
        total
    }

    pub fn ace(probs: &[Vec<f64>], labels: &[usize], regions: &Regions) -> f64 {
        let (n, k) = (probs.len() as f64, probs[0].len() as f64);
        outer(probs, labels, regions, false) / (n * k)
    }

    pub fn acce(probs: &[Vec<f64>], labels: &[usize], regions: &Regions) -> f64 {
        let (n, k) = (probs.len() as f64, probs[0].len() as f64);
        inner(probs, labels, regions, false) / (n * k)
    }

    pub fn ece(probs: &[Vec<f64>], labels: &[usize], regions: &Regions) -> f64 {
        outer(probs, labels, regions, true) / probs.len() as f64
    }

    pub fn ecce(probs: &[Vec<f64>], labels: &[usize], regions: &Regions) -> f64 {
        inner(probs, labels, regions, true) / probs.len() as f64
    }

    pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut s = 0.0;
        for i in 0..probs.len() {
            s -= probs[i][labels[i]].max(1e-12).ln();
        }
        s / probs.len() as f64
    }

    pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut hits = 0.0;
        for i in 0..probs.len() {
            if top(&probs[i]) == labels[i] {
                hits += 1.0;
            }
        }
        hits / probs.len() as f64
    }

    /// Unbiased quadratic SKCE with a Laplacian kernel, over all pairs.
    pub fn skce(probs: &[Vec<f64>], labels: &[usize], nu: f64) -> f64 {
        let n = probs.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dist: f64 = probs[i].iter().zip(&probs[j]).map(|(a, b)| (a - b).abs()).sum();
                let kern = (-dist / nu).exp();
                let dot: f64 = probs[i].iter().zip(&probs[j]).map(|(a, b)| a * b).sum();
                let h = delta(labels[i], labels[j]) - probs[i][labels[j]] - probs[j][labels[i]] + dot;
                s += kern * h;
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    }
}

pub fn fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cifar_like_k100.bin")
}

/// 100 samples of K=100 logits resembling a network's output dump: noise
/// plus a bump on the true class for most rows and on a decoy otherwise.
pub fn cifar_like_logits() -> LogitSet {
    let (n, k) = (100, 100);
    let mut r = rng(100);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let mut z = Array2::from_shape_fn((n, k), |_| r.sample::<f64, _>(StandardNormal));
    for (i, &y) in labels.iter().enumerate() {
        let bumped = if r.random_bool(0.75) { y } else { r.random_range(0..k) };
        z[[i, bumped]] += 6.0;
    }
    LogitSet::new(z, labels).unwrap()
}
