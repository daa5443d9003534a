//! Attribute prototypes and sample-aware attribute prompts.
//!
//! Prototypes are K-means centroids of frozen-backbone features. An attribute
//! prompt mixes a learnable base `L_a` with the prototypes queried by a set of
//! selected instance tokens:
//!
//! `P_a = (1 - λ_a)·L_a + λ_a·AG(z_D, A)`, where `AG(z_D, A) = softmax(cos(z_D, A) / τ)·A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where prototype features came from; stored next to the prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeSource {
    pub layer: usize,
    pub pooling: String,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `[K, d]`
    pub prototypes: Tensor,
    pub source: PrototypeSource,
}

impl PrototypeSet {
    pub fn new(prototypes: Tensor, source: PrototypeSource) -> Result<Self> {
        let (k, _) = prototypes.dims2()?;
        if k == 0 || prototypes.rank() != 2 {
            return Err(Error::Validation("prototype set needs a [K, d] matrix with K >= 1".into()));
        }
        if !prototypes.is_finite() {
            return Err(Error::Numerical("non-finite prototype".into()));
        }
        Ok(PrototypeSet { prototypes, source })
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `[K, d]`
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lower centroid) and the inertia.
fn assign(x: &Tensor, c: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(x.rows());
    let mut dists = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let p = x.row(i);
        let mut best = 0;
        let mut best_d = sq_dist(p, &c[0]);
        for (j, cj) in c.iter().enumerate().skip(1) {
            let d = sq_dist(p, cj);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        labels.push(best);
        dists.push(best_d);
    }
    (labels, dists)
}

fn seed_plus_plus(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen.into_iter().map(|i| x.row(i).to_vec()).collect()
}

/// Cluster means; empty clusters keep `None`.
fn means(x: &Tensor, labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let d = x.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(mut s, c)| {
            (c > 0).then(|| {
                s.iter_mut().for_each(|v| *v /= c as f64);
                s
            })
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments no longer change or after `max_iter` updates. A
/// cluster that empties is moved onto the point farthest from its current
/// centroid (lowest index on ties), and that point is then excluded from
/// further reseeds in the same round.
pub fn kmeans(features: &Tensor, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    let (n, _) = features.dims2()?;
    if k == 0 {
        return Err(Error::Config("k-means needs K >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!("k-means needs n >= K, got n = {}, K = {}", n, k)));
    }
    if !features.is_finite() {
        return Err(Error::Numerical("non-finite k-means input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);
    let (mut labels, mut dists) = assign(features, &centroids);
    let mut history = vec![dists.iter().sum()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut used = Vec::new();
        for (j, m) in means(features, &labels, k).into_iter().enumerate() {
            match m {
                Some(m) => centroids[j] = m,
                None => {
                    let far = (0..n)
                        .filter(|i| !used.contains(i))
                        .fold(None, |best: Option<usize>, i| match best {
                            Some(b) if dists[b] >= dists[i] => Some(b),
                            _ => Some(i),
                        })
                        .unwrap_or(0);
                    used.push(far);
                    centroids[j] = features.row(far).to_vec();
                }
            }
        }
        let (new_labels, new_dists) = assign(features, &centroids);
        history.push(new_dists.iter().sum());
        dists = new_dists;
        if new_labels == labels {
            converged = true;
            break;
        }
        labels = new_labels;
    }
    if !converged {
        for (j, m) in means(features, &labels, k).into_iter().enumerate() {
            if let Some(m) = m {
                centroids[j] = m;
            }
        }
    }
    let d = features.cols();
    let flat = centroids.into_iter().flatten().collect();
    Ok(KMeansResult {
        centroids: Tensor::new(vec![k, d], flat)?,
        assignments: labels,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Sum of squared distances of each point to its assigned centroid.
pub fn inertia(features: &Tensor, centroids: &Tensor, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(features.row(i), centroids.row(l)))
        .sum()
}

#[derive(Clone, Copy, Debug)]
pub struct Aggregation {
    /// `[N_a, d]`
    pub out: Var,
    /// `[N_a, K]`, rows sum to one.
    pub weights: Var,
}

/// `softmax(cos(tokens, prototypes) / temperature) · prototypes`.
pub fn aggregate_attributes(
    g: &mut Graph,
    tokens: Var,
    prototypes: Var,
    temperature: f64,
) -> Result<Aggregation> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("aggregation temperature {} must be positive", temperature)));
    }
    let sim = g.cosine_matrix(tokens, prototypes)?;
    let sim = if temperature == 1.0 { sim } else { g.scale(sim, 1.0 / temperature) };
    let weights = g.softmax(sim, 1)?;
    let out = g.matmul(weights, prototypes)?;
    Ok(Aggregation { out, weights })
}

/// `(1 - λ_a)·L_a + λ_a·AG(tokens, prototypes)`. `tokens` and `base` must
/// have the same row count.
pub fn attribute_prompt(
    g: &mut Graph,
    tokens: Var,
    prototypes: Var,
    base: Var,
    lambda_a: f64,
    temperature: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda_a) {
        return Err(Error::Config(format!("attribute weight {} outside [0, 1]", lambda_a)));
    }
    if g.shape(tokens) != g.shape(base) {
        return Err(Error::shape(
            "attribute_prompt",
            format!("tokens {:?} vs base {:?}", g.shape(tokens), g.shape(base)),
        ));
    }
    let agg = aggregate_attributes(g, tokens, prototypes, temperature)?;
    let a = g.scale(base, 1.0 - lambda_a);
    let b = g.scale(agg.out, lambda_a);
    g.add(a, b)
}
