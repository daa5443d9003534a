//! Inter-layer affinity and the greedy grouping of layers into semantic
//! hierarchies.
//!
//! Each layer of a sample is summarised by the L2-normalised mean of its
//! patch tokens; the affinity of two layers is the cosine of those summaries,
//! averaged over samples. Layers are then grouped left to right. Two readings
//! of "affinity above threshold" are supported:
//!
//! * [`GroupingRule::Anchor`] (default): layer `j` joins the group opened at
//!   anchor `i` while `S[i][j] >= λ`.
//! * [`GroupingRule::Consecutive`]: layer `j` joins while `S[j-1][j] >= λ`.
//!
//! Only the consecutive rule is monotone in `λ` for arbitrary matrices. The
//! anchor rule is monotone in the group count when affinity decays with layer
//! distance, but a larger `λ` can still move a boundary and join two layers
//! that were split before.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{forward_plain, Head, ViT};

const TOL: f64 = 1e-9;

/// Samples beyond this count are subsampled with a fixed seed.
pub const AFFINITY_SAMPLE_CAP: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingRule {
    #[default]
    Anchor,
    Consecutive,
}

/// Sample-averaged `N × N` cosine similarity between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub values: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl AffinityMatrix {
    pub fn new(values: Vec<Vec<f64>>, sample_count: usize) -> Result<Self> {
        let m = AffinityMatrix { values, sample_count };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Symmetric, unit diagonal, entries in `[-1, 1]`, all within `1e-9`.
    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!(
                    "affinity row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    n
                )));
            }
            if (row[i] - 1.0).abs() > TOL {
                return Err(Error::Validation(format!("affinity diagonal [{}] = {}", i, row[i])));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || !(-1.0 - TOL..=1.0 + TOL).contains(&v) {
                    return Err(Error::Validation(format!("affinity [{}][{}] = {}", i, j, v)));
                }
                if (v - self.values[j][i]).abs() > TOL {
                    return Err(Error::Validation(format!(
                        "affinity not symmetric at [{}][{}]",
                        i, j
                    )));
                }
            }
        }
        Ok(())
    }

    /// Heatmap rows `(row, col, value)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i, j, v));
            }
        }
        out
    }
}

/// Contiguous, ordered, covering groups of layer indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr")]
pub struct HierarchyPartition {
    groups: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rule: Option<GroupingRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionRepr {
    groups: Vec<Vec<usize>>,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    rule: Option<GroupingRule>,
}

impl TryFrom<PartitionRepr> for HierarchyPartition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        let n = r.groups.iter().map(Vec::len).sum();
        let mut p = HierarchyPartition::from_groups(r.groups, n)?;
        p.threshold = r.threshold;
        p.rule = r.rule;
        Ok(p)
    }
}

impl HierarchyPartition {
    pub fn from_groups(groups: Vec<Vec<usize>>, num_layers: usize) -> Result<Self> {
        let mut next = 0;
        for (k, grp) in groups.iter().enumerate() {
            if grp.is_empty() {
                return Err(Error::Validation(format!("hierarchy {} is empty", k)));
            }
            for &l in grp {
                if l != next {
                    return Err(Error::Validation(format!(
                        "hierarchies must be contiguous and ordered: expected layer {}, found {}",
                        next, l
                    )));
                }
                next += 1;
            }
        }
        if next != num_layers {
            return Err(Error::Validation(format!(
                "hierarchies cover {} layers, model has {}",
                next, num_layers
            )));
        }
        Ok(HierarchyPartition {
            groups,
            threshold: None,
            rule: None,
        })
    }

    /// Partition from group sizes, e.g. `[4, 4]` for `{0..3}, {4..7}`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut groups = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            groups.push((start..start + s).collect());
            start += s;
        }
        Self::from_groups(groups, start)
    }

    /// One hierarchy spanning every layer.
    pub fn single(num_layers: usize) -> Self {
        HierarchyPartition {
            groups: vec![(0..num_layers).collect()],
            threshold: None,
            rule: None,
        }
    }

    /// Every layer its own hierarchy.
    pub fn singletons(num_layers: usize) -> Self {
        HierarchyPartition {
            groups: (0..num_layers).map(|l| vec![l]).collect(),
            threshold: None,
            rule: None,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_layers(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn rule(&self) -> Option<GroupingRule> {
        self.rule
    }

    /// Hierarchy containing `layer`.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&layer))
    }

    /// The hierarchy that `layer` opens, if it is the first layer of one.
    pub fn entry_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().position(|g| g[0] == layer)
    }

    /// Boundaries as the set of layers that open a new hierarchy (layer 0
    /// excluded).
    pub fn boundaries(&self) -> Vec<usize> {
        self.groups.iter().skip(1).map(|g| g[0]).collect()
    }
}

/// Mean of the patch tokens (row 0, the CLS token, excluded), L2-normalised.
pub fn layer_feature(z: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = z.dims2()?;
    if rows < 2 {
        return Err(Error::shape("layer_feature", "need at least one patch token"));
    }
    let mut mean = vec![0.0; cols];
    for r in 1..rows {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    let count = (rows - 1) as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::degenerate(
            "layer_feature",
            "pooled patch feature has zero norm",
        ));
    }
    mean.iter_mut().for_each(|m| *m /= norm);
    Ok(mean)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-sample affinity from already normalised per-layer features.
pub fn sample_affinity(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        s[i][i] = 1.0;
        for j in i + 1..n {
            let v = dot(&features[i], &features[j]).clamp(-1.0, 1.0);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// Averages per-sample affinities in sample order.
pub fn affinity_from_features(per_sample: &[Vec<Vec<f64>>]) -> Result<AffinityMatrix> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Config("affinity needs at least one sample".into()))?;
    let n = first.len();
    let mut acc = vec![vec![0.0; n]; n];
    for feats in per_sample {
        if feats.len() != n {
            return Err(Error::shape("affinity", "samples disagree on layer count"));
        }
        let s = sample_affinity(feats);
        for i in 0..n {
            for j in 0..n {
                acc[i][j] += s[i][j];
            }
        }
    }
    let count = per_sample.len() as f64;
    for row in &mut acc {
        row.iter_mut().for_each(|v| *v /= count);
    }
    AffinityMatrix::new(acc, per_sample.len())
}

/// Per-layer pooled features of one sample under the frozen backbone.
pub fn sample_layer_features(model: &ViT, patches: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vit = model.bind(&mut g, false);
    let head = Head::zeros(model.config.embed_dim, 1).bind(&mut g, false);
    let x = g.constant(patches.clone());
    let trace = forward_plain(&mut g, &vit, &head, x)?;
    trace.layers.iter().map(|l| layer_feature(g.value(l.z))).collect()
}

/// Indices of the samples used for affinity: all of them up to
/// [`AFFINITY_SAMPLE_CAP`], otherwise a sorted fixed-seed subsample.
pub fn affinity_sample_indices(n: usize, seed: u64) -> Vec<usize> {
    if n <= AFFINITY_SAMPLE_CAP {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, AFFINITY_SAMPLE_CAP).into_vec();
    idx.sort_unstable();
    idx
}

/// Sample-averaged inter-layer affinity of `model` over patchified samples.
/// Samples are processed in parallel; the mean is reduced in sample order.
pub fn affinity_matrix(model: &ViT, samples: &[Tensor]) -> Result<AffinityMatrix> {
    if samples.is_empty() {
        return Err(Error::Config("affinity needs at least one sample".into()));
    }
    let feats: Vec<Vec<Vec<f64>>> = samples
        .par_iter()
        .map(|p| sample_layer_features(model, p))
        .collect::<Result<_>>()?;
    affinity_from_features(&feats)
}

/// Affinity from externally dumped activations: one `[samples, tokens, d]`
/// tensor per layer, token 0 being CLS.
pub fn affinity_from_layer_tensors(layers: &[Tensor]) -> Result<AffinityMatrix> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Config("no layers in activation dump".into()))?;
    let [samples, tokens, d] = *first.shape() else {
        return Err(Error::shape("affinity", "layer tensors must be [samples, tokens, d]"));
    };
    let mut per_sample = vec![Vec::with_capacity(layers.len()); samples];
    for t in layers {
        if t.shape() != [samples, tokens, d] {
            return Err(Error::shape(
                "affinity",
                format!("layer tensor {:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        for (s, feats) in per_sample.iter_mut().enumerate() {
            let block = &t.data()[s * tokens * d..(s + 1) * tokens * d];
            let z = Tensor::new(vec![tokens, d], block.to_vec())?;
            feats.push(layer_feature(&z)?);
        }
    }
    affinity_from_features(&per_sample)
}

fn check_threshold(lambda: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "hierarchy threshold {} outside [-1, 1]",
            lambda
        )));
    }
    Ok(())
}

/// Left-to-right greedy grouping of layers; see the module docs for the rules.
pub fn greedy_partition(
    s: &AffinityMatrix,
    lambda: f64,
    rule: GroupingRule,
) -> Result<HierarchyPartition> {
    check_threshold(lambda)?;
    let n = s.len();
    let mut groups = Vec::new();
    let mut anchor = 0;
    while anchor < n {
        let mut end = anchor + 1;
        while end < n {
            let affinity = match rule {
                GroupingRule::Anchor => s.get(anchor, end),
                GroupingRule::Consecutive => s.get(end - 1, end),
            };
            if affinity < lambda {
                break;
            }
            end += 1;
        }
        groups.push((anchor..end).collect());
        anchor = end;
    }
    let mut p = HierarchyPartition::from_groups(groups, n)?;
    p.threshold = Some(lambda);
    p.rule = Some(rule);
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub lambda: f64,
    pub num_groups: usize,
    pub partition: HierarchyPartition,
}

/// Partitions for every threshold in `lambdas`, in the given order.
pub fn threshold_sweep(
    s: &AffinityMatrix,
    lambdas: &[f64],
    rule: GroupingRule,
) -> Result<Vec<SweepEntry>> {
    if lambdas.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one value".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let partition = greedy_partition(s, lambda, rule)?;
            Ok(SweepEntry {
                lambda,
                num_groups: partition.num_groups(),
                partition,
            })
        })
        .collect()
}

/// True when the group count never increases as the threshold decreases.
pub fn sweep_is_monotone(entries: &[SweepEntry]) -> bool {
    let mut sorted: Vec<&SweepEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    sorted.windows(2).all(|w| w[1].num_groups <= w[0].num_groups)
}
