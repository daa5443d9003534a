use serde::Serialize;

use super::attention::{attention_decoupled, attention_vanilla, AttentionMode};
use super::config::ViTConfig;
use super::model::{BoundBlock, BoundHead, BoundViT};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub z: Var,
    pub prompts: Option<Var>,
    /// Head-averaged, post-softmax attention of the CLS query. The first
    /// `N_x` entries cover the instance tokens; prompt keys follow.
    pub cls_attention: Vec<f64>,
}

fn mlp_residual(g: &mut Graph, blk: &BoundBlock, cfg: &ViTConfig, x: Var) -> Result<Var> {
    let h = g.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.ln_eps)?;
    let h = g.linear(h, blk.w1, blk.b1)?;
    let h = g.gelu(h);
    let h = g.linear(h, blk.w2, blk.b2)?;
    g.add(x, h)
}

/// One pre-norm transformer block over instance tokens `z` and optional
/// prompt tokens. Prompts carry no positional embedding and sit after the
/// instances.
pub fn layer_forward(
    g: &mut Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    z: Var,
    prompts: Option<Var>,
    mode: AttentionMode,
) -> Result<LayerOutput> {
    mode.validate()?;
    let n_x = g.value(z).rows();
    let prompts = prompts.filter(|&p| g.value(p).rows() > 0);
    match mode {
        AttentionMode::Vanilla => {
            let x = match prompts {
                Some(p) => g.concat_rows(&[z, p])?,
                None => z,
            };
            let h = g.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps)?;
            let att = attention_vanilla(g, blk, cfg, h)?;
            let cls_attention = att.cls_row(g);
            let x = g.add(x, att.out)?;
            let x = mlp_residual(g, blk, cfg, x)?;
            let (z, prompts) = split(g, x, n_x, prompts.is_some())?;
            Ok(LayerOutput { z, prompts, cls_attention })
        }
        AttentionMode::Decoupled { lambda, p2ip } => {
            let hz = g.layer_norm(z, blk.ln1_g, blk.ln1_b, cfg.ln_eps)?;
            let hp = match prompts {
                Some(p) => Some(g.layer_norm(p, blk.ln1_g, blk.ln1_b, cfg.ln_eps)?),
                None => None,
            };
            let att = attention_decoupled(g, blk, cfg, hz, hp, lambda, p2ip)?;
            let cls_attention = att.cls_row(g);
            let z1 = g.add(z, att.instances)?;
            let x = match (prompts, att.prompts) {
                (Some(p), Some(pa)) => {
                    let p1 = g.add(p, pa)?;
                    g.concat_rows(&[z1, p1])?
                }
                (Some(p), None) => g.concat_rows(&[z1, p])?,
                (None, _) => z1,
            };
            let x = mlp_residual(g, blk, cfg, x)?;
            let (z, prompts) = split(g, x, n_x, prompts.is_some())?;
            Ok(LayerOutput { z, prompts, cls_attention })
        }
    }
}

fn split(g: &mut Graph, x: Var, n_x: usize, has_prompts: bool) -> Result<(Var, Option<Var>)> {
    if !has_prompts {
        return Ok((x, None));
    }
    let total = g.value(x).rows();
    let z = g.slice_rows(x, 0, n_x)?;
    let p = g.slice_rows(x, n_x, total - n_x)?;
    Ok((z, Some(p)))
}

/// Which prompt family a run of prompt rows belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum PromptKind {
    /// Pool inserted at a hierarchy entry (shallow prompts are hierarchy 0
    /// of a single-hierarchy partition).
    Independent(usize),
    /// Per-layer pool whose outputs are discarded after the layer.
    Deep(usize),
    Shared,
    Attribute(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub kind: PromptKind,
    pub len: usize,
}

/// Graph-level record of one layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub z: Var,
    pub prompts_in: Option<Var>,
    pub prompts_out: Option<Var>,
    pub cls_attention: Vec<f64>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn activations(&self, g: &Graph) -> LayerActivations {
        LayerActivations {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    z: g.value(l.z).clone(),
                    prompts_in: l.prompts_in.map(|p| g.value(p).clone()),
                    prompts_out: l.prompts_out.map(|p| g.value(p).clone()),
                    cls_attention: l.cls_attention.clone(),
                    segments: l.segments.clone(),
                })
                .collect(),
        }
    }
}

/// Materialized per-layer features.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// Instance features `[N_x, d]` output by the layer.
    pub z: Tensor,
    pub prompts_in: Option<Tensor>,
    pub prompts_out: Option<Tensor>,
    pub cls_attention: Vec<f64>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub layers: Vec<LayerRecord>,
}

impl LayerActivations {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Top-`n` patch tokens by the CLS attention of `layer`.
    pub fn cls_topk(&self, layer: usize, n: usize) -> Result<Vec<usize>> {
        let rec = self.layers.get(layer).ok_or_else(|| {
            Error::Config(format!("layer {} out of range ({} layers)", layer, self.layers.len()))
        })?;
        cls_attention_topk(&rec.cls_attention, rec.z.rows(), n)
    }
}

/// Indices (0-based, CLS excluded) of the `n` patch tokens with the largest
/// CLS attention. `row[0]` is the CLS self-weight and `row[1..num_tokens]`
/// the patches; anything beyond belongs to prompts and is ignored. Ties go
/// to the lower index.
pub fn cls_attention_topk(row: &[f64], num_tokens: usize, n: usize) -> Result<Vec<usize>> {
    if num_tokens < 1 || row.len() < num_tokens {
        return Err(Error::shape(
            "cls_attention_topk",
            format!("attention row of {} entries for {} tokens", row.len(), num_tokens),
        ));
    }
    let patches = num_tokens - 1;
    if n > patches {
        return Err(Error::Config(format!(
            "cannot select {} tokens from {} patches",
            n, patches
        )));
    }
    let mut idx: Vec<usize> = (0..patches).collect();
    idx.sort_by(|&a, &b| row[b + 1].total_cmp(&row[a + 1]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Backbone forward without prompts.
pub fn forward_plain(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
) -> Result<ForwardTrace> {
    let mut z = vit.embed(g, patches)?;
    let mut layers = Vec::with_capacity(vit.blocks.len());
    for blk in &vit.blocks {
        let out = layer_forward(g, blk, &vit.config, z, None, AttentionMode::Vanilla)?;
        z = out.z;
        layers.push(LayerTrace {
            z,
            prompts_in: None,
            prompts_out: None,
            cls_attention: out.cls_attention,
            segments: Vec::new(),
        });
    }
    let logits = vit.classify(g, head, z)?;
    Ok(ForwardTrace { logits, layers })
}

/// CLS attention that layer `blk` would assign over the incoming instance
/// tokens `z`, ignoring prompts. Computed on a scratch graph so the caller's
/// tape is untouched.
pub fn instance_cls_attention(
    g: &Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    z: Var,
) -> Result<Vec<f64>> {
    let mut s = Graph::new();
    let mut c = |v: Var| s.constant(g.value(v).clone());
    let z = c(z);
    let (ln_g, ln_b) = (c(blk.ln1_g), c(blk.ln1_b));
    let (wq, bq, wk, bk) = (c(blk.wq), c(blk.bq), c(blk.wk), c(blk.bk));
    let h = s.layer_norm(z, ln_g, ln_b, cfg.ln_eps)?;
    let cls = s.slice_rows(h, 0, 1)?;
    let q = s.linear(cls, wq, bq)?;
    let k = s.linear(h, wk, bk)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let n = s.value(z).rows();
    let mut row = vec![0.0; n];
    for head in 0..cfg.num_heads {
        let qh = s.slice_cols(q, head * dh, dh)?;
        let kh = s.slice_cols(k, head * dh, dh)?;
        let sc = s.matmul_nt(qh, kh)?;
        let sc = s.scale(sc, scale);
        let w = s.softmax(sc, 1)?;
        for (r, v) in row.iter_mut().zip(s.value(w).data()) {
            *r += v;
        }
    }
    row.iter_mut().for_each(|r| *r /= cfg.num_heads as f64);
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_concentrated() {
        let mut row = vec![0.01; 17];
        row[6] = 0.8;
        assert_eq!(cls_attention_topk(&row, 17, 1).unwrap(), vec![5]);
    }

    #[test]
    fn topk_uniform_ties_to_lowest() {
        let row = vec![1.0 / 17.0; 17];
        assert_eq!(cls_attention_topk(&row, 17, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topk_ignores_prompt_entries_and_checks_range() {
        let mut row = vec![0.0; 20];
        row[19] = 1.0;
        row[2] = 0.5;
        assert_eq!(cls_attention_topk(&row, 17, 1).unwrap(), vec![1]);
        assert!(cls_attention_topk(&row, 17, 17).is_err());
        assert_eq!(cls_attention_topk(&row, 17, 16).unwrap().len(), 16);
    }
}
