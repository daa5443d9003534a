//! Multi-head attention in its vanilla and decoupled forms.
//!
//! All functions take tokens that have already been through the block's
//! first LayerNorm. Outputs include the output projection `W_o, b_o`.

use super::config::ViTConfig;
use super::model::BoundBlock;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// How a layer mixes instance tokens and prompt tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    /// Ordinary self-attention over the concatenated sequence `[z, P]`.
    Vanilla,
    /// Instance outputs mix instance-to-instance and instance-to-prompt
    /// attention with weight `lambda`; prompts attend to `[z, P]` only when
    /// `p2ip` is set and otherwise skip the attention sublayer.
    Decoupled { lambda: f64, p2ip: bool },
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        if let AttentionMode::Decoupled { lambda, .. } = *self {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!(
                    "decoupled attention weight {} outside [0, 1]",
                    lambda
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Projection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub(crate) fn project(g: &mut Graph, blk: &BoundBlock, x: Var) -> Result<Projection> {
    Ok(Projection {
        q: g.linear(x, blk.wq, blk.bq)?,
        k: g.linear(x, blk.wk, blk.bk)?,
        v: g.linear(x, blk.wv, blk.bv)?,
    })
}

/// Attention result: projected output rows plus per-head post-softmax
/// weights `[n_queries, n_keys]`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl AttentionOutput {
    /// Head-averaged attention weights of query row 0 (the CLS token when
    /// the queries are instance tokens).
    pub fn cls_row(&self, g: &Graph) -> Vec<f64> {
        let heads = self.weights.len() as f64;
        let mut row = g.value(self.weights[0]).row(0).to_vec();
        for &w in &self.weights[1..] {
            for (r, v) in row.iter_mut().zip(g.value(w).row(0)) {
                *r += v;
            }
        }
        row.iter_mut().for_each(|r| *r /= heads);
        row
    }
}

pub(crate) fn attend(
    g: &mut Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttentionOutput> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = g.linear(merged, blk.wo, blk.bo)?;
    Ok(AttentionOutput { out, weights })
}

/// `queries` attend over `context`; both are normalized token matrices.
pub fn cross_attention(
    g: &mut Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    queries: Var,
    context: Var,
) -> Result<AttentionOutput> {
    let q = g.linear(queries, blk.wq, blk.bq)?;
    let k = g.linear(context, blk.wk, blk.bk)?;
    let v = g.linear(context, blk.wv, blk.bv)?;
    attend(g, blk, cfg, q, k, v)
}

/// Standard multi-head self-attention over the whole sequence.
pub fn attention_vanilla(
    g: &mut Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    x: Var,
) -> Result<AttentionOutput> {
    let p = project(g, blk, x)?;
    attend(g, blk, cfg, p.q, p.k, p.v)
}

#[derive(Clone, Debug)]
pub struct DecoupledOutput {
    /// `(1 - λ)·I2I(z, z) + λ·I2P(z, P)`, or plain `I2I` without prompts.
    pub instances: Var,
    /// `P2IP(P, [z, P])` when requested; `None` means the prompts bypass
    /// the attention sublayer.
    pub prompts: Option<Var>,
    pub i2i: AttentionOutput,
    pub i2p: Option<AttentionOutput>,
    pub lambda: f64,
}

impl DecoupledOutput {
    /// Effective CLS attention: `(1 - λ)` times the instance row followed by
    /// `λ` times the prompt row. Sums to one.
    pub fn cls_row(&self, g: &Graph) -> Vec<f64> {
        let mut row = self.i2i.cls_row(g);
        if let Some(i2p) = &self.i2p {
            row.iter_mut().for_each(|v| *v *= 1.0 - self.lambda);
            row.extend(i2p.cls_row(g).into_iter().map(|v| v * self.lambda));
        }
        row
    }
}

/// Decoupled attention over normalized instance tokens `z` and prompts `p`.
pub fn attention_decoupled(
    g: &mut Graph,
    blk: &BoundBlock,
    cfg: &ViTConfig,
    z: Var,
    p: Option<Var>,
    lambda: f64,
    include_p2ip: bool,
) -> Result<DecoupledOutput> {
    AttentionMode::Decoupled {
        lambda,
        p2ip: include_p2ip,
    }
    .validate()?;
    let pz = project(g, blk, z)?;
    let i2i = attend(g, blk, cfg, pz.q, pz.k, pz.v)?;
    let Some(p) = p else {
        return Ok(DecoupledOutput {
            instances: i2i.out,
            prompts: None,
            i2i,
            i2p: None,
            lambda,
        });
    };
    let pp = project(g, blk, p)?;
    let i2p = attend(g, blk, cfg, pz.q, pp.k, pp.v)?;
    let a = g.scale(i2i.out, 1.0 - lambda);
    let b = g.scale(i2p.out, lambda);
    let instances = g.add(a, b)?;
    let prompts = if include_p2ip {
        let k = g.concat_rows(&[pz.k, pp.k])?;
        let v = g.concat_rows(&[pz.v, pp.v])?;
        Some(attend(g, blk, cfg, pp.q, k, v)?.out)
    } else {
        None
    };
    Ok(DecoupledOutput {
        instances,
        prompts,
        i2i,
        i2p: Some(i2p),
        lambda,
    })
}
