//! Classification and prompt matching losses.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::vit::{cls_attention_topk, ForwardTrace};

/// Mean over prompts of the cosine distance to the nearest token:
/// `(1/N_p) Σ_i min_j (1 - cos(p_i, t_j))`. Ties go to the lowest token.
pub fn pml(g: &mut Graph, prompts: Var, tokens: Var) -> Result<Var> {
    let (n_p, _) = g.value(prompts).dims2()?;
    let (n_t, _) = g.value(tokens).dims2()?;
    if n_p == 0 || n_t == 0 {
        return Err(Error::shape("pml", "need at least one prompt and one token"));
    }
    let cos = g.cosine_matrix(prompts, tokens)?;
    let dist = g.scale(cos, -1.0);
    let dist = g.add_scalar(dist, 1.0);
    let nearest = g.row_min(dist)?;
    g.mean(nearest)
}

/// The `n_m` final-layer instance tokens most attended by CLS, as rows of
/// the final instance features.
pub fn matching_tokens(g: &mut Graph, trace: &ForwardTrace, n_m: usize) -> Result<Var> {
    let last = trace
        .layers
        .last()
        .ok_or_else(|| Error::Config("trace has no layers".into()))?;
    let n_x = g.value(last.z).rows();
    let idx: Vec<usize> = cls_attention_topk(&last.cls_attention, n_x, n_m)?
        .into_iter()
        .map(|i| i + 1)
        .collect();
    g.gather_rows(last.z, &idx)
}

/// Prompt matching loss on the final layer's prompt outputs, or `None` when
/// the final layer carries no prompts.
pub fn trace_pml(g: &mut Graph, trace: &ForwardTrace, n_m: usize) -> Result<Option<Var>> {
    let Some(prompts) = trace.layers.last().and_then(|l| l.prompts_out) else {
        return Ok(None);
    };
    if n_m == 0 {
        return Ok(None);
    }
    let tokens = matching_tokens(g, trace, n_m)?;
    pml(g, prompts, tokens).map(Some)
}

/// `L_c + λ_m·L_m`; without a matching term this is the cross-entropy.
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    label: usize,
    matching: Option<Var>,
    lambda_m: f64,
) -> Result<Var> {
    let ce = g.cross_entropy(logits, label)?;
    match matching {
        Some(m) if lambda_m != 0.0 => {
            let m = g.scale(m, lambda_m);
            g.add(ce, m)
        }
        _ => Ok(ce),
    }
}
