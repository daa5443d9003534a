//! Prompt injection schemes over the frozen backbone.
//!
//! The prompt sequence seen by a layer is `[z, carried, shared]`:
//!
//! * `carried` holds prompts that propagate from layer to layer inside a
//!   hierarchy. At the first layer of hierarchy `k` the previous carried
//!   prompts are discarded and replaced by the fresh pool `P_k`, followed by
//!   an attribute prompt when hierarchy `k` is one of the last `M_a`.
//! * `shared` is the same pool appended at every layer; its outputs are
//!   dropped after each layer.
//!
//! Shallow prompting is the single-hierarchy case and deep prompting the
//! all-singletons case. [`forward_vpt_shallow`] and [`forward_vpt_deep`] are
//! written as separate direct loops so the two readings can be compared.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{attribute_prompt, PrototypeSet};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyPartition;
use crate::tensor::Tensor;
use crate::vit::{
    cls_attention_topk, instance_cls_attention, layer_forward, AttentionMode, BoundHead,
    BoundViT, ForwardTrace, LayerTrace, PromptKind, Segment,
};

/// Which layers run prompt-to-all attention under decoupled attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P2ipPolicy {
    #[default]
    Last,
    All,
    None,
}

/// Prompt sizes and loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptHyper {
    /// Prompts per hierarchy pool.
    pub n_p: usize,
    /// Shared prompt count.
    pub n_ss: usize,
    /// Hierarchy threshold.
    pub threshold: f64,
    pub lambda_d: f64,
    pub lambda_m: f64,
    pub lambda_a: f64,
    /// Attribute prompt length (selected tokens per attribute prompt).
    pub n_a: usize,
    /// Tokens matched by the prompt matching loss.
    pub n_m: usize,
    /// Number of trailing hierarchies that receive attribute prompts.
    pub m_a: usize,
    /// Prototype count.
    pub k: usize,
    pub attr_temperature: f64,
    /// Rebuild the attribute prompt at every layer instead of once per
    /// hierarchy entry.
    pub ap_per_layer: bool,
    pub p2ip: P2ipPolicy,
}

impl Default for PromptHyper {
    fn default() -> Self {
        PromptHyper {
            n_p: 50,
            n_ss: 10,
            threshold: 0.95,
            lambda_d: 0.1,
            lambda_m: 0.5,
            lambda_a: 0.1,
            n_a: 10,
            n_m: 10,
            m_a: 2,
            k: 200,
            attr_temperature: 1.0,
            ap_per_layer: false,
            p2ip: P2ipPolicy::Last,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{} = {} outside [0, 1]", name, v)));
    }
    Ok(())
}

impl PromptHyper {
    pub fn validate(&self) -> Result<()> {
        unit("threshold", self.threshold)?;
        unit("lambda_d", self.lambda_d)?;
        unit("lambda_m", self.lambda_m)?;
        unit("lambda_a", self.lambda_a)?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.attr_temperature > 0.0) {
            return Err(Error::Config("attr_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    None,
    VptShallow,
    VptDeep,
    Sip,
    #[serde(rename = "sip+ssp", alias = "sip_ssp")]
    SipSsp,
    ShipFull,
}

impl StrategyMode {
    pub fn name(self) -> &'static str {
        match self {
            StrategyMode::None => "none",
            StrategyMode::VptShallow => "vpt_shallow",
            StrategyMode::VptDeep => "vpt_deep",
            StrategyMode::Sip => "sip",
            StrategyMode::SipSsp => "sip+ssp",
            StrategyMode::ShipFull => "ship_full",
        }
    }

    pub fn needs_partition(self) -> bool {
        matches!(self, StrategyMode::Sip | StrategyMode::SipSsp | StrategyMode::ShipFull)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub mode: StrategyMode,
    #[serde(default)]
    pub partition: Option<HierarchyPartition>,
    #[serde(default)]
    pub use_ap: bool,
    #[serde(default)]
    pub use_pml: bool,
    #[serde(default)]
    pub use_da: bool,
}

impl StrategySpec {
    pub fn new(mode: StrategyMode) -> Self {
        StrategySpec {
            mode,
            partition: None,
            use_ap: false,
            use_pml: false,
            use_da: false,
        }
    }

    pub fn with_partition(mut self, p: HierarchyPartition) -> Self {
        self.partition = Some(p);
        self
    }

    /// Fixes the prompt layout for a backbone of `num_layers` layers.
    /// `fallback` supplies the partition when the spec carries none.
    pub fn resolve(
        &self,
        num_layers: usize,
        hyper: &PromptHyper,
        fallback: Option<&HierarchyPartition>,
    ) -> Result<Plan> {
        hyper.validate()?;
        let full = self.mode == StrategyMode::ShipFull;
        let plan = |partition: HierarchyPartition, ssp: bool| Plan {
            mode: self.mode,
            prompts: true,
            ssp,
            ap: self.use_ap || full,
            pml: self.use_pml || full,
            da: self.use_da || full,
            partition,
        };
        let plan = match self.mode {
            StrategyMode::None => {
                if self.use_ap || self.use_pml || self.use_da {
                    return Err(Error::Config(
                        "mode none trains the head only and takes no prompt flags".into(),
                    ));
                }
                Plan {
                    mode: self.mode,
                    prompts: false,
                    ssp: false,
                    ap: false,
                    pml: false,
                    da: false,
                    partition: HierarchyPartition::single(num_layers),
                }
            }
            StrategyMode::VptShallow => plan(HierarchyPartition::single(num_layers), false),
            StrategyMode::VptDeep => plan(HierarchyPartition::singletons(num_layers), false),
            StrategyMode::Sip | StrategyMode::SipSsp | StrategyMode::ShipFull => {
                let p = self.partition.as_ref().or(fallback).ok_or_else(|| {
                    Error::Config(format!("mode {} requires a hierarchy partition", self.mode.name()))
                })?;
                plan(p.clone(), self.mode != StrategyMode::Sip)
            }
        };
        if plan.partition.num_layers() != num_layers {
            return Err(Error::Config(format!(
                "partition covers {} layers, backbone has {}",
                plan.partition.num_layers(),
                num_layers
            )));
        }
        if plan.ap && hyper.m_a > plan.partition.num_groups() {
            return Err(Error::Config(format!(
                "m_a = {} exceeds the {} hierarchies of the partition",
                hyper.m_a,
                plan.partition.num_groups()
            )));
        }
        Ok(plan)
    }
}

/// A strategy resolved against a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub mode: StrategyMode,
    pub prompts: bool,
    pub ssp: bool,
    pub ap: bool,
    pub pml: bool,
    pub da: bool,
    pub partition: HierarchyPartition,
}

impl Plan {
    /// Whether hierarchy `k` receives an attribute prompt.
    pub fn ap_group(&self, hyper: &PromptHyper, k: usize) -> bool {
        let m = self.partition.num_groups();
        self.ap && hyper.m_a > 0 && k + hyper.m_a >= m
    }

    pub fn attention(&self, hyper: &PromptHyper, layer: usize) -> AttentionMode {
        if !self.da {
            return AttentionMode::Vanilla;
        }
        let last = layer + 1 == self.partition.num_layers();
        let p2ip = match hyper.p2ip {
            P2ipPolicy::Last => last,
            P2ipPolicy::All => true,
            P2ipPolicy::None => false,
        };
        AttentionMode::Decoupled {
            lambda: hyper.lambda_d,
            p2ip,
        }
    }
}

/// Trainable prompt parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    /// One `[N_p, d]` pool per hierarchy.
    pub pools: Vec<Arc<Tensor>>,
    /// `[N_SS, d]`
    pub ssp: Option<Arc<Tensor>>,
    /// Learnable attribute base `L_a`, `[N_a, d]`.
    pub attr_base: Option<Arc<Tensor>>,
    pub hyper: PromptHyper,
}

/// Uniform bound `sqrt(6 / (d + n·d))`.
pub fn prompt_init_bound(n: usize, d: usize) -> f64 {
    (6.0 / (d + n * d) as f64).sqrt()
}

impl PromptState {
    pub fn init(plan: &Plan, hyper: &PromptHyper, d: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = |n: usize| {
            Arc::new(Tensor::uniform(&[n, d], prompt_init_bound(n, d), &mut rng))
        };
        if !plan.prompts {
            return Ok(PromptState {
                pools: Vec::new(),
                ssp: None,
                attr_base: None,
                hyper: hyper.clone(),
            });
        }
        let pools = (0..plan.partition.num_groups()).map(|_| pool(hyper.n_p)).collect();
        let ssp = plan.ssp.then(|| pool(hyper.n_ss));
        let attr_base = (plan.ap && hyper.m_a > 0).then(|| pool(hyper.n_a));
        Ok(PromptState {
            pools,
            ssp,
            attr_base,
            hyper: hyper.clone(),
        })
    }

    pub fn params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> =
            self.pools.iter().enumerate().map(|(k, p)| (format!("pool.{}", k), p)).collect();
        if let Some(s) = &self.ssp {
            out.push(("ssp".into(), s));
        }
        if let Some(a) = &self.attr_base {
            out.push(("attr_base".into(), a));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out: Vec<&mut Arc<Tensor>> = self.pools.iter_mut().collect();
        out.extend(self.ssp.as_mut());
        out.extend(self.attr_base.as_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        trainable: bool,
        prototypes: Option<&PrototypeSet>,
    ) -> BoundPrompts {
        BoundPrompts {
            pools: self.pools.iter().map(|p| g.leaf_shared(p.clone(), trainable)).collect(),
            ssp: match &self.ssp {
                Some(s) => SspBinding::Shared(g.leaf_shared(s.clone(), trainable)),
                None => SspBinding::None,
            },
            attr_base: self.attr_base.as_ref().map(|a| g.leaf_shared(a.clone(), trainable)),
            prototypes: prototypes.map(|p| g.constant(p.prototypes.clone())),
        }
    }
}

/// How the shared pool is placed on the graph. `PerLayer` gives every layer
/// its own leaf holding the same values, which exposes each layer's gradient
/// contribution separately.
#[derive(Clone, Debug)]
pub enum SspBinding {
    None,
    Shared(Var),
    PerLayer(Vec<Var>),
}

impl SspBinding {
    fn at(&self, layer: usize) -> Option<Var> {
        match self {
            SspBinding::None => None,
            SspBinding::Shared(v) => Some(*v),
            SspBinding::PerLayer(v) => v.get(layer).copied(),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            SspBinding::None => Vec::new(),
            SspBinding::Shared(v) => vec![*v],
            SspBinding::PerLayer(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundPrompts {
    pub pools: Vec<Var>,
    pub ssp: SspBinding,
    pub attr_base: Option<Var>,
    /// Frozen prototypes, a constant node.
    pub prototypes: Option<Var>,
}

impl BoundPrompts {
    pub fn empty() -> Self {
        BoundPrompts {
            pools: Vec::new(),
            ssp: SspBinding::None,
            attr_base: None,
            prototypes: None,
        }
    }

    /// Trainable prompt leaves, in [`PromptState::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.pools.clone();
        v.extend(self.ssp.vars());
        v.extend(self.attr_base);
        v
    }
}

fn check_pool(g: &Graph, vit: &BoundViT, pool: Var) -> Result<()> {
    let shape = g.shape(pool);
    let d = vit.config.embed_dim;
    if shape.len() != 2 || (shape[0] > 0 && shape[1] != d) {
        return Err(Error::shape(
            "prompt pool",
            format!("pool {:?} does not match embed_dim {}", shape, d),
        ));
    }
    Ok(())
}

fn rows(g: &Graph, v: Var) -> usize {
    g.value(v).rows()
}

/// Shallow prompting: `P` enters before the first layer and its outputs feed
/// every following layer.
pub fn forward_vpt_shallow(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    pool: Var,
) -> Result<ForwardTrace> {
    check_pool(g, vit, pool)?;
    let mut z = vit.embed(g, patches)?;
    let mut p = (rows(g, pool) > 0).then_some(pool);
    let n_p = rows(g, pool);
    let mut layers = Vec::with_capacity(vit.blocks.len());
    for blk in &vit.blocks {
        let out = layer_forward(g, blk, &vit.config, z, p, AttentionMode::Vanilla)?;
        layers.push(LayerTrace {
            z: out.z,
            prompts_in: p,
            prompts_out: out.prompts,
            cls_attention: out.cls_attention,
            segments: p
                .map(|_| vec![Segment { kind: PromptKind::Independent(0), len: n_p }])
                .unwrap_or_default(),
        });
        z = out.z;
        p = out.prompts;
    }
    let logits = vit.classify(g, head, z)?;
    Ok(ForwardTrace { logits, layers })
}

/// Deep prompting: layer `i` sees a fresh pool `P_i`; its prompt outputs are
/// dropped.
pub fn forward_vpt_deep(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    pools: &[Var],
) -> Result<ForwardTrace> {
    if pools.len() != vit.blocks.len() {
        return Err(Error::Config(format!(
            "deep prompting needs one pool per layer: {} pools for {} layers",
            pools.len(),
            vit.blocks.len()
        )));
    }
    let mut z = vit.embed(g, patches)?;
    let mut layers = Vec::with_capacity(vit.blocks.len());
    for (i, (blk, &pool)) in vit.blocks.iter().zip(pools).enumerate() {
        check_pool(g, vit, pool)?;
        let n = rows(g, pool);
        let p = (n > 0).then_some(pool);
        let out = layer_forward(g, blk, &vit.config, z, p, AttentionMode::Vanilla)?;
        layers.push(LayerTrace {
            z: out.z,
            prompts_in: p,
            prompts_out: out.prompts,
            cls_attention: out.cls_attention,
            segments: p
                .map(|_| vec![Segment { kind: PromptKind::Deep(i), len: n }])
                .unwrap_or_default(),
        });
        z = out.z;
    }
    let logits = vit.classify(g, head, z)?;
    Ok(ForwardTrace { logits, layers })
}

/// Per-layer behaviour of the general engine.
#[derive(Clone, Debug)]
pub struct EngineOptions {
    /// Attention mode per layer.
    pub attention: Vec<AttentionMode>,
    /// Per hierarchy: whether it receives an attribute prompt.
    pub ap_groups: Vec<bool>,
    pub ap_per_layer: bool,
    pub n_a: usize,
    pub lambda_a: f64,
    pub temperature: f64,
}

impl EngineOptions {
    /// Vanilla attention everywhere, no attribute prompts.
    pub fn plain(partition: &HierarchyPartition) -> Self {
        EngineOptions {
            attention: vec![AttentionMode::Vanilla; partition.num_layers()],
            ap_groups: vec![false; partition.num_groups()],
            ap_per_layer: false,
            n_a: 0,
            lambda_a: 0.0,
            temperature: 1.0,
        }
    }

    pub fn from_plan(plan: &Plan, hyper: &PromptHyper) -> Self {
        let n = plan.partition.num_layers();
        EngineOptions {
            attention: (0..n).map(|l| plan.attention(hyper, l)).collect(),
            ap_groups: (0..plan.partition.num_groups())
                .map(|k| plan.ap_group(hyper, k))
                .collect(),
            ap_per_layer: hyper.ap_per_layer,
            n_a: hyper.n_a,
            lambda_a: hyper.lambda_a,
            temperature: hyper.attr_temperature,
        }
    }
}

fn build_attribute(
    g: &mut Graph,
    vit: &BoundViT,
    layer: usize,
    z: Var,
    prompts: &BoundPrompts,
    opts: &EngineOptions,
) -> Result<Option<Var>> {
    if opts.n_a == 0 {
        return Ok(None);
    }
    let (Some(base), Some(protos)) = (prompts.attr_base, prompts.prototypes) else {
        return Err(Error::Config(
            "attribute prompts need a learnable base and a prototype set".into(),
        ));
    };
    let blk = &vit.blocks[layer];
    let row = instance_cls_attention(g, blk, &vit.config, z)?;
    let picked = cls_attention_topk(&row, rows(g, z), opts.n_a)?;
    let idx: Vec<usize> = picked.iter().map(|i| i + 1).collect();
    let tokens = g.gather_rows(z, &idx)?;
    Ok(Some(attribute_prompt(g, tokens, protos, base, opts.lambda_a, opts.temperature)?))
}

/// General hierarchy-aware forward pass; see the module docs for the layout.
pub fn forward_engine(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    partition: &HierarchyPartition,
    prompts: &BoundPrompts,
    opts: &EngineOptions,
) -> Result<ForwardTrace> {
    let n_layers = vit.blocks.len();
    if partition.num_layers() != n_layers {
        return Err(Error::Config(format!(
            "partition covers {} layers, backbone has {}",
            partition.num_layers(),
            n_layers
        )));
    }
    if prompts.pools.len() != partition.num_groups() {
        return Err(Error::Config(format!(
            "{} prompt pools for {} hierarchies",
            prompts.pools.len(),
            partition.num_groups()
        )));
    }
    if opts.attention.len() != n_layers || opts.ap_groups.len() != partition.num_groups() {
        return Err(Error::Config("engine options do not match the partition".into()));
    }
    for &p in &prompts.pools {
        check_pool(g, vit, p)?;
    }
    if let SspBinding::PerLayer(v) = &prompts.ssp {
        if v.len() != n_layers {
            return Err(Error::Config(format!(
                "{} per-layer shared pools for {} layers",
                v.len(),
                n_layers
            )));
        }
    }
    let mut z = vit.embed(g, patches)?;
    let mut carried: Vec<(PromptKind, Var)> = Vec::new();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let group = partition.group_of(l).expect("partition covers every layer");
        if let Some(k) = partition.entry_of(l) {
            carried.clear();
            let pool = prompts.pools[k];
            if rows(g, pool) > 0 {
                carried.push((PromptKind::Independent(k), pool));
            }
            if opts.ap_groups[k] {
                if let Some(a) = build_attribute(g, vit, l, z, prompts, opts)? {
                    carried.push((PromptKind::Attribute(k), a));
                }
            }
        } else if opts.ap_per_layer && opts.ap_groups[group] {
            if let Some(a) = build_attribute(g, vit, l, z, prompts, opts)? {
                for seg in carried.iter_mut() {
                    if matches!(seg.0, PromptKind::Attribute(_)) {
                        seg.1 = a;
                    }
                }
            }
        }
        let mut parts = carried.clone();
        if let Some(s) = prompts.ssp.at(l) {
            check_pool(g, vit, s)?;
            if rows(g, s) > 0 {
                parts.push((PromptKind::Shared, s));
            }
        }
        let segments: Vec<Segment> = parts
            .iter()
            .map(|&(kind, v)| Segment { kind, len: rows(g, v) })
            .collect();
        let prompts_in = match parts.len() {
            0 => None,
            1 => Some(parts[0].1),
            _ => {
                let vars: Vec<Var> = parts.iter().map(|p| p.1).collect();
                Some(g.concat_rows(&vars)?)
            }
        };
        let out = layer_forward(g, &vit.blocks[l], &vit.config, z, prompts_in, opts.attention[l])?;
        if let Some(p_out) = out.prompts {
            if parts.len() == 1 {
                for seg in carried.iter_mut() {
                    seg.1 = p_out;
                }
            } else {
                let mut offset = 0;
                for seg in carried.iter_mut() {
                    let n = rows(g, seg.1);
                    seg.1 = g.slice_rows(p_out, offset, n)?;
                    offset += n;
                }
            }
        }
        layers.push(LayerTrace {
            z: out.z,
            prompts_in,
            prompts_out: out.prompts,
            cls_attention: out.cls_attention,
            segments,
        });
        z = out.z;
    }
    let logits = vit.classify(g, head, z)?;
    Ok(ForwardTrace { logits, layers })
}

/// Independent pools over a hierarchy partition, vanilla attention.
pub fn forward_sip(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    partition: &HierarchyPartition,
    pools: &[Var],
) -> Result<ForwardTrace> {
    let prompts = BoundPrompts {
        pools: pools.to_vec(),
        ..BoundPrompts::empty()
    };
    forward_engine(g, vit, head, patches, partition, &prompts, &EngineOptions::plain(partition))
}

/// `base` plus the shared pool at every layer, vanilla attention. A base
/// without prompts is a single-hierarchy partition with an empty pool.
pub fn forward_ssp(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    partition: &HierarchyPartition,
    pools: &[Var],
    ssp: SspBinding,
) -> Result<ForwardTrace> {
    let prompts = BoundPrompts {
        pools: pools.to_vec(),
        ssp,
        ..BoundPrompts::empty()
    };
    forward_engine(g, vit, head, patches, partition, &prompts, &EngineOptions::plain(partition))
}

/// Forward pass for a resolved plan. `prompts` must come from a
/// [`PromptState`] initialised for the same plan.
pub fn forward_plan(
    g: &mut Graph,
    vit: &BoundViT,
    head: &BoundHead,
    patches: Var,
    plan: &Plan,
    hyper: &PromptHyper,
    prompts: &BoundPrompts,
) -> Result<ForwardTrace> {
    if !plan.prompts {
        return crate::vit::forward_plain(g, vit, head, patches);
    }
    forward_engine(
        g,
        vit,
        head,
        patches,
        &plan.partition,
        prompts,
        &EngineOptions::from_plan(plan, hyper),
    )
}

/// Trainable parameter count (prompts plus head) of `plan`.
pub fn trainable_param_count(plan: &Plan, hyper: &PromptHyper, d: usize, classes: usize) -> usize {
    let head = d * classes + classes;
    if !plan.prompts {
        return head;
    }
    let mut n = plan.partition.num_groups() * hyper.n_p * d;
    if plan.ssp {
        n += hyper.n_ss * d;
    }
    if plan.ap && hyper.m_a > 0 {
        n += hyper.n_a * d;
    }
    n + head
}
