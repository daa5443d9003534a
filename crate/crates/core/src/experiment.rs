//! Experiment configuration and the pipelines behind the command-line tool.
//!
//! One JSON file fully determines a run. Every pipeline writes its outputs
//! into a directory; given the same config and seed the files are identical.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributes::{kmeans, PrototypeSet, PrototypeSource};
use crate::autodiff::Graph;
use crate::data::{generate_task, read_checkpoint, read_dump, write_checkpoint, write_prototypes, write_tensors, TaskSpec};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteReport, DEFAULT_TOL};
use crate::hierarchy::{
    affinity_from_layer_tensors, affinity_matrix, affinity_sample_indices, greedy_partition,
    sweep_is_monotone, threshold_sweep, AffinityMatrix, GroupingRule, HierarchyPartition,
    SweepEntry,
};
use crate::prompts::{
    trainable_param_count, P2ipPolicy, Plan, PromptHyper, PromptState, StrategyMode, StrategySpec,
};
use crate::tensor::Tensor;
use crate::train::{fit, samples_from, PretrainObjective, RunLog, Sample, TrainConfig, TuneObjective};
use crate::vit::{Head, ViT, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyParams {
    pub threshold: f64,
    pub rule: GroupingRule,
    /// Thresholds reported by the analysis sweep.
    pub sweep: Vec<f64>,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        HierarchyParams {
            threshold: 0.95,
            rule: GroupingRule::Anchor,
            sweep: vec![1.0, 0.99, 0.98, 0.97, 0.96, 0.95, 0.9, 0.8, 0.7, 0.5, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptParams {
    pub n_p: usize,
    pub n_ss: usize,
}

impl Default for PromptParams {
    fn default() -> Self {
        PromptParams { n_p: 50, n_ss: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeParams {
    pub k: usize,
    pub m_a: usize,
    pub lambda_a: f64,
    pub n_a: usize,
    pub temperature: f64,
    pub per_layer: bool,
    pub max_iter: usize,
}

impl Default for AttributeParams {
    fn default() -> Self {
        AttributeParams {
            k: 200,
            m_a: 2,
            lambda_a: 0.1,
            n_a: 10,
            temperature: 1.0,
            per_layer: false,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionParams {
    pub lambda_d: f64,
    pub p2ip: P2ipPolicy,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams {
            lambda_d: 0.1,
            p2ip: P2ipPolicy::Last,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingParams {
    pub lambda_m: f64,
    pub n_m: usize,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams { lambda_m: 0.5, n_m: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationParams {
    /// Run the component on/off rows.
    pub components: bool,
    pub k: Vec<usize>,
    pub m_a: Vec<usize>,
    pub n_m: Vec<usize>,
    pub lambda_d: Vec<f64>,
}

impl Default for AblationParams {
    fn default() -> Self {
        AblationParams {
            components: true,
            k: vec![20, 50, 100, 200],
            m_a: vec![1, 2, 3, 4],
            n_m: vec![5, 10, 20, 50],
            lambda_d: vec![0.01, 0.1, 0.3, 0.5],
        }
    }
}

fn upstream_default() -> TaskSpec {
    TaskSpec {
        semantic_depth: 0.0,
        template_seed: 11,
        ..TaskSpec::default()
    }
}

fn downstream_default() -> TaskSpec {
    TaskSpec {
        semantic_depth: 1.0,
        template_seed: 23,
        ..TaskSpec::default()
    }
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec::new(StrategyMode::ShipFull)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: ViTConfig,
    /// Task used to build the frozen backbone.
    pub upstream: TaskSpec,
    pub pretrain: TrainConfig,
    /// Transfer task for tuning.
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub strategy: StrategySpec,
    pub hierarchy: HierarchyParams,
    pub prompts: PromptParams,
    pub attributes: AttributeParams,
    pub attention: AttentionParams,
    pub matching: MatchingParams,
    pub ablation: AblationParams,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: ViTConfig::default(),
            upstream: upstream_default(),
            pretrain: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            task: downstream_default(),
            train: TrainConfig::default(),
            strategy: StrategySpec::default(),
            hierarchy: HierarchyParams::default(),
            prompts: PromptParams::default(),
            attributes: AttributeParams::default(),
            attention: AttentionParams::default(),
            matching: MatchingParams::default(),
            ablation: AblationParams::default(),
            seed: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn hyper(&self) -> PromptHyper {
        PromptHyper {
            n_p: self.prompts.n_p,
            n_ss: self.prompts.n_ss,
            threshold: self.hierarchy.threshold,
            lambda_d: self.attention.lambda_d,
            lambda_m: self.matching.lambda_m,
            lambda_a: self.attributes.lambda_a,
            n_a: self.attributes.n_a,
            n_m: self.matching.n_m,
            m_a: self.attributes.m_a,
            k: self.attributes.k,
            attr_temperature: self.attributes.temperature,
            ap_per_layer: self.attributes.per_layer,
            p2ip: self.attention.p2ip,
        }
    }

    /// Checks everything that can be checked without running the model.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.upstream.validate()?;
        self.task.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let hyper = self.hyper();
        hyper.validate()?;
        for &l in &self.hierarchy.sweep {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("sweep threshold {} outside [0, 1]", l)));
            }
        }
        for &l in &self.ablation.lambda_d {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("ablation lambda_d {} outside [0, 1]", l)));
            }
        }
        let patches = self.backbone.num_patches();
        let n_layers = self.backbone.num_layers;
        if let Some(p) = &self.strategy.partition {
            if p.num_layers() != n_layers {
                return Err(Error::Config(format!(
                    "partition covers {} layers, backbone has {}",
                    p.num_layers(),
                    n_layers
                )));
            }
        }
        if self.hierarchy.sweep.is_empty() {
            return Err(Error::Config("hierarchy sweep must not be empty".into()));
        }
        let plan_shape = self.strategy.resolve(n_layers, &hyper, Some(&HierarchyPartition::singletons(n_layers)));
        let plan = plan_shape?;
        if plan.ap {
            if self.attributes.n_a > patches {
                return Err(Error::Config(format!(
                    "n_a = {} exceeds the {} patch tokens",
                    self.attributes.n_a, patches
                )));
            }
            if self.attributes.k > self.task.train_size {
                return Err(Error::Config(format!(
                    "k = {} exceeds the {} training samples",
                    self.attributes.k, self.task.train_size
                )));
            }
            if let Some(p) = &self.strategy.partition {
                if self.attributes.m_a > p.num_groups() {
                    return Err(Error::Config(format!(
                        "m_a = {} exceeds the {} hierarchies of the partition",
                        self.attributes.m_a,
                        p.num_groups()
                    )));
                }
            }
        }
        if plan.pml && self.matching.n_m > patches {
            return Err(Error::Config(format!(
                "n_m = {} exceeds the {} patch tokens",
                self.matching.n_m, patches
            )));
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

// ---- pretraining ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub vit: ViT,
    pub head: Head,
    pub log: RunLog,
}

/// Trains backbone and head on the upstream task.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<Pretrained> {
    cfg.validate()?;
    let (train, test) = generate_task(&cfg.upstream, &cfg.backbone, seed)?;
    let train = samples_from(&train, &cfg.backbone)?;
    let test = samples_from(&test, &cfg.backbone)?;
    let mut obj = PretrainObjective {
        vit: ViT::init(cfg.backbone.clone(), seed)?,
        head: Head::init(cfg.backbone.embed_dim, cfg.upstream.num_classes, seed ^ 0x4EAD),
        train: &train,
        test: &test,
    };
    let log = fit(&mut obj, &cfg.pretrain, seed)?;
    Ok(Pretrained {
        vit: obj.vit,
        head: obj.head,
        log,
    })
}

pub const CHECKPOINT_FILE: &str = "backbone.bin";

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<Pretrained> {
    let p = pretrain(cfg, seed)?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &p.vit, Some(&p.head))?;
    write_text(&out.join("pretrain_log.csv"), &p.log.to_csv())?;
    write_json(&out.join("pretrain_log.json"), &p.log)?;
    Ok(p)
}

pub fn load_backbone(path: &Path) -> Result<ViT> {
    if !path.exists() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(read_checkpoint(path)?.0)
}

// ---- analysis ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RuleSweep {
    pub rule: GroupingRule,
    pub monotone: bool,
    pub entries: Vec<SweepEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Analysis {
    pub affinity: AffinityMatrix,
    pub sweeps: Vec<RuleSweep>,
    pub partition: HierarchyPartition,
}

/// Downstream train and test samples for `seed`.
pub fn downstream(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = generate_task(&cfg.task, &cfg.backbone, seed)?;
    Ok((samples_from(&train, &cfg.backbone)?, samples_from(&test, &cfg.backbone)?))
}

fn sweep_and_partition(cfg: &ExperimentConfig, affinity: AffinityMatrix) -> Result<Analysis> {
    let sweeps = [GroupingRule::Anchor, GroupingRule::Consecutive]
        .into_iter()
        .map(|rule| {
            let entries = threshold_sweep(&affinity, &cfg.hierarchy.sweep, rule)?;
            Ok(RuleSweep {
                rule,
                monotone: sweep_is_monotone(&entries),
                entries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let partition = greedy_partition(&affinity, cfg.hierarchy.threshold, cfg.hierarchy.rule)?;
    Ok(Analysis {
        affinity,
        sweeps,
        partition,
    })
}

/// Affinity over the downstream training samples (capped, fixed-seed
/// subsample) and the partitions it induces.
pub fn analyze(cfg: &ExperimentConfig, vit: &ViT, seed: u64) -> Result<Analysis> {
    let (train, _) = downstream(cfg, seed)?;
    let idx = affinity_sample_indices(train.len(), seed);
    let patches: Vec<Tensor> = idx.iter().map(|&i| train[i].patches.clone()).collect();
    let affinity = affinity_matrix(vit, &patches)?;
    sweep_and_partition(cfg, affinity)
}

/// Same analysis on externally dumped activations.
pub fn analyze_dump(cfg: &ExperimentConfig, dump: &Path) -> Result<Analysis> {
    let dump = read_dump(dump)?;
    let affinity = affinity_from_layer_tensors(&dump.layers)?;
    sweep_and_partition(cfg, affinity)
}

pub fn write_analysis(out: &Path, a: &Analysis) -> Result<()> {
    write_json(&out.join("affinity.json"), &a.affinity)?;
    write_text(&out.join("affinity.csv"), &a.affinity.to_csv())?;
    write_json(&out.join("sweep.json"), &a.sweeps)?;
    write_json(&out.join("partition.json"), &a.partition)
}

pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    dump: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<Analysis> {
    cfg.validate()?;
    let a = match (dump, checkpoint) {
        (Some(d), _) => analyze_dump(cfg, d)?,
        (None, Some(c)) => analyze(cfg, &load_backbone(c)?, seed)?,
        (None, None) => {
            return Err(Error::Validation("analyze needs a checkpoint or an activation dump".into()))
        }
    };
    write_analysis(out, &a)?;
    Ok(a)
}

// ---- tuning --------------------------------------------------------------

/// Final-layer patch-token means of the frozen backbone for up to 1024
/// fixed-seed training samples, clustered into `k` prototypes.
pub fn build_prototypes(
    vit: &ViT,
    train: &[Sample],
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    let idx = affinity_sample_indices(train.len(), seed);
    let d = vit.config.embed_dim;
    let feats: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let bv = vit.bind(&mut g, false);
            let head = Head::zeros(d, 1).bind(&mut g, false);
            let x = g.constant(train[i].patches.clone());
            let trace = crate::vit::forward_plain(&mut g, &bv, &head, x)?;
            let z = g.value(trace.layers.last().expect("at least two layers").z);
            let mut mean = vec![0.0; d];
            for r in 1..z.rows() {
                for (m, v) in mean.iter_mut().zip(z.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= (z.rows() - 1) as f64);
            Ok(mean)
        })
        .collect::<Result<_>>()?;
    let features = Tensor::new(vec![feats.len(), d], feats.concat())?;
    let km = kmeans(&features, k, max_iter, seed)?;
    PrototypeSet::new(
        km.centroids,
        PrototypeSource {
            layer: vit.config.num_layers - 1,
            pooling: "mean of patch tokens, CLS excluded".into(),
            samples: idx.len(),
            seed,
        },
    )
}

#[derive(Clone, Debug)]
pub struct Tuned {
    pub plan: Plan,
    pub log: RunLog,
    pub head: Head,
    pub state: PromptState,
    pub prototypes: Option<PrototypeSet>,
}

impl Tuned {
    pub fn final_acc(&self) -> f64 {
        self.log.last().map(|e| e.test_acc).unwrap_or(f64::NAN)
    }

    pub fn final_test_loss(&self) -> f64 {
        self.log.last().map(|e| e.test_loss).unwrap_or(f64::NAN)
    }
}

/// Data and backbone shared by all tuning runs of one seed.
pub struct TuneContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub vit: &'a ViT,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    partition: Option<HierarchyPartition>,
}

impl<'a> TuneContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, vit: &'a ViT, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vit.config != cfg.backbone {
            return Err(Error::Validation(
                "checkpoint architecture differs from the configured backbone".into(),
            ));
        }
        let (train, test) = downstream(cfg, seed)?;
        Ok(TuneContext {
            cfg,
            vit,
            train,
            test,
            seed,
            partition: None,
        })
    }

    pub fn with_partition(mut self, p: Option<HierarchyPartition>) -> Self {
        self.partition = p;
        self
    }

    /// The partition given by the caller, the config, or inferred from the
    /// backbone's affinity on the training samples.
    pub fn partition(&mut self) -> Result<HierarchyPartition> {
        if let Some(p) = self.partition.clone().or_else(|| self.cfg.strategy.partition.clone()) {
            return Ok(p);
        }
        let idx = affinity_sample_indices(self.train.len(), self.seed);
        let patches: Vec<Tensor> = idx.iter().map(|&i| self.train[i].patches.clone()).collect();
        let s = affinity_matrix(self.vit, &patches)?;
        let p = greedy_partition(&s, self.cfg.hierarchy.threshold, self.cfg.hierarchy.rule)?;
        info!("inferred hierarchy sizes {:?}", p.sizes());
        self.partition = Some(p.clone());
        Ok(p)
    }

    pub fn run(&mut self, spec: &StrategySpec, hyper: &PromptHyper) -> Result<Tuned> {
        let fallback = if spec.mode.needs_partition() && spec.partition.is_none() {
            Some(self.partition()?)
        } else {
            None
        };
        let n_layers = self.vit.config.num_layers;
        let plan = spec.resolve(n_layers, hyper, fallback.as_ref())?;
        let d = self.vit.config.embed_dim;
        let classes = self.cfg.task.num_classes;
        let state = PromptState::init(&plan, hyper, d, self.seed ^ 0x9E0)?;
        let head = Head::zeros(d, classes);
        let prototypes = if plan.ap && state.attr_base.is_some() {
            Some(build_prototypes(
                self.vit,
                &self.train,
                hyper.k,
                self.cfg.attributes.max_iter,
                self.seed,
            )?)
        } else {
            None
        };
        let mut obj = TuneObjective::new(
            self.vit,
            head,
            state,
            plan.clone(),
            prototypes.as_ref(),
            &self.train,
            &self.test,
        )?;
        let mut log = fit(&mut obj, &self.cfg.train, self.seed)?;
        log.trainable_params = trainable_param_count(&plan, hyper, d, classes);
        let (head, state) = obj.into_parts();
        Ok(Tuned {
            plan,
            log,
            head,
            state,
            prototypes,
        })
    }
}

pub fn write_tuned(out: &Path, t: &Tuned) -> Result<()> {
    let name = t.plan.mode.name().replace('+', "_");
    write_text(&out.join(format!("{}_log.csv", name)), &t.log.to_csv())?;
    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: &'a str,
        hierarchy_sizes: Vec<usize>,
        use_ssp: bool,
        use_ap: bool,
        use_pml: bool,
        use_da: bool,
        final_test_acc: f64,
        final_test_loss: f64,
        final_train_pml: f64,
        log: &'a RunLog,
    }
    write_json(
        &out.join(format!("{}_log.json", name)),
        &Summary {
            strategy: t.plan.mode.name(),
            hierarchy_sizes: t.plan.partition.sizes(),
            use_ssp: t.plan.ssp,
            use_ap: t.plan.ap,
            use_pml: t.plan.pml,
            use_da: t.plan.da,
            final_test_acc: t.final_acc(),
            final_test_loss: t.final_test_loss(),
            final_train_pml: t.log.last().map(|e| e.train_pml).unwrap_or(0.0),
            log: &t.log,
        },
    )?;
    let mut names = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (n, p) in t.state.params() {
        names.push(n);
        tensors.push(p);
    }
    names.push("head.w".into());
    names.push("head.b".into());
    tensors.push(&t.head.w);
    tensors.push(&t.head.b);
    let meta = serde_json::json!({ "kind": "prompts", "strategy": t.plan.mode.name(), "names": names });
    write_tensors(&out.join(format!("{}_params.bin", name)), &meta, &tensors)?;
    if let Some(p) = &t.prototypes {
        write_prototypes(&out.join("prototypes.bin"), p)?;
    }
    Ok(())
}

pub fn cmd_tune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    partition: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<Tuned> {
    cfg.validate()?;
    let vit = load_backbone(checkpoint)?;
    let partition = match partition {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let part: HierarchyPartition = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("partition {}: {}", p.display(), e)))?;
            Some(part)
        }
        None => None,
    };
    let mut ctx = TuneContext::new(cfg, &vit, seed)?.with_partition(partition);
    let t = ctx.run(&cfg.strategy, &cfg.hyper())?;
    write_tuned(out, &t)?;
    Ok(t)
}

// ---- ablation ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub section: String,
    pub setting: String,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub trainable_params: Option<usize>,
    pub status: String,
}

fn component_rows() -> Vec<(&'static str, StrategySpec)> {
    let mk = |mode, ap, pml, da| StrategySpec {
        mode,
        partition: None,
        use_ap: ap,
        use_pml: pml,
        use_da: da,
    };
    vec![
        ("vpt_deep", mk(StrategyMode::VptDeep, false, false, false)),
        ("sip", mk(StrategyMode::Sip, false, false, false)),
        ("sip+ssp", mk(StrategyMode::SipSsp, false, false, false)),
        ("sip+ssp+ap", mk(StrategyMode::SipSsp, true, false, false)),
        ("sip+ssp+ap+pml", mk(StrategyMode::SipSsp, true, true, false)),
        ("ship_full", mk(StrategyMode::ShipFull, false, false, false)),
    ]
}

/// The cells of the ablation grid: component rows, then one axis at a time
/// around the full method.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<(String, String, StrategySpec, PromptHyper)> {
    let base = cfg.hyper();
    let mut cells = Vec::new();
    if cfg.ablation.components {
        for (name, mut spec) in component_rows() {
            spec.partition = cfg.strategy.partition.clone();
            cells.push(("components".to_string(), name.to_string(), spec, base.clone()));
        }
    }
    let full = StrategySpec {
        partition: cfg.strategy.partition.clone(),
        ..StrategySpec::new(StrategyMode::ShipFull)
    };
    let mut axis = |section: &str, values: Vec<(String, PromptHyper)>| {
        for (label, h) in values {
            cells.push((section.to_string(), label, full.clone(), h));
        }
    };
    axis(
        "k",
        cfg.ablation.k.iter().map(|&k| (k.to_string(), PromptHyper { k, ..base.clone() })).collect(),
    );
    axis(
        "m_a",
        cfg.ablation.m_a.iter().map(|&m_a| (m_a.to_string(), PromptHyper { m_a, ..base.clone() })).collect(),
    );
    axis(
        "n_m",
        cfg.ablation.n_m.iter().map(|&n_m| (n_m.to_string(), PromptHyper { n_m, ..base.clone() })).collect(),
    );
    axis(
        "lambda_d",
        cfg.ablation
            .lambda_d
            .iter()
            .map(|&lambda_d| (lambda_d.to_string(), PromptHyper { lambda_d, ..base.clone() }))
            .collect(),
    );
    cells
}

fn run_cell(
    ctx: &mut TuneContext<'_>,
    section: String,
    setting: String,
    spec: &StrategySpec,
    hyper: &PromptHyper,
) -> Result<AblationCell> {
    let outcome = (|| {
        if hyper.n_m > ctx.vit.config.num_patches() || hyper.n_a > ctx.vit.config.num_patches() {
            return Err(Error::Config(format!(
                "token counts exceed the {} patches",
                ctx.vit.config.num_patches()
            )));
        }
        if hyper.k > ctx.train.len() {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} training samples",
                hyper.k,
                ctx.train.len()
            )));
        }
        ctx.run(spec, hyper)
    })();
    Ok(match outcome {
        Ok(t) => {
            let last = t.log.last().cloned();
            AblationCell {
                section,
                setting,
                test_acc: last.as_ref().map(|e| e.test_acc),
                test_loss: last.as_ref().map(|e| e.test_loss),
                train_loss: last.as_ref().map(|e| e.train_loss),
                trainable_params: Some(t.log.trainable_params),
                status: "ok".into(),
            }
        }
        Err(e @ (Error::Config(_) | Error::Validation(_) | Error::Numerical(_) | Error::Degenerate { .. })) => {
            AblationCell {
                section,
                setting,
                test_acc: None,
                test_loss: None,
                train_loss: None,
                trainable_params: None,
                status: format!("error: {}", e),
            }
        }
        Err(e) => return Err(e),
    })
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("section,setting,test_acc,test_loss,train_loss,trainable_params,status\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},\"{}\"\n",
            c.section,
            c.setting,
            opt(c.test_acc),
            opt(c.test_loss),
            opt(c.train_loss),
            c.trainable_params.map(|p| p.to_string()).unwrap_or_default(),
            c.status.replace('"', "'")
        ));
    }
    out
}

/// Runs every cell; a failing cell is recorded and the grid continues.
pub fn ablate(cfg: &ExperimentConfig, vit: &ViT, seed: u64) -> Result<Vec<AblationCell>> {
    let mut ctx = TuneContext::new(cfg, vit, seed)?;
    let mut cells = Vec::new();
    for (section, setting, spec, hyper) in ablation_cells(cfg) {
        info!("ablation cell {} = {}", section, setting);
        cells.push(run_cell(&mut ctx, section, setting, &spec, &hyper)?);
    }
    Ok(cells)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path, seed: u64) -> Result<Vec<AblationCell>> {
    cfg.validate()?;
    let vit = load_backbone(checkpoint)?;
    let cells = ablate(cfg, &vit, seed)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&cells))?;
    Ok(cells)
}

// ---- end to end ------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StrategyOutcome {
    pub test_acc: f64,
    pub test_loss: f64,
    pub log: RunLog,
}

impl From<&Tuned> for StrategyOutcome {
    fn from(t: &Tuned) -> Self {
        StrategyOutcome {
            test_acc: t.final_acc(),
            test_loss: t.final_test_loss(),
            log: t.log.clone(),
        }
    }
}

/// One seed of the full pipeline: pretrain upstream, then tune the linear
/// probe, deep prompts and the full method on the transfer task.
#[derive(Clone, Debug, Serialize)]
pub struct EndToEnd {
    pub seed: u64,
    pub pretrain_acc: f64,
    pub hierarchy_sizes: Vec<usize>,
    pub linear_probe: StrategyOutcome,
    pub vpt_deep: StrategyOutcome,
    pub ship_full: StrategyOutcome,
}

pub fn end_to_end(cfg: &ExperimentConfig, seed: u64) -> Result<EndToEnd> {
    let p = pretrain(cfg, seed)?;
    let mut ctx = TuneContext::new(cfg, &p.vit, seed)?;
    let hyper = cfg.hyper();
    let lp = ctx.run(&StrategySpec::new(StrategyMode::None), &hyper)?;
    let deep = ctx.run(&StrategySpec::new(StrategyMode::VptDeep), &hyper)?;
    let full_spec = StrategySpec {
        partition: cfg.strategy.partition.clone(),
        ..StrategySpec::new(StrategyMode::ShipFull)
    };
    let full = ctx.run(&full_spec, &hyper)?;
    Ok(EndToEnd {
        seed,
        pretrain_acc: p.log.last().map(|e| e.test_acc).unwrap_or(f64::NAN),
        hierarchy_sizes: full.plan.partition.sizes(),
        linear_probe: (&lp).into(),
        vpt_deep: (&deep).into(),
        ship_full: (&full).into(),
    })
}

// ---- gradient suite --------------------------------------------------------

pub fn cmd_gradcheck(out: &Path, seed: u64, fault: Option<f64>) -> Result<SuiteReport> {
    let report = run_suite(seed, DEFAULT_TOL, fault)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(report)
}
