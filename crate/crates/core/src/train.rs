//! Mini-batch training with AdamW and per-epoch evaluation.
//!
//! Every sample gets its own graph. Gradients of a batch are computed in
//! parallel and summed in sample order, so results do not depend on the
//! number of worker threads.

use std::sync::Arc;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributes::PrototypeSet;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, trace_pml};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::prompts::{forward_plan, Plan, PromptHyper, PromptState};
use crate::tensor::Tensor;
use crate::vit::{forward_plain, Head, ViT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Compute per-sample gradients of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean prompt matching loss over the epoch; zero when unused.
    pub train_pml: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    /// Kept out of serialized logs so reruns produce identical files.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunLog {
    pub name: String,
    pub seed: u64,
    pub trainable_params: usize,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss,test_acc,train_pml\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.test_loss, e.test_acc, e.train_pml
            ));
        }
        out
    }

    /// Same records without wall-clock data.
    pub fn same_results(&self, other: &RunLog) -> bool {
        self.to_csv() == other.to_csv()
            && self.trainable_params == other.trainable_params
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| a.lr == b.lr)
    }
}

/// A labelled sample already split into patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Tensor,
    pub label: usize,
}

pub fn samples_from(dataset: &crate::data::Dataset, cfg: &crate::vit::ViTConfig) -> Result<Vec<Sample>> {
    Ok(dataset
        .patches(cfg)?
        .into_iter()
        .zip(&dataset.labels)
        .map(|(patches, &label)| Sample { patches, label })
        .collect())
}

/// Result of one sample's forward (and optionally backward) pass.
#[derive(Clone, Debug)]
pub struct SampleOut {
    pub loss: f64,
    pub ce: f64,
    pub pml: f64,
    pub correct: bool,
    pub grads: Vec<Vec<f64>>,
}

/// What a training run optimises.
pub trait Objective: Sync {
    fn name(&self) -> String;
    fn param_sizes(&self) -> Vec<usize>;
    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>>;
    fn train_len(&self) -> usize;
    fn test_len(&self) -> usize;
    /// Forward pass on a train (`train == true`) or test sample; gradients
    /// are filled only when `grad` is set.
    fn sample(&self, train: bool, index: usize, grad: bool) -> Result<SampleOut>;
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Prompt tuning on a frozen backbone: prompts and head are trainable.
pub struct TuneObjective<'a> {
    pub vit: &'a ViT,
    pub head: Head,
    pub state: PromptState,
    pub plan: Plan,
    pub prototypes: Option<&'a PrototypeSet>,
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    /// Final CLS features of train and test samples for head-only runs.
    cached: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

/// Final normalised CLS feature `[1, d]` of each sample under `vit`.
pub fn cls_features(vit: &ViT, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let bv = vit.bind(&mut g, false);
            let x = g.constant(s.patches.clone());
            let mut z = bv.embed(&mut g, x)?;
            for blk in &bv.blocks {
                z = crate::vit::layer_forward(
                    &mut g,
                    blk,
                    &vit.config,
                    z,
                    None,
                    crate::vit::AttentionMode::Vanilla,
                )?
                .z;
            }
            let cls = g.slice_rows(z, 0, 1)?;
            let f = g.layer_norm(cls, bv.norm_g, bv.norm_b, vit.config.ln_eps)?;
            Ok(g.value(f).clone())
        })
        .collect()
}

impl<'a> TuneObjective<'a> {
    pub fn new(
        vit: &'a ViT,
        head: Head,
        state: PromptState,
        plan: Plan,
        prototypes: Option<&'a PrototypeSet>,
        train: &'a [Sample],
        test: &'a [Sample],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if plan.ap && state.attr_base.is_some() && prototypes.is_none() {
            return Err(Error::Config("attribute prompts need a prototype set".into()));
        }
        let cached = if plan.prompts {
            None
        } else {
            Some((cls_features(vit, train)?, cls_features(vit, test)?))
        };
        Ok(TuneObjective {
            vit,
            head,
            state,
            plan,
            prototypes,
            train,
            test,
            cached,
        })
    }

    pub fn hyper(&self) -> &PromptHyper {
        &self.state.hyper
    }

    pub fn into_parts(self) -> (Head, PromptState) {
        (self.head, self.state)
    }
}

impl Objective for TuneObjective<'_> {
    fn name(&self) -> String {
        self.plan.mode.name().to_string()
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.state.params().iter().map(|(_, t)| t.numel()).collect();
        s.push(self.head.w.numel());
        s.push(self.head.b.numel());
        s
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut p = self.state.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn test_len(&self) -> usize {
        self.test.len()
    }

    fn sample(&self, train: bool, index: usize, grad: bool) -> Result<SampleOut> {
        let s = if train { &self.train[index] } else { &self.test[index] };
        let mut g = Graph::new();
        let head = self.head.bind(&mut g, true);
        if let Some((tr, te)) = &self.cached {
            let f = if train { &tr[index] } else { &te[index] };
            let x = g.constant(f.clone());
            let logits = g.linear(x, head.w, head.b)?;
            let loss = g.cross_entropy(logits, s.label)?;
            let correct = argmax(g.value(logits).data()) == s.label;
            let value = g.value(loss).item();
            let grads = if grad {
                g.backward(loss)?;
                grads_of(&g, &[head.w, head.b])
            } else {
                Vec::new()
            };
            return Ok(SampleOut { loss: value, ce: value, pml: 0.0, correct, grads });
        }
        let vit = self.vit.bind(&mut g, false);
        let prompts = self.state.bind(&mut g, true, self.prototypes);
        let x = g.constant(s.patches.clone());
        let hyper = &self.state.hyper;
        let trace = forward_plan(&mut g, &vit, &head, x, &self.plan, hyper, &prompts)?;
        let matching = if self.plan.pml { trace_pml(&mut g, &trace, hyper.n_m)? } else { None };
        let ce = g.cross_entropy(trace.logits, s.label)?;
        let ce_value = g.value(ce).item();
        let loss = if train {
            combined_loss(&mut g, trace.logits, s.label, matching, hyper.lambda_m)?
        } else {
            ce
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on sample {}", index)));
        }
        let correct = argmax(g.value(trace.logits).data()) == s.label;
        let pml = matching.map(|m| g.value(m).item()).unwrap_or(0.0);
        let grads = if grad {
            g.backward(loss)?;
            let mut vars = prompts.vars();
            vars.extend([head.w, head.b]);
            grads_of(&g, &vars)
        } else {
            Vec::new()
        };
        Ok(SampleOut { loss: value, ce: ce_value, pml, correct, grads })
    }
}

/// Full training of backbone and head, used to build the frozen backbone.
pub struct PretrainObjective<'a> {
    pub vit: ViT,
    pub head: Head,
    pub train: &'a [Sample],
    pub test: &'a [Sample],
}

impl Objective for PretrainObjective<'_> {
    fn name(&self) -> String {
        "pretrain".into()
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.vit.named_params().iter().map(|(_, t)| t.numel()).collect();
        s.push(self.head.w.numel());
        s.push(self.head.b.numel());
        s
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut p = self.vit.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn test_len(&self) -> usize {
        self.test.len()
    }

    fn sample(&self, train: bool, index: usize, grad: bool) -> Result<SampleOut> {
        let s = if train { &self.train[index] } else { &self.test[index] };
        let mut g = Graph::new();
        let vit = self.vit.bind(&mut g, grad);
        let head = self.head.bind(&mut g, grad);
        let x = g.constant(s.patches.clone());
        let trace = forward_plain(&mut g, &vit, &head, x)?;
        let loss = g.cross_entropy(trace.logits, s.label)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on sample {}", index)));
        }
        let correct = argmax(g.value(trace.logits).data()) == s.label;
        let grads = if grad {
            g.backward(loss)?;
            let mut vars = vit.vars();
            vars.extend([head.w, head.b]);
            grads_of(&g, &vars)
        } else {
            Vec::new()
        };
        Ok(SampleOut { loss: value, ce: value, pml: 0.0, correct, grads })
    }
}

fn run<T, F>(parallel: bool, items: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        items.par_iter().map(|&i| f(i)).collect()
    } else {
        items.iter().map(|&i| f(i)).collect()
    }
}

/// Mean test loss and accuracy.
pub fn evaluate<O: Objective>(obj: &O, parallel: bool) -> Result<(f64, f64)> {
    let n = obj.test_len();
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    let idx: Vec<usize> = (0..n).collect();
    let outs = run(parallel, &idx, |i| obj.sample(false, i, false))?;
    let loss = outs.iter().map(|o| o.ce).sum::<f64>() / n as f64;
    let acc = outs.iter().filter(|o| o.correct).count() as f64 / n as f64;
    Ok((loss, acc))
}

/// Runs the optimisation loop and logs one record per epoch.
pub fn fit<O: Objective>(obj: &mut O, cfg: &TrainConfig, seed: u64) -> Result<RunLog> {
    cfg.validate()?;
    let n = obj.train_len();
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let sizes = obj.param_sizes();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let batches = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = RunLog {
        name: obj.name(),
        seed,
        trainable_params: sizes.iter().sum(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pml_sum) = (0.0, 0.0);
        let lr_epoch = lr_at(cfg, step, total);
        for batch in order.chunks(cfg.batch_size) {
            let view: &O = obj;
            let outs = run(cfg.parallel, batch, |i| view.sample(true, i, true))?;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            for o in &outs {
                loss_sum += o.loss;
                pml_sum += o.pml;
                for (acc, gr) in grads.iter_mut().zip(&o.grads) {
                    for (a, v) in acc.iter_mut().zip(gr) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            let lr = lr_at(cfg, step, total);
            opt.step(&mut obj.params_mut(), &grads, lr)?;
            step += 1;
        }
        let (test_loss, test_acc) = evaluate(obj, cfg.parallel)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_pml: pml_sum / n as f64,
            test_loss,
            test_acc,
            lr: lr_epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {}: train {:.4} test {:.4} acc {:.3}",
            log.name, epoch, rec.train_loss, rec.test_loss, rec.test_acc
        );
        log.epochs.push(rec);
    }
    Ok(log)
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Cosine => cosine_lr(cfg.lr, step, total),
        Schedule::Constant => cfg.lr,
    }
}
