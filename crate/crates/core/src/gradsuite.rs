//! Finite-difference checks of every differentiable path used in tuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attributes::attribute_prompt;
use crate::autodiff::{GradCheck, GradCheckReport, Graph, Var, DEFAULT_EPS};
use crate::error::Result;
use crate::hierarchy::HierarchyPartition;
use crate::losses::{combined_loss, pml, trace_pml};
use crate::prompts::{
    forward_engine, BoundPrompts, EngineOptions, PromptHyper, SspBinding, StrategyMode,
    StrategySpec,
};
use crate::tensor::Tensor;
use crate::vit::{attention_decoupled, forward_plain, Head, ViT, ViTConfig};

pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub elements: usize,
    pub passed: bool,
}

impl ComponentReport {
    fn from(name: &str, r: &GradCheckReport) -> Self {
        ComponentReport {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            elements: r.inputs.iter().map(|i| i.analytic.len()).sum(),
            passed: r.passed(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub components: Vec<ComponentReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22} {:>12} {:>10} {:>9}  status\n", "component", "max_rel_err", "tol", "elements");
        for c in &self.components {
            out.push_str(&format!(
                "{:<22} {:>12.3e} {:>10.1e} {:>9}  {}\n",
                c.name,
                c.max_rel_err,
                c.tol,
                c.elements,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

/// `Σ w ⊙ x` with a fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn checker(tol: f64, fault: Option<f64>) -> GradCheck {
    let c = GradCheck::new(DEFAULT_EPS, tol);
    match fault {
        Some(f) => c.with_softmax_fault(f),
        None => c,
    }
}

/// Prompt matching loss on 4 prompts and 6 tokens.
pub fn check_pml(seed: u64, tol: f64, fault: Option<f64>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [normal(&mut rng, &[4, 5]), normal(&mut rng, &[6, 5])];
    checker(tol, fault).run(|g, v| pml(g, v[0], v[1]), &inputs)
}

/// Attribute prompt with respect to the selected tokens and the learnable
/// base; prototypes are constants.
pub fn check_attribute(seed: u64, tol: f64, fault: Option<f64>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = normal(&mut rng, &[4, 5]);
    let w = normal(&mut rng, &[3, 5]);
    let inputs = [normal(&mut rng, &[3, 5]), normal(&mut rng, &[3, 5])];
    checker(tol, fault).run(
        |g, v| {
            let a = g.constant(protos.clone());
            let p = attribute_prompt(g, v[0], a, v[1], 0.1, 1.0)?;
            weighted_sum(g, p, &w)
        },
        &inputs,
    )
}

pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        num_layers: 3,
        embed_dim: 8,
        num_heads: 2,
        patch_grid: 2,
        patch_size: 2,
        mlp_ratio: 2,
        image_channels: 1,
        ln_eps: 1e-10,
    }
}

/// Decoupled attention outputs (instances and prompt-to-all branch) with
/// respect to normalised instance and prompt tokens.
pub fn check_decoupled(seed: u64, tol: f64, fault: Option<f64>) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let vit = ViT::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD);
    let wz = normal(&mut rng, &[4, 8]);
    let wp = normal(&mut rng, &[2, 8]);
    let inputs = [normal(&mut rng, &[4, 8]), normal(&mut rng, &[2, 8])];
    checker(tol, fault).run(
        |g, v| {
            let bv = vit.bind(g, false);
            let out = attention_decoupled(g, &bv.blocks[0], &cfg, v[0], Some(v[1]), 0.1, true)?;
            let a = weighted_sum(g, out.instances, &wz)?;
            let b = weighted_sum(g, out.prompts.expect("p2ip requested"), &wp)?;
            g.add(a, b)
        },
        &inputs,
    )
}

/// Combined loss of the full method on a tiny backbone, with respect to
/// every trainable tensor: two hierarchy pools, the shared pool, the
/// attribute base and the head.
pub fn check_combined(seed: u64, tol: f64, fault: Option<f64>) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let vit = ViT::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC);
    let d = cfg.embed_dim;
    let classes = 3;
    let patches = normal(&mut rng, &[cfg.num_patches(), cfg.patch_dim()]);
    let protos = normal(&mut rng, &[3, d]);
    let partition = HierarchyPartition::from_sizes(&[1, 2])?;
    let hyper = PromptHyper {
        n_p: 2,
        n_ss: 2,
        n_a: 2,
        n_m: 2,
        m_a: 2,
        k: 3,
        ..PromptHyper::default()
    };
    let plan = StrategySpec::new(StrategyMode::ShipFull)
        .with_partition(partition.clone())
        .resolve(cfg.num_layers, &hyper, None)?;
    let opts = EngineOptions::from_plan(&plan, &hyper);
    let inputs = [
        normal(&mut rng, &[2, d]),
        normal(&mut rng, &[2, d]),
        normal(&mut rng, &[2, d]),
        normal(&mut rng, &[2, d]),
        normal(&mut rng, &[d, classes]),
        normal(&mut rng, &[classes]),
    ];
    checker(tol, fault).run(
        |g, v| {
            let bv = vit.bind(g, false);
            let head = crate::vit::BoundHead { w: v[4], b: v[5] };
            let prompts = BoundPrompts {
                pools: vec![v[0], v[1]],
                ssp: SspBinding::Shared(v[2]),
                attr_base: Some(v[3]),
                prototypes: Some(g.constant(protos.clone())),
            };
            let x = g.constant(patches.clone());
            let trace = forward_engine(g, &bv, &head, x, &partition, &prompts, &opts)?;
            let m = trace_pml(g, &trace, hyper.n_m)?;
            combined_loss(g, trace.logits, 1, m, hyper.lambda_m)
        },
        &inputs,
    )
}

/// Cross-entropy of the plain backbone with respect to its patch embedding
/// and first block, the path used when building the frozen backbone.
pub fn check_backbone(seed: u64, tol: f64, fault: Option<f64>) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let vit = ViT::init(cfg.clone(), seed)?;
    let head = Head::init(cfg.embed_dim, 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    let patches = normal(&mut rng, &[cfg.num_patches(), cfg.patch_dim()]);
    let named = vit.named_params();
    let picked = ["patch_w", "blocks.0.wq", "blocks.0.ln1_g", "blocks.0.w1", "blocks.2.wv"];
    let inputs: Vec<Tensor> = picked
        .iter()
        .map(|n| {
            let t = &named.iter().find(|(m, _)| m == n).expect("known name").1;
            let mut t = (***t).clone();
            t.data_mut().iter_mut().for_each(|x| *x += 0.1 * rand::Rng::random::<f64>(&mut rng));
            t
        })
        .collect();
    checker(tol, fault).run(
        |g, v| {
            let mut bv = vit.bind(g, false);
            bv.patch_w = v[0];
            bv.blocks[0].wq = v[1];
            bv.blocks[0].ln1_g = v[2];
            bv.blocks[0].w1 = v[3];
            bv.blocks[2].wv = v[4];
            let hb = head.bind(g, false);
            let x = g.constant(patches.clone());
            let trace = forward_plain(g, &bv, &hb, x)?;
            g.cross_entropy(trace.logits, 2)
        },
        &inputs,
    )
}

/// Runs every component. `fault` corrupts softmax backward in all of them.
pub fn run_suite(seed: u64, tol: f64, fault: Option<f64>) -> Result<SuiteReport> {
    type Check = fn(u64, f64, Option<f64>) -> Result<GradCheckReport>;
    let checks: [(&str, Check); 5] = [
        ("prompt_matching", check_pml),
        ("attribute_prompt", check_attribute),
        ("decoupled_attention", check_decoupled),
        ("combined_loss", check_combined),
        ("backbone", check_backbone),
    ];
    let mut components = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        components.push(ComponentReport::from(name, &f(seed, tol, fault)?));
    }
    Ok(SuiteReport { components })
}
