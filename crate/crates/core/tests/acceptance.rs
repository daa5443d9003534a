//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiplab::attributes::{aggregate_attributes, attribute_prompt, kmeans};
use shiplab::autodiff::Graph;
use shiplab::experiment::{end_to_end, ExperimentConfig};
use shiplab::gradsuite::{run_suite, DEFAULT_TOL};
use shiplab::hierarchy::{greedy_partition, AffinityMatrix, GroupingRule, HierarchyPartition};
use shiplab::losses::pml;
use shiplab::prompts::*;
use shiplab::train::{fit, samples_from, TrainConfig, TuneObjective};
use shiplab::vit::{attention_decoupled, attention_vanilla, cross_attention, Head, ViT, ViTConfig};
use shiplab::Tensor;

const DESK: &str = include_str!("../../../configs/desk.json");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

fn reduction_identities() -> Outcome {
    let cfg = ViTConfig::default();
    let n = cfg.num_layers;
    let n_p = PromptHyper::default().n_p;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let vit = ViT::init(cfg.clone(), seed).unwrap();
        let head = Head::init(cfg.embed_dim, 10, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = normal(&mut rng, &[cfg.num_patches(), cfg.patch_dim()]);
        let pools: Vec<Tensor> = (0..n).map(|_| normal(&mut rng, &[n_p, cfg.embed_dim])).collect();
        let mut g = Graph::new();
        let bv = vit.bind(&mut g, false);
        let hb = head.bind(&mut g, false);
        let xv = g.constant(x);
        let pv: Vec<_> = pools.iter().map(|p| g.constant(p.clone())).collect();
        let sip1 = forward_sip(&mut g, &bv, &hb, xv, &HierarchyPartition::single(n), &pv[..1]).unwrap();
        let shallow = forward_vpt_shallow(&mut g, &bv, &hb, xv, pv[0]).unwrap();
        let sip_n = forward_sip(&mut g, &bv, &hb, xv, &HierarchyPartition::singletons(n), &pv).unwrap();
        let deep = forward_vpt_deep(&mut g, &bv, &hb, xv, &pv).unwrap();
        worst = worst
            .max(g.value(sip1.logits).max_abs_diff(g.value(shallow.logits)))
            .max(g.value(sip_n.logits).max_abs_diff(g.value(deep.logits)));
    }
    outcome(worst <= 1e-12, format!("max |Δlogits| = {:.3e} over 10 seeds", worst))
}

fn decoupled_attention() -> Outcome {
    let cfg = ViTConfig::default();
    let (mut zero_err, mut mix_err): (f64, f64) = (0.0, 0.0);
    for seed in 0..5u64 {
        let vit = ViT::init(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let z = normal(&mut rng, &[cfg.num_tokens(), cfg.embed_dim]);
        let p = normal(&mut rng, &[50, cfg.embed_dim]);
        let mut g = Graph::new();
        let bv = vit.bind(&mut g, false);
        for blk in &bv.blocks {
            let zv = g.constant(z.clone());
            let pv = g.constant(p.clone());
            let d0 = attention_decoupled(&mut g, blk, &cfg, zv, Some(pv), 0.0, false).unwrap();
            let plain = attention_vanilla(&mut g, blk, &cfg, zv).unwrap();
            zero_err = zero_err.max(g.value(d0.instances).max_abs_diff(g.value(plain.out)));
            let d1 = attention_decoupled(&mut g, blk, &cfg, zv, Some(pv), 0.1, false).unwrap();
            let i2i = cross_attention(&mut g, blk, &cfg, zv, zv).unwrap();
            let i2p = cross_attention(&mut g, blk, &cfg, zv, pv).unwrap();
            let mut expected = g.value(i2i.out).clone();
            for (e, b) in expected.data_mut().iter_mut().zip(g.value(i2p.out).data()) {
                *e = 0.9 * *e + 0.1 * b;
            }
            mix_err = mix_err.max(g.value(d1.instances).max_abs_diff(&expected));
        }
    }
    outcome(
        zero_err <= 1e-12 && mix_err <= 1e-9,
        format!("λ=0 vs vanilla {:.3e}; λ=0.1 vs 0.9·I2I+0.1·I2P {:.3e}", zero_err, mix_err),
    )
}

fn gradient_suite() -> Outcome {
    let report = run_suite(0, DEFAULT_TOL, None).unwrap();
    let parts: Vec<String> = report
        .components
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.max_rel_err))
        .collect();
    outcome(report.passed(), parts.join(", "))
}

/// Unique contiguous partition where every member reaches `lambda` against
/// the group's first layer and the next layer does not.
fn brute_force(s: &[Vec<f64>], lambda: f64) -> Vec<usize> {
    let n = s.len();
    let mut found = Vec::new();
    for cuts in 0..1usize << (n - 1) {
        let mut sizes = vec![1];
        for i in 0..n - 1 {
            if cuts >> i & 1 == 1 {
                sizes.push(1);
            } else {
                *sizes.last_mut().unwrap() += 1;
            }
        }
        let mut start = 0;
        let mut ok = true;
        for &len in &sizes {
            let end = start + len;
            ok &= (start + 1..end).all(|j| s[start][j] >= lambda);
            ok &= end == n || s[start][end] < lambda;
            start = end;
        }
        if ok {
            found.push(sizes);
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

fn symmetric(n: usize, upper: &[f64]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![1.0; n]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            m[i][j] = upper[k];
            m[j][i] = upper[k];
            k += 1;
        }
    }
    m
}

fn check_matrix(s: Vec<Vec<f64>>, lambda: f64, reference: &[usize]) -> bool {
    let n = s.len();
    let p = greedy_partition(&AffinityMatrix::new(s, 1).unwrap(), lambda, GroupingRule::Anchor).unwrap();
    let flat: Vec<usize> = p.groups().iter().flatten().copied().collect();
    flat == (0..n).collect::<Vec<_>>() && p.sizes() == reference
}

/// N ≤ 5: every matrix over the grid. N = 6: the greedy result depends only
/// on which entries reach the threshold, so every such pattern is checked,
/// each realised with grid values.
fn greedy_oracle() -> Outcome {
    let grid = [0.0, 0.5, 0.9, 0.96, 1.0];
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for lambda in [0.5, 0.95] {
        for n in 1..=5usize {
            let m = n * (n - 1) / 2;
            let mut cache = std::collections::HashMap::new();
            for code in 0..grid.len().pow(m as u32) {
                let mut c = code;
                let upper: Vec<f64> = (0..m)
                    .map(|_| {
                        let v = grid[c % 5];
                        c /= 5;
                        v
                    })
                    .collect();
                let s = symmetric(n, &upper);
                let key: u32 = upper.iter().enumerate().map(|(i, &v)| ((v >= lambda) as u32) << i).sum();
                let reference = cache.entry(key).or_insert_with(|| brute_force(&s, lambda)).clone();
                mismatches += !check_matrix(s, lambda, &reference) as usize;
                checked += 1;
            }
        }
        let above: Vec<f64> = grid.iter().copied().filter(|&v| v >= lambda).collect();
        let below: Vec<f64> = grid.iter().copied().filter(|&v| v < lambda).collect();
        for pattern in 0..1u32 << 15 {
            let upper: Vec<f64> = (0..15)
                .map(|i| {
                    let pick = (pattern as usize).wrapping_mul(2654435761).wrapping_add(i) >> 3;
                    if pattern >> i & 1 == 1 {
                        above[pick % above.len()]
                    } else {
                        below[pick % below.len()]
                    }
                })
                .collect();
            let s = symmetric(6, &upper);
            let reference = brute_force(&s, lambda);
            mismatches += !check_matrix(s, lambda, &reference) as usize;
            checked += 1;
        }
    }
    outcome(mismatches == 0, format!("{} matrices, {} mismatches", checked, mismatches))
}

fn analytic_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let tokens = g.constant(normal(&mut rng, &[10, 64]));
    let protos = g.constant(normal(&mut rng, &[200, 64]));
    let base = g.constant(normal(&mut rng, &[10, 64]));
    let p0 = attribute_prompt(&mut g, tokens, protos, base, 0.0, 1.0).unwrap();
    let exact = g.value(p0).bitwise_eq(g.value(base));

    let same = pml(&mut g, tokens, tokens).unwrap();
    let same = g.value(same).item();

    let e = |i: usize| {
        let mut v = vec![0.0; 6];
        v[i] = 1.0 + i as f64;
        v
    };
    let prompts = g.constant(Tensor::from_rows(&[e(0), e(1)]).unwrap());
    let toks = g.constant(Tensor::from_rows(&[e(2), e(3), e(4)]).unwrap());
    let orth = pml(&mut g, prompts, toks).unwrap();
    let orth = g.value(orth).item();

    let agg = aggregate_attributes(&mut g, tokens, protos, 1.0).unwrap();
    let w = g.value(agg.weights);
    let row_err = (0..w.rows())
        .map(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        exact && same.abs() < 1e-12 && (orth - 1.0).abs() < 1e-12 && row_err <= 1e-9,
        format!(
            "λ_a=0 exact: {}; PML(P=T) = {:.1e}; PML(orthogonal) = {}; weight row-sum err {:.1e}",
            exact, same, orth, row_err
        ),
    )
}

fn exhaustive_inertia(x: &Tensor, k: usize) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        let labels: Vec<usize> = (0..n)
            .map(|_| {
                let l = c % k;
                c /= k;
                l
            })
            .collect();
        if (0..k).any(|j| !labels.contains(&j)) {
            continue;
        }
        let mut total = 0.0;
        for j in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
            let mean: Vec<f64> = (0..d)
                .map(|c| idx.iter().map(|&i| x.at(i, c)).sum::<f64>() / idx.len() as f64)
                .collect();
            total += idx
                .iter()
                .map(|&i| x.row(i).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

fn kmeans_checks() -> Outcome {
    let mut monotone = true;
    let mut deterministic = true;
    let mut oracle_mismatch = 0;
    let mut instances = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&mut rng, &[60, 4]);
        let a = kmeans(&x, 5, 100, seed).unwrap();
        let b = kmeans(&x, 5, 100, seed).unwrap();
        monotone &= a.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0]);
        deterministic &= a.centroids.bitwise_eq(&b.centroids) && a.assignments == b.assignments;
        for n in 3..=8usize {
            for k in 1..=3usize {
                let centres = normal(&mut rng, &[k, 2]);
                let noise = normal(&mut rng, &[n, 2]);
                let data: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        let c = centres.row(i % k);
                        [20.0 * c[0] + 0.1 * noise.at(i, 0), 20.0 * c[1] + 0.1 * noise.at(i, 1)]
                    })
                    .collect();
                let pts = Tensor::new(vec![n, 2], data).unwrap();
                let r = kmeans(&pts, k, 100, seed).unwrap();
                let best = exhaustive_inertia(&pts, k);
                instances += 1;
                if (r.inertia() - best).abs() > 1e-9 * best.max(1.0) {
                    oracle_mismatch += 1;
                }
            }
        }
    }
    outcome(
        monotone && deterministic && oracle_mismatch == 0,
        format!(
            "inertia monotone: {}; deterministic: {}; oracle mismatches {}/{}",
            monotone, deterministic, oracle_mismatch, instances
        ),
    )
}

fn desk_end_to_end() -> Outcome {
    let cfg = ExperimentConfig::from_json(DESK).unwrap();
    let mut gap_ok = true;
    let mut loss_wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let r = end_to_end(&cfg, seed).unwrap();
        gap_ok &= r.ship_full.test_acc >= r.linear_probe.test_acc + 0.05;
        loss_wins += (r.ship_full.test_loss <= r.vpt_deep.test_loss) as usize;
        lines.push(format!(
            "seed {}: probe acc {:.3}, ship acc {:.3}; loss deep {:.3} ship {:.3}",
            seed, r.linear_probe.test_acc, r.ship_full.test_acc, r.vpt_deep.test_loss, r.ship_full.test_loss
        ));
    }
    outcome(gap_ok && loss_wins >= 2, format!("{} | ship loss ≤ deep loss in {}/3", lines.join("; "), loss_wins))
}

fn frozen_backbone() -> Outcome {
    let cfg = ViTConfig::default();
    let vit = ViT::init(cfg.clone(), 3).unwrap();
    let snapshot = vit.clone();
    let spec = shiplab::data::TaskSpec { train_size: 16, test_size: 8, ..Default::default() };
    let (train, test) = shiplab::data::generate_task(&spec, &cfg, 3).unwrap();
    let (train, test) = (samples_from(&train, &cfg).unwrap(), samples_from(&test, &cfg).unwrap());
    let hyper = PromptHyper { n_p: 10, n_ss: 5, n_a: 4, k: 8, ..PromptHyper::default() };
    let plan = StrategySpec::new(StrategyMode::ShipFull)
        .with_partition(HierarchyPartition::from_sizes(&[2, 2, 4]).unwrap())
        .resolve(cfg.num_layers, &hyper, None)
        .unwrap();
    let state = PromptState::init(&plan, &hyper, cfg.embed_dim, 0).unwrap();
    let protos = shiplab::experiment::build_prototypes(&vit, &train, hyper.k, 20, 0).unwrap();
    let mut obj = TuneObjective::new(&vit, Head::zeros(cfg.embed_dim, 10), state.clone(), plan.clone(), Some(&protos), &train, &test).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 8, lr: 0.01, ..TrainConfig::default() };
    fit(&mut obj, &tc, 0).unwrap();
    let (head, tuned) = obj.into_parts();
    let unchanged = vit
        .named_params()
        .iter()
        .zip(snapshot.named_params())
        .all(|((_, a), (_, b))| a.bitwise_eq(b));
    let prompts_moved = tuned.pools.iter().zip(&state.pools).all(|(a, b)| !a.bitwise_eq(b));

    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, true);
    let bp = tuned.bind(&mut g, true, Some(&protos));
    let x = g.constant(train[0].patches.clone());
    let t = forward_plan(&mut g, &bv, &hb, x, &plan, &hyper, &bp).unwrap();
    let m = shiplab::losses::trace_pml(&mut g, &t, hyper.n_m).unwrap();
    let loss = shiplab::losses::combined_loss(&mut g, t.logits, train[0].label, m, hyper.lambda_m).unwrap();
    g.backward(loss).unwrap();
    let backbone_grads = bv.vars().iter().filter(|&&v| g.grad(v).is_some()).count();
    let trainable = bp.vars().into_iter().chain([hb.w, hb.b]).all(|v| g.grad(v).is_some());
    let proto_grad = bp.prototypes.and_then(|p| g.grad(p)).is_some();
    outcome(
        unchanged && prompts_moved && backbone_grads == 0 && trainable && !proto_grad,
        format!(
            "backbone bitwise unchanged: {}; backbone tensors with grads: {}; prompts+head all have grads: {}",
            unchanged, backbone_grads, trainable
        ),
    )
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, f64, Check); 8] = [
        ("reduction identities", 10.0, reduction_identities),
        ("decoupled attention", 5.0, decoupled_attention),
        ("gradient suite", 60.0, gradient_suite),
        ("greedy partition oracle", 30.0, greedy_oracle),
        ("analytic cases", 5.0, analytic_cases),
        ("k-means", 20.0, kmeans_checks),
        ("desk-scale end to end", 600.0, desk_end_to_end),
        ("frozen backbone", 10.0, frozen_backbone),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let ok = o.passed && secs < *limit;
        failed += !ok as usize;
        println!(
            "{} criterion {} ({}): {} [{:.2}s, limit {}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            name,
            o.detail,
            secs,
            limit
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
