mod common;

use common::*;
use proptest::prelude::*;
use shiplab::autodiff::Graph;
use shiplab::vit::{attention_decoupled, attention_vanilla, cross_attention, layer_forward, AttentionMode, BoundBlock, ViT};
use shiplab::Tensor;

/// Per-head scaled dot-product attention written with plain loops.
fn reference_attention(blk: &shiplab::vit::Block, heads: usize, q_in: &[Vec<f64>], kv_in: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut q = matmul(q_in, &blk.wq);
    add_bias(&mut q, &blk.bq);
    let mut k = matmul(kv_in, &blk.wk);
    add_bias(&mut k, &blk.bk);
    let mut v = matmul(kv_in, &blk.wv);
    add_bias(&mut v, &blk.bv);
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                merged[i][h * dh + c] = (0..k.len()).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    let mut out = matmul(&merged, &blk.wo);
    add_bias(&mut out, &blk.bo);
    out
}

fn setup(seed: u64) -> (ViT, Tensor, Tensor) {
    let cfg = small_config();
    let vit = ViT::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 77);
    let z = normal(&mut r, &[5, 8]);
    let p = normal(&mut r, &[3, 8]);
    (vit, z, p)
}

fn block0(g: &mut Graph, vit: &ViT) -> BoundBlock {
    vit.bind(g, false).blocks.remove(0)
}

#[test]
fn vanilla_matches_reference_on_three_tokens() {
    let (vit, z, _) = setup(1);
    let x = z.slice_rows(0, 3).unwrap();
    let mut g = Graph::new();
    let blk = block0(&mut g, &vit);
    let xv = g.constant(x.clone());
    let out = attention_vanilla(&mut g, &blk, &vit.config, xv).unwrap();
    let reference = reference_attention(&vit.blocks[0], 2, &rows(&x), &rows(&x));
    assert!(max_diff(&reference, g.value(out.out)) < 1e-12);
    for w in &out.weights {
        for i in 0..3 {
            let s: f64 = g.value(*w).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn decoupled_matches_composition_of_references() {
    let (vit, z, p) = setup(2);
    for lambda in [0.0, 0.1, 0.5, 1.0] {
        let mut g = Graph::new();
        let blk = block0(&mut g, &vit);
        let zv = g.constant(z.clone());
        let pv = g.constant(p.clone());
        let out = attention_decoupled(&mut g, &blk, &vit.config, zv, Some(pv), lambda, true).unwrap();
        let i2i = reference_attention(&vit.blocks[0], 2, &rows(&z), &rows(&z));
        let i2p = reference_attention(&vit.blocks[0], 2, &rows(&z), &rows(&p));
        let expected: Vec<Vec<f64>> = i2i
            .iter()
            .zip(&i2p)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect())
            .collect();
        assert!(max_diff(&expected, g.value(out.instances)) < 1e-12, "lambda {}", lambda);
        let mut all = rows(&z);
        all.extend(rows(&p));
        let p2ip = reference_attention(&vit.blocks[0], 2, &rows(&p), &all);
        assert!(max_diff(&p2ip, g.value(out.prompts.unwrap())) < 1e-12);
    }
}

#[test]
fn zero_lambda_equals_prompt_free_attention() {
    let (vit, z, p) = setup(3);
    let mut g = Graph::new();
    let blk = block0(&mut g, &vit);
    let zv = g.constant(z.clone());
    let pv = g.constant(p);
    let dec = attention_decoupled(&mut g, &blk, &vit.config, zv, Some(pv), 0.0, false).unwrap();
    let van = attention_vanilla(&mut g, &blk, &vit.config, zv).unwrap();
    assert!(g.value(dec.instances).max_abs_diff(g.value(van.out)) <= 1e-12);
    assert!(dec.prompts.is_none());
}

#[test]
fn empty_prompt_set_reduces_to_instance_attention() {
    let (vit, z, _) = setup(4);
    let mut g = Graph::new();
    let blk = block0(&mut g, &vit);
    let zv = g.constant(z.clone());
    let dec = attention_decoupled(&mut g, &blk, &vit.config, zv, None, 0.3, true).unwrap();
    let cross = cross_attention(&mut g, &blk, &vit.config, zv, zv).unwrap();
    assert!(g.value(dec.instances).bitwise_eq(g.value(cross.out)));
    let row = dec.cls_row(&g);
    assert_eq!(row.len(), 5);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn decoupled_cls_row_is_a_distribution() {
    let (vit, z, p) = setup(5);
    let mut g = Graph::new();
    let blk = block0(&mut g, &vit);
    let zv = g.constant(z);
    let pv = g.constant(p);
    let dec = attention_decoupled(&mut g, &blk, &vit.config, zv, Some(pv), 0.25, false).unwrap();
    let row = dec.cls_row(&g);
    assert_eq!(row.len(), 8);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((row[5..].iter().sum::<f64>() - 0.25).abs() < 1e-12);
}

#[test]
fn out_of_range_lambda_is_rejected() {
    let (vit, z, p) = setup(6);
    let mut g = Graph::new();
    let blk = block0(&mut g, &vit);
    let zv = g.constant(z);
    let pv = g.constant(p);
    assert!(attention_decoupled(&mut g, &blk, &vit.config, zv, Some(pv), 1.5, false).is_err());
    let mode = AttentionMode::Decoupled { lambda: -0.1, p2ip: false };
    assert!(layer_forward(&mut g, &blk, &vit.config, zv, Some(pv), mode).is_err());
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Permuting prompts leaves instance outputs unchanged and permutes the
    /// prompt outputs the same way, in both attention modes.
    #[test]
    fn prompt_permutation_equivariance(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2]).prop_shuffle(), lambda in 0.0f64..=1.0) {
        let (vit, z, p) = setup(seed);
        let pp = permute_rows(&p, &perm);
        for mode in [AttentionMode::Vanilla, AttentionMode::Decoupled { lambda, p2ip: true }] {
            let mut g = Graph::new();
            let blk = block0(&mut g, &vit);
            let zv = g.constant(z.clone());
            let a = g.constant(p.clone());
            let b = g.constant(pp.clone());
            let oa = layer_forward(&mut g, &blk, &vit.config, zv, Some(a), mode).unwrap();
            let ob = layer_forward(&mut g, &blk, &vit.config, zv, Some(b), mode).unwrap();
            prop_assert!(g.value(oa.z).max_abs_diff(g.value(ob.z)) < 1e-12);
            let pa = permute_rows(g.value(oa.prompts.unwrap()), &perm);
            prop_assert!(pa.max_abs_diff(g.value(ob.prompts.unwrap())) < 1e-12);
        }
    }

    /// Instance outputs are affine in the mixing weight.
    #[test]
    fn decoupled_instances_interpolate(seed in 0u64..1000, lambda in 0.0f64..=1.0) {
        let (vit, z, p) = setup(seed);
        let mut g = Graph::new();
        let blk = block0(&mut g, &vit);
        let zv = g.constant(z);
        let pv = g.constant(p);
        let at = |g: &mut Graph, l: f64| {
            let o = attention_decoupled(g, &blk, &vit.config, zv, Some(pv), l, false).unwrap();
            g.value(o.instances).clone()
        };
        let a0 = at(&mut g, 0.0);
        let a1 = at(&mut g, 1.0);
        let al = at(&mut g, lambda);
        let mut expected = a0.clone();
        for (e, b) in expected.data_mut().iter_mut().zip(a1.data()) {
            *e = (1.0 - lambda) * *e + lambda * b;
        }
        prop_assert!(al.max_abs_diff(&expected) < 1e-12);
    }
}
