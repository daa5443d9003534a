mod common;

use common::*;
use proptest::prelude::*;
use shiplab::autodiff::{GradCheck, Graph, DEFAULT_EPS};
use shiplab::gradsuite::{run_suite, DEFAULT_TOL};
use shiplab::losses::pml;
use shiplab::Tensor;

fn check() -> GradCheck {
    GradCheck::new(DEFAULT_EPS, DEFAULT_TOL)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    /// Dense chain: matmul, bias, GELU, LayerNorm, softmax, cross-entropy.
    #[test]
    fn dense_chain_matches_finite_differences(seed in 0u64..u64::MAX) {
        let mut r = rng(seed);
        let inputs = [
            normal(&mut r, &[3, 4]),
            normal(&mut r, &[4, 5]),
            normal(&mut r, &[5]),
            normal(&mut r, &[5]),
            normal(&mut r, &[5]),
        ];
        let report = check()
            .run(
                |g, v| {
                    let h = g.linear(v[0], v[1], v[2])?;
                    let h = g.gelu(h);
                    let h = g.layer_norm(h, v[3], v[4], 1e-10)?;
                    let s = g.softmax(h, 1)?;
                    let m = g.mean_rows(s)?;
                    let m = g.reshape(m, &[5])?;
                    g.cross_entropy(m, 2)
                },
                &inputs,
            )
            .unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    /// Attention-shaped block: scores, softmax over keys, weighted values,
    /// concatenation and slicing.
    #[test]
    fn attention_shape_matches_finite_differences(seed in 0u64..u64::MAX) {
        let mut r = rng(seed);
        let inputs = [normal(&mut r, &[3, 4]), normal(&mut r, &[5, 4]), normal(&mut r, &[5, 4])];
        let w = normal(&mut r, &[3, 8]);
        let report = check()
            .run(
                |g, v| {
                    let s = g.matmul_nt(v[0], v[1])?;
                    let s = g.scale(s, 0.5);
                    let a = g.softmax(s, 1)?;
                    let o = g.matmul(a, v[2])?;
                    let both = g.concat_cols(&[o, v[0]])?;
                    let top = g.slice_rows(both, 0, 3)?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(top, wv)?;
                    Ok(g.sum(p))
                },
                &inputs,
            )
            .unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    /// Prompt matching loss away from ties in the nearest-token choice.
    #[test]
    fn matching_loss_matches_finite_differences(seed in 0u64..u64::MAX) {
        let mut r = rng(seed);
        let p = normal(&mut r, &[3, 4]);
        let t = normal(&mut r, &[5, 4]);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let tv = g.constant(t.clone());
        let c = g.cosine_matrix(pv, tv).unwrap();
        let c = g.value(c).clone();
        for i in 0..3 {
            let mut row = c.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(row[0] - row[1] > 1e-3);
        }
        let report = check().run(|g, v| pml(g, v[0], v[1]), &[p, t]).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}

#[test]
fn component_suite_passes() {
    for seed in 0..3 {
        let report = run_suite(seed, DEFAULT_TOL, None).unwrap();
        assert!(report.passed(), "{}", report.to_table());
    }
}

#[test]
fn corrupted_softmax_backward_is_caught() {
    let report = run_suite(0, DEFAULT_TOL, Some(1.5)).unwrap();
    assert!(!report.passed());
    let failed: Vec<&str> = report.components.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"decoupled_attention") && failed.contains(&"combined_loss"), "{:?}", failed);
}

#[test]
fn backward_twice_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.backward(s).is_err());
}
