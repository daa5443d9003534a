mod common;

use common::*;
use proptest::prelude::*;
use shiplab::autodiff::Graph;
use shiplab::losses::{combined_loss, pml};
use shiplab::Tensor;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every prompt-token pair enumerated explicitly.
    #[test]
    fn matching_loss_matches_pair_enumeration(seed in 0u64..u64::MAX, n_p in 1usize..6, n_t in 1usize..8) {
        let mut r = rng(seed);
        let p = normal(&mut r, &[n_p, 4]);
        let t = normal(&mut r, &[n_t, 4]);
        let mut expected = 0.0;
        for i in 0..n_p {
            let mut best = f64::INFINITY;
            for j in 0..n_t {
                best = best.min(1.0 - cosine(p.row(i), t.row(j)));
            }
            expected += best / n_p as f64;
        }
        let mut g = Graph::new();
        let pv = g.constant(p);
        let tv = g.constant(t);
        let l = pml(&mut g, pv, tv).unwrap();
        let got = g.value(l).item();
        prop_assert!((got - expected).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&got));
    }

    /// Scaling prompts or tokens by positive factors leaves the loss unchanged.
    #[test]
    fn matching_loss_is_scale_invariant(seed in 0u64..u64::MAX, a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let mut r = rng(seed);
        let p = normal(&mut r, &[3, 4]);
        let t = normal(&mut r, &[4, 4]);
        let scale = |x: &Tensor, s: f64| {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v *= s);
            y
        };
        let mut g = Graph::new();
        let (p0, t0) = (g.constant(p.clone()), g.constant(t.clone()));
        let (p1, t1) = (g.constant(scale(&p, a)), g.constant(scale(&t, b)));
        let l0 = pml(&mut g, p0, t0).unwrap();
        let l1 = pml(&mut g, p1, t1).unwrap();
        prop_assert!((g.value(l0).item() - g.value(l1).item()).abs() < 1e-12);
    }
}

#[test]
fn two_prompts_three_tokens_at_known_angles() {
    let deg = |a: f64| {
        let r = a.to_radians();
        vec![r.cos(), r.sin()]
    };
    let p = Tensor::from_rows(&[deg(0.0), deg(100.0)]).unwrap();
    let t = Tensor::from_rows(&[deg(30.0), deg(90.0), deg(200.0)]).unwrap();
    // Prompt 0: nearest is 30°, prompt 1: nearest is 90°.
    let expected = ((1.0 - 30f64.to_radians().cos()) + (1.0 - 10f64.to_radians().cos())) / 2.0;
    let mut g = Graph::new();
    let pv = g.constant(p);
    let tv = g.constant(t);
    let l = pml(&mut g, pv, tv).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn combined_loss_adds_weighted_matching_term() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let m = g.constant(Tensor::scalar(0.4));
    let ce = g.cross_entropy(logits, 2).unwrap();
    let total = combined_loss(&mut g, logits, 2, Some(m), 0.5).unwrap();
    assert!((g.value(total).item() - g.value(ce).item() - 0.2).abs() < 1e-15);
    let zero = combined_loss(&mut g, logits, 2, Some(m), 0.0).unwrap();
    assert_eq!(g.value(zero).item(), g.value(ce).item());
}
