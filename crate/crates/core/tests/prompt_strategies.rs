mod common;


use common::*;
use proptest::prelude::*;
use shiplab::autodiff::{Graph, Var};
use shiplab::hierarchy::HierarchyPartition;
use shiplab::prompts::*;
use shiplab::vit::{forward_plain, Head, ViT, ViTConfig};
use shiplab::Tensor;

fn fixture(cfg: ViTConfig, seed: u64) -> (ViT, Head, Tensor) {
    let vit = ViT::init(cfg.clone(), seed).unwrap();
    let head = Head::init(cfg.embed_dim, 4, seed + 1);
    let mut r = rng(seed + 2);
    let x = normal(&mut r, &[cfg.num_patches(), cfg.patch_dim()]);
    (vit, head, x)
}

fn pools(n: usize, n_p: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| normal(&mut r, &[n_p, d])).collect()
}

fn consts(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn single_hierarchy_is_shallow_prompting(seed in 0u64..10_000, n_p in 1usize..5) {
        let (vit, head, x) = fixture(small_config(), seed);
        let ps = pools(1, n_p, 8, seed ^ 5);
        let mut g = Graph::new();
        let bv = vit.bind(&mut g, false);
        let hb = head.bind(&mut g, false);
        let xv = g.constant(x);
        let pv = consts(&mut g, &ps);
        let a = forward_sip(&mut g, &bv, &hb, xv, &HierarchyPartition::single(3), &pv).unwrap();
        let b = forward_vpt_shallow(&mut g, &bv, &hb, xv, pv[0]).unwrap();
        prop_assert!(g.value(a.logits).bitwise_eq(g.value(b.logits)));
    }

    #[test]
    fn singleton_hierarchies_are_deep_prompting(seed in 0u64..10_000, n_p in 1usize..5) {
        let (vit, head, x) = fixture(small_config(), seed);
        let ps = pools(3, n_p, 8, seed ^ 6);
        let mut g = Graph::new();
        let bv = vit.bind(&mut g, false);
        let hb = head.bind(&mut g, false);
        let xv = g.constant(x);
        let pv = consts(&mut g, &ps);
        let a = forward_sip(&mut g, &bv, &hb, xv, &HierarchyPartition::singletons(3), &pv).unwrap();
        let b = forward_vpt_deep(&mut g, &bv, &hb, xv, &pv).unwrap();
        prop_assert!(g.value(a.logits).bitwise_eq(g.value(b.logits)));
    }

    /// The shared pool at layer `l` gets the gradient of the same pool bound
    /// only at layer `l`; the shared leaf gets their sum.
    #[test]
    fn shared_pool_gradient_is_sum_of_layer_gradients(seed in 0u64..10_000) {
        let (vit, head, x) = fixture(small_config(), seed);
        let ps = pools(2, 2, 8, seed ^ 7);
        let ssp = pools(1, 2, 8, seed ^ 8).remove(0);
        let part = HierarchyPartition::from_sizes(&[1, 2]).unwrap();
        let run = |binding: &dyn Fn(&mut Graph) -> SspBinding| {
            let mut g = Graph::new();
            let bv = vit.bind(&mut g, false);
            let hb = head.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let pv = consts(&mut g, &ps);
            let b = binding(&mut g);
            let t = forward_ssp(&mut g, &bv, &hb, xv, &part, &pv, b.clone()).unwrap();
            let loss = g.cross_entropy(t.logits, 1).unwrap();
            g.backward(loss).unwrap();
            b.vars().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect::<Vec<_>>()
        };
        let shared = run(&|g| SspBinding::Shared(g.param(ssp.clone())));
        let per_layer = run(&|g| SspBinding::PerLayer((0..3).map(|_| g.param(ssp.clone())).collect()));
        for j in 0..shared[0].len() {
            let sum: f64 = per_layer.iter().map(|v| v[j]).sum();
            prop_assert!((sum - shared[0][j]).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
        prop_assert!(per_layer.iter().all(|v| v.iter().any(|x| *x != 0.0)));
    }
}

#[test]
fn empty_pools_reduce_to_plain_forward() {
    let (vit, head, x) = fixture(small_config(), 3);
    let empty = vec![Tensor::zeros(&[0, 8]); 3];
    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, false);
    let xv = g.constant(x);
    let pv = consts(&mut g, &empty);
    let plain = forward_plain(&mut g, &bv, &hb, xv).unwrap();
    let deep = forward_vpt_deep(&mut g, &bv, &hb, xv, &pv).unwrap();
    let sip = forward_sip(&mut g, &bv, &hb, xv, &HierarchyPartition::singletons(3), &pv).unwrap();
    assert!(g.value(deep.logits).bitwise_eq(g.value(plain.logits)));
    assert!(g.value(sip.logits).bitwise_eq(g.value(plain.logits)));
}

#[test]
fn deep_pool_only_influences_later_layers() {
    let (vit, head, x) = fixture(small_config(), 4);
    let ps = pools(3, 2, 8, 44);
    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, false);
    let xv = g.constant(x);
    let pv: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
    let t = forward_vpt_deep(&mut g, &bv, &hb, xv, &pv).unwrap();
    // Loss on the output of layer 0 reaches pool 0 only.
    let z0 = t.layers[0].z;
    let s = g.sum(z0);
    g.backward(s).unwrap();
    assert!(g.grad(pv[0]).unwrap().iter().any(|v| *v != 0.0));
    for &p in &pv[1..] {
        assert!(g.grad(p).map_or(true, |gr| gr.iter().all(|v| *v == 0.0)));
    }
    // Perturbing pool 2 leaves layers 0 and 1 untouched.
    let mut ps2 = ps.clone();
    ps2[2].data_mut()[0] += 1.0;
    let mut g2 = Graph::new();
    let bv2 = vit.bind(&mut g2, false);
    let hb2 = head.bind(&mut g2, false);
    let xv2 = g2.constant(t_patches(&g, xv));
    let pv2 = consts(&mut g2, &ps2);
    let t2 = forward_vpt_deep(&mut g2, &bv2, &hb2, xv2, &pv2).unwrap();
    for l in 0..2 {
        assert!(g.value(t.layers[l].z).bitwise_eq(g2.value(t2.layers[l].z)));
    }
    assert!(!g.value(t.layers[2].z).bitwise_eq(g2.value(t2.layers[2].z)));
}

fn t_patches(g: &Graph, v: Var) -> Tensor {
    g.value(v).clone()
}

/// With an 8-layer backbone split 4 + 4, layer 4 sees exactly the second
/// pool: nothing carried from the first hierarchy survives the boundary.
#[test]
fn hierarchy_boundary_replaces_carried_prompts() {
    let cfg = ViTConfig { num_layers: 8, ..small_config() };
    let (vit, head, x) = fixture(cfg, 5);
    let ps = pools(2, 3, 8, 55);
    let part = HierarchyPartition::from_sizes(&[4, 4]).unwrap();
    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, false);
    let xv = g.constant(x);
    let pv: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
    let t = forward_sip(&mut g, &bv, &hb, xv, &part, &pv).unwrap();
    assert_eq!(t.layers[4].prompts_in, Some(pv[1]));
    assert_eq!(t.layers[0].prompts_in, Some(pv[0]));
    for l in [1, 2, 3, 5, 6, 7] {
        let prev = t.layers[l - 1].prompts_out;
        assert_eq!(t.layers[l].prompts_in, prev, "layer {}", l);
    }
    // Pool 1's gradient comes only from layers 4..8; the last-layer prompt
    // outputs depend on pool 0 only through the instance tokens.
    let out = t.layers[7].prompts_out.unwrap();
    let s = g.sum(out);
    g.backward(s).unwrap();
    assert!(g.grad(pv[1]).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn shape_errors_are_reported() {
    let (vit, head, x) = fixture(small_config(), 6);
    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, false);
    let xv = g.constant(x);
    let bad = g.constant(Tensor::zeros(&[2, 5]));
    assert!(forward_vpt_shallow(&mut g, &bv, &hb, xv, bad).is_err());
    let ok = g.constant(Tensor::zeros(&[2, 8]));
    assert!(forward_vpt_deep(&mut g, &bv, &hb, xv, &[ok, ok]).is_err());
    let part = HierarchyPartition::from_sizes(&[1, 2]).unwrap();
    assert!(forward_sip(&mut g, &bv, &hb, xv, &part, &[ok]).is_err());
}

#[test]
fn full_plan_binds_every_component() {
    let (vit, head, x) = fixture(small_config(), 7);
    let hyper = PromptHyper { n_p: 2, n_ss: 2, n_a: 2, n_m: 2, m_a: 2, k: 3, ..PromptHyper::default() };
    let part = HierarchyPartition::from_sizes(&[1, 2]).unwrap();
    let plan = StrategySpec::new(StrategyMode::ShipFull).with_partition(part).resolve(3, &hyper, None).unwrap();
    let state = PromptState::init(&plan, &hyper, 8, 1).unwrap();
    assert_eq!(state.params().len(), 4);
    let protos = shiplab::attributes::PrototypeSet::new(
        normal(&mut rng(9), &[3, 8]),
        shiplab::attributes::PrototypeSource { layer: 2, pooling: "mean".into(), samples: 3, seed: 0 },
    )
    .unwrap();
    let mut g = Graph::new();
    let bv = vit.bind(&mut g, false);
    let hb = head.bind(&mut g, true);
    let bp = state.bind(&mut g, true, Some(&protos));
    let xv = g.constant(x);
    let t = forward_plan(&mut g, &bv, &hb, xv, &plan, &hyper, &bp).unwrap();
    // Layer 1 opens the second hierarchy: pool, attribute prompt, shared pool.
    let kinds: Vec<_> = t.layers[1].segments.iter().map(|s| s.kind).collect();
    assert_eq!(kinds, [shiplab::vit::PromptKind::Independent(1), shiplab::vit::PromptKind::Attribute(1), shiplab::vit::PromptKind::Shared]);
    let loss = g.cross_entropy(t.logits, 0).unwrap();
    g.backward(loss).unwrap();
    for v in bp.vars() {
        assert!(g.grad(v).unwrap().iter().any(|x| *x != 0.0));
    }
    assert!(g.grad(bp.prototypes.unwrap()).is_none());
    assert!(g.grad(bv.blocks[0].wq).is_none());
}
