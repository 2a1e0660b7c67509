use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segformer::attention::{attention_core, multi_head, AttentionParams, LayerConfig, SeqMask};
use segformer::autodiff::{adam_step, AdamConfig, Graph, ParameterStore};
use segformer::fusion::weighted_fusion;
use segformer::segregation::{
    cst_layer, gate_coefficients, sst_layer, GateMode, GateParams, GateTelemetry,
};
use segformer::tensor::{self, Mask, Tensor};

fn tensor_strategy(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn rows_and_width() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..9)
}

fn flags_with_one_valid(n: usize) -> impl Strategy<Value = Vec<bool>> {
    (prop::collection::vec(any::<bool>(), n), 0..n).prop_map(|(mut f, k)| {
        f[k] = true;
        f
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in rows_and_width().prop_flat_map(|(r, c)| tensor_strategy(vec![r, c], -50.0, 50.0))) {
        let s = tensor::softmax(&x, 1, None).unwrap();
        for row in s.data().chunks(x.shape()[1]) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        x in rows_and_width().prop_flat_map(|(r, c)| tensor_strategy(vec![r, c], -50.0, 50.0)),
        shift in -100.0f64..100.0,
    ) {
        let a = tensor::softmax(&x, 1, None).unwrap();
        let b = tensor::softmax(&x.map(|v| v + shift), 1, None).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_padding(
        (x, flags) in (1usize..9).prop_flat_map(|n| (tensor_strategy(vec![3, n], -50.0, 50.0), flags_with_one_valid(n))),
    ) {
        let n = flags.len();
        let mask = Mask::new(vec![1, n], flags.clone()).unwrap().to_tensor();
        let s = tensor::softmax(&x, 1, Some(&mask)).unwrap();
        for row in s.data().chunks(n) {
            for (w, &valid) in row.iter().zip(&flags) {
                if !valid {
                    prop_assert_eq!(*w, 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise(
        (a, b) in (1usize..9, 1usize..9, 1usize..9).prop_flat_map(|(n, k, m)| {
            (tensor_strategy(vec![n, k], -1.0, 1.0), tensor_strategy(vec![k, m], -1.0, 1.0))
        }),
    ) {
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let c = tensor::matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                prop_assert_eq!(c.get(&[i, j]).to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn broadcast_mul_by_ones_is_identity(x in rows_and_width().prop_flat_map(|(r, c)| tensor_strategy(vec![r, c], -1e6, 1e6))) {
        let ones = Tensor::ones(&[x.shape()[1]]);
        prop_assert_eq!(tensor::mul(&x, &ones).unwrap(), x);
    }

    #[test]
    fn weighted_fusion_is_permutation_consistent(
        (parts, logits, perm) in (1usize..6).prop_flat_map(|n| (
            prop::collection::vec(tensor_strategy(vec![2, 4], -5.0, 5.0), n),
            tensor_strategy(vec![2, n], -3.0, 3.0),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )),
    ) {
        let store = ParameterStore::new();
        let alpha = tensor::softmax(&logits, 1, None).unwrap();
        let n = parts.len();
        let mut permuted_alpha = alpha.clone();
        for row in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted_alpha.set(&[row, dst], alpha.get(&[row, src]));
            }
        }
        let mut g = Graph::new(&store);
        let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let pvars: Vec<_> = perm.iter().map(|&i| vars[i]).collect();
        let a = g.constant(alpha);
        let pa = g.constant(permuted_alpha);
        let f = weighted_fusion(&mut g, &vars, a).unwrap();
        let pf = weighted_fusion(&mut g, &pvars, pa).unwrap();
        prop_assert_eq!(g.shape(f), &[2, 4][..]);
        prop_assert!(g.value(f).max_abs_diff(g.value(pf)) < 1e-12, "n = {}", n);
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval(
        a in tensor_strategy(vec![3, 8], -5.0, 5.0),
        b in tensor_strategy(vec![4, 8], -5.0, 5.0),
        seed in any::<u64>(),
    ) {
        let mut store = ParameterStore::new();
        let gate = GateParams::init(&mut store, "gate", 8, 4, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut g = Graph::new(&store);
        let (av, bv) = (g.constant(a), g.constant(b));
        let w = gate_coefficients(&mut g, av, bv, None, &gate, 0, GateMode::Soft).unwrap();
        prop_assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_rows_are_distributions_with_zero_masked_keys(
        (a, b, flags) in (1usize..5, 1usize..6).prop_flat_map(|(nq, nk)| (
            tensor_strategy(vec![nq, 4], -3.0, 3.0),
            tensor_strategy(vec![nk, 4], -3.0, 3.0),
            flags_with_one_valid(nk),
        )),
    ) {
        let store = ParameterStore::new();
        let nk = flags.len();
        let mask = SeqMask::new(&Mask::new(vec![nk], flags.clone()).unwrap());
        let mut g = Graph::new(&store);
        let (av, bv) = (g.constant(a), g.constant(b));
        let (_, w) = attention_core(&mut g, av, bv, bv, Some(&mask.keys)).unwrap();
        for row in g.value(w).data().chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, &valid) in row.iter().zip(&flags) {
                if !valid {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn multi_head_is_invariant_to_key_permutation(
        (a, b, perm) in (1usize..5, 1usize..6).prop_flat_map(|(nq, nk)| (
            tensor_strategy(vec![nq, 8], -2.0, 2.0),
            tensor_strategy(vec![nk, 8], -2.0, 2.0),
            Just((0..nk).collect::<Vec<_>>()).prop_shuffle(),
        )),
        seed in any::<u64>(),
    ) {
        let cfg = LayerConfig::new(8, 2);
        let mut store = ParameterStore::new();
        let attn = AttentionParams::init(&mut store, "attn", &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let rows: Vec<Tensor> = perm.iter().map(|&i| tensor::slice_axis(&b, 0, i).unwrap()).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        let pb = tensor::stack(&refs, 0).unwrap();
        let mut g = Graph::new(&store);
        let (av, bv, pbv) = (g.constant(a), g.constant(b), g.constant(pb));
        let x = multi_head(&mut g, av, bv, bv, &attn, &cfg, None).unwrap().out;
        let y = multi_head(&mut g, av, pbv, pbv, &attn, &cfg, None).unwrap().out;
        prop_assert!(g.value(x).max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn sst_equals_cst_with_self_coordination(a in (1usize..5).prop_flat_map(|n| tensor_strategy(vec![n, 8], -2.0, 2.0)), seed in any::<u64>()) {
        let cfg = LayerConfig::new(8, 2);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = AttentionParams::init(&mut store, "attn", &cfg, &mut rng).unwrap();
        let gate = GateParams::init(&mut store, "gate", 8, 4, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let av = g.constant(a);
        let mut tel = GateTelemetry::default();
        let s = sst_layer(&mut g, av, &attn, &gate, &cfg, None, GateMode::Soft, &mut tel).unwrap().out;
        let c = cst_layer(&mut g, av, av, av, &attn, &gate, &cfg, None, None, GateMode::Soft, &mut tel).unwrap().out;
        prop_assert_eq!(g.value(s), g.value(c));
    }
}

#[test]
fn backward_is_linear_over_independent_subgraphs() {
    let mut store = ParameterStore::new();
    let w = store
        .add("w", Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]))
        .unwrap();
    let v = store
        .add("v", Tensor::from_rows(&[&[1.5], &[-0.4]]))
        .unwrap();
    let x = Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
    let left = |g: &mut Graph<'_>| {
        let (xv, wv) = (g.constant(x.clone()), g.param(w));
        let y = g.matmul(xv, wv).unwrap();
        let y = g.sigmoid(y);
        g.sum_all(y)
    };
    let right = |g: &mut Graph<'_>| {
        let (xv, vv) = (g.constant(x.clone()), g.param(v));
        let y = g.matmul(xv, vv).unwrap();
        let y = g.relu(y);
        g.sum_all(y)
    };
    let mut g = Graph::new(&store);
    let (l, r) = (left(&mut g), right(&mut g));
    let total = g.add(l, r).unwrap();
    let joint = g.backward(total).unwrap();
    let mut g = Graph::new(&store);
    let l = left(&mut g);
    let gl = g.backward(l).unwrap();
    let mut g = Graph::new(&store);
    let r = right(&mut g);
    let gr = g.backward(r).unwrap();
    assert!(joint.get(w).unwrap().max_abs_diff(gl.get(w).unwrap()) < 1e-12);
    assert!(joint.get(v).unwrap().max_abs_diff(gr.get(v).unwrap()) < 1e-12);
}

#[test]
fn adam_with_zero_gradient_keeps_values() {
    let mut store = ParameterStore::new();
    let p = store
        .add("p", Tensor::from_rows(&[&[1.0, -2.0, 3.5]]))
        .unwrap();
    let before = store.get(p).value.clone();
    for _ in 0..3 {
        adam_step(&mut store, &AdamConfig::default()).unwrap();
    }
    assert_eq!(store.get(p).value, before);
    assert_eq!(store.get(p).step, 3);
}
