use mitp::numerics::{grad_check, AdamConfig, AdamState, Graph, ParamGroup, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let ((n, k), (_, m)) = (a.dims2(), b.dims2());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a.at(i, t) * b.at(t, j);
            }
        }
    }
    out
}

#[test]
fn matmul_two_by_three() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, -3.0], vec![0.25, 1.0]]).unwrap();
    let mut g = Graph::new();
    let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(an, bn).unwrap();
    assert_eq!(g.shape(c), &[2, 2]);
    assert_eq!(g.value(c).data(), matmul_oracle(&a, &b).as_slice());
}

#[test]
fn relu_sum_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn composed_graph_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let inputs = [rng.gaussian(&[3, 4], 1.0), rng.gaussian(&[4, 5], 1.0), rng.gaussian(&[5], 1.0)];
    let report = grad_check(
        &inputs,
        |g, ids| {
            let x = g.matmul(ids[0], ids[1])?;
            let x = g.add_row(x, ids[2])?;
            let x = g.softmax(x, 1)?;
            let y = g.exp(ids[0])?;
            let y = g.mean_axis(y, 1)?;
            let x = g.mul_col(x, y)?;
            let x = g.ln(x, 1e-30)?;
            g.mean(x)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 12 + 20 + 5);
}

#[test]
fn adam_counts_steps_and_keeps_moment_shapes() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::PromptBank, Tensor::zeros(&[2, 3]), false);
    let f = store.add("f", ParamGroup::Backbone, Tensor::full(&[4], 1.5), true);
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let frozen_before = store.tensor(f).clone();
    for step in 1..=3u64 {
        store.get_mut(w).grad = Some(Tensor::full(&[2, 3], 1.0));
        store.get_mut(f).grad = Some(Tensor::full(&[4], 7.0));
        adam.step(&mut store).unwrap();
        assert_eq!(adam.step_count, step);
        assert!(store.get(w).grad.is_none());
    }
    assert_eq!(adam.first_moment(w.index()).unwrap().shape(), &[2, 3]);
    assert_eq!(adam.second_moment(w.index()).unwrap().shape(), &[2, 3]);
    assert!(adam.first_moment(f.index()).is_none());
    assert!(store.tensor(f).bit_eq(&frozen_before));
    // A constant unit gradient moves each entry by about lr per step.
    for &v in store.tensor(w).data() {
        assert!((v + 3.0 * 2e-4).abs() < 1e-9, "{v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, m in 1usize..6) {
        let mut rng = Rng::new(seed);
        let (a, b) = (rng.gaussian(&[n, k], 1.0), rng.gaussian(&[k, m], 1.0));
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(an, bn).unwrap();
        for (x, y) in g.value(c).data().iter().zip(matmul_oracle(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), n in 1usize..5, d in 1usize..8, scale in 0.1f64..20.0) {
        let x = Rng::new(seed).gaussian(&[n, d], scale);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let s = g.softmax(xn, 1).unwrap();
        for row in g.value(s).to_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn tensor_length_must_match_shape(a in 1usize..5, b in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(&[a, b], vec![0.0; a * b]).is_ok());
        prop_assert!(Tensor::new(&[a, b], vec![0.0; a * b + extra]).is_err());
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let (mut x, mut y) = (Rng::new(seed), Rng::new(seed));
        prop_assert!(x.gaussian(&[16], 1.0).bit_eq(&y.gaussian(&[16], 1.0)));
        prop_assert_eq!(x.below(1000), y.below(1000));
    }

    #[test]
    fn frozen_params_stay_bitwise(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::MemoryHub, rng.gaussian(&[3, 3], 1.0), false);
        let f = store.add("f", ParamGroup::Backbone, rng.gaussian(&[3, 3], 1.0), true);
        let before = store.tensor(f).clone();
        let mut adam = AdamState::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let x = rng.gaussian(&[2, 3], 1.0);
        for _ in 0..steps {
            let mut g = Graph::new();
            let (xn, wn, fn_) = (g.constant(x.clone()), g.param(&store, w), g.param(&store, f));
            let h = g.matmul(xn, wn).unwrap();
            let h = g.matmul(h, fn_).unwrap();
            let h = g.mul(h, h).unwrap();
            let loss = g.sum(h).unwrap();
            g.backward(loss).unwrap();
            store.accumulate_grads(&g);
            prop_assert!(store.get(f).grad.is_none());
            adam.step(&mut store).unwrap();
        }
        prop_assert!(store.tensor(f).bit_eq(&before));
    }
}
