use mitp::encoder::Modality;
use mitp::memory_hub::{activation, generate_next, similarity_values, Direction, MemoryHub, SimilarityType};
use mitp::numerics::{Graph, ParamStore, Rng, RowSimilarity, Tensor};
use proptest::prelude::*;

fn hub(seed: u64, d_v: usize, d_t: usize, sim: SimilarityType, store: &mut ParamStore) -> MemoryHub {
    MemoryHub::init(&mut Rng::new(seed), d_v, d_t, 4, sim, store)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sim_strategy() -> impl Strategy<Value = SimilarityType> {
    prop::sample::select(SimilarityType::ALL.to_vec())
}

#[test]
fn cosine_hand_values() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(similarity_values(&a, &b, RowSimilarity::Cosine).unwrap(), vec![0.0, 1.0]);
}

#[test]
fn self_and_affine_similarity() {
    let mut rng = Rng::new(3);
    let a = rng.gaussian(&[4, 7], 1.0);
    for s in similarity_values(&a, &a, RowSimilarity::Cosine).unwrap() {
        assert!((s - 1.0).abs() < 1e-12);
    }
    let b = a.map(|x| 2.0 * x + 3.0);
    for s in similarity_values(&a, &b, RowSimilarity::Pearson).unwrap() {
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(similarity_values(&a, &a, RowSimilarity::Mmd).unwrap(), vec![1.0; 4]);
}

#[test]
fn activation_hand_values() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let c = g.constant(Tensor::vector(vec![0.7; 4]));
    let (z, _) = activation(&mut g, m, m).unwrap();
    let (u, _) = activation(&mut g, c, c).unwrap();
    let z = g.value(z).data();
    assert!((z[0] - 2.0 / 3.0).abs() < 1e-15 && (z[1] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(g.value(u).data(), &[0.25; 4]);
}

#[test]
fn generate_next_hand_expansion() {
    let (a, b, c, d) = ([1.0, 2.0], [3.0, -1.0], [4.0, 0.5], [-2.0, 8.0]);
    let mut g = Graph::new();
    let p_m = g.constant(Tensor::from_rows(&[a.to_vec(), b.to_vec()]).unwrap());
    let p_tilde = g.constant(Tensor::from_rows(&[c.to_vec(), d.to_vec()]).unwrap());
    let half = g.constant(Tensor::vector(vec![0.5, 0.5]));
    let next = generate_next(&mut g, p_m, p_tilde, half, half).unwrap();
    let want = [
        [0.5 * a[0] + 0.25 * c[0], 0.5 * a[1] + 0.25 * c[1]],
        [0.5 * b[0] + 0.25 * d[0], 0.5 * b[1] + 0.25 * d[1]],
    ];
    assert_eq!(rows(g.value(next)), want.iter().map(|r| r.to_vec()).collect::<Vec<_>>());

    // An all-ones gate keeps p_m.
    let ones = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let kept = generate_next(&mut g, p_m, p_tilde, ones, half).unwrap();
    assert!(g.value(kept).bit_eq(g.value(p_m)));
}

#[test]
fn cross_project_matches_loop_oracle() {
    let mut store = ParamStore::new();
    let h = hub(5, 6, 4, SimilarityType::Cosine, &mut store);
    // Non-zero biases so the oracle exercises them.
    let mut rng = Rng::new(6);
    for name in ["hub.cross_t2v.b1", "hub.cross_t2v.b2"] {
        let id = store.find(name).unwrap();
        let shape = store.tensor(id).shape().to_vec();
        store.get_mut(id).tensor = rng.gaussian(&shape, 0.3);
    }
    let x = rng.gaussian(&[3, 4], 1.0);
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let y = h.cross_project(&mut g, &store, xn, Direction::TextToVision).unwrap();
    assert_eq!(g.shape(y), &[3, 6]);

    let m = &h.cross_t2v;
    let (w1, b1, w2, b2) = (store.tensor(m.w1), store.tensor(m.b1), store.tensor(m.w2), store.tensor(m.b2));
    let hidden = b1.len();
    for i in 0..3 {
        let mut act = vec![0.0; hidden];
        for (j, a) in act.iter_mut().enumerate() {
            let mut s = b1.data()[j];
            for k in 0..4 {
                s += x.at(i, k) * w1.at(k, j);
            }
            *a = s.max(0.0);
        }
        for o in 0..6 {
            let mut s = b2.data()[o];
            for (j, a) in act.iter().enumerate() {
                s += a * w2.at(j, o);
            }
            assert!((g.value(y).at(i, o) - s).abs() < 1e-12);
        }
    }

    // Zero input with zero biases maps to zero.
    let mut store = ParamStore::new();
    let h = hub(5, 6, 4, SimilarityType::Cosine, &mut store);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 4]));
    let y = h.cross_project(&mut g, &store, z, Direction::TextToVision).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[2, 5]));
    assert!(h.cross_project(&mut g, &store, bad, Direction::TextToVision).is_err());
}

#[test]
fn mapping_composes_public_ops_and_relu_kills_negatives() {
    let mut store = ParamStore::new();
    let h = hub(8, 5, 5, SimilarityType::Cosine, &mut store);
    let mut rng = Rng::new(9);
    let p = rng.gaussian(&[3, 5], 1.0);
    let neg = p.map(|x| -x);
    let mut g = Graph::new();
    let (pn, negn) = (g.constant(p.clone()), g.constant(neg));
    let (intra, inter) = h.mapping(&mut g, &store, Modality::Vision, pn, negn).unwrap();
    assert!(g.value(inter).data().iter().all(|&v| v == 0.0));

    let projected = h.intra_v.forward(&mut g, &store, pn).unwrap();
    let by_hand = similarity_values(g.value(projected), &p, RowSimilarity::Cosine).unwrap();
    for (got, s) in g.value(intra).data().iter().zip(by_hand) {
        assert_eq!(*got, s.max(0.0));
    }
}

#[test]
fn hub_gradient_reaches_both_prompts() {
    for sim in SimilarityType::ALL {
        let mut store = ParamStore::new();
        let mut h = hub(11, 6, 5, sim, &mut store);
        h.mmd_bandwidth = Some(2.0);
        let mut rng = Rng::new(12);
        let mut g = Graph::new();
        let pv = g.variable(rng.gaussian(&[3, 6], 1.0));
        let pt = g.variable(rng.gaussian(&[3, 5], 1.0));
        let (nv, nt) = h.hub_step(&mut g, &store, pv, pt).unwrap();
        let wv = g.constant(rng.gaussian(&[3, 6], 1.0));
        let wt = g.constant(rng.gaussian(&[3, 5], 1.0));
        let a = g.mul(nv, wv).unwrap();
        let b = g.mul(nt, wt).unwrap();
        let (a, b) = (g.sum(a).unwrap(), g.sum(b).unwrap());
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        for p in [pv, pt] {
            assert!(g.grad(p).unwrap().norm() > 1e-8, "{sim}");
        }
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut store = ParamStore::new();
    let h = hub(1, 4, 4, SimilarityType::Cosine, &mut store);
    let mut g = Graph::new();
    let pv = g.constant(Tensor::zeros(&[2, 4]));
    let pt = g.constant(Tensor::zeros(&[3, 4]));
    assert!(h.hub_step(&mut g, &store, pv, pt).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hub_step_identities(seed in any::<u64>(), l in 1usize..=8, d_v in 2usize..7, d_t in 2usize..7, sim in sim_strategy()) {
        let mut store = ParamStore::new();
        let h = hub(seed, d_v, d_t, sim, &mut store);
        let mut rng = Rng::new(seed).fork("inputs");
        let (pv, pt) = (rng.gaussian(&[l, d_v], 1.0), rng.gaussian(&[l, d_t], 1.0));
        let mut g = Graph::new();
        let (v, t) = (g.constant(pv.clone()), g.constant(pt.clone()));
        let (tv, tt) = h.hub_step_traced(&mut g, &store, v, t).unwrap();
        prop_assert_eq!(g.shape(tv.next), &[l, d_v]);
        prop_assert_eq!(g.shape(tt.next), &[l, d_t]);
        for (trace, p) in [(tv, &pv), (tt, &pt)] {
            for m in [trace.map_intra, trace.map_inter] {
                prop_assert!(g.value(m).data().iter().all(|&x| x >= 0.0));
            }
            for gate in [trace.z, trace.r] {
                let w = g.value(gate).data();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            }
            if l == 1 {
                prop_assert!(g.value(trace.next).bit_eq(p));
            }
            // Per-row convexity bound.
            let (z, r) = (g.value(trace.z).data(), g.value(trace.r).data());
            for i in 0..l {
                let n_next = norm(g.value(trace.next).row(i));
                let n_m = norm(p.row(i));
                let n_tilde = norm(g.value(trace.p_tilde).row(i));
                let mid = z[i] * n_m + (1.0 - z[i]) * r[i] * n_tilde;
                prop_assert!(n_next <= mid * (1.0 + 1e-12) + 1e-15);
                prop_assert!(mid <= n_m.max(n_tilde) * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn similarity_ranges(seed in any::<u64>(), l in 1usize..6, d in 2usize..10) {
        let mut rng = Rng::new(seed);
        let a = rng.gaussian(&[l, d], 1.0);
        let b = rng.gaussian(&[l, d], 1.5);
        for s in similarity_values(&a, &b, RowSimilarity::Cosine).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
        for s in similarity_values(&a, &b, RowSimilarity::Pearson).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
        for s in similarity_values(&a, &b, RowSimilarity::Mmd).unwrap() {
            prop_assert!(s > 0.0 && s <= 1.0);
        }
    }
}
