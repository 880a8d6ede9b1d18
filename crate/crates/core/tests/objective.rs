use proptest::prelude::*;
use rand::Rng;
use rottrans_core::autograd::smooth_l1 as smooth_l1_scalar;
use rottrans_core::loss::{self, BnNeckHead, LossConfig, TripletMode};
use rottrans_core::rng::stream;
use rottrans_core::{Graph, ParamStore, Tensor, Var};

fn tokens(g: &mut Graph<f64>, rows: usize, data: Vec<f64>) -> Var {
    let d = data.len() / rows;
    g.constant(Tensor::new([rows, d], data).unwrap())
}

fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

#[test]
fn triplet_hand_example() {
    let mut g = Graph::new();
    let x = tokens(&mut g, 4, vec![0.0, 1.0, 3.0, 4.0]);
    let l = loss::triplet_batch_hard(&mut g, x, &[0, 0, 1, 1], TripletMode::Softplus).unwrap();
    // anchor 0 alone gives ln(1 + e^-2) = 0.1269280110429725
    assert!((value(&g, l) - 0.2200948492805977).abs() < 1e-12);
    let l = loss::triplet_batch_hard(&mut g, x, &[0, 0, 1, 1], TripletMode::Hinge0).unwrap();
    assert_eq!(value(&g, l), 0.0);
}

#[test]
fn triplet_of_separated_clusters_vanishes() {
    let mut g = Graph::new();
    let x = tokens(&mut g, 4, vec![0.0, 0.0, 0.1, 0.0, 20.0, 5.0, 20.1, 5.0]);
    let l = loss::triplet_batch_hard(&mut g, x, &[0, 0, 1, 1], TripletMode::Softplus).unwrap();
    assert!(value(&g, l) < 1e-3);
}

#[test]
fn triplet_needs_positives_and_negatives() {
    let mut g = Graph::new();
    let x = tokens(&mut g, 3, vec![0.0, 1.0, 2.0]);
    assert!(loss::triplet_batch_hard(&mut g, x, &[0, 0, 1], TripletMode::Softplus).is_err());
    assert!(loss::triplet_batch_hard(&mut g, x, &[0, 0, 0], TripletMode::Softplus).is_err());
    assert!(loss::triplet_batch_hard(&mut g, x, &[0, 0], TripletMode::Softplus).is_err());
}

#[test]
fn smooth_l1_anchor_values() {
    for (d, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
        let mut g = Graph::new();
        let a = tokens(&mut g, 2, vec![d; 6]);
        let b = tokens(&mut g, 2, vec![0.0; 6]);
        let l = loss::smooth_l1(&mut g, a, b).unwrap();
        assert_eq!(value(&g, l), want);
    }
}

#[test]
fn smooth_l1_is_c1_at_the_seam() {
    let h = 1e-7;
    for i in -50..=50 {
        let d = 1.0 + i as f64 * 1e-4;
        let v = smooth_l1_scalar(d);
        // both pieces agree to second order around the seam
        assert!((v - (d - 0.5)).abs() <= 0.5 * (d - 1.0) * (d - 1.0) + 1e-15, "value at {d}");
        let slope = (smooth_l1_scalar(d + h) - smooth_l1_scalar(d - h)) / (2.0 * h);
        assert!((slope - 1.0).abs() <= (d - 1.0f64).abs() + 1e-6, "slope at {d}: {slope}");
    }
    assert_eq!(smooth_l1_scalar(1.0), 0.5);
}

#[test]
fn loss_total_arithmetic() {
    let mut g = Graph::new();
    let ori = g.constant(Tensor::scalar(2.0));
    let rot = g.constant(Tensor::scalar(4.0));
    let inv = g.constant(Tensor::scalar(0.1));
    let t = loss::loss_total(&mut g, ori, Some(rot), Some(inv), 0.5).unwrap();
    assert!((value(&g, t) - 3.1).abs() < 1e-12);
    let t = loss::loss_total(&mut g, ori, Some(rot), None, 1.0).unwrap();
    assert_eq!(value(&g, t), 2.0);
    let t = loss::loss_total(&mut g, ori, Some(rot), None, 0.0).unwrap();
    assert_eq!(value(&g, t), 4.0);
    let err = loss::loss_total(&mut g, ori, Some(rot), None, 1.5).unwrap_err();
    assert!(err.to_string().contains("lambda in [0, 1]"), "{err}");
}

fn random_tokens(g: &mut Graph<f64>, seed: u64, b: usize, d: usize) -> Var {
    let mut r = stream(seed, "tokens");
    tokens(g, b, (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect())
}

#[test]
fn rotated_loss_is_the_branch_mean() {
    let mut store = ParamStore::<f64>::new();
    let heads: Vec<_> = (0..3).map(|i| BnNeckHead::register(&mut store, &format!("h{i}"), 4, 3, i)).collect();
    let labels = [0, 0, 1, 1, 2, 2];
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let ts: Vec<Var> = (0..3).map(|i| random_tokens(&mut g, i, 6, 4)).collect();
    let (rot, stats) = loss::loss_rot(&mut g, &store, &ts, &labels, &heads, &cfg).unwrap();
    assert_eq!(stats.len(), 3);
    let each: Vec<f64> = ts
        .iter()
        .zip(&heads)
        .map(|(&t, h)| {
            let (l, _) = loss::stream_loss(&mut g, &store, t, &labels, h, &cfg).unwrap();
            value(&g, l)
        })
        .collect();
    assert!((value(&g, rot) - each.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    // branch order does not matter when heads move with their tokens
    let (perm, _) = loss::loss_rot(&mut g, &store, &[ts[2], ts[0], ts[1]], &labels, &[heads[2].clone(), heads[0].clone(), heads[1].clone()], &cfg).unwrap();
    assert!((value(&g, perm) - value(&g, rot)).abs() < 1e-12);
    assert!(loss::loss_rot(&mut g, &store, &ts[..2], &labels, &heads, &cfg).is_err());
}

#[test]
fn symmetric_branches_share_gradient_equally() {
    let mut store = ParamStore::<f64>::new();
    let h0 = BnNeckHead::register(&mut store, "h0", 3, 2, 9);
    let h1 = BnNeckHead::register(&mut store, "h1", 3, 2, 10);
    // identical heads
    let w = store.value(h0.classifier).clone();
    store.set_value("h1.classifier.weight", w).unwrap();
    let labels = [0, 0, 1, 1];
    let mut g = Graph::new();
    let shared = random_tokens(&mut g, 4, 4, 3);
    let value0 = g.value(shared).clone();
    let a = g.input(value0.clone());
    let b = g.input(value0);
    let (l, _) = loss::loss_rot(&mut g, &store, &[a, b], &labels, &[h0, h1], &LossConfig::default()).unwrap();
    let grads = g.backward(l).unwrap();
    let (ga, gb) = (grads.get(a).unwrap(), grads.get(b).unwrap());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm(ga) - norm(gb)).abs() < 1e-12 && norm(ga) > 0.0);
}

/// Random orthogonal `d × d` matrix by Gram–Schmidt.
fn orthogonal(seed: u64, d: usize) -> Vec<f64> {
    let mut r = stream(seed, "orth");
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q.concat()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_invariant_to_a_global_rotation(seed in any::<u64>()) {
        let (b, d) = (6, 4);
        let mut g = Graph::new();
        let x = random_tokens(&mut g, seed, b, d);
        let q = g.constant(Tensor::new([d, d], orthogonal(seed, d)).unwrap());
        let y = g.matmul(x, q).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        let lx = loss::triplet_batch_hard(&mut g, x, &labels, TripletMode::Softplus).unwrap();
        let ly = loss::triplet_batch_hard(&mut g, y, &labels, TripletMode::Softplus).unwrap();
        prop_assert!((value(&g, lx) - value(&g, ly)).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_is_symmetric(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut g = Graph::new();
        let va = tokens(&mut g, 2, a);
        let vb = tokens(&mut g, 2, b);
        let ab = loss::smooth_l1(&mut g, va, vb).unwrap();
        let ba = loss::smooth_l1(&mut g, vb, va).unwrap();
        prop_assert_eq!(value(&g, ab), value(&g, ba));
    }

    #[test]
    fn every_term_is_nonnegative(seed in any::<u64>(), lambda in 0.0f64..=1.0, smoothing in 0.0f64..0.5) {
        let mut store = ParamStore::<f64>::new();
        let h0 = BnNeckHead::register(&mut store, "h0", 4, 3, seed);
        let h1 = BnNeckHead::register(&mut store, "h1", 4, 3, seed ^ 1);
        let cfg = LossConfig { lambda, label_smoothing: smoothing, ..LossConfig::default() };
        let labels = [0, 0, 1, 1, 2, 2];
        let mut g = Graph::new();
        let o = random_tokens(&mut g, seed, 6, 4);
        let r = random_tokens(&mut g, seed.wrapping_add(1), 6, 4);
        let (lo, _) = loss::loss_ori(&mut g, &store, o, &labels, &h0, &cfg).unwrap();
        let (lr, _) = loss::loss_rot(&mut g, &store, &[r], &labels, &[h1], &cfg).unwrap();
        let li = loss::smooth_l1(&mut g, o, r).unwrap();
        let t = loss::loss_total(&mut g, lo, Some(lr), Some(li), lambda).unwrap();
        for v in [lo, lr, li, t] {
            prop_assert!(value(&g, v) >= 0.0);
        }
    }
}
