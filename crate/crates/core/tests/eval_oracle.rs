//! `evaluate` against a brute-force re-implementation that ranks by pairwise
//! counting instead of sorting.

use proptest::prelude::*;
use rand::Rng;
use rottrans_core::eval::{distance_matrix, evaluate, DistanceMetric};
use rottrans_core::rng::stream_indexed;
use rottrans_core::Tensor;

struct Oracle {
    cmc: Vec<f64>,
    map: f64,
    minp: f64,
    valid: usize,
}

#[allow(clippy::too_many_arguments)]
fn oracle(d: &[f64], q: usize, g: usize, qid: &[u32], gid: &[u32], qcam: &[u32], gcam: &[u32], max_rank: usize) -> Option<Oracle> {
    let mut cmc = vec![0.0; max_rank];
    let (mut map, mut minp, mut valid) = (0.0, 0.0, 0usize);
    for i in 0..q {
        let row = &d[i * g..(i + 1) * g];
        let kept: Vec<usize> = (0..g).filter(|&j| !(gid[j] == qid[i] && gcam[j] == qcam[i])).collect();
        // 1-based rank of j among kept entries under (distance, index) order
        let rank = |j: usize| 1 + kept.iter().filter(|&&o| row[o] < row[j] || (row[o] == row[j] && o < j)).count();
        let pos: Vec<usize> = kept.iter().copied().filter(|&j| gid[j] == qid[i]).map(rank).collect();
        if pos.is_empty() {
            continue;
        }
        valid += 1;
        let mut ap = 0.0;
        for &r in &pos {
            let before = pos.iter().filter(|&&o| o <= r).count();
            ap += before as f64 / r as f64;
        }
        map += ap / pos.len() as f64;
        minp += pos.len() as f64 / *pos.iter().max().unwrap() as f64;
        let first = *pos.iter().min().unwrap();
        for (k, c) in cmc.iter_mut().enumerate() {
            if first <= k + 1 {
                *c += 1.0;
            }
        }
    }
    (valid > 0).then(|| Oracle {
        cmc: cmc.iter().map(|c| c / valid as f64).collect(),
        map: map / valid as f64,
        minp: minp / valid as f64,
        valid,
    })
}

/// Returns whether the instance had a valid query.
fn compare_instance(seed: u64) -> bool {
    let mut r = stream_indexed(seed, "eval-oracle", 0);
    let q = r.random_range(1..=20usize);
    let g = r.random_range(1..=20usize);
    let n_ids = r.random_range(1..=6u32);
    let qid: Vec<u32> = (0..q).map(|_| r.random_range(0..n_ids)).collect();
    let gid: Vec<u32> = (0..g).map(|_| r.random_range(0..n_ids)).collect();
    let qcam: Vec<u32> = (0..q).map(|_| r.random_range(0..2)).collect();
    let gcam: Vec<u32> = (0..g).map(|_| r.random_range(0..2)).collect();
    // coarse levels so ties are common
    let coarse = r.random_bool(0.5);
    let d: Vec<f64> = (0..q * g)
        .map(|_| if coarse { r.random_range(0..4) as f64 } else { r.random_range(0.0..10.0) })
        .collect();
    let max_rank = r.random_range(1..=g);
    let dm = Tensor::new([q, g], d.clone()).unwrap();
    let got = evaluate(&dm, &qid, &gid, &qcam, &gcam, max_rank);
    match oracle(&d, q, g, &qid, &gid, &qcam, &gcam, max_rank) {
        None => {
            assert!(got.is_err(), "seed {seed}");
            false
        }
        Some(want) => {
            let got = got.unwrap();
            assert_eq!(got.num_valid_queries, want.valid);
            assert!((got.map - want.map).abs() < 1e-9, "seed {seed}: map {} vs {}", got.map, want.map);
            assert!((got.minp - want.minp).abs() < 1e-9, "seed {seed}: minp");
            for (a, b) in got.cmc.iter().zip(&want.cmc) {
                assert!((a - b).abs() < 1e-9, "seed {seed}: cmc");
            }
            true
        }
    }
}

#[test]
fn matches_brute_force_on_random_instances() {
    let valid = (0..200).filter(|&s| compare_instance(s)).count();
    assert!(valid > 150, "{valid}");
}

#[test]
fn adversarial_case_where_ap_is_below_inp() {
    // positives at filtered ranks 10 and 11
    let mut gid = vec![7u32; 11];
    gid[9] = 1;
    gid[10] = 1;
    let d: Vec<f64> = (0..11).map(f64::from).collect();
    let dm = Tensor::new([1, 11], d.clone()).unwrap();
    let got = evaluate(&dm, &[1], &gid, &[0], &[1; 11], 11).unwrap();
    let want = oracle(&d, 1, 11, &[1], &gid, &[0], &[1; 11], 11).unwrap();
    assert!((got.map - want.map).abs() < 1e-12);
    assert!((got.minp - want.minp).abs() < 1e-12);
    assert!(got.map < got.minp);
}

#[test]
fn cosine_distance_of_parallel_rows_is_zero() {
    let a = Tensor::new([2, 3], vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
    let b = Tensor::new([1, 3], vec![2.0f64, 4.0, 6.0]).unwrap();
    let d = distance_matrix(&a, &b, DistanceMetric::Cosine).unwrap();
    assert!(d.data()[0].abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_cmc_monotone(seed in any::<u64>()) {
        let mut r = stream_indexed(seed, "bounds", 0);
        let (q, g) = (r.random_range(1..10usize), r.random_range(2..15usize));
        let qid: Vec<u32> = (0..q).map(|_| r.random_range(0..3)).collect();
        let gid: Vec<u32> = (0..g).map(|_| r.random_range(0..3)).collect();
        let d = Tensor::new([q, g], (0..q * g).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        if let Ok(m) = evaluate(&d, &qid, &gid, &vec![0; q], &vec![1; g], g) {
            prop_assert!((0.0..=1.0).contains(&m.map));
            prop_assert!((0.0..=1.0).contains(&m.minp) && m.minp > 0.0);
            prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((m.cmc[g - 1] - 1.0).abs() < 1e-12);
        }
    }
}
