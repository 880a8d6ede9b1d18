use proptest::prelude::*;
use rand::Rng;
use rottrans_core::rng::stream;
use rottrans_core::rotation::{
    average_rotated, make_rotated_set, reshape_grid, rotate_grid, rotation_source_map, sample_angles, AngleSet,
    FeatureGrid,
};
use rottrans_core::vit::PatchFeature;
use rottrans_core::{Graph, Tensor};

/// Grid whose cell `i` holds `[i + 1, −(i + 1)]`, so every cell is distinct and non-zero.
fn labelled(x: usize, y: usize) -> FeatureGrid<f64> {
    let data: Vec<f64> = (0..x * y).flat_map(|i| [i as f64 + 1.0, -(i as f64) - 1.0]).collect();
    reshape_grid(&Tensor::new([x * y, 2], data).unwrap(), x, y).unwrap()
}

fn sources(x: usize, y: usize, theta: f64) -> Vec<usize> {
    rotation_source_map(x, y, theta).into_iter().map(|s| s.expect("inside")).collect()
}

#[test]
fn frozen_quarter_turn_permutations() {
    // cells a, b, c, d become b, d, a, c
    assert_eq!(sources(2, 2, 90.0), vec![1, 3, 0, 2]);
    assert_eq!(sources(3, 3, 90.0), vec![2, 5, 8, 1, 4, 7, 0, 3, 6]);
    assert_eq!(sources(2, 4, 180.0), vec![7, 6, 5, 4, 3, 2, 1, 0]);
    let g = rotate_grid(&labelled(2, 2), 90.0);
    assert_eq!(g.cell(0, 0), labelled(2, 2).cell(0, 1));
}

#[test]
fn grid_layout_is_row_major() {
    let patches = Tensor::new([6, 1], (0..6).map(|i| i as f64).collect()).unwrap();
    let g = reshape_grid(&patches, 2, 3).unwrap();
    assert_eq!(g.cell(1, 2), &[5.0]);
    assert_eq!(g.flatten(), patches);
    assert!(reshape_grid(&patches, 4, 2).is_err());
}

#[test]
fn zero_angle_is_identity() {
    for (x, y) in [(1, 1), (2, 3), (5, 4), (7, 7), (21, 21)] {
        let g = labelled(x, y);
        assert_eq!(rotate_grid(&g, 0.0), g);
    }
}

#[test]
fn four_quarter_turns_are_identity() {
    for n in 1..=9 {
        let g = labelled(n, n);
        let mut r = g.clone();
        for _ in 0..4 {
            r = rotate_grid(&r, 90.0);
        }
        assert_eq!(r, g, "{n}x{n}");
        // a single quarter turn is a permutation: nothing is zero-filled
        assert!(rotation_source_map(n, n, 90.0).iter().all(Option::is_some));
    }
}

#[test]
fn center_is_fixed_on_odd_grids() {
    for n in [1usize, 3, 5, 7, 9, 21] {
        let g = labelled(n, n);
        for theta in [-45.0, -15.0, 7.3, 30.0, 90.0, 135.0] {
            let r = rotate_grid(&g, theta);
            assert_eq!(r.cell(n / 2, n / 2), g.cell(n / 2, n / 2), "{n} at {theta}");
        }
    }
}

#[test]
fn feature_set_replicates_class_token() {
    let n = 9;
    let d = 2;
    let data: Vec<f64> = (0..2 * (n + 1) * d).map(|i| i as f64 + 1.0).collect();
    let mut g = Graph::<f64>::new();
    let tokens = g.constant(Tensor::new([2, n + 1, d], data.clone()).unwrap());
    let f = PatchFeature {
        tokens,
        n_patches: n,
        grid_x: 3,
        grid_y: 3,
    };
    let angles = AngleSet::fixed(vec![0.0, 90.0, -15.0, 12.0]);
    let set = make_rotated_set(&mut g, &f, &angles).unwrap();
    assert_eq!(set.features.len(), 4);
    for &m in &set.features {
        assert_eq!(g.shape(m), &[2, n + 1, d]);
        for b in 0..2 {
            let at = b * (n + 1) * d;
            assert_eq!(&g.value(m).data()[at..at + d], &data[at..at + d]);
        }
    }
    assert_eq!(g.value(set.features[0]).data(), &data[..]);
    // second member: patches of batch item 0 follow the 90° permutation
    let rotated = g.value(set.features[1]).data();
    for (target, source) in sources(3, 3, 90.0).into_iter().enumerate() {
        assert_eq!(&rotated[(target + 1) * d..(target + 2) * d], &data[(source + 1) * d..(source + 2) * d]);
    }
}

#[test]
fn sampled_angles_stay_in_bound() {
    let mut r = stream(3, "angles");
    let a = sample_angles(4, 15.0, &mut r).unwrap();
    assert_eq!(a.len(), 4);
    assert!(a.angles.iter().all(|t| (-15.0..=15.0).contains(t)));
    assert_eq!(sample_angles(4, 0.0, &mut r).unwrap().angles, vec![0.0; 4]);
    assert!(sample_angles(2, -1.0, &mut r).is_err());
    assert!(sample_angles(2, f64::NAN, &mut r).is_err());
}

#[test]
fn average_of_four_tokens() {
    let mut r = stream(5, "tokens");
    let ts: Vec<Tensor<f64>> = (0..4)
        .map(|_| Tensor::new([3, 2], (0..6).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = ts.iter().map(|t| g.constant(t.clone())).collect();
    let mean = average_rotated(&mut g, &vars).unwrap();
    for i in 0..6 {
        let s: f64 = ts.iter().map(|t| t.data()[i]).sum();
        assert!((g.value(mean).data()[i] - s / 4.0).abs() < 1e-15);
    }
    assert!(average_rotated(&mut g, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every output cell is either zero or a copy of some input cell.
    #[test]
    fn rotation_invents_no_content(x in 1usize..12, y in 1usize..12, theta in -180.0f64..180.0, seed in any::<u64>()) {
        let mut r = stream(seed, "grid");
        let data: Vec<f64> = (0..x * y * 3).map(|_| r.random_range(0.5..2.0)).collect();
        let g = reshape_grid(&Tensor::new([x * y, 3], data).unwrap(), x, y).unwrap();
        let out = rotate_grid(&g, theta);
        for cx in 0..x {
            for cy in 0..y {
                let c = out.cell(cx, cy);
                let zero = c.iter().all(|&v| v == 0.0);
                let copied = (0..x).any(|sx| (0..y).any(|sy| g.cell(sx, sy) == c));
                prop_assert!(zero || copied);
            }
        }
    }

    #[test]
    fn source_indices_stay_in_range(x in 1usize..10, y in 1usize..10, theta in -60.0f64..60.0) {
        let map = rotation_source_map(x, y, theta);
        prop_assert_eq!(map.len(), x * y);
        for s in map.iter().flatten() {
            prop_assert!(*s < x * y);
        }
    }
}
