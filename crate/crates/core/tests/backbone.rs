use proptest::prelude::*;
use rand::Rng;
use rottrans_core::model::{ModelConfig, RotTransModel, RotationConfig};
use rottrans_core::rng::stream;
use rottrans_core::rotation::BranchInit;
use rottrans_core::vit::{grid_dims, Backbone, BackboneConfig, EncoderLayer};
use rottrans_core::{Graph, ParamStore, Tensor};

fn images(seed: u64, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut r = stream(seed, "images");
    Tensor::new([b, h, w, 3], (0..b * h * w * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn grid_dims_anchors() {
    assert_eq!(grid_dims(256, 256, 16, 12).unwrap(), (21, 21));
    assert_eq!(grid_dims(32, 32, 8, 8).unwrap(), (4, 4));
    assert_eq!(grid_dims(64, 64, 8, 6).unwrap(), (10, 10));
    assert!(grid_dims(8, 8, 9, 1).is_err());
    assert!(grid_dims(8, 8, 4, 0).is_err());
}

#[test]
fn full_resolution_sequence_length() {
    let cfg = BackboneConfig {
        image_height: 256,
        image_width: 256,
        patch_size: 16,
        stride: 12,
        embed_dim: 6,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 1,
        ..BackboneConfig::default()
    };
    assert_eq!(cfg.num_patches().unwrap(), 441);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::register(&mut store, &cfg, 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(images(0, 1, 256, 256));
    let f = bb.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(f.tokens), &[1, 442, 6]);
    assert_eq!((f.grid_x, f.grid_y, f.n_patches), (21, 21, 441));
}

#[test]
fn patch_embedding_is_local() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::register(&mut store, &cfg, 1).unwrap();
    let a = images(1, 1, 64, 64);
    let mut b = a.clone();
    // one pixel at (row 13, col 40)
    let at = (13 * 64 + 40) * 3;
    b.data_mut()[at] += 0.5;
    let mut g = Graph::new();
    let (xa, xb) = (g.input(a), g.input(b));
    let pa = bb.patch_embed(&mut g, &store, xa).unwrap();
    let pb = bb.patch_embed(&mut g, &store, xb).unwrap();
    let d = cfg.embed_dim;
    let geom = cfg.geometry().unwrap();
    let covers = |start: usize, p: usize| start * geom.stride <= p && p < start * geom.stride + geom.patch;
    for gx in 0..geom.grid_x {
        for gy in 0..geom.grid_y {
            let n = gx * geom.grid_y + gy;
            let same = g.value(pa).data()[n * d..(n + 1) * d] == g.value(pb).data()[n * d..(n + 1) * d];
            assert_eq!(!same, covers(gx, 13) && covers(gy, 40), "patch ({gx}, {gy})");
        }
    }
}

#[test]
fn class_token_path_matches_full_layer() {
    let cfg = BackboneConfig {
        embed_dim: 16,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let layer = EncoderLayer::register(&mut store, "l", &cfg, 4, false);
    let mut r = stream(2, "x");
    let x = Tensor::new([3, 7, 16], (0..3 * 7 * 16).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let full = layer.forward(&mut g, &store, xv).unwrap();
    let cls = layer.forward_cls(&mut g, &store, xv).unwrap();
    assert_eq!(g.shape(full), &[3, 7, 16]);
    assert_eq!(g.shape(cls), &[3, 1, 16]);
    for b in 0..3 {
        assert_eq!(&g.value(full).data()[b * 7 * 16..b * 7 * 16 + 16], &g.value(cls).data()[b * 16..(b + 1) * 16]);
    }
}

#[test]
fn zero_init_branch_layer_is_identity() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::register(&mut store, "z", &cfg, 0, true);
    let mut g = Graph::new();
    let mut r = stream(3, "z");
    let x = g.input(Tensor::new([1, 5, 64], (0..320).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap());
    let y = layer.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn default_model_parameter_count() {
    let cfg = ModelConfig::default();
    for n in [0usize, 4] {
        let cfg = ModelConfig {
            rotation: RotationConfig {
                n_rotations: n,
                ..cfg.rotation.clone()
            },
            ..cfg.clone()
        };
        let m = RotTransModel::<f32>::new(&cfg, 32, 0).unwrap();
        assert_eq!(m.param_count(), RotTransModel::<f32>::analytic_param_count(&cfg, 32).unwrap());
    }
}

#[test]
fn embeddings_ignore_rotated_branches() {
    let base = ModelConfig::default();
    let mut cfg4 = base.clone();
    cfg4.rotation.n_rotations = 4;
    cfg4.rotation.branch_init = BranchInit::CopyLast;
    let mut cfg0 = base;
    cfg0.rotation.n_rotations = 0;
    let m4 = RotTransModel::<f64>::new(&cfg4, 8, 5).unwrap();
    let m0 = RotTransModel::<f64>::new(&cfg0, 8, 5).unwrap();
    let x = images(4, 2, 64, 64);
    assert_eq!(m4.embed(x.clone()).unwrap(), m0.embed(x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_dims_match_window_count(h in 1usize..80, w in 1usize..80, p in 1usize..20, s in 1usize..20) {
        match grid_dims(h, w, p, s) {
            Ok((x, y)) => {
                // last window fits, one more would not
                prop_assert!((x - 1) * s + p <= h && x * s + p > h);
                prop_assert!((y - 1) * s + p <= w && y * s + p > w);
            }
            Err(_) => prop_assert!(h < p || w < p),
        }
    }
}
