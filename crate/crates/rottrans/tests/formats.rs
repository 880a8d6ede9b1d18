use proptest::prelude::*;
use rottrans::checkpoint::{Checkpoint, TensorRecord};
use rottrans::config;
use rottrans::core::data::RgbImage;
use rottrans::core::train::TrainConfig;
use rottrans::ppm;

fn image() -> impl Strategy<Value = RgbImage> {
    (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), w * h * 3).prop_map(move |px| RgbImage::new(w, h, px).unwrap())
    })
}

fn record() -> impl Strategy<Value = TensorRecord> {
    ("[a-z][a-z0-9._]{0,12}", prop::collection::vec(1usize..4, 0..3)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| TensorRecord { name: name.clone(), shape: shape.clone(), data })
    })
}

proptest! {
    #[test]
    fn ppm_round_trips(img in image()) {
        prop_assert_eq!(ppm::decode(&ppm::encode(&img)).unwrap(), img);
    }

    #[test]
    fn truncated_ppm_is_rejected(img in image(), cut in 1usize..8) {
        let bytes = ppm::encode(&img);
        let err = ppm::decode(&bytes[..bytes.len() - cut.min(bytes.len())]);
        prop_assert!(err.is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip(tensors in prop::collection::vec(record(), 0..5), text in "[ -~\n]{0,40}") {
        let ck = Checkpoint { version: rottrans::checkpoint::VERSION, config_text: text, tensors };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn rendered_config_parses_back(lr in 1e-4f64..1.0, n in 0usize..6, lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut cfg = TrainConfig { base_lr: lr, seed, ..TrainConfig::default() };
        cfg.model.rotation.n_rotations = n;
        cfg.loss.lambda = lambda;
        let mut back = TrainConfig { epochs: 1, ..TrainConfig::default() };
        config::apply_text(&mut back, &config::render(&cfg), "rendered", None).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
