//! Training loop, run configuration and the four ablation variants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::Graph;
use crate::data::{image_level_rotate, pad_crop, random_erasing, DatasetManifest, PkSampler, RotateMode, Split};
use crate::error::{Error, Result};
use crate::eval::{distance_matrix, evaluate, DistanceMetric, RankingMetrics};
use crate::loss::LossConfig;
use crate::model::{stack_images, ModelConfig, RotTransModel};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::{derive_seed_indexed, stream, stream_indexed, Rng};
use crate::rotation::{sample_angles, AngleSet};
use crate::{Scalar, Tensor};

/// Train-time augmentations; all off by default.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Image-level random rotation and its bound in degrees.
    pub image_rotation: Option<RotateMode>,
    pub image_rotation_max: f64,
    pub random_erasing_prob: f64,
    /// Pad-and-random-crop margin in pixels; 0 disables it.
    pub pad_crop: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            image_rotation: None,
            image_rotation_max: 15.0,
            random_erasing_prob: 0.0,
            pad_crop: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub precision: Precision,
    pub bn_momentum: f64,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub eval_batch: usize,
    pub metric: DistanceMetric,
    pub max_rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            epochs: 60,
            base_lr: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
            p: 8,
            k: 4,
            seed: 0,
            precision: Precision::F32,
            bn_momentum: 0.1,
            eval_every: 0,
            eval_batch: 64,
            metric: DistanceMetric::Euclidean,
            max_rank: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("train.base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("train.warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("train.bn_momentum must be in [0, 1], got {}", self.bn_momentum));
        }
        if self.eval_batch == 0 || self.max_rank == 0 {
            return bad("eval.batch and eval.max_rank must be >= 1".into());
        }
        if !(self.aug.image_rotation_max.is_finite() && self.aug.image_rotation_max >= 0.0) {
            return bad(format!("aug.image_rotation_max must be >= 0, got {}", self.aug.image_rotation_max));
        }
        if !(0.0..=1.0).contains(&self.aug.random_erasing_prob) {
            return bad(format!(
                "aug.random_erasing_prob must be in [0, 1], got {}",
                self.aug.random_erasing_prob
            ));
        }
        self.model.backbone.validate()?;
        self.model.rotation.validate()?;
        self.loss.validate()
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Plain ViT: no rotated branches, original loss only.
    Baseline,
    /// Baseline plus image-level random rotation.
    ImageRotation,
    /// Feature-level rotation with its own loss, no invariance term.
    FeatureRotation,
    /// Feature-level rotation and the invariance term.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::ImageRotation,
        Variant::FeatureRotation,
        Variant::Full,
    ];

    pub fn letter(self) -> char {
        match self {
            Variant::Baseline => 'a',
            Variant::ImageRotation => 'b',
            Variant::FeatureRotation => 'c',
            Variant::Full => 'd',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ImageRotation => "image_rotation",
            Variant::FeatureRotation => "feature_rotation",
            Variant::Full => "full",
        }
    }

    /// Derives this variant's configuration from the full one.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Baseline | Variant::ImageRotation => {
                cfg.model.rotation.n_rotations = 0;
                cfg.model.rotation.fixed_angle_set = None;
                cfg.loss.lambda = 1.0;
                cfg.loss.inv_weight = 0.0;
                cfg.aug.image_rotation = None;
                if self == Variant::ImageRotation {
                    cfg.aug.image_rotation = Some(RotateMode::Pad);
                    cfg.aug.image_rotation_max = base.model.rotation.alpha_degrees;
                }
            }
            Variant::FeatureRotation => cfg.loss.inv_weight = 0.0,
            Variant::Full => {}
        }
        cfg
    }
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub l_ori: f64,
    pub l_rot: f64,
    pub l_inv: f64,
    pub total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub metrics: Option<RankingMetrics>,
}

/// Images of a manifest as `[H, W, C]` tensors in `[0, 1]`, plus the
/// normalization statistics.
#[derive(Debug, Clone)]
pub struct ImageSet<F> {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor<F>>,
}

impl<F: Scalar> ImageSet<F> {
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor<F>>) -> Result<Self> {
        if manifest.records.len() != images.len() {
            return Err(Error::Data(format!(
                "{} manifest records but {} images",
                manifest.records.len(),
                images.len()
            )));
        }
        manifest.validate()?;
        Ok(Self { manifest, images })
    }

    /// Per-channel standardization with the manifest statistics.
    pub fn normalize(&self, image: &Tensor<F>) -> Tensor<F> {
        let mean = self.manifest.mean.map(F::from_f64);
        let inv = self.manifest.std.map(|s| F::from_f64(1.0 / s));
        let c = image.shape()[2];
        let data = image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv[i % c])
            .collect();
        Tensor::new(image.shape().to_vec(), data).expect("same shape")
    }

    /// Zero image in normalized units, i.e. the normalized channel means.
    fn fill(&self) -> Vec<F> {
        self.manifest.mean.iter().map(|_| F::ZERO).collect()
    }
}

/// Retrieval embeddings of the records at `indices`, in order.
pub fn embed_records<F: Scalar>(
    model: &RotTransModel<F>,
    data: &ImageSet<F>,
    indices: &[usize],
    batch: usize,
) -> Result<Tensor<F>> {
    let d = model.cfg.backbone.embed_dim;
    let mut out = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(batch.max(1)) {
        let imgs: Vec<Tensor<F>> = chunk.iter().map(|&i| data.normalize(&data.images[i])).collect();
        out.extend_from_slice(model.embed(stack_images(&imgs)?)?.data());
    }
    Tensor::new([indices.len(), d], out)
}

/// Query/gallery evaluation using only the original-branch embedding.
pub fn evaluate_model<F: Scalar>(
    model: &RotTransModel<F>,
    data: &ImageSet<F>,
    metric: DistanceMetric,
    max_rank: usize,
    batch: usize,
) -> Result<RankingMetrics> {
    let q = data.manifest.indices(Split::Query);
    let gal = data.manifest.indices(Split::Gallery);
    let qf = embed_records(model, data, &q, batch)?;
    let gf = embed_records(model, data, &gal, batch)?;
    let dist = distance_matrix(&qf, &gf, metric)?;
    let rec = |idx: &[usize], f: fn(&crate::data::ManifestRecord) -> u32| -> Vec<u32> {
        idx.iter().map(|&i| f(&data.manifest.records[i])).collect()
    };
    evaluate(
        &dist,
        &rec(&q, |r| r.identity),
        &rec(&gal, |r| r.identity),
        &rec(&q, |r| r.camera),
        &rec(&gal, |r| r.camera),
        max_rank.min(gal.len()),
    )
}

/// Owns the model, optimizer state and schedule position of one run.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub cfg: TrainConfig,
    pub model: RotTransModel<F>,
    pub optim: Sgd<F>,
    sampler: PkSampler,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    fixed_angles: Option<AngleSet>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: &TrainConfig, data: &ImageSet<F>) -> Result<Self> {
        cfg.validate()?;
        let num_ids = data.manifest.train_identities().len();
        let model = RotTransModel::new(&cfg.model, num_ids, cfg.seed)?;
        let optim = Sgd::new(
            &model.store,
            SgdConfig {
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
        );
        Self::resume(cfg, data, model, optim, 0, 0)
    }

    /// Continues a run from saved state.
    pub fn resume(
        cfg: &TrainConfig,
        data: &ImageSet<F>,
        model: RotTransModel<F>,
        optim: Sgd<F>,
        epoch: usize,
        global_step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let sampler = PkSampler::new(&data.manifest, cfg.p, cfg.k)?;
        if sampler.num_identities() != model.num_ids {
            return Err(Error::Data(format!(
                "model has {} classes but the training split has {} identities",
                model.num_ids,
                sampler.num_identities()
            )));
        }
        let rot = &cfg.model.rotation;
        let fixed_angles = match (&rot.fixed_angle_set, rot.resample_per_step) {
            (Some(set), _) => Some(AngleSet {
                angles: set.clone(),
                alpha: rot.alpha_degrees,
            }),
            (None, false) => Some(sample_angles(
                rot.n_rotations,
                rot.alpha_degrees,
                &mut stream(cfg.seed, "angles"),
            )?),
            (None, true) => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optim,
            sampler,
            epoch,
            global_step,
            fixed_angles,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    fn warmup_steps(&self) -> usize {
        libm::round(self.cfg.warmup_fraction * self.total_steps() as f64) as usize
    }

    fn angles_for(&self, rng: &mut Rng) -> Result<AngleSet> {
        match &self.fixed_angles {
            Some(a) => Ok(a.clone()),
            None => sample_angles(
                self.cfg.model.rotation.n_rotations,
                self.cfg.model.rotation.alpha_degrees,
                rng,
            ),
        }
    }

    fn augment(&self, data: &ImageSet<F>, index: usize, rng: &mut Rng) -> Tensor<F> {
        let aug = &self.cfg.aug;
        let mut img = data.images[index].clone();
        if let Some(mode) = aug.image_rotation {
            let bound = aug.image_rotation_max;
            let theta = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
            img = image_level_rotate(&img, theta, mode);
        }
        if aug.pad_crop > 0 {
            img = pad_crop(&img, aug.pad_crop, rng);
        }
        let mut img = data.normalize(&img);
        if aug.random_erasing_prob > 0.0 {
            random_erasing(&mut img, aug.random_erasing_prob, &data.fill(), rng);
        }
        img
    }

    /// Runs one epoch; aborts on the first non-finite loss.
    pub fn train_epoch(&mut self, data: &ImageSet<F>) -> Result<EpochLog> {
        let epoch = self.epoch;
        let batches = self.sampler.epoch(&mut stream_indexed(self.cfg.seed, "sampler", epoch as u64));
        let total_steps = self.total_steps();
        let warmup = self.warmup_steps();
        let mut sums = [0.0f64; 4];
        let mut lr = 0.0;
        for batch in &batches {
            let step = self.global_step;
            let batch_seed = derive_seed_indexed(self.cfg.seed, "step", step as u64);
            let mut angle_rng = stream_indexed(batch_seed, "angles", 0);
            let mut aug_rng = stream_indexed(batch_seed, "augment", 0);
            let angles = self.angles_for(&mut angle_rng)?;
            let imgs: Vec<Tensor<F>> = batch
                .indices
                .iter()
                .map(|&i| self.augment(data, i, &mut aug_rng))
                .collect();
            let mut g = Graph::new();
            let fwd = self
                .model
                .forward_train(&mut g, stack_images(&imgs)?, &batch.labels, &angles, &self.cfg.loss)?;
            let val = |v: Option<crate::Var>| v.map_or(0.0, |v| g.value(v).item().to_f64());
            let terms = [val(Some(fwd.l_ori)), val(fwd.l_rot), val(fwd.l_inv), val(Some(fwd.total))];
            if terms.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!(
                        "loss (l_ori={}, l_rot={}, l_inv={}, total={})",
                        terms[0], terms[1], terms[2], terms[3]
                    ),
                    epoch: epoch + 1,
                    step,
                    batch_seed,
                });
            }
            let grads = g.backward(fwd.total)?;
            self.model.store.zero_grad();
            self.model.store.accumulate(&grads);
            lr = cosine_lr(step, total_steps, self.cfg.base_lr, warmup);
            self.optim.step(&mut self.model.store, lr)?;
            self.model.update_running_stats(&fwd.stats, self.cfg.bn_momentum);
            if !self.model.store.iter().all(|(_, p)| p.value.all_finite()) {
                return Err(Error::NonFinite {
                    what: "parameters after the update".into(),
                    epoch: epoch + 1,
                    step,
                    batch_seed,
                });
            }
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            self.global_step += 1;
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            l_ori: sums[0] / n,
            l_rot: sums[1] / n,
            l_inv: sums[2] / n,
            total: sums[3] / n,
            lr,
            metrics: None,
        })
    }

    pub fn evaluate(&self, data: &ImageSet<F>) -> Result<RankingMetrics> {
        evaluate_model(&self.model, data, self.cfg.metric, self.cfg.max_rank, self.cfg.eval_batch)
    }

    /// Trains the remaining epochs, evaluating on schedule and after the last.
    /// `on_epoch` sees every log as soon as it is complete.
    pub fn run(&mut self, data: &ImageSet<F>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.cfg.epochs.saturating_sub(self.epoch));
        while self.epoch < self.cfg.epochs {
            let mut log = self.train_epoch(data)?;
            let due = self.cfg.eval_every > 0 && log.epoch % self.cfg.eval_every == 0;
            if due || log.epoch == self.cfg.epochs {
                log.metrics = Some(self.evaluate(data)?);
            }
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
