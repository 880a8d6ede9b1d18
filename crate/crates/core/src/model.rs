//! The full network: shared backbone, original and rotated branches, and one
//! BN-neck head per class-token stream.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::loss::{self, BnNeckHead, LossConfig};
use crate::rotation::{branch_forward, make_rotated_set, AngleSet, Branch, BranchInit};
use crate::vit::{Backbone, BackboneConfig, EncoderLayer};
use crate::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationConfig {
    /// Number of rotated branches `n`; 0 disables feature-level rotation.
    pub n_rotations: usize,
    pub alpha_degrees: f64,
    /// Explicit angles used instead of sampling.
    pub fixed_angle_set: Option<Vec<f64>>,
    /// Draw new angles every step; otherwise one set is drawn per run.
    pub resample_per_step: bool,
    pub branch_init: BranchInit,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            n_rotations: 4,
            alpha_degrees: 15.0,
            fixed_angle_set: None,
            resample_per_step: true,
            branch_init: BranchInit::Fresh,
        }
    }
}

impl RotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_degrees.is_finite() || self.alpha_degrees < 0.0 {
            return Err(Error::Config(format!(
                "rot.alpha_degrees must be >= 0, got {}",
                self.alpha_degrees
            )));
        }
        if let Some(set) = &self.fixed_angle_set {
            if set.len() != self.n_rotations {
                return Err(Error::Config(format!(
                    "rot.fixed_angle_set has {} angles for {} rotated branches",
                    set.len(),
                    self.n_rotations
                )));
            }
            if let Some(a) = set.iter().find(|a| !a.is_finite() || a.abs() > self.alpha_degrees) {
                return Err(Error::Config(format!(
                    "fixed angle {a} lies outside [-{0}, {0}]",
                    self.alpha_degrees
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rotation: RotationConfig,
}

/// Loss terms of one training forward.
#[derive(Debug, Clone)]
pub struct TrainForward<F> {
    pub total: Var,
    pub l_ori: Var,
    pub l_rot: Option<Var>,
    /// Weighted invariance term.
    pub l_inv: Option<Var>,
    /// Batch statistics of the original head, then of each rotated head.
    pub stats: Vec<BatchStats<F>>,
}

#[derive(Debug, Clone)]
pub struct RotTransModel<F> {
    pub cfg: ModelConfig,
    pub num_ids: usize,
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    pub original: Branch,
    pub rotated: Vec<Branch>,
    pub head_ori: BnNeckHead,
    pub heads_rot: Vec<BnNeckHead>,
}

impl<F: Scalar> RotTransModel<F> {
    /// Builds and initializes the network. Each tensor is initialized from a
    /// stream named after it, so adding or removing branches leaves every
    /// other tensor unchanged.
    pub fn new(cfg: &ModelConfig, num_ids: usize, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        cfg.rotation.validate()?;
        if num_ids < 2 {
            return Err(Error::Config(format!("need at least 2 training identities, got {num_ids}")));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, &cfg.backbone, seed)?;
        let d = cfg.backbone.embed_dim;
        let original = Branch::register(&mut store, "branch.ori", &cfg.backbone, seed, BranchInit::Fresh);
        let head_ori = BnNeckHead::register(&mut store, "head.ori", d, num_ids, seed);
        let mut rotated = Vec::with_capacity(cfg.rotation.n_rotations);
        let mut heads_rot = Vec::with_capacity(cfg.rotation.n_rotations);
        for i in 0..cfg.rotation.n_rotations {
            let init = cfg.rotation.branch_init;
            let branch = Branch::register(&mut store, &format!("branch.rot{i}"), &cfg.backbone, seed, init);
            if init == BranchInit::CopyLast {
                if let Some(last) = backbone.layers.last() {
                    copy_layer(&mut store, last, &branch.layer);
                }
            }
            rotated.push(branch);
            heads_rot.push(BnNeckHead::register(&mut store, &format!("head.rot{i}"), d, num_ids, seed));
        }
        Ok(Self {
            cfg: cfg.clone(),
            num_ids,
            store,
            backbone,
            original,
            rotated,
            head_ori,
            heads_rot,
        })
    }

    /// Analytic number of trainable scalars.
    pub fn analytic_param_count(cfg: &ModelConfig, num_ids: usize) -> Result<usize> {
        let d = cfg.backbone.embed_dim;
        let streams = cfg.rotation.n_rotations + 1;
        Ok(Backbone::param_count(&cfg.backbone)?
            + streams * Branch::param_count(d, cfg.backbone.mlp_hidden())
            + streams * BnNeckHead::param_count(d, num_ids))
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Builds the training objective for `images[B, H, W, C]`.
    pub fn forward_train(
        &self,
        g: &mut Graph<F>,
        images: Tensor<F>,
        labels: &[usize],
        angles: &AngleSet,
        loss_cfg: &LossConfig,
    ) -> Result<TrainForward<F>> {
        let x = g.input(images);
        let f = self.backbone.forward(g, &self.store, x)?;
        let set = make_rotated_set(g, &f, angles)?;
        let out = branch_forward(g, &self.store, &f, &set, &self.original, &self.rotated)?;
        let (l_ori, s0) = loss::loss_ori(g, &self.store, out.c_prime_o, labels, &self.head_ori, loss_cfg)?;
        let mut stats = Vec::with_capacity(1 + self.rotated.len());
        stats.push(s0);
        let l_rot = if out.c_r.is_empty() {
            None
        } else {
            let (l, s) = loss::loss_rot(g, &self.store, &out.c_r, labels, &self.heads_rot, loss_cfg)?;
            stats.extend(s);
            Some(l)
        };
        let l_inv = match out.c_bar_r {
            Some(bar) if loss_cfg.inv_weight > 0.0 => {
                let l = loss::smooth_l1(g, out.c_prime_o, bar)?;
                Some(if loss_cfg.inv_weight == 1.0 {
                    l
                } else {
                    g.scale(l, F::from_f64(loss_cfg.inv_weight))
                })
            }
            _ => None,
        };
        let total = loss::loss_total(g, l_ori, l_rot, l_inv, loss_cfg.lambda)?;
        Ok(TrainForward {
            total,
            l_ori,
            l_rot,
            l_inv,
            stats,
        })
    }

    /// Folds the batch statistics of a training forward into every head.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>], momentum: f64) {
        let m = F::from_f64(momentum);
        let heads = core::iter::once(&self.head_ori).chain(&self.heads_rot);
        for (head, s) in heads.zip(stats) {
            head.update_running(&mut self.store, s, m);
        }
    }

    /// Retrieval embeddings `[B, D]`: the original-branch class token after
    /// the inference-mode neck. Rotated branches are never evaluated.
    pub fn embed(&self, images: Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.input(images);
        let f = self.backbone.forward(&mut g, &self.store, x)?;
        let token = self.original.class_token(&mut g, &self.store, f.tokens)?;
        let out = self.head_ori.normalize_eval(&mut g, &self.store, token)?;
        Ok(g.value(out).clone())
    }

    /// Copies every tensor whose name also exists in `other` with the same
    /// shape; returns the names present here but missing there.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<Vec<alloc::string::String>> {
        let mut missing = Vec::new();
        let names: Vec<_> = self.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            match other.id(&name) {
                Some(id) => self.store.set_value(&name, other.value(id).clone())?,
                None => missing.push(name),
            }
        }
        Ok(missing)
    }
}

fn copy_layer<F: Scalar>(store: &mut ParamStore<F>, from: &EncoderLayer, to: &EncoderLayer) {
    for (src, dst) in from.param_ids().into_iter().zip(to.param_ids()) {
        let v = store.value(src).clone();
        store.get_mut(dst).value = v;
    }
}

/// Batch tensor `[B, H, W, C]` from equally shaped `[H, W, C]` images.
pub fn stack_images<F: Scalar>(images: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("cannot stack an empty image list".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != s.as_slice() {
            return Err(crate::error::dim_err(
                "stack_images",
                format!("{:?} vs {:?}", im.shape(), s),
            ));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = alloc::vec![images.len()];
    shape.extend_from_slice(&s);
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_height: 12,
                image_width: 12,
                patch_size: 4,
                stride: 4,
                embed_dim: 8,
                num_heads: 2,
                depth: 1,
                mlp_ratio: 2,
                ..BackboneConfig::default()
            },
            rotation: RotationConfig {
                n_rotations: 2,
                ..RotationConfig::default()
            },
        }
    }

    #[test]
    fn parameter_count_matches_the_analytic_count() {
        for n in [0, 1, 3] {
            let mut cfg = tiny();
            cfg.rotation.n_rotations = n;
            let m = RotTransModel::<f32>::new(&cfg, 5, 1).unwrap();
            assert_eq!(m.param_count(), RotTransModel::<f32>::analytic_param_count(&cfg, 5).unwrap());
        }
        let cfg = ModelConfig::default();
        let m = RotTransModel::<f32>::new(&cfg, 32, 0).unwrap();
        assert_eq!(m.param_count(), RotTransModel::<f32>::analytic_param_count(&cfg, 32).unwrap());
    }

    #[test]
    fn shared_tensors_do_not_depend_on_branch_count() {
        let mut cfg = tiny();
        let a = RotTransModel::<f64>::new(&cfg, 4, 9).unwrap();
        cfg.rotation.n_rotations = 0;
        let b = RotTransModel::<f64>::new(&cfg, 4, 9).unwrap();
        for (_, p) in b.store.iter() {
            let id = a.store.id(&p.name).unwrap();
            assert_eq!(a.store.value(id), &p.value, "{}", p.name);
        }
    }

    #[test]
    fn copy_last_duplicates_the_final_backbone_layer() {
        let mut cfg = tiny();
        cfg.rotation.branch_init = BranchInit::CopyLast;
        let m = RotTransModel::<f32>::new(&cfg, 4, 2).unwrap();
        let last = m.backbone.layers.last().unwrap().param_ids();
        for (s, d) in last.iter().zip(m.rotated[1].layer.param_ids()) {
            assert_eq!(m.store.value(*s), m.store.value(d));
        }
    }
}
