//! Training objective.
//!
//! Each class-token stream (the original branch and every rotated branch)
//! gets a batch-hard triplet loss on its raw token and a cross-entropy loss
//! after a batch-norm neck. The rotated streams are averaged, weighted
//! against the original stream by `λ`, and an unweighted smooth-L1 term ties
//! the original token to the mean rotated token.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::vit::INIT_STD;
use crate::{Scalar, Tensor};

/// Batch-norm epsilon of the neck.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMode {
    /// `softplus(d_ap − d_an)`.
    Softplus,
    /// `max(d_ap − d_an, 0)`.
    Hinge0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the original stream, in `[0, 1]`.
    pub lambda: f64,
    pub label_smoothing: f64,
    pub triplet_mode: TripletMode,
    /// Coefficient of the invariance term; 0 disables it.
    pub inv_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            label_smoothing: 0.0,
            triplet_mode: TripletMode::Softplus,
            inv_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !self.inv_weight.is_finite() || self.inv_weight < 0.0 {
            return Err(Error::Config(format!("inv_weight must be >= 0, got {}", self.inv_weight)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda = {lambda} violates the objective weight constraint lambda in [0, 1]"
        )));
    }
    Ok(())
}

/// Batch-norm neck followed by a bias-free linear classifier.
#[derive(Debug, Clone)]
pub struct BnNeckHead {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub classifier: ParamId,
}

impl BnNeckHead {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize, num_ids: usize, seed: u64) -> Self {
        Self {
            gain: store.add(&format!("{prefix}.bn.gain"), &[dim], Init::Ones, seed),
            bias: store.add(&format!("{prefix}.bn.bias"), &[dim], Init::Zeros, seed),
            running_mean: store.add_buffer(&format!("{prefix}.bn.running_mean"), Tensor::zeros([dim])),
            running_var: store.add_buffer(&format!("{prefix}.bn.running_var"), Tensor::full([dim], F::ONE)),
            classifier: store.add(
                &format!("{prefix}.classifier.weight"),
                &[dim, num_ids],
                Init::TruncNormal(INIT_STD),
                seed,
            ),
        }
    }

    /// Trainable scalars (running statistics excluded).
    pub fn param_count(dim: usize, num_ids: usize) -> usize {
        2 * dim + dim * num_ids
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.gain, self.bias, self.running_mean, self.running_var, self.classifier]
    }

    pub fn num_ids<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        store.value(self.classifier).shape()[1]
    }

    /// Inference-mode neck output `[B, D]` using the running statistics.
    pub fn normalize_eval<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, token: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.batch_norm_eval(
            token,
            gain,
            bias,
            store.value(self.running_mean).data(),
            store.value(self.running_var).data(),
            F::from_f64(BN_EPS),
        )
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running<F: Scalar>(&self, store: &mut ParamStore<F>, stats: &BatchStats<F>, momentum: F) {
        let keep = F::ONE - momentum;
        for (r, &m) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Cross-entropy after the training-mode neck. Returns the loss and the
/// batch statistics for the running-stat update.
pub fn ce_bnneck<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    head: &BnNeckHead,
    token: Var,
    labels: &[usize],
    label_smoothing: f64,
) -> Result<(Var, BatchStats<F>)> {
    let gain = g.param(store, head.gain);
    let bias = g.param(store, head.bias);
    let (normed, stats) = g.batch_norm(token, gain, bias, F::from_f64(BN_EPS))?;
    let w = g.param(store, head.classifier);
    let logits = g.matmul(normed, w)?;
    let loss = g.cross_entropy(logits, labels, F::from_f64(label_smoothing))?;
    Ok((loss, stats))
}

/// Batch-hard triplet loss over `tokens[B, D]`: for each anchor the farthest
/// positive and nearest negative (Euclidean), averaged over anchors.
pub fn triplet_batch_hard<F: Scalar>(g: &mut Graph<F>, tokens: Var, labels: &[usize], mode: TripletMode) -> Result<Var> {
    let b = labels.len();
    if g.shape(tokens).first() != Some(&b) {
        return Err(Error::Data(format!(
            "{} labels for tokens of shape {:?}",
            b,
            g.shape(tokens)
        )));
    }
    let dist = g.pairwise_distance(tokens)?;
    let dv = g.value(dist).data();
    let mut pos_idx = Vec::with_capacity(b);
    let mut neg_idx = Vec::with_capacity(b);
    for a in 0..b {
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dv[a * b + j];
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|p| d > dv[a * b + p]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.is_none_or(|n| d < dv[a * b + n]) {
                hardest_neg = Some(j);
            }
        }
        let p = hardest_pos.ok_or_else(|| {
            Error::Sampling(format!("identity {} has a single sample in the batch", labels[a]))
        })?;
        let n = hardest_neg
            .ok_or_else(|| Error::Sampling("batch holds a single identity, no negatives".into()))?;
        pos_idx.push(a * b + p);
        neg_idx.push(a * b + n);
    }
    let d_ap = g.gather(dist, pos_idx)?;
    let d_an = g.gather(dist, neg_idx)?;
    let margin = g.sub(d_ap, d_an)?;
    let per_anchor = match mode {
        TripletMode::Softplus => g.softplus(margin),
        TripletMode::Hinge0 => g.relu(margin),
    };
    Ok(g.mean(per_anchor))
}

/// Invariance term between the original and the mean rotated class token.
pub fn smooth_l1<F: Scalar>(g: &mut Graph<F>, c_prime_o: Var, c_bar_r: Var) -> Result<Var> {
    g.smooth_l1(c_prime_o, c_bar_r)
}

/// Triplet plus neck cross-entropy of one stream.
pub fn stream_loss<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    token: Var,
    labels: &[usize],
    head: &BnNeckHead,
    cfg: &LossConfig,
) -> Result<(Var, BatchStats<F>)> {
    let tri = triplet_batch_hard(g, token, labels, cfg.triplet_mode)?;
    let (ce, stats) = ce_bnneck(g, store, head, token, labels, cfg.label_smoothing)?;
    Ok((g.add(tri, ce)?, stats))
}

/// Loss of the original stream.
pub fn loss_ori<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    c_prime_o: Var,
    labels: &[usize],
    head: &BnNeckHead,
    cfg: &LossConfig,
) -> Result<(Var, BatchStats<F>)> {
    stream_loss(g, store, c_prime_o, labels, head, cfg)
}

/// Mean over rotated streams of their triplet plus cross-entropy losses.
pub fn loss_rot<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    c_r: &[Var],
    labels: &[usize],
    heads: &[BnNeckHead],
    cfg: &LossConfig,
) -> Result<(Var, Vec<BatchStats<F>>)> {
    if c_r.is_empty() || c_r.len() != heads.len() {
        return Err(Error::Config(format!(
            "{} rotated tokens for {} rotated heads",
            c_r.len(),
            heads.len()
        )));
    }
    let mut stats = Vec::with_capacity(c_r.len());
    let mut total: Option<Var> = None;
    for (&token, head) in c_r.iter().zip(heads) {
        let (l, s) = stream_loss(g, store, token, labels, head, cfg)?;
        stats.push(s);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("non-empty");
    Ok((g.scale(total, F::ONE / F::from_usize(c_r.len())), stats))
}

/// `λ·ori + (1 − λ)·rot + inv`; absent terms contribute zero.
pub fn loss_total<F: Scalar>(
    g: &mut Graph<F>,
    ori: Var,
    rot: Option<Var>,
    inv: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let mut total = g.scale(ori, F::from_f64(lambda));
    if let Some(r) = rot {
        let r = g.scale(r, F::from_f64(1.0 - lambda));
        total = g.add(total, r)?;
    }
    if let Some(i) = inv {
        total = g.add(total, i)?;
    }
    Ok(total)
}
