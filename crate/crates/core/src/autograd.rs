//! Reverse-mode differentiation over an append-only operation tape.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] visits each node exactly once in
//! reverse.
//!
//! Broadcasting is limited to leading-dimension expansion: the right operand
//! of [`Graph::add`], [`Graph::sub`] and [`Graph::mul`] may have a shape equal
//! to a suffix of the left operand's shape.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, shape_str, Error, Result};
use crate::kernels::{gemm_nn, gemm_tn, transpose};
use crate::param::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Squared-distance floor for [`Graph::pairwise_distance`].
pub const DIST_EPS: f64 = 1e-12;

enum Op<F> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: F },
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Gelu(Var),
    Softplus(Var),
    Relu(Var),
    Reshape(Var),
    SplitHeads { x: Var, part: usize, heads: usize },
    MergeHeads { x: Var, heads: usize },
    SelectRows { x: Var, index: Vec<Option<usize>> },
    ExpandBatch { x: Var },
    ConcatRows { a: Var, b: Var },
    Im2Col { x: Var, geom: PatchGeometry },
    CrossEntropy { logits: Var, targets: Vec<F> , probs: Vec<F> },
    PairwiseDistance(Var),
    Gather { x: Var, index: Vec<usize> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    BatchNormEval { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    SmoothL1 { a: Var, b: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Sliding-window geometry of an image-to-patch extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub grid_x: usize,
    pub grid_y: usize,
}

impl PatchGeometry {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_patches(&self) -> usize {
        self.grid_x * self.grid_y
    }
}

/// Statistics of one training-mode batch normalization, for running-stat updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased batch variance.
    pub var: Vec<F>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a leaf or parameter node.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// `(parameter, gradient)` for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_deref().map(|g| (*id, g)))
    }
}

/// Tape of one forward computation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_of(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn grad_slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::ZERO; len])
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    /// `a[..., k] · b[k, n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || last_dim(sa) != sb[0] {
            return Err(dim_err(
                "matmul",
                alloc::format!("{} · {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![F::ZERO; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over matching leading dimensions:
    /// `a[..., m, k] · b[..., k, n]`, or `a · bᵀ` with `b[..., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || dim_err("bmm", alloc::format!("{} · {}", shape_str(sa), shape_str(sb)));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(bad());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let mut out = vec![F::ZERO; batch * m * n];
        let mut scratch = vec![F::ZERO; k * n];
        let (da, db) = (self.data(a), self.data(b));
        for l in 0..batch {
            let al = &da[l * m * k..(l + 1) * m * k];
            let bl = &db[l * k * n..(l + 1) * k * n];
            let cl = &mut out[l * m * n..(l + 1) * m * n];
            if trans_b {
                transpose(n, k, bl, &mut scratch);
                gemm_nn(m, k, n, al, &scratch, cl);
            } else {
                gemm_nn(m, k, n, al, bl, cl);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(dim_err(
                op,
                alloc::format!("{} is not a suffix of {}", shape_str(sb), shape_str(sa)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let db = self.data(b);
        let nb = db.len().max(1);
        let out: Vec<F> = self
            .data(a)
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out).expect("broadcast keeps shape")
    }

    /// Elementwise `a + b`, `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let v = self.binary(a, b, |x, y| x + y);
        Ok(self.push_op(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let v = self.binary(a, b, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let v = self.binary(a, b, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        self.push_op(v, Op::Scale { a, s }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.data(a).iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: F = self.data(a).iter().copied().sum();
        self.push_op(Tensor::scalar(s / F::from_usize(n)), Op::MeanAll(a), &[a])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = last_dim(self.shape(a));
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(row[0], F::max);
            let mut z = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push_op(v, Op::Softmax(a), &[a])
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err(
                "layer_norm",
                alloc::format!(
                    "features {d}, gain {}, bias {}",
                    shape_str(self.shape(gain)),
                    shape_str(self.shape(bias))
                ),
            ));
        }
        let dx = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = dx.len() / d;
        let mut xhat = vec![F::ZERO; dx.len()];
        let mut inv_std = vec![F::ZERO; rows];
        let mut out = vec![F::ZERO; dx.len()];
        let df = F::from_usize(d);
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let inv = F::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push_op(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push_op(v, Op::Gelu(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| softplus(x)).collect();
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push_op(v, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.max(F::ZERO)).collect();
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    /// Extracts part `part` (0 = query, 1 = key, 2 = value) of a fused
    /// projection `[B, T, 3·D]` as `[B, heads, T, D / heads]`.
    pub fn split_heads(&mut self, x: Var, part: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || !s[2].is_multiple_of(3 * heads) || part > 2 {
            return Err(dim_err(
                "split_heads",
                alloc::format!("{} with {heads} heads, part {part}", shape_str(s)),
            ));
        }
        let (b, t, d3) = (s[0], s[1], s[2]);
        let d = d3 / 3;
        let dh = d / heads;
        let src = self.data(x);
        let mut out = vec![F::ZERO; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let from = (bi * t + ti) * d3 + part * d + h * dh;
                    let to = ((bi * heads + h) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let v = Tensor::new(vec![b, heads, t, dh], out)?;
        Ok(self.push_op(v, Op::SplitHeads { x, part, heads }, &[x]))
    }

    /// `[B, heads, T, dh]` → `[B, T, heads·dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(dim_err("merge_heads", shape_str(s)));
        }
        let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        let d = heads * dh;
        let src = self.data(x);
        let mut out = vec![F::ZERO; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let from = ((bi * heads + h) * t + ti) * dh;
                    let to = (bi * t + ti) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let v = Tensor::new(vec![b, t, d], out)?;
        Ok(self.push_op(v, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Row gather along the second-to-last axis of `x[..., T, D]`:
    /// output row `r` is input row `index[r]`, or zeros for `None`.
    pub fn select_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err("select_rows", shape_str(s)));
        }
        let r = s.len();
        let (t, d) = (s[r - 2], s[r - 1]);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= t) {
            return Err(dim_err(
                "select_rows",
                alloc::format!("row {bad} out of range for {}", shape_str(s)),
            ));
        }
        let lead: usize = s[..r - 2].iter().product();
        let rows = index.len();
        let src = self.data(x);
        let mut out = vec![F::ZERO; lead * rows * d];
        for l in 0..lead {
            for (ri, src_row) in index.iter().enumerate() {
                if let Some(i) = *src_row {
                    let from = (l * t + i) * d;
                    let to = (l * rows + ri) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = rows;
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::SelectRows { x, index }, &[x]))
    }

    /// Repeats `x` along a new leading axis of extent `batch`.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Var {
        let t = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(batch * t.len());
        for _ in 0..batch {
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(shape, out).expect("consistent");
        self.push_op(v, Op::ExpandBatch { x }, &[x])
    }

    /// Concatenates `a[..., Ta, D]` and `b[..., Tb, D]` along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(dim_err(
                "concat_rows",
                alloc::format!("{} ++ {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (ta, tb, d) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let lead: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 2] = ta + tb;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(lead * (ta + tb) * d);
        for l in 0..lead {
            out.extend_from_slice(&da[l * ta * d..(l + 1) * ta * d]);
            out.extend_from_slice(&db[l * tb * d..(l + 1) * tb * d]);
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::ConcatRows { a, b }, &[a, b]))
    }

    /// Sliding-window extraction `[B, H, W, C]` → `[B, X·Y, P·P·C]`.
    ///
    /// Windows are ordered row-major by grid position; each window is
    /// flattened in `(row, column, channel)` order.
    pub fn im2col(&mut self, x: Var, geom: PatchGeometry) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[1] != geom.height || s[2] != geom.width || s[3] != geom.channels {
            return Err(dim_err(
                "im2col",
                alloc::format!(
                    "image batch {} vs {}x{}x{}",
                    shape_str(s),
                    geom.height,
                    geom.width,
                    geom.channels
                ),
            ));
        }
        let b = s[0];
        let (w, c, p, st) = (geom.width, geom.channels, geom.patch, geom.stride);
        let plen = geom.patch_len();
        let n = geom.num_patches();
        let img_len = geom.height * w * c;
        let src = self.data(x);
        let mut out = vec![F::ZERO; b * n * plen];
        for bi in 0..b {
            let img = &src[bi * img_len..(bi + 1) * img_len];
            for gx in 0..geom.grid_x {
                for gy in 0..geom.grid_y {
                    let base = (bi * n + gx * geom.grid_y + gy) * plen;
                    for i in 0..p {
                        let from = ((gx * st + i) * w + gy * st) * c;
                        let to = base + i * p * c;
                        out[to..to + p * c].copy_from_slice(&img[from..from + p * c]);
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, n, plen], out)?;
        Ok(self.push_op(v, Op::Im2Col { x, geom }, &[x]))
    }

    /// Mean cross-entropy of `logits[B, C]` against integer labels, with
    /// uniform label smoothing `smoothing`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: F) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err(
                "cross_entropy",
                alloc::format!("logits {} for {} labels", shape_str(s), labels.len()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let off = smoothing / F::from_usize(c);
        let mut targets = vec![off; b * c];
        for (i, &l) in labels.iter().enumerate() {
            targets[i * c + l] += F::ONE - smoothing;
        }
        let src = self.data(logits);
        let mut probs = vec![F::ZERO; b * c];
        let mut total = F::ZERO;
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(row[0], F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            for j in 0..c {
                let logp = row[j] - log_z;
                probs[i * c + j] = logp.exp();
                total -= targets[i * c + j] * logp;
            }
        }
        let v = Tensor::scalar(total / F::from_usize(b));
        Ok(self.push_op(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// Euclidean distances between all row pairs of `x[B, D]`:
    /// `√max(‖xᵢ − xⱼ‖², DIST_EPS)`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err("pairwise_distance", shape_str(s)));
        }
        let (b, d) = (s[0], s[1]);
        let src = self.data(x);
        let floor = F::from_f64(DIST_EPS);
        let mut out = vec![F::ZERO; b * b];
        for i in 0..b {
            for j in 0..b {
                let sq: F = (0..d)
                    .map(|k| {
                        let t = src[i * d + k] - src[j * d + k];
                        t * t
                    })
                    .sum();
                out[i * b + j] = sq.max(floor).sqrt();
            }
        }
        let v = Tensor::new(vec![b, b], out)?;
        Ok(self.push_op(v, Op::PairwiseDistance(x), &[x]))
    }

    /// Flat gather: output element `i` is `x.data[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(dim_err(
                "gather",
                alloc::format!("index {bad} out of range for {n} elements"),
            ));
        }
        let src = self.data(x);
        let out = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(vec![index.len()], out)?;
        Ok(self.push_op(v, Op::Gather { x, index }, &[x]))
    }

    /// Training-mode batch normalization of `x[B, D]` over the batch axis.
    /// Returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] < 2 || self.shape(gain) != [s[1]] || self.shape(bias) != [s[1]] {
            return Err(dim_err(
                "batch_norm",
                alloc::format!("input {} (needs batch >= 2)", shape_str(s)),
            ));
        }
        let (b, d) = (s[0], s[1]);
        let src = self.data(x);
        let (g, bb) = (self.data(gain), self.data(bias));
        let bf = F::from_usize(b);
        let mut mean = vec![F::ZERO; d];
        let mut var = vec![F::ZERO; d];
        for i in 0..b {
            for j in 0..d {
                mean[j] += src[i * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= bf);
        for i in 0..b {
            for j in 0..d {
                let t = src[i * d + j] - mean[j];
                var[j] += t * t;
            }
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v / bf + eps).sqrt()).collect();
        let mut xhat = vec![F::ZERO; b * d];
        let mut out = vec![F::ZERO; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (src[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + bb[j];
            }
        }
        let unbiased = var.iter().map(|&v| v / F::from_usize(b - 1)).collect();
        let v = Tensor::new(vec![b, d], out)?;
        let var_node = self.push_op(
            v,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        );
        Ok((var_node, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let s = self.shape(x);
        let d = last_dim(s);
        if s.len() != 2 || self.shape(gain) != [d] || running_mean.len() != d || running_var.len() != d {
            return Err(dim_err("batch_norm_eval", shape_str(s)));
        }
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
        let src = self.data(x);
        let (g, bb) = (self.data(gain), self.data(bias));
        let mut xhat = vec![F::ZERO; src.len()];
        let mut out = vec![F::ZERO; src.len()];
        for (i, (&v, (h, o))) in src.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let j = i % d;
            *h = (v - running_mean[j]) * inv_std[j];
            *o = *h * g[j] + bb[j];
        }
        let v = Tensor::new(s.to_vec(), out)?;
        Ok(self.push_op(
            v,
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Elementwise smooth-L1 of `a − b`, averaged over all elements.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                "smooth_l1",
                alloc::format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let n = self.value(a).len();
        let total: F = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| smooth_l1(x - y))
            .sum();
        let v = Tensor::scalar(total / F::from_usize(n.max(1)));
        Ok(self.push_op(v, Op::SmoothL1 { a, b }, &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).len() / k;
                if self.needs(a) {
                    let mut bt = vec![F::ZERO; k * n];
                    transpose(k, n, self.data(b), &mut bt);
                    let ga = grad_slot(grads, a, m * k);
                    gemm_nn(m, n, k, g, &bt, ga);
                }
                if self.needs(b) {
                    let gb = grad_slot(grads, b, k * n);
                    gemm_tn(m, k, n, self.data(a), g, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = self.shape(a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = last_dim(node.value.shape());
                let batch: usize = sa[..r - 2].iter().product();
                let (da, db) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let ga = grad_slot(grads, a, batch * m * k);
                    let mut scratch = vec![F::ZERO; k * n];
                    for l in 0..batch {
                        let gl = &g[l * m * n..(l + 1) * m * n];
                        let bl = &db[l * k * n..(l + 1) * k * n];
                        let gal = &mut ga[l * m * k..(l + 1) * m * k];
                        if trans_b {
                            // c = a·bᵀ, b[n×k]: da = dc·b
                            gemm_nn(m, n, k, gl, bl, gal);
                        } else {
                            // b[k×n]: da = dc·bᵀ
                            transpose(k, n, bl, &mut scratch);
                            gemm_nn(m, n, k, gl, &scratch, gal);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = grad_slot(grads, b, batch * k * n);
                    for l in 0..batch {
                        let gl = &g[l * m * n..(l + 1) * m * n];
                        let al = &da[l * m * k..(l + 1) * m * k];
                        let gbl = &mut gb[l * k * n..(l + 1) * k * n];
                        if trans_b {
                            // db[n×k] = dcᵀ·a
                            gemm_tn(m, n, k, gl, al, gbl);
                        } else {
                            gemm_tn(m, k, n, al, gl, gbl);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let negate = matches!(node.op, Op::Sub { .. });
                if self.needs(a) {
                    let ga = grad_slot(grads, a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.needs(b) {
                    let nb = self.value(b).len();
                    let gb = grad_slot(grads, b, nb);
                    for chunk in g.chunks(nb.max(1)) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            if negate {
                                *x -= y;
                            } else {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let (da, db) = (self.data(a), self.data(b));
                let nb = db.len().max(1);
                if self.needs(a) {
                    let ga = grad_slot(grads, a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * db[i % nb];
                    }
                }
                if self.needs(b) {
                    let gb = grad_slot(grads, b, db.len());
                    for (i, (&gi, &ai)) in g.iter().zip(da).enumerate() {
                        gb[i % nb] += gi * ai;
                    }
                }
            }
            Op::Scale { a, s } => {
                let ga = grad_slot(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *s;
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / F::from_usize(n)
                } else {
                    g[0]
                };
                let ga = grad_slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += scale);
            }
            Op::Softmax(a) => {
                let d = last_dim(node.value.shape());
                let ga = grad_slot(grads, *a, out.len());
                for ((grow, yrow), garow) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..d {
                        garow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = last_dim(node.value.shape());
                let gv = self.data(*gain);
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    let df = F::from_usize(d);
                    for r in 0..inv_std.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::ZERO;
                        let mut mean_dh_h = F::ZERO;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= df;
                        mean_dh_h /= df;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            gx[r * d + j] += inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                self.affine_param_grads(*gain, *bias, g, xhat, d, grads);
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                let ga = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    let x = da[i];
                    ga[i] += g[i] * (std_normal_cdf(x) + x * std_normal_pdf(x));
                }
            }
            Op::Softplus(a) => {
                let da = self.data(*a);
                let ga = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(da[i]);
                }
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                let ga = grad_slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if da[i] > F::ZERO {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = grad_slot(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::SplitHeads { x, part, heads } => {
                let s = self.shape(*x);
                let (b, t, d3) = (s[0], s[1], s[2]);
                let d = d3 / 3;
                let dh = d / heads;
                let gx = grad_slot(grads, *x, b * t * d3);
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let to = (bi * t + ti) * d3 + part * d + h * dh;
                            let from = ((bi * heads + h) * t + ti) * dh;
                            for j in 0..dh {
                                gx[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, t, dh) = (s[0], s[2], s[3]);
                let d = heads * dh;
                let gx = grad_slot(grads, *x, g.len());
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let to = ((bi * heads + h) * t + ti) * dh;
                            let from = (bi * t + ti) * d + h * dh;
                            for j in 0..dh {
                                gx[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::SelectRows { x, index } => {
                let s = self.shape(*x);
                let r = s.len();
                let (t, d) = (s[r - 2], s[r - 1]);
                let lead: usize = s[..r - 2].iter().product();
                let rows = index.len();
                let gx = grad_slot(grads, *x, lead * t * d);
                for l in 0..lead {
                    for (ri, src_row) in index.iter().enumerate() {
                        if let Some(i) = *src_row {
                            let to = (l * t + i) * d;
                            let from = (l * rows + ri) * d;
                            for j in 0..d {
                                gx[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::ExpandBatch { x } => {
                let n = self.value(*x).len();
                let gx = grad_slot(grads, *x, n);
                for chunk in g.chunks(n.max(1)) {
                    for (a, &b) in gx.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (ta, tb, d) = (sa[r - 2], sb[r - 2], sa[r - 1]);
                let lead: usize = sa[..r - 2].iter().product();
                let row = (ta + tb) * d;
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, lead * ta * d);
                    for l in 0..lead {
                        for j in 0..ta * d {
                            ga[l * ta * d + j] += g[l * row + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, lead * tb * d);
                    for l in 0..lead {
                        for j in 0..tb * d {
                            gb[l * tb * d + j] += g[l * row + ta * d + j];
                        }
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                let b = self.shape(*x)[0];
                let (w, c, p, st) = (geom.width, geom.channels, geom.patch, geom.stride);
                let plen = geom.patch_len();
                let n = geom.num_patches();
                let img_len = geom.height * w * c;
                let gx = grad_slot(grads, *x, b * img_len);
                for bi in 0..b {
                    for gxi in 0..geom.grid_x {
                        for gyi in 0..geom.grid_y {
                            let base = (bi * n + gxi * geom.grid_y + gyi) * plen;
                            for i in 0..p {
                                let to = bi * img_len + ((gxi * st + i) * w + gyi * st) * c;
                                let from = base + i * p * c;
                                for j in 0..p * c {
                                    gx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = self.shape(*logits)[0];
                let scale = g[0] / F::from_usize(b);
                let gl = grad_slot(grads, *logits, probs.len());
                for i in 0..probs.len() {
                    gl[i] += scale * (probs[i] - targets[i]);
                }
            }
            Op::PairwiseDistance(x) => {
                let s = self.shape(*x);
                let (b, d) = (s[0], s[1]);
                let src = self.data(*x);
                let floor = F::from_f64(DIST_EPS).sqrt();
                let gx = grad_slot(grads, *x, b * d);
                for i in 0..b {
                    for j in 0..b {
                        let dist = out[i * b + j];
                        let gij = g[i * b + j];
                        if dist <= floor || gij == F::ZERO {
                            continue;
                        }
                        let coef = gij / dist;
                        for k in 0..d {
                            let diff = (src[i * d + k] - src[j * d + k]) * coef;
                            gx[i * d + k] += diff;
                            gx[j * d + k] -= diff;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let n = self.value(*x).len();
                let gx = grad_slot(grads, *x, n);
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (b, d) = (s[0], s[1]);
                let gv = self.data(*gain);
                if self.needs(*x) {
                    let bf = F::from_usize(b);
                    let gx = grad_slot(grads, *x, b * d);
                    for j in 0..d {
                        let mut mean_dh = F::ZERO;
                        let mut mean_dh_h = F::ZERO;
                        for i in 0..b {
                            let dh = g[i * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * d + j];
                        }
                        mean_dh /= bf;
                        mean_dh_h /= bf;
                        for i in 0..b {
                            let dh = g[i * d + j] * gv[j];
                            gx[i * d + j] +=
                                inv_std[j] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
                        }
                    }
                }
                self.affine_param_grads(*gain, *bias, g, xhat, d, grads);
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let gv = self.data(*gain);
                if self.needs(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        let j = i % d;
                        gx[i] += g[i] * gv[j] * inv_std[j];
                    }
                }
                self.affine_param_grads(*gain, *bias, g, xhat, d, grads);
            }
            Op::SmoothL1 { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = g[0] / F::from_usize(da.len().max(1));
                let deriv: Vec<F> = da
                    .iter()
                    .zip(db)
                    .map(|(&x, &y)| smooth_l1_grad(x - y) * scale)
                    .collect();
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, deriv.len());
                    for (x, &y) in ga.iter_mut().zip(&deriv) {
                        *x += y;
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, deriv.len());
                    for (x, &y) in gb.iter_mut().zip(&deriv) {
                        *x -= y;
                    }
                }
            }
        }
    }

    fn affine_param_grads(
        &self,
        gain: Var,
        bias: Var,
        g: &[F],
        xhat: &[F],
        d: usize,
        grads: &mut [Option<Vec<F>>],
    ) {
        if self.needs(gain) {
            let gg = grad_slot(grads, gain, d);
            for (i, (&gi, &hi)) in g.iter().zip(xhat).enumerate() {
                gg[i % d] += gi * hi;
            }
        }
        if self.needs(bias) {
            let gb = grad_slot(grads, bias, d);
            for (i, &gi) in g.iter().enumerate() {
                gb[i % d] += gi;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn std_normal_cdf<F: Scalar>(x: F) -> F {
    F::from_f64(0.5) * (F::ONE + (x * F::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<F: Scalar>(x: F) -> F {
    F::from_f64(INV_SQRT_2PI) * (F::from_f64(-0.5) * x * x).exp()
}

#[inline]
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::ZERO) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// `0.5·d²` inside the unit interval, `|d| − 0.5` outside.
#[inline]
pub fn smooth_l1<F: Scalar>(d: F) -> F {
    let a = d.abs();
    if a < F::ONE {
        F::from_f64(0.5) * d * d
    } else {
        a - F::from_f64(0.5)
    }
}

#[inline]
fn smooth_l1_grad<F: Scalar>(d: F) -> F {
    if d.abs() < F::ONE {
        d
    } else if d > F::ZERO {
        F::ONE
    } else {
        -F::ONE
    }
}
