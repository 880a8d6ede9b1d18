//! Feature-level rotation of the patch-token grid.
//!
//! Patch tokens leaving the backbone are laid out on their `X × Y` grid and
//! each token is treated as one pixel of a `D`-channel image. A rotated copy
//! is produced by inverse mapping: every target cell looks up the source cell
//! obtained by rotating its offset from the grid center by `−θ`, rounded to
//! the nearest cell; sources outside the grid give a zero token. The class
//! token never enters the grid; each rotated copy gets its own replica of it.

use alloc::format;
use alloc::vec::Vec;


use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::vit::{BackboneConfig, EncoderLayer, PatchFeature};
use crate::{Scalar, Tensor};

/// Patch tokens laid out as `[X, Y, D]` with `grid[x][y] = f_p[x·Y + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<F> {
    pub grid_x: usize,
    pub grid_y: usize,
    /// `[X, Y, D]`.
    pub grid: Tensor<F>,
}

impl<F: Scalar> FeatureGrid<F> {
    pub fn dim(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn cell(&self, x: usize, y: usize) -> &[F] {
        let d = self.dim();
        let at = (x * self.grid_y + y) * d;
        &self.grid.data()[at..at + d]
    }

    /// Inverse of [`reshape_grid`]: `[N, D]` in row-major grid order.
    pub fn flatten(&self) -> Tensor<F> {
        let d = self.dim();
        self.grid
            .clone()
            .reshape([self.grid_x * self.grid_y, d])
            .expect("grid holds X·Y·D elements")
    }
}

/// Lays patch tokens `f_p[N, D]` out on an `X × Y` grid.
pub fn reshape_grid<F: Scalar>(patches: &Tensor<F>, grid_x: usize, grid_y: usize) -> Result<FeatureGrid<F>> {
    let s = patches.shape();
    if s.len() != 2 || s[0] != grid_x * grid_y {
        return Err(dim_err(
            "reshape_grid",
            format!("{s:?} cannot fill a {grid_x}x{grid_y} grid"),
        ));
    }
    let d = s[1];
    Ok(FeatureGrid {
        grid_x,
        grid_y,
        grid: patches.clone().reshape([grid_x, grid_y, d])?,
    })
}

/// For every target cell of an `X × Y` grid rotated by `theta_degrees`, the
/// row-major index of its source cell, or `None` when the source lies outside.
pub fn rotation_source_map(grid_x: usize, grid_y: usize, theta_degrees: f64) -> Vec<Option<usize>> {
    let theta = theta_degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let cx = (grid_x as f64 - 1.0) / 2.0;
    let cy = (grid_y as f64 - 1.0) / 2.0;
    let mut map = Vec::with_capacity(grid_x * grid_y);
    for x in 0..grid_x {
        for y in 0..grid_y {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // rotation by −θ of the target offset
            let sx = libm::round(dx * cos + dy * sin + cx);
            let sy = libm::round(-dx * sin + dy * cos + cy);
            let inside = sx >= 0.0 && sy >= 0.0 && sx < grid_x as f64 && sy < grid_y as f64;
            map.push(inside.then(|| sx as usize * grid_y + sy as usize));
        }
    }
    map
}

/// Rotates a feature grid by `theta_degrees` about its geometric center.
pub fn rotate_grid<F: Scalar>(grid: &FeatureGrid<F>, theta_degrees: f64) -> FeatureGrid<F> {
    let d = grid.dim();
    let map = rotation_source_map(grid.grid_x, grid.grid_y, theta_degrees);
    let src = grid.grid.data();
    let mut out = alloc::vec![F::ZERO; src.len()];
    for (target, source) in map.iter().enumerate() {
        if let Some(s) = *source {
            out[target * d..(target + 1) * d].copy_from_slice(&src[s * d..(s + 1) * d]);
        }
    }
    FeatureGrid {
        grid_x: grid.grid_x,
        grid_y: grid.grid_y,
        grid: Tensor::new(grid.grid.shape().to_vec(), out).expect("same shape"),
    }
}

/// Rotation angles in degrees, each within `[−alpha, alpha]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    pub angles: Vec<f64>,
    pub alpha: f64,
}

impl AngleSet {
    /// Explicit angles; `alpha` is taken as the largest magnitude.
    pub fn fixed(angles: Vec<f64>) -> Self {
        let alpha = angles.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        Self { angles, alpha }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

/// Draws `n` independent angles uniformly from `[−alpha, alpha]`.
pub fn sample_angles<R: rand::Rng>(n: usize, alpha: f64, rng: &mut R) -> Result<AngleSet> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Config(format!("rotation bound alpha must be >= 0, got {alpha}")));
    }
    let angles = (0..n)
        .map(|_| if alpha == 0.0 { 0.0 } else { rng.random_range(-alpha..=alpha) })
        .collect();
    Ok(AngleSet { angles, alpha })
}

/// Rotated copies `[B, N + 1, D]` of the backbone output, each with a replica
/// of the class token in row 0.
#[derive(Debug, Clone)]
pub struct RotatedFeatureSet {
    pub features: Vec<Var>,
    pub angles: AngleSet,
}

/// Builds one rotated member per angle: reshape, rotate, flatten, and
/// prepend a copy of the class token.
pub fn make_rotated_set<F: Scalar>(g: &mut Graph<F>, f: &PatchFeature, angles: &AngleSet) -> Result<RotatedFeatureSet> {
    let features = angles
        .angles
        .iter()
        .map(|&theta| {
            let mut index = Vec::with_capacity(f.n_patches + 1);
            index.push(Some(0));
            index.extend(
                rotation_source_map(f.grid_x, f.grid_y, theta)
                    .into_iter()
                    .map(|s| s.map(|i| i + 1)),
            );
            g.select_rows(f.tokens, index)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RotatedFeatureSet {
        features,
        angles: angles.clone(),
    })
}

/// How rotated-branch layers are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchInit {
    /// Fresh truncated-normal weights.
    Fresh,
    /// Copy of the last shared backbone layer.
    CopyLast,
    /// Residual projections zeroed, so every branch layer starts as the identity.
    Zero,
}

/// One branch: a dedicated encoder layer followed by a layer norm; only the
/// class-token row is produced.
#[derive(Debug, Clone)]
pub struct Branch {
    pub layer: EncoderLayer,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl Branch {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &BackboneConfig,
        seed: u64,
        init: BranchInit,
    ) -> Self {
        let layer = EncoderLayer::register(store, &format!("{prefix}.layer"), cfg, seed, init == BranchInit::Zero);
        let d = cfg.embed_dim;
        Self {
            layer,
            norm_gain: store.add(&format!("{prefix}.norm.gain"), &[d], Init::Ones, seed),
            norm_bias: store.add(&format!("{prefix}.norm.bias"), &[d], Init::Zeros, seed),
        }
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        EncoderLayer::param_count(d, hidden) + 2 * d
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.layer.param_ids().to_vec();
        ids.push(self.norm_gain);
        ids.push(self.norm_bias);
        ids
    }

    /// Normalized class token `[B, D]` after this branch's layer.
    pub fn class_token<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: Var) -> Result<Var> {
        let batch = g.shape(tokens)[0];
        let d = g.shape(tokens)[2];
        let cls = self.layer.forward_cls(g, store, tokens)?;
        let gain = g.param(store, self.norm_gain);
        let bias = g.param(store, self.norm_bias);
        let cls = g.layer_norm(cls, gain, bias, F::from_f64(self.layer.eps))?;
        g.reshape(cls, &[batch, d])
    }
}

/// Class tokens leaving the branches.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    /// Original-branch class token `[B, D]`.
    pub c_prime_o: Var,
    /// One class token `[B, D]` per rotated branch.
    pub c_r: Vec<Var>,
    /// Mean of `c_r`; `None` without rotated branches.
    pub c_bar_r: Option<Var>,
}

/// Runs the original branch on `f` and rotated branch `i` on member `i` of `set`.
pub fn branch_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    f: &PatchFeature,
    set: &RotatedFeatureSet,
    original: &Branch,
    rotated: &[Branch],
) -> Result<BranchOutputs> {
    if set.features.len() != rotated.len() {
        return Err(Error::Config(format!(
            "{} rotated features but {} rotated branches",
            set.features.len(),
            rotated.len()
        )));
    }
    let c_prime_o = original.class_token(g, store, f.tokens)?;
    let c_r = set
        .features
        .iter()
        .zip(rotated)
        .map(|(&member, branch)| branch.class_token(g, store, member))
        .collect::<Result<Vec<_>>>()?;
    let c_bar_r = if c_r.is_empty() {
        None
    } else {
        Some(average_rotated(g, &c_r)?)
    };
    Ok(BranchOutputs {
        c_prime_o,
        c_r,
        c_bar_r,
    })
}

/// Arithmetic mean of equally shaped tokens.
pub fn average_rotated<F: Scalar>(g: &mut Graph<F>, tokens: &[Var]) -> Result<Var> {
    let (&first, rest) = tokens
        .split_first()
        .ok_or_else(|| Error::Usage("average of an empty token list".into()))?;
    let mut sum = first;
    for &t in rest {
        if g.shape(t) != g.shape(first) {
            return Err(dim_err("average_rotated", "token shapes differ"));
        }
        sum = g.add(sum, t)?;
    }
    Ok(g.scale(sum, F::ONE / F::from_usize(tokens.len())))
}
