//! Vision-transformer backbone: overlapping patch embedding, class token,
//! learnable position embedding and a stack of pre-norm encoder layers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, PatchGeometry, Var};
use crate::error::{Error, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::Scalar;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Architecture of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Number of shared encoder layers before the branches.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 3,
            patch_size: 8,
            stride: 6,
            embed_dim: 64,
            num_heads: 4,
            depth: 3,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "stride {} must satisfy 1 <= stride <= patch_size {}",
                self.stride, self.patch_size
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "channels, embed_dim, num_heads and mlp_ratio must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        grid_dims(self.image_height, self.image_width, self.patch_size, self.stride)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        let (grid_x, grid_y) =
            grid_dims(self.image_height, self.image_width, self.patch_size, self.stride)?;
        Ok(PatchGeometry {
            height: self.image_height,
            width: self.image_width,
            channels: self.channels,
            patch: self.patch_size,
            stride: self.stride,
            grid_x,
            grid_y,
        })
    }

    pub fn num_patches(&self) -> Result<usize> {
        Ok(self.geometry()?.num_patches())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Patch-grid extents `(X, Y)` of a sliding-window embedding:
/// `X = ⌊(H − P) / S⌋ + 1`, `Y = ⌊(W − P) / S⌋ + 1`.
pub fn grid_dims(height: usize, width: usize, patch: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 || patch == 0 || height < patch || width < patch {
        return Err(Error::Config(format!(
            "grid needs H >= P, W >= P, S >= 1 (got H={height}, W={width}, P={patch}, S={stride})"
        )));
    }
    Ok(((height - patch) / stride + 1, (width - patch) / stride + 1))
}

/// Output of the backbone: class token (row 0) followed by `N` patch tokens.
#[derive(Debug, Clone, Copy)]
pub struct PatchFeature {
    /// `[B, N + 1, D]`.
    pub tokens: Var,
    pub n_patches: usize,
    pub grid_x: usize,
    pub grid_y: usize,
}

/// Parameters of one pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub heads: usize,
    pub eps: f64,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

/// Parameter suffixes of an encoder layer, in registration order.
pub const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl EncoderLayer {
    /// Registers a layer under `prefix`. With `zero_residual`, the attention
    /// output projection and the second MLP projection start at zero, which
    /// makes the freshly built layer an exact identity.
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &BackboneConfig,
        seed: u64,
        zero_residual: bool,
    ) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let out_init = if zero_residual {
            Init::Zeros
        } else {
            Init::TruncNormal(INIT_STD)
        };
        Self {
            heads: cfg.num_heads,
            eps: cfg.ln_eps,
            ln1_gain: store.add(&name("ln1.gain"), &[d], Init::Ones, seed),
            ln1_bias: store.add(&name("ln1.bias"), &[d], Init::Zeros, seed),
            qkv_weight: store.add(&name("attn.qkv.weight"), &[d, 3 * d], Init::TruncNormal(INIT_STD), seed),
            qkv_bias: store.add(&name("attn.qkv.bias"), &[3 * d], Init::Zeros, seed),
            proj_weight: store.add(&name("attn.proj.weight"), &[d, d], out_init, seed),
            proj_bias: store.add(&name("attn.proj.bias"), &[d], Init::Zeros, seed),
            ln2_gain: store.add(&name("ln2.gain"), &[d], Init::Ones, seed),
            ln2_bias: store.add(&name("ln2.bias"), &[d], Init::Zeros, seed),
            fc1_weight: store.add(&name("mlp.fc1.weight"), &[d, hidden], Init::TruncNormal(INIT_STD), seed),
            fc1_bias: store.add(&name("mlp.fc1.bias"), &[hidden], Init::Zeros, seed),
            fc2_weight: store.add(&name("mlp.fc2.weight"), &[hidden, d], out_init, seed),
            fc2_bias: store.add(&name("mlp.fc2.bias"), &[d], Init::Zeros, seed),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.qkv_weight,
            self.qkv_bias,
            self.proj_weight,
            self.proj_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]
    }

    /// Analytic parameter count of one layer.
    pub fn param_count(d: usize, hidden: usize) -> usize {
        4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    }

    fn linear<F: Scalar>(
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let wv = g.param(store, w);
        let bv = g.param(store, b);
        let y = g.matmul(x, wv)?;
        g.add(y, bv)
    }

    /// Attention sub-block with its residual. With `cls_only` only the
    /// class-token query is evaluated and the result is `[B, 1, D]`.
    fn attention_block<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        cls_only: bool,
    ) -> Result<Var> {
        let eps = F::from_f64(self.eps);
        let (g1, b1) = (g.param(store, self.ln1_gain), g.param(store, self.ln1_bias));
        let h = g.layer_norm(x, g1, b1, eps)?;
        let qkv = Self::linear(g, store, h, self.qkv_weight, self.qkv_bias)?;
        let mut q = g.split_heads(qkv, 0, self.heads)?;
        let k = g.split_heads(qkv, 1, self.heads)?;
        let v = g.split_heads(qkv, 2, self.heads)?;
        let head_dim = g.shape(q)[3];
        let mut residual = x;
        if cls_only {
            q = g.select_rows(q, vec![Some(0)])?;
            residual = g.select_rows(x, vec![Some(0)])?;
        }
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, F::ONE / F::from_usize(head_dim).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.merge_heads(ctx)?;
        let out = Self::linear(g, store, ctx, self.proj_weight, self.proj_bias)?;
        g.add(residual, out)
    }

    fn mlp_block<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let eps = F::from_f64(self.eps);
        let (g2, b2) = (g.param(store, self.ln2_gain), g.param(store, self.ln2_bias));
        let h = g.layer_norm(x, g2, b2, eps)?;
        let h = Self::linear(g, store, h, self.fc1_weight, self.fc1_bias)?;
        let h = g.gelu(h);
        let h = Self::linear(g, store, h, self.fc2_weight, self.fc2_bias)?;
        g.add(x, h)
    }

    /// Full layer: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`. Shape is preserved.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let x = self.attention_block(g, store, x, false)?;
        self.mlp_block(g, store, x)
    }

    /// Class-token row of [`forward`](Self::forward), `[B, 1, D]`, computed
    /// without evaluating the other output rows. Bitwise equal to row 0 of
    /// the full layer.
    pub fn forward_cls<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let x = self.attention_block(g, store, x, true)?;
        self.mlp_block(g, store, x)
    }
}

/// Patch embedding, class token, position table and shared encoder layers.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub geometry: PatchGeometry,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Backbone {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let geometry = cfg.geometry()?;
        let d = cfg.embed_dim;
        let n = geometry.num_patches();
        let patch_weight = store.add(
            "backbone.patch_embed.weight",
            &[geometry.patch_len(), d],
            Init::TruncNormal(INIT_STD),
            seed,
        );
        let patch_bias = store.add("backbone.patch_embed.bias", &[d], Init::Zeros, seed);
        let cls_token = store.add("backbone.cls_token", &[1, d], Init::TruncNormal(INIT_STD), seed);
        let pos_embed = store.add("backbone.pos_embed", &[n + 1, d], Init::TruncNormal(INIT_STD), seed);
        let layers = (0..cfg.depth)
            .map(|i| EncoderLayer::register(store, &format!("backbone.blocks.{i}"), cfg, seed, false))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            geometry,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            layers,
        })
    }

    /// Analytic parameter count.
    pub fn param_count(cfg: &BackboneConfig) -> Result<usize> {
        let geom = cfg.geometry()?;
        let d = cfg.embed_dim;
        Ok(geom.patch_len() * d
            + d
            + d
            + (geom.num_patches() + 1) * d
            + cfg.depth * EncoderLayer::param_count(d, cfg.mlp_hidden()))
    }

    /// Windows of `images[B, H, W, C]` projected to `[B, N, D]`.
    pub fn patch_embed<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, images: Var) -> Result<Var> {
        let cols = g.im2col(images, self.geometry)?;
        let w = g.param(store, self.patch_weight);
        let b = g.param(store, self.patch_bias);
        let y = g.matmul(cols, w)?;
        g.add(y, b)
    }

    /// `concat(cls, patches) + pos`, giving `[B, N + 1, D]`.
    pub fn assemble<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, patches: Var) -> Result<PatchFeature> {
        let batch = g.shape(patches)[0];
        let cls = g.param(store, self.cls_token);
        let pos = g.param(store, self.pos_embed);
        let tokens = assemble_input(g, patches, cls, pos, batch)?;
        Ok(PatchFeature {
            tokens,
            n_patches: self.geometry.num_patches(),
            grid_x: self.geometry.grid_x,
            grid_y: self.geometry.grid_y,
        })
    }

    /// Runs the embedding and every shared encoder layer.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, images: Var) -> Result<PatchFeature> {
        let patches = self.patch_embed(g, store, images)?;
        let mut f = self.assemble(g, store, patches)?;
        for layer in &self.layers {
            f.tokens = layer.forward(g, store, f.tokens)?;
        }
        Ok(f)
    }
}

/// Prepends the class token `cls[1, D]` to `patches[B, N, D]` and adds the
/// position table `pos[N + 1, D]`.
pub fn assemble_input<F: Scalar>(
    g: &mut Graph<F>,
    patches: Var,
    cls: Var,
    pos: Var,
    batch: usize,
) -> Result<Var> {
    let cls_b = g.expand_batch(cls, batch);
    let seq = g.concat_rows(cls_b, patches)?;
    g.add(seq, pos)
}
