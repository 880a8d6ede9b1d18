//! Flat `key = value` run configuration.
//!
//! `#` starts a comment. Every key is optional; absent keys keep their
//! defaults. Command-line overrides use the same syntax and are applied after
//! the file.

use std::path::Path;

use rottrans_core::data::RotateMode;
use rottrans_core::eval::DistanceMetric;
use rottrans_core::loss::TripletMode;
use rottrans_core::rotation::BranchInit;
use rottrans_core::train::{Precision, TrainConfig};

use crate::error::{AppError, AppResult};

type Getter = fn(&TrainConfig) -> String;
type Setter = fn(&mut TrainConfig, &str) -> Result<(), String>;

/// One configuration key.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    /// Where the default comes from.
    pub origin: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn unsigned(v: &str) -> Result<usize, String> {
    num(v, "a non-negative integer")
}

fn positive(v: &str) -> Result<usize, String> {
    match unsigned(v)? {
        0 => Err("must be >= 1".into()),
        n => Ok(n),
    }
}

fn float(v: &str) -> Result<f64, String> {
    let x: f64 = num(v, "a number")?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn in_range(v: &str, lo: f64, hi: f64, hi_open: bool) -> Result<f64, String> {
    let x = float(v)?;
    let ok = x >= lo && if hi_open { x < hi } else { x <= hi };
    if ok {
        Ok(x)
    } else {
        Err(format!(
            "{x} is outside [{lo}, {hi}{}",
            if hi_open { ")" } else { "]" }
        ))
    }
}

fn non_negative(v: &str) -> Result<f64, String> {
    in_range(v, 0.0, f64::INFINITY, false)
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> Result<T, String> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got `{v}`", names.join("|"))
    })
}

fn name_of<T: PartialEq>(t: T, options: &[(&'static str, T)]) -> String {
    options.iter().find(|(_, o)| *o == t).map(|(n, _)| n.to_string()).unwrap_or_default()
}

const BRANCH_INIT: [(&str, BranchInit); 3] = [
    ("fresh", BranchInit::Fresh),
    ("copy_last", BranchInit::CopyLast),
    ("zero", BranchInit::Zero),
];
const TRIPLET: [(&str, TripletMode); 2] = [("softplus", TripletMode::Softplus), ("hinge0", TripletMode::Hinge0)];
const IMG_ROT: [(&str, Option<RotateMode>); 3] = [
    ("none", None),
    ("crop", Some(RotateMode::Crop)),
    ("pad", Some(RotateMode::Pad)),
];
const METRIC: [(&str, DistanceMetric); 2] = [
    ("euclidean", DistanceMetric::Euclidean),
    ("cosine", DistanceMetric::Cosine),
];
const PRECISION: [(&str, Precision); 2] = [("32", Precision::F32), ("64", Precision::F64)];

macro_rules! key {
    ($name:literal, $origin:literal, $help:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Key {
            name: $name,
            help: $help,
            origin: $origin,
            get: |$c: &TrainConfig| $get.to_string(),
            set: |$m: &mut TrainConfig, $v: &str| {
                $set;
                Ok(())
            },
        }
    };
}

/// Every recognized key, in the order the resolved config is written.
pub static KEYS: &[Key] = &[
    key!("model.image_height", "scaled", "input height in pixels", |c| c.model.backbone.image_height, |c, v| c.model.backbone.image_height = positive(v)?),
    key!("model.image_width", "scaled", "input width in pixels", |c| c.model.backbone.image_width, |c, v| c.model.backbone.image_width = positive(v)?),
    key!("model.channels", "scaled", "input channels", |c| c.model.backbone.channels, |c, v| c.model.backbone.channels = positive(v)?),
    key!("model.patch_size", "scaled", "patch window P in pixels", |c| c.model.backbone.patch_size, |c, v| c.model.backbone.patch_size = positive(v)?),
    key!("model.stride", "scaled", "patch stride S in pixels, S <= P", |c| c.model.backbone.stride, |c, v| c.model.backbone.stride = positive(v)?),
    key!("model.embed_dim", "scaled", "token width D", |c| c.model.backbone.embed_dim, |c, v| c.model.backbone.embed_dim = positive(v)?),
    key!("model.num_heads", "scaled", "attention heads, must divide D", |c| c.model.backbone.num_heads, |c, v| c.model.backbone.num_heads = positive(v)?),
    key!("model.depth", "scaled", "shared encoder layers before the branches", |c| c.model.backbone.depth, |c, v| c.model.backbone.depth = unsigned(v)?),
    key!("model.mlp_ratio", "convention", "MLP hidden width as a multiple of D", |c| c.model.backbone.mlp_ratio, |c, v| c.model.backbone.mlp_ratio = positive(v)?),
    key!("model.ln_eps", "convention", "layer-norm epsilon", |c| c.model.backbone.ln_eps, |c, v| c.model.backbone.ln_eps = in_range(v, 0.0, 1.0, true)?),
    key!("rot.n_rotations", "reference", "rotated branches n; 0 disables feature rotation", |c| c.model.rotation.n_rotations, |c, v| c.model.rotation.n_rotations = unsigned(v)?),
    key!("rot.alpha_degrees", "reference", "angles are drawn from [-alpha, alpha]", |c| c.model.rotation.alpha_degrees, |c, v| c.model.rotation.alpha_degrees = non_negative(v)?),
    key!("rot.fixed_angle_set", "none", "comma-separated angles used instead of sampling, or none", |c| c.model.rotation.fixed_angle_set.as_ref().map_or("none".to_string(), |s| s.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        |c, v| c.model.rotation.fixed_angle_set = if v == "none" { None } else { Some(v.split(',').map(|a| float(a.trim())).collect::<Result<_, _>>()?) }),
    key!("rot.resample_per_step", "scaled", "draw new angles every step instead of once per run", |c| c.model.rotation.resample_per_step, |c, v| c.model.rotation.resample_per_step = boolean(v)?),
    key!("rot.branch_init", "scaled", "rotated branch initialization: fresh|copy_last|zero", |c| name_of(c.model.rotation.branch_init, &BRANCH_INIT), |c, v| c.model.rotation.branch_init = choice(v, &BRANCH_INIT)?),
    key!("lambda", "reference", "weight of the original stream; rotated streams get 1 - lambda", |c| c.loss.lambda,
        |c, v| c.loss.lambda = in_range(v, 0.0, 1.0, false).map_err(|e| format!("{e}: violates the objective weight constraint lambda in [0, 1]"))?),
    key!("label_smoothing", "convention", "cross-entropy label smoothing", |c| c.loss.label_smoothing, |c, v| c.loss.label_smoothing = in_range(v, 0.0, 1.0, true)?),
    key!("triplet_mode", "reference", "margin-free triplet form: softplus|hinge0", |c| name_of(c.loss.triplet_mode, &TRIPLET), |c, v| c.loss.triplet_mode = choice(v, &TRIPLET)?),
    key!("inv_weight", "reference", "coefficient of the invariance term; 0 disables it", |c| c.loss.inv_weight, |c, v| c.loss.inv_weight = non_negative(v)?),
    key!("train.epochs", "scaled", "training epochs", |c| c.epochs, |c, v| c.epochs = positive(v)?),
    key!("train.base_lr", "reference", "peak learning rate", |c| c.base_lr,
        |c, v| c.base_lr = { let x = float(v)?; if x <= 0.0 { return Err(format!("{x} must be > 0")); } x }),
    key!("train.momentum", "scaled", "SGD momentum", |c| c.momentum, |c, v| c.momentum = in_range(v, 0.0, 1.0, true)?),
    key!("train.weight_decay", "scaled", "L2 weight decay", |c| c.weight_decay, |c, v| c.weight_decay = non_negative(v)?),
    key!("train.warmup_fraction", "scaled", "fraction of steps in linear warmup", |c| c.warmup_fraction, |c, v| c.warmup_fraction = in_range(v, 0.0, 1.0, true)?),
    key!("train.p", "scaled", "identities per batch", |c| c.p, |c, v| c.p = positive(v)?),
    key!("train.k", "reference", "images per identity in a batch", |c| c.k, |c, v| c.k = positive(v)?),
    key!("train.seed", "none", "run seed for initialization, sampling and angles", |c| c.seed, |c, v| c.seed = num(v, "an unsigned integer")?),
    key!("train.precision", "scaled", "float width: 32|64", |c| name_of(c.precision, &PRECISION), |c, v| c.precision = choice(v, &PRECISION)?),
    key!("train.bn_momentum", "convention", "running-statistics momentum of the BN necks", |c| c.bn_momentum, |c, v| c.bn_momentum = in_range(v, 0.0, 1.0, false)?),
    key!("aug.image_rotation", "scaled", "image-level random rotation: none|crop|pad", |c| name_of(c.aug.image_rotation, &IMG_ROT), |c, v| c.aug.image_rotation = choice(v, &IMG_ROT)?),
    key!("aug.image_rotation_max", "reference", "image rotation bound in degrees", |c| c.aug.image_rotation_max, |c, v| c.aug.image_rotation_max = non_negative(v)?),
    key!("aug.random_erasing_prob", "scaled", "random erasing probability", |c| c.aug.random_erasing_prob, |c, v| c.aug.random_erasing_prob = in_range(v, 0.0, 1.0, false)?),
    key!("aug.pad_crop", "scaled", "pad-and-crop margin in pixels; 0 disables it", |c| c.aug.pad_crop, |c, v| c.aug.pad_crop = unsigned(v)?),
    key!("eval.every", "scaled", "evaluate every N epochs; 0 only after the last", |c| c.eval_every, |c, v| c.eval_every = unsigned(v)?),
    key!("eval.batch", "scaled", "inference batch size", |c| c.eval_batch, |c, v| c.eval_batch = positive(v)?),
    key!("eval.metric", "reference", "retrieval distance: euclidean|cosine", |c| name_of(c.metric, &METRIC), |c, v| c.metric = choice(v, &METRIC)?),
    key!("eval.max_rank", "scaled", "longest CMC rank reported", |c| c.max_rank, |c, v| c.max_rank = positive(v)?),
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// A `key = value` line; `None` for blank and comment-only lines.
pub fn split_line(line: &str) -> Result<Option<(&str, &str)>, String> {
    let content = line.split('#').next().unwrap_or("").trim();
    if content.is_empty() {
        return Ok(None);
    }
    let (k, v) = content
        .split_once('=')
        .ok_or_else(|| format!("expected `key = value`, got `{content}`"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(format!("expected `key = value`, got `{content}`"));
    }
    Ok(Some((k, v)))
}

/// Sets one key, naming `location` in any error.
pub fn apply(cfg: &mut TrainConfig, name: &str, value: &str, location: &str) -> AppResult<()> {
    let k = key(name).ok_or_else(|| AppError::Config(format!("{location}: unknown key `{name}`")))?;
    (k.set)(cfg, value).map_err(|e| AppError::Config(format!("{location}: key `{name}`: {e}")))
}

/// Applies config text over `cfg`. Keys in `reserved_prefix` are returned
/// instead of applied.
pub fn apply_text(
    cfg: &mut TrainConfig,
    text: &str,
    source: &str,
    reserved_prefix: Option<&str>,
) -> AppResult<Vec<(String, String)>> {
    let mut reserved = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let loc = format!("{source}:{}", i + 1);
        let Some((k, v)) = split_line(line).map_err(|e| AppError::Config(format!("{loc}: {e}")))? else {
            continue;
        };
        if reserved_prefix.is_some_and(|p| k.starts_with(p)) {
            reserved.push((k.to_string(), v.to_string()));
            continue;
        }
        apply(cfg, k, v, &loc)?;
    }
    Ok(reserved)
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> AppResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", path.display())))?;
        apply_text(&mut cfg, &text, &path.display().to_string(), None)?;
    }
    for (i, ov) in overrides.iter().enumerate() {
        let loc = format!("override {} (`{ov}`)", i + 1);
        let (k, v) = ov
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| AppError::Config(format!("{loc}: expected key=value")))?;
        apply(&mut cfg, k, v, &loc)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every key with its resolved value, one `key = value` line each.
pub fn render(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for k in KEYS {
        out.push_str(&format!("{} = {}\n", k.name, (k.get)(cfg)));
    }
    out
}

/// Key reference for `--help`.
pub fn describe_keys() -> String {
    let defaults = TrainConfig::default();
    let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (default; origin of the default):\n");
    for k in KEYS {
        out.push_str(&format!(
            "  {:width$}  {} (default {}; {})\n",
            k.name,
            k.help,
            (k.get)(&defaults),
            k.origin,
        ));
    }
    out.push_str(
        "Origins: reference = the full-size setting, scaled = reduced for CPU runs,\n\
         convention = common practice, none = no preferred value.\n",
    );
    out
}
