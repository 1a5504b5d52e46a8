//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::Modules;
use crate::scene::{DEFAULT_DEFORM_ORDER, DEFAULT_EMBEDDING_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Multiplied by the scene extent.
    pub lr_means: f64,
    pub lr_rot: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_deform: f64,
    pub lr_embed: f64,
    pub lr_nets: f64,
    pub adam_eps: f64,
    /// Deformation coefficients stay frozen before this iteration.
    pub warmup_static_iters: usize,
    /// 0 disables densification.
    pub densify_interval: usize,
    /// Densification stops after this fraction of `iterations`.
    pub densify_until: f64,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub percent_dense: f64,
    pub use_embedding: bool,
    pub use_region: bool,
    pub use_spatial: bool,
    pub use_exposure_loss: bool,
    pub loss: LossWeights,
    pub embed_dim: usize,
    pub deform_order: usize,
    pub init_stride: usize,
    pub embed_init_std: f64,
    /// Held-out PSNR cadence; 0 disables it.
    pub eval_interval: usize,
    /// Dataset index of the normal-exposure reference frame; `None` picks
    /// the training frame whose mean is closest to the exposure target.
    pub reference_frame: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            seed: 0,
            lr_means: 1.6e-4,
            lr_rot: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_deform: 1.6e-3,
            lr_embed: 1.6e-3,
            lr_nets: 1.6e-3,
            adam_eps: 1e-8,
            warmup_static_iters: 500,
            densify_interval: 500,
            densify_until: 0.6,
            densify_grad_threshold: 2e-4,
            prune_opacity: 5e-3,
            percent_dense: 0.01,
            use_embedding: true,
            use_region: true,
            use_spatial: true,
            use_exposure_loss: true,
            loss: LossWeights::default(),
            embed_dim: DEFAULT_EMBEDDING_DIM,
            deform_order: DEFAULT_DEFORM_ORDER,
            init_stride: 2,
            embed_init_std: 0.1,
            eval_interval: 100,
            reference_frame: None,
        }
    }
}

/// Module switches accepted by `ablate` lists.
pub const ABLATION_TOKENS: [&str; 4] = ["embedding", "region", "spatial", "exposure"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::BadConfig(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Splits `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn modules(&self) -> Modules {
        Modules {
            embedding: self.use_embedding,
            region: self.use_region,
            spatial: self.use_spatial,
        }
    }

    /// Turns off every module named in the comma-separated `list`.
    pub fn ablate(&mut self, list: &str) -> Result<()> {
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "embedding" => self.use_embedding = false,
                "region" => self.use_region = false,
                "spatial" => self.use_spatial = false,
                "exposure" => self.use_exposure_loss = false,
                _ => {
                    return Err(Error::BadConfig(format!(
                        "unknown ablation {tok:?} (expected one of {})",
                        ABLATION_TOKENS.join(", ")
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr_means" => self.lr_means = parse(key, value)?,
            "lr_rot" => self.lr_rot = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "lr_opacity" => self.lr_opacity = parse(key, value)?,
            "lr_color" => self.lr_color = parse(key, value)?,
            "lr_deform" => self.lr_deform = parse(key, value)?,
            "lr_embed" => self.lr_embed = parse(key, value)?,
            "lr_nets" => self.lr_nets = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "warmup_static_iters" => self.warmup_static_iters = parse(key, value)?,
            "densify_interval" => self.densify_interval = parse(key, value)?,
            "densify_until" => self.densify_until = parse(key, value)?,
            "densify_grad_threshold" => self.densify_grad_threshold = parse(key, value)?,
            "prune_opacity" => self.prune_opacity = parse(key, value)?,
            "percent_dense" => self.percent_dense = parse(key, value)?,
            "use_embedding" => self.use_embedding = parse_bool(key, value)?,
            "use_region" => self.use_region = parse_bool(key, value)?,
            "use_spatial" => self.use_spatial = parse_bool(key, value)?,
            "use_exposure_loss" => self.use_exposure_loss = parse_bool(key, value)?,
            "exposure_target" => self.loss.exposure_target = parse(key, value)?,
            "lambda_depth" => self.loss.lambda_depth = parse(key, value)?,
            "lambda_tv" => self.loss.lambda_tv = parse(key, value)?,
            "pool_window" => self.loss.pool_window = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "deform_order" => self.deform_order = parse(key, value)?,
            "init_stride" => self.init_stride = parse(key, value)?,
            "embed_init_std" => self.embed_init_std = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "reference_frame" => {
                self.reference_frame = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "ablate" => self.ablate(value)?,
            _ => return Err(Error::BadConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_means,
            self.lr_rot,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
            self.lr_deform,
            self.lr_embed,
            self.lr_nets,
        ];
        if !rates.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::BadConfig("learning rates must be positive".into()));
        }
        if !(self.loss.exposure_target > 0.0 && self.loss.exposure_target < 1.0) {
            return Err(Error::BadConfig("exposure_target must lie in (0, 1)".into()));
        }
        if self.loss.lambda_depth < 0.0 || self.loss.lambda_tv < 0.0 {
            return Err(Error::BadConfig("loss weights must be nonnegative".into()));
        }
        if self.init_stride == 0 || self.embed_dim == 0 || self.loss.pool_window == 0 {
            return Err(Error::BadConfig("init_stride, embed_dim and pool_window must be positive".into()));
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Every key in a fixed order; `from_text(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("iterations", &self.iterations);
        kv("seed", &self.seed);
        kv("lr_means", &self.lr_means);
        kv("lr_rot", &self.lr_rot);
        kv("lr_scale", &self.lr_scale);
        kv("lr_opacity", &self.lr_opacity);
        kv("lr_color", &self.lr_color);
        kv("lr_deform", &self.lr_deform);
        kv("lr_embed", &self.lr_embed);
        kv("lr_nets", &self.lr_nets);
        kv("adam_eps", &self.adam_eps);
        kv("warmup_static_iters", &self.warmup_static_iters);
        kv("densify_interval", &self.densify_interval);
        kv("densify_until", &self.densify_until);
        kv("densify_grad_threshold", &self.densify_grad_threshold);
        kv("prune_opacity", &self.prune_opacity);
        kv("percent_dense", &self.percent_dense);
        kv("use_embedding", &self.use_embedding);
        kv("use_region", &self.use_region);
        kv("use_spatial", &self.use_spatial);
        kv("use_exposure_loss", &self.use_exposure_loss);
        kv("exposure_target", &self.loss.exposure_target);
        kv("lambda_depth", &self.loss.lambda_depth);
        kv("lambda_tv", &self.loss.lambda_tv);
        kv("pool_window", &self.loss.pool_window);
        kv("embed_dim", &self.embed_dim);
        kv("deform_order", &self.deform_order);
        kv("init_stride", &self.init_stride);
        kv("embed_init_std", &self.embed_init_std);
        kv("eval_interval", &self.eval_interval);
        match self.reference_frame {
            Some(r) => kv("reference_frame", &r),
            None => kv("reference_frame", &"auto"),
        }
        s
    }
}
