use std::fmt::Write as _;
use std::path::Path;

use crate::ami::{AmiConfig, AmiVariant};
use crate::embed::Geometry;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Every tunable of the model, the optimizer and the tracking loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Learned tokens per stream; 0 selects direct interaction between the
    /// full sequences.
    pub n_tokens: usize,
    pub ami_layers: Vec<usize>,
    /// `None` disables the interaction module.
    pub ami_variant: Option<AmiVariant>,
    pub perceptor_heads: usize,
    pub head_hidden: usize,

    pub lr_ami: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// First epoch (0-based) trained at a tenth of the step sizes.
    pub decay_epoch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub samples_per_epoch: usize,
    pub max_gap: usize,
    /// Search-center jitter, as a fraction of the larger target side.
    pub search_shift: f64,
    /// Log-uniform search-scale jitter half-width.
    pub search_scale_jitter: f64,

    pub template_factor: f64,
    pub search_factor: f64,
    pub update_interval: usize,
    pub update_threshold: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            template_size: 32,
            search_size: 64,
            dim: 64,
            layers: 6,
            heads: 2,
            n_tokens: 32,
            ami_layers: vec![2, 4],
            ami_variant: Some(AmiVariant::Full),
            perceptor_heads: 1,
            head_hidden: 64,
            lr_ami: 1e-3,
            lr_rest: 5e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            decay_epoch: 10,
            epochs: 20,
            batch: 8,
            samples_per_epoch: 2000,
            max_gap: 50,
            search_shift: 0.5,
            search_scale_jitter: 0.15,
            template_factor: 2.0,
            search_factor: 4.0,
            update_interval: 5,
            update_threshold: 0.65,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "patch",
    "template_size",
    "search_size",
    "dim",
    "layers",
    "heads",
    "n_tokens",
    "ami_layers",
    "ami_variant",
    "perceptor_heads",
    "head_hidden",
    "lr_ami",
    "lr_rest",
    "weight_decay",
    "grad_clip",
    "decay_epoch",
    "epochs",
    "batch",
    "samples_per_epoch",
    "max_gap",
    "search_shift",
    "search_scale_jitter",
    "template_factor",
    "search_factor",
    "update_interval",
    "update_threshold",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrackerConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "patch" => self.patch = parse(key, v)?,
            "template_size" => self.template_size = parse(key, v)?,
            "search_size" => self.search_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "n_tokens" => self.n_tokens = parse(key, v)?,
            "ami_layers" => {
                self.ami_layers = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "ami_variant" => {
                self.ami_variant = match v {
                    "none" => None,
                    other => Some(AmiVariant::parse(other)?),
                }
            }
            "perceptor_heads" => self.perceptor_heads = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "lr_ami" => self.lr_ami = parse(key, v)?,
            "lr_rest" => self.lr_rest = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "decay_epoch" => self.decay_epoch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "samples_per_epoch" => self.samples_per_epoch = parse(key, v)?,
            "max_gap" => self.max_gap = parse(key, v)?,
            "search_shift" => self.search_shift = parse(key, v)?,
            "search_scale_jitter" => self.search_scale_jitter = parse(key, v)?,
            "template_factor" => self.template_factor = parse(key, v)?,
            "search_factor" => self.search_factor = parse(key, v)?,
            "update_interval" => self.update_interval = parse(key, v)?,
            "update_threshold" => self.update_threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "patch" => self.patch.to_string(),
            "template_size" => self.template_size.to_string(),
            "search_size" => self.search_size.to_string(),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "n_tokens" => self.n_tokens.to_string(),
            "ami_layers" => {
                if self.ami_layers.is_empty() {
                    "none".into()
                } else {
                    self.ami_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
                }
            }
            "ami_variant" => self.ami_variant.map_or("none", AmiVariant::name).to_string(),
            "perceptor_heads" => self.perceptor_heads.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "lr_ami" => self.lr_ami.to_string(),
            "lr_rest" => self.lr_rest.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "decay_epoch" => self.decay_epoch.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "samples_per_epoch" => self.samples_per_epoch.to_string(),
            "max_gap" => self.max_gap.to_string(),
            "search_shift" => self.search_shift.to_string(),
            "search_scale_jitter" => self.search_scale_jitter.to_string(),
            "template_factor" => self.template_factor.to_string(),
            "search_factor" => self.search_factor.to_string(),
            "update_interval" => self.update_interval.to_string(),
            "update_threshold" => self.update_threshold.to_string(),
            "seed" => self.seed.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// All keys as `key = value` lines; [`TrackerConfig::from_text`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("template_size", self.template_size),
            ("search_size", self.search_size),
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("perceptor_heads", self.perceptor_heads),
            ("head_hidden", self.head_hidden),
            ("batch", self.batch),
            ("update_interval", self.update_interval),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.update_threshold > 0.0 && self.update_threshold < 1.0) {
            return Err(Error::Config("`update_threshold` must lie in (0, 1)".into()));
        }
        let nonneg = [
            ("lr_ami", self.lr_ami),
            ("lr_rest", self.lr_rest),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("search_shift", self.search_shift),
            ("search_scale_jitter", self.search_scale_jitter),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be a finite nonnegative number")));
            }
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            patch: self.patch,
            template: self.template_size,
            search: self.search_size,
            dim: self.dim,
        }
    }

    /// The interaction settings actually in effect.
    pub fn ami_config(&self) -> Option<AmiConfig> {
        let variant = self.ami_variant?;
        if self.ami_layers.is_empty() {
            return None;
        }
        let variant = if self.n_tokens == 0 {
            AmiVariant::PerceptorOnly
        } else {
            variant
        };
        Some(AmiConfig {
            n_tokens: self.n_tokens,
            heads: self.perceptor_heads,
            variant,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            geometry: self.geometry(),
            encoder: EncoderConfig {
                n_layers: self.layers,
                heads: self.heads,
                ami_layers: self.ami_layers.clone(),
                ami: self.ami_config(),
            },
            head_hidden: self.head_hidden,
        }
    }

    /// Step size of a parameter at a given epoch.
    pub fn lr_for(&self, name: &str, epoch: usize) -> f64 {
        let base = if crate::model::is_ami_param(name) {
            self.lr_ami
        } else {
            self.lr_rest
        };
        if epoch >= self.decay_epoch {
            base * 0.1
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrackerConfig::default();
        cfg.set("ami_layers", "1, 3").unwrap();
        cfg.set("ami_variant", "lt-only").unwrap();
        cfg.set("lr_ami", "0.0025").unwrap();
        let back = TrackerConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_addressable() {
        let cfg = TrackerConfig::default();
        for k in KEYS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let err = TrackerConfig::from_text("dim = 32\nwidth = 3\n").unwrap_err();
        assert_eq!(err.to_string(), "config: unknown key `width`");
        assert!(TrackerConfig::from_text("dim = many").is_err());
        assert!(TrackerConfig::from_text("update_threshold = 1.5").is_err());
        assert!(TrackerConfig::from_text("just words").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrackerConfig::from_text("# toy\n\ndim = 32 # narrower\nheads=4\n").unwrap();
        assert_eq!((cfg.dim, cfg.heads), (32, 4));
    }

    #[test]
    fn zero_tokens_means_direct_interaction() {
        let mut cfg = TrackerConfig { n_tokens: 0, ..Default::default() };
        assert_eq!(cfg.ami_config().unwrap().variant, AmiVariant::PerceptorOnly);
        cfg.ami_variant = None;
        assert!(cfg.ami_config().is_none());
    }

    #[test]
    fn step_size_groups_and_decay() {
        let cfg = TrackerConfig {
            lr_ami: 1e-3,
            lr_rest: 1e-4,
            decay_epoch: 2,
            ..Default::default()
        };
        assert_eq!(cfg.lr_for("ami.l2.alpha.w", 0), 1e-3);
        assert_eq!(cfg.lr_for("encoder.block1.msa.wq", 1), 1e-4);
        assert!((cfg.lr_for("ami.l2.alpha.w", 2) - 1e-4).abs() < 1e-18);
    }
}
