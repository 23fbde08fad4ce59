//! Run configuration: one TOML document covering every module, with
//! dotted-key overrides (`loss.mu=1`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "NEUROCLIP_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub filter: FilterConfig,
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            filter: FilterConfig::default(),
            fusion: FusionConfig::default(),
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub times: usize,
    pub image_size: usize,
    pub noise: f64,
    pub held_out: usize,
    pub val_samples: usize,
    /// EEG channels kept for training; empty keeps all.
    pub channel_mask: Vec<usize>,
    /// `[start, end)` time window; empty keeps all samples.
    pub time_window: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 50,
            per_class: 20,
            channels: 17,
            times: 250,
            image_size: 32,
            noise: 0.1,
            held_out: 10,
            val_samples: 40,
            channel_mask: Vec::new(),
            time_window: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    LightProjector,
    Tsconv,
    Shallownet,
    Deepnet,
    Eegnet,
    Eegfusenet,
    Eegproject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::LightProjector, embed_dim: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stem_channels: [usize; 2],
    pub hidden: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { kernel_h: 5, kernel_w: 5, stem_channels: [8, 16], hidden: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Catf,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub heads: usize,
    pub gate_bias_init: f64,
    /// Initial blend weight of the bilinear baseline.
    pub bilinear_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { strategy: FusionStrategy::Catf, heads: 1, gate_bias_init: -2.0, bilinear_init: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub prompts: usize,
    /// Linear layers in the projection head (GELU between them).
    pub projection_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 64, depth: 2, heads: 4, mlp_ratio: 4, patch: 8, prompts: 4, projection_depth: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mu: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tau_init: f64,
    pub detach_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mu: 0.6, alpha: 0.3, lambda: 0.1, beta: 0.3, tau_init: 1.0 / 14.0, detach_targets: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_a: f64,
    pub lr_b: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    pub repeats: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_a: 0.002,
            lr_b: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5] }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides. Values parse as TOML literals,
    /// falling back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[(S, S)]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let (key, raw) = (key.as_ref(), raw.as_ref());
            let value = parse_literal(raw);
            set_path(&mut tree, key, value)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.beta) {
            return bad("loss.beta", "must lie in [0, 1]");
        }
        if l.mu < 0.0 || l.alpha < 0.0 || l.lambda < 0.0 {
            return bad("loss", "mu, alpha, lambda must be nonnegative");
        }
        if l.tau_init <= 0.0 {
            return bad("loss.tau_init", "must be positive");
        }
        let t = &self.trainer;
        if t.lr_a < 0.0 || t.lr_b < 0.0 {
            return bad("trainer", "learning rates must be nonnegative");
        }
        if t.batch_size < 2 {
            return bad("trainer.batch_size", "must be at least 2");
        }
        if t.repeats == 0 {
            return bad("trainer.repeats", "must be at least 1");
        }
        let f = &self.filter;
        if f.kernel_h % 2 == 0 || f.kernel_w % 2 == 0 {
            return bad("filter", "kernel sizes must be odd");
        }
        let b = &self.backbone;
        if b.width == 0 || b.heads == 0 || b.width % b.heads != 0 {
            return bad("backbone.heads", "must divide backbone.width");
        }
        if b.patch == 0 || self.data.image_size % b.patch != 0 {
            return bad("data.image_size", "must be divisible by backbone.patch");
        }
        if b.projection_depth == 0 {
            return bad("backbone.projection_depth", "must be at least 1");
        }
        let fu = &self.fusion;
        if fu.heads == 0 || b.width % fu.heads != 0 {
            return bad("fusion.heads", "must divide backbone.width");
        }
        if !(fu.bilinear_init > 0.0 && fu.bilinear_init < 1.0) {
            return bad("fusion.bilinear_init", "must lie strictly inside (0, 1)");
        }
        if b.width < 2 {
            return bad("backbone.width", "must be at least 2");
        }
        if !self.data.time_window.is_empty() {
            match self.data.time_window[..] {
                [s, e] if s < e => {}
                _ => return bad("data.time_window", "expected [start, end) with start < end"),
            }
        }
        if self.eval.ks.iter().any(|&k| k == 0) {
            return bad("eval.ks", "k must be positive");
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = tree;
    for (depth, s) in sections.iter().enumerate() {
        cur = match cur.get_mut(*s) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key {}", parts[..=depth].join(".")))),
        };
    }
    // Optional fields serialize as absent, so accept them when the section exists.
    let known = cur.contains_key(*last) || (key == "trainer.clip_norm");
    if !known {
        return Err(Error::Config(format!("unknown config key {key}")));
    }
    let value = match (cur.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (None, toml::Value::Integer(i)) if key == "trainer.clip_norm" => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.loss.mu, c.loss.alpha, c.loss.lambda, c.loss.beta), (0.6, 0.3, 0.1, 0.3));
        assert_eq!((c.trainer.lr_a, c.trainer.lr_b), (0.002, 0.02));
        assert_eq!((c.data.channels, c.data.times), (17, 250));
        assert_eq!(c.backbone.prompts, 4);
        assert_eq!((c.filter.kernel_h, c.filter.kernel_w), (5, 5));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = RunConfig::from_toml_str("[loss]\nmu = 1.0\n").unwrap();
        assert_eq!(partial.loss.mu, 1.0);
        assert_eq!(partial.loss.alpha, 0.3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[loss]\nmoo = 1.0\n").is_err());
        let err = RunConfig::default().with_overrides(&[("loss.moo", "1")]).unwrap_err();
        assert!(err.to_string().contains("loss.moo"), "{err}");
        assert!(RunConfig::default().with_overrides(&[("nope.mu", "1")]).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                ("loss.mu", "1"),
                ("loss.alpha", "0"),
                ("fusion.strategy", "bilinear"),
                ("trainer.clip_norm", "5.0"),
                ("data.channel_mask", "[0, 1, 2]"),
            ])
            .unwrap();
        assert_eq!(c.loss.mu, 1.0);
        assert_eq!(c.loss.alpha, 0.0);
        assert_eq!(c.fusion.strategy, FusionStrategy::Bilinear);
        assert_eq!(c.trainer.clip_norm, Some(5.0));
        assert_eq!(c.data.channel_mask, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::default().with_overrides(&[("loss.beta", "1.5")]).is_err());
        assert!(RunConfig::default().with_overrides(&[("filter.kernel_h", "4")]).is_err());
        assert!(RunConfig::default().with_overrides(&[("trainer.batch_size", "1")]).is_err());
        assert!(RunConfig::default().with_overrides(&[("data.image_size", "30")]).is_err());
    }
}
