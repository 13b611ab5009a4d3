//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! data.dir = data/synth
//! model.dim = 64
//! sacl.tau = 0.02
//! ```
//!
//! Unknown and repeated keys are errors. [`RunConfig::to_text`] writes every
//! key in a fixed order; that text is what checkpoints store and hash.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::config_hash;
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "TSAM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint: PathBuf::from("model.tsck"),
            log: PathBuf::from("train.log"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let pooling = match m.pooling {
            Pooling::Ent => "ent",
            Pooling::Mean => "mean",
        };
        vec![
            ("data.dir", self.data_dir.display().to_string()),
            ("data.max_tokens", m.max_tokens.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.score_fn", m.score_fn.to_string()),
            ("model.score_mode", m.score_mode.to_string()),
            ("model.enable_fgmaf", m.enable_fgmaf.to_string()),
            ("model.fusion", m.fusion.to_string()),
            ("encoder.layers", m.encoder_layers.to_string()),
            ("encoder.heads", m.encoder_heads.to_string()),
            ("encoder.ffn_dim", m.encoder_ffn_dim.to_string()),
            ("encoder.pooling", pooling.to_string()),
            ("encoder.text_positions", m.text_positions.to_string()),
            ("encoder.visual_positions", m.visual_positions.to_string()),
            ("decoder.layers", m.decoder_layers.to_string()),
            ("decoder.heads", m.decoder_heads.to_string()),
            ("decoder.ffn_dim", m.decoder_ffn_dim.to_string()),
            ("sacl.tau", t.sacl.tau.to_string()),
            ("sacl.k", t.sacl.k.to_string()),
            ("sacl.enable_sv", t.sacl.enable_sv.to_string()),
            ("sacl.enable_st", t.sacl.enable_st.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.label_smoothing", t.label_smoothing.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint", self.checkpoint.display().to_string()),
            ("train.log", self.log.display().to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.max_tokens" => m.max_tokens = parse_value(key, value)?,
            "model.dim" => m.dim = parse_value(key, value)?,
            "model.score_fn" => m.score_fn = value.parse()?,
            "model.score_mode" => m.score_mode = value.parse()?,
            "model.enable_fgmaf" => m.enable_fgmaf = parse_bool(key, value)?,
            "model.fusion" => m.fusion = value.parse()?,
            "encoder.layers" => m.encoder_layers = parse_value(key, value)?,
            "encoder.heads" => m.encoder_heads = parse_value(key, value)?,
            "encoder.ffn_dim" => m.encoder_ffn_dim = parse_value(key, value)?,
            "encoder.pooling" => {
                m.pooling = match value {
                    "ent" => Pooling::Ent,
                    "mean" => Pooling::Mean,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected ent or mean, got {value:?}"
                        )))
                    }
                }
            }
            "encoder.text_positions" => m.text_positions = parse_bool(key, value)?,
            "encoder.visual_positions" => m.visual_positions = parse_bool(key, value)?,
            "decoder.layers" => m.decoder_layers = parse_value(key, value)?,
            "decoder.heads" => m.decoder_heads = parse_value(key, value)?,
            "decoder.ffn_dim" => m.decoder_ffn_dim = parse_value(key, value)?,
            "sacl.tau" => t.sacl.tau = parse_value(key, value)?,
            "sacl.k" => t.sacl.k = parse_value(key, value)?,
            "sacl.enable_sv" => t.sacl.enable_sv = parse_bool(key, value)?,
            "sacl.enable_st" => t.sacl.enable_st = parse_bool(key, value)?,
            "train.lr" => t.lr = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.label_smoothing" => t.label_smoothing = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "train.checkpoint" => self.checkpoint = PathBuf::from(value),
            "train.log" => self.log = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. `origin` names the source
    /// in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{lineno}: expected \"key = value\"")));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{lineno}: duplicate key {key:?}")));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{lineno}: {}", strip(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Replaces the seed with `TSAM_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        config_hash(&self.to_text())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.sacl.tau, 0.02);
        assert_eq!(c.train.sacl.k, 16);
        assert_eq!(c.model.dim, 64);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("sacl.tau", "0.1").unwrap();
        c.set("model.score_fn", "rotate").unwrap();
        c.set("encoder.pooling", "mean").unwrap();
        let back = RunConfig::parse(&c.to_text(), "test").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let e = RunConfig::parse("model.depth = 3\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("cfg:1"), "{e}");
        let e = RunConfig::parse("model.dim = 8\nmodel.dim = 8\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("duplicate"));
        assert!(RunConfig::parse("model.dim 8\n", "cfg").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let base = RunConfig::default();
        for (k, v) in base.entries() {
            let mut c = base.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, base, "{k}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("sacl.enable_sv", "yes").is_err());
        assert!(c.apply_overrides([("model.dim", "30"), ("encoder.heads", "4")]).is_err());
        assert!(RunConfig::parse("train.batch_size = 1\n", "cfg").is_err());
    }
}
