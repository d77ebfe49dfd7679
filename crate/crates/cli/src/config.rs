//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! model.kind = cgnp
//! model.radius = 0.7
//! ```
//!
//! Unknown keys are rejected. Missing keys take the defaults of
//! [`RunConfig::default`]. `protocol.scale = full` switches the batch and
//! test-episode defaults to the full-scale protocol; explicit
//! `train.batches` / `data.test_episodes` still win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cgnp_core::gpgen::{EqKernelSpec, ProtocolConfig};
use cgnp_core::npmodels::{ModelConfig, ModelKind};
use cgnp_core::trainer::TrainConfig;

use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub radius: f64,
    pub lr: f64,
    pub scale: Scale,
    pub batches: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub holdout_episodes: usize,
    pub master_seed: u64,
    pub init_seed: u64,
    pub length_scale: f64,
    pub signal_variance: f64,
    pub jitter: f64,
    pub test_episodes: usize,
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::Cgnp,
            latent_dim: 8,
            radius: 0.7,
            lr: 1e-3,
            scale: Scale::Desk,
            batches: 20_000,
            batch_size: 64,
            eval_every: 2_000,
            holdout_episodes: 64,
            master_seed: 0,
            init_seed: 0,
            length_scale: 0.4,
            signal_variance: 1.0,
            jitter: 1e-6,
            test_episodes: 1_000,
            paths: BTreeMap::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "model.kind",
    "model.latent_dim",
    "model.radius",
    "train.lr",
    "train.batches",
    "train.batch_size",
    "train.eval_every",
    "train.holdout_episodes",
    "protocol.scale",
    "seed.master",
    "seed.init",
    "data.length_scale",
    "data.signal_variance",
    "data.jitter",
    "data.test_episodes",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Parses a config document and applies `overrides` (each `key=value`)
    /// on top of it.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit_batches = false;
        let mut explicit_tests = false;
        for (k, v) in pairs {
            match k.as_str() {
                "model.kind" => {
                    cfg.kind = v.parse().map_err(|e: cgnp_core::Error| CliError::Config(e.to_string()))?
                }
                "model.latent_dim" => cfg.latent_dim = parse_value(k, v)?,
                "model.radius" => cfg.radius = parse_value(k, v)?,
                "train.lr" => cfg.lr = parse_value(k, v)?,
                "train.batches" => {
                    cfg.batches = parse_value(k, v)?;
                    explicit_batches = true;
                }
                "train.batch_size" => cfg.batch_size = parse_value(k, v)?,
                "train.eval_every" => cfg.eval_every = parse_value(k, v)?,
                "train.holdout_episodes" => cfg.holdout_episodes = parse_value(k, v)?,
                "protocol.scale" => {
                    cfg.scale = match v.as_str() {
                        "desk" => Scale::Desk,
                        "full" => Scale::Full,
                        _ => return Err(CliError::Config(format!("protocol.scale must be desk or full, got `{v}`"))),
                    }
                }
                "seed.master" => cfg.master_seed = parse_value(k, v)?,
                "seed.init" => cfg.init_seed = parse_value(k, v)?,
                "data.length_scale" => cfg.length_scale = parse_value(k, v)?,
                "data.signal_variance" => cfg.signal_variance = parse_value(k, v)?,
                "data.jitter" => cfg.jitter = parse_value(k, v)?,
                "data.test_episodes" => {
                    cfg.test_episodes = parse_value(k, v)?;
                    explicit_tests = true;
                }
                other => match other.strip_prefix("paths.") {
                    Some(name) if !name.is_empty() => {
                        cfg.paths.insert(name.to_string(), v.clone());
                    }
                    _ => return Err(CliError::Config(format!("unknown key `{other}`"))),
                },
            }
        }
        if cfg.scale == Scale::Full {
            let full = ProtocolConfig::full_scale(0);
            if !explicit_batches {
                cfg.batches = full.train_batches;
            }
            if !explicit_tests {
                cfg.test_episodes = full.test_episodes;
            }
        }
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            latent_dim: self.latent_dim,
            radius: self.radius,
            init_seed: self.init_seed,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            batch_size: self.batch_size,
            train_batches: self.batches,
            test_episodes: self.test_episodes,
            ..ProtocolConfig::desk_scale(self.master_seed)
        }
    }

    pub fn kernel(&self) -> EqKernelSpec {
        EqKernelSpec {
            length_scale: self.length_scale,
            signal_variance: self.signal_variance,
            jitter: self.jitter,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            protocol: self.protocol(),
            kernel: self.kernel(),
            lr: self.lr,
            eval_every: self.eval_every,
            holdout_episodes: self.holdout_episodes,
        }
    }

    /// Every key with its effective value, in canonical order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let scale = match self.scale {
            Scale::Desk => "desk",
            Scale::Full => "full",
        };
        let values = [
            self.kind.as_str().to_string(),
            self.latent_dim.to_string(),
            self.radius.to_string(),
            self.lr.to_string(),
            self.batches.to_string(),
            self.batch_size.to_string(),
            self.eval_every.to_string(),
            self.holdout_episodes.to_string(),
            scale.to_string(),
            self.master_seed.to_string(),
            self.init_seed.to_string(),
            self.length_scale.to_string(),
            self.signal_variance.to_string(),
            self.jitter.to_string(),
            self.test_episodes.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            m.insert(k.to_string(), v);
        }
        for (k, v) in &self.paths {
            m.insert(format!("paths.{k}"), v.clone());
        }
        m
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let pairs: Vec<(String, String)> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Self::from_pairs(&pairs)
    }

    /// Config document that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// One-line `key=value` summary for file headers.
    pub fn summary(&self) -> String {
        self.to_map()
            .iter()
            .filter(|(k, _)| !k.starts_with("paths."))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.latent_dim, 8);
        assert_eq!(c.radius, 0.7);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.length_scale, 0.4);
        assert_eq!(c.batches, 20_000);
        assert_eq!(c.test_episodes, 1_000);
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn file_then_overrides() {
        let text = "# experiment\nmodel.kind = cnp\nmodel.latent_dim=4  # narrow\n\npaths.test_data = t.jsonl\n";
        let c = RunConfig::parse(text, &["model.latent_dim=16".into()]).unwrap();
        assert_eq!(c.kind, ModelKind::Cnp);
        assert_eq!(c.latent_dim, 16);
        assert_eq!(c.paths["test_data"], "t.jsonl");
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("model.depth = 4", &[]), Err(CliError::Config(_))));
        assert!(RunConfig::parse("model.kind cnp", &[]).is_err());
        assert!(RunConfig::parse("train.lr = fast", &[]).is_err());
        assert!(RunConfig::parse("paths. = x", &[]).is_err());
        assert!(RunConfig::parse("", &["nonsense".into()]).is_err());
        assert!(RunConfig::parse("train.batch_size = 1", &[]).is_err());
        assert!(RunConfig::parse("model.kind = np", &[]).is_err());
    }

    #[test]
    fn full_scale_preset() {
        let c = RunConfig::parse("protocol.scale = full", &[]).unwrap();
        assert_eq!(c.batches, 200_000);
        assert_eq!(c.test_episodes, 10_000);
        let c = RunConfig::parse("train.batches = 5\nprotocol.scale = full", &[]).unwrap();
        assert_eq!(c.batches, 5);
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig::parse(
            "model.kind = cnp\nmodel.radius = 0.25\ntrain.lr = 0.0003\nseed.master = 17\npaths.out = a b",
            &[],
        )
        .unwrap();
        let back = RunConfig::parse(&c.to_text(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    proptest::proptest! {
        #[test]
        fn any_valid_config_round_trips(
            cnp in proptest::bool::ANY,
            d in 1usize..64,
            radius in 0.0f64..10.0,
            lr in 1e-6f64..1.0,
            batches in 1usize..1_000_000,
            master in proptest::num::u64::ANY,
            ls in 1e-3f64..10.0,
        ) {
            let c = RunConfig {
                kind: if cnp { ModelKind::Cnp } else { ModelKind::Cgnp },
                latent_dim: d,
                radius,
                lr,
                batches,
                master_seed: master,
                length_scale: ls,
                ..RunConfig::default()
            };
            let back = RunConfig::parse(&c.to_text(), &[]).unwrap();
            proptest::prop_assert_eq!(back, c);
        }
    }
}
