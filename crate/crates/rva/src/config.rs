//! Plain-text run configuration: `key = value` lines, exactly the
//! documented keys, unknown keys rejected. One file drives data
//! generation, training, evaluation, and gradient checking.

use std::path::Path;

use thiserror::Error;

use crate::synth::GenConfig;
use crate::tensor::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model dimensions
    pub d_emb: usize,
    pub d_h: usize,
    pub d_v: usize,
    // synthetic data
    pub regions: usize,
    pub rounds: usize,
    pub ambiguity_rate: f64,
    pub skip_rate: f64,
    pub candidates: usize,
    pub jitter: f64,
    // optimizer
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub dropout: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the auxiliary grounding loss -log(alpha[gt_region])
    /// on training rounds; 0 disables it. Desk-scale aid: it bootstraps
    /// region attention, which the answer loss alone moves too slowly
    /// at this data scale. Ambiguous questions carry no referent, so
    /// the term is only satisfiable through the recursion pathway.
    pub ground_weight: f64,
    // ablations
    pub rv_only: bool,
    pub no_filter: bool,
    pub pair_last: bool,
    /// Self-attention scores hidden states instead of word embeddings.
    pub attend_hidden: bool,
    pub precision: Precision,
    pub data: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d_emb: 300,
            d_h: 512,
            d_v: 64,
            regions: 36,
            rounds: 10,
            ambiguity_rate: 0.5,
            skip_rate: 0.2,
            candidates: 100,
            jitter: 0.05,
            lr_initial: 1e-3,
            lr_decay: 0.5,
            lr_floor: 5e-5,
            dropout: 0.5,
            tau: 1.0,
            epochs: 20,
            batch_size: 32,
            ground_weight: 0.0,
            rv_only: false,
            no_filter: false,
            pair_last: false,
            attend_hidden: false,
            precision: Precision::F32,
            data: String::new(),
        }
    }
}

pub const KEYS: [&str; 24] = [
    "seed",
    "d_emb",
    "d_h",
    "d_v",
    "regions",
    "rounds",
    "ambiguity_rate",
    "skip_rate",
    "candidates",
    "jitter",
    "lr_initial",
    "lr_decay",
    "lr_floor",
    "dropout",
    "tau",
    "epochs",
    "batch_size",
    "ground_weight",
    "rv_only",
    "no_filter",
    "pair_last",
    "attend_hidden",
    "precision",
    "data",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got '{v}'")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(format!("{key}: {e}"));
        let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{e}"));
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{e}"));
        match key {
            "seed" => self.seed = value.parse::<u64>().map_err(|e| bad(e.to_string()))?,
            "d_emb" => self.d_emb = int(value).map_err(bad)?,
            "d_h" => self.d_h = int(value).map_err(bad)?,
            "d_v" => self.d_v = int(value).map_err(bad)?,
            "regions" => self.regions = int(value).map_err(bad)?,
            "rounds" => self.rounds = int(value).map_err(bad)?,
            "ambiguity_rate" => self.ambiguity_rate = num(value).map_err(bad)?,
            "skip_rate" => self.skip_rate = num(value).map_err(bad)?,
            "candidates" => self.candidates = int(value).map_err(bad)?,
            "jitter" => self.jitter = num(value).map_err(bad)?,
            "lr_initial" => self.lr_initial = num(value).map_err(bad)?,
            "lr_decay" => self.lr_decay = num(value).map_err(bad)?,
            "lr_floor" => self.lr_floor = num(value).map_err(bad)?,
            "dropout" => self.dropout = num(value).map_err(bad)?,
            "tau" => self.tau = num(value).map_err(bad)?,
            "epochs" => self.epochs = int(value).map_err(bad)?,
            "batch_size" => self.batch_size = int(value).map_err(bad)?,
            "ground_weight" => self.ground_weight = num(value).map_err(bad)?,
            "rv_only" => self.rv_only = parse_bool(value).map_err(bad)?,
            "no_filter" => self.no_filter = parse_bool(value).map_err(bad)?,
            "pair_last" => self.pair_last = parse_bool(value).map_err(bad)?,
            "attend_hidden" => self.attend_hidden = parse_bool(value).map_err(bad)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(format!("expected f32 or f64, got '{value}'"))),
                }
            }
            "data" => self.data = value.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: i + 1,
                reason: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("d_h", self.d_h),
            ("d_v", self.d_v),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.lr_floor > self.lr_initial {
            return Err(ConfigError::Invalid(format!(
                "lr_floor {} exceeds lr_initial {}",
                self.lr_floor, self.lr_initial
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.tau <= 0.0 {
            return Err(ConfigError::Invalid(format!("tau {} must be positive", self.tau)));
        }
        if !self.ground_weight.is_finite() || self.ground_weight < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "ground_weight {} must be finite and non-negative",
                self.ground_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(ConfigError::Invalid(format!(
                "lr_decay {} outside [0,1]",
                self.lr_decay
            )));
        }
        self.gen_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            regions: self.regions,
            rounds: self.rounds,
            ambiguity_rate: self.ambiguity_rate,
            skip_rate: self.skip_rate,
            candidates: self.candidates,
            d_v: self.d_v,
            jitter: self.jitter,
        }
    }

    /// Learning rate for a 0-based epoch: initial * decay^epoch,
    /// clamped at the floor.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (self.lr_initial * self.lr_decay.powi(epoch as i32)).max(self.lr_floor)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn serialize(&self) -> String {
        let prec = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mut out = String::new();
        for key in KEYS {
            let value = match key {
                "seed" => self.seed.to_string(),
                "d_emb" => self.d_emb.to_string(),
                "d_h" => self.d_h.to_string(),
                "d_v" => self.d_v.to_string(),
                "regions" => self.regions.to_string(),
                "rounds" => self.rounds.to_string(),
                "ambiguity_rate" => format!("{:?}", self.ambiguity_rate),
                "skip_rate" => format!("{:?}", self.skip_rate),
                "candidates" => self.candidates.to_string(),
                "jitter" => format!("{:?}", self.jitter),
                "lr_initial" => format!("{:?}", self.lr_initial),
                "lr_decay" => format!("{:?}", self.lr_decay),
                "lr_floor" => format!("{:?}", self.lr_floor),
                "dropout" => format!("{:?}", self.dropout),
                "tau" => format!("{:?}", self.tau),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "ground_weight" => format!("{:?}", self.ground_weight),
                "rv_only" => self.rv_only.to_string(),
                "no_filter" => self.no_filter.to_string(),
                "pair_last" => self.pair_last.to_string(),
                "attend_hidden" => self.attend_hidden.to_string(),
                "precision" => prec.to_string(),
                "data" => self.data.clone(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("momentum = 0.9\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "momentum"));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("d_h = 32\nrv_only = true\n# comment\n\n").unwrap();
        assert_eq!(cfg.d_h, 32);
        assert!(cfg.rv_only);
        assert_eq!(cfg.d_emb, RunConfig::default().d_emb);
    }

    #[test]
    fn floor_above_initial_rejected() {
        let err = RunConfig::parse("lr_initial = 1e-5\nlr_floor = 1e-3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn lr_schedule_halves_then_floors() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(1), 5e-4);
        assert!((cfg.lr_at(4) - 6.25e-5).abs() < 1e-18);
        assert_eq!(cfg.lr_at(5), 5e-5);
        assert_eq!(cfg.lr_at(40), 5e-5);
    }

    #[test]
    fn bad_syntax_names_the_line() {
        let err = RunConfig::parse("seed = 1\nnot a pair\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
