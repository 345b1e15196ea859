//! Run configuration and its flat `key = value` file format.
//!
//! Every field is written by name; unknown keys are rejected. Environment
//! variables named `PROTONER_<KEY>` (upper-cased) override file values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::LossOptions;

pub const ENV_PREFIX: &str = "PROTONER_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub span_detection: bool,
    pub context_intervention: bool,
    pub prototype_intervention: bool,
    pub sample_reweighting: bool,
}

impl Flags {
    pub const OFF: Flags = Flags {
        span_detection: false,
        context_intervention: false,
        prototype_intervention: false,
        sample_reweighting: false,
    };

    /// Full method for a shot window: memory and reweighting for 1~2-shot,
    /// entity replacement for larger windows. Detection is always on.
    pub fn full_for(shot_hi: usize) -> Flags {
        let few = shot_hi <= 2;
        Flags {
            span_detection: true,
            context_intervention: !few,
            prototype_intervention: few,
            sample_reweighting: few,
        }
    }

    /// Compact `ECRP` mask, `-` for disabled flags.
    pub fn code(&self) -> String {
        [
            (self.span_detection, 'E'),
            (self.context_intervention, 'C'),
            (self.sample_reweighting, 'R'),
            (self.prototype_intervention, 'P'),
        ]
        .iter()
        .map(|(on, c)| if *on { *c } else { '-' })
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdTarget {
    /// The training episode's own query features.
    Query,
    /// Support features of an episode drawn from the test corpus.
    TestSupport,
}

impl FromStr for MmdTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(MmdTarget::Query),
            "test_support" => Ok(MmdTarget::TestSupport),
            _ => Err(Error::Config(format!("unknown mmd_target {s:?} (query | test_support)"))),
        }
    }
}

impl MmdTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            MmdTarget::Query => "query",
            MmdTarget::TestSupport => "test_support",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScopeKind {
    Support,
    Corpus,
}

impl FromStr for PoolScopeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(PoolScopeKind::Support),
            "corpus" => Ok(PoolScopeKind::Corpus),
            _ => Err(Error::Config(format!("unknown pool_scope {s:?} (support | corpus)"))),
        }
    }
}

impl PoolScopeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolScopeKind::Support => "support",
            PoolScopeKind::Corpus => "corpus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub way: usize,
    pub shot_lo: usize,
    pub shot_hi: usize,
    pub query_per_class: usize,
    pub episodes_train: usize,
    pub episodes_eval: usize,
    pub learning_rate: f64,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mmd_weight: f64,
    pub mmd_target: MmdTarget,
    pub flags: Flags,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub dim: usize,
    pub context_window: usize,
    pub vocab_hash_buckets: usize,
    pub weight_decay: f64,
    pub pool_scope: PoolScopeKind,
    pub memory_at_test: bool,
    pub freeze_encoder: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            way: 5,
            shot_lo: 1,
            shot_hi: 2,
            query_per_class: 1,
            episodes_train: 2000,
            episodes_eval: 500,
            learning_rate: 1e-4,
            batch_size: 20,
            max_len: 32,
            dropout: 0.1,
            mmd_weight: 1.0,
            mmd_target: MmdTarget::Query,
            flags: Flags::full_for(2),
            lambda: 0.5,
            tau: 1.0,
            seed: 0,
            dim: 32,
            context_window: 2,
            vocab_hash_buckets: 4096,
            weight_decay: 0.01,
            pool_scope: PoolScopeKind::Support,
            memory_at_test: true,
            freeze_encoder: false,
        }
    }
}

const KEYS: [&str; 26] = [
    "way",
    "shot_lo",
    "shot_hi",
    "query_per_class",
    "episodes_train",
    "episodes_eval",
    "learning_rate",
    "batch_size",
    "max_len",
    "dropout",
    "mmd_weight",
    "mmd_target",
    "span_detection",
    "context_intervention",
    "prototype_intervention",
    "sample_reweighting",
    "lambda",
    "tau",
    "seed",
    "dim",
    "context_window",
    "vocab_hash_buckets",
    "weight_decay",
    "pool_scope",
    "memory_at_test",
    "freeze_encoder",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Defaults for a shot window, with the matching full-method flags.
    pub fn for_shots(shot_lo: usize, shot_hi: usize) -> Self {
        RunConfig {
            shot_lo,
            shot_hi,
            flags: Flags::full_for(shot_hi),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("way", self.way),
            ("shot_lo", self.shot_lo),
            ("query_per_class", self.query_per_class),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("dim", self.dim),
            ("vocab_hash_buckets", self.vocab_hash_buckets),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.shot_hi < self.shot_lo {
            return Err(Error::Config("shot_hi below shot_lo".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0, 1]".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.mmd_weight >= 0.0 && self.mmd_weight.is_finite()) {
            return Err(Error::Config("mmd_weight must be finite and non-negative".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            max_len: self.max_len,
            vocab_hash_buckets: self.vocab_hash_buckets,
            context_window: self.context_window,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    /// MMD takes part in the objective together with sample reweighting.
    pub fn effective_mmd_weight(&self) -> f64 {
        if self.flags.sample_reweighting {
            self.mmd_weight
        } else {
            0.0
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            span_detection: self.flags.span_detection,
            reweight_tau: self.flags.sample_reweighting.then_some(self.tau),
            prototype_memory: self.flags.prototype_intervention,
            mmd_weight: self.effective_mmd_weight(),
            freeze_encoder: self.freeze_encoder,
            ..LossOptions::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "way" => self.way = parse_value(key, v)?,
            "shot_lo" => self.shot_lo = parse_value(key, v)?,
            "shot_hi" => self.shot_hi = parse_value(key, v)?,
            "query_per_class" => self.query_per_class = parse_value(key, v)?,
            "episodes_train" => self.episodes_train = parse_value(key, v)?,
            "episodes_eval" => self.episodes_eval = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "mmd_weight" => self.mmd_weight = parse_value(key, v)?,
            "mmd_target" => self.mmd_target = v.parse()?,
            "span_detection" => self.flags.span_detection = parse_value(key, v)?,
            "context_intervention" => self.flags.context_intervention = parse_value(key, v)?,
            "prototype_intervention" => self.flags.prototype_intervention = parse_value(key, v)?,
            "sample_reweighting" => self.flags.sample_reweighting = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "context_window" => self.context_window = parse_value(key, v)?,
            "vocab_hash_buckets" => self.vocab_hash_buckets = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "pool_scope" => self.pool_scope = v.parse()?,
            "memory_at_test" => self.memory_at_test = parse_value(key, v)?,
            "freeze_encoder" => self.freeze_encoder = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "way" => self.way.to_string(),
            "shot_lo" => self.shot_lo.to_string(),
            "shot_hi" => self.shot_hi.to_string(),
            "query_per_class" => self.query_per_class.to_string(),
            "episodes_train" => self.episodes_train.to_string(),
            "episodes_eval" => self.episodes_eval.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "mmd_weight" => self.mmd_weight.to_string(),
            "mmd_target" => self.mmd_target.as_str().to_string(),
            "span_detection" => self.flags.span_detection.to_string(),
            "context_intervention" => self.flags.context_intervention.to_string(),
            "prototype_intervention" => self.flags.prototype_intervention.to_string(),
            "sample_reweighting" => self.flags.sample_reweighting.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "seed" => self.seed.to_string(),
            "dim" => self.dim.to_string(),
            "context_window" => self.context_window.to_string(),
            "vocab_hash_buckets" => self.vocab_hash_buckets.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "pool_scope" => self.pool_scope.as_str().to_string(),
            "memory_at_test" => self.memory_at_test.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Flags not given in
    /// the text default to the full method for the given `shot_hi`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown config key {k:?}", i + 1)));
            }
            if pairs.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Self::from_pairs(&pairs)
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for k in ["shot_lo", "shot_hi"] {
            if let Some(v) = pairs.get(k) {
                cfg.set(k, v)?;
            }
        }
        cfg.flags = Flags::full_for(cfg.shot_hi);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `PROTONER_<KEY>` overrides from an environment listing.
    pub fn with_env<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut out = self.clone();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                out.set(&key, &value)?;
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::for_shots(5, 10);
        c.learning_rate = 0.0123;
        c.mmd_target = MmdTarget::TestSupport;
        c.tau = 0.3;
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn flag_defaults_follow_shots() {
        let c = RunConfig::parse("shot_lo = 5\nshot_hi = 10\n").unwrap();
        assert!(c.flags.context_intervention && !c.flags.prototype_intervention);
        let c = RunConfig::parse("").unwrap();
        assert!(!c.flags.context_intervention && c.flags.prototype_intervention);
        let c = RunConfig::parse("shot_hi = 10\nshot_lo=5\nprototype_intervention = true").unwrap();
        assert!(c.flags.prototype_intervention);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("wat = 1").is_err());
        assert!(RunConfig::parse("way = 1\nway = 2").is_err());
        assert!(RunConfig::parse("way").is_err());
        assert!(RunConfig::parse("learning_rate = 0").is_err());
        assert!(RunConfig::parse("way = 0").is_err());
        assert!(RunConfig::parse("mmd_target = both").is_err());
    }

    #[test]
    fn env_overrides() {
        let c = RunConfig::default()
            .with_env([
                ("PROTONER_SEED".to_string(), "7".to_string()),
                ("HOME".to_string(), "/x".to_string()),
            ])
            .unwrap();
        assert_eq!(c.seed, 7);
        assert!(RunConfig::default()
            .with_env([("PROTONER_WAY".to_string(), "x".to_string())])
            .is_err());
    }
}
