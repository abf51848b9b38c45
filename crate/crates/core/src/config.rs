//! Run configuration: a TOML document with the sections `[model]`, `[task]`,
//! `[warmup]`, `[rl]`, `[eval]` and `[run]`.
//!
//! Every key must be present (the loader lists all missing keys at once)
//! and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::{NoiseMode, OneSidedBounds, PerturbationConfig};
use crate::policy::{ModelConfig, RolloutSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Inclusive difficulty range of RL training prompts.
    pub train_difficulty: [usize; 2],
    /// Difficulty of held-out evaluation prompts.
    pub eval_difficulty: [usize; 2],
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { train_difficulty: [2, 2], eval_difficulty: [2, 2], train_seed: 11, eval_seed: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub corpus_size: usize,
    pub difficulty: [usize; 2],
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the chain-token cross-entropy at latent positions in stage 2.
    pub latent_aux_weight: f64,
    /// Noise applied to stage-2 latent tokens: "none", "two_sided" or "one_sided".
    pub latent_noise: NoiseMode,
    pub latent_noise_scale: f64,
    pub gate_prompts: usize,
    pub gate_pass_at_1: f64,
    pub gate_marker_rate: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            difficulty: [1, 2],
            stage1_epochs: 6,
            stage2_epochs: 6,
            batch_size: 32,
            learning_rate: 3e-3,
            latent_aux_weight: 1.0,
            latent_noise: NoiseMode::None,
            latent_noise_scale: 0.0,
            gate_prompts: 200,
            gate_pass_at_1: 0.6,
            gate_marker_rate: 0.95,
            seed: 3,
        }
    }
}

/// Tri-state override for an algorithm-level switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    #[default]
    Auto,
    On,
    Off,
}

impl Switch {
    pub fn resolve(self, default: bool) -> bool {
        match self {
            Switch::Auto => default,
            Switch::On => true,
            Switch::Off => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub ppo_epochs: usize,
    pub batch_size: usize,
    pub l_max: usize,
    pub t_lat_max: usize,
    pub top_k: usize,
    pub one_sided: Switch,
    pub invalid_masking: Switch,
    pub first_token_selection: Switch,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub tau: f64,
    pub noise_scale: f64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_coeff: 0.01,
            learning_rate: 1e-4,
            clip_norm: 1.0,
            ppo_epochs: 2,
            batch_size: 16,
            l_max: 64,
            t_lat_max: 12,
            top_k: 5,
            one_sided: Switch::Auto,
            invalid_masking: Switch::Auto,
            first_token_selection: Switch::Auto,
            a: 1.5,
            b: 3.0,
            delta: 0.01,
            tau: 1.0,
            noise_scale: 1.0,
            total_steps: 100,
            eval_interval: 10,
            checkpoint_interval: 50,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        if self.group_size < 2 {
            bad.push("rl.group_size must be >= 2".to_string());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            bad.push("rl.clip_eps must lie in (0, 1)".into());
        }
        if !(self.kl_coeff >= 0.0) {
            bad.push("rl.kl_coeff must be >= 0".into());
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            bad.push("rl.learning_rate and rl.clip_norm must be positive".into());
        }
        if self.ppo_epochs == 0 || self.batch_size == 0 || self.l_max == 0 || self.top_k == 0 {
            bad.push("rl.ppo_epochs, rl.batch_size, rl.l_max and rl.top_k must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.noise_scale >= 0.0) {
            bad.push("rl.tau must be positive and rl.noise_scale non-negative".into());
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            bad.push("rl.eval_interval and rl.checkpoint_interval must be positive".into());
        }
        if let Err(e) = self.bounds().validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn bounds(&self) -> OneSidedBounds {
        OneSidedBounds { a: self.a, b: self.b, delta: self.delta }
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig { bounds: self.bounds(), tau: self.tau, noise_scale: self.noise_scale }
    }

    pub fn rollout_settings(&self) -> RolloutSettings {
        RolloutSettings {
            top_k: self.top_k,
            t_lat_max: self.t_lat_max,
            l_max: self.l_max,
            perturbation: self.perturbation(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub prompts: usize,
    pub k: usize,
    pub n: usize,
    pub noise_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { prompts: 200, k: 8, n: 8, noise_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "latent-grpo".into(), seed: 0, output_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub warmup: WarmupConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

fn collect_keys(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if matches!(child, toml::Value::Table(_)) {
                collect_keys(&key, child, out);
            } else {
                out.push(key);
            }
        }
    }
}

fn lookup<'a>(v: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(v, |cur, k| cur.as_table()?.get(k))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc = toml::Value::Table(toml::from_str(text).map_err(|e: toml::de::Error| Error::Config(e.to_string()))?);
        let reference = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut expected = vec![];
        collect_keys("", &reference, &mut expected);
        let mut present = vec![];
        collect_keys("", &doc, &mut present);

        let unknown: Vec<&String> = present.iter().filter(|k| lookup(&reference, k).is_none()).collect();
        if !unknown.is_empty() {
            let list: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(Error::Config(format!("unknown keys: {}", list.join(", "))));
        }
        let missing: Vec<String> = expected.into_iter().filter(|k| lookup(&doc, k).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rl.validate()?;
        let ranges = [
            ("task.train_difficulty", self.task.train_difficulty),
            ("task.eval_difficulty", self.task.eval_difficulty),
            ("warmup.difficulty", self.warmup.difficulty),
        ];
        for (name, [lo, hi]) in ranges {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("{name} must satisfy 1 <= lo <= hi")));
            }
        }
        if self.rl.top_k >= self.model.vocab_size {
            return Err(Error::Config("rl.top_k must be below model.vocab_size".into()));
        }
        if self.warmup.corpus_size == 0 || self.warmup.batch_size == 0 {
            return Err(Error::Config("warmup.corpus_size and warmup.batch_size must be positive".into()));
        }
        if self.eval.k == 0 || self.eval.k > self.eval.n {
            return Err(Error::Config("eval requires 1 <= k <= n".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    /// Same config with every seed set to `seed`.
    pub fn reseeded(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.model.seed = seed;
        cfg.warmup.seed = seed;
        cfg.rl.seed = seed;
        cfg.run.seed = seed;
        cfg
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Stable run identifier: config hash prefix plus seed.
    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.run.name, &self.hash()[..12], self.run.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn lists_every_missing_key() {
        let text = RunConfig::default().to_toml_string();
        let pruned: String = text
            .lines()
            .filter(|l| !l.starts_with("clip_eps") && !l.starts_with("prompts"))
            .map(|l| format!("{l}\n"))
            .collect();
        match RunConfig::from_toml_str(&pruned) {
            Err(Error::MissingKeys(keys)) => assert_eq!(keys, vec!["eval.prompts", "rl.clip_eps"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = RunConfig::default().to_toml_string().replace("[rl]\n", "[rl]\nclip_epsilon = 0.2\n");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("rl.clip_epsilon"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.rl.group_size = 1;
        assert!(RunConfig::from_toml_str(&cfg.to_toml_string()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.rl.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }
}
