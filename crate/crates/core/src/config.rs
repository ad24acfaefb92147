//! Run configuration: one TOML file describing every stage of a pipeline
//! run, with three override layers.
//!
//! Precedence, lowest to highest: built-in desk defaults, the `--config`
//! file, `REASONLAB_*` environment variables, command-line flags. Each
//! layer only touches the fields it names.
//!
//! The recognized environment variables mirror the global flags:
//! `REASONLAB_SEED`, `REASONLAB_OUT`, `REASONLAB_THREADS`, and
//! `REASONLAB_PRECISION`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::model::TransformerConfig;
use crate::pretrain::PretrainConfig;
use crate::reasonmaxxer::RmConfig;
use crate::rollout::SamplerConfig;
use crate::tasks::{CorpusConfig, DifficultyDistribution};

/// Global knobs shared by every stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunSection {
    /// Master seed; stage seeds derive from it unless a stage pins its own.
    pub seed: u64,
    /// Run directory: every artifact lands under here.
    pub out: PathBuf,
    /// Worker threads for embarrassingly parallel stages (rollout
    /// generation, evaluation). Training stages are sequential regardless.
    pub threads: usize,
    /// Numeric precision of the persisted pipeline. Checkpoints are stored
    /// as f32, so that is the only accepted value; the f64 lane exists
    /// throughout the library for tests and gradient checks.
    pub precision: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 42, out: PathBuf::from("runs/desk"), threads: 1, precision: "f32".into() }
    }
}

/// Sizes of the disjoint problem splits drawn at `gen-tasks`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitsSection {
    /// GRPO training pool (also the source of distillation prompts).
    pub grpo_pool: usize,
    /// Held-out evaluation set for every method comparison.
    pub heldout: usize,
    /// Candidate pool the RL-free trainer filters to the edge of competence.
    pub rm_pool: usize,
    /// Validation split for RL-free checkpoint selection.
    pub validation: usize,
    /// Problems decoded for the divergence taxonomy and interventions.
    pub analysis: usize,
    /// Difficulty mix shared by all splits.
    pub difficulty: DifficultyDistribution,
}

impl Default for SplitsSection {
    fn default() -> Self {
        SplitsSection {
            grpo_pool: 400,
            heldout: 200,
            rm_pool: 150,
            validation: 50,
            analysis: 60,
            difficulty: DifficultyDistribution::uniform(1..=4),
        }
    }
}

/// Divergence-taxonomy stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DivergenceSection {
    /// Base-rank boundary between RERANKED and SHIFTED.
    pub rerank_cutoff: usize,
}

impl Default for DivergenceSection {
    fn default() -> Self {
        DivergenceSection { rerank_cutoff: 5 }
    }
}

/// Intervention-suite stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InterveneSection {
    /// Entropy-gate thresholds to sweep.
    pub taus: Vec<f64>,
    /// Seeds for the random-substitution control.
    pub random_seeds: Vec<u64>,
    /// Top-k pool the random control draws alternatives from.
    pub random_pool: usize,
}

impl Default for InterveneSection {
    fn default() -> Self {
        InterveneSection {
            taus: vec![0.8, 1.2, 1.6, 2.0],
            random_seeds: vec![101, 102, 103],
            random_pool: 5,
        }
    }
}

/// τ values the RL-free sweep retrains at.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RmSweepSection {
    pub taus: Vec<f64>,
}

impl Default for RmSweepSection {
    fn default() -> Self {
        RmSweepSection { taus: vec![0.8, 1.2, 1.6, 2.0] }
    }
}

/// Evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    /// k for avg@k (mean pass rate over k sampled generations).
    pub avg_at: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { avg_at: 8, sampler: SamplerConfig::default() }
    }
}

/// The full resolved configuration of a run. Serialized into every stage's
/// manifest entry so a run can be repeated from its manifest alone.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: TransformerConfig,
    pub corpus: CorpusConfig,
    pub splits: SplitsSection,
    pub pretrain: PretrainConfig,
    pub grpo: GrpoConfig,
    pub sampler: SamplerConfig,
    pub divergence: DivergenceSection,
    pub intervene: InterveneSection,
    pub distill: DistillConfig,
    pub rm: RmConfig,
    pub rm_sweep: RmSweepSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Load the file (when given), then overlay environment variables from
    /// `env`. Pass `std::env::var` outside tests.
    pub fn load(
        path: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<RunConfig> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read config `{}`: {e}", p.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    Error::InvalidConfig(format!("cannot parse config `{}`: {e}", p.display()))
                })?
            }
        };
        cfg.apply_env(env)?;
        Ok(cfg)
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T> {
            raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("environment variable {name}={raw} is not valid"))
            })
        }
        if let Some(raw) = env("REASONLAB_SEED") {
            self.run.seed = parse("REASONLAB_SEED", &raw)?;
        }
        if let Some(raw) = env("REASONLAB_OUT") {
            self.run.out = PathBuf::from(raw);
        }
        if let Some(raw) = env("REASONLAB_THREADS") {
            self.run.threads = parse("REASONLAB_THREADS", &raw)?;
        }
        if let Some(raw) = env("REASONLAB_PRECISION") {
            self.run.precision = raw;
        }
        Ok(())
    }

    /// Final flag layer: only fields the user passed.
    pub fn apply_flags(
        &mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        threads: Option<usize>,
    ) {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        if let Some(o) = out {
            self.run.out = o;
        }
        if let Some(t) = threads {
            self.run.threads = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        if self.run.precision != "f32" {
            return Err(Error::InvalidConfig(format!(
                "precision `{}` is not supported: pipeline checkpoints are stored as f32 \
                 (the f64 path exists in the library for gradient checking and tests)",
                self.run.precision
            )));
        }
        self.model.validate()?;
        self.corpus.validate()?;
        self.splits.difficulty.validate()?;
        if self.splits.heldout == 0 {
            return Err(Error::InvalidConfig("heldout split must not be empty".into()));
        }
        if self.intervene.random_pool < 2 {
            return Err(Error::InvalidConfig(
                "random-control pool needs at least 2 candidates".into(),
            ));
        }
        self.distill.validate(self.model.vocab)?;
        self.rm.validate()?;
        if self.eval.avg_at == 0 {
            return Err(Error::InvalidConfig("avg_at must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_env_and_flags_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[run]\nseed = 7\nthreads = 2\n\n[grpo]\niterations = 3\n",
        )
        .unwrap();

        // File alone.
        let cfg = RunConfig::load(Some(&path), |_| None).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.threads, 2);
        assert_eq!(cfg.grpo.iterations, 3);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.eval.avg_at, 8);

        // Environment beats the file.
        let env = |name: &str| (name == "REASONLAB_SEED").then(|| "11".to_string());
        let cfg = RunConfig::load(Some(&path), env).unwrap();
        assert_eq!(cfg.run.seed, 11);
        assert_eq!(cfg.run.threads, 2);

        // Flags beat both.
        let mut cfg = cfg;
        cfg.apply_flags(Some(13), None, Some(4));
        assert_eq!(cfg.run.seed, 13);
        assert_eq!(cfg.run.threads, 4);
    }

    #[test]
    fn bad_inputs_are_named_in_the_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/x.toml")), |_| None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.toml"));

        let err = RunConfig::load(None, |n| {
            (n == "REASONLAB_THREADS").then(|| "many".to_string())
        })
        .unwrap_err();
        assert!(err.to_string().contains("REASONLAB_THREADS=many"));

        let mut cfg = RunConfig::default();
        cfg.run.precision = "f64".into();
        assert!(cfg.validate().unwrap_err().to_string().contains("f32"));
    }
}
