//! Run configuration: TOML with strict unknown-key rejection.
//!
//! See `configs/` at the workspace root for annotated examples.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dmpo::envs::{
    gen_countdown, gen_sudoku, read_countdown_dataset, read_sudoku_dataset, CountdownEnv, Env,
    SudokuEnv, SynthEnv,
};
use dmpo::policy::tabular::TabularPolicy;
use dmpo::policy::tinynet::TinyNetPolicy;
use dmpo::policy::Policy;
use dmpo::rng;
use dmpo::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub policy: PolicySection,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Compute the exact tilted target once and report per-step KL to it.
    #[serde(default)]
    pub oracle: bool,
    /// Worker threads (0 = library default).
    #[serde(default)]
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum EnvSection {
    Synth {
        vocab_size: u16,
        response_len: usize,
        modes: Vec<SynthMode>,
    },
    Countdown {
        #[serde(default)]
        dataset: Option<PathBuf>,
        #[serde(default)]
        generate: Option<usize>,
    },
    Sudoku {
        #[serde(default)]
        dataset: Option<PathBuf>,
        #[serde(default)]
        generate: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMode {
    pub tokens: Vec<u16>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "backend")]
pub enum PolicySection {
    Tabular {},
    Tinynet {
        #[serde(default = "default_embed")]
        embed_dim: usize,
        #[serde(default = "default_hidden")]
        hidden_dim: usize,
    },
}

fn default_embed() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.train.seed = config.run.seed;
        config
            .train
            .validate()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(config)
    }

    /// Build the environment; dataset generation draws from a stream derived
    /// only from the run seed, so reruns are identical.
    pub fn build_env(&self) -> anyhow::Result<Env> {
        let mut gen_rng = rng::master(self.run.seed ^ 0xda7a_5eed);
        Ok(match &self.env {
            EnvSection::Synth {
                vocab_size,
                response_len,
                modes,
            } => {
                let modes: Vec<(Vec<u16>, f64)> =
                    modes.iter().map(|m| (m.tokens.clone(), m.value)).collect();
                Env::Synth(SynthEnv::new(*vocab_size, *response_len, modes)?)
            }
            EnvSection::Countdown { dataset, generate } => {
                let instances = match (dataset, generate) {
                    (Some(path), None) => read_countdown_dataset(path)?,
                    (None, Some(n)) => gen_countdown(*n, &mut gen_rng)?,
                    _ => bail!("countdown env needs exactly one of `dataset` or `generate`"),
                };
                Env::Countdown(CountdownEnv::new(instances)?)
            }
            EnvSection::Sudoku { dataset, generate } => {
                let instances = match (dataset, generate) {
                    (Some(path), None) => read_sudoku_dataset(path)?,
                    (None, Some(n)) => gen_sudoku(*n, &mut gen_rng)?,
                    _ => bail!("sudoku env needs exactly one of `dataset` or `generate`"),
                };
                Env::Sudoku(SudokuEnv::new(instances)?)
            }
        })
    }

    /// Freshly initialized policy for this env and backend.
    pub fn build_policy(&self, env: &Env) -> anyhow::Result<Policy> {
        Ok(match &self.policy {
            PolicySection::Tabular {} => {
                TabularPolicy::init(env.num_prompts(), env.response_len(), env.vocab())?
                    .into_policy()
            }
            PolicySection::Tinynet {
                embed_dim,
                hidden_dim,
            } => {
                let mut init_rng = rng::master(self.run.seed ^ 0x1217_ba5e);
                TinyNetPolicy::init(
                    env.vocab(),
                    env.response_len(),
                    env.prompt_len(),
                    *embed_dim,
                    *hidden_dim,
                    &mut init_rng,
                )?
                .into_policy()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[run]
seed = 7
out_dir = "out"
oracle = true

[env]
kind = "synth"
vocab_size = 2
response_len = 3
modes = [{ tokens = [0, 0, 0], value = 3.0 }, { tokens = [1, 1, 1], value = 3.0 }]

[policy]
backend = "tabular"

[train]
batch_prompts = 1
rollouts_per_prompt = 16
refresh_every = 4
baseline = "group"
loss = "wdce"
total_steps = 100
"#;

    #[test]
    fn parses_and_injects_seed() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        assert_eq!(config.run.seed, 7);
        let env = config.build_env().unwrap();
        assert_eq!(env.response_len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = EXAMPLE.replace("[train]", "[train]\nmystery_knob = 3");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
        let bad_top = format!("{EXAMPLE}\n[extra_section]\nx = 1\n");
        assert!(toml::from_str::<RunConfig>(&bad_top).is_err());
    }

    #[test]
    fn round_trip_reparses_identically() {
        let config: RunConfig = toml::from_str(EXAMPLE).unwrap();
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.run.seed, config.run.seed);
        assert_eq!(back.train, config.train);
    }
}
