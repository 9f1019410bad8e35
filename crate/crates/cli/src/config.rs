//! Run configuration: a TOML file with one section per concern, flag
//! overrides, and the fully resolved form that is echoed into artifacts.
//!
//! ```toml
//! [env]
//! preset = "crash_5x5"
//! velocity = [0, 1]
//!
//! [data]
//! train_seeds = [0, 30]
//! test_seeds = [100000, 100200]
//!
//! [train]
//! method = "both"
//! horizon = 10
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nap_core::expert::{GoalMode, SeedRange};
use nap_core::gridworld::{GenerationConfig, Range};
use nap_core::training::Hyperparams;

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvPreset {
    #[default]
    Crash5x5,
    Crash5x10,
    Empty5x5,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default)]
    pub preset: EnvPreset,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub boxes_per_column: Option<[usize; 2]>,
    pub box_size: Option<[usize; 2]>,
    pub velocity: Option<[usize; 2]>,
    pub max_episode_steps: Option<usize>,
    pub max_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_seeds: Option<[u64; 2]>,
    pub test_seeds: Option<[u64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPreset {
    #[default]
    Crash,
    Chaser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[default]
    Nap,
    Bc,
    Both,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Option<MethodChoice>,
    #[serde(default)]
    pub preset: TrainPreset,
    pub learning_rate: Option<f64>,
    pub margin: Option<f64>,
    pub lambda: Option<f64>,
    pub horizon: Option<usize>,
    pub batch_size: Option<usize>,
    pub goal_mode: Option<GoalMode>,
    pub epoch_cap: Option<usize>,
    pub seed: Option<u64>,
    pub trunk_channels: Option<Vec<usize>>,
    pub kernel_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: Option<[u64; 2]>,
    pub nap_star: Option<bool>,
    pub extend_horizon: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    #[default]
    Levels,
    Horizon,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: Option<SweepKind>,
    pub level_counts: Option<Vec<usize>>,
    pub horizons: Option<Vec<usize>>,
    pub restarts: Option<usize>,
}

/// The config file as written.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_seeds: SeedRange,
    pub test_seeds: SeedRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: MethodChoice,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seeds: SeedRange,
    pub nap_star: bool,
    pub extend_horizon: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub level_counts: Vec<usize>,
    pub horizons: Vec<usize>,
    pub restarts: usize,
}

/// Every setting after defaults and overrides are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub env: GenerationConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<MethodChoice>,
    pub eval_seeds: Option<SeedRange>,
    pub nap_star: Option<bool>,
}

fn range(field: &str, value: Option<[usize; 2]>, default: Range) -> CliResult<Range> {
    match value {
        None => Ok(default),
        Some([min, max]) if min <= max => Ok(Range::new(min, max)),
        Some(_) => Err(CliError::Config(format!(
            "{field}: minimum exceeds maximum"
        ))),
    }
}

fn seeds(field: &str, value: Option<[u64; 2]>, default: SeedRange) -> CliResult<SeedRange> {
    match value {
        None => Ok(default),
        Some([start, end]) if start < end => Ok(SeedRange::new(start, end)),
        Some(_) => Err(CliError::Config(format!(
            "{field}: seed range must be nonempty"
        ))),
    }
}

impl ResolvedConfig {
    pub fn resolve(file: &ConfigFile, overrides: &Overrides) -> CliResult<Self> {
        let e = &file.env;
        let base = match e.preset {
            EnvPreset::Crash5x5 => GenerationConfig::crash_5x5(),
            EnvPreset::Crash5x10 => GenerationConfig::crash_5x10(),
            EnvPreset::Empty5x5 => GenerationConfig::empty_5x5(),
        };
        let env = GenerationConfig {
            height: e.height.unwrap_or(base.height),
            width: e.width.unwrap_or(base.width),
            boxes_per_column: range(
                "env.boxes_per_column",
                e.boxes_per_column,
                base.boxes_per_column,
            )?,
            box_size: range("env.box_size", e.box_size, base.box_size)?,
            velocity: range("env.velocity", e.velocity, base.velocity)?,
            max_episode_steps: e.max_episode_steps.or(base.max_episode_steps),
            max_draws: e.max_draws.unwrap_or(base.max_draws),
        };
        env.validate()
            .map_err(|err| CliError::Config(format!("env: {err}")))?;

        let data = DataConfig {
            train_seeds: seeds(
                "data.train_seeds",
                file.data.train_seeds,
                SeedRange::new(0, 30),
            )?,
            test_seeds: seeds(
                "data.test_seeds",
                file.data.test_seeds,
                SeedRange::new(100_000, 100_200),
            )?,
        };
        if data.train_seeds.overlaps(&data.test_seeds) {
            return Err(CliError::Config(
                "data.train_seeds overlaps data.test_seeds".into(),
            ));
        }

        let t = &file.train;
        let horizon = t.horizon.unwrap_or(10);
        let preset = match t.preset {
            TrainPreset::Crash => Hyperparams::crash(horizon),
            TrainPreset::Chaser => Hyperparams::chaser(horizon),
        };
        let hyperparams = Hyperparams {
            learning_rate: t.learning_rate.unwrap_or(preset.learning_rate),
            margin: t.margin.unwrap_or(preset.margin),
            lambda: t.lambda.unwrap_or(preset.lambda),
            horizon,
            batch_size: t.batch_size.unwrap_or(preset.batch_size),
            goal_mode: t.goal_mode.unwrap_or(preset.goal_mode),
            epoch_cap: t.epoch_cap.or(preset.epoch_cap),
            seed: overrides.seed.or(t.seed).unwrap_or(preset.seed),
            trunk_channels: t.trunk_channels.clone().unwrap_or(preset.trunk_channels),
            kernel_size: t.kernel_size.unwrap_or(preset.kernel_size),
        };
        hyperparams
            .validate()
            .map_err(|err| CliError::Config(format!("train: {err}")))?;
        if hyperparams.kernel_size.is_multiple_of(2) || hyperparams.trunk_channels.contains(&0) {
            return Err(CliError::Config(
                "train.kernel_size must be odd and train.trunk_channels positive".into(),
            ));
        }
        let train = TrainConfig {
            method: overrides.method.or(t.method).unwrap_or_default(),
            hyperparams,
        };

        let eval = EvalConfig {
            seeds: match overrides.eval_seeds {
                Some(s) => s,
                None => seeds("eval.seeds", file.eval.seeds, data.test_seeds)?,
            },
            nap_star: overrides.nap_star.or(file.eval.nap_star).unwrap_or(false),
            extend_horizon: file.eval.extend_horizon.unwrap_or(true),
        };

        let s = &file.sweep;
        let sweep = SweepConfig {
            kind: s.kind.unwrap_or_default(),
            level_counts: s
                .level_counts
                .clone()
                .unwrap_or_else(|| vec![5, 10, 30, 50]),
            horizons: s.horizons.clone().unwrap_or_else(|| vec![1, 3, 5, 10]),
            restarts: s.restarts.unwrap_or(3),
        };
        if sweep.restarts == 0 {
            return Err(CliError::Config("sweep.restarts must be positive".into()));
        }
        if sweep.level_counts.is_empty()
            || sweep.level_counts.contains(&0)
            || sweep.level_counts.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CliError::Config(
                "sweep.level_counts must be positive and ascending".into(),
            ));
        }
        if sweep.horizons.is_empty() || sweep.horizons.contains(&0) {
            return Err(CliError::Config("sweep.horizons must be positive".into()));
        }

        Ok(Self {
            env,
            data,
            train,
            eval,
            sweep,
        })
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// SHA-256 of the canonical JSON encoding.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg = ResolvedConfig::resolve(&ConfigFile::parse("").unwrap(), &Overrides::default())
            .unwrap();
        assert_eq!(cfg.env, GenerationConfig::crash_5x5());
        assert_eq!(cfg.train.hyperparams.learning_rate, 1e-3);
        assert_eq!(cfg.sweep.restarts, 3);
        assert_eq!(cfg.eval.seeds, cfg.data.test_seeds);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ConfigFile::parse("[train]\nlearnin_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learnin_rate"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flags_override_file() {
        let file = ConfigFile::parse("[train]\nseed = 4\nmethod = \"bc\"\n").unwrap();
        let overrides = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = ResolvedConfig::resolve(&file, &overrides).unwrap();
        assert_eq!(cfg.train.hyperparams.seed, 9);
        assert_eq!(cfg.train.method, MethodChoice::Bc);
    }

    #[test]
    fn overlapping_seeds_rejected() {
        let file =
            ConfigFile::parse("[data]\ntrain_seeds = [0, 10]\ntest_seeds = [5, 20]\n").unwrap();
        assert!(ResolvedConfig::resolve(&file, &Overrides::default()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ResolvedConfig::resolve(&ConfigFile::default(), &Overrides::default()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.hyperparams.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
