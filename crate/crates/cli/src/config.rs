//! Experiment configuration: a TOML file whose every key is optional, with
//! command-line overrides applied on top.

use std::path::{Path, PathBuf};

use driftbench_core::data::{self, DomainTask, StreamSpec};
use driftbench_core::trainer::{MethodKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Shape of the file on disk. Sections are kept raw so that training
/// defaults can follow the method chosen after overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    method: Option<String>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    dataset: Option<PathBuf>,
    stream: Option<toml::Table>,
    train: Option<toml::Table>,
}

/// Fully defaulted, validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub method: MethodKind,
    /// One run per entry; each overwrites `train.seed`.
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Stream file in the DBDS format. When set, `stream` is ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub stream: StreamSpec,
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<MethodKind>,
    pub buffer_size: Option<usize>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, table: toml::Table) -> CliResult<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("[{name}] {}", e.message())))
}

/// Overlays `user` onto `base`, descending into nested tables.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &Overrides) -> CliResult<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        let method = match (overrides.method, raw.method) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse().map_err(|e: driftbench_core::Error| {
                CliError::Config(format!("method: {e}"))
            })?,
            (None, None) => MethodKind::Dare,
        };

        let mut train_table = toml::Table::try_from(TrainConfig::for_method(method))
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(user) = raw.train {
            merge(&mut train_table, user);
        }
        let mut train: TrainConfig = section("train", train_table)?;
        if let Some(n) = overrides.buffer_size {
            train.buffer_size = n;
        }
        let stream: StreamSpec = section("stream", raw.stream.unwrap_or_default())?;

        let seeds = if !overrides.seeds.is_empty() {
            overrides.seeds.clone()
        } else {
            raw.seeds.unwrap_or_else(|| vec![0])
        };
        let cfg = Self {
            method,
            seeds,
            out: overrides.out.clone().or(raw.out),
            dataset: raw.dataset,
            stream,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("seeds: entries must be distinct".into()));
        }
        let tasks = match &self.dataset {
            Some(_) => None,
            None => {
                self.stream.validate().map_err(|e| CliError::Config(format!("stream: {e}")))?;
                Some(self.stream.num_domains)
            }
        };
        // A file-backed stream is checked again once loaded.
        self.train
            .validate(self.method, tasks.unwrap_or(2))
            .map_err(|e| CliError::Config(format!("train: {e}")))
    }

    /// Loads or generates the domain stream and its class count.
    pub fn tasks(&self) -> CliResult<(Vec<DomainTask>, usize)> {
        match &self.dataset {
            Some(path) => {
                let tasks = data::load_external(path)?;
                let classes = data::infer_num_classes(&tasks);
                self.train
                    .validate(self.method, tasks.len())
                    .map_err(|e| CliError::Config(format!("train: {e}")))?;
                Ok((tasks, classes))
            }
            None => Ok((data::generate(&self.stream)?, self.stream.num_classes)),
        }
    }

    /// Configuration of the single run for `seed`, which reproduces that run
    /// when fed back through [`ExperimentConfig::from_toml`].
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
        cfg.out = None;
        cfg
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_method_defaults() {
        let cfg = ExperimentConfig::from_toml("", &Overrides::default()).unwrap();
        assert_eq!(cfg.method, MethodKind::Dare);
        assert_eq!(cfg.train.learning_rate, 0.04);
        assert_eq!(cfg.train.epochs_per_task, 50);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.buffer_size, 50);
        assert_eq!(cfg.seeds, vec![0]);
    }

    #[test]
    fn defaults_follow_the_overridden_method() {
        let o = Overrides {
            method: Some(MethodKind::Derpp),
            ..Default::default()
        };
        let cfg = ExperimentConfig::from_toml("method = \"dare\"", &o).unwrap();
        assert_eq!(cfg.method, MethodKind::Derpp);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.weights.beta, 0.1);
    }

    #[test]
    fn partial_nested_section_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[train.weights]\nalpha = 0.3\n",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.train.weights.alpha, 0.3);
        assert_eq!(cfg.train.weights.beta, 0.2);
    }

    #[test]
    fn flag_overrides_file_buffer_size() {
        let o = Overrides {
            buffer_size: Some(50),
            ..Default::default()
        };
        let cfg = ExperimentConfig::from_toml("[train]\nbuffer_size = 200\n", &o).unwrap();
        assert_eq!(cfg.train.buffer_size, 50);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("epochs = 3", "epochs"),
            ("[train]\nlr = 0.1", "lr"),
            ("[stream]\ndomains = 3", "domains"),
            ("[train.weights]\ngamma = 1.0", "gamma"),
        ] {
            let err = ExperimentConfig::from_toml(text, &Overrides::default()).unwrap_err();
            assert!(matches!(err, CliError::Config(_)));
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn buffer_method_without_capacity_is_rejected() {
        let text = "method = \"dare++\"\n[train]\nbuffer_size = 0\n";
        let err = ExperimentConfig::from_toml(text, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("buffer_size"), "{err}");
    }

    #[test]
    fn bad_values_name_the_expected_domain() {
        let err = ExperimentConfig::from_toml("method = \"ewc\"", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
        let err = ExperimentConfig::from_toml("[train]\nbatch_size = -1", &Overrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        let err = ExperimentConfig::from_toml("seeds = [1, 1]", &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("distinct"), "{err}");
    }

    #[test]
    fn seed_echo_round_trips() {
        let cfg = ExperimentConfig::from_toml(
            "method = \"er\"\nseeds = [3, 4]\n[train]\nepochs_per_task = 2\n",
            &Overrides::default(),
        )
        .unwrap();
        let one = cfg.for_seed(4);
        let back = ExperimentConfig::from_toml(&one.to_toml().unwrap(), &Overrides::default()).unwrap();
        assert_eq!(back, one);
        assert_eq!(back.train.seed, 4);
    }
}
