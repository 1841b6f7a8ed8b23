//! Flat `key = value` run configuration files.
//!
//! The format is line-oriented with dotted keys and `#` comments; see the
//! README for the full key list. Topology-dependent defaults are resolved
//! first from `env.topology`, then every other key overrides its field, so
//! only deviations from the defaults need to be spelled out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::advantage::NormalizationMode;
use crate::core::{RunConfig, StatsScope};
use crate::orchestration::{EnvSpec, Topology};
use crate::telemetry::PriceTable;

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A parsed configuration file: the run config plus CLI-level settings.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub run: RunConfig,
    pub out_dir: PathBuf,
    pub prices: PriceTable,
    pub probe_samples: usize,
    pub verify_batches: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> ConfigFileError {
    ConfigFileError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_value<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigFileError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| parse_err(line, format!("{key}: bad value {value:?}: {e}")))
}

pub fn load_config(path: &Path) -> Result<FileConfig, ConfigFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<FileConfig, ConfigFileError> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got {line:?}")))?;
        pairs.push((line_no, key.trim().to_string(), value.trim().to_string()));
    }

    // Resolve the topology first so every other key overrides its defaults.
    let mut topology = Topology::MathLoop;
    for (line_no, key, value) in &pairs {
        if key == "env.topology" {
            topology = Topology::parse(value)
                .ok_or_else(|| parse_err(*line_no, format!("unknown topology {value:?}")))?;
        }
    }
    let mut run = RunConfig::default_for(EnvSpec::defaults(topology));
    let mut out_dir = PathBuf::from("runs");
    let mut prices = PriceTable::default();
    let mut probe_samples = 10_000usize;
    let mut verify_batches = 100usize;
    let mut agent_overrides: BTreeMap<(usize, &'static str), (usize, String)> = BTreeMap::new();

    for (line_no, key, value) in &pairs {
        let line_no = *line_no;
        match key.as_str() {
            "seed" => run.seed = parse_value(line_no, key, value)?,
            "iterations" => run.iterations = parse_value(line_no, key, value)?,
            "group_size" => run.group_size = parse_value(line_no, key, value)?,
            "tasks_per_iteration" => run.tasks_per_iteration = parse_value(line_no, key, value)?,
            "clip_epsilon" => run.clip_epsilon = parse_value(line_no, key, value)?,
            "kl_beta" => run.kl_beta = parse_value(line_no, key, value)?,
            "std_floor" => run.std_floor = parse_value(line_no, key, value)?,
            "update_epochs" => run.update_epochs = parse_value(line_no, key, value)?,
            "agent_count" => run.agent_count = parse_value(line_no, key, value)?,
            "sharing" => run.sharing = parse_value(line_no, key, value)?,
            "normalization" => {
                run.normalization_mode = NormalizationMode::parse(value).ok_or_else(|| {
                    parse_err(line_no, format!("unknown normalization mode {value:?}"))
                })?
            }
            "stats_scope" => {
                run.stats_scope = StatsScope::parse(value)
                    .ok_or_else(|| parse_err(line_no, format!("unknown stats scope {value:?}")))?
            }
            "env.topology" => {}
            "env.feature_dim" => run.env.feature_dim = parse_value(line_no, key, value)?,
            "env.action_count" => run.env.action_count = parse_value(line_no, key, value)?,
            "env.max_rounds" | "env.max_turns" => {
                run.env.max_rounds = parse_value(line_no, key, value)?
            }
            "env.invalid_action_penalty" => {
                run.env.invalid_action_penalty = parse_value(line_no, key, value)?
            }
            "env.skew" => run.env.skew = parse_value(line_no, key, value)?,
            "env.difficulty" => run.env.difficulty = parse_value(line_no, key, value)?,
            "env.known_info_rate" => run.env.known_info_rate = parse_value(line_no, key, value)?,
            "env.reward_floor" => run.env.reward_floor = parse_value(line_no, key, value)?,
            "out_dir" => out_dir = PathBuf::from(value),
            "probe.samples" => probe_samples = parse_value(line_no, key, value)?,
            "verify.batches" => verify_batches = parse_value(line_no, key, value)?,
            _ => {
                if let Some(model) = key.strip_prefix("price.") {
                    prices.set(model, parse_value::<f64>(line_no, key, value)?);
                } else if let Some(rest) = key.strip_prefix("agents.") {
                    let (k_str, field) = rest.split_once('.').ok_or_else(|| {
                        parse_err(line_no, format!("expected agents.<k>.<field>, got {key:?}"))
                    })?;
                    let k: usize = k_str.parse().map_err(|_| {
                        parse_err(line_no, format!("bad agent index {k_str:?} in {key:?}"))
                    })?;
                    match field {
                        "model" | "lr" => {
                            let tag = if field == "model" { "model" } else { "lr" };
                            agent_overrides.insert((k, tag), (line_no, value.clone()));
                        }
                        _ => {
                            return Err(parse_err(
                                line_no,
                                format!("unknown agent field {field:?} in {key:?}"),
                            ))
                        }
                    }
                } else {
                    return Err(parse_err(line_no, format!("unknown key {key:?}")));
                }
            }
        }
    }

    // Resize per-agent lists if agent_count was overridden, then apply
    // per-agent keys. Length/env consistency is left to validate_config.
    let k = run.agent_count;
    run.model_id_per_agent.resize(k, "base-model".to_string());
    run.learning_rate_per_agent.resize(k, 1e-2);
    for ((agent, field), (line_no, value)) in &agent_overrides {
        if *agent == 0 || *agent > k {
            return Err(parse_err(
                *line_no,
                format!("agent index {agent} out of range 1..={k}"),
            ));
        }
        match *field {
            "model" => run.model_id_per_agent[agent - 1] = value.clone(),
            _ => {
                run.learning_rate_per_agent[agent - 1] =
                    parse_value(*line_no, "agents.<k>.lr", value)?
            }
        }
    }

    Ok(FileConfig {
        run,
        out_dir,
        prices,
        probe_samples,
        verify_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_topology() {
        let cfg = parse_config("env.topology = search_pipeline\n").unwrap();
        assert_eq!(cfg.run.agent_count, 3);
        assert_eq!(cfg.run.group_size, 5);
        assert_eq!(cfg.run.env.max_rounds, 4);
        assert_eq!(cfg.run.env.invalid_action_penalty, 0.01);
    }

    #[test]
    fn math_loop_defaults() {
        let cfg = parse_config("env.topology = math_loop\n").unwrap();
        assert_eq!(cfg.run.agent_count, 2);
        assert_eq!(cfg.run.group_size, 8);
        assert_eq!(cfg.run.env.invalid_action_penalty, 0.1);
    }

    #[test]
    fn dotted_keys_override_fields() {
        let text = "\
# comment
env.topology = search_pipeline
env.skew = 1.0
seed = 99
normalization = global_mean_agent_std
agents.2.lr = 0.5
agents.2.model = tiny
price.tiny = 0.06
out_dir = out/test
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.run.env.skew, 1.0);
        assert_eq!(
            cfg.run.normalization_mode,
            NormalizationMode::GlobalMeanAgentStd
        );
        assert_eq!(cfg.run.learning_rate_per_agent[1], 0.5);
        assert_eq!(cfg.run.model_id_per_agent[1], "tiny");
        assert_eq!(cfg.prices.per_million["tiny"], 0.06);
        assert_eq!(cfg.out_dir, PathBuf::from("out/test"));
    }

    #[test]
    fn max_turns_aliases_max_rounds() {
        let cfg =
            parse_config("env.topology = search_pipeline\nenv.max_turns = 6\n").unwrap();
        assert_eq!(cfg.run.env.max_rounds, 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn agent_index_out_of_range_is_rejected() {
        let err = parse_config("agents.5.lr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let err = parse_config("seed = 1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
