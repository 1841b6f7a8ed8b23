//! Run telemetry: the CSV record stream, run manifests, and the token-cost
//! estimator.
//!
//! Floats are serialized with 17 significant decimal digits so that
//! `parse(write(records)) == records` exactly and replayed runs produce
//! byte-identical files. Output is UTF-8 with LF line endings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::advantage::NormalizationMode;
use crate::core::AgentId;
use crate::trainer::{AgentRecord, IterationRecord, TrainState};

pub const RECORD_HEADER: &str =
    "iter,mode,agent,mu_k,sigma_k,y_k_size,grad_norm,multiplier,group_mu,group_sigma,mean_reward";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no price for model {0:?}")]
    UnpricedModel(String),
    #[error("malformed telemetry file: {0}")]
    Parse(String),
}

/// Price per million tokens per model id, applied to all tokens alike.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriceTable {
    pub per_million: BTreeMap<String, f64>,
}

impl PriceTable {
    pub fn set(&mut self, model: impl Into<String>, price: f64) {
        self.per_million.insert(model.into(), price);
    }
}

/// Total cost of the given token totals: `Σ tokens × price / 1e6`.
pub fn cost_estimate(
    token_counts: &BTreeMap<String, u64>,
    prices: &PriceTable,
) -> Result<f64, TelemetryError> {
    let mut total = 0.0;
    for (model, tokens) in token_counts {
        let price = prices
            .per_million
            .get(model)
            .ok_or_else(|| TelemetryError::UnpricedModel(model.clone()))?;
        total += *tokens as f64 * price / 1e6;
    }
    Ok(total)
}

/// 17-significant-digit decimal form; round-trips through `f64::from_str`
/// exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_float(s: &str) -> Result<f64, TelemetryError> {
    s.parse::<f64>()
        .map_err(|e| TelemetryError::Parse(format!("bad float {s:?}: {e}")))
}

fn parse_int(s: &str) -> Result<usize, TelemetryError> {
    s.parse::<usize>()
        .map_err(|e| TelemetryError::Parse(format!("bad integer {s:?}: {e}")))
}

/// Renders the record stream as CSV, one row per (iteration, agent).
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::new();
    out.push_str(RECORD_HEADER);
    out.push('\n');
    for record in records {
        for agent in &record.per_agent {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                record.iteration,
                record.mode.token(),
                agent.agent,
                format_float(agent.mu_k),
                format_float(agent.sigma_k),
                agent.y_k_size,
                format_float(agent.grad_norm),
                format_float(agent.multiplier),
                format_float(record.group_mu),
                format_float(record.group_sigma),
                format_float(record.mean_reward),
            );
        }
    }
    out
}

/// Writes the CSV stream to `path`.
pub fn write_records(records: &[IterationRecord], path: &Path) -> Result<(), TelemetryError> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Parses a file written by [`write_records`] back into records.
pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>, TelemetryError> {
    let text = fs::read_to_string(path)?;
    parse_records(&text)
}

pub fn parse_records(text: &str) -> Result<Vec<IterationRecord>, TelemetryError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORD_HEADER => {}
        other => {
            return Err(TelemetryError::Parse(format!(
                "unexpected header {other:?}"
            )))
        }
    }
    let mut records: Vec<IterationRecord> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(TelemetryError::Parse(format!(
                "expected 11 fields, got {} in {line:?}",
                fields.len()
            )));
        }
        let iteration = parse_int(fields[0])?;
        let mode = NormalizationMode::parse(fields[1])
            .ok_or_else(|| TelemetryError::Parse(format!("unknown mode {:?}", fields[1])))?;
        let agent = AgentRecord {
            agent: AgentId(parse_int(fields[2])?),
            mu_k: parse_float(fields[3])?,
            sigma_k: parse_float(fields[4])?,
            y_k_size: parse_int(fields[5])?,
            grad_norm: parse_float(fields[6])?,
            multiplier: parse_float(fields[7])?,
        };
        let group_mu = parse_float(fields[8])?;
        let group_sigma = parse_float(fields[9])?;
        let mean_reward = parse_float(fields[10])?;
        match records.last_mut() {
            Some(last) if last.iteration == iteration => last.per_agent.push(agent),
            _ => records.push(IterationRecord {
                iteration,
                mode,
                per_agent: vec![agent],
                group_mu,
                group_sigma,
                mean_reward,
            }),
        }
    }
    Ok(records)
}

/// Writes the run manifest: config echo, worker-group assignments, per-model
/// token totals, prices, and cumulative counters.
pub fn write_manifest(
    state: &TrainState,
    prices: &PriceTable,
    path: &Path,
) -> Result<(), TelemetryError> {
    let cfg = &state.config;
    let mut out = String::new();
    let _ = writeln!(out, "seed = {}", cfg.seed);
    let _ = writeln!(out, "topology = {}", cfg.env.topology.token());
    let _ = writeln!(out, "normalization = {}", cfg.normalization_mode.token());
    let _ = writeln!(out, "agent_count = {}", cfg.agent_count);
    let _ = writeln!(out, "sharing = {}", cfg.sharing);
    let _ = writeln!(out, "group_size = {}", cfg.group_size);
    let _ = writeln!(out, "iterations = {}", cfg.iterations);
    let _ = writeln!(out, "tasks_per_iteration = {}", cfg.tasks_per_iteration);
    for wg in &state.worker_groups {
        let agents: Vec<String> = wg.assigned_agents.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(out, "wg.{}.model = {}", wg.wg_id, wg.model_id);
        let _ = writeln!(out, "wg.{}.agents = {}", wg.wg_id, agents.join(" "));
    }
    for (model, tokens) in &state.token_totals {
        let _ = writeln!(out, "tokens.{model} = {tokens}");
    }
    for (model, price) in &prices.per_million {
        let _ = writeln!(out, "price.{model} = {}", format_float(*price));
    }
    let _ = writeln!(
        out,
        "advantage_fallback_steps = {}",
        state.fallback_steps_total
    );
    fs::write(path, out)?;
    Ok(())
}

/// Token totals and prices parsed from a manifest, for the cost subcommand.
pub fn read_manifest_costs(
    path: &Path,
) -> Result<(BTreeMap<String, u64>, PriceTable), TelemetryError> {
    let text = fs::read_to_string(path)?;
    let mut tokens = BTreeMap::new();
    let mut prices = PriceTable::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some(model) = key.strip_prefix("tokens.") {
            let count = value
                .parse::<u64>()
                .map_err(|e| TelemetryError::Parse(format!("bad token count {value:?}: {e}")))?;
            tokens.insert(model.to_string(), count);
        } else if let Some(model) = key.strip_prefix("price.") {
            prices.set(model, parse_float(value)?);
        }
    }
    Ok((tokens, prices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(iteration: usize, agents: usize) -> IterationRecord {
        IterationRecord {
            iteration,
            mode: NormalizationMode::AgentMeanAgentStd,
            per_agent: (1..=agents)
                .map(|k| AgentRecord {
                    agent: AgentId(k),
                    mu_k: 0.1 * k as f64 + 1.0 / 3.0,
                    sigma_k: 0.25,
                    y_k_size: 3 * k,
                    grad_norm: 0.017 * k as f64,
                    multiplier: 1.0 + k as f64 / 7.0,
                })
                .collect(),
            group_mu: 2.0 / 3.0,
            group_sigma: 0.4714,
            mean_reward: 0.625,
        }
    }

    #[test]
    fn one_million_tokens_at_thirty_cents() {
        let mut prices = PriceTable::default();
        prices.set("big", 0.30);
        let tokens = BTreeMap::from([("big".to_string(), 1_000_000u64)]);
        assert_relative_eq!(cost_estimate(&tokens, &prices).unwrap(), 0.30, epsilon = 1e-12);
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let mut prices = PriceTable::default();
        prices.set("big", 0.30);
        let tokens = BTreeMap::from([("big".to_string(), 0u64)]);
        assert_eq!(cost_estimate(&tokens, &prices).unwrap(), 0.0);
    }

    #[test]
    fn mixed_model_costs_add_up() {
        let mut prices = PriceTable::default();
        prices.set("big", 0.30);
        prices.set("small", 0.06);
        let tokens = BTreeMap::from([
            ("big".to_string(), 2_000_000u64),
            ("small".to_string(), 5_000_000u64),
        ]);
        assert_relative_eq!(cost_estimate(&tokens, &prices).unwrap(), 0.90, epsilon = 1e-12);
    }

    #[test]
    fn unpriced_model_is_rejected() {
        let prices = PriceTable::default();
        let tokens = BTreeMap::from([("mystery".to_string(), 5u64)]);
        assert!(matches!(
            cost_estimate(&tokens, &prices),
            Err(TelemetryError::UnpricedModel(m)) if m == "mystery"
        ));
    }

    #[test]
    fn empty_records_write_header_only() {
        let csv = records_to_csv(&[]);
        assert_eq!(csv, format!("{RECORD_HEADER}\n"));
    }

    #[test]
    fn row_count_is_iterations_times_agents() {
        let records = vec![record(0, 3), record(1, 3)];
        let csv = records_to_csv(&records);
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let records = vec![record(0, 3), record(1, 3), record(2, 3)];
        let parsed = parse_records(&records_to_csv(&records)).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn float_format_round_trips_awkward_values() {
        for v in [
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            -0.0,
            1e308,
            0.1 + 0.2,
            25.0 / 7.0,
        ] {
            let s = format_float(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "value {v} via {s}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let records = vec![record(0, 2)];
        assert_eq!(records_to_csv(&records), records_to_csv(&records));
    }

    #[test]
    fn manifest_costs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(
            &path,
            "seed = 1\ntokens.big = 2000000\ntokens.small = 5000000\nprice.big = 0.30\nprice.small = 0.06\n",
        )
        .unwrap();
        let (tokens, prices) = read_manifest_costs(&path).unwrap();
        assert_relative_eq!(cost_estimate(&tokens, &prices).unwrap(), 0.90, epsilon = 1e-12);
    }
}
