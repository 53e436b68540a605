//! Library half of the `fedlatent` command-line tool.
//!
//! `run` writes `metrics.csv` (streamed round by round) and, only after the
//! whole run succeeds, `run.json` with the resolved configuration and a final
//! summary. `compare` reads two run directories and reports how the second
//! run fares against the first.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use fedlatent::config::{DatasetSource, PartitionConfig};
use fedlatent::data::SyntheticConfig;
use fedlatent::report::{self, Comparison, MetricsWriter, RunStats};
use fedlatent::{RunConfig, StrategyConfig, StrategyKind};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const COMPARE_FILE: &str = "compare.json";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Aggregation strategy: fedavg, fedprox, scaffold, sgdm, fednova, fedbabu.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<StrategyKind>,
    /// Enable contribution normalization (true/false).
    #[arg(long, value_parser = clap::builder::BoolishValueParser::new())]
    pub normalize: Option<bool>,
    /// Softmax temperature for contribution factors.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Dirichlet concentration; switches the partitioner to Dirichlet.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: fedlatent::Error| e.to_string())
}

/// Synthetic benchmark used when no config file is given.
pub fn default_dataset() -> DatasetSource {
    DatasetSource::Synthetic(SyntheticConfig { classes: 10, dims: 32, per_class: 500, spread: 3.0 })
}

/// Reads the config file (if any), applies the overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse_unvalidated(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => {
            let Some(kind) = overrides.strategy else {
                bail!("without --config, --strategy is required");
            };
            RunConfig::new(default_dataset(), StrategyConfig::new(kind))
        }
    };
    apply_overrides(&mut cfg, overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(kind) = o.strategy {
        cfg.strategy.kind = kind;
    }
    if let Some(normalize) = o.normalize {
        cfg.normalize = normalize;
    }
    if let Some(t) = o.temperature {
        cfg.temperature = t;
    }
    if let Some(alpha) = o.alpha {
        match &mut cfg.partition {
            PartitionConfig::Dirichlet { alpha: a, .. } => *a = alpha,
            other => *other = PartitionConfig::dirichlet(alpha),
        }
    }
    if let Some(clients) = o.clients {
        cfg.clients = clients;
    }
    if let Some(rounds) = o.rounds {
        cfg.rounds = rounds;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out = Some(out.clone());
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<'a> {
    pub config: &'a RunConfig,
    pub summary: Option<RunStats>,
}

/// Executes a run into `out_dir`.
///
/// Any stale `run.json` is removed first, so the file exists only if this run
/// completed.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<Option<RunStats>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let run_file = out_dir.join(RUN_FILE);
    if run_file.exists() {
        fs::remove_file(&run_file).with_context(|| format!("removing stale {}", run_file.display()))?;
    }
    let mut writer = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let reports = fedlatent::run_experiment(cfg, |r| writer.write_report(r))?;
    writer.finish()?;

    let series: Vec<(u64, f64)> = reports.iter().map(|r| (r.round, r.accuracy)).collect();
    let summary = series.last().and_then(|&(_, last)| RunStats::from_series(&series, last));
    let record = RunRecord { config: cfg, summary: summary.clone() };
    let json = serde_json::to_string_pretty(&record)?;
    fs::write(&run_file, json + "\n").with_context(|| format!("writing {}", run_file.display()))?;
    Ok(summary)
}

/// Compares run B against run A and writes `compare.json` to `out`.
pub fn compare(a_dir: &Path, b_dir: &Path, threshold: Option<f64>, out: &Path) -> Result<Comparison> {
    let a = report::read_metrics(&a_dir.join(METRICS_FILE))?;
    let b = report::read_metrics(&b_dir.join(METRICS_FILE))?;
    let comparison = report::compare(&a, &b, threshold)?;
    let json = serde_json::to_string_pretty(&comparison)?;
    fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    Ok(comparison)
}

/// Human-readable comparison summary.
pub fn format_comparison(c: &Comparison, a_name: &str, b_name: &str) -> String {
    let rtt = |r: Option<u64>| r.map_or_else(|| "never".to_string(), |r| r.to_string());
    let mut s = String::new();
    s += &format!("{:<28}{:>12}{:>12}{:>12}\n", "", "A", "B", "B - A");
    s += &format!(
        "{:<28}{:>12.4}{:>12.4}{:>+12.4}\n",
        "final accuracy", c.a.final_accuracy, c.b.final_accuracy, c.final_delta
    );
    s += &format!(
        "{:<28}{:>12.4}{:>12.4}{:>+12.4}\n",
        "best accuracy", c.a.best_accuracy, c.b.best_accuracy, c.best_delta
    );
    s += &format!("{:<28}{:>12}{:>12}\n", "best round", c.a.best_round, c.b.best_round);
    s += &format!(
        "{:<28}{:>12}{:>12}\n",
        format!("rounds to {:.4}", c.threshold),
        rtt(c.a.rounds_to_threshold),
        rtt(c.b.rounds_to_threshold)
    );
    s += &format!("A = {a_name}\nB = {b_name}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_switches_a_label_split_to_dirichlet() {
        let mut cfg = RunConfig::new(default_dataset(), StrategyConfig::new(StrategyKind::FedAvg));
        cfg.partition = PartitionConfig::LabelSplit { groups: vec![vec![0], vec![1]] };
        apply_overrides(&mut cfg, &Overrides { alpha: Some(0.1), ..Overrides::default() });
        assert_eq!(cfg.partition, PartitionConfig::dirichlet(0.1));
    }

    #[test]
    fn overrides_leave_unset_fields_alone() {
        let mut cfg = RunConfig::new(default_dataset(), StrategyConfig::new(StrategyKind::FedAvg));
        let before = cfg.clone();
        apply_overrides(&mut cfg, &Overrides::default());
        assert_eq!(cfg, before);
        apply_overrides(
            &mut cfg,
            &Overrides { strategy: Some(StrategyKind::FedNova), seed: Some(9), ..Overrides::default() },
        );
        assert_eq!(cfg.strategy.kind, StrategyKind::FedNova);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.rounds, before.rounds);
    }

    #[test]
    fn flags_alone_use_the_default_dataset() {
        let o = Overrides { strategy: Some(StrategyKind::Sgdm), rounds: Some(5), ..Overrides::default() };
        let cfg = load_config(None, &o).unwrap();
        assert_eq!(cfg.dataset, default_dataset());
        assert_eq!(cfg.rounds, 5);
        assert!(load_config(None, &Overrides::default()).is_err());
    }
}
