//! Experiment orchestration: every (seed × cell × ablation) run of a config,
//! with `metrics.csv`, per-run JSON and metric-vs-p SVG plots in the output
//! directory.
//!
//! Runs of one seed and one (α, γ) pair share a [`Session`], so detection,
//! pretraining and the generator are fitted once per pair. Ablations that
//! ignore the plan do not depend on p and are trained once per session.
//! Failed runs are logged and reported; completed rows are always written.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Cell, ExperimentConfig};
use crate::error::{Error, Result};
use crate::pipeline::{Ablation, RunResult, Session};
use crate::plot::{line_chart, Series};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub p: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub macro_f1: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub seed: u64,
    pub ablation: Ablation,
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
    pub out: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failures.is_empty())
    }
}

fn run_file_name(r: &RunResult) -> String {
    format!("{}-seed{}-p{}-alpha{}-gamma{}.json", r.ablation, r.seed, r.p, r.alpha, r.gamma)
}

fn row(id: &str, r: &RunResult) -> Result<MetricsRow> {
    let m = r
        .metrics
        .test
        .ok_or_else(|| Error::UndefinedMetric("test split metrics are undefined".into()))?;
    Ok(MetricsRow {
        experiment_id: id.to_string(),
        seed: r.seed,
        ablation: r.ablation,
        p: r.p,
        alpha: r.alpha,
        gamma: r.gamma,
        macro_f1: m.macro_f1,
        auc_roc: m.auc_roc,
        auc_pr: m.auc_pr,
        wall_clock_s: r.wall_clock_s,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "experiment_id",
            "seed",
            "ablation",
            "p",
            "alpha",
            "gamma",
            "macro_f1",
            "auc_roc",
            "auc_pr",
            "wall_clock_s",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        k => Error::InvalidArgument(format!("csv: {k:?}")),
    }
}

/// Runs `ablations` over every seed and cell of `cfg`, writing artifacts
/// under `cfg.out`. Returns an error only when the output directory is
/// unusable; per-run failures land in [`Outcome::failures`].
pub fn run(cfg: &ExperimentConfig, ablations: &[Ablation]) -> Result<Outcome> {
    let runs_dir = cfg.out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let csv_path = cfg.out.join(METRICS_FILE);
    let cells = cfg.cells();
    let mut outcome = Outcome {
        out: cfg.out.clone(),
        ..Outcome::default()
    };
    write_metrics_csv(&csv_path, &outcome.rows)?;

    for &seed in &cfg.seeds {
        let graph = match cfg.graph(seed) {
            Ok(g) => g,
            Err(e) => {
                log::error!("seed {seed}: dataset unavailable: {e}");
                for &cell in &cells {
                    for &ablation in ablations {
                        outcome.failures.push(Failure { seed, ablation, cell, error: e.to_string() });
                    }
                }
                continue;
            }
        };
        let mut sessions: HashMap<(u64, u64), Session<'_>> = HashMap::new();
        let mut plan_free: HashMap<((u64, u64), Ablation), RunResult> = HashMap::new();
        for &cell in &cells {
            let key = (cell.alpha.to_bits(), cell.gamma.to_bits());
            for &ablation in ablations {
                let result = (|| -> Result<RunResult> {
                    if !ablation.uses_plan() {
                        if let Some(r) = plan_free.get(&(key, ablation)) {
                            return Ok(RunResult { p: cell.p, ..r.clone() });
                        }
                    }
                    if !sessions.contains_key(&key) {
                        let base = cfg.run_config(seed, ablation, cell);
                        sessions.insert(key, Session::new(&graph, base)?);
                    }
                    let session = sessions.get_mut(&key).expect("inserted");
                    let (r, _) = session.run(ablation, cell.p)?;
                    if !ablation.uses_plan() {
                        plan_free.insert((key, ablation), r.clone());
                    }
                    Ok(r)
                })();
                match result.and_then(|r| {
                    std::fs::write(runs_dir.join(run_file_name(&r)), r.to_json()?)?;
                    row(&cfg.id, &r)
                }) {
                    Ok(row) => {
                        log::info!(
                            "seed {seed} {ablation} p={} alpha={} gamma={}: macro-F1 {:.4}",
                            cell.p,
                            cell.alpha,
                            cell.gamma,
                            row.macro_f1
                        );
                        outcome.rows.push(row);
                        write_metrics_csv(&csv_path, &outcome.rows)?;
                    }
                    Err(e) => {
                        log::error!("seed {seed} {ablation} p={} alpha={} gamma={}: {e}", cell.p, cell.alpha, cell.gamma);
                        outcome.failures.push(Failure { seed, ablation, cell, error: e.to_string() });
                    }
                }
            }
        }
    }
    write_plots(&cfg.out, &outcome.rows)?;
    Ok(outcome)
}

/// Per-series mean over seeds at each p.
pub fn mean_by_p(rows: &[MetricsRow], metric: fn(&MetricsRow) -> f64) -> Vec<Series> {
    let multi_cell = {
        let mut ag: Vec<(u64, u64)> = rows.iter().map(|r| (r.alpha.to_bits(), r.gamma.to_bits())).collect();
        ag.sort_unstable();
        ag.dedup();
        ag.len() > 1
    };
    let mut acc: BTreeMap<(Ablation, u64, u64), BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.ablation, r.alpha.to_bits(), r.gamma.to_bits()))
            .or_default()
            .entry(r.p.to_bits())
            .or_insert((0.0, 0));
        e.0 += metric(r);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((ab, a, g), pts)| {
            let label = if multi_cell {
                format!("{ab} a={} g={}", f64::from_bits(a), f64::from_bits(g))
            } else {
                ab.to_string()
            };
            let mut points: Vec<(f64, f64)> = pts.into_iter().map(|(p, (s, n))| (f64::from_bits(p), s / n as f64)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

fn write_plots(out: &Path, rows: &[MetricsRow]) -> Result<()> {
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir)?;
    let metrics: [(&str, &str, fn(&MetricsRow) -> f64); 3] = [
        ("macro_f1", "macro-F1", |r| r.macro_f1),
        ("auc_roc", "AUC-ROC", |r| r.auc_roc),
        ("auc_pr", "AUC-PR", |r| r.auc_pr),
    ];
    for (file, label, f) in metrics {
        let svg = line_chart(&format!("{label} vs heterophilic fraction p"), "p", label, &mean_by_p(rows, f));
        std::fs::write(dir.join(format!("{file}_vs_p.svg")), svg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ab: Ablation, seed: u64, p: f64, f1: f64) -> MetricsRow {
        MetricsRow {
            experiment_id: "x".into(),
            seed,
            ablation: ab,
            p,
            alpha: 0.6,
            gamma: 1.1,
            macro_f1: f1,
            auc_roc: 0.5,
            auc_pr: 0.1,
            wall_clock_s: 0.25,
        }
    }

    #[test]
    fn csv_round_trip_keeps_header_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        write_metrics_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            "experiment_id,seed,ablation,p,alpha,gamma,macro_f1,auc_roc,auc_pr,wall_clock_s"
        );
        let rows = vec![sample(Ablation::Full, 0, 1.0, 0.1 + 0.2), sample(Ablation::Two, 1, 0.4, 2.0 / 3.0)];
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("experiment_id,seed,ablation"));
    }

    #[test]
    fn series_average_over_seeds() {
        let rows = vec![
            sample(Ablation::Full, 0, 1.0, 0.8),
            sample(Ablation::Full, 1, 1.0, 0.6),
            sample(Ablation::Full, 0, 0.4, 0.5),
            sample(Ablation::Two, 0, 1.0, 0.3),
        ];
        let s = mean_by_p(&rows, |r| r.macro_f1);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "full");
        assert_eq!(s[0].points, vec![(0.4, 0.5), (1.0, 0.7)]);
    }
}
