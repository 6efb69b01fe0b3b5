//! Experiment configuration files (TOML).
//!
//! ```toml
//! id = "sbm"
//! out = "runs/sbm"
//! seeds = [0, 1, 2]
//! ablations = ["full", "two"]
//! train_frac = 0.1
//!
//! [dataset.synthetic]
//! n = 500
//! # ... remaining SyntheticSpec fields
//!
//! [sweep]
//! p = [0.4, 1.0]
//!
//! [pipeline]
//! epochs = 50
//! ```
//!
//! Unknown keys are rejected with an error that names them. Relative
//! dataset and output paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, load_graph, make_splits, Graph, SyntheticSpec};
use crate::pipeline::{Ablation, PipelineConfig};

/// Either three files in the loader's format or a synthetic generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

pub enum DatasetSource<'a> {
    Files { edges: &'a Path, features: &'a Path, labels: &'a Path },
    Synthetic(&'a SyntheticSpec),
}

impl DatasetConfig {
    pub fn source(&self) -> Result<DatasetSource<'_>> {
        match (&self.edges, &self.features, &self.labels, &self.synthetic) {
            (None, None, None, Some(s)) => Ok(DatasetSource::Synthetic(s)),
            (Some(e), Some(f), Some(l), None) => Ok(DatasetSource::Files { edges: e, features: f, labels: l }),
            (None, None, None, None) => Err(Error::Config("dataset needs edges/features/labels or a synthetic section".into())),
            (_, _, _, Some(_)) => Err(Error::Config("dataset lists both files and a synthetic section".into())),
            _ => Err(Error::Config("dataset files need all of edges, features and labels".into())),
        }
    }

    /// Builds the graph for one seed. Synthetic graphs are redrawn per seed
    /// (generator seed = `synthetic.seed + seed`); file graphs are fixed.
    pub fn load(&self, seed: u64) -> Result<Graph> {
        match self.source()? {
            DatasetSource::Files { edges, features, labels } => load_graph(edges, features, labels),
            DatasetSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                spec.seed = spec.seed.wrapping_add(seed);
                generate_synthetic(&spec)
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.edges, &mut self.features, &mut self.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Sweep axes; an empty list means the single value from `[pipeline]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// One (p, α, γ) grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub p: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Ablations run by `sweep`; `ablate` always runs all five.
    #[serde(default = "default_ablations")]
    pub ablations: Vec<Ablation>,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_ratio")]
    pub val_test_ratio: (usize, usize),
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_id() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_ablations() -> Vec<Ablation> {
    vec![Ablation::Full]
}
fn default_train_frac() -> f64 {
    0.01
}
fn default_ratio() -> (usize, usize) {
    (1, 2)
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve(base);
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.ablations.is_empty() {
            return Err(Error::Config("ablations must not be empty".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac = {} must lie in (0, 1)", self.train_frac)));
        }
        self.dataset.source()?;
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        for cell in self.cells() {
            let mut c = self.pipeline.clone();
            c.heterophilic_fraction = cell.p;
            c.alpha = cell.alpha;
            c.gamma = cell.gamma;
            c.validate()?;
        }
        Ok(())
    }

    /// Grid points in p-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let ps = or(&self.sweep.p, self.pipeline.heterophilic_fraction);
        let alphas = or(&self.sweep.alpha, self.pipeline.alpha);
        let gammas = or(&self.sweep.gamma, self.pipeline.gamma);
        let mut cells = Vec::new();
        for &p in &ps {
            for &alpha in &alphas {
                for &gamma in &gammas {
                    cells.push(Cell { p, alpha, gamma });
                }
            }
        }
        cells
    }

    /// Graph of `seed` with its train/val/test split.
    pub fn graph(&self, seed: u64) -> Result<Graph> {
        let g = self.dataset.load(seed)?;
        let splits = make_splits(&g, self.train_frac, self.val_test_ratio, seed)?;
        g.with_splits(splits)
    }

    /// Pipeline configuration of one run.
    pub fn run_config(&self, seed: u64, ablation: Ablation, cell: Cell) -> PipelineConfig {
        let mut c = self.pipeline.clone();
        c.seed = seed;
        c.ablation = ablation;
        c.heterophilic_fraction = cell.p;
        c.alpha = cell.alpha;
        c.gamma = cell.gamma;
        c
    }
}
