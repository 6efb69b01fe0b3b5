//! Attributed graphs: loading, synthetic generation, splits and the
//! fixed-length neighbor sequences fed to the pointer detector.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

/// Per-node split assignment. One entry per node, so the train, val and
/// test masks are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    assignment: Vec<Split>,
}

impl Splits {
    pub fn unlabeled(n: usize) -> Self {
        Self {
            assignment: vec![Split::Unlabeled; n],
        }
    }

    pub fn from_assignment(assignment: Vec<Split>) -> Self {
        Self { assignment }
    }

    pub fn get(&self, v: NodeId) -> Split {
        self.assignment[v]
    }

    pub fn mask(&self, split: Split) -> Vec<bool> {
        self.assignment.iter().map(|&s| s == split).collect()
    }

    pub fn nodes(&self, split: Split) -> Vec<NodeId> {
        (0..self.assignment.len()).filter(|&v| self.assignment[v] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.iter().filter(|&&s| s == split).count()
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    edges: Vec<(NodeId, NodeId)>,
    neighbors: Vec<Vec<NodeId>>,
    features: Tensor,
    labels: Vec<u8>,
    splits: Splits,
}

impl Graph {
    /// Builds a validated graph. Edges may repeat or come in either
    /// direction; self-loops are rejected.
    pub fn new(features: Tensor, labels: Vec<u8>, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidGraph(format!("label {bad} not in {{0,1}}")));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for id in [a, b] {
                if id >= n {
                    return Err(Error::DanglingNode { id, n });
                }
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            edges,
            neighbors,
            features,
            labels,
            splits: Splits::unlabeled(n),
        })
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        if splits.assignment.len() != self.n() {
            return Err(Error::InvalidGraph("split assignment length differs from node count".into()));
        }
        self.splits = splits;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected edges as `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.neighbors[v].len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Mean degree, `2|E| / n`.
    pub fn average_degree(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        2.0 * self.edges.len() as f64 / self.n() as f64
    }

    /// Default sequence length: the mean degree rounded to the nearest
    /// integer, at least 1.
    pub fn default_seq_len(&self) -> usize {
        (self.average_degree().round() as usize).max(1)
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[NodeId]) -> Result<Self> {
        let n = self.n();
        let h = self.feature_dim();
        let mut feats = vec![0.0; n * h];
        let mut labels = vec![0; n];
        let mut assignment = vec![Split::Unlabeled; n];
        for v in 0..n {
            feats[perm[v] * h..(perm[v] + 1) * h].copy_from_slice(self.features.row(v));
            labels[perm[v]] = self.labels[v];
            assignment[perm[v]] = self.splits.get(v);
        }
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b]));
        Graph::new(Tensor::matrix(n, h, feats)?, labels, edges)?.with_splits(Splits::from_assignment(assignment))
    }

    /// Writes `edges.tsv`, `features.csv` and `labels.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut edges = String::from("# src\tdst\n");
        for &(a, b) in &self.edges {
            let _ = writeln!(edges, "{a}\t{b}");
        }
        std::fs::write(dir.join("edges.tsv"), edges)?;
        let mut feats = String::new();
        for v in 0..self.n() {
            let row: Vec<String> = self.features.row(v).iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(feats, "{}", row.join(","));
        }
        std::fs::write(dir.join("features.csv"), feats)?;
        let labels: String = self.labels.iter().map(|y| format!("{y}\n")).collect();
        std::fs::write(dir.join("labels.csv"), labels)?;
        Ok(())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads a graph from a TSV edge list, a CSV feature matrix and a CSV label
/// column. Node ids are 0-based row indices of the feature file.
pub fn load_graph(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(feature_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in data_lines(&text) {
        let row = l
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(feature_path, line, format!("bad feature value: {e}")))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    feature_path,
                    line,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(feature_path, line, "non-finite feature"));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(feature_path, 0, "no feature rows"));
    }
    let features = Tensor::from_rows(&rows)?;

    let text = std::fs::read_to_string(label_path)?;
    let mut labels = Vec::new();
    for (line, l) in data_lines(&text) {
        match l {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => return Err(parse_err(label_path, line, format!("label {other:?} is not 0 or 1"))),
        }
    }
    if labels.len() != features.rows() {
        return Err(Error::InvalidGraph(format!(
            "{} has {} rows but {} has {}",
            feature_path.display(),
            features.rows(),
            label_path.display(),
            labels.len()
        )));
    }

    let text = std::fs::read_to_string(edge_path)?;
    let mut edges = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut it = l.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(edge_path, line, "expected \"src<TAB>dst\""));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| parse_err(edge_path, line, format!("bad node id {s:?}: {e}")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        for id in [a, b] {
            if id >= labels.len() {
                return Err(parse_err(
                    edge_path,
                    line,
                    format!("{}", Error::DanglingNode { id, n: labels.len() }),
                ));
            }
        }
        if a != b {
            edges.push((a, b));
        }
    }
    Graph::new(features, labels, edges)
}

/// Parameters of the planted two-block generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub anomaly_rate: f64,
    pub feature_dim: usize,
    pub mean_normal: Vec<f64>,
    pub mean_anomaly: Vec<f64>,
    pub feature_std: f64,
    pub intra_normal_p: f64,
    pub intra_anomaly_p: f64,
    pub cross_p: f64,
    /// Nodes split into this many communities. `0` and `1` both mean a
    /// single block.
    #[serde(default)]
    pub communities: usize,
    /// Std of the per-community feature offset. All edges stay inside a
    /// community; an anomaly links inside one community but carries the
    /// offset of another, so it resembles some normal community globally
    /// while contrasting with its own neighbors.
    #[serde(default)]
    pub community_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let h = 8;
        Self {
            n: 500,
            anomaly_rate: 0.05,
            feature_dim: h,
            mean_normal: (0..h).map(|k| f64::from(u8::from(k < h / 2))).collect(),
            mean_anomaly: (0..h).map(|k| f64::from(u8::from(k >= h / 2))).collect(),
            feature_std: 1.0,
            intra_normal_p: 0.01,
            intra_anomaly_p: 0.0,
            cross_p: 0.01,
            communities: 0,
            community_std: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The community benchmark: ten communities, contextual anomalies whose
    /// features are drawn near a foreign community.
    pub fn community_benchmark(n: usize, anomaly_rate: f64, seed: u64) -> Self {
        let base = Self::default();
        let scale = 1.2;
        Self {
            n,
            anomaly_rate,
            mean_normal: base.mean_normal.iter().map(|v| v * scale).collect(),
            mean_anomaly: base.mean_anomaly.iter().map(|v| v * scale).collect(),
            intra_normal_p: 0.1,
            cross_p: 0.04,
            communities: 10,
            community_std: 3.0,
            seed,
            ..base
        }
    }

    pub fn anomaly_count(&self) -> usize {
        (self.n as f64 * self.anomaly_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n < 2 {
            return bad(format!("synthetic n = {} too small", self.n));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 1.0) {
            return bad(format!("anomaly_rate {} not in (0,1)", self.anomaly_rate));
        }
        let k = self.anomaly_count();
        if k == 0 || k == self.n {
            return bad(format!("anomaly_rate {} yields {k} anomalies of {}", self.anomaly_rate, self.n));
        }
        if self.feature_dim == 0
            || self.mean_normal.len() != self.feature_dim
            || self.mean_anomaly.len() != self.feature_dim
        {
            return bad("class means must have feature_dim entries".into());
        }
        if self.mean_normal == self.mean_anomaly {
            return bad("class means must differ in at least one coordinate".into());
        }
        if !(self.feature_std >= 0.0 && self.feature_std.is_finite()) {
            return bad(format!("feature_std {} invalid", self.feature_std));
        }
        if !(self.community_std >= 0.0 && self.community_std.is_finite()) {
            return bad(format!("community_std {} invalid", self.community_std));
        }
        if self.communities > n_normal_upper(self) {
            return bad(format!("{} communities for {} normal nodes", self.communities, n_normal_upper(self)));
        }
        for (name, p) in [
            ("intra_normal_p", self.intra_normal_p),
            ("intra_anomaly_p", self.intra_anomaly_p),
            ("cross_p", self.cross_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} not in [0,1]"));
            }
        }
        Ok(())
    }
}

fn n_normal_upper(spec: &SyntheticSpec) -> usize {
    spec.n - spec.anomaly_count().min(spec.n)
}

/// Samples a two-block stochastic block model with Gaussian class-conditional
/// features. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.n;
    let k = spec.anomaly_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0u8; n];
    for &v in &order[..k] {
        labels[v] = 1;
    }

    let normal = Normal::new(0.0, spec.feature_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let h = spec.feature_dim;
    let communities = plant_communities(spec, &labels, &mut rng)?;
    let mut feats = Vec::with_capacity(n * h);
    for (v, &y) in labels.iter().enumerate() {
        let mean = if y == 1 { &spec.mean_anomaly } else { &spec.mean_normal };
        let off = communities.as_ref().map(|c| c.offset(v, h));
        feats.extend(
            mean.iter()
                .enumerate()
                .map(|(k, m)| m + off.map_or(0.0, |o| o[k]) + normal.sample(&mut rng)),
        );
    }

    let nn = (n - k) as f64;
    let na = k as f64;
    let kc = spec.communities.max(1) as f64;
    let expected = [
        ("normal", ((nn - 1.0) * spec.intra_normal_p + na * spec.cross_p) / kc),
        ("anomaly", ((na - 1.0) * spec.intra_anomaly_p + nn * spec.cross_p) / kc),
    ];
    for (block, deg) in expected {
        if deg == 0.0 {
            log::warn!("synthetic graph: expected degree of {block} block is 0");
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = match (labels[i], labels[j]) {
                _ if communities.as_ref().is_some_and(|c| c.home[i] != c.home[j]) => 0.0,
                (0, 0) => spec.intra_normal_p,
                (1, 1) => spec.intra_anomaly_p,
                _ => spec.cross_p,
            };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::new(Tensor::matrix(n, h, feats)?, labels, edges)
}

/// Planted community structure: the community each node links inside and
/// the community whose feature offset it carries. They agree for normals;
/// an anomaly links inside one community and carries another's offset.
struct Communities {
    home: Vec<usize>,
    look: Vec<usize>,
    /// Row-major `communities × h`.
    offsets: Vec<f64>,
}

impl Communities {
    fn offset(&self, v: NodeId, h: usize) -> &[f64] {
        &self.offsets[self.look[v] * h..(self.look[v] + 1) * h]
    }
}

/// `None` for a single block, drawing nothing from `rng`.
fn plant_communities(spec: &SyntheticSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Result<Option<Communities>> {
    let k = spec.communities;
    if k <= 1 {
        return Ok(None);
    }
    let off = Normal::new(0.0, spec.community_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let offsets: Vec<f64> = (0..k * spec.feature_dim).map(|_| off.sample(rng)).collect();
    let mut normals: Vec<NodeId> = (0..labels.len()).filter(|&v| labels[v] == 0).collect();
    normals.shuffle(rng);
    let mut home = vec![0; labels.len()];
    for (i, &v) in normals.iter().enumerate() {
        home[v] = i % k;
    }
    let mut look = home.clone();
    for (v, &y) in labels.iter().enumerate() {
        if y == 1 {
            home[v] = rng.gen_range(0..k);
            look[v] = (home[v] + rng.gen_range(1..k)) % k;
        }
    }
    Ok(Some(Communities { home, look, offsets }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Keep the lowest node ids.
    #[default]
    AscendingId,
    /// Keep a uniformly random subset, seeded per target node.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSequence {
    pub target: NodeId,
    pub members: Vec<NodeId>,
    pub duplicated: Vec<bool>,
}

impl NeighborSequence {
    /// Slots holding real (non-padding) neighbors.
    pub fn real(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.members
            .iter()
            .zip(&self.duplicated)
            .enumerate()
            .filter(|(_, (_, &d))| !d)
            .map(|(slot, (&m, _))| (slot, m))
    }

    pub fn real_count(&self) -> usize {
        self.duplicated.iter().filter(|&&d| !d).count()
    }
}

/// Fixed-length 1-hop sequence for `v`: truncated when the degree exceeds
/// `len`, padded by repeating the last real neighbor when it falls short.
pub fn neighbor_sequence(g: &Graph, v: NodeId, len: usize, truncation: Truncation, seed: u64) -> Result<NeighborSequence> {
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let nbrs = g.neighbors(v);
    if nbrs.is_empty() {
        return Err(Error::InvalidArgument(format!("node {v} is isolated")));
    }
    let mut chosen: Vec<NodeId> = if nbrs.len() > len {
        match truncation {
            Truncation::AscendingId => nbrs[..len].to_vec(),
            Truncation::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut pick: Vec<NodeId> = nbrs.choose_multiple(&mut rng, len).copied().collect();
                pick.sort_unstable();
                pick
            }
        }
    } else {
        nbrs.to_vec()
    };
    let real = chosen.len();
    let last = *chosen.last().expect("non-empty");
    chosen.resize(len, last);
    let duplicated = (0..len).map(|i| i >= real).collect();
    Ok(NeighborSequence {
        target: v,
        members: chosen,
        duplicated,
    })
}

/// Stratified split: `floor(train_frac * n)` training nodes with at least
/// one node of each class, the rest divided `val:test` with the validation
/// share rounded down.
pub fn make_splits(g: &Graph, train_frac: f64, val_test_ratio: (usize, usize), seed: u64) -> Result<Splits> {
    let n = g.n();
    let anomalies: Vec<NodeId> = (0..n).filter(|&v| g.labels()[v] == 1).collect();
    let normals: Vec<NodeId> = (0..n).filter(|&v| g.labels()[v] == 0).collect();
    if anomalies.is_empty() || normals.is_empty() {
        return Err(Error::InvalidGraph("both classes must be present to build splits".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) || val_test_ratio.0 + val_test_ratio.1 == 0 {
        return Err(Error::InvalidArgument("invalid split fractions".into()));
    }
    let train = ((train_frac * n as f64).floor() as usize).max(2);
    let train_anom = ((train * anomalies.len()) / n).clamp(1, anomalies.len().min(train - 1));
    let train_norm = (train - train_anom).min(normals.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = anomalies;
    let mut b = normals;
    a.shuffle(&mut rng);
    b.shuffle(&mut rng);

    let mut assignment = vec![Split::Unlabeled; n];
    let mut rest: Vec<NodeId> = Vec::new();
    for (i, &v) in a.iter().enumerate() {
        if i < train_anom {
            assignment[v] = Split::Train;
        } else {
            rest.push(v);
        }
    }
    for (i, &v) in b.iter().enumerate() {
        if i < train_norm {
            assignment[v] = Split::Train;
        } else {
            rest.push(v);
        }
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let (vr, tr) = val_test_ratio;
    let n_val = rest.len() * vr / (vr + tr);
    for (i, &v) in rest.iter().enumerate() {
        assignment[v] = if i < n_val { Split::Val } else { Split::Test };
    }
    Ok(Splits { assignment })
}
