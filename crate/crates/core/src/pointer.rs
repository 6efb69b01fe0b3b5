//! Recurrent pointer network over 1-hop neighbor sequences, heterophily
//! degree, and the selection of neighbors to translate.
//!
//! Embeddings are row vectors, so `tanh(W [e ⊕ x])` is computed as
//! `tanh([e ⊕ x] W)` with `W` of shape `(h + d) × h`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{neighbor_sequence, Graph, NeighborSequence, NodeId, Split, Truncation};
use crate::metrics;
use crate::optim::AdamState;
use crate::tensor::{self, glorot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentCell {
    /// `s_i = tanh([s_{i-1} ⊕ x_i] W + b)`.
    #[default]
    Tanh,
    Lstm,
}

impl RecurrentCell {
    fn gates(self) -> usize {
        match self {
            RecurrentCell::Tanh => 1,
            RecurrentCell::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Softmax temperature of the cosine teacher.
    pub temperature: f64,
    /// Weight of the score-to-cosine regression term.
    pub regression_weight: f64,
    pub cell: RecurrentCell,
}

impl Default for PointerConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 200,
            lr: 0.01,
            temperature: 0.1,
            regression_weight: 5.0,
            cell: RecurrentCell::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerNet {
    pub cell: RecurrentCell,
    pub hidden: usize,
    pub input_dim: usize,
    /// One matrix per gate; the LSTM order is input, forget, output, cell.
    pub w_enc: Vec<Tensor>,
    pub b_enc: Vec<Tensor>,
    pub w_dec: Vec<Tensor>,
    pub b_dec: Vec<Tensor>,
    pub w1: Tensor,
    pub w2: Tensor,
    /// Bias inside the score `tanh`.
    pub b_score: Tensor,
    pub beta: Tensor,
}

pub(crate) struct Bound {
    pub(crate) enc: Vec<(Var, Var)>,
    pub(crate) dec: Vec<(Var, Var)>,
    pub(crate) w1: Var,
    pub(crate) w2: Var,
    pub(crate) b_score: Var,
    pub(crate) beta: Var,
}

/// Encoder states and first-step scores for a batch of sequences.
pub struct Forward {
    /// `B × L` raw scores `u¹_j`.
    pub scores: Var,
    pub states: Vec<Var>,
    decoder: (Var, Option<Var>),
}

impl PointerNet {
    pub fn new(input_dim: usize, hidden: usize, cell: RecurrentCell, rng: &mut impl Rng) -> Self {
        let mut mats = |r: usize, c: usize, k: usize| (0..k).map(|_| glorot(r, c, rng)).collect::<Vec<_>>();
        let w_enc = mats(hidden + input_dim, hidden, cell.gates());
        let b_enc = mats(1, hidden, cell.gates());
        let w_dec = mats(hidden + input_dim, hidden, cell.gates());
        let b_dec = mats(1, hidden, cell.gates());
        Self {
            cell,
            hidden,
            input_dim,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            w1: glorot(hidden, hidden, rng),
            w2: glorot(hidden, hidden, rng),
            b_score: glorot(1, hidden, rng),
            beta: glorot(hidden, 1, rng),
        }
    }

    fn bind(&self, tape: &Tape, track: bool) -> Result<Bound> {
        let b = |t: &Tensor| if track { tape.param(t) } else { tape.constant(t.clone()) };
        let pairs = |w: &[Tensor], bias: &[Tensor]| {
            w.iter().zip(bias).map(|(w, c)| Ok((b(w)?, b(c)?))).collect::<Result<Vec<_>>>()
        };
        Ok(Bound {
            enc: pairs(&self.w_enc, &self.b_enc)?,
            dec: pairs(&self.w_dec, &self.b_dec)?,
            w1: b(&self.w1)?,
            w2: b(&self.w2)?,
            b_score: b(&self.b_score)?,
            beta: b(&self.beta)?,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .w_enc
            .iter_mut()
            .chain(self.b_enc.iter_mut())
            .chain(self.w_dec.iter_mut())
            .chain(self.b_dec.iter_mut())
            .collect();
        p.extend([&mut self.w1, &mut self.w2, &mut self.b_score, &mut self.beta]);
        p
    }

    fn store_grads(&mut self, tape: &Tape, b: &Bound) {
        let enc = self.w_enc.iter_mut().zip(self.b_enc.iter_mut()).zip(&b.enc);
        let dec = self.w_dec.iter_mut().zip(self.b_dec.iter_mut()).zip(&b.dec);
        for ((w, c), &(wv, cv)) in enc.chain(dec) {
            tape.store_grad(wv, w);
            tape.store_grad(cv, c);
        }
        tape.store_grad(b.w1, &mut self.w1);
        tape.store_grad(b.w2, &mut self.w2);
        tape.store_grad(b.b_score, &mut self.b_score);
        tape.store_grad(b.beta, &mut self.beta);
    }

    fn step(&self, tape: &Tape, w: &[(Var, Var)], state: Var, cell: Option<Var>, x: Var) -> Result<(Var, Option<Var>)> {
        let inp = tape.concat_cols(&[state, x])?;
        let gate = |k: usize| tape.add_row(tape.matmul(inp, w[k].0)?, w[k].1);
        match self.cell {
            RecurrentCell::Tanh => Ok((tape.tanh(gate(0)?)?, None)),
            RecurrentCell::Lstm => {
                let i = tape.sigmoid(gate(0)?)?;
                let f = tape.sigmoid(gate(1)?)?;
                let o = tape.sigmoid(gate(2)?)?;
                let g = tape.tanh(gate(3)?)?;
                let c_prev = cell.expect("lstm carries a cell state");
                let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
                let h = tape.mul(o, tape.tanh(c)?)?;
                Ok((h, Some(c)))
            }
        }
    }

    fn scores_for(&self, tape: &Tape, b: &Bound, states: &[Var], d: Var) -> Result<Var> {
        let dw = tape.add_row(tape.matmul(d, b.w2)?, b.b_score)?;
        let cols = states
            .iter()
            .map(|&e| {
                let s = tape.add(tape.matmul(e, b.w1)?, dw)?;
                tape.matmul(tape.tanh(s)?, b.beta)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&cols)
    }

    fn check_inputs(&self, x: &Tensor, seqs: &[NeighborSequence]) -> Result<usize> {
        if x.cols() != self.input_dim || x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "pointer_encode",
                left: x.shape().to_vec(),
                right: vec![x.rows(), self.input_dim],
            });
        }
        let len = seqs.first().map(|s| s.members.len()).ok_or_else(|| {
            Error::InvalidArgument("no sequences to score".into())
        })?;
        for s in seqs {
            if s.members.len() != len {
                return Err(Error::LengthMismatch("sequences of unequal length in one batch".into()));
            }
            if s.target >= x.rows() || s.members.iter().any(|&m| m >= x.rows()) {
                return Err(Error::DanglingNode {
                    id: s.target.max(*s.members.iter().max().unwrap_or(&0)),
                    n: x.rows(),
                });
            }
        }
        Ok(len)
    }

    pub(crate) fn forward(&self, tape: &Tape, b: &Bound, x: Var, xt: &Tensor, seqs: &[NeighborSequence]) -> Result<Forward> {
        let len = self.check_inputs(xt, seqs)?;
        let batch = seqs.len();
        let zeros = || tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut state = zeros()?;
        let mut cell = match self.cell {
            RecurrentCell::Lstm => Some(zeros()?),
            RecurrentCell::Tanh => None,
        };
        let mut states = Vec::with_capacity(len);
        for j in 0..len {
            let idx: Rc<[usize]> = seqs.iter().map(|s| s.members[j]).collect::<Vec<_>>().into();
            let xj = tape.gather_rows(x, idx)?;
            (state, cell) = self.step(tape, &b.enc, state, cell, xj)?;
            states.push(state);
        }
        let targets: Rc<[usize]> = seqs.iter().map(|s| s.target).collect::<Vec<_>>().into();
        let xv = tape.gather_rows(x, targets)?;
        let decoder = self.step(tape, &b.dec, state, cell, xv)?;
        let scores = self.scores_for(tape, b, &states, decoder.0)?;
        Ok(Forward { scores, states, decoder })
    }

    /// Encoder states `e_1..e_L` for one sequence.
    pub fn encode(&self, x: &Tensor, seq: &NeighborSequence) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let b = self.bind(&tape, false)?;
        let xv = tape.constant(x.clone())?;
        let f = self.forward(&tape, &b, xv, x, std::slice::from_ref(seq))?;
        Ok(f.states.iter().map(|&s| tape.value(s).data().to_vec()).collect())
    }

    /// First-step raw scores `u¹_j` for every slot of every sequence.
    pub fn score(&self, x: &Tensor, seqs: &[NeighborSequence]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let b = self.bind(&tape, false)?;
        let xv = tape.constant(x.clone())?;
        let f = self.forward(&tape, &b, xv, x, seqs)?;
        let u = tape.value(f.scores);
        Ok((0..seqs.len()).map(|r| u.row(r).to_vec()).collect())
    }

    /// Greedy pointer decoding of the top `k` real slots of `seq`.
    ///
    /// Step `i` feeds the previously selected member to the decoder, scores
    /// all slots, masks chosen and duplicated ones and points at the argmax.
    /// Returns the selected slots in order together with each step's
    /// pointer distribution.
    pub fn decode_topk(&self, x: &Tensor, seq: &NeighborSequence, k: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let b = self.bind(&tape, false)?;
        let xv = tape.constant(x.clone())?;
        let seqs = std::slice::from_ref(seq);
        let f = self.forward(&tape, &b, xv, x, seqs)?;
        let k = k.min(seq.real_count());
        let mut mask: Vec<bool> = seq.duplicated.iter().map(|&d| !d).collect();
        let (mut d, mut c) = f.decoder;
        let mut scores = f.scores;
        let mut picked = Vec::with_capacity(k);
        let mut dists = Vec::with_capacity(k);
        for _ in 0..k {
            let p = tape.masked_softmax_rows(scores, &mask)?;
            let dist = tape.value(p).data().to_vec();
            let best = (0..dist.len())
                .filter(|&j| mask[j])
                .fold(None, |acc: Option<usize>, j| match acc {
                    Some(b) if dist[b] >= dist[j] => Some(b),
                    _ => Some(j),
                })
                .expect("k never exceeds the number of real slots");
            picked.push(best);
            dists.push(dist);
            mask[best] = false;
            if picked.len() == k {
                break;
            }
            let xc = tape.gather_rows(xv, vec![seq.members[best]].into())?;
            (d, c) = self.step(&tape, &b.dec, d, c, xc)?;
            scores = self.scores_for(&tape, &b, &f.states, d)?;
        }
        Ok((picked, dists))
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_meta(format!("{prefix}.cell"), format!("{:?}", self.cell).to_lowercase());
        for (i, w) in self.w_enc.iter().enumerate() {
            ck.put(format!("{prefix}.W_enc.{i}"), w);
            ck.put(format!("{prefix}.b_enc.{i}"), &self.b_enc[i]);
        }
        for (i, w) in self.w_dec.iter().enumerate() {
            ck.put(format!("{prefix}.W_dec.{i}"), w);
            ck.put(format!("{prefix}.b_dec.{i}"), &self.b_dec[i]);
        }
        ck.put(format!("{prefix}.W1"), &self.w1);
        ck.put(format!("{prefix}.W2"), &self.w2);
        ck.put(format!("{prefix}.b_score"), &self.b_score);
        ck.put(format!("{prefix}.beta"), &self.beta);
    }

    pub fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cell = match ck.meta(&format!("{prefix}.cell"))? {
            "tanh" => RecurrentCell::Tanh,
            "lstm" => RecurrentCell::Lstm,
            other => return Err(Error::Checkpoint(format!("unknown recurrent cell {other:?}"))),
        };
        let beta = ck.tensor(&format!("{prefix}.beta"))?.clone().into_param();
        let hidden = beta.rows();
        let input_dim = ck.tensor(&format!("{prefix}.W_enc.0"))?.rows() - hidden;
        let shape = [hidden + input_dim, hidden];
        let load = |name: &str, shape: &[usize]| {
            (0..cell.gates())
                .map(|i| ck.param(&format!("{prefix}.{name}.{i}"), shape))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            cell,
            hidden,
            input_dim,
            w_enc: load("W_enc", &shape)?,
            b_enc: load("b_enc", &[1, hidden])?,
            w_dec: load("W_dec", &shape)?,
            b_dec: load("b_dec", &[1, hidden])?,
            w1: ck.param(&format!("{prefix}.W1"), &[hidden, hidden])?,
            w2: ck.param(&format!("{prefix}.W2"), &[hidden, hidden])?,
            b_score: ck.param(&format!("{prefix}.b_score"), &[1, hidden])?,
            beta,
        })
    }
}

/// Sequences for every non-isolated node, in node order.
pub fn build_sequences(g: &Graph, len: usize, truncation: Truncation, seed: u64) -> Result<Vec<NeighborSequence>> {
    (0..g.n())
        .filter(|&v| g.degree(v) > 0)
        .map(|v| neighbor_sequence(g, v, len, truncation, seed))
        .collect()
}

/// Subtracts the column mean from every row.
pub fn center_rows(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut out = x.clone();
    out.requires_grad = false;
    for r in 0..n {
        for (o, m) in out.row_mut(r).iter_mut().zip(&mean) {
            *o -= m;
        }
    }
    out
}

/// Cosine similarity of each slot's member to the target.
pub fn teacher_similarity(x: &Tensor, seqs: &[NeighborSequence]) -> Vec<Vec<f64>> {
    seqs.iter()
        .map(|s| s.members.iter().map(|&m| tensor::cosine(x.row(s.target), x.row(m))).collect())
        .collect()
}

/// Trains the pointer network on inputs `x` to reproduce the cosine ranking,
/// measured on `teacher`, of each sequence's members to its target.
///
/// The objective is the listwise cross-entropy between the pointer
/// distribution and `softmax(cos / τ)` over real slots, plus a squared-error
/// term pulling the raw scores towards the cosines. Returns the network and
/// the per-epoch loss.
pub fn train_pointer(
    x: &Tensor,
    teacher: &Tensor,
    seqs: &[NeighborSequence],
    cfg: &PointerConfig,
    rng: &mut impl Rng,
) -> Result<(PointerNet, Vec<f64>)> {
    if !(cfg.temperature > 0.0) || cfg.hidden == 0 {
        return Err(Error::InvalidArgument("pointer temperature and hidden width must be positive".into()));
    }
    let mut net = PointerNet::new(x.cols(), cfg.hidden, cfg.cell, rng);
    if seqs.is_empty() || cfg.epochs == 0 {
        return Ok((net, Vec::new()));
    }
    let len = net.check_inputs(x, seqs)?;
    if teacher.rows() != x.rows() {
        return Err(Error::LengthMismatch(format!(
            "{} teacher rows for {} nodes",
            teacher.rows(),
            x.rows()
        )));
    }
    let batch = seqs.len();
    let cos = teacher_similarity(teacher, seqs);
    let mask: Vec<bool> = seqs.iter().flat_map(|s| s.duplicated.iter().map(|&d| !d)).collect();
    let real = mask.iter().filter(|&&m| m).count() as f64;
    let mut target = Vec::with_capacity(batch * len);
    for (s, c) in seqs.iter().zip(&cos) {
        let logits: Vec<f64> = c.iter().map(|v| v / cfg.temperature).collect();
        let t = Tensor::matrix(1, len, logits)?;
        let m: Vec<bool> = s.duplicated.iter().map(|&d| !d).collect();
        target.extend(crate::autograd::softmax_rows_values(&t, Some(&m)));
    }
    let target = Tensor::matrix(batch, len, target)?;
    let cos_t = Tensor::matrix(batch, len, cos.concat())?;
    let mask_t = Tensor::matrix(batch, len, mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;

    let mut opt = AdamState::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let b = net.bind(&tape, true)?;
        let xv = tape.constant(x.clone())?;
        let f = net.forward(&tape, &b, xv, x, seqs)?;
        let logp = tape.masked_log_softmax_rows(f.scores, &mask)?;
        let q = tape.constant(target.clone())?;
        let ce = tape.scale(tape.sum(tape.mul(logp, q)?)?, -1.0 / batch as f64)?;
        let diff = tape.sub(f.scores, tape.constant(cos_t.clone())?)?;
        let diff = tape.mul(diff, tape.constant(mask_t.clone())?)?;
        let mse = tape.scale(tape.sum(tape.mul(diff, diff)?)?, cfg.regression_weight / real)?;
        let loss = tape.add(ce, mse)?;
        let lv = tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("pointer loss {lv} at epoch {epoch} with {cfg:?}")));
        }
        trace.push(lv);
        tape.backward(loss)?;
        net.store_grads(&tape, &b);
        opt.step(&mut net.params_mut())?;
    }
    Ok((net, trace))
}

/// Scores of one node's real neighbors, duplicates dropped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredNode {
    pub node: NodeId,
    pub neighbors: Vec<NodeId>,
    pub scores: Vec<f64>,
}

pub fn scored_nodes(seqs: &[NeighborSequence], raw: &[Vec<f64>]) -> Vec<ScoredNode> {
    seqs.iter()
        .zip(raw)
        .map(|(s, u)| {
            let (neighbors, scores) = s.real().map(|(slot, m)| (m, u[slot])).unzip();
            ScoredNode {
                node: s.target,
                neighbors,
                scores,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub node: NodeId,
    pub neighbors: Vec<NodeId>,
    pub scores: Vec<f64>,
    pub h_d: f64,
    pub is_heterophilic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterophilyReport {
    pub eta: f64,
    pub alpha: f64,
    /// One entry per non-isolated node.
    pub nodes: Vec<NodeReport>,
}

impl HeterophilyReport {
    pub fn heterophilic(&self) -> impl Iterator<Item = &NodeReport> {
        self.nodes.iter().filter(|r| r.is_heterophilic)
    }

    pub fn heterophilic_count(&self) -> usize {
        self.heterophilic().count()
    }
}

/// Fraction of scores strictly below `eta`.
pub fn heterophily_degree(scores: &[f64], eta: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&u| u < eta).count() as f64 / scores.len() as f64
}

pub fn detect(scored: &[ScoredNode], eta: f64, alpha: f64) -> HeterophilyReport {
    let nodes = scored
        .iter()
        .filter(|s| !s.neighbors.is_empty())
        .map(|s| {
            let h_d = heterophily_degree(&s.scores, eta);
            NodeReport {
                node: s.node,
                neighbors: s.neighbors.clone(),
                scores: s.scores.clone(),
                h_d,
                is_heterophilic: h_d > alpha,
            }
        })
        .collect();
    HeterophilyReport { eta, alpha, nodes }
}

/// Anomaly count below which η falls back to the median score.
pub const MIN_CALIBRATION_ANOMALIES: usize = 3;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Picks η maximizing macro-F1 of the heterophilic flag against training
/// anomaly labels, over the score quantiles and the midpoints between
/// consecutive distinct quantiles; among tied maximizers the one nearest
/// the centre of their range wins.
/// Falls back to the median score when
/// fewer than [`MIN_CALIBRATION_ANOMALIES`] training anomalies are scored
/// or the search is degenerate.
pub fn calibrate_eta(scored: &[ScoredNode], g: &Graph, alpha: f64) -> Result<f64> {
    let train: Vec<&ScoredNode> = scored
        .iter()
        .filter(|s| g.splits().get(s.node) == Split::Train && !s.scores.is_empty())
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no scored nodes in the training mask".into()));
    }
    let mut all: Vec<f64> = scored.iter().flat_map(|s| s.scores.iter().copied()).collect();
    let fallback = |all: &mut Vec<f64>, why: &str| {
        let eta = median(all);
        log::warn!("eta falls back to the median score {eta:.6}: {why}");
        eta
    };
    let truth: Vec<u8> = train.iter().map(|s| g.labels()[s.node]).collect();
    let anomalies = truth.iter().filter(|&&y| y == 1).count();
    if anomalies < MIN_CALIBRATION_ANOMALIES {
        return Ok(fallback(&mut all, &format!("{anomalies} training anomalies")));
    }
    if anomalies == truth.len() {
        return Ok(fallback(&mut all, "no training normals"));
    }
    all.sort_by(f64::total_cmp);
    if all.first() == all.last() {
        return Ok(fallback(&mut all, "all scores are equal"));
    }
    let mut quantiles: Vec<f64> = (0..=100)
        .map(|k| all[((all.len() - 1) * k) / 100])
        .collect();
    quantiles.dedup();
    let mut grid = quantiles.clone();
    grid.extend(quantiles.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    grid.sort_by(f64::total_cmp);
    let f1s = grid
        .iter()
        .map(|&eta| {
            let pred: Vec<u8> = train
                .iter()
                .map(|s| u8::from(heterophily_degree(&s.scores, eta) > alpha))
                .collect();
            metrics::macro_f1(&pred, &truth)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Winner closest to the centre of the maximizing range.
    let winners: Vec<f64> = grid.iter().zip(&f1s).filter(|(_, &f)| f == best).map(|(&e, _)| e).collect();
    let centre = 0.5 * (winners[0] + winners[winners.len() - 1]);
    let eta = winners
        .iter()
        .copied()
        .min_by(|a, b| (a - centre).abs().total_cmp(&(b - centre).abs()))
        .expect("at least one maximizer");
    Ok(eta)
}

/// Per heterophilic node, the real neighbors chosen for translation,
/// lowest score first.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CounterfactualPlan {
    pub entries: BTreeMap<NodeId, Vec<NodeId>>,
}

impl CounterfactualPlan {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Number of (target, source) translations.
    pub fn translations(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.entries.iter().flat_map(|(&t, s)| s.iter().map(move |&u| (t, u)))
    }
}

/// Number of sources selected from `real` scored neighbors.
pub fn plan_size(real: usize, fraction: f64) -> usize {
    ((fraction * real as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the top `ceil(p · m)` of the `m` flagged nodes, ranked by `h_d`
/// descending with ties by node id, and selects `ceil(fraction · k)` of
/// each one's `k` scored neighbors with the lowest scores.
pub fn select_sources(report: &HeterophilyReport, fraction: f64, p: f64) -> Result<CounterfactualPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) || !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "translate fraction {fraction} and heterophilic fraction {p} must lie in (0, 1]"
        )));
    }
    let mut flagged: Vec<&NodeReport> = report.heterophilic().collect();
    flagged.sort_by(|a, b| b.h_d.total_cmp(&a.h_d).then(a.node.cmp(&b.node)));
    let keep = plan_size(flagged.len(), p);
    let mut plan = CounterfactualPlan::default();
    for r in &flagged[..keep] {
        let mut order: Vec<usize> = (0..r.neighbors.len()).collect();
        order.sort_by(|&a, &b| r.scores[a].total_cmp(&r.scores[b]).then(r.neighbors[a].cmp(&r.neighbors[b])));
        let k = plan_size(r.neighbors.len(), fraction);
        plan.entries.insert(r.node, order[..k].iter().map(|&i| r.neighbors[i]).collect());
    }
    Ok(plan)
}

/// CSV with columns `node_id,h_d,is_heterophilic,selected_sources`.
pub fn report_csv(report: &HeterophilyReport, plan: &CounterfactualPlan) -> String {
    let mut out = String::from("node_id,h_d,is_heterophilic,selected_sources\n");
    for r in &report.nodes {
        let sel = plan
            .entries
            .get(&r.node)
            .map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.node, r.h_d, r.is_heterophilic, sel);
    }
    out
}

pub fn write_report_csv(report: &HeterophilyReport, plan: &CounterfactualPlan, path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(report, plan))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Splits;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn seq(target: NodeId, members: &[NodeId], real: usize) -> NeighborSequence {
        NeighborSequence {
            target,
            members: members.to_vec(),
            duplicated: (0..members.len()).map(|i| i >= real).collect(),
        }
    }

    fn scalar_net(w_enc: [f64; 2], w_dec: [f64; 2], w1: f64, w2: f64, beta: f64) -> PointerNet {
        let col = |v: [f64; 2]| Tensor::matrix(2, 1, v.to_vec()).unwrap();
        PointerNet {
            cell: RecurrentCell::Tanh,
            hidden: 1,
            input_dim: 1,
            w_enc: vec![col(w_enc)],
            b_enc: vec![Tensor::zeros(&[1, 1])],
            w_dec: vec![col(w_dec)],
            b_dec: vec![Tensor::zeros(&[1, 1])],
            w1: Tensor::matrix(1, 1, vec![w1]).unwrap(),
            w2: Tensor::matrix(1, 1, vec![w2]).unwrap(),
            b_score: Tensor::zeros(&[1, 1]),
            beta: Tensor::matrix(1, 1, vec![beta]).unwrap(),
        }
    }

    #[test]
    fn encoder_examples() {
        let x = Tensor::matrix(3, 1, vec![0.2, 0.5, -0.3]).unwrap();
        let s = seq(0, &[1, 2], 2);
        let zero = scalar_net([0.0, 0.0], [1.0, 1.0], 1.0, 1.0, 1.0);
        assert!(zero.encode(&x, &s).unwrap().iter().all(|e| e == &[0.0]));
        let net = scalar_net([1.0, 1.0], [1.0, 1.0], 1.0, 1.0, 1.0);
        let zx = Tensor::zeros(&[3, 1]);
        assert!(net.encode(&zx, &s).unwrap().iter().all(|e| e == &[0.0]));
        let e = net.encode(&x, &seq(0, &[1], 1)).unwrap();
        assert!((e[0][0] - 0.5f64.tanh()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wide = PointerNet::new(2, 4, RecurrentCell::Tanh, &mut rng);
        assert!(wide.encode(&x, &s).is_err());
    }

    #[test]
    fn score_examples() {
        let x = Tensor::matrix(3, 1, vec![0.2, 0.5, -0.3]).unwrap();
        let s = seq(0, &[1, 2], 2);
        let flat = scalar_net([1.0, 1.0], [1.0, 1.0], 1.0, 1.0, 0.0);
        assert_eq!(flat.score(&x, &[s.clone()]).unwrap()[0], vec![0.0, 0.0]);
        let (_, dist) = flat.decode_topk(&x, &s, 1).unwrap();
        assert_eq!(dist[0], vec![0.5, 0.5]);

        // e1 = tanh(0.5), e2 = tanh(e1 - 0.3), d1 = tanh(0.7 e2 + 0.2 * 0.4).
        let net = scalar_net([1.0, 1.0], [0.7, 0.4], 0.9, -1.2, 1.5);
        let e1 = 0.5f64.tanh();
        let e2 = (e1 - 0.3).tanh();
        let d1 = (0.7 * e2 + 0.4 * 0.2).tanh();
        let u: Vec<f64> = [e1, e2].iter().map(|e| 1.5 * (0.9 * e - 1.2 * d1).tanh()).collect();
        let got = net.score(&x, &[s]).unwrap();
        assert!((got[0][0] - u[0]).abs() < 1e-15 && (got[0][1] - u[1]).abs() < 1e-15);

        let same = Tensor::matrix(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let got = net.score(&same, &[seq(0, &[1, 2], 2)]).unwrap();
        assert_eq!(got[0][0], got[0][1]);
    }

    #[test]
    fn decode_visits_each_real_slot_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PointerNet::new(3, 5, RecurrentCell::Lstm, &mut rng);
        let x = glorot(6, 3, &mut rng);
        let s = seq(0, &[1, 2, 4, 5, 5], 4);
        let (picked, dists) = net.decode_topk(&x, &s, 10).unwrap();
        assert_eq!(picked.len(), 4);
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        for d in dists {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(d[4], 0.0);
        }
    }

    /// Star-shaped targets whose first neighbor copies the target's
    /// features, at a varying slot.
    fn planted_clones(targets: usize, fanout: usize, dim: usize, seed: u64) -> (Tensor, Vec<NeighborSequence>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = fanout + 1;
        let n = targets * per;
        let mut x: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut seqs = Vec::new();
        let mut clone_slot = Vec::new();
        for t in 0..targets {
            let base = t * per;
            let slot = rng.gen_range(0..fanout);
            let clone = base + 1 + slot;
            for k in 0..dim {
                x[clone * dim + k] = x[base * dim + k];
            }
            let members: Vec<NodeId> = (1..=fanout).map(|j| base + j).collect();
            seqs.push(seq(base, &members, fanout));
            clone_slot.push(slot);
        }
        (Tensor::matrix(n, dim, x).unwrap(), seqs, clone_slot)
    }

    fn top_hit_rate(net: &PointerNet, x: &Tensor, seqs: &[NeighborSequence], slots: &[usize]) -> f64 {
        let u = net.score(x, seqs).unwrap();
        let hits = u
            .iter()
            .zip(slots)
            .filter(|(row, &s)| (0..row.len()).all(|j| j == s || row[j] < row[s]))
            .count();
        hits as f64 / slots.len() as f64
    }

    #[test]
    fn planted_clone_gets_top_score() {
        let (x, seqs, slots) = planted_clones(1000, 4, 8, 11);
        let cfg = PointerConfig {
            epochs: 300,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let untrained = PointerNet::new(8, cfg.hidden, cfg.cell, &mut ChaCha8Rng::seed_from_u64(1));
        let base = top_hit_rate(&untrained, &x, &seqs, &slots);
        let (net, trace) = train_pointer(&x, &x, &seqs, &cfg, &mut rng).unwrap();
        let (tx, tseqs, tslots) = planted_clones(200, 4, 8, 12);
        let rate = top_hit_rate(&net, &tx, &tseqs, &tslots);
        assert!(rate >= 0.95, "trained hit rate {rate}");
        assert!(base < 0.5, "untrained hit rate {base}");
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn zero_features_train_without_error() {
        let x = Tensor::zeros(&[4, 3]);
        let seqs = vec![seq(0, &[1, 2, 3], 3), seq(1, &[0, 0, 0], 1)];
        let (net, _) = train_pointer(&x, &x, &seqs, &PointerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, dist) = net.decode_topk(&x, &seqs[0], 1).unwrap();
        assert!(dist[0].iter().all(|p| (p - 1.0 / 3.0).abs() < 0.05), "{dist:?}");
    }

    fn scored(node: NodeId, scores: &[f64]) -> ScoredNode {
        ScoredNode {
            node,
            neighbors: (100..100 + scores.len()).collect(),
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn detect_examples() {
        let s = [scored(0, &[0.1, 0.2, 0.3, 0.9, 0.8])];
        let r = detect(&s, 0.5, 0.6);
        assert!((r.nodes[0].h_d - 0.6).abs() < 1e-15);
        assert!(!r.nodes[0].is_heterophilic);
        assert!(detect(&s, 0.5, 0.5).nodes[0].is_heterophilic);
        assert_eq!(detect(&s, 10.0, 1.01).heterophilic_count(), 0);
    }

    fn labelled_graph(labels: Vec<u8>) -> Graph {
        let n = labels.len();
        let x = Tensor::zeros(&[n, 1]);
        let edges: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
        let g = Graph::new(x, labels, edges).unwrap();
        g.with_splits(Splits::from_assignment(vec![Split::Train; n])).unwrap()
    }

    #[test]
    fn eta_between_bimodal_modes() {
        let labels: Vec<u8> = (0..20).map(|v| u8::from(v < 5)).collect();
        let g = labelled_graph(labels.clone());
        let s: Vec<ScoredNode> = (0..20)
            .map(|v| scored(v, if labels[v] == 1 { &[0.1, 0.12, 0.11] } else { &[0.9, 0.92, 0.91] }))
            .collect();
        let eta = calibrate_eta(&s, &g, 0.6).unwrap();
        assert!(eta > 0.12 && eta < 0.9, "eta {eta}");
    }

    #[test]
    fn eta_fallbacks() {
        let labels: Vec<u8> = (0..10).map(|v| u8::from(v < 2)).collect();
        let g = labelled_graph(labels);
        let s: Vec<ScoredNode> = (0..10).map(|v| scored(v, &[v as f64, 10.0 + v as f64])).collect();
        assert_eq!(calibrate_eta(&s, &g, 0.6).unwrap(), 9.5);
        let labels: Vec<u8> = (0..10).map(|v| u8::from(v < 4)).collect();
        let g = labelled_graph(labels);
        let s: Vec<ScoredNode> = (0..10).map(|v| scored(v, &[0.3, 0.3])).collect();
        assert_eq!(calibrate_eta(&s, &g, 0.6).unwrap(), 0.3);
        let bare = Graph::new(Tensor::zeros(&[2, 1]), vec![0, 1], [(0, 1)]).unwrap();
        assert!(calibrate_eta(&s[..2], &bare, 0.6).is_err());
    }

    fn flagged(node: NodeId, neighbors: Vec<NodeId>, scores: Vec<f64>, h_d: f64) -> NodeReport {
        NodeReport {
            node,
            neighbors,
            scores,
            h_d,
            is_heterophilic: true,
        }
    }

    #[test]
    fn selection_examples() {
        let ten = flagged(0, (1..=10).collect(), (0..10).map(|i| i as f64).collect(), 1.0);
        let one = flagged(20, vec![21], vec![0.5], 1.0);
        let tie = flagged(30, vec![35, 31, 33], vec![0.1, 0.1, 0.9], 1.0);
        let report = HeterophilyReport {
            eta: 0.0,
            alpha: 0.6,
            nodes: vec![ten, one, tie],
        };
        let plan = select_sources(&report, 0.7, 1.0).unwrap();
        assert_eq!(plan.entries[&0], vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(plan.entries[&20], vec![21]);
        assert_eq!(plan.entries[&30], vec![31, 35, 33]);
        assert_eq!(plan.translations(), 7 + 1 + 3);
        let csv = report_csv(&report, &plan);
        assert!(csv.lines().nth(2).unwrap().starts_with("20,1,true,21"));
    }

    #[test]
    fn heterophilic_fraction_keeps_highest_degree() {
        let nodes = (0..5)
            .map(|v| flagged(v, vec![10 + v], vec![0.0], [0.7, 0.9, 0.8, 0.9, 1.0][v]))
            .collect();
        let report = HeterophilyReport {
            eta: 0.0,
            alpha: 0.6,
            nodes,
        };
        let plan = select_sources(&report, 0.7, 0.4).unwrap();
        assert_eq!(plan.entries.keys().copied().collect::<Vec<_>>(), vec![1, 4]);
        assert!(select_sources(&report, 0.0, 1.0).is_err());
    }

    #[test]
    fn heterophilic_anomalies_in_sbm_are_flagged() {
        let spec = crate::graph::SyntheticSpec {
            n: 400,
            seed: 3,
            ..Default::default()
        };
        let g = crate::graph::generate_synthetic(&spec).unwrap();
        let splits = crate::graph::make_splits(&g, 0.01, (1, 2), 3).unwrap();
        let g = g.with_splits(splits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gcn = crate::layers::GcnLayer::new(8, 16, &mut rng);
        let adj = crate::layers::NormalizedAdjacency::new(&g);
        let xh = center_rows(&gcn.forward(&adj, g.features()).unwrap());
        let seqs = build_sequences(&g, g.default_seq_len(), Truncation::AscendingId, 3).unwrap();
        let (net, _) = train_pointer(&xh, g.features(), &seqs, &PointerConfig::default(), &mut rng).unwrap();
        let s = scored_nodes(&seqs, &net.score(&xh, &seqs).unwrap());
        let eta = calibrate_eta(&s, &g, 0.6).unwrap();
        let report = detect(&s, eta, 0.6);
        let anomalies: Vec<&NodeReport> = report.nodes.iter().filter(|r| g.labels()[r.node] == 1).collect();
        let hit = anomalies.iter().filter(|r| r.is_heterophilic).count() as f64 / anomalies.len() as f64;
        assert!(hit >= 0.8, "flagged {hit} of anomalies");
    }

    proptest! {
        #[test]
        fn detection_properties(
            scores in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 1..8), 1..20),
            eta in -1.0f64..1.0, a1 in 0.0f64..1.2, a2 in 0.0f64..1.2, frac in 0.05f64..1.0,
        ) {
            let s: Vec<ScoredNode> = scores.iter().enumerate().map(|(v, u)| scored(v, u)).collect();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let r_lo = detect(&s, eta, lo);
            let r_hi = detect(&s, eta, hi);
            for (a, b) in r_lo.nodes.iter().zip(&r_hi.nodes) {
                prop_assert!((0.0..=1.0).contains(&a.h_d));
                prop_assert!(!b.is_heterophilic || a.is_heterophilic);
            }
            let plan = select_sources(&r_lo, frac, 1.0).unwrap();
            let expect: usize = r_lo.heterophilic().map(|r| plan_size(r.neighbors.len(), frac)).sum();
            prop_assert_eq!(plan.translations(), expect);
            for (t, srcs) in &plan.entries {
                let r = r_lo.nodes.iter().find(|r| r.node == *t).unwrap();
                prop_assert!(srcs.iter().all(|u| r.neighbors.contains(u)));
            }
        }
    }
}
