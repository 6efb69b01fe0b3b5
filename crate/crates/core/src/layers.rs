//! GCN and GAT layers, the sigmoid classifier head and the weighted
//! cross-entropy objective.
//!
//! Layers run on an autograd [`Tape`]. Each exposes `bind`, which records its
//! parameters on a tape, and `store_grads`, which copies the resulting
//! gradients back into the parameter tensors for the optimizer.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{self, glorot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Symmetric-normalised `D̃^{-1/2}(A + I)D̃^{-1/2}` as an edge list
/// `(target, source, weight)`, self-loops included.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n: usize,
    targets: Rc<[usize]>,
    sources: Rc<[usize]>,
    weights: Tensor,
}

impl NormalizedAdjacency {
    pub fn new(g: &Graph) -> Self {
        let n = g.n();
        let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt()).collect();
        let (mut t, mut s, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for v in 0..n {
            t.push(v);
            s.push(v);
            w.push(inv_sqrt[v] * inv_sqrt[v]);
            for &u in g.neighbors(v) {
                t.push(v);
                s.push(u);
                w.push(inv_sqrt[v] * inv_sqrt[u]);
            }
        }
        let len = w.len();
        Self {
            n,
            targets: t.into(),
            sources: s.into(),
            weights: Tensor::new(vec![len, 1], w).expect("at least one self-loop"),
        }
    }

    /// Dense `n×n` matrix, for tests and small graphs.
    pub fn dense(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.n, self.n]);
        for ((&t, &s), &w) in self.targets.iter().zip(self.sources.iter()).zip(self.weights.data()) {
            m.data_mut()[t * self.n + s] += w;
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(h_in: usize, h_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(h_in, h_out, rng),
            activation: Activation::Relu,
        }
    }

    pub fn forward_tape(&self, tape: &Tape, adj: &NormalizedAdjacency, x: Var, w: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs[0] != adj.n || xs[1] != self.weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "gcn_forward",
                left: xs,
                right: self.weight.shape().to_vec(),
            });
        }
        let xw = tape.matmul(x, w)?;
        let gathered = tape.gather_rows(xw, adj.sources.clone())?;
        let weights = tape.constant(adj.weights.clone())?;
        let scaled = tape.scale_rows(gathered, weights)?;
        let agg = tape.scatter_add_rows(scaled, adj.targets.clone(), adj.n)?;
        self.activation.apply(tape, agg)
    }

    /// `σ(Â X W)` without gradient tracking.
    pub fn forward(&self, adj: &NormalizedAdjacency, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let w = tape.constant(self.weight.clone())?;
        let out = self.forward_tape(&tape, adj, xv, w)?;
        let v = tape.value(out).clone();
        Ok(v)
    }
}

/// How generated neighbor embeddings enter a node's neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverrideMode {
    /// The generated embedding takes the original neighbor's slot.
    #[default]
    Replace,
    /// The generated embedding is added next to the original.
    Append,
}

/// Generated embeddings substituted into specific `(target, neighbor)`
/// slots of a layer's aggregation. Only the listed targets see them.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: OverrideMode,
    pub entries: BTreeMap<(NodeId, NodeId), Vec<f64>>,
}

impl Overrides {
    pub fn new(mode: OverrideMode) -> Self {
        Self {
            mode,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, target: NodeId, neighbor: NodeId, embedding: Vec<f64>) {
        self.entries.insert((target, neighbor), embedding);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Targets whose aggregation is affected.
    pub fn targets(&self) -> impl Iterator<Item = NodeId> + '_ {
        let mut last = None;
        self.entries.keys().filter_map(move |&(t, _)| {
            if last == Some(t) {
                None
            } else {
                last = Some(t);
                Some(t)
            }
        })
    }
}

/// Edge list of one aggregation step over `V_i ∪ V_i' ∪ {v_i}`. Sources
/// index rows of `[H; extra]`, where `extra` holds generated embeddings.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    n: usize,
    targets: Rc<[usize]>,
    sources: Rc<[usize]>,
    extra: Option<Tensor>,
    sizes: Vec<usize>,
}

impl Neighborhoods {
    pub fn vanilla(g: &Graph) -> Self {
        Self::build(g, &Overrides::default(), None).expect("vanilla neighborhoods are always valid")
    }

    pub fn with_overrides(g: &Graph, overrides: &Overrides) -> Result<Self> {
        Self::build(g, overrides, None)
    }

    fn build(g: &Graph, overrides: &Overrides, width: Option<usize>) -> Result<Self> {
        let n = g.n();
        let mut width = width;
        for (&(t, u), emb) in &overrides.entries {
            if t >= n || u >= n || g.neighbors(t).binary_search(&u).is_err() {
                return Err(Error::InvalidArgument(format!(
                    "override ({t}, {u}) does not name an edge of the graph"
                )));
            }
            match width {
                None => width = Some(emb.len()),
                Some(w) if w != emb.len() => {
                    return Err(Error::LengthMismatch(format!(
                        "override width {} differs from {w}",
                        emb.len()
                    )))
                }
                _ => {}
            }
        }
        let mut extra_rows: Vec<f64> = Vec::new();
        let mut extra_index = BTreeMap::new();
        for (k, (key, emb)) in overrides.entries.iter().enumerate() {
            extra_index.insert(*key, n + k);
            extra_rows.extend_from_slice(emb);
        }
        let (mut ts, mut ss) = (Vec::new(), Vec::new());
        let mut sizes = vec![0; n];
        for v in 0..n {
            let start = ts.len();
            ts.push(v);
            ss.push(v);
            for &u in g.neighbors(v) {
                match (extra_index.get(&(v, u)), overrides.mode) {
                    (Some(&slot), OverrideMode::Replace) => {
                        ts.push(v);
                        ss.push(slot);
                    }
                    (Some(&slot), OverrideMode::Append) => {
                        ts.extend([v, v]);
                        ss.extend([u, slot]);
                    }
                    (None, _) => {
                        ts.push(v);
                        ss.push(u);
                    }
                }
            }
            sizes[v] = ts.len() - start;
        }
        let extra = match width {
            Some(w) if !overrides.entries.is_empty() => Some(Tensor::matrix(overrides.len(), w, extra_rows)?),
            _ => None,
        };
        Ok(Self {
            n,
            targets: ts.into(),
            sources: ss.into(),
            extra,
            sizes,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of aggregated entries for `v`, itself included.
    pub fn size(&self, v: NodeId) -> usize {
        self.sizes[v]
    }

    pub fn extra_width(&self) -> Option<usize> {
        self.extra.as_ref().map(Tensor::cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregator {
    Attention,
    /// Uniform `1/|neighborhood|` weights, no attention parameters used.
    Mean,
}

#[derive(Debug, Clone)]
pub struct GatHead {
    pub weight: Tensor,
    /// `[2·h_out × 1]`: first half scores the target, second half the source.
    pub attention: Tensor,
}

impl GatHead {
    /// Softmax-normalised coefficients of `target` over `neighborhood`
    /// (which should contain the target's own embedding).
    pub fn attention_coefficients(&self, target: &[f64], neighborhood: &[&[f64]]) -> Result<Vec<f64>> {
        if neighborhood.is_empty() {
            return Err(Error::InvalidArgument("empty neighborhood".into()));
        }
        let project = |x: &[f64]| -> Result<Vec<f64>> {
            let t = Tensor::matrix(1, x.len(), x.to_vec())?;
            Ok(t.matmul(&self.weight)?.into_data())
        };
        let h = self.weight.cols();
        let a = self.attention.data();
        let wt = project(target)?;
        let st = tensor::dot(&a[..h], &wt);
        let logits = neighborhood
            .iter()
            .map(|x| Ok(tensor::leaky_relu(st + tensor::dot(&a[h..], &project(x)?))))
            .collect::<Result<Vec<f64>>>()?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }
}

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub activation: Activation,
    pub aggregator: Aggregator,
}

#[derive(Debug, Clone)]
pub struct GatVars {
    pub(crate) heads: Vec<(Var, Var)>,
}

impl GatLayer {
    pub fn new(h_in: usize, h_out: usize, heads: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let heads = (0..heads.max(1))
            .map(|_| GatHead {
                weight: glorot(h_in, h_out, rng),
                attention: glorot(2 * h_out, 1, rng),
            })
            .collect();
        Self {
            heads,
            activation,
            aggregator: Aggregator::Attention,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.heads[0].weight.cols()
    }

    pub fn bind(&self, tape: &Tape) -> Result<GatVars> {
        let heads = self
            .heads
            .iter()
            .map(|h| Ok((tape.param(&h.weight)?, tape.param(&h.attention)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GatVars { heads })
    }

    pub fn store_grads(&mut self, tape: &Tape, vars: &GatVars) {
        for (head, &(w, a)) in self.heads.iter_mut().zip(&vars.heads) {
            tape.store_grad(w, &mut head.weight);
            tape.store_grad(a, &mut head.attention);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads
            .iter_mut()
            .flat_map(|h| [&mut h.weight, &mut h.attention])
            .collect()
    }

    /// `h_i = σ(Σ_j a_ij W h_j)` over each node's neighborhood, averaged
    /// over heads.
    pub fn forward_tape(&self, tape: &Tape, nb: &Neighborhoods, h: Var, vars: &GatVars) -> Result<Var> {
        let hs = tape.shape(h);
        if hs[0] != nb.n || hs[1] != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "gat_forward",
                left: hs,
                right: vec![nb.n, self.in_dim()],
            });
        }
        if let Some(w) = nb.extra_width() {
            if w != self.in_dim() {
                return Err(Error::LengthMismatch(format!(
                    "override width {w} differs from layer input width {}",
                    self.in_dim()
                )));
            }
        }
        let rows = match &nb.extra {
            Some(extra) => {
                let e = tape.constant(extra.clone())?;
                tape.concat_rows(&[h, e])?
            }
            None => h,
        };
        let h_out = self.out_dim();
        let all_targets: Rc<[usize]> = (0..nb.n).collect::<Vec<_>>().into();
        let mut outputs = Vec::with_capacity(vars.heads.len());
        for &(w, a) in &vars.heads {
            let ws = tape.matmul(rows, w)?;
            let coeff = match self.aggregator {
                Aggregator::Attention => {
                    let a_dst = tape.gather_rows(a, (0..h_out).collect::<Vec<_>>().into())?;
                    let a_src = tape.gather_rows(a, (h_out..2 * h_out).collect::<Vec<_>>().into())?;
                    let wt = tape.gather_rows(ws, all_targets.clone())?;
                    let s_dst = tape.matmul(wt, a_dst)?;
                    let s_src = tape.matmul(ws, a_src)?;
                    let e_dst = tape.gather_rows(s_dst, nb.targets.clone())?;
                    let e_src = tape.gather_rows(s_src, nb.sources.clone())?;
                    let logits = tape.add(e_dst, e_src)?;
                    let logits = tape.leaky_relu(logits)?;
                    tape.segment_softmax(logits, nb.targets.clone(), nb.n)?
                }
                Aggregator::Mean => {
                    let w: Vec<f64> = nb.targets.iter().map(|&t| 1.0 / nb.sizes[t] as f64).collect();
                    tape.constant(Tensor::new(vec![w.len(), 1], w)?)?
                }
            };
            let msgs = tape.gather_rows(ws, nb.sources.clone())?;
            let weighted = tape.scale_rows(msgs, coeff)?;
            outputs.push(tape.scatter_add_rows(weighted, nb.targets.clone(), nb.n)?);
        }
        let mut acc = outputs[0];
        for &o in &outputs[1..] {
            acc = tape.add(acc, o)?;
        }
        if outputs.len() > 1 {
            acc = tape.scale(acc, 1.0 / outputs.len() as f64)?;
        }
        self.activation.apply(tape, acc)
    }

    /// Untracked forward pass.
    pub fn forward(&self, nb: &Neighborhoods, h: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let hv = tape.constant(h.clone())?;
        let vars = GatVars {
            heads: self
                .heads
                .iter()
                .map(|hd| Ok((tape.constant(hd.weight.clone())?, tape.constant(hd.attention.clone())?)))
                .collect::<Result<Vec<_>>>()?,
        };
        let out = self.forward_tape(&tape, nb, hv, &vars)?;
        let v = tape.value(out).clone();
        Ok(v)
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, h) in self.heads.iter().enumerate() {
            let tag = if i == 0 { String::new() } else { format!(".h{i}") };
            ck.put(format!("{prefix}.W{tag}"), &h.weight);
            ck.put(format!("{prefix}.a{tag}"), &h.attention);
        }
    }

    pub fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, h) in self.heads.iter_mut().enumerate() {
            let tag = if i == 0 { String::new() } else { format!(".h{i}") };
            h.weight = ck.param(&format!("{prefix}.W{tag}"), h.weight.shape())?;
            h.attention = ck.param(&format!("{prefix}.a{tag}"), h.attention.shape())?;
        }
        Ok(())
    }
}

/// `p_i = sigmoid(w₂ · relu(W₁ z_i + b₁) + b₂)`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub(crate) w1: Var,
    pub(crate) b1: Var,
    pub(crate) w2: Var,
    pub(crate) b2: Var,
}

impl ClassifierHead {
    pub fn new(h_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: glorot(h_in, hidden, rng),
            b1: Tensor::zeros(&[1, hidden]).into_param(),
            w2: glorot(hidden, 1, rng),
            b2: Tensor::zeros(&[1, 1]).into_param(),
        }
    }

    pub fn bind(&self, tape: &Tape) -> Result<HeadVars> {
        Ok(HeadVars {
            w1: tape.param(&self.w1)?,
            b1: tape.param(&self.b1)?,
            w2: tape.param(&self.w2)?,
            b2: tape.param(&self.b2)?,
        })
    }

    pub fn store_grads(&mut self, tape: &Tape, v: &HeadVars) {
        tape.store_grad(v.w1, &mut self.w1);
        tape.store_grad(v.b1, &mut self.b1);
        tape.store_grad(v.w2, &mut self.w2);
        tape.store_grad(v.b2, &mut self.b2);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Returns `n×1` probabilities.
    pub fn forward_tape(&self, tape: &Tape, z: Var, v: &HeadVars) -> Result<Var> {
        let h = tape.matmul(z, v.w1)?;
        let h = tape.add_row(h, v.b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, v.w2)?;
        let o = tape.add_row(o, v.b2)?;
        tape.sigmoid(o)
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put(format!("{prefix}.W1"), &self.w1);
        ck.put(format!("{prefix}.b1"), &self.b1);
        ck.put(format!("{prefix}.W2"), &self.w2);
        ck.put(format!("{prefix}.b2"), &self.b2);
    }

    pub fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.w1 = ck.param(&format!("{prefix}.W1"), self.w1.shape())?;
        self.b1 = ck.param(&format!("{prefix}.b1"), self.b1.shape())?;
        self.w2 = ck.param(&format!("{prefix}.W2"), self.w2.shape())?;
        self.b2 = ck.param(&format!("{prefix}.b2"), self.b2.shape())?;
        Ok(())
    }
}

/// Per-sample weights: `phi` for anomalies, 1 for normal nodes.
pub fn class_weights(labels: &[f64], phi: f64) -> Vec<f64> {
    labels.iter().map(|&y| if y > 0.5 { phi } else { 1.0 }).collect()
}

/// Weighted binary cross-entropy recorded on `tape`; see
/// [`Tape::weighted_bce`].
pub fn weighted_ce_loss(tape: &Tape, p: Var, labels: &[f64], phi: f64) -> Result<Var> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::InvalidArgument(format!("class weight {phi} must be positive")));
    }
    tape.weighted_bce(p, labels, &class_weights(labels, phi))
}

/// Loss value without a tape.
pub fn weighted_ce_value(p: &[f64], labels: &[f64], phi: f64) -> Result<f64> {
    let tape = Tape::new();
    let pv = tape.constant(Tensor::new(vec![p.len()], p.to_vec())?)?;
    let l = weighted_ce_loss(&tape, pv, labels, phi)?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        Graph::new(x, vec![0, 1, 0], [(0, 1), (1, 2)]).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gcn_path_matches_dense_oracle() {
        let g = path3();
        let adj = NormalizedAdjacency::new(&g);
        let layer = GcnLayer {
            weight: Tensor::eye(2),
            activation: Activation::Identity,
        };
        let out = layer.forward(&adj, g.features()).unwrap();
        // Degrees with self-loops: 2, 3, 2.
        let (d0, d1, d2) = (2f64, 3f64, 2f64);
        let a = [
            [1.0 / d0, 1.0 / (d0 * d1).sqrt(), 0.0],
            [1.0 / (d0 * d1).sqrt(), 1.0 / d1, 1.0 / (d1 * d2).sqrt()],
            [0.0, 1.0 / (d1 * d2).sqrt(), 1.0 / d2],
        ];
        let x = g.features();
        for i in 0..3 {
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| a[i][j] * x.get(j, c)).sum();
                assert!((out.get(i, c) - expect).abs() < 1e-14);
            }
        }
        assert!(close(adj.dense().data(), &a.concat(), 1e-15));
    }

    #[test]
    fn gcn_isolated_and_symmetric_nodes() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let g = Graph::new(x, vec![0, 0, 1], [(1, 2)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GcnLayer::new(2, 3, &mut rng);
        let out = layer.forward(&NormalizedAdjacency::new(&g), g.features()).unwrap();
        let direct = g.features().matmul(&layer.weight).unwrap().map(|v| v.max(0.0));
        assert!(close(out.row(0), direct.row(0), 1e-15));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn gcn_dimension_mismatch() {
        let g = path3();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GcnLayer::new(5, 3, &mut rng);
        assert!(layer.forward(&NormalizedAdjacency::new(&g), g.features()).is_err());
    }

    #[test]
    fn attention_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = GatLayer::new(2, 2, 1, Activation::Identity, &mut rng);
        let head = &layer.heads[0];
        let v = [0.3, -0.7];
        assert_eq!(head.attention_coefficients(&v, &[&v]).unwrap(), vec![1.0]);
        let c = head.attention_coefficients(&v, &[&v, &v, &v, &v]).unwrap();
        assert!(c.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert!(head.attention_coefficients(&v, &[]).is_err());
    }

    #[test]
    fn attention_hand_case() {
        // W = I, a = [1, 0, 0, 1]: logit_j = leaky(x_t[0] + x_j[1]).
        let head = GatHead {
            weight: Tensor::eye(2),
            attention: Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        let t = [0.5, 0.0];
        let n1 = [9.0, 1.0];
        let n2 = [0.0, -2.0];
        let c = head.attention_coefficients(&t, &[&t, &n1, &n2]).unwrap();
        let l = [0.5f64, 1.5, 0.2 * -1.5];
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let expect: Vec<f64> = l.iter().map(|x| x.exp() / z).collect();
        assert!(close(&c, &expect, 1e-15));
    }

    #[test]
    fn single_node_gat_is_projection() {
        let x = Tensor::from_rows(&[vec![0.4, -1.0, 2.0]]).unwrap();
        let g = Graph::new(x, vec![0], []).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = GatLayer::new(3, 2, 1, Activation::Relu, &mut rng);
        let out = layer.forward(&Neighborhoods::vanilla(&g), g.features()).unwrap();
        let expect = g.features().matmul(&layer.heads[0].weight).unwrap().map(|v| v.max(0.0));
        assert!(close(out.data(), expect.data(), 1e-15));
    }

    #[test]
    fn overrides_are_local_to_their_targets() {
        let spec = crate::graph::SyntheticSpec {
            n: 30,
            intra_normal_p: 0.15,
            cross_p: 0.15,
            ..Default::default()
        };
        let g = crate::graph::generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = GatLayer::new(8, 4, 1, Activation::Relu, &mut rng);
        let base = layer.forward(&Neighborhoods::vanilla(&g), g.features()).unwrap();
        let empty = layer
            .forward(&Neighborhoods::with_overrides(&g, &Overrides::default()).unwrap(), g.features())
            .unwrap();
        assert_eq!(base, empty);

        let t = (0..g.n()).find(|&v| g.degree(v) >= 2).unwrap();
        let mut ov = Overrides::new(OverrideMode::Replace);
        ov.insert(t, g.neighbors(t)[0], vec![5.0; 8]);
        let out = layer.forward(&Neighborhoods::with_overrides(&g, &ov).unwrap(), g.features()).unwrap();
        for v in 0..g.n() {
            if v == t {
                assert_ne!(out.row(v), base.row(v));
            } else {
                assert_eq!(out.row(v), base.row(v));
            }
        }

        let mut bad = Overrides::new(OverrideMode::Replace);
        bad.insert(t, g.neighbors(t)[0], vec![1.0; 3]);
        let nb = Neighborhoods::with_overrides(&g, &bad).unwrap();
        assert!(layer.forward(&nb, g.features()).is_err());
        let mut not_edge = Overrides::new(OverrideMode::Replace);
        not_edge.insert(t, t, vec![0.0; 8]);
        assert!(Neighborhoods::with_overrides(&g, &not_edge).is_err());
    }

    #[test]
    fn append_mode_grows_neighborhood() {
        let g = path3();
        let mut ov = Overrides::new(OverrideMode::Append);
        ov.insert(1, 0, vec![0.0, 0.0]);
        ov.insert(1, 2, vec![1.0, 1.0]);
        let nb = Neighborhoods::with_overrides(&g, &ov).unwrap();
        let vanilla = Neighborhoods::vanilla(&g);
        assert_eq!(nb.size(1), vanilla.size(1) + 2);
        assert_eq!(nb.size(0), vanilla.size(0));
    }

    fn sbm(seed: u64) -> Graph {
        let spec = crate::graph::SyntheticSpec {
            n: 40,
            intra_normal_p: 0.15,
            cross_p: 0.15,
            seed,
            ..Default::default()
        };
        crate::graph::generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn gat_matches_dense_reference() {
        let g = sbm(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = GatLayer::new(8, 3, 2, Activation::Relu, &mut rng);
        let out = layer.forward(&Neighborhoods::vanilla(&g), g.features()).unwrap();
        let x = g.features();
        for v in 0..g.n() {
            let members: Vec<NodeId> = std::iter::once(v).chain(g.neighbors(v).iter().copied()).collect();
            let rows: Vec<&[f64]> = members.iter().map(|&u| x.row(u)).collect();
            let mut acc = vec![0.0; 3];
            for head in &layer.heads {
                let c = head.attention_coefficients(x.row(v), &rows).unwrap();
                for (&u, cu) in members.iter().zip(c) {
                    let wx = Tensor::matrix(1, 8, x.row(u).to_vec()).unwrap().matmul(&head.weight).unwrap();
                    for k in 0..3 {
                        acc[k] += cu * wx.data()[k] / 2.0;
                    }
                }
            }
            let expect: Vec<f64> = acc.iter().map(|a| a.max(0.0)).collect();
            assert!(close(out.row(v), &expect, 1e-12), "node {v}");
        }
    }

    #[test]
    fn layers_are_permutation_equivariant() {
        use rand::seq::SliceRandom;
        let g = sbm(6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut perm: Vec<NodeId> = (0..g.n()).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm).unwrap();
        let gcn = GcnLayer::new(8, 4, &mut rng);
        let a = gcn.forward(&NormalizedAdjacency::new(&g), g.features()).unwrap();
        let b = gcn.forward(&NormalizedAdjacency::new(&pg), pg.features()).unwrap();
        for agg in [Aggregator::Attention, Aggregator::Mean] {
            let mut gat = GatLayer::new(8, 4, 1, Activation::Relu, &mut rng);
            gat.aggregator = agg;
            let c = gat.forward(&Neighborhoods::vanilla(&g), g.features()).unwrap();
            let d = gat.forward(&Neighborhoods::vanilla(&pg), pg.features()).unwrap();
            for v in 0..g.n() {
                assert!(close(c.row(v), d.row(perm[v]), 1e-12));
            }
        }
        for v in 0..g.n() {
            assert!(close(a.row(v), b.row(perm[v]), 1e-12));
        }
    }

    proptest::proptest! {
        #[test]
        fn attention_forms_a_distribution(
            seed in 0u64..1000,
            size in 1usize..8,
            scale in 0.1f64..20.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut layer = GatLayer::new(3, 2, 1, Activation::Identity, &mut rng);
            layer.heads[0].attention = layer.heads[0].attention.map(|a| a * scale);
            let rows: Vec<Vec<f64>> = (0..size).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let c = layer.heads[0].attention_coefficients(&rows[0], &refs).unwrap();
            proptest::prop_assert!(c.iter().all(|&x| x >= 0.0));
            proptest::prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let l = weighted_ce_value(&[0.5], &[1.0], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = weighted_ce_value(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert!(l.abs() < 1e-11);
        let l = weighted_ce_value(&[0.8, 0.2], &[1.0, 0.0], 2.0).unwrap();
        assert!((l - (-3.0 * 0.8f64.ln())).abs() < 1e-14);
        assert!(weighted_ce_value(&[0.5], &[1.0], 0.0).is_err());
    }
}
