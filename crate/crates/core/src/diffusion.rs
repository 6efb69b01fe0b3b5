//! Denoising diffusion over node embeddings and the conditional
//! translation of normal neighbors into anomalous ones.
//!
//! Steps are 1-based: `t ∈ [1, T]`, and `ᾱ_0 = 1` denotes clean data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::AdamState;
use crate::tensor::{glorot, matmul_into, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation, `σ_t = √β_t`.
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `β` from `beta_1` to `beta_t`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 || !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 1 and 0 < beta_1 <= beta_T < 1, got T={steps}, {beta_1}, {beta_t}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_1]
        } else {
            (0..steps)
                .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// `z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε`.
pub fn forward_sample(z0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if z0.len() != eps.len() {
        return Err(Error::LengthMismatch(format!("z0 width {} vs noise width {}", z0.len(), eps.len())));
    }
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// One application of the forward transition `q(z_t | z_{t−1})`.
pub fn forward_step(z: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    let b = sched.beta[t - 1];
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(z.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
}

/// Mean of the reverse transition, `(z_t − (1−α_t)/√(1−ᾱ_t) · ε̂) / √α_t`.
pub fn reverse_mean(z: f64, eps_hat: f64, alpha: f64, alpha_bar: f64) -> f64 {
    (z - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()
}

/// `z_{t−1}` from `z_t`, the predicted noise and fresh `noise`, which is
/// ignored at `t = 1`.
pub fn reverse_step(z: &[f64], t: usize, eps_hat: &[f64], noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if z.len() != eps_hat.len() || z.len() != noise.len() {
        return Err(Error::LengthMismatch("reverse_step widths differ".into()));
    }
    let (a, ab, s) = (sched.alpha[t - 1], sched.alpha_bar[t - 1], sched.sigma[t - 1]);
    let s = if t == 1 { 0.0 } else { s };
    Ok(z.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((&z, &e), &n)| reverse_mean(z, e, a, ab) + s * n)
        .collect())
}

/// Sinusoidal embedding of step `t`: `[sin(t ω_k), cos(t ω_k)]` with
/// `ω_k = 10000^{−k/(w/2)}`.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * w).sin();
        out[half + k] = (t as f64 * w).cos();
    }
    out
}

/// `ε_θ`: MLP over `[z_t ⊕ temb(t)]` with two ReLU hidden layers. The
/// output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    pub dim: usize,
    pub time_width: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

pub(crate) struct PredictorVars {
    pub(crate) w1: Var,
    pub(crate) b1: Var,
    pub(crate) w2: Var,
    pub(crate) b2: Var,
    pub(crate) w3: Var,
    pub(crate) b3: Var,
}

impl NoisePredictor {
    pub fn new(dim: usize, hidden: usize, time_width: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            time_width,
            w1: glorot(dim + time_width, hidden, rng),
            b1: Tensor::zeros(&[1, hidden]).into_param(),
            w2: glorot(hidden, hidden, rng),
            b2: Tensor::zeros(&[1, hidden]).into_param(),
            w3: Tensor::zeros(&[hidden, dim]).into_param(),
            b3: Tensor::zeros(&[1, dim]).into_param(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w2.rows()
    }

    /// True while the output layer is still all zeros.
    pub fn is_untrained(&self) -> bool {
        self.w3.data().iter().chain(self.b3.data()).all(|&v| v == 0.0)
    }

    fn bind(&self, tape: &Tape) -> Result<PredictorVars> {
        Ok(PredictorVars {
            w1: tape.param(&self.w1)?,
            b1: tape.param(&self.b1)?,
            w2: tape.param(&self.w2)?,
            b2: tape.param(&self.b2)?,
            w3: tape.param(&self.w3)?,
            b3: tape.param(&self.b3)?,
        })
    }

    fn store_grads(&mut self, tape: &Tape, v: &PredictorVars) {
        tape.store_grad(v.w1, &mut self.w1);
        tape.store_grad(v.b1, &mut self.b1);
        tape.store_grad(v.w2, &mut self.w2);
        tape.store_grad(v.b2, &mut self.b2);
        tape.store_grad(v.w3, &mut self.w3);
        tape.store_grad(v.b3, &mut self.b3);
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub(crate) fn forward_tape(&self, tape: &Tape, v: &PredictorVars, input: Var) -> Result<Var> {
        let h = tape.relu(tape.add_row(tape.matmul(input, v.w1)?, v.b1)?)?;
        let h = tape.relu(tape.add_row(tape.matmul(h, v.w2)?, v.b2)?)?;
        tape.add_row(tape.matmul(h, v.w3)?, v.b3)
    }

    /// `ε_θ(z_t, t)` for every row of `z` at a shared step `t`.
    pub fn predict(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        if z.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "noise_predict",
                left: z.shape().to_vec(),
                right: vec![z.rows(), self.dim],
            });
        }
        let (m, d, h) = (z.rows(), self.dim, self.hidden());
        // The timestep half of the first layer is the same for every row.
        let temb = timestep_embedding(t, self.time_width);
        let mut bias1 = self.b1.data().to_vec();
        matmul_into(&temb, &self.w1.data()[d * h..], &mut bias1, 1, self.time_width, h);
        let mut h1 = vec![0.0; m * h];
        matmul_into(z.data(), &self.w1.data()[..d * h], &mut h1, m, d, h);
        relu_bias(&mut h1, &bias1);
        let mut h2 = vec![0.0; m * h];
        matmul_into(&h1, self.w2.data(), &mut h2, m, h, h);
        relu_bias(&mut h2, self.b2.data());
        let mut out = vec![0.0; m * d];
        matmul_into(&h2, self.w3.data(), &mut out, m, h, d);
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(self.b3.data()) {
                *o += b;
            }
        }
        Tensor::matrix(m, d, out)
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put(format!("{prefix}.W1"), &self.w1);
        ck.put(format!("{prefix}.b1"), &self.b1);
        ck.put(format!("{prefix}.W2"), &self.w2);
        ck.put(format!("{prefix}.b2"), &self.b2);
        ck.put(format!("{prefix}.W3"), &self.w3);
        ck.put(format!("{prefix}.b3"), &self.b3);
    }

    pub fn load(ck: &Checkpoint, prefix: &str, time_width: usize) -> Result<Self> {
        let w3 = ck.tensor(&format!("{prefix}.W3"))?;
        let (hidden, dim) = (w3.rows(), w3.cols());
        Ok(Self {
            dim,
            time_width,
            w1: ck.param(&format!("{prefix}.W1"), &[dim + time_width, hidden])?,
            b1: ck.param(&format!("{prefix}.b1"), &[1, hidden])?,
            w2: ck.param(&format!("{prefix}.W2"), &[hidden, hidden])?,
            b2: ck.param(&format!("{prefix}.b2"), &[1, hidden])?,
            w3: ck.param(&format!("{prefix}.W3"), &[hidden, dim])?,
            b3: ck.param(&format!("{prefix}.b3"), &[1, dim])?,
        })
    }
}

fn relu_bias(h: &mut [f64], bias: &[f64]) {
    for row in h.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = (*v + b).max(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 128,
            time_width: 32,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

impl DdpmConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fits `ε_θ` with the simple objective: per-sample `‖ε − ε_θ(z_t, t)‖²`
/// averaged over the minibatch, `t` uniform on `[1, T]`. Returns the
/// predictor and the mean loss of each epoch.
pub fn train_ddpm(
    data: &Tensor,
    sched: &DiffusionSchedule,
    cfg: &DdpmConfig,
    rng: &mut impl Rng,
) -> Result<(NoisePredictor, Vec<f64>)> {
    let (m, d) = (data.rows(), data.cols());
    if m == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("DDPM training needs data and a positive batch size".into()));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("ddpm training data"));
    }
    let mut net = NoisePredictor::new(d, cfg.hidden, cfg.time_width, rng);
    let mut opt = AdamState::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut input = Vec::with_capacity(b * (d + cfg.time_width));
            let mut target = Vec::with_capacity(b * d);
            for &i in chunk {
                let t = rng.gen_range(1..=sched.steps());
                let eps = normal_vec(rng, d);
                input.extend(forward_sample(data.row(i), t, &eps, sched)?);
                input.extend(timestep_embedding(t, cfg.time_width));
                target.extend(eps);
            }
            let tape = Tape::new();
            let v = net.bind(&tape)?;
            let x = tape.constant(Tensor::matrix(b, d + cfg.time_width, input)?)?;
            let pred = net.forward_tape(&tape, &v, x)?;
            let diff = tape.sub(pred, tape.constant(Tensor::matrix(b, d, target)?)?)?;
            let loss = tape.scale(tape.sum(tape.mul(diff, diff)?)?, 1.0 / b as f64)?;
            let lv = tape.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged(format!(
                    "ddpm loss {lv} at epoch {epoch} (m={m}, d={d}, {cfg:?})"
                )));
            }
            total += lv * b as f64;
            tape.backward(loss)?;
            net.store_grads(&tape, &v);
            opt.step(&mut net.params_mut())?;
        }
        trace.push(total / m as f64);
    }
    Ok((net, trace))
}

/// Mean simple loss of `net` on `data`, for diagnostics.
pub fn ddpm_loss(net: &NoisePredictor, data: &Tensor, sched: &DiffusionSchedule, rng: &mut impl Rng) -> Result<f64> {
    let d = data.cols();
    let mut total = 0.0;
    for i in 0..data.rows() {
        let t = rng.gen_range(1..=sched.steps());
        let eps = normal_vec(rng, d);
        let zt = Tensor::matrix(1, d, forward_sample(data.row(i), t, &eps, sched)?)?;
        let pred = net.predict(&zt, t)?;
        total += pred.data().iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
    }
    Ok(total / data.rows() as f64)
}

/// Runs the reverse chain on every row of `z`, from step `from` down to 1,
/// drawing row `r`'s noise from `rngs[r]`.
pub fn reverse_process(
    net: &NoisePredictor,
    sched: &DiffusionSchedule,
    mut z: Tensor,
    from: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    sched.check(from)?;
    if rngs.len() != z.rows() {
        return Err(Error::LengthMismatch(format!("{} streams for {} rows", rngs.len(), z.rows())));
    }
    for t in (1..=from).rev() {
        z = denoise_rows(net, sched, &z, t, rngs)?;
    }
    Ok(z)
}

fn denoise_rows(net: &NoisePredictor, sched: &DiffusionSchedule, z: &Tensor, t: usize, rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
    let eps = net.predict(z, t)?;
    let d = z.cols();
    let mut out = Vec::with_capacity(z.len());
    for (r, rng) in rngs.iter_mut().enumerate() {
        let noise = normal_vec(rng, d);
        out.extend(reverse_step(z.row(r), t, eps.row(r), &noise, sched)?);
    }
    Tensor::matrix(z.rows(), d, out)
}

/// Unconditional samples from `N(0, I)` through the full reverse chain.
pub fn sample(net: &NoisePredictor, sched: &DiffusionSchedule, n: usize, seed: u64) -> Result<Tensor> {
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream(seed, i as u64, 0, 0)).collect();
    let mut init = Vec::with_capacity(n * net.dim);
    for i in 0..n {
        init.extend(normal_vec(&mut stream(seed, i as u64, 0, 1), net.dim));
    }
    reverse_process(net, sched, Tensor::matrix(n, net.dim, init)?, sched.steps(), &mut rngs)
}

/// Random stream for one task, from the global seed and task identifiers.
pub fn stream(seed: u64, a: u64, b: u64, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32) ^ kind.wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng
}

/// Stream roles of one translation.
pub const STREAM_PRIOR: u64 = 1;
pub const STREAM_REVERSE: u64 = 2;
pub const STREAM_CONDITION: u64 = 3;

/// Mean of `v`'s neighbors' rows, or `None` for an isolated node.
pub fn neighborhood_mean(z: &Tensor, g: &Graph, v: NodeId) -> Option<Vec<f64>> {
    let nb = g.neighbors(v);
    if nb.is_empty() {
        return None;
    }
    let mut m = vec![0.0; z.cols()];
    for &u in nb {
        for (a, b) in m.iter_mut().zip(z.row(u)) {
            *a += b;
        }
    }
    let k = nb.len() as f64;
    m.iter_mut().for_each(|a| *a /= k);
    Some(m)
}

/// `f_h(z_v) = z_v − mean_{u ∈ N(v)} z_u`; zero for isolated nodes.
pub fn high_pass(z: &Tensor, g: &Graph, v: NodeId) -> Vec<f64> {
    match neighborhood_mean(z, g, v) {
        Some(m) => z.row(v).iter().zip(&m).map(|(a, b)| a - b).collect(),
        None => vec![0.0; z.cols()],
    }
}

/// Anomaly reference: an embedding, its neighborhood aggregate and the
/// noise scale of that aggregate (`1/√deg` for a mean of independent
/// neighbors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub embedding: Vec<f64>,
    pub neighborhood: Vec<f64>,
    pub aggregate_scale: f64,
}

impl Reference {
    /// Averages over the given anomalies; isolated ones contribute their
    /// own embedding as neighborhood, i.e. a zero high-pass.
    pub fn from_nodes(z: &Tensor, g: &Graph, nodes: &[NodeId]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("reference needs at least one anomaly".into()));
        }
        let d = z.cols();
        let (mut e, mut nbm, mut scale) = (vec![0.0; d], vec![0.0; d], 0.0);
        for &v in nodes {
            let m = neighborhood_mean(z, g, v).unwrap_or_else(|| z.row(v).to_vec());
            for k in 0..d {
                e[k] += z.row(v)[k];
                nbm[k] += m[k];
            }
            scale += 1.0 / (g.degree(v).max(1) as f64).sqrt();
        }
        let k = nodes.len() as f64;
        Ok(Self {
            embedding: e.into_iter().map(|x| x / k).collect(),
            neighborhood: nbm.into_iter().map(|x| x / k).collect(),
            aggregate_scale: scale / k,
        })
    }

    pub fn high_pass(&self) -> Vec<f64> {
        self.embedding.iter().zip(&self.neighborhood).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslateConfig {
    pub gamma: f64,
    /// Noising level of the prior; `None` uses the full `T`.
    pub start_step: Option<usize>,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            gamma: 1.1,
            start_step: None,
        }
    }
}

/// Per-step diagnostics of a translation batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub mean_norm: f64,
    pub mean_correction: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("t,mean_norm,mean_correction\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.t, r.mean_norm, r.mean_correction));
    }
    out
}

/// Translates the embeddings of `sources[i].1` (a neighbor of target
/// `sources[i].0`) towards the anomaly reference.
///
/// Each pair starts from the prior `z^T = √ᾱ_T z_src + √(1−ᾱ_T) ε`. At every
/// step the unconditional proposal `ẑ^{t−1}` is corrected by
/// `γ (f_h(z_ref^{t−1}) − f_h(ẑ^{t−1}))`, where the reference and the source
/// neighborhood are noised to level `t−1` with the forward closed form.
/// Randomness comes from per-pair streams of `seed`, so a pair's result does
/// not depend on the rest of the batch.
pub fn translate(
    net: &NoisePredictor,
    sched: &DiffusionSchedule,
    h: &Tensor,
    g: &Graph,
    pairs: &[(NodeId, NodeId)],
    reference: &Reference,
    cfg: &TranslateConfig,
    seed: u64,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Tensor> {
    let d = h.cols();
    if net.dim != d || reference.embedding.len() != d || reference.neighborhood.len() != d {
        return Err(Error::LengthMismatch(format!(
            "embedding width {d}, predictor width {}, reference width {}",
            net.dim,
            reference.embedding.len()
        )));
    }
    if pairs.is_empty() {
        return Ok(Tensor::zeros(&[0, d]));
    }
    if net.is_untrained() {
        log::warn!("translating with an untrained noise predictor");
    }
    let start = cfg.start_step.unwrap_or(sched.steps());
    sched.check(start)?;
    let b = pairs.len();
    let key = |&(t, s): &(NodeId, NodeId)| (t as u64, s as u64);
    let mut rev: Vec<ChaCha8Rng> = pairs.iter().map(|p| stream(seed, key(p).0, key(p).1, STREAM_REVERSE)).collect();
    let mut cond: Vec<ChaCha8Rng> = pairs.iter().map(|p| stream(seed, key(p).0, key(p).1, STREAM_CONDITION)).collect();
    let mut z = Vec::with_capacity(b * d);
    for p in pairs {
        let mut rng = stream(seed, key(p).0, key(p).1, STREAM_PRIOR);
        z.extend(forward_sample(h.row(p.1), start, &normal_vec(&mut rng, d), sched)?);
    }
    let mut z = Tensor::matrix(b, d, z)?;
    // Neighborhood means of the sources and their noise scales.
    let src_nb: Vec<Option<(Vec<f64>, f64)>> = pairs
        .iter()
        .map(|&(_, s)| neighborhood_mean(h, g, s).map(|m| (m, 1.0 / (g.degree(s) as f64).sqrt())))
        .collect();
    for t in (1..=start).rev() {
        z = denoise_rows(net, sched, &z, t, &mut rev)?;
        if cfg.gamma == 0.0 {
            continue;
        }
        let ab = sched.alpha_bar_at(t - 1);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut corr_total = 0.0;
        for (r, rng) in cond.iter_mut().enumerate() {
            let e_ref = normal_vec(rng, d);
            let e_ref_nb = normal_vec(rng, d);
            let e_src_nb = normal_vec(rng, d);
            let row = z.row_mut(r);
            let mut sq = 0.0;
            for k in 0..d {
                let ref_t = sa * reference.embedding[k] + sn * e_ref[k];
                let ref_nb_t = sa * reference.neighborhood[k] + sn * reference.aggregate_scale * e_ref_nb[k];
                let hp_hat = match &src_nb[r] {
                    Some((m, scale)) => row[k] - (sa * m[k] + sn * scale * e_src_nb[k]),
                    None => 0.0,
                };
                let c = cfg.gamma * ((ref_t - ref_nb_t) - hp_hat);
                row[k] += c;
                sq += c * c;
            }
            corr_total += sq.sqrt();
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("translation"));
        }
        if let Some(tr) = trace.as_deref_mut() {
            let mean_norm = (0..b).map(|r| crate::tensor::norm(z.row(r))).sum::<f64>() / b as f64;
            tr.push(TraceRow {
                t,
                mean_norm,
                mean_correction: corr_total / b as f64,
            });
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = sched();
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] > w[0]));
        let mut p = 1.0;
        for i in 0..1000 {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar[999] - p).abs() < 1e-12);
        assert!(s.sigma.iter().zip(&s.beta).all(|(a, b)| (a * a - b).abs() < 1e-15));
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_examples() {
        let s = sched();
        let z = forward_sample(&[2.0, -1.0], 10, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar[9].sqrt();
        assert_eq!(z, vec![2.0 * a, -a]);
        let z = forward_sample(&[5.0], 1000, &[0.3], &s).unwrap();
        assert!((z[0] - 0.3).abs() < 5.0 * s.alpha_bar[999].sqrt() + 1e-3);
        assert!(forward_sample(&[1.0], 0, &[0.0], &s).is_err());
        assert!(forward_sample(&[1.0], 1001, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_variance_matches_closed_form() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 100;
        let n = 100_000;
        let a = s.alpha_bar[t - 1];
        let r: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                forward_sample(&[1.5], t, &[e], &s).unwrap()[0] - a.sqrt() * 1.5
            })
            .collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let target = 1.0 - a;
        // Standard error of a Gaussian sample variance.
        let se = target * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - target).abs() < 3.0 * se, "{var} vs {target}");
    }

    #[test]
    fn reverse_step_examples() {
        let s = sched();
        let z = reverse_step(&[1.0, 2.0], 50, &[0.0, 0.0], &[0.0, 0.0], &s).unwrap();
        let a = s.alpha[49].sqrt();
        assert_eq!(z, vec![1.0 / a, 2.0 / a]);
        let v = reverse_mean(1.0, 0.1, 0.99, 0.5);
        let expect = (1.0 - 0.01 / 0.5f64.sqrt() * 0.1) / 0.99f64.sqrt();
        assert!((v - expect).abs() < 1e-15);
        // Noise is dropped at the final step.
        assert_eq!(
            reverse_step(&[1.0], 1, &[0.2], &[5.0], &s).unwrap(),
            reverse_step(&[1.0], 1, &[0.2], &[0.0], &s).unwrap()
        );
    }

    #[test]
    fn exact_noise_recovers_posterior_mean() {
        // With ε̂ = ε the reverse mean equals the mean of q(z_{t-1} | z_t, z_0).
        let s = sched();
        for &(t, z0, eps) in &[(2usize, 0.7f64, -1.3f64), (10, -2.0, 0.4), (500, 1.0, 1.0)] {
            let zt = forward_sample(&[z0], t, &[eps], &s).unwrap()[0];
            let (a, ab, ab_prev, b) = (s.alpha[t - 1], s.alpha_bar[t - 1], s.alpha_bar[t - 2], s.beta[t - 1]);
            let post = ab_prev.sqrt() * b / (1.0 - ab) * z0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * zt;
            let got = reverse_mean(zt, eps, a, ab);
            assert!((got - post).abs() < 1e-10, "t={t}: {got} vs {post}");
        }
    }

    #[test]
    fn untrained_loss_is_dimension() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = NoisePredictor::new(4, 16, 32, &mut rng);
        let data = Tensor::zeros(&[5000, 4]);
        let loss = ddpm_loss(&net, &data, &s, &mut rng).unwrap();
        // Var of a chi-square with 4 dof is 8.
        assert!((loss - 4.0).abs() < 4.0 * (8.0f64 / 5000.0).sqrt(), "{loss}");
        let cfg = DdpmConfig {
            epochs: 0,
            ..Default::default()
        };
        let (net, trace) = train_ddpm(&data, &s, &cfg, &mut rng).unwrap();
        assert!(net.is_untrained() && trace.is_empty());
    }

    #[test]
    fn point_mass_samples_collapse() {
        let s = sched();
        let d = 4;
        let data = Tensor::zeros(&[512, d]);
        let cfg = DdpmConfig {
            epochs: 60,
            hidden: 64,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (net, trace) = train_ddpm(&data, &s, &cfg, &mut rng).unwrap();
        assert!(trace.last().unwrap() < &(0.5 * trace[0]), "{trace:?}");
        let out = sample(&net, &s, 200, 9).unwrap();
        let mut mean = vec![0.0; d];
        for r in 0..out.rows() {
            for k in 0..d {
                mean[k] += out.row(r)[k] / out.rows() as f64;
            }
        }
        assert!(crate::tensor::norm(&mean) < 0.1 * (d as f64).sqrt(), "{mean:?}");
    }

    #[test]
    fn two_mode_mixture_is_reproduced() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..1024)
            .map(|i| {
                let c = if i % 2 == 0 { 2.0 } else { -2.0 };
                (0..2).map(|_| c + 0.1 * normal_vec(&mut rng, 1)[0]).collect::<Vec<f64>>()
            })
            .collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let cfg = DdpmConfig {
            epochs: 150,
            hidden: 64,
            ..Default::default()
        };
        let (net, _) = train_ddpm(&data, &s, &cfg, &mut rng).unwrap();
        let out = sample(&net, &s, 400, 21).unwrap();
        let (mut near_pos, mut near_neg) = (0, 0);
        for r in 0..out.rows() {
            let z = out.row(r);
            if crate::tensor::norm(&[z[0] - 2.0, z[1] - 2.0]) < 1.0 {
                near_pos += 1;
            } else if crate::tensor::norm(&[z[0] + 2.0, z[1] + 2.0]) < 1.0 {
                near_neg += 1;
            }
        }
        assert!(near_pos + near_neg >= 320, "{near_pos} + {near_neg}");
        assert!(near_pos >= 100 && near_neg >= 100, "{near_pos} / {near_neg}");
    }

    #[test]
    fn high_pass_examples() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let g = Graph::new(z.clone(), vec![0; 4], [(0, 1), (0, 2)]).unwrap();
        assert_eq!(high_pass(&z, &g, 0), vec![0.0, -1.0]);
        assert_eq!(high_pass(&z, &g, 3), vec![0.0, 0.0]);
        let same = Tensor::from_rows(&vec![vec![1.0, 2.0]; 3]).unwrap();
        let tri = Graph::new(same.clone(), vec![0; 3], [(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(high_pass(&same, &tri, 1), vec![0.0, 0.0]);
    }

    fn toy() -> (Graph, Tensor, NoisePredictor, DiffusionSchedule) {
        let z = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![3.0, 3.0]]).unwrap();
        let g = Graph::new(z.clone(), vec![0, 0, 0, 1], [(0, 1), (1, 2), (2, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = NoisePredictor::new(2, 8, 32, &mut rng);
        net.w3 = glorot(8, 2, &mut rng);
        (g, z, net, DiffusionSchedule::linear(50, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn gamma_zero_is_unconditional_reverse() {
        let (g, z, net, s) = toy();
        let pairs = [(0, 1), (2, 1), (3, 2)];
        let r = Reference::from_nodes(&z, &g, &[3]).unwrap();
        let cfg = TranslateConfig {
            gamma: 0.0,
            start_step: None,
        };
        let out = translate(&net, &s, &z, &g, &pairs, &r, &cfg, 11, None).unwrap();
        let mut prior = Vec::new();
        let mut rngs = Vec::new();
        for &(t, src) in &pairs {
            let mut rng = stream(11, t as u64, src as u64, STREAM_PRIOR);
            prior.extend(forward_sample(z.row(src), 50, &normal_vec(&mut rng, 2), &s).unwrap());
            rngs.push(stream(11, t as u64, src as u64, STREAM_REVERSE));
        }
        let expect = reverse_process(&net, &s, Tensor::matrix(3, 2, prior).unwrap(), 50, &mut rngs).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn translation_contract() {
        let (g, z, net, s) = toy();
        let r = Reference::from_nodes(&z, &g, &[3]).unwrap();
        let cfg = TranslateConfig::default();
        let mut trace = Vec::new();
        let a = translate(&net, &s, &z, &g, &[(0, 1), (2, 1)], &r, &cfg, 5, Some(&mut trace)).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(trace.len(), 50);
        assert!(trace_csv(&trace).starts_with("t,mean_norm,mean_correction\n50,"));
        // Batch composition does not change a pair's result.
        let b = translate(&net, &s, &z, &g, &[(2, 1)], &r, &cfg, 5, None).unwrap();
        assert_eq!(a.row(1), b.row(0));
        let again = translate(&net, &s, &z, &g, &[(0, 1), (2, 1)], &r, &cfg, 5, None).unwrap();
        assert_eq!(a, again);
        let bad = Reference {
            embedding: vec![0.0; 3],
            neighborhood: vec![0.0; 3],
            aggregate_scale: 1.0,
        };
        assert!(translate(&net, &s, &z, &g, &[(0, 1)], &bad, &cfg, 5, None).is_err());
    }

    #[test]
    fn correction_moves_high_pass_towards_reference() {
        let (g, z, net, s) = toy();
        let r = Reference::from_nodes(&z, &g, &[3]).unwrap();
        let out = translate(&net, &s, &z, &g, &[(0, 1)], &r, &TranslateConfig { gamma: 1.0, start_step: None }, 5, None).unwrap();
        // At gamma = 1 the last step sets f_h of the output to f_h(ref) exactly.
        let m = neighborhood_mean(&z, &g, 1).unwrap();
        let hp: Vec<f64> = out.row(0).iter().zip(&m).map(|(a, b)| a - b).collect();
        for (a, b) in hp.iter().zip(r.high_pass()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
