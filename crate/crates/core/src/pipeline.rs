//! Detection, translation and counterfactual aggregation, trained in
//! stages:
//!
//! 1. unsupervised GCN embeddings, pointer training, heterophily detection
//!    and the translation plan;
//! 2. a vanilla two-layer GAT stack with its classifier head, selected on
//!    validation macro-F1;
//! 3. a DDPM fitted to the frozen first-layer embeddings `H¹`, used to
//!    translate the planned neighbors towards the anomaly reference;
//! 4. the second layer and head fine-tuned with the translated embeddings
//!    substituted into the heterophilic neighborhoods.
//!
//! A [`Session`] caches stages shared by several ablations or plan
//! fractions. Every stage draws from its own seeded stream, so cached and
//! fresh runs agree bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::diffusion::{self, DdpmConfig, NoisePredictor, Reference};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Split, Truncation};
use crate::layers::{
    class_weights, Activation, Aggregator, ClassifierHead, GatLayer, GcnLayer, NormalizedAdjacency, Neighborhoods,
    OverrideMode, Overrides,
};
use crate::metrics::{self, Metrics};
use crate::optim::AdamState;
use crate::pointer::{self, CounterfactualPlan, HeterophilyReport, PointerConfig, PointerNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Full,
    /// No generator and mean aggregation.
    Two,
    /// No generator.
    Ano,
    /// Mean aggregation instead of attention.
    Att,
    /// Generated embeddings appended next to the originals.
    Ori,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::Two, Ablation::Ano, Ablation::Att, Ablation::Ori];

    pub fn uses_plan(self) -> bool {
        matches!(self, Ablation::Full | Ablation::Att | Ablation::Ori)
    }

    pub fn aggregator(self) -> Aggregator {
        match self {
            Ablation::Two | Ablation::Att => Aggregator::Mean,
            _ => Aggregator::Attention,
        }
    }

    pub fn override_mode(self) -> OverrideMode {
        if self == Ablation::Ori {
            OverrideMode::Append
        } else {
            OverrideMode::Replace
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Two => "two",
            Ablation::Ano => "ano",
            Ablation::Att => "att",
            Ablation::Ori => "ori",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected one of full, two, ano, att, ori")))
    }
}

/// Class weight `φ` of anomalies in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiRule {
    /// `#normal / #anomaly` on the training mask.
    #[default]
    NormalOverAnomaly,
    /// `#anomaly / #normal` on the training mask.
    AnomalyOverNormal,
}

/// `"auto"` or a value.
mod auto_or {
    use super::*;

    pub fn serialize<S: Serializer, T: Serialize>(v: &Option<T>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => x.serialize(s),
            None => s.serialize_str("auto"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> std::result::Result<Option<T>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Text(String),
            Value(T),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Value(v) => Ok(Some(v)),
            Raw::Text(t) if t == "auto" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub alpha: f64,
    #[serde(with = "auto_or")]
    pub eta: Option<f64>,
    pub gamma: f64,
    pub translate_fraction: f64,
    pub heterophilic_fraction: f64,
    #[serde(with = "auto_or")]
    pub seq_len: Option<usize>,
    pub truncation: Truncation,
    /// Fine-tuning epochs of stage 4.
    pub epochs: usize,
    /// Epochs of the vanilla stack in stage 2.
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub head_hidden: usize,
    pub heads: usize,
    pub gcn_hidden: usize,
    pub phi: PhiRule,
    pub threshold: f64,
    /// Choose the classification threshold on validation macro-F1.
    pub tune_threshold: bool,
    /// Regenerate translations every k fine-tuning epochs; 0 keeps them fixed.
    pub regenerate_every: usize,
    /// Noising level of the translation prior; `None` is the full chain.
    pub translate_start: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub pointer: PointerConfig,
    pub ddpm: DdpmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            eta: None,
            gamma: 1.1,
            translate_fraction: 0.7,
            heterophilic_fraction: 1.0,
            seq_len: None,
            truncation: Truncation::AscendingId,
            epochs: 100,
            pretrain_epochs: 100,
            lr: 0.01,
            hidden: 64,
            head_hidden: 32,
            heads: 1,
            gcn_hidden: 16,
            phi: PhiRule::NormalOverAnomaly,
            threshold: metrics::DEFAULT_THRESHOLD,
            tune_threshold: false,
            regenerate_every: 0,
            translate_start: None,
            seed: 0,
            ablation: Ablation::Full,
            pointer: PointerConfig::default(),
            ddpm: DdpmConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")))
            }
        };
        frac("translate_fraction", self.translate_fraction)?;
        frac("heterophilic_fraction", self.heterophilic_fraction)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if !self.gamma.is_finite() || !(self.lr > 0.0) || !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("gamma must be finite, lr positive and threshold in (0, 1)".into()));
        }
        if self.hidden == 0 || self.head_hidden == 0 || self.gcn_hidden == 0 || self.heads == 0 {
            return Err(Error::Config("layer widths and head count must be positive".into()));
        }
        if self.seq_len == Some(0) {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        self.ddpm.schedule()?;
        if let Some(t) = self.translate_start {
            if t == 0 || t > self.ddpm.steps {
                return Err(Error::Config(format!("translate_start {t} outside [1, {}]", self.ddpm.steps)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

const STAGE_GCN: u64 = 1;
const STAGE_POINTER: u64 = 2;
const STAGE_PRETRAIN: u64 = 3;
const STAGE_DDPM: u64 = 4;
const STAGE_TRANSLATE: u64 = 5;
const STAGE_FINETUNE: u64 = 6;

fn stage_rng(seed: u64, stage: u64, aggregator: Option<Aggregator>) -> ChaCha8Rng {
    let a = match aggregator {
        None => 0,
        Some(Aggregator::Attention) => 1,
        Some(Aggregator::Mean) => 2,
    };
    diffusion::stream(seed, stage, a, 0)
}

fn translation_seed(seed: u64, round: usize) -> u64 {
    seed ^ (STAGE_TRANSLATE << 56) ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Two GAT layers and the classifier head.
#[derive(Debug, Clone)]
pub struct Stack {
    pub layer1: GatLayer,
    pub layer2: GatLayer,
    pub head: ClassifierHead,
}

impl Stack {
    pub fn new(in_dim: usize, cfg: &PipelineConfig, aggregator: Aggregator, rng: &mut ChaCha8Rng) -> Self {
        let mut layer1 = GatLayer::new(in_dim, cfg.hidden, cfg.heads, Activation::Relu, rng);
        let mut layer2 = GatLayer::new(cfg.hidden, cfg.hidden, cfg.heads, Activation::Identity, rng);
        layer1.aggregator = aggregator;
        layer2.aggregator = aggregator;
        let head = ClassifierHead::new(cfg.hidden, cfg.head_hidden, rng);
        Self { layer1, layer2, head }
    }

    /// `H¹ = GAT¹(A, X)`.
    pub fn embed(&self, g: &Graph) -> Result<Tensor> {
        self.layer1.forward(&Neighborhoods::vanilla(g), g.features())
    }

    /// Anomaly probabilities of every node given `H¹` and the second-layer
    /// neighborhoods.
    pub fn probabilities(&self, nb2: &Neighborhoods, h1: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let hv = tape.constant(h1.clone())?;
        let l2 = self.layer2.bind(&tape)?;
        let hd = self.head.bind(&tape)?;
        let z = self.layer2.forward_tape(&tape, nb2, hv, &l2)?;
        let p = self.head.forward_tape(&tape, z, &hd)?;
        let v = tape.value(p).data().to_vec();
        Ok(v)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.layer1.save(ck, "gat1");
        self.layer2.save(ck, "gat2");
        self.head.save(ck, "head");
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.layer1.load(ck, "gat1")?;
        self.layer2.load(ck, "gat2")?;
        self.head.load(ck, "head")
    }
}

/// Second-layer representations `Z` with the overrides substituted into
/// their targets' neighborhoods; empty overrides give the vanilla stack.
pub fn counterfactual_forward(stack: &Stack, g: &Graph, overrides: &Overrides) -> Result<Tensor> {
    let h1 = stack.embed(g)?;
    let nb2 = Neighborhoods::with_overrides(g, overrides)?;
    stack.layer2.forward(&nb2, &h1)
}

/// Unsupervised detector: GCN embeddings, the pointer network and `η`.
#[derive(Debug, Clone)]
pub struct Detector {
    pub gcn: GcnLayer,
    pub pointer: PointerNet,
    pub eta: f64,
    pub seq_len: usize,
    pub pointer_loss: Vec<f64>,
}

impl Detector {
    pub fn train(g: &Graph, cfg: &PipelineConfig) -> Result<Self> {
        let mut rng = stage_rng(cfg.seed, STAGE_GCN, None);
        let gcn = GcnLayer::new(g.feature_dim(), cfg.gcn_hidden, &mut rng);
        let seq_len = cfg.seq_len.unwrap_or_else(|| g.default_seq_len());
        let (xh, seqs) = Self::inputs(&gcn, g, seq_len, cfg)?;
        let mut rng = stage_rng(cfg.seed, STAGE_POINTER, None);
        let (net, pointer_loss) = pointer::train_pointer(&xh, g.features(), &seqs, &cfg.pointer, &mut rng)?;
        let scored = pointer::scored_nodes(&seqs, &net.score(&xh, &seqs)?);
        let eta = match cfg.eta {
            Some(e) => e,
            None => pointer::calibrate_eta(&scored, g, cfg.alpha)?,
        };
        Ok(Self {
            gcn,
            pointer: net,
            eta,
            seq_len,
            pointer_loss,
        })
    }

    fn inputs(gcn: &GcnLayer, g: &Graph, seq_len: usize, cfg: &PipelineConfig) -> Result<(Tensor, Vec<crate::graph::NeighborSequence>)> {
        let adj = NormalizedAdjacency::new(g);
        let xh = pointer::center_rows(&gcn.forward(&adj, g.features())?);
        let seqs = pointer::build_sequences(g, seq_len, cfg.truncation, cfg.seed)?;
        Ok((xh, seqs))
    }

    /// Scores every node's neighbors and flags heterophilic nodes.
    pub fn report(&self, g: &Graph, cfg: &PipelineConfig) -> Result<HeterophilyReport> {
        if g.feature_dim() != self.gcn.weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "detector",
                left: vec![g.n(), g.feature_dim()],
                right: self.gcn.weight.shape().to_vec(),
            });
        }
        let (xh, seqs) = Self::inputs(&self.gcn, g, self.seq_len, cfg)?;
        let scored = pointer::scored_nodes(&seqs, &self.pointer.score(&xh, &seqs)?);
        Ok(pointer::detect(&scored, self.eta, cfg.alpha))
    }
}

/// Translation stage for one aggregator: the DDPM on `H¹` and the anomaly
/// reference from training anomalies.
#[derive(Debug, Clone)]
pub struct Generator {
    pub net: NoisePredictor,
    pub reference: Reference,
    pub loss: Vec<f64>,
}

impl Generator {
    pub fn train(h1: &Tensor, g: &Graph, cfg: &PipelineConfig, aggregator: Aggregator) -> Result<Self> {
        let anomalies: Vec<NodeId> = g
            .splits()
            .nodes(Split::Train)
            .into_iter()
            .filter(|&v| g.labels()[v] == 1)
            .collect();
        let reference = Reference::from_nodes(h1, g, &anomalies)?;
        let mut rng = stage_rng(cfg.seed, STAGE_DDPM, Some(aggregator));
        let (net, loss) = diffusion::train_ddpm(h1, &cfg.ddpm.schedule()?, &cfg.ddpm, &mut rng)?;
        Ok(Self { net, reference, loss })
    }

    /// Translated embeddings of the planned `(target, source)` pairs.
    pub fn translate(
        &self,
        h1: &Tensor,
        g: &Graph,
        pairs: &[(NodeId, NodeId)],
        cfg: &PipelineConfig,
        round: usize,
    ) -> Result<BTreeMap<(NodeId, NodeId), Vec<f64>>> {
        let tcfg = diffusion::TranslateConfig {
            gamma: cfg.gamma,
            start_step: cfg.translate_start,
        };
        let sched = cfg.ddpm.schedule()?;
        let out = diffusion::translate(
            &self.net,
            &sched,
            h1,
            g,
            pairs,
            &self.reference,
            &tcfg,
            translation_seed(cfg.seed, round),
            None,
        )?;
        Ok(pairs.iter().enumerate().map(|(i, &p)| (p, out.row(i).to_vec())).collect())
    }
}

/// Trained pipeline: everything needed to re-run detection, translation
/// and classification on a graph.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: PipelineConfig,
    pub detector: Option<Detector>,
    pub stack: Stack,
    pub generator: Option<Generator>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub p: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub metrics: SplitMetrics,
    pub threshold: f64,
    pub best_epoch: usize,
    pub pretrain_loss: Vec<f64>,
    pub finetune_loss: Vec<f64>,
    pub pointer_loss: Vec<f64>,
    pub ddpm_loss: Vec<f64>,
    pub eta: Option<f64>,
    pub heterophilic_count: usize,
    pub planned_nodes: usize,
    pub translated_count: usize,
    pub config_hash: String,
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn split_truth(g: &Graph, split: Split) -> (Vec<NodeId>, Vec<u8>) {
    let nodes = g.splits().nodes(split);
    let truth = nodes.iter().map(|&v| g.labels()[v]).collect();
    (nodes, truth)
}

fn split_metrics(g: &Graph, probs: &[f64], split: Split, threshold: f64) -> Result<Metrics> {
    let (nodes, truth) = split_truth(g, split);
    let p: Vec<f64> = nodes.iter().map(|&v| probs[v]).collect();
    metrics::evaluate(&p, &truth, threshold)
}

fn val_f1(g: &Graph, probs: &[f64], threshold: f64) -> f64 {
    let (nodes, truth) = split_truth(g, Split::Val);
    let pred: Vec<u8> = nodes.iter().map(|&v| u8::from(probs[v] >= threshold)).collect();
    metrics::macro_f1(&pred, &truth).unwrap_or(0.0)
}

/// Threshold maximizing validation macro-F1 over the validation scores.
fn tune_threshold(g: &Graph, probs: &[f64], default: f64) -> f64 {
    let (nodes, _) = split_truth(g, Split::Val);
    let mut cands: Vec<f64> = nodes.iter().map(|&v| probs[v]).filter(|p| *p > 0.0 && *p < 1.0).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (val_f1(g, probs, default), default);
    for t in cands {
        let f = val_f1(g, probs, t);
        if f > best.0 {
            best = (f, t);
        }
    }
    best.1
}

fn phi(g: &Graph, rule: PhiRule) -> Result<f64> {
    let train = g.splits().nodes(Split::Train);
    let a = train.iter().filter(|&&v| g.labels()[v] == 1).count();
    let n = train.len() - a;
    if a == 0 || n == 0 {
        return Err(Error::InvalidArgument("training mask needs both classes".into()));
    }
    Ok(match rule {
        PhiRule::NormalOverAnomaly => n as f64 / a as f64,
        PhiRule::AnomalyOverNormal => a as f64 / n as f64,
    })
}

/// Per-node loss weights: the class weight on training nodes, zero elsewhere.
fn loss_weights(g: &Graph, phi: f64) -> (Vec<f64>, Vec<f64>) {
    let labels: Vec<f64> = g.labels().iter().map(|&y| f64::from(y)).collect();
    let mut w = class_weights(&labels, phi);
    for (v, w) in w.iter_mut().enumerate() {
        if g.splits().get(v) != Split::Train {
            *w = 0.0;
        }
    }
    (labels, w)
}

/// The vanilla stack with every layer trained; returns the best-validation
/// stack and the loss trace.
fn pretrain(g: &Graph, cfg: &PipelineConfig, aggregator: Aggregator) -> Result<(Stack, Vec<f64>)> {
    let mut rng = stage_rng(cfg.seed, STAGE_PRETRAIN, Some(aggregator));
    let mut stack = Stack::new(g.feature_dim(), cfg, aggregator, &mut rng);
    let nb = Neighborhoods::vanilla(g);
    let (labels, weights) = loss_weights(g, phi(g, cfg.phi)?);
    let mut opt = AdamState::new(cfg.lr);
    let mut best = (f64::NEG_INFINITY, stack.clone());
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let tape = Tape::new();
        let x = tape.constant(g.features().clone())?;
        let v1 = stack.layer1.bind(&tape)?;
        let v2 = stack.layer2.bind(&tape)?;
        let vh = stack.head.bind(&tape)?;
        let h1 = stack.layer1.forward_tape(&tape, &nb, x, &v1)?;
        let z = stack.layer2.forward_tape(&tape, &nb, h1, &v2)?;
        let p = stack.head.forward_tape(&tape, z, &vh)?;
        let probs = tape.value(p).data().to_vec();
        let f1 = val_f1(g, &probs, cfg.threshold);
        if f1 > best.0 {
            best = (f1, stack.clone());
        }
        let loss = tape.weighted_bce(p, &labels, &weights)?;
        let lv = tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("pretraining loss {lv} at epoch {epoch}")));
        }
        trace.push(lv);
        tape.backward(loss)?;
        stack.layer1.store_grads(&tape, &v1);
        stack.layer2.store_grads(&tape, &v2);
        stack.head.store_grads(&tape, &vh);
        let mut params = stack.layer1.params_mut();
        params.extend(stack.layer2.params_mut());
        params.extend(stack.head.params_mut());
        opt.step(&mut params)?;
    }
    let probs = stack.probabilities(&nb, &stack.embed(g)?)?;
    if val_f1(g, &probs, cfg.threshold) > best.0 {
        best.1 = stack;
    }
    Ok((best.1, trace))
}

fn overrides_for(
    mode: OverrideMode,
    plan: &CounterfactualPlan,
    translations: &BTreeMap<(NodeId, NodeId), Vec<f64>>,
) -> Result<Overrides> {
    let mut ov = Overrides::new(mode);
    for pair in plan.pairs() {
        let emb = translations
            .get(&pair)
            .ok_or_else(|| Error::InvalidArgument(format!("no translation for pair {pair:?}")))?;
        ov.insert(pair.0, pair.1, emb.clone());
    }
    Ok(ov)
}

/// Stage 4: second layer and head trained on fixed `H¹` with overrides.
/// `regenerate` rebuilds the overrides for a given round.
fn finetune(
    g: &Graph,
    cfg: &PipelineConfig,
    mut stack: Stack,
    h1: &Tensor,
    mut overrides: Overrides,
    regenerate: &mut dyn FnMut(usize) -> Result<Overrides>,
) -> Result<(Stack, Overrides, usize, Vec<f64>)> {
    let (labels, weights) = loss_weights(g, phi(g, cfg.phi)?);
    // Layer 2 and the head restart from a fresh draw on the frozen H¹.
    let mut rng = stage_rng(cfg.seed, STAGE_FINETUNE, Some(stack.layer1.aggregator));
    let fresh = Stack::new(stack.layer1.in_dim(), cfg, stack.layer1.aggregator, &mut rng);
    stack.layer2 = fresh.layer2;
    stack.head = fresh.head;
    let mut nb = Neighborhoods::with_overrides(g, &overrides)?;
    let mut opt = AdamState::new(cfg.lr);
    let mut best = (
        val_f1(g, &stack.probabilities(&nb, h1)?, cfg.threshold),
        stack.clone(),
        overrides.clone(),
        0,
    );
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.regenerate_every > 0 && epoch > 1 && (epoch - 1) % cfg.regenerate_every == 0 {
            overrides = regenerate((epoch - 1) / cfg.regenerate_every)?;
            nb = Neighborhoods::with_overrides(g, &overrides)?;
        }
        let tape = Tape::new();
        let hv = tape.constant(h1.clone())?;
        let v2 = stack.layer2.bind(&tape)?;
        let vh = stack.head.bind(&tape)?;
        let z = stack.layer2.forward_tape(&tape, &nb, hv, &v2)?;
        let p = stack.head.forward_tape(&tape, z, &vh)?;
        let loss = tape.weighted_bce(p, &labels, &weights)?;
        let lv = tape.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("fine-tuning loss {lv} at epoch {epoch}")));
        }
        trace.push(lv);
        tape.backward(loss)?;
        stack.layer2.store_grads(&tape, &v2);
        stack.head.store_grads(&tape, &vh);
        let mut params = stack.layer2.params_mut();
        params.extend(stack.head.params_mut());
        opt.step(&mut params)?;
        let f1 = val_f1(g, &stack.probabilities(&nb, h1)?, cfg.threshold);
        if f1 > best.0 {
            best = (f1, stack.clone(), overrides.clone(), epoch);
        }
    }
    Ok((best.1, best.2, best.3, trace))
}

struct Translated {
    generator: Generator,
    /// Translations of every pair in the full (`p = 1`) plan.
    pairs: BTreeMap<(NodeId, NodeId), Vec<f64>>,
}

/// Cache of the stages shared across ablations and plan fractions of one
/// graph and base configuration.
pub struct Session<'g> {
    g: &'g Graph,
    base: PipelineConfig,
    detector: Option<Detector>,
    report: Option<HeterophilyReport>,
    pretrained: HashMap<Aggregator, (Stack, Vec<f64>)>,
    translated: HashMap<Aggregator, Translated>,
}

impl<'g> Session<'g> {
    pub fn new(g: &'g Graph, base: PipelineConfig) -> Result<Self> {
        base.validate()?;
        if g.splits().count(Split::Train) == 0 {
            return Err(Error::InvalidArgument("graph has no training split".into()));
        }
        Ok(Self {
            g,
            base,
            detector: None,
            report: None,
            pretrained: HashMap::new(),
            translated: HashMap::new(),
        })
    }

    fn detection(&mut self) -> Result<(&Detector, &HeterophilyReport)> {
        if self.detector.is_none() {
            let d = Detector::train(self.g, &self.base)?;
            self.report = Some(d.report(self.g, &self.base)?);
            self.detector = Some(d);
        }
        Ok((self.detector.as_ref().expect("set"), self.report.as_ref().expect("set")))
    }

    /// Replaces the detected heterophily report, e.g. with an external
    /// detector's flags. Later runs plan from `report`.
    pub fn set_report(&mut self, report: HeterophilyReport) -> Result<()> {
        self.detection()?;
        self.report = Some(report);
        self.translated.clear();
        Ok(())
    }

    /// The current heterophily report, running detection if needed.
    pub fn report(&mut self) -> Result<&HeterophilyReport> {
        Ok(self.detection()?.1)
    }

    fn pretrained(&mut self, agg: Aggregator) -> Result<(Stack, Vec<f64>)> {
        if !self.pretrained.contains_key(&agg) {
            let v = pretrain(self.g, &self.base, agg)?;
            self.pretrained.insert(agg, v);
        }
        Ok(self.pretrained[&agg].clone())
    }

    fn translated(&mut self, agg: Aggregator, stack: &Stack) -> Result<&Translated> {
        if !self.translated.contains_key(&agg) {
            let fraction = self.base.translate_fraction;
            let full_plan = {
                let (_, report) = self.detection()?;
                pointer::select_sources(report, fraction, 1.0)?
            };
            let h1 = stack.embed(self.g)?;
            let generator = Generator::train(&h1, self.g, &self.base, agg)?;
            let pairs: Vec<(NodeId, NodeId)> = full_plan.pairs().collect();
            let t = generator.translate(&h1, self.g, &pairs, &self.base, 0)?;
            self.translated.insert(agg, Translated { generator, pairs: t });
        }
        Ok(&self.translated[&agg])
    }

    /// Trains one ablation at heterophilic fraction `p`.
    pub fn run(&mut self, ablation: Ablation, p: f64) -> Result<(RunResult, Model)> {
        let start = Instant::now();
        let mut cfg = self.base.clone();
        cfg.ablation = ablation;
        cfg.heterophilic_fraction = p;
        cfg.validate()?;
        let g = self.g;
        let agg = ablation.aggregator();
        let (stack, pretrain_loss) = self.pretrained(agg)?;
        let h1 = stack.embed(g)?;

        let mut heterophilic_count = 0;
        let mut plan = CounterfactualPlan::default();
        let mut detector = None;
        let mut generator = None;
        let mut overrides = Overrides::new(ablation.override_mode());
        if ablation.uses_plan() {
            let (d, report) = self.detection()?;
            heterophilic_count = report.heterophilic_count();
            plan = pointer::select_sources(report, cfg.translate_fraction, p)?;
            detector = Some(d.clone());
            if plan.is_empty() {
                log::warn!("no heterophilic nodes detected; {ablation} falls back to vanilla training");
            } else {
                let t = self.translated(agg, &stack)?;
                overrides = overrides_for(ablation.override_mode(), &plan, &t.pairs)?;
                generator = Some(t.generator.clone());
            }
        }
        let mut regenerate = |round: usize| -> Result<Overrides> {
            let gen = generator.as_ref().expect("regeneration needs a generator");
            let pairs: Vec<(NodeId, NodeId)> = plan.pairs().collect();
            overrides_for(ablation.override_mode(), &plan, &gen.translate(&h1, g, &pairs, &cfg, round)?)
        };
        let regen_possible = generator.is_some() && cfg.regenerate_every > 0;
        let mut no_regen = |_: usize| Ok(Overrides::new(ablation.override_mode()));
        let mut fcfg = cfg.clone();
        if !regen_possible {
            fcfg.regenerate_every = 0;
        }
        let (stack, overrides, best_epoch, finetune_loss) = if regen_possible {
            finetune(g, &fcfg, stack, &h1, overrides, &mut regenerate)?
        } else {
            finetune(g, &fcfg, stack, &h1, overrides, &mut no_regen)?
        };

        let nb2 = Neighborhoods::with_overrides(g, &overrides)?;
        let probs = stack.probabilities(&nb2, &h1)?;
        let threshold = if cfg.tune_threshold {
            tune_threshold(g, &probs, cfg.threshold)
        } else {
            cfg.threshold
        };
        let metric = |s| match split_metrics(g, &probs, s, threshold) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("{s:?} metrics unavailable: {e}");
                None
            }
        };
        let metrics = SplitMetrics {
            train: metric(Split::Train),
            val: metric(Split::Val),
            test: metric(Split::Test),
        };
        let (ddpm_loss, pointer_loss) = (
            generator.as_ref().map(|g| g.loss.clone()).unwrap_or_default(),
            detector.as_ref().map(|d| d.pointer_loss.clone()).unwrap_or_default(),
        );
        let result = RunResult {
            ablation,
            seed: cfg.seed,
            p,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            metrics,
            threshold,
            best_epoch,
            pretrain_loss,
            finetune_loss,
            pointer_loss,
            ddpm_loss,
            eta: detector.as_ref().map(|d| d.eta),
            heterophilic_count,
            planned_nodes: plan.len(),
            translated_count: overrides.len(),
            config_hash: cfg.hash(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        let model = Model {
            config: cfg,
            detector,
            stack,
            generator,
            threshold,
        };
        Ok((result, model))
    }
}

/// Runs the staged pipeline for `cfg.ablation` and `cfg.heterophilic_fraction`.
pub fn train(g: &Graph, cfg: &PipelineConfig) -> Result<(RunResult, Model)> {
    Session::new(g, cfg.clone())?.run(cfg.ablation, cfg.heterophilic_fraction)
}

impl Model {
    /// Re-runs detection and translation on `g` and returns the plan and the
    /// overrides the classifier sees.
    pub fn counterfactuals(&self, g: &Graph) -> Result<(CounterfactualPlan, Overrides)> {
        let cfg = &self.config;
        let mode = cfg.ablation.override_mode();
        let (Some(det), Some(gen)) = (&self.detector, &self.generator) else {
            return Ok((CounterfactualPlan::default(), Overrides::new(mode)));
        };
        let report = det.report(g, cfg)?;
        let plan = pointer::select_sources(&report, cfg.translate_fraction, cfg.heterophilic_fraction)?;
        let h1 = self.stack.embed(g)?;
        let pairs: Vec<(NodeId, NodeId)> = plan.pairs().collect();
        let t = gen.translate(&h1, g, &pairs, cfg, 0)?;
        let ov = overrides_for(mode, &plan, &t)?;
        Ok((plan, ov))
    }

    /// Anomaly probabilities of every node of `g`.
    pub fn probabilities(&self, g: &Graph) -> Result<Vec<f64>> {
        if g.feature_dim() != self.stack.layer1.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                left: vec![g.n(), g.feature_dim()],
                right: vec![g.n(), self.stack.layer1.in_dim()],
            });
        }
        let (_, ov) = self.counterfactuals(g)?;
        let nb2 = Neighborhoods::with_overrides(g, &ov)?;
        self.stack.probabilities(&nb2, &self.stack.embed(g)?)
    }

    /// Metrics on the nodes where `mask` is set.
    pub fn evaluate(&self, g: &Graph, mask: &[bool]) -> Result<Metrics> {
        if mask.len() != g.n() {
            return Err(Error::LengthMismatch(format!("mask of {} for {} nodes", mask.len(), g.n())));
        }
        let probs = self.probabilities(g)?;
        let (p, y): (Vec<f64>, Vec<u8>) = (0..g.n()).filter(|&v| mask[v]).map(|v| (probs[v], g.labels()[v])).unzip();
        metrics::evaluate(&p, &y, self.threshold)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_meta("config", serde_json::to_string(&self.config)?);
        ck.put_meta("config_hash", self.config.hash());
        ck.put_meta("threshold", format!("{:?}", self.threshold));
        ck.put_meta("in_dim", self.stack.layer1.in_dim().to_string());
        self.stack.save(&mut ck);
        if let Some(d) = &self.detector {
            ck.put_meta("eta", format!("{:?}", d.eta));
            ck.put_meta("seq_len", d.seq_len.to_string());
            ck.put("gcn.W", &d.gcn.weight);
            d.pointer.save(&mut ck, "pointer");
        }
        if let Some(gen) = &self.generator {
            gen.net.save(&mut ck, "ddpm");
            let r = &gen.reference;
            let d = r.embedding.len();
            ck.put("reference.embedding", &Tensor::matrix(1, d, r.embedding.clone())?);
            ck.put("reference.neighborhood", &Tensor::matrix(1, d, r.neighborhood.clone())?);
            ck.put_meta("reference.aggregate_scale", format!("{:?}", r.aggregate_scale));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(ck.meta("config")?)?;
        if ck.meta("config_hash")? != config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let float = |k: &str| -> Result<f64> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta {k} is not a number")))
        };
        let in_dim: usize = ck
            .meta("in_dim")?
            .parse()
            .map_err(|_| Error::Checkpoint("meta in_dim is not an integer".into()))?;
        let mut rng = stage_rng(0, 0, None);
        let mut stack = Stack::new(in_dim, &config, config.ablation.aggregator(), &mut rng);
        stack.load(ck)?;
        let detector = if ck.meta("eta").is_ok() {
            let w = ck.tensor("gcn.W")?.clone();
            Some(Detector {
                gcn: GcnLayer {
                    weight: w,
                    activation: Activation::Relu,
                },
                pointer: PointerNet::load(ck, "pointer")?,
                eta: float("eta")?,
                seq_len: ck
                    .meta("seq_len")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("meta seq_len is not an integer".into()))?,
                pointer_loss: Vec::new(),
            })
        } else {
            None
        };
        let generator = if ck.tensor("reference.embedding").is_ok() {
            Some(Generator {
                net: NoisePredictor::load(ck, "ddpm", config.ddpm.time_width)?,
                reference: Reference {
                    embedding: ck.tensor("reference.embedding")?.data().to_vec(),
                    neighborhood: ck.tensor("reference.neighborhood")?.data().to_vec(),
                    aggregate_scale: float("reference.aggregate_scale")?,
                },
                loss: Vec::new(),
            })
        } else {
            None
        };
        Ok(Self {
            threshold: float("threshold")?,
            config,
            detector,
            stack,
            generator,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Logistic-regression probe `σ(w·z + b)` fitted with Adam on the given
/// rows; returns a scoring closure's parameters `(w, b)`.
pub fn linear_probe(z: &Tensor, labels: &[u8], epochs: usize, lr: f64) -> Result<(Vec<f64>, f64)> {
    let d = z.cols();
    let mut w = Tensor::zeros(&[d, 1]).into_param();
    let mut b = Tensor::zeros(&[1, 1]).into_param();
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let pos = labels.iter().filter(|&&v| v == 1).count().max(1) as f64;
    let neg = (labels.len() as f64 - pos).max(1.0);
    let weights: Vec<f64> = labels.iter().map(|&v| if v == 1 { 0.5 / pos } else { 0.5 / neg }).collect();
    let mut opt = AdamState::new(lr);
    for _ in 0..epochs {
        let tape = Tape::new();
        let zv = tape.constant(z.clone())?;
        let (wv, bv) = (tape.param(&w)?, tape.param(&b)?);
        let p = tape.sigmoid(tape.add_row(tape.matmul(zv, wv)?, bv)?)?;
        let loss = tape.weighted_bce(p, &y, &weights)?;
        tape.backward(loss)?;
        tape.store_grad(wv, &mut w);
        tape.store_grad(bv, &mut b);
        opt.step(&mut [&mut w, &mut b])?;
    }
    Ok((w.data().to_vec(), b.data()[0]))
}
