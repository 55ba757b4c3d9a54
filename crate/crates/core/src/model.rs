//! The neighborhood uncertainty classifier: a small permutation-invariant
//! network that maps a point's kNN neighborhood (plus the upstream
//! model's confidence) to the probability that the upstream prediction is
//! wrong.
//!
//! Architecture: each neighbor row `[distance, agreement flag]` goes
//! through a per-row affine map and the k mapped rows are summed. Because
//! the bias is applied per row, the aggregate carries a `k * bias` term
//! and the network sees k through the magnitude of the sum. Layers after
//! the first act on the aggregated vector, each an affine map followed by
//! ReLU (the nonlinearity sits after aggregation, so with a single layer
//! the whole model is linear). The upstream confidence is concatenated to
//! the final aggregated representation, and a linear head produces 2
//! logits over {correct, error}. The reported score `u` is the softmax
//! probability of the error class.
//!
//! Training is plain supervised learning on in-distribution mistakes:
//! binary cross entropy against `t = 1` iff the upstream prediction was
//! correct, with exact backpropagation and Adam. Everything is seeded and
//! reduction orders are fixed, so a (seed, config, data) triple always
//! produces bit-identical weights.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{KnnIndex, NeighborQuery};
use crate::repr_store::{correctness_labels, ReprSet};

/// Which inputs the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpec {
    /// Per-neighbor `[distance, flag]` rows plus the upstream confidence.
    DistFlagConf,
    /// Per-neighbor rows only (the confidence-ablated variant).
    DistFlag,
}

impl FeatureSpec {
    pub const DIST_FLAG_CONF: &'static str = "dist+flag+conf";
    pub const DIST_FLAG: &'static str = "dist+flag";

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSpec::DistFlagConf => Self::DIST_FLAG_CONF,
            FeatureSpec::DistFlag => Self::DIST_FLAG,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            Self::DIST_FLAG_CONF => Ok(FeatureSpec::DistFlagConf),
            Self::DIST_FLAG => Ok(FeatureSpec::DistFlag),
            other => Err(Error::Format(format!("unknown feature_spec {other:?}"))),
        }
    }

    fn global_dim(self) -> usize {
        match self {
            FeatureSpec::DistFlagConf => 1,
            FeatureSpec::DistFlag => 0,
        }
    }
}

/// Per-neighbor input dimensionality: `[distance, agreement flag]`.
pub const ROW_DIM: usize = 2;

/// Featurized neighborhood of one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodFeatures {
    /// k rows of `[distance, agreement flag]`, in neighbor order. The
    /// network output is insensitive to this order.
    pub per_neighbor: Vec<[f64; ROW_DIM]>,
    /// Upstream max-softmax confidence of the predicted label.
    pub confidence: f64,
}

impl NeighborhoodFeatures {
    pub fn k(&self) -> usize {
        self.per_neighbor.len()
    }
}

/// Builds the network inputs from a kNN result: row j holds the j-th
/// neighbor's distance and a 0/1 flag for whether its ground-truth label
/// equals `pred_label`; the upstream confidence rides along as the global
/// feature.
pub fn featurize(nq: &NeighborQuery, pred_label: u32, confidence: f64) -> NeighborhoodFeatures {
    debug_assert!((0.0..=1.0).contains(&confidence));
    let per_neighbor = nq
        .distances
        .iter()
        .zip(&nq.neighbor_labels)
        .map(|(d, y)| [*d, f64::from(*y == pred_label)])
        .collect();
    NeighborhoodFeatures { per_neighbor, confidence }
}

/// A dense affine map, `out_dim x in_dim` weights stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { weights: vec![0.0; in_dim * out_dim], biases: vec![0.0; out_dim], in_dim, out_dim }
    }

    fn glorot(in_dim: usize, out_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let a = scale * (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect();
        Linear { weights, biases: vec![0.0; out_dim], in_dim, out_dim }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.biases))
        {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NucHyper {
    /// Number of aggregation-path layers (1 = linear model).
    pub layers: usize,
    pub hidden_width: usize,
    /// Neighborhood size the network was trained with.
    pub k: usize,
    pub feature_spec: FeatureSpec,
}

/// The uncertainty network: `layers` affine maps on the aggregation path
/// and a 2-logit head over the final representation (plus confidence).
#[derive(Debug, Clone, PartialEq)]
pub struct NucNetwork {
    pub layers: Vec<Linear>,
    pub head: Linear,
    pub hyper: NucHyper,
}

impl NucNetwork {
    /// Logit weight the confidence input starts with: the head opens as
    /// a monotone function of the upstream confidence (the softmax
    /// baseline) and training reweights it against the neighborhood
    /// signal.
    pub const CONFIDENCE_ANCHOR: f64 = 2.0;

    /// Seeded initialization. The first layer's scale is divided by k to
    /// compensate for the k-fold sum that follows it.
    pub fn init(hyper: NucHyper, rng: &mut ChaCha8Rng) -> Result<Self> {
        if hyper.layers == 0 || hyper.hidden_width == 0 || hyper.k == 0 {
            return Err(Error::Config("layers, hidden_width and k must be >= 1".into()));
        }
        let h = hyper.hidden_width;
        let mut layers = Vec::with_capacity(hyper.layers);
        layers.push(Linear::glorot(ROW_DIM, h, 1.0 / hyper.k as f64, rng));
        for _ in 1..hyper.layers {
            layers.push(Linear::glorot(h, h, 1.0, rng));
        }
        let mut head = Linear::glorot(h + hyper.feature_spec.global_dim(), 2, 1.0, rng);
        if hyper.feature_spec == FeatureSpec::DistFlagConf {
            let col = head.in_dim - 1;
            head.weights[col] = Self::CONFIDENCE_ANCHOR; // "correct" logit
            head.weights[head.in_dim + col] = -Self::CONFIDENCE_ANCHOR; // "error" logit
        }
        Ok(NucNetwork { layers, head, hyper })
    }

    /// All-zero weights and biases; useful as a reference point (its
    /// output is exactly u = 0.5 for any input).
    pub fn zeros(hyper: NucHyper) -> Self {
        let h = hyper.hidden_width;
        let mut layers = vec![Linear::zeros(ROW_DIM, h)];
        for _ in 1..hyper.layers {
            layers.push(Linear::zeros(h, h));
        }
        let head = Linear::zeros(h + hyper.feature_spec.global_dim(), 2);
        NucNetwork { layers, head, hyper }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum::<usize>() + self.head.param_count()
    }

    /// Flattens all parameters in a fixed order (layer weights, layer
    /// biases, ..., head weights, head biases).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.biases);
        }
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.to_flat().iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("network contains non-finite weights".into()))
        }
    }
}

/// Forward-pass intermediates kept for backpropagation.
struct ForwardCache {
    /// Row-sum of the per-neighbor inputs.
    row_sum: [f64; ROW_DIM],
    /// Activations after each layer (post-ReLU where applicable),
    /// `acts[0]` is the aggregated first-layer output.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of layers 2..L (needed for the ReLU derivative).
    pre_acts: Vec<Vec<f64>>,
    head_input: Vec<f64>,
    probs: [f64; 2],
}

fn forward_impl(net: &NucNetwork, f: &NeighborhoodFeatures) -> Result<([f64; 2], f64, ForwardCache)> {
    if f.k() == 0 {
        return Err(Error::Shape { expected: 1, got: 0 });
    }
    let h = net.hyper.hidden_width;

    let mut row_sum = [0.0f64; ROW_DIM];
    for row in &f.per_neighbor {
        for (s, v) in row_sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    // Sum of per-row affine maps == map of the row sum with the bias
    // scaled by k.
    let k = f.k() as f64;
    let first = &net.layers[0];
    let mut agg = vec![0.0f64; h];
    first.apply(&row_sum, &mut agg);
    for (a, b) in agg.iter_mut().zip(&first.biases) {
        *a += (k - 1.0) * b; // apply() added the bias once already
    }

    let mut acts = Vec::with_capacity(net.layers.len());
    let mut pre_acts = Vec::with_capacity(net.layers.len().saturating_sub(1));
    acts.push(agg);
    for layer in &net.layers[1..] {
        let mut z = vec![0.0f64; layer.out_dim];
        layer.apply(acts.last().unwrap(), &mut z);
        pre_acts.push(z.clone());
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        acts.push(z);
    }

    let mut head_input = acts.last().unwrap().clone();
    if net.hyper.feature_spec == FeatureSpec::DistFlagConf {
        head_input.push(f.confidence);
    }
    if head_input.len() != net.head.in_dim {
        return Err(Error::Shape { expected: net.head.in_dim, got: head_input.len() });
    }
    let mut logits = [0.0f64; 2];
    net.head.apply(&head_input, &mut logits);

    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let probs = [e0 / z, e1 / z];
    Ok((logits, probs[1], ForwardCache { row_sum, acts, pre_acts, head_input, probs }))
}

/// Runs the network on one featurized neighborhood.
///
/// Returns the two class logits (`[correct, error]`) and
/// `u = P(error) = softmax(logits)[1]`.
pub fn forward(net: &NucNetwork, f: &NeighborhoodFeatures) -> Result<([f64; 2], f64)> {
    forward_impl(net, f).map(|(logits, u, _)| (logits, u))
}

/// Binary cross entropy of the error probability `u` against the
/// correctness target `t` (1 = upstream was correct):
/// `-t ln(1-u) - (1-t) ln(u)`.
///
/// This is the definitional form; training uses [`loss_from_logits`],
/// which computes the same quantity in logit space and never evaluates
/// `ln` near zero.
pub fn bce_loss(u: f64, t: u8) -> f64 {
    debug_assert!(u > 0.0 && u < 1.0, "u must lie strictly in (0,1)");
    if t == 1 {
        -(1.0 - u).ln()
    } else {
        -u.ln()
    }
}

/// Cross entropy from the 2-logit head in logit space:
/// `logsumexp(logits) - logits[target]` with target class 0 ("correct")
/// when `t == 1`.
pub fn loss_from_logits(logits: [f64; 2], t: u8) -> f64 {
    let target = if t == 1 { 0 } else { 1 };
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[target]
}

/// Loss of one point under the current network.
pub fn point_loss(net: &NucNetwork, f: &NeighborhoodFeatures, t: u8) -> Result<f64> {
    let (logits, _, _) = forward_impl(net, f)?;
    Ok(loss_from_logits(logits, t))
}

/// Gradients of every parameter, in the same flat layout as
/// [`NucNetwork::to_flat`].
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    fn zeros(n: usize) -> Self {
        Gradients(vec![0.0; n])
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }
}

/// Exact gradient of the cross-entropy loss for one point with respect to
/// every network parameter.
pub fn backward(net: &NucNetwork, f: &NeighborhoodFeatures, t: u8) -> Result<Gradients> {
    let (_, _, cache) = forward_impl(net, f)?;
    let k = f.k() as f64;
    let target = if t == 1 { 0usize } else { 1 };

    // d loss / d logits = p - onehot(target)
    let mut dlogits = cache.probs;
    dlogits[target] -= 1.0;

    let head_w_grad: Vec<f64> = dlogits
        .iter()
        .flat_map(|d| cache.head_input.iter().map(move |v| d * v))
        .collect();
    let head_b_grad = dlogits.to_vec();

    let h = net.hyper.hidden_width;
    let mut d_act = vec![0.0f64; h];
    for (r, d) in dlogits.iter().enumerate() {
        let row = &net.head.weights[r * net.head.in_dim..(r + 1) * net.head.in_dim];
        for (da, w) in d_act.iter_mut().zip(row) {
            *da += d * w;
        }
    }

    // Walk the aggregation-path layers back to front.
    let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(net.layers.len());
    for li in (1..net.layers.len()).rev() {
        let layer = &net.layers[li];
        let pre = &cache.pre_acts[li - 1];
        let mut dz = d_act.clone();
        for (g, z) in dz.iter_mut().zip(pre) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        let input = &cache.acts[li - 1];
        let w_grad: Vec<f64> =
            dz.iter().flat_map(|d| input.iter().map(move |v| d * v)).collect();
        let b_grad = dz.clone();
        let mut d_input = vec![0.0f64; layer.in_dim];
        for (r, d) in dz.iter().enumerate() {
            let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (di, w) in d_input.iter_mut().zip(row) {
                *di += d * w;
            }
        }
        layer_grads.push((w_grad, b_grad));
        d_act = d_input;
    }

    // First layer: output was sum_j (W x_j + b) = W * row_sum + k * b.
    let w_grad: Vec<f64> =
        d_act.iter().flat_map(|d| cache.row_sum.iter().map(move |v| d * v)).collect();
    let b_grad: Vec<f64> = d_act.iter().map(|d| d * k).collect();
    layer_grads.push((w_grad, b_grad));
    layer_grads.reverse();

    let mut flat = Vec::with_capacity(net.param_count());
    for (w, b) in &layer_grads {
        flat.extend_from_slice(w);
        flat.extend_from_slice(b);
    }
    flat.extend_from_slice(&head_w_grad);
    flat.extend_from_slice(&head_b_grad);
    Ok(Gradients(flat))
}

/// Adam optimizer state (first/second moments plus the step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &Gradients, lr: f64) {
    assert_eq!(params.len(), state.m.len());
    assert_eq!(params.len(), grads.0.len());
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads.0[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}

/// Training configuration. Defaults follow the reference schedule: k=10,
/// learning rate 1e-3 annealed to 1e-4 after 40000 steps, one epoch,
/// two layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub lr_initial: f64,
    pub lr_annealed: f64,
    /// Optimizer step (1-based) after which the annealed rate applies.
    pub anneal_step: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub layers: usize,
    pub hidden_width: usize,
    pub use_confidence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            lr_initial: 1e-3,
            lr_annealed: 1e-4,
            anneal_step: 40_000,
            epochs: 1,
            batch_size: 64,
            seed: 0,
            layers: 2,
            hidden_width: 64,
            use_confidence: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("k, epochs and batch_size must be >= 1".into()));
        }
        if self.layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config("layers and hidden_width must be >= 1".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_annealed > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> NucHyper {
        NucHyper {
            layers: self.layers,
            hidden_width: self.hidden_width,
            k: self.k,
            feature_spec: if self.use_confidence {
                FeatureSpec::DistFlagConf
            } else {
                FeatureSpec::DistFlag
            },
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        if step <= self.anneal_step {
            self.lr_initial
        } else {
            self.lr_annealed
        }
    }
}

/// Precomputes the featurized self-excluded neighborhoods of every point
/// in `train_set`. Exposed so callers sweeping k can reuse one large
/// query via prefixes.
pub fn featurize_set(
    set: &ReprSet,
    queries: &[NeighborQuery],
) -> Vec<NeighborhoodFeatures> {
    queries
        .iter()
        .enumerate()
        .map(|(i, nq)| featurize(nq, set.pred_labels()[i], set.confidences()[i]))
        .collect()
}

/// Trains the uncertainty network on `train_set`, whose points must be in
/// `index` (queries are self-excluded). Fails if the upstream model is
/// never right or never wrong on the set — there is nothing to learn then.
pub fn train(train_set: &ReprSet, index: &KnnIndex<'_>, cfg: &TrainConfig) -> Result<NucNetwork> {
    cfg.validate()?;
    let targets = correctness_labels(train_set);
    let n_correct: usize = targets.iter().map(|t| *t as usize).sum();
    if n_correct == 0 || n_correct == targets.len() {
        return Err(Error::DegenerateTask(format!(
            "all {} training targets are {}; training needs both correct and incorrect \
             upstream predictions",
            targets.len(),
            if n_correct == 0 { "incorrect" } else { "correct" },
        )));
    }
    let queries = index.query_set(train_set, cfg.k, true)?;
    let features = featurize_set(train_set, &queries);
    train_on_features(&features, &targets, cfg)
}

/// Training loop over prefeaturized data. Deterministic for a fixed
/// (seed, config, data): the point order is a seeded shuffle and batch
/// gradients are reduced in a fixed order.
pub fn train_on_features(
    features: &[NeighborhoodFeatures],
    targets: &[u8],
    cfg: &TrainConfig,
) -> Result<NucNetwork> {
    cfg.validate()?;
    assert_eq!(features.len(), targets.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NucNetwork::init(cfg.hyper(), &mut rng)?;
    let mut adam = AdamState::new(net.param_count());
    let mut params = net.to_flat();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut step: u64 = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // Parallel per-point backward, then an order-stable reduce.
            // Tiny batches skip the thread pool; the result is identical.
            let grads: Vec<Gradients> = if batch.len() < 8 {
                batch
                    .iter()
                    .map(|&i| backward(&net, &features[i], targets[i]))
                    .collect::<Result<_>>()?
            } else {
                batch
                    .par_iter()
                    .map(|&i| backward(&net, &features[i], targets[i]))
                    .collect::<Result<_>>()?
            };
            let mut total = Gradients::zeros(params.len());
            for g in &grads {
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            step += 1;
            adam_step(&mut adam, &mut params, &total, cfg.lr_at(step));
            net.set_from_flat(&params);
        }
    }
    net.check_finite()?;
    Ok(net)
}

/// Mean loss of `net` over a featurized dataset.
pub fn mean_loss(net: &NucNetwork, features: &[NeighborhoodFeatures], targets: &[u8]) -> Result<f64> {
    assert!(!features.is_empty());
    let total: f64 = features
        .iter()
        .zip(targets)
        .map(|(f, t)| point_loss(net, f, *t))
        .sum::<Result<f64>>()?;
    Ok(total / features.len() as f64)
}

/// Scores every point of `set_query` against `index`: higher `u` means
/// the upstream prediction is more likely wrong. Queries are not
/// self-excluded — the query set is expected to be disjoint from the
/// indexed set.
pub fn score(
    net: &NucNetwork,
    index: &KnnIndex<'_>,
    set_query: &ReprSet,
    k: usize,
) -> Result<Vec<f64>> {
    let queries = index.query_set(set_query, k, false)?;
    score_queries(net, set_query, &queries)
}

/// Scoring over precomputed queries (order matches `set_query` rows).
pub fn score_queries(
    net: &NucNetwork,
    set_query: &ReprSet,
    queries: &[NeighborQuery],
) -> Result<Vec<f64>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, nq)| {
            let f = featurize(nq, set_query.pred_labels()[i], set_query.confidences()[i]);
            forward(net, &f).map(|(_, u)| u)
        })
        .collect()
}

// ---------------------------------------------------------------------
// Checkpoint file format (JSON, format_version 1).
// ---------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct LinearJson {
    /// out_dim rows of in_dim weights.
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointJson {
    format_version: u32,
    k: usize,
    #[serde(rename = "L")]
    layers: usize,
    hidden_width: usize,
    #[serde(rename = "layers")]
    layer_params: Vec<LinearJson>,
    head: LinearJson,
    feature_spec: String,
}

fn linear_to_json(l: &Linear) -> LinearJson {
    LinearJson {
        weights: l.weights.chunks_exact(l.in_dim).map(<[f64]>::to_vec).collect(),
        biases: l.biases.clone(),
    }
}

fn linear_from_json(j: &LinearJson, expect_in: usize, expect_out: usize) -> Result<Linear> {
    if j.weights.len() != expect_out || j.biases.len() != expect_out {
        return Err(Error::Format(format!(
            "checkpoint layer has {} rows / {} biases, expected {}",
            j.weights.len(),
            j.biases.len(),
            expect_out
        )));
    }
    let mut weights = Vec::with_capacity(expect_in * expect_out);
    for row in &j.weights {
        if row.len() != expect_in {
            return Err(Error::Format(format!(
                "checkpoint weight row has {} columns, expected {expect_in}",
                row.len()
            )));
        }
        weights.extend_from_slice(row);
    }
    Ok(Linear { weights, biases: j.biases.clone(), in_dim: expect_in, out_dim: expect_out })
}

/// Serializes a network to the JSON checkpoint format. Output bytes are a
/// pure function of the weights, so identical training runs produce
/// identical files.
pub fn checkpoint_to_json(net: &NucNetwork) -> String {
    let ckpt = CheckpointJson {
        format_version: 1,
        k: net.hyper.k,
        layers: net.hyper.layers,
        hidden_width: net.hyper.hidden_width,
        layer_params: net.layers.iter().map(linear_to_json).collect(),
        head: linear_to_json(&net.head),
        feature_spec: net.hyper.feature_spec.as_str().to_string(),
    };
    let mut s = serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization");
    s.push('\n');
    s
}

pub fn save_checkpoint(net: &NucNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_json(text: &str) -> Result<NucNetwork> {
    let ckpt: CheckpointJson =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if ckpt.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            ckpt.format_version
        )));
    }
    let feature_spec = FeatureSpec::parse(&ckpt.feature_spec)?;
    if ckpt.layers == 0 || ckpt.layer_params.len() != ckpt.layers {
        return Err(Error::Format(format!(
            "checkpoint declares L={} but carries {} layers",
            ckpt.layers,
            ckpt.layer_params.len()
        )));
    }
    let h = ckpt.hidden_width;
    let mut layers = Vec::with_capacity(ckpt.layers);
    for (i, lj) in ckpt.layer_params.iter().enumerate() {
        let in_dim = if i == 0 { ROW_DIM } else { h };
        layers.push(linear_from_json(lj, in_dim, h)?);
    }
    let head = linear_from_json(&ckpt.head, h + feature_spec.global_dim(), 2)?;
    let net = NucNetwork {
        layers,
        head,
        hyper: NucHyper { layers: ckpt.layers, hidden_width: h, k: ckpt.k, feature_spec },
    };
    net.check_finite()?;
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<NucNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text)
}
