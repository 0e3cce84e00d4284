//! Causal intervention machinery: the confounder dictionary, the target
//! matrix, the intervention network g, the classifier, and both training
//! losses with hand-derived gradients.
//!
//! An observed embedding f entangles class content with style. g takes
//! [f; z_n] and re-renders f in the dictionary style z_n; averaging over the
//! dictionary approximates the expectation behind the backdoor adjustment,
//! and the classifier consumes that mean.

use crate::augment::{StyleBasis, StyleWordVector};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm, normalize, DenseMatrix};
use crate::nn::{
    relu, relu_backward, softmax, BatchNormLayer, BnCache, BnGrads, LinearGrads, LinearLayer, Mode,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Confounder dictionary and target matrix
// ---------------------------------------------------------------------------

/// N fixed style-intervention embeddings, one per selected domain word.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderDictionary {
    vectors: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl ConfounderDictionary {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Domain("confounder dictionary is empty".into()));
        }
        if vectors.len() != labels.len() {
            return Err(Error::Dimension("dictionary labels mismatch".into()));
        }
        let dim = vectors[0].len();
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::Dimension("ragged dictionary vectors".into()));
            }
        }
        Ok(Self { vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, n: usize) -> &[f64] {
        &self.vectors[n]
    }

    pub fn label(&self, n: usize) -> &str {
        &self.labels[n]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Encodes the first `n` domain words (predefined order) with the
/// class-agnostic prompt.
pub fn build_confounder_dictionary(
    enc: &dyn Encoder,
    basis: &StyleBasis,
    n: usize,
) -> Result<ConfounderDictionary> {
    if n == 0 || n > basis.len() {
        return Err(Error::Domain(format!(
            "dictionary size {n} must lie in [1, {}]",
            basis.len()
        )));
    }
    let mut vectors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for d in 0..n {
        let style = StyleWordVector::pure(basis, d)?;
        vectors.push(enc.style_encode(&style)?);
        labels.push(basis.label(d).to_string());
    }
    ConfounderDictionary::new(vectors, labels)
}

/// K x N x ES grid of ideal class-in-style embeddings supervising g.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    classes: usize,
    styles: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TargetMatrix {
    pub fn new(classes: usize, styles: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * styles * dim {
            return Err(Error::Dimension(format!(
                "target matrix expects {} values, got {}",
                classes * styles * dim,
                data.len()
            )));
        }
        Ok(Self {
            classes,
            styles,
            dim,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn styles(&self) -> usize {
        self.styles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self, k: usize, n: usize) -> &[f64] {
        let start = (k * self.styles + n) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Encodes "a [class_k] in a [domain_n] style" for the full K x N grid.
pub fn build_target_matrix(
    enc: &dyn Encoder,
    basis: &StyleBasis,
    classes: usize,
    n: usize,
) -> Result<TargetMatrix> {
    if n == 0 || n > basis.len() {
        return Err(Error::Domain(format!(
            "target style count {n} must lie in [1, {}]",
            basis.len()
        )));
    }
    let dim = enc.embed_dim();
    let mut data = Vec::with_capacity(classes * n * dim);
    for k in 0..classes {
        for d in 0..n {
            let style = StyleWordVector::pure(basis, d)?;
            data.extend(enc.text_encode(k, &style)?);
        }
    }
    TargetMatrix::new(classes, n, dim, data)
}

// ---------------------------------------------------------------------------
// Intervention network
// ---------------------------------------------------------------------------

/// One Linear -> ReLU -> BatchNorm block.
#[derive(Debug, Clone, PartialEq)]
pub struct NetBlock {
    pub linear: LinearLayer,
    pub bn: BatchNormLayer,
}

/// The intervention network g. The first block maps the concatenated
/// [f; z] (width 2 ES) down to ES; later blocks are ES -> ES.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionNet {
    blocks: Vec<NetBlock>,
    embed_dim: usize,
}

pub struct NetCache {
    // Per block: input to the linear, its pre-activation, the ReLU output.
    block_io: Vec<(DenseMatrix, DenseMatrix, DenseMatrix)>,
    bn_caches: Vec<BnCache>,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub blocks: Vec<(LinearGrads, BnGrads)>,
}

/// Defaults recorded for reproducibility: the layer stack follows
/// Linear -> ReLU -> BatchNorm with these BatchNorm hyperparameters.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

impl InterventionNet {
    /// Glorot-initialized stack of `layers` blocks.
    pub fn init(embed_dim: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Domain("intervention net needs >= 1 layer".into()));
        }
        if embed_dim == 0 {
            return Err(Error::Domain("embed dim must be >= 1".into()));
        }
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_features = if l == 0 { 2 * embed_dim } else { embed_dim };
            blocks.push(NetBlock {
                linear: LinearLayer::glorot_init(in_features, embed_dim, rng),
                bn: BatchNormLayer::new(embed_dim, BN_MOMENTUM, BN_EPSILON)?,
            });
        }
        Ok(Self { blocks, embed_dim })
    }

    pub fn from_blocks(blocks: Vec<NetBlock>) -> Result<Self> {
        let embed_dim = blocks
            .first()
            .ok_or_else(|| Error::Domain("intervention net needs >= 1 layer".into()))?
            .linear
            .out_features();
        for (l, b) in blocks.iter().enumerate() {
            let expect_in = if l == 0 { 2 * embed_dim } else { embed_dim };
            if b.linear.in_features() != expect_in
                || b.linear.out_features() != embed_dim
                || b.bn.features() != embed_dim
            {
                return Err(Error::Dimension(format!("block {l} has inconsistent shape")));
            }
        }
        Ok(Self { blocks, embed_dim })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[NetBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [NetBlock] {
        &mut self.blocks
    }

    /// Read-only eval-mode forward (running statistics, no caches).
    pub fn forward_eval(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let mut x = input.clone();
        for block in &self.blocks {
            let pre = block.linear.forward(&x)?;
            let act = relu(&pre);
            x = block.bn.forward_frozen(&act)?;
        }
        Ok(x)
    }

    /// Forward pass keeping intermediates for the backward pass. Train mode
    /// uses batch statistics and updates the running statistics.
    pub fn forward_cached(&mut self, input: &DenseMatrix, mode: Mode) -> Result<(DenseMatrix, NetCache)> {
        let mut block_io = Vec::with_capacity(self.blocks.len());
        let mut bn_caches = Vec::with_capacity(self.blocks.len());
        let mut x = input.clone();
        for block in &mut self.blocks {
            let pre = block.linear.forward(&x)?;
            let act = relu(&pre);
            let (out, bn_cache) = block.bn.forward(&act, mode)?;
            block_io.push((x, pre, act));
            bn_caches.push(bn_cache);
            x = out;
        }
        Ok((
            x,
            NetCache {
                block_io,
                bn_caches,
            },
        ))
    }

    /// Backpropagates `grad_out` through the cached forward pass.
    pub fn backward(&self, cache: &NetCache, grad_out: &DenseMatrix) -> Result<(NetGrads, DenseMatrix)> {
        if cache.block_io.len() != self.blocks.len() {
            return Err(Error::Dimension("cache does not match network depth".into()));
        }
        let mut grads: Vec<Option<(LinearGrads, BnGrads)>> = vec![None; self.blocks.len()];
        let mut grad = grad_out.clone();
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let (input, pre, _act) = &cache.block_io[l];
            let (bn_grads, grad_act) = block.bn.backward(&cache.bn_caches[l], &grad)?;
            let grad_pre = relu_backward(pre, &grad_act);
            let (lin_grads, grad_in) = block.linear.backward(input, &grad_pre)?;
            grads[l] = Some((lin_grads, bn_grads));
            grad = grad_in;
        }
        Ok((
            NetGrads {
                blocks: grads.into_iter().map(|g| g.expect("filled")).collect(),
            },
            grad,
        ))
    }
}

/// One-layer linear classifier: logits = W feature + b.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub linear: LinearLayer,
}

impl Classifier {
    pub fn init(embed_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: LinearLayer::glorot_init(embed_dim, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_features()
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.in_features()
    }

    /// Raw logits; softmax is applied by the loss or the predictor.
    pub fn classify(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.embed_dim() {
            return Err(Error::Dimension(format!(
                "feature dim {} != classifier input {}",
                feature.len(),
                self.embed_dim()
            )));
        }
        let w = &self.linear.weight;
        Ok((0..self.classes())
            .map(|k| dot(w.row(k), feature) + self.linear.bias[k])
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Single-embedding intervention ops
// ---------------------------------------------------------------------------

/// Concatenates [f; z] rows for every dictionary entry: N x 2ES.
pub fn stack_with_dictionary(f: &[f64], dict: &ConfounderDictionary) -> Result<DenseMatrix> {
    if f.len() != dict.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {} != dictionary dim {}",
            f.len(),
            dict.dim()
        )));
    }
    let n = dict.len();
    let mut out = DenseMatrix::zeros(n, 2 * f.len());
    for i in 0..n {
        let row = out.row_mut(i);
        row[..f.len()].copy_from_slice(f);
        row[f.len()..].copy_from_slice(dict.vector(i));
    }
    Ok(out)
}

fn concat_pair(f: &[f64], z: &[f64]) -> Result<DenseMatrix> {
    if f.len() != z.len() {
        return Err(Error::Dimension(format!(
            "embedding dim {} != intervention dim {}",
            f.len(),
            z.len()
        )));
    }
    let mut row = Vec::with_capacity(2 * f.len());
    row.extend_from_slice(f);
    row.extend_from_slice(z);
    DenseMatrix::from_vec(1, 2 * f.len(), row)
}

/// `g(f, z)`: forward pass on the concatenation through the layer stack.
/// Train mode updates running statistics and requires a batch of >= 2 rows,
/// so a single pair is eval-only by construction.
pub fn intervene(
    net: &mut InterventionNet,
    f: &[f64],
    z: &[f64],
    mode: Mode,
) -> Result<Vec<f64>> {
    let input = concat_pair(f, z)?;
    match mode {
        Mode::Eval => Ok(net.forward_eval(&input)?.row(0).to_vec()),
        Mode::Train => {
            let (out, _) = net.forward_cached(&input, Mode::Train)?;
            Ok(out.row(0).to_vec())
        }
    }
}

/// Read-only eval-mode `g(f, z)`.
pub fn intervene_eval(net: &InterventionNet, f: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let input = concat_pair(f, z)?;
    Ok(net.forward_eval(&input)?.row(0).to_vec())
}

/// `(1/N) sum_n g(f, z_n)`: the expected intervened feature under the
/// uniform dictionary prior.
pub fn expected_intervention(
    net: &mut InterventionNet,
    f: &[f64],
    dict: &ConfounderDictionary,
    mode: Mode,
) -> Result<Vec<f64>> {
    let input = stack_with_dictionary(f, dict)?;
    let out = match mode {
        Mode::Eval => net.forward_eval(&input)?,
        Mode::Train => net.forward_cached(&input, Mode::Train)?.0,
    };
    Ok(mean_rows(&out))
}

/// Read-only eval-mode expected intervention.
pub fn expected_intervention_eval(
    net: &InterventionNet,
    f: &[f64],
    dict: &ConfounderDictionary,
) -> Result<Vec<f64>> {
    let out = net.forward_eval(&stack_with_dictionary(f, dict)?)?;
    Ok(mean_rows(&out))
}

fn mean_rows(m: &DenseMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m.rows() as f64;
    }
    mean
}

// ---------------------------------------------------------------------------
// Losses on raw g outputs
// ---------------------------------------------------------------------------

/// Which supervision the intervention network receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossGKind {
    Infonce,
    L2,
}

/// Contrastive loss over one sample's N intervention outputs against the
/// same-class targets: positives on the diagonal, same-class other-style
/// targets as negatives. Returns the loss and its gradient w.r.t. the
/// outputs.
///
/// Cosine similarity normalizes both arguments here; `targets_unit` rows must
/// already be unit length.
pub fn infonce_from_outputs(
    outputs: &DenseMatrix,
    targets_unit: &DenseMatrix,
    tau: f64,
) -> Result<(f64, DenseMatrix)> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature {tau} must be > 0")));
    }
    let n = outputs.rows();
    if targets_unit.rows() != n || targets_unit.cols() != outputs.cols() {
        return Err(Error::Dimension("outputs/targets shape mismatch".into()));
    }
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, outputs.cols());
    for i in 0..n {
        let u = outputs.row(i);
        let norm = l2_norm(u);
        if norm < 1e-12 {
            return Err(Error::Numeric(
                "zero-norm intervention output in cosine similarity".into(),
            ));
        }
        let u_hat: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let sims: Vec<f64> = (0..n).map(|j| dot(&u_hat, targets_unit.row(j))).collect();
        let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let probs = softmax(&logits);
        loss += crate::nn::log_softmax_nll(&logits, i);

        let g_row = grad.row_mut(i);
        for j in 0..n {
            let coeff = (probs[j] - if j == i { 1.0 } else { 0.0 }) / tau;
            let v = targets_unit.row(j);
            for (gv, (&vh, &uh)) in g_row.iter_mut().zip(v.iter().zip(&u_hat)) {
                *gv += coeff * (vh - sims[j] * uh) / norm;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean squared Euclidean distance over the N interventions:
/// `(1/N) sum_n ||out_n - target_n||^2`.
pub fn l2_from_outputs(
    outputs: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<(f64, DenseMatrix)> {
    let n = outputs.rows();
    if targets.rows() != n || targets.cols() != outputs.cols() {
        return Err(Error::Dimension("outputs/targets shape mismatch".into()));
    }
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, outputs.cols());
    for i in 0..n {
        let out_row = outputs.row(i);
        let t_row = targets.row(i);
        let g_row = grad.row_mut(i);
        for ((g, &o), &t) in g_row.iter_mut().zip(out_row).zip(t_row) {
            let d = o - t;
            loss += d * d;
            *g = 2.0 * d / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

// ---------------------------------------------------------------------------
// Batched objective and gradients
// ---------------------------------------------------------------------------

/// Loss weighting for the joint objective `mean(L_C) + lambda * mean(L_g)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// `None` trains on cross-entropy alone (the intervention network stays
    /// in the path but receives no alignment supervision).
    pub loss_g: Option<LossGKind>,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveEval {
    pub loss_c_mean: f64,
    pub loss_g_mean: Option<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub net: NetGrads,
    pub classifier: LinearGrads,
}

/// A batch of observed embeddings with their class ids.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: DenseMatrix, // B x ES
    pub classes: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn stack_batch(batch: &TrainBatch, dict: &ConfounderDictionary) -> Result<DenseMatrix> {
    if batch.inputs.rows() != batch.classes.len() {
        return Err(Error::Dimension("batch rows != class ids".into()));
    }
    if batch.inputs.cols() != dict.dim() {
        return Err(Error::Dimension(format!(
            "batch dim {} != dictionary dim {}",
            batch.inputs.cols(),
            dict.dim()
        )));
    }
    let n = dict.len();
    let es = dict.dim();
    let mut stacked = DenseMatrix::zeros(batch.len() * n, 2 * es);
    for i in 0..batch.len() {
        let f = batch.inputs.row(i);
        for j in 0..n {
            let row = stacked.row_mut(i * n + j);
            row[..es].copy_from_slice(f);
            row[es..].copy_from_slice(dict.vector(j));
        }
    }
    Ok(stacked)
}

fn check_batch(
    batch: &TrainBatch,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    clf: &Classifier,
    cfg: &LossConfig,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if cfg.tau <= 0.0 {
        return Err(Error::Domain(format!("temperature {} must be > 0", cfg.tau)));
    }
    if cfg.lambda < 0.0 {
        return Err(Error::Domain(format!("lambda {} must be >= 0", cfg.lambda)));
    }
    if targets.styles() != dict.len() || targets.dim() != dict.dim() {
        return Err(Error::Dimension(
            "target matrix does not match dictionary".into(),
        ));
    }
    for &k in &batch.classes {
        if k >= targets.classes() || k >= clf.classes() {
            return Err(Error::Domain(format!(
                "class id {k} outside target matrix (K={}) or classifier (K={})",
                targets.classes(),
                clf.classes()
            )));
        }
    }
    Ok(())
}

/// Unit-normalized per-class target rows, computed lazily per batch.
struct NormalizedTargets<'a> {
    targets: &'a TargetMatrix,
    cache: Vec<Option<DenseMatrix>>,
}

impl<'a> NormalizedTargets<'a> {
    fn new(targets: &'a TargetMatrix) -> Self {
        Self {
            targets,
            cache: (0..targets.classes()).map(|_| None).collect(),
        }
    }

    fn class(&mut self, k: usize) -> Result<&DenseMatrix> {
        if self.cache[k].is_none() {
            let n = self.targets.styles();
            let mut m = DenseMatrix::zeros(n, self.targets.dim());
            for j in 0..n {
                let unit = normalize(self.targets.target(k, j))?;
                m.row_mut(j).copy_from_slice(&unit);
            }
            self.cache[k] = Some(m);
        }
        Ok(self.cache[k].as_ref().unwrap())
    }

    fn raw_class(&self, k: usize) -> Result<DenseMatrix> {
        let n = self.targets.styles();
        let mut m = DenseMatrix::zeros(n, self.targets.dim());
        for j in 0..n {
            m.row_mut(j).copy_from_slice(self.targets.target(k, j));
        }
        Ok(m)
    }
}

fn slice_rows(m: &DenseMatrix, start: usize, count: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(count, m.cols());
    for r in 0..count {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

/// Forward-only objective in eval mode (used by gradient checking and the
/// loss-descent property).
pub fn batch_objective(
    net: &InterventionNet,
    clf: &Classifier,
    batch: &TrainBatch,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    cfg: &LossConfig,
) -> Result<ObjectiveEval> {
    check_batch(batch, dict, targets, clf, cfg)?;
    let stacked = stack_batch(batch, dict)?;
    let outputs = net.forward_eval(&stacked)?;
    let mut norm_targets = NormalizedTargets::new(targets);
    let n = dict.len();
    let b = batch.len();

    let mut loss_c_sum = 0.0;
    let mut loss_g_sum = 0.0;
    for i in 0..b {
        let k = batch.classes[i];
        let rows = slice_rows(&outputs, i * n, n);
        let mean = mean_rows(&rows);
        let logits = clf.classify(&mean)?;
        loss_c_sum += crate::nn::log_softmax_nll(&logits, k);
        match cfg.loss_g {
            Some(LossGKind::Infonce) => {
                let (l, _) = infonce_from_outputs(&rows, norm_targets.class(k)?, cfg.tau)?;
                loss_g_sum += l;
            }
            Some(LossGKind::L2) => {
                let (l, _) = l2_from_outputs(&rows, &norm_targets.raw_class(k)?)?;
                loss_g_sum += l;
            }
            None => {}
        }
    }
    let loss_c_mean = loss_c_sum / b as f64;
    let loss_g_mean = cfg.loss_g.map(|_| loss_g_sum / b as f64);
    Ok(ObjectiveEval {
        loss_c_mean,
        loss_g_mean,
        objective: loss_c_mean + cfg.lambda * loss_g_mean.unwrap_or(0.0),
    })
}

/// Full forward/backward over one batch. Train mode runs batch-statistics
/// BatchNorm (and updates running statistics); eval mode freezes statistics,
/// which keeps the objective deterministic for gradient checking.
pub fn batch_gradients(
    net: &mut InterventionNet,
    clf: &Classifier,
    batch: &TrainBatch,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    cfg: &LossConfig,
    mode: Mode,
) -> Result<(ObjectiveEval, ModelGrads)> {
    check_batch(batch, dict, targets, clf, cfg)?;
    let stacked = stack_batch(batch, dict)?;
    let (outputs, cache) = net.forward_cached(&stacked, mode)?;
    let mut norm_targets = NormalizedTargets::new(targets);
    let n = dict.len();
    let b = batch.len();
    let es = dict.dim();
    let b_f = b as f64;

    let mut grad_outputs = DenseMatrix::zeros(b * n, es);
    let mut grad_w = DenseMatrix::zeros(clf.classes(), es);
    let mut grad_b = vec![0.0; clf.classes()];
    let mut loss_c_sum = 0.0;
    let mut loss_g_sum = 0.0;

    for i in 0..b {
        let k = batch.classes[i];
        let rows = slice_rows(&outputs, i * n, n);

        // Cross-entropy on the classifier over the expected intervention.
        let mean = mean_rows(&rows);
        let logits = clf.classify(&mean)?;
        loss_c_sum += crate::nn::log_softmax_nll(&logits, k);
        let mut dlogits = softmax(&logits);
        dlogits[k] -= 1.0;
        for (c, &dl) in dlogits.iter().enumerate() {
            let scaled = dl / b_f;
            grad_b[c] += scaled;
            for (gw, &m) in grad_w.row_mut(c).iter_mut().zip(&mean) {
                *gw += scaled * m;
            }
        }
        // d mean / d output_n = 1/N.
        let mut dmean = vec![0.0; es];
        for (c, dm) in dmean.iter_mut().enumerate() {
            *dm = (0..clf.classes())
                .map(|j| dlogits[j] * clf.linear.weight.get(j, c))
                .sum::<f64>()
                / (n as f64 * b_f);
        }
        for j in 0..n {
            for (g, &dm) in grad_outputs.row_mut(i * n + j).iter_mut().zip(&dmean) {
                *g += dm;
            }
        }

        // Alignment supervision on each intervention output.
        if let Some(kind) = cfg.loss_g {
            let (l, dg) = match kind {
                LossGKind::Infonce => infonce_from_outputs(&rows, norm_targets.class(k)?, cfg.tau)?,
                LossGKind::L2 => l2_from_outputs(&rows, &norm_targets.raw_class(k)?)?,
            };
            loss_g_sum += l;
            let scale = cfg.lambda / b_f;
            for j in 0..n {
                for (g, &d) in grad_outputs.row_mut(i * n + j).iter_mut().zip(dg.row(j)) {
                    *g += scale * d;
                }
            }
        }
    }

    let (net_grads, _) = net.backward(&cache, &grad_outputs)?;
    let loss_c_mean = loss_c_sum / b_f;
    let loss_g_mean = cfg.loss_g.map(|_| loss_g_sum / b_f);
    Ok((
        ObjectiveEval {
            loss_c_mean,
            loss_g_mean,
            objective: loss_c_mean + cfg.lambda * loss_g_mean.unwrap_or(0.0),
        },
        ModelGrads {
            net: net_grads,
            classifier: LinearGrads {
                weight: grad_w,
                bias: grad_b,
            },
        },
    ))
}

// ---------------------------------------------------------------------------
// Per-sample spec ops (thin wrappers over the batch machinery)
// ---------------------------------------------------------------------------

/// InfoNCE loss for one embedding, with gradients for the network.
pub fn infonce_loss(
    net: &mut InterventionNet,
    f: &[f64],
    class_id: usize,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    tau: f64,
    mode: Mode,
) -> Result<(f64, NetGrads)> {
    per_sample_loss_g(net, f, class_id, dict, targets, LossGKind::Infonce, tau, mode)
}

/// L2 alignment loss for one embedding, with gradients for the network.
pub fn l2_intervention_loss(
    net: &mut InterventionNet,
    f: &[f64],
    class_id: usize,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    mode: Mode,
) -> Result<(f64, NetGrads)> {
    per_sample_loss_g(net, f, class_id, dict, targets, LossGKind::L2, 1.0, mode)
}

#[allow(clippy::too_many_arguments)]
fn per_sample_loss_g(
    net: &mut InterventionNet,
    f: &[f64],
    class_id: usize,
    dict: &ConfounderDictionary,
    targets: &TargetMatrix,
    kind: LossGKind,
    tau: f64,
    mode: Mode,
) -> Result<(f64, NetGrads)> {
    if class_id >= targets.classes() {
        return Err(Error::Domain(format!(
            "class id {class_id} outside target matrix (K={})",
            targets.classes()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature {tau} must be > 0")));
    }
    let stacked = stack_with_dictionary(f, dict)?;
    let (outputs, cache) = net.forward_cached(&stacked, mode)?;
    let mut norm_targets = NormalizedTargets::new(targets);
    let (loss, dg) = match kind {
        LossGKind::Infonce => infonce_from_outputs(&outputs, norm_targets.class(class_id)?, tau)?,
        LossGKind::L2 => l2_from_outputs(&outputs, &norm_targets.raw_class(class_id)?)?,
    };
    let (net_grads, _) = net.backward(&cache, &dg)?;
    Ok((loss, net_grads))
}

/// Cross-entropy of the classifier on one embedding's expected intervention,
/// with gradients for both the network and the classifier.
pub fn ce_loss(
    net: &mut InterventionNet,
    clf: &Classifier,
    f: &[f64],
    class_id: usize,
    dict: &ConfounderDictionary,
    mode: Mode,
) -> Result<(f64, ModelGrads)> {
    if class_id >= clf.classes() {
        return Err(Error::Domain(format!(
            "class id {class_id} outside classifier (K={})",
            clf.classes()
        )));
    }
    let stacked = stack_with_dictionary(f, dict)?;
    let (outputs, cache) = net.forward_cached(&stacked, mode)?;
    let n = dict.len();
    let es = dict.dim();
    let mean = mean_rows(&outputs);
    let logits = clf.classify(&mean)?;
    let loss = crate::nn::log_softmax_nll(&logits, class_id);
    let mut dlogits = softmax(&logits);
    dlogits[class_id] -= 1.0;

    let mut grad_w = DenseMatrix::zeros(clf.classes(), es);
    let mut grad_b = vec![0.0; clf.classes()];
    for (c, &dl) in dlogits.iter().enumerate() {
        grad_b[c] = dl;
        for (gw, &m) in grad_w.row_mut(c).iter_mut().zip(&mean) {
            *gw = dl * m;
        }
    }
    let mut grad_outputs = DenseMatrix::zeros(n, es);
    for j in 0..n {
        for (c, g) in grad_outputs.row_mut(j).iter_mut().enumerate() {
            *g = (0..clf.classes())
                .map(|q| dlogits[q] * clf.linear.weight.get(q, c))
                .sum::<f64>()
                / n as f64;
        }
    }
    let (net_grads, _) = net.backward(&cache, &grad_outputs)?;
    Ok((
        loss,
        ModelGrads {
            net: net_grads,
            classifier: LinearGrads {
                weight: grad_w,
                bias: grad_b,
            },
        },
    ))
}

// ---------------------------------------------------------------------------
// Parameter flattening and SGD
// ---------------------------------------------------------------------------

/// Number of trainable coordinates (running statistics excluded).
pub fn param_count(net: &InterventionNet, clf: &Classifier) -> usize {
    let mut count = 0;
    for block in net.blocks() {
        count += block.linear.weight.data().len();
        count += block.linear.bias.len();
        count += block.bn.gamma.len();
        count += block.bn.beta.len();
    }
    count + clf.linear.weight.data().len() + clf.linear.bias.len()
}

/// Flattens gradients in the canonical parameter order: per block weight,
/// bias, gamma, beta; then classifier weight, bias.
pub fn flatten_grads(grads: &ModelGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (lin, bn) in &grads.net.blocks {
        out.extend_from_slice(lin.weight.data());
        out.extend_from_slice(&lin.bias);
        out.extend_from_slice(&bn.gamma);
        out.extend_from_slice(&bn.beta);
    }
    out.extend_from_slice(grads.classifier.weight.data());
    out.extend_from_slice(&grads.classifier.bias);
    out
}

/// Mutable views of every trainable tensor, in the canonical order.
pub fn param_tensors_mut<'a>(
    net: &'a mut InterventionNet,
    clf: &'a mut Classifier,
) -> Vec<&'a mut [f64]> {
    let mut tensors: Vec<&mut [f64]> = Vec::new();
    for block in net.blocks_mut() {
        tensors.push(block.linear.weight.data_mut());
        tensors.push(&mut block.linear.bias);
        tensors.push(&mut block.bn.gamma);
        tensors.push(&mut block.bn.beta);
    }
    tensors.push(clf.linear.weight.data_mut());
    tensors.push(&mut clf.linear.bias);
    tensors
}

/// `p <- p - lr * grad` over every trainable tensor.
pub fn apply_sgd(
    net: &mut InterventionNet,
    clf: &mut Classifier,
    grads: &ModelGrads,
    lr: f64,
) -> Result<()> {
    if grads.net.blocks.len() != net.layer_count() {
        return Err(Error::Dimension("gradient depth != network depth".into()));
    }
    for (block, (lin, bn)) in net.blocks_mut().iter_mut().zip(&grads.net.blocks) {
        crate::nn::sgd_update(block.linear.weight.data_mut(), lin.weight.data(), lr)?;
        crate::nn::sgd_update(&mut block.linear.bias, &lin.bias, lr)?;
        crate::nn::sgd_update(&mut block.bn.gamma, &bn.gamma, lr)?;
        crate::nn::sgd_update(&mut block.bn.beta, &bn.beta, lr)?;
    }
    crate::nn::sgd_update(clf.linear.weight.data_mut(), grads.classifier.weight.data(), lr)?;
    crate::nn::sgd_update(&mut clf.linear.bias, &grads.classifier.bias, lr)?;
    Ok(())
}
