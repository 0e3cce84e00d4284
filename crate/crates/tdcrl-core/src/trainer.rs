//! End-to-end training: per-epoch style regeneration, batched joint
//! optimization of the intervention network and classifier, the
//! cross-entropy-only ablation mode, and checkpointing.

use crate::augment::{generate_epoch_styles, AugmentConfig, StyleBasis};
use crate::causal::{
    apply_sgd, batch_gradients, build_confounder_dictionary, build_target_matrix, flatten_grads,
    param_count, param_tensors_mut, Classifier, ConfounderDictionary, InterventionNet, LossConfig,
    LossGKind, TrainBatch, BN_EPSILON, BN_MOMENTUM,
};
use crate::encoder::{build_training_set, Encoder};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{LrSchedule, Mode, ParamAccess};
use crate::rng::substream;
use crate::tdeb::{read_container, write_container, Container, EmbeddingTable, Payload};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Full pipeline vs. the cross-entropy-only ablation. The ablation keeps the
/// intervention network in the path but drops the alignment loss entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Tdcrl,
    NoCi,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Confounder dictionary size N.
    #[serde(rename = "N")]
    pub dictionary_size: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub tau: f64,
    pub lambda: f64,
    pub layers: usize,
    pub seed: u64,
    pub loss_g: LossGKind,
    pub mode: TrainMode,
    #[serde(skip)]
    pub aug: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dictionary_size: 6,
            batch: 128,
            epochs: 60,
            lr0: 0.005,
            tau: 0.1,
            lambda: 3.0,
            layers: 3,
            seed: 42,
            loss_g: LossGKind::Infonce,
            mode: TrainMode::Tdcrl,
            aug: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, basis_size: usize) -> Result<()> {
        self.aug.validate()?;
        if self.dictionary_size == 0 || self.dictionary_size > basis_size {
            return Err(Error::Config(format!(
                "train.N {} must lie in [1, {basis_size}]",
                self.dictionary_size
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("train.layers must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("train.lr0 {} must be > 0", self.lr0)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("train.tau {} must be > 0", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "train.lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        match self.mode {
            TrainMode::Tdcrl => LossConfig {
                tau: self.tau,
                lambda: self.lambda,
                loss_g: Some(self.loss_g),
            },
            TrainMode::NoCi => LossConfig {
                tau: self.tau,
                lambda: 0.0,
                loss_g: None,
            },
        }
    }
}

/// Everything inference needs: the network, the classifier, the confounder
/// dictionary, and the substream position (seed + step) that reproduces the
/// run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub net: InterventionNet,
    pub classifier: Classifier,
    pub dict: ConfounderDictionary,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, enc: &dyn Encoder, basis: &StyleBasis) -> Result<Self> {
        cfg.validate(basis.len())?;
        let mut init_rng = substream(cfg.seed, "init", 0);
        let net = InterventionNet::init(enc.embed_dim(), cfg.layers, &mut init_rng)?;
        let classifier = Classifier::init(enc.embed_dim(), enc.num_classes(), &mut init_rng);
        let dict = build_confounder_dictionary(enc, basis, cfg.dictionary_size)?;
        Ok(Self {
            net,
            classifier,
            dict,
            step: 0,
            seed: cfg.seed,
        })
    }
}

impl ParamAccess for ModelState {
    fn param_count(&self) -> usize {
        param_count(&self.net, &self.classifier)
    }

    fn get_param(&self, index: usize) -> f64 {
        let mut offset = index;
        for block in self.net.blocks() {
            for tensor in [
                block.linear.weight.data(),
                &block.linear.bias[..],
                &block.bn.gamma[..],
                &block.bn.beta[..],
            ] {
                if offset < tensor.len() {
                    return tensor[offset];
                }
                offset -= tensor.len();
            }
        }
        let w = self.classifier.linear.weight.data();
        if offset < w.len() {
            return w[offset];
        }
        self.classifier.linear.bias[offset - w.len()]
    }

    fn set_param(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for tensor in param_tensors_mut(&mut self.net, &mut self.classifier) {
            if offset < tensor.len() {
                tensor[offset] = value;
                return;
            }
            offset -= tensor.len();
        }
        panic!("parameter index {index} out of range");
    }
}

/// One record per epoch in the metrics trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    pub nwgm_gap: f64,
    pub style_hash: String,
}

fn hash_styles(styles: &[crate::augment::StyleWordVector]) -> String {
    let mut hasher = Sha256::new();
    for s in styles {
        for v in &s.vector {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Widens a table into an f64 input matrix plus the class-id column.
pub fn table_inputs(table: &EmbeddingTable) -> Result<(DenseMatrix, Vec<usize>)> {
    let dim = table.dim();
    let mut data = Vec::with_capacity(table.len() * dim);
    let mut classes = Vec::with_capacity(table.len());
    for rec in table.records() {
        data.extend(rec.vector.iter().map(|&v| v as f64));
        classes.push(rec.class_id as usize);
    }
    Ok((DenseMatrix::from_vec(table.len(), dim, data)?, classes))
}

fn take_batch(inputs: &DenseMatrix, classes: &[usize], order: &[usize]) -> TrainBatch {
    let mut m = DenseMatrix::zeros(order.len(), inputs.cols());
    let mut batch_classes = Vec::with_capacity(order.len());
    for (r, &idx) in order.iter().enumerate() {
        m.row_mut(r).copy_from_slice(inputs.row(idx));
        batch_classes.push(classes[idx]);
    }
    TrainBatch {
        inputs: m,
        classes: batch_classes,
    }
}

/// Mean two-path softmax gap over the first records of a table, measured in
/// eval mode. Reported once per epoch as a training diagnostic.
pub fn nwgm_gap_probe(state: &ModelState, inputs: &DenseMatrix) -> Result<f64> {
    let probe = inputs.rows().min(64);
    if probe == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..probe {
        let f = inputs.row(i);
        let stacked = crate::causal::stack_with_dictionary(f, &state.dict)?;
        let outputs = state.net.forward_eval(&stacked)?;
        let rows: Vec<Vec<f64>> = (0..outputs.rows()).map(|r| outputs.row(r).to_vec()).collect();
        total += crate::oracle::nwgm_gap(
            &state.classifier.linear.weight,
            &state.classifier.linear.bias,
            &rows,
        )?;
    }
    Ok(total / probe as f64)
}

/// Runs the full training procedure: regenerate M styles each epoch, encode
/// the M x K prompt grid, and optimize `mean(L_C) + lambda * mean(L_g)` with
/// SGD under a per-epoch cosine schedule.
pub fn train(
    cfg: &TrainConfig,
    enc: &dyn Encoder,
    basis: &StyleBasis,
    eval_images: Option<&EmbeddingTable>,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    let mut state = ModelState::init(cfg, enc, basis)?;
    let targets = build_target_matrix(enc, basis, enc.num_classes(), cfg.dictionary_size)?;
    let loss_cfg = cfg.loss_config();
    let sched = LrSchedule::new(cfg.lr0, 0.0, cfg.epochs)?;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = sched.lr_at(epoch)?;
        let mut aug_rng = substream(cfg.seed, "augment", epoch as u64);
        let styles = generate_epoch_styles(basis, &cfg.aug, &mut aug_rng)?;
        let table = build_training_set(enc, &styles, enc.num_classes())?;
        let (inputs, classes) = table_inputs(&table)?;

        let mut order: Vec<usize> = (0..table.len()).collect();
        let mut shuffle_rng = substream(cfg.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_c_sum = 0.0;
        let mut loss_g_sum = 0.0;
        let mut sample_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = take_batch(&inputs, &classes, chunk);
            let (eval, grads) = batch_gradients(
                &mut state.net,
                &state.classifier,
                &batch,
                &state.dict,
                &targets,
                &loss_cfg,
                Mode::Train,
            )?;
            if !eval.objective.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}: L_C={}, L_g={:?}",
                    eval.loss_c_mean, eval.loss_g_mean
                )));
            }
            apply_sgd(&mut state.net, &mut state.classifier, &grads, lr)?;
            state.step += 1;
            loss_c_sum += eval.loss_c_mean * batch.len() as f64;
            if let Some(lg) = eval.loss_g_mean {
                loss_g_sum += lg * batch.len() as f64;
            }
            sample_count += batch.len();
        }

        let eval_accuracy = match eval_images {
            Some(images) => Some(crate::eval::top1_accuracy(
                &crate::eval::predict(&state, images)?,
                &images
                    .records()
                    .iter()
                    .map(|r| r.class_id as usize)
                    .collect::<Vec<_>>(),
            )?),
            None => None,
        };

        trace.push(EpochMetrics {
            epoch,
            lr,
            loss_c: loss_c_sum / sample_count as f64,
            loss_g: match cfg.mode {
                TrainMode::Tdcrl => Some(loss_g_sum / sample_count as f64),
                TrainMode::NoCi => None,
            },
            eval_accuracy,
            nwgm_gap: nwgm_gap_probe(&state, &inputs)?,
            style_hash: hash_styles(&styles),
        });
    }

    Ok((state, trace))
}

/// The ablation: identical pipeline with the alignment loss removed
/// (lambda forced to 0), g and the classifier still trained jointly on
/// cross-entropy.
pub fn train_no_ci(
    cfg: &TrainConfig,
    enc: &dyn Encoder,
    basis: &StyleBasis,
    eval_images: Option<&EmbeddingTable>,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    let mut ablated = cfg.clone();
    ablated.mode = TrainMode::NoCi;
    train(&ablated, enc, basis, eval_images)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_KIND: &str = "checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    format_version: u32,
    embed_dim: usize,
    classes: usize,
    layers: usize,
    bn_momentum: f64,
    bn_epsilon: f64,
    step: u64,
    seed: u64,
    dict_labels: Vec<String>,
    tensors: Vec<TensorMeta>,
}

struct CheckpointBuilder {
    payload: Vec<f64>,
    tensors: Vec<TensorMeta>,
}

impl CheckpointBuilder {
    fn new() -> Self {
        Self {
            payload: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(rows * cols, data.len());
        self.tensors.push(TensorMeta {
            name,
            rows,
            cols,
            offset: self.payload.len(),
        });
        self.payload.extend_from_slice(data);
    }
}

/// Writes the model as a dtype-f64 TDEB container. Parameters, BatchNorm
/// running statistics, and the confounder dictionary are all included, so
/// inference needs no other artifact.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut b = CheckpointBuilder::new();
    for (l, block) in state.net.blocks().iter().enumerate() {
        b.push(
            format!("g.{l}.linear.weight"),
            block.linear.weight.rows(),
            block.linear.weight.cols(),
            block.linear.weight.data(),
        );
        b.push(format!("g.{l}.linear.bias"), 1, block.linear.bias.len(), &block.linear.bias);
        b.push(format!("g.{l}.bn.gamma"), 1, block.bn.gamma.len(), &block.bn.gamma);
        b.push(format!("g.{l}.bn.beta"), 1, block.bn.beta.len(), &block.bn.beta);
        b.push(
            format!("g.{l}.bn.running_mean"),
            1,
            block.bn.running_mean.len(),
            &block.bn.running_mean,
        );
        b.push(
            format!("g.{l}.bn.running_var"),
            1,
            block.bn.running_var.len(),
            &block.bn.running_var,
        );
    }
    b.push(
        "classifier.weight".into(),
        state.classifier.linear.weight.rows(),
        state.classifier.linear.weight.cols(),
        state.classifier.linear.weight.data(),
    );
    b.push(
        "classifier.bias".into(),
        1,
        state.classifier.linear.bias.len(),
        &state.classifier.linear.bias,
    );
    let n = state.dict.len();
    let dict_flat: Vec<f64> = (0..n).flat_map(|i| state.dict.vector(i).to_vec()).collect();
    b.push("dictionary".into(), n, state.dict.dim(), &dict_flat);

    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        format_version: CHECKPOINT_VERSION,
        embed_dim: state.net.embed_dim(),
        classes: state.classifier.classes(),
        layers: state.net.layer_count(),
        bn_momentum: BN_MOMENTUM,
        bn_epsilon: BN_EPSILON,
        step: state.step,
        seed: state.seed,
        dict_labels: state.dict.labels().to_vec(),
        tensors: b.tensors,
    };
    let rows = b.payload.len() as u32;
    write_container(
        path,
        &Container {
            rows,
            dim: 1,
            payload: Payload::F64(b.payload),
            metadata: serde_json::to_string(&meta)
                .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?,
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let container = read_container(path)?;
    let payload = match container.payload {
        Payload::F64(v) => v,
        Payload::F32(_) => {
            return Err(Error::Format {
                offset: 5,
                msg: "checkpoints must be dtype f64".into(),
            })
        }
    };
    let meta: CheckpointMeta =
        serde_json::from_str(&container.metadata).map_err(|e| Error::Format {
            offset: 16 + payload.len() as u64 * 8 + 4,
            msg: format!("checkpoint metadata: {e}"),
        })?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected checkpoint metadata, found {:?}", meta.kind),
        });
    }
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported checkpoint version {}", meta.format_version),
        });
    }

    let fetch = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let t = meta
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("checkpoint is missing tensor {name:?}"),
            })?;
        if t.rows != rows || t.cols != cols {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "tensor {name:?} has shape {}x{}, expected {rows}x{cols}",
                    t.rows, t.cols
                ),
            });
        }
        let end = t.offset + rows * cols;
        if end > payload.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("tensor {name:?} overruns the payload"),
            });
        }
        Ok(payload[t.offset..end].to_vec())
    };

    let es = meta.embed_dim;
    let mut blocks = Vec::with_capacity(meta.layers);
    for l in 0..meta.layers {
        let in_features = if l == 0 { 2 * es } else { es };
        let weight = DenseMatrix::from_vec(es, in_features, fetch(&format!("g.{l}.linear.weight"), es, in_features)?)?;
        let bias = fetch(&format!("g.{l}.linear.bias"), 1, es)?;
        let mut bn = crate::nn::BatchNormLayer::new(es, meta.bn_momentum, meta.bn_epsilon)?;
        bn.gamma = fetch(&format!("g.{l}.bn.gamma"), 1, es)?;
        bn.beta = fetch(&format!("g.{l}.bn.beta"), 1, es)?;
        bn.running_mean = fetch(&format!("g.{l}.bn.running_mean"), 1, es)?;
        bn.running_var = fetch(&format!("g.{l}.bn.running_var"), 1, es)?;
        blocks.push(crate::causal::NetBlock {
            linear: crate::nn::LinearLayer::new(weight, bias)?,
            bn,
        });
    }
    let net = InterventionNet::from_blocks(blocks)?;
    let clf_weight = DenseMatrix::from_vec(meta.classes, es, fetch("classifier.weight", meta.classes, es)?)?;
    let clf_bias = fetch("classifier.bias", 1, meta.classes)?;
    let classifier = Classifier {
        linear: crate::nn::LinearLayer::new(clf_weight, clf_bias)?,
    };

    let n = meta.dict_labels.len();
    let dict_flat = fetch("dictionary", n, es)?;
    let dict = ConfounderDictionary::new(
        (0..n).map(|i| dict_flat[i * es..(i + 1) * es].to_vec()).collect(),
        meta.dict_labels,
    )?;

    Ok(ModelState {
        net,
        classifier,
        dict,
        step: meta.step,
        seed: meta.seed,
    })
}

/// Flattened analytic gradients paired with the eval-mode objective, for
/// gradient checking against `nn::grad_check`.
pub fn objective_and_gradients(
    state: &mut ModelState,
    batch: &TrainBatch,
    targets: &crate::causal::TargetMatrix,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let (eval, grads) = batch_gradients(
        &mut state.net,
        &state.classifier,
        batch,
        &state.dict,
        targets,
        loss_cfg,
        Mode::Eval,
    )?;
    Ok((eval.objective, flatten_grads(&grads)))
}
