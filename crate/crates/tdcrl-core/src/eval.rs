//! Inference over image embeddings and the invariance diagnostics: top-1
//! accuracy, kernel two-sample distance between domain feature sets, and a
//! style-classification probe.

use crate::causal::{ConfounderDictionary, InterventionNet};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{softmax, LinearLayer};
use crate::tdeb::{EmbeddingRecord, EmbeddingTable};
use crate::trainer::ModelState;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

const FORWARD_CHUNK: usize = 256;

/// Expected-intervention features for every record: row i holds
/// `(1/N) sum_n g(f_i, z_n)` in eval mode.
pub fn intervened_features(
    net: &InterventionNet,
    dict: &ConfounderDictionary,
    table: &EmbeddingTable,
) -> Result<DenseMatrix> {
    if table.dim() != dict.dim() {
        return Err(Error::Dimension(format!(
            "image dim {} != model dim {}",
            table.dim(),
            dict.dim()
        )));
    }
    let n = dict.len();
    let es = dict.dim();
    let mut means = DenseMatrix::zeros(table.len(), es);
    let records = table.records();
    let mut start = 0;
    while start < records.len() {
        let count = FORWARD_CHUNK.min(records.len() - start);
        let mut stacked = DenseMatrix::zeros(count * n, 2 * es);
        for (i, rec) in records[start..start + count].iter().enumerate() {
            for j in 0..n {
                let row = stacked.row_mut(i * n + j);
                for (c, &v) in rec.vector.iter().enumerate() {
                    row[c] = v as f64;
                }
                row[es..].copy_from_slice(dict.vector(j));
            }
        }
        let out = net.forward_eval(&stacked)?;
        for i in 0..count {
            let mean_row = means.row_mut(start + i);
            for j in 0..n {
                for (m, &v) in mean_row.iter_mut().zip(out.row(i * n + j)) {
                    *m += v / n as f64;
                }
            }
        }
        start += count;
    }
    Ok(means)
}

/// Per-record logits of the classifier over the expected intervention.
pub fn predict_logits(state: &ModelState, table: &EmbeddingTable) -> Result<DenseMatrix> {
    let means = intervened_features(&state.net, &state.dict, table)?;
    let mut logits = means.matmul_nt(&state.classifier.linear.weight)?;
    for r in 0..logits.rows() {
        for (l, b) in logits.row_mut(r).iter_mut().zip(&state.classifier.linear.bias) {
            *l += b;
        }
    }
    Ok(logits)
}

/// Argmax class per record; exact ties resolve to the lowest class id.
pub fn predict(state: &ModelState, table: &EmbeddingTable) -> Result<Vec<usize>> {
    let logits = predict_logits(state, table)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of matching predictions.
pub fn top1_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Domain(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let matches = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(matches as f64 / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

/// Kernel bandwidth selection for [`mmd`]: the string `"median"` or a
/// positive number in config files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled samples.
    Median,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => serializer.serialize_str("median"),
            Bandwidth::Fixed(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Value(f64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) if s == "median" => Ok(Bandwidth::Median),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "mmd_bandwidth must be \"median\" or a number, got {s:?}"
            ))),
            Raw::Value(v) => Ok(Bandwidth::Fixed(v)),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median_pairwise_distance(pooled: &[&[f64]]) -> f64 {
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Square-rooted unbiased MMD^2 estimate with a Gaussian kernel
/// `exp(-||x-y||^2 / (2 bandwidth^2))`, clamped at zero. The unbiased
/// estimator excludes the diagonal, so each set needs at least two samples.
pub fn mmd(set_a: &[Vec<f64>], set_b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Domain(format!(
            "unbiased estimator needs >= 2 samples per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if s <= 0.0 {
                return Err(Error::Domain(format!("bandwidth {s} must be > 0")));
            }
            s
        }
        Bandwidth::Median => {
            let pooled: Vec<&[f64]> = set_a
                .iter()
                .map(Vec::as_slice)
                .chain(set_b.iter().map(Vec::as_slice))
                .collect();
            median_pairwise_distance(&pooled).max(1e-12)
        }
    };
    let denom = 2.0 * sigma * sigma;
    let kernel = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / denom).exp();

    let m = set_a.len() as f64;
    let n = set_b.len() as f64;
    let mut term_a = 0.0;
    for i in 0..set_a.len() {
        for j in 0..set_a.len() {
            if i != j {
                term_a += kernel(&set_a[i], &set_a[j]);
            }
        }
    }
    let mut term_b = 0.0;
    for i in 0..set_b.len() {
        for j in 0..set_b.len() {
            if i != j {
                term_b += kernel(&set_b[i], &set_b[j]);
            }
        }
    }
    let mut cross = 0.0;
    for a in set_a {
        for b in set_b {
            cross += kernel(a, b);
        }
    }
    let mmd_sq = term_a / (m * (m - 1.0)) + term_b / (n * (n - 1.0)) - 2.0 * cross / (m * n);
    Ok(mmd_sq.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Style-classification probe
// ---------------------------------------------------------------------------

/// Fixed probe protocol so the returned cross-entropy is a deterministic
/// metric rather than a tuning exercise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Per-feature z-score over the sample set (constant features map to 0).
fn standardize(features: &DenseMatrix) -> DenseMatrix {
    let rows = features.rows();
    let cols = features.cols();
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += v / rows as f64;
        }
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, &v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / rows as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + 1e-12).sqrt()).collect();
    let mut out = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let src = features.row(r);
        let dst = out.row_mut(r);
        for c in 0..cols {
            dst[c] = (src[c] - mean[c]) * inv_std[c];
        }
    }
    out
}

/// Trains a fresh softmax-regression classifier (full-batch gradient
/// descent) to predict the domain from each feature, returning the final
/// training cross-entropy. High CE means the features carry little style
/// information.
///
/// Features are standardized per coordinate first, so the probe measures
/// direction information rather than feature scale.
pub fn style_probe(features: &[Vec<f64>], domains: &[usize], cfg: ProbeConfig) -> Result<f64> {
    if features.is_empty() || features.len() != domains.len() {
        return Err(Error::Domain(
            "probe needs equal non-empty features and labels".into(),
        ));
    }
    let mut distinct: Vec<usize> = domains.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Domain(
            "style probe needs at least two distinct domains".into(),
        ));
    }
    // Remap raw domain ids onto 0..C.
    let remap = |d: usize| distinct.binary_search(&d).expect("present");
    let dim = features[0].len();
    let count = features.len() as f64;
    let classes = distinct.len();

    let mut rng = crate::rng::substream(cfg.seed, "probe-init", 0);
    let mut layer = LinearLayer::glorot_init(dim, classes, &mut rng);
    let inputs = standardize(&DenseMatrix::from_rows(features)?);

    let mut final_ce = f64::NAN;
    for step in 0..=cfg.epochs {
        let logits = {
            let mut l = inputs.matmul_nt(&layer.weight)?;
            for r in 0..l.rows() {
                for (v, b) in l.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            l
        };
        let mut ce = 0.0;
        let mut dlogits = DenseMatrix::zeros(logits.rows(), classes);
        for (r, &domain) in domains.iter().enumerate() {
            let target = remap(domain);
            ce += crate::nn::log_softmax_nll(logits.row(r), target);
            let mut p = softmax(logits.row(r));
            p[target] -= 1.0;
            for (d, &v) in dlogits.row_mut(r).iter_mut().zip(&p) {
                *d = v / count;
            }
        }
        final_ce = ce / count;
        if step == cfg.epochs {
            break;
        }
        let (grads, _) = layer.backward(&inputs, &dlogits)?;
        crate::nn::sgd_update(layer.weight.data_mut(), grads.weight.data(), cfg.lr)?;
        crate::nn::sgd_update(&mut layer.bias, &grads.bias, cfg.lr)?;
    }
    Ok(final_ce)
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

/// Which features to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportStage {
    /// The raw image embeddings, payload unchanged.
    Raw,
    /// The expected-intervention features.
    Intervened,
}

/// Builds the export table (same tags and label dictionaries as the input).
pub fn export_features(
    state: &ModelState,
    images: &EmbeddingTable,
    stage: ExportStage,
) -> Result<EmbeddingTable> {
    let mut out = EmbeddingTable::new(
        images.dim(),
        images.class_labels.clone(),
        images.domain_labels.clone(),
    );
    match stage {
        ExportStage::Raw => {
            for rec in images.records() {
                out.push(rec.clone())?;
            }
        }
        ExportStage::Intervened => {
            let means = intervened_features(&state.net, &state.dict, images)?;
            for (r, rec) in images.records().iter().enumerate() {
                out.push(EmbeddingRecord {
                    vector: means.row(r).iter().map(|&v| v as f32).collect(),
                    class_id: rec.class_id,
                    style_or_domain_id: rec.style_or_domain_id,
                })?;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full evaluation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainPairMmd {
    pub domain_a: String,
    pub domain_b: String,
    pub pre: f64,
    pub post: f64,
}

/// The quantities the diagnostics report: accuracy per domain, kernel
/// distances between domain pairs before/after intervention, and the style
/// probe before/after.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain_accuracy: Vec<DomainAccuracy>,
    pub mean_accuracy: f64,
    pub mmd_pairs: Vec<DomainPairMmd>,
    pub mean_mmd_pre: f64,
    pub mean_mmd_post: f64,
    pub probe_ce_pre: f64,
    pub probe_ce_post: f64,
}

fn domain_label(table: &EmbeddingTable, id: usize) -> String {
    table
        .domain_labels
        .get(id)
        .cloned()
        .unwrap_or_else(|| format!("domain-{id}"))
}

/// Runs inference plus every diagnostic over one image table. The table must
/// contain at least two domains with two samples each.
pub fn evaluate(state: &ModelState, images: &EmbeddingTable, bandwidth: Bandwidth) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Domain("evaluation table is empty".into()));
    }
    let preds = predict(state, images)?;
    let labels: Vec<usize> = images.records().iter().map(|r| r.class_id as usize).collect();

    let mut domain_ids: Vec<usize> = images
        .records()
        .iter()
        .map(|r| r.style_or_domain_id as usize)
        .collect();
    let per_record_domain = domain_ids.clone();
    domain_ids.sort_unstable();
    domain_ids.dedup();

    let mut per_domain_accuracy = Vec::with_capacity(domain_ids.len());
    for &d in &domain_ids {
        let idx: Vec<usize> = (0..images.len())
            .filter(|&i| per_record_domain[i] == d)
            .collect();
        let sub_preds: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        per_domain_accuracy.push(DomainAccuracy {
            domain: domain_label(images, d),
            accuracy: top1_accuracy(&sub_preds, &sub_labels)?,
            samples: idx.len(),
        });
    }
    let mean_accuracy = per_domain_accuracy.iter().map(|d| d.accuracy).sum::<f64>()
        / per_domain_accuracy.len() as f64;

    // Feature sets per domain, pre and post intervention.
    let post_matrix = intervened_features(&state.net, &state.dict, images)?;
    let mut pre_sets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); domain_ids.len()];
    let mut post_sets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); domain_ids.len()];
    for (i, rec) in images.records().iter().enumerate() {
        let slot = domain_ids
            .binary_search(&(rec.style_or_domain_id as usize))
            .expect("present");
        pre_sets[slot].push(rec.vector.iter().map(|&v| v as f64).collect());
        post_sets[slot].push(post_matrix.row(i).to_vec());
    }

    let mut mmd_pairs = Vec::new();
    for i in 0..domain_ids.len() {
        for j in (i + 1)..domain_ids.len() {
            mmd_pairs.push(DomainPairMmd {
                domain_a: domain_label(images, domain_ids[i]),
                domain_b: domain_label(images, domain_ids[j]),
                pre: mmd(&pre_sets[i], &pre_sets[j], bandwidth)?,
                post: mmd(&post_sets[i], &post_sets[j], bandwidth)?,
            });
        }
    }
    if mmd_pairs.is_empty() {
        return Err(Error::Domain(
            "diagnostics need at least two domains in the evaluation table".into(),
        ));
    }
    let mean_mmd_pre = mmd_pairs.iter().map(|p| p.pre).sum::<f64>() / mmd_pairs.len() as f64;
    let mean_mmd_post = mmd_pairs.iter().map(|p| p.post).sum::<f64>() / mmd_pairs.len() as f64;

    let pre_features: Vec<Vec<f64>> = images
        .records()
        .iter()
        .map(|r| r.vector.iter().map(|&v| v as f64).collect())
        .collect();
    let post_features: Vec<Vec<f64>> = (0..images.len()).map(|i| post_matrix.row(i).to_vec()).collect();
    let probe_cfg = ProbeConfig::default();
    let probe_ce_pre = style_probe(&pre_features, &per_record_domain, probe_cfg)?;
    let probe_ce_post = style_probe(&post_features, &per_record_domain, probe_cfg)?;

    Ok(EvalReport {
        per_domain_accuracy,
        mean_accuracy,
        mmd_pairs,
        mean_mmd_pre,
        mean_mmd_post,
        probe_ce_pre,
        probe_ce_post,
    })
}
