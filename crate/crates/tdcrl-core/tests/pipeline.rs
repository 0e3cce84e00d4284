//! Cross-module integration: training, export, and checkpointing must agree
//! when recombined through files.

use tdcrl_core::config::{default_run_config, RunConfig};
use tdcrl_core::error::Error;
use tdcrl_core::eval::{export_features, predict, top1_accuracy, ExportStage};
use tdcrl_core::matrix::dot;
use tdcrl_core::scenario::build_benchmark;
use tdcrl_core::tdeb::EmbeddingTable;
use tdcrl_core::trainer::{load_checkpoint, save_checkpoint, train};

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = default_run_config();
    cfg.seed = Some(seed);
    cfg.synthetic.classes = 4;
    cfg.synthetic.embed_dim = 24;
    cfg.benchmark.images_per_class_style = 20;
    cfg.aug.count = 16;
    cfg.train.batch = 24;
    cfg.train.epochs = 8;
    cfg.train.layers = 2;
    cfg
}

// The predict path and an independent recomputation from exported features
// plus the stored classifier must yield the same accuracy.
#[test]
fn exported_features_reproduce_predictions() {
    let cfg = small_config(31);
    let bench = build_benchmark(&cfg).unwrap();
    let tc = cfg.train_config();
    let (state, _) = train(&tc, &bench.encoder, &bench.train_basis, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("model.tdeb");
    let feat_path = dir.path().join("features.tdeb");
    save_checkpoint(&state, &ckpt_path).unwrap();
    export_features(&state, &bench.heldout_images, ExportStage::Intervened)
        .unwrap()
        .write(&feat_path)
        .unwrap();

    let labels: Vec<usize> = bench
        .heldout_images
        .records()
        .iter()
        .map(|r| r.class_id as usize)
        .collect();
    let direct = top1_accuracy(&predict(&state, &bench.heldout_images).unwrap(), &labels).unwrap();

    // Second path: classify the exported features with the restored
    // classifier, bypassing the intervention network entirely.
    let restored = load_checkpoint(&ckpt_path).unwrap();
    let features = EmbeddingTable::read(&feat_path).unwrap();
    let mut preds = Vec::with_capacity(features.len());
    for rec in features.records() {
        let f: Vec<f64> = rec.vector.iter().map(|&v| v as f64).collect();
        let w = &restored.classifier.linear.weight;
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for k in 0..restored.classifier.classes() {
            let logit = dot(w.row(k), &f) + restored.classifier.linear.bias[k];
            if logit > best_logit {
                best_logit = logit;
                best = k;
            }
        }
        preds.push(best);
    }
    let recomputed = top1_accuracy(&preds, &labels).unwrap();
    assert_eq!(
        direct, recomputed,
        "predict path {direct} disagrees with exported-feature path {recomputed}"
    );
}

// A divergent learning rate must abort with diagnostics, not silently emit
// NaN parameters.
#[test]
fn divergence_aborts_with_diagnostics() {
    let mut cfg = small_config(32);
    cfg.train.lr0 = 1e12;
    let bench = build_benchmark(&cfg).unwrap();
    let tc = cfg.train_config();
    match train(&tc, &bench.encoder, &bench.train_basis, None) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("epoch"), "diagnostics missing epoch: {msg}");
            assert!(msg.contains("batch"), "diagnostics missing batch: {msg}");
        }
        other => panic!("expected numeric abort, got {other:?}"),
    }
}
