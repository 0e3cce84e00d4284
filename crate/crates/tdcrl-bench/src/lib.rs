//! Shared fixtures for the benchmark targets.

use tdcrl_core::augment::{generate_epoch_styles, StyleBasis};
use tdcrl_core::causal::{build_target_matrix, TargetMatrix, TrainBatch};
use tdcrl_core::encoder::{build_training_set, Encoder, SyntheticEncoder, SyntheticEncoderParams};
use tdcrl_core::rng::substream;
use tdcrl_core::trainer::{table_inputs, ModelState, TrainConfig};
use tdcrl_core::{AugmentConfig, DenseMatrix};

pub struct Fixture {
    pub state: ModelState,
    pub targets: TargetMatrix,
    pub batch: TrainBatch,
}

/// Default-sized training fixture: ES=64, N=4, 3 layers, one 128-sample
/// batch of style-augmented embeddings.
pub fn training_fixture() -> Fixture {
    let labels: Vec<String> = (0..4).map(|i| format!("style-{i}")).collect();
    let basis = StyleBasis::synthetic(&labels, 16, &mut substream(5150, "basis", 0)).unwrap();
    let enc = SyntheticEncoder::new(SyntheticEncoderParams::default(), basis.clone(), 5150).unwrap();
    let cfg = TrainConfig {
        dictionary_size: 4,
        seed: 5150,
        ..Default::default()
    };
    let state = ModelState::init(&cfg, &enc, &basis).unwrap();
    let targets = build_target_matrix(&enc, &basis, enc.num_classes(), 4).unwrap();

    let aug = AugmentConfig {
        count: 20,
        ..Default::default()
    };
    let styles = generate_epoch_styles(&basis, &aug, &mut substream(5150, "augment", 0)).unwrap();
    let table = build_training_set(&enc, &styles, enc.num_classes()).unwrap();
    let (inputs, classes) = table_inputs(&table).unwrap();
    let take = 128.min(classes.len());
    let mut batch_inputs = DenseMatrix::zeros(take, inputs.cols());
    for r in 0..take {
        batch_inputs.row_mut(r).copy_from_slice(inputs.row(r));
    }
    Fixture {
        state,
        targets,
        batch: TrainBatch {
            inputs: batch_inputs,
            classes: classes[..take].to_vec(),
        },
    }
}
