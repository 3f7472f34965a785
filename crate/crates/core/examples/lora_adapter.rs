//! Fine-tunes a pretrained classifier by compressing its LoRA factors.
//! The pretrained weights stay frozen; only the generator inputs of the
//! rank-r adapters are trained.
//!
//! cargo run --release --example lora_adapter

use mcnc::harness::{evaluate_params, synthetic_splits, train, DataSplits, Dataset, McncSetup, MlpSpec, TrainConfig};
use mcnc::{GeneratorConfig, Result};

fn main() -> Result<()> {
    let spec = MlpSpec::new(vec![16, 32, 4])?;
    let source = synthetic_splits(1000, 300, 16, 4, 3)?;
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let pretrained = train(&spec, None, &source, &cfg)?;
    println!("pretrained on task A: {:.1}%", 100.0 * pretrained.test_accuracy);

    // Task B: the same inputs with the labels rotated.
    let rotate = |mut d: Dataset| {
        d.labels.iter_mut().for_each(|l| *l = (*l + 1) % 4);
        d
    };
    let target = DataSplits {
        train: rotate(source.train.clone()),
        test: rotate(source.test.clone()),
    };
    let weights = pretrained.model.effective_params()?;
    let before = evaluate_params(&spec, &weights, &target.test)?;

    let mut setup = McncSetup::new(GeneratorConfig::new(5, 4, 64).with_hidden(vec![32, 32]));
    setup.pretrained = Some(weights);
    setup.lora_rank = Some(4);
    let adapted = train(
        &spec,
        Some(&setup),
        &target,
        &TrainConfig {
            lr: 0.1,
            epochs: 40,
            ..cfg
        },
    )?;
    println!(
        "task B: {:.1}% before, {:.1}% after adapting {} numbers ({})",
        100.0 * before,
        100.0 * adapted.test_accuracy,
        adapted.trainable_params,
        adapted.compression.percentage_label()
    );
    Ok(())
}
