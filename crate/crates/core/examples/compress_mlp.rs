//! Trains a classifier through the generator and compares it with the same
//! network trained densely. Uses MNIST from `$MCNC_DATA_DIR` when present,
//! a synthetic blob task otherwise.
//!
//! cargo run --release --example compress_mlp

use mcnc::harness::{load_mnist_dir, mnist_dir_from_env, synthetic_splits, train, McncSetup, MlpSpec, TrainConfig};
use mcnc::{ChunkScope, GeneratorConfig, Result};

fn main() -> Result<()> {
    let (spec, data, generator, epochs) = match mnist_dir_from_env() {
        Some(dir) => {
            let mut data = load_mnist_dir(dir)?;
            data.train = data.train.head(10_000)?;
            (MlpSpec::mnist(), data, GeneratorConfig::new(1, 9, 5000), 3)
        }
        None => (
            MlpSpec::new(vec![32, 64, 8])?,
            synthetic_splits(2000, 500, 32, 8, 1)?,
            GeneratorConfig::new(1, 9, 256).with_hidden(vec![64, 64]),
            30,
        ),
    };
    let cfg = TrainConfig {
        lr: 0.1,
        epochs,
        batch_size: 32,
        ..TrainConfig::default()
    };

    let setup = McncSetup::new(generator).with_scope(ChunkScope::Global);
    let compressed = train(&spec, Some(&setup), &data, &cfg)?;
    let dense = train(&spec, None, &data, &TrainConfig { lr: 0.01, ..cfg })?;

    let report = compressed.compression;
    println!("model {spec}");
    println!(
        "compressed: {:.2}% accuracy with {} numbers ({})",
        100.0 * compressed.test_accuracy,
        report.trainable_params,
        report.percentage_label()
    );
    println!(
        "dense:      {:.2}% accuracy with {} numbers",
        100.0 * dense.test_accuracy,
        dense.trainable_params
    );
    println!("loss curve: {:?}", compressed.loss_curve);
    Ok(())
}
