//! A bias-free sine generator maps α = 0 to the zero vector, so a freshly
//! compressed model starts exactly at its base weights.
//!
//! cargo run --example generator_zero_init

use mcnc::harness::MlpSpec;
use mcnc::{Base, ChunkScope, CompressedModel, Generator, GeneratorConfig, LayerKind, Result, Tensor};

fn main() -> Result<()> {
    let config = GeneratorConfig::new(42, 9, 5000);
    let gen = Generator::build(&config)?;
    println!("generator layers: {:?}", config.layer_dims());

    let out = gen.forward(&Tensor::zeros(&[1, config.input_dim()]))?;
    let max = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max |φ(0)| = {max}");

    let spec = MlpSpec::mnist();
    let layers = spec.layer_table(LayerKind::Compressed, LayerKind::Compressed);
    let cm = CompressedModel::new(config, ChunkScope::PerLayer, Base::Seed(7), layers, vec![])?;
    let rebuilt = cm.reconstruct(&gen)?;
    let base = cm.base_params()?;
    println!(
        "{} chunks, {} trainable numbers, reconstruction equals θ₀: {}",
        cm.n_chunks(),
        cm.trainable_count(),
        rebuilt == base
    );
    Ok(())
}
