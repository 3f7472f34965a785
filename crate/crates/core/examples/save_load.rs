//! Writes a compressed model, reads it back and rebuilds the weights from
//! the seed alone.
//!
//! cargo run --example save_load [path]

use mcnc::format::{from_bytes, to_bytes};
use mcnc::harness::MlpSpec;
use mcnc::{
    compression_report, load_compressed, save_compressed, Base, ChunkScope, CompressedModel, Generator,
    GeneratorConfig, LayerKind, Result, Rng,
};

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("demo.mcnc").display().to_string());
    let layers = MlpSpec::mnist().layer_table(LayerKind::Compressed, LayerKind::Direct);
    let mut cm = CompressedModel::new(
        GeneratorConfig::new(11, 9, 5000),
        ChunkScope::PerLayer,
        Base::Seed(3),
        layers,
        vec![],
    )?;
    let mut rng = Rng::from_seed(1);
    for a in cm.alphas.data_mut() {
        *a = rng.symmetric(1.0);
    }
    // Only f32 survives the file; round first so the comparison is exact.
    cm = from_bytes(&to_bytes(&cm)?)?;

    let bytes = save_compressed(&cm, &path)?;
    let loaded = load_compressed(&path)?;
    let report = compression_report(&loaded)?;
    println!(
        "{path}: {bytes} bytes, {} trainable ({})",
        report.trainable_params,
        report.percentage_label()
    );
    println!("dense f32 would be {} bytes", report.dense_bytes);

    let gen = Generator::build(&loaded.generator)?;
    println!(
        "reconstruction matches: {}",
        loaded.reconstruct(&gen)? == cm.reconstruct(&gen)?
    );
    Ok(())
}
