//! Reconstruction throughput with one worker and with all cores.
//!
//! cargo run --release --example bench_reconstruct

use mcnc::harness::MlpSpec;
use mcnc::{bench_reconstruct, Base, ChunkScope, CompressedModel, Generator, GeneratorConfig, LayerKind, Result, Rng};

fn main() -> Result<()> {
    let layers = MlpSpec::mnist().layer_table(LayerKind::Compressed, LayerKind::Compressed);
    let mut cm = CompressedModel::new(
        GeneratorConfig::new(0, 9, 5000),
        ChunkScope::Global,
        Base::Seed(0),
        layers,
        vec![],
    )?;
    let mut rng = Rng::from_seed(2);
    for a in cm.alphas.data_mut() {
        *a = rng.symmetric(1.0);
    }
    let gen = Generator::build(&cm.generator)?;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let (single, a) = bench_reconstruct(&cm, &gen, 1, 5)?;
    let (multi, b) = bench_reconstruct(&cm, &gen, cores.max(2), 5)?;
    for r in [&single, &multi] {
        println!(
            "{} worker(s): {:.1} ms, {:.0} chunks/s, {:.2} GFLOP/s",
            r.workers,
            r.wall_ms,
            r.chunks_per_sec,
            r.flops_per_sec / 1e9
        );
    }
    println!("identical buffers: {}", a == b);
    Ok(())
}
