//! Wall-clock throughput of full-model reconstruction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::reparam::{reconstruction_flops, ChunkScope, CompressedModel, FlopsMethod, LayerKind, MatrixGroup};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workers: usize,
    pub repeats: usize,
    pub n_chunks: usize,
    /// Median over repeats.
    pub wall_ms: f64,
    pub chunks_per_sec: f64,
    /// Analytic cost of one reconstruction.
    pub flops: u64,
    pub flops_per_sec: f64,
}

/// The compressed layers as matrices for cost accounting. A global chunk
/// sequence counts as one flat matrix.
pub fn compressed_matrices(cm: &CompressedModel) -> Vec<MatrixGroup> {
    let sizes = cm
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Compressed)
        .map(|l| l.numel());
    match cm.scope {
        ChunkScope::PerLayer => sizes
            .map(|n| MatrixGroup {
                rows: n,
                cols: 1,
                count: 1,
            })
            .collect(),
        ChunkScope::Global => vec![MatrixGroup {
            rows: sizes.sum(),
            cols: 1,
            count: 1,
        }],
    }
}

/// Reconstructs `repeats` times with `workers` threads. Returns the report
/// and the buffers from the last run.
pub fn bench_reconstruct(
    cm: &CompressedModel,
    gen: &Generator,
    workers: usize,
    repeats: usize,
) -> Result<(BenchReport, Vec<Tensor>)> {
    if workers == 0 || repeats == 0 {
        return Err(Error::Config("workers and repeats must be ≥ 1".into()));
    }
    let flops = reconstruction_flops(gen.config(), &compressed_matrices(cm), FlopsMethod::Mcnc)?.total;
    let base = cm.base_params()?;
    let mut times = Vec::with_capacity(repeats);
    let mut out = Vec::new();
    for _ in 0..repeats {
        let start = Instant::now();
        out = cm.reconstruct_from_base(gen, &base, workers)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    let secs = median.max(1e-9);
    Ok((
        BenchReport {
            workers,
            repeats,
            n_chunks: cm.n_chunks(),
            wall_ms: median * 1e3,
            chunks_per_sec: cm.n_chunks() as f64 / secs,
            flops,
            flops_per_sec: flops as f64 / secs,
        },
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::reparam::{Base, LayerEntry, LayerInit};
    use crate::rng::Rng;

    #[test]
    fn output_matches_plain_reconstruct() {
        let layers = vec![
            LayerEntry::new(
                "a",
                vec![30, 20],
                LayerKind::Compressed,
                LayerInit::Uniform { fan_in: 30 },
            ),
            LayerEntry::new("b", vec![17], LayerKind::Compressed, LayerInit::Zeros),
        ];
        let cfg = GeneratorConfig::new(5, 3, 64).with_hidden(vec![16, 16]);
        let mut cm = CompressedModel::new(cfg, ChunkScope::PerLayer, Base::Seed(1), layers, vec![]).unwrap();
        let mut rng = Rng::from_seed(2);
        for a in cm.alphas.data_mut() {
            *a = rng.symmetric(0.5);
        }
        let gen = Generator::build(&cm.generator).unwrap();
        let (r1, out1) = bench_reconstruct(&cm, &gen, 1, 3).unwrap();
        let (_, out4) = bench_reconstruct(&cm, &gen, 4, 2).unwrap();
        assert_eq!(out1, cm.reconstruct(&gen).unwrap());
        assert_eq!(out1, out4);
        assert!(r1.chunks_per_sec.is_finite() && r1.chunks_per_sec > 0.0);
        // 600 entries → 10 passes, 17 → 1 pass; each pass 2·(3·16+16·16+16·64) + 64.
        assert_eq!(r1.flops, 11 * (2 * (48 + 256 + 1024) + 64));
    }
}
