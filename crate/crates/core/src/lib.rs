//! Manifold-constrained neural compression.
//!
//! Model weights are written chunk-wise as `θ = θ₀ + β·φ(α)`, where `φ` is a
//! frozen sine MLP rebuilt from a seed, `α ∈ ℝᵏ` is one trainable input per
//! chunk and `β` a trainable amplitude. Only `(α, β)`, the generator config
//! and the seed for `θ₀` need to be stored.
//!
//! ```
//! use mcnc::{Base, ChunkScope, CompressedModel, Generator, GeneratorConfig, LayerEntry, LayerInit, LayerKind};
//!
//! let cfg = GeneratorConfig::new(7, 9, 5000).with_hidden(vec![32]);
//! let layers = vec![LayerEntry::new("w", vec![50, 100], LayerKind::Compressed, LayerInit::Uniform { fan_in: 50 })];
//! let cm = CompressedModel::new(cfg, ChunkScope::PerLayer, Base::Seed(1), layers, vec![]).unwrap();
//! let gen = Generator::build(&cm.generator).unwrap();
//! // With α = 0 the generator outputs zero, so the weights are exactly θ₀.
//! assert_eq!(cm.reconstruct(&gen).unwrap(), cm.base_params().unwrap());
//! assert_eq!(cm.trainable_count(), 10);
//! ```

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod coverage;
pub mod error;
pub mod format;
pub mod generator;
pub mod harness;
pub mod reparam;
pub mod rng;
pub mod tensor;

pub use autodiff::{Activation, Tape, Var};
pub use bench::{bench_reconstruct, BenchReport};
pub use coverage::{coverage_report, sliced_w2, train_generator_sw, CoverageReport, SwTrainOptions};
pub use error::{Error, Result};
pub use format::{load_compressed, save_compressed};
pub use generator::{build_generator, Generator, GeneratorConfig, InitKind};
pub use reparam::{
    compression_report, plan_chunks, reconstruction_flops, wrap_lora, Base, ChunkPlan, ChunkScope, CompressedModel,
    CompressionReport, FlopsMethod, FlopsReport, LayerEntry, LayerInit, LayerKind, LoraSpec, LoraTarget, MatrixGroup,
};
pub use rng::Rng;
pub use tensor::Tensor;
