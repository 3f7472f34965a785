//! Chunk-wise reparameterization `θ = θ₀ + β·φ(α)`.
//!
//! Compressed layers are flattened and cut into `d`-sized chunks. Each
//! chunk owns one row of `α` (generator input) and one amplitude `β`. The
//! generator output for all rows is computed in one batch, scaled row-wise
//! by `β`, sliced back into layer shapes (discarding the unused tail of the
//! last chunk), and added to the base weights `θ₀`.

mod flops;
mod lora;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use flops::{
    format_centi, generator_pass_flops, llama2_adapter_matrices, reconstruction_flops, FlopsMethod, FlopsReport,
    GroupFlops, LlamaShape, MatrixGroup,
};
pub use lora::{wrap_lora, LoraFactors, LoraSpec, LoraTarget};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkScope {
    /// Each compressed layer owns its own chunks.
    #[default]
    PerLayer,
    /// All compressed layers are concatenated and chunked together.
    Global,
}

impl fmt::Display for ChunkScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChunkScope::PerLayer => "per_layer",
            ChunkScope::Global => "global",
        })
    }
}

impl FromStr for ChunkScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "per_layer" => Ok(ChunkScope::PerLayer),
            "global" => Ok(ChunkScope::Global),
            other => Err(Error::Config(format!("unknown chunk scope {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub total_params: usize,
    pub chunk_size: usize,
    pub n_chunks: usize,
    /// Generated values dropped from the last chunk.
    pub tail_waste: usize,
    /// `n_chunks · (k + 1)`.
    pub trainable_count: usize,
    pub scope: ChunkScope,
}

pub fn plan_chunks(total_params: usize, chunk_size: usize, k: usize, scope: ChunkScope) -> Result<ChunkPlan> {
    if total_params == 0 {
        return Err(Error::Config("cannot chunk zero parameters".into()));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let n_chunks = total_params.div_ceil(chunk_size);
    Ok(ChunkPlan {
        total_params,
        chunk_size,
        n_chunks,
        tail_waste: n_chunks * chunk_size - total_params,
        trainable_count: n_chunks * (k + 1),
        scope,
    })
}

/// How a layer's parameters are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// `θ₀ + β·φ(α)`.
    Compressed,
    /// Trained directly and stored as-is (norms, excluded biases).
    Direct,
    /// Fixed at `θ₀` (a pretrained weight under a LoRA adapter).
    Frozen,
}

/// How `θ₀` is drawn when the base is given by a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerInit {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: LayerKind,
    pub init: LayerInit,
}

impl LayerEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: LayerKind, init: LayerInit) -> Self {
        Self {
            name: name.into(),
            shape,
            kind,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A LoRA adapter: the target layer's effective weight is `W + A·B`.
/// Fields index into the layer table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Base {
    /// `θ₀` is redrawn from this seed using each layer's [`LayerInit`].
    Seed(u64),
    /// `θ₀` stored explicitly, one tensor per layer.
    Embedded(Vec<Tensor>),
}

/// Everything needed to rebuild a model: generator config, base weights,
/// layer table, and the trained `(α, β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub generator: GeneratorConfig,
    pub scope: ChunkScope,
    pub base: Base,
    pub layers: Vec<LayerEntry>,
    pub adapters: Vec<LoraAdapter>,
    /// `n_chunks × input_dim`, rows ordered by layer.
    pub alphas: Tensor,
    /// One amplitude per chunk; absent for linear generators.
    pub betas: Option<Tensor>,
    /// Current values of [`LayerKind::Direct`] layers, in table order.
    pub direct: Vec<Tensor>,
}

impl CompressedModel {
    /// Fresh model with `α = 0`, `β = 1` and direct layers at `θ₀`.
    pub fn new(
        generator: GeneratorConfig,
        scope: ChunkScope,
        base: Base,
        layers: Vec<LayerEntry>,
        adapters: Vec<LoraAdapter>,
    ) -> Result<Self> {
        generator.validate()?;
        let n_chunks = count_chunks(&layers, generator.d, scope)?;
        let alphas = Tensor::zeros(&[n_chunks, generator.input_dim()]);
        let betas = generator.uses_amplitude().then(|| Tensor::full(&[n_chunks], 1.0));
        let mut model = Self {
            generator,
            scope,
            base,
            layers,
            adapters,
            alphas,
            betas,
            direct: Vec::new(),
        };
        let base_params = model.base_params()?;
        model.direct = model
            .layers
            .iter()
            .zip(base_params)
            .filter(|(l, _)| l.kind == LayerKind::Direct)
            .map(|(_, t)| t)
            .collect();
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let n_chunks = count_chunks(&self.layers, self.generator.d, self.scope)?;
        if self.alphas.shape() != [n_chunks, self.generator.input_dim()] {
            return Err(Error::Structural(format!(
                "alphas have shape {:?}, layout needs [{n_chunks}, {}]",
                self.alphas.shape(),
                self.generator.input_dim()
            )));
        }
        match (&self.betas, self.generator.uses_amplitude()) {
            (Some(b), true) if b.len() == n_chunks => {}
            (None, false) => {}
            (b, _) => {
                return Err(Error::Structural(format!(
                    "betas {:?} do not fit {n_chunks} chunks (amplitude: {})",
                    b.as_ref().map(|t| t.shape().to_vec()),
                    self.generator.uses_amplitude()
                )))
            }
        }
        let direct: Vec<&LayerEntry> = self.layers.iter().filter(|l| l.kind == LayerKind::Direct).collect();
        if direct.len() != self.direct.len() || direct.iter().zip(&self.direct).any(|(l, t)| l.shape != t.shape()) {
            return Err(Error::Structural("direct tensors do not match the layer table".into()));
        }
        if let Base::Embedded(ts) = &self.base {
            if ts.len() != self.layers.len() || ts.iter().zip(&self.layers).any(|(t, l)| t.shape() != l.shape) {
                return Err(Error::Structural("embedded base does not match the layer table".into()));
            }
        }
        for ad in &self.adapters {
            let n = self.layers.len();
            if ad.target >= n || ad.a >= n || ad.b >= n {
                return Err(Error::Structural(format!("adapter {ad:?} out of range")));
            }
            let (t, a, b) = (&self.layers[ad.target], &self.layers[ad.a], &self.layers[ad.b]);
            let ok = a.shape.len() == 2
                && b.shape.len() == 2
                && a.shape[1] == b.shape[0]
                && a.shape[0] * b.shape[1] == t.numel();
            if !ok {
                return Err(Error::Structural(format!(
                    "adapter factors {:?}·{:?} do not cover {:?}",
                    a.shape, b.shape, t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn n_chunks(&self) -> usize {
        self.alphas.rows()
    }

    /// One plan per compressed layer (per-layer scope) or a single plan.
    pub fn plans(&self) -> Vec<ChunkPlan> {
        let (d, k) = (self.generator.d, self.generator.k);
        let sizes = self.compressed_sizes();
        match self.scope {
            ChunkScope::PerLayer => sizes
                .iter()
                .map(|&p| plan_chunks(p, d, k, self.scope).expect("validated"))
                .collect(),
            ChunkScope::Global => vec![plan_chunks(sizes.iter().sum(), d, k, self.scope).expect("validated")],
        }
    }

    fn compressed_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Compressed)
            .map(LayerEntry::numel)
            .collect()
    }

    /// `(layer index, offset into the flattened generated buffer)` for every
    /// compressed layer.
    pub fn compressed_offsets(&self) -> Vec<(usize, usize)> {
        let d = self.generator.d;
        let mut offset = 0;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind != LayerKind::Compressed {
                continue;
            }
            out.push((i, offset));
            offset += match self.scope {
                ChunkScope::PerLayer => layer.numel().div_ceil(d) * d,
                ChunkScope::Global => layer.numel(),
            };
        }
        out
    }

    /// Trainable numbers behind the compressed layers: `α` and `β`.
    pub fn trainable_count(&self) -> usize {
        self.alphas.len() + self.betas.as_ref().map_or(0, Tensor::len)
    }

    /// `θ₀` for every layer in table order.
    pub fn base_params(&self) -> Result<Vec<Tensor>> {
        match &self.base {
            Base::Embedded(ts) => Ok(ts.clone()),
            Base::Seed(seed) => Ok(seeded_base(&self.layers, *seed)),
        }
    }

    fn check_generator(&self, gen: &Generator) -> Result<()> {
        let c = gen.config();
        if c.input_dim() != self.generator.input_dim() || c.d != self.generator.d {
            return Err(Error::Structural(format!(
                "generator is {}→{}, model expects {}→{}",
                c.input_dim(),
                c.d,
                self.generator.input_dim(),
                self.generator.d
            )));
        }
        Ok(())
    }

    /// All layer buffers. Equivalent to [`Self::reconstruct_with_workers`]
    /// with one worker.
    pub fn reconstruct(&self, gen: &Generator) -> Result<Vec<Tensor>> {
        self.reconstruct_with_workers(gen, 1)
    }

    /// Evaluates chunks in `workers` contiguous row blocks on the rayon pool.
    /// Rows are computed independently, so the result does not depend on
    /// the worker count.
    pub fn reconstruct_with_workers(&self, gen: &Generator, workers: usize) -> Result<Vec<Tensor>> {
        let base = self.base_params()?;
        self.reconstruct_from_base(gen, &base, workers)
    }

    pub fn reconstruct_from_base(&self, gen: &Generator, base: &[Tensor], workers: usize) -> Result<Vec<Tensor>> {
        self.validate()?;
        self.check_generator(gen)?;
        let generated = generate_scaled(gen, &self.alphas, self.betas.as_ref(), workers)?;
        let mut direct = self.direct.iter();
        let offsets = self.compressed_offsets();
        let mut offsets = offsets.iter().peekable();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let value = match layer.kind {
                LayerKind::Compressed => {
                    let &(idx, offset) = offsets.next().expect("offset per compressed layer");
                    debug_assert_eq!(idx, i);
                    let n = layer.numel();
                    let delta = &generated.data()[offset..offset + n];
                    let data = delta.iter().zip(base[i].data()).map(|(dv, b)| dv + b).collect();
                    Tensor::new(layer.shape.clone(), data)?
                }
                LayerKind::Direct => direct.next().expect("validated").clone(),
                LayerKind::Frozen => base[i].clone(),
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Leaves for `α`, `β` and direct layers holding the current values.
    pub fn tape_params(&self, tape: &mut Tape) -> TapeParams {
        TapeParams {
            alphas: tape.leaf(self.alphas.clone()),
            betas: self.betas.as_ref().map(|b| tape.leaf(b.clone())),
            direct: self.direct.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// [`Self::reconstruct_from_base`] recorded on a tape, differentiable
    /// with respect to the leaves in `params`.
    pub fn reconstruct_tape(
        &self,
        tape: &mut Tape,
        gen: &Generator,
        params: &TapeParams,
        base: &[Tensor],
    ) -> Result<Vec<Var>> {
        self.check_generator(gen)?;
        let mut generated = gen.forward_tape(tape, params.alphas)?;
        if let Some(b) = params.betas {
            generated = tape.scale_rows(generated, b)?;
        }
        let offsets = self.compressed_offsets();
        let mut offsets = offsets.iter();
        let mut direct = params.direct.iter();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let v = match layer.kind {
                LayerKind::Compressed => {
                    let &(_, offset) = offsets.next().expect("offset per compressed layer");
                    let delta = tape.slice(generated, offset, &layer.shape)?;
                    let theta0 = tape.constant(base[i].clone());
                    tape.add(delta, theta0)?
                }
                LayerKind::Direct => *direct
                    .next()
                    .ok_or_else(|| Error::Structural("missing direct leaf".into()))?,
                LayerKind::Frozen => tape.constant(base[i].clone()),
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Indices of layers that are LoRA factors rather than model weights.
    fn factor_layers(&self) -> Vec<usize> {
        self.adapters.iter().flat_map(|a| [a.a, a.b]).collect()
    }

    /// Model weights with adapters merged in: every non-factor layer in table
    /// order, with `A·B` added where an adapter targets it.
    pub fn effective_params(&self, layer_values: &[Tensor]) -> Result<Vec<Tensor>> {
        let factors = self.factor_layers();
        let mut out = Vec::new();
        for (i, value) in layer_values.iter().enumerate() {
            if factors.contains(&i) {
                continue;
            }
            let mut w = value.clone();
            for ad in self.adapters.iter().filter(|a| a.target == i) {
                let ab = layer_values[ad.a].matmul(&layer_values[ad.b])?;
                for (x, y) in w.data_mut().iter_mut().zip(ab.data()) {
                    *x += y;
                }
            }
            out.push(w);
        }
        Ok(out)
    }

    pub fn effective_params_tape(&self, tape: &mut Tape, layer_values: &[Var]) -> Result<Vec<Var>> {
        let factors = self.factor_layers();
        let mut out = Vec::new();
        for (i, &value) in layer_values.iter().enumerate() {
            if factors.contains(&i) {
                continue;
            }
            let mut w = value;
            for ad in self.adapters.iter().filter(|a| a.target == i) {
                let ab = tape.matmul(layer_values[ad.a], layer_values[ad.b])?;
                let shape = tape.value(w).shape().to_vec();
                let ab = tape.slice(ab, 0, &shape)?;
                w = tape.add(w, ab)?;
            }
            out.push(w);
        }
        Ok(out)
    }
}

/// Tape handles for the trainable parts of a [`CompressedModel`].
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub alphas: Var,
    pub betas: Option<Var>,
    pub direct: Vec<Var>,
}

fn count_chunks(layers: &[LayerEntry], d: usize, scope: ChunkScope) -> Result<usize> {
    let sizes: Vec<usize> = layers
        .iter()
        .filter(|l| l.kind == LayerKind::Compressed)
        .map(LayerEntry::numel)
        .collect();
    if sizes.is_empty() {
        return Err(Error::Structural("model has no compressed layers".into()));
    }
    if layers.iter().any(|l| l.numel() == 0) {
        return Err(Error::Structural("layer with zero parameters".into()));
    }
    Ok(match scope {
        ChunkScope::PerLayer => sizes.iter().map(|p| p.div_ceil(d)).sum(),
        ChunkScope::Global => sizes.iter().sum::<usize>().div_ceil(d),
    })
}

/// Base weights drawn layer by layer from one stream seeded with `seed`.
pub fn seeded_base(layers: &[LayerEntry], seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::from_seed(seed);
    layers
        .iter()
        .map(|layer| match layer.init {
            LayerInit::Zeros => Tensor::zeros(&layer.shape),
            LayerInit::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let data = (0..layer.numel()).map(|_| rng.symmetric(bound)).collect();
                Tensor::new(layer.shape.clone(), data).expect("positive extents")
            }
        })
        .collect()
}

/// `β ⊙ φ(α)` row by row, split into `workers` contiguous blocks.
pub fn generate_scaled(gen: &Generator, alphas: &Tensor, betas: Option<&Tensor>, workers: usize) -> Result<Tensor> {
    use rayon::prelude::*;

    let (n, k) = alphas.dims2()?;
    let d = gen.output_dim();
    let workers = workers.clamp(1, n);
    let block = n.div_ceil(workers);
    let blocks: Vec<(usize, usize)> = (0..n).step_by(block).map(|s| (s, (s + block).min(n))).collect();
    let run = |&(start, end): &(usize, usize)| -> Result<Vec<f64>> {
        let rows = Tensor::new(vec![end - start, k], alphas.data()[start * k..end * k].to_vec())?;
        Ok(gen.forward(&rows)?.into_data())
    };
    let parts: Vec<Vec<f64>> = if workers == 1 {
        blocks.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| blocks.par_iter().map(run).collect::<Result<_>>())?
    };
    let mut data = parts.concat();
    if let Some(b) = betas {
        for (row, bi) in data.chunks_exact_mut(d).zip(b.data()) {
            for v in row {
                *v *= bi;
            }
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Parameter accounting for a compressed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// `α` and `β` entries.
    pub trainable_params: usize,
    /// Parameters of the compressed layers (the denominator).
    pub compressible_params: usize,
    /// Direct and frozen layers, reported but not counted.
    pub excluded_params: usize,
    pub n_chunks: usize,
    pub tail_waste: usize,
    /// `trainable / compressible`, as a percentage.
    pub percentage: f64,
    /// Size of the encoded file.
    pub stored_bytes: u64,
    /// Compressible parameters stored densely as `f32`.
    pub dense_bytes: u64,
}

impl CompressionReport {
    /// Report for a model trained without compression.
    pub fn uncompressed(param_count: usize) -> Self {
        Self {
            trainable_params: param_count,
            compressible_params: param_count,
            excluded_params: 0,
            n_chunks: 0,
            tail_waste: 0,
            percentage: 100.0,
            stored_bytes: 4 * param_count as u64,
            dense_bytes: 4 * param_count as u64,
        }
    }

    pub fn percentage_label(&self) -> String {
        format!("{:.3}%", self.percentage)
    }
}

pub fn compression_report(cm: &CompressedModel) -> Result<CompressionReport> {
    cm.validate()?;
    let compressible: usize = cm.compressed_sizes().iter().sum();
    let excluded: usize = cm
        .layers
        .iter()
        .filter(|l| l.kind != LayerKind::Compressed)
        .map(LayerEntry::numel)
        .sum();
    let trainable = cm.trainable_count();
    let stored = crate::format::to_bytes(cm)?.len() as u64;
    Ok(CompressionReport {
        trainable_params: trainable,
        compressible_params: compressible,
        excluded_params: excluded,
        n_chunks: cm.n_chunks(),
        tail_waste: cm.plans().iter().map(|p| p.tail_waste).sum(),
        percentage: 100.0 * trainable as f64 / compressible as f64,
        stored_bytes: stored,
        dense_bytes: 4 * compressible as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check_many, Activation};

    fn dense(name: &str, rows: usize, cols: usize) -> LayerEntry {
        LayerEntry::new(
            name,
            vec![rows, cols],
            LayerKind::Compressed,
            LayerInit::Uniform { fan_in: rows },
        )
    }

    fn small_gen(seed: u64, k: usize, d: usize) -> GeneratorConfig {
        GeneratorConfig::new(seed, k, d)
            .with_hidden(vec![6, 5])
            .with_frequency(2.0)
    }

    #[test]
    fn chunk_arithmetic() {
        let p = plan_chunks(10, 4, 1, ChunkScope::PerLayer).unwrap();
        assert_eq!((p.n_chunks, p.tail_waste), (3, 2));
        let p = plan_chunks(12, 4, 1, ChunkScope::PerLayer).unwrap();
        assert_eq!((p.n_chunks, p.tail_waste), (3, 0));
        let p = plan_chunks(5000, 5000, 9, ChunkScope::Global).unwrap();
        assert_eq!((p.n_chunks, p.trainable_count), (1, 10));
        assert_eq!(p.trainable_count as f64 / 5000.0, 0.002);
        let p = plan_chunks(3, 8, 2, ChunkScope::Global).unwrap();
        assert_eq!((p.n_chunks, p.tail_waste), (1, 5));
        assert!(matches!(
            plan_chunks(0, 4, 1, ChunkScope::Global),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_alpha_reconstructs_base_exactly() {
        let layers = vec![dense("w1", 7, 5), dense("w2", 5, 3)];
        for scope in [ChunkScope::PerLayer, ChunkScope::Global] {
            let mut cm =
                CompressedModel::new(small_gen(3, 2, 8), scope, Base::Seed(11), layers.clone(), vec![]).unwrap();
            cm.betas = Some(Tensor::full(&[cm.n_chunks()], -3.7));
            let gen = Generator::build(&cm.generator).unwrap();
            let rebuilt = cm.reconstruct(&gen).unwrap();
            let base = cm.base_params().unwrap();
            for (r, b) in rebuilt.iter().zip(&base) {
                let rb: Vec<u64> = r.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(rb, bb);
            }
        }
    }

    #[test]
    fn single_linear_layer_by_hand() {
        // k=1, d=2, one linear layer: φ(α) = α·[w0, w1] (frequency included).
        let cfg = GeneratorConfig::new(2, 1, 2).with_hidden(vec![]).with_frequency(1.5);
        let gen = Generator::build(&cfg).unwrap();
        let mut rng = Rng::from_seed(2);
        let w = [rng.symmetric(1.0) * 1.5, rng.symmetric(1.0) * 1.5];
        let layers = vec![LayerEntry::new("v", vec![3], LayerKind::Compressed, LayerInit::Zeros)];
        let mut cm = CompressedModel::new(cfg, ChunkScope::PerLayer, Base::Seed(0), layers, vec![]).unwrap();
        cm.alphas = Tensor::new(vec![2, 1], vec![0.5, -1.0]).unwrap();
        cm.betas = Some(Tensor::vector(vec![2.0, 3.0]).unwrap());
        let out = cm.reconstruct(&gen).unwrap();
        let expected = [2.0 * 0.5 * w[0], 2.0 * 0.5 * w[1], -3.0 * w[0]];
        for (a, b) in out[0].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_matches_padded_plan() {
        let cfg = small_gen(5, 2, 4);
        let gen = Generator::build(&cfg).unwrap();
        let make = |p: usize| {
            let layers = vec![LayerEntry::new("v", vec![p], LayerKind::Compressed, LayerInit::Zeros)];
            let mut cm =
                CompressedModel::new(cfg.clone(), ChunkScope::PerLayer, Base::Seed(0), layers, vec![]).unwrap();
            let mut rng = Rng::from_seed(77);
            cm.alphas = Tensor::new(vec![3, 2], (0..6).map(|_| rng.symmetric(1.0)).collect()).unwrap();
            cm
        };
        let wasteful = make(10).reconstruct(&gen).unwrap();
        let padded = make(12).reconstruct(&gen).unwrap();
        assert_eq!(wasteful[0].data(), &padded[0].data()[..10]);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let layers = vec![dense("a", 40, 30), dense("b", 30, 7)];
        let mut cm =
            CompressedModel::new(small_gen(9, 3, 16), ChunkScope::PerLayer, Base::Seed(1), layers, vec![]).unwrap();
        let mut rng = Rng::from_seed(4);
        for v in cm.alphas.data_mut() {
            *v = rng.symmetric(1.0);
        }
        let gen = Generator::build(&cm.generator).unwrap();
        let one = cm.reconstruct_with_workers(&gen, 1).unwrap();
        for workers in [2, 3, 4, 7] {
            assert_eq!(one, cm.reconstruct_with_workers(&gen, workers).unwrap());
        }
    }

    #[test]
    fn tape_reconstruction_matches_plain() {
        let layers = vec![
            dense("a", 6, 5),
            LayerEntry::new("bias", vec![5], LayerKind::Direct, LayerInit::Zeros),
        ];
        let mut cm =
            CompressedModel::new(small_gen(1, 2, 7), ChunkScope::Global, Base::Seed(3), layers, vec![]).unwrap();
        let mut rng = Rng::from_seed(6);
        for v in cm.alphas.data_mut() {
            *v = rng.symmetric(1.0);
        }
        let gen = Generator::build(&cm.generator).unwrap();
        let plain = cm.reconstruct(&gen).unwrap();
        let base = cm.base_params().unwrap();
        let mut tape = Tape::new();
        let params = cm.tape_params(&mut tape);
        let vars = cm.reconstruct_tape(&mut tape, &gen, &params, &base).unwrap();
        for (v, t) in vars.iter().zip(&plain) {
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn gradients_through_reconstruction() {
        let layers = vec![dense("w", 4, 3)];
        let cm = CompressedModel::new(small_gen(2, 3, 5), ChunkScope::PerLayer, Base::Seed(8), layers, vec![]).unwrap();
        let gen = Generator::build(&cm.generator).unwrap();
        let base = cm.base_params().unwrap();
        let mut rng = Rng::from_seed(5);
        let alphas = Tensor::new(vec![3, 3], (0..9).map(|_| rng.symmetric(1.0)).collect()).unwrap();
        let betas = Tensor::vector(vec![1.3, 0.7, 2.1]).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(|_| rng.symmetric(1.0)).collect()).unwrap();
        let err = finite_difference_check_many(
            |t, v| {
                let params = TapeParams {
                    alphas: v[0],
                    betas: Some(v[1]),
                    direct: vec![],
                };
                let w = cm.reconstruct_tape(t, &gen, &params, &base)?;
                let xv = t.constant(x.clone());
                let logits = t.matmul(xv, w[0])?;
                t.softmax_cross_entropy(logits, &[0, 2])
            },
            &[alphas, betas],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn linear_generator_has_no_betas_and_same_budget() {
        let layers = vec![dense("w", 20, 10)];
        let sine = CompressedModel::new(
            small_gen(1, 4, 50),
            ChunkScope::PerLayer,
            Base::Seed(0),
            layers.clone(),
            vec![],
        )
        .unwrap();
        let lin_cfg = small_gen(1, 4, 50).with_activation(Activation::Identity);
        let lin = CompressedModel::new(lin_cfg, ChunkScope::PerLayer, Base::Seed(0), layers, vec![]).unwrap();
        assert!(lin.betas.is_none());
        assert_eq!(lin.alphas.cols(), 5);
        assert_eq!(sine.trainable_count(), lin.trainable_count());
        assert_eq!(sine.trainable_count(), sine.plans()[0].trainable_count);
    }

    #[test]
    fn structural_errors() {
        let layers = vec![LayerEntry::new("b", vec![4], LayerKind::Direct, LayerInit::Zeros)];
        assert!(matches!(
            CompressedModel::new(small_gen(0, 2, 3), ChunkScope::PerLayer, Base::Seed(0), layers, vec![]),
            Err(Error::Structural(_))
        ));
        let mut cm = CompressedModel::new(
            small_gen(0, 2, 3),
            ChunkScope::PerLayer,
            Base::Seed(0),
            vec![dense("w", 2, 2)],
            vec![],
        )
        .unwrap();
        cm.alphas = Tensor::zeros(&[5, 2]);
        let gen = Generator::build(&cm.generator).unwrap();
        assert!(matches!(cm.reconstruct(&gen), Err(Error::Structural(_))));
        let cm = CompressedModel::new(
            small_gen(0, 2, 3),
            ChunkScope::PerLayer,
            Base::Seed(0),
            vec![dense("w", 2, 2)],
            vec![],
        )
        .unwrap();
        let other = Generator::build(&small_gen(0, 3, 3)).unwrap();
        assert!(matches!(cm.reconstruct(&other), Err(Error::Structural(_))));
    }

    #[test]
    fn report_for_single_chunk() {
        let layers = vec![LayerEntry::new(
            "w",
            vec![50, 100],
            LayerKind::Compressed,
            LayerInit::Uniform { fan_in: 50 },
        )];
        let cfg = GeneratorConfig::new(0, 9, 5000).with_hidden(vec![8, 8]);
        let cm = CompressedModel::new(cfg, ChunkScope::PerLayer, Base::Seed(0), layers, vec![]).unwrap();
        let r = compression_report(&cm).unwrap();
        assert_eq!(r.trainable_params, 10);
        assert_eq!(r.percentage_label(), "0.200%");
        assert_eq!(CompressionReport::uncompressed(123).percentage, 100.0);
    }

    #[test]
    fn lora_adapter_merges_product() {
        let spec = LoraSpec {
            rank: 2,
            target: LoraTarget::Dense { rows: 4, cols: 3 },
        };
        let factors = wrap_lora(&spec).unwrap();
        let mut layers = vec![LayerEntry::new(
            "w",
            vec![4, 3],
            LayerKind::Frozen,
            LayerInit::Uniform { fan_in: 4 },
        )];
        layers.extend(factors.layer_entries("w"));
        let adapters = vec![LoraAdapter { target: 0, a: 1, b: 2 }];
        let mut cm = CompressedModel::new(
            small_gen(0, 2, 5),
            ChunkScope::PerLayer,
            Base::Seed(2),
            layers,
            adapters,
        )
        .unwrap();
        let gen = Generator::build(&cm.generator).unwrap();
        // B starts at zero, so the merged weight is the frozen one.
        let values = cm.reconstruct(&gen).unwrap();
        let eff = cm.effective_params(&values).unwrap();
        assert_eq!(eff.len(), 1);
        assert_eq!(eff[0], values[0]);
        cm.alphas.data_mut()[0] = 0.3;
        cm.alphas.data_mut()[5] = -0.8;
        let values = cm.reconstruct(&gen).unwrap();
        let eff = cm.effective_params(&values).unwrap();
        let ab = values[1].matmul(&values[2]).unwrap();
        for ((e, w), p) in eff[0].data().iter().zip(values[0].data()).zip(ab.data()) {
            assert!((e - (w + p)).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let params = cm.tape_params(&mut tape);
        let base = cm.base_params().unwrap();
        let vars = cm.reconstruct_tape(&mut tape, &gen, &params, &base).unwrap();
        let eff_t = cm.effective_params_tape(&mut tape, &vars).unwrap();
        assert_eq!(tape.value(eff_t[0]), &eff[0]);
    }
}
