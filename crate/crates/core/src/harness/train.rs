//! Mini-batch training of dense or MCNC-compressed classifiers.

use serde::{Deserialize, Serialize};

use super::data::{DataSplits, Dataset};
use super::model::{correct, MlpSpec};
use super::optim::{Optimizer, OptimizerKind};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::reparam::{
    compression_report, seeded_base, wrap_lora, Base, ChunkScope, CompressedModel, CompressionReport, LayerKind,
    LoraAdapter, LoraSpec, LoraTarget, TapeParams,
};
use crate::rng::{Rng, SplitMix64};
use crate::tensor::Tensor;

pub const DEFAULT_LR_SEARCH: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Rates tried by [`train_with_search`]; `lr` alone when empty.
    pub lr_search: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement in mean training loss before decaying.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            lr_search: DEFAULT_LR_SEARCH.to_vec(),
            epochs: 30,
            batch_size: 128,
            plateau_patience: 4,
            plateau_factor: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        if !lr_ok(self.lr) || !self.lr_search.iter().copied().all(lr_ok) {
            return Err(Error::Config(format!(
                "learning rates must be finite and ≥ 0: {self:?}"
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!(
                "plateau factor {} outside (0, 1]",
                self.plateau_factor
            )));
        }
        Ok(())
    }
}

/// How a classifier is compressed.
#[derive(Clone, Debug)]
pub struct McncSetup {
    pub generator: GeneratorConfig,
    pub scope: ChunkScope,
    /// Compress biases with the weights; otherwise they are trained directly.
    pub compress_biases: bool,
    /// Seed for `θ₀`; derived from the training seed when absent.
    pub base_seed: Option<u64>,
    /// Pretrained `[w0, b0, …]` to adapt instead of training from scratch.
    /// Stored in the model as an embedded base.
    pub pretrained: Option<Vec<Tensor>>,
    /// With `pretrained`, freeze the weights and compress rank-`r` LoRA
    /// factors instead.
    pub lora_rank: Option<usize>,
    /// Use this generator rather than building one from `generator`, e.g.
    /// after [`crate::coverage::train_generator_sw`]. Its config must match.
    pub generator_override: Option<Generator>,
}

impl McncSetup {
    pub fn new(generator: GeneratorConfig) -> Self {
        Self {
            generator,
            scope: ChunkScope::PerLayer,
            compress_biases: true,
            base_seed: None,
            pretrained: None,
            lora_rank: None,
            generator_override: None,
        }
    }

    /// The ablation setting: default generator, one global chunk sequence,
    /// biases compressed, giving 540 trainable numbers (0.2%) for 784-256-256-10.
    pub fn ablation_default(seed: u64) -> Self {
        let mut s = Self::new(GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        });
        s.scope = ChunkScope::Global;
        s
    }

    pub fn with_scope(mut self, scope: ChunkScope) -> Self {
        self.scope = scope;
        self
    }

    /// Builds the compressed model and its generator.
    pub fn build(&self, spec: &MlpSpec, train_seed: u64) -> Result<(CompressedModel, Generator)> {
        let bias_kind = if self.compress_biases {
            LayerKind::Compressed
        } else {
            LayerKind::Direct
        };
        let base_seed = self.base_seed.unwrap_or_else(|| derived_seeds(train_seed).1);
        let (layers, adapters, base) = match (&self.pretrained, self.lora_rank) {
            (None, None) => (
                spec.layer_table(LayerKind::Compressed, bias_kind),
                vec![],
                Base::Seed(base_seed),
            ),
            (None, Some(_)) => {
                return Err(Error::Config("LoRA adaptation needs pretrained weights".into()));
            }
            (Some(w), None) => (
                spec.layer_table(LayerKind::Compressed, bias_kind),
                vec![],
                Base::Embedded(w.clone()),
            ),
            (Some(w), Some(rank)) => {
                let mut layers = spec.layer_table(LayerKind::Frozen, LayerKind::Frozen);
                let mut base = w.clone();
                let mut adapters = vec![];
                for i in 0..spec.n_linear() {
                    let target = 2 * i;
                    let shape = layers[target].shape.clone();
                    let factors = wrap_lora(&LoraSpec {
                        rank,
                        target: LoraTarget::Dense {
                            rows: shape[0],
                            cols: shape[1],
                        },
                    })?;
                    let entries = factors.layer_entries(&layers[target].name);
                    base.extend(seeded_base(&entries, base_seed.wrapping_add(i as u64)));
                    let a = layers.len();
                    layers.extend(entries);
                    adapters.push(LoraAdapter { target, a, b: a + 1 });
                }
                (layers, adapters, Base::Embedded(base))
            }
        };
        if let Base::Embedded(ts) = &base {
            let n = spec.layer_table(LayerKind::Direct, LayerKind::Direct).len();
            let shapes: Vec<&[usize]> = ts[..n.min(ts.len())].iter().map(Tensor::shape).collect();
            if MlpSpec::from_params(&shapes)? != *spec {
                return Err(Error::Structural(format!("pretrained weights do not fit {spec}")));
            }
        }
        let cm = CompressedModel::new(self.generator.clone(), self.scope, base, layers, adapters)?;
        let gen = match &self.generator_override {
            Some(g) if *g.config() == self.generator => g.clone(),
            Some(_) => return Err(Error::Config("generator override does not match its config".into())),
            None => Generator::build(&self.generator)?,
        };
        Ok((cm, gen))
    }
}

/// `(shuffle seed, base seed)` for a training seed.
fn derived_seeds(seed: u64) -> (u64, u64) {
    let mut s = SplitMix64::new(seed);
    (s.next_u64(), s.next_u64())
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Dense {
        spec: MlpSpec,
        params: Vec<Tensor>,
    },
    Compressed {
        spec: MlpSpec,
        model: CompressedModel,
        generator: Generator,
    },
}

impl TrainedModel {
    pub fn spec(&self) -> &MlpSpec {
        match self {
            TrainedModel::Dense { spec, .. } | TrainedModel::Compressed { spec, .. } => spec,
        }
    }

    /// Classifier weights `[w0, b0, …]`, reconstructing once if compressed.
    pub fn effective_params(&self) -> Result<Vec<Tensor>> {
        match self {
            TrainedModel::Dense { params, .. } => Ok(params.clone()),
            TrainedModel::Compressed { model, generator, .. } => model.effective_params(&model.reconstruct(generator)?),
        }
    }

    pub fn compression(&self) -> Result<CompressionReport> {
        match self {
            TrainedModel::Dense { spec, .. } => Ok(CompressionReport::uncompressed(spec.param_count())),
            TrainedModel::Compressed { model, .. } => compression_report(model),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: TrainedModel,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub test_accuracy: f64,
    /// Every number the optimizer updated.
    pub trainable_params: usize,
    pub compression: CompressionReport,
    pub lr: f64,
    pub final_lr: f64,
    pub steps: usize,
}

enum Trainable {
    Dense,
    Compressed {
        model: CompressedModel,
        generator: Generator,
        base: Vec<Tensor>,
    },
}

impl Trainable {
    /// Builds the logits for `x` on `tape` from leaves holding `params`.
    fn logits(&self, spec: &MlpSpec, tape: &mut Tape, leaves: &[Var], x: Var) -> Result<Var> {
        match self {
            Trainable::Dense => spec.forward_tape(tape, leaves, x),
            Trainable::Compressed { model, generator, base } => {
                let has_beta = model.betas.is_some() as usize;
                let tp = TapeParams {
                    alphas: leaves[0],
                    betas: (has_beta == 1).then(|| leaves[1]),
                    direct: leaves[1 + has_beta..].to_vec(),
                };
                let layers = model.reconstruct_tape(tape, generator, &tp, base)?;
                let eff = model.effective_params_tape(tape, &layers)?;
                spec.forward_tape(tape, &eff, x)
            }
        }
    }
}

/// Trains `spec` on `data.train` and scores it on `data.test`. With
/// `mcnc == None` the uncompressed network is trained.
pub fn train(spec: &MlpSpec, mcnc: Option<&McncSetup>, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    for ds in [&data.train, &data.test] {
        if ds.n_features() != spec.n_inputs() || ds.n_classes > spec.n_classes() {
            return Err(Error::Structural(format!(
                "data with {} features and {} classes does not fit {spec}",
                ds.n_features(),
                ds.n_classes
            )));
        }
    }
    let (shuffle_seed, base_seed) = derived_seeds(cfg.seed);
    let (kind, mut params) = match mcnc {
        None => (
            Trainable::Dense,
            seeded_base(&spec.layer_table(LayerKind::Direct, LayerKind::Direct), base_seed),
        ),
        Some(setup) => {
            let (model, generator) = setup.build(spec, cfg.seed)?;
            let mut p = vec![model.alphas.clone()];
            p.extend(model.betas.clone());
            p.extend(model.direct.iter().cloned());
            let base = model.base_params()?;
            (Trainable::Compressed { model, generator, base }, p)
        }
    };
    let trainable_params = params.iter().map(Tensor::len).sum();

    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut rng = Rng::from_seed(shuffle_seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut lr = cfg.lr;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = data.train.batch(batch)?;
            let mut tape = Tape::new();
            let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let xv = tape.constant(x);
            let logits = kind.logits(spec, &mut tape, &leaves, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|&l| tape.grad_or_zeros(l)).collect();
            opt.step(&mut params, &grads, lr)?;
            total += value * batch.len() as f64;
            step += 1;
        }
        let epoch_loss = total / data.train.len() as f64;
        loss_curve.push(epoch_loss);
        if epoch_loss < best_loss * (1.0 - 1e-4) {
            best_loss = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                stale = 0;
            }
        }
    }

    let model = match kind {
        Trainable::Dense => TrainedModel::Dense {
            spec: spec.clone(),
            params,
        },
        Trainable::Compressed {
            mut model, generator, ..
        } => {
            let mut it = params.into_iter();
            model.alphas = it.next().expect("alphas");
            if model.betas.is_some() {
                model.betas = it.next();
            }
            model.direct = it.collect();
            TrainedModel::Compressed {
                spec: spec.clone(),
                model,
                generator,
            }
        }
    };
    let test_accuracy = evaluate(&model, &data.test)?;
    Ok(TrainResult {
        compression: model.compression()?,
        model,
        loss_curve,
        test_accuracy,
        trainable_params,
        lr: cfg.lr,
        final_lr: lr,
        steps: step,
    })
}

/// Outcome of one learning rate in a search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub test_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Trains once per rate in `cfg.lr_search` and keeps the best test
/// accuracy. Divergent rates are recorded; the search fails only if all do.
pub fn train_with_search(
    spec: &MlpSpec,
    mcnc: Option<&McncSetup>,
    data: &DataSplits,
    cfg: &TrainConfig,
) -> Result<(TrainResult, Vec<LrTrial>)> {
    let rates = if cfg.lr_search.is_empty() {
        vec![cfg.lr]
    } else {
        cfg.lr_search.clone()
    };
    let mut best: Option<TrainResult> = None;
    let mut trials = vec![];
    let mut last_err = None;
    for lr in rates {
        let run_cfg = TrainConfig { lr, ..cfg.clone() };
        match train(spec, mcnc, data, &run_cfg) {
            Ok(r) => {
                trials.push(LrTrial {
                    lr,
                    test_accuracy: Some(r.test_accuracy),
                    error: None,
                });
                if best.as_ref().is_none_or(|b| r.test_accuracy > b.test_accuracy) {
                    best = Some(r);
                }
            }
            Err(e @ Error::Divergence { .. }) => {
                trials.push(LrTrial {
                    lr,
                    test_accuracy: None,
                    error: Some(e.to_string()),
                });
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(b) => Ok((b, trials)),
        None => Err(last_err.expect("at least one rate")),
    }
}

/// Test accuracy. Compressed weights are reconstructed once and reused for
/// every batch.
pub fn evaluate(model: &TrainedModel, data: &Dataset) -> Result<f64> {
    evaluate_params(model.spec(), &model.effective_params()?, data)
}

pub fn evaluate_params(spec: &MlpSpec, params: &[Tensor], data: &Dataset) -> Result<f64> {
    if data.n_features() != spec.n_inputs() {
        return Err(Error::Structural(format!(
            "data has {} features, {spec} expects {}",
            data.n_features(),
            spec.n_inputs()
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for batch in idx.chunks(1024) {
        let (x, labels) = data.batch(batch)?;
        hits += correct(&spec.forward(params, &x)?, &labels);
    }
    Ok(hits as f64 / data.len() as f64)
}
