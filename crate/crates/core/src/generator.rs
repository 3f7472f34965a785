//! The frozen generator: a bias-free MLP `ℝᵏ → ℝᵈ` rebuilt from a seed.
//!
//! Weights are drawn layer by layer, each `fan_in × fan_out` matrix filled
//! row-major from the [`crate::rng`] stream, weights before biases. Layer
//! `ℓ` draws from `U(-c/n, c/n)` (or `N(0, (c/n)²)`) with `n` its fan-in;
//! the first layer always uses `c = 1` and is then multiplied by the input
//! frequency, so stored weights already contain it.
//!
//! Hidden layers apply the activation; the output layer is linear. With
//! sine activations and no biases the generator maps `0` to exactly `0`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use crate::autodiff::normalize_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Uniform,
    Normal,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Uniform => "uniform",
            InitKind::Normal => "normal",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(InitKind::Uniform),
            "normal" => Ok(InitKind::Normal),
            other => Err(Error::Config(format!("unknown init {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Trainable inputs per chunk, not counting the amplitude.
    pub k: usize,
    /// Output (chunk) dimension.
    pub d: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub input_frequency: f64,
    pub init: InitKind,
    /// Scale `c` applied to every layer after the first.
    pub init_scale: f64,
    pub use_bias: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 9,
            d: 5000,
            hidden_widths: vec![1000, 1000],
            activation: Activation::Sine,
            input_frequency: 4.5,
            init: InitKind::Uniform,
            init_scale: 1.0,
            use_bias: false,
        }
    }
}

impl GeneratorConfig {
    pub fn new(seed: u64, k: usize, d: usize) -> Self {
        Self {
            seed,
            k,
            d,
            ..Self::default()
        }
    }

    pub fn with_hidden(mut self, widths: Vec<usize>) -> Self {
        self.hidden_widths = widths;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_frequency(mut self, f: f64) -> Self {
        self.input_frequency = f;
        self
    }

    pub fn with_init(mut self, init: InitKind, scale: f64) -> Self {
        self.init = init;
        self.init_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "generator dims must be positive (k={}, d={})",
                self.k, self.d
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!("zero hidden width in {:?}", self.hidden_widths)));
        }
        if !(self.input_frequency > 0.0 && self.input_frequency.is_finite()) {
            return Err(Error::Config(format!(
                "input frequency must be positive, got {}",
                self.input_frequency
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init scale must be positive, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Whether each chunk carries a trainable amplitude β. A linear
    /// generator has none; the amplitude becomes one extra input instead.
    pub fn uses_amplitude(&self) -> bool {
        self.activation != Activation::Identity
    }

    /// Actual generator input width.
    pub fn input_dim(&self) -> usize {
        if self.uses_amplitude() {
            self.k
        } else {
            self.k + 1
        }
    }

    /// `[input, hidden.., d]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim());
        dims.extend(&self.hidden_widths);
        dims.push(self.d);
        dims
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// Trainable numbers per chunk: `k` inputs plus the amplitude.
    pub fn params_per_chunk(&self) -> usize {
        self.k + 1
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    weights: Vec<Arc<Tensor>>,
    biases: Vec<Arc<Tensor>>,
}

impl Generator {
    /// Deterministically draws all weights from `config.seed`.
    pub fn build(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::from_seed(config.seed);
        let dims = config.layer_dims();
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::new();
        for (layer, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let c = if layer == 0 { 1.0 } else { config.init_scale };
            let scale = c / fan_in as f64;
            let draw = |rng: &mut Rng| match config.init {
                InitKind::Uniform => rng.symmetric(scale),
                InitKind::Normal => scale * rng.normal(),
            };
            let mut w: Vec<f64> = (0..fan_in * fan_out).map(|_| draw(&mut rng)).collect();
            if layer == 0 {
                for v in &mut w {
                    *v *= config.input_frequency;
                }
            }
            weights.push(Arc::new(Tensor::new(vec![fan_in, fan_out], w)?));
            if config.use_bias {
                let b: Vec<f64> = (0..fan_out).map(|_| draw(&mut rng)).collect();
                biases.push(Arc::new(Tensor::new(vec![fan_out], b)?));
            }
        }
        Ok(Self {
            config: config.clone(),
            weights,
            biases,
        })
    }

    /// Assembles a generator from explicit weights, e.g. after optimizing
    /// it. Such a generator is no longer reproducible from its seed.
    pub fn from_parts(config: GeneratorConfig, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if weights.len() != dims.len() - 1 {
            return Err(Error::Structural(format!(
                "{} weight matrices for {} layers",
                weights.len(),
                dims.len() - 1
            )));
        }
        for (w, pair) in weights.iter().zip(dims.windows(2)) {
            if w.shape() != pair {
                return Err(Error::Dimension {
                    op: "generator weights",
                    left: w.shape().to_vec(),
                    right: pair.to_vec(),
                });
            }
        }
        if config.use_bias != !biases.is_empty() {
            return Err(Error::Structural("bias presence disagrees with config".into()));
        }
        Ok(Self {
            config,
            weights: weights.into_iter().map(Arc::new).collect(),
            biases: biases.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Arc<Tensor>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Arc<Tensor>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.config.d
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Dimension {
                op: "generator forward",
                left: shape.to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Batched forward pass: `B×input_dim → B×d`.
    pub fn forward(&self, alphas: &Tensor) -> Result<Tensor> {
        self.check_input(alphas.shape())?;
        let last = self.weights.len() - 1;
        let mut x = alphas.matmul(&self.weights[0])?;
        for layer in 0..=last {
            if layer > 0 {
                x = x.matmul(&self.weights[layer])?;
            }
            if let Some(b) = self.biases.get(layer) {
                let n = b.len();
                for row in x.data_mut().chunks_exact_mut(n) {
                    for (v, bj) in row.iter_mut().zip(b.data()) {
                        *v += bj;
                    }
                }
            }
            if layer < last {
                let act = self.config.activation;
                for v in x.data_mut() {
                    *v = act.apply(*v);
                }
            }
        }
        Ok(x)
    }

    /// Same computation recorded on a tape; gradients flow to `alphas` only.
    pub fn forward_tape(&self, tape: &mut Tape, alphas: Var) -> Result<Var> {
        self.check_input(tape.value(alphas).shape())?;
        let last = self.weights.len() - 1;
        let mut x = alphas;
        for layer in 0..=last {
            x = tape.matmul_frozen(x, Arc::clone(&self.weights[layer]))?;
            if let Some(b) = self.biases.get(layer) {
                let b = tape.constant((**b).clone());
                x = tape.add_bias(x, b)?;
            }
            if layer < last {
                x = tape.activation(x, self.config.activation);
            }
        }
        Ok(x)
    }

    /// Per-output bound `Σ_j |W_last[j, i]|` valid whenever hidden
    /// activations lie in `[-1, 1]` and there are no biases.
    pub fn output_bounds(&self) -> Vec<f64> {
        let w = self.weights.last().expect("at least one layer");
        let (rows, cols) = w.dims2().expect("matrix");
        let mut bounds = vec![0.0; cols];
        for r in 0..rows {
            for (b, v) in bounds.iter_mut().zip(w.row(r)) {
                *b += v.abs();
            }
        }
        bounds
    }
}

/// Convenience wrapper matching [`Generator::build`].
pub fn build_generator(config: &GeneratorConfig) -> Result<Generator> {
    Generator::build(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig::new(seed, 3, 7).with_hidden(vec![5, 4])
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = GeneratorConfig::new(7, 9, 50).with_hidden(vec![40, 40]);
        let a = Generator::build(&cfg).unwrap();
        let b = Generator::build(&cfg).unwrap();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            let ba: Vec<u64> = wa.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = wb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        for seed in 0..5 {
            let gen = Generator::build(&small(seed)).unwrap();
            let out = gen.forward(&Tensor::zeros(&[1, 3])).unwrap();
            assert_eq!(out.shape(), &[1, 7]);
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_width_rejected() {
        let cfg = small(0).with_hidden(vec![4, 0]);
        assert!(matches!(Generator::build(&cfg), Err(Error::Config(_))));
        let cfg = small(0).with_frequency(0.0);
        assert!(Generator::build(&cfg).is_err());
    }

    #[test]
    fn single_layer_hand_computed() {
        let cfg = GeneratorConfig::new(21, 1, 1).with_hidden(vec![]).with_frequency(3.0);
        let gen = Generator::build(&cfg).unwrap();
        // First (and only) draw of the stream, times the frequency.
        let w = Rng::from_seed(21).symmetric(1.0) * 3.0;
        assert_eq!(gen.weights()[0].data(), &[w]);
        let out = gen.forward(&Tensor::from_rows(&[[0.7]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.7 * w]);
    }

    #[test]
    fn first_layer_uniform_statistics() {
        // fan-in 1000 into width 1000: 10^6 draws from U(-1/1000, 1/1000).
        let cfg = GeneratorConfig::new(5, 1000, 1)
            .with_hidden(vec![1000])
            .with_frequency(1.0);
        let gen = Generator::build(&cfg).unwrap();
        let w = gen.weights()[0].data();
        assert_eq!(w.len(), 1_000_000);
        assert!(w.iter().all(|v| v.abs() < 1e-3));
        let mean_abs = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        // E|U(-a, a)| = a / 2.
        let oracle = 1e-3 / 2.0;
        assert!((mean_abs - oracle).abs() / oracle < 0.1, "{mean_abs}");
    }

    #[test]
    fn first_layer_ignores_init_scale() {
        let base = GeneratorConfig::new(3, 2, 4).with_hidden(vec![3]);
        let scaled = base.clone().with_init(InitKind::Uniform, 8.0);
        let a = Generator::build(&base).unwrap();
        let b = Generator::build(&scaled).unwrap();
        assert_eq!(a.weights()[0], b.weights()[0]);
        for (x, y) in a.weights()[1].data().iter().zip(b.weights()[1].data()) {
            assert!((y - 8.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut cfg = small(4);
        cfg.use_bias = true;
        let gen = Generator::build(&cfg).unwrap();
        let mut rng = Rng::from_seed(8);
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.symmetric(2.0)).collect()).unwrap();
        let plain = gen.forward(&x).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let out = gen.forward_tape(&mut tape, v).unwrap();
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let gen = Generator::build(&small(10).with_frequency(2.0)).unwrap();
        let mut rng = Rng::from_seed(3);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.symmetric(1.0)).collect()).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let y = gen.forward_tape(t, v)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn wrong_input_width() {
        let gen = Generator::build(&small(1)).unwrap();
        assert!(matches!(
            gen.forward(&Tensor::zeros(&[1, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_generator_takes_extra_input() {
        let cfg = small(1).with_activation(Activation::Identity);
        assert_eq!(cfg.input_dim(), 4);
        assert!(!cfg.uses_amplitude());
        assert_eq!(cfg.params_per_chunk(), small(1).params_per_chunk());
    }

    #[test]
    fn normalize_rows_examples() {
        let t = normalize_rows(&Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(t.data(), &[0.6, 0.8]);
        let t = normalize_rows(&Tensor::from_rows(&[[0.0, 0.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0]);
        let err = normalize_rows(&Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateInput { row: 1 })));
    }
}
