//! Fully connected ReLU classifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::reparam::{LayerEntry, LayerInit, LayerKind};
use crate::tensor::{gemm, Tensor};

/// Layer widths from input to logits, e.g. `784-256-256-10`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("MLP needs ≥ 2 positive widths, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// The ablation network: two hidden layers of 256.
    pub fn mnist() -> Self {
        Self {
            widths: vec![784, 256, 256, 10],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn n_linear(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `fc{i}.weight` (`in × out`) and `fc{i}.bias` for every linear layer,
    /// all with the given kinds.
    pub fn layer_table(&self, weight_kind: LayerKind, bias_kind: LayerKind) -> Vec<LayerEntry> {
        self.widths
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                let init = LayerInit::Uniform { fan_in: w[0] };
                [
                    LayerEntry::new(format!("fc{i}.weight"), vec![w[0], w[1]], weight_kind, init),
                    LayerEntry::new(format!("fc{i}.bias"), vec![w[1]], bias_kind, init),
                ]
            })
            .collect()
    }

    /// Recovers the widths from `[weight, bias, weight, bias, …]` parameters.
    pub fn from_params(shapes: &[&[usize]]) -> Result<Self> {
        if shapes.is_empty() || !shapes.len().is_multiple_of(2) {
            return Err(Error::Structural(format!(
                "{} tensors do not form weight/bias pairs",
                shapes.len()
            )));
        }
        let mut widths = vec![];
        for pair in shapes.chunks(2) {
            let (w, b) = (pair[0], pair[1]);
            if w.len() != 2 || b != [w[1]] || widths.last().is_some_and(|&l| l != w[0]) {
                return Err(Error::Structural(format!("inconsistent layer shapes {w:?} / {b:?}")));
            }
            if widths.is_empty() {
                widths.push(w[0]);
            }
            widths.push(w[1]);
        }
        Self::new(widths)
    }

    fn check_params(&self, shapes: &[&[usize]]) -> Result<()> {
        let expected = self.layer_table(LayerKind::Direct, LayerKind::Direct);
        if shapes.len() != expected.len() || shapes.iter().zip(&expected).any(|(s, l)| *s != l.shape.as_slice()) {
            return Err(Error::Structural(format!(
                "parameters {shapes:?} do not fit MLP {self}"
            )));
        }
        Ok(())
    }

    /// Logits for a batch, without recording gradients.
    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check_params(&params.iter().map(Tensor::shape).collect::<Vec<_>>())?;
        let (n, f) = x.dims2()?;
        if f != self.n_inputs() {
            return Err(Error::Structural(format!(
                "input has {f} features, model expects {}",
                self.n_inputs()
            )));
        }
        let mut h = x.data().to_vec();
        let last = self.n_linear() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let (fin, fout) = (w.shape()[0], w.shape()[1]);
            let mut out = Vec::with_capacity(n * fout);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            gemm(n, fin, fout, &h, false, w.data(), false, &mut out, true);
            if i < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            h = out;
        }
        Tensor::new(vec![n, self.n_classes()], h)
    }

    /// Logits recorded on a tape. `params` are `[w0, b0, w1, b1, …]`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = params.iter().map(|&p| tape.value(p).shape().to_vec()).collect();
        self.check_params(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let last = self.n_linear() - 1;
        let mut h = x;
        for (i, pair) in params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_bias(h, pair[1])?;
            if i < last {
                h = tape.activation(h, Activation::Relu);
            }
        }
        Ok(h)
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for MlpSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(['-', 'x', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad MLP spec {s:?} (expected e.g. 784-256-256-10)")))?;
        Self::new(widths)
    }
}

/// Fraction of rows whose largest logit is at the label. Ties go to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::Structural(format!("{n} logit rows for {} labels", labels.len())));
    }
    Ok(correct(logits, labels) as f64 / n as f64)
}

pub(crate) fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == l
        })
        .count()
}
