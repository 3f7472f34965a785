use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamParams) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            hyper,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

fn check_shapes(params: &[Tensor], grads: &[Tensor], what: &[Tensor]) -> Result<()> {
    let ok = params.len() == grads.len()
        && params.len() == what.len()
        && params
            .iter()
            .zip(grads)
            .zip(what)
            .all(|((p, g), s)| p.shape() == g.shape() && p.shape() == s.shape());
    if ok {
        Ok(())
    } else {
        Err(Error::Structural(
            "optimizer state, params and grads disagree in shape".into(),
        ))
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    state.step += 1;
    let AdamParams { beta1, beta2, eps } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params, AdamParams::default())),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(state, params, grads, lr),
            Optimizer::Sgd => sgd_step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p, AdamParams::default());
        adam_step(&mut s, &mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let g0 = [0.3, -4.0, 1e-3];
        let mut p = vec![Tensor::zeros(&[3])];
        let g = vec![Tensor::vector(g0.to_vec()).unwrap()];
        let mut s = AdamState::new(&p, AdamParams::default());
        adam_step(&mut s, &mut p, &g, 0.01).unwrap();
        // After bias correction m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
        for (x, g) in p[0].data().iter().zip(g0) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.5, 0.25];
        let mut p = vec![Tensor::zeros(&[3])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        for step in 0..500 {
            let g: Vec<f64> = p[0].data().iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
            let lr = if step < 300 { 0.1 } else { 0.01 };
            opt.step(&mut p, &[Tensor::vector(g).unwrap()], lr).unwrap();
        }
        let dist: f64 = p[0]
            .data()
            .iter()
            .zip(target)
            .map(|(x, t)| (x - t).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "{dist}");
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[3])];
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.1).is_err());
    }
}
