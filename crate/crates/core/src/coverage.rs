//! How well a generator's normalized image covers the unit sphere.
//!
//! Coverage is measured as the sliced Wasserstein-2 distance between the
//! normalized outputs and a uniform sample on `S^{d-1}`, mapped to a score
//! `exp(-τ·swd²)` in `(0, 1]`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::generator::{normalize_rows, Generator};
use crate::rng::{Rng, SplitMix64};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_PROJECTIONS: usize = 128;
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub swd: f64,
    pub uniformity_score: f64,
    pub tau: f64,
    pub n_samples: usize,
    pub n_projections: usize,
    pub seed: u64,
}

/// `n` points uniform on `S^{d-1}`: standard normal rows, normalized.
pub fn sample_uniform_sphere(n: usize, d: usize, seed: u64) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::Config(format!("need n ≥ 1 and d ≥ 1, got n={n}, d={d}")));
    }
    let mut rng = Rng::from_seed(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut row = vec![0.0; d];
    for _ in 0..n {
        loop {
            row.iter_mut().for_each(|v| *v = rng.normal());
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                data.extend(row.iter().map(|v| v / norm));
                break;
            }
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Projection direction `j`, drawn from its own stream so directions do not
/// depend on how projections are distributed over workers.
fn direction(seed: u64, j: usize, d: usize) -> Vec<f64> {
    let mut rng = Rng::stream(seed, j as u64);
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `d × m` matrix whose columns are projection directions.
pub fn projection_matrix(d: usize, m: usize, seed: u64) -> Result<Tensor> {
    let mut data = vec![0.0; d * m];
    for j in 0..m {
        for (i, v) in direction(seed, j, d).into_iter().enumerate() {
            data[i * m + j] = v;
        }
    }
    Tensor::new(vec![d, m], data)
}

fn project_sorted(points: &Tensor, dir: &[f64]) -> Vec<f64> {
    let d = dir.len();
    let mut p: Vec<f64> = points
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(dir).map(|(a, b)| a * b).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Squared sliced W₂: the mean over projections of the 1-D W₂² obtained by
/// matching sorted projections.
pub fn sliced_w2_squared(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    let (na, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if na != nb {
        return Err(Error::Data(format!("sample counts differ: {na} vs {nb}")));
    }
    if da != db {
        return Err(Error::Dimension {
            op: "sliced_w2",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if n_projections == 0 {
        return Err(Error::Config("need at least one projection".into()));
    }
    let per_projection: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|j| {
            let dir = direction(seed, j, da);
            let pa = project_sorted(a, &dir);
            let pb = project_sorted(b, &dir);
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / na as f64
        })
        .collect();
    Ok(per_projection.iter().sum::<f64>() / n_projections as f64)
}

pub fn sliced_w2(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    Ok(sliced_w2_squared(a, b, n_projections, seed)?.sqrt())
}

pub fn uniformity_score(swd: f64, tau: f64) -> f64 {
    (-tau * swd * swd).exp()
}

fn split_seeds(seed: u64) -> (u64, u64, u64) {
    let mut sm = SplitMix64::new(seed);
    (sm.next_u64(), sm.next_u64(), sm.next_u64())
}

/// Scores an arbitrary point set (normalized first) against a uniform
/// sample of the same size.
pub fn coverage_of_points(points: &Tensor, n_projections: usize, seed: u64, tau: f64) -> Result<CoverageReport> {
    let normed = normalize_rows(points)?;
    let (n, d) = normed.dims2()?;
    let (_, sphere_seed, proj_seed) = split_seeds(seed);
    let target = sample_uniform_sphere(n, d, sphere_seed)?;
    let swd = sliced_w2(&normed, &target, n_projections, proj_seed)?;
    Ok(CoverageReport {
        swd,
        uniformity_score: uniformity_score(swd, tau),
        tau,
        n_samples: n,
        n_projections,
        seed,
    })
}

/// `n` generator inputs drawn from `U([-bound, bound]^k)`.
pub fn sample_inputs(n: usize, k: usize, bound: f64, seed: u64) -> Result<Tensor> {
    let mut rng = Rng::from_seed(seed);
    Tensor::new(vec![n, k], (0..n * k).map(|_| rng.symmetric(bound)).collect())
}

/// Normalized generator outputs for inputs uniform in `[-bound, bound]^k`.
pub fn generator_cloud(gen: &Generator, bound: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(bound >= 0.0) {
        return Err(Error::Config(format!("input bound must be non-negative, got {bound}")));
    }
    let (alpha_seed, _, _) = split_seeds(seed);
    let alphas = sample_inputs(n, gen.input_dim(), bound, alpha_seed)?;
    normalize_rows(&gen.forward(&alphas)?)
}

pub fn coverage_report(
    gen: &Generator,
    bound: f64,
    n: usize,
    n_projections: usize,
    seed: u64,
    tau: f64,
) -> Result<CoverageReport> {
    let cloud = generator_cloud(gen, bound, n, seed)?;
    coverage_of_points(&cloud, n_projections, seed, tau)
}

/// Writes `x,y,z` rows for a 3-D point cloud.
pub fn write_point_cloud_csv<W: Write>(points: &Tensor, out: W) -> Result<()> {
    let (_, d) = points.dims2()?;
    if d != 3 {
        return Err(Error::Dimension {
            op: "point cloud csv",
            left: points.shape().to_vec(),
            right: vec![3],
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["x", "y", "z"]).map_err(csv_err)?;
    for row in points.data().chunks_exact(3) {
        w.serialize((row[0], row[1], row[2])).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Inputs are drawn from `U([-bound, bound]^k)`.
    pub input_bound: f64,
    pub n_projections: usize,
    pub seed: u64,
}

impl Default for SwTrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 256,
            lr: 0.05,
            input_bound: 1.0,
            n_projections: 32,
            seed: 0,
        }
    }
}

/// Plain gradient descent on the squared sliced W₂ between normalized
/// outputs and a fresh uniform batch each step. Returns a new generator;
/// `gen` is untouched.
pub fn train_generator_sw(gen: &Generator, opts: &SwTrainOptions) -> Result<Generator> {
    let mut weights: Vec<Tensor> = gen.weights().iter().map(|w| (**w).clone()).collect();
    let mut biases: Vec<Tensor> = gen.biases().iter().map(|b| (**b).clone()).collect();
    let cfg = gen.config().clone();
    let (k, d) = (cfg.input_dim(), cfg.d);
    let last = weights.len() - 1;
    let mut seeds = SplitMix64::new(opts.seed);

    for step in 0..opts.steps {
        let (alpha_seed, sphere_seed, proj_seed) = (seeds.next_u64(), seeds.next_u64(), seeds.next_u64());
        let mut tape = Tape::new();
        let w_vars: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let b_vars: Vec<_> = biases.iter().map(|b| tape.leaf(b.clone())).collect();
        let mut x = tape.constant(sample_inputs(opts.batch, k, opts.input_bound, alpha_seed)?);
        for layer in 0..=last {
            x = tape.matmul(x, w_vars[layer])?;
            if let Some(&b) = b_vars.get(layer) {
                x = tape.add_bias(x, b)?;
            }
            if layer < last {
                x = tape.activation(x, cfg.activation);
            }
        }
        let normed = tape.normalize_rows(x)?;
        let proj = projection_matrix(d, opts.n_projections, proj_seed)?;
        let target = sample_uniform_sphere(opts.batch, d, sphere_seed)?.matmul(&proj)?;
        let proj = tape.constant(proj);
        let projected = tape.matmul(normed, proj)?;
        let target = tape.constant(target);
        let loss = tape.sorted_matching_w2(projected, target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss)?;
        for (w, v) in weights
            .iter_mut()
            .chain(biases.iter_mut())
            .zip(w_vars.iter().chain(&b_vars))
        {
            let g = tape.grad_or_zeros(*v);
            for (p, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *p -= opts.lr * gi;
            }
        }
    }
    Generator::from_parts(cfg, weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    #[test]
    fn sphere_rows_are_unit() {
        let s = sample_uniform_sphere(10_000, 5, 3).unwrap();
        for row in s.data().chunks_exact(5) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        let again = normalize_rows(&s).unwrap();
        assert!(again.max_abs_diff(&s).unwrap() <= 1e-12);
    }

    #[test]
    fn circle_half_plane_and_means() {
        let n = 100_000;
        let s = sample_uniform_sphere(n, 2, 8).unwrap();
        let positive = s.data().chunks_exact(2).filter(|r| r[0] > 0.0).count();
        assert!((positive as f64 / n as f64 - 0.5).abs() <= 0.01);
        let s = sample_uniform_sphere(n, 4, 9).unwrap();
        for j in 0..4 {
            let mean = s.data().chunks_exact(4).map(|r| r[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 3.0 / (n as f64).sqrt(), "{j}: {mean}");
        }
    }

    #[test]
    fn one_dimensional_examples() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(sliced_w2(&a, &b, 1, 0).unwrap(), 1.0);
        let a = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert!((sliced_w2(&a, &b, 3, 1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sliced_w2(&a, &a, 8, 2).unwrap(), 0.0);
    }

    #[test]
    fn unequal_sizes_rejected() {
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(sliced_w2(&a, &b, 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn score_is_monotone() {
        let xs = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0];
        for w in xs.windows(2) {
            assert!(uniformity_score(w[0], 10.0) > uniformity_score(w[1], 10.0));
        }
        assert_eq!(uniformity_score(0.0, 10.0), 1.0);
    }

    #[test]
    fn uniform_points_score_high() {
        let pts = sample_uniform_sphere(10_000, 3, 1234).unwrap();
        let r = coverage_of_points(&pts, 128, 5, DEFAULT_TAU).unwrap();
        assert!(r.uniformity_score >= 0.99, "{r:?}");
    }

    #[test]
    fn zero_bound_is_degenerate() {
        let gen = Generator::build(&GeneratorConfig::new(0, 1, 3).with_hidden(vec![16, 16])).unwrap();
        let err = coverage_report(&gen, 0.0, 100, 8, 0, DEFAULT_TAU).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput { row: 0 }));
    }

    #[test]
    fn training_with_no_steps_or_zero_lr_is_identity() {
        let gen = Generator::build(&GeneratorConfig::new(4, 1, 3).with_hidden(vec![8, 8])).unwrap();
        let same = train_generator_sw(
            &gen,
            &SwTrainOptions {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(same.weights(), gen.weights());
        let same = train_generator_sw(
            &gen,
            &SwTrainOptions {
                steps: 1,
                lr: 0.0,
                batch: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(same.weights(), gen.weights());
    }

    #[test]
    fn point_cloud_csv() {
        let pts = sample_uniform_sphere(3, 3, 0).unwrap();
        let mut buf = Vec::new();
        write_point_cloud_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("x,y,z\n"));
        assert!(write_point_cloud_csv(&Tensor::zeros(&[2, 2]), Vec::new()).is_err());
    }
}
