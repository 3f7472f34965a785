//! Analytic cost of regenerating weights on the fly.
//!
//! One generator pass costs `2·Σ wᵢ·wᵢ₊₁` over consecutive layer widths. A
//! matrix of `E` entries needs `⌈E/d⌉` passes plus `d` multiplies per pass
//! for the amplitude. A NOLA-style basis combination costs `2·bases·E`.
//! Everything is exact integer arithmetic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::lora::{wrap_lora, LoraSpec, LoraTarget};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum FlopsMethod {
    Mcnc,
    Nola { n_bases: u64 },
}

impl fmt::Display for FlopsMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlopsMethod::Mcnc => f.write_str("mcnc"),
            FlopsMethod::Nola { n_bases } => write!(f, "nola:{n_bases}"),
        }
    }
}

impl FromStr for FlopsMethod {
    type Err = Error;

    /// `mcnc` or `nola:<bases>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "mcnc" {
            return Ok(FlopsMethod::Mcnc);
        }
        if let Some(n) = lower.strip_prefix("nola:").or_else(|| lower.strip_prefix("nola=")) {
            let n_bases = n
                .parse()
                .map_err(|_| Error::Config(format!("bad basis count in {s:?}")))?;
            return Ok(FlopsMethod::Nola { n_bases });
        }
        Err(Error::Config(format!(
            "unknown method {s:?} (expected mcnc or nola:<bases>)"
        )))
    }
}

/// `count` matrices of shape `rows × cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixGroup {
    pub rows: usize,
    pub cols: usize,
    pub count: u64,
}

impl MatrixGroup {
    pub fn entries(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

impl FromStr for MatrixGroup {
    type Err = Error;

    /// `ROWSxCOLS` or `ROWSxCOLS:COUNT`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad matrix shape {s:?} (expected ROWSxCOLS[:COUNT])"));
        let (dims, count) = match s.split_once(':') {
            Some((d, c)) => (d, c.trim().parse().map_err(|_| bad())?),
            None => (s, 1),
        };
        let (r, c) = dims.split_once(['x', 'X', '*']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 || count == 0 {
            return Err(bad());
        }
        Ok(MatrixGroup { rows, cols, count })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFlops {
    pub group: MatrixGroup,
    pub per_matrix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub method: FlopsMethod,
    pub groups: Vec<GroupFlops>,
    pub total: u64,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Total in hundredths of a GFLOP when each matrix cost is first rounded
    /// to hundredths of a MFLOP, the convention used when these totals are
    /// tabulated by hand. It can differ from rounding the exact total.
    pub fn tabulated_centi_gflops(&self) -> u64 {
        let centi_mflops: u64 = self
            .groups
            .iter()
            .map(|g| g.group.count * round_div(g.per_matrix, 10_000))
            .sum();
        round_div(centi_mflops, 1000)
    }

    /// Exact total rounded to hundredths of a GFLOP.
    pub fn exact_centi_gflops(&self) -> u64 {
        round_div(self.total, 10_000_000)
    }
}

fn round_div(x: u64, by: u64) -> u64 {
    (x + by / 2) / by
}

pub fn format_centi(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

/// Cost of one generator pass.
pub fn generator_pass_flops(layer_dims: &[usize]) -> u64 {
    2 * layer_dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum::<u64>()
}

pub fn reconstruction_flops(gen: &GeneratorConfig, groups: &[MatrixGroup], method: FlopsMethod) -> Result<FlopsReport> {
    if groups.is_empty() {
        return Err(Error::Config("no matrix shapes given".into()));
    }
    if matches!(method, FlopsMethod::Mcnc) {
        gen.validate()?;
    }
    let pass = generator_pass_flops(&gen.layer_dims());
    let d = gen.d as u64;
    let amplitude = if gen.uses_amplitude() { d } else { 0 };
    let groups: Vec<GroupFlops> = groups
        .iter()
        .map(|&group| {
            let e = group.entries();
            let per_matrix = match method {
                FlopsMethod::Mcnc => {
                    let passes = e.div_ceil(d);
                    passes * pass + passes * amplitude
                }
                FlopsMethod::Nola { n_bases } => 2 * n_bases * e,
            };
            GroupFlops { group, per_matrix }
        })
        .collect();
    let total = groups.iter().map(|g| g.group.count * g.per_matrix).sum();
    Ok(FlopsReport { method, groups, total })
}

/// LLaMA-2 style decoder dimensions for adapter cost estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlamaShape {
    pub n_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub lora_rank: usize,
    /// Basis count of the NOLA comparison at this scale.
    pub nola_bases: u64,
}

impl LlamaShape {
    pub const LLAMA2_7B: LlamaShape = LlamaShape {
        n_layers: 32,
        hidden: 4096,
        intermediate: 11008,
        lora_rank: 8,
        nola_bases: 64,
    };

    pub const LLAMA2_13B: LlamaShape = LlamaShape {
        n_layers: 40,
        hidden: 5120,
        intermediate: 13824,
        lora_rank: 16,
        nola_bases: 140,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace(['_', '.'], "-").as_str() {
            "llama2-7b" | "llama-2-7b" | "7b" => Ok(Self::LLAMA2_7B),
            "llama2-13b" | "llama-2-13b" | "13b" => Ok(Self::LLAMA2_13B),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// LoRA factor matrices for the four attention projections and the three
/// SwiGLU MLP projections of every layer, grouped by size.
pub fn llama2_adapter_matrices(shape: &LlamaShape) -> Result<Vec<MatrixGroup>> {
    let (h, m) = (shape.hidden, shape.intermediate);
    let mut targets = vec![(h, h); 4];
    targets.extend([(h, m), (h, m), (m, h)]);
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (rows, cols) in targets {
        let f = wrap_lora(&LoraSpec {
            rank: shape.lora_rank,
            target: LoraTarget::Dense { rows, cols },
        })?;
        for s in [f.a_shape, f.b_shape] {
            let key = (s[0].max(s[1]), s[0].min(s[1]));
            *counts.entry(key).or_default() += shape.n_layers as u64;
        }
    }
    Ok(counts
        .into_iter()
        .map(|((rows, cols), count)| MatrixGroup { rows, cols, count })
        .collect())
}
