use serde::{Deserialize, Serialize};

use super::{LayerEntry, LayerInit, LayerKind};
use crate::error::{Error, Result};

/// Weight being adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoraTarget {
    /// A `rows × cols` matrix (`fan_in × fan_out`).
    Dense { rows: usize, cols: usize },
    /// A convolution kernel of size `kernel` from `c_in` to `c_out`
    /// channels, viewed as a `(kernel·c_in) × (kernel·c_out)` matrix.
    Conv { kernel: usize, c_in: usize, c_out: usize },
}

impl LoraTarget {
    /// Matrix view the factors multiply into.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match *self {
            LoraTarget::Dense { rows, cols } => (rows, cols),
            LoraTarget::Conv { kernel, c_in, c_out } => (kernel * c_in, kernel * c_out),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub target: LoraTarget,
}

/// Shapes of the two factors, `A: m×r` and `B: r×n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub a_shape: [usize; 2],
    pub b_shape: [usize; 2],
}

impl LoraFactors {
    pub fn param_count(&self) -> usize {
        self.a_shape[0] * self.a_shape[1] + self.b_shape[0] * self.b_shape[1]
    }

    /// Layer-table entries registering both factors for compression. `A`
    /// starts uniform, `B` at zero, so the adapter is initially a no-op.
    pub fn layer_entries(&self, target_name: &str) -> [LayerEntry; 2] {
        [
            LayerEntry::new(
                format!("{target_name}.lora_a"),
                self.a_shape.to_vec(),
                LayerKind::Compressed,
                LayerInit::Uniform {
                    fan_in: self.a_shape[0],
                },
            ),
            LayerEntry::new(
                format!("{target_name}.lora_b"),
                self.b_shape.to_vec(),
                LayerKind::Compressed,
                LayerInit::Zeros,
            ),
        ]
    }
}

pub fn wrap_lora(spec: &LoraSpec) -> Result<LoraFactors> {
    let (m, n) = spec.target.matrix_dims();
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("empty LoRA target {:?}", spec.target)));
    }
    if spec.rank == 0 || spec.rank > m.min(n) {
        return Err(Error::Config(format!(
            "LoRA rank {} outside 1..={} for a {m}×{n} target",
            spec.rank,
            m.min(n)
        )));
    }
    Ok(LoraFactors {
        a_shape: [m, spec.rank],
        b_shape: [spec.rank, n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_rank_eight() {
        let f = wrap_lora(&LoraSpec {
            rank: 8,
            target: LoraTarget::Dense { rows: 4096, cols: 4096 },
        })
        .unwrap();
        assert_eq!(f.a_shape, [4096, 8]);
        assert_eq!(f.b_shape, [8, 4096]);
    }

    #[test]
    fn conv_reshape() {
        let f = wrap_lora(&LoraSpec {
            rank: 4,
            target: LoraTarget::Conv {
                kernel: 3,
                c_in: 16,
                c_out: 32,
            },
        })
        .unwrap();
        assert_eq!(f.a_shape, [48, 4]);
        assert_eq!(f.b_shape, [4, 96]);
    }

    #[test]
    fn full_rank_count() {
        let (m, n) = (6, 9);
        let f = wrap_lora(&LoraSpec {
            rank: 6,
            target: LoraTarget::Dense { rows: m, cols: n },
        })
        .unwrap();
        assert_eq!(f.param_count(), 6 * (m + n));
    }

    #[test]
    fn rank_too_large() {
        let spec = LoraSpec {
            rank: 5,
            target: LoraTarget::Dense { rows: 4, cols: 10 },
        };
        assert!(matches!(wrap_lora(&spec), Err(Error::Config(_))));
        let spec = LoraSpec {
            rank: 0,
            target: LoraTarget::Dense { rows: 4, cols: 10 },
        };
        assert!(wrap_lora(&spec).is_err());
    }
}
