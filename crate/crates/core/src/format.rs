//! The `.mcnc` binary format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MCNC"
//! 4       2     version (u16 LE)
//! 6       4     header_len (u32 LE)
//! 10      n     header: UTF-8 JSON, keys sorted
//! 10+n    ...   payload, f32 LE:
//!                 alphas (n_chunks × input_dim, rows in layer order)
//!                 betas (n_chunks), if the generator has amplitudes
//!                 direct layer values, in layer-table order
//!                 embedded base values for every layer, if embedded
//! end-4   4     CRC-32 (IEEE, reflected) of every preceding byte
//! ```
//!
//! The generator itself is never stored: its config (including the seed)
//! is enough to rebuild it bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::reparam::{Base, ChunkScope, CompressedModel, LayerEntry, LayerKind, LoraAdapter};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCNC";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 10;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BaseHeader {
    Seed { seed: u64 },
    Embedded,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayTable {
    dtype: String,
    alphas: [usize; 2],
    betas: Option<usize>,
    direct: Vec<Vec<usize>>,
    embedded_base: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    generator: GeneratorConfig,
    scope: ChunkScope,
    base: BaseHeader,
    layers: Vec<LayerEntry>,
    adapters: Vec<LoraAdapter>,
    arrays: ArrayTable,
}

fn header_bytes(cm: &CompressedModel) -> Result<Vec<u8>> {
    let header = Header {
        generator: cm.generator.clone(),
        scope: cm.scope,
        base: match cm.base {
            Base::Seed(seed) => BaseHeader::Seed { seed },
            Base::Embedded(_) => BaseHeader::Embedded,
        },
        layers: cm.layers.clone(),
        adapters: cm.adapters.clone(),
        arrays: ArrayTable {
            dtype: "f32le".into(),
            alphas: [cm.alphas.rows(), cm.alphas.cols()],
            betas: cm.betas.as_ref().map(Tensor::len),
            direct: cm.direct.iter().map(|t| t.shape().to_vec()).collect(),
            embedded_base: matches!(cm.base, Base::Embedded(_)),
        },
    };
    // Going through `Value` sorts object keys, which keeps the bytes stable.
    let value = serde_json::to_value(&header)?;
    Ok(serde_json::to_vec(&value)?)
}

fn push_f32s(buf: &mut Vec<u8>, t: &Tensor) {
    buf.reserve(4 * t.len());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(cm: &CompressedModel) -> Result<Vec<u8>> {
    cm.validate()?;
    let header = header_bytes(cm)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Structural("header larger than 4 GiB".into()))?;
    let mut buf = Vec::with_capacity(PREAMBLE + header.len() + 4 * cm.alphas.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    push_f32s(&mut buf, &cm.alphas);
    if let Some(b) = &cm.betas {
        push_f32s(&mut buf, b);
    }
    for t in &cm.direct {
        push_f32s(&mut buf, t);
    }
    if let Base::Embedded(ts) = &cm.base {
        for t in ts {
            push_f32s(&mut buf, t);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Payload<'_> {
    fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = self.pos + 4 * n;
        if end > self.bytes.len() {
            return Err(Error::Inconsistent(format!(
                "payload too short: array of {n} floats at payload offset {} exceeds {} bytes",
                self.pos,
                self.bytes.len()
            )));
        }
        let data = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        self.pos = end;
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Inconsistent(e.to_string()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<CompressedModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Format {
            offset: bytes.len(),
            message: "truncated preamble".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let header_end = PREAMBLE + header_len;
    if bytes.len() < header_end + 4 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated file: header ends at {header_end} plus 4 CRC bytes"),
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Inconsistent(format!("header: {e}")))?;
    let mut payload = Payload {
        bytes: &bytes[header_end..body_end],
        pos: 0,
    };
    let alphas = payload.take(&header.arrays.alphas)?;
    let betas = header.arrays.betas.map(|n| payload.take(&[n])).transpose()?;
    let direct = header
        .arrays
        .direct
        .iter()
        .map(|s| payload.take(s))
        .collect::<Result<Vec<_>>>()?;
    let base = match header.base {
        BaseHeader::Seed { seed } => {
            if header.arrays.embedded_base {
                return Err(Error::Inconsistent("seed base flagged as embedded".into()));
            }
            Base::Seed(seed)
        }
        BaseHeader::Embedded => Base::Embedded(
            header
                .layers
                .iter()
                .map(|l| payload.take(&l.shape))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    if payload.pos != payload.bytes.len() {
        return Err(Error::Inconsistent(format!(
            "{} trailing payload bytes",
            payload.bytes.len() - payload.pos
        )));
    }
    let n_direct = header.layers.iter().filter(|l| l.kind == LayerKind::Direct).count();
    if n_direct != direct.len() {
        return Err(Error::Inconsistent(format!(
            "{} direct arrays for {n_direct} direct layers",
            direct.len()
        )));
    }
    let cm = CompressedModel {
        generator: header.generator,
        scope: header.scope,
        base,
        layers: header.layers,
        adapters: header.adapters,
        alphas,
        betas,
        direct,
    };
    cm.validate().map_err(|e| Error::Inconsistent(e.to_string()))?;
    Ok(cm)
}

/// Writes `cm` to `path`, returning the number of bytes written.
pub fn save_compressed(cm: &CompressedModel, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_bytes(cm)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Generator;
    use crate::reparam::LayerInit;
    use crate::rng::Rng;

    fn model(seed_base: bool) -> CompressedModel {
        let layers = vec![
            LayerEntry::new(
                "fc.weight",
                vec![6, 4],
                LayerKind::Compressed,
                LayerInit::Uniform { fan_in: 6 },
            ),
            LayerEntry::new("fc.bias", vec![4], LayerKind::Direct, LayerInit::Uniform { fan_in: 6 }),
        ];
        let cfg = GeneratorConfig::new(42, 3, 10).with_hidden(vec![8]);
        let base = if seed_base {
            Base::Seed(7)
        } else {
            Base::Embedded(crate::reparam::seeded_base(&layers, 99))
        };
        let mut cm = CompressedModel::new(cfg, ChunkScope::PerLayer, base, layers, vec![]).unwrap();
        let mut rng = Rng::from_seed(1);
        for v in cm.alphas.data_mut() {
            *v = rng.symmetric(1.0);
        }
        cm
    }

    #[test]
    fn round_trip_is_byte_stable() {
        for seed_base in [true, false] {
            let cm = model(seed_base);
            let bytes = to_bytes(&cm).unwrap();
            let loaded = from_bytes(&bytes).unwrap();
            assert_eq!(loaded.generator, cm.generator);
            assert_eq!(loaded.layers, cm.layers);
            for (a, b) in loaded.alphas.data().iter().zip(cm.alphas.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert_eq!(to_bytes(&loaded).unwrap(), bytes);
        }
    }

    #[test]
    fn single_chunk_payload_size() {
        let layers = vec![LayerEntry::new(
            "w",
            vec![50, 100],
            LayerKind::Compressed,
            LayerInit::Uniform { fan_in: 50 },
        )];
        let cfg = GeneratorConfig::new(0, 9, 5000).with_hidden(vec![4]);
        let cm = CompressedModel::new(cfg, ChunkScope::PerLayer, Base::Seed(0), layers, vec![]).unwrap();
        let bytes = to_bytes(&cm).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        // Nine α floats and one β: (k + 1)·4 bytes.
        assert_eq!(bytes.len() - PREAMBLE - header_len - 4, 9 * 4 + 4);
    }

    #[test]
    fn header_keys_are_sorted() {
        let bytes = to_bytes(&model(true)).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        let order: Vec<usize> = [
            "\"adapters\"",
            "\"arrays\"",
            "\"base\"",
            "\"generator\"",
            "\"layers\"",
            "\"scope\"",
        ]
        .iter()
        .map(|k| text.find(k).unwrap())
        .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]), "{text}");
    }

    #[test]
    fn corruption_and_framing_errors() {
        let bytes = to_bytes(&model(true)).unwrap();
        let mut corrupt = bytes.clone();
        let last_payload = corrupt.len() - 5;
        corrupt[last_payload] ^= 0x40;
        assert!(matches!(from_bytes(&corrupt), Err(Error::CrcMismatch { .. })));

        assert!(matches!(from_bytes(&[]), Err(Error::BadMagic)));
        assert!(matches!(from_bytes(b"NOPE0000000000"), Err(Error::BadMagic)));

        let mut newer = bytes.clone();
        newer[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            from_bytes(&newer),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        assert!(matches!(from_bytes(&bytes[..12]), Err(Error::Format { .. })));
    }

    #[test]
    fn payload_inconsistency_detected() {
        let cm = model(true);
        let mut bytes = to_bytes(&cm).unwrap();
        // Drop one float from the payload and re-seal the CRC.
        bytes.truncate(bytes.len() - 8);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn loaded_model_reconstructs_to_f32_precision() {
        let cm = model(false);
        let gen = Generator::build(&cm.generator).unwrap();
        let before = cm.reconstruct(&gen).unwrap();
        let after = from_bytes(&to_bytes(&cm).unwrap()).unwrap().reconstruct(&gen).unwrap();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}
