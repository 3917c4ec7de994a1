//! Binary model files.
//!
//! ```text
//! "DPBN1"  u16 version  u8 model type (0 = D-PBN, 1 = AEC)
//! D-PBN:  u32 layers, per layer: u32 in, u32 out, u8 base kind, u32 K, u8 shared
//! AEC:    u32 layers, u32 dims[layers + 1], u8 decoder (0 = tied, 1 = untied)
//! u64 parameter count, f64 parameters (little endian, canonical order)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers are little endian.

use std::path::{Path, PathBuf};

use dpbn_core::{AecNetwork, DecoderMode, DpbnNetwork, Layer, MaxEntKind, Matrix, TcaLayer};

const MAGIC: &[u8; 5] = b"DPBN1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dpbn(DpbnNetwork),
    Aec(AecNetwork),
}

impl Model {
    pub fn params(&self) -> Vec<f64> {
        match self {
            Model::Dpbn(n) => n.params(),
            Model::Aec(n) => n.params(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Dpbn(n) => n.input_dim(),
            Model::Aec(n) => n.input_dim(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    BadVersion(u16),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    match model {
        Model::Dpbn(net) => {
            b.push(0);
            b.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
            for l in net.layers() {
                b.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
                b.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
                b.push(l.kind().tag());
                b.extend_from_slice(&(l.tca.components() as u32).to_le_bytes());
                b.push(l.tca.shared() as u8);
            }
        }
        Model::Aec(net) => {
            b.push(1);
            let dims = net.dims();
            b.extend_from_slice(&((dims.len() - 1) as u32).to_le_bytes());
            for d in dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.push(match net.mode() {
                DecoderMode::Tied => 0,
                DecoderMode::Untied => 1,
            });
        }
    }
    let p = model.params();
    b.extend_from_slice(&(p.len() as u64).to_le_bytes());
    for v in p {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| ModelError::Malformed("truncated".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
}

fn malformed<E: std::fmt::Display>(e: E) -> ModelError {
    ModelError::Malformed(e.to_string())
}

pub fn decode(buf: &[u8]) -> Result<Model, ModelError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if buf.len() < MAGIC.len() + 2 + 4 {
        return Err(ModelError::Malformed("truncated".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, at: MAGIC.len() };
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let kind = r.u8()?;
    let layers = r.u32()?;
    if layers == 0 || layers > 1024 {
        return Err(ModelError::Malformed(format!("{layers} layers")));
    }
    let mut model = match kind {
        0 => {
            let mut ls = Vec::with_capacity(layers);
            for _ in 0..layers {
                let (n, m) = (r.u32()?, r.u32()?);
                let base = MaxEntKind::from_tag(r.u8()?).ok_or_else(|| malformed("unknown MaxEnt kind"))?;
                let k = r.u32()?;
                let shared = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(malformed("bad shared flag")),
                };
                if k == 0 || n.saturating_mul(m) > 1 << 28 {
                    return Err(malformed("bad layer shape"));
                }
                ls.push(Layer::new(Matrix::zeros(n, m), TcaLayer::neutral(base, k, n, shared)).map_err(malformed)?);
            }
            Model::Dpbn(DpbnNetwork::from_layers(ls).map_err(malformed)?)
        }
        1 => {
            let dims = (0..=layers).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let mode = match r.u8()? {
                0 => DecoderMode::Tied,
                1 => DecoderMode::Untied,
                _ => return Err(malformed("bad decoder mode")),
            };
            if dims.windows(2).any(|w| w[0].saturating_mul(w[1]) > 1 << 28) {
                return Err(malformed("bad layer shape"));
            }
            Model::Aec(AecNetwork::zeros(&dims, mode).map_err(malformed)?)
        }
        t => return Err(ModelError::Malformed(format!("unknown model type {t}"))),
    };
    let count = r.u64()?;
    let expected = model.params().len();
    if count != expected {
        return Err(ModelError::Malformed(format!("{count} parameters, architecture needs {expected}")));
    }
    let p: Vec<f64> = r
        .take(8 * count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.at != body.len() {
        return Err(malformed("trailing bytes"));
    }
    match &mut model {
        Model::Dpbn(n) => n.set_params(&p).map_err(malformed)?,
        Model::Aec(n) => n.set_params(&p).map_err(malformed)?,
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<(), ModelError> {
    std::fs::write(path, encode(model)).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let buf = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use dpbn_core::NetworkSpec;
    use rand::Rng;

    fn dpbn() -> Model {
        let mut rng = stream(1, 0);
        let mut spec = NetworkSpec::new(&[12, 8, 5, 3], &[2, 3, 1]);
        spec.bases[2] = MaxEntKind::TruncExpon;
        let mut net = DpbnNetwork::random(&spec, &mut rng).unwrap();
        let mut p = net.params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        net.set_params(&p).unwrap();
        Model::Dpbn(net)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = stream(2, 0);
        let models = [
            dpbn(),
            Model::Aec(AecNetwork::random(&[6, 4, 2], DecoderMode::Tied, &mut rng).unwrap()),
            Model::Aec(AecNetwork::random(&[6, 4, 2], DecoderMode::Untied, &mut rng).unwrap()),
        ];
        for m in models {
            let bytes = encode(&m);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, m);
            let bits = |m: &Model| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&m));
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn shared_tca_survives() {
        let mut rng = stream(3, 0);
        let mut spec = NetworkSpec::new(&[6, 4, 2], &[2, 2]);
        spec.shared_tca = true;
        let m = Model::Dpbn(DpbnNetwork::random(&spec, &mut rng).unwrap());
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&dpbn());
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(matches!(decode(&flipped), Err(ModelError::Checksum { .. })));
        let mut crc = bytes.clone();
        let n = crc.len();
        crc[n - 1] ^= 0xff;
        assert!(matches!(decode(&crc), Err(ModelError::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(ModelError::BadMagic)));
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(b"").is_err());
    }
}
