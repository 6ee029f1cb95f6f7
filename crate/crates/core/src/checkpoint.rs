//! Self-describing binary checkpoints.
//!
//! Layout (little-endian):
//! `"APNCKPT1" | u32 version | u8 precision bits | u32 len + TOML model
//! config | u32 n + UTF-8 vocab symbols | u64 step | u32 n_params | per param
//! (u32 len + name, u32 ndim, u64 dims.., raw values) | u8 has_optimizer |
//! [u64 steps, per param: u64 rows, u64 counts.., m values, v values]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::CharVocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"APNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub state: ModelState<F>,
    pub vocab: CharVocab,
    pub optimizer: Option<OptimizerState<F>>,
}

/// Bounds-checked reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn utf8_char(&mut self) -> Result<char> {
        let first = self.u8()?;
        let width = match first {
            0x00..=0x7f => 1,
            0xc0..=0xdf => 2,
            0xe0..=0xef => 3,
            0xf0..=0xf7 => 4,
            _ => return Err(Error::Format("invalid UTF-8 symbol".into())),
        };
        let mut buf = vec![first];
        buf.extend_from_slice(self.take(width - 1)?);
        std::str::from_utf8(&buf)
            .ok()
            .and_then(|s| s.chars().next())
            .ok_or_else(|| Error::Format("invalid UTF-8 symbol".into()))
    }

    fn values<F: Real>(&mut self, n: usize) -> Result<Vec<F>> {
        let w = (F::BITS / 8) as usize;
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(w).map(F::read_le).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Echo {
    model: ModelConfig,
    optimizer: AdamWConfig,
}

pub fn encode<F: Real>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(F::BITS as u8);
    let echo = Echo {
        model: ck.state.config.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| o.config.clone()).unwrap_or_default(),
    };
    let toml = toml::to_string(&echo).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    put_str(&mut out, &toml);
    put_u32(&mut out, ck.vocab.len() as u32);
    for &c in ck.vocab.symbols() {
        let mut tmp = [0u8; 4];
        out.extend_from_slice(c.encode_utf8(&mut tmp).as_bytes());
    }
    put_u64(&mut out, ck.state.step as u64);
    put_u32(&mut out, ck.state.params.len() as u32);
    for p in &ck.state.params {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            put_u64(&mut out, o.steps);
            for i in 0..ck.state.params.len() {
                put_u64(&mut out, o.counts[i].len() as u64);
                for &c in &o.counts[i] {
                    put_u64(&mut out, c);
                }
                for &v in o.m[i].iter().chain(&o.v[i]) {
                    v.write_le(&mut out);
                }
            }
        }
    }
    Ok(out)
}

/// Precision (32 or 64) recorded in a checkpoint header.
pub fn peek_precision(bytes: &[u8]) -> Result<u32> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("not an APNCKPT1 checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    Ok(cur.u8()? as u32)
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let bits = peek_precision(bytes)?;
    if bits != F::BITS {
        return Err(Error::Format(format!(
            "checkpoint holds {bits}-bit values, requested {}-bit",
            F::BITS
        )));
    }
    let mut cur = Cursor::new(bytes);
    cur.take(8 + 4 + 1)?;
    let echo: Echo = toml::from_str(&cur.string()?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let n_sym = cur.u32()? as usize;
    let mut symbols = Vec::with_capacity(n_sym.min(1 << 16));
    for _ in 0..n_sym {
        symbols.push(cur.utf8_char()?);
    }
    let vocab = CharVocab::from_symbols(symbols)?;
    let step = cur.u64()? as usize;
    // the config fixes names and shapes; a throwaway init supplies the layout
    let mut state = ModelState::<F>::init(&echo.model, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(format!("config echo: {e}")))?;
    state.step = step;
    let n = cur.u32()? as usize;
    if n != state.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n} tensors, config implies {}",
            state.params.len()
        )));
    }
    for p in &mut state.params {
        let name = cur.string()?;
        if name != p.name {
            return Err(Error::Format(format!("expected tensor {}, found {name}", p.name)));
        }
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        if shape != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                p.value.shape()
            )));
        }
        let len = p.value.len();
        p.value = Tensor::new(shape, cur.values(len)?)?;
    }
    let optimizer = match cur.u8()? {
        0 => None,
        1 => {
            let mut o = OptimizerState::<F>::new(echo.optimizer, &state);
            o.steps = cur.u64()?;
            for i in 0..state.params.len() {
                let rows = cur.u64()? as usize;
                if rows != o.counts[i].len() {
                    return Err(Error::Format(format!("optimizer rows mismatch for {}", state.params[i].name)));
                }
                for r in 0..rows {
                    o.counts[i][r] = cur.u64()?;
                }
                let len = state.params[i].value.len();
                o.m[i] = cur.values(len)?;
                o.v[i] = cur.values(len)?;
            }
            Some(o)
        }
        t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
    };
    cur.finish()?;
    if vocab.len() != state.config.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} symbols, config says {}",
            vocab.len(),
            state.config.vocab_size
        )));
    }
    Ok(Checkpoint {
        state,
        vocab,
        optimizer,
    })
}

pub fn save<F: Real>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apn::ApnConfig;
    use crate::model::FfnKind;

    fn small() -> (ModelState<f32>, CharVocab) {
        let vocab = CharVocab::from_text("abcdefg");
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 7,
            context: 6,
            ffn: FfnKind::Apn,
            apn: ApnConfig {
                patches: 5,
                active: 2,
                code_dim: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (ModelState::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), vocab)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (mut state, vocab) = small();
        state.step = 17;
        let mut opt = OptimizerState::new(AdamWConfig::default(), &state);
        opt.m[3][0] = 0.5;
        opt.counts[6][1] = 4;
        opt.steps = 9;
        let ck = Checkpoint {
            state,
            vocab,
            optimizer: Some(opt),
        };
        let bytes = encode(&ck).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (state, vocab) = small();
        let ck = Checkpoint {
            state,
            vocab,
            optimizer: None,
        };
        let bytes = encode(&ck).unwrap();
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(matches!(decode::<f32>(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(matches!(decode::<f32>(&extra), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[8] = 2;
        assert!(matches!(decode::<f32>(&ver), Err(Error::Format(_))));
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
    }
}
