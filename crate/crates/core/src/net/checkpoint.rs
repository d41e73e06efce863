//! `.drna` checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DRNA"  version
//! len  config echo (UTF-8, `key = value` lines)
//! n_classes  { len  class name }*
//! n_params   { len  name  ndim  dims*  f32 data* }*
//! ```
//!
//! Parameters appear in [`ModelState::params`] order.

use std::fs;
use std::path::Path;

use crate::error::{DrnaError, Result};
use crate::net::model::ModelState;
use crate::scalar::Scalar;
use crate::trainer::config::TrainConfig;

const MAGIC: &[u8; 4] = b"DRNA";
const VERSION: u32 = 1;

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub model: ModelState<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Scalar>(model: &ModelState<T>, config: &TrainConfig, class_names: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_str(&mut out, &config.echo());
    put_u32(&mut out, class_names.len());
    for n in class_names {
        put_str(&mut out, n);
    }
    let params = model.params();
    put_u32(&mut out, params.len());
    for (name, t) in params {
        put_str(&mut out, &name);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DrnaError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DrnaError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DrnaError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(DrnaError::Checkpoint(format!("unsupported version {version}")));
    }
    let config = TrainConfig::parse(&r.string()?)?;
    let n_classes = r.u32()?;
    let class_names = (0..n_classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut model = ModelState::<T>::new(config.arch(n_classes), config.seed)?;
    let n_params = r.u32()?;
    let mut slots = model.params_mut();
    if n_params != slots.len() {
        return Err(DrnaError::Checkpoint(format!(
            "{n_params} parameter arrays, config implies {}",
            slots.len()
        )));
    }
    for (expected, tensor) in slots.iter_mut() {
        let name = r.string()?;
        if &name != expected {
            return Err(DrnaError::Checkpoint(format!("expected parameter `{expected}`, found `{name}`")));
        }
        let ndim = r.u32()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != tensor.shape() {
            return Err(DrnaError::Checkpoint(format!(
                "parameter `{name}` has shape {dims:?}, config implies {:?}",
                tensor.shape()
            )));
        }
        let raw = r.take(4 * tensor.numel())?;
        for (dst, b) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(DrnaError::Checkpoint("trailing bytes".into()));
    }
    if !model.is_finite() {
        return Err(DrnaError::Checkpoint("non-finite parameter".into()));
    }
    Ok(Checkpoint {
        config,
        class_names,
        model,
    })
}

pub fn save<T: Scalar>(path: &Path, model: &ModelState<T>, config: &TrainConfig, class_names: &[String]) -> Result<()> {
    fs::write(path, encode(model, config, class_names)).map_err(|e| DrnaError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| DrnaError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TrainConfig, Vec<String>) {
        let cfg = TrainConfig::parse("backbone_widths = 4,4,8,8\nnavigator_width = 4\nseed = 3\n").unwrap();
        (cfg, vec!["a".into(), "b".into(), "c".into()])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, names) = small();
        let m = ModelState::<f32>::new(cfg.arch(3), 11).unwrap();
        let back = decode::<f32>(&encode(&m, &cfg, &names)).unwrap();
        assert_eq!(back.class_names, names);
        assert_eq!(back.config, cfg);
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.model.params()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, names) = small();
        let m = ModelState::<f32>::new(cfg.arch(3), 0).unwrap();
        let bytes = encode(&m, &cfg, &names);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }
}
