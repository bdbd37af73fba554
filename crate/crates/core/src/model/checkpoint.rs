use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::forward::BiMamba;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8] = b"BIMB1\n";

/// Serialize a model: magic, length-prefixed config text, then each named
/// parameter as name, rank, extents and little-endian `f32` values.
pub fn encode<T: Element>(model: &BiMamba<T>) -> Vec<u8> {
    let mut out = Vec::from(MAGIC);
    let text = model.config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    let mut entries = Vec::new();
    model.params.visit(|name, t| entries.push((name, t)));
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.offset;
        if left < n {
            return Err(Error::Parse {
                offset: self.offset,
                message: format!("truncated {what}: need {n} bytes, {left} available"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.offset;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Parse {
            offset: at,
            message: format!("{what} is not UTF-8: {e}"),
        })
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<BiMamba<T>> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let len = r.u32("config length")?;
    let at = r.offset;
    let config = ModelConfig::from_text(r.utf8(len, "config")?).map_err(|e| Error::Parse {
        offset: at,
        message: e.to_string(),
    })?;
    let mut params = ModelParams::<T>::init(&config, 0)?;
    let count = r.u32("parameter count")?;
    let expected = params.names().len();
    if count != expected {
        return Err(Error::Parse {
            offset: r.offset - 4,
            message: format!("{count} parameters stored, config needs {expected}"),
        });
    }
    let mut failure = None;
    params.visit_mut(|name, slot| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = read_param(&mut r, &name, slot) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.offset != bytes.len() {
        return Err(Error::Parse {
            offset: r.offset,
            message: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    BiMamba::from_parts(config, params)
}

fn read_param<T: Element>(r: &mut Reader<'_>, expected: &str, slot: &mut Tensor<T>) -> Result<()> {
    let at = r.offset;
    let n = r.u32("name length")?;
    let name = r.utf8(n, "name")?;
    if name != expected {
        return Err(Error::Parse {
            offset: at,
            message: format!("expected parameter {expected}, found {name}"),
        });
    }
    let rank = r.u32("rank")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")?);
    }
    if shape != slot.shape() {
        return Err(Error::Parse {
            offset: at,
            message: format!("{name}: stored shape {shape:?}, expected {:?}", slot.shape()),
        });
    }
    let raw = r.take(4 * slot.numel(), name)?;
    for (dst, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
        *dst = T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    }
    Ok(())
}

pub fn save<T: Element>(model: &BiMamba<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<BiMamba<T>> {
    decode(&fs::read(path)?)
}

/// Load and require the stored configuration to equal `expected`.
pub fn load_matching<T: Element>(path: &Path, expected: &ModelConfig) -> Result<BiMamba<T>> {
    let model = load(path)?;
    if &model.config != expected {
        let diffs: Vec<String> = model
            .config
            .entries()
            .into_iter()
            .zip(expected.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: stored {} vs requested {}", a.0, a.1, b.1))
            .collect();
        return Err(Error::Config(format!("checkpoint config mismatch ({})", diffs.join("; "))));
    }
    Ok(model)
}
