//! DCF1 checkpoints: model configuration, parameters and (optionally) the
//! optimizer state, all little-endian.
//!
//! ```text
//! "DCF1"
//! u32 field count, then that many u32 config values (ModelConfig::fields order)
//! u32 parameter count
//! per parameter, in registration order:
//!     u16 name length, name bytes (UTF-8)
//!     u8 rank, rank × u32 extents
//!     f32 values
//! u8 optimizer flag (0 or 1); when 1:
//!     u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps
//!     first moments of every parameter, then second moments (f32, same shapes)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use dc2fusion_core::optim::{Adam, AdamConfig, OptimState};
use dc2fusion_core::{FusionNet, ModelConfig, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<FusionNet> {
        let net = FusionNet::new(self.config.clone())?;
        net.check_params(&self.params)?;
        Ok(net)
    }
}

fn put_tensor_values(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let fields = ckpt.config.fields();
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (_, v) in &fields {
        out.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    let p = &ckpt.params;
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.names().iter().zip(p.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        put_tensor_values(&mut out, t);
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.state.step.to_le_bytes());
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in opt.state.m.iter().chain(&opt.state.v) {
                put_tensor_values(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: PathBuf::from(self.path),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.corrupt("non-finite stored value"));
        }
        Ok(Tensor::new(shape, data)?)
    }
}

/// Parses a checkpoint image and validates it against the network its
/// configuration describes.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "DCF1",
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4, path };
    let nfields = r.u32()? as usize;
    let expected_fields = ModelConfig::default().fields().len();
    if nfields != expected_fields {
        return Err(r.corrupt(format!("{nfields} config fields, expected {expected_fields}")));
    }
    let values = (0..nfields)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig::from_values(&values).map_err(|e| r.corrupt(e.to_string()))?;
    let net = FusionNet::new(config.clone()).map_err(|e| r.corrupt(e.to_string()))?;
    let layout = net.layout();

    let count = r.u32()? as usize;
    if count != layout.names().len() {
        return Err(r.corrupt(format!(
            "{count} parameters, configuration has {}",
            layout.names().len()
        )));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in layout.names().iter().zip(layout.shapes()) {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.corrupt("parameter name is not UTF-8"))?;
        if name != want_name {
            return Err(r.corrupt(format!("parameter `{name}` where `{want_name}` was expected")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(r.corrupt(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        tensors.push(r.values(&shape)?);
        names.push(name.to_string());
    }
    let params = ParamStore::from_parts(names, tensors);

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
            let m = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
            let v = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
            Some(Adam {
                config,
                state: OptimState { step, m, v },
            })
        }
        f => return Err(r.corrupt(format!("optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.into(),
            extra: (bytes.len() - r.pos) as u64,
        });
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}

/// Writes through a temporary sibling and a rename, so an interrupted write
/// never replaces a good checkpoint with a partial one.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, encode(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
