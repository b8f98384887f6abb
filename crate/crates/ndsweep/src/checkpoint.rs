//! Versioned little-endian binary checkpoints with a named field
//! manifest. Round trips are bit-exact, including the RNG position, so a
//! resumed run equals an uninterrupted one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvParams, FcParams};
use crate::network::{LayerParams, LayerSpec, NdAttachment, NetworkSpec, ParamGrad};
use crate::tensor::{ConvGeom, Tensor};

const MAGIC: &[u8; 8] = b"NDSWCKPT";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or evaluate: architecture echo,
/// parameters, solver state, and per-layer nested-dropout state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub nd: Option<NdAttachment>,
    pub iter: u64,
    pub params: Vec<LayerParams>,
    pub velocity: Vec<ParamGrad>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct SpecEcho {
    format_version: u32,
    spec: NetworkSpec,
    nd: Option<NdAttachment>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn field(&mut self, name: &str, payload: &[u8]) {
        self.buf
            .extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf
            .extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_params(params: &[LayerParams]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        match p {
            LayerParams::Conv(c) => {
                out.push(1);
                write_tensor(&mut out, &c.weights);
                write_tensor(&mut out, &c.bias);
            }
            LayerParams::Fc(f) => {
                out.push(2);
                write_tensor(&mut out, &f.weights);
                write_tensor(&mut out, &f.bias);
            }
            LayerParams::None => out.push(0),
        }
    }
    out
}

fn write_velocity(vel: &[ParamGrad]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(vel.len() as u32).to_le_bytes());
    for v in vel {
        match v {
            ParamGrad::Pair { weights, bias } => {
                out.push(1);
                write_tensor(&mut out, weights);
                write_tensor(&mut out, bias);
            }
            ParamGrad::None => out.push(0),
        }
    }
    out
}

/// Serialize a checkpoint to bytes. Deterministic: equal checkpoints
/// produce identical bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let echo = SpecEcho {
        format_version: FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        nd: ckpt.nd.clone(),
    };
    let spec_json = serde_json::to_vec(&echo)
        .map_err(|e| Error::Config(format!("cannot encode network spec: {e}")))?;

    let mut w = Writer::new();
    w.field("spec", &spec_json);
    w.field("iter", &ckpt.iter.to_le_bytes());
    let mut rng = Vec::with_capacity(48);
    rng.extend_from_slice(&ckpt.rng_seed);
    rng.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    w.field("rng", &rng);
    w.field("params", &write_params(&ckpt.params));
    w.field("velocity", &write_velocity(&ckpt.velocity));

    let mut out = Vec::with_capacity(w.buf.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&5u32.to_le_bytes()); // field count
    out.extend_from_slice(&w.buf);
    Ok(out)
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    let tmp: PathBuf = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn field(&mut self, expected: &str) -> Result<&'a [u8]> {
        let name_len = self.u16()? as usize;
        let name = self.take(name_len)?;
        if name != expected.as_bytes() {
            return Err(self.corrupt(format!(
                "expected field '{expected}', found '{}'",
                String::from_utf8_lossy(name)
            )));
        }
        let len = self.u64()? as usize;
        self.take(len)
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor<f32>> {
    let ndim = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let len: usize = shape.iter().product();
    let raw = r.take(len * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

fn read_params(bytes: &[u8], path: &Path, spec: &NetworkSpec) -> Result<Vec<LayerParams>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    let count = r.u32()? as usize;
    if count != spec.layers.len() {
        return Err(r.corrupt(format!(
            "{count} parameter entries for {} spec layers",
            spec.layers.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (idx, layer) in spec.layers.iter().enumerate() {
        let kind = r.take(1)?[0];
        let p = match kind {
            0 => LayerParams::None,
            1 => {
                let LayerSpec::Conv {
                    kernel, stride, pad, ..
                } = layer
                else {
                    return Err(r.corrupt(format!("conv parameters at non-conv layer {idx}")));
                };
                let geom = ConvGeom::new((*kernel, *kernel), (*stride, *stride), (*pad, *pad));
                LayerParams::Conv(ConvParams {
                    weights: read_tensor(&mut r)?,
                    bias: read_tensor(&mut r)?,
                    geom,
                })
            }
            2 => LayerParams::Fc(FcParams {
                weights: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            }),
            other => return Err(r.corrupt(format!("unknown parameter kind {other}"))),
        };
        out.push(p);
    }
    Ok(out)
}

fn read_velocity(bytes: &[u8], path: &Path) -> Result<Vec<ParamGrad>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.take(1)?[0];
        out.push(match kind {
            0 => ParamGrad::None,
            1 => ParamGrad::Pair {
                weights: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            },
            other => return Err(r.corrupt(format!("unknown velocity kind {other}"))),
        });
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.corrupt(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let field_count = r.u32()?;
    if field_count != 5 {
        return Err(r.corrupt(format!("field count {field_count}, expected 5")));
    }

    let spec_bytes = r.field("spec")?;
    let echo: SpecEcho = serde_json::from_slice(spec_bytes).map_err(|e| {
        Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("spec field does not parse: {e}"),
        }
    })?;

    let iter_bytes = r.field("iter")?;
    if iter_bytes.len() != 8 {
        return Err(r.corrupt("iter field must be 8 bytes"));
    }
    let iter = u64::from_le_bytes(iter_bytes.try_into().unwrap());

    let rng_bytes = r.field("rng")?;
    if rng_bytes.len() != 48 {
        return Err(r.corrupt("rng field must be 48 bytes"));
    }
    let rng_seed: [u8; 32] = rng_bytes[..32].try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(rng_bytes[32..].try_into().unwrap());

    let params = read_params(r.field("params")?, path, &echo.spec)?;
    let velocity = read_velocity(r.field("velocity")?, path)?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    Ok(Checkpoint {
        spec: echo.spec,
        nd: echo.nd,
        iter,
        params,
        velocity,
        rng_seed,
        rng_word_pos,
    })
}
