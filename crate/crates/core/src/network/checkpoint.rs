//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SVHDRCKP"
//! version   u32
//! step      u64
//! config    u32 length + UTF-8 `key = value` lines
//! count     u32
//! per tensor:
//!   name    u32 length + UTF-8
//!   dtype   u8 (0 = f32)
//!   ndim    u32, then ndim x u64 dims
//!   value, adam m, adam v: 3 x prod(dims) f32
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::network::params::Param;
use crate::network::{Architecture, NetworkConfig, ParamStore};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"SVHDRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn io(e: std::io::Error) -> Error {
    Error::Contract(format!("checkpoint i/o: {e}"))
}

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.step.to_le_bytes());
    let config: String =
        params.config.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    write_str(&mut out, &config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        write_str(&mut out, &p.name);
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in [&p.value, &p.m, &p.v] {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "checkpoint truncated at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Contract(format!("invalid UTF-8 at byte {at}")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a checkpoint and checks it against the architecture its config
/// describes.
pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf, pos: 0 };
    ensure!(c.take(8)? == MAGIC, "not a checkpoint (bad magic)");
    let version = c.u32()?;
    ensure!(version == CHECKPOINT_VERSION, "unsupported checkpoint version {version}");
    let step = c.u64()?;
    let mut map = BTreeMap::new();
    for line in c.string()?.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let config = NetworkConfig::from_map(&map)?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let at = c.pos;
        ensure!(c.u8()? == DTYPE_F32, "tensor {name}: unsupported dtype at byte {at}");
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = Tensor::new(&shape, c.f32s(n)?)?;
        let m = Tensor::new(&shape, c.f32s(n)?)?;
        let v = Tensor::new(&shape, c.f32s(n)?)?;
        params.push(Param { name, grad: Tensor::zeros(&shape), value, m, v });
    }
    ensure!(c.pos == buf.len(), "{} trailing bytes after checkpoint", buf.len() - c.pos);
    let arch = Architecture::new(&config)?;
    ensure!(arch.specs.len() == params.len(), "checkpoint has {} tensors, config needs {}", params.len(), arch.specs.len());
    for (s, p) in arch.specs.iter().zip(&params) {
        ensure!(s.name == p.name && s.shape == p.value.shape(), "checkpoint tensor {} does not match {}", p.name, s.name);
    }
    ParamStore::from_params(config, params, step)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(params)).map_err(io)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut buf).map_err(io)?;
    from_bytes(&buf)
}
