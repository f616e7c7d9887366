//! Binary checkpoint format.
//!
//! ```text
//! magic "HATCKPT\0" | u32 version | u32 len, config JSON | u32 tensor count
//! per tensor: u32 len, name | u32 ndim | u64 dims... | f32 data (LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::config::HatConfig;
use super::params::HatParameters;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"HATCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &HatParameters<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_parameters() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg =
        serde_json::to_vec(&params.config).map_err(|e| Error::json("checkpoint config", e))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for entry in params.store.iter() {
        buf.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        let shape = entry.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in entry.tensor.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<HatParameters<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = c.u32()? as usize;
    let config: HatConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::json("checkpoint config", e))?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        store.push(name, tensor);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    HatParameters::from_store(&config, store)
}

pub fn save_checkpoint<T: Scalar>(params: &HatParameters<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<HatParameters<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMode;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let cfg = HatConfig::tiny(ModelMode::Hat, 20);
        let p = HatParameters::<f32>::init(&cfg, 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q: HatParameters<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(q.config, cfg);
        for (a, b) in p.store.iter().zip(q.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn rejects_corruption() {
        let cfg = HatConfig::tiny(ModelMode::Plain, 20);
        let p = HatParameters::<f64>::init(&cfg, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f64, _>(bad.as_slice()).is_err());
        let mut longer = buf;
        longer.push(0);
        assert!(read_checkpoint::<f64, _>(longer.as_slice()).is_err());
    }
}
