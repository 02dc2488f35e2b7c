//! Versioned binary parameter checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "ADCK"
//! version u32      currently 1
//! n       u32      parameter count
//! n times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims as u64 each
//!   data     f64 × product(dims)
//! opt     u8       1 if optimizer state follows, else 0
//! if opt:
//!   step_count u64
//!   k          u32  moment entry count
//!   k times:
//!     name_len u32, name bytes
//!     len      u64, first moment f64 × len, second moment f64 × len
//! ```

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use super::adam::{Adam, ParameterSet};
use crate::error::Error;
use crate::Result;

const MAGIC: &[u8; 4] = b"ADCK";
const VERSION: u32 = 1;

/// In-memory image of a checkpoint file.
pub struct Checkpoint {
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<(u64, BTreeMap<String, (Vec<f64>, Vec<f64>)>)>,
}

impl Checkpoint {
    /// Copies stored data into an already-constructed parameter set with
    /// matching names and shapes, and optionally restores the optimizer.
    pub fn restore(&self, params: &ParameterSet, optimizer: Option<&mut Adam>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, shape, data), (model_name, tensor)) in
            self.params.iter().zip(params.iter())
        {
            if name != model_name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: {name} vs {model_name}"
                )));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} vs model {:?}",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(data.clone());
        }
        if let Some(opt) = optimizer {
            match &self.optimizer {
                Some((step, moments)) => opt.restore_state(*step, moments.clone()),
                None => {
                    return Err(Error::Checkpoint(
                        "checkpoint carries no optimizer state".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParameterSet,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        write_name(&mut buf, name);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.to_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optimizer {
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step_count.to_le_bytes());
            buf.extend_from_slice(&(opt.moments().len() as u32).to_le_bytes());
            for (name, (m, v)) in opt.moments() {
                write_name(&mut buf, name);
                buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
                for x in m {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        None => buf.push(0),
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.name()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        params.push((name, shape, r.f64s(len)?));
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let k = r.u32()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..k {
                let name = r.name()?;
                let len = r.u64()? as usize;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                moments.insert(name, (m, v));
            }
            Some((step, moments))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer marker {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, optimizer })
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn sample_params() -> (ParameterSet, Tensor, Tensor) {
        let mut params = ParameterSet::new();
        let a = params.register("layer.weight", Tensor::param(&[2, 3], vec![
            1.5, -0.25, 3.0e-7, 4.0, 5.5, -6.125,
        ]));
        let b = params.register("layer.bias", Tensor::param(&[3], vec![0.1, 0.2, 0.3]));
        (params, a, b)
    }

    #[test]
    fn round_trip_without_optimizer() {
        let (params, a, b) = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.optimizer.is_none());

        let (fresh, fa, fb) = sample_params();
        fa.set_data(vec![0.0; 6]);
        fb.set_data(vec![0.0; 3]);
        ck.restore(&fresh, None).unwrap();
        assert_eq!(fa.to_vec(), a.to_vec());
        assert_eq!(fb.to_vec(), b.to_vec());
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let (params, a, _) = sample_params();
        let mut opt = Adam::new();
        for _ in 0..3 {
            let loss = a.mul(&a).mean_all();
            loss.backward().unwrap();
            opt.step(&params, 1e-3).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, Some(&opt)).unwrap();
        let ck = load_checkpoint(&path).unwrap();

        let (fresh, _, _) = sample_params();
        let mut fresh_opt = Adam::new();
        ck.restore(&fresh, Some(&mut fresh_opt)).unwrap();
        assert_eq!(fresh_opt.step_count, 3);
        assert_eq!(fresh_opt.moments(), opt.moments());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (params, _, _) = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let ck = load_checkpoint(&path).unwrap();

        let mut other = ParameterSet::new();
        other.register("layer.weight", Tensor::param(&[3, 2], vec![0.0; 6]));
        other.register("layer.bias", Tensor::param(&[3], vec![0.0; 3]));
        assert!(ck.restore(&other, None).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (params, _, _) = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
