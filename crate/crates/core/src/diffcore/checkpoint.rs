//! Parameter checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!   magic  b"AEHSCKPT"
//!   version u32 (currently 1)
//!   n_tensors u64
//!   per tensor: name_len u32, name utf8, ndim u32, dims u64…, values f64… (row-major)
//!   opt_flag u8 (1 if optimizer state follows)
//!   optimizer: lr f64, eps f64, alpha f64, then per tensor: len u64, sq_avg f64…

use super::optim::OptimizerState;
use super::params::{ParamTensor, ParameterSet};
use super::tensor::TensorValue;
use crate::error::{CoreError, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"AEHSCKPT";
const VERSION: u32 = 1;

pub fn save(
    path: &Path,
    params: &ParameterSet,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.tensors.len() as u64).to_le_bytes())?;
    for t in &params.tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.value.shape.len() as u32).to_le_bytes())?;
        for &d in &t.value.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match opt {
        Some(o) => {
            w.write_all(&[1u8])?;
            for v in [o.lr, o.eps, o.alpha] {
                w.write_all(&v.to_le_bytes())?;
            }
            for avg in &o.sq_avg {
                w.write_all(&(avg.len() as u64).to_le_bytes())?;
                for &v in avg {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        None => w.write_all(&[0u8])?,
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterSet, Option<OptimizerState>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CoreError::Checkpoint(format!("bad tensor name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(&mut r)?);
        }
        tensors.push(ParamTensor {
            name,
            value: TensorValue { shape, data },
        });
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let params = ParameterSet { tensors };
    let opt = if flag[0] == 1 {
        let lr = read_f64(&mut r)?;
        let eps = read_f64(&mut r)?;
        let alpha = read_f64(&mut r)?;
        let mut sq_avg = Vec::with_capacity(params.tensors.len());
        for _ in 0..params.tensors.len() {
            let len = read_u64(&mut r)? as usize;
            let mut avg = Vec::with_capacity(len);
            for _ in 0..len {
                avg.push(read_f64(&mut r)?);
            }
            sq_avg.push(avg);
        }
        Some(OptimizerState {
            sq_avg,
            alpha,
            eps,
            lr,
        })
    } else {
        None
    };
    Ok((params, opt))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
