//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "ODSVCKP1"
//! hdr_len   u64
//! header    hdr_len bytes of JSON
//! n         u64      tensor count
//! n times:
//!   name_len u32, name (utf-8)
//!   rows u64, cols u64
//!   rows*cols f64 values, row-major
//! ```

use std::io::{Read, Write};

use super::params::ModelParams;
use super::tape::Mat;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ODSVCKP1";

pub fn write_container<W: Write>(mut w: W, header: &[u8], params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for t in params.tensors() {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let (r, c) = t.value.dim();
        w.write_all(&(r as u64).to_le_bytes())?;
        w.write_all(&(c as u64).to_le_bytes())?;
        for v in t.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the raw JSON header and the named tensors in file order.
pub fn read_container<R: Read>(mut r: R) -> Result<(Vec<u8>, Vec<(String, Mat)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let hdr_len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; hdr_len];
    r.read_exact(&mut header)?;
    let n = read_u64(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Validation("tensor name is not utf-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let m = Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Validation(format!("tensor {name}: {e}")))?;
        tensors.push((name, m));
    }
    Ok((header, tensors))
}

/// Copy tensors read from a container into `params`, matching by name.
pub fn load_into(params: &mut ModelParams, tensors: Vec<(String, Mat)>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Dimension(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, value) in tensors {
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Validation(format!("unknown tensor {name}")))?;
        params.set(id, value)?;
    }
    Ok(())
}
