//! Flat binary tensor container.
//!
//! ```text
//! tensor     := "IAPL" version:u16 ndim:u32 dim:u32{ndim} payload:f32{prod(dim)}
//! checkpoint := "IAPC" version:u16 meta_len:u32 meta:utf8-json{meta_len}
//!               count:u32 (name_len:u32 name:utf8 tensor){count}
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"IAPL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IAPC";
pub const VERSION: u16 = 1;

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&b)
        )));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn write_tensor<R: Real>(w: &mut impl Write, t: &Tensor<R>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for x in t.data() {
        buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Real>(r: &mut impl Read) -> Result<Tensor<R>> {
    expect_magic(r, TENSOR_MAGIC)?;
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| R::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn tensor_to_bytes<R: Real>(t: &Tensor<R>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn save_tensor<R: Real>(path: &std::path::Path, t: &Tensor<R>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn load_tensor<R: Real>(path: &std::path::Path) -> Result<Tensor<R>> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

/// Writes a checkpoint: JSON metadata followed by named tensors in the given order.
pub fn write_checkpoint<R: Real>(
    w: &mut impl Write,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<R>)],
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(meta)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, *t)?;
    }
    Ok(())
}

pub type CheckpointContents<R> = (serde_json::Value, Vec<(String, Tensor<R>)>);

pub fn read_checkpoint<R: Real>(r: &mut impl Read) -> Result<CheckpointContents<R>> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((name, read_tensor(r)?));
    }
    Ok((meta, tensors))
}
