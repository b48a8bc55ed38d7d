//! Flat binary parameter container.
//!
//! Layout (all integers little-endian u32):
//!   magic "HAPW" | version | records...
//! Each record: name_len | name bytes | rank | dims[rank] | f32 LE payload.
//! Records run to end of file; they are written in sorted name order so a
//! save/load/save round-trip is byte-identical.

use super::ParamValues;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HAPW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamValues) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, (shape, data)) in &params.entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamValues> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ctx = |reason: &str| Error::Parse {
        path: path.display().to_string(),
        context: "checkpoint".to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ctx("missing HAPW magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ctx(&format!("unsupported version {version}")));
    }
    let mut params = ParamValues::new();
    let mut pos = 8usize;
    let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(ctx("truncated record"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    while pos < bytes.len() {
        let name_len = read_u32(&bytes, &mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(ctx("truncated name"));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| ctx("non-utf8 parameter name"))?
            .to_string();
        pos += name_len;
        let rank = read_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        if pos + 4 * n > bytes.len() {
            return Err(ctx(&format!("truncated payload for {name}")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap());
            data.push(v as f64);
        }
        pos += 4 * n;
        params.insert(&name, shape, data);
    }
    Ok(params)
}
