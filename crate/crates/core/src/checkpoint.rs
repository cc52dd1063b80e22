//! Checkpoint file: `"VCK1"`, then for each parameter in path order a u32
//! path length, the UTF-8 path, u32 rank, `rank` u32 dims and the binary32
//! values, all little-endian, repeated to end of file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::binary::{push_f32s, Reader};
use crate::error::{Error, FormatError, Result};
use crate::params::{Param, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCK1";

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::from(&CHECKPOINT_MAGIC[..]);
    for (path, p) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, &p.values);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let mut params = BTreeMap::new();
    let mut flat = 0usize;
    while !r.is_done() {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::InvalidUtf8)?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let values = r.f32s(n, flat)?;
        flat += n;
        if params.insert(path.clone(), Param { shape, values }).is_some() {
            return Err(FormatError::Invalid(format!("parameter {path} appears twice")));
        }
    }
    Ok(ParamStore::from_params(params))
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e))
}
