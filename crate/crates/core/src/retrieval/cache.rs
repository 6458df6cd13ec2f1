//! Sidecar signature cache: `SIGC1`, u32 count, then per entry u32 id length,
//! id bytes, u32 dim and the f32 vector, all little-endian.

use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"SIGC1";

pub fn save_signatures(path: &Path, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, entries.len());
    for (id, v) in entries {
        put_u32(&mut out, id.len());
        out.extend(id.as_bytes());
        put_u32(&mut out, v.len());
        put_f32s(&mut out, v);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_signatures(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::malformed(path, reason))
}

fn parse(bytes: &[u8]) -> std::result::Result<Vec<(String, Vec<f32>)>, String> {
    let mut r = Reader::new(bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err("not a signature cache (bad magic)".into());
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = r.utf8(len)?.to_string();
        let dim = r.u32()? as usize;
        entries.push((id, r.f32s(dim)?));
    }
    if r.remaining() != 0 {
        return Err(format!("{} trailing bytes", r.remaining()));
    }
    Ok(entries)
}
