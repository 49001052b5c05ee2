//! Binary container shared by dataset files and model checkpoints.
//!
//! ```text
//! magic (4 bytes) | u32 version | u64 manifest length | manifest (UTF-8)
//! then per block: u64 byte length | little-endian f64 payload | u64 checksum
//! ```
//!
//! All integers are little-endian. The checksum is 64-bit FNV-1a over the
//! payload bytes. The number of blocks is fixed by the manifest, and readers
//! reject trailing bytes as well as short files.

use std::hash::Hasher;
use std::io::{Read, Write};

use fnv::FnvHasher;

use crate::error::{NnError, Result};

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn write_header(w: &mut impl Write, magic: &[u8; 4], version: u32, manifest: &str) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn write_block(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    w.write_all(&checksum(&bytes).to_le_bytes())?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NnError::Format(format!("file truncated while reading {what}"))
        } else {
            NnError::Io(e)
        }
    })
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads magic, version and manifest; leaves the reader at the first block.
pub fn read_header(r: &mut impl Read, magic: &[u8; 4], version: u32) -> Result<String> {
    let mut m = [0u8; 4];
    read_exact_or(r, &mut m, "magic")?;
    if &m != magic {
        return Err(NnError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 4];
    read_exact_or(r, &mut v, "version")?;
    let found = u32::from_le_bytes(v);
    if found != version {
        return Err(NnError::Format(format!("version {found}, expected {version}")));
    }
    let len = read_u64(r, "manifest length")? as usize;
    if len > (1 << 30) {
        return Err(NnError::Format(format!("implausible manifest length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact_or(r, &mut buf, "manifest")?;
    String::from_utf8(buf).map_err(|e| NnError::Format(format!("manifest is not UTF-8: {e}")))
}

/// Reads one block, verifying its length against `expected_len` values.
pub fn read_block(r: &mut impl Read, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = read_u64(r, "block length")? as usize;
    if bytes != expected_len * 8 {
        return Err(NnError::Format(format!(
            "block holds {bytes} bytes, manifest implies {}",
            expected_len * 8
        )));
    }
    let mut buf = vec![0u8; bytes];
    read_exact_or(r, &mut buf, "block payload")?;
    let stored = read_u64(r, "block checksum")?;
    if stored != checksum(&buf) {
        return Err(NnError::Format("block checksum mismatch".into()));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Fails unless the reader is exhausted.
pub fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(NnError::Format("trailing bytes after last block".into())),
    }
}
