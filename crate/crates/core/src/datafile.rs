//! Binary container shared by dataset and checkpoint files.
//!
//! Layout: a 16-byte magic, a little-endian `u64` byte length, that many bytes
//! of UTF-8 JSON metadata, then raw little-endian `f64` arrays back to back.
//! Array extents are recorded in the metadata.

use std::io::{Read, Write};

use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 16] = *b"AVIDONET1\0\0\0\0\0\0\0";
pub const CHECKPOINT_MAGIC: [u8; 16] = *b"AVIDONETCKPT1\0\0\0";

pub fn write_container<W: Write>(mut w: W, magic: &[u8; 16], meta: &[u8], arrays: &[&[f64]]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta)?;
    for arr in arrays {
        let mut buf = Vec::with_capacity(arr.len() * 8);
        for v in *arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the raw metadata bytes and every trailing `f64`.
pub fn read_container<R: Read>(mut r: R, magic: &[u8; 16]) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| Error::Format("file too short for header".into()))?;
    if &head != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Format("missing metadata length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta).map_err(|_| Error::Format("truncated metadata".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64", rest.len())));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, values))
}

/// Split `values` into consecutive arrays of the given lengths, requiring an exact fit.
pub fn split_arrays(mut values: Vec<f64>, lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
    let total: usize = lengths.iter().sum();
    if values.len() != total {
        return Err(Error::Format(format!("payload has {} values, metadata implies {total}", values.len())));
    }
    let mut out = Vec::with_capacity(lengths.len());
    for &n in lengths.iter().rev() {
        out.push(values.split_off(values.len() - n));
    }
    out.reverse();
    Ok(out)
}
