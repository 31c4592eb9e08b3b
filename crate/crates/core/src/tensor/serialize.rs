//! Named-array container format, used by checkpoints.
//!
//! Layout: a header with a magic tag, format version and entry count; one
//! descriptor per entry (UTF-8 name, rank, dims); then the little-endian
//! IEEE-754 f64 payloads concatenated in declaration order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"ARRC";
const VERSION: u32 = 1;

pub fn write_container<W: Write>(w: &mut W, entries: &[(&str, &Array)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, arr) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Data(format!("entry name too long: {} bytes", bytes.len())));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.rank() as u32).to_le_bytes())?;
        for &d in &arr.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, arr) in entries {
        for v in &arr.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Array)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not an array container (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported container version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut descs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("entry name is not valid UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        descs.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in descs {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Array { shape, data }));
    }
    Ok(out)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
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
