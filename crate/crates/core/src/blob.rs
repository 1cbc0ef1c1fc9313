//! CFW1 weight blobs.
//!
//! A blob is a concatenation of entries. Each entry is a 16-byte header
//! `{magic "CFW1", dtype: u32, rank: u32, reserved: i32}`, then `rank`
//! extents as u64, then the flat little-endian data. For quantized arrays
//! (i8, i32) the reserved word carries the power-of-two exponent; it is 0
//! for float arrays.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Data, QuantParams, Tensor};

pub const MAGIC: &[u8; 4] = b"CFW1";
const CODE_I32: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl BlobData {
    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::I8(v) => v.len(),
            BlobData::I32(v) => v.len(),
        }
    }

    fn code(&self) -> u32 {
        match self {
            BlobData::F32(_) => 1,
            BlobData::F64(_) => 2,
            BlobData::I8(_) => 3,
            BlobData::I32(_) => CODE_I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobArray {
    pub shape: Vec<usize>,
    pub data: BlobData,
    pub exponent: i32,
}

impl BlobArray {
    pub fn from_tensor(t: &Tensor) -> BlobArray {
        let data = match t.data() {
            Data::F32(v) => BlobData::F32(v.clone()),
            Data::F64(v) => BlobData::F64(v.clone()),
            Data::I8(v) => BlobData::I8(v.clone()),
        };
        BlobArray { shape: t.shape().to_vec(), data, exponent: t.quant().map_or(0, |q| q.exponent) }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        let data = match self.data {
            BlobData::F32(v) => Data::F32(v),
            BlobData::F64(v) => Data::F64(v),
            BlobData::I8(v) => {
                return Tensor::from_i8(&self.shape, v, QuantParams::new(self.exponent))
            }
            BlobData::I32(_) => return Err(Error::ModelIo("i32 array is not a tensor".into())),
        };
        Tensor::from_data(&self.shape, data, None)
    }
}

pub fn write_entry<W: Write>(w: &mut W, a: &BlobArray) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&a.data.code().to_le_bytes())?;
    w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
    w.write_all(&a.exponent.to_le_bytes())?;
    for &d in &a.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match &a.data {
        BlobData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        BlobData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        BlobData::I8(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        BlobData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

pub fn encode(arrays: &[BlobArray]) -> Vec<u8> {
    let mut buf = Vec::new();
    for a in arrays {
        write_entry(&mut buf, a).expect("writing to a Vec cannot fail");
    }
    buf
}

fn truncated() -> Error {
    Error::ModelIo("truncated CFW1 blob".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_entry(c: &mut Cursor<'_>) -> Result<BlobArray> {
    if c.take(4)? != MAGIC {
        return Err(Error::ModelIo("bad CFW1 magic".into()));
    }
    let code = c.u32()?;
    let rank = c.u32()? as usize;
    let exponent = c.u32()? as i32;
    if rank == 0 || rank > 8 {
        return Err(Error::ModelIo(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(c.u64()?).map_err(|_| Error::ModelIo("extent overflow".into()))?);
    }
    let n = checked_numel(&shape).map_err(|e| Error::ModelIo(e.to_string()))?;
    let width = match code {
        1 | CODE_I32 => 4,
        2 => 8,
        3 => 1,
        _ => return Err(Error::ModelIo(format!("unknown dtype code {code}"))),
    };
    let raw = c.take(n.checked_mul(width).ok_or_else(truncated)?)?;
    let data = match code {
        1 => BlobData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
        2 => BlobData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
        3 => BlobData::I8(raw.iter().map(|&b| b as i8).collect()),
        _ => BlobData::I32(raw.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect()),
    };
    debug_assert_eq!(data.len(), n);
    Ok(BlobArray { shape, data, exponent })
}

/// Decodes every entry; trailing partial entries are an error.
pub fn decode(bytes: &[u8]) -> Result<Vec<BlobArray>> {
    let mut c = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        out.push(read_entry(&mut c)?);
    }
    Ok(out)
}

pub fn write_file(path: &std::path::Path, arrays: &[BlobArray]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for a in arrays {
        write_entry(&mut f, a)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<BlobArray>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
