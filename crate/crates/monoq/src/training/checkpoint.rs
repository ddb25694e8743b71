//! Single-file checkpoint container with a version header.
//!
//! Layout (little-endian): magic "MQCK", version u8, config JSON
//! (u64 length + bytes), named u64 scalars, then named arrays
//! (f32/f64/u32) with explicit shapes. Sections are written in a fixed
//! order so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"MQCK";
pub const CKPT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

/// Everything a checkpoint holds besides the arrays themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Serialized training setup (JSON).
    pub meta_json: String,
    /// Named counters: global step, optimizer steps, rng position.
    pub scalars: Vec<(String, u64)>,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing scalar {name}")))
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing array {name}")))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Config(format!("checkpoint name too long: {}", bytes.len())));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    let json = c.meta_json.as_bytes();
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json)?;
    w.write_all(&(c.scalars.len() as u32).to_le_bytes())?;
    for (name, value) in &c.scalars {
        write_str(&mut w, name)?;
        w.write_all(&value.to_le_bytes())?;
    }
    w.write_all(&(c.entries.len() as u32).to_le_bytes())?;
    for e in &c.entries {
        write_str(&mut w, &e.name)?;
        w.write_all(&[e.data.dtype_tag()])?;
        w.write_all(&[e.dims.len() as u8])?;
        let count: usize = e.dims.iter().product();
        if count != e.data.len() {
            return Err(Error::Shape(format!(
                "{}: dims {:?} do not match {} elements",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
        for &d in &e.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &e.data {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::U32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CheckpointCorrupt(format!("short read of {n} bytes")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.bytes(len)?)
            .map_err(|_| Error::CheckpointCorrupt("non-utf8 name".into()))
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inner: std::io::BufReader::new(file) };
    let magic = r.bytes(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::CheckpointCorrupt(format!("bad magic {magic:?}")));
    }
    let version = r.u8()?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion { expected: CKPT_VERSION, got: version });
    }
    let json_len = r.u64()? as usize;
    let meta_json = String::from_utf8(r.bytes(json_len)?)
        .map_err(|_| Error::CheckpointCorrupt("non-utf8 config".into()))?;
    let n_scalars = r.u32()? as usize;
    let mut scalars = Vec::with_capacity(n_scalars);
    for _ in 0..n_scalars {
        let name = r.string()?;
        let value = r.u64()?;
        scalars.push((name, value));
    }
    let n_entries = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name = r.string()?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let data = match dtype {
            0 => {
                let raw = r.bytes(count * 4)?;
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                let raw = r.bytes(count * 8)?;
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let raw = r.bytes(count * 4)?;
                ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            other => {
                return Err(Error::CheckpointCorrupt(format!("unknown dtype tag {other}")))
            }
        };
        entries.push(Entry { name, dims, data });
    }
    Ok(Container { meta_json, scalars, entries })
}
