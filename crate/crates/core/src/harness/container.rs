//! Named-tensor container used for checkpoints and dataset files.
//!
//! Layout (all little-endian): magic `NCKP`, version `u32`, entry count
//! `u32`, then per entry: name length `u32`, UTF-8 name, rank `u32`, dims as
//! `u64` each, payload as `f64` each.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let want: usize = dims.iter().product();
        if want != data.len() {
            return Err(Error::Format(format!(
                "entry `{name}`: dims {dims:?} need {want} values, got {}",
                data.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        self.entries.push(Entry {
            name,
            dims: dims.iter().map(|&d| d as u64).collect(),
            data,
        });
        Ok(())
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.push(name, &[1], vec![v])
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Payload of `name`, checked to have exactly `len` values.
    pub fn values(&self, name: &str, len: usize) -> Result<&[f64]> {
        let e = self.get(name)?;
        if e.data.len() != len {
            return Err(Error::Format(format!(
                "entry `{name}` has {} values, expected {len}",
                e.data.len()
            )));
        }
        Ok(&e.data)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.values(name, 1)?[0])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.data.len() * 8);
            for x in &e.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                dims.push(u64::from_le_bytes(b));
            }
            let total = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{name}` dims overflow")))?;
            let mut buf = vec![
                0u8;
                (total as usize)
                    .checked_mul(8)
                    .ok_or_else(|| Error::Format("entry too large".into()))?
            ];
            read_exact(&mut r, &mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            c.entries.push(Entry { name, dims, data });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
