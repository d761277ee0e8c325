//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ECGQACKP" | version u32 | seed u64
//! tag count u32 | (key str, value str)*
//! record count u32 | (path str, frozen u8, ndim u32, dims u64*, values f64*)*
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes. Values are
//! stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, ParameterSet, Result, Tensor};

const MAGIC: &[u8; 8] = b"ECGQACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub tags: BTreeMap<String, String>,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(seed: u64, params: ParameterSet) -> Self {
        Self { seed, tags: BTreeMap::new(), params }
    }

    pub fn with_tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.tags.len() as u32).to_le_bytes())?;
        for (k, v) in &self.tags {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (path, p) in self.params.iter() {
            write_str(w, path)?;
            w.write_all(&[u8::from(p.frozen)])?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let seed = read_u64(r)?;
        let mut tags = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            tags.insert(k, read_str(r)?);
        }
        let mut params = ParameterSet::new();
        for _ in 0..read_u32(r)? {
            let path = read_str(r)?;
            let mut frozen = [0u8];
            r.read_exact(&mut frozen)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            params.insert(path, Tensor::new(&shape, data)?, frozen[0] != 0)?;
        }
        Ok(Self { seed, tags, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}
