//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "MMSTEER1"
//! version  u32 LE    currently 1
//! records  until EOF:
//!   name_len u32 LE, name (UTF-8)
//!   dtype    u8      1 = f64
//!   rank     u32 LE
//!   dims     rank × u64 LE
//!   payload  prod(dims) × f64 LE
//! ```
//!
//! Values are stored as f64 regardless of the in-memory scalar type, so a
//! round trip through f64 is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::numeric::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MMSTEER1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::format("checkpoint", format!("record `{name}`: dims {dims:?} vs {} values", data.len())));
        }
        Ok(Self { name, dims, data })
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self { name: name.into(), dims: vec![1], data: vec![v] }
    }
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("checkpoint", format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: Record) {
        self.records.push(rec);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|r| r.data.first().copied())
    }

    /// Adds every tensor of `store` under `prefix + name`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.records.push(Record {
                name: format!("{prefix}{name}"),
                dims: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    /// Every loaded tensor starts frozen.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for r in self.records.iter().filter(|r| r.name.starts_with(prefix)) {
            let t = Tensor::new(r.dims.clone(), r.data.iter().map(|v| T::from_f64_lossy(*v)).collect())?;
            store.insert(&r.name[prefix.len()..], t);
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for r in &self.records {
            let name = r.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
            for d in &r.dims {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(r.data.len() * 8);
            for v in &r.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        loop {
            let mut len = [0u8; 4];
            let got = r.read(&mut len)?;
            if got == 0 {
                break;
            }
            if got < 4 {
                read_exact(r, &mut len[got..], "record header")?;
            }
            let name_len = u32::from_le_bytes(len) as usize;
            if name_len > MAX_NAME {
                return Err(Error::format("checkpoint", format!("name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype, "dtype")?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::format("checkpoint", format!("`{name}`: unknown dtype {}", dtype[0])));
            }
            let rank = read_u32(r, "rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::format("checkpoint", format!("`{name}`: rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "dims")?;
                let d = usize::try_from(u64::from_le_bytes(b))
                    .map_err(|_| Error::format("checkpoint", "dimension overflow"))?;
                n = n.checked_mul(d).ok_or_else(|| Error::format("checkpoint", "dimension overflow"))?;
                dims.push(d);
            }
            let bytes = n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "payload overflow"))?;
            let mut payload = Vec::new();
            r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
            if payload.len() != bytes {
                return Err(Error::format("checkpoint", format!("truncated payload of `{name}`")));
            }
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, dims, data });
        }
        Ok(Self { records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(Record::new("a", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.push(Record::scalar("meta.step", 7.0));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.records.len(), 2);
        for (a, b) in c.records.iter().zip(&back.records) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"MMSTEER1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 1);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bytes = sample().to_bytes();
        bytes[17] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
