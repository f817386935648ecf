//! Binary tensor container used for checkpoints and extractor weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "TSTC"
//! version  u32      1
//! meta_len u32, then meta_len bytes of UTF-8 JSON
//! count    u32
//! count times:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8     0 = f32, 1 = f64
//!   dims     4 x u32 (N, C, H, W)
//!   data     N*C*H*W little-endian values, row-major
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use twostream_autograd::{DType, Real, Shape, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    /// Raw little-endian payload.
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => self.bytes.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Ok(Tensor::from_vec(self.shape, values)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.entries.push(Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape(),
            bytes,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?
            .to_tensor()
    }

    /// All entries converted to `T`, in file order.
    pub fn tensors<T: Real>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.to_tensor()?)))
            .collect()
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Entry)> + 'a {
        self.entries
            .iter()
            .filter_map(move |e| e.name.strip_prefix(prefix).map(|n| (n, e)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.entries.len(), "tensor count")?.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let n = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype.tag());
            for d in e.shape.0 {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let n = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("{name}: dtype tag {tag}")))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("dimension")? as usize;
            }
            if dims.contains(&0) {
                return Err(Error::Format(format!("{name}: empty dimension in {dims:?}")));
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format(format!("{name}: dims {dims:?} overflow")))?;
            let data = r.take(numel, &name)?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape: Shape(dims),
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, entries })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
