//! EFCK checkpoint files.
//!
//! Layout: magic bytes `EFCK`, version u16, entry count u32, then per entry
//! a u16 name length + UTF-8 name, rank u8, dims as little-endian u32, and
//! the payload as little-endian f64. All multi-byte integers little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"EFCK";
pub const VERSION: u16 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic([u8; 4]),
    BadVersion(u16),
    Corrupt(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic(m) => write!(f, "not an EFCK file (magic {m:?})"),
            CheckpointError::BadVersion(v) => write!(f, "unsupported EFCK version {v}"),
            CheckpointError::Corrupt(d) => write!(f, "corrupt EFCK file: {d}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A named tensor entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// An ordered collection of named entries. Entry order is the write order,
/// kept stable so identical inputs produce byte-identical files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    names: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            dims.iter().product::<usize>(),
            values.len(),
            "entry {name}: dims {dims:?} vs {} values",
            values.len()
        );
        if !self.entries.contains_key(name) {
            self.names.push(name.to_string());
        }
        self.entries.insert(name.to_string(), Entry { dims, values });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// True when any entry name starts with the given prefix.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names.iter().any(|n| n.starts_with(prefix))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.names.len())
            .map_err(|_| CheckpointError::Corrupt("too many entries".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for name in &self.names {
            let entry = &self.entries[name];
            let name_len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Corrupt(format!("name too long: {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(entry.dims.len())
                .map_err(|_| CheckpointError::Corrupt(format!("rank too high: {name}")))?;
            w.write_all(&[rank])?;
            for &d in &entry.dims {
                let d = u32::try_from(d)
                    .map_err(|_| CheckpointError::Corrupt(format!("dim too large: {name}")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in &entry.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            r.read_exact(&mut b2)?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let rank = b1[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b4)?;
                dims.push(u32::from_le_bytes(b4) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut b8 = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b8)?;
                values.push(f64::from_le_bytes(b8));
            }
            if ck.contains(&name) {
                return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
            }
            ck.insert(&name, dims, values);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::read_from(bytes.as_slice())
    }
}
