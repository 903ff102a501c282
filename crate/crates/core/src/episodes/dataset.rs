use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, Read};
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};

pub const PFE1_MAGIC: &[u8; 4] = b"PFE1";
pub const PFE1_VERSION: u32 = 1;

/// FNV-1a 64 over `bytes`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    name: String,
    count: usize,
    data: Vec<f32>,
}

impl ClassEmbeddings {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Row-major `count × dim` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.data.len() / self.count;
        &self.data[i * d..(i + 1) * d]
    }
}

/// Per-class embedding matrices sharing one dimension. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    classes: Vec<ClassEmbeddings>,
    fingerprint: u64,
}

impl EmbeddingDataset {
    /// Builds a dataset from `(name, row-major values)` pairs, enforcing the invariants:
    /// shared dimension, non-empty classes, unique names, finite values.
    pub fn new(dim: usize, classes: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dim must be positive".into()));
        }
        if classes.is_empty() {
            return Err(Error::Data("dataset has no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(classes.len());
        for (name, data) in classes {
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!("duplicate class name {name:?}")));
            }
            if name.len() > u16::MAX as usize {
                return Err(Error::Data(format!("class name of {} bytes is too long", name.len())));
            }
            if data.is_empty() {
                return Err(Error::Data(format!("class {name:?} has no samples")));
            }
            if data.len() % dim != 0 {
                return Err(Error::Data(format!(
                    "class {name:?} holds {} values, not a multiple of dim {dim}",
                    data.len()
                )));
            }
            if let Some(i) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "class {name:?} has a non-finite value at sample {}",
                    i / dim
                )));
            }
            out.push(ClassEmbeddings {
                count: data.len() / dim,
                name,
                data,
            });
        }
        let mut ds = Self {
            dim,
            classes: out,
            fingerprint: 0,
        };
        let bytes = ds.to_bytes();
        ds.fingerprint = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassEmbeddings] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    /// The trailing content hash of the PFE1 encoding.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Serializes to PFE1: little-endian header, classes, trailing FNV-1a 64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self
            .classes
            .iter()
            .map(|c| 2 + c.name.len() + 4 + 4 * c.data.len())
            .sum();
        let mut out = Vec::with_capacity(16 + body + 8);
        out.extend_from_slice(PFE1_MAGIC);
        out.extend_from_slice(&PFE1_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.extend_from_slice(&(c.count as u32).to_le_bytes());
            for x in &c.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != PFE1_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"PFE1\"")));
        }
        let version = r.u32()?;
        if version != PFE1_VERSION {
            return Err(Error::format(4, format!("unsupported PFE1 version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::format(8, "dim is zero"));
        }
        let class_count = r.u32()? as usize;
        let mut classes = Vec::with_capacity(class_count.min(1 << 16));
        for _ in 0..class_count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format(name_at, format!("class name is not UTF-8: {e}")))?
                .to_owned();
            let count = r.u32()? as usize;
            let n = count
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(r.pos as u64, "sample block size overflows"))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            classes.push((name, data));
        }
        let hash_at = r.pos;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after hash", bytes.len() - r.pos),
            ));
        }
        let computed = fnv1a(&bytes[..hash_at]);
        if stored != computed {
            return Err(Error::format(
                hash_at as u64,
                format!("hash mismatch: stored {stored:#018x}, computed {computed:#018x}"),
            ));
        }
        Self::new(dim, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_pfe1(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingDataset::from_bytes(&bytes)
}

pub fn save_pfe1(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.save(path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Header-level summary of a PFE1 file, gathered without keeping sample rows in memory.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Pfe1Summary {
    pub dim: usize,
    pub classes: Vec<(String, usize)>,
    pub non_finite_values: usize,
    pub stored_hash: u64,
    pub computed_hash: u64,
}

impl Pfe1Summary {
    pub fn hash_valid(&self) -> bool {
        self.stored_hash == self.computed_hash
    }

    pub fn total_samples(&self) -> usize {
        self.classes.iter().map(|c| c.1).sum()
    }

    /// Plain-text report. The layout is stable so other tools can diff against it.
    pub fn render(&self) -> String {
        let mut s = format!("dim: {}\nclasses: {}\n", self.dim, self.classes.len());
        for (name, count) in &self.classes {
            s.push_str(&format!("class {name}: {count}\n"));
        }
        s.push_str(&format!("samples: {}\n", self.total_samples()));
        s.push_str(&format!("non-finite values: {}\n", self.non_finite_values));
        s.push_str(&format!(
            "hash: {} ({:016x})\n",
            if self.hash_valid() { "valid" } else { "INVALID" },
            self.stored_hash
        ));
        s
    }
}

struct HashingReader<R> {
    inner: R,
    hasher: FnvHasher,
    pos: u64,
}

impl<R: Read> HashingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.pos, format!("truncated: need {} bytes", buf.len()))
            } else {
                Error::format(self.pos, e.to_string())
            }
        })?;
        self.hasher.write(buf);
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Streams a PFE1 file, validating structure and hash while holding at most one
/// buffer of sample bytes at a time.
pub fn inspect_pfe1(path: impl AsRef<Path>) -> Result<Pfe1Summary> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = HashingReader {
        inner: BufReader::new(file),
        hasher: FnvHasher::default(),
        pos: 0,
    };
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if &magic != PFE1_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"PFE1\"")));
    }
    let version = r.u32()?;
    if version != PFE1_VERSION {
        return Err(Error::format(4, format!("unsupported PFE1 version {version}")));
    }
    let dim = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let mut classes = Vec::new();
    let mut non_finite = 0;
    let mut buf = vec![0u8; 4 * dim.clamp(1, 1 << 16)];
    for _ in 0..class_count {
        let name_len = r.u16()? as usize;
        let mut name = vec![0; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let count = r.u32()? as usize;
        let mut remaining = count as u64 * dim as u64 * 4;
        while remaining > 0 {
            let n = remaining.min(buf.len() as u64) as usize;
            r.read_exact(&mut buf[..n])?;
            non_finite += buf[..n]
                .chunks_exact(4)
                .filter(|b| !f32::from_le_bytes((*b).try_into().unwrap()).is_finite())
                .count();
            remaining -= n as u64;
        }
        classes.push((name, count));
    }
    let computed = r.hasher.finish();
    let mut tail = [0; 8];
    r.inner.read_exact(&mut tail).map_err(|_| {
        Error::format(r.pos, "truncated: missing trailing hash")
    })?;
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(r.pos + 8, "trailing bytes after hash"));
    }
    Ok(Pfe1Summary {
        dim,
        classes,
        non_finite_values: non_finite,
        stored_hash: u64::from_le_bytes(tail),
        computed_hash: computed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EmbeddingDataset {
        EmbeddingDataset::new(
            2,
            vec![
                ("a".into(), vec![1.0, 2.0, 3.0, 4.0]),
                ("b".into(), vec![-1.0, 0.5]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = EmbeddingDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.counts(), vec![2, 1]);
    }

    #[test]
    fn layout_is_exact() {
        let bytes = small().to_bytes();
        // 16 header + (2+1+4+16) + (2+1+4+8) + 8 hash
        assert_eq!(bytes.len(), 16 + 23 + 15 + 8);
        assert_eq!(&bytes[..4], b"PFE1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], &1u16.to_le_bytes());
        assert_eq!(bytes[18], b'a');
        assert_eq!(&bytes[19..23], &2u32.to_le_bytes());
        assert_eq!(&bytes[23..27], &1.0f32.to_le_bytes());
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn rejects_bad_magic_version_truncation_and_hash() {
        let bytes = small().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        let err = EmbeddingDataset::from_bytes(&bytes[..30]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 23, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[25] ^= 1;
        assert!(matches!(EmbeddingDataset::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad.push(0);
        assert!(EmbeddingDataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn invariant_violations_are_data_errors() {
        let empty = EmbeddingDataset::new(2, vec![("a".into(), vec![])]);
        assert!(matches!(empty, Err(Error::Data(_))));
        let dup = EmbeddingDataset::new(1, vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]);
        assert!(matches!(dup, Err(Error::Data(_))));
        let nan = EmbeddingDataset::new(1, vec![("cat".into(), vec![1.0, f32::NAN])]);
        let msg = nan.unwrap_err().to_string();
        assert!(msg.contains("cat"), "{msg}");
    }
}
