//! Versioned little-endian binary container shared by dataset and checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic      4 bytes  "VAMP"
//! version    u32
//! kind       u32      1 = dataset, 2 = checkpoint
//! config     u64 byte length, then UTF-8 TOML text
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes, u32 rank, rank × u64 dims, f32 payload
//! payload    kind-specific trailing blocks (see `dataset` and `checkpoint`)
//! ```

use vamp_core::Tensor;

pub const MAGIC: [u8; 4] = *b"VAMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Dataset = 1,
    Checkpoint = 2,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Dataset => "dataset",
            Kind::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("not a VAMP file (magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("expected a {expected} file, found kind {found}")]
    WrongKind { found: u32, expected: &'static str },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the last block")]
    TrailingBytes(usize),
    #[error("malformed {0}")]
    Invalid(String),
}

/// Bytes taken by the fixed header and a config block of `config_len` bytes.
pub fn header_len(config_len: usize) -> usize {
    4 + 4 + 4 + 8 + config_len
}

/// Bytes taken by one tensor directory entry.
pub fn tensor_entry_len(name: &str, shape: &[usize]) -> usize {
    4 + name.len() + 4 + 8 * shape.len() + 4 * shape.iter().product::<usize>()
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind, config: &str) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(kind as u32);
        w.u64(config.len() as u64);
        w.buf.extend_from_slice(config.as_bytes());
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    /// Writes the tensor directory; values are stored as `f32`.
    pub fn tensors<'a>(&mut self, entries: impl ExactSizeIterator<Item = (String, &'a Tensor)>) {
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.u32(name.len() as u32);
            self.buf.extend_from_slice(name.as_bytes());
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.f32(v);
            }
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates the header and returns the reader with the embedded config text.
    pub fn open(buf: &'a [u8], kind: Kind) -> Result<(Self, String), FormatError> {
        let mut r = Self { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, supported: VERSION });
        }
        let found = r.u32("kind")?;
        if found != kind as u32 {
            return Err(FormatError::WrongKind { found, expected: kind.name() });
        }
        let len = r.len("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| FormatError::Invalid("config text (not UTF-8)".into()))?
            .to_owned();
        Ok((r, text))
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    /// A `u64` length that must fit in the remaining bytes.
    pub fn len(&mut self, what: &'static str) -> Result<usize, FormatError> {
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|&n| n <= self.remaining()).ok_or(FormatError::Truncated(what))
    }

    pub fn f32(&mut self, what: &'static str) -> Result<f64, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as f64)
    }

    pub fn tensors(&mut self) -> Result<Vec<(String, Tensor)>, FormatError> {
        let count = self.u32("tensor count")? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = self.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
                .map_err(|_| FormatError::Invalid("tensor name (not UTF-8)".into()))?
                .to_owned();
            let rank = self.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(
                    usize::try_from(self.u64("tensor dims")?).map_err(|_| FormatError::Truncated("tensor dims"))?,
                );
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.remaining()))
                .ok_or(FormatError::Truncated("tensor payload"))?;
            let bytes = self.take(4 * numel, "tensor payload")?;
            let data: Vec<f64> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64).collect();
            let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(format!("tensor {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

/// Copies `tensors` into the same-named slots visited by `target`, checking shapes and coverage.
pub fn fill_named(
    target: &mut dyn vamp_core::nn::NamedTensors,
    prefix: &str,
    tensors: &mut std::collections::BTreeMap<String, Tensor>,
) -> Result<(), FormatError> {
    let mut err = None;
    target.visit_mut("", &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match tensors.remove(&key) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                err = Some(FormatError::Invalid(format!(
                    "tensor {key}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => err = Some(FormatError::Invalid(format!("missing tensor {key}"))),
        }
    });
    err.map_or(Ok(()), Err)
}
