//! Precomputed embedding file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  b"MMEB"
//! u32    version (1)
//! u32    d
//! repeated until EOF:
//!   u32  id length, then id bytes (UTF-8)
//!   u32  n, u32 m
//!   f32  token_reps  n × d
//!   f32  text cls    d
//!   f32  patch_reps  m × d
//!   f32  image cls   d
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::numeric::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMEB";
pub const VERSION: u32 = 1;

/// One sample's encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    /// `n × d`; `n` may be zero.
    pub token_reps: Tensor,
    pub text_cls: Vec<f64>,
    /// `m × d` with `m ≥ 1`.
    pub patch_reps: Tensor,
    pub image_cls: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Format(format!("record {:?}: {what}", self.id)));
        if self.token_reps.rank() != 2 || self.token_reps.shape()[1] != d {
            return bad(&format!(
                "token_reps shape {:?}, width must be {d}",
                self.token_reps.shape()
            ));
        }
        if self.patch_reps.rank() != 2 || self.patch_reps.shape()[1] != d {
            return bad(&format!(
                "patch_reps shape {:?}, width must be {d}",
                self.patch_reps.shape()
            ));
        }
        if self.patch_reps.shape()[0] == 0 {
            return bad("at least one patch is required");
        }
        if self.text_cls.len() != d || self.image_cls.len() != d {
            return bad(&format!("cls vectors must have length {d}"));
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn write_embeddings(writer: impl Write, d: usize, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let io = |e| Error::io("<embedding stream>", e);
    w.write_all(MAGIC).map_err(io)?;
    put_u32(&mut w, VERSION).map_err(io)?;
    put_u32(&mut w, count(d, "width")?).map_err(io)?;
    for r in records {
        r.validate(d)?;
        put_u32(&mut w, count(r.id.len(), "id length")?).map_err(io)?;
        w.write_all(r.id.as_bytes()).map_err(io)?;
        put_u32(&mut w, count(r.token_reps.shape()[0], "token count")?).map_err(io)?;
        put_u32(&mut w, count(r.patch_reps.shape()[0], "patch count")?).map_err(io)?;
        put_f32s(&mut w, r.token_reps.data()).map_err(io)?;
        put_f32s(&mut w, &r.text_cls).map_err(io)?;
        put_f32s(&mut w, r.patch_reps.data()).map_err(io)?;
        put_f32s(&mut w, &r.image_cls).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_embeddings(
    path: impl AsRef<Path>,
    d: usize,
    records: &[EmbeddingRecord],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(file, d, records)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Format(format!(
                    "truncated embedding file while reading {what} at byte {}",
                    self.offset
                ))
            } else {
                Error::io("<embedding stream>", e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 4];
        self.exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }

    /// Next byte, or `None` at a clean end of stream.
    fn more(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(None),
                Ok(_) => {
                    self.offset += 1;
                    return Ok(Some(b[0]));
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::io("<embedding stream>", e)),
            }
        }
    }
}

/// Returns the width `d` and all records, in file order.
pub fn read_embeddings(reader: impl Read) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let mut c = Cursor {
        inner: BufReader::new(reader),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    c.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding file version {version}"
        )));
    }
    let d = c.u32("width")? as usize;
    if d == 0 {
        return Err(Error::Format("embedding width is zero".into()));
    }

    let mut records = Vec::new();
    while let Some(first) = c.more()? {
        let mut rest = [0u8; 3];
        c.exact(&mut rest, "id length")?;
        let id_len = u32::from_le_bytes([first, rest[0], rest[1], rest[2]]) as usize;
        let mut id = vec![0u8; id_len];
        c.exact(&mut id, "id")?;
        let id =
            String::from_utf8(id).map_err(|_| Error::Format("sample id is not UTF-8".into()))?;
        let n = c.u32("token count")? as usize;
        let m = c.u32("patch count")? as usize;
        let token_reps = Tensor::new(vec![n, d], c.f32s(n * d, "token_reps")?)?;
        let text_cls = c.f32s(d, "text cls")?;
        let patch_reps = Tensor::new(vec![m, d], c.f32s(m * d, "patch_reps")?)?;
        let image_cls = c.f32s(d, "image cls")?;
        let record = EmbeddingRecord {
            id,
            token_reps,
            text_cls,
            patch_reps,
            image_cls,
        };
        record.validate(d)?;
        records.push(record);
    }
    Ok((d, records))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(usize, Vec<EmbeddingRecord>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(file)
}

/// Indexes records by id, rejecting duplicates.
pub fn index_records(records: Vec<EmbeddingRecord>) -> Result<HashMap<String, EmbeddingRecord>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.contains_key(&r.id) {
            return Err(Error::Validation(format!(
                "duplicate embedding id {:?}",
                r.id
            )));
        }
        map.insert(r.id.clone(), r);
    }
    Ok(map)
}
