//! Parameter checkpoints.
//!
//! ```text
//! magic    b"MMCKPT01"
//! u64 LE   header length in bytes
//! header   JSON: {"tensors": [{name, shape, group}], "frozen": [...], "metadata": ...}
//! payload  f64 LE values of every tensor, in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::numeric::{ParamGroup, ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MMCKPT01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorHeader>,
    frozen: Vec<ParamGroup>,
    metadata: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

fn stream_err(e: std::io::Error) -> Error {
    Error::io("<checkpoint stream>", e)
}

fn truncated(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated checkpoint ({what})"))
        } else {
            stream_err(e)
        }
    }
}

/// Gradients are not stored.
pub fn write_checkpoint(writer: impl Write, store: &ParamStore, metadata: &Value) -> Result<()> {
    let header = Header {
        tensors: store
            .iter()
            .map(|(name, e)| TensorHeader {
                name: name.to_owned(),
                shape: e.value.shape().to_vec(),
                group: e.group,
            })
            .collect(),
        frozen: store.frozen_groups().collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = BufWriter::new(writer);
    w.write_all(MAGIC).map_err(stream_err)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(stream_err)?;
    w.write_all(&json).map_err(stream_err)?;
    for (_, e) in store.iter() {
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(stream_err)?;
        }
    }
    w.flush().map_err(stream_err)
}

pub fn read_checkpoint(reader: impl Read) -> Result<(ParamStore, Value)> {
    let mut r = BufReader::new(reader);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(truncated("header length"))?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Format("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(truncated("header"))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let mut store = ParamStore::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated("payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(t.name, Tensor::new(t.shape, data)?, t.group)?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(stream_err)? != 0 {
        return Err(Error::Format(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    for g in header.frozen {
        store.freeze(g);
    }
    Ok((store, header.metadata))
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, metadata: &Value) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(file, store, metadata)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore, Value)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "b",
            Tensor::row(&[0.1, -2.5e-300, f64::MAX]),
            ParamGroup::Head,
        )
        .unwrap();
        s.insert("a", Tensor::zeros(&[2, 0]), ParamGroup::TextEncoder)
            .unwrap();
        s.insert(
            "c",
            Tensor::scalar(std::f64::consts::PI),
            ParamGroup::VisualEncoder,
        )
        .unwrap();
        s.freeze(ParamGroup::TextEncoder);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let meta = json!({"model": {"d": 16}});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, &meta).unwrap();
        let (back, m) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        for (name, e) in s.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.value, e.value);
            assert_eq!(b.group, e.group);
        }
        assert!(back.is_frozen(ParamGroup::TextEncoder));
        assert!(!back.is_frozen(ParamGroup::Head));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store(), &Value::Null).unwrap();
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(read_checkpoint(cut), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(
            read_checkpoint(long.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'x';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
