//! Reading and writing checkpoints in the safetensors container format.
//!
//! Layout:
//!
//! ```text
//! [8 bytes LE u64: header length N]
//! [N bytes: UTF-8 JSON header, space padded to a multiple of 8]
//! [data section]
//! ```
//!
//! The header maps tensor name to `{dtype, shape, data_offsets: [begin, end)}`
//! with offsets relative to the start of the data section, plus an optional
//! `__metadata__` string map.
//!
//! [`LazyCheckpoint`] parses only the header on open; payload bytes are read
//! per tensor on [`LazyCheckpoint::load_tensor`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::io_util::write_atomic;
use crate::tensor::{numel_of, DType, Tensor, TensorMap};

/// Largest header accepted by the reader.
pub const MAX_HEADER_BYTES: u64 = 100_000_000;

const METADATA_KEY: &str = "__metadata__";
pub const FORMAT_VERSION: &str = "fusionkit/1";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("unknown tensor key `{0}`")]
    UnknownKey(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::MalformedHeader(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckpointFormat {
    #[default]
    Safetensors,
}

/// Location of a checkpoint on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub format: CheckpointFormat,
}

impl CheckpointRef {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        CheckpointRef {
            path: path.into(),
            format: CheckpointFormat::Safetensors,
        }
    }
}

/// Header entry for one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte range relative to the data section.
    pub range: Range<u64>,
}

/// A checkpoint whose header has been parsed but whose tensors are loaded on
/// demand. Safe to share across threads; reads are serialized on the reader.
#[derive(Debug)]
pub struct LazyCheckpoint<R = File> {
    source: Option<CheckpointRef>,
    index: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
    data_start: u64,
    reader: Mutex<R>,
}

pub fn open_lazy(cp: &CheckpointRef) -> Result<LazyCheckpoint, CheckpointError> {
    let file = File::open(&cp.path)?;
    let mut lazy = LazyCheckpoint::from_reader(file)?;
    lazy.source = Some(cp.clone());
    Ok(lazy)
}

impl LazyCheckpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        open_lazy(&CheckpointRef::new(path.as_ref()))
    }
}

impl<R: Read + Seek> LazyCheckpoint<R> {
    /// Parses the header from `reader`. Only the length prefix and the header
    /// bytes are read.
    pub fn from_reader(mut reader: R) -> Result<Self, CheckpointError> {
        let total_len = reader.seek(SeekFrom::End(0))?;
        reader.seek(SeekFrom::Start(0))?;
        if total_len < 8 {
            return Err(malformed(format!("file of {total_len} bytes has no length prefix")));
        }
        let mut prefix = [0u8; 8];
        reader.read_exact(&mut prefix)?;
        let header_len = u64::from_le_bytes(prefix);
        if header_len > MAX_HEADER_BYTES {
            return Err(malformed(format!(
                "header length {header_len} exceeds limit {MAX_HEADER_BYTES}"
            )));
        }
        if header_len > total_len - 8 {
            return Err(malformed(format!(
                "header length {header_len} exceeds file size {total_len}"
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        reader.read_exact(&mut header)?;
        let data_start = 8 + header_len;
        let (index, metadata) = parse_header(&header, total_len - data_start)?;
        Ok(LazyCheckpoint {
            source: None,
            index,
            metadata,
            data_start,
            reader: Mutex::new(reader),
        })
    }

    pub fn source(&self) -> Option<&CheckpointRef> {
        self.source.as_ref()
    }

    pub fn index(&self) -> &BTreeMap<String, TensorInfo> {
        &self.index
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn info(&self, key: &str) -> Option<&TensorInfo> {
        self.index.get(key)
    }

    /// Size of the length prefix plus the JSON header.
    pub fn header_size(&self) -> u64 {
        self.data_start
    }

    pub fn load_tensor(&self, key: &str) -> Result<Tensor, CheckpointError> {
        let info = self
            .index
            .get(key)
            .ok_or_else(|| CheckpointError::UnknownKey(key.to_string()))?;
        let mut buf = vec![0u8; (info.range.end - info.range.start) as usize];
        {
            let mut r = self.reader.lock().unwrap_or_else(|e| e.into_inner());
            r.seek(SeekFrom::Start(self.data_start + info.range.start))?;
            r.read_exact(&mut buf)?;
        }
        Tensor::from_raw(info.dtype, info.shape.clone(), buf)
            .map_err(|e| malformed(format!("tensor `{key}`: {e}")))
    }

    /// Loads every tensor, in key order.
    pub fn load_all(&self) -> Result<TensorMap, CheckpointError> {
        self.index
            .keys()
            .map(|k| Ok((k.clone(), self.load_tensor(k)?)))
            .collect()
    }

    pub fn into_reader(self) -> R {
        self.reader.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

type ParsedHeader = (BTreeMap<String, TensorInfo>, BTreeMap<String, String>);

fn parse_header(bytes: &[u8], data_len: u64) -> Result<ParsedHeader, CheckpointError> {
    let text = std::str::from_utf8(bytes).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| malformed(format!("header JSON: {e}")))?;
    let Value::Object(entries) = value else {
        return Err(malformed("header is not a JSON object"));
    };

    let mut index = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (name, entry) in entries {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(malformed("__metadata__ is not an object"));
            };
            for (k, v) in meta {
                match v {
                    Value::String(s) => {
                        metadata.insert(k, s);
                    }
                    _ => return Err(malformed(format!("__metadata__ value for `{k}` is not a string"))),
                }
            }
            continue;
        }
        let info = parse_entry(&name, entry)?;
        if info.range.end > data_len {
            return Err(malformed(format!(
                "tensor `{name}` ends at {} beyond data section of {data_len} bytes",
                info.range.end
            )));
        }
        index.insert(name, info);
    }

    let mut ranges: Vec<(&Range<u64>, &str)> = index
        .iter()
        .filter(|(_, i)| !i.range.is_empty())
        .map(|(k, i)| (&i.range, k.as_str()))
        .collect();
    ranges.sort_by_key(|(r, _)| r.start);
    for w in ranges.windows(2) {
        if w[1].0.start < w[0].0.end {
            return Err(malformed(format!(
                "tensors `{}` and `{}` have overlapping byte ranges",
                w[0].1, w[1].1
            )));
        }
    }
    Ok((index, metadata))
}

fn parse_entry(name: &str, entry: Value) -> Result<TensorInfo, CheckpointError> {
    let Value::Object(mut obj) = entry else {
        return Err(malformed(format!("entry `{name}` is not an object")));
    };
    let dtype = match obj.remove("dtype") {
        Some(Value::String(s)) => DType::parse(&s).ok_or(CheckpointError::UnsupportedDtype(s))?,
        _ => return Err(malformed(format!("entry `{name}` lacks a string dtype"))),
    };
    let shape = match obj.remove("shape") {
        Some(Value::Array(dims)) => dims
            .iter()
            .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| malformed(format!("entry `{name}` has a non-integer shape")))?,
        _ => return Err(malformed(format!("entry `{name}` lacks a shape array"))),
    };
    let range = match obj.remove("data_offsets") {
        Some(Value::Array(off)) if off.len() == 2 => match (off[0].as_u64(), off[1].as_u64()) {
            (Some(b), Some(e)) if b <= e => b..e,
            _ => return Err(malformed(format!("entry `{name}` has invalid data_offsets"))),
        },
        _ => return Err(malformed(format!("entry `{name}` lacks data_offsets"))),
    };
    if let Some(extra) = obj.keys().next() {
        return Err(malformed(format!("entry `{name}` has unexpected field `{extra}`")));
    }
    let expected = numel_of(&shape)
        .and_then(|n| n.checked_mul(dtype.byte_width()))
        .ok_or_else(|| malformed(format!("entry `{name}` shape overflows")))?;
    if range.end - range.start != expected as u64 {
        return Err(malformed(format!(
            "entry `{name}` spans {} bytes but {dtype} {shape:?} needs {expected}",
            range.end - range.start
        )));
    }
    Ok(TensorInfo { dtype, shape, range })
}

/// Serializes `m` into a complete safetensors byte image. Tensors are laid
/// out contiguously in key order.
pub fn serialize_map(m: &TensorMap) -> Vec<u8> {
    let mut header = Map::new();
    let mut meta = Map::new();
    meta.insert("format".into(), Value::String("pt".into()));
    meta.insert("format_version".into(), Value::String(FORMAT_VERSION.into()));
    header.insert(METADATA_KEY.into(), Value::Object(meta));

    let mut offset = 0u64;
    for (k, t) in m.iter() {
        let end = offset + t.bytes().len() as u64;
        let mut entry = Map::new();
        entry.insert("dtype".into(), Value::String(t.dtype().as_str().into()));
        entry.insert("shape".into(), Value::from(t.shape().to_vec()));
        entry.insert("data_offsets".into(), Value::from(vec![offset, end]));
        header.insert(k.clone(), Value::Object(entry));
        offset = end;
    }
    // serde_json's default map is ordered, so the header text is deterministic
    let mut text = Value::Object(header).to_string().into_bytes();
    while !text.len().is_multiple_of(8) {
        text.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + text.len() + offset as usize);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in m.iter() {
        out.extend_from_slice(t.bytes());
    }
    out
}

pub fn write_map<W: Write>(m: &TensorMap, mut w: W) -> io::Result<()> {
    w.write_all(&serialize_map(m))
}

/// Writes `m` to `path` via a temporary file and rename.
pub fn save_map(m: &TensorMap, path: impl AsRef<Path>) -> Result<CheckpointRef, CheckpointError> {
    let path = path.as_ref();
    write_atomic(path, &serialize_map(m))?;
    Ok(CheckpointRef::new(path))
}

/// Opens and fully loads a checkpoint.
pub fn load_map(path: impl AsRef<Path>) -> Result<TensorMap, CheckpointError> {
    LazyCheckpoint::open(path)?.load_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn lazy(bytes: Vec<u8>) -> Result<LazyCheckpoint<Cursor<Vec<u8>>>, CheckpointError> {
        LazyCheckpoint::from_reader(Cursor::new(bytes))
    }

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("b", Tensor::from_f32(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        m.insert("a", Tensor::from_f32(vec![2], &[4.0, 5.0]).unwrap());
        m
    }

    #[test]
    fn index_lists_exactly_saved_keys() {
        let cp = lazy(serialize_map(&sample())).unwrap();
        let keys: Vec<&str> = cp.keys().collect();
        assert_eq!(keys, vec!["a", "b"]);
        assert_eq!(cp.info("a").unwrap().shape, vec![2]);
        assert_eq!(cp.info("b").unwrap().shape, vec![3]);
        assert_eq!(cp.metadata()["format_version"], FORMAT_VERSION);
    }

    #[test]
    fn single_float_payload_bytes() {
        let mut m = TensorMap::new();
        m.insert("w", Tensor::from_f32(vec![1], &[2.5]).unwrap());
        let bytes = serialize_map(&m);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x20, 0x40]);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len + 4);
        assert_eq!(header_len % 8, 0);
    }

    #[test]
    fn empty_tensor_and_empty_map() {
        let mut m = TensorMap::new();
        m.insert("e", Tensor::from_f32(vec![0], &[]).unwrap());
        let cp = lazy(serialize_map(&m)).unwrap();
        assert_eq!(cp.info("e").unwrap().range, 0..0);
        assert_eq!(cp.load_all().unwrap(), m);

        let cp = lazy(serialize_map(&TensorMap::new())).unwrap();
        assert!(cp.load_all().unwrap().is_empty());
    }

    #[test]
    fn f16_payload_decodes_to_one() {
        let header = br#"{"h":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0x00, 0x3C]);
        let cp = lazy(bytes).unwrap();
        assert_eq!(cp.load_tensor("h").unwrap().to_f64_vec(), vec![1.0]);
    }

    #[test]
    fn repeated_loads_are_identical() {
        let cp = lazy(serialize_map(&sample())).unwrap();
        assert_eq!(cp.load_tensor("b").unwrap(), cp.load_tensor("b").unwrap());
        assert!(matches!(cp.load_tensor("zz"), Err(CheckpointError::UnknownKey(_))));
    }

    #[test]
    fn truncated_data_is_rejected_on_open() {
        let mut bytes = serialize_map(&sample());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(lazy(bytes), Err(CheckpointError::MalformedHeader(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(lazy(vec![1, 2, 3]), Err(CheckpointError::MalformedHeader(_))));
        let mut huge = (MAX_HEADER_BYTES + 1).to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(lazy(huge), Err(CheckpointError::MalformedHeader(_))));

        let build = |h: &str, data: usize| {
            let mut b = (h.len() as u64).to_le_bytes().to_vec();
            b.extend_from_slice(h.as_bytes());
            b.extend(std::iter::repeat_n(0u8, data));
            b
        };
        let overlap = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(lazy(build(overlap, 8)), Err(CheckpointError::MalformedHeader(_))));
        let bad_len = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        assert!(matches!(lazy(build(bad_len, 8)), Err(CheckpointError::MalformedHeader(_))));
        let dtype = r#"{"a":{"dtype":"Q4","shape":[1],"data_offsets":[0,1]}}"#;
        assert!(matches!(lazy(build(dtype, 1)), Err(CheckpointError::UnsupportedDtype(d)) if d == "Q4"));
        let extra = r#"{"a":{"dtype":"U8","shape":[1],"data_offsets":[0,1],"x":1}}"#;
        assert!(matches!(lazy(build(extra, 1)), Err(CheckpointError::MalformedHeader(_))));
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(serialize_map(&sample()), serialize_map(&sample()));
    }
}
