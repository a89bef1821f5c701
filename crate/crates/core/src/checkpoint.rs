//! Named-tensor checkpoints and their on-disk format.
//!
//! Files follow the safetensors layout:
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][data region]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}` and
//! may carry a `"__metadata__"` string map. Offsets are relative to the start
//! of the data region. `F32` and `F16` are accepted on read; everything is
//! held and written as `F32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(Error::Dtype(other.to_string())),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "tensor {name:?}: shape {shape:?} holds {numel} elements, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` for 2-D tensors.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same name and shape, new values.
    pub(crate) fn with_values(&self, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values,
        }
    }
}

/// Ordered map of tensors plus opaque string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint, rejecting duplicate names.
    pub fn from_records(records: impl IntoIterator<Item = TensorRecord>) -> Result<Self> {
        let mut ckpt = Self::new();
        for r in records {
            ckpt.insert(r)?;
        }
        Ok(ckpt)
    }

    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(&record.name) {
            return Err(Error::DuplicateTensor(record.name));
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn replace(&mut self, record: TensorRecord) {
        self.tensors.insert(record.name.clone(), record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorRecord> {
        self.tensors.get_mut(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl ExactSizeIterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub(crate) fn tensor_map(&self) -> &BTreeMap<String, TensorRecord> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(TensorRecord::numel).sum()
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .values()
            .find(|t| !t.is_finite())
            .map(|t| t.name.as_str())
    }

    /// Records the toolkit version and the producing command.
    pub fn stamp(&mut self, command: &str) {
        self.metadata
            .insert("armap.version".into(), crate::VERSION.to_string());
        self.metadata
            .insert("armap.command".into(), command.to_string());
    }

    /// Bitwise equality of names, shapes, values and metadata.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.shape == b.shape
                        && a.values.len() == b.values.len()
                        && a.values
                            .iter()
                            .zip(&b.values)
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Lexicographically sorted tensor names.
pub fn tensor_names(ckpt: &Checkpoint) -> Vec<String> {
    ckpt.tensor_names()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub shape_a: Vec<usize>,
    pub shape_b: Vec<usize>,
}

/// Outcome of comparing two tensor maps name-by-name and shape-by-shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
}

impl std::fmt::Display for CompatReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.compatible {
            return write!(f, "compatible");
        }
        write!(
            f,
            "{} missing in a, {} missing in b, {} shape mismatches",
            self.missing_in_a.len(),
            self.missing_in_b.len(),
            self.shape_mismatches.len()
        )?;
        if let Some(m) = self.shape_mismatches.first() {
            write!(f, " (first: {} {:?} vs {:?})", m.name, m.shape_a, m.shape_b)?;
        } else if let Some(n) = self.missing_in_b.first().or(self.missing_in_a.first()) {
            write!(f, " (first: {n})")?;
        }
        Ok(())
    }
}

impl CompatReport {
    pub fn into_result(self) -> Result<()> {
        if self.compatible {
            Ok(())
        } else {
            Err(Error::Incompatible(Box::new(self)))
        }
    }
}

pub(crate) fn compare_maps(
    a: &BTreeMap<String, TensorRecord>,
    b: &BTreeMap<String, TensorRecord>,
) -> CompatReport {
    let missing_in_a: Vec<String> = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
    let missing_in_b: Vec<String> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
    let shape_mismatches: Vec<ShapeMismatch> = a
        .iter()
        .filter_map(|(k, ta)| {
            let tb = b.get(k)?;
            (ta.shape != tb.shape).then(|| ShapeMismatch {
                name: k.clone(),
                shape_a: ta.shape.clone(),
                shape_b: tb.shape.clone(),
            })
        })
        .collect();
    CompatReport {
        compatible: missing_in_a.is_empty()
            && missing_in_b.is_empty()
            && shape_mismatches.is_empty(),
        missing_in_a,
        missing_in_b,
        shape_mismatches,
    }
}

/// Checks that two checkpoints share the same skeleton: identical tensor
/// names with identical shapes.
pub fn validate_compatible(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    compare_maps(&a.tensors, &b.tensors)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf values instead of failing.
    pub allow_non_finite: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SaveOptions {
    pub allow_non_finite: bool,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_with(path, LoadOptions::default())
}

pub fn load_checkpoint_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, opts)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ckpt, path, SaveOptions::default())
}

/// Writes to a temporary file next to `path` and renames it into place, so
/// a failed save never leaves a partial file behind.
pub fn save_checkpoint_with(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    opts: SaveOptions,
) -> Result<()> {
    let bytes = to_bytes(ckpt, opts)?;
    write_atomic(path.as_ref(), &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialises a checkpoint. Tensors are laid out in name order and the
/// header is space-padded to an 8-byte boundary.
pub fn to_bytes(ckpt: &Checkpoint, opts: SaveOptions) -> Result<Vec<u8>> {
    if !opts.allow_non_finite {
        if let Some(name) = ckpt.first_non_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let mut header = Map::new();
    if !ckpt.metadata.is_empty() {
        let meta: Map<String, Value> = ckpt
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut offset = 0usize;
    for t in ckpt.tensors() {
        let end = offset + t.numel() * 4;
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header_bytes =
        serde_json::to_vec(&Value::Object(header)).map_err(|e| Error::Format(e.to_string()))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in ckpt.tensors() {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "file shorter than the 8-byte header length".into(),
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER_LEN || 8 + n > bytes.len() as u64 {
        return Err(Error::Format(format!(
            "header length {n} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + n as usize;
    let header: Value = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(Error::Format("header is not a JSON object".into()));
    };
    let data = &bytes[header_end..];

    let mut ckpt = Checkpoint::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::with_capacity(header.len());
    for (name, entry) in header {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(Error::Format("__metadata__ is not an object".into()));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(Error::Format(format!(
                        "metadata value for {k:?} is not a string"
                    )));
                };
                ckpt.metadata.insert(k, s);
            }
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(entry)
            .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype)?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(Error::Integrity(format!(
                "tensor {name:?}: offsets [{begin}, {end}] outside data region of {} bytes",
                data.len()
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("tensor {name:?}: shape overflows")))?;
        if (end - begin) as usize != numel * dtype.size() {
            return Err(Error::Integrity(format!(
                "tensor {name:?}: {} bytes for shape {:?} of {}",
                end - begin,
                entry.shape,
                entry.dtype
            )));
        }
        let raw = &data[begin as usize..end as usize];
        let values: Vec<f32> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        if !opts.allow_non_finite && values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        spans.push((begin, end, name.clone()));
        ckpt.insert(TensorRecord {
            name,
            shape: entry.shape,
            values,
        })?;
    }

    spans.sort();
    for w in spans.windows(2) {
        let (_, end_a, ref a) = w[0];
        let (begin_b, end_b, ref b) = w[1];
        // zero-length tensors may share an offset with anything
        if begin_b < end_a && begin_b < end_b {
            return Err(Error::Integrity(format!("tensors {a:?} and {b:?} overlap")));
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with_header(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn reads_hand_built_file() {
        let bytes = file_with_header(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},"__metadata__":{"k":"v"}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
        );
        let ckpt = from_bytes(&bytes, LoadOptions::default()).unwrap();
        let w = ckpt.get("w").unwrap();
        assert_eq!(w.shape, vec![2, 2]);
        assert_eq!(w.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ckpt.metadata.get("k").map(String::as_str), Some("v"));
    }

    #[test]
    fn widens_f16() {
        let data: Vec<u8> = [0.5f32, -2.0, 65504.0]
            .iter()
            .flat_map(|&x| half::f16::from_f32(x).to_le_bytes())
            .collect();
        let bytes = file_with_header(
            r#"{"h":{"dtype":"F16","shape":[3],"data_offsets":[0,6]}}"#,
            &data,
        );
        let ckpt = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(ckpt.get("h").unwrap().values, vec![0.5, -2.0, 65504.0]);
    }

    #[test]
    fn rejects_offsets_past_end() {
        let bytes = file_with_header(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,32]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
        );
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn rejects_overlap() {
        let bytes = file_with_header(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0]),
        );
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn rejects_size_shape_disagreement() {
        let bytes = file_with_header(
            r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let bytes = file_with_header(
            r#"{"a":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#,
            &[0, 0],
        );
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(Error::Dtype(d)) if d == "BF16"
        ));
    }

    #[test]
    fn rejects_malformed_header() {
        for header in ["not json", "[1,2]", r#"{"a":{"dtype":"F32"}}"#] {
            let bytes = file_with_header(header, &[]);
            assert!(
                matches!(
                    from_bytes(&bytes, LoadOptions::default()),
                    Err(Error::Format(_))
                ),
                "{header}"
            );
        }
        assert!(matches!(
            from_bytes(&[1, 0, 0], LoadOptions::default()),
            Err(Error::Format(_))
        ));
        let mut huge = 1_000u64.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(
            from_bytes(&huge, LoadOptions::default()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_policy() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert(TensorRecord::new("x", vec![2], vec![1.0, f32::NAN]).unwrap())
            .unwrap();
        assert!(matches!(
            to_bytes(&ckpt, SaveOptions::default()),
            Err(Error::NonFinite(_))
        ));
        let bytes = to_bytes(
            &ckpt,
            SaveOptions {
                allow_non_finite: true,
            },
        )
        .unwrap();
        assert!(matches!(
            from_bytes(&bytes, LoadOptions::default()),
            Err(Error::NonFinite(_))
        ));
        let back = from_bytes(
            &bytes,
            LoadOptions {
                allow_non_finite: true,
            },
        )
        .unwrap();
        assert!(back.bit_eq(&ckpt));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let bytes = to_bytes(&Checkpoint::new(), SaveOptions::default()).unwrap();
        let back = from_bytes(&bytes, LoadOptions::default()).unwrap();
        assert!(back.is_empty());
        assert_eq!((bytes.len() - 8) % 8, 0);
    }

    #[test]
    fn names_sorted_and_duplicates_rejected() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert(TensorRecord::zeros("b", vec![1])).unwrap();
        ckpt.insert(TensorRecord::zeros("a", vec![1])).unwrap();
        assert_eq!(tensor_names(&ckpt), vec!["a", "b"]);
        assert_eq!(tensor_names(&Checkpoint::new()), Vec::<String>::new());
        assert!(matches!(
            ckpt.insert(TensorRecord::zeros("a", vec![2])),
            Err(Error::DuplicateTensor(_))
        ));
    }

    #[test]
    fn record_shape_must_match_values() {
        assert!(TensorRecord::new("x", vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorRecord::new("x", vec![0, 3], vec![]).is_ok());
    }

    #[test]
    fn compat_reports() {
        let a = Checkpoint::from_records([
            TensorRecord::zeros("lm_head", vec![4, 4]),
            TensorRecord::zeros("w", vec![4, 4]),
        ])
        .unwrap();
        let same = validate_compatible(&a, &a);
        assert!(same.compatible);
        assert!(same.missing_in_a.is_empty() && same.missing_in_b.is_empty());

        let b = Checkpoint::from_records([TensorRecord::zeros("w", vec![4, 4])]).unwrap();
        let r = validate_compatible(&a, &b);
        assert!(!r.compatible);
        assert_eq!(r.missing_in_b, vec!["lm_head"]);
        let swapped = validate_compatible(&b, &a);
        assert_eq!(swapped.missing_in_a, vec!["lm_head"]);

        let c = Checkpoint::from_records([
            TensorRecord::zeros("lm_head", vec![4, 4]),
            TensorRecord::zeros("w", vec![4, 8]),
        ])
        .unwrap();
        let r = validate_compatible(&a, &c);
        assert!(!r.compatible);
        assert_eq!(
            r.shape_mismatches,
            vec![ShapeMismatch {
                name: "w".into(),
                shape_a: vec![4, 4],
                shape_b: vec![4, 8]
            }]
        );
    }
}
