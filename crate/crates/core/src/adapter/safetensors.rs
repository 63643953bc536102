//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{dtype, shape, data_offsets}` (plus an
//! optional `__metadata__` string map), then the data region. Offsets are
//! relative to the start of the data region.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use super::AdapterError;
use crate::scalar::Scalar;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SafetensorsError {
    #[error("file is {len} bytes, too short for the 8-byte header length")]
    ShortFile { len: usize },
    #[error("header length {header_len} at byte 0 exceeds the {available} bytes after it")]
    HeaderOutOfBounds { header_len: u64, available: usize },
    #[error("header is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("tensor `{tensor}`: malformed entry: {reason}")]
    InvalidEntry { tensor: String, reason: String },
    #[error("tensor `{tensor}`: unknown dtype `{dtype}`")]
    UnknownDtype { tensor: String, dtype: String },
    #[error(
        "tensor `{tensor}`: data range {begin}..{end} exceeds the {data_len}-byte data region"
    )]
    OffsetsOutOfBounds {
        tensor: String,
        begin: u64,
        end: u64,
        data_len: usize,
    },
    #[error("tensor `{tensor}`: {actual} payload bytes but shape and dtype need {expected}")]
    SizeMismatch {
        tensor: String,
        expected: usize,
        actual: usize,
    },
    #[error("tensors `{first}` and `{second}` overlap at data byte {position}")]
    OverlappingRanges {
        first: String,
        second: String,
        position: usize,
    },
    #[error("no tensor named `{0}`")]
    MissingTensor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Self::F32),
            "F16" => Some(Self::F16),
            "BF16" => Some(Self::BF16),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::F32 => "F32",
            Self::F16 => "F16",
            Self::BF16 => "BF16",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 | Self::BF16 => 2,
        }
    }

    /// Widens little-endian payload bytes. Every conversion here is exact.
    pub fn decode<T: Scalar>(self, bytes: &[u8]) -> Vec<T> {
        match self {
            Self::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            Self::F16 => bytes
                .chunks_exact(2)
                .map(|c| T::lit(half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64()))
                .collect(),
            Self::BF16 => bytes
                .chunks_exact(2)
                .map(|c| T::lit(bf16_to_f32(u16::from_le_bytes([c[0], c[1]])) as f64))
                .collect(),
        }
    }

    /// Narrows values to this dtype with round-to-nearest-even.
    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.byte_width());
        for &x in values {
            match self {
                Self::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Self::F16 => out.extend_from_slice(&half::f16::from_f64(x).to_bits().to_le_bytes()),
                Self::BF16 => {
                    out.extend_from_slice(&half::bf16::from_f64(x).to_bits().to_le_bytes())
                }
            }
        }
        out
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// BF16 is the upper half of an IEEE binary32.
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `(begin, end)` into the data region.
    pub byte_range: (usize, usize),
}

impl TensorRecord {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.byte_range.1 - self.byte_range.0
    }
}

/// A parsed container: records sorted by name over one owned data region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeTensors {
    records: Vec<TensorRecord>,
    data: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

impl SafeTensors {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, AdapterError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| AdapterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(bytes).map_err(|source| AdapterError::Container {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse(mut bytes: Vec<u8>) -> Result<Self, SafetensorsError> {
        if bytes.len() < 8 {
            return Err(SafetensorsError::ShortFile { len: bytes.len() });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = bytes.len() - 8;
        if header_len > available as u64 {
            return Err(SafetensorsError::HeaderOutOfBounds {
                header_len,
                available,
            });
        }
        let header_end = 8 + header_len as usize;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| SafetensorsError::InvalidJson(e.to_string()))?;
        let data = bytes.split_off(header_end);
        let data_len = data.len();

        let mut metadata = BTreeMap::new();
        let mut records = Vec::with_capacity(header.len());
        for (name, entry) in header {
            if name == METADATA_KEY {
                metadata = parse_metadata(entry)?;
                continue;
            }
            records.push(parse_entry(name, &entry, data_len)?);
        }

        let mut by_offset: Vec<&TensorRecord> =
            records.iter().filter(|r| r.byte_len() > 0).collect();
        by_offset.sort_by_key(|r| (r.byte_range, r.name.as_str()));
        let mut furthest: Option<&TensorRecord> = None;
        for r in by_offset {
            if let Some(prev) = furthest {
                if r.byte_range.0 < prev.byte_range.1 {
                    return Err(SafetensorsError::OverlappingRanges {
                        first: prev.name.clone(),
                        second: r.name.clone(),
                        position: r.byte_range.0,
                    });
                }
            }
            furthest = Some(r);
        }
        Ok(Self {
            records,
            data,
            metadata,
        })
    }

    /// Builds a container from `(name, dtype, shape, payload)` tuples.
    pub fn from_tensors(
        tensors: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, SafetensorsError> {
        let mut tensors = tensors;
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let mut records = Vec::with_capacity(tensors.len());
        let mut data = Vec::new();
        for (name, dtype, shape, payload) in tensors {
            let expected = shape.iter().product::<usize>() * dtype.byte_width();
            if payload.len() != expected {
                return Err(SafetensorsError::SizeMismatch {
                    tensor: name,
                    expected,
                    actual: payload.len(),
                });
            }
            if records
                .last()
                .is_some_and(|r: &TensorRecord| r.name == name)
            {
                return Err(SafetensorsError::InvalidEntry {
                    tensor: name,
                    reason: "duplicate name".into(),
                });
            }
            let begin = data.len();
            data.extend_from_slice(&payload);
            records.push(TensorRecord {
                name,
                dtype,
                shape,
                byte_range: (begin, data.len()),
            });
        }
        Ok(Self {
            records,
            data,
            metadata,
        })
    }

    /// Records in name order.
    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records
            .binary_search_by(|r| r.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn payload(&self, record: &TensorRecord) -> &[u8] {
        &self.data[record.byte_range.0..record.byte_range.1]
    }

    pub fn payload_of(&self, name: &str) -> Result<&[u8], SafetensorsError> {
        self.get(name)
            .map(|r| self.payload(r))
            .ok_or_else(|| SafetensorsError::MissingTensor(name.to_string()))
    }

    pub fn decode<T: Scalar>(&self, name: &str) -> Result<Vec<T>, SafetensorsError> {
        let record = self
            .get(name)
            .ok_or_else(|| SafetensorsError::MissingTensor(name.to_string()))?;
        Ok(record.dtype.decode(self.payload(record)))
    }

    /// Overwrites a tensor's payload with zeros, keeping dtype and shape.
    /// Positive zero is all-zero bytes in every supported dtype.
    pub fn zero_tensor(&mut self, name: &str) -> Result<(), SafetensorsError> {
        let (begin, end) = self
            .get(name)
            .ok_or_else(|| SafetensorsError::MissingTensor(name.to_string()))?
            .byte_range;
        self.data[begin..end].fill(0);
        Ok(())
    }

    /// Data-region byte ranges not covered by any tensor.
    pub fn slack(&self) -> Vec<(usize, usize)> {
        let mut ranges: Vec<(usize, usize)> = self.records.iter().map(|r| r.byte_range).collect();
        ranges.sort_unstable();
        let mut gaps = Vec::new();
        let mut cursor = 0;
        for (begin, end) in ranges {
            if begin > cursor {
                gaps.push((cursor, begin));
            }
            cursor = cursor.max(end);
        }
        if cursor < self.data.len() {
            gaps.push((cursor, self.data.len()));
        }
        gaps
    }

    /// Serializes with tensors laid out contiguously in name order and the
    /// header padded with spaces to an 8-byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for r in &self.records {
            let len = r.byte_len();
            header.insert(
                r.name.clone(),
                serde_json::json!({
                    "dtype": r.dtype.as_str(),
                    "shape": r.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        while !(8 + json.len()).is_multiple_of(8) {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for r in &self.records {
            out.extend_from_slice(self.payload(r));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>, SafetensorsError> {
    let invalid = |reason: &str| SafetensorsError::InvalidEntry {
        tensor: METADATA_KEY.to_string(),
        reason: reason.to_string(),
    };
    let Value::Object(map) = entry else {
        return Err(invalid("expected an object of strings"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(invalid(&format!("value of `{k}` is not a string"))),
        })
        .collect()
}

fn parse_entry(
    name: String,
    entry: &Value,
    data_len: usize,
) -> Result<TensorRecord, SafetensorsError> {
    let invalid = |reason: &str| SafetensorsError::InvalidEntry {
        tensor: name.clone(),
        reason: reason.to_string(),
    };
    let obj = entry
        .as_object()
        .ok_or_else(|| invalid("expected an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing string `dtype`"))?;
    let dtype = Dtype::parse(dtype_str).ok_or_else(|| SafetensorsError::UnknownDtype {
        tensor: name.clone(),
        dtype: dtype_str.to_string(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array `shape`"))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| invalid("shape entries must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| invalid("`data_offsets` must be two non-negative integers"))?;
    let (begin, end) = offsets;
    if begin > end || end > data_len as u64 {
        return Err(SafetensorsError::OffsetsOutOfBounds {
            tensor: name,
            begin,
            end,
            data_len,
        });
    }
    let expected = shape
        .iter()
        .try_fold(dtype.byte_width(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("shape overflows"))?;
    let actual = (end - begin) as usize;
    if expected != actual {
        return Err(SafetensorsError::SizeMismatch {
            tensor: name,
            expected,
            actual,
        });
    }
    Ok(TensorRecord {
        name,
        dtype,
        shape,
        byte_range: (begin as usize, end as usize),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn minimal_f32() {
        let bytes = container(
            r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &1.0f32.to_le_bytes(),
        );
        let st = SafeTensors::parse(bytes).unwrap();
        assert_eq!(st.records().len(), 1);
        assert_eq!(st.payload_of("x").unwrap().len(), 4);
        assert_eq!(st.decode::<f64>("x").unwrap(), vec![1.0]);
        assert!(st.slack().is_empty());
    }

    #[test]
    fn distinct_errors() {
        assert_eq!(
            SafeTensors::parse(vec![1, 2, 3]),
            Err(SafetensorsError::ShortFile { len: 3 })
        );
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            SafeTensors::parse(bytes),
            Err(SafetensorsError::HeaderOutOfBounds {
                header_len: 1000,
                ..
            })
        ));
        assert!(matches!(
            SafeTensors::parse(container("{not json", &[])),
            Err(SafetensorsError::InvalidJson(_))
        ));
        assert!(matches!(
            SafeTensors::parse(container(
                r#"{"x":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#,
                &[0]
            )),
            Err(SafetensorsError::UnknownDtype { .. })
        ));
        assert!(matches!(
            SafeTensors::parse(container(
                r#"{"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
                &[0; 4]
            )),
            Err(SafetensorsError::OffsetsOutOfBounds { .. })
        ));
        assert!(matches!(
            SafeTensors::parse(container(
                r#"{"x":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#,
                &[0; 4]
            )),
            Err(SafetensorsError::SizeMismatch { .. })
        ));
        let overlap = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert_eq!(
            SafeTensors::parse(container(overlap, &[0; 8])),
            Err(SafetensorsError::OverlappingRanges {
                first: "a".into(),
                second: "b".into(),
                position: 4
            })
        );
    }

    #[test]
    fn reports_slack_and_metadata() {
        let header = r#"{"__metadata__":{"format":"pt"},"b":{"dtype":"F16","shape":[1],"data_offsets":[4,6]},"a":{"dtype":"F16","shape":[1],"data_offsets":[0,2]}}"#;
        let st = SafeTensors::parse(container(header, &[0; 8])).unwrap();
        assert_eq!(st.slack(), vec![(2, 4), (6, 8)]);
        assert_eq!(st.metadata().get("format").map(String::as_str), Some("pt"));
        let names: Vec<_> = st.records().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn round_trip_preserves_payloads() {
        let tensors = vec![
            (
                "w".to_string(),
                Dtype::BF16,
                vec![2, 2],
                Dtype::BF16.encode(&[1.0, -2.0, 0.5, 3.0]),
            ),
            (
                "v".to_string(),
                Dtype::F16,
                vec![3],
                Dtype::F16.encode(&[0.1, 0.2, 0.3]),
            ),
            (
                "u".to_string(),
                Dtype::F32,
                vec![1, 1],
                Dtype::F32.encode(&[7.25]),
            ),
        ];
        let meta = BTreeMap::from([("k".to_string(), "v".to_string())]);
        let st = SafeTensors::from_tensors(tensors, meta).unwrap();
        let bytes = st.to_bytes();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + header_len) % 8, 0);
        let back = SafeTensors::parse(bytes.clone()).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.decode::<f64>("w").unwrap(), vec![1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn zeroing_keeps_dtype() {
        let tensors = vec![
            (
                "a".to_string(),
                Dtype::F16,
                vec![2],
                Dtype::F16.encode(&[1.0, 2.0]),
            ),
            (
                "b".to_string(),
                Dtype::F32,
                vec![1],
                Dtype::F32.encode(&[3.0]),
            ),
        ];
        let mut st = SafeTensors::from_tensors(tensors, BTreeMap::new()).unwrap();
        let before_b = st.payload_of("b").unwrap().to_vec();
        st.zero_tensor("a").unwrap();
        assert_eq!(st.get("a").unwrap().dtype, Dtype::F16);
        assert_eq!(st.decode::<f64>("a").unwrap(), vec![0.0, 0.0]);
        assert_eq!(st.payload_of("b").unwrap(), before_b.as_slice());
        assert!(st.zero_tensor("missing").is_err());
    }

    #[test]
    fn bf16_widening_is_exact() {
        for bits in [0x3f80u16, 0xc000, 0x0001, 0x7f7f, 0x8000] {
            let wide = bf16_to_f32(bits);
            assert_eq!(half::bf16::from_f32(wide).to_bits(), bits);
        }
        assert_eq!(bf16_to_f32(0x3f80), 1.0);
    }
}
