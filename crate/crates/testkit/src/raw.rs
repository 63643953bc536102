//! A second, deliberately naive safetensors reader: parses the header with
//! plain JSON access and decodes payloads with hand-written bit conversions,
//! so checks against the library reader compare two independent paths.

use std::collections::BTreeMap;
use std::path::Path;

use lorasharp_core::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    /// Payload widened to `f64`.
    pub fn values(&self) -> Vec<f64> {
        match self.dtype.as_str() {
            "F32" => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            "F16" => self
                .bytes
                .chunks_exact(2)
                .map(|c| f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            "BF16" => self
                .bytes
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
            other => panic!("raw reader does not handle dtype {other}"),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        assert_eq!(self.shape.len(), 2, "not a matrix");
        let values = self.values();
        let cols = self.shape[1];
        Matrix::from_fn(self.shape[0], cols, |i, j| values[i * cols + j])
    }
}

/// IEEE half precision to `f64`, including subnormals, infinities and NaN.
pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exponent = ((bits >> 10) & 0x1f) as i32;
    let mantissa = (bits & 0x3ff) as f64;
    match exponent {
        0 => sign * mantissa * 2f64.powi(-24),
        0x1f if mantissa == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        e => sign * (1.0 + mantissa / 1024.0) * 2f64.powi(e - 15),
    }
}

/// The header as a JSON object, without the `__metadata__` entry.
pub fn raw_header(path: &Path) -> Result<serde_json::Map<String, serde_json::Value>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let (header, _) = split(&bytes)?;
    Ok(header)
}

/// Every tensor in the file, keyed by name.
pub fn read_raw(path: &Path) -> Result<BTreeMap<String, RawTensor>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let (header, data) = split(&bytes)?;
    let mut out = BTreeMap::new();
    for (name, entry) in header {
        let dtype = entry["dtype"].as_str().ok_or("dtype")?.to_string();
        let shape = entry["shape"]
            .as_array()
            .ok_or("shape")?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize).ok_or("shape entry"))
            .collect::<Result<Vec<_>, _>>()?;
        let offsets = entry["data_offsets"].as_array().ok_or("data_offsets")?;
        let begin = offsets[0].as_u64().ok_or("begin")? as usize;
        let end = offsets[1].as_u64().ok_or("end")? as usize;
        let bytes = data.get(begin..end).ok_or("offsets out of range")?.to_vec();
        out.insert(
            name,
            RawTensor {
                dtype,
                shape,
                bytes,
            },
        );
    }
    Ok(out)
}

fn split(bytes: &[u8]) -> Result<(serde_json::Map<String, serde_json::Value>, &[u8]), String> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or("short file")?.try_into().unwrap();
    let n = u64::from_le_bytes(len_bytes) as usize;
    let text = bytes.get(8..8 + n).ok_or("header out of range")?;
    let serde_json::Value::Object(mut header) =
        serde_json::from_slice(text).map_err(|e| e.to_string())?
    else {
        return Err("header is not an object".into());
    };
    header.remove("__metadata__");
    Ok((header, &bytes[8 + n..]))
}

/// `scaling · lora_B · lora_A` for the module whose tensors are
/// `{base}.lora_A.weight` and `{base}.lora_B.weight`, computed by a triple
/// loop over the raw payloads.
pub fn raw_delta_w(path: &Path, base: &str, scaling: f64) -> Result<Matrix, String> {
    let tensors = read_raw(path)?;
    let a = tensors
        .get(&format!("{base}.lora_A.weight"))
        .ok_or("missing lora_A")?;
    let b = tensors
        .get(&format!("{base}.lora_B.weight"))
        .ok_or("missing lora_B")?;
    let (out_dim, r) = (b.shape[0], b.shape[1]);
    let in_dim = a.shape[1];
    if a.shape[0] != r {
        return Err("inner dimensions differ".into());
    }
    let (av, bv) = (a.values(), b.values());
    Ok(Matrix::from_fn(out_dim, in_dim, |i, j| {
        let mut s = 0.0;
        for t in 0..r {
            s += bv[i * r + t] * av[t * in_dim + j];
        }
        scaling * s
    }))
}
