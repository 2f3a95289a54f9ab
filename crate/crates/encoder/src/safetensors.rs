//! Minimal reader/writer for the safetensors container.
//!
//! Layout: little-endian `u64` header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw byte buffer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn f16_to_f32(bits: u16) -> f32 {
    let sign = u32::from(bits >> 15) << 31;
    let exp = u32::from((bits >> 10) & 0x1f);
    let frac = u32::from(bits & 0x3ff);
    let out = match (exp, frac) {
        (0, 0) => sign,
        (0, f) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut f = f;
            while f & 0x400 == 0 {
                f <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((f & 0x3ff) << 13)
        }
        (0x1f, f) => sign | 0x7f80_0000 | (f << 13),
        (e, f) => sign | ((e + 127 - 15) << 23) | (f << 13),
    };
    f32::from_bits(out)
}

/// Reads every tensor, converting F32/F16/BF16 payloads to `f32`.
pub fn read(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| EncoderError::io(path, e))?;
    parse(&bytes).map_err(|m| EncoderError::format(path, m))
}

fn parse(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Tensor>, String> {
    if bytes.len() < 8 {
        return Err("file shorter than header length prefix".into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = bytes
        .get(8..8 + n)
        .ok_or_else(|| format!("header length {n} exceeds file size"))?;
    let data = &bytes[8 + n..];
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| format!("bad header: {e}"))?;
    let mut out = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let entry: Entry = serde_json::from_value(value).map_err(|e| format!("{name}: {e}"))?;
        let [begin, end] = entry.data_offsets;
        let buf = data
            .get(begin..end)
            .filter(|_| begin <= end)
            .ok_or_else(|| format!("{name}: offsets {begin}..{end} out of range"))?;
        let numel: usize = entry.shape.iter().product();
        let width = match entry.dtype.as_str() {
            "F32" => 4,
            "F16" | "BF16" => 2,
            other => return Err(format!("{name}: unsupported dtype {other}")),
        };
        if buf.len() != numel * width {
            return Err(format!("{name}: {} bytes for {numel} elements of {}", buf.len(), entry.dtype));
        }
        let values: Vec<f32> = match entry.dtype.as_str() {
            "F32" => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            "F16" => buf
                .chunks_exact(2)
                .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            _ => buf
                .chunks_exact(2)
                .map(|c| f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16))
                .collect(),
        };
        out.insert(name, Tensor { shape: entry.shape, data: values });
    }
    Ok(out)
}

/// Writes all tensors as F32, names sorted.
pub fn write(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        if t.numel() != t.data.len() {
            return Err(EncoderError::Shape(format!(
                "{name}: shape {:?} does not match {} values",
                t.shape,
                t.data.len()
            )));
        }
        let len = t.data.len() * 4;
        header.insert(
            name.clone(),
            Entry {
                dtype: "F32".into(),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + len],
            },
        );
        offset += len;
    }
    let mut json = serde_json::to_vec(&header)?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut bytes = Vec::with_capacity(8 + json.len() + offset);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in tensors.values() {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| EncoderError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut t = BTreeMap::new();
        t.insert("a.weight".to_string(), Tensor { shape: vec![2, 3], data: vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0] });
        t.insert("a.bias".to_string(), Tensor { shape: vec![2], data: vec![0.25, -0.5] });
        write(&path, &t).unwrap();
        assert_eq!(read(&path).unwrap(), t);
        let bytes = fs::read(&path).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x3555), 0.333_251_95);
        assert_eq!(f16_to_f32(0x0001), 2f32.powi(-24));
        assert!(f16_to_f32(0x7c00).is_infinite());

        let header = br#"{"x":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]},"h":{"dtype":"F16","shape":[1],"data_offsets":[4,6]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0x80, 0x3f, 0x40, 0xc0, 0x00, 0x3c]);
        let t = parse(&bytes).unwrap();
        assert_eq!(t["x"].data, vec![1.0, -3.0]);
        assert_eq!(t["h"].data, vec![1.0]);
    }

    #[test]
    fn rejects_truncated_payload() {
        let header = br#"{"x":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 8]);
        assert!(parse(&bytes).unwrap_err().contains("out of range"));
        assert!(parse(&[1, 2]).is_err());
    }
}
