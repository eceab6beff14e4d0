//! Netpbm images and the `CUN1` checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! "CUN1" | version: u32 LE | header_len: u32 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The payload is little-endian `f32` samples for every tensor listed in the
//! header, in header order. Offsets in the header count samples, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{init_params, CuNetParams, ModelConfig};
use crate::tensor::{Real, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CUN1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Cursor over a netpbm header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary PGM (P5) or PPM (P6) image to `[0, 1]` samples.
/// Returns the image and its maxval.
pub fn decode_pnm(bytes: &[u8]) -> Result<(Tensor<f64>, u16)> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "file too short for a netpbm magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(parse_err(0, "unsupported magic number, expected P5 or P6")),
    };
    let mut h = Header { bytes, pos: 2 };
    if h.pos < bytes.len() && !bytes[h.pos].is_ascii_whitespace() && bytes[h.pos] != b'#' {
        return Err(parse_err(h.pos, "expected whitespace after magic number"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "image has zero width or height"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(parse_err(h.pos, "expected a single whitespace before the raster"));
    }
    let data_start = h.pos + 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(maxval_at, "image dimensions overflow"))?;
    let needed = count * bytes_per;
    let raster = &bytes[data_start..];
    if raster.len() < needed {
        return Err(parse_err(
            data_start + raster.len(),
            format!("truncated raster: {} of {needed} bytes present", raster.len()),
        ));
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(count);
    for n in 0..count {
        let v = if bytes_per == 1 {
            raster[n] as usize
        } else {
            u16::from_be_bytes([raster[2 * n], raster[2 * n + 1]]) as usize
        };
        if v > maxval {
            return Err(parse_err(data_start + n * bytes_per, format!("sample {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / scale);
    }
    Ok((Tensor::new(height, width, channels, data)?, maxval as u16))
}

/// Encodes a 1- or 3-channel image, clamping to `[0, 1]` and rounding to
/// `maxval` levels. Samples are 16-bit big-endian when `maxval > 255`.
pub fn encode_pnm<T: Real>(img: &Tensor<T>, maxval: u16) -> Result<Vec<u8>> {
    ensure!(maxval >= 1, "maxval must be at least 1");
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Contract(format!("netpbm images need 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let scale = maxval as f64;
    for &v in img.data() {
        let x = v.as_f64();
        let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
        let q = (x * scale).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    Ok(decode_pnm(&fs::read(path)?)?.0)
}

pub fn save_image<T: Real>(path: &Path, img: &Tensor<T>, maxval: u16) -> Result<()> {
    fs::write(path, encode_pnm(img, maxval)?)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    /// Adam step count; moments follow the parameters as `m.<name>` and `v.<name>`.
    adam_step: Option<u64>,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: CuNetParams<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: CheckpointMeta,
}

fn ckpt_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), message: message.into() }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
            for v in data {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            tensors.push(TensorEntry { name, shape, offset, len: data.len() });
            offset += data.len();
        };
        let refs = self.params.tensors();
        for r in &refs {
            push(r.name.clone(), r.shape.clone(), r.data);
        }
        if let Some(adam) = &self.adam {
            ensure!(
                adam.m.len() == refs.len() && adam.v.len() == refs.len(),
                "optimizer state does not match parameters"
            );
            for (prefix, bufs) in [("m", &adam.m), ("v", &adam.v)] {
                for (r, buf) in refs.iter().zip(bufs) {
                    ensure!(buf.len() == r.data.len(), "optimizer buffer for {} has wrong length", r.name);
                    push(format!("{prefix}.{}", r.name), r.shape.clone(), buf);
                }
            }
        }
        let header = CheckpointHeader {
            config: self.params.config,
            tensors,
            adam_step: self.adam.as_ref().map(|a| a.t),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(ckpt_err("magic", "file shorter than the fixed preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ckpt_err("magic", format!("expected \"CUN1\", found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err("version", format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ckpt_err("header_len", format!("header length {header_len} exceeds file size")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..header_end]).map_err(|e| ckpt_err("header", e.to_string()))?;
        let payload = &bytes[header_end..];
        header.config.validate().map_err(|e| ckpt_err("config", e.to_string()))?;

        let mut expected_offset = 0usize;
        for t in &header.tensors {
            if t.offset != expected_offset {
                return Err(ckpt_err(
                    format!("tensors.{}.offset", t.name),
                    format!("offset {} but previous tensors end at {expected_offset}", t.offset),
                ));
            }
            if t.shape.iter().product::<usize>() != t.len {
                return Err(ckpt_err(
                    format!("tensors.{}.shape", t.name),
                    format!("shape {:?} holds {} samples, not {}", t.shape, t.shape.iter().product::<usize>(), t.len),
                ));
            }
            if (t.offset + t.len) * 4 > payload.len() {
                return Err(ckpt_err(
                    format!("tensors.{}", t.name),
                    format!(
                        "payload truncated: tensor needs bytes up to {}, only {} present",
                        (t.offset + t.len) * 4,
                        payload.len()
                    ),
                ));
            }
            expected_offset += t.len;
        }
        if expected_offset * 4 != payload.len() {
            return Err(ckpt_err(
                "payload",
                format!("{} trailing bytes after the last tensor", payload.len() - expected_offset * 4),
            ));
        }
        let read = |t: &TensorEntry| -> Vec<T> {
            payload[t.offset * 4..(t.offset + t.len) * 4]
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect()
        };
        let find = |name: &str| header.tensors.iter().find(|t| t.name == name);

        let mut params: CuNetParams<T> = init_params::<T>(&header.config, 0)?.zeros_like();
        let known: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
        let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|t| t.shape).collect();
        for ((dst, name), shape) in params.tensors_mut().into_iter().zip(&known).zip(&shapes) {
            let t = find(name).ok_or_else(|| ckpt_err(format!("tensors.{name}"), "missing tensor"))?;
            if &t.shape != shape {
                return Err(ckpt_err(
                    format!("tensors.{name}.shape"),
                    format!("expected {shape:?}, found {:?}", t.shape),
                ));
            }
            dst.data.copy_from_slice(&read(t));
        }
        let adam = match header.adam_step {
            None => None,
            Some(step) => {
                let mut m = Vec::with_capacity(known.len());
                let mut v = Vec::with_capacity(known.len());
                for (prefix, bufs) in [("m", &mut m), ("v", &mut v)] {
                    for (name, shape) in known.iter().zip(&shapes) {
                        let full = format!("{prefix}.{name}");
                        let t = find(&full)
                            .ok_or_else(|| ckpt_err(format!("tensors.{full}"), "missing optimizer tensor"))?;
                        if &t.shape != shape {
                            return Err(ckpt_err(
                                format!("tensors.{full}.shape"),
                                format!("expected {shape:?}, found {:?}", t.shape),
                            ));
                        }
                        bufs.push(read(t));
                    }
                }
                Some(AdamState { t: step, m, v })
            }
        };
        let expected_count = known.len() * if adam.is_some() { 3 } else { 1 };
        if header.tensors.len() != expected_count {
            let extra = header
                .tensors
                .iter()
                .find(|t| {
                    let base = t.name.strip_prefix("m.").or_else(|| t.name.strip_prefix("v.")).unwrap_or(&t.name);
                    !known.iter().any(|k| k == base) || (adam.is_none() && base != t.name)
                })
                .map(|t| t.name.clone())
                .unwrap_or_else(|| "tensors".into());
            return Err(ckpt_err(format!("tensors.{extra}"), "unexpected tensor"));
        }
        if let Some(t) = params.tensors().iter().find(|t| t.is_threshold && t.data.iter().any(|&v| v < T::zero())) {
            return Err(ckpt_err(format!("tensors.{}", t.name), "negative threshold"));
        }
        Ok(Self { params, adam, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
