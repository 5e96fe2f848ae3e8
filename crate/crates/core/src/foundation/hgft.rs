//! HGFT feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! "HGFT" | u32 version (=1) | u32 n_layers | u32 batch | u32 channels
//!        | u32 frames | f64 frame_rate
//!        | f32 payload, n_layers * batch * channels * frames values,
//!          ordered [layer][batch][channel][frame]
//! ```
//!
//! In-memory features are `f64`; values are narrowed to `f32` on save.

use std::path::Path;

use super::LayerFeatureStack;
use crate::error::{Error, IoContext, Result};
use crate::tensorcore::{Shape, Tensor};

pub const HGFT_MAGIC: &[u8; 4] = b"HGFT";
pub const HGFT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 8;

pub fn encode_features(stack: &LayerFeatureStack) -> Vec<u8> {
    let s = stack.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + stack.n_layers() * s.len() * 4);
    out.extend_from_slice(HGFT_MAGIC);
    for v in [HGFT_VERSION, stack.n_layers() as u32, s.b as u32, s.c as u32, s.t as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&stack.frame_rate.to_le_bytes());
    for layer in stack.layers() {
        for &v in layer.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_features(bytes: &[u8]) -> Result<LayerFeatureStack> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != HGFT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HGFT\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = u32_at(bytes, 4);
    if version != HGFT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_layers = u32_at(bytes, 8) as usize;
    let (b, c, t) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    if n_layers == 0 {
        return Err(Error::format(8, "n_layers must be at least 1"));
    }
    let frame_rate = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::format(24, format!("invalid frame rate {frame_rate}")));
    }
    let per_layer = b
        .checked_mul(c)
        .and_then(|n| n.checked_mul(t))
        .ok_or_else(|| Error::format(12, "dimension overflow"))?;
    let payload = per_layer
        .checked_mul(n_layers)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(8, "dimension overflow"))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {payload} bytes, found {available}"),
        ));
    }
    if available > payload {
        return Err(Error::format(
            (HEADER_LEN + payload) as u64,
            format!("{} trailing bytes after payload", available - payload),
        ));
    }
    let shape = Shape::new(b, c, t);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let start = HEADER_LEN + l * per_layer * 4;
        let data = bytes[start..start + per_layer * 4]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().expect("4 bytes")) as f64)
            .collect();
        layers.push(Tensor::new(shape, data)?);
    }
    LayerFeatureStack::new(layers, frame_rate)
}

pub fn save_features(stack: &LayerFeatureStack, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(stack)).at(path)
}

pub fn load_features(path: &Path) -> Result<LayerFeatureStack> {
    let bytes = std::fs::read(path).at(path)?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> LayerFeatureStack {
        let l = |k: f64| Tensor::new(Shape::new(1, 2, 3), (0..6).map(|i| i as f64 * 0.5 + k).collect()).unwrap();
        LayerFeatureStack::new(vec![l(0.0), l(10.0)], 50.0).unwrap()
    }

    #[test]
    fn round_trip() {
        let s = stack();
        let bytes = encode_features(&s);
        assert_eq!(decode_features(&bytes).unwrap(), s);
    }

    #[test]
    fn empty_input_is_truncated_header() {
        let err = decode_features(&[]).unwrap_err().to_string();
        assert!(err.contains("truncated header"), "{err}");
    }

    #[test]
    fn rejects_bad_headers() {
        let good = encode_features(&stack());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = good.clone();
        for o in [12, 16, 20] {
            bad[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_features(&bad).is_err());
        assert!(decode_features(&good[..good.len() - 1]).is_err());
        assert!(decode_features(&good[..10]).unwrap_err().to_string().contains("truncated header"));
    }
}
