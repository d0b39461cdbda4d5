//! Canonical binary layout of [`ModelParams`]:
//!
//! ```text
//! u32 LE feature_dim | u32 LE num_classes | f64 LE weights (row-major) | f64 LE biases
//! ```
//!
//! Payloads may additionally be deflated, and travel base64-encoded inside
//! JSON envelopes.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::model::ModelParams;

const HEADER_LEN: usize = 8;

pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.len());
    out.extend_from_slice(&(model.feature_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    for v in model.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Contract("model payload shorter than header".into()));
    }
    let feature_dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let num_classes = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_weights = feature_dim
        .checked_mul(num_classes)
        .ok_or_else(|| Error::Contract("model header overflows".into()))?;
    let expected = HEADER_LEN + 8 * (n_weights + num_classes);
    if bytes.len() != expected {
        return Err(Error::Contract(format!(
            "model payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let weights: Vec<f64> = values.by_ref().take(n_weights).collect();
    let biases: Vec<f64> = values.collect();
    ModelParams::from_parts(feature_dim, num_classes, weights, biases)
}

pub fn compress(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn decompress(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    DeflateDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Contract(format!("bad deflate stream: {e}")))?;
    Ok(out)
}

/// Base64 of the canonical layout, deflated first when `compressed`.
pub fn model_to_b64(model: &ModelParams, compressed: bool) -> String {
    let raw = encode_model(model);
    if compressed {
        STANDARD.encode(compress(&raw))
    } else {
        STANDARD.encode(raw)
    }
}

pub fn model_from_b64(payload: &str, compressed: bool) -> Result<ModelParams> {
    let bytes = STANDARD
        .decode(payload)
        .map_err(|e| Error::Contract(format!("bad base64 payload: {e}")))?;
    if compressed {
        decode_model(&decompress(&bytes)?)
    } else {
        decode_model(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let m = ModelParams::from_parts(1, 2, vec![1.0, -2.0], vec![0.5, 0.0]).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &0.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 4 * 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_model(&init_model(3, 2, 0).unwrap());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_model(&bytes[..4]).is_err());
        assert!(model_from_b64("not base64!", false).is_err());
    }

    proptest! {
        #[test]
        fn payload_round_trips_bit_exact(fd in 1usize..12, nc in 2usize..8, seed in any::<u64>(), compressed in any::<bool>()) {
            let m = init_model(fd, nc, seed).unwrap();
            let back = model_from_b64(&model_to_b64(&m, compressed), compressed).unwrap();
            prop_assert_eq!(encode_model(&back), encode_model(&m));
        }
    }
}
