//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"FIRMCKPT"
//! 8       4         version (u32) = 1
//! 12      4         layer count L (u32)
//! 16      8*L       per layer: out (u32), in (u32)
//! ..      4*P       parameter values as f32, per layer weight row-major then bias
//! ```
//!
//! Values are stored at single precision, so a write narrows every `f64`
//! parameter to `f32`. Reading widens back exactly, and re-writing a loaded
//! checkpoint reproduces the original bytes.

use std::fs;
use std::path::Path;

use super::params::ParameterSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FIRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &ParameterSet) -> Vec<u8> {
    let sig = params.shape_signature();
    let mut buf = Vec::with_capacity(16 + 8 * sig.len() + 4 * params.num_params());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sig.len() as u32).to_le_bytes());
    for (out, inp) in &sig {
        buf.extend_from_slice(&(*out as u32).to_le_bytes());
        buf.extend_from_slice(&(*inp as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {at}")))
}

pub fn decode(bytes: &[u8]) -> Result<ParameterSet> {
    if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(bytes, 12)? as usize;
    let mut sig = Vec::with_capacity(count);
    let mut at = 16;
    for _ in 0..count {
        let out = read_u32(bytes, at)? as usize;
        let inp = read_u32(bytes, at + 4)? as usize;
        sig.push((out, inp));
        at += 8;
    }
    let total: usize = sig.iter().map(|&(o, i)| o * i + o).sum();
    let body = &bytes[at..];
    if body.len() != 4 * total {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            4 * total
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let params = ParameterSet::from_flat(&sig, &values)?;
    ParameterSet::new(params.layers).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_checkpoint(path: &Path, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let p = ParameterSet::zeros(&[(2, 3), (1, 2)]);
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], b"FIRMCKPT");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 16 + 4 * (6 + 2 + 2 + 1));
    }

    #[test]
    fn values_are_row_major_f32() {
        let p = ParameterSet::from_flat(&[(2, 2)], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&p);
        let vals: Vec<f32> = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn decode_encode_is_bit_exact() {
        let p = ParameterSet::init_uniform(&[(5, 4), (3, 5)], 9);
        let first = encode(&p);
        let loaded = decode(&first).unwrap();
        assert_eq!(encode(&loaded), first);
        for (a, b) in p.to_flat().iter().zip(loaded.to_flat()) {
            assert_eq!((*a as f32).to_bits(), (b as f32).to_bits());
        }
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let bytes = encode(&ParameterSet::zeros(&[(2, 2)]));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
