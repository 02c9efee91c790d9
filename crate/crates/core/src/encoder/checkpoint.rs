//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MARICKPT"
//! version    u8       1
//! config     resolution, patch_size, embed_dim, n_blocks, n_heads,
//!            mlp_ratio, output_dim as u32; seed as u64
//! count      u32      number of tensors
//! tensor*    name_len u32, name (UTF-8), ndim u32, dims u32 x ndim,
//!            trainable u8, data f64 x prod(dims)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderParams, init_params};
use crate::error::{Error, Result};
use crate::rng::rng_from;

const MAGIC: &[u8; 8] = b"MARICKPT";
const VERSION: u8 = 1;

pub fn encode_checkpoint(params: &EncoderParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + params.n_params() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [c.resolution, c.patch_size, c.embed_dim, c.n_blocks, c.n_heads, c.mlp_ratio, c.output_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.push(u8::from(params.is_trainable(t.layer)));
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more of {})", self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<EncoderParams, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic; not an encoder checkpoint".into());
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config = EncoderConfig {
        resolution: r.u32()?,
        patch_size: r.u32()?,
        embed_dim: r.u32()?,
        n_blocks: r.u32()?,
        n_heads: r.u32()?,
        mlp_ratio: r.u32()?,
        output_dim: r.u32()?,
        seed: r.u64()?,
    };
    config.validate().map_err(|e| e.to_string())?;
    // Allocate the right shapes, then overwrite every value.
    let mut params = init_params(&config, &mut rng_from(0)).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let expected = params.tensors().len();
    if count != expected {
        return Err(format!("checkpoint has {count} tensors, config implies {expected}"));
    }
    let mut flags = vec![None::<bool>; config.n_layers()];
    {
        let mut tensors = params.tensors_mut();
        for t in tensors.iter_mut() {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| "tensor name is not UTF-8".to_string())?;
            if name != t.name {
                return Err(format!("expected tensor {} but found {name}", t.name));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            if shape != t.shape {
                return Err(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape));
            }
            let trainable = r.u8()? != 0;
            match flags[t.layer] {
                Some(f) if f != trainable => return Err(format!("inconsistent trainable flags in layer {}", t.layer)),
                _ => flags[t.layer] = Some(trainable),
            }
            for v in t.data.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    for (layer, f) in flags.into_iter().enumerate() {
        params.set_trainable(layer, f.unwrap_or(true));
    }
    Ok(params)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<EncoderParams> {
    decode(bytes).map_err(|m| Error::format(origin, m))
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_checksum(params: &EncoderParams) -> [u8; 32] {
    Sha256::digest(encode_checkpoint(params)).into()
}

#[cfg(test)]
mod tests {
    use super::super::init_from_seed;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        p.set_last_block_only();
        let bytes = encode_checkpoint(&p);
        assert!(bytes.starts_with(b"MARICKPT\x01"));
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let p = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let bytes = encode_checkpoint(&p);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("x.ckpt") && err.to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("x")).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode_checkpoint(&bad, Path::new("x")).unwrap_err().to_string().contains("version"));
    }
}
