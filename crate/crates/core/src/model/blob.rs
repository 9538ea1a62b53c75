//! Versioned binary blob for frozen encoders:
//! `magic (8) | version u32 | config-json length u32 | config json | seed u64 |
//! param count u64 | params f64…`, all little-endian.

use std::io::{Read, Write};

use super::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: [u8; 8] = *b"CORLENC\0";
pub const BLOB_VERSION: u32 = 1;

pub fn save_encoder<W: Write>(enc: &FrozenEncoder, mut out: W) -> Result<()> {
    let json = serde_json::to_vec(enc.config())?;
    let params = enc.flat_params();
    out.write_all(&BLOB_MAGIC)?;
    out.write_all(&BLOB_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&enc.config().seed.to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn load_encoder<R: Read>(mut input: R) -> Result<FrozenEncoder> {
    if read_array::<8, _>(&mut input)? != BLOB_MAGIC {
        return Err(Error::Invalid("not an encoder blob (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != BLOB_VERSION {
        return Err(Error::Invalid(format!("unsupported encoder blob version {version}")));
    }
    let len = u32::from_le_bytes(read_array(&mut input)?) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let config: EncoderConfig = serde_json::from_slice(&json)?;
    let seed = u64::from_le_bytes(read_array(&mut input)?);
    if seed != config.seed {
        return Err(Error::Invalid("blob seed disagrees with its config".into()));
    }
    let n = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64::from_le_bytes(read_array(&mut input)?));
    }
    FrozenEncoder::from_flat(config, &params)
}
