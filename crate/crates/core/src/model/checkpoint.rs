//! Versioned binary checkpoints: magic, version, JSON config header, then
//! little-endian `f64` weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LOBACKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint_to<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&params.config)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(params.data.len() as u64).to_le_bytes())?;
    for v in &params.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(mut input: R) -> Result<ModelParams> {
    let bad = |m: &str| Error::BadCheckpoint(m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let mut u32b = [0u8; 4];
    input.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let mut u64b = [0u8; 8];
    input.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
    let hlen = u64::from_le_bytes(u64b) as usize;
    if hlen > 1 << 24 {
        return Err(bad("implausible header length"));
    }
    let mut header = vec![0u8; hlen];
    input.read_exact(&mut header).map_err(|_| bad("truncated config"))?;
    let config: ModelConfig = serde_json::from_slice(&header)?;
    let mut params = ModelParams::zeros(config)?;
    input.read_exact(&mut u64b).map_err(|_| bad("truncated weights"))?;
    let n = u64::from_le_bytes(u64b) as usize;
    if n != params.data.len() {
        return Err(Error::BadCheckpoint(format!(
            "{n} weights stored, config needs {}",
            params.data.len()
        )));
    }
    for v in params.data.iter_mut() {
        input.read_exact(&mut u64b).map_err(|_| bad("truncated weights"))?;
        *v = f64::from_le_bytes(u64b);
    }
    if input.read(&mut u64b)? != 0 {
        return Err(bad("trailing bytes"));
    }
    if !params.is_finite() {
        return Err(bad("non-finite weights"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint_to(params, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
