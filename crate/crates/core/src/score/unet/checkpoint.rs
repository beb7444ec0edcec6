//! Binary checkpoint: `"BCKP" | u16 version | u32 header length | TOML header |
//! u32 tensor count | per tensor (u16 name length, name, u8 rank, u32 dims,
//! f32 LE values) | u64 xxh64 of everything between magic and checksum`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::{UNetConfig, UNetScore};
use crate::error::{Error, Result};
use crate::fields::snapshot::create_output;
use crate::sde::NoiseSchedule;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
const FOURIER_TENSOR: &str = "time_embedding.fourier_weight";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n_grid: usize,
    channels: Vec<String>,
    schedule: NoiseSchedule,
    unet: UNetConfig,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(model: &UNetScore, path: &Path, force: bool) -> Result<()> {
    let header = Header {
        n_grid: model.n_grid,
        channels: model.input_channels(),
        schedule: model.schedule,
        unet: model.config.clone(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(header.as_bytes());
    body.extend_from_slice(&((model.specs.len() + 1) as u32).to_le_bytes());
    put_tensor(&mut body, FOURIER_TENSOR, &[model.fourier.len()], &model.fourier);
    for spec in &model.specs {
        put_tensor(&mut body, &spec.name, &spec.shape, &model.params[spec.offset..spec.offset + spec.len()]);
    }
    let checksum = xxh64(&body, 0);
    let mut out = create_output(path, force)?;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&body)?;
    out.write_all(&checksum.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends at byte {}", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<UNetScore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::Truncated("checkpoint shorter than its magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found });
    }
    if bytes.len() < 4 + 2 + 8 {
        return Err(Error::Truncated("checkpoint header incomplete".into()));
    }
    let body = &bytes[4..bytes.len() - 8];
    let mut cur = Cursor { buf: body, pos: 0 };
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, supported: CHECKPOINT_VERSION });
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = xxh64(body, 0);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let header_len = cur.u32()? as usize;
    let header = std::str::from_utf8(cur.take(header_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header: Header = toml::from_str(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = cur.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        tensors.push((name, shape, values));
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - cur.pos)));
    }
    let mut tensors = tensors.into_iter();
    let (name, _, fourier) = tensors.next().ok_or_else(|| Error::Checkpoint("no tensors".into()))?;
    if name != FOURIER_TENSOR {
        return Err(Error::Checkpoint(format!("first tensor is {name}, expected {FOURIER_TENSOR}")));
    }
    UNetScore::from_parts(header.unet, header.schedule, header.n_grid, &header.channels, fourier, tensors.collect())
}
