//! Snapshot file format, version 1 (all integers little-endian):
//!
//! ```text
//! "BCST" | u16 version | u16 n_channels | u32 N | u32 n_samples
//! | n_channels x (u16 name_len, UTF-8 name)
//! | payload: n_samples x n_channels x N x N f32, row-major (y outer, x inner)
//! | u64 XXH64(payload bytes, seed 0)
//! ```
//!
//! Provenance (subset name, parameter digest, spin-up count) lives in a
//! `<path>.meta` sidecar of `key=value` lines.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use xxhash_rust::xxh64::xxh64;

use super::{Field, SnapshotSet};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"BCST";
pub const SNAPSHOT_VERSION: u16 = 1;

pub(crate) fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Opens `path` for writing, refusing to clobber an existing file unless `force`.
pub(crate) fn create_output(path: &Path, force: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    opts.open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::AlreadyExists(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

pub fn write_snapshot_set(set: &SnapshotSet, path: &Path, force: bool) -> Result<()> {
    let field = &set.samples;
    if field.samples() == 0 {
        return Err(Error::EmptySet);
    }
    let n_channels = u16::try_from(field.n_channels())
        .map_err(|_| Error::Shape("too many channels for snapshot format".into()))?;
    let n = u32::try_from(field.n()).map_err(|_| Error::Shape("grid too large".into()))?;
    let n_samples = u32::try_from(field.samples()).map_err(|_| Error::Shape("too many samples".into()))?;

    let mut payload = Vec::with_capacity(field.data().len() * 4);
    for &v in field.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }

    let mut out = BufWriter::new(create_output(path, force)?);
    out.write_all(&SNAPSHOT_MAGIC)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    out.write_all(&n_channels.to_le_bytes())?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&n_samples.to_le_bytes())?;
    for name in field.channels() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Shape(format!("channel name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
    }
    out.write_all(&payload)?;
    out.write_all(&xxh64(&payload, 0).to_le_bytes())?;
    out.flush()?;

    let meta = format!(
        "subset_name={}\nsim_params_digest={}\nspinup_discarded={}\n",
        set.subset_name, set.sim_params_digest, set.spinup_discarded
    );
    let mut m = create_output(&meta_path(path), force)?;
    m.write_all(meta.as_bytes())?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("file ended while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_snapshot_set(path: &Path) -> Result<SnapshotSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if magic != SNAPSHOT_MAGIC {
        return Err(Error::BadMagic { expected: SNAPSHOT_MAGIC, found: magic });
    }
    let version = read_u16(&mut r, "version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::VersionMismatch { found: version, supported: SNAPSHOT_VERSION });
    }
    let n_channels = read_u16(&mut r, "channel count")? as usize;
    let n = read_u32(&mut r, "grid size")? as usize;
    let n_samples = read_u32(&mut r, "sample count")? as usize;
    if n_samples == 0 {
        return Err(Error::EmptySet);
    }
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let len = read_u16(&mut r, "channel name length")? as usize;
        let mut name = vec![0u8; len];
        read_exact_or_truncated(&mut r, &mut name, "channel name")?;
        channels.push(String::from_utf8(name).map_err(|_| Error::Shape("channel name is not UTF-8".into()))?);
    }
    let count = n_samples
        .checked_mul(n_channels)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(n))
        .ok_or_else(|| Error::Shape("header dimensions overflow".into()))?;
    let mut payload = vec![0u8; count * 4];
    read_exact_or_truncated(&mut r, &mut payload, "payload")?;
    let mut tail = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut tail, "checksum")?;
    let stored = u64::from_le_bytes(tail);
    let computed = xxh64(&payload, 0);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let field = Field::new(n, channels, n_samples, data)?;

    let mut set = SnapshotSet::new(field, path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())?;
    if let Ok(meta) = std::fs::read_to_string(meta_path(path)) {
        for line in meta.lines() {
            match line.split_once('=') {
                Some(("subset_name", v)) => set.subset_name = v.to_string(),
                Some(("sim_params_digest", v)) => set.sim_params_digest = v.to_string(),
                Some(("spinup_discarded", v)) => {
                    set.spinup_discarded = v.parse().map_err(|_| Error::Shape(format!("bad spinup_discarded {v:?}")))?
                }
                _ => {}
            }
        }
    }
    Ok(set)
}
