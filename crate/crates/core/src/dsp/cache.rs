//! Feature cache container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  b"CNTF"
//! u32    version (1)
//! u32    record count
//! record*:
//!   u32 name length, UTF-8 name
//!   u32 T, u32 n_mels
//!   f64 hop_s, f64 window_s
//!   f64 mel[T * n_mels] (row-major), f64 f0[T], u8 vuv[T]
//! ```
//!
//! Normalization statistics live next to it as JSON ([`write_stats`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use cantus_nn::Tensor;

use super::features::{AcousticFeatures, NormStats};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CNTF";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub name: String,
    pub features: AcousticFeatures,
}

pub fn write_cache(path: &Path, records: &[CacheRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(records.len() as u32)?;
    for r in records {
        let f = &r.features;
        f.validate()?;
        w.write_u32::<LE>(r.name.len() as u32)?;
        w.write_all(r.name.as_bytes())?;
        w.write_u32::<LE>(f.n_frames() as u32)?;
        w.write_u32::<LE>(f.n_mels() as u32)?;
        w.write_f64::<LE>(f.hop_s)?;
        w.write_f64::<LE>(f.window_s)?;
        for &v in f.mel.data() {
            w.write_f64::<LE>(v)?;
        }
        for &v in &f.f0 {
            w.write_f64::<LE>(v)?;
        }
        for &v in &f.vuv {
            w.write_u8(v as u8)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a feature cache", path.display())));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Data(format!("{}: cache version {version}, expected {VERSION}", path.display())));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u32::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Data(e.to_string()))?;
        let t = r.read_u32::<LE>()? as usize;
        let m = r.read_u32::<LE>()? as usize;
        let hop_s = r.read_f64::<LE>()?;
        let window_s = r.read_f64::<LE>()?;
        let mel = Tensor::new(&[t, m], read_f64s(&mut r, t * m)?);
        let f0 = read_f64s(&mut r, t)?;
        let mut vuv = vec![0u8; t];
        r.read_exact(&mut vuv)?;
        let features = AcousticFeatures { mel, f0, vuv: vuv.into_iter().map(f64::from).collect(), hop_s, window_s };
        features.validate().map_err(|e| Error::Data(format!("record {name}: {e}")))?;
        out.push(CacheRecord { name, features });
    }
    Ok(out)
}

pub fn write_stats(path: &Path, stats: &NormStats) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<NormStats> {
    let stats: NormStats = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    stats.validate()?;
    Ok(stats)
}
