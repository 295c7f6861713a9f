//! Binary formats.
//!
//! **AAPT tensor** (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `AAPT` |
//! | 4 | version `u32` (= [`TENSOR_VERSION`]) |
//! | 1 | dtype `u8`: 0 = f32, 1 = f64 |
//! | 1 | ndim `u8` |
//! | 8·ndim | dims `u64` |
//! | … | row-major payload |
//!
//! **AAPC checkpoint** (parameter tree):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `AAPC` |
//! | 4 | version `u32` (= [`CHECKPOINT_VERSION`]) |
//! | 8 | entry count `u64` |
//!
//! followed by one record per parameter in tree order: name length `u32`,
//! UTF-8 name, weight-decay flag `u8`, then the value as an AAPT tensor
//! (always f64, rank 2).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::error::{ensure, Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"AAPT";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated stream: {e}")))?;
    Ok(b)
}

/// Writes `a` as an AAPT tensor; f32 output rounds to nearest.
pub fn write_tensor(w: &mut impl Write, a: &ArrayD<f64>, dtype: DType) -> Result<()> {
    ensure!(
        a.ndim() <= MAX_NDIM,
        Invalid,
        "rank {} exceeds {MAX_NDIM}",
        a.ndim()
    );
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code(), a.ndim() as u8])?;
    for &d in a.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(a.len() * 8);
    for &v in a.iter() {
        match dtype {
            DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one AAPT tensor, widening f32 payloads.
pub fn read_tensor(r: &mut impl Read) -> Result<(ArrayD<f64>, DType)> {
    let magic: [u8; 4] = read_exact(r)?;
    ensure!(&magic == TENSOR_MAGIC, Format, "bad tensor magic {magic:?}");
    let version = u32::from_le_bytes(read_exact(r)?);
    ensure!(
        version == TENSOR_VERSION,
        Format,
        "unsupported tensor version {version}"
    );
    let [dt, ndim] = read_exact::<2>(r)?;
    let dtype = DType::from_code(dt)?;
    ensure!(
        (ndim as usize) <= MAX_NDIM,
        Format,
        "rank {ndim} exceeds {MAX_NDIM}"
    );
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(read_exact(r)?);
        let d =
            usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        dims.push(d);
    }
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let bytes = count
        .checked_mul(width)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut raw = Vec::new();
    r.take(bytes as u64).read_to_end(&mut raw)?;
    ensure!(
        raw.len() == bytes,
        Format,
        "payload has {} of {bytes} bytes",
        raw.len()
    );
    let data: Vec<f64> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let a = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((a, dtype))
}

pub fn save_tensor(path: &Path, a: &ArrayD<f64>, dtype: DType) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, a, dtype)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = std::fs::read(path)?;
    let mut cur = bytes.as_slice();
    let (a, _) = read_tensor(&mut cur)?;
    ensure!(
        cur.is_empty(),
        Format,
        "{} trailing bytes after tensor",
        cur.len()
    );
    Ok(a)
}

/// Loads a rank-2 tensor (e.g. an `F x T` spectrogram).
pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let a = load_tensor(path)?;
    ensure!(
        a.ndim() == 2,
        Shape,
        "expected a rank-2 tensor, found rank {}",
        a.ndim()
    );
    a.into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_checkpoint(w: &mut impl Write, ps: &ParamSet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ps.len() as u64).to_le_bytes())?;
    for ((name, v), &decay) in ps.iter().zip(ps.decays()) {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[u8::from(decay)])?;
        write_tensor(w, &v.clone().into_dyn(), DType::F64)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamSet> {
    let magic: [u8; 4] = read_exact(r)?;
    ensure!(
        &magic == CHECKPOINT_MAGIC,
        Format,
        "bad checkpoint magic {magic:?}"
    );
    let version = u32::from_le_bytes(read_exact(r)?);
    ensure!(
        version == CHECKPOINT_VERSION,
        Format,
        "unsupported checkpoint version {version}"
    );
    let count = u64::from_le_bytes(read_exact(r)?);
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = Vec::new();
        r.take(len as u64).read_to_end(&mut name)?;
        ensure!(name.len() == len, Format, "truncated parameter name");
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        ensure!(
            ps.get(&name).is_none(),
            Format,
            "duplicate parameter {name}"
        );
        let [flag] = read_exact::<1>(r)?;
        ensure!(flag <= 1, Format, "bad decay flag {flag}");
        let (v, dtype) = read_tensor(r)?;
        ensure!(
            dtype == DType::F64 && v.ndim() == 2,
            Format,
            "parameter {name} must be rank-2 f64"
        );
        let v: Array2<f64> = v
            .into_dimensionality()
            .map_err(|e| Error::Format(e.to_string()))?;
        ps.insert(name, v, flag == 1);
    }
    Ok(ps)
}

pub fn save_checkpoint(path: &Path, ps: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ps)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    let mut cur = bytes.as_slice();
    let ps = read_checkpoint(&mut cur)?;
    ensure!(
        cur.is_empty(),
        Format,
        "{} trailing bytes after checkpoint",
        cur.len()
    );
    Ok(ps)
}

/// Provenance written next to a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub git_describe: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub created_unix: u64,
}

/// `git describe --always --dirty`, or `"unknown"` outside a work tree.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &a, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"AAPT");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(buf[8], 1);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..18], &2u64.to_le_bytes());
        assert_eq!(&buf[18..26], &3u64.to_le_bytes());
        assert_eq!(&buf[26..34], &1.0f64.to_le_bytes());
        // row-major: second payload element is a[0, 1]
        assert_eq!(&buf[34..42], &2.0f64.to_le_bytes());
        assert_eq!(buf.len(), 26 + 6 * 8);
    }

    #[test]
    fn f32_round_trip_and_rejections() {
        let a = array![[0.1, -2.5]].into_dyn();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &a, DType::F32).unwrap();
        let (b, dt) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(dt, DType::F32);
        assert_eq!(b[[0, 0]], f64::from(0.1f32));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 7;
        assert!(read_tensor(&mut bad.as_slice()).is_err());
        assert!(read_tensor(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", array![[1.0, f64::MIN_POSITIVE], [-0.0, 3.5]], true);
        ps.insert("a.b", array![[7.0]], false);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ps).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ps);
        assert_eq!(back.decays(), &[true, false]);
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }
}
