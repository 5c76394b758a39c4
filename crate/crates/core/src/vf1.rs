//! VF1 voxel container.
//!
//! ```text
//! "WVC1" | u8 rank | u32 LE extent per axis | u8 dtype | payload
//! ```
//!
//! dtype 0 is f32 real, 1 is f32 complex (re, im interleaved). The payload is
//! little-endian and row-major, last axis fastest. A JSON sidecar with the
//! same stem and a `.meta.json` extension records grid spacing and
//! provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexField, GridSpec, RealField};

pub const MAGIC: &[u8; 4] = b"WVC1";
pub const DTYPE_REAL_F32: u8 = 0;
pub const DTYPE_COMPLEX_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spacing: Vec<f64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Real(RealField),
    Complex(ComplexField),
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

fn header(grid: &GridSpec, dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * grid.rank());
    out.extend_from_slice(MAGIC);
    out.push(grid.rank() as u8);
    for &d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype);
    out
}

pub fn encode_real(field: &RealField) -> Vec<u8> {
    let mut out = header(field.grid(), DTYPE_REAL_F32);
    out.reserve(4 * field.len());
    for &v in field.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_complex(field: &ComplexField) -> Vec<u8> {
    let mut out = header(field.grid(), DTYPE_COMPLEX_F32);
    out.reserve(8 * field.len());
    for z in field.data() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out
}

/// Decodes a VF1 byte buffer. Spacing defaults to 1 when no sidecar is given.
pub fn decode(bytes: &[u8], spacing: Option<&[f64]>) -> Result<Volume> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing WVC1 magic".into()));
    }
    let rank = bytes[4] as usize;
    let header_len = 5 + 4 * rank + 1;
    if bytes.len() < header_len {
        return Err(Error::Format("truncated VF1 header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|a| {
            let o = 5 + 4 * a;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let grid = match spacing {
        Some(h) => GridSpec::with_spacing(&dims, h),
        None => GridSpec::new(&dims),
    }
    .map_err(|e| Error::Format(format!("bad VF1 grid: {e}")))?;
    let dtype = bytes[header_len - 1];
    let payload = &bytes[header_len..];
    let floats = |payload: &[u8]| -> Vec<f64> {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    match dtype {
        DTYPE_REAL_F32 => {
            if payload.len() != 4 * grid.len() {
                return Err(Error::Format(format!(
                    "VF1 payload is {} bytes, expected {}",
                    payload.len(),
                    4 * grid.len()
                )));
            }
            let field = RealField::new(grid, floats(payload))
                .map_err(|e| Error::Format(e.to_string()))?;
            Ok(Volume::Real(field))
        }
        DTYPE_COMPLEX_F32 => {
            if payload.len() != 8 * grid.len() {
                return Err(Error::Format(format!(
                    "VF1 payload is {} bytes, expected {}",
                    payload.len(),
                    8 * grid.len()
                )));
            }
            let data = floats(payload)
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect();
            let field = ComplexField::new(grid, data).map_err(|e| Error::Format(e.to_string()))?;
            Ok(Volume::Complex(field))
        }
        other => Err(Error::Format(format!("unknown VF1 dtype code {other}"))),
    }
}

fn write_with_sidecar(
    path: &Path,
    bytes: &[u8],
    grid: &GridSpec,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = Sidecar {
        spacing: grid.spacing().to_vec(),
        provenance,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&meta).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn write_real(
    path: &Path,
    field: &RealField,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    write_with_sidecar(path, &encode_real(field), field.grid(), provenance)
}

pub fn write_complex(
    path: &Path,
    field: &ComplexField,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    write_with_sidecar(path, &encode_complex(field), field.grid(), provenance)
}

/// Reads a VF1 file, picking up spacing from its sidecar when present.
pub fn read(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = match fs::read(&side) {
        Ok(raw) => Some(
            serde_json::from_slice::<Sidecar>(&raw)
                .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&side, e)),
    };
    decode(&bytes, meta.as_ref().map(|m| m.spacing.as_slice()))
}

pub fn read_real(path: &Path) -> Result<RealField> {
    match read(path)? {
        Volume::Real(f) => Ok(f),
        Volume::Complex(_) => Err(Error::Format(format!(
            "{}: expected a real volume",
            path.display()
        ))),
    }
}
