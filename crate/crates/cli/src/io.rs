//! Artifact formats: binary arrays with JSON sidecars, 16-bit PGM images and CSV tables.
//!
//! Array file layout, all integers little-endian:
//!
//! | offset | size      | content                          |
//! |--------|-----------|----------------------------------|
//! | 0      | 7         | magic `TATARR1`                  |
//! | 7      | 1         | format version, currently 1      |
//! | 8      | 1         | dtype, 1 = f64 little-endian     |
//! | 9      | 1         | rank                             |
//! | 10     | 8·rank    | dims as u64                      |
//! | …      | 8·∏dims   | row-major payload                |
//!
//! The sidecar `<file>.json` repeats the dims and carries semantic metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const MAGIC: &[u8; 7] = b"TATARR1";
pub const VERSION: u8 = 1;
pub const DTYPE_F64_LE: u8 = 1;
const HEADER_FIXED: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, CliError> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(CliError::Input(format!("dims {dims:?} hold {len} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Self { dims: vec![r, c], data: a.iter().copied().collect() }
    }

    pub fn from_arrayd(a: &ArrayD<f64>) -> Self {
        Self { dims: a.shape().to_vec(), data: a.iter().copied().collect() }
    }

    pub fn into_arrayd(self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.data).expect("length checked on construction")
    }

    pub fn into_array2(self) -> Result<Array2<f64>, CliError> {
        match self.dims[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data).expect("length checked on construction")),
            _ => Err(CliError::Input(format!("expected a rank-2 array, got dims {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F64_LE);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |msg: String| Err(CliError::Input(msg));
        if bytes.len() < HEADER_FIXED || &bytes[..7] != MAGIC {
            return bad("not an array file: magic TATARR1 missing".into());
        }
        if bytes[7] != VERSION {
            return bad(format!("unsupported array file version {} (expected {VERSION})", bytes[7]));
        }
        if bytes[8] != DTYPE_F64_LE {
            return bad(format!("unsupported dtype code {} (expected {DTYPE_F64_LE} for f64)", bytes[8]));
        }
        let rank = bytes[9] as usize;
        let header = HEADER_FIXED + 8 * rank;
        if bytes.len() < header {
            return bad(format!("truncated header: expected {header} bytes, got {}", bytes.len()));
        }
        let dims: Vec<usize> = bytes[HEADER_FIXED..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let expected = dims
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CliError::Input(format!("dims {dims:?} overflow")))?;
        let actual = bytes.len() - header;
        if actual != expected {
            return bad(format!("payload length mismatch for dims {dims:?}: expected {expected} bytes, got {actual}"));
        }
        let data =
            bytes[header..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { dims, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u8,
    pub dims: Vec<usize>,
    pub meta: Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_array(path: &Path, a: &ArrayFile, meta: Value) -> Result<(), CliError> {
    fs::write(path, a.to_bytes()).map_err(io_err(path))?;
    let side = Sidecar { format: "TATARR1".into(), version: VERSION, dims: a.dims.clone(), meta };
    write_json(&sidecar_path(path), &side)
}

pub fn read_array(path: &Path) -> Result<ArrayFile, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    ArrayFile::from_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Reads an array and its sidecar, checking that both agree on the dims.
pub fn read_array_with_sidecar(path: &Path) -> Result<(ArrayFile, Sidecar), CliError> {
    let a = read_array(path)?;
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| CliError::Input(format!("{}: {e}", sp.display())))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", sp.display())))?;
    if side.dims != a.dims {
        return Err(CliError::Input(format!(
            "{}: sidecar dims {:?} do not match header dims {:?}",
            sp.display(),
            side.dims,
            a.dims
        )));
    }
    Ok((a, side))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Min–max scale of a quantized image: `value = min + q·(max − min)/65535`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
}

impl PgmScale {
    pub fn of(values: &[f64]) -> Self {
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if values.is_empty() {
            Self { min: 0.0, max: 0.0 }
        } else {
            Self { min, max }
        }
    }

    pub fn quantize(&self, v: f64) -> u16 {
        if self.max <= self.min {
            return 0;
        }
        (((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0) * 65535.0).round() as u16
    }

    pub fn dequantize(&self, q: u16) -> f64 {
        self.min + q as f64 * (self.max - self.min) / 65535.0
    }
}

/// Writes a binary 16-bit PGM of a `rows × cols` row-major image plus a JSON sidecar with the scale.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64], meta: Value) -> Result<PgmScale, CliError> {
    assert_eq!(values.len(), rows * cols, "image size");
    let scale = PgmScale::of(values);
    let mut out = Vec::with_capacity(32 + 2 * values.len());
    write!(out, "P5\n{cols} {rows}\n65535\n").expect("in-memory write");
    for &v in values {
        out.extend_from_slice(&scale.quantize(v).to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let side = serde_json::json!({ "rows": rows, "cols": cols, "maxval": 65535, "min": scale.min, "max": scale.max, "meta": meta });
    write_json(&sidecar_path(path), &side)?;
    Ok(scale)
}

/// Reads a binary 16-bit PGM written by [`write_pgm`], returning `(rows, cols, samples)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let bad = || CliError::Input(format!("{}: not a 16-bit binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || parse(&fields[3])? != 65535 {
        return Err(bad());
    }
    let (cols, rows) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).ok_or_else(bad)?;
    if body.len() != 2 * rows * cols {
        return Err(bad());
    }
    Ok((rows, cols, body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

/// Writes a grid field as an image with `+y` up.
pub fn write_field_pgm(path: &Path, field: &Array2<f64>, meta: Value) -> Result<PgmScale, CliError> {
    let (rows, cols) = field.dim();
    let flipped: Vec<f64> = (0..rows).rev().flat_map(|j| field.row(j).to_vec()).collect();
    write_pgm(path, rows, cols, &flipped, meta)
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let a = ArrayFile::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[..7], b"TATARR1");
        assert_eq!(b[7..10], [1, 1, 2]);
        assert_eq!(b[10..18], 2u64.to_le_bytes());
        assert_eq!(b[18..26], 1u64.to_le_bytes());
        assert_eq!(b[26..34], 1.0f64.to_le_bytes());
        assert_eq!(b.len(), 10 + 16 + 16);
    }

    #[test]
    fn rank_zero_holds_one_value() {
        let a = ArrayFile::new(vec![], vec![3.25]).unwrap();
        assert_eq!(ArrayFile::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn version_and_dtype_are_checked() {
        let mut b = ArrayFile::new(vec![1], vec![0.0]).unwrap().to_bytes();
        b[7] = 2;
        assert!(ArrayFile::from_bytes(&b).unwrap_err().to_string().contains("version"));
        b[7] = 1;
        b[8] = 4;
        assert!(ArrayFile::from_bytes(&b).unwrap_err().to_string().contains("dtype"));
        assert!(ArrayFile::from_bytes(b"TATARR2\x01\x01\x00").is_err());
    }

    #[test]
    fn scale_recovers_extremes() {
        let s = PgmScale::of(&[-2.0, 0.5, 3.0]);
        assert_eq!(s.quantize(-2.0), 0);
        assert_eq!(s.quantize(3.0), 65535);
        assert_eq!(s.dequantize(65535), 3.0);
        assert_eq!(PgmScale::of(&[1.0, 1.0]).quantize(1.0), 0);
    }
}
