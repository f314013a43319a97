//! Self-describing binary tensors.
//!
//! Layout, all little-endian: magic `RANA`, `u32` format version, `u32`
//! dtype code (0 = f64), `u32` ndim, `ndim × u64` dims, then the row-major
//! payload.

use std::path::Path;

use rana_core::Matrix;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"RANA";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 0;
const MAX_NDIM: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: u64,
    pub message: String,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows() as u64, m.cols() as u64], data: m.as_slice().to_vec() }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self { dims: vec![v.len() as u64], data: v.to_vec() }
    }

    /// 2-D tensors map directly; 1-D tensors become a single column.
    pub fn to_matrix(&self) -> Result<Matrix, DecodeError> {
        let (rows, cols) = match self.dims[..] {
            [n] => (n as usize, 1),
            [r, c] => (r as usize, c as usize),
            _ => return Err(DecodeError { offset: 12, message: format!("expected 1 or 2 dims, found {}", self.dims.len()) }),
        };
        let header = header_len(self.dims.len()) as u64;
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(DecodeError { offset: header + 8 * i as u64, message: "non-finite value".into() });
        }
        Matrix::new(rows, cols, self.data.clone()).map_err(|e| DecodeError { offset: header, message: e.to_string() })
    }
}

fn header_len(ndim: usize) -> usize {
    16 + 8 * ndim
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.dims.len()) + 8 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, DecodeError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DecodeError { offset: bytes.len() as u64, message: "truncated header".into() })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DecodeError { offset: 0, message: "bad magic, expected \"RANA\"".into() });
    }
    let version = u32_at(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(DecodeError { offset: 4, message: format!("unsupported format version {version}") });
    }
    let dtype = u32_at(bytes, 8)?;
    if dtype != DTYPE_F64 {
        return Err(DecodeError { offset: 8, message: format!("unsupported dtype code {dtype}") });
    }
    let ndim = u32_at(bytes, 12)?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(DecodeError { offset: 12, message: format!("ndim {ndim} outside 1..={MAX_NDIM}") });
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for k in 0..ndim as usize {
        let at = 16 + 8 * k;
        let d = bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or(DecodeError { offset: bytes.len() as u64, message: "truncated dims".into() })?;
        dims.push(d);
    }
    let header = header_len(ndim as usize);
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or(DecodeError { offset: 16, message: "dims overflow".into() })?;
    let payload = &bytes[header..];
    if payload.len() as u64 != count {
        return Err(DecodeError {
            offset: header as u64 + payload.len().min(count as usize) as u64,
            message: format!("payload has {} bytes, dims need {count}", payload.len()),
        });
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Parse { path: path.to_path_buf(), offset: e.offset, message: e.message })
}

pub fn read_matrix(path: &Path) -> CliResult<Matrix> {
    read_tensor(path)?
        .to_matrix()
        .map_err(|e| CliError::Parse { path: path.to_path_buf(), offset: e.offset, message: e.message })
}

pub fn read_vector(path: &Path) -> CliResult<Vec<f64>> {
    let t = read_tensor(path)?;
    if t.dims.len() != 1 {
        return Err(CliError::Parse { path: path.to_path_buf(), offset: 12, message: "expected a 1-D tensor".into() });
    }
    Ok(t.data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    crate::bundle::write_atomic(path, &encode(t))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> CliResult<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor { dims: vec![2, 3], data: vec![0.0; 6] });
        assert_eq!(&bytes[..4], b"RANA");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        assert_eq!(bytes[16..24], 2u64.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 16 + 48);
    }

    #[test]
    fn negative_cases_report_offsets() {
        let good = encode(&Tensor { dims: vec![2], data: vec![1.0, 2.0] });
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err().offset, 0);
        let mut v = good.clone();
        v[4] = 9;
        assert_eq!(decode(&v).unwrap_err().offset, 4);
        assert_eq!(decode(&good[..good.len() - 3]).unwrap_err().offset, 24 + 13);
        let nan = Tensor { dims: vec![2], data: vec![1.0, f64::NAN] };
        assert_eq!(decode(&encode(&nan)).unwrap().to_matrix().unwrap_err().offset, 24 + 8);
    }
}
