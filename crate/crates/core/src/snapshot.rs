//! NPY container for operators and states on the two-mode space.
//!
//! Arrays are complex little-endian ('<c16' for f64, '<c8' for f32), C order,
//! with shape (n_r, n_z, n_r, n_z): element [i, j, k, l] is <i, j| M |k, l>.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{EngineError, Result};
use crate::fock::{DensityMatrix, FockDims, OperatorMatrix};
use crate::scalar::{Cplx, Real};

const MAGIC: &[u8] = b"\x93NUMPY";

fn descr<T: Real>() -> Result<&'static str> {
    match std::mem::size_of::<T>() {
        8 => Ok("<c16"),
        4 => Ok("<c8"),
        n => Err(EngineError::Snapshot(format!("unsupported scalar width {n}"))),
    }
}

fn header(descr: &str, dims: FockDims) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}, {}, {}), }}",
        dims.n_r, dims.n_z, dims.n_r, dims.n_z
    );
    // magic(6) + version(2) + length(2) + dict + padding + '\n' is a multiple of 64
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&((dict.len() + pad + 1) as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat(b' ').take(pad));
    out.push(b'\n');
    out
}

pub fn write_npy<T: Real, W: Write>(dims: FockDims, m: &DMatrix<Cplx<T>>, mut out: W) -> Result<()> {
    if m.nrows() != dims.dim() || m.ncols() != dims.dim() {
        return Err(EngineError::Snapshot("matrix size does not match dims".into()));
    }
    out.write_all(&header(descr::<T>()?, dims))?;
    let mut buf = Vec::with_capacity(m.len() * 2 * std::mem::size_of::<T>());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            for v in [z.re, z.im] {
                match std::mem::size_of::<T>() {
                    8 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
                    _ => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                }
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn field<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let k = format!("'{key}':");
    let start = dict.find(&k).ok_or_else(|| EngineError::Snapshot(format!("header lacks {key}")))? + k.len();
    Ok(dict[start..].trim_start())
}

pub fn read_npy<T: Real, R: Read>(mut input: R) -> Result<(FockDims, DMatrix<Cplx<T>>)> {
    let mut pre = [0u8; 10];
    input.read_exact(&mut pre)?;
    if &pre[..6] != MAGIC {
        return Err(EngineError::Snapshot("not an NPY file".into()));
    }
    let len = match pre[6] {
        1 => u16::from_le_bytes([pre[8], pre[9]]) as usize,
        2 | 3 => {
            let mut rest = [0u8; 2];
            input.read_exact(&mut rest)?;
            u32::from_le_bytes([pre[8], pre[9], rest[0], rest[1]]) as usize
        }
        v => return Err(EngineError::Snapshot(format!("unsupported NPY version {v}"))),
    };
    let mut dict = vec![0u8; len];
    input.read_exact(&mut dict)?;
    let dict = String::from_utf8(dict).map_err(|_| EngineError::Snapshot("header not UTF-8".into()))?;

    let want = descr::<T>()?;
    let d = field(&dict, "descr")?;
    if !d.starts_with(&format!("'{want}'")) {
        return Err(EngineError::Snapshot(format!("expected dtype {want}, header has {}", &d[..d.len().min(8)])));
    }
    if !field(&dict, "fortran_order")?.starts_with("False") {
        return Err(EngineError::Snapshot("Fortran order not supported".into()));
    }
    let shape = field(&dict, "shape")?;
    let close = shape.find(')').ok_or_else(|| EngineError::Snapshot("malformed shape".into()))?;
    let axes: Vec<usize> = shape[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| EngineError::Snapshot(format!("bad shape entry {s}"))))
        .collect::<Result<_>>()?;
    if axes.len() != 4 || axes[0] != axes[2] || axes[1] != axes[3] {
        return Err(EngineError::Snapshot(format!("expected shape (n_r, n_z, n_r, n_z), got {axes:?}")));
    }
    let dims = FockDims::new(axes[0], axes[1])?;
    let n = dims.dim();
    let width = std::mem::size_of::<T>();
    let mut raw = vec![0u8; n * n * 2 * width];
    input.read_exact(&mut raw)?;
    let scalar = |k: usize| -> T {
        let b = &raw[k * width..(k + 1) * width];
        if width == 8 {
            T::lit(f64::from_le_bytes(b.try_into().unwrap()))
        } else {
            T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64)
        }
    };
    let m = DMatrix::from_fn(n, n, |i, j| {
        let k = 2 * (i * n + j);
        Cplx::new(scalar(k), scalar(k + 1))
    });
    Ok((dims, m))
}

impl<T: Real> DensityMatrix<T> {
    pub fn save_npy(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_npy(self.dims, &self.entries, &mut bytes)?;
        crate::scenario::write_atomic(path, &bytes)
    }

    pub fn load_npy(path: &Path) -> Result<Self> {
        let (dims, m) = read_npy(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Ok(Self::new(dims, m))
    }
}

impl<T: Real> OperatorMatrix<T> {
    pub fn save_npy(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_npy(self.dims, &self.entries, &mut bytes)?;
        crate::scenario::write_atomic(path, &bytes)
    }

    pub fn load_npy(path: &Path) -> Result<Self> {
        let (dims, m) = read_npy(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Ok(Self::new(dims, m, false))
    }
}
