//! `DSTN` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | field                         |
//! |------------|-------------------------------|
//! | 4          | magic `DSTN`                  |
//! | 4 (u32)    | version, currently 1          |
//! | 1 (u8)     | dtype, 1 = float32            |
//! | 1 (u8)     | ndim                          |
//! | 4 × ndim   | dims (u32 each)               |
//! | 4 × Πdims  | row-major float32 payload     |
//!
//! A zero-dimensional tensor is a scalar with a 4-byte payload.

use std::fs;
use std::path::Path;

use dragscene_core::grid::{Grid, MaskGrid};

pub const MAGIC: [u8; 4] = *b"DSTN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Header or payload problem, naming the field at fault.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("field `magic`: expected \"DSTN\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("field `version`: unsupported version {found} (expected 1)")]
    BadVersion { found: u32 },
    #[error("field `dtype`: unsupported code {found} (expected 1 = float32)")]
    BadDtype { found: u8 },
    #[error("field `{field}`: truncated, need {needed} bytes but only {available} remain")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("field `dims`: {dims:?} overflows the addressable size")]
    DimOverflow { dims: Vec<u64> },
    #[error("field `ndim`: {found} dimensions exceed the limit of 255")]
    TooManyDims { found: usize },
    #[error("field `payload`: {extra} bytes after the declared payload")]
    TrailingBytes { extra: usize },
    #[error("field `payload`: {len} values for shape {dims:?}")]
    ShapeMismatch { dims: Vec<usize>, len: usize },
    #[error("field `dims`: expected {expected}, found {found:?}")]
    UnexpectedShape { expected: String, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.len() > u8::MAX as usize {
            return Err(TensorError::TooManyDims { found: dims.len() });
        }
        match element_count(&dims) {
            Some(n) if n == data.len() => Ok(Self { dims, data }),
            Some(_) => Err(TensorError::ShapeMismatch { dims, len: data.len() }),
            None => Err(TensorError::DimOverflow {
                dims: dims.iter().map(|&d| d as u64).collect(),
            }),
        }
    }

    pub fn scalar(x: f32) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![x],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| TensorError::DimOverflow {
                dims: self.dims.iter().map(|&d| d as u64).collect(),
            })?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take("magic", 4)?;
        if magic != MAGIC {
            return Err(TensorError::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TensorError::BadVersion { found: version });
        }
        let dtype = r.take("dtype", 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(TensorError::BadDtype { found: dtype });
        }
        let ndim = r.take("ndim", 1)?[0] as usize;
        let raw: Vec<u32> = (0..ndim).map(|_| r.u32("dims")).collect::<Result<_, _>>()?;
        let overflow = || TensorError::DimOverflow {
            dims: raw.iter().map(|&d| d as u64).collect(),
        };
        let dims: Vec<usize> = raw.iter().map(|&d| d as usize).collect();
        let count = element_count(&dims).ok_or_else(overflow)?;
        let len = count.checked_mul(4).ok_or_else(overflow)?;
        let payload = r.take("payload", len)?;
        if r.pos != bytes.len() {
            return Err(TensorError::TrailingBytes {
                extra: bytes.len() - r.pos,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    /// `h × w × c` tensor of a grid, rounded to f32.
    pub fn from_grid(g: &Grid) -> Self {
        let (h, w, c) = g.shape();
        Self {
            dims: vec![h, w, c],
            data: g.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid, TensorError> {
        let [h, w, c] = self.expect_rank::<3>("an h x w x c grid")?;
        Ok(Grid::from_vec(h, w, c, self.data_f64()).expect("element count checked on construction"))
    }

    pub fn from_mask(m: &MaskGrid) -> Self {
        Self {
            dims: vec![m.height(), m.width()],
            data: m.values().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_mask(&self) -> Result<MaskGrid, TensorError> {
        let [h, w] = self.expect_rank::<2>("an h x w mask")?;
        MaskGrid::from_vec(h, w, self.data_f64()).map_err(|e| TensorError::UnexpectedShape {
            expected: e.to_string(),
            found: self.dims.clone(),
        })
    }

    /// Rows of a `n × k` table.
    pub fn from_rows<const K: usize>(rows: &[[f64; K]]) -> Self {
        Self {
            dims: vec![rows.len(), K],
            data: rows.iter().flatten().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_rows<const K: usize>(&self) -> Result<Vec<[f64; K]>, TensorError> {
        let [_, k] = self.expect_rank::<2>("an n x k table")?;
        if k != K {
            return Err(TensorError::UnexpectedShape {
                expected: format!("{K} columns"),
                found: self.dims.clone(),
            });
        }
        Ok(self
            .data
            .chunks_exact(K)
            .map(|c| std::array::from_fn(|i| c[i] as f64))
            .collect())
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>, TensorError> {
        self.expect_rank::<1>("a vector")?;
        Ok(self.data_f64())
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    fn expect_rank<const N: usize>(&self, what: &str) -> Result<[usize; N], TensorError> {
        <[usize; N]>::try_from(self.dims.as_slice()).map_err(|_| TensorError::UnexpectedShape {
            expected: what.to_string(),
            found: self.dims.clone(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8], TensorError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TensorError::Truncated {
                field,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, TensorError> {
        let b = self.take(field, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> crate::Result<()> {
    let bytes = t.to_bytes().map_err(|e| crate::Error::tensor(path, e))?;
    crate::io::write_bytes(path, &bytes)
}

/// Reads a whole tensor; nothing is returned unless the file is valid.
pub fn read_tensor(path: &Path) -> crate::Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| crate::Error::tensor(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_four_byte_payload() {
        let b = Tensor::scalar(1.5).to_bytes().unwrap();
        assert_eq!(b.len(), 4 + 4 + 1 + 1 + 4);
        assert_eq!(b[9], 0);
        assert_eq!(Tensor::from_bytes(&b).unwrap(), Tensor::scalar(1.5));
    }

    #[test]
    fn header_bytes_are_little_endian() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(&b[..4], b"DSTN");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[14..18], &[1, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_headers_name_their_field() {
        let good = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes().unwrap();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&magic), Err(TensorError::BadMagic { .. })));
        let mut version = good.clone();
        version[4] = 2;
        assert_eq!(Tensor::from_bytes(&version), Err(TensorError::BadVersion { found: 2 }));
        let mut dtype = good.clone();
        dtype[8] = 7;
        assert_eq!(Tensor::from_bytes(&dtype), Err(TensorError::BadDtype { found: 7 }));
        let truncated = &good[..good.len() - 1];
        let err = Tensor::from_bytes(truncated).unwrap_err();
        assert!(matches!(err, TensorError::Truncated { field: "payload", .. }));
        assert!(err.to_string().contains("payload"));
        assert!(matches!(
            Tensor::from_bytes(&good[..12]),
            Err(TensorError::Truncated { field: "dims", .. })
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(Tensor::from_bytes(&trailing), Err(TensorError::TrailingBytes { extra: 1 }));
    }

    #[test]
    fn huge_dims_overflow_instead_of_allocating() {
        let mut b = b"DSTN".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(1);
        b.push(4);
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(Tensor::from_bytes(&b), Err(TensorError::DimOverflow { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
