use crate::error::{config_err, Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Dense row-major matrix; rows are samples (features, scores) or clusters
/// (centers).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return config_err(format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return config_err("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    /// Flattens an `(n, c, h, w)` tensor to `n × (c·h·w)`.
    pub fn from_tensor(t: &Tensor4<T>) -> Self {
        let s = t.shape();
        Self { rows: s.n, cols: s.sample_len(), data: t.data().to_vec() }
    }

    /// Views the rows as an `(rows, cols, 1, 1)` tensor.
    pub fn to_tensor(&self) -> Tensor4<T> {
        Tensor4::from_vec(Shape4::new(self.rows, self.cols, 1, 1), self.data.clone()).expect("sizes agree")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| U::of(x.f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// CSV with header `{prefix}0..{prefix}{cols-1}`; values use the shortest
    /// representation that parses back to the same number.
    pub fn to_csv(&self, prefix: &str) -> String {
        let header: Vec<String> = (0..self.cols).map(|j| format!("{prefix}{j}")).collect();
        let mut out = header.join(",");
        out.push('\n');
        for row in self.iter_rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let cols = lines.next().map_or(0, |h| h.split(',').count());
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let before = data.len();
            for cell in line.split(',') {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Config(format!("row {}: bad number '{cell}'", i + 1)))?;
                data.push(T::of(v));
            }
            if data.len() - before != cols {
                return config_err(format!("row {} has {} values, header has {cols}", i + 1, data.len() - before));
            }
            rows += 1;
        }
        Self::from_vec(rows, cols, data)
    }
}

/// Magic of the flat binary matrix format: the magic, then rows and cols as
/// little-endian u64, then row-major little-endian f32 values.
pub const MATRIX_MAGIC: &[u8; 8] = b"DBCMAT01";

impl Matrix<f32> {
    pub fn to_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.data.len());
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bin(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
            return Err(Error::Parse { offset: 0, message: "not a binary matrix file".into() });
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let (rows, cols) = (word(8), word(16));
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(24));
        if expected != Some(bytes.len() as u64) {
            return Err(Error::Parse { offset: 8, message: format!("{rows}x{cols} header does not match {} bytes", bytes.len()) });
        }
        let data = bytes[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::from_vec(rows as usize, cols as usize, data)
    }
}
