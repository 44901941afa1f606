//! Dense real matrices.
//!
//! Storage is row-major: `data[i * cols + j]` holds entry `(i, j)`. Every
//! constructor rejects non-finite entries, so downstream code may assume all
//! values are finite.

use std::io::{Read, Write};
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite entry at ({}, {})", pos / cols, pos % cols)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in values.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self::new(n, n, data)
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Rank-one matrix `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Result<Self> {
        let data = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
        Self::new(u.len(), v.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * factor).collect() }
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        self.zip_with(other, |a, b| a + factor * b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!("shape mismatch: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn try_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidInput(format!("cannot multiply {:?} by {:?}", self.shape(), rhs.shape())));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[l * m..(l + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: n, cols: m, data: out })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        Self::new(rows, cols, data)
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &Self) -> Result<Self> {
        if !self.is_square() || self.rows != rhs.rows {
            return Err(Error::InvalidInput(format!("cannot solve {:?} against {:?}", self.shape(), rhs.shape())));
        }
        let lu = self.to_nalgebra().lu();
        let x = lu.solve(&rhs.to_nalgebra()).ok_or_else(|| Error::InvalidInput("singular matrix".into()))?;
        Self::from_nalgebra(&x)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve(&Self::identity(self.rows))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads dense CSV, one matrix row per line, no header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|field| {
                    field.parse::<f64>().map_err(|_| Error::InvalidInput(format!("cannot parse {field:?} as a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Writes dense CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.rows {
            wtr.write_record(self.row(i).iter().map(|&x| format_f64(x)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Round-trip exact decimal rendering (17 significant digits).
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl Add for &DenseMatrix {
    type Output = DenseMatrix;
    fn add(self, rhs: Self) -> DenseMatrix {
        self.try_add(rhs).expect("shape mismatch in matrix addition")
    }
}

impl Sub for &DenseMatrix {
    type Output = DenseMatrix;
    fn sub(self, rhs: Self) -> DenseMatrix {
        self.try_sub(rhs).expect("shape mismatch in matrix subtraction")
    }
}

impl Mul for &DenseMatrix {
    type Output = DenseMatrix;
    fn mul(self, rhs: Self) -> DenseMatrix {
        self.try_matmul(rhs).expect("shape mismatch in matrix product")
    }
}

impl Neg for &DenseMatrix {
    type Output = DenseMatrix;
    fn neg(self) -> DenseMatrix {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(0, 2, vec![]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn json_layout() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap();
        let text = m.to_json().unwrap();
        assert_eq!(text, r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0,4.5]}"#);
        assert_eq!(DenseMatrix::from_json(&text).unwrap(), m);
    }

    #[test]
    fn json_rejects_non_finite_and_bad_counts() {
        assert!(DenseMatrix::from_json(r#"{"rows":1,"cols":2,"data":[1.0,null]}"#).is_err());
        assert!(DenseMatrix::from_json(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
        assert!(DenseMatrix::from_json(r#"{"rows":1,"cols":1,"data":[1e400]}"#).is_err());
    }

    #[test]
    fn csv_round_trip_and_rejection() {
        let m = DenseMatrix::from_rows(&[vec![0.1, -2.0 / 3.0], vec![1e-300, 7.0]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = DenseMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        assert!(DenseMatrix::read_csv("1,2\n3,NaN\n".as_bytes()).is_err());
        assert!(DenseMatrix::read_csv("1,2\n3,inf\n".as_bytes()).is_err());
        assert!(DenseMatrix::read_csv("1,2\n3\n".as_bytes()).is_err());
    }

    #[test]
    fn products_and_solves() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let ab = &a * &b;
        assert_eq!(ab.data(), &[1.0, -3.0]);
        let x = a.solve(&ab).unwrap();
        assert!((&x - &b).max_abs() < 1e-15);
        let inv = a.inverse().unwrap();
        assert!((&(&a * &inv) - &DenseMatrix::identity(2)).max_abs() < 1e-15);
        assert!(DenseMatrix::zeros(2, 2).inverse().is_err());
    }

    #[test]
    fn outer_and_transpose() {
        let m = DenseMatrix::outer(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.get(1, 2), 10.0);
        assert_eq!(m.transpose().get(2, 1), 10.0);
    }
}
