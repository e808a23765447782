use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Row-major `rows x cols` matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite {
                coord: i,
                value: data[i],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self {
            rows: 1,
            cols,
            data,
        }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub(crate) fn check_same(&self, other: &Tensor2D, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

/// `a (m x k) * b (k x n)`.
///
/// Every output element is summed over `k` in increasing order, so the
/// blocking below does not change results.
pub(crate) fn matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    let mut out = Tensor2D::zeros(m, n);
    let mut i = 0;
    while i + 4 <= m {
        row_block::<4>(&a.data, &b.data, &mut out.data, i, k, n);
        i += 4;
    }
    while i < m {
        row_block::<1>(&a.data, &b.data, &mut out.data, i, k, n);
        i += 1;
    }
    out
}

const LANES: usize = 8;

/// Rows `i..i + R` of the product, `LANES` output columns at a time.
#[inline(always)]
fn row_block<const R: usize>(a: &[f64], b: &[f64], out: &mut [f64], i: usize, k: usize, n: usize) {
    let mut j = 0;
    while j + LANES <= n {
        let mut acc = [[0.0f64; LANES]; R];
        for p in 0..k {
            let bv: &[f64; LANES] = b[p * n + j..p * n + j + LANES].try_into().expect("lane width");
            for (r, row) in acc.iter_mut().enumerate() {
                let av = a[(i + r) * k + p];
                for t in 0..LANES {
                    row[t] += av * bv[t];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[(i + r) * n + j..(i + r) * n + j + LANES].copy_from_slice(row);
        }
        j += LANES;
    }
    for jj in j..n {
        for r in 0..R {
            let mut s = 0.0;
            for p in 0..k {
                s += a[(i + r) * k + p] * b[p * n + jj];
            }
            out[(i + r) * n + jj] = s;
        }
    }
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    debug_assert_eq!(a.cols, b.cols);
    matmul(a, &b.transpose())
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    debug_assert_eq!(a.rows, b.rows);
    matmul(&a.transpose(), b)
}
