//! Dense row-major `f64` matrices and a seeded, stream-splittable RNG.
//!
//! Everything downstream (attention, pruning heads, losses, metrics) is built
//! on this module, so the operations here are deliberately small in number
//! and aggressively tested. Matrices are plain `Vec<f64>` in row-major order;
//! at the working sizes of this crate (hundreds of rows, tens of columns)
//! simple slice loops vectorize well and there is no benefit to a BLAS.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Result, VppError};

/// Lower clamp for uniform draws that feed `-ln(-ln(u))`; keeps Gumbel noise
/// finite on both tails.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Matrix with every entry set to `value`.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    /// Builds a matrix from row-major data; the length must match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VppError::Shape(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(VppError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * other`. Uses an i-k-j loop so the inner loop runs over
    /// contiguous rows of both operands.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(VppError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose; each output
    /// entry is a dot product of two contiguous rows.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(VppError::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                *o = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose; used for weight
    /// gradients of the form `x^T * dz`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(VppError::Shape(format!(
                "cannot multiply transpose of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a_ki) in a_row.iter().enumerate() {
                if a_ki == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ki * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(VppError::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `factor * other` elementwise into `self`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(VppError::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn map_assign(&mut self, f: impl Fn(f64) -> f64) {
        for a in &mut self.data {
            *a = f(*a);
        }
    }

    /// Elementwise product into `self`.
    pub fn hadamard_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(VppError::Shape(format!(
                "cannot take elementwise product of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(())
    }

    /// Numerically stable softmax applied independently to each row: the row
    /// maximum is subtracted before exponentiation, so arbitrarily large
    /// logits cannot overflow. Each output row sums to 1.
    pub fn row_softmax(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Rows rescaled to unit Euclidean norm. Rows with norm below `1e-300`
    /// are left unchanged (they would otherwise become NaN); callers that
    /// feed all-constant features rely on this.
    pub fn l2_normalize_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        out
    }

    /// New matrix whose rows are `self`'s rows at `ids`, in order. Indices
    /// may repeat; each must be in range.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.cols);
        for (dst, &src) in ids.iter().enumerate() {
            if src >= self.rows {
                return Err(VppError::Shape(format!(
                    "row index {src} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        Ok(out)
    }

    /// Column sums as a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Largest absolute elementwise difference; panics on shape mismatch
    /// (this is a diagnostic helper, not a lattice operation).
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic RNG with named substreams.
///
/// Wraps ChaCha8 seeded through the standard splitmix64 expansion, which is
/// specified byte-for-byte and therefore reproduces the same draw sequence
/// on every platform and library version. Substreams are derived by mixing a
/// stream id into the root seed, so independent consumers (weight init,
/// per-frame noise, baselines) can be reseeded without coordinating draw
/// counts.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// splitmix64 finalizer; used for stream derivation and hash noise.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream `stream` of this generator's root seed. Derived
    /// streams depend only on `(seed, stream)`, never on how many draws have
    /// been consumed from `self`.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw clamped to `[1e-12, 1 - 1e-12]`, the domain on which
    /// `-ln(-ln(u))` stays finite.
    pub fn next_unit_clamped(&mut self) -> f64 {
        self.next_f64().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    }

    /// Standard normal draw via Box-Muller (cosine branch). Hand-rolled so
    /// the sequence is pinned by this crate rather than by a distribution
    /// library's sampling algorithm.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_unit_clamped();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`. Modulo bias is below 2^-53 for any `n`
    /// this crate uses (at most a few thousand).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.inner.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Matrix of i.i.d. normal draws scaled by `std`, filled row-major.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.next_normal() * std;
        }
        m
    }
}

/// A matrix of standard Gumbel draws `g = -ln(-ln(u))`.
///
/// Uniform inputs are clamped to `[1e-12, 1 - 1e-12]`, which bounds each
/// draw to roughly `[-3.4, 27.7]` and keeps every downstream logit finite.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    values: Matrix,
}

impl GumbelNoise {
    /// Samples a length-`n` noise vector (stored as a 1 x n matrix).
    pub fn sample(rng: &mut SeededRng, n: usize) -> GumbelNoise {
        GumbelNoise::sample_matrix(rng, 1, n)
    }

    /// Samples a `rows x cols` noise matrix, filled row-major.
    pub fn sample_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> GumbelNoise {
        let mut values = Matrix::zeros(rows, cols);
        for v in values.data_mut() {
            let u = rng.next_unit_clamped();
            *v = -(-u.ln()).ln();
        }
        GumbelNoise { values }
    }

    /// All-zero noise of the given shape; turns the relaxations into their
    /// deterministic (noise-free) counterparts.
    pub fn zeros(rows: usize, cols: usize) -> GumbelNoise {
        GumbelNoise { values: Matrix::zeros(rows, cols) }
    }

    pub fn from_matrix(values: Matrix) -> GumbelNoise {
        GumbelNoise { values }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Convenience wrapper matching the common call site: `n` i.i.d. standard
/// Gumbel draws from `rng`.
pub fn sample_gumbel(rng: &mut SeededRng, n: usize) -> GumbelNoise {
    GumbelNoise::sample(rng, n)
}
