//! Dense row-major matrices and the handful of vector kernels the crate needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// `‖self − other‖_F`.
    pub fn frobenius_distance(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Inner product with four interleaved accumulators, combined as
/// `(s0 + s1) + (s2 + s3)` plus the tail; the order is fixed so results are
/// reproducible across builds.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        s[0] += x[0] * y[0];
        s[1] += x[1] * y[1];
        s[2] += x[2] * y[2];
        s[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `y += alpha·x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nudges `v` (already close to unit length) until `dot(v, v)` evaluates to
/// exactly 1.0, so downstream `‖x‖ ≤ 1` and `‖x‖ ≥ 1` checks hold bit-exactly.
///
/// Returns false when `v` is zero or no representable correction was found.
pub fn snap_to_unit(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    // Corrections go on the smallest non-negligible coordinate: one ulp there
    // moves the squared norm by much less than one ulp of 1.0.
    let k = match v
        .iter()
        .enumerate()
        .filter(|(_, x)| x.abs() > 1e-3)
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .or_else(|| v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())))
    {
        Some((k, _)) => k,
        None => return false,
    };
    for _ in 0..4096 {
        let s = dot(v, v);
        if s == 1.0 {
            return true;
        }
        let step = next_toward(v[k], if (s > 1.0) == (v[k] > 0.0) { 0.0 } else { f64::INFINITY.copysign(v[k]) });
        if step == v[k] {
            return false;
        }
        v[k] = step;
    }
    false
}

fn next_toward(x: f64, target: f64) -> f64 {
    if x == target || x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let up = (target > x) == (x >= 0.0);
    let nb = if x == 0.0 {
        return if target > 0.0 { f64::from_bits(1) } else { -f64::from_bits(1) };
    } else if up {
        bits + 1
    } else {
        bits - 1
    };
    f64::from_bits(nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_reaches_exact_unit_norm() {
        let mut v = vec![0.3, -0.4, 0.5, 0.1234567];
        assert!(snap_to_unit(&mut v));
        assert_eq!(dot(&v, &v), 1.0);
        assert_eq!(norm(&v), 1.0);

        let mut w = vec![1.0, 1e-9];
        assert!(snap_to_unit(&mut w));
        assert_eq!(norm(&w), 1.0);

        assert!(!snap_to_unit(&mut [0.0, 0.0]));
    }

    #[test]
    fn next_toward_moves_one_ulp() {
        let x = 0.7f64;
        let up = next_toward(x, 1.0);
        let down = next_toward(x, 0.0);
        assert!(up > x && down < x);
        assert_eq!(next_toward(up, 0.0), x);
        assert_eq!(next_toward(-0.7, f64::NEG_INFINITY), -up);
    }

    #[test]
    fn frobenius_distance_matches_sub_norm() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, 2.0], vec![3.0, 6.0]]).unwrap();
        let d = a.sub(&b).unwrap().frobenius_norm();
        assert!((a.frobenius_distance(&b) - d).abs() < 1e-15);
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
