//! Dense f64 vector/matrix arithmetic, activations and the seeded PRNG.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major
//! [`Matrix`] values. There is no broadcasting: every operation checks its
//! shapes and reports a [`ShapeError`] naming both sides on mismatch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Mismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op} requires a non-empty input")]
    Empty { op: &'static str },
}

fn mismatch(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> ShapeError {
    ShapeError::Mismatch {
        op,
        left: left.into(),
        right: right.into(),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(mismatch(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(mismatch(
                    "Matrix::from_rows",
                    format!("row 0 len {cols}"),
                    format!("row {i} len {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `W x` without bias.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        if x.len() != self.cols {
            return Err(mismatch(
                "matvec",
                format!("W {}x{}", self.rows, self.cols),
                format!("x len {}", x.len()),
            ));
        }
        Ok(self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|r| dot(r, x)).collect())
    }

    /// `out += Wᵀ y`. Used by every backward pass.
    pub fn add_transpose_matvec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), out);
        }
    }

    /// `self += scale · y xᵀ`.
    pub fn add_outer(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            let a = scale * yr;
            if a == 0.0 {
                continue;
            }
            axpy(a, x, self.row_mut(r));
        }
    }
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>, ShapeError> {
    if b.len() != w.rows() {
        return Err(mismatch(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("b len {}", b.len()),
        ));
    }
    let mut out = w.matvec(x)?;
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, ShapeError> {
    if v.is_empty() {
        return Err(ShapeError::Empty { op: "softmax" });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Logistic function in the branch form that never evaluates `exp` of a
/// large positive number.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn elementwise(act: Activation, v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| act.apply(x)).collect()
}

/// Deterministic generator: ChaCha8 keyed by a `u64` seed, with one
/// independent stream per label (FNV-1a hash of the label selects the
/// ChaCha stream id). The algorithm is part of the reproducibility
/// contract and must not change between releases.
pub type Rng = ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8-fnv1a-stream/v1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Stream for a label with an index suffix, e.g. the per-epoch shuffle.
pub fn rng_for_indexed(seed: u64, label: &str, index: u64) -> Rng {
    rng_for(seed, &format!("{label}#{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn affine_examples() {
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(affine(&id, &[3.0, 4.0], &[0.0, 0.0]).unwrap(), vec![3.0, 4.0]);
        let w = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(affine(&w, &[3.0, 4.0], &[5.0]).unwrap(), vec![16.0]);
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(affine(&z, &[7.0, 9.0], &[-2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let w = Matrix::zeros(2, 3);
        let err = affine(&w, &[1.0, 2.0], &[0.0, 0.0]).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("len 2"), "{err}");
        assert!(affine(&w, &[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (p, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - want).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn norm_and_activation_examples() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0; 3]), 0.0);
        assert_eq!(l2_norm(&[1.0; 4]), 2.0);
        assert_eq!(elementwise(Activation::Tanh, &[0.0]), vec![0.0]);
        assert_eq!(elementwise(Activation::Sigmoid, &[0.0]), vec![0.5]);
        let tiny = sigmoid(-710.0);
        assert!(tiny > 0.0 && tiny <= 1e-300, "{tiny}");
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn transpose_and_outer_helpers() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 2];
        w.add_transpose_matvec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, vec![-4.0, -4.0]);
        let mut m = Matrix::zeros(2, 2);
        m.add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(m.as_slice(), &[6.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn rng_streams_are_reproducible_and_label_split() {
        let a: Vec<u64> = (0..8).map({
            let mut r = rng_for(42, "init");
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = rng_for(42, "init");
            move |_| r.random()
        }).collect();
        let c: Vec<u64> = (0..8).map({
            let mut r = rng_for(42, "batches");
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.iter().all(|&p| p > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn affine_is_linear(
            w in small_vec(12),
            x in small_vec(4),
            y in small_vec(4),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let w = Matrix::from_vec(3, 4, w).unwrap();
            let zero = [0.0; 3];
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = affine(&w, &mix, &zero).unwrap();
            let fx = affine(&w, &x, &zero).unwrap();
            let fy = affine(&w, &y, &zero).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - (alpha * fx[i] + beta * fy[i])).abs() <= 1e-10);
            }
        }

        #[test]
        fn norm_is_absolutely_homogeneous(v in small_vec(6), c in -10.0f64..10.0) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            prop_assert!((l2_norm(&scaled) - c.abs() * l2_norm(&v)).abs() <= 1e-12);
        }
    }
}
