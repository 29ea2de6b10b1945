use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Real, Tensor};

/// `[rows, cols]` matrix with orthonormal columns (tall) or rows (wide),
/// from the QR factorization of a standard-normal draw. Columns of `Q` are
/// sign-corrected by `sign(diag(R))` so the result is a deterministic
/// function of the draw.
pub fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let (tall_rows, tall_cols) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let draw: Vec<f64> = (0..tall_rows * tall_cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let a = DMatrix::from_row_slice(tall_rows, tall_cols, &draw);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(if rows >= cols { q[(i, j)] } else { q[(j, i)] });
        }
    }
    out
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn orthogonal_tensor<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = orthogonal(rng, rows, cols).into_iter().map(T::from_f64_lossy).collect();
    Tensor::new(vec![rows, cols], data).expect("orthogonal dims")
}

/// Gate matrix with an orthogonal block on all but the last column and a
/// Glorot-uniform last column (the z-logit of boundary-producing layers).
pub fn gate_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, boundary: bool) -> Tensor<T> {
    if !boundary {
        return orthogonal_tensor(rng, rows, cols);
    }
    let block = orthogonal(rng, rows, cols - 1);
    let bound = glorot_bound(rows, 1);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        data.extend(block[i * (cols - 1)..(i + 1) * (cols - 1)].iter().map(|&v| T::from_f64_lossy(v)));
        data.push(T::from_f64_lossy(rng.random_range(-bound..=bound)));
    }
    Tensor::new(vec![rows, cols], data).expect("gate matrix dims")
}
