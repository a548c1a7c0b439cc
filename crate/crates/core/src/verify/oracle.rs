//! Matrix-exponential oracle for the filter flow under a constant control.
//!
//! On a face the unnormalized measure solves the linear equation
//! `d rho / dt = B rho`; normalizing its solution gives the filter. `B` has
//! nonnegative off-diagonal entries, so shifting it by `c I` gives a
//! nonnegative matrix whose exponential is summed without cancellation, and
//! the factor `e^{-ct}` disappears in the normalization.

use crate::filter::FilterError;
use crate::model::{Belief, ModelSpec};

type Mat = Vec<Vec<f64>>;

fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn norm1(a: &Mat) -> f64 {
    let n = a.len();
    (0..n).map(|j| (0..n).map(|i| a[i][j].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `exp(A)` for an entrywise nonnegative matrix by scaling and squaring
/// around a Taylor series.
pub fn expm_nonneg(a: &Mat) -> Mat {
    let n = a.len();
    let norm = norm1(a);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Mat = a.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
    let mut sum = identity(n);
    let mut term = identity(n);
    for k in 1..=40 {
        term = matmul(&term, &scaled);
        let inv = 1.0 / k as f64;
        term.iter_mut().flatten().for_each(|x| *x *= inv);
        let mut largest: f64 = 0.0;
        for (s, t) in sum.iter_mut().flatten().zip(term.iter().flatten()) {
            *s += t;
            largest = largest.max(*t);
        }
        if largest < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = matmul(&sum, &sum);
    }
    sum
}

/// Face block of `B_y^u`: `M[z][x] = lambda(x, u, z)` off the diagonal and
/// `-lambda(z, u)` on it.
pub fn face_generator(model: &ModelSpec, face: usize, u: usize) -> Mat {
    let states = model.face_states(face);
    states
        .iter()
        .map(|&z| {
            states
                .iter()
                .map(|&x| if x == z { -model.total_rate(z, u) } else { model.rate(x, u, z) })
                .collect()
        })
        .collect()
}

/// Filter belief after time `t` under the constant control `u`, computed as
/// `normalize(exp(t B) nu)`.
pub fn expm_flow_oracle(model: &ModelSpec, nu: &Belief, u: usize, t: f64) -> Result<Belief, FilterError> {
    if !(t >= 0.0) {
        return Err(FilterError::NegativeDuration(t));
    }
    if t == 0.0 {
        return Ok(nu.clone());
    }
    let face = nu.face();
    let states = model.face_states(face);
    let mut m = face_generator(model, face, u);
    let shift = states.iter().map(|&z| model.total_rate(z, u)).fold(0.0, f64::max);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += shift;
        row.iter_mut().for_each(|x| *x *= t);
    }
    let e = expm_nonneg(&m);
    let v: Vec<f64> = states.iter().map(|&x| nu.weights()[x]).collect();
    let rho: Vec<f64> = e.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
    let mass: f64 = rho.iter().sum();
    let mut weights = vec![0.0; model.n_states()];
    for (&x, r) in states.iter().zip(&rho) {
        weights[x] = r / mass;
    }
    Ok(Belief::new(model, face, weights)?)
}
