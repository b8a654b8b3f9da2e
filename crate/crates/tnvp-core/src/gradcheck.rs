//! Numerical oracles: finite differences, numerical Jacobians, and an LU
//! log-determinant. These only ever call plain forward evaluations, never
//! the tape, so they can vouch for the analytic gradients and log-dets
//! independently.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function over a flat vector.
pub fn finite_diff_gradient<S: Scalar>(
    f: impl Fn(&[S]) -> Result<S>,
    x: &[S],
    step: S,
) -> Result<Vec<S>> {
    let two = S::from_f64_lossy(2.0);
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad.push((plus - minus) / (two * step));
    }
    Ok(grad)
}

/// Central-difference Jacobian of a vector map, shaped `[out_dim, in_dim]`.
pub fn numerical_jacobian<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x: &Tensor<S>,
    step: S,
) -> Result<Tensor<S>> {
    let two = S::from_f64_lossy(2.0);
    let n = x.len();
    let mut probe = x.clone();
    let mut columns: Vec<Vec<S>> = Vec::with_capacity(n);
    let mut out_dim = None;
    for j in 0..n {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = f(&probe)?;
        probe[j] = orig - step;
        let minus = f(&probe)?;
        probe[j] = orig;
        let col: Vec<S> = plus
            .data()
            .iter()
            .zip(minus.data())
            .map(|(&p, &m)| (p - m) / (two * step))
            .collect();
        match out_dim {
            None => out_dim = Some(col.len()),
            Some(m) if m != col.len() => {
                return Err(Error::invalid(
                    "map changed output dimension between probes",
                ))
            }
            _ => {}
        }
        columns.push(col);
    }
    let m = out_dim.unwrap_or(0);
    let mut data = vec![S::zero(); m * n];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    Tensor::from_shape_vec(vec![m, n], data)
}

/// Log of the absolute determinant of a square matrix, via LU with
/// partial pivoting. Returns `(log_abs_det, sign)` with sign in {-1, 1}.
pub fn log_abs_det_lu<S: Scalar>(matrix: &Tensor<S>) -> Result<(S, S)> {
    let n = match matrix.shape() {
        &[r, c] if r == c => r,
        other => {
            return Err(Error::invalid(format!(
                "log-det needs a square matrix, got shape {:?}",
                other
            )))
        }
    };
    let mut a = matrix.data().to_vec();
    let mut log_det = S::zero();
    let mut sign = S::one();
    for k in 0..n {
        // Partial pivot: largest |a[i][k]| for i >= k.
        let mut pivot_row = k;
        let mut pivot_abs = a[k * n + k].abs();
        for i in (k + 1)..n {
            let v = a[i * n + k].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = i;
            }
        }
        if pivot_abs == S::zero() {
            return Err(Error::invalid("singular matrix in log-det"));
        }
        if pivot_row != k {
            for j in 0..n {
                a.swap(k * n + j, pivot_row * n + j);
            }
            sign = -sign;
        }
        let pivot = a[k * n + k];
        if pivot < S::zero() {
            sign = -sign;
        }
        log_det += pivot.abs().ln();
        for i in (k + 1)..n {
            let factor = a[i * n + k] / pivot;
            a[i * n + k] = factor;
            for j in (k + 1)..n {
                a[i * n + j] = a[i * n + j] - factor * a[k * n + j];
            }
        }
    }
    Ok((log_det, sign))
}

/// Log-density of a multivariate normal with a general covariance, via a
/// fresh LU factorization and solve. Brute-force oracle for the
/// closed-form latent densities elsewhere in the crate, so it shares no
/// code with them (ln(2pi) included: it is recomputed here).
pub fn mvn_logpdf<S: Scalar>(x: &Tensor<S>, mean: &Tensor<S>, cov: &Tensor<S>) -> Result<S> {
    let d = x.len();
    if mean.len() != d {
        return Err(Error::ShapeMismatch {
            op: "mvn logpdf mean",
            left: x.shape().to_vec(),
            right: mean.shape().to_vec(),
        });
    }
    if cov.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "mvn logpdf covariance",
            left: vec![d, d],
            right: cov.shape().to_vec(),
        });
    }

    let r: Vec<S> = x
        .data()
        .iter()
        .zip(mean.data())
        .map(|(&a, &m)| a - m)
        .collect();

    // LU with partial pivoting; the rhs is permuted alongside, so the
    // forward substitution against L happens during elimination.
    let mut a = cov.data().to_vec();
    let mut b = r.clone();
    let mut log_det = S::zero();
    let mut sign = S::one();
    for k in 0..d {
        let mut pivot_row = k;
        let mut pivot_abs = a[k * d + k].abs();
        for i in (k + 1)..d {
            let v = a[i * d + k].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = i;
            }
        }
        if pivot_abs == S::zero() {
            return Err(Error::invalid("singular covariance in mvn logpdf"));
        }
        if pivot_row != k {
            for j in 0..d {
                a.swap(k * d + j, pivot_row * d + j);
            }
            b.swap(k, pivot_row);
            sign = -sign;
        }
        let pivot = a[k * d + k];
        if pivot < S::zero() {
            sign = -sign;
        }
        log_det += pivot.abs().ln();
        for i in (k + 1)..d {
            let factor = a[i * d + k] / pivot;
            for j in (k + 1)..d {
                a[i * d + j] = a[i * d + j] - factor * a[k * d + j];
            }
            b[i] = b[i] - factor * b[k];
        }
    }
    if sign < S::zero() {
        return Err(Error::invalid(
            "covariance with negative determinant in mvn logpdf",
        ));
    }

    // Back substitution: U y = b gives y = cov^-1 (x - mean).
    let mut y = vec![S::zero(); d];
    for i in (0..d).rev() {
        let mut s = b[i];
        for j in (i + 1)..d {
            s -= a[i * d + j] * y[j];
        }
        y[i] = s / a[i * d + i];
    }

    let mut quad = S::zero();
    for i in 0..d {
        quad += r[i] * y[i];
    }
    let half = S::from_f64_lossy(0.5);
    let ln_2pi = S::from_f64_lossy((2.0 * std::f64::consts::PI).ln());
    Ok(-half * S::from_f64_lossy(d as f64) * ln_2pi - half * log_det - half * quad)
}

/// Summary of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCompare {
    /// Largest relative error among compared entries.
    pub max_rel_err: f64,
    /// Index of the worst entry (0 when nothing was compared).
    pub worst_index: usize,
    /// How many entries cleared the magnitude floor and were compared.
    pub compared: usize,
}

/// Compare gradient vectors by relative error `|a - n| / max(|a|, |n|)`.
///
/// Entries where both magnitudes are at or below `floor` are skipped:
/// near-zero derivatives drown in finite-difference noise and carry no
/// signal about correctness.
pub fn compare_gradients<S: Scalar>(
    analytic: &[S],
    numeric: &[S],
    floor: S,
) -> Result<GradCompare> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(format!(
            "gradient lengths differ: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut out = GradCompare {
        max_rel_err: 0.0,
        worst_index: 0,
        compared: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = Float::max(a.abs(), n.abs());
        if scale <= floor {
            continue;
        }
        out.compared += 1;
        let rel = ((a - n).abs() / scale).to_f64_lossy();
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = i;
        }
    }
    Ok(out)
}
