//! Shape-checked vector kernels used throughout the model.

use crate::error::{MgaError, Result};
use crate::numerics::matrix::{dot, norm2, Matrix, Real};

/// Norms at or below this threshold are treated as zero. A zero-norm vector
/// reaching these kernels indicates an upstream bug, so it is a hard error
/// rather than an epsilon-stabilized result.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let n = norm2(v);
    if n.as_f64() <= NORM_EPS {
        return Err(MgaError::NearZeroNorm {
            context: "l2_normalize".into(),
            row: None,
        });
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Temperature softmax with max-subtraction for numerical stability.
pub fn softmax<T: Real>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if temperature.as_f64() <= 0.0 {
        return Err(MgaError::NonPositiveTemperature(temperature.as_f64()));
    }
    Ok(softmax_unchecked(v, temperature))
}

pub(crate) fn softmax_unchecked<T: Real>(v: &[T], temperature: T) -> Vec<T> {
    let scaled: Vec<T> = v.iter().map(|&x| x * temperature).collect();
    let max = scaled
        .iter()
        .cloned()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise temperature softmax of a matrix; temperature is not validated.
pub(crate) fn softmax_rows_unchecked<T: Real>(m: &Matrix<T>, temperature: T) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..m.rows())
        .map(|i| softmax_unchecked(m.row(i), temperature))
        .collect();
    Matrix::from_rows(&rows)
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
pub fn cosine_matrix<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(MgaError::DimMismatch {
            context: "cosine_matrix".into(),
            expected: format!("rows of dimension {}", a.cols()),
            got: format!("rows of dimension {}", b.cols()),
        });
    }
    let norm_rows = |m: &Matrix<T>, which: &str| -> Result<Vec<T>> {
        (0..m.rows())
            .map(|i| {
                let n = norm2(m.row(i));
                if n.as_f64() <= NORM_EPS {
                    Err(MgaError::NearZeroNorm {
                        context: format!("cosine_matrix {}", which),
                        row: Some(i),
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = norm_rows(a, "lhs")?;
    let nb = norm_rows(b, "rhs")?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
        }
    }
    Ok(out)
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    let na = norm2(a);
    let nb = norm2(b);
    if na.as_f64() <= NORM_EPS || nb.as_f64() <= NORM_EPS {
        return Err(MgaError::NearZeroNorm {
            context: "cosine".into(),
            row: None,
        });
    }
    Ok(dot(a, b) / (na * nb))
}
