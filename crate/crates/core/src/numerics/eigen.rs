//! Symmetric eigensolver: Householder tridiagonalization and implicit QL.
//!
//! Output is sorted by descending eigenvalue. Each eigenvector is sign
//! normalized so that its largest-magnitude entry is nonnegative, and
//! eigenvectors inside a numerically degenerate cluster are ordered by
//! descending lexicographic order. Together this makes the decomposition a
//! deterministic function of the input matrix.

use std::cmp::Ordering;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Tolerance for accepting a matrix as symmetric, relative to `max(1, max|a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_QL_ITERATIONS: usize = 60;

#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Column `j` pairs with `values[j]`.
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }

    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.spectral_map(|l| l)
    }

    /// `V diag(f(values)) Vᵀ`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let scaled = Matrix::from_fn(n, n, |i, j| self.vectors[(i, j)] * f(self.values[j]));
        scaled.matmul_t(&self.vectors)
    }
}

/// Eigendecomposition of a symmetric matrix.
pub fn sym_eig(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput(
            "sym_eig input has non-finite entries".into(),
        ));
    }
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry().unwrap_or(0.0);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidInput(format!(
            "sym_eig needs a symmetric matrix; max |a_ij - a_ji| = {asym:e}"
        )));
    }

    let n = a.rows();
    let work = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let (values, vecs) = householder_ql(&work)?;
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut v = vecs.column(j);
            normalize_sign(&mut v);
            (values[j], v)
        })
        .collect();
    sort_pairs(&mut pairs);
    let mut sorted_values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    // Reordering inside a tie cluster may permute values that differ by
    // rounding only; keep the reported spectrum monotone.
    sorted_values.sort_by(|a, b| b.total_cmp(a));

    let mut vectors = Matrix::zeros(n, n);
    for (j, (_, v)) in pairs.iter().enumerate() {
        vectors.set_column(j, v);
    }
    Ok(EigenDecomposition {
        values: sorted_values,
        vectors,
    })
}

/// Householder reduction to tridiagonal form followed by implicit QL.
/// Returns unsorted eigenvalues and the matching eigenvector columns.
fn householder_ql(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let mut v = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;
    Ok((d, v))
}

fn tridiagonalize(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for x in d[..i].iter_mut() {
                *x /= scale;
                h += *x * *x;
            }
            let mut f = d[i - 1];
            let mut g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    // Accumulate the transformations.
    for i in 0..n - 1 {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn tridiagonal_ql(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > f64::EPSILON * tst1 {
            m += 1;
        }
        if m > l {
            let mut iterations = 0;
            loop {
                iterations += 1;
                if iterations > MAX_QL_ITERATIONS {
                    return Err(Error::Numerical(format!(
                        "QL eigensolver did not converge for eigenvalue {l} in {MAX_QL_ITERATIONS} iterations"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for x in d[l + 2..].iter_mut() {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let hk = v[(k, i + 1)];
                        let vk = v[(k, i)];
                        v[(k, i + 1)] = s * vk + c * hk;
                        v[(k, i)] = c * vk - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= f64::EPSILON * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Flips `v` so that its largest-magnitude entry is nonnegative. Entries
/// within 1e-12 of the maximum magnitude count as ties; the first wins.
pub fn normalize_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let lead = v
        .iter()
        .position(|x| x.abs() >= max - 1e-12 * max.max(1.0))
        .unwrap_or(0);
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn lexicographic_desc(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn sort_pairs(pairs: &mut [(f64, Vec<f64>)]) {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let scale = pairs.iter().fold(0.0_f64, |m, p| m.max(p.0.abs())).max(1.0);
    let tie = 1e-12 * scale;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= tie {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|a, b| lexicographic_desc(&a.1, &b.1));
        }
        start = end;
    }
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
pub fn sym_inverse(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    check_positive(&eig, "sym_inverse")?;
    Ok(eig.spectral_map(|l| 1.0 / l))
}

/// `A^{-1/2}` of a symmetric positive definite matrix.
pub fn sym_inv_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    check_positive(&eig, "sym_inv_sqrt")?;
    Ok(eig.spectral_map(|l| 1.0 / l.sqrt()))
}

fn check_positive(eig: &EigenDecomposition, context: &str) -> Result<()> {
    let min = eig.values.last().copied().unwrap_or(1.0);
    let max = eig.values.first().copied().unwrap_or(1.0).abs().max(f64::MIN_POSITIVE);
    if min <= max * 1e-15 {
        return Err(Error::Numerical(format!(
            "{context}: matrix is not positive definite (smallest eigenvalue {min:e})"
        )));
    }
    Ok(())
}
