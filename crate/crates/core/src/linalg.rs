//! Jacobi solvers for small dense matrices.
//!
//! Both solvers are deterministic: the same input always yields bit-identical
//! output, including eigenvector / singular vector signs.

use crate::error::{numeric_err, shape_err, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition. Returns eigenvalues ascending and the
/// eigenvectors as the columns of an `n×n` matrix.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first. Each eigenvector is signed
/// so that its largest-magnitude entry is positive (first such entry on ties).
pub fn sym_eig(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (rows, cols) = m.expect_matrix()?;
    if rows != cols {
        return Err(shape_err!("sym_eig needs a square matrix, got {rows}x{cols}"));
    }
    if !m.is_finite() {
        return Err(numeric_err!("sym_eig input is not finite"));
    }
    let n = rows;
    let src = m.data();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (src[i * n + j] + src[j * n + i]);
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off < 1e-300 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(numeric_err!("sym_eig did not converge in {MAX_SWEEPS} sweeps"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    for (dst, &src_col) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|k| v[k * n + src_col]).collect();
        let sign = sign_of_dominant(&col);
        for (k, x) in col.into_iter().enumerate() {
            vecs.set(k, dst, sign * x);
        }
    }
    Ok((values, vecs))
}

/// `+1` if the largest-magnitude entry (first one on near-ties) is non-negative.
pub(crate) fn sign_of_dominant(col: &[f64]) -> f64 {
    let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-12 * max.max(1e-300);
    let first = col.iter().find(|x| x.abs() >= max - tol).copied().unwrap_or(0.0);
    if first < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Thin singular value decomposition of an `m×n` matrix with `m ≥ n`,
/// via one-sided (Hestenes) Jacobi rotations.
///
/// Returns `(U: m×n, σ descending, Vᵀ: n×n)`.
pub fn svd_small(m: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (rows, cols) = m.expect_matrix()?;
    if rows < cols {
        let (u, s, vt) = svd_small(&m.transpose()?)?;
        return Ok((vt.transpose()?, s, u.transpose()?));
    }
    if !m.is_finite() {
        return Err(numeric_err!("svd input is not finite"));
    }
    let (mr, n) = (rows, cols);
    let mut u = m.data().to_vec();
    let mut v = Tensor::eye(n).into_data();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..mr {
                    let up = u[i * n + p];
                    let uq = u[i * n + q];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma.abs() < 1e-300 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..mr {
                    let up = u[i * n + p];
                    let uq = u[i * n + q];
                    u[i * n + p] = c * up - s * uq;
                    u[i * n + q] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[i * n + p];
                    let vq = v[i * n + q];
                    v[i * n + p] = c * vp - s * vq;
                    v[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(numeric_err!("svd did not converge in {MAX_SWEEPS} sweeps"));
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..mr).map(|i| u[i * n + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms[order[0]];

    let mut uo = Tensor::zeros(&[mr, n]);
    let mut vo = Tensor::zeros(&[n, n]);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s <= 1e-14 * smax || s < 1e-300 {
            sigma.push(0.0);
            missing.push(dst);
        } else {
            sigma.push(s);
            for i in 0..mr {
                uo.set(i, dst, u[i * n + j] / s);
            }
        }
        for i in 0..n {
            vo.set(i, dst, v[i * n + j]);
        }
    }
    complete_orthonormal(&mut uo, &missing);

    for j in 0..n {
        let col: Vec<f64> = (0..mr).map(|i| uo.at(i, j)).collect();
        if sign_of_dominant(&col) < 0.0 {
            for i in 0..mr {
                uo.set(i, j, -uo.at(i, j));
            }
            for i in 0..n {
                vo.set(i, j, -vo.at(i, j));
            }
        }
    }
    Ok((uo, sigma, vo.transpose()?))
}

/// Fill the listed columns of `u` with unit vectors orthogonal to all other
/// columns, by Gram-Schmidt over the standard basis.
fn complete_orthonormal(u: &mut Tensor, missing: &[usize]) {
    let (m, n) = (u.rows(), u.cols());
    let mut filled: Vec<usize> = (0..n).filter(|j| !missing.contains(j)).collect();
    for &col in missing {
        for e in 0..m {
            let mut cand: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            for _ in 0..2 {
                for &f in &filled {
                    let dot: f64 = (0..m).map(|i| cand[i] * u.at(i, f)).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= dot * u.at(i, f);
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, c) in cand.iter().enumerate() {
                    u.set(i, col, c / norm);
                }
                filled.push(col);
                break;
            }
        }
    }
}
