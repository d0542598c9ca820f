use serde::{Deserialize, Serialize};

use super::{LinalgError, Matrix, Result};
use crate::scalar::{dot, Scalar};

const MAX_JACOBI_SWEEPS: usize = 80;

/// Thin SVD restricted to the numerical rank: `m ≈ u · diag(σ) · vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult<T> {
    pub u: Matrix<T>,
    pub singular_values: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// Number of retained singular triplets.
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(σ) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.singular_values.iter().enumerate() {
                us[(r, c)] *= *s;
            }
        }
        us.matmul_t(&self.v).expect("consistent svd shapes")
    }
}

/// Householder QR of a tall matrix (`rows >= cols`): returns `(Q, R)` with
/// `Q` of shape `rows x cols` with orthonormal columns and `R` upper triangular.
pub fn qr_reduced<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "reduced QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<T> = (j..rows).map(|i| r[(i, j)]).collect();
        let alpha = dot(&v, &v).sqrt();
        if alpha == T::zero() {
            reflectors.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= T::zero() { T::one() } else { -T::one() };
        v[0] += sign * alpha;
        let vnorm = dot(&v, &v).sqrt();
        for x in &mut v {
            *x /= vnorm;
        }
        // R[j.., j..] -= 2 v (vᵀ R[j.., j..])
        for c in j..cols {
            let mut proj = T::zero();
            for (k, vk) in v.iter().enumerate() {
                proj += *vk * r[(j + k, c)];
            }
            proj += proj;
            for (k, vk) in v.iter().enumerate() {
                r[(j + k, c)] -= proj * *vk;
            }
        }
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{cols-1} applied to the leading identity columns.
    let mut q = Matrix::from_fn(rows, cols, |i, c| if i == c { T::one() } else { T::zero() });
    for j in (0..cols).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for c in 0..cols {
            let mut proj = T::zero();
            for (k, vk) in v.iter().enumerate() {
                proj += *vk * q[(j + k, c)];
            }
            proj += proj;
            for (k, vk) in v.iter().enumerate() {
                q[(j + k, c)] -= proj * *vk;
            }
        }
    }
    let r_square = Matrix::from_fn(cols, cols, |i, c| if i <= c { r[(i, c)] } else { T::zero() });
    Ok((q, r_square))
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix. Returns `(U, σ, V)` with
/// singular values sorted descending; `U` columns for zero singular values are zero.
fn jacobi_tall<T: Scalar>(m: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>) {
    let (rows, cols) = m.shape();
    // Columns stored contiguously.
    let mut work: Vec<Vec<T>> = (0..cols).map(|c| m.column(c)).collect();
    let mut vcols: Vec<Vec<T>> = (0..cols)
        .map(|c| (0..cols).map(|i| if i == c { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = work.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(usize, T)> = work.iter().map(|w| dot(w, w).sqrt()).enumerate().collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut u = Matrix::zeros(rows, cols);
    let mut v = Matrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (dst, &(src, s)) in order.iter().enumerate() {
        sigma.push(s);
        if s > T::zero() {
            for i in 0..rows {
                u[(i, dst)] = work[src][i] / s;
            }
        }
        for i in 0..cols {
            v[(i, dst)] = vcols[src][i];
        }
    }
    (u, sigma, v)
}

#[inline]
fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Thin SVD of any matrix: `(U: m x p, σ: p, V: n x p)` with `p = min(m, n)`.
pub fn thin_svd<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("svd input"));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose());
        Ok((v, s, u))
    }
}

/// Flips each singular pair so the largest-magnitude entry of the `v` column is positive.
fn canonicalize_signs<T: Scalar>(u: &mut Matrix<T>, v: &mut Matrix<T>) {
    for c in 0..v.cols() {
        let mut best = 0;
        for r in 1..v.rows() {
            if v[(r, c)].abs() > v[(best, c)].abs() {
                best = r;
            }
        }
        if v.rows() > 0 && v[(best, c)] < T::zero() {
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
        }
    }
}

/// SVD of the product `a · bᵀ` for tall factors `a, b` of shape `d x r`,
/// without forming the `d x d` product: reduced QR of both factors, then an
/// `r x r` SVD of `R_a R_bᵀ`. Keeps only the numerical rank.
pub fn low_rank_svd<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<SvdResult<T>> {
    if a.shape() != b.shape() {
        return Err(LinalgError::DimensionMismatch(format!(
            "factors {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(LinalgError::NonFinite("low-rank factors"));
    }
    let (d, r) = a.shape();
    let (qa, ra) = qr_reduced(a)?;
    let (qb, rb) = qr_reduced(b)?;
    let core = ra.matmul_t(&rb)?;
    let (uc, sigma, vc) = thin_svd(&core)?;
    let top = sigma.first().copied().unwrap_or(T::zero());
    let tol = top * T::of(d.max(r) as f64) * T::epsilon();
    let k = sigma.iter().take_while(|&&s| s > tol && s > T::zero()).count();
    let mut u = qa.matmul(&uc.leading_columns(k))?;
    let mut v = qb.matmul(&vc.leading_columns(k))?;
    canonicalize_signs(&mut u, &mut v);
    Ok(SvdResult {
        u,
        singular_values: sigma[..k].to_vec(),
        v,
    })
}

/// Projects the rows of `m` onto its top-`k` right singular vectors and
/// returns the scores (`U_k Σ_k`) together with the basis `V_k`.
pub fn svd_reduce_with_basis<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    let max = m.rows().min(m.cols());
    if k == 0 || k > max {
        return Err(LinalgError::KOutOfRange { k, max });
    }
    let (mut u, _sigma, v) = thin_svd(m)?;
    let mut basis = v.leading_columns(k);
    canonicalize_signs(&mut u, &mut basis);
    let scores = m.matmul(&basis)?;
    Ok((scores, basis))
}

/// Principal-component scores of the rows of `m` (uncentered): `T x k`.
pub fn svd_reduce<T: Scalar>(m: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
    svd_reduce_with_basis(m, k).map(|(s, _)| s)
}
