//! Dense linear-algebra helpers: induced norms, 1-norm condition estimates,
//! and the rank-one-deflated inverse used for the frequency sensitivity map.
//!
//! The sensitivity matrix `F` annihilates the all-ones vector by construction
//! (power injections are invariant under a uniform shift of all bus angles),
//! so its inverse only exists on the quotient space. `deflated_inverse`
//! returns the Moore-Penrose pseudo-inverse computed without an SVD by
//! exploiting the known right null vector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced 1-norm (max absolute column sum).
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition estimate from a matrix and its (approximate) inverse.
pub fn cond_1(m: &DMatrix<f64>, m_inv: &DMatrix<f64>) -> f64 {
    one_norm(m) * one_norm(m_inv)
}

/// Invert a square matrix by LU, reporting a condition estimate on failure.
pub fn invert(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or(Error::SingularMatrix {
        name,
        condition: f64::INFINITY,
        hint: None,
    })
}

/// Moore-Penrose pseudo-inverse of a matrix whose null space is exactly
/// `span(1)`, together with its left null vector.
///
/// Writing `P_r = I - 1 1^T / n` and `P_l = I - u u^T` with `u` the unit left
/// null vector, the pseudo-inverse is `P_r (F + beta 1 1^T / n)^{-1} P_l`.
/// All four Moore-Penrose identities hold to rounding; see the unit tests.
pub struct DeflatedInverse {
    /// The pseudo-inverse.
    pub pinv: DMatrix<f64>,
    /// Unit left null vector of the original matrix.
    pub left_null: DVector<f64>,
    /// Rank-one shift used to make the bordered matrix invertible.
    pub beta: f64,
    /// 1-norm condition estimate of the bordered (gauge-fixed) matrix.
    pub condition: f64,
}

pub fn deflated_inverse(f: &DMatrix<f64>, name: &'static str) -> Result<DeflatedInverse> {
    let n = f.nrows();
    let beta = one_norm(f).max(f64::MIN_POSITIVE) / n as f64;
    let mut f_aug = f.clone();
    // F + beta/n * ones
    let shift = beta / n as f64;
    for v in f_aug.iter_mut() {
        *v += shift;
    }
    let f_aug_inv = f_aug.clone().try_inverse().ok_or(Error::SingularMatrix {
        name,
        condition: f64::INFINITY,
        hint: None,
    })?;
    let condition = cond_1(&f_aug, &f_aug_inv);

    // Left null vector of F: F_aug^{-T} 1, normalized. Since range(F^T) is
    // orthogonal to 1's projection onto null(F), the residual term vanishes
    // identically (see module docs).
    let ones = DVector::from_element(n, 1.0);
    let mut u: DVector<f64> = f_aug_inv.transpose() * &ones;
    let norm = u.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::SingularMatrix {
            name,
            condition,
            hint: None,
        });
    }
    u /= norm;

    // H = P_r * F_aug^{-1} * P_l, expanded to avoid forming projectors.
    let fi_u = &f_aug_inv * &u;
    let mut h = f_aug_inv;
    // subtract (F_aug^{-1} u) u^T
    for j in 0..n {
        let uj = u[j];
        for i in 0..n {
            h[(i, j)] -= fi_u[i] * uj;
        }
    }
    // subtract 1/n * 1 (1^T H)
    let col_means = DVector::from_fn(n, |j, _| h.column(j).sum() / n as f64);
    for j in 0..n {
        let cm = col_means[j];
        for i in 0..n {
            h[(i, j)] -= cm;
        }
    }

    Ok(DeflatedInverse {
        pinv: h,
        left_null: u,
        beta,
        condition,
    })
}

/// Factored form of the deflated inverse for computing `w^T = c^T F^+` rows
/// without building the full pseudo-inverse (used at subnetwork scale).
pub struct DeflatedSolver {
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    left_null: DVector<f64>,
    n: usize,
}

impl DeflatedSolver {
    pub fn new(f: &DMatrix<f64>, name: &'static str) -> Result<Self> {
        let n = f.nrows();
        let beta = one_norm(f).max(f64::MIN_POSITIVE) / n as f64;
        let shift = beta / n as f64;
        let mut f_aug_t = f.transpose();
        for v in f_aug_t.iter_mut() {
            *v += shift;
        }
        let lu_t = f_aug_t.lu();
        let ones = DVector::from_element(n, 1.0);
        let mut u = lu_t.solve(&ones).ok_or(Error::SingularMatrix {
            name,
            condition: f64::INFINITY,
            hint: None,
        })?;
        let norm = u.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::SingularMatrix {
                name,
                condition: f64::INFINITY,
                hint: None,
            });
        }
        u /= norm;
        Ok(Self {
            lu_t,
            left_null: u,
            n,
        })
    }

    /// Returns `w` with `w^T = c^T F^+`.
    pub fn row(&self, c: &DVector<f64>) -> DVector<f64> {
        let mean = c.sum() / self.n as f64;
        let pc = c.map(|x| x - mean);
        let z = self
            .lu_t
            .solve(&pc)
            .expect("factorization validated in constructor");
        let proj = self.left_null.dot(&z);
        z - &self.left_null * proj
    }
}

/// Deterministic pairwise tree reduction. The combine order depends only on
/// the element order, never on scheduling.
pub fn tree_reduce<T, F: Fn(T, T) -> T>(mut items: Vec<T>, combine: F) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_like(n: usize) -> DMatrix<f64> {
        // rows sum to zero, generic otherwise
        let mut m = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        for i in 0..n {
            let s: f64 = m.row(i).sum();
            m[(i, i)] -= s;
        }
        m
    }

    #[test]
    fn deflated_inverse_satisfies_moore_penrose() {
        let f = laplacian_like(9);
        let d = deflated_inverse(&f, "F").unwrap();
        let h = &d.pinv;
        let fh = &f * h;
        let hf = h * &f;
        // Moore-Penrose: F H F = F, H F H = H, (FH)^T = FH, (HF)^T = HF
        assert!(inf_norm(&(&fh * &f - &f)) < 1e-10 * inf_norm(&f));
        assert!(inf_norm(&(&hf * h - h)) < 1e-10 * inf_norm(h));
        assert!(inf_norm(&(fh.transpose() - &fh)) < 1e-11);
        assert!(inf_norm(&(hf.transpose() - &hf)) < 1e-11);
        // HF is exactly the centering projector
        let n = f.nrows();
        let pr = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        assert!(inf_norm(&(hf - pr)) < 1e-11);
    }

    #[test]
    fn deflated_solver_matches_full_pinv_rows() {
        let f = laplacian_like(12);
        let d = deflated_inverse(&f, "F").unwrap();
        let solver = DeflatedSolver::new(&f, "F").unwrap();
        let c = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let w_full = d.pinv.transpose() * &c;
        let w_fast = solver.row(&c);
        assert!((w_full - w_fast).amax() < 1e-11);
    }

    #[test]
    fn tree_reduce_is_order_deterministic() {
        let v: Vec<f64> = (0..17).map(|i| (i as f64).exp() / 1e3).collect();
        let a = tree_reduce(v.clone(), |x, y| x + y).unwrap();
        let b = tree_reduce(v, |x, y| x + y).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
