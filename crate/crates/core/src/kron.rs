//! Kronecker-structured matrices `A = A_1 ⊗ … ⊗ A_D`.
//!
//! All identities are applied factor by factor:
//! `(⊗A_d)⁻¹ = ⊗A_d⁻¹`, `log|⊗A_d| = Σ_d c_d log|A_d|` with
//! `c_d = Π_{e≠d} n_e`, `tr((⊗A_d)(⊗B_d)) = Π_d tr(A_d B_d)`.
//! Factors are small (tens of rows), so plain O(n³) routines are used.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tt::KronFactor;

/// Largest relative asymmetry accepted by [`KroneckerMatrix::cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerMatrix {
    factors: Vec<DMatrix<f64>>,
}

impl KroneckerMatrix {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidInput("Kronecker product needs at least one factor".into()));
        }
        for (d, f) in factors.iter().enumerate() {
            if f.nrows() != f.ncols() || f.nrows() == 0 {
                return Err(Error::Shape(format!(
                    "factor {d} is {}x{}, expected a non-empty square matrix",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        Ok(KroneckerMatrix { factors })
    }

    pub fn identity(sizes: &[usize]) -> Result<Self> {
        KroneckerMatrix::new(sizes.iter().map(|&n| DMatrix::identity(n, n)).collect())
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<DMatrix<f64>> {
        self.factors
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// Side length `Π n_d` of the represented matrix (saturating).
    pub fn side(&self) -> usize {
        self.factors
            .iter()
            .fold(1usize, |acc, f| acc.saturating_mul(f.nrows()))
    }

    /// Per-factor Cholesky decomposition.
    pub fn cholesky(&self) -> Result<KroneckerChol> {
        let lower = self
            .factors
            .iter()
            .enumerate()
            .map(|(d, f)| cholesky_factor(f, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(KroneckerChol { lower })
    }

    /// `log|A|`, via Cholesky of every factor.
    pub fn log_det(&self) -> Result<f64> {
        Ok(self.cholesky()?.log_det())
    }

    /// `tr(A B) = Π_d tr(A_d B_d)`.
    pub fn trace_product(&self, other: &KroneckerMatrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(a, b)| trace_of_product(a, b))
            .product())
    }

    /// `wᵀ A w = Π_d w_dᵀ A_d w_d` for `w = w_1 ⊗ … ⊗ w_D`.
    pub fn rank1_quad_form(&self, w: &[KronFactor<'_>]) -> Result<f64> {
        if w.len() != self.factors.len() {
            return Err(Error::Shape(format!(
                "{} vectors for {} factors",
                w.len(),
                self.factors.len()
            )));
        }
        let mut prod = 1.0;
        for (d, (f, wd)) in self.factors.iter().zip(w).enumerate() {
            if wd.len != f.nrows() || wd.offset + wd.values.len() > wd.len {
                return Err(Error::Shape(format!(
                    "vector {d} has length {}, factor is {}x{}",
                    wd.len,
                    f.nrows(),
                    f.ncols()
                )));
            }
            prod *= window_quad_form(f, wd);
        }
        Ok(prod)
    }

    /// Dense materialization, refused above `cap` rows.
    pub fn to_dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        let side = self.side();
        if side > cap {
            return Err(Error::ResourceLimit { entries: side, cap });
        }
        Ok(self
            .factors
            .iter()
            .fold(DMatrix::from_element(1, 1, 1.0), |acc, f| acc.kronecker(f)))
    }

    fn check_same_shape(&self, other: &KroneckerMatrix) -> Result<()> {
        if self.sizes() != other.sizes() {
            return Err(Error::Shape(format!(
                "factor sizes {:?} vs {:?}",
                self.sizes(),
                other.sizes()
            )));
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factors, one per Kronecker factor.
#[derive(Clone, Debug, PartialEq)]
pub struct KroneckerChol {
    lower: Vec<DMatrix<f64>>,
}

impl KroneckerChol {
    /// Wraps already-triangular factors; diagonals must be strictly positive.
    pub fn from_lower(lower: Vec<DMatrix<f64>>) -> Result<Self> {
        for (d, l) in lower.iter().enumerate() {
            if l.nrows() != l.ncols() || l.nrows() == 0 {
                return Err(Error::Shape(format!("lower factor {d} is not square")));
            }
            for i in 0..l.nrows() {
                if !(l[(i, i)] > 0.0) {
                    return Err(Error::NotPositiveDefinite {
                        dim: d,
                        pivot: i,
                        value: l[(i, i)],
                    });
                }
                for j in i + 1..l.ncols() {
                    if l[(i, j)] != 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "lower factor {d} has a nonzero above the diagonal at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(KroneckerChol { lower })
    }

    pub fn lower_factors(&self) -> &[DMatrix<f64>] {
        &self.lower
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.lower.iter().map(|l| l.nrows()).collect()
    }

    /// `L_d L_dᵀ` per factor.
    pub fn to_matrix(&self) -> KroneckerMatrix {
        KroneckerMatrix {
            factors: self.lower.iter().map(|l| l * l.transpose()).collect(),
        }
    }

    pub fn log_det(&self) -> f64 {
        let sizes = self.sizes();
        self.lower
            .iter()
            .enumerate()
            .map(|(d, l)| {
                let per_factor: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
                multiplicity(&sizes, d) * per_factor
            })
            .sum()
    }

    /// Per-factor inverses through triangular solves.
    pub fn inverse(&self) -> KroneckerMatrix {
        KroneckerMatrix {
            factors: self.lower.iter().map(inverse_from_lower).collect(),
        }
    }
}

/// `c_d = Π_{e≠d} n_e` as a float (it can exceed `usize` for large grids).
pub fn multiplicity(sizes: &[usize], d: usize) -> f64 {
    sizes
        .iter()
        .enumerate()
        .filter(|&(e, _)| e != d)
        .map(|(_, &n)| n as f64)
        .product()
}

fn cholesky_factor(a: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "factor {dim} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                dim,
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L X = B` in place for lower-triangular `L`.
pub(crate) fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

/// Solves `Lᵀ X = B` in place for lower-triangular `L`.
pub(crate) fn solve_upper_t_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / l[(i, i)];
        }
    }
}

fn inverse_from_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = DMatrix::identity(n, n);
    solve_lower_in_place(l, &mut x);
    solve_upper_t_in_place(l, &mut x);
    // symmetrize away round-off
    let xt = x.transpose();
    (x + xt) * 0.5
}

fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// `wᵀ A w` for a windowed vector.
pub(crate) fn window_quad_form(a: &DMatrix<f64>, w: &KronFactor<'_>) -> f64 {
    let o = w.offset;
    let mut s = 0.0;
    for (p, &wp) in w.values.iter().enumerate() {
        if wp == 0.0 {
            continue;
        }
        for (q, &wq) in w.values.iter().enumerate() {
            s += wp * a[(o + p, o + q)] * wq;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn dense_log_det(m: &DMatrix<f64>) -> f64 {
        m.clone().cholesky().unwrap().ln_determinant()
    }

    #[test]
    fn cholesky_examples() {
        let id = KroneckerMatrix::identity(&[2, 3]).unwrap();
        let ch = id.cholesky().unwrap();
        assert_eq!(ch.lower_factors()[0], DMatrix::identity(2, 2));
        assert_eq!(ch.lower_factors()[1], DMatrix::identity(3, 3));

        let diag = KroneckerMatrix::new(vec![DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])]).unwrap();
        let chol = diag.cholesky().unwrap();
        let l = &chol.lower_factors()[0];
        assert_eq!(*l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]));

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(4, &mut r);
        let ch = KroneckerMatrix::new(vec![a.clone()]).unwrap().cholesky().unwrap();
        let l = &ch.lower_factors()[0];
        assert!((l * l.transpose() - &a).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn cholesky_names_offending_dimension() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let m = KroneckerMatrix::new(vec![DMatrix::identity(2, 2), bad]).unwrap();
        match m.cholesky() {
            Err(Error::NotPositiveDefinite { dim, .. }) => assert_eq!(dim, 1),
            other => panic!("expected decomposition error, got {other:?}"),
        }
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 2.0]);
        assert!(KroneckerMatrix::new(vec![asym]).unwrap().cholesky().is_err());
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(KroneckerMatrix::identity(&[3, 2]).unwrap().log_det().unwrap(), 0.0);
        let m = KroneckerMatrix::new(vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(3, 3)]).unwrap();
        assert!((m.log_det().unwrap() - 64f64.ln()).abs() < 1e-12);

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = KroneckerMatrix::new(vec![random_spd(3, &mut r), random_spd(2, &mut r)]).unwrap();
        let dense = dense_log_det(&m.to_dense(100).unwrap());
        assert!((m.log_det().unwrap() - dense).abs() < 1e-9);
    }

    #[test]
    fn trace_product_examples() {
        let id = KroneckerMatrix::identity(&[2, 2]).unwrap();
        assert_eq!(id.trace_product(&id).unwrap(), 4.0);

        let a = KroneckerMatrix::new(vec![
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::identity(2, 2),
        ])
        .unwrap();
        let b = KroneckerMatrix::new(vec![
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 4.0])),
            DMatrix::identity(2, 2),
        ])
        .unwrap();
        assert_eq!(a.trace_product(&b).unwrap(), 22.0);

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let rnd = |n, r: &mut ChaCha8Rng| DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let a = KroneckerMatrix::new(vec![rnd(4, &mut r), rnd(3, &mut r)]).unwrap();
        let b = KroneckerMatrix::new(vec![rnd(4, &mut r), rnd(3, &mut r)]).unwrap();
        let dense = (a.to_dense(100).unwrap() * b.to_dense(100).unwrap()).trace();
        assert!((a.trace_product(&b).unwrap() - dense).abs() < 1e-10 * dense.abs().max(1.0));
        assert!(matches!(
            a.trace_product(&KroneckerMatrix::identity(&[4, 2]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn inverse_examples() {
        let id = KroneckerMatrix::identity(&[2]).unwrap();
        assert_eq!(id.cholesky().unwrap().inverse().factors()[0], DMatrix::identity(2, 2));

        let d = KroneckerMatrix::new(vec![DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 4.0]))]).unwrap();
        let inv = d.cholesky().unwrap().inverse();
        assert!((inv.factors()[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv.factors()[0][(1, 1)] - 0.25).abs() < 1e-15);
        assert_eq!(inv.factors()[0][(0, 1)], 0.0);

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let a = random_spd(5, &mut r);
        let inv = KroneckerMatrix::new(vec![a.clone()]).unwrap().cholesky().unwrap().inverse();
        assert!((&a * &inv.factors()[0] - DMatrix::identity(5, 5)).amax() < 1e-9);
    }

    #[test]
    fn rank1_quad_form_examples() {
        let id = KroneckerMatrix::identity(&[3, 2]).unwrap();
        let e = [1.0];
        let w = [KronFactor::window(3, 1, &e), KronFactor::window(2, 0, &e)];
        assert_eq!(id.rank1_quad_form(&w).unwrap(), 1.0);

        let a = KroneckerMatrix::new(vec![
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::identity(2, 2),
        ])
        .unwrap();
        let w1 = [1.0, 1.0];
        let w2 = [1.0, 0.0];
        assert_eq!(a.rank1_quad_form(&[KronFactor::dense(&w1), KronFactor::dense(&w2)]).unwrap(), 3.0);

        let z = [0.0, 0.0];
        assert_eq!(a.rank1_quad_form(&[KronFactor::dense(&w1), KronFactor::dense(&z)]).unwrap(), 0.0);
    }

    #[test]
    fn log_det_of_inverse_cancels() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let m = KroneckerMatrix::new(vec![random_spd(4, &mut r), random_spd(3, &mut r), random_spd(2, &mut r)]).unwrap();
        let inv = m.cholesky().unwrap().inverse();
        assert!((m.log_det().unwrap() + inv.log_det().unwrap()).abs() < 1e-8);
    }

    #[test]
    fn from_lower_validates() {
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 2.0]);
        assert!(KroneckerChol::from_lower(vec![ok]).is_ok());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, -2.0]);
        assert!(KroneckerChol::from_lower(vec![neg]).is_err());
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 2.0]);
        assert!(KroneckerChol::from_lower(vec![upper]).is_err());
    }
}
