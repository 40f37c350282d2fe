//! Symmetric and positive definite matrix algebra, quadratic norms and the
//! generalized condition factors that govern random pursuit.
//!
//! Products of positive definite matrices such as `AB` or `B⁻¹A` are never
//! eigensolved directly. Their spectra are read off the symmetric similar form
//! `A^{1/2} B A^{1/2}` (or the `B^{-1/2}`-conjugate), which is real and stable.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, invalid, Error, Result};

/// Relative pivot tolerance used by [`pd_check`] and [`rank1_pd_criterion`].
pub const PD_TOLERANCE: f64 = 1e-12;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Dense symmetric matrix. Symmetry is exact: the constructor averages the
/// input with its transpose after checking that it is already close.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    entries: DMatrix<f64>,
}

impl SymmetricMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self::symmetrized(m))
    }

    /// Builds `(m + mᵀ)/2` without checking how asymmetric `m` was.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self {
            entries: (m + t) * 0.5,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            entries: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
        }
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self {
            entries: DMatrix::identity(n, n) * s,
        }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.norm_squared()
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// `self + t·uuᵀ`.
    pub fn rank_one_update(&self, u: &DVector<f64>, t: f64) -> Self {
        let mut m = self.entries.clone();
        m.ger(t, u, u, 1.0);
        Self::symmetrized(m)
    }

    pub fn sub(&self, other: &SymmetricMatrix) -> Self {
        Self {
            entries: &self.entries - &other.entries,
        }
    }
}

/// Symmetric positive definite matrix with eagerly computed Cholesky factor
/// and inverse. Immutable after construction.
#[derive(Debug, Clone)]
pub struct PdMatrix {
    base: SymmetricMatrix,
    factor: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl PdMatrix {
    pub fn new(base: SymmetricMatrix) -> Result<Self> {
        if !pd_check(&base) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = nalgebra::Cholesky::new(base.entries.clone()).ok_or(Error::NotPositiveDefinite)?;
        let factor = chol.l();
        let inv = chol.inverse();
        let inv = (&inv + inv.transpose()) * 0.5;
        Ok(Self { base, factor, inv })
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        Self::new(SymmetricMatrix::new(m)?)
    }

    pub fn identity(n: usize) -> Self {
        Self::new(SymmetricMatrix::identity(n)).expect("identity is PD")
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(SymmetricMatrix::from_diagonal(d))
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn base(&self) -> &SymmetricMatrix {
        &self.base
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.base.entries
    }

    /// Lower-triangular `L` with `LLᵀ = self`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn inverse_pd(&self) -> PdMatrix {
        PdMatrix::new(SymmetricMatrix::symmetrized(self.inv.clone()))
            .expect("inverse of a PD matrix is PD")
    }

    /// Solves `self · w = y` through the cached factor.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let z = self
            .factor
            .solve_lower_triangular(y)
            .expect("Cholesky factor has positive diagonal");
        self.factor
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has positive diagonal")
    }

    pub fn trace(&self) -> f64 {
        self.base.trace()
    }

    /// Principal square root `A^{1/2}` via the symmetric eigendecomposition.
    pub fn sqrt(&self) -> DMatrix<f64> {
        spectral_map(&self.base.entries, f64::sqrt)
    }

    /// `A^{-1/2}` via the symmetric eigendecomposition.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        spectral_map(&self.base.entries, |l| 1.0 / l.sqrt())
    }
}

fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mapped = eig.eigenvalues.map(|l| f(l.max(0.0)));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&mapped) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// `xᵀAx`.
pub fn quad_norm_sq(x: &DVector<f64>, a: &SymmetricMatrix) -> Result<f64> {
    check_dim(a.n(), x.len())?;
    Ok(x.dot(&(a.as_matrix() * x)))
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn eig_extremes(a: &SymmetricMatrix) -> (f64, f64) {
    let ev = a.eigenvalues();
    (ev[0], ev[ev.len() - 1])
}

/// Symmetric matrix similar to `B⁻¹A`: `B^{-1/2} A B^{-1/2}`.
pub fn generalized_similar(a: &PdMatrix, b: &PdMatrix) -> Result<SymmetricMatrix> {
    check_dim(a.n(), b.n())?;
    let r = b.inv_sqrt();
    Ok(SymmetricMatrix::symmetrized(&r * a.as_matrix() * &r))
}

/// Extreme eigenvalues of `B⁻¹A`.
pub fn generalized_eig_extremes(a: &PdMatrix, b: &PdMatrix) -> Result<(f64, f64)> {
    Ok(eig_extremes(&generalized_similar(a, b)?))
}

/// Symmetric positive definite matrix similar to the product `AB`:
/// `A^{1/2} B A^{1/2}`. Trace and spectrum agree with those of `AB`.
pub fn similar_product(a: &PdMatrix, b: &PdMatrix) -> Result<PdMatrix> {
    check_dim(a.n(), b.n())?;
    let r = a.sqrt();
    PdMatrix::new(SymmetricMatrix::symmetrized(&r * b.as_matrix() * &r))
}

/// `Tr[AB]` without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// `σ_{A,B}(y) = ‖y‖²_{(ABA)⁻¹} / ‖y‖²_{A⁻¹}`.
///
/// Always lies in `(0, λ_min⁻¹(AB)]`.
pub fn sigma_factor(a: &PdMatrix, b: &PdMatrix, y: &DVector<f64>) -> Result<f64> {
    check_dim(a.n(), b.n())?;
    check_dim(a.n(), y.len())?;
    if y.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroVector);
    }
    // (ABA)⁻¹ = A⁻¹B⁻¹A⁻¹, so the numerator is wᵀB⁻¹w with w = A⁻¹y.
    let w = a.solve(y);
    let num = w.dot(&b.solve(&w));
    let den = y.dot(&w);
    Ok(num / den)
}

/// `κ_E(A,B,C,y) = (Tr[AB]·σ_{A,B}(y) + 2) / (λ_min(C)(n+2))`.
pub fn kappa_e(a: &PdMatrix, b: &PdMatrix, c: &PdMatrix, y: &DVector<f64>) -> Result<f64> {
    check_dim(a.n(), c.n())?;
    let sigma = sigma_factor(a, b, y)?;
    let n = a.n() as f64;
    let tr = trace_product(a.as_matrix(), b.as_matrix());
    let (cmin, _) = eig_extremes(c.base());
    Ok((tr * sigma + 2.0) / (cmin * (n + 2.0)))
}

/// `κ_T(D,C) = (Tr[D]·λ_min⁻¹(D) + 2) / (λ_min(C)(n+2))`.
///
/// When `D` stands for a product such as `LΣ`, pass its symmetric similar form
/// (see [`similar_product`]).
pub fn kappa_t(d: &PdMatrix, c: &PdMatrix) -> Result<f64> {
    check_dim(d.n(), c.n())?;
    let (cmin, _) = eig_extremes(c.base());
    kappa_t_with(d, cmin)
}

/// [`kappa_t`] with `λ_min(C)` supplied directly, for arguments like `ML⁻¹`
/// whose smallest eigenvalue comes from a generalized eigenproblem.
pub fn kappa_t_with(d: &PdMatrix, lambda_min_c: f64) -> Result<f64> {
    let (dmin, _) = eig_extremes(d.base());
    if dmin <= 0.0 || lambda_min_c <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let n = d.n() as f64;
    Ok((d.trace() / dmin + 2.0) / (lambda_min_c * (n + 2.0)))
}

/// Classical condition number `λ_max/λ_min` of `B⁻¹A`.
pub fn generalized_condition(a: &PdMatrix, b: &PdMatrix) -> Result<f64> {
    let (lo, hi) = generalized_eig_extremes(a, b)?;
    Ok(hi / lo)
}

/// True iff an LDLᵀ sweep finds strictly positive pivots, each above
/// `PD_TOLERANCE × max diagonal entry`.
pub fn pd_check(a: &SymmetricMatrix) -> bool {
    let n = a.n();
    if n == 0 {
        return false;
    }
    let m = a.as_matrix();
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return false;
    }
    let tol = PD_TOLERANCE * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut d = vec![0.0; n];
    for j in 0..n {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > tol) {
            return false;
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    true
}

/// Wedderburn's test for `B + t·uuᵀ` given `b_inv_quad = uᵀB⁻¹u`:
/// positive definite iff `1 + t·uᵀB⁻¹u > 0`.
pub fn rank1_pd_criterion(b_inv_quad: f64, t: f64) -> Result<bool> {
    if !(b_inv_quad > 0.0) {
        return Err(invalid("b_inv_quad", "must be positive (B must be PD)"));
    }
    Ok(1.0 + t * b_inv_quad > PD_TOLERANCE)
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn quad_norm_examples() {
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let a = SymmetricMatrix::from_diagonal(&[100.0, 1.0]);
        assert_eq!(quad_norm_sq(&x, &a).unwrap(), 101.0);
        let z = DVector::zeros(2);
        assert_eq!(quad_norm_sq(&z, &a).unwrap(), 0.0);
        let y = DVector::from_vec(vec![3.0, -4.0]);
        assert_eq!(quad_norm_sq(&y, &SymmetricMatrix::identity(2)).unwrap(), 25.0);
        assert!(matches!(
            quad_norm_sq(&DVector::zeros(3), &a),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn symmetric_constructor_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymmetricMatrix::new(m), Err(Error::NotSymmetric(_))));
        let s = SymmetricMatrix::symmetrized(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
        assert_eq!(s.as_matrix()[(0, 1)], s.as_matrix()[(1, 0)]);
    }

    #[test]
    fn eig_extremes_examples() {
        assert_eq!(eig_extremes(&SymmetricMatrix::identity(4)), (1.0, 1.0));
        let ell = 1000.0;
        let d: Vec<f64> = (0..10).map(|i| if i < 4 { ell } else { 1.0 }).collect();
        let (lo, hi) = eig_extremes(&SymmetricMatrix::from_diagonal(&d));
        assert!((lo - 1.0).abs() < 1e-12 && (hi - ell).abs() < 1e-9);
    }

    #[test]
    fn eig_extremes_matches_jacobi_oracle() {
        let mut r = rng();
        for _ in 0..20 {
            let a = random_pd(&mut r, 4, 0.1);
            let (lo, hi) = eig_extremes(a.base());
            let oracle = jacobi_eigenvalues(a.as_matrix());
            assert!((lo - oracle[0]).abs() < 1e-10 * hi);
            assert!((hi - oracle[3]).abs() < 1e-10 * hi);
            assert!(lo > 0.0);
        }
    }

    #[test]
    fn generalized_extremes_identities() {
        let mut r = rng();
        let a = random_pd(&mut r, 5, 0.5);
        let (lo, hi) = generalized_eig_extremes(&a, &a).unwrap();
        assert!((lo - 1.0).abs() < 1e-10 && (hi - 1.0).abs() < 1e-10);
        let (lo, hi) = generalized_eig_extremes(&a, &PdMatrix::identity(5)).unwrap();
        let (elo, ehi) = eig_extremes(a.base());
        assert!((lo - elo).abs() < 1e-10 * ehi && (hi - ehi).abs() < 1e-10 * ehi);
    }

    #[test]
    fn generalized_sandwich_holds() {
        let mut r = rng();
        let a = random_pd(&mut r, 4, 0.2);
        let b = random_pd(&mut r, 4, 0.2);
        let (lo, hi) = generalized_eig_extremes(&a, &b).unwrap();
        for _ in 0..100 {
            let x = random_vec(&mut r, 4);
            let xa = quad_norm_sq(&x, a.base()).unwrap();
            let xb = quad_norm_sq(&x, b.base()).unwrap();
            assert!(lo * xb <= xa * (1.0 + 1e-10));
            assert!(xa <= hi * xb * (1.0 + 1e-10));
        }
    }

    #[test]
    fn sigma_factor_examples() {
        let mut r = rng();
        let a = random_pd(&mut r, 3, 0.3);
        let y = random_vec(&mut r, 3);
        let s = sigma_factor(&a, &a.inverse_pd(), &y).unwrap();
        assert!((s - 1.0).abs() < 1e-10);
        let i = PdMatrix::identity(3);
        assert!((sigma_factor(&i, &i, &y).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(sigma_factor(&i, &i, &DVector::zeros(3)), Err(Error::ZeroVector));
    }

    #[test]
    fn sigma_factor_bounded_by_inverse_min_eig() {
        let mut r = rng();
        for _ in 0..50 {
            let a = random_pd(&mut r, 3, 0.2);
            let b = random_pd(&mut r, 3, 0.2);
            let y = random_vec(&mut r, 3);
            let s = sigma_factor(&a, &b, &y).unwrap();
            let (lmin, _) = eig_extremes(similar_product(&a, &b).unwrap().base());
            assert!(s > 0.0);
            assert!(s <= 1.0 / lmin + 1e-12 * (1.0 / lmin));
            // explicit norms with dense inverses
            let aba = a.as_matrix() * b.as_matrix() * a.as_matrix();
            let num = y.dot(&(aba.try_inverse().unwrap() * &y));
            let den = y.dot(&(a.as_matrix().clone().try_inverse().unwrap() * &y));
            assert!((s - num / den).abs() < 1e-9 * s);
        }
    }

    #[test]
    fn kappa_e_identity_is_one() {
        let i = PdMatrix::identity(6);
        let y = DVector::from_fn(6, |k, _| k as f64 + 1.0);
        assert!((kappa_e(&i, &i, &i, &y).unwrap() - 1.0).abs() < 1e-14);
        assert!(kappa_e(&i, &i, &i, &DVector::zeros(6)).is_err());
        assert!(kappa_e(&i, &i, &PdMatrix::identity(5), &y).is_err());
    }

    #[test]
    fn kappa_e_matches_hand_assembly() {
        let mut r = rng();
        let a = random_pd(&mut r, 3, 0.2);
        let b = random_pd(&mut r, 3, 0.2);
        let c = random_pd(&mut r, 3, 0.2);
        let y = random_vec(&mut r, 3);
        let ab = a.as_matrix() * b.as_matrix();
        let tr = ab.trace();
        let s = sigma_factor(&a, &b, &y).unwrap();
        let cmin = jacobi_eigenvalues(c.as_matrix())[0];
        let expect = (tr * s + 2.0) / (cmin * 5.0);
        assert!((kappa_e(&a, &b, &c, &y).unwrap() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn kappa_t_examples() {
        let i = PdMatrix::identity(7);
        assert!((kappa_t(&i, &i).unwrap() - 1.0).abs() < 1e-14);

        let (n, idx, ell) = (50usize, 25usize, 1000.0);
        let d: Vec<f64> = (0..n).map(|k| if k < idx { ell } else { 1.0 }).collect();
        let dm = PdMatrix::from_diagonal(&d).unwrap();
        let nk = n as f64 * kappa_t(&dm, &PdMatrix::identity(n)).unwrap();
        let expect = n as f64 * (idx as f64 * ell + (n - idx) as f64 + 2.0) / (n as f64 + 2.0);
        assert!((nk - expect).abs() < 1e-9 * expect);

        let mut r = rng();
        let a = random_pd(&mut r, 5, 0.1);
        let ev = jacobi_eigenvalues(a.as_matrix());
        let brute = (ev.iter().sum::<f64>() / ev[0] + 2.0) / 7.0;
        assert!((kappa_t(&a, &PdMatrix::identity(5)).unwrap() - brute).abs() < 1e-9 * brute);
    }

    #[test]
    fn kappa_chain_holds() {
        let mut r = rng();
        for n in [2usize, 3, 5, 8] {
            for _ in 0..100 {
                let a = random_pd(&mut r, n, 0.05);
                let b = random_pd(&mut r, n, 0.05);
                let c = random_pd(&mut r, n, 0.05);
                let y = random_vec(&mut r, n);
                let ke = kappa_e(&a, &b, &c, &y).unwrap();
                let ab = similar_product(&a, &b).unwrap();
                let kt = kappa_t(&ab, &c).unwrap();
                let (abmin, abmax) = eig_extremes(ab.base());
                let (cmin, _) = eig_extremes(c.base());
                let third = ab.trace() / abmin / (n as f64 * cmin);
                let fourth = abmax / abmin / cmin;
                let tol = 1e-10;
                assert!(ke > 0.0);
                assert!(ke <= kt * (1.0 + tol), "{ke} > {kt}");
                assert!(kt <= third * (1.0 + tol));
                assert!(third <= fourth * (1.0 + tol));
            }
        }
    }

    #[test]
    fn pd_check_examples() {
        assert!(pd_check(&SymmetricMatrix::identity(3)));
        assert!(!pd_check(&SymmetricMatrix::from_diagonal(&[1.0, -1.0])));
        assert!(!pd_check(&SymmetricMatrix::from_diagonal(&[1.0, 0.0])));
        let mut r = rng();
        let b = random_pd(&mut r, 4, 0.5);
        let mut u = random_vec(&mut r, 4);
        u.normalize_mut();
        let q = u.dot(&(b.inverse() * &u));
        let t = -0.9 / q;
        assert!(pd_check(&b.base().rank_one_update(&u, t)));
        let t = -1.1 / q;
        assert!(!pd_check(&b.base().rank_one_update(&u, t)));
    }

    #[test]
    fn rank1_criterion_examples() {
        assert!(rank1_pd_criterion(0.7, 0.0).unwrap());
        assert!(rank1_pd_criterion(0.7, 1e6).unwrap());
        assert!(rank1_pd_criterion(1.0, -0.5).unwrap());
        assert!(!rank1_pd_criterion(1.0, -1.0).unwrap());
        assert!(rank1_pd_criterion(0.0, 1.0).is_err());
        assert!(rank1_pd_criterion(-1.0, 1.0).is_err());
    }

    #[test]
    fn pd_matrix_caches_are_consistent() {
        let mut r = rng();
        let a = random_pd(&mut r, 6, 0.1);
        let recon = a.factor() * a.factor().transpose();
        let rel = (&recon - a.as_matrix()).norm() / a.as_matrix().norm();
        assert!(rel < 1e-10);
        let id = a.as_matrix() * a.inverse();
        assert!((id - DMatrix::identity(6, 6)).norm() < 1e-8);
        let s = a.sqrt();
        assert!((&s * &s - a.as_matrix()).norm() < 1e-9 * a.as_matrix().norm());
        assert!(PdMatrix::from_diagonal(&[1.0, -2.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn rank1_criterion_agrees_with_pd_check(seed in 0u64..10_000, t in -5.0f64..5.0) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let n = 1 + (seed % 6) as usize;
                let b = random_pd(&mut r, n, 0.3);
                let u = random_vec(&mut r, n);
                let q = u.dot(&(b.inverse() * &u));
                prop_assume!((1.0 + t * q).abs() > 1e-8);
                let crit = rank1_pd_criterion(q, t).unwrap();
                prop_assert_eq!(crit, pd_check(&b.base().rank_one_update(&u, t)));
            }

            #[test]
            fn euclidean_sandwich(seed in 0u64..10_000) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let n = 2 + (seed % 5) as usize;
                let a = random_pd(&mut r, n, 0.1);
                let x = random_vec(&mut r, n);
                let (lo, hi) = eig_extremes(a.base());
                let xa = quad_norm_sq(&x, a.base()).unwrap();
                let xx = x.norm_squared();
                prop_assert!(lo * xx <= xa * (1.0 + 1e-10));
                prop_assert!(xa <= hi * xx * (1.0 + 1e-10));
            }
        }
    }
}
