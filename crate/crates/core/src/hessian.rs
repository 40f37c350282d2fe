//! Randomized Hessian estimation: rank-one updates toward the true Hessian
//! along random directions, with positive-definiteness safeguards.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::metric::{pd_check, rank1_pd_criterion, PdMatrix, SymmetricMatrix, PD_TOLERANCE};
use crate::oracle::Objective;
use crate::sampling::{sample_isotropic, SeededRng};

/// Rank-one updates applied between refactorizations of the inverse.
pub const REFACTOR_EVERY: usize = 50;

/// Current Hessian estimate `B` and its maintained inverse.
#[derive(Debug, Clone)]
pub struct HessianEstimate {
    b: DMatrix<f64>,
    b_inv: DMatrix<f64>,
    epoch: u64,
    since_refactor: usize,
}

impl HessianEstimate {
    pub fn new(b0: &PdMatrix) -> Self {
        Self {
            b: b0.as_matrix().clone(),
            b_inv: b0.inverse().clone(),
            epoch: 0,
            since_refactor: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn b_inv(&self) -> &DMatrix<f64> {
        &self.b_inv
    }

    /// Number of accepted updates so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn quad(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.b * u))
    }

    pub fn inv_quad(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.b_inv * u))
    }

    /// `B` as a checked PD matrix (fresh factorization).
    pub fn to_pd(&self) -> Result<PdMatrix> {
        PdMatrix::from_matrix(self.b.clone())
    }

    /// Lower Cholesky factor of `B`.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        nalgebra::Cholesky::new(self.b.clone())
            .map(|c| c.l())
            .ok_or(Error::NotPositiveDefinite)
    }

    /// `‖B·B⁻¹ − I‖_F`
    pub fn inverse_drift(&self) -> f64 {
        (&self.b * &self.b_inv - DMatrix::identity(self.n(), self.n())).norm()
    }

    /// Apply `B ← B + t·uuᵀ` if the result stays positive definite.
    pub fn try_rank_one(&mut self, u: &DVector<f64>, t: f64) -> Result<bool> {
        let q = self.inv_quad(u);
        if !rank1_pd_criterion(q, t)? {
            return Ok(false);
        }
        self.b.ger(t, u, u, 1.0);
        self.b_inv = sherman_morrison_inverse(&self.b_inv, u, t)?;
        self.bump()?;
        Ok(true)
    }

    fn bump(&mut self) -> Result<()> {
        self.epoch += 1;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }

    /// Recompute the inverse from scratch.
    pub fn refactor(&mut self) -> Result<()> {
        self.b = SymmetricMatrix::symmetrized(self.b.clone()).into_matrix();
        self.b_inv = match nalgebra::Cholesky::new(self.b.clone()) {
            Some(c) => c.inverse(),
            None => self.b.clone().try_inverse().ok_or(Error::NotPositiveDefinite)?,
        };
        self.since_refactor = 0;
        Ok(())
    }

    fn replace(&mut self, b: DMatrix<f64>) -> Result<()> {
        self.b = b;
        self.epoch += 1;
        self.refactor()
    }
}

/// Central second difference `(f(x+εu) − 2f(x) + f(x−εu))/ε²`.
///
/// Uses the cached `fx`; costs two evaluations.
pub fn curvature_fd(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    u: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("eps", "must be positive and finite"));
    }
    let fp = f.value(&(x + u * eps));
    let fm = f.value(&(x - u * eps));
    let q = (fp - 2.0 * fx + fm) / (eps * eps);
    if q.is_finite() {
        Ok(q)
    } else {
        Err(Error::NonFinite)
    }
}

/// `B⁻¹ − t(B⁻¹u)(uᵀB⁻¹)/(1 + t·uᵀB⁻¹u)`, the inverse of `B + t·uuᵀ`.
pub fn sherman_morrison_inverse(b_inv: &DMatrix<f64>, u: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_dim(b_inv.nrows(), u.len())?;
    let w = b_inv * u;
    let denom = 1.0 + t * u.dot(&w);
    if denom <= PD_TOLERANCE {
        return Err(Error::SingularUpdate(denom));
    }
    let mut out = b_inv.clone();
    out.ger(-t / denom, &w, &w, 1.0);
    Ok(out)
}

/// Smallest eigenvalue of `a` and a unit eigenvector for it.
pub fn smallest_eigvec(a: &SymmetricMatrix) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(a.as_matrix().clone());
    let (idx, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, l)| if l < acc.1 { (i, l) } else { acc });
    let v = eig.eigenvectors.column(idx).normalize();
    (lambda, v)
}

/// The raw update `B₊ = B + (q − uᵀBu)·uuᵀ`, which makes `uᵀB₊u = q`.
///
/// No positive-definiteness guarantee. The inverse is updated by
/// Sherman–Morrison when the rank-one criterion holds, otherwise recomputed
/// as a general inverse (if one exists).
pub fn update_plain(est: &HessianEstimate, u: &DVector<f64>, q: f64) -> Result<HessianEstimate> {
    check_dim(est.n(), u.len())?;
    let t = q - est.quad(u);
    let mut out = est.clone();
    if t == 0.0 {
        return Ok(out);
    }
    out.b.ger(t, u, u, 1.0);
    let denom = 1.0 + t * est.inv_quad(u);
    if denom.abs() > 1e-8 {
        let w = &est.b_inv * u;
        out.b_inv.ger(-t / denom, &w, &w, 1.0);
        out.bump()?;
    } else {
        out.b_inv = out
            .b
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::from_element(est.n(), est.n(), f64::NAN));
        out.epoch += 1;
        out.since_refactor = 0;
    }
    Ok(out)
}

/// What one corrected update step did.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrOutcome {
    pub u: DVector<f64>,
    pub q_u: f64,
    /// Direction and curvature of the correction, when it ran.
    pub correction: Option<(DVector<f64>, f64)>,
    pub accepted: bool,
    pub fes_used: u64,
}

/// One positive-definite preserving update at `x`.
///
/// Draws `u ∼ N̄(0, I)` and measures its curvature. If `T = B + Δu·uuᵀ` is
/// PD it is taken. Otherwise the smallest eigenvector `v` of `T` is measured
/// too and `(B + Δv·vvᵀ) + Δu·uuᵀ` is taken, which is PD on quadratics. If
/// that is still not PD (possible off quadratics) `B` is kept.
pub fn update_corr(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    est: &mut HessianEstimate,
    eps: f64,
    rng: &mut SeededRng,
) -> Result<CorrOutcome> {
    let n = est.n();
    check_dim(n, x.len())?;
    let u = sample_isotropic(n, rng).u;
    let q_u = curvature_fd(f, x, fx, &u, eps)?;
    let du = q_u - est.quad(&u);
    if est.try_rank_one(&u, du)? {
        return Ok(CorrOutcome {
            u,
            q_u,
            correction: None,
            accepted: true,
            fes_used: 2,
        });
    }
    let mut t = est.b.clone();
    t.ger(du, &u, &u, 1.0);
    let t = SymmetricMatrix::symmetrized(t);
    let (lambda, v) = smallest_eigvec(&t);
    let q_v = curvature_fd(f, x, fx, &v, eps)?;
    let dv = q_v - lambda;
    let mut next = est.b.clone();
    next.ger(dv, &v, &v, 1.0);
    next.ger(du, &u, &u, 1.0);
    let next = SymmetricMatrix::symmetrized(next);
    let accepted = pd_check(&next);
    if accepted {
        est.replace(next.into_matrix())?;
    } else {
        log::debug!("rejected Hessian update: corrected estimate is not positive definite");
    }
    Ok(CorrOutcome {
        u,
        q_u,
        correction: Some((v, q_v)),
        accepted,
        fes_used: 4,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredCurvature {
    pub u: DVector<f64>,
    pub q: f64,
    pub stamp: u64,
}

/// Bounded store of measured curvature pairs; the oldest entry is evicted
/// when full.
#[derive(Debug, Clone)]
pub struct CurvatureStore {
    entries: VecDeque<StoredCurvature>,
    capacity: usize,
}

impl CurvatureStore {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("capacity", "must be at least 1"));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    /// Default capacity `2n²`.
    pub fn for_dimension(n: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity: (2 * n * n).max(1),
        }
    }

    pub fn push(&mut self, u: DVector<f64>, q: f64, stamp: u64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(StoredCurvature { u, q, stamp });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredCurvature> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&StoredCurvature> {
        self.entries.get(i)
    }
}

/// Result of [`update_store`].
#[derive(Debug, Clone, PartialEq)]
pub struct StoreOutcome {
    pub corr: CorrOutcome,
    pub reused: usize,
}

/// A corrected update that also records its curvature pairs, optionally
/// followed by `m` randomized passes re-applying every stored pair whose
/// rank-one update keeps `B` positive definite. Reuse costs no evaluations.
#[allow(clippy::too_many_arguments)]
pub fn update_store(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    est: &mut HessianEstimate,
    eps: f64,
    reuse: bool,
    m: usize,
    store: &mut CurvatureStore,
    stamp: u64,
    rng: &mut SeededRng,
) -> Result<StoreOutcome> {
    let corr = update_corr(f, x, fx, est, eps, rng)?;
    store.push(corr.u.clone(), corr.q_u, stamp);
    if let Some((v, q)) = &corr.correction {
        store.push(v.clone(), *q, stamp);
    }
    let reused = if reuse { reuse_passes(est, store, m, rng)? } else { 0 };
    Ok(StoreOutcome { corr, reused })
}

/// `m` passes over the store in random order; returns the number of
/// accepted updates.
pub fn reuse_passes(
    est: &mut HessianEstimate,
    store: &CurvatureStore,
    m: usize,
    rng: &mut SeededRng,
) -> Result<usize> {
    let mut applied = 0;
    for _ in 0..m {
        for i in rng.permutation(store.len()) {
            let s = &store.entries[i];
            let t = s.q - est.quad(&s.u);
            if t != 0.0 && est.try_rank_one(&s.u, t)? {
                applied += 1;
            }
        }
    }
    Ok(applied)
}

/// Which update the variable-metric driver applies each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UpdateScheme {
    /// Raw update, skipped whenever it would leave the PD cone.
    Plain,
    Corr,
    Store {
        reuse: bool,
        /// Reuse passes per reuse round.
        m: usize,
        /// Store capacity; `None` means `2n²`.
        capacity: Option<usize>,
        /// Reuse every this many iterations; `None` means `n`.
        every: Option<u64>,
        /// First iteration eligible for reuse; `None` means `n²`.
        start_after: Option<u64>,
    },
}

impl UpdateScheme {
    pub fn store_default() -> Self {
        UpdateScheme::Store {
            reuse: true,
            m: 10,
            capacity: None,
            every: None,
            start_after: None,
        }
    }
}

/// Default finite-difference step: exact for quadratics at any length, so
/// use 1 there and a small step otherwise.
pub fn default_eps(quadratic: bool) -> f64 {
    if quadratic {
        1.0
    } else {
        1e-6
    }
}

/// Per-trial state of an update scheme.
#[derive(Debug, Clone)]
pub struct Updater {
    scheme: UpdateScheme,
    eps: f64,
    store: Option<CurvatureStore>,
    rejected: u64,
}

impl Updater {
    pub fn new(scheme: UpdateScheme, eps: f64, n: usize) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("eps", "must be positive and finite"));
        }
        let store = match scheme {
            UpdateScheme::Store { capacity, .. } => Some(match capacity {
                Some(c) => CurvatureStore::new(c)?,
                None => CurvatureStore::for_dimension(n),
            }),
            _ => None,
        };
        Ok(Self {
            scheme,
            eps,
            store,
            rejected: 0,
        })
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn store(&self) -> Option<&CurvatureStore> {
        self.store.as_ref()
    }

    /// One update at `x` during iteration `k` (1-based); returns FES used.
    pub fn step(
        &mut self,
        f: &mut dyn Objective,
        x: &DVector<f64>,
        fx: f64,
        est: &mut HessianEstimate,
        k: u64,
        rng: &mut SeededRng,
    ) -> Result<u64> {
        let n = est.n() as u64;
        match self.scheme {
            UpdateScheme::Plain => {
                let u = sample_isotropic(est.n(), rng).u;
                let q = curvature_fd(f, x, fx, &u, self.eps)?;
                let t = q - est.quad(&u);
                if !est.try_rank_one(&u, t)? {
                    self.rejected += 1;
                    log::debug!("skipped plain update at iteration {k}: leaves PD cone");
                }
                Ok(2)
            }
            UpdateScheme::Corr => {
                let out = update_corr(f, x, fx, est, self.eps, rng)?;
                if !out.accepted {
                    self.rejected += 1;
                }
                Ok(out.fes_used)
            }
            UpdateScheme::Store {
                reuse,
                m,
                every,
                start_after,
                ..
            } => {
                let every = every.unwrap_or(n).max(1);
                let start = start_after.unwrap_or(n * n);
                let now = reuse && k > start && k.is_multiple_of(every);
                let store = self.store.as_mut().expect("store scheme owns a store");
                let out = update_store(f, x, fx, est, self.eps, now, m, store, k, rng)?;
                if !out.corr.accepted {
                    self.rejected += 1;
                }
                Ok(out.corr.fes_used)
            }
        }
    }
}
