//! Convergence factors, global-rate bounds, and the exact expected dynamics
//! of randomized Hessian estimation.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::metric::{generalized_eig_extremes, kappa_e, kappa_t, kappa_t_with, similar_product, PdMatrix};

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu <= 1.0 {
        Ok(())
    } else {
        Err(invalid("mu", "must lie in (0, 1]"))
    }
}

/// `1 − μ/(n·κ_T(LΣ, ML⁻¹))`: per-iteration decay bound of the expected gap
/// for fixed-metric pursuit on a function wedged between the quadratic
/// models `M` (below) and `L` (above).
///
/// The lower model enters through `λ_min(ML⁻¹)`, which makes the factor
/// invariant under a common rescaling of `L` and `M`. For `M = L` this is
/// `κ_T(LΣ, I)`.
pub fn rho_hat(l: &PdMatrix, sigma: &PdMatrix, m: &PdMatrix, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    Ok(1.0 - mu / (l.n() as f64 * kappa_lower(l, sigma, m)?))
}

fn kappa_lower(l: &PdMatrix, sigma: &PdMatrix, m: &PdMatrix) -> Result<f64> {
    check_dim(l.n(), m.n())?;
    let d = similar_product(l, sigma)?;
    // ML⁻¹ is similar to L⁻¹M
    let (lam, _) = generalized_eig_extremes(m, l)?;
    kappa_t_with(&d, lam)
}

/// `1 − μ/(n·κ_E(L, Σ, I, ∇f(x)))`: the gradient-dependent factor at one
/// iterate.
pub fn rho_exact(l: &PdMatrix, sigma: &PdMatrix, grad: &DVector<f64>, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    let id = PdMatrix::identity(l.n());
    let k = kappa_e(l, sigma, &id, grad)?;
    Ok(1.0 - mu / (l.n() as f64 * k))
}

/// `Q/(N+1)` with `Q = max{2nR²κ_T(LΣ)/μ, f(x₀) − f*}`: the sublinear bound
/// on the expected gap after `N` steps for merely convex functions.
pub fn bound_convex(r: f64, l: &PdMatrix, sigma: &PdMatrix, mu: f64, f0_gap: f64, iterations: u64) -> Result<f64> {
    check_mu(mu)?;
    if !(r > 0.0) {
        return Err(invalid("r", "must be positive"));
    }
    if !(f0_gap >= 0.0) {
        return Err(invalid("f0_gap", "must be non-negative"));
    }
    let n = l.n() as f64;
    let d = similar_product(l, sigma)?;
    let k = kappa_t(&d, &PdMatrix::identity(l.n()))?;
    let q = (2.0 * n * r * r * k / mu).max(f0_gap);
    Ok(q / (iterations as f64 + 1.0))
}

/// `1 − μ/(4n·κ_T(LΣ, ML⁻¹))`: decay factor when `M` only bounds the gap
/// from below at the minimizer instead of being a strong convexity model.
pub fn rho_relaxed(l: &PdMatrix, sigma: &PdMatrix, m: &PdMatrix, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    Ok(1.0 - mu / (4.0 * l.n() as f64 * kappa_lower(l, sigma, m)?))
}

/// Spectral data of the expected-error recurrence of the rank-one Hessian
/// update in dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RheSpectralConstants {
    pub n: usize,
    pub omega: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
}

/// Requires `n ≥ 2`: in one dimension a single update learns the Hessian.
pub fn rhe_constants(n: usize) -> Result<RheSpectralConstants> {
    if n < 2 {
        return Err(invalid("n", "the recurrence needs n >= 2"));
    }
    let nf = n as f64;
    let omega = (4.0 * nf * nf + 4.0 * nf - 7.0).sqrt();
    let base = 2.0 * nf * nf + 2.0 * nf - 5.0;
    let den = 2.0 * nf * (nf + 2.0);
    Ok(RheSpectralConstants {
        n,
        omega,
        lambda1: (base - omega) / den,
        lambda2: (base + omega) / den,
        eta: 1.0 / (nf * (nf + 2.0)),
    })
}

/// `C(n)`, mapping `(E‖X_k‖²_F, E Tr[X_k]²)` to the next iterate's pair.
pub fn recurrence_matrix(n: usize) -> Result<Matrix2<f64>> {
    let c = rhe_constants(n)?;
    let nf = n as f64;
    let e = c.eta;
    Ok(Matrix2::new(1.0 - 2.0 * e, -e, 2.0 * e, 1.0 - (2.0 * nf + 3.0) * e))
}

/// The three factors `P·diag(λ₁, λ₂)·Q` of the diagonalization of `C(n)`.
pub fn diagonalization_factors(n: usize) -> Result<(Matrix2<f64>, Matrix2<f64>, Matrix2<f64>)> {
    let c = rhe_constants(n)?;
    let w = c.omega;
    let k = 2.0 * n as f64 + 1.0;
    let p = Matrix2::new((k - w) / (4.0 * w), (k + w) / (4.0 * w), 1.0 / w, 1.0 / w);
    let d = Matrix2::new(c.lambda1, 0.0, 0.0, c.lambda2);
    let q = Matrix2::new(-2.0, (w + k) / 2.0, 2.0, (w - k) / 2.0);
    Ok((p, d, q))
}

/// The product of [`diagonalization_factors`]; equals `C(n)`.
pub fn diagonalization_product(n: usize) -> Result<Matrix2<f64>> {
    let (p, d, q) = diagonalization_factors(n)?;
    Ok(p * d * q)
}

/// Expected squared Frobenius error and squared trace error of `B − H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RheState {
    pub frob_sq: f64,
    pub trace_sq: f64,
}

impl RheState {
    pub fn new(frob_sq: f64, trace_sq: f64) -> Result<Self> {
        if !(frob_sq >= 0.0) || !(trace_sq >= 0.0) {
            return Err(invalid("state", "components must be non-negative"));
        }
        Ok(Self { frob_sq, trace_sq })
    }

    pub fn from_error(x: &nalgebra::DMatrix<f64>) -> Self {
        let t = x.trace();
        Self {
            frob_sq: x.norm_squared(),
            trace_sq: t * t,
        }
    }

    fn vector(self) -> Vector2<f64> {
        Vector2::new(self.frob_sq, self.trace_sq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RheExpectation {
    pub state: RheState,
    /// True when `λ₂^N` underflowed and the result is reported as zero.
    pub underflow: bool,
}

fn pow_logspace(lambda: f64, n_steps: u64) -> (f64, bool) {
    if n_steps == 0 {
        return (1.0, false);
    }
    let e = n_steps as f64 * lambda.ln();
    if e < f64::MIN_POSITIVE.ln() {
        (0.0, true)
    } else {
        (e.exp(), false)
    }
}

/// Closed-form `(E‖X_N‖²_F, E Tr[X_N]²)` after `N` rank-one updates along
/// directions drawn uniformly from the sphere.
pub fn rhe_exact_expectation(state0: RheState, n: usize, steps: u64) -> Result<RheExpectation> {
    let c = rhe_constants(n)?;
    let (p1, u1) = pow_logspace(c.lambda1, steps);
    let (p2, u2) = pow_logspace(c.lambda2, steps);
    let xi1 = p1 + p2;
    let xi2 = p1 - p2;
    let w = c.omega;
    let k = 2.0 * n as f64 + 1.0;
    let f0 = state0.frob_sq;
    let t0 = state0.trace_sq;
    let frob = xi1 * f0 / 2.0 - xi2 * (k * f0 / (2.0 * w) - t0 / w);
    let tr = xi1 * t0 / 2.0 - xi2 * (2.0 * f0 / w - k * t0 / (2.0 * w));
    Ok(RheExpectation {
        state: RheState {
            frob_sq: frob.max(0.0),
            trace_sq: tr.max(0.0),
        },
        underflow: u1 && u2,
    })
}

/// Applies `C(n)` `N` times; the reference the closed form is checked against.
pub fn rhe_recurrence_iterate(state0: RheState, n: usize, steps: u64) -> Result<RheState> {
    let c = recurrence_matrix(n)?;
    let mut v = state0.vector();
    for _ in 0..steps {
        v = c * v;
    }
    Ok(RheState {
        frob_sq: v[0],
        trace_sq: v[1],
    })
}

/// High-probability bound via Markov's inequality: with `j` chosen so that
/// `(1 − 2/(n(n+2)))^j = b`, returns `((1 − 2/(n(n+2)))^{N−j}·‖X₀‖²_F, 1 − b)`.
pub fn rhe_markov_bound(n: usize, steps: u64, b: f64, frob0: f64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(invalid("n", "the recurrence needs n >= 2"));
    }
    if !(b > 0.0 && b < 1.0) {
        return Err(invalid("b", "must lie in (0, 1)"));
    }
    let nf = n as f64;
    let rate = 1.0 - 2.0 / (nf * (nf + 2.0));
    let j = b.ln() / rate.ln();
    let bound = ((steps as f64 - j) * rate.ln()).exp() * frob0;
    Ok((bound, 1.0 - b))
}

/// Bound `(d + c)/(1 − c)` on `κ(H⁻¹B)` when `B` is within
/// `‖B − X‖_F ≤ a²c/b` of a matrix `X` with `κ(H⁻¹X) ≤ d`, all three
/// matrices having spectra in `[a, b]`.
pub fn kappa_propagation(a: f64, b: f64, c: f64, d: f64) -> Result<f64> {
    if !(a > 0.0 && a <= b) {
        return Err(invalid("a", "need 0 < a <= b"));
    }
    if !(0.0..1.0).contains(&c) {
        return Err(invalid("c", "need 0 <= c < 1"));
    }
    if !(d >= 1.0) {
        return Err(invalid("d", "need d >= 1"));
    }
    Ok((d + c) / (1.0 - c))
}
