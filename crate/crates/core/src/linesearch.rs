//! Line-search oracles along a fixed direction.
//!
//! All oracles receive the cached value `f(x)` and only pay for new probes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::oracle::Objective;
use crate::sampling::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    /// Step `h`; the new point is `x + h·u`.
    pub step: f64,
    pub fes_used: u64,
    pub f_new: f64,
    pub accepted: bool,
    /// False when the bisection oracle ran out of budget before it could
    /// certify its relative accuracy.
    pub certified: bool,
}

/// Step-size state of the adaptive single-probe search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStepState {
    pub sigma: f64,
    pub target_p: f64,
    pub adapt_factor: f64,
}

impl Default for AdaptiveStepState {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            target_p: 0.27,
            adapt_factor: 1.0 / 3.0,
        }
    }
}

impl AdaptiveStepState {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", "must be positive and finite"));
        }
        if !(self.target_p > 0.0 && self.target_p < 1.0) {
            return Err(invalid("target_p", "must lie in (0, 1)"));
        }
        if !(self.adapt_factor > 0.0) {
            return Err(invalid("adapt_factor", "must be positive"));
        }
        Ok(())
    }
}

fn point(x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64> {
    x + u * t
}

/// Minimizer of the parabola through `f(x−u)`, `f(x)`, `f(x+u)`.
///
/// Exact for quadratics. With `confirm` the vertex is evaluated (one more
/// FES) and compared against the probes, which keeps the search monotone on
/// functions that are not quadratic; otherwise the model value is returned.
///
/// The model value depends on the cached `f(x)` with weight `1 − t²` at step
/// `t`, so carrying model values forward amplifies rounding error whenever
/// the vertex lies outside `[−√2, √2]`. Such vertices are always evaluated.
pub fn exact_quadratic(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    u: &DVector<f64>,
    confirm: bool,
) -> LineSearchResult {
    let fp = f.value(&point(x, u, 1.0));
    let fm = f.value(&point(x, u, -1.0));
    let denom = fp - 2.0 * fx + fm;
    let best_probe = || {
        if fp <= fm && fp < fx {
            (1.0, fp)
        } else if fm < fx {
            (-1.0, fm)
        } else {
            (0.0, fx)
        }
    };
    if !(denom > 0.0) || !denom.is_finite() {
        let (step, f_new) = best_probe();
        return LineSearchResult {
            step,
            fes_used: 2,
            f_new,
            accepted: true,
            certified: true,
        };
    }
    let slope = 0.5 * (fp - fm);
    let step = -slope / denom;
    let model = fx - 0.5 * slope * slope / denom;
    if !confirm && step.abs() <= std::f64::consts::SQRT_2 {
        return LineSearchResult {
            step,
            fes_used: 2,
            f_new: model.min(fx),
            accepted: true,
            certified: true,
        };
    }
    let fv = f.value(&point(x, u, step));
    let (mut best_step, mut best_f) = best_probe();
    if fv < best_f {
        best_step = step;
        best_f = fv;
    }
    LineSearchResult {
        step: best_step,
        fes_used: 3,
        f_new: best_f,
        accepted: true,
        certified: true,
    }
}

/// One-probe search with a self-adapting step length.
///
/// Probes `x + s·σ·u` with a random sign `s`, accepts iff the value drops,
/// and multiplies `σ` by `exp(a(1−p))` on success or `exp(−a·p)` on failure,
/// so `log σ` has zero drift exactly at success rate `p`.
pub fn adaptive_es(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    u: &DVector<f64>,
    state: &mut AdaptiveStepState,
    rng: &mut SeededRng,
) -> LineSearchResult {
    let s = rng.sign() * state.sigma;
    let fy = f.value(&point(x, u, s));
    let success = fy < fx;
    if success {
        state.sigma *= (state.adapt_factor * (1.0 - state.target_p)).exp();
    } else {
        state.sigma *= (-state.adapt_factor * state.target_p).exp();
    }
    state.sigma = state.sigma.max(f64::MIN_POSITIVE);
    if success {
        LineSearchResult {
            step: s,
            fes_used: 1,
            f_new: fy,
            accepted: true,
            certified: true,
        }
    } else {
        LineSearchResult {
            step: 0.0,
            fes_used: 1,
            f_new: fx,
            accepted: false,
            certified: true,
        }
    }
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Relative accuracy used when `μ = 1` is requested.
pub const MU_CAP: f64 = 1.0 - 1e-3;

/// Bracketing and golden-section search with a relative-accuracy certificate.
///
/// For a function convex along `u`, the bracket `a < b < c` with
/// `f(b) ≤ f(a), f(c)` yields the lower bound
/// `min(f(b) − s₂(b−a), f(b) + s₁(c−b))` on the line minimum, where `s₁`,
/// `s₂` are the secant slopes of the two halves. The search stops as soon as
/// `f(x) − f_best ≥ μ·(f(x) − lower bound)`.
pub fn bisection_relative(
    f: &mut dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    u: &DVector<f64>,
    mu: f64,
    max_fes: u64,
) -> Result<LineSearchResult> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(invalid("mu", "must lie in (0, 1]"));
    }
    if max_fes < 2 {
        return Err(invalid("max_fes", "needs at least two probes"));
    }
    let mu = mu.min(MU_CAP);
    let mut fes = 0u64;
    let mut eval = |t: f64, fes: &mut u64| {
        *fes += 1;
        f.value(&point(x, u, t))
    };
    let done = |step: f64, f_new: f64, fes: u64, certified: bool| LineSearchResult {
        step,
        fes_used: fes,
        f_new,
        accepted: true,
        certified,
    };

    // Bracket (a, b, c) with f(b) <= f(a), f(c).
    let f1 = eval(1.0, &mut fes);
    let (mut a, mut b, mut c, mut fa, mut fb, mut fc);
    if f1 < fx {
        (a, b, c, fa, fb) = (0.0, 1.0, 2.0, fx, f1);
        fc = eval(c, &mut fes);
        while fc < fb {
            if fes >= max_fes {
                return Ok(done(c, fc, fes, false));
            }
            (a, fa, b, fb) = (b, fb, c, fc);
            c *= 2.0;
            fc = eval(c, &mut fes);
        }
    } else {
        let fm1 = eval(-1.0, &mut fes);
        if fm1 < fx {
            (c, b, a, fc, fb) = (0.0, -1.0, -2.0, fx, fm1);
            fa = eval(a, &mut fes);
            while fa < fb {
                if fes >= max_fes {
                    return Ok(done(a, fa, fes, false));
                }
                (c, fc, b, fb) = (b, fb, a, fa);
                a *= 2.0;
                fa = eval(a, &mut fes);
            }
        } else {
            (a, b, c, fa, fb, fc) = (-1.0, 0.0, 1.0, fm1, fx, f1);
        }
    }

    loop {
        let s1 = (fb - fa) / (b - a);
        let s2 = (fc - fb) / (c - b);
        let lower = (fb - s2 * (b - a)).min(fb + s1 * (c - b));
        let gain = fx - fb;
        let possible = fx - lower;
        let resolved = possible <= 4.0 * f64::EPSILON * fx.abs().max(f64::MIN_POSITIVE)
            || (c - a) <= 1e-12 * (1.0 + b.abs());
        if gain >= mu * possible || resolved {
            return Ok(done(b, fb, fes, true));
        }
        if fes >= max_fes {
            return Ok(done(b, fb, fes, false));
        }
        let right = c - b > b - a;
        let t = if right {
            b + GOLDEN * (c - b)
        } else {
            b - GOLDEN * (b - a)
        };
        let ft = eval(t, &mut fes);
        if right {
            if ft < fb {
                (a, fa, b, fb) = (b, fb, t, ft);
            } else {
                (c, fc) = (t, ft);
            }
        } else if ft < fb {
            (c, fc, b, fb) = (b, fb, t, ft);
        } else {
            (a, fa) = (t, ft);
        }
    }
}

/// A line-search oracle with its per-trial state.
#[derive(Debug, Clone, PartialEq)]
pub enum LineSearch {
    Exact { confirm: bool },
    Es(AdaptiveStepState),
    Bisection { mu: f64, max_fes: u64 },
}

impl LineSearch {
    pub fn search(
        &mut self,
        f: &mut dyn Objective,
        x: &DVector<f64>,
        fx: f64,
        u: &DVector<f64>,
        rng: &mut SeededRng,
    ) -> Result<LineSearchResult> {
        match self {
            LineSearch::Exact { confirm } => Ok(exact_quadratic(f, x, fx, u, *confirm)),
            LineSearch::Es(state) => Ok(adaptive_es(f, x, fx, u, state, rng)),
            LineSearch::Bisection { mu, max_fes } => bisection_relative(f, x, fx, u, *mu, *max_fes),
        }
    }
}
