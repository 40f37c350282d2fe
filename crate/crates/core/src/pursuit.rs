//! Fixed-metric and variable-metric random pursuit drivers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::hessian::{HessianEstimate, UpdateScheme, Updater};
use crate::linesearch::LineSearch;
use crate::metric::PdMatrix;
use crate::oracle::Objective;
use crate::sampling::{sample_from_precision_tagged, sample_normalized, SeededRng};

/// Decades tracked for accuracy tables: gaps `10¹ … 10⁻⁸`.
pub const DECADES: std::ops::RangeInclusive<i32> = -8..=1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriteria {
    pub max_iterations: Option<u64>,
    pub max_fes: Option<u64>,
    pub target_gap: Option<f64>,
}

impl StopCriteria {
    /// Budget `200n²` FES and target gap `1e-8`.
    pub fn for_dimension(n: usize) -> Self {
        Self {
            max_iterations: None,
            max_fes: Some(200 * (n * n) as u64),
            target_gap: Some(1e-8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations.is_none() && self.max_fes.is_none() && self.target_gap.is_none() {
            return Err(invalid("stop", "at least one stop criterion must be set"));
        }
        if let Some(t) = self.target_gap {
            if !(t > 0.0) {
                return Err(invalid("target_gap", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Target,
    Budget,
    Iterations,
}

/// Which iterations are stored and which diagnostics they carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    /// Store every this many iterations (the start and the end are always stored).
    pub every: u64,
    /// Compute `κ(Σ·H)` / `κ(B⁻¹H)` at stored iterations when a Hessian is available.
    pub kappa: bool,
    /// Store the eigenvalues of the sampling covariance.
    pub spectrum: bool,
}

impl Default for Recording {
    fn default() -> Self {
        Self {
            every: 1,
            kappa: false,
            spectrum: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: u64,
    pub fes: u64,
    pub fval: f64,
    pub gap: Option<f64>,
    /// Condition number of the sampling covariance times the Hessian.
    pub kappa: Option<f64>,
    pub spectrum: Option<Vec<f64>>,
}

/// First iteration (and FES count) at which the gap fell to `10^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub iteration: u64,
    pub fes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub crossings: BTreeMap<i32, Crossing>,
    pub x_final: DVector<f64>,
    pub f_final: f64,
    pub iterations: u64,
    pub fes: u64,
    pub stop_reason: StopReason,
    pub rejected_updates: u64,
}

impl Trajectory {
    pub fn final_gap(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.gap)
    }
}

trait MetricSource {
    fn before_step(&mut self, f: &mut dyn Objective, x: &DVector<f64>, fx: f64, k: u64, rng: &mut SeededRng)
        -> Result<()>;
    fn direction(&mut self, rng: &mut SeededRng) -> Result<DVector<f64>>;
    /// Lower factor `C` with `CCᵀ` the current sampling covariance.
    fn covariance_factor(&self) -> DMatrix<f64>;
    fn rejected(&self) -> u64 {
        0
    }
}

struct FixedMetric {
    factor: DMatrix<f64>,
}

impl MetricSource for FixedMetric {
    fn before_step(&mut self, _: &mut dyn Objective, _: &DVector<f64>, _: f64, _: u64, _: &mut SeededRng) -> Result<()> {
        Ok(())
    }

    fn direction(&mut self, rng: &mut SeededRng) -> Result<DVector<f64>> {
        Ok(sample_normalized(&self.factor, rng)?.u)
    }

    fn covariance_factor(&self) -> DMatrix<f64> {
        self.factor.clone()
    }
}

struct VariableMetric {
    est: HessianEstimate,
    updater: Updater,
    interlaced: bool,
    factor: DMatrix<f64>,
}

impl VariableMetric {
    fn refresh(&mut self) -> Result<()> {
        self.factor = self.est.cholesky_factor()?;
        Ok(())
    }
}

impl MetricSource for VariableMetric {
    fn before_step(
        &mut self,
        f: &mut dyn Objective,
        x: &DVector<f64>,
        fx: f64,
        k: u64,
        rng: &mut SeededRng,
    ) -> Result<()> {
        if self.interlaced {
            let epoch = self.est.epoch();
            self.updater.step(f, x, fx, &mut self.est, k, rng)?;
            if self.est.epoch() != epoch {
                self.refresh()?;
            }
        }
        Ok(())
    }

    fn direction(&mut self, rng: &mut SeededRng) -> Result<DVector<f64>> {
        Ok(sample_from_precision_tagged(&self.factor, rng, self.est.epoch())?.u)
    }

    fn covariance_factor(&self) -> DMatrix<f64> {
        // B = LLᵀ  ⇒  B⁻¹ = L⁻ᵀL⁻¹, and L⁻ᵀ is a square-root factor of it
        let n = self.factor.nrows();
        self.factor
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .map(|li| li.transpose())
            .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN))
    }

    fn rejected(&self) -> u64 {
        self.updater.rejected()
    }
}

/// Condition number of `CᵀHC` (similar to `ΣH` for `Σ = CCᵀ`); `None` when
/// that matrix is not positive definite.
pub fn metric_condition(factor: &DMatrix<f64>, h: &DMatrix<f64>) -> Option<f64> {
    let m = factor.transpose() * h * factor;
    let m = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(m).eigenvalues;
    let lo = e.min();
    let hi = e.max();
    (lo > 0.0).then(|| hi / lo)
}

fn covariance_spectrum(factor: &DMatrix<f64>) -> Vec<f64> {
    let s = factor * factor.transpose();
    let mut e: Vec<f64> = SymmetricEigen::new((&s + s.transpose()) * 0.5).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn note_crossings(crossings: &mut BTreeMap<i32, Crossing>, gap: f64, iteration: u64, fes: u64) {
    for d in DECADES.rev() {
        if crossings.contains_key(&d) {
            continue;
        }
        if gap <= 10f64.powi(d) {
            crossings.insert(d, Crossing { iteration, fes });
        } else {
            break;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn drive(
    f: &mut dyn Objective,
    x0: &DVector<f64>,
    metric: &mut dyn MetricSource,
    ls: &mut LineSearch,
    stop: &StopCriteria,
    rec: &Recording,
    rng: &mut SeededRng,
    fes0: u64,
) -> Result<Trajectory> {
    stop.validate()?;
    if rec.every == 0 {
        return Err(invalid("record_every", "must be at least 1"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let f_star = f.optimum();
    let mut x = x0.clone();
    let mut fx = f.value(&x);
    let mut records = Vec::new();
    let mut crossings = BTreeMap::new();
    let mut k = 0u64;

    let snapshot = |f: &dyn Objective, metric: &dyn MetricSource, x: &DVector<f64>, fx: f64, k: u64| {
        let fes = f.evaluations() - fes0;
        let factor = (rec.kappa || rec.spectrum).then(|| metric.covariance_factor());
        let kappa = match (&factor, rec.kappa) {
            (Some(c), true) => f.hessian(x).and_then(|h| metric_condition(c, &h)),
            _ => None,
        };
        let spectrum = match (&factor, rec.spectrum) {
            (Some(c), true) => Some(covariance_spectrum(c)),
            _ => None,
        };
        TrajectoryRecord {
            iteration: k,
            fes,
            fval: fx,
            gap: f_star.map(|s| fx - s),
            kappa,
            spectrum,
        }
    };

    records.push(snapshot(f, metric, &x, fx, 0));
    if let Some(s) = f_star {
        note_crossings(&mut crossings, fx - s, 0, f.evaluations() - fes0);
    }

    let stop_reason = loop {
        let fes = f.evaluations() - fes0;
        if let (Some(t), Some(s)) = (stop.target_gap, f_star) {
            if fx - s <= t {
                break StopReason::Target;
            }
        }
        if stop.max_fes.is_some_and(|m| fes >= m) {
            break StopReason::Budget;
        }
        if stop.max_iterations.is_some_and(|m| k >= m) {
            break StopReason::Iterations;
        }
        k += 1;
        metric.before_step(f, &x, fx, k, rng)?;
        let u = metric.direction(rng)?;
        let r = ls.search(f, &x, fx, &u, rng)?;
        if r.accepted && r.step != 0.0 {
            x.axpy(r.step, &u, 1.0);
            fx = r.f_new;
        }
        if !fx.is_finite() {
            return Err(Error::NonFinite);
        }
        if let Some(s) = f_star {
            note_crossings(&mut crossings, fx - s, k, f.evaluations() - fes0);
        }
        if k.is_multiple_of(rec.every) {
            records.push(snapshot(f, metric, &x, fx, k));
        }
    };
    if records.last().map(|r| r.iteration) != Some(k) {
        records.push(snapshot(f, metric, &x, fx, k));
    }
    Ok(Trajectory {
        records,
        crossings,
        x_final: x,
        f_final: fx,
        iterations: k,
        fes: f.evaluations() - fes0,
        stop_reason,
        rejected_updates: metric.rejected(),
    })
}

/// Fixed-metric random pursuit: `x_k = x_{k−1} + h_k·u_k` with
/// `u_k ∼ N̄(0, Σ)` and `h_k` from the line search.
pub fn run_frp(
    f: &mut dyn Objective,
    x0: &DVector<f64>,
    sigma: &PdMatrix,
    ls: &mut LineSearch,
    stop: &StopCriteria,
    rec: &Recording,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    check_dim(f.dim(), x0.len())?;
    check_dim(f.dim(), sigma.n())?;
    let mut metric = FixedMetric {
        factor: sigma.factor().clone(),
    };
    let fes0 = f.evaluations();
    drive(f, x0, &mut metric, ls, stop, rec, rng, fes0)
}

/// Where the Hessian estimate is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum UpdateAt {
    /// One update at the current iterate before every search step.
    Interlaced,
    /// `updates` updates at `x₀`, then plain fixed-metric search with the
    /// resulting estimate.
    FixedPoint { updates: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrpOptions {
    pub scheme: UpdateScheme,
    /// Finite-difference step for curvature measurements.
    pub eps: f64,
    pub update_at: UpdateAt,
}

/// Variable-metric random pursuit: search directions `u_k ∼ N̄(0, B_k⁻¹)`
/// where `B_k` is a randomized estimate of the Hessian.
#[allow(clippy::too_many_arguments)]
pub fn run_vrp(
    f: &mut dyn Objective,
    x0: &DVector<f64>,
    b0: &PdMatrix,
    ls: &mut LineSearch,
    opts: &VrpOptions,
    stop: &StopCriteria,
    rec: &Recording,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    let n = f.dim();
    check_dim(n, x0.len())?;
    check_dim(n, b0.n())?;
    // setup evaluations are charged to the run like any other
    let fes0 = f.evaluations();
    let mut est = HessianEstimate::new(b0);
    let mut updater = Updater::new(opts.scheme, opts.eps, n)?;
    let interlaced = match opts.update_at {
        UpdateAt::Interlaced => true,
        UpdateAt::FixedPoint { updates } => {
            if updates > 0 {
                let fx = f.value(x0);
                for k in 1..=updates {
                    updater.step(f, x0, fx, &mut est, k, rng)?;
                }
            }
            false
        }
    };
    let factor = est.cholesky_factor()?;
    let mut metric = VariableMetric {
        est,
        updater,
        interlaced,
        factor,
    };
    drive(f, x0, &mut metric, ls, stop, rec, rng, fes0)
}
