//! Zeroth-order function oracles with evaluation counting.

use nalgebra::{DMatrix, DVector};

/// A function the optimizers may only query by value.
///
/// Every call to [`Objective::value`] costs one function evaluation (FES).
/// The diagnostic accessors are never used to drive the search.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&mut self, x: &DVector<f64>) -> f64;

    /// Function evaluations consumed so far.
    fn evaluations(&self) -> u64;

    /// Known optimal value, if any.
    fn optimum(&self) -> Option<f64> {
        None
    }

    /// Analytic Hessian at `x` for diagnostics. Does not count as an evaluation.
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// True when the function is a quadratic, so that second differences
    /// are exact for every step length.
    fn is_quadratic(&self) -> bool {
        false
    }
}

/// Counting wrapper around a closure.
pub struct FnObjective<F> {
    n: usize,
    f: F,
    count: u64,
    optimum: Option<f64>,
    quadratic: bool,
}

impl<F: FnMut(&DVector<f64>) -> f64> FnObjective<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self {
            n,
            f,
            count: 0,
            optimum: None,
            quadratic: false,
        }
    }

    pub fn with_optimum(mut self, f_star: f64) -> Self {
        self.optimum = Some(f_star);
        self
    }

    pub fn quadratic(mut self) -> Self {
        self.quadratic = true;
        self
    }
}

impl<F: FnMut(&DVector<f64>) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.count += 1;
        (self.f)(x)
    }

    fn evaluations(&self) -> u64 {
        self.count
    }

    fn optimum(&self) -> Option<f64> {
        self.optimum
    }

    fn is_quadratic(&self) -> bool {
        self.quadratic
    }
}

/// `½ xᵀAx` with a counter; handy for tests and theory checks.
pub struct Quadratic {
    a: DMatrix<f64>,
    count: u64,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a, count: 0 }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.count += 1;
        0.5 * x.dot(&(&self.a * x))
    }

    fn evaluations(&self) -> u64 {
        self.count
    }

    fn optimum(&self) -> Option<f64> {
        Some(0.0)
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}
