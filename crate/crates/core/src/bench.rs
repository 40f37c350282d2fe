//! Benchmark objectives, instance transformation and the multi-trial
//! experiment protocol.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config_error, invalid, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::hessian::{default_eps, UpdateScheme};
use crate::linesearch::{AdaptiveStepState, LineSearch};
use crate::metric::PdMatrix;
use crate::oracle::Objective;
use crate::pursuit::{run_frp, run_vrp, Recording, StopCriteria, StopReason, Trajectory, UpdateAt, VrpOptions};
use crate::sampling::{haar_rotation, SeededRng};

/// Benchmark families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Family {
    /// Diagonal quadratic with coefficients `e^{1 + (i−1)(ln ℓ − 1)/(n−1)}`.
    F1 { ell: f64 },
    /// Rosenbrock.
    F2,
    /// Two scales split evenly: `1` on the first `⌈n/2⌉` coordinates, `ℓ` on the rest.
    F3 { ell: f64 },
    /// `diag(1, ℓ/2, …, ℓ/2, ℓ)`.
    F4 { ell: f64 },
    /// `diag(ℓ·1_i, 1_{n−i})`.
    G { ell: f64, i: usize },
}

impl Family {
    pub fn is_quadratic(&self) -> bool {
        !matches!(self, Family::F2)
    }

    pub fn ell(&self) -> Option<f64> {
        match *self {
            Family::F1 { ell } | Family::F3 { ell } | Family::F4 { ell } | Family::G { ell, .. } => Some(ell),
            Family::F2 => None,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Family::F1 { ell } => format!("f1(ell={ell:e})"),
            Family::F2 => "f2".to_string(),
            Family::F3 { ell } => format!("f3(ell={ell:e})"),
            Family::F4 { ell } => format!("f4(ell={ell:e})"),
            Family::G { ell, i } => format!("g{i}(ell={ell:e})"),
        }
    }

    pub fn instance(&self, n: usize) -> Result<ObjectiveInstance> {
        match *self {
            Family::F1 { ell } => make_f1(n, ell),
            Family::F2 => make_f2(n),
            Family::F3 { ell } => make_f3(n, ell),
            Family::F4 { ell } => make_f4(n, ell),
            Family::G { ell, i } => make_gi(n, ell, i),
        }
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Diagonal(DVector<f64>),
    Rosenbrock,
}

/// A benchmark function `x ↦ f(R(x − x_s))` with an evaluation counter.
#[derive(Debug, Clone)]
pub struct ObjectiveInstance {
    family: Family,
    shape: Shape,
    n: usize,
    rotation: Option<DMatrix<f64>>,
    shift: DVector<f64>,
    count: u64,
    f_star: f64,
    x_star: DVector<f64>,
}

fn check_ell(ell: f64) -> Result<()> {
    if !(ell >= 1.0 && ell.is_finite()) {
        return Err(invalid("ell", format!("must be finite and at least 1, got {ell}")));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(invalid("n", "dimension must be at least 2"));
    }
    Ok(())
}

fn diagonal(family: Family, coef: Vec<f64>) -> ObjectiveInstance {
    let n = coef.len();
    ObjectiveInstance {
        family,
        shape: Shape::Diagonal(DVector::from_vec(coef)),
        n,
        rotation: None,
        shift: DVector::zeros(n),
        count: 0,
        f_star: 0.0,
        x_star: DVector::zeros(n),
    }
}

pub fn make_f1(n: usize, ell: f64) -> Result<ObjectiveInstance> {
    check_n(n)?;
    check_ell(ell)?;
    let step = (ell.ln() - 1.0) / (n - 1) as f64;
    let coef = (0..n).map(|i| (1.0 + i as f64 * step).exp()).collect();
    Ok(diagonal(Family::F1 { ell }, coef))
}

pub fn make_f2(n: usize) -> Result<ObjectiveInstance> {
    check_n(n)?;
    Ok(ObjectiveInstance {
        family: Family::F2,
        shape: Shape::Rosenbrock,
        n,
        rotation: None,
        shift: DVector::zeros(n),
        count: 0,
        f_star: 0.0,
        x_star: DVector::from_element(n, 1.0),
    })
}

pub fn make_f3(n: usize, ell: f64) -> Result<ObjectiveInstance> {
    check_n(n)?;
    check_ell(ell)?;
    let half = n.div_ceil(2);
    let coef = (0..n).map(|i| if i < half { 1.0 } else { ell }).collect();
    Ok(diagonal(Family::F3 { ell }, coef))
}

pub fn make_f4(n: usize, ell: f64) -> Result<ObjectiveInstance> {
    check_n(n)?;
    check_ell(ell)?;
    let coef = (0..n)
        .map(|i| match i {
            0 => 1.0,
            _ if i == n - 1 => ell,
            _ => ell / 2.0,
        })
        .collect();
    Ok(diagonal(Family::F4 { ell }, coef))
}

pub fn make_gi(n: usize, ell: f64, i: usize) -> Result<ObjectiveInstance> {
    check_n(n)?;
    check_ell(ell)?;
    if i == 0 || i >= n {
        return Err(invalid("i", format!("need 1 ≤ i < n = {n}, got {i}")));
    }
    let coef = (0..n).map(|j| if j < i { ell } else { 1.0 }).collect();
    Ok(diagonal(Family::G { ell, i }, coef))
}

fn rosenbrock(z: &DVector<f64>) -> f64 {
    (0..z.len() - 1)
        .map(|i| 100.0 * (z[i + 1] - z[i] * z[i]).powi(2) + (z[i] - 1.0).powi(2))
        .sum()
}

fn rosenbrock_gradient(z: &DVector<f64>) -> DVector<f64> {
    let n = z.len();
    let mut g = DVector::zeros(n);
    for i in 0..n - 1 {
        let r = z[i + 1] - z[i] * z[i];
        g[i] += -400.0 * z[i] * r + 2.0 * (z[i] - 1.0);
        g[i + 1] += 200.0 * r;
    }
    g
}

fn rosenbrock_hessian(z: &DVector<f64>) -> DMatrix<f64> {
    let n = z.len();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        h[(i, i)] += 1200.0 * z[i] * z[i] - 400.0 * z[i + 1] + 2.0;
        h[(i + 1, i + 1)] += 200.0;
        h[(i, i + 1)] -= 400.0 * z[i];
        h[(i + 1, i)] -= 400.0 * z[i];
    }
    h
}

impl ObjectiveInstance {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn is_transformed(&self) -> bool {
        self.rotation.is_some()
    }

    pub fn rotation(&self) -> Option<&DMatrix<f64>> {
        self.rotation.as_ref()
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    /// Diagonal Hessian coefficients in the untransformed frame.
    pub fn coefficients(&self) -> Option<&DVector<f64>> {
        match &self.shape {
            Shape::Diagonal(c) => Some(c),
            Shape::Rosenbrock => None,
        }
    }

    /// `λ_max / λ_min` of the Hessian for quadratic families.
    pub fn condition_number(&self) -> Option<f64> {
        self.coefficients().map(|c| c.max() / c.min())
    }

    fn inner(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.shift;
        match &self.rotation {
            Some(r) => r * d,
            None => d,
        }
    }

    fn outer_vector(&self, g: DVector<f64>) -> DVector<f64> {
        match &self.rotation {
            Some(r) => r.tr_mul(&g),
            None => g,
        }
    }

    /// Value without touching the evaluation counter. Tests and diagnostics only.
    pub fn peek(&self, x: &DVector<f64>) -> f64 {
        let z = self.inner(x);
        match &self.shape {
            Shape::Diagonal(c) => 0.5 * z.iter().zip(c.iter()).map(|(zi, ci)| ci * zi * zi).sum::<f64>(),
            Shape::Rosenbrock => rosenbrock(&z),
        }
    }

    /// `Rᵀ∇f(R(x − x_s))`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let z = self.inner(x);
        let g = match &self.shape {
            Shape::Diagonal(c) => z.component_mul(c),
            Shape::Rosenbrock => rosenbrock_gradient(&z),
        };
        self.outer_vector(g)
    }

    /// `Rᵀ∇²f(R(x − x_s))R`.
    pub fn hessian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let h = match &self.shape {
            Shape::Diagonal(c) => DMatrix::from_diagonal(c),
            Shape::Rosenbrock => rosenbrock_hessian(&self.inner(x)),
        };
        match &self.rotation {
            Some(r) => r.transpose() * h * r,
            None => h,
        }
    }

    /// Applies an explicit rotation and shift.
    pub fn transform_with(mut self, rotation: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if self.is_transformed() {
            return Err(Error::AlreadyTransformed);
        }
        crate::error::check_dim(self.n, rotation.nrows())?;
        crate::error::check_dim(self.n, rotation.ncols())?;
        crate::error::check_dim(self.n, shift.len())?;
        let orth = (rotation.transpose() * &rotation - DMatrix::identity(self.n, self.n)).amax();
        if orth > 1e-10 {
            return Err(invalid("rotation", format!("not orthogonal (deviation {orth:e})")));
        }
        self.x_star = rotation.tr_mul(&self.x_star) + &shift;
        self.rotation = Some(rotation);
        self.shift = shift;
        Ok(self)
    }

    /// Random instance: Haar rotation `R` and shift `x_s ∼ N(0, I)`.
    pub fn transform(self, rng: &mut SeededRng) -> Result<Self> {
        if self.is_transformed() {
            return Err(Error::AlreadyTransformed);
        }
        let r = haar_rotation(self.n, rng);
        let s = rng.normal_vector(self.n);
        self.transform_with(r, s)
    }

    /// Maps a point of the untransformed frame into instance coordinates.
    pub fn transform_point(&self, x0: &DVector<f64>) -> DVector<f64> {
        let y = match &self.rotation {
            Some(r) => r.tr_mul(x0),
            None => x0.clone(),
        };
        y + &self.shift
    }

    /// `1_n` for quadratics and `0_n` for Rosenbrock, in instance coordinates.
    pub fn canonical_start(&self) -> DVector<f64> {
        let v = if self.family.is_quadratic() { 1.0 } else { 0.0 };
        self.transform_point(&DVector::from_element(self.n, v))
    }

    /// `(1, …, 1, 1/√ℓ, …, 1/√ℓ)` with `⌈n/2⌉` leading ones, in instance
    /// coordinates. Puts the start on the learning phase directly for `f3`.
    pub fn preset_start(&self) -> Result<DVector<f64>> {
        let ell = self
            .family
            .ell()
            .ok_or_else(|| invalid("start", "the preset start needs a family with a scale ℓ"))?;
        let half = self.n.div_ceil(2);
        let x = DVector::from_fn(self.n, |i, _| if i < half { 1.0 } else { 1.0 / ell.sqrt() });
        Ok(self.transform_point(&x))
    }
}

impl Objective for ObjectiveInstance {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.count += 1;
        self.peek(x)
    }

    fn evaluations(&self) -> u64 {
        self.count
    }

    fn optimum(&self) -> Option<f64> {
        Some(self.f_star)
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.hessian_at(x))
    }

    fn is_quadratic(&self) -> bool {
        self.family.is_quadratic()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Frp,
    Vrp,
}

/// Initial covariance (F-RP) or initial Hessian estimate (V-RP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MatrixInit {
    Identity,
    Scaled { value: f64 },
    /// Whitespace separated rows, one per line.
    File { path: PathBuf },
}

impl MatrixInit {
    pub fn resolve(&self, n: usize) -> Result<PdMatrix> {
        match self {
            MatrixInit::Identity => Ok(PdMatrix::identity(n)),
            MatrixInit::Scaled { value } => {
                if !(*value > 0.0 && value.is_finite()) {
                    return Err(config_error("init", "scale must be positive and finite"));
                }
                PdMatrix::from_diagonal(&vec![*value; n])
            }
            MatrixInit::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                let m = parse_matrix(&text, n)?;
                PdMatrix::from_matrix(m).map_err(|e| config_error("init", format!("{}: {e}", path.display())))
            }
        }
    }
}

fn parse_matrix(text: &str, n: usize) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|e| config_error("init", format!("bad entry `{t}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(config_error("init", format!("expected a {n}×{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartPoint {
    #[default]
    Canonical,
    Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LineSearchSpec {
    /// `confirm = None` evaluates the vertex only on non-quadratic families.
    Exact { confirm: Option<bool> },
    Es {
        #[serde(default)]
        state: AdaptiveStepState,
    },
    Bisection { mu: f64, max_fes: u64 },
}

impl LineSearchSpec {
    pub fn build(&self, quadratic: bool) -> LineSearch {
        match *self {
            LineSearchSpec::Exact { confirm } => LineSearch::Exact {
                confirm: confirm.unwrap_or(!quadratic),
            },
            LineSearchSpec::Es { state } => LineSearch::Es(state),
            LineSearchSpec::Bisection { mu, max_fes } => LineSearch::Bisection { mu, max_fes },
        }
    }
}

/// Everything needed to reproduce a batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub function: Family,
    pub n: usize,
    pub algorithm: Algorithm,
    pub init: MatrixInit,
    pub start: StartPoint,
    pub linesearch: LineSearchSpec,
    pub update: UpdateScheme,
    pub update_at: UpdateAt,
    /// Finite-difference step; `None` picks 1 on quadratics and 1e-6 otherwise.
    pub eps: Option<f64>,
    pub budget_fes: Option<u64>,
    pub max_iterations: Option<u64>,
    pub target_gap: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Rotate and shift quadratic families.
    pub transform: bool,
    pub record: Recording,
}

impl ExperimentConfig {
    pub fn new(function: Family, n: usize) -> Self {
        let stop = StopCriteria::for_dimension(n);
        Self {
            function,
            n,
            algorithm: Algorithm::Vrp,
            init: MatrixInit::Identity,
            start: StartPoint::Canonical,
            linesearch: LineSearchSpec::Exact { confirm: None },
            update: UpdateScheme::store_default(),
            update_at: UpdateAt::Interlaced,
            eps: None,
            budget_fes: stop.max_fes,
            max_iterations: None,
            target_gap: stop.target_gap,
            trials: 31,
            seed: 1,
            transform: true,
            record: Recording::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(config_error("n", "dimension must be at least 2"));
        }
        if self.trials == 0 {
            return Err(config_error("trials", "need at least one trial"));
        }
        if let Some(ell) = self.function.ell() {
            if !(ell >= 1.0 && ell.is_finite()) {
                return Err(config_error("ell", format!("must be finite and at least 1, got {ell}")));
            }
        }
        if let Family::G { i, .. } = self.function {
            if i == 0 || i >= self.n {
                return Err(config_error("i", format!("need 1 ≤ i < n = {}, got {i}", self.n)));
            }
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config_error("eps", "must be positive and finite"));
            }
        }
        if self.budget_fes == Some(0) {
            return Err(config_error("budget_fes", "must be positive"));
        }
        if self.max_iterations == Some(0) {
            return Err(config_error("max_iterations", "must be positive"));
        }
        if let Some(t) = self.target_gap {
            if !(t > 0.0) {
                return Err(config_error("target_gap", "must be positive"));
            }
        }
        if self.budget_fes.is_none() && self.max_iterations.is_none() && self.target_gap.is_none() {
            return Err(config_error("budget_fes", "no stop criterion set"));
        }
        if self.record.every == 0 {
            return Err(config_error("record_every", "must be at least 1"));
        }
        match self.linesearch {
            LineSearchSpec::Es { state } => state.validate().map_err(|e| config_error("linesearch", e.to_string()))?,
            LineSearchSpec::Bisection { mu, max_fes } => {
                if !(mu > 0.0 && mu <= 1.0) {
                    return Err(config_error("mu", "must lie in (0, 1]"));
                }
                if max_fes < 3 {
                    return Err(config_error("max_fes", "bisection needs at least 3 evaluations"));
                }
            }
            LineSearchSpec::Exact { .. } => {}
        }
        if let UpdateScheme::Store { m, capacity, every, .. } = self.update {
            if m == 0 {
                return Err(config_error("m", "need at least one reuse pass"));
            }
            if capacity == Some(0) {
                return Err(config_error("capacity", "must be positive"));
            }
            if every == Some(0) {
                return Err(config_error("every", "must be positive"));
            }
        }
        if self.start == StartPoint::Preset && self.function.ell().is_none() {
            return Err(config_error("start", "the preset start needs a family with a scale ℓ"));
        }
        if let MatrixInit::Scaled { value } = self.init {
            if !(value > 0.0 && value.is_finite()) {
                return Err(config_error("init", "scale must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn stop(&self) -> StopCriteria {
        StopCriteria {
            max_iterations: self.max_iterations,
            max_fes: self.budget_fes,
            target_gap: self.target_gap,
        }
    }

    pub fn label(&self) -> String {
        let ls = match self.linesearch {
            LineSearchSpec::Exact { .. } => "exact".to_string(),
            LineSearchSpec::Es { .. } => "es".to_string(),
            LineSearchSpec::Bisection { mu, .. } => format!("bisection({mu})"),
        };
        match self.algorithm {
            Algorithm::Frp => format!("frp/{ls}"),
            Algorithm::Vrp => {
                let up = match self.update {
                    UpdateScheme::Plain => "plain",
                    UpdateScheme::Corr => "corr",
                    UpdateScheme::Store { .. } => "store",
                };
                format!("vrp-{up}/{ls}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_index: usize,
    pub seed: u64,
    /// FES at which the gap first fell to `10^d`, keyed by `d`.
    pub fes_to_accuracy: BTreeMap<i32, u64>,
    pub reached_target: bool,
    pub final_gap: f64,
    pub fes_used: u64,
    pub iterations: u64,
    pub stop_reason: StopReason,
    pub rejected_updates: u64,
    /// First iteration of the final fast phase, when one is detected.
    pub learning_phase_end: Option<u64>,
    /// Hardware dependent; never serialized.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub summary: TrialSummary,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialResult>,
}

/// One row of a decade table; FES values are divided by `n²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecadeRow {
    pub decade: i32,
    pub reached: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecadeTable {
    pub label: String,
    pub n: usize,
    pub trials: usize,
    pub rows: Vec<DecadeRow>,
}

/// Mean, minimum and maximum gap across trials at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub iteration: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    }
}

impl DecadeTable {
    pub fn from_summaries(label: impl Into<String>, n: usize, summaries: &[TrialSummary]) -> Self {
        let n2 = (n * n) as f64;
        let rows = crate::pursuit::DECADES
            .rev()
            .map(|d| {
                let mut v: Vec<f64> = summaries
                    .iter()
                    .filter_map(|s| s.fes_to_accuracy.get(&d))
                    .map(|&f| f as f64 / n2)
                    .collect();
                v.sort_by(f64::total_cmp);
                let any = !v.is_empty();
                DecadeRow {
                    decade: d,
                    reached: v.len(),
                    mean: any.then(|| v.iter().sum::<f64>() / v.len() as f64),
                    median: any.then(|| median(&v)),
                    min: v.first().copied(),
                    max: v.last().copied(),
                }
            })
            .collect();
        Self {
            label: label.into(),
            n,
            trials: summaries.len(),
            rows,
        }
    }
}

/// Gap at iteration `k`: the last record at or before `k`.
fn gap_at(t: &Trajectory, k: u64) -> Option<f64> {
    let i = t.records.partition_point(|r| r.iteration <= k);
    if i == 0 {
        return None;
    }
    t.records[i - 1].gap
}

/// First iteration of the final fast phase.
///
/// With `s(k)` the log₁₀-gap slope over the window `[k − w, k]` and `s_f` the
/// slope of the last window, this is the end of the last window whose slope
/// is shallower than `s_f / 2`. Returns `None` when the run is shorter than
/// two windows or never speeds up.
pub fn learning_phase_end(t: &Trajectory, window: u64) -> Option<u64> {
    let end = t.iterations;
    if window == 0 || end < 2 * window {
        return None;
    }
    let lg = |k: u64| gap_at(t, k).map(|g| g.max(f64::MIN_POSITIVE).log10());
    let slope = |k: u64| Some((lg(k)? - lg(k - window)?) / window as f64);
    let s_final = slope(end)?;
    if !(s_final < 0.0) {
        return None;
    }
    let mut last_slow = None;
    for r in t.records.iter().rev() {
        let k = r.iteration;
        if k < window {
            break;
        }
        if slope(k)? > 0.5 * s_final {
            last_slow = Some(k);
            break;
        }
    }
    Some(last_slow.unwrap_or(0))
}

impl Experiment {
    pub fn summaries(&self) -> Vec<TrialSummary> {
        self.trials.iter().map(|t| t.summary.clone()).collect()
    }

    pub fn decade_table(&self) -> DecadeTable {
        DecadeTable::from_summaries(
            format!("{} {}", self.config.function.label(), self.config.label()),
            self.config.n,
            &self.summaries(),
        )
    }

    /// Mean and min/max gap across trials at every stored iteration. Trials
    /// that stopped early hold their final value.
    pub fn plot_series(&self) -> Vec<PlotPoint> {
        let mut grid: Vec<u64> = self
            .trials
            .iter()
            .flat_map(|t| t.trajectory.records.iter().map(|r| r.iteration))
            .collect();
        grid.sort_unstable();
        grid.dedup();
        grid.into_iter()
            .filter_map(|k| {
                let gaps: Vec<f64> = self.trials.iter().filter_map(|t| gap_at(&t.trajectory, k)).collect();
                if gaps.len() != self.trials.len() {
                    return None;
                }
                Some(PlotPoint {
                    iteration: k,
                    mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
                    min: gaps.iter().copied().fold(f64::INFINITY, f64::min),
                    max: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
            })
            .collect()
    }
}

/// Runs one trial with its own random stream. The stream first draws the
/// instance transformation, then drives the search.
pub fn run_trial(config: &ExperimentConfig, index: usize) -> Result<TrialResult> {
    let mut rng = SeededRng::for_trial(config.seed, index);
    let seed = rng.seed();
    let mut inst = config.function.instance(config.n)?;
    if config.transform && config.function.is_quadratic() {
        inst = inst.transform(&mut rng)?;
    }
    let x0 = match config.start {
        StartPoint::Canonical => inst.canonical_start(),
        StartPoint::Preset => inst.preset_start()?,
    };
    let m0 = config.init.resolve(config.n)?;
    let mut ls = config.linesearch.build(inst.is_quadratic());
    let stop = config.stop();
    let started = Instant::now();
    let trajectory = match config.algorithm {
        Algorithm::Frp => run_frp(&mut inst, &x0, &m0, &mut ls, &stop, &config.record, &mut rng)?,
        Algorithm::Vrp => {
            let opts = VrpOptions {
                scheme: config.update,
                eps: config.eps.unwrap_or_else(|| default_eps(inst.is_quadratic())),
                update_at: config.update_at,
            };
            run_vrp(&mut inst, &x0, &m0, &mut ls, &opts, &stop, &config.record, &mut rng)?
        }
    };
    let wall_time = started.elapsed();
    debug_assert_eq!(trajectory.fes, inst.evaluations());
    let final_gap = trajectory.f_final - inst.f_star();
    let summary = TrialSummary {
        trial_index: index,
        seed,
        fes_to_accuracy: trajectory.crossings.iter().map(|(&d, c)| (d, c.fes)).collect(),
        reached_target: config.target_gap.is_some_and(|t| final_gap <= t),
        final_gap,
        fes_used: trajectory.fes,
        iterations: trajectory.iterations,
        stop_reason: trajectory.stop_reason,
        rejected_updates: trajectory.rejected_updates,
        learning_phase_end: learning_phase_end(&trajectory, 2 * config.n as u64),
        wall_time,
    };
    Ok(TrialResult { summary, trajectory })
}

/// Runs all trials (concurrently under [`Execution::Parallel`]) and returns
/// them in trial order.
pub fn run_experiment(config: &ExperimentConfig, exec: Execution) -> Result<Experiment> {
    config.validate()?;
    let trials = map_indexed(config.trials, exec, |i| run_trial(config, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Experiment {
        config: config.clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_gradient(f: &ObjectiveInstance, x: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            (f.peek(&p) - f.peek(&m)) / (2.0 * h)
        })
    }

    fn fd_hessian(f: &ObjectiveInstance, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let n = x.len();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut p = x.clone();
            let mut m = x.clone();
            p[j] += h;
            m[j] -= h;
            let col = (f.gradient(&p) - f.gradient(&m)) / (2.0 * h);
            out.set_column(j, &col);
        }
        out
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / (1.0 + b.amax())
    }

    #[test]
    fn f1_endpoints_and_degenerate_case() {
        let f = make_f1(6, 1e3).unwrap();
        let c = f.coefficients().unwrap();
        assert!((c[0] - 1f64.exp()).abs() < 1e-12);
        assert!((c[5] - 1e3).abs() < 1e-9);
        assert!((f.condition_number().unwrap() - 1e3 / 1f64.exp()).abs() < 1e-9);
        let e = make_f1(4, 1f64.exp()).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert!((e.peek(&x) - 0.5 * 1f64.exp() * x.norm_squared()).abs() < 1e-12);
        assert!(make_f1(1, 10.0).is_err());
    }

    #[test]
    fn f1_hessian_matches_gradient_differences() {
        let f = make_f1(7, 1e3).unwrap();
        let mut rng = SeededRng::new(4);
        let x = rng.normal_vector(7);
        let fd = fd_hessian(&f, &x, 1e-5);
        assert!((fd - f.hessian_at(&x)).amax() < 1e-6 * 1e3);
    }

    #[test]
    fn rosenbrock_reference_values() {
        let f = make_f2(6).unwrap();
        assert_eq!(f.peek(&DVector::from_element(6, 1.0)), 0.0);
        assert_eq!(f.peek(&DVector::zeros(6)), 5.0);
        let mut want = DVector::from_element(6, -2.0);
        want[5] = 0.0;
        assert_eq!(f.gradient(&DVector::zeros(6)), want);
        assert_eq!(f.x_star(), &DVector::from_element(6, 1.0));
    }

    #[test]
    fn quadratic_family_spectra() {
        let f4 = make_f4(4, 10.0).unwrap();
        assert_eq!(f4.coefficients().unwrap().as_slice(), &[1.0, 5.0, 5.0, 10.0]);
        for f in [make_f3(7, 1e4).unwrap(), make_f4(7, 1e4).unwrap()] {
            let c = f.coefficients().unwrap();
            assert_eq!(c.min(), 1.0);
            assert_eq!(c.max(), 1e4);
        }
        assert_eq!(make_f3(5, 9.0).unwrap().coefficients().unwrap().as_slice(), &[1.0, 1.0, 1.0, 9.0, 9.0]);
        let g = make_gi(5, 100.0, 2).unwrap();
        let mut e1 = DVector::zeros(5);
        e1[0] = 1.0;
        let mut en = DVector::zeros(5);
        en[4] = 1.0;
        assert_eq!(g.peek(&e1), 50.0);
        assert_eq!(g.peek(&en), 0.5);
        assert!(make_gi(5, 100.0, 0).is_err());
        assert!(make_gi(5, 100.0, 5).is_err());
    }

    #[test]
    fn identity_transform_changes_nothing() {
        let f = make_f3(5, 100.0).unwrap();
        let g = f.clone().transform_with(DMatrix::identity(5, 5), DVector::zeros(5)).unwrap();
        let mut rng = SeededRng::new(1);
        for _ in 0..10 {
            let x = rng.normal_vector(5);
            assert_eq!(f.peek(&x), g.peek(&x));
        }
    }

    #[test]
    fn double_transform_rejected() {
        let mut rng = SeededRng::new(1);
        let f = make_f1(4, 10.0).unwrap().transform(&mut rng).unwrap();
        assert_eq!(f.transform(&mut rng).unwrap_err(), Error::AlreadyTransformed);
    }

    #[test]
    fn value_queries_count_and_diagnostics_do_not() {
        let mut f = make_f2(3).unwrap();
        let x = DVector::zeros(3);
        f.value(&x);
        f.value(&x);
        let _ = f.gradient(&x);
        let _ = f.hessian(&x);
        let _ = f.peek(&x);
        assert_eq!(f.evaluations(), 2);
    }

    #[test]
    fn preset_start_requires_scale() {
        assert!(make_f2(4).unwrap().preset_start().is_err());
        let p = make_f3(5, 100.0).unwrap().preset_start().unwrap();
        assert_eq!(p.as_slice(), &[1.0, 1.0, 1.0, 0.1, 0.1]);
    }

    fn families() -> impl Strategy<Value = Family> {
        prop_oneof![
            (1.0f64..1e4).prop_map(|ell| Family::F1 { ell }),
            Just(Family::F2),
            (1.0f64..1e4).prop_map(|ell| Family::F3 { ell }),
            (1.0f64..1e4).prop_map(|ell| Family::F4 { ell }),
            (1.0f64..1e4).prop_map(|ell| Family::G { ell, i: 2 }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn transformed_optimum_and_derivatives(family in families(), n in 3usize..9, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let f = family.instance(n).unwrap().transform(&mut rng).unwrap();
            prop_assert!((f.peek(f.x_star()) - f.f_star()).abs() <= 1e-12 * (1.0 + f.x_star().norm_squared()));
            for _ in 0..10 {
                let x = f.x_star() + rng.normal_vector(n) * 0.5;
                let g = f.gradient(&x);
                prop_assert!(rel_err(&fd_gradient(&f, &x, 1e-6), &g) < 1e-5, "gradient");
                let h = f.hessian_at(&x);
                let fd = fd_hessian(&f, &x, 1e-6);
                prop_assert!((fd - &h).amax() / (1.0 + h.amax()) < 1e-5, "hessian");
            }
        }

        #[test]
        fn rotation_preserves_quadratic_spectrum(ell in 1.0f64..1e3, n in 2usize..8, seed in any::<u64>()) {
            let f = make_f4(n, ell).unwrap();
            let mut want: Vec<f64> = f.coefficients().unwrap().iter().copied().collect();
            want.sort_by(f64::total_cmp);
            let g = f.transform(&mut SeededRng::new(seed)).unwrap();
            let h = g.hessian_at(&DVector::zeros(n));
            let mut got: Vec<f64> = nalgebra::SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-9 * ell);
            }
        }
    }

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(Family::F3 { ell: 100.0 }, 4);
        c.trials = 3;
        c.seed = 11;
        c
    }

    #[test]
    fn experiment_is_deterministic_and_exact_on_fes() {
        let c = small_config();
        let a = run_experiment(&c, Execution::Parallel).unwrap();
        let b = run_experiment(&c, Execution::Sequential).unwrap();
        let strip = |e: &Experiment| {
            e.summaries()
                .into_iter()
                .map(|mut s| {
                    s.wall_time = Duration::ZERO;
                    s
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        for t in &a.trials {
            assert!(t.summary.reached_target);
            assert_eq!(t.summary.fes_used, t.trajectory.records.last().unwrap().fes);
            let fes: Vec<u64> = t.summary.fes_to_accuracy.values().copied().collect();
            // keys ascend from 10⁻⁸ to 10¹, FES descends
            assert!(fes.windows(2).all(|w| w[0] >= w[1]));
        }
        let table = a.decade_table();
        assert_eq!(table.rows.len(), 10);
        assert_eq!(table.rows.last().unwrap().decade, -8);
        assert_eq!(table.rows.last().unwrap().reached, 3);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let mut c = small_config();
        c.function = Family::F3 { ell: 1e6 };
        c.algorithm = Algorithm::Frp;
        c.budget_fes = Some(50);
        let e = run_experiment(&c, Execution::Sequential).unwrap();
        for t in &e.trials {
            let s = &t.summary;
            assert!(!s.reached_target);
            assert_eq!(s.stop_reason, StopReason::Budget);
            assert!(!s.fes_to_accuracy.contains_key(&-8));
            assert!(s.fes_to_accuracy.keys().all(|&d| 10f64.powi(d) >= s.final_gap));
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let field = |c: ExperimentConfig| match c.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        let mut c = small_config();
        c.trials = 0;
        assert_eq!(field(c), "trials");
        let mut c = small_config();
        c.function = Family::G { ell: 10.0, i: 4 };
        assert_eq!(field(c), "i");
        let mut c = small_config();
        c.linesearch = LineSearchSpec::Bisection { mu: 1.5, max_fes: 30 };
        assert_eq!(field(c), "mu");
        let mut c = small_config();
        c.function = Family::F2;
        c.start = StartPoint::Preset;
        assert_eq!(field(c), "start");
    }

    #[test]
    fn summary_round_trips_through_json() {
        let e = run_experiment(&small_config(), Execution::Sequential).unwrap();
        for t in &e.trials {
            let mut s = t.summary.clone();
            s.wall_time = Duration::ZERO;
            let back: TrialSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
        let cfg: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&e.config).unwrap()).unwrap();
        assert_eq!(cfg, e.config);
    }

    #[test]
    fn matrix_file_init() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b0.txt");
        std::fs::write(&p, "2 0.5\n0.5, 1\n").unwrap();
        let m = MatrixInit::File { path: p.clone() }.resolve(2).unwrap();
        assert_eq!(m.as_matrix()[(0, 1)], 0.5);
        assert!(MatrixInit::File { path: p }.resolve(3).is_err());
    }

    #[test]
    fn learning_phase_on_synthetic_curve() {
        use crate::pursuit::TrajectoryRecord;
        // flat until 100, then one decade per 10 iterations
        let records: Vec<TrajectoryRecord> = (0..=160u64)
            .map(|k| {
                let lg = if k < 100 { -0.001 * k as f64 } else { -0.1 - 0.1 * (k - 100) as f64 };
                TrajectoryRecord {
                    iteration: k,
                    fes: 2 * k,
                    fval: 10f64.powf(lg),
                    gap: Some(10f64.powf(lg)),
                    kappa: None,
                    spectrum: None,
                }
            })
            .collect();
        let t = Trajectory {
            records,
            crossings: BTreeMap::new(),
            x_final: DVector::zeros(1),
            f_final: 0.0,
            iterations: 160,
            fes: 320,
            stop_reason: StopReason::Target,
            rejected_updates: 0,
        };
        let k = learning_phase_end(&t, 8).unwrap();
        assert!((100..=106).contains(&k), "{k}");
    }
}
