//! Seeded generation of normalized search directions, Haar rotations and
//! Monte-Carlo moment estimators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, invalid, Result};
use crate::exec::{map_indexed, Execution};
use crate::metric::{trace_product, PdMatrix, SymmetricMatrix};

/// Deterministic, platform independent random stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for trial `index` of an experiment seeded with `base`.
    pub fn for_trial(base: u64, index: usize) -> Self {
        Self::new(base.wrapping_add(index as u64))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// `+1.0` or `-1.0` with equal probability.
    pub fn sign(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniformly random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Which metric a direction was normalized in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricTag {
    Identity,
    Covariance,
    /// Drawn from `N̄(0, B⁻¹)` for the Hessian estimate at `epoch`.
    Precision { epoch: u64 },
}

/// A search direction with unit length in the `Σ⁻¹` metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub u: DVector<f64>,
    pub metric_tag: MetricTag,
}

impl Direction {
    pub fn dim(&self) -> usize {
        self.u.len()
    }
}

fn nonzero_normal(n: usize, rng: &mut SeededRng) -> (DVector<f64>, f64) {
    loop {
        let z = rng.normal_vector(n);
        let norm = z.norm();
        if norm > 0.0 {
            return (z, norm);
        }
    }
}

/// Uniform direction on the Euclidean unit sphere, `N̄(0, I)`.
pub fn sample_isotropic(n: usize, rng: &mut SeededRng) -> Direction {
    let (z, norm) = nonzero_normal(n, rng);
    Direction {
        u: z / norm,
        metric_tag: MetricTag::Identity,
    }
}

/// Draw from `N̄(0, Σ)` given a lower-triangular `C` with `CCᵀ = Σ`.
///
/// Returns `Cz/‖z‖₂`, whose `Σ⁻¹`-norm is one without ever forming `Σ⁻¹`.
pub fn sample_normalized(sigma_factor: &DMatrix<f64>, rng: &mut SeededRng) -> Result<Direction> {
    let n = sigma_factor.nrows();
    check_dim(n, sigma_factor.ncols())?;
    if (0..n).any(|i| sigma_factor[(i, i)] == 0.0) {
        return Err(invalid("sigma_factor", "singular triangular factor"));
    }
    let (z, norm) = nonzero_normal(n, rng);
    Ok(Direction {
        u: sigma_factor * z / norm,
        metric_tag: MetricTag::Covariance,
    })
}

/// Draw from `N̄(0, B⁻¹)` given a lower-triangular `L` with `LLᵀ = B`.
///
/// `L⁻ᵀ` is a square-root factor of `B⁻¹`, so the draw is `L⁻ᵀz/‖z‖₂`.
pub fn sample_from_precision(b_factor: &DMatrix<f64>, rng: &mut SeededRng) -> Result<Direction> {
    sample_from_precision_tagged(b_factor, rng, 0)
}

pub(crate) fn sample_from_precision_tagged(
    b_factor: &DMatrix<f64>,
    rng: &mut SeededRng,
    epoch: u64,
) -> Result<Direction> {
    let n = b_factor.nrows();
    check_dim(n, b_factor.ncols())?;
    let (z, norm) = nonzero_normal(n, rng);
    let w = b_factor
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| invalid("b_factor", "singular triangular factor"))?;
    Ok(Direction {
        u: w / norm,
        metric_tag: MetricTag::Precision { epoch },
    })
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `diag(R)` absorbed into the columns of `Q`.
pub fn haar_rotation(n: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub mean: T,
    pub std_err: T,
}

/// Sample means of the five moment quantities.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub samples: usize,
    /// `E[vvᵀ]`
    pub outer: Estimate<DMatrix<f64>>,
    /// `E[vᵀAv]`
    pub quad: Estimate<f64>,
    /// `E[(vᵀAv)²]`
    pub quad_sq: Estimate<f64>,
    /// `E[⟨x,v⟩v]`
    pub projection: Estimate<DVector<f64>>,
    /// `E[‖⟨x,v⟩v‖²_A]`
    pub projection_norm_sq: Estimate<f64>,
}

/// The closed forms the estimators converge to.
#[derive(Debug, Clone)]
pub struct MomentClosedForm {
    pub outer: DMatrix<f64>,
    pub quad: f64,
    pub quad_sq: f64,
    pub projection: DVector<f64>,
    pub projection_norm_sq: f64,
}

impl MomentClosedForm {
    /// Moments of the normalized distribution `v ∼ N̄(0, Σ)`.
    pub fn normalized(sigma: &PdMatrix, a: &SymmetricMatrix, x: &DVector<f64>) -> Self {
        let n = sigma.n() as f64;
        let g = Self::gaussian(sigma, a, x);
        let d = n * (n + 2.0);
        Self {
            outer: g.outer / n,
            quad: g.quad / n,
            quad_sq: g.quad_sq / d,
            projection: g.projection / n,
            projection_norm_sq: g.projection_norm_sq / d,
        }
    }

    /// Moments of the unnormalized Gaussian `u ∼ N(0, Σ)`.
    pub fn gaussian(sigma: &PdMatrix, a: &SymmetricMatrix, x: &DVector<f64>) -> Self {
        let s = sigma.as_matrix();
        let am = a.as_matrix();
        let tr_as = trace_product(am, s);
        let as_ = am * s;
        let tr_as_sq = trace_product(&as_, &as_);
        let sx = s * x;
        let x_sigma = x.dot(&sx);
        let x_sas = sx.dot(&(am * &sx));
        Self {
            outer: s.clone(),
            quad: tr_as,
            quad_sq: tr_as * tr_as + 2.0 * tr_as_sq,
            projection: sx,
            projection_norm_sq: tr_as * x_sigma + 2.0 * x_sas,
        }
    }
}

const MOMENT_BLOCK: usize = 8192;

#[derive(Clone)]
struct MomentSums {
    count: usize,
    outer: DMatrix<f64>,
    outer_sq: DMatrix<f64>,
    quad: [f64; 2],
    quad_sq: [f64; 2],
    proj: DVector<f64>,
    proj_sq: DVector<f64>,
    proj_norm: [f64; 2],
}

impl MomentSums {
    fn zeros(n: usize) -> Self {
        Self {
            count: 0,
            outer: DMatrix::zeros(n, n),
            outer_sq: DMatrix::zeros(n, n),
            quad: [0.0; 2],
            quad_sq: [0.0; 2],
            proj: DVector::zeros(n),
            proj_sq: DVector::zeros(n),
            proj_norm: [0.0; 2],
        }
    }

    fn merge(&mut self, o: &MomentSums) {
        self.count += o.count;
        self.outer += &o.outer;
        self.outer_sq += &o.outer_sq;
        self.proj += &o.proj;
        self.proj_sq += &o.proj_sq;
        for k in 0..2 {
            self.quad[k] += o.quad[k];
            self.quad_sq[k] += o.quad_sq[k];
            self.proj_norm[k] += o.proj_norm[k];
        }
    }
}

fn scalar_estimate(s: [f64; 2], count: usize) -> Estimate<f64> {
    let m = count as f64;
    let mean = s[0] / m;
    let var = ((s[1] / m - mean * mean) * m / (m - 1.0).max(1.0)).max(0.0);
    Estimate {
        mean,
        std_err: (var / m).sqrt(),
    }
}

fn estimate_impl(
    sigma: &PdMatrix,
    a: &SymmetricMatrix,
    x: &DVector<f64>,
    samples: usize,
    rng: &mut SeededRng,
    normalize: bool,
    exec: Execution,
) -> Result<MomentEstimate> {
    let n = sigma.n();
    check_dim(n, a.n())?;
    check_dim(n, x.len())?;
    if samples == 0 {
        return Err(invalid("samples", "must be at least 1"));
    }
    let master = rng.next_u64();
    let blocks = samples.div_ceil(MOMENT_BLOCK);
    let c = sigma.factor();
    let am = a.as_matrix();
    let partial = map_indexed(blocks, exec, |b| {
        let mut r = SeededRng::new(master ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let len = MOMENT_BLOCK.min(samples - b * MOMENT_BLOCK);
        let mut s = MomentSums::zeros(n);
        for _ in 0..len {
            let z = r.normal_vector(n);
            let v = if normalize {
                let norm = z.norm();
                if norm == 0.0 {
                    continue;
                }
                c * z / norm
            } else {
                c * z
            };
            s.count += 1;
            let q = v.dot(&(am * &v));
            let xv = x.dot(&v);
            let p = &v * xv;
            let pn = xv * xv * q;
            s.outer.ger(1.0, &v, &v, 1.0);
            for i in 0..n {
                for j in 0..n {
                    let e = v[i] * v[j];
                    s.outer_sq[(i, j)] += e * e;
                }
                s.proj_sq[i] += p[i] * p[i];
            }
            s.proj += &p;
            s.quad[0] += q;
            s.quad[1] += q * q;
            s.quad_sq[0] += q * q;
            s.quad_sq[1] += q * q * q * q;
            s.proj_norm[0] += pn;
            s.proj_norm[1] += pn * pn;
        }
        s
    });
    let mut total = MomentSums::zeros(n);
    for p in &partial {
        total.merge(p);
    }
    let m = total.count as f64;
    let corr = m / (m - 1.0).max(1.0);
    let outer_mean = &total.outer / m;
    let outer_se = DMatrix::from_fn(n, n, |i, j| {
        let mu = outer_mean[(i, j)];
        (((total.outer_sq[(i, j)] / m - mu * mu) * corr).max(0.0) / m).sqrt()
    });
    let proj_mean = &total.proj / m;
    let proj_se = DVector::from_fn(n, |i, _| {
        let mu = proj_mean[i];
        (((total.proj_sq[i] / m - mu * mu) * corr).max(0.0) / m).sqrt()
    });
    Ok(MomentEstimate {
        samples: total.count,
        outer: Estimate {
            mean: outer_mean,
            std_err: outer_se,
        },
        quad: scalar_estimate(total.quad, total.count),
        quad_sq: scalar_estimate(total.quad_sq, total.count),
        projection: Estimate {
            mean: proj_mean,
            std_err: proj_se,
        },
        projection_norm_sq: scalar_estimate(total.proj_norm, total.count),
    })
}

/// Monte-Carlo estimates of the normalized-direction moments for
/// `v ∼ N̄(0, Σ)`. Blocks of draws are seeded from `rng`, so the result is
/// identical under sequential and parallel execution.
pub fn estimate_moments(
    sigma: &PdMatrix,
    a: &SymmetricMatrix,
    x: &DVector<f64>,
    samples: usize,
    rng: &mut SeededRng,
    exec: Execution,
) -> Result<MomentEstimate> {
    estimate_impl(sigma, a, x, samples, rng, true, exec)
}

/// Same estimators for the unnormalized Gaussian `u ∼ N(0, Σ)`.
pub fn estimate_gaussian_moments(
    sigma: &PdMatrix,
    a: &SymmetricMatrix,
    x: &DVector<f64>,
    samples: usize,
    rng: &mut SeededRng,
    exec: Execution,
) -> Result<MomentEstimate> {
    estimate_impl(sigma, a, x, samples, rng, false, exec)
}

/// z-score of a scalar estimate against its target.
pub fn z_score(est: &Estimate<f64>, target: f64) -> f64 {
    if est.std_err == 0.0 {
        if (est.mean - target).abs() <= 1e-12 * target.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (est.mean - target).abs() / est.std_err
    }
}

/// Aggregate z-score of a matrix or vector estimate: `‖mean − target‖_F`
/// divided by the Frobenius norm of the entrywise standard errors.
pub fn frobenius_z_score(mean: &[f64], std_err: &[f64], target: &[f64]) -> f64 {
    let dev: f64 = mean
        .iter()
        .zip(target)
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        .sqrt();
    let se: f64 = std_err.iter().map(|s| s * s).sum::<f64>().sqrt();
    if se == 0.0 {
        if dev <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dev / se
    }
}
