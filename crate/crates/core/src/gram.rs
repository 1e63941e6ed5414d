//! Lower estimates of the quadratic form `E <theta, X>^2` and the Gram matrix.
//!
//! `A_{lambda,beta}(theta, x) = phi_sq(sqrt(lambda) <theta, x>, |x|/sqrt(beta)) - log(1 + |x|^2/beta)`
//! is averaged over the sample and penalized; the supremum over `lambda`
//! (and over `beta` on the geometric grid of the adaptive version) is a
//! lower bound of `E <theta, X>^2` with high probability.
//!
//! Most rows sit far from the kinks of `phi_sq`, where it is the polynomial
//! `m^2 + s^2 - (m^4 + 6 m^2 s^2 + 3 s^4)/2`. The directional estimator
//! keeps the power sums of those rows and evaluates `phi_sq` exactly only on
//! the rows that may be near a kink.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::influence::{psi_asym_raw, sq, sq_dm, TAIL_Z};
use crate::linalg::{dot, sym_eigen_sorted};
use crate::optim::sphere::random_point;
use crate::optim::{self, BundleConfig, Cut, CutOracle, SphereMax, SphereSearch};
use crate::vector_mean::{check_delta, check_unit, FitOptions, VectorSample};

/// Log-spaced `lambda` values searched before local refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub log10_min: f64,
    pub log10_max: f64,
    pub points: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self { log10_min: -8.0, log10_max: 8.0, points: 200 }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        let k = self.points.max(2);
        (0..k)
            .map(|i| 10f64.powf(self.log10_min + (self.log10_max - self.log10_min) * i as f64 / (k - 1) as f64))
            .collect()
    }

    /// Same range with `2 points - 1` values (every old point kept).
    pub fn refined(&self) -> Self {
        Self { points: 2 * self.points.max(2) - 1, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramConfig {
    /// Known bound `T >= E |X|^4`.
    #[serde(rename = "T")]
    pub t_bound: f64,
    pub delta: f64,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    /// Largest `k` of the adaptive grid `beta(k) = sqrt(10 T n / e^k)`;
    /// `ceil(log(10 T n)) + 5` when absent.
    #[serde(default)]
    pub k_max: Option<usize>,
    /// Smoothing of the non-adaptive estimator; `sqrt(2 T n)` when absent.
    #[serde(default)]
    pub beta: Option<f64>,
}

impl GramConfig {
    pub fn new(t_bound: f64, delta: f64) -> Result<Self> {
        let c = Self { t_bound, delta, lambda_grid: LambdaGrid::default(), k_max: None, beta: None };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if !(self.t_bound > 0.0 && self.t_bound.is_finite()) {
            return domain(format!("fourth-moment bound T must be positive and finite, got {}", self.t_bound));
        }
        let g = &self.lambda_grid;
        if !(g.log10_min < g.log10_max) || g.points < 2 || !g.log10_min.is_finite() || !g.log10_max.is_finite() {
            return domain("lambda grid needs log10_min < log10_max and at least 2 points");
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return domain(format!("beta must be positive, got {b}"));
            }
        }
        Ok(())
    }

    pub fn k_max_for(&self, n: usize) -> usize {
        self.k_max.unwrap_or_else(|| (10.0 * self.t_bound * n as f64).ln().max(0.0).ceil() as usize + 5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLowerBound {
    pub value: f64,
    pub lambda_star: f64,
    /// Grid index of `beta`; `None` for the fixed-`beta` estimator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_star: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramEstimate {
    /// Rows of the symmetric PSD estimate.
    #[serde(rename = "G_hat")]
    pub g_hat: Vec<Vec<f64>>,
    /// `sup_theta <theta, G_hat theta> - E~(theta)` found by the search.
    pub sup_gap: f64,
    /// `min_theta <theta, G_hat theta> - E~(theta)` found by the search
    /// (nonnegative up to the search tolerance).
    pub min_slack: f64,
    pub delta: f64,
    pub certified: bool,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimates {
    pub sigma_hat: Vec<f64>,
}

/// `phi_sq(sqrt(lambda) <theta, x>, |x|/sqrt(beta)) - log(1 + |x|^2/beta)`.
pub fn a_penalized(theta: &[f64], x: &[f64], lambda: f64, beta: f64) -> Result<f64> {
    if !(lambda > 0.0 && beta > 0.0) {
        return domain(format!("lambda and beta must be positive, got {lambda}, {beta}"));
    }
    if theta.len() != x.len() {
        return domain("theta and x must have the same length");
    }
    let r2 = dot(x, x);
    Ok(sq(lambda.sqrt() * dot(theta, x), (r2 / beta).sqrt()) - (r2 / beta).ln_1p())
}

/// One smoothing level `beta` with its `theta`-free sums.
#[derive(Debug, Clone)]
struct Level {
    beta: f64,
    /// `sum log(1 + |x_i|^2 / beta)`
    log_sum: f64,
    /// Number of leading rows (by norm) with `TAIL_Z |x|/sqrt(beta) >= 1/2`.
    wide: usize,
    /// `beta / (2 n)`
    kl: f64,
    /// Coefficient `c` of the penalty `c / (n lambda)`.
    per_lambda: f64,
}

/// Directional estimator over one or several smoothing levels.
pub(crate) struct GramDirectional<'a> {
    sample: &'a VectorSample,
    levels: Vec<Level>,
    adaptive: bool,
    lambdas: Vec<f64>,
    /// Row indices by decreasing norm.
    by_norm: Vec<usize>,
    /// `|x_i|^2`
    r2: Vec<f64>,
    n2: f64,
    n4: f64,
}

/// Sums of powers of the projections.
struct Proj {
    a: Vec<f64>,
    /// Row indices by decreasing `|a|`.
    by_abs: Vec<usize>,
    abs_sorted: Vec<f64>,
    s2: f64,
    s4: f64,
    an: f64,
}

impl<'a> GramDirectional<'a> {
    /// Fixed `beta` (non-adaptive estimator).
    pub(crate) fn fixed(sample: &'a VectorSample, config: &GramConfig) -> Result<Self> {
        config.validate()?;
        let n = sample.n() as f64;
        let beta = config.beta.unwrap_or_else(|| (2.0 * config.t_bound * n).sqrt());
        let l = (1.0 / config.delta).ln();
        let level_spec = vec![(beta, beta / (2.0 * n), l + config.t_bound / (beta * beta) * n)];
        Ok(Self::build(sample, config, level_spec, false))
    }

    /// `beta(k) = sqrt(10 T n / e^k)` for `k = 0..=k_max`.
    pub(crate) fn adaptive(sample: &'a VectorSample, config: &GramConfig) -> Result<Self> {
        config.validate()?;
        let n = sample.n() as f64;
        let t = config.t_bound;
        let spec = (0..=config.k_max_for(sample.n()))
            .map(|k| {
                let ek = (k as f64).exp();
                let beta = (10.0 * t * n / ek).sqrt();
                let kf = k as f64;
                let log_pen = ((kf + 1.0) * (kf + 2.0) / config.delta).ln();
                (beta, beta / (2.0 * n), ek / 10.0 + log_pen)
            })
            .collect();
        Ok(Self::build(sample, config, spec, true))
    }

    /// `spec` holds `(beta, kl penalty, coefficient of 1/(n lambda))`.
    fn build(sample: &'a VectorSample, config: &GramConfig, spec: Vec<(f64, f64, f64)>, adaptive: bool) -> Self {
        let n = sample.n();
        let mut by_norm: Vec<usize> = (0..n).collect();
        by_norm.sort_by(|&i, &j| sample.row_norm(j).total_cmp(&sample.row_norm(i)).then(i.cmp(&j)));
        let r2: Vec<f64> = (0..n).map(|i| sample.row_norm(i).powi(2)).collect();
        let n2 = r2.iter().sum();
        let n4 = r2.iter().map(|x| x * x).sum();
        let levels = spec
            .into_iter()
            .map(|(beta, kl, per_lambda)| {
                let sb = beta.sqrt();
                let log_sum = r2.iter().map(|x| (x / beta).ln_1p()).sum();
                let wide = by_norm.partition_point(|&i| TAIL_Z * sample.row_norm(i) / sb >= 0.5);
                Level { beta, log_sum, wide, kl, per_lambda }
            })
            .collect();
        Self { sample, levels, adaptive, lambdas: config.lambda_grid.values(), by_norm, r2, n2, n4 }
    }

    fn project(&self, theta: &[f64]) -> Proj {
        let a: Vec<f64> = self.sample.rows().map(|x| dot(theta, x)).collect();
        let mut by_abs: Vec<usize> = (0..a.len()).collect();
        by_abs.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()).then(i.cmp(&j)));
        let abs_sorted = by_abs.iter().map(|&i| a[i].abs()).collect();
        let mut s2 = 0.0;
        let mut s4 = 0.0;
        let mut an = 0.0;
        for (i, ai) in a.iter().enumerate() {
            let q = ai * ai;
            s2 += q;
            s4 += q * q;
            an += q * self.sample.row_norm(i).powi(2);
        }
        Proj { a, by_abs, abs_sorted, s2, s4, an }
    }

    fn spread(&self, level: &Level, i: usize) -> f64 {
        self.sample.row_norm(i) / level.beta.sqrt()
    }

    /// Penalized objective at `(lambda, level)` evaluated row by row.
    fn exact(&self, pr: &Proj, lambda: f64, li: usize) -> f64 {
        let lev = &self.levels[li];
        let sl = lambda.sqrt();
        let total: f64 = (0..pr.a.len()).map(|i| sq(sl * pr.a[i], self.spread(lev, i))).sum();
        self.finish(total, lambda, li)
    }

    fn finish(&self, total: f64, lambda: f64, li: usize) -> f64 {
        let lev = &self.levels[li];
        let n = pr_n(self.sample);
        (total - lev.log_sum) / (n * lambda) - lev.kl - lev.per_lambda / (n * lambda)
    }

    /// Objective using the power sums for the rows far from the kinks.
    fn fast(&self, pr: &Proj, lambda: f64, li: usize, marks: &mut [bool], touched: &mut Vec<usize>) -> f64 {
        let lev = &self.levels[li];
        let n = pr.a.len();
        let sl = lambda.sqrt();
        let narrow = pr.abs_sorted.partition_point(|x| sl * x >= 0.5);
        if narrow + lev.wide > n / 4 {
            return self.exact(pr, lambda, li);
        }
        let b = lev.beta;
        let poly = |q: f64, r2: f64| {
            let m2 = lambda * q;
            let s2 = r2 / b;
            m2 + s2 - 0.5 * (m2 * m2 + 6.0 * m2 * s2 + 3.0 * s2 * s2)
        };
        let mut total = lambda * pr.s2 + self.n2 / b
            - 0.5 * (lambda * lambda * pr.s4 + 6.0 * lambda * pr.an / b + 3.0 * self.n4 / (b * b));
        touched.clear();
        for &i in pr.by_abs[..narrow].iter().chain(self.by_norm[..lev.wide].iter()) {
            if marks[i] {
                continue;
            }
            marks[i] = true;
            touched.push(i);
            let r2 = self.sample.row_norm(i).powi(2);
            let q = pr.a[i] * pr.a[i];
            total += sq(sl * pr.a[i], self.spread(lev, i)) - poly(q, r2);
        }
        for &i in touched.iter() {
            marks[i] = false;
        }
        self.finish(total, lambda, li)
    }

    /// Cheap upper bound of the objective from `psi(t) <= min(t, 1/2)`.
    fn upper(&self, pr: &Proj, lambda: f64, li: usize) -> f64 {
        let lev = &self.levels[li];
        let n = pr.a.len() as f64;
        let a = pr.s2 / n + (self.n2 / lev.beta - lev.log_sum) / (n * lambda);
        let b = (0.5 * n - lev.log_sum) / (n * lambda);
        a.min(b) - lev.kl - lev.per_lambda / (n * lambda)
    }

    /// Row-wise bound from Jensen: `phi_sq(m, s) <= psi(m^2 + s^2)`.
    fn jensen(&self, pr: &Proj, lambda: f64, li: usize) -> f64 {
        let b = self.levels[li].beta;
        let total: f64 = pr.a.iter().zip(&self.r2).map(|(a, r2)| psi_asym_raw(lambda * a * a + r2 / b)).sum();
        self.finish(total, lambda, li)
    }

    /// Branch and bound over the `(beta, lambda)` grid, then golden-section
    /// refinement of `lambda` at the best level.
    pub(crate) fn evaluate(&self, theta: &[f64]) -> DirectionalLowerBound {
        let pr = self.project(theta);
        let n = pr.a.len();
        let mut marks = vec![false; n];
        let mut touched = Vec::new();
        let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(self.levels.len() * self.lambdas.len());
        for li in 0..self.levels.len() {
            for (gi, &lambda) in self.lambdas.iter().enumerate() {
                order.push((self.upper(&pr, lambda, li), li, gi));
            }
        }
        order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
        for &(ub, li, gi) in &order {
            if ub <= best.0 {
                break;
            }
            let lambda = self.lambdas[gi];
            if self.jensen(&pr, lambda, li) <= best.0 {
                continue;
            }
            let v = self.fast(&pr, lambda, li, &mut marks, &mut touched);
            if v > best.0 || (v == best.0 && (li, gi) < (best.1, best.2)) {
                best = (v, li, gi);
            }
        }
        let (_, li, gi) = best;
        let lo = self.lambdas[gi.saturating_sub(1)].ln();
        let hi = self.lambdas[(gi + 1).min(self.lambdas.len() - 1)].ln();
        let mut f = |x: f64| self.fast(&pr, x.exp(), li, &mut marks, &mut touched);
        let (x_star, _) = golden_max(&mut f, lo, hi, self.lambdas[gi].ln());
        let lambda = x_star.exp();
        let mut value = self.exact(&pr, lambda, li);
        let grid_value = self.exact(&pr, self.lambdas[gi], li);
        let lambda = if grid_value > value {
            value = grid_value;
            self.lambdas[gi]
        } else {
            lambda
        };
        DirectionalLowerBound { value, lambda_star: lambda, k_star: self.adaptive.then_some(li) }
    }

    fn level_of(&self, b: &DirectionalLowerBound) -> usize {
        b.k_star.unwrap_or(0)
    }

    /// Value and envelope gradient `(1/(n sqrt(lambda))) sum d/dm phi_sq * x_i`.
    pub(crate) fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let b = self.evaluate(theta);
        let lev = &self.levels[self.level_of(&b)];
        let sl = b.lambda_star.sqrt();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, x) in self.sample.rows().enumerate() {
            let (_, d) = sq_dm(sl * dot(theta, x), self.spread(lev, i));
            if d != 0.0 {
                for (g, xj) in grad.iter_mut().zip(x) {
                    *g += d * xj;
                }
            }
        }
        let scale = 1.0 / (pr_n(self.sample) * sl);
        grad.iter_mut().for_each(|g| *g *= scale);
        b.value
    }

    pub(crate) fn dim(&self) -> usize {
        self.sample.d()
    }
}

fn pr_n(sample: &VectorSample) -> f64 {
    sample.n() as f64
}

/// Golden-section search for a maximum on `[lo, hi]`; returns the best point
/// seen (including `start`).
fn golden_max(f: &mut dyn FnMut(f64) -> f64, mut lo: f64, mut hi: f64, start: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut best = (start, f(start));
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if (hi - lo).abs() < 1e-6 {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
        for (x, v) in [(x1, f1), (x2, f2)] {
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    best
}

/// Fixed-`beta` estimator `E(theta)`, a lower bound of `E <theta, X>^2`
/// with probability `1 - delta`.
pub fn gram_directional(sample: &VectorSample, theta: &[f64], config: &GramConfig) -> Result<DirectionalLowerBound> {
    check_unit(theta, sample.d())?;
    Ok(GramDirectional::fixed(sample, config)?.evaluate(theta))
}

/// Estimator adaptive in `beta` over `beta(k) = sqrt(10 T n / e^k)`.
pub fn gram_directional_adaptive(
    sample: &VectorSample,
    theta: &[f64],
    config: &GramConfig,
) -> Result<DirectionalLowerBound> {
    check_unit(theta, sample.d())?;
    Ok(GramDirectional::adaptive(sample, config)?.evaluate(theta))
}

/// `B(theta)` of the adaptive estimator from the directional fourth moment.
pub fn gram_bound(fourth_moment_dir: f64, t_bound: f64, n: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(fourth_moment_dir > 0.0) || !(t_bound > 0.0) || n == 0 {
        return domain("gram_bound needs a positive fourth moment, T > 0 and n >= 1");
    }
    if fourth_moment_dir > t_bound {
        return domain(format!("directional fourth moment {fourth_moment_dir} exceeds T = {t_bound}"));
    }
    let ratio = t_bound / fourth_moment_dir;
    let inner = 4.0 * (0.5 * ratio.ln() + 2.5).ln() + 2.0 * (1.0 / delta).ln();
    Ok(2.0 * (fourth_moment_dir / n as f64).sqrt() * (3.3 * ratio.powf(0.25) + inner.sqrt()))
}

/// Index pairs `(i, j)`, `i <= j`, of the packed symmetric parametrization.
fn packed_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push((i, j));
        }
    }
    out
}

/// Coefficients of `<theta, M theta>` in the packed entries of `M`.
fn quad_slope(pairs: &[(usize, usize)], theta: &[f64]) -> Vec<f64> {
    pairs.iter().map(|&(i, j)| if i == j { theta[i] * theta[i] } else { 2.0 * theta[i] * theta[j] }).collect()
}

fn unpack(pairs: &[(usize, usize)], d: usize, m: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d, d);
    for (&(i, j), v) in pairs.iter().zip(m) {
        out[(i, j)] = *v;
        out[(j, i)] = *v;
    }
    out
}

/// Multistart ascent that first evaluates `draws` uniform directions and
/// ascends only from the best `search.restarts` of them and from `warm`.
fn screened_max<F>(f: &F, d: usize, search: &SphereSearch, draws: usize, warm: &[Vec<f64>]) -> SphereMax
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let pts: Vec<Vec<f64>> = (0..draws).map(|_| random_point(&[d], &mut rng)).collect();
    let mut scored: Vec<(f64, usize)> = pts.par_iter().enumerate().map(|(i, p)| (f(p, &mut vec![0.0; d]), i)).collect();
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut starts = warm.to_vec();
    starts.extend(scored.iter().take(search.restarts).map(|&(_, i)| pts[i].clone()));
    SphereSearch { restarts: 0, ..search.clone() }.maximize(&[d], f, &starts)
}

/// Sphere search for `sign * F` at `m`, `F(theta) = <theta, M theta> - E~(theta)`;
/// returns the point and `E~` there.
fn extreme(
    est: &GramDirectional<'_>,
    m: &DMatrix<f64>,
    sign: f64,
    search: &SphereSearch,
    draws: usize,
    warm: &[Vec<f64>],
) -> (Vec<f64>, f64) {
    let d = est.dim();
    let f = |theta: &[f64], g: &mut [f64]| {
        let e = est.value_grad(theta, g);
        let t = DVector::from_column_slice(theta);
        let mt = m * &t;
        for j in 0..d {
            g[j] = sign * (2.0 * mt[j] - g[j]);
        }
        sign * (t.dot(&mt) - e)
    };
    let res = screened_max(&f, d, search, draws, warm);
    let t = DVector::from_column_slice(&res.point);
    let e = t.dot(&(m * &t)) - sign * res.value;
    (res.point, e)
}

fn eigen_starts(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (_, vecs) = sym_eigen_sorted(m);
    let d = m.nrows();
    let mut out = vec![vecs.column(0).iter().copied().collect::<Vec<f64>>()];
    if d > 1 {
        out.push(vecs.column(d - 1).iter().copied().collect());
    }
    out
}

/// Probe directions with their cached `E~` values.
struct Probes {
    pairs: Vec<(usize, usize)>,
    points: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl Probes {
    fn push(&mut self, theta: Vec<f64>, value: f64) {
        self.slopes.push(quad_slope(&self.pairs, &theta));
        self.points.push(theta);
        self.values.push(value);
    }

    fn residual(&self, m: &[f64], t: usize) -> f64 {
        dot(&self.slopes[t], m) - self.values[t]
    }

    /// Indices of the largest and smallest residual.
    fn extremes(&self, m: &[f64]) -> (usize, usize) {
        let (mut hi, mut lo) = (0, 0);
        let (mut r_hi, mut r_lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for t in 0..self.values.len() {
            let r = self.residual(m, t);
            if r > r_hi {
                (hi, r_hi) = (t, r);
            }
            if r < r_lo {
                (lo, r_lo) = (t, r);
            }
        }
        (hi, lo)
    }
}

/// Oscillation of `<theta, M theta> - E~(theta)` over the probes; it does
/// not change under `M -> M + c I`.
impl CutOracle for Probes {
    fn cut(&mut self, m: &[f64]) -> Cut {
        let (hi, lo) = self.extremes(m);
        let slope = self.slopes[hi].iter().zip(&self.slopes[lo]).map(|(a, b)| a - b).collect();
        Cut { slope, offset: self.values[hi] - self.values[lo] }
    }
}

/// Outcome of the oscillation fit shared by [`fit_gram`] and [`estimate_eigenvalues`].
struct GramFit {
    /// Minimizer of the oscillation.
    m: DMatrix<f64>,
    /// `sup F` and `inf F` at `m` over the probes and the last searches.
    sup_f: f64,
    inf_f: f64,
    rounds: usize,
    converged: bool,
}

/// Exchange method: minimize the oscillation over a finite probe set, then
/// search the sphere for directions outside the probed range and add them.
fn fit_oscillation(est: &GramDirectional<'_>, opts: &FitOptions) -> GramFit {
    let d = est.dim();
    let pairs = packed_pairs(d);
    let dim = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_616d);
    let mut probes = Probes { pairs: pairs.clone(), points: Vec::new(), slopes: Vec::new(), values: Vec::new() };
    let mut start_dirs: Vec<Vec<f64>> = (0..d).map(|i| crate::linalg::axis(d, i)).collect();
    for _ in 0..(20 * d * d).max(dim + 1) {
        start_dirs.push(random_point(&[d], &mut rng));
    }
    for t in start_dirs {
        let v = est.evaluate(&t).value;
        probes.push(t, v);
    }
    // least-squares start
    let design = DMatrix::from_fn(probes.values.len(), dim, |r, c| probes.slopes[r][c]);
    let rhs = DVector::from_column_slice(&probes.values);
    let mut center: Vec<f64> = match (design.transpose() * &design).cholesky() {
        Some(ch) => ch.solve(&(design.transpose() * rhs)).iter().copied().collect(),
        None => vec![0.0; dim],
    };
    let mut cfg = BundleConfig::for_dim(dim);
    cfg.rel_tol = 1e-9;
    let range = |probes: &Probes, m: &[f64]| {
        let (hi, lo) = probes.extremes(m);
        (probes.residual(m, hi), probes.residual(m, lo))
    };
    let mut rounds = 0;
    let mut converged = d == 1;
    let (mut sup_f, mut inf_f) = range(&probes, &center);
    while !converged && rounds < opts.max_rounds {
        rounds += 1;
        center = optim::minimize(&mut probes, center, Vec::new(), f64::NEG_INFINITY, &cfg).center;
        (sup_f, inf_f) = range(&probes, &center);
        let m = unpack(&pairs, d, &center);
        let (hi, lo) = probes.extremes(&center);
        let search = opts.search(rounds as u64);
        let mut warm_hi = vec![probes.points[hi].clone()];
        let mut warm_lo = vec![probes.points[lo].clone()];
        let starts = eigen_starts(&m);
        warm_hi.extend(starts.iter().cloned());
        warm_lo.extend(starts.into_iter().rev());
        let slack = 1e-3 * (sup_f - inf_f) + 1e-12;
        let mut grew = false;
        for (sign, warm) in [(1.0, warm_hi), (-1.0, warm_lo)] {
            let (theta, e) = extreme(est, &m, sign, &search, 4 * search.restarts, &warm);
            let r = dot(&quad_slope(&pairs, &theta), &center) - e;
            if sign * r > sign * if sign > 0.0 { sup_f } else { inf_f } + slack {
                grew = true;
            }
            sup_f = sup_f.max(r);
            inf_f = inf_f.min(r);
            probes.push(theta, e);
        }
        converged = !grew;
    }
    GramFit { m: unpack(&pairs, d, &center), sup_f, inf_f, rounds, converged }
}

/// Draws screened by the certificate searches.
fn certificate_draws(opts: &FitOptions) -> usize {
    16 * opts.restarts.max(1)
}

fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_sorted(m);
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for (k, v) in vals.iter().enumerate() {
        if *v > 0.0 {
            let c = vecs.column(k);
            out += *v * &c * c.transpose();
        }
    }
    0.5 * (&out + out.transpose())
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn fit_gram(sample: &VectorSample, config: &GramConfig) -> Result<GramEstimate> {
    fit_gram_with(sample, config, &gram_fit_options())
}

/// Search settings used by [`fit_gram`] and [`estimate_eigenvalues`]; the
/// certificate searches screen 64 random directions.
pub fn gram_fit_options() -> FitOptions {
    FitOptions { restarts: 4, tol: 1e-7, max_iter: 8, seed: 0x5eed, max_rounds: 20 }
}

/// `<theta, M theta> - e`
fn gap(m: &DMatrix<f64>, theta: &[f64], e: f64) -> f64 {
    let t = DVector::from_column_slice(theta);
    t.dot(&(m * &t)) - e
}

/// Symmetric PSD `G_hat` dominating `E~` with the smallest sup gap the fit
/// finds. Minimizes the oscillation of `<theta, M theta> - E~(theta)` and
/// then shifts `M` by a multiple of the identity so that its minimum over
/// the sphere is zero.
pub fn fit_gram_with(sample: &VectorSample, config: &GramConfig, opts: &FitOptions) -> Result<GramEstimate> {
    let est = GramDirectional::adaptive(sample, config)?;
    let fit = fit_oscillation(&est, opts);
    Ok(dominating(&est, &fit, config, opts))
}

fn dominating(est: &GramDirectional, fit: &GramFit, config: &GramConfig, opts: &FitOptions) -> GramEstimate {
    let d = fit.m.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut g_hat = clip_psd(&(&fit.m - fit.inf_f * &eye));
    let search = opts.search(u64::MAX - 1);
    let draws = certificate_draws(opts);
    let (lo, e_lo) =
        extreme(est, &g_hat, -1.0, &search, draws, &eigen_starts(&g_hat).into_iter().rev().collect::<Vec<_>>());
    let mut min_slack = gap(&g_hat, &lo, e_lo);
    if min_slack < 0.0 {
        g_hat += -min_slack * &eye;
        min_slack = 0.0;
    }
    let (hi, e_hi) = extreme(est, &g_hat, 1.0, &search, draws, &eigen_starts(&g_hat));
    let sup_gap = gap(&g_hat, &hi, e_hi).max(fit.sup_f - fit.inf_f);
    GramEstimate {
        g_hat: rows_of(&g_hat),
        sup_gap,
        min_slack,
        delta: 2.0 * config.delta,
        certified: fit.converged,
        rounds: fit.rounds,
    }
}

/// Lower estimates of the eigenvalues of `G`: the eigenvalues of the
/// quadratic form dominated by `E~` with the smallest oscillation, the top
/// one raised to `sup_theta E~(theta)`, clipped at zero.
pub fn estimate_eigenvalues(sample: &VectorSample, config: &GramConfig) -> Result<EigenEstimates> {
    estimate_eigenvalues_with(sample, config, &gram_fit_options())
}

pub fn estimate_eigenvalues_with(
    sample: &VectorSample,
    config: &GramConfig,
    opts: &FitOptions,
) -> Result<EigenEstimates> {
    let est = GramDirectional::adaptive(sample, config)?;
    let fit = fit_oscillation(&est, opts);
    Ok(eigen_lower(&est, &fit, opts))
}

/// [`fit_gram_with`] and [`estimate_eigenvalues_with`] sharing one oscillation fit.
pub fn fit_gram_and_eigenvalues_with(
    sample: &VectorSample,
    config: &GramConfig,
    opts: &FitOptions,
) -> Result<(GramEstimate, EigenEstimates)> {
    let est = GramDirectional::adaptive(sample, config)?;
    let fit = fit_oscillation(&est, opts);
    Ok((dominating(&est, &fit, config, opts), eigen_lower(&est, &fit, opts)))
}

fn eigen_lower(est: &GramDirectional, fit: &GramFit, opts: &FitOptions) -> EigenEstimates {
    let d = fit.m.nrows();
    let search = opts.search(u64::MAX - 2);
    let draws = certificate_draws(opts);
    let (hi, e_hi) = extreme(est, &fit.m, 1.0, &search, draws, &eigen_starts(&fit.m));
    let sup_f = fit.sup_f.max(gap(&fit.m, &hi, e_hi));
    let low = &fit.m - sup_f * DMatrix::identity(d, d);
    let (mut vals, vecs) = sym_eigen_sorted(&low);
    let f = |theta: &[f64], g: &mut [f64]| est.value_grad(theta, g);
    let top = screened_max(&f, d, &search, draws, &[vecs.column(0).iter().copied().collect()]);
    vals[0] = vals[0].max(top.value);
    let mut sigma_hat: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    sigma_hat.sort_by(|a, b| b.total_cmp(a));
    EigenEstimates { sigma_hat }
}
