//! Mean of a random matrix with operator-norm guarantees.
//!
//! The bilinear estimator `E(xi, theta)` smooths `psi(lambda <xi, M theta>)`
//! over Gaussian perturbations of both directions. The inner layer over `xi`
//! is exact; the outer layer over `theta` splits into a polynomial part that
//! is computed in closed form and a small correction `r` that is averaged over
//! seeded Gaussian draws. The same draws are used for every direction pair, so
//! `E` is a deterministic smooth function of `(xi, theta)` and
//! `E(-xi, theta) = -E(xi, theta)` holds exactly.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::influence::{asym_parts, r_sym_parts, INV_SQRT_2PI, TAIL_Z};
use crate::linalg::{dot, mat_t_vec, mat_vec, norm};
use crate::optim::{self, BundleConfig, Cut, CutOracle};
use crate::vector_mean::{
    check_delta, deviation_radius, select_params_uncentered, AdaptiveGrid, DirectionalOracle, FitOptions,
    SymDirectional, VecMomentBounds, VectorSample,
};

/// `n` observations of a `p x q` matrix, each stored row-major.
#[derive(Debug, Clone)]
pub struct MatrixSample {
    n: usize,
    p: usize,
    q: usize,
    data: Vec<f64>,
    op_norms: Vec<f64>,
    hs2: Vec<f64>,
}

impl MatrixSample {
    pub fn new(data: Vec<f64>, n: usize, p: usize, q: usize) -> Result<Self> {
        if n == 0 || p == 0 || q == 0 {
            return invalid(format!("matrix sample needs n, p, q >= 1, got n = {n}, p = {p}, q = {q}"));
        }
        let k = p * q;
        if data.len() != n * k {
            return invalid(format!(
                "expected {} values for {n} matrices of shape {p} x {q}, got {}",
                n * k,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return invalid(format!("non-finite entry in observation {}, position {}", i / k, i % k));
        }
        let op_norms = data
            .par_chunks(k)
            .map(|m| if p == 1 || q == 1 { norm(m) } else { crate::linalg::op_norm(&DMatrix::from_row_slice(p, q, m)) })
            .collect();
        let hs2 = data.chunks(k).map(|m| dot(m, m)).collect();
        Ok(Self { n, p, q, data, op_norms, hs2 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Observation `i`, row-major.
    pub fn mat(&self, i: usize) -> &[f64] {
        let k = self.p * self.q;
        &self.data[i * k..(i + 1) * k]
    }

    /// The same observations as vectors of length `p q`.
    pub fn flatten(&self) -> VectorSample {
        VectorSample::new(self.data.clone(), self.n, self.p * self.q).expect("validated on construction")
    }

    /// Observations `range`, each minus `shift` (row-major `p x q`).
    pub fn slice_shifted(&self, range: std::ops::Range<usize>, shift: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(range.len() * self.p * self.q);
        for i in range.clone() {
            data.extend(self.mat(i).iter().zip(shift).map(|(x, s)| x - s));
        }
        Self::new(data, range.len(), self.p, self.q)
    }
}

/// Second-moment bounds for the operator-norm estimator:
/// `v >= sup E <xi, M theta>^2`, `t >= sup_theta E |M theta|^2`,
/// `u >= sup_xi E |M^T xi|^2` and `T >= E |M|_HS^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatMomentBounds {
    pub v: f64,
    pub t: f64,
    pub u: f64,
    #[serde(rename = "T")]
    pub t_hs: f64,
}

impl MatMomentBounds {
    pub fn new(v: f64, t: f64, u: f64, t_hs: f64) -> Result<Self> {
        for (name, x) in [("v", v), ("t", t), ("u", u), ("T", t_hs)] {
            if !(x > 0.0 && x.is_finite()) {
                return domain(format!("moment bound {name} must be positive and finite, got {x}"));
            }
        }
        if v > t || v > u || t > t_hs || u > t_hs {
            return domain(format!(
                "moment bounds must satisfy v <= t, v <= u, t <= T, u <= T; got v = {v}, t = {t}, u = {u}, T = {t_hs}"
            ));
        }
        Ok(Self { v, t, u, t_hs })
    }

    /// Centered matrices with i.i.d. entries of variance `sigma2`.
    pub fn iid_entries(p: usize, q: usize, sigma2: f64) -> Result<Self> {
        let (pf, qf) = (p as f64, q as f64);
        Self::new(sigma2, pf * sigma2, qf * sigma2, pf * qf * sigma2)
    }

    /// `4 max{(t + u)/v, sqrt(T/v)} + log(1/delta)`, the dimension term of the bound.
    pub fn complexity(&self, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        Ok(4.0 * self.shape_ratio() + (1.0 / delta).ln())
    }

    fn shape_ratio(&self) -> f64 {
        ((self.t + self.u) / self.v).max((self.t_hs / self.v).sqrt())
    }
}

/// Centered bounds for the split-sample estimator, with
/// `b >= |E M|_op^2` and `c >= |E M|_HS^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteredMatMomentBounds {
    pub v_bar: f64,
    pub t_bar: f64,
    pub u_bar: f64,
    #[serde(rename = "T_bar")]
    pub t_hs_bar: f64,
    pub b: f64,
    pub c: f64,
}

impl CenteredMatMomentBounds {
    pub fn new(v_bar: f64, t_bar: f64, u_bar: f64, t_hs_bar: f64, b: f64, c: f64) -> Result<Self> {
        MatMomentBounds::new(v_bar, t_bar, u_bar, t_hs_bar)?;
        if !(b >= 0.0 && c >= 0.0 && b.is_finite() && c.is_finite()) {
            return domain(format!("b and c must be finite and >= 0, got b = {b}, c = {c}"));
        }
        if b > c {
            return domain(format!("b bounds the squared operator norm and cannot exceed c, got b = {b}, c = {c}"));
        }
        Ok(Self { v_bar, t_bar, u_bar, t_hs_bar, b, c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearScaleParams {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl BilinearScaleParams {
    pub fn new(lambda: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, x) in [("lambda", lambda), ("beta", beta), ("gamma", gamma)] {
            if !(x > 0.0 && x.is_finite()) {
                return domain(format!("{name} must be positive and finite, got {x}"));
            }
        }
        Ok(Self { lambda, beta, gamma })
    }
}

/// Gaussian draws for the Monte-Carlo layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_draws: 1000, seed: 0x6d63_6472 }
    }
}

impl McConfig {
    pub fn new(n_draws: usize, seed: u64) -> Result<Self> {
        if n_draws == 0 {
            return domain("n_draws must be at least 1");
        }
        Ok(Self { n_draws, seed })
    }

    /// The `n_draws x q` standard Gaussian matrix used by the estimators, row-major.
    pub fn draws(&self, q: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_draws * q).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixDiagnostics {
    pub rounds: usize,
    pub oracle_calls: usize,
    /// Achieved `sup <xi, m_hat theta> - E(xi, theta)` found by the pair search.
    pub op_gap: f64,
    pub op_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hs_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hs_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    /// Rows of the estimate.
    pub m_hat: Vec<Vec<f64>>,
    pub op_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hs_radius: Option<f64>,
    pub delta: f64,
    pub certified: bool,
    /// Monte-Carlo standard error of `E` at the worst pair of the final fit.
    pub mc_stderr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant_c: Option<f64>,
    pub diagnostics: MatrixDiagnostics,
}

impl MatrixEstimate {
    pub fn m_hat_flat(&self) -> Vec<f64> {
        self.m_hat.concat()
    }
}

/// Entries of `n K p` above which `M_i W_k` is recomputed on the fly.
const CACHE_LIMIT: usize = 1 << 23;

/// Seeded draws `W_k` and, when affordable, the products `M_i W_k`.
struct Draws {
    k: usize,
    q: usize,
    w: Vec<f64>,
    wmax: f64,
    mw: Option<Vec<f64>>,
}

impl Draws {
    fn new(sample: &MatrixSample, mc: McConfig) -> Self {
        let (p, q) = (sample.p, sample.q);
        let w = mc.draws(q);
        let wmax = w.chunks(q).map(norm).fold(0.0, f64::max);
        let k = mc.n_draws;
        let mw = (sample.n * k * p <= CACHE_LIMIT).then(|| {
            let mut out = vec![0.0; sample.n * k * p];
            out.par_chunks_mut(k * p).enumerate().for_each(|(i, block)| {
                let m = sample.mat(i);
                for (wk, dst) in w.chunks(q).zip(block.chunks_mut(p)) {
                    mat_vec(m, p, q, wk, dst);
                }
            });
            out
        });
        Self { k, q, w, wmax, mw }
    }

    /// Writes `M_i W_k` into `out`.
    #[inline]
    fn product(&self, sample: &MatrixSample, i: usize, k: usize, out: &mut [f64]) {
        let p = sample.p;
        match &self.mw {
            Some(mw) => out.copy_from_slice(&mw[(i * self.k + k) * p..(i * self.k + k + 1) * p]),
            None => mat_vec(sample.mat(i), p, self.q, &self.w[k * self.q..(k + 1) * self.q], out),
        }
    }
}

/// A smooth function of a direction pair with its gradient.
pub(crate) trait PairFunction: Sync {
    fn shape(&self) -> (usize, usize);

    /// Value at `(xi, theta)`; writes `[d/dxi; d/dtheta]` into `grad`.
    fn value_grad(&self, xi: &[f64], theta: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, xi: &[f64], theta: &[f64]) -> f64 {
        let (p, q) = self.shape();
        let mut g = vec![0.0; p + q];
        self.value_grad(xi, theta, &mut g)
    }
}

/// Rows processed per parallel task; fixed so sums do not depend on threads.
const ROW_CHUNK: usize = 16;

/// The bilinear estimator `E(xi, theta)` at fixed scales.
pub(crate) struct Bilinear<'a> {
    sample: &'a MatrixSample,
    lambda: f64,
    beta: f64,
    gamma: f64,
    /// `gamma^{-1/2}`
    c: f64,
    /// `beta^{-1/2}`
    inv_sb: f64,
    draws: Draws,
    /// Rows whose correction term vanishes for every draw and direction.
    quiet: Vec<bool>,
}

struct Partial {
    closed: f64,
    resid: f64,
    per_draw: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> Bilinear<'a> {
    pub(crate) fn new(sample: &'a MatrixSample, params: BilinearScaleParams, mc: McConfig) -> Self {
        let draws = Draws::new(sample, mc);
        let c = 1.0 / params.gamma.sqrt();
        let inv_sb = 1.0 / params.beta.sqrt();
        // |m| and s are at most lambda |M_i|_op (1 + c |W_k|) (times 1/sqrt(beta) for s)
        let reach = params.lambda * (1.0 + c * draws.wmax) * (1.0 + TAIL_Z * inv_sb);
        let quiet = sample.op_norms.iter().map(|o| reach * o * (1.0 + 1e-12) < std::f64::consts::SQRT_2).collect();
        Self { sample, lambda: params.lambda, beta: params.beta, gamma: params.gamma, c, inv_sb, draws, quiet }
    }

    fn rows(
        &self,
        xi: &[f64],
        theta: &[f64],
        rows: std::ops::Range<usize>,
        want_grad: bool,
        want_draws: bool,
    ) -> Partial {
        let s = self.sample;
        let (p, q) = (s.p, s.q);
        let kk = self.draws.k;
        let lam = self.lambda;
        let l2 = lam * lam;
        let (beta, gamma) = (self.beta, self.gamma);
        let mut out = Partial {
            closed: 0.0,
            resid: 0.0,
            per_draw: if want_draws { vec![0.0; kk] } else { Vec::new() },
            grad: if want_grad { vec![0.0; p + q] } else { Vec::new() },
        };
        let mut y = vec![0.0; p];
        let mut z = vec![0.0; q];
        let mut w = vec![0.0; q];
        let mut mz = vec![0.0; p];
        let mut mw = vec![0.0; p];
        let mut mtmz = vec![0.0; q];
        let mut u = vec![0.0; p];
        let mut yk = vec![0.0; p];
        let mut acc_s = vec![0.0; p];
        let mut back = vec![0.0; q];
        for i in rows {
            let m = s.mat(i);
            mat_vec(m, p, q, theta, &mut y);
            mat_t_vec(m, p, q, xi, &mut z);
            mat_t_vec(m, p, q, &y, &mut w);
            let a = dot(xi, &y);
            let ny = dot(&y, &y);
            let nz = dot(&z, &z);
            let h = s.hs2[i];
            let cross = dot(&z, &w);
            out.closed += a
                - l2 * a * a * a / 6.0
                - l2 * a * ny / (2.0 * beta)
                - l2 * a * nz / (2.0 * gamma)
                - l2 * a * h / (2.0 * beta * gamma)
                - l2 * cross / (beta * gamma);
            if want_grad {
                let ca = 1.0
                    - 0.5 * l2 * a * a
                    - l2 * ny / (2.0 * beta)
                    - l2 * nz / (2.0 * gamma)
                    - l2 * h / (2.0 * beta * gamma);
                mat_vec(m, p, q, &z, &mut mz);
                mat_vec(m, p, q, &w, &mut mw);
                mat_t_vec(m, p, q, &mz, &mut mtmz);
                let (gx, gt) = out.grad.split_at_mut(p);
                for j in 0..p {
                    gx[j] += ca * y[j] - l2 * a / gamma * mz[j] - l2 / (beta * gamma) * mw[j];
                }
                for j in 0..q {
                    gt[j] += ca * z[j] - l2 * a / beta * w[j] - l2 / (beta * gamma) * mtmz[j];
                }
            }
            if self.quiet[i] {
                continue;
            }
            // correction term, averaged over theta' = theta + c W_k
            let mut sum_rm = 0.0;
            acc_s.iter_mut().for_each(|x| *x = 0.0);
            let inv_k = 1.0 / kk as f64;
            for k in 0..kk {
                self.draws.product(s, i, k, &mut u);
                for j in 0..p {
                    yk[j] = y[j] + self.c * u[j];
                }
                let mk = lam * dot(xi, &yk);
                let nyk = norm(&yk);
                let sk = lam * self.inv_sb * nyk;
                let (r, rm, rs) = r_sym_parts(mk, sk);
                out.resid += r;
                if want_draws {
                    out.per_draw[k] += r;
                }
                if want_grad && (rm != 0.0 || rs != 0.0) {
                    let gx = &mut out.grad[..p];
                    for j in 0..p {
                        gx[j] += rm * yk[j] * inv_k;
                    }
                    sum_rm += rm;
                    if nyk > 0.0 {
                        for j in 0..p {
                            acc_s[j] += rs * yk[j] / nyk;
                        }
                    }
                }
            }
            if want_grad {
                mat_t_vec(m, p, q, &acc_s, &mut back);
                let gt = &mut out.grad[p..];
                for j in 0..q {
                    gt[j] += (sum_rm * z[j] + self.inv_sb * back[j]) * inv_k;
                }
            }
        }
        out
    }

    fn evaluate(&self, xi: &[f64], theta: &[f64], grad: Option<&mut [f64]>, want_draws: bool) -> (f64, f64) {
        let n = self.sample.n;
        let want_grad = grad.is_some();
        let chunks: Vec<std::ops::Range<usize>> =
            (0..n).step_by(ROW_CHUNK).map(|a| a..(a + ROW_CHUNK).min(n)).collect();
        let parts: Vec<Partial> =
            chunks.into_par_iter().map(|r| self.rows(xi, theta, r, want_grad, want_draws)).collect();
        let nf = n as f64;
        let kk = self.draws.k as f64;
        let mut closed = 0.0;
        let mut resid = 0.0;
        let mut per_draw = vec![0.0; if want_draws { self.draws.k } else { 0 }];
        for part in &parts {
            closed += part.closed;
            resid += part.resid;
            for (a, b) in per_draw.iter_mut().zip(&part.per_draw) {
                *a += b;
            }
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x = 0.0);
            for part in &parts {
                for (a, b) in g.iter_mut().zip(&part.grad) {
                    *a += b;
                }
            }
            g.iter_mut().for_each(|x| *x /= nf);
        }
        let value = closed / nf + resid / (nf * self.lambda * kk);
        let stderr = if want_draws && self.draws.k > 1 {
            let scale = 1.0 / (nf * self.lambda);
            let mean = per_draw.iter().sum::<f64>() * scale / kk;
            let var = per_draw.iter().map(|r| (r * scale - mean).powi(2)).sum::<f64>() / (kk - 1.0);
            (var / kk).sqrt()
        } else {
            0.0
        };
        (value, stderr)
    }

    pub(crate) fn value_stderr(&self, xi: &[f64], theta: &[f64]) -> (f64, f64) {
        self.evaluate(xi, theta, None, true)
    }
}

impl PairFunction for Bilinear<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.sample.p, self.sample.q)
    }

    fn value_grad(&self, xi: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(xi, theta, Some(grad), false).0
    }

    fn value(&self, xi: &[f64], theta: &[f64]) -> f64 {
        self.evaluate(xi, theta, None, false).0
    }
}

fn check_pair(sample: &MatrixSample, xi: &[f64], theta: &[f64]) -> Result<()> {
    crate::vector_mean::check_unit(xi, sample.p)?;
    crate::vector_mean::check_unit(theta, sample.q)
}

/// `E(xi, theta)` and the Monte-Carlo standard error of its correction term.
pub fn bilinear_estimate(
    sample: &MatrixSample,
    xi: &[f64],
    theta: &[f64],
    params: BilinearScaleParams,
    mc: McConfig,
) -> Result<(f64, f64)> {
    check_pair(sample, xi, theta)?;
    Ok(Bilinear::new(sample, params, mc).value_stderr(xi, theta))
}

/// Scales with `beta = gamma = 2 max{(t + u)/v, sqrt(T/v)}`, and the
/// resulting deviation bound `B_n`.
pub fn select_params_matrix(n: usize, bounds: MatMomentBounds, delta: f64) -> Result<(BilinearScaleParams, f64)> {
    check_delta(delta)?;
    if n == 0 {
        return domain("sample size must be at least 1");
    }
    let beta = 2.0 * bounds.shape_ratio();
    let params_bound = scaled_bound(n, bounds, beta, beta, delta);
    Ok((BilinearScaleParams::new(params_bound.0, beta, beta)?, params_bound.1))
}

/// `(lambda, B_n)` at given `beta`, `gamma`.
fn scaled_bound(n: usize, b: MatMomentBounds, beta: f64, gamma: f64, delta: f64) -> (f64, f64) {
    let l = (1.0 / delta).ln();
    let nf = n as f64;
    let var = b.v + b.t / beta + b.u / gamma + b.t_hs / (beta * gamma);
    let kl = beta + gamma + 2.0 * l;
    ((kl / (nf * var)).sqrt(), (var * kl / nf).sqrt())
}

/// `sqrt(2 v / n (2 log(1/delta) + 4 max{(t + u)/v, sqrt(T/v)}))`, an upper
/// bound on `B_n` at the default scales.
pub fn operator_bound_simple(n: usize, bounds: MatMomentBounds, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let l = (1.0 / delta).ln();
    Ok((2.0 * bounds.v / n as f64 * (2.0 * l + 4.0 * bounds.shape_ratio())).sqrt())
}

/// `A_n = sqrt(T/n) + sqrt(2 v log(1/delta)/n)` of the flattened estimator.
pub fn hs_bound(n: usize, bounds: MatMomentBounds, delta: f64) -> Result<f64> {
    deviation_radius(n, VecMomentBounds::new(bounds.v, bounds.t_hs)?, delta)
}

/// Worst pair of `(xi, theta) -> <xi, m theta> - E(xi, theta)` as a cut in `m`,
/// optionally paired with the flattened Hilbert-Schmidt constraint.
struct MatrixCuts<'a, F: PairFunction> {
    f: &'a F,
    op_target: f64,
    hs: Option<(&'a SymDirectional<'a>, f64)>,
    base: Vec<f64>,
    hs_base: Vec<f64>,
    opts: &'a FitOptions,
    round: u64,
    worst_pairs: Vec<Vec<f64>>,
    worst_hs: Vec<Vec<f64>>,
    seen: Vec<Seen>,
}

#[derive(Clone)]
struct Seen {
    m: Vec<f64>,
    op_gap: f64,
    pair: Vec<f64>,
    hs_gap: Option<f64>,
}

/// Objective of the pair search for fixed `m`.
fn pair_gap<F: PairFunction>(f: &F, m: &[f64], x: &[f64], g: &mut [f64]) -> f64 {
    let (p, q) = f.shape();
    let (xi, theta) = x.split_at(p);
    let e = f.value_grad(xi, theta, g);
    let mut mt = vec![0.0; p];
    let mut mtx = vec![0.0; q];
    mat_vec(m, p, q, theta, &mut mt);
    mat_t_vec(m, p, q, xi, &mut mtx);
    for j in 0..p {
        g[j] = mt[j] - g[j];
    }
    for j in 0..q {
        g[p + j] = mtx[j] - g[p + j];
    }
    dot(xi, &mt) - e
}

/// Leading singular pairs of a row-major `p x q` matrix, both signs of `xi`.
fn singular_starts(a: &[f64], p: usize, q: usize, count: usize) -> Vec<Vec<f64>> {
    if a.iter().all(|x| *x == 0.0) {
        return Vec::new();
    }
    let svd = DMatrix::from_row_slice(p, q, a).svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut out = Vec::new();
    for &r in order.iter().take(count) {
        let xi: Vec<f64> = u.column(r).iter().copied().collect();
        let theta: Vec<f64> = vt.row(r).iter().copied().collect();
        for sign in [1.0, -1.0] {
            let mut x: Vec<f64> = xi.iter().map(|v| sign * v).collect();
            x.extend_from_slice(&theta);
            out.push(x);
        }
    }
    out
}

impl<F: PairFunction> MatrixCuts<'_, F> {
    fn search_pair(&mut self, m: &[f64]) -> (Vec<f64>, f64) {
        let (p, q) = self.f.shape();
        let diff: Vec<f64> = m.iter().zip(&self.base).map(|(a, b)| a - b).collect();
        let mut warm = self.worst_pairs.clone();
        warm.extend(singular_starts(&diff, p, q, 2));
        let f = |x: &[f64], g: &mut [f64]| pair_gap(self.f, m, x, g);
        let res = self.opts.search(self.round).maximize(&[p, q], &f, &warm);
        self.worst_pairs.insert(0, res.point.clone());
        self.worst_pairs.truncate(4);
        (res.point, res.value)
    }

    fn search_hs(&mut self, oracle: &SymDirectional<'_>, m: &[f64]) -> (Vec<f64>, f64) {
        let d = m.len();
        let mut warm = self.worst_hs.clone();
        let diff: Vec<f64> = m.iter().zip(&self.hs_base).map(|(a, b)| a - b).collect();
        if norm(&diff) > 0.0 {
            warm.push(diff.clone());
            warm.push(diff.iter().map(|x| -x).collect());
        }
        let f = |th: &[f64], g: &mut [f64]| {
            let e = oracle.value_grad(th, g);
            for (gi, mi) in g.iter_mut().zip(m) {
                *gi = mi - *gi;
            }
            dot(th, m) - e
        };
        let res = self.opts.search(self.round ^ 0x4853).maximize(&[d], &f, &warm);
        self.worst_hs.insert(0, res.point.clone());
        self.worst_hs.truncate(4);
        (res.point, res.value)
    }

    fn evaluate(&mut self, m: &[f64]) -> (Cut, Seen) {
        let (p, q) = self.f.shape();
        let (pair, op_gap) = self.search_pair(m);
        let slope: Vec<f64> = (0..p * q).map(|idx| pair[idx / q] * pair[p + idx % q]).collect();
        let op_cut = Cut { offset: dot(&slope, m) - op_gap + self.op_target, slope };
        let mut seen = Seen { m: m.to_vec(), op_gap, pair, hs_gap: None };
        let mut cut = op_cut;
        if let Some((oracle, hs_target)) = self.hs {
            let (dir, hs_gap) = self.search_hs(oracle, m);
            seen.hs_gap = Some(hs_gap);
            if hs_gap - hs_target > op_gap - self.op_target {
                cut = Cut { offset: dot(&dir, m) - hs_gap + hs_target, slope: dir };
            }
        }
        self.round += 1;
        (cut, seen)
    }
}

impl<F: PairFunction> CutOracle for MatrixCuts<'_, F> {
    fn cut(&mut self, m: &[f64]) -> Cut {
        let (cut, seen) = self.evaluate(m);
        self.seen.push(seen);
        cut
    }
}

struct PairFit {
    m_hat: Vec<f64>,
    op_gap: f64,
    worst_pair: Vec<f64>,
    hs_gap: Option<f64>,
    rounds: usize,
    oracle_calls: usize,
    reached: bool,
}

/// Minimizes `max(h_op(m) - op_target, h_hs(m) - hs_target)` where the HS
/// part is present only for combined fits. Starts from `m_ij = E(e_i, e_j)`
/// with the axis cuts of both families.
fn fit_pairs<F: PairFunction>(
    f: &F,
    op_target: f64,
    hs: Option<(&SymDirectional<'_>, f64)>,
    opts: &FitOptions,
    mut cfg: BundleConfig,
    stop: f64,
) -> PairFit {
    let (p, q) = f.shape();
    let dim = p * q;
    let mut base = vec![0.0; dim];
    let mut cuts = Vec::new();
    let mut oracle_calls = 0;
    for i in 0..p {
        for j in 0..q {
            let mut xi = vec![0.0; p];
            let mut theta = vec![0.0; q];
            xi[i] = 1.0;
            theta[j] = 1.0;
            let e = f.value(&xi, &theta);
            oracle_calls += 1;
            base[i * q + j] = e;
            let mut slope = vec![0.0; dim];
            slope[i * q + j] = 1.0;
            cuts.push(Cut { slope: slope.clone(), offset: e + op_target });
            slope[i * q + j] = -1.0;
            cuts.push(Cut { slope, offset: -e + op_target });
        }
    }
    let mut hs_base = vec![0.0; dim];
    if let Some((oracle, hs_target)) = hs {
        for idx in 0..dim {
            let mut e = vec![0.0; dim];
            e[idx] = 1.0;
            let up = oracle.value(&e);
            e[idx] = -1.0;
            let down = oracle.value(&e);
            oracle_calls += 2;
            hs_base[idx] = 0.5 * (up - down);
            let mut slope = vec![0.0; dim];
            slope[idx] = 1.0;
            cuts.push(Cut { slope: slope.clone(), offset: up + hs_target });
            slope[idx] = -1.0;
            cuts.push(Cut { slope, offset: down + hs_target });
        }
    }
    cfg.max_rounds = opts.max_rounds;
    let mut oracle = MatrixCuts {
        f,
        op_target,
        hs,
        base: base.clone(),
        hs_base,
        opts,
        round: 0,
        worst_pairs: Vec::new(),
        worst_hs: Vec::new(),
        seen: Vec::new(),
    };
    let res = optim::minimize(&mut oracle, base, cuts, stop, &cfg);
    let seen = match oracle.seen.iter().rev().find(|s| s.m == res.center) {
        Some(s) => s.clone(),
        None => oracle.evaluate(&res.center).1,
    };
    PairFit {
        m_hat: res.center,
        op_gap: seen.op_gap,
        worst_pair: seen.pair,
        hs_gap: seen.hs_gap,
        rounds: res.rounds,
        oracle_calls: res.oracle_calls + oracle_calls,
        reached: res.reached,
    }
}

fn to_rows(m: &[f64], q: usize) -> Vec<Vec<f64>> {
    m.chunks(q).map(|r| r.to_vec()).collect()
}

/// Operator-norm fit at explicit scales: drives the gap below `target`.
pub fn fit_matrix_with_params(
    sample: &MatrixSample,
    params: BilinearScaleParams,
    target: f64,
    mc: McConfig,
    opts: &FitOptions,
) -> Result<MatrixEstimate> {
    if !(target > 0.0) {
        return domain(format!("fit target must be positive, got {target}"));
    }
    let f = Bilinear::new(sample, params, mc);
    let fit = fit_pairs(&f, target, None, opts, BundleConfig::for_dim(sample.p * sample.q), opts.tol);
    let (p, _) = (sample.p, sample.q);
    let (_, stderr) = f.value_stderr(&fit.worst_pair[..p], &fit.worst_pair[p..]);
    Ok(MatrixEstimate {
        m_hat: to_rows(&fit.m_hat, sample.q),
        op_radius: 2.0 * target,
        hs_radius: None,
        delta: f64::NAN,
        certified: fit.reached,
        mc_stderr: stderr,
        constant_c: None,
        diagnostics: MatrixDiagnostics {
            rounds: fit.rounds,
            oracle_calls: fit.oracle_calls,
            op_gap: fit.op_gap,
            op_target: target,
            hs_gap: None,
            hs_target: None,
        },
    })
}

pub fn fit_matrix_operator(
    sample: &MatrixSample,
    bounds: MatMomentBounds,
    delta: f64,
    mc: McConfig,
) -> Result<MatrixEstimate> {
    fit_matrix_operator_with(sample, bounds, delta, mc, &FitOptions::default())
}

/// Estimate with `|m_hat - E M|_op <= 2 B_n` with probability `1 - delta`
/// when certified.
pub fn fit_matrix_operator_with(
    sample: &MatrixSample,
    bounds: MatMomentBounds,
    delta: f64,
    mc: McConfig,
    opts: &FitOptions,
) -> Result<MatrixEstimate> {
    let (params, b_n) = select_params_matrix(sample.n, bounds, delta)?;
    let mut est = fit_matrix_with_params(sample, params, b_n, mc, opts)?;
    est.delta = delta;
    Ok(est)
}

pub fn fit_matrix_combined(
    sample: &MatrixSample,
    bounds: MatMomentBounds,
    delta: f64,
    mc: McConfig,
) -> Result<MatrixEstimate> {
    fit_matrix_combined_with(sample, bounds, delta, mc, &FitOptions::default())
}

/// Estimate meeting both the operator constraint (radius `2 B_n`) and the
/// flattened Hilbert-Schmidt constraint (radius `2 A_n`), each pipeline at
/// level `delta`, so both radii hold together with probability `1 - 2 delta`.
pub fn fit_matrix_combined_with(
    sample: &MatrixSample,
    bounds: MatMomentBounds,
    delta: f64,
    mc: McConfig,
    opts: &FitOptions,
) -> Result<MatrixEstimate> {
    let (params, b_n) = select_params_matrix(sample.n, bounds, delta)?;
    let a_n = hs_bound(sample.n, bounds, delta)?;
    let flat = sample.flatten();
    let vb = VecMomentBounds::new(bounds.v, bounds.t_hs)?;
    let hs_params = select_params_uncentered(sample.n, vb, delta)?;
    let hs_oracle = SymDirectional::new(&flat, hs_params);
    let f = Bilinear::new(sample, params, mc);
    let fit = fit_pairs(&f, b_n, Some((&hs_oracle, a_n)), opts, BundleConfig::for_dim(sample.p * sample.q), opts.tol);
    let p = sample.p;
    let (_, stderr) = f.value_stderr(&fit.worst_pair[..p], &fit.worst_pair[p..]);
    Ok(MatrixEstimate {
        m_hat: to_rows(&fit.m_hat, sample.q),
        op_radius: 2.0 * b_n,
        hs_radius: Some(2.0 * a_n),
        delta: 2.0 * delta,
        certified: fit.reached,
        mc_stderr: stderr,
        constant_c: None,
        diagnostics: MatrixDiagnostics {
            rounds: fit.rounds,
            oracle_calls: fit.oracle_calls,
            op_gap: fit.op_gap,
            op_target: b_n,
            hs_gap: fit.hs_gap,
            hs_target: Some(a_n),
        },
    })
}

/// Constants `(A, B)` of the preliminary split, at total level `1 - delta/2`:
/// `A = 4 (sqrt(2 (v_bar + b) log(4/delta)) + sqrt(T_bar + c))^2` bounds
/// `k |m_tilde - E M|_HS^2` and
/// `B = 8 (v_bar + b)(2 log(4/delta) + 4 max{...})` bounds `k |m_tilde - E M|_op^2`.
pub fn centered_matrix_constants(cb: CenteredMatMomentBounds, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    let l4 = (4.0 / delta).ln();
    let vb = cb.v_bar + cb.b;
    let a = 4.0 * ((2.0 * vb * l4).sqrt() + (cb.t_hs_bar + cb.c).sqrt()).powi(2);
    let ratio = ((cb.t_bar + cb.u_bar + 2.0 * cb.b) / vb).max(((cb.t_hs_bar + cb.c) / vb).sqrt());
    let b = 8.0 * vb * (2.0 * l4 + 4.0 * ratio);
    Ok((a, b))
}

/// Shifted bounds for the second stage.
fn second_stage_bounds(cb: CenteredMatMomentBounds, k: usize, delta: f64) -> Result<MatMomentBounds> {
    let (a, b) = centered_matrix_constants(cb, delta)?;
    let kf = k as f64;
    // the orderings of MatMomentBounds may fail after shifting, which does
    // not matter for the formulas
    Ok(MatMomentBounds { v: cb.v_bar + b / kf, t: cb.t_bar + b / kf, u: cb.u_bar + b / kf, t_hs: cb.t_hs_bar + a / kf })
}

/// `C_{n,k} = sqrt(2 (v_bar + B/k)/(n - k) (2 log(2/delta) + 4 max{...}))`.
pub fn centered_matrix_radius(n: usize, k: usize, cb: CenteredMatMomentBounds, delta: f64) -> Result<f64> {
    if k == 0 || k >= n {
        return domain(format!("split size k must satisfy 1 <= k < n, got k = {k}, n = {n}"));
    }
    let sb = second_stage_bounds(cb, k, delta)?;
    operator_bound_simple(n - k, sb, delta / 2.0)
}

/// Two-stage estimator: a combined fit on the first `split_k` observations at
/// level `1 - delta/2`, then the operator fit on the recentered remainder at
/// level `1 - delta/2`. The radius `2 C_{n,k}` holds with probability `1 - delta`.
pub fn estimate_matrix_centered(
    sample: &MatrixSample,
    cb: CenteredMatMomentBounds,
    delta: f64,
    split_k: Option<usize>,
    mc: McConfig,
    opts: &FitOptions,
) -> Result<MatrixEstimate> {
    check_delta(delta)?;
    let n = sample.n;
    let k = split_k.unwrap_or_else(|| crate::vector_mean::default_split(n));
    if k == 0 || k >= n {
        return domain(format!("split size k must satisfy 1 <= k < n, got k = {k}, n = {n}"));
    }
    let zero = vec![0.0; sample.p * sample.q];
    let first = sample.slice_shifted(0..k, &zero)?;
    let pre_bounds =
        MatMomentBounds { v: cb.v_bar + cb.b, t: cb.t_bar + cb.b, u: cb.u_bar + cb.b, t_hs: cb.t_hs_bar + cb.c };
    let pre = fit_matrix_combined_with(&first, pre_bounds, delta / 4.0, mc, opts)?;
    let m_tilde = pre.m_hat_flat();

    let second = sample.slice_shifted(k..n, &m_tilde)?;
    let sb = second_stage_bounds(cb, k, delta)?;
    let c_nk = centered_matrix_radius(n, k, cb, delta)?;
    let (params, _) = select_params_matrix(n - k, sb, delta / 2.0)?;
    let corr = fit_matrix_with_params(&second, params, c_nk, mc, opts)?;
    let m_hat: Vec<f64> = m_tilde.iter().zip(corr.m_hat_flat()).map(|(a, b)| a + b).collect();
    Ok(MatrixEstimate {
        m_hat: to_rows(&m_hat, sample.q),
        op_radius: 2.0 * c_nk,
        hs_radius: None,
        delta,
        certified: pre.certified && corr.certified,
        mc_stderr: corr.mc_stderr,
        constant_c: None,
        diagnostics: MatrixDiagnostics {
            rounds: pre.diagnostics.rounds + corr.diagnostics.rounds,
            oracle_calls: pre.diagnostics.oracle_calls + corr.diagnostics.oracle_calls,
            op_gap: corr.diagnostics.op_gap,
            op_target: c_nk,
            hs_gap: None,
            hs_target: None,
        },
    })
}

/// One grid point of the adaptive estimator.
#[derive(Debug, Clone, Copy)]
struct GridPoint {
    lambda: f64,
    penalty: f64,
}

/// Adaptive bilinear estimator `E = E_+(xi, theta) - E_+(-xi, theta)` with
/// `E_+` the best penalized one-sided estimate over the grid. The `xi'`
/// layer is exact; `theta'` is sampled.
pub(crate) struct AdaptiveBilinear<'a> {
    sample: &'a MatrixSample,
    points: Vec<GridPoint>,
    c: f64,
    inv_sb: f64,
    draws: Draws,
}

impl<'a> AdaptiveBilinear<'a> {
    pub(crate) fn new(
        sample: &'a MatrixSample,
        grid: &AdaptiveGrid,
        chi: f64,
        delta: f64,
        mc: McConfig,
    ) -> Result<Self> {
        check_delta(delta)?;
        if !(chi > 0.0 && chi.is_finite()) {
            return domain(format!("chi must be positive, got {chi}"));
        }
        let l = (1.0 / delta).ln();
        let beta = 2.0 * chi * l;
        let n = sample.n;
        let points: Vec<GridPoint> = grid
            .indices()
            .into_iter()
            .map(|k| {
                let lambda = grid.lambda(k, n);
                let lk = (1.0 / (delta * AdaptiveGrid::weight(k))).ln();
                GridPoint { lambda, penalty: (2.0 * beta + 2.0 * lk) / (2.0 * lambda * n as f64) }
            })
            .filter(|p| p.lambda.is_finite() && p.lambda > 0.0)
            .collect();
        if points.is_empty() {
            return domain("adaptive grid has no usable point");
        }
        let draws = Draws::new(sample, mc);
        Ok(Self { sample, points, c: 1.0 / beta.sqrt(), inv_sb: 1.0 / beta.sqrt(), draws })
    }

    /// Projections `a_ik = <xi, M_i theta'_k>` and spreads `|M_i theta'_k| / sqrt(beta)`.
    fn projections(&self, xi: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.sample;
        let (p, q) = (s.p, s.q);
        let kk = self.draws.k;
        let mut a = vec![0.0; s.n * kk];
        let mut sg = vec![0.0; s.n * kk];
        a.par_chunks_mut(kk).zip(sg.par_chunks_mut(kk)).enumerate().for_each(|(i, (ai, si))| {
            let mut y = vec![0.0; p];
            let mut u = vec![0.0; p];
            mat_vec(s.mat(i), p, q, theta, &mut y);
            for k in 0..kk {
                self.draws.product(s, i, k, &mut u);
                for j in 0..p {
                    u[j] = y[j] + self.c * u[j];
                }
                ai[k] = dot(xi, &u);
                si[k] = norm(&u) * self.inv_sb;
            }
        });
        (a, sg)
    }

    /// `(value, grid index)` of `E_+` for the sign-adjusted projections.
    fn one_sided(&self, a: &[f64], sg: &[f64], sign: f64) -> (f64, usize) {
        let cnt = a.len() as f64;
        let linear = a.iter().zip(sg).map(|(x, s)| (sign * x).max(0.0) + s * INV_SQRT_2PI).sum::<f64>() / cnt;
        let mut best = (f64::NEG_INFINITY, 0);
        for (idx, pt) in self.points.iter().enumerate() {
            let upper = linear.min(0.5 / pt.lambda) - pt.penalty;
            if upper <= best.0 {
                continue;
            }
            let total: f64 =
                a.iter().zip(sg).map(|(x, s)| crate::influence::asym(pt.lambda * sign * x, pt.lambda * s)).sum();
            let value = total / (cnt * pt.lambda) - pt.penalty;
            if value > best.0 {
                best = (value, idx);
            }
        }
        best
    }

    fn one_sided_grad(&self, xi: &[f64], theta: &[f64], sign: f64, index: usize, grad: &mut [f64]) {
        let s = self.sample;
        let (p, q) = (s.p, s.q);
        let kk = self.draws.k;
        let lam = self.points[index].lambda;
        let cnt = (s.n * kk) as f64;
        let parts: Vec<Vec<f64>> = (0..s.n)
            .into_par_iter()
            .map(|i| {
                let m = s.mat(i);
                let mut g = vec![0.0; p + q];
                let mut y = vec![0.0; p];
                let mut u = vec![0.0; p];
                let mut z = vec![0.0; q];
                let mut acc = vec![0.0; p];
                let mut back = vec![0.0; q];
                mat_vec(m, p, q, theta, &mut y);
                mat_t_vec(m, p, q, xi, &mut z);
                let mut sum_dm = 0.0;
                for k in 0..kk {
                    self.draws.product(s, i, k, &mut u);
                    for j in 0..p {
                        u[j] = y[j] + self.c * u[j];
                    }
                    let nu = norm(&u);
                    let (_, dm, ds) = asym_parts(lam * sign * dot(xi, &u), lam * nu * self.inv_sb);
                    sum_dm += dm;
                    for j in 0..p {
                        g[j] += dm * sign * u[j];
                    }
                    if nu > 0.0 && ds != 0.0 {
                        for j in 0..p {
                            acc[j] += ds * u[j] / nu;
                        }
                    }
                }
                mat_t_vec(m, p, q, &acc, &mut back);
                for j in 0..q {
                    g[p + j] = sum_dm * sign * z[j] + self.inv_sb * back[j];
                }
                g
            })
            .collect();
        for g in parts {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / cnt;
            }
        }
    }

    fn evaluate(&self, xi: &[f64], theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (a, sg) = self.projections(xi, theta);
        let (plus, ip) = self.one_sided(&a, &sg, 1.0);
        let (minus, im) = self.one_sided(&a, &sg, -1.0);
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x = 0.0);
            let mut gm = vec![0.0; g.len()];
            self.one_sided_grad(xi, theta, 1.0, ip, g);
            self.one_sided_grad(xi, theta, -1.0, im, &mut gm);
            for (a, b) in g.iter_mut().zip(gm) {
                *a -= b;
            }
        }
        plus - minus
    }
}

impl PairFunction for AdaptiveBilinear<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.sample.p, self.sample.q)
    }

    fn value_grad(&self, xi: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(xi, theta, Some(grad))
    }

    fn value(&self, xi: &[f64], theta: &[f64]) -> f64 {
        self.evaluate(xi, theta, None)
    }
}

pub fn adaptive_bilinear_estimate(
    sample: &MatrixSample,
    xi: &[f64],
    theta: &[f64],
    grid: &AdaptiveGrid,
    chi: f64,
    delta: f64,
    mc: McConfig,
) -> Result<f64> {
    check_pair(sample, xi, theta)?;
    Ok(AdaptiveBilinear::new(sample, grid, chi, delta, mc)?.value(xi, theta))
}

/// `l v + (t + u)/chi + T/(l chi^2)` with `l = log(1/delta)`.
fn adaptive_variance(bounds: MatMomentBounds, chi: f64, l: f64) -> f64 {
    l * bounds.v + (bounds.t + bounds.u) / chi + bounds.t_hs / (l * chi * chi)
}

/// Grid constant `C` of the adaptive matrix bound.
pub fn adaptive_matrix_constant(
    alpha: f64,
    sigma_guess: f64,
    chi: f64,
    delta: f64,
    bounds: MatMomentBounds,
) -> Result<f64> {
    check_delta(delta)?;
    let l = (1.0 / delta).ln();
    let la = alpha.ln();
    let ratio = adaptive_variance(bounds, chi, l) / (2.0 * sigma_guess * sigma_guess * (1.0 + chi) * l * l);
    let sq2 = std::f64::consts::SQRT_2;
    Ok((0.5 * la).cosh() + alpha.sqrt() / ((1.0 + chi) * l) * (ratio.ln().abs() / (sq2 * la) + 5.0 / sq2).ln())
}

/// `B = 2 C sqrt(2 (1 + chi)/n (v l + (t + u)/chi + T/(chi^2 l)))`; the
/// estimate is within `2 B`.
pub fn adaptive_matrix_bound(
    n: usize,
    grid: &AdaptiveGrid,
    chi: f64,
    delta: f64,
    bounds: MatMomentBounds,
) -> Result<f64> {
    let c = adaptive_matrix_constant(grid.alpha, grid.sigma_guess, chi, delta, bounds)?;
    let l = (1.0 / delta).ln();
    Ok(2.0 * c * (2.0 * (1.0 + chi) / n as f64 * adaptive_variance(bounds, chi, l)).sqrt())
}

/// `chi = max{sqrt(T/v)/log(1/delta), 1}`, the choice when `T/v` is known.
pub fn optimal_chi(bounds: MatMomentBounds, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(((bounds.t_hs / bounds.v).sqrt() / (1.0 / delta).ln()).max(1.0))
}

/// `(8 C / sqrt(n)) sqrt(v l + t + u + sqrt(v T))` at the optimal `chi`.
pub fn adaptive_matrix_radius_known_ratio(
    n: usize,
    grid: &AdaptiveGrid,
    delta: f64,
    bounds: MatMomentBounds,
) -> Result<f64> {
    let chi = optimal_chi(bounds, delta)?;
    let c = adaptive_matrix_constant(grid.alpha, grid.sigma_guess, chi, delta, bounds)?;
    let l = (1.0 / delta).ln();
    let inner = bounds.v * l + bounds.t + bounds.u + (bounds.v * bounds.t_hs).sqrt();
    Ok(8.0 * c / (n as f64).sqrt() * inner.sqrt())
}

/// Adaptive estimator. With `bounds` the radius `2 B` is certified at level
/// `1 - 2 delta`; without, the fit runs to convergence and twice the achieved
/// gap is reported as a non-certified surrogate.
pub fn estimate_matrix_adaptive(
    sample: &MatrixSample,
    grid: &AdaptiveGrid,
    chi: f64,
    delta: f64,
    mc: McConfig,
    bounds: Option<MatMomentBounds>,
    opts: &FitOptions,
) -> Result<MatrixEstimate> {
    let f = AdaptiveBilinear::new(sample, grid, chi, delta, mc)?;
    let dim = sample.p * sample.q;
    let (target, stop, cfg, c) = match bounds {
        Some(b) => {
            let bound = adaptive_matrix_bound(sample.n, grid, chi, delta, b)?;
            let c = adaptive_matrix_constant(grid.alpha, grid.sigma_guess, chi, delta, b)?;
            (bound, opts.tol, BundleConfig::for_dim(dim), Some(c))
        }
        None => {
            let mut cfg = BundleConfig::for_dim(dim);
            cfg.rel_tol = 1e-6;
            (0.0, f64::NEG_INFINITY, cfg, None)
        }
    };
    let fit = fit_pairs(&f, target, None, opts, cfg, stop);
    let certified = c.is_some() && fit.reached;
    Ok(MatrixEstimate {
        m_hat: to_rows(&fit.m_hat, sample.q),
        op_radius: if c.is_some() { 2.0 * target } else { 2.0 * fit.op_gap.max(0.0) },
        hs_radius: None,
        delta: 2.0 * delta,
        certified,
        mc_stderr: f64::NAN,
        constant_c: c,
        diagnostics: MatrixDiagnostics {
            rounds: fit.rounds,
            oracle_calls: fit.oracle_calls,
            op_gap: fit.op_gap,
            op_target: if c.is_some() { target } else { f64::NAN },
            hs_gap: None,
            hs_target: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_2x2() -> MatrixSample {
        let data = vec![
            1.0, -0.5, 0.3, 2.0, //
            -0.7, 0.2, 1.1, 0.4, //
            3.0, 0.0, -1.2, 0.8,
        ];
        MatrixSample::new(data, 3, 2, 2).unwrap()
    }

    #[test]
    fn quiet_rows_have_zero_correction() {
        let s = sample_2x2();
        let params = BilinearScaleParams::new(0.01, 50.0, 50.0).unwrap();
        let f = Bilinear::new(&s, params, McConfig::new(50, 1).unwrap());
        assert!(f.quiet.iter().all(|q| *q));
        let (v, se) = f.value_stderr(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(se, 0.0);
        // closed form only
        let mut expect = 0.0;
        let l2 = 1e-4;
        for i in 0..3 {
            let m = s.mat(i);
            let a = m[1];
            let ny = m[1] * m[1] + m[3] * m[3];
            let nz = m[0] * m[0] + m[1] * m[1];
            let h = dot(m, m);
            // <xi, M M^T M theta> with xi = e1, theta = e2
            let mmt = [m[0] * m[0] + m[1] * m[1], m[0] * m[2] + m[1] * m[3]];
            let cross = mmt[0] * m[1] + mmt[1] * m[3];
            expect += a
                - l2 * a * a * a / 6.0
                - l2 * a * ny / 100.0
                - l2 * a * nz / 100.0
                - l2 * a * h / 5000.0
                - l2 * cross / 2500.0;
        }
        assert!((v - expect / 3.0).abs() < 1e-15, "{v} {}", expect / 3.0);
    }

    #[test]
    fn gradient_matches_differences() {
        let s = sample_2x2();
        let params = BilinearScaleParams::new(0.8, 3.0, 2.0).unwrap();
        let f = Bilinear::new(&s, params, McConfig::new(40, 3).unwrap());
        assert!(f.quiet.iter().any(|q| !q));
        let xi = [0.6, -0.8];
        let theta = [0.28, 0.96];
        let mut g = vec![0.0; 4];
        f.value_grad(&xi, &theta, &mut g);
        let h = 1e-6;
        for j in 0..4 {
            let mut x = [xi[0], xi[1], theta[0], theta[1]];
            x[j] += h;
            let up = f.value(&x[..2], &x[2..]);
            x[j] -= 2.0 * h;
            let down = f.value(&x[..2], &x[2..]);
            let fd = (up - down) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-6, "j={j} {} {fd}", g[j]);
        }
    }

    #[test]
    fn adaptive_gradient_matches_differences() {
        let s = sample_2x2();
        let grid = AdaptiveGrid::with_k_max(1.0, std::f64::consts::E, 6).unwrap();
        let f = AdaptiveBilinear::new(&s, &grid, 1.0, 0.1, McConfig::new(30, 5).unwrap()).unwrap();
        let xi = [0.6, -0.8];
        let theta = [0.28, 0.96];
        let mut g = vec![0.0; 4];
        f.value_grad(&xi, &theta, &mut g);
        let h = 1e-7;
        for j in 0..4 {
            let mut x = [xi[0], xi[1], theta[0], theta[1]];
            x[j] += h;
            let up = f.value(&x[..2], &x[2..]);
            x[j] -= 2.0 * h;
            let down = f.value(&x[..2], &x[2..]);
            let fd = (up - down) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-5, "j={j} {} {fd}", g[j]);
        }
    }

    #[test]
    fn cache_and_direct_products_agree() {
        let s = sample_2x2();
        let mc = McConfig::new(7, 9).unwrap();
        let mut d = Draws::new(&s, mc);
        let mut a = vec![0.0; 2];
        let mut b = vec![0.0; 2];
        d.product(&s, 2, 5, &mut a);
        d.mw = None;
        d.product(&s, 2, 5, &mut b);
        assert_eq!(a, b);
    }
}
