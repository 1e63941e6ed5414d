//! Robust least squares from plug-in estimates `G_hat ~ E X X^T` and
//! `V_hat ~ E Y X`: bounded-domain minimization, ridge fits with confidence
//! regions, improved picks, minimum-norm members and model selection.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::linalg::sym_eigen_sorted;
use crate::matrix_mean::{fit_matrix_operator_with, MatMomentBounds, MatrixSample, McConfig};
use crate::vector_mean::{check_delta, estimate_mean_uncentered_with, FitOptions, VecMomentBounds, VectorSample};

/// Paired design rows and responses.
#[derive(Debug, Clone)]
pub struct RegressionData {
    x: VectorSample,
    y: Vec<f64>,
}

impl RegressionData {
    pub fn new(x: VectorSample, y: Vec<f64>) -> Result<Self> {
        if x.n() != y.len() {
            return invalid(format!("{} design rows but {} responses", x.n(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return invalid("responses must be finite");
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &VectorSample {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.d()
    }
}

/// Moment bounds of the design and of `Y X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionBounds {
    /// `sup_theta E <theta, X>^4`
    pub v: f64,
    /// `E |X|^4`
    #[serde(rename = "T")]
    pub t: f64,
    /// `sup_theta E Y^2 <theta, X>^2`
    #[serde(alias = "v'")]
    pub v_prime: f64,
    /// `E Y^2 |X|^2`
    #[serde(rename = "T_prime", alias = "T'")]
    pub t_prime: f64,
}

impl RegressionBounds {
    pub fn new(v: f64, t: f64, v_prime: f64, t_prime: f64) -> Result<Self> {
        for (name, x) in [("v", v), ("T", t), ("v'", v_prime), ("T'", t_prime)] {
            if !(x > 0.0 && x.is_finite()) {
                return domain(format!("{name} must be positive and finite, got {x}"));
            }
        }
        if t < v || t_prime < v_prime {
            return domain("need T >= v and T' >= v'");
        }
        Ok(Self { v, t, v_prime, t_prime })
    }

    /// Operator-norm radius `2 sqrt((2v/n)(2 log(1/delta) + 12 sqrt(T/v)))` of `G_hat`.
    pub fn epsilon(&self, n: usize, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        let l = (1.0 / delta).ln();
        Ok(2.0 * (2.0 * self.v / n as f64 * (2.0 * l + 12.0 * (self.t / self.v).sqrt())).sqrt())
    }

    /// Radius `2 (sqrt(T'/n) + sqrt(2 v' log(1/delta)/n))` of `V_hat`.
    pub fn eta(&self, n: usize, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        let n = n as f64;
        let l = (1.0 / delta).ln();
        Ok(2.0 * ((self.t_prime / n).sqrt() + (2.0 * self.v_prime * l / n).sqrt()))
    }

    /// Bounds for the matrix mean of `X X^T`: `t = u = sqrt(v T)` by Cauchy-Schwarz.
    pub fn gram_matrix_bounds(&self) -> Result<MatMomentBounds> {
        let tu = (self.v * self.t).sqrt();
        MatMomentBounds::new(self.v, tu, tu, self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginEstimates {
    #[serde(rename = "G_hat")]
    pub g_hat: Vec<Vec<f64>>,
    #[serde(rename = "V_hat")]
    pub v_hat: Vec<f64>,
    /// Bound on `|G_hat - G|_op`.
    pub epsilon: f64,
    /// Bound on `|V_hat - V|`.
    pub eta: f64,
    /// Both bounds hold together with probability `1 - delta`.
    pub delta: f64,
    pub certified: bool,
}

impl PluginEstimates {
    /// Symmetrizes `g_hat` and clips its negative eigenvalues; the largest
    /// clipped magnitude is added to `epsilon`.
    pub fn new(g_hat: Vec<Vec<f64>>, v_hat: Vec<f64>, epsilon: f64, eta: f64, delta: f64) -> Result<Self> {
        let d = v_hat.len();
        if d == 0 || g_hat.len() != d || g_hat.iter().any(|r| r.len() != d) {
            return invalid("G_hat must be d x d with d = len(V_hat) >= 1");
        }
        if !(epsilon >= 0.0 && eta >= 0.0) {
            return domain(format!("epsilon and eta must be nonnegative, got {epsilon}, {eta}"));
        }
        if g_hat.iter().flatten().chain(&v_hat).any(|x| !x.is_finite()) {
            return invalid("plug-in estimates must be finite");
        }
        let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (g_hat[i][j] + g_hat[j][i]));
        let (vals, vecs) = sym_eigen_sorted(&m);
        let clipped = vals.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let mut psd = DMatrix::zeros(d, d);
        for (k, v) in vals.iter().enumerate() {
            if *v > 0.0 {
                let c = vecs.column(k);
                psd += *v * &c * c.transpose();
            }
        }
        let psd = 0.5 * (&psd + psd.transpose());
        Ok(Self {
            g_hat: (0..d).map(|i| psd.row(i).iter().copied().collect()).collect(),
            v_hat,
            epsilon: epsilon + clipped,
            eta,
            delta,
            certified: true,
        })
    }

    pub fn d(&self) -> usize {
        self.v_hat.len()
    }

    pub fn g(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |i, j| self.g_hat[i][j])
    }

    pub fn v(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.v_hat)
    }

    fn shifted(&self, lambda: f64) -> DMatrix<f64> {
        let d = self.d();
        self.g() + lambda * DMatrix::identity(d, d)
    }
}

/// `G_hat` from the operator-norm matrix mean of `X X^T` and `V_hat` from
/// the vector mean of `Y X`, each at level `delta`.
pub fn build_plugin(
    data: &RegressionData,
    bounds: RegressionBounds,
    delta: f64,
    mc: McConfig,
    opts: &FitOptions,
) -> Result<PluginEstimates> {
    check_delta(delta)?;
    let (n, d) = (data.n(), data.d());
    let mut outer = Vec::with_capacity(n * d * d);
    let mut yx = Vec::with_capacity(n * d);
    for (x, y) in data.x().rows().zip(data.y()) {
        for a in x {
            outer.extend(x.iter().map(|b| a * b));
        }
        yx.extend(x.iter().map(|a| y * a));
    }
    let mats = MatrixSample::new(outer, n, d, d)?;
    let g_fit = fit_matrix_operator_with(&mats, bounds.gram_matrix_bounds()?, delta, mc, opts)?;
    let yx = VectorSample::new(yx, n, d)?;
    let v_fit = estimate_mean_uncentered_with(&yx, VecMomentBounds::new(bounds.v_prime, bounds.t_prime)?, delta, opts)?;
    let eps = bounds.epsilon(n, delta)?.max(g_fit.op_radius);
    let eta = bounds.eta(n, delta)?.max(v_fit.radius);
    let mut out = PluginEstimates::new(g_fit.m_hat, v_fit.m_hat, eps, eta, 2.0 * delta)?;
    out.certified = g_fit.certified && v_fit.certified;
    Ok(out)
}

/// `<theta, (G_hat + lambda I) theta> - 2 <theta, V_hat>`.
pub fn empirical_risk(theta: &[f64], plugin: &PluginEstimates, lambda: f64) -> Result<f64> {
    if theta.len() != plugin.d() {
        return invalid("theta has the wrong dimension");
    }
    let d = plugin.d();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += theta[i] * plugin.g_hat[i][j] * theta[j];
        }
    }
    let norm2: f64 = theta.iter().map(|t| t * t).sum();
    let lin: f64 = theta.iter().zip(&plugin.v_hat).map(|(t, v)| t * v).sum();
    Ok(quad + lambda * norm2 - 2.0 * lin)
}

/// Minimizer of `sum_i (h_i z_i^2 - 2 g_i z_i)` over `|z| <= r` for
/// `h_i >= 0`: `z_i = g_i / (h_i + mu)` with the smallest feasible `mu >= 0`.
fn ball_quadratic(h: &[f64], g: &[f64], r: f64) -> Vec<f64> {
    let scale = h.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let tiny = 1e-14 * scale;
    let norm2 = |mu: f64| -> f64 {
        h.iter()
            .zip(g)
            .map(|(hi, gi)| {
                let den = hi + mu;
                if den <= tiny {
                    if *gi == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (gi / den).powi(2)
                }
            })
            .sum()
    };
    let at = |mu: f64| -> Vec<f64> {
        h.iter().zip(g).map(|(hi, gi)| if hi + mu <= tiny { 0.0 } else { gi / (hi + mu) }).collect()
    };
    if r <= 0.0 {
        return vec![0.0; h.len()];
    }
    if norm2(0.0) <= r * r {
        return at(0.0);
    }
    // norm2 is decreasing in mu; bracket then Newton on 1/|z| - 1/r with bisection safeguard
    let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut lo = 0.0;
    let mut hi = gnorm / r + tiny;
    while norm2(hi) > r * r {
        hi *= 2.0;
    }
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let s2 = norm2(mu);
        if s2 > r * r {
            lo = mu;
        } else {
            hi = mu;
        }
        let s = s2.sqrt();
        // d|z|^2/dmu = -2 sum g^2/(h+mu)^3
        let d2: f64 = h.iter().zip(g).map(|(hi, gi)| -2.0 * gi * gi / (hi + mu).powi(3)).sum();
        let phi = 1.0 / s - 1.0 / r;
        let dphi = -0.5 * d2 / (s2 * s);
        let mut next = mu - phi / dphi;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - mu).abs() <= 1e-15 * mu.max(1e-300) || hi - lo <= 1e-15 * hi {
            mu = next;
            break;
        }
        mu = next;
    }
    let z = at(mu);
    let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if zn > r {
        z.iter().map(|x| x * r / zn).collect()
    } else {
        z
    }
}

/// Minimizer of `R_hat` over the ball `|theta| <= b` and the excess-risk
/// bound `2 b (epsilon b + 2 eta)`.
pub fn minimize_over_ball(plugin: &PluginEstimates, b: f64) -> Result<(Vec<f64>, f64)> {
    if !(b > 0.0 && b.is_finite()) {
        return domain(format!("ball radius must be positive, got {b}"));
    }
    let (vals, vecs) = sym_eigen_sorted(&plugin.g());
    let gp = vecs.transpose() * plugin.v();
    let h: Vec<f64> = vals.iter().map(|v| v.max(0.0)).collect();
    let z = ball_quadratic(&h, gp.as_slice(), b);
    let theta = &vecs * DVector::from_vec(z);
    Ok((theta.iter().copied().collect(), 2.0 * b * (plugin.epsilon * b + 2.0 * plugin.eta)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    /// `G_hat + lambda I` was singular; `theta_hat` is the minimum-norm
    /// least-squares solution.
    pub min_norm: bool,
}

pub fn ridge_fit(plugin: &PluginEstimates, lambda: f64) -> Result<RidgeFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return domain(format!("ridge parameter must be nonnegative, got {lambda}"));
    }
    let (vals, vecs) = sym_eigen_sorted(&plugin.shifted(lambda));
    let vp = vecs.transpose() * plugin.v();
    let top = vals.iter().cloned().fold(0.0, f64::max);
    let cut = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut singular = false;
    let z: Vec<f64> = vals
        .iter()
        .zip(vp.iter())
        .map(|(a, c)| {
            if *a > cut {
                c / a
            } else {
                singular = true;
                0.0
            }
        })
        .collect();
    let theta = &vecs * DVector::from_vec(z);
    Ok(RidgeFit { lambda, theta_hat: theta.iter().copied().collect(), min_norm: singular })
}

/// Confidence region `{theta : |(G_hat + lambda)(theta - theta_hat)| <= eps |theta| + eta}`,
/// optionally intersected with `|theta| <= norm_cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub plugin: PluginEstimates,
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_cap: Option<f64>,
}

impl RegionSpec {
    pub fn new(plugin: PluginEstimates, fit: &RidgeFit, norm_cap: Option<f64>) -> Result<Self> {
        if fit.theta_hat.len() != plugin.d() {
            return invalid("ridge fit and plug-in estimates disagree on the dimension");
        }
        if let Some(a) = norm_cap {
            if !(a > 0.0) {
                return domain(format!("norm cap must be positive, got {a}"));
            }
        }
        Ok(Self { plugin, lambda: fit.lambda, theta_hat: fit.theta_hat.clone(), norm_cap })
    }

    /// Fits the ridge estimate and builds its region.
    pub fn fit(plugin: PluginEstimates, lambda: f64, norm_cap: Option<f64>) -> Result<Self> {
        let fit = ridge_fit(&plugin, lambda)?;
        Self::new(plugin, &fit, norm_cap)
    }

    fn shifted(&self) -> DMatrix<f64> {
        self.plugin.shifted(self.lambda)
    }

    /// `|(G_hat + lambda)(theta - theta_hat)| - eps |theta| - eta`.
    pub fn slack(&self, theta: &[f64]) -> f64 {
        let diff = DVector::from_iterator(theta.len(), theta.iter().zip(&self.theta_hat).map(|(a, b)| a - b));
        let lhs = (self.shifted() * diff).norm();
        lhs - self.plugin.epsilon * DVector::from_column_slice(theta).norm() - self.plugin.eta
    }
}

pub fn region_contains(region: &RegionSpec, theta: &[f64]) -> bool {
    if theta.len() != region.theta_hat.len() {
        return false;
    }
    let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1.0 + region.plugin.eta + region.plugin.epsilon * norm;
    let inside = region.slack(theta) <= 1e-9 * scale;
    inside && region.norm_cap.is_none_or(|a| norm <= a * (1.0 + 1e-12))
}

/// Improved pick for an estimate outside the region: the minimizer of
/// `R_hat(xi) - R_hat(theta) + eps |xi - theta|^2 + 2 |xi - theta| (eps |theta| + eta)`.
///
/// Its stationarity equation `(A + eps + kappa/rho)(xi - theta) = -(A theta - V_hat)`
/// with `rho = |xi - theta|` is solved as a scalar equation in `rho` on the
/// eigenbasis of `A = G_hat + lambda I`.
pub fn improved_pick(region: &RegionSpec, theta_bad: &[f64]) -> Result<Vec<f64>> {
    let d = region.plugin.d();
    if theta_bad.len() != d {
        return invalid("theta has the wrong dimension");
    }
    if region.slack(theta_bad) <= 0.0 {
        return domain("the estimate already lies in the confidence region");
    }
    let eps = region.plugin.epsilon;
    let tb = DVector::from_column_slice(theta_bad);
    let kappa = eps * tb.norm() + region.plugin.eta;
    let (vals, vecs) = sym_eigen_sorted(&region.shifted());
    let grad = region.shifted() * &tb - region.plugin.v();
    let gp = vecs.transpose() * grad;
    let step = |s: f64| -> DVector<f64> {
        DVector::from_iterator(d, vals.iter().zip(gp.iter()).map(|(a, g)| -g / (a.max(0.0) + eps + s)))
    };
    let z = if kappa == 0.0 {
        step(0.0)
    } else {
        // F(rho) = |step(kappa/rho)| - rho: positive near 0, negative for large rho
        let f = |rho: f64| step(kappa / rho).norm() - rho;
        let mut hi = gp.norm() / (vals.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0) + eps).max(1e-300);
        hi = hi.clamp(1e-300, 1e300);
        let mut guard = 0;
        while f(hi) > 0.0 && guard < 2000 {
            hi *= 2.0;
            guard += 1;
        }
        let mut lo = 0.0;
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        step(kappa / hi)
    };
    let xi = tb + &vecs * z;
    Ok(xi.iter().copied().collect())
}

/// `gamma_lambda(theta, xi)`, negative at an improved pick.
pub fn pick_surrogate(region: &RegionSpec, theta: &[f64], xi: &[f64]) -> Result<f64> {
    let eps = region.plugin.epsilon;
    let dist = theta.iter().zip(xi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let tn = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(empirical_risk(xi, &region.plugin, region.lambda)? - empirical_risk(theta, &region.plugin, region.lambda)?
        + eps * dist * dist
        + 2.0 * dist * (eps * tn + region.plugin.eta))
}

/// Smallest-norm `z` with `|A z - c| <= eps |z| + eta` and `|z| <= cap`,
/// by bisection on the radius; `None` when no such `z` exists.
///
/// `min_{|z| <= r} |A z - c|` is nonincreasing in `r` and the right side is
/// increasing, so feasibility is monotone in `r`.
fn min_norm_feasible(a: &DMatrix<f64>, c: &DVector<f64>, eps: f64, eta: f64, cap: Option<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv = &svd.singular_values;
    let uc = u.transpose() * c;
    let perp2 = (c - u * &uc).norm_squared();
    let h: Vec<f64> = sv.iter().map(|s| s * s).collect();
    let g: Vec<f64> = sv.iter().zip(uc.iter()).map(|(s, x)| s * x).collect();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let solve = |r: f64| -> (f64, DVector<f64>) {
        let w = ball_quadratic(&h, &g, r);
        let mut res2 = perp2;
        for k in 0..w.len() {
            res2 += (sv[k] * w[k] - uc[k]).powi(2);
        }
        (res2.max(0.0).sqrt(), vt.transpose() * DVector::from_vec(w))
    };
    let round_off = 1e-12 * c.norm();
    let feasible = |r: f64| -> bool {
        let (res, _) = solve(r);
        res <= eps * r + eta + round_off
    };
    // least-squares solution of minimum norm
    let ls: Vec<f64> =
        sv.iter().zip(uc.iter()).map(|(s, x)| if *s > 1e-13 * top.max(1e-300) { x / s } else { 0.0 }).collect();
    let r_ls = ls.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut hi = if feasible(r_ls) {
        r_ls
    } else if eps > 0.0 {
        let (res_min, _) = solve(r_ls);
        let need = (res_min - eta) / eps;
        let mut r = need * (1.0 + 1e-12) + 1e-300;
        let mut guard = 0;
        while !feasible(r) && guard < 60 {
            r *= 1.0 + 1e-9 * 2f64.powi(guard);
            guard += 1;
        }
        if !feasible(r) {
            return None;
        }
        r
    } else {
        return None;
    };
    if let Some(a) = cap {
        if hi > a {
            if !feasible(a) {
                return None;
            }
            hi = a;
        }
    }
    if feasible(0.0) {
        return Some(DVector::zeros(a.ncols()));
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug_assert!(feasible(hi));
    Some(solve(hi).1)
}

/// Member of the region with the smallest norm.
pub fn min_norm_in_region(region: &RegionSpec) -> Result<Vec<f64>> {
    let a = region.shifted();
    let c = &a * DVector::from_column_slice(&region.theta_hat);
    match min_norm_feasible(&a, &c, region.plugin.epsilon, region.plugin.eta, region.norm_cap) {
        Some(z) => Ok(z.iter().copied().collect()),
        None => domain("the confidence region is empty under the norm cap"),
    }
}

/// Minimum-norm member at `lambda = 2 (eps + eta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowRatePick {
    pub theta: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub eta: f64,
}

impl SlowRatePick {
    /// Excess-risk bound `(|theta0| + 1/2)((2 eps + eta)|theta0| + eta)`.
    pub fn bound(&self, theta0_norm: f64) -> f64 {
        (theta0_norm + 0.5) * ((2.0 * self.epsilon + self.eta) * theta0_norm + self.eta)
    }
}

pub fn slow_rate_pick(plugin: &PluginEstimates) -> Result<SlowRatePick> {
    let lambda = 2.0 * (plugin.epsilon + plugin.eta);
    if !(lambda > 0.0) {
        return domain("slow-rate pick needs epsilon + eta > 0");
    }
    let region = RegionSpec::fit(plugin.clone(), lambda, None)?;
    let theta = min_norm_in_region(&region)?;
    Ok(SlowRatePick { theta, lambda, epsilon: plugin.epsilon, eta: plugin.eta })
}

fn check_basis(d: usize, basis: &DMatrix<f64>) -> Result<()> {
    if basis.nrows() != d || basis.ncols() == 0 || basis.ncols() > d {
        return invalid(format!("basis must be {d} x k with 1 <= k <= {d}"));
    }
    let gram = basis.transpose() * basis;
    let k = basis.ncols();
    let err = (gram - DMatrix::<f64>::identity(k, k)).abs().max();
    if err > 1e-12 {
        return domain(format!("basis is not orthonormal (error {err:e})"));
    }
    Ok(())
}

/// `inf { |G_hat xi| : xi in L, |xi| = 1 }`.
pub fn restricted_sigma(g_hat: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<f64> {
    check_basis(g_hat.nrows(), basis)?;
    let sv = (g_hat * basis).singular_values();
    Ok(sv.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Ridge fit restricted to the span of an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceFit {
    pub basis: DMatrix<f64>,
    pub lambda: f64,
    /// `theta_hat_{L, lambda}` in ambient coordinates.
    pub theta: Vec<f64>,
    /// Plug-in estimates in basis coordinates.
    reduced: PluginEstimates,
    coords: Vec<f64>,
}

impl SubspaceFit {
    /// Whether `xi` lies in `L` and satisfies
    /// `|pi_L (G_hat + lambda)(xi - theta_hat_L)| <= eps |xi| + eta`.
    pub fn contains(&self, xi: &[f64]) -> bool {
        let x = DVector::from_column_slice(xi);
        let z = self.basis.transpose() * &x;
        let off = (&x - &self.basis * &z).norm();
        if off > 1e-9 * (1.0 + x.norm()) {
            return false;
        }
        let region = RegionSpec {
            plugin: self.reduced.clone(),
            lambda: self.lambda,
            theta_hat: self.coords.clone(),
            norm_cap: None,
        };
        region_contains(&region, z.as_slice())
    }

    /// Minimum-norm member of the restricted region, in ambient coordinates.
    pub fn min_norm(&self) -> Result<Vec<f64>> {
        let region = RegionSpec {
            plugin: self.reduced.clone(),
            lambda: self.lambda,
            theta_hat: self.coords.clone(),
            norm_cap: None,
        };
        let z = min_norm_in_region(&region)?;
        Ok((&self.basis * DVector::from_vec(z)).iter().copied().collect())
    }
}

pub fn fit_subspace(plugin: &PluginEstimates, basis: &DMatrix<f64>, lambda: f64) -> Result<SubspaceFit> {
    check_basis(plugin.d(), basis)?;
    let g = basis.transpose() * plugin.g() * basis;
    let v = basis.transpose() * plugin.v();
    let k = basis.ncols();
    let reduced = PluginEstimates {
        g_hat: (0..k).map(|i| g.row(i).iter().copied().collect()).collect(),
        v_hat: v.iter().copied().collect(),
        ..plugin.clone()
    };
    let fit = ridge_fit(&reduced, lambda)?;
    let theta = (basis * DVector::from_column_slice(&fit.theta_hat)).iter().copied().collect();
    Ok(SubspaceFit { basis: basis.clone(), lambda, theta, reduced, coords: fit.theta_hat })
}

/// Candidate subspaces, each with an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    pub subspaces: Vec<DMatrix<f64>>,
    /// Coordinate supports when the subspaces are coordinate spans.
    pub supports: Option<Vec<Vec<usize>>>,
    /// Each basis is a prefix of the next.
    pub nested: bool,
}

impl ModelFamily {
    pub fn new(subspaces: Vec<DMatrix<f64>>, nested: bool) -> Result<Self> {
        let d = subspaces.first().map(|b| b.nrows()).unwrap_or(0);
        if d == 0 {
            return invalid("model family must contain at least one subspace");
        }
        for b in &subspaces {
            check_basis(d, b)?;
        }
        if nested {
            for w in subspaces.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                if a.ncols() > b.ncols() || (a - b.columns(0, a.ncols())).abs().max() > 1e-12 {
                    return domain("nested family: each basis must be a prefix of the next");
                }
            }
        }
        Ok(Self { subspaces, supports: None, nested })
    }

    /// Coordinate spans `span{e_j : j in support}`.
    pub fn coordinate_supports(d: usize, supports: Vec<Vec<usize>>) -> Result<Self> {
        let mut bases = Vec::with_capacity(supports.len());
        let mut sorted = Vec::with_capacity(supports.len());
        for s in supports {
            let mut s = s;
            s.sort_unstable();
            s.dedup();
            if s.is_empty() || s.iter().any(|&j| j >= d) {
                return invalid(format!("support {s:?} is empty or out of range for d = {d}"));
            }
            bases.push(DMatrix::from_fn(d, s.len(), |i, k| if s[k] == i { 1.0 } else { 0.0 }));
            sorted.push(s);
        }
        let nested = sorted.windows(2).all(|w| w[0].len() <= w[1].len() && w[1][..w[0].len()] == w[0][..]);
        let mut out = Self::new(bases, false)?;
        out.nested = nested;
        out.supports = Some(sorted);
        Ok(out)
    }

    /// Prefixes `span(e_0..e_k)` for each `k` in `dims` (increasing).
    pub fn nested_coordinates(d: usize, dims: &[usize]) -> Result<Self> {
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("nested dimensions must be strictly increasing");
        }
        Self::coordinate_supports(d, dims.iter().map(|&k| (0..k).collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelection {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
    pub theta: Vec<f64>,
    /// `sigma_hat` of the selected subspace.
    pub sigma_hat: f64,
    /// `4 (eps A + eta)^2 / (lambda + sigma_hat)` with the plug-in sigma.
    pub risk_bound: f64,
}

fn need_cap(region: &RegionSpec) -> Result<f64> {
    region.norm_cap.ok_or_else(|| crate::Error::Domain("model selection needs a norm cap A".into()))
}

/// Minimum-norm point of the region inside `span(basis)`, if any.
fn region_in_subspace(region: &RegionSpec, basis: &DMatrix<f64>) -> Option<DVector<f64>> {
    let a = region.shifted();
    let c = &a * DVector::from_column_slice(&region.theta_hat);
    let al = &a * basis;
    min_norm_feasible(&al, &c, region.plugin.epsilon, region.plugin.eta, region.norm_cap).map(|z| basis * z)
}

/// Among subspaces meeting the region, the one with the largest
/// `sigma_hat_L` (ties: smaller dimension, then support order, then index).
pub fn select_model_general(region: &RegionSpec, family: &ModelFamily) -> Result<ModelSelection> {
    let cap = need_cap(region)?;
    if family.subspaces[0].nrows() != region.plugin.d() {
        return invalid("model family dimension does not match the region");
    }
    let g = region.plugin.g();
    let hits: Vec<Option<(DVector<f64>, f64)>> = family
        .subspaces
        .par_iter()
        .map(|b| region_in_subspace(region, b).map(|t| (t, restricted_sigma(&g, b).unwrap_or(0.0))))
        .collect();
    let key = |i: usize| -> (usize, Vec<usize>) {
        let dim = family.subspaces[i].ncols();
        (dim, family.supports.as_ref().map(|s| s[i].clone()).unwrap_or_default())
    };
    let mut best: Option<usize> = None;
    for (i, h) in hits.iter().enumerate() {
        let Some((_, s)) = h else { continue };
        best = match best {
            None => Some(i),
            Some(j) => {
                let sj = hits[j].as_ref().unwrap().1;
                let tol = 1e-12 * s.abs().max(sj.abs()).max(1.0);
                if *s > sj + tol || ((*s - sj).abs() <= tol && key(i) < key(j)) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    let Some(i) = best else {
        return Err(crate::Error::EmptySelection("no subspace of the family meets the confidence region".into()));
    };
    let (theta, sigma) = hits[i].clone().unwrap();
    Ok(ModelSelection {
        index: i,
        support: family.supports.as_ref().map(|s| s[i].clone()),
        theta: theta.iter().copied().collect(),
        sigma_hat: sigma,
        risk_bound: risk_bound(region, cap, sigma),
    })
}

fn risk_bound(region: &RegionSpec, cap: f64, sigma: f64) -> f64 {
    4.0 * (region.plugin.epsilon * cap + region.plugin.eta).powi(2) / (region.lambda + sigma)
}

/// First level of a nested family that meets the region.
pub fn select_model_nested(region: &RegionSpec, family: &ModelFamily) -> Result<ModelSelection> {
    let cap = need_cap(region)?;
    if !family.nested {
        return domain("select_model_nested needs a nested family");
    }
    if family.subspaces[0].nrows() != region.plugin.d() {
        return invalid("model family dimension does not match the region");
    }
    let g = region.plugin.g();
    for (i, b) in family.subspaces.iter().enumerate() {
        if let Some(theta) = region_in_subspace(region, b) {
            let sigma = restricted_sigma(&g, b)?;
            return Ok(ModelSelection {
                index: i,
                support: family.supports.as_ref().map(|s| s[i].clone()),
                theta: theta.iter().copied().collect(),
                sigma_hat: sigma,
                risk_bound: risk_bound(region, cap, sigma),
            });
        }
    }
    Err(crate::Error::EmptySelection("no level of the nested family meets the confidence region".into()))
}
