//! Influence functions and their Gaussian-smoothed versions.
//!
//! `phi_*` are exact expectations `E[psi(m + sigma W)]` with `W ~ N(0, 1)`,
//! computed from closed forms. The `*_dm` variants also return the
//! derivative in `m`, which the direction searches use as a gradient.

pub mod normal;

use std::f64::consts::SQRT_2;

use crate::error::{domain, Result};
pub use normal::{std_normal_cdf, std_normal_pdf, truncated_moment, INV_SQRT_2PI};

/// Below this standard deviation the smoothing is treated as a point mass.
pub const DEGENERATE_SIGMA: f64 = 1e-10;

/// Standardized distance to the nearest kink beyond which the correction
/// terms are below 1e-20 and are skipped. See `tail_bound_*` in the tests.
pub(crate) const TAIL_Z: f64 = 9.5;

const SYM_PLATEAU: f64 = 2.0 * SQRT_2 / 3.0;

/// Mean and standard deviation of the Gaussian perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothInput {
    pub m: f64,
    pub sigma: f64,
}

impl SmoothInput {
    pub fn new(m: f64, sigma: f64) -> Result<Self> {
        if !m.is_finite() {
            return domain(format!("smoothing mean must be finite, got {m}"));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return domain(format!("smoothing scale must be finite and >= 0, got {sigma}"));
        }
        Ok(Self { m, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InfluenceKind {
    Symmetric,
    Asymmetric,
    Squared,
}

impl InfluenceKind {
    /// The raw influence function. `Squared` evaluates `psi_asym(t^2)`.
    pub fn psi(self, t: f64) -> Result<f64> {
        match self {
            InfluenceKind::Symmetric => psi_sym(t),
            InfluenceKind::Asymmetric => {
                if !t.is_finite() {
                    return domain(format!("influence argument must be finite, got {t}"));
                }
                Ok(psi_asym_raw(t.max(0.0)))
            }
            InfluenceKind::Squared => {
                if !t.is_finite() {
                    return domain(format!("influence argument must be finite, got {t}"));
                }
                Ok(psi_asym_raw(t * t))
            }
        }
    }

    /// `E[psi(m + sigma W)]` for this kind.
    pub fn smooth(self, input: SmoothInput) -> f64 {
        match self {
            InfluenceKind::Symmetric => phi_sym(input),
            InfluenceKind::Asymmetric => phi_asym(input),
            InfluenceKind::Squared => phi_sq(input),
        }
    }
}

/// `t - t^3/6` on `[-sqrt 2, sqrt 2]`, `+-2 sqrt(2)/3` outside.
pub fn psi_sym(t: f64) -> Result<f64> {
    if !t.is_finite() {
        return domain(format!("influence argument must be finite, got {t}"));
    }
    Ok(psi_sym_raw(t))
}

/// `t - t^2/2` on `[0, 1]`, `1/2` beyond.
pub fn psi_asym(t: f64) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return domain(format!("asymmetric influence needs a finite t >= 0, got {t}"));
    }
    Ok(psi_asym_raw(t))
}

#[inline]
pub(crate) fn psi_sym_raw(t: f64) -> f64 {
    if t >= SQRT_2 {
        SYM_PLATEAU
    } else if t <= -SQRT_2 {
        -SYM_PLATEAU
    } else {
        t - t * t * t / 6.0
    }
}

#[inline]
pub(crate) fn psi_asym_raw(t: f64) -> f64 {
    if t >= 1.0 {
        0.5
    } else {
        t - 0.5 * t * t
    }
}

/// `E[psi_sym(m + sigma W)]`.
pub fn phi_sym(input: SmoothInput) -> f64 {
    sym(input.m, input.sigma)
}

/// `E[psi_asym((m + sigma W)_+)]`.
pub fn phi_asym(input: SmoothInput) -> f64 {
    asym(input.m, input.sigma)
}

/// `E[psi_asym((m + sigma W)^2)]`.
pub fn phi_sq(input: SmoothInput) -> f64 {
    sq(input.m, input.sigma)
}

/// Correction term `r` with `phi_sym = m(1 - sigma^2/2) - m^3/6 + r`.
pub fn r_sym(input: SmoothInput) -> f64 {
    let (m, s) = (input.m, input.sigma);
    if s < DEGENERATE_SIGMA {
        return psi_sym_raw(m) - (m - m * m * m / 6.0);
    }
    r_sym_raw(m, s)
}

/// Correction term `r2` with `phi_sq = m^2 + sigma^2 - (m^4 + 6 m^2 sigma^2 + 3 sigma^4)/2 + r2`.
pub fn r_sq(input: SmoothInput) -> f64 {
    let (m, s) = (input.m, input.sigma);
    if s < DEGENERATE_SIGMA {
        let u = m * m;
        return psi_asym_raw(u) - (u - 0.5 * u * u);
    }
    r_sq_raw(m, s)
}

#[inline]
fn gauss(a: f64) -> f64 {
    // e^{-a^2/2}; vanishes silently past the double range.
    if a.abs() > 40.0 {
        0.0
    } else {
        (-0.5 * a * a).exp()
    }
}

fn r_sym_raw(m: f64, s: f64) -> f64 {
    let ap = (SQRT_2 + m) / s;
    let am = (SQRT_2 - m) / s;
    let fp = std_normal_cdf(-ap);
    let fm = std_normal_cdf(-am);
    let ep = gauss(ap);
    let em = gauss(am);
    let k = INV_SQRT_2PI;
    SYM_PLATEAU * (fm - fp) - (m - m * m * m / 6.0) * (fm + fp)
        + s * (1.0 - 0.5 * m * m) * k * (ep - em)
        + 0.5 * m * s * s * (fp + fm + k * (ap * ep + am * em))
        + s * s * s * k / 6.0 * ((am * am + 2.0) * em - (ap * ap + 2.0) * ep)
}

fn r_sq_raw(m: f64, s: f64) -> f64 {
    let m2 = m * m;
    let s2 = s * s;
    let lo = (-1.0 - m) / s;
    let hi = (-1.0 + m) / s;
    let k = INV_SQRT_2PI;
    0.5 * ((m2 - 1.0).powi(2) + (6.0 * m2 - 2.0) * s2 + 3.0 * s2 * s2) * (std_normal_cdf(lo) + std_normal_cdf(hi))
        + 0.5 * s * k * (s2 * (3.0 - 5.0 * m) - (1.0 + m) * (1.0 - m).powi(2)) * gauss(lo)
        + 0.5 * s * k * (s2 * (3.0 + 5.0 * m) - (1.0 - m) * (1.0 + m).powi(2)) * gauss(hi)
}

#[inline]
pub(crate) fn sym(m: f64, s: f64) -> f64 {
    if s < DEGENERATE_SIGMA {
        return psi_sym_raw(m);
    }
    // evaluated at |m| so oddness holds bit for bit
    if m < 0.0 {
        return -sym(-m, s);
    }
    let poly = m * (1.0 - 0.5 * s * s) - m * m * m / 6.0;
    if (SQRT_2 - m.abs()) > TAIL_Z * s {
        return poly;
    }
    poly + r_sym_raw(m, s)
}

#[inline]
pub(crate) fn sq(m: f64, s: f64) -> f64 {
    if s < DEGENERATE_SIGMA {
        return psi_asym_raw(m * m);
    }
    let m = m.abs();
    let m2 = m * m;
    let s2 = s * s;
    let poly = m2 + s2 - 0.5 * (m2 * m2 + 6.0 * m2 * s2 + 3.0 * s2 * s2);
    if (1.0 - m.abs()) > TAIL_Z * s {
        return poly;
    }
    poly + r_sq_raw(m, s)
}

#[inline]
pub(crate) fn asym(m: f64, s: f64) -> f64 {
    if s < DEGENERATE_SIGMA {
        return psi_asym_raw(m.max(0.0));
    }
    if m < -TAIL_Z * s {
        // E[psi((m + sW)_+)] <= E[(m + sW)_+] which is below 1e-21 here.
        return 0.0;
    }
    if m - 1.0 > TAIL_Z * s {
        return 0.5;
    }
    let quad = m - 0.5 * m * m - 0.5 * s * s;
    if m > TAIL_Z * s && 1.0 - m > TAIL_Z * s {
        return quad;
    }
    let k = INV_SQRT_2PI;
    let a1 = (m - 1.0) / s;
    let a0 = -m / s;
    let f1 = std_normal_cdf(a1);
    // P(0 < m + sW <= 1) computed as a difference of upper tails when both
    // endpoints sit on the same side, to avoid 1 - (1 - tiny).
    let band = band_probability(a0, -a1);
    quad * band + 0.5 * f1 + s * (1.0 - 0.5 * m) * k * gauss(m / s) - 0.5 * s * (1.0 - m) * k * gauss((1.0 - m) / s)
}

/// `P(lo < W <= hi)`.
#[inline]
fn band_probability(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        std_normal_cdf(-lo) - std_normal_cdf(-hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    }
}

/// `E[W^k 1(lo < W <= hi)]` for `k = 0..=3`. Infinite endpoints allowed.
fn band_moments(lo: f64, hi: f64) -> [f64; 4] {
    if hi <= lo {
        return [0.0; 4];
    }
    // Upper tail U_k(a) = E[W^k 1(W > a)].
    fn upper(a: f64) -> [f64; 4] {
        if a == f64::INFINITY {
            return [0.0; 4];
        }
        if a == f64::NEG_INFINITY {
            return [1.0, 0.0, 1.0, 0.0];
        }
        let g = std_normal_pdf(a);
        let t = std_normal_cdf(-a);
        [t, g, t + a * g, (a * a + 2.0) * g]
    }
    fn lower(a: f64) -> [f64; 4] {
        // L_k(a) = E[W^k 1(W <= a)] = (-1)^k U_k(-a)
        let u = upper(-a);
        [u[0], -u[1], u[2], -u[3]]
    }
    let mut out = [0.0; 4];
    if lo >= 0.0 {
        let (a, b) = (upper(lo), upper(hi));
        for k in 0..4 {
            out[k] = a[k] - b[k];
        }
    } else {
        let (a, b) = (lower(hi), lower(lo));
        for k in 0..4 {
            out[k] = a[k] - b[k];
        }
    }
    out
}

/// `(phi_sym(m, s), d/dm phi_sym(m, s))`.
pub(crate) fn sym_dm(m: f64, s: f64) -> (f64, f64) {
    if s < DEGENERATE_SIGMA {
        let d = if m.abs() < SQRT_2 { 1.0 - 0.5 * m * m } else { 0.0 };
        return (psi_sym_raw(m), d);
    }
    if (SQRT_2 - m.abs()) > TAIL_Z * s {
        let poly = m * (1.0 - 0.5 * s * s) - m * m * m / 6.0;
        return (poly, 1.0 - 0.5 * s * s - 0.5 * m * m);
    }
    let w = band_moments((-SQRT_2 - m) / s, (SQRT_2 - m) / s);
    let d = (1.0 - 0.5 * m * m) * w[0] - m * s * w[1] - 0.5 * s * s * w[2];
    (sym(m, s), d)
}

/// `(phi_asym(m, s), d/dm phi_asym(m, s))`.
pub(crate) fn asym_dm(m: f64, s: f64) -> (f64, f64) {
    if s < DEGENERATE_SIGMA {
        let d = if m > 0.0 && m < 1.0 { 1.0 - m } else { 0.0 };
        return (psi_asym_raw(m.max(0.0)), d);
    }
    let v = asym(m, s);
    if m < -TAIL_Z * s || m - 1.0 > TAIL_Z * s {
        return (v, 0.0);
    }
    let w = band_moments(-m / s, (1.0 - m) / s);
    (v, (1.0 - m) * w[0] - s * w[1])
}

/// `(phi_sq(m, s), d/dm phi_sq(m, s))`.
pub(crate) fn sq_dm(m: f64, s: f64) -> (f64, f64) {
    if s < DEGENERATE_SIGMA {
        let d = if m.abs() < 1.0 { 2.0 * m * (1.0 - m * m) } else { 0.0 };
        return (psi_asym_raw(m * m), d);
    }
    let v = sq(m, s);
    if (1.0 - m.abs()) > TAIL_Z * s {
        return (v, 2.0 * m - 2.0 * m * m * m - 6.0 * m * s * s);
    }
    let w = band_moments((-1.0 - m) / s, (1.0 - m) / s);
    let s2 = s * s;
    let t1 = m * w[0] + s * w[1];
    let t3 = m * m * m * w[0] + 3.0 * m * m * s * w[1] + 3.0 * m * s2 * w[2] + s2 * s * w[3];
    (v, 2.0 * (t1 - t3))
}

/// `(r, dr/dm, dr/ds)` for the correction term of `phi_sym`. The `s`
/// derivative uses `d phi / ds = s E[psi''(m + s W)]`.
pub(crate) fn r_sym_parts(m: f64, s: f64) -> (f64, f64, f64) {
    if s < DEGENERATE_SIGMA {
        let d = if m.abs() < SQRT_2 { 1.0 - 0.5 * m * m } else { 0.0 };
        let r = psi_sym_raw(m) - (m - m * m * m / 6.0);
        return (r, d - (1.0 - 0.5 * m * m), 0.0);
    }
    if (SQRT_2 - m.abs()) > TAIL_Z * s {
        return (0.0, 0.0, 0.0);
    }
    let (v, dm) = sym_dm(m, s);
    let poly = m * (1.0 - 0.5 * s * s) - m * m * m / 6.0;
    let w = band_moments((-SQRT_2 - m) / s, (SQRT_2 - m) / s);
    let second = -(m * w[0] + s * w[1]);
    (v - poly, dm - (1.0 - 0.5 * s * s - 0.5 * m * m), s * (second + m))
}

/// `(phi_asym(m, s), d/dm, d/ds)`.
pub(crate) fn asym_parts(m: f64, s: f64) -> (f64, f64, f64) {
    if s < DEGENERATE_SIGMA {
        let (v, d) = asym_dm(m, s);
        return (v, d, 0.0);
    }
    let (v, dm) = asym_dm(m, s);
    if m < -TAIL_Z * s || m - 1.0 > TAIL_Z * s {
        return (v, dm, 0.0);
    }
    let band = band_probability(-m / s, (1.0 - m) / s);
    (v, dm, std_normal_pdf(m / s) - s * band)
}
