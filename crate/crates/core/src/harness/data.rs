//! Synthetic heavy-tailed samples with their exact population moments.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::linalg::{dot, sym_eigen_sorted};
use crate::matrix_mean::MatrixSample;
use crate::regression::RegressionData;
use crate::vector_mean::VectorSample;

/// Noise law, always symmetric about zero before scaling.
///
/// Gaussian, Student and contaminated vectors are elliptical (one radial
/// mixing variable per row); Pareto-tailed vectors have independent
/// coordinates. Matrix entries are always drawn independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    StudentT {
        nu: f64,
    },
    /// Symmetrized Lomax with tail index `a`: `P(|Z| > z) = (1 + z)^-a`.
    ParetoTail {
        a: f64,
    },
    /// Gaussian whose scale is multiplied by `scale` with probability `p_out`.
    Contaminated {
        p_out: f64,
        scale: f64,
    },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Family::Gaussian => Ok(()),
            Family::StudentT { nu } if nu > 0.0 && nu.is_finite() => Ok(()),
            Family::ParetoTail { a } if a > 0.0 && a.is_finite() => Ok(()),
            Family::Contaminated { p_out, scale }
                if (0.0..1.0).contains(&p_out) && scale > 0.0 && scale.is_finite() =>
            {
                Ok(())
            }
            f => domain(format!("invalid noise family {f:?}")),
        }
    }

    fn elliptical(&self) -> bool {
        !matches!(self, Family::ParetoTail { .. })
    }

    /// `E Z^2` for one coordinate, `None` when infinite.
    pub fn second_moment(&self) -> Option<f64> {
        match *self {
            Family::Gaussian => Some(1.0),
            Family::StudentT { nu } => (nu > 2.0).then(|| nu / (nu - 2.0)),
            Family::ParetoTail { a } => (a > 2.0).then(|| 2.0 / ((a - 1.0) * (a - 2.0))),
            Family::Contaminated { p_out, scale } => Some(1.0 - p_out + p_out * scale * scale),
        }
    }

    /// `E Z^4` for one coordinate, `None` when infinite.
    pub fn fourth_moment(&self) -> Option<f64> {
        match *self {
            Family::ParetoTail { a } => (a > 4.0).then(|| 24.0 / ((a - 1.0) * (a - 2.0) * (a - 3.0) * (a - 4.0))),
            _ => self.radial_fourth().map(|r4| 3.0 * r4),
        }
    }

    /// `E R^4` of the radial mixing variable of an elliptical law.
    fn radial_fourth(&self) -> Option<f64> {
        match *self {
            Family::Gaussian => Some(1.0),
            Family::StudentT { nu } => (nu > 4.0).then(|| nu * nu / ((nu - 2.0) * (nu - 4.0))),
            Family::Contaminated { p_out, scale } => Some(1.0 - p_out + p_out * scale.powi(4)),
            Family::ParetoTail { .. } => None,
        }
    }

    fn radial<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::Gaussian | Family::ParetoTail { .. } => 1.0,
            Family::StudentT { nu } => {
                let chi: f64 = ChiSquared::new(nu).expect("validated").sample(rng);
                (nu / chi).sqrt()
            }
            Family::Contaminated { p_out, scale } => {
                if rng.random::<f64>() < p_out {
                    scale
                } else {
                    1.0
                }
            }
        }
    }

    /// One unit-scale scalar draw.
    pub fn scalar<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Family::ParetoTail { a } => {
                let y: f64 = Pareto::new(1.0, a).expect("validated").sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * (y - 1.0)
            }
            _ => {
                let g: f64 = StandardNormal.sample(rng);
                self.radial(rng) * g
            }
        }
    }

    /// Fills `out` with one unit-scale noise vector.
    pub fn vector<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        if self.elliptical() {
            let r = self.radial(rng);
            for o in out.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *o = r * g;
            }
        } else {
            for o in out.iter_mut() {
                *o = self.scalar(rng);
            }
        }
    }
}

/// Generator seeded for trial `stream` of an experiment with base `seed`.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `X = mean + diag(scales) Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSpec {
    #[serde(flatten)]
    pub family: Family,
    pub n: usize,
    pub mean: Vec<f64>,
    pub scales: Vec<f64>,
}

impl VectorSpec {
    pub fn isotropic(family: Family, n: usize, d: usize) -> Self {
        Self { family, n, mean: vec![0.0; d], scales: vec![1.0; d] }
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n == 0 || self.mean.is_empty() || self.scales.len() != self.mean.len() {
            return domain("vector spec needs n >= 1 and matching mean/scales of length d >= 1");
        }
        if self.scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return domain("scales must be finite and >= 0");
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<VectorSample> {
        self.validate()?;
        let d = self.d();
        let mut data = vec![0.0; self.n * d];
        for row in data.chunks_mut(d) {
            self.family.vector(rng, row);
            for j in 0..d {
                row[j] = self.mean[j] + self.scales[j] * row[j];
            }
        }
        VectorSample::new(data, self.n, d)
    }

    pub fn moments(&self) -> Result<VectorMoments> {
        self.validate()?;
        let m2 = self
            .family
            .second_moment()
            .ok_or_else(|| crate::Error::Domain("second moment is infinite for this family".into()))?;
        Ok(VectorMoments { family: self.family, mean: self.mean.clone(), scales: self.scales.clone(), m2 })
    }
}

/// Exact population moments of a [`VectorSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMoments {
    family: Family,
    pub mean: Vec<f64>,
    scales: Vec<f64>,
    m2: f64,
}

impl VectorMoments {
    /// `E X X^T`, row-major.
    pub fn second_moment_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| {
            let cov = if i == j { self.m2 * self.scales[i] * self.scales[i] } else { 0.0 };
            self.mean[i] * self.mean[j] + cov
        })
    }

    /// `sup_theta E <theta, X>^2`.
    pub fn v(&self) -> f64 {
        sym_eigen_sorted(&self.second_moment_matrix()).0[0]
    }

    /// `E |X|^2`.
    pub fn t(&self) -> f64 {
        self.second_moment_matrix().trace()
    }

    /// `E <theta, X>^2`.
    pub fn directional_second(&self, theta: &[f64]) -> f64 {
        let a = dot(theta, &self.mean);
        let s2: f64 = theta.iter().zip(&self.scales).map(|(t, d)| t * t * d * d).sum();
        a * a + self.m2 * s2
    }

    /// `E <theta, X>^4`, `None` when infinite.
    pub fn directional_fourth(&self, theta: &[f64]) -> Option<f64> {
        let a = dot(theta, &self.mean);
        let c: Vec<f64> = theta.iter().zip(&self.scales).map(|(t, d)| t * d).collect();
        let s2: f64 = c.iter().map(|x| x * x).sum();
        if self.family.elliptical() {
            let r4 = self.family.radial_fourth()?;
            Some(a.powi(4) + 6.0 * a * a * self.m2 * s2 + 3.0 * r4 * s2 * s2)
        } else {
            let k4 = self.family.fourth_moment()?;
            let s4: f64 = c.iter().map(|x| x.powi(4)).sum();
            Some(a.powi(4) + 6.0 * a * a * self.m2 * s2 + k4 * s4 + 3.0 * self.m2 * self.m2 * (s2 * s2 - s4))
        }
    }

    /// `E |X|^4`, `None` when infinite.
    pub fn norm_fourth(&self) -> Option<f64> {
        let mu2: f64 = self.mean.iter().map(|x| x * x).sum();
        let d2: Vec<f64> = self.scales.iter().map(|s| s * s).collect();
        let tr: f64 = d2.iter().sum();
        if self.family.elliptical() {
            let r4 = self.family.radial_fourth()?;
            let tr2: f64 = d2.iter().map(|x| x * x).sum();
            let mdm: f64 = self.mean.iter().zip(&d2).map(|(m, s)| m * m * s).sum();
            Some(mu2 * mu2 + 4.0 * self.m2 * mdm + 2.0 * mu2 * self.m2 * tr + r4 * (tr * tr + 2.0 * tr2))
        } else {
            let k4 = self.family.fourth_moment()?;
            let mut first = 0.0;
            let mut var = 0.0;
            for (m, s) in self.mean.iter().zip(&d2) {
                let eq = m * m + s * self.m2;
                let eq2 = m.powi(4) + 6.0 * m * m * s * self.m2 + s * s * k4;
                first += eq;
                var += eq2 - eq * eq;
            }
            Some(first * first + var)
        }
    }
}

/// `M = mean + scale N` with i.i.d. unit-scale entries `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    #[serde(flatten)]
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Row-major `p x q`.
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Exact `(v, t, u, T)` of a [`MatrixSpec`] plus the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMoments {
    pub mean: Vec<f64>,
    pub v: f64,
    pub t: f64,
    pub u: f64,
    #[serde(rename = "T")]
    pub t_hs: f64,
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n == 0 || self.p == 0 || self.q == 0 || self.mean.len() != self.p * self.q {
            return domain("matrix spec needs n, p, q >= 1 and a p x q mean");
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return domain("matrix noise scale must be finite and >= 0");
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<MatrixSample> {
        self.validate()?;
        let k = self.p * self.q;
        let mut data = Vec::with_capacity(self.n * k);
        for _ in 0..self.n {
            for j in 0..k {
                data.push(self.mean[j] + self.scale * self.family.scalar(rng));
            }
        }
        MatrixSample::new(data, self.n, self.p, self.q)
    }

    pub fn moments(&self) -> Result<MatrixMoments> {
        self.validate()?;
        let m2 = self
            .family
            .second_moment()
            .ok_or_else(|| crate::Error::Domain("second moment is infinite for this family".into()))?;
        let s2 = self.scale * self.scale * m2;
        let mean = DMatrix::from_row_slice(self.p, self.q, &self.mean);
        let op2 = crate::linalg::op_norm(&mean).powi(2);
        let hs2 = mean.norm_squared();
        // E<xi, M theta>^2 = <xi, m theta>^2 + s2, and similarly for the others
        let ata = mean.transpose() * &mean;
        let aat = &mean * mean.transpose();
        let t = sym_eigen_sorted(&ata).0[0] + self.p as f64 * s2;
        let u = sym_eigen_sorted(&aat).0[0] + self.q as f64 * s2;
        Ok(MatrixMoments { mean: self.mean.clone(), v: op2 + s2, t, u, t_hs: hs2 + (self.p * self.q) as f64 * s2 })
    }
}

/// `Y = <theta0, X> + noise_scale e` with centered elliptical `X` and
/// independent unit-scale noise `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub x: VectorSpec,
    pub theta0: Vec<f64>,
    pub noise: Family,
    pub noise_scale: f64,
}

/// Population quantities of a [`RegressionSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMoments {
    /// `G = E X X^T`, row-major.
    pub g: Vec<f64>,
    /// `V = E Y X`.
    pub v_vec: Vec<f64>,
    /// `sup_theta E <theta, X>^4`
    pub v: f64,
    /// `E |X|^4`
    #[serde(rename = "T")]
    pub t: f64,
    /// `sup_theta E Y^2 <theta, X>^2`
    pub v_prime: f64,
    /// `E Y^2 |X|^2`
    #[serde(rename = "T_prime")]
    pub t_prime: f64,
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.noise.validate()?;
        if self.theta0.len() != self.x.d() {
            return domain("theta0 length must match the design dimension");
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Result<RegressionData> {
        self.validate()?;
        let xs = self.x.draw(rng)?;
        let y: Vec<f64> = xs.rows().map(|r| dot(r, &self.theta0) + self.noise_scale * self.noise.scalar(rng)).collect();
        RegressionData::new(xs, y)
    }

    pub fn moments(&self) -> Result<RegressionMoments> {
        self.validate()?;
        if !self.x.family.elliptical() || self.x.mean.iter().any(|m| *m != 0.0) {
            return domain("regression moments are available for centered elliptical designs only");
        }
        let fam = self.x.family;
        let (m2, r4) = match (fam.second_moment(), fam.radial_fourth()) {
            (Some(a), Some(b)) => (a, b),
            _ => return domain("regression moments need finite fourth moments of the design"),
        };
        let e2 = self.noise.second_moment().ok_or_else(|| crate::Error::Domain("noise variance is infinite".into()))?
            * self.noise_scale
            * self.noise_scale;
        let d = self.x.d();
        let d2: Vec<f64> = self.x.scales.iter().map(|s| s * s).collect();
        let g: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { m2 * d2[k / d] } else { 0.0 }).collect();
        let v_vec: Vec<f64> = (0..d).map(|j| m2 * d2[j] * self.theta0[j]).collect();
        let tr: f64 = d2.iter().sum();
        let tr2: f64 = d2.iter().map(|x| x * x).sum();
        let v = 3.0 * r4 * d2.iter().cloned().fold(0.0, f64::max).powi(2);
        let t = r4 * (tr * tr + 2.0 * tr2);
        // E<u,X>^2 <w,X>^2 = r4 (|Du|^2 |Dw|^2 + 2 <Du, Dw>^2) for X = R D G
        let dt0: Vec<f64> = (0..d).map(|j| d2[j] * self.theta0[j]).collect();
        let q0: f64 = (0..d).map(|j| d2[j] * self.theta0[j] * self.theta0[j]).sum();
        let form = DMatrix::from_fn(d, d, |i, j| {
            let diag = if i == j { (r4 * q0 + e2 * m2) * d2[i] } else { 0.0 };
            diag + 2.0 * r4 * dt0[i] * dt0[j]
        });
        let v_prime = sym_eigen_sorted(&form).0[0];
        let t_prime = (0..d).map(|j| r4 * (q0 * d2[j] + 2.0 * dt0[j] * dt0[j])).sum::<f64>() + e2 * m2 * tr;
        Ok(RegressionMoments { g, v_vec, v, t, v_prime, t_prime })
    }
}
