//! Monte-Carlo coverage of the certified radii against known truths.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::gram::{gram_bound, GramConfig, GramDirectional};
use crate::harness::data::{trial_rng, MatrixSpec, RegressionSpec, VectorSpec};
use crate::linalg::{normalize, op_norm};
use crate::matrix_mean::{fit_matrix_operator_with, MatMomentBounds, McConfig};
use crate::regression::{build_plugin, region_contains, RegionSpec, RegressionBounds};
use crate::vector_mean::{estimate_mean_uncentered_with, FitOptions, VecMomentBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    /// `|m_hat - E X| <= radius`.
    VectorMean,
    /// `|m_hat - E M|_op <= op_radius`.
    MatrixOperator,
    /// `E~(theta) <= E <theta, X>^2` on every probed direction; the
    /// complement `E <theta, X>^2 - E~(theta) <= B(theta)` is counted separately.
    Gram,
    /// `theta_lambda` lies in the ridge confidence region.
    RegressionRegion,
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector-mean" | "mean" => Ok(Self::VectorMean),
            "matrix-operator" | "matrix-mean" => Ok(Self::MatrixOperator),
            "gram" => Ok(Self::Gram),
            "regression-region" | "regress" => Ok(Self::RegressionRegion),
            other => Err(Error::UnknownEstimator(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Vector(VectorSpec),
    Matrix(MatrixSpec),
    Regression { spec: RegressionSpec, lambda: f64 },
}

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub trials: usize,
    pub delta: f64,
    pub seed: u64,
    /// Residual draws of the matrix estimators.
    pub mc_draws: usize,
    /// Random directions per trial for the Gram estimator.
    pub directions: usize,
    pub fit: FitOptions,
}

impl CoverageConfig {
    pub fn new(trials: usize, delta: f64, seed: u64) -> Self {
        Self { trials, delta, seed, mc_draws: 64, directions: 50, fit: FitOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub estimator: EstimatorId,
    pub trials: usize,
    pub failures: usize,
    /// Failures of the upper complement (Gram only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complement_failures: Option<usize>,
    pub nominal_delta: f64,
    /// `2 delta trials` plus three binomial standard deviations.
    pub failure_budget: f64,
    pub within_budget: bool,
    /// Trials whose fit was not certified.
    pub uncertified: usize,
    pub certified_radius: RadiusStats,
    pub wall_time_s: f64,
}

/// `2 delta trials + 3 sqrt(trials 2 delta (1 - 2 delta))`.
pub fn failure_budget(trials: usize, delta: f64) -> f64 {
    let p = (2.0 * delta).min(1.0);
    let t = trials as f64;
    p * t + 3.0 * (t * p * (1.0 - p)).sqrt()
}

struct Trial {
    failed: bool,
    complement_failed: bool,
    certified: bool,
    radius: f64,
}

fn positive(x: f64) -> f64 {
    x.max(1e-12)
}

fn vector_trial(spec: &VectorSpec, cfg: &CoverageConfig, t: u64) -> Result<Trial> {
    let m = spec.moments()?;
    let bounds = VecMomentBounds::new(positive(m.v()), positive(m.t()).max(positive(m.v())))?;
    let sample = spec.draw(&mut trial_rng(cfg.seed, t))?;
    let est = estimate_mean_uncentered_with(&sample, bounds, cfg.delta, &cfg.fit)?;
    let err = est.m_hat.iter().zip(&m.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(Trial { failed: err > est.radius, complement_failed: false, certified: est.certified, radius: est.radius })
}

fn matrix_trial(spec: &MatrixSpec, cfg: &CoverageConfig, t: u64) -> Result<Trial> {
    let m = spec.moments()?;
    let v = positive(m.v);
    let bounds = MatMomentBounds::new(v, positive(m.t).max(v), positive(m.u).max(v), positive(m.t_hs).max(v))?;
    let sample = spec.draw(&mut trial_rng(cfg.seed, t))?;
    let mc = McConfig::new(cfg.mc_draws, cfg.seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
    let est = fit_matrix_operator_with(&sample, bounds, cfg.delta, mc, &cfg.fit)?;
    let diff =
        DMatrix::from_row_slice(spec.p, spec.q, &est.m_hat_flat()) - DMatrix::from_row_slice(spec.p, spec.q, &m.mean);
    let err = op_norm(&diff);
    Ok(Trial { failed: err > est.op_radius, complement_failed: false, certified: est.certified, radius: est.op_radius })
}

fn gram_trial(spec: &VectorSpec, cfg: &CoverageConfig, t: u64) -> Result<Trial> {
    let m = spec.moments()?;
    let t_bound = m.norm_fourth().ok_or_else(|| Error::Domain("E |X|^4 is infinite for this family".into()))?;
    let config = GramConfig::new(positive(t_bound), cfg.delta)?;
    let mut rng = trial_rng(cfg.seed, t);
    let sample = spec.draw(&mut rng)?;
    let est = GramDirectional::adaptive(&sample, &config)?;
    let d = spec.d();
    let mut failed = false;
    let mut complement_failed = false;
    let mut radius: f64 = 0.0;
    for _ in 0..cfg.directions {
        let mut theta: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        normalize(&mut theta);
        let truth = m.directional_second(&theta);
        let e = est.evaluate(&theta).value;
        failed |= e > truth;
        if let Some(e4) = m.directional_fourth(&theta).filter(|x| *x > 0.0) {
            let b = gram_bound(e4, t_bound.max(e4), sample.n(), cfg.delta)?;
            radius = radius.max(b);
            complement_failed |= truth - e > b;
        }
    }
    Ok(Trial { failed, complement_failed, certified: true, radius })
}

fn regression_trial(spec: &RegressionSpec, lambda: f64, cfg: &CoverageConfig, t: u64) -> Result<Trial> {
    let m = spec.moments()?;
    let bounds = RegressionBounds::new(m.v, m.t, m.v_prime, m.t_prime)?;
    let data = spec.draw(&mut trial_rng(cfg.seed, t))?;
    let mc = McConfig::new(cfg.mc_draws, cfg.seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
    let plugin = build_plugin(&data, bounds, cfg.delta, mc, &cfg.fit)?;
    let d = spec.x.d();
    let g = DMatrix::from_row_slice(d, d, &m.g) + lambda * DMatrix::identity(d, d);
    let theta_lambda = g
        .lu()
        .solve(&DVector::from_column_slice(&m.v_vec))
        .ok_or_else(|| Error::Domain("singular G + lambda".into()))?;
    let certified = plugin.certified;
    let eps = plugin.epsilon;
    let region = RegionSpec::fit(plugin, lambda, None)?;
    let inside = region_contains(&region, theta_lambda.as_slice());
    Ok(Trial { failed: !inside, complement_failed: false, certified, radius: eps })
}

/// Runs `trials` independent replications, trial `t` drawing from stream `t`
/// of the base seed.
pub fn run_coverage(estimator: EstimatorId, scenario: &Scenario, cfg: &CoverageConfig) -> Result<ExperimentReport> {
    if cfg.trials < 100 {
        return domain(format!("coverage needs at least 100 trials, got {}", cfg.trials));
    }
    crate::vector_mean::check_delta(cfg.delta)?;
    let start = Instant::now();
    let one = |t: u64| -> Result<Trial> {
        match (estimator, scenario) {
            (EstimatorId::VectorMean, Scenario::Vector(s)) => vector_trial(s, cfg, t),
            (EstimatorId::Gram, Scenario::Vector(s)) => gram_trial(s, cfg, t),
            (EstimatorId::MatrixOperator, Scenario::Matrix(s)) => matrix_trial(s, cfg, t),
            (EstimatorId::RegressionRegion, Scenario::Regression { spec, lambda }) => {
                regression_trial(spec, *lambda, cfg, t)
            }
            (e, _) => domain(format!("estimator {e:?} does not apply to this scenario")),
        }
    };
    let results: Vec<Trial> = (0..cfg.trials as u64).into_par_iter().map(one).collect::<Result<_>>()?;
    let failures = results.iter().filter(|r| r.failed).count();
    let complement = results.iter().filter(|r| r.complement_failed).count();
    let mut radii: Vec<f64> = results.iter().map(|r| r.radius).collect();
    radii.sort_by(f64::total_cmp);
    let budget = failure_budget(cfg.trials, cfg.delta);
    let is_gram = estimator == EstimatorId::Gram;
    Ok(ExperimentReport {
        estimator,
        trials: cfg.trials,
        failures,
        complement_failures: is_gram.then_some(complement),
        nominal_delta: cfg.delta,
        failure_budget: budget,
        within_budget: failures as f64 <= budget && (!is_gram || complement as f64 <= budget),
        uncertified: results.iter().filter(|r| !r.certified).count(),
        certified_radius: RadiusStats { min: radii[0], median: radii[radii.len() / 2], max: radii[radii.len() - 1] },
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
