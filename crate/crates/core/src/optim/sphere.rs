//! Projected gradient ascent on a product of unit spheres.
//!
//! A point is a flat vector split into consecutive blocks; each block is kept
//! at unit norm. One block gives the sphere `S_{d-1}`, two blocks give the
//! pairs `(xi, theta)` used by the matrix estimators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::linalg::{dot, normalize};

#[derive(Debug, Clone)]
pub struct SphereSearch {
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SphereSearch {
    fn default() -> Self {
        Self { restarts: 16, tol: 1e-9, max_iter: 500, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SphereMax {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Uniform draw on the product of spheres with the given block sizes.
pub fn random_point(blocks: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim: usize = blocks.iter().sum();
    let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    project(blocks, &mut x);
    x
}

/// Normalizes every block in place. A zero block is replaced by its first axis.
pub fn project(blocks: &[usize], x: &mut [f64]) {
    let mut start = 0;
    for &b in blocks {
        let blk = &mut x[start..start + b];
        if normalize(blk) == 0.0 {
            blk[0] = 1.0;
        }
        start += b;
    }
}

fn tangent(blocks: &[usize], x: &[f64], g: &mut [f64]) {
    let mut start = 0;
    for &b in blocks {
        let r = start..start + b;
        let c = dot(&x[r.clone()], &g[r.clone()]);
        for i in r {
            g[i] -= c * x[i];
        }
        start += b;
    }
}

impl SphereSearch {
    /// Maximizes `f` over the product of spheres. `f` returns the value and
    /// writes the Euclidean gradient into its second argument.
    ///
    /// Starts from every warm start, then from `restarts` uniform draws.
    /// Ties between restarts go to the earliest start, so the result does
    /// not depend on the thread count.
    pub fn maximize<F>(&self, blocks: &[usize], f: &F, warm: &[Vec<f64>]) -> SphereMax
    where
        F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut starts: Vec<Vec<f64>> = warm
            .iter()
            .map(|w| {
                let mut w = w.clone();
                project(blocks, &mut w);
                w
            })
            .collect();
        for _ in 0..self.restarts {
            starts.push(random_point(blocks, &mut rng));
        }
        let runs: Vec<SphereMax> = starts.into_par_iter().map(|s| self.ascend(blocks, f, s)).collect();
        let iterations = runs.iter().map(|r| r.iterations).sum();
        let mut best =
            runs.into_iter().reduce(|a, b| if b.value > a.value { b } else { a }).expect("at least one start");
        best.iterations = iterations;
        best
    }

    /// Single ascent run with Armijo backtracking along the retraction.
    pub fn ascend<F>(&self, blocks: &[usize], f: &F, start: Vec<f64>) -> SphereMax
    where
        F: Fn(&[f64], &mut [f64]) -> f64,
    {
        let dim = start.len();
        let mut x = start;
        let mut g = vec![0.0; dim];
        let mut value = f(&x, &mut g);
        let mut trial = vec![0.0; dim];
        let mut trial_g = vec![0.0; dim];
        let mut step = f64::NAN;
        let mut iterations = 0;
        while iterations < self.max_iter {
            iterations += 1;
            tangent(blocks, &x, &mut g);
            let gn2 = dot(&g, &g);
            let gn = gn2.sqrt();
            if gn <= self.tol {
                break;
            }
            if step.is_nan() {
                // first move turns by about a quarter radian
                step = 0.25 / gn;
            }
            let mut accepted = false;
            while step * gn > 1e-15 {
                for i in 0..dim {
                    trial[i] = x[i] + step * g[i];
                }
                project(blocks, &mut trial);
                let tv = f(&trial, &mut trial_g);
                if tv >= value + 1e-4 * step * gn2 {
                    let gain = tv - value;
                    std::mem::swap(&mut x, &mut trial);
                    std::mem::swap(&mut g, &mut trial_g);
                    value = tv;
                    accepted = true;
                    step *= 2.0;
                    if gain <= self.tol * value.abs().max(1.0) * 1e-3 {
                        return SphereMax { point: x, value, iterations };
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        SphereMax { point: x, value, iterations }
    }
}
