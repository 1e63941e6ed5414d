//! Proximal cutting-plane minimization of `h(m) = sup_j <a_j, m> - c_j`.
//!
//! The sup runs over an infinite family (directions on a sphere), so `h` is
//! only available through an oracle returning the most violated affine piece
//! it can find at a query point. Every piece is a global minorant of `h`,
//! which keeps the cutting-plane model valid even when the oracle misses the
//! true maximizer.

use crate::linalg::dot;

/// Affine minorant `m -> <slope, m> - offset`.
#[derive(Debug, Clone)]
pub struct Cut {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl Cut {
    #[inline]
    pub fn eval(&self, m: &[f64]) -> f64 {
        dot(&self.slope, m) - self.offset
    }
}

pub trait CutOracle {
    /// The most violated piece found at `m`; its value at `m` estimates `h(m)`.
    fn cut(&mut self, m: &[f64]) -> Cut;
}

#[derive(Debug, Clone)]
pub struct BundleConfig {
    pub max_rounds: usize,
    pub max_cuts: usize,
    /// Stop when the model predicts less than this relative decrease.
    pub rel_tol: f64,
}

impl BundleConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self { max_rounds: 300, max_cuts: 50 * dim.max(1), rel_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct BundleResult {
    pub center: Vec<f64>,
    /// Best known value of `h` at `center`.
    pub value: f64,
    pub rounds: usize,
    pub oracle_calls: usize,
    pub reached: bool,
}

/// Minimizes `h` until `h(center) <= target` or progress stalls.
pub fn minimize<O: CutOracle>(
    oracle: &mut O,
    start: Vec<f64>,
    initial_cuts: Vec<Cut>,
    target: f64,
    cfg: &BundleConfig,
) -> BundleResult {
    let mut cuts = initial_cuts;
    let mut center = start;
    let first = oracle.cut(&center);
    let mut h_center = first.eval(&center);
    cuts.push(first);
    h_center = h_center.max(model(&cuts, &center));
    let mut oracle_calls = 1;
    let mut t = 1.0;
    let mut rounds = 0;
    let mut weights: Vec<f64> = Vec::new();

    while rounds < cfg.max_rounds {
        if h_center <= target {
            return BundleResult { center, value: h_center, rounds, oracle_calls, reached: true };
        }
        rounds += 1;
        weights = solve_dual(&cuts, &center, t, &weights);
        let mut y = center.clone();
        for (w, c) in weights.iter().zip(&cuts) {
            if *w > 0.0 {
                for (yi, ai) in y.iter_mut().zip(&c.slope) {
                    *yi -= t * w * ai;
                }
            }
        }
        let predicted = h_center - model(&cuts, &y);
        if predicted <= cfg.rel_tol * h_center.abs().max(1.0) {
            break;
        }
        let cut = oracle.cut(&y);
        oracle_calls += 1;
        let h_y = cut.eval(&y).max(model(&cuts, &y));
        cuts.push(cut);
        weights.push(0.0);
        if h_y <= h_center - 0.1 * predicted {
            if h_y <= h_center - 0.5 * predicted {
                t *= 2.0;
            }
            center = y;
            h_center = h_y;
        } else if h_y > h_center {
            t *= 0.7;
        }
        if cuts.len() > cfg.max_cuts {
            prune(&mut cuts, &mut weights, cfg.max_cuts);
        }
    }
    let reached = h_center <= target;
    BundleResult { center, value: h_center, rounds, oracle_calls, reached }
}

fn model(cuts: &[Cut], m: &[f64]) -> f64 {
    cuts.iter().map(|c| c.eval(m)).fold(f64::NEG_INFINITY, f64::max)
}

/// Drops inactive cuts, oldest first, down to `max_cuts`.
fn prune(cuts: &mut Vec<Cut>, weights: &mut Vec<f64>, max_cuts: usize) {
    let excess = cuts.len() - max_cuts;
    let mut removed = 0;
    let mut keep = vec![true; cuts.len()];
    for (i, w) in weights.iter().enumerate() {
        if removed == excess {
            break;
        }
        if *w <= 0.0 && i + 1 < cuts.len() {
            keep[i] = false;
            removed += 1;
        }
    }
    let mut i = 0;
    cuts.retain(|_| {
        i += 1;
        keep[i - 1]
    });
    let mut i = 0;
    weights.retain(|_| {
        i += 1;
        keep[i - 1]
    });
}

/// Dual of `min_y max_j l_j(y) + |y - c|^2 / (2t)`:
/// `min_{w in simplex} (t/2)|sum w_j a_j|^2 - sum w_j l_j(c)`,
/// solved by accelerated projected gradient.
fn solve_dual(cuts: &[Cut], center: &[f64], t: f64, warm: &[f64]) -> Vec<f64> {
    let k = cuts.len();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let v = dot(&cuts[i].slope, &cuts[j].slope);
            gram[i * k + j] = v;
            gram[j * k + i] = v;
        }
    }
    let lin: Vec<f64> = cuts.iter().map(|c| c.eval(center)).collect();
    let lmax = (0..k).map(|i| gram[i * k + i]).sum::<f64>().max(1e-300);
    let step = 1.0 / (t * lmax);

    let mut w = vec![0.0; k];
    if warm.len() == k && warm.iter().sum::<f64>() > 0.5 {
        w.copy_from_slice(warm);
    } else {
        // start on the currently binding cut
        let best = (0..k).max_by(|&a, &b| lin[a].total_cmp(&lin[b])).unwrap();
        w[best] = 1.0;
    }
    let mut z = w.clone();
    let mut grad = vec![0.0; k];
    let mut tk = 1.0_f64;
    for _ in 0..4000 {
        for i in 0..k {
            grad[i] = t * dot(&gram[i * k..(i + 1) * k], &z) - lin[i];
        }
        let mut next: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| zi - step * gi).collect();
        project_simplex(&mut next);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let beta = (tk - 1.0) / tn;
        let mut change = 0.0_f64;
        for i in 0..k {
            let zi = next[i] + beta * (next[i] - w[i]);
            change = change.max((next[i] - w[i]).abs());
            z[i] = zi;
        }
        w = next;
        tk = tn;
        if change < 1e-13 {
            break;
        }
    }
    w
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let cand = (cum - 1.0) / (i + 1) as f64;
        if ui - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}
