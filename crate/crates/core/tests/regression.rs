use heavytail::harness::{trial_rng, Family, RegressionSpec, VectorSpec};
use heavytail::matrix_mean::McConfig;
use heavytail::regression::*;
use heavytail::vector_mean::FitOptions;
use heavytail::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn plugin(g: &[&[f64]], v: &[f64], eps: f64, eta: f64) -> PluginEstimates {
    PluginEstimates::new(g.iter().map(|r| r.to_vec()).collect(), v.to_vec(), eps, eta, 0.1).unwrap()
}

fn from_mat(g: &DMatrix<f64>, v: &DVector<f64>, eps: f64, eta: f64) -> PluginEstimates {
    let d = v.len();
    PluginEstimates::new(
        (0..d).map(|i| g.row(i).iter().copied().collect()).collect(),
        v.iter().copied().collect(),
        eps,
        eta,
        0.1,
    )
    .unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// `B B^T + floor I` with Gaussian `B`.
fn random_psd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| normal(rng));
    &b * b.transpose() / d as f64 + floor * DMatrix::identity(d, d)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| normal(rng))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `(G_hat + lambda) theta - V_hat`
fn ridge_residual(p: &PluginEstimates, lambda: f64, theta: &[f64]) -> DVector<f64> {
    let d = p.d();
    (p.g() + lambda * DMatrix::identity(d, d)) * DVector::from_column_slice(theta) - p.v()
}

#[test]
fn empirical_risk_cases() {
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], 0.0, 0.0);
    assert_eq!(empirical_risk(&[0.0, 0.0], &p, 0.3).unwrap(), 0.0);
    assert!((empirical_risk(&[0.6, 0.8], &p, 0.0).unwrap() - 1.0).abs() < 1e-15);
    let mut rng = trial_rng(1, 0);
    for _ in 0..20 {
        let g = random_psd(&mut rng, 4, 0.1);
        let v = random_vec(&mut rng, 4);
        let p = from_mat(&g, &v, 0.0, 0.0);
        let th: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let lambda: f64 = rng.random_range(0.0..2.0);
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                want += th[i] * p.g_hat[i][j] * th[j];
            }
            want += lambda * th[i] * th[i] - 2.0 * th[i] * p.v_hat[i];
        }
        let got = empirical_risk(&th, &p, lambda).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn ball_minimizer_cases() {
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.5, 0.0], 0.1, 0.05);
    let (t, excess) = minimize_over_ball(&p, 2.0).unwrap();
    assert!((t[0] - 0.5).abs() < 1e-12 && t[1].abs() < 1e-12);
    assert!((excess - 1.2).abs() < 1e-12);
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[5.0, 0.0], 0.0, 0.0);
    let (t, _) = minimize_over_ball(&p, 1.0).unwrap();
    assert!((t[0] - 1.0).abs() < 1e-12 && t[1].abs() < 1e-12);
    assert!(minimize_over_ball(&p, 0.0).is_err());
}

#[test]
fn ball_minimizer_matches_grid_search() {
    let mut rng = trial_rng(2, 0);
    for _ in 0..5 {
        let g = random_psd(&mut rng, 2, 0.0);
        let v = 3.0 * random_vec(&mut rng, 2);
        let p = from_mat(&g, &v, 0.0, 0.0);
        let b: f64 = rng.random_range(0.2..2.0);
        let (t, _) = minimize_over_ball(&p, b).unwrap();
        assert!(norm(&t) <= b * (1.0 + 1e-12));
        let got = empirical_risk(&t, &p, 0.0).unwrap();
        // polar grid with the boundary circle included
        let k = 1000;
        let mut best = f64::INFINITY;
        for i in 1..=k {
            let rad = b * i as f64 / k as f64;
            for j in 0..k {
                let a = std::f64::consts::TAU * j as f64 / k as f64;
                best = best.min(empirical_risk(&[rad * a.cos(), rad * a.sin()], &p, 0.0).unwrap());
            }
        }
        assert!(got <= best + 1e-12 && got >= best - 1e-3, "{got} vs {best}");
    }
}

#[test]
fn ridge_fit_cases() {
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 0.0], 0.0, 0.0);
    let f = ridge_fit(&p, 1.0).unwrap();
    assert!((f.theta_hat[0] - 0.5).abs() < 1e-15 && f.theta_hat[1] == 0.0);
    assert!(!f.min_norm);
    let p = plugin(&[&[2.0, 1.0], &[1.0, 3.0]], &[1.0, -1.0], 0.0, 0.0);
    let f = ridge_fit(&p, 0.0).unwrap();
    // inverse of [[2, 1], [1, 3]] is [[3, -1], [-1, 2]] / 5
    assert!((f.theta_hat[0] - 0.8).abs() < 1e-14 && (f.theta_hat[1] + 0.6).abs() < 1e-14);
    // singular at lambda = 0: minimum-norm solution, flagged
    let p = plugin(&[&[1.0, 0.0], &[0.0, 0.0]], &[2.0, 1.0], 0.0, 0.0);
    let f = ridge_fit(&p, 0.0).unwrap();
    assert!(f.min_norm);
    assert_eq!(f.theta_hat, vec![2.0, 0.0]);
    assert!(ridge_fit(&p, -1.0).is_err());
}

#[test]
fn ridge_solution_shrinks_with_lambda() {
    for seed in 0..20 {
        let mut rng = trial_rng(3, seed);
        let p = from_mat(&random_psd(&mut rng, 5, 0.0), &random_vec(&mut rng, 5), 0.0, 0.0);
        let mut last = f64::INFINITY;
        for k in 0..40 {
            let lambda = 1e-3 * 1.4f64.powi(k);
            let f = ridge_fit(&p, lambda).unwrap();
            let r = ridge_residual(&p, lambda, &f.theta_hat).norm();
            assert!(r <= 1e-10 * p.v().norm().max(1e-300), "residual {r}");
            let n = norm(&f.theta_hat);
            assert!(n <= last * (1.0 + 1e-12));
            last = n;
        }
    }
}

#[test]
fn region_membership_cases() {
    let p = plugin(&[&[2.0, 0.5], &[0.5, 1.0]], &[1.0, 2.0], 0.0, 0.0);
    let r = RegionSpec::fit(p, 0.1, None).unwrap();
    assert!(region_contains(&r, &r.theta_hat.clone()));
    let mut off = r.theta_hat.clone();
    off[0] += 1e-3;
    assert!(!region_contains(&r, &off));
    // a point pushed exactly onto the boundary along a random ray
    let mut rng = trial_rng(4, 0);
    for _ in 0..50 {
        let p = from_mat(
            &random_psd(&mut rng, 3, 0.1),
            &random_vec(&mut rng, 3),
            rng.random_range(0.0..0.3),
            rng.random_range(0.05..0.5),
        );
        let r = RegionSpec::fit(p, 0.2, None).unwrap();
        let u = random_vec(&mut rng, 3).normalize();
        let at = |t: f64| -> Vec<f64> { r.theta_hat.iter().zip(u.iter()).map(|(a, b)| a + t * b).collect() };
        let (mut lo, mut hi) = (0.0, 1.0);
        while r.slack(&at(hi)) <= 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if r.slack(&at(mid)) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(r.slack(&at(lo)).abs() < 1e-12);
        assert!(region_contains(&r, &at(lo)));
        assert!(!region_contains(&r, &at(lo * 1.01)));
    }
    // the norm cap
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[2.0, 0.0], 0.0, 0.0);
    let r = RegionSpec::fit(p, 0.0, Some(1.0)).unwrap();
    assert!(!region_contains(&r, &[2.0, 0.0]));
}

/// Proximal gradient on `R_hat(xi) + eps |xi - theta|^2 + 2 kappa |xi - theta|`
/// with step `1 / (2 (|G_hat| + lambda + eps))`.
fn prox_gradient_pick(region: &RegionSpec, theta: &[f64]) -> Vec<f64> {
    let p = &region.plugin;
    let d = p.d();
    let a = p.g() + region.lambda * DMatrix::identity(d, d);
    let eps = p.epsilon;
    let t = DVector::from_column_slice(theta);
    let kappa = eps * t.norm() + p.eta;
    let top = a.clone().symmetric_eigen().eigenvalues.max();
    let step = 1.0 / (2.0 * (top + eps));
    let mut x = t.clone();
    for _ in 0..200_000 {
        let grad = 2.0 * (&a * &x - p.v()) + 2.0 * eps * (&x - &t);
        let y = &x - step * grad;
        // prox of 2 kappa |. - theta|: shrink toward theta
        let off = &y - &t;
        let r = off.norm();
        let shrink = if r > 2.0 * kappa * step { 1.0 - 2.0 * kappa * step / r } else { 0.0 };
        let next = &t + shrink * off;
        let moved = (&next - &x).norm();
        x = next;
        if moved < 1e-15 * (1.0 + x.norm()) {
            break;
        }
    }
    x.iter().copied().collect()
}

/// `(A xi - V_hat) + eps (xi - theta) + (xi - theta) kappa / |xi - theta|`
fn pick_stationarity(region: &RegionSpec, theta: &[f64], xi: &[f64]) -> f64 {
    let p = &region.plugin;
    let t = DVector::from_column_slice(theta);
    let x = DVector::from_column_slice(xi);
    let kappa = p.epsilon * t.norm() + p.eta;
    let diff = &x - &t;
    let r = ridge_residual(p, region.lambda, xi) + p.epsilon * &diff + kappa / diff.norm() * &diff;
    r.norm()
}

fn infeasible_start(rng: &mut ChaCha8Rng, r: &RegionSpec) -> Vec<f64> {
    loop {
        let th: Vec<f64> = r.theta_hat.iter().map(|t| t + 3.0 * normal(rng)).collect();
        if r.slack(&th) > 0.0 {
            return th;
        }
    }
}

#[test]
fn improved_pick_cases() {
    // eps = eta = 0: the ridge solution itself
    let p = plugin(&[&[2.0, 0.3], &[0.3, 1.0]], &[1.0, -1.0], 0.0, 0.0);
    let r = RegionSpec::fit(p, 0.5, None).unwrap();
    let xi = improved_pick(&r, &[3.0, 3.0]).unwrap();
    assert!(dist(&xi, &r.theta_hat) < 1e-12);
    // inside the region: no improvement
    assert!(matches!(improved_pick(&r, &r.theta_hat.clone()), Err(Error::Domain(_))));
    // one dimension: rho (a + eps) + kappa = |g|
    let (a, v, eps, eta, lambda) = (1.5, 0.9, 0.1, 0.2, 0.25);
    let p = plugin(&[&[a]], &[v], eps, eta);
    let r = RegionSpec::fit(p, lambda, None).unwrap();
    let tb = 4.0;
    let g = (a + lambda) * tb - v;
    let kappa = eps * tb + eta;
    let rho = (g.abs() - kappa) / (a + lambda + eps);
    let want = tb - g.signum() * rho;
    let got = improved_pick(&r, &[tb]).unwrap()[0];
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn improved_pick_matches_proximal_gradient() {
    let mut rng = trial_rng(5, 0);
    for _ in 0..10 {
        let d = 3;
        let p = from_mat(
            &random_psd(&mut rng, d, 0.2),
            &random_vec(&mut rng, d),
            rng.random_range(0.01..0.3),
            rng.random_range(0.05..0.5),
        );
        let r = RegionSpec::fit(p, rng.random_range(0.0..0.5), None).unwrap();
        let tb = infeasible_start(&mut rng, &r);
        let got = improved_pick(&r, &tb).unwrap();
        let oracle = prox_gradient_pick(&r, &tb);
        assert!(dist(&got, &oracle) < 1e-7 * (1.0 + norm(&oracle)), "{got:?} vs {oracle:?}");
        assert!(pick_stationarity(&r, &tb, &got) < 1e-8);
    }
}

#[test]
fn improved_pick_surrogate_is_negative() {
    let mut rng = trial_rng(6, 0);
    for k in 0..50 {
        let d = 1 + k % 4;
        let p = from_mat(
            &random_psd(&mut rng, d, 0.05),
            &random_vec(&mut rng, d),
            rng.random_range(0.0..0.4),
            rng.random_range(0.01..0.5),
        );
        let r = RegionSpec::fit(p, rng.random_range(0.0..1.0), None).unwrap();
        let tb = infeasible_start(&mut rng, &r);
        let xi = improved_pick(&r, &tb).unwrap();
        assert!(pick_surrogate(&r, &tb, &xi).unwrap() < 0.0);
    }
}

#[test]
fn min_norm_cases() {
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[2.0, 0.0], 0.0, 1.0);
    let r = RegionSpec::fit(p, 0.0, None).unwrap();
    let t = min_norm_in_region(&r).unwrap();
    assert!((t[0] - 1.0).abs() < 1e-9 && t[1].abs() < 1e-12);
    let p = plugin(&[&[2.0, 0.5], &[0.5, 1.0]], &[1.0, 2.0], 0.0, 0.0);
    let r = RegionSpec::fit(p, 0.1, None).unwrap();
    assert!(dist(&min_norm_in_region(&r).unwrap(), &r.theta_hat) < 1e-9);
    // a region containing the origin
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.5, 0.0], 0.0, 1.0);
    let r = RegionSpec::fit(p, 0.0, None).unwrap();
    assert_eq!(min_norm_in_region(&r).unwrap(), vec![0.0, 0.0]);
}

/// Smallest `t >= 0` with `|t A u - c| <= eps t + eta`, or infinity.
fn ray_entry(au: &DVector<f64>, c: &DVector<f64>, eps: f64, eta: f64) -> f64 {
    let c0 = c.norm_squared() - eta * eta;
    if c0 <= 0.0 {
        return 0.0;
    }
    let a2 = au.norm_squared() - eps * eps;
    let b = -2.0 * (au.dot(c) + eps * eta);
    let disc = b * b - 4.0 * a2 * c0;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    // root nearest zero of a2 t^2 + b t + c0, written to avoid cancellation
    let q = -0.5 * (b - disc.sqrt());
    let t = c0 / q;
    if q > 0.0 && t >= 0.0 {
        t
    } else {
        f64::INFINITY
    }
}

fn brute_min_norm(r: &RegionSpec, dirs: &[DVector<f64>]) -> (f64, DVector<f64>) {
    let d = r.plugin.d();
    let a = r.plugin.g() + r.lambda * DMatrix::identity(d, d);
    let c = &a * DVector::from_column_slice(&r.theta_hat);
    let mut best = (f64::INFINITY, DVector::zeros(d));
    for u in dirs {
        let t = ray_entry(&(&a * u), &c, r.plugin.epsilon, r.plugin.eta);
        if t < best.0 {
            best = (t, t * u);
        }
    }
    best
}

fn fibonacci_sphere(k: usize) -> Vec<DVector<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..k)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            DVector::from_vec(vec![rho * phi.cos(), rho * phi.sin(), z])
        })
        .collect()
}

/// Directions within `width` radians of `u` on a `k x k` tangent grid.
fn patch(u: &DVector<f64>, width: f64, k: usize) -> Vec<DVector<f64>> {
    let helper =
        if u[0].abs() < 0.9 { DVector::from_vec(vec![1.0, 0.0, 0.0]) } else { DVector::from_vec(vec![0.0, 1.0, 0.0]) };
    let e1 = (&helper - helper.dot(u) * u).normalize();
    let e2 = u.cross(&e1);
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let s = width * (2.0 * i as f64 / (k - 1) as f64 - 1.0);
            let t = width * (2.0 * j as f64 / (k - 1) as f64 - 1.0);
            out.push((u + s * &e1 + t * &e2).normalize());
        }
    }
    out
}

#[test]
fn min_norm_matches_dense_direction_search() {
    let mut rng = trial_rng(7, 0);
    for d in 1..=3usize {
        for _ in 0..3 {
            let p = from_mat(
                &random_psd(&mut rng, d, 0.1),
                &(2.0 * random_vec(&mut rng, d)),
                rng.random_range(0.0..0.3),
                rng.random_range(0.05..0.5),
            );
            let r = RegionSpec::fit(p, rng.random_range(0.0..0.5), None).unwrap();
            let got = min_norm_in_region(&r).unwrap();
            assert!(region_contains(&r, &got));
            assert!(norm(&got) <= norm(&r.theta_hat) * (1.0 + 1e-12));
            let (t, point) = match d {
                1 => brute_min_norm(&r, &[DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])]),
                2 => {
                    let dirs: Vec<_> = (0..1_000_000)
                        .map(|i| {
                            let a = std::f64::consts::TAU * i as f64 / 1e6;
                            DVector::from_vec(vec![a.cos(), a.sin()])
                        })
                        .collect();
                    brute_min_norm(&r, &dirs)
                }
                _ => {
                    let (_, coarse) = brute_min_norm(&r, &fibonacci_sphere(1_000_000));
                    let u =
                        if coarse.norm() > 0.0 { coarse.normalize() } else { DVector::from_vec(vec![1.0, 0.0, 0.0]) };
                    brute_min_norm(&r, &patch(&u, 0.01, 1000))
                }
            };
            assert!((norm(&got) - t).abs() < 1e-3, "d={d}: {} vs {t}", norm(&got));
            assert!(dist(&got, point.as_slice()) < 1e-3, "d={d}: {got:?} vs {point}");
        }
    }
}

#[test]
fn slow_rate_cases() {
    let p = plugin(&[&[1.0, 0.0], &[0.0, 2.0]], &[1.0, 1.0], 0.1, 0.05);
    let s = slow_rate_pick(&p).unwrap();
    assert!((s.lambda - 0.3).abs() < 1e-15);
    assert!((s.bound(1.0) - 0.45).abs() < 1e-15);
    let r = RegionSpec::fit(p, 0.3, None).unwrap();
    assert!(region_contains(&r, &s.theta));
    let p = plugin(&[&[1.0]], &[1.0], 0.0, 0.0);
    assert!(slow_rate_pick(&p).is_err());
}

#[test]
fn restricted_sigma_cases() {
    let g = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
    assert!((restricted_sigma(&g, &DMatrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-15);
    assert!((restricted_sigma(&g, &DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap() - 3.0).abs() < 1e-15);
    assert!(restricted_sigma(&g, &DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).is_err());
    let mut rng = trial_rng(8, 0);
    for _ in 0..20 {
        let g = random_psd(&mut rng, 5, 0.0);
        let basis = DMatrix::from_fn(5, 2, |_, _| normal(&mut rng)).qr().q();
        // sqrt of the least eigenvalue of B^T G^T G B
        let m = basis.transpose() * g.transpose() * &g * &basis;
        let want = m.symmetric_eigen().eigenvalues.min().max(0.0).sqrt();
        assert!((restricted_sigma(&g, &basis).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn subspace_fit_cases() {
    let p = plugin(&[&[2.0, 0.3], &[0.3, 1.0]], &[1.0, -1.0], 0.1, 0.1);
    let full = fit_subspace(&p, &DMatrix::identity(2, 2), 0.4).unwrap();
    let ridge = ridge_fit(&p, 0.4).unwrap();
    assert!(dist(&full.theta, &ridge.theta_hat) < 1e-14);
    let p = plugin(&[&[2.0, 0.0], &[0.0, 1.0]], &[1.0, -1.0], 0.1, 0.1);
    let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let f = fit_subspace(&p, &e1, 0.5).unwrap();
    assert!((f.theta[0] - 0.4).abs() < 1e-15 && f.theta[1] == 0.0);
    assert!(f.contains(&f.theta.clone()));
    assert!(!f.contains(&[0.4, 0.1]));
}

/// Plug-in estimates within `(eps, eta)` of `(G, V)` in operator and Euclidean norm.
fn perturbed(rng: &mut ChaCha8Rng, g: &DMatrix<f64>, v: &DVector<f64>, eps: f64, eta: f64) -> PluginEstimates {
    let d = v.len();
    let e = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let e = &e + e.transpose();
    let e = e.clone() * (rng.random_range(0.0..1.0) * eps / e.clone().symmetric_eigen().eigenvalues.abs().max());
    let w = random_vec(rng, d);
    let w = w.clone() * (rng.random_range(0.0..1.0) * eta / w.norm());
    from_mat(&(g + e), &(v + w), eps, eta)
}

#[test]
fn subspace_excess_risk_within_bound() {
    let mut rng = trial_rng(9, 0);
    for _ in 0..100 {
        let d = 4;
        let g = random_psd(&mut rng, d, 0.05);
        let v = random_vec(&mut rng, d);
        let (eps, eta, lambda) = (rng.random_range(0.0..0.2), rng.random_range(0.01..0.3), rng.random_range(0.0..0.5));
        let p = perturbed(&mut rng, &g, &v, eps, eta);
        let basis = DMatrix::from_fn(d, 2, |_, _| normal(&mut rng)).qr().q();
        let fit = fit_subspace(&p, &basis, lambda).unwrap();
        let tilde = DVector::from_vec(fit.min_norm().unwrap());
        // truth restricted to L
        let gl = basis.transpose() * &g * &basis + lambda * DMatrix::identity(2, 2);
        let theta_l = &basis * gl.clone().lu().solve(&(basis.transpose() * &v)).unwrap();
        let risk = |t: &DVector<f64>| t.dot(&(&g * t)) + lambda * t.norm_squared() - 2.0 * t.dot(&v);
        // least eigenvalue of pi_L G pi_L on L
        let sigma_l = (basis.transpose() * &g * &basis).symmetric_eigen().eigenvalues.min();
        let bound = 4.0 * (eps * theta_l.norm() + eta).powi(2) / (sigma_l + lambda);
        let excess = risk(&tilde) - risk(&theta_l);
        assert!(excess <= bound * (1.0 + 1e-9) + 1e-12, "{excess} > {bound}");
    }
}

fn coordinate_pairs(d: usize) -> ModelFamily {
    let mut supports: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    for i in 0..d {
        for j in i + 1..d {
            supports.push(vec![i, j]);
        }
    }
    ModelFamily::coordinate_supports(d, supports).unwrap()
}

#[test]
fn general_selection_cases() {
    let p = plugin(&[&[2.0, 0.3], &[0.3, 1.0]], &[1.0, -1.0], 0.1, 0.1);
    let r = RegionSpec::fit(p.clone(), 0.2, Some(10.0)).unwrap();
    let fam = ModelFamily::new(vec![DMatrix::identity(2, 2)], false).unwrap();
    let sel = select_model_general(&r, &fam).unwrap();
    assert!(dist(&sel.theta, &min_norm_in_region(&r).unwrap()) < 1e-9);
    // no cap: not allowed
    let r0 = RegionSpec::fit(p, 0.2, None).unwrap();
    assert!(select_model_general(&r0, &fam).is_err());
    // equal sigma_hat on both axes: the smaller support wins
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.05, 0.05], 0.0, 0.2);
    let r = RegionSpec::fit(p, 0.0, Some(5.0)).unwrap();
    let fam = ModelFamily::coordinate_supports(2, vec![vec![1], vec![0]]).unwrap();
    let sel = select_model_general(&r, &fam).unwrap();
    assert_eq!(sel.support, Some(vec![0]));
    // nothing meets a tight region
    let p = plugin(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 1.0], 0.0, 0.01);
    let r = RegionSpec::fit(p, 0.0, Some(5.0)).unwrap();
    let fam = ModelFamily::coordinate_supports(2, vec![vec![0], vec![1]]).unwrap();
    assert!(matches!(select_model_general(&r, &fam), Err(Error::EmptySelection(_))));
}

#[test]
fn planted_sparse_support_is_recovered() {
    let d = 10;
    let (eps, eta, lambda, cap) = (0.02, 0.02, 0.1, 5.0);
    let mut hits = 0;
    let trials = 100;
    for t in 0..trials {
        let mut rng = trial_rng(10, t);
        let diag: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..2.0)).collect();
        let g = DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 });
        let mut theta = DVector::zeros(d);
        let (a, b) = (rng.random_range(0..d), rng.random_range(0..d - 1));
        let b = if b >= a { b + 1 } else { b };
        theta[a] = 2.0;
        theta[b] = -1.5;
        let v = (&g + lambda * DMatrix::identity(d, d)) * &theta;
        let p = perturbed(&mut rng, &g, &v, eps, eta);
        let r = RegionSpec::fit(p, lambda, Some(cap)).unwrap();
        let sel = select_model_general(&r, &coordinate_pairs(d)).unwrap();
        let support = sel.support.clone().unwrap();
        let sigma = diag[a].min(diag[b]);
        let err = (DVector::from_vec(sel.theta.clone()) - &theta).norm();
        if support.contains(&a) && support.contains(&b) && err <= 2.0 * (eps * cap + eta) / (sigma + lambda) {
            hits += 1;
        }
    }
    assert!(hits as f64 >= (1.0 - 2.0 * 0.05) * trials as f64, "{hits}");
}

#[test]
fn nested_selection_cases() {
    // theta_hat already in the first level
    let p = plugin(&[&[2.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[1.0, 0.0, 0.0], 0.05, 0.05);
    let r = RegionSpec::fit(p, 0.1, Some(3.0)).unwrap();
    let fam = ModelFamily::nested_coordinates(3, &[1, 2, 3]).unwrap();
    assert_eq!(select_model_nested(&r, &fam).unwrap().index, 0);
    // non-nested family rejected
    let fam = ModelFamily::coordinate_supports(3, vec![vec![1], vec![0]]).unwrap();
    assert!(select_model_nested(&r, &fam).is_err());
}

#[test]
fn planted_second_level_is_selected() {
    let (eps, eta, lambda) = (0.02, 0.02, 0.1);
    let fam = ModelFamily::nested_coordinates(5, &[1, 2, 4]).unwrap();
    let mut good = 0;
    let trials = 100;
    for t in 0..trials {
        let mut rng = trial_rng(11, t);
        let g = random_psd(&mut rng, 5, 0.5);
        let theta = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0, 0.0]);
        let v = (&g + lambda * DMatrix::identity(5, 5)) * &theta;
        let p = perturbed(&mut rng, &g, &v, eps, eta);
        let r = RegionSpec::fit(p, lambda, Some(4.0)).unwrap();
        if select_model_nested(&r, &fam).unwrap().index <= 1 {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.9 * trials as f64, "{good}");
}

#[test]
fn larger_eta_never_raises_the_level() {
    let fam = ModelFamily::nested_coordinates(4, &[1, 2, 3, 4]).unwrap();
    for seed in 0..30 {
        let mut rng = trial_rng(12, seed);
        let g = random_psd(&mut rng, 4, 0.2);
        let v = random_vec(&mut rng, 4);
        let mut last = usize::MAX;
        for k in 0..8 {
            let eta = 0.01 * 2f64.powi(k);
            let r = RegionSpec::fit(from_mat(&g, &v, 0.05, eta), 0.1, Some(50.0)).unwrap();
            let level = select_model_nested(&r, &fam).unwrap().index;
            assert!(level <= last);
            last = level;
        }
    }
}

#[test]
fn plugin_formulas() {
    let b = RegressionBounds::new(2.0, 8.0, 1.5, 6.0).unwrap();
    let (n, delta): (usize, f64) = (1000, 0.05);
    let l = (1.0 / delta).ln();
    let eps = 2.0 * (2.0 * 2.0 / n as f64 * (2.0 * l + 12.0 * 2.0)).sqrt();
    let eta = 2.0 * ((6.0 / n as f64).sqrt() + (2.0 * 1.5 * l / n as f64).sqrt());
    assert!((b.epsilon(n, delta).unwrap() - eps).abs() < 1e-15);
    assert!((b.eta(n, delta).unwrap() - eta).abs() < 1e-15);
    assert!(RegressionBounds::new(2.0, 1.0, 1.0, 1.0).is_err());
}

#[test]
fn noiseless_plugin_covers_v() {
    let spec = RegressionSpec {
        x: VectorSpec::isotropic(Family::Gaussian, 2000, 2),
        theta0: vec![1.0, -0.5],
        noise: Family::Gaussian,
        noise_scale: 0.0,
    };
    let m = spec.moments().unwrap();
    let bounds = RegressionBounds::new(m.v, m.t, m.v_prime, m.t_prime).unwrap();
    let opts = FitOptions { restarts: 2, max_iter: 100, max_rounds: 40, ..FitOptions::default() };
    let delta = 0.05;
    let trials = 20;
    let mut misses = 0;
    for t in 0..trials {
        let data = spec.draw(&mut trial_rng(13, t)).unwrap();
        let p = build_plugin(&data, bounds, delta, McConfig::new(32, t).unwrap(), &opts).unwrap();
        assert_eq!(p.delta, 2.0 * delta);
        assert!(p.epsilon >= bounds.epsilon(2000, delta).unwrap() && p.eta >= bounds.eta(2000, delta).unwrap());
        let gv = DMatrix::from_row_slice(2, 2, &m.g) * DVector::from_column_slice(&spec.theta0);
        if (p.v() - gv).norm() > p.eta {
            misses += 1;
        }
    }
    assert!(misses as f64 <= 2.0 * delta * trials as f64 + 3.0 * (trials as f64 * 0.1 * 0.9).sqrt());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regions_grow_with_the_radii(seed in 0u64..1000, scale_e in 1.0f64..3.0, scale_n in 1.0f64..3.0) {
        let mut rng = trial_rng(14, seed);
        let g = random_psd(&mut rng, 3, 0.1);
        let v = random_vec(&mut rng, 3);
        let (eps, eta) = (rng.random_range(0.0..0.2), rng.random_range(0.0..0.3));
        let small = RegionSpec::fit(from_mat(&g, &v, eps, eta), 0.1, None).unwrap();
        let big = RegionSpec::fit(from_mat(&g, &v, eps * scale_e, eta * scale_n), 0.1, None).unwrap();
        for _ in 0..50 {
            let th: Vec<f64> = small.theta_hat.iter().map(|t| t + 0.5 * normal(&mut rng)).collect();
            prop_assert!(!region_contains(&small, &th) || region_contains(&big, &th));
        }
    }

    #[test]
    fn min_norm_shrinks_as_eta_grows(seed in 0u64..1000) {
        let mut rng = trial_rng(15, seed);
        let g = random_psd(&mut rng, 3, 0.1);
        let v = random_vec(&mut rng, 3);
        let eps = rng.random_range(0.0..0.2);
        let mut last = f64::INFINITY;
        for k in 0..6 {
            let r = RegionSpec::fit(from_mat(&g, &v, eps, 0.01 * 3f64.powi(k)), 0.2, None).unwrap();
            let t = min_norm_in_region(&r).unwrap();
            prop_assert!(region_contains(&r, &t));
            prop_assert!(norm(&t) <= last * (1.0 + 1e-9) + 1e-12);
            last = norm(&t);
        }
    }
}
