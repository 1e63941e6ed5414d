use heavytail::influence::{phi_asym, phi_sym, SmoothInput};
use heavytail::vector_mean::*;

fn sample(rows: &[&[f64]]) -> VectorSample {
    VectorSample::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn params_and_radius_reference_values() {
    let b = VecMomentBounds::new(1.0, 4.0).unwrap();
    let p = select_params_uncentered(100, b, 0.01).unwrap();
    // high-precision evaluation: sqrt(2 ln 100 / 100), 20 * that
    assert!((p.lambda - 0.303_485_425_877_029_27).abs() < 1e-15);
    assert!((p.beta - 6.069_708_517_540_584).abs() < 1e-13);
    let r = deviation_radius(100, b, 0.01).unwrap();
    assert!((r - 0.503_485_425_877_029_2).abs() < 1e-15);

    let v = 2.5;
    let p = select_params_uncentered(1, VecMomentBounds::new(v, v).unwrap(), (-1.0f64).exp()).unwrap();
    assert!((p.lambda - (2.0 / v).sqrt()).abs() < 1e-15);
    // beta = sqrt(n T) lambda = sqrt(2 T / v), which is sqrt 2 when v = T
    assert!((p.beta - 2f64.sqrt()).abs() < 1e-14);

    let p = select_params_uncentered(10, b, 1.0 - 1e-12).unwrap();
    assert!(p.lambda < 1e-6);

    let r = deviation_radius(100_000_000, VecMomentBounds::new(1.0, 1.0).unwrap(), 0.5).unwrap();
    assert!(r <= 2.4e-4);
    // 2 log(1/delta) = 1 makes both terms sqrt(v)
    let r = deviation_radius(1, VecMomentBounds::new(4.0, 4.0).unwrap(), (-0.5f64).exp()).unwrap();
    assert!((r - 4.0).abs() < 1e-14);
    assert!(select_params_uncentered(10, b, 0.0).is_err());
}

#[test]
fn directional_estimate_cases() {
    let params = ScaleParams::new(0.3, 5.0).unwrap();
    let zeros = sample(&[&[0.0, 0.0], &[0.0, 0.0]]);
    assert_eq!(directional_estimate(&zeros, &[0.6, 0.8], params).unwrap(), 0.0);
    assert!(directional_estimate(&zeros, &[0.0, 0.0], params).is_err());
    assert!(directional_estimate(&zeros, &[1.0, 1.0], params).is_err());

    // tiny lambda, huge beta: close to the plain projection
    let c = 2.0;
    let theta = [0.6, 0.8];
    let one = sample(&[&[c * 0.6, c * 0.8]]);
    let p = ScaleParams::new(1e-4, 1e12).unwrap();
    let e = directional_estimate(&one, &theta, p).unwrap();
    assert!((e - c).abs() < 1e-7, "{e}");

    // straight-line oracle
    let rows: [&[f64]; 3] = [&[1.0, -2.0], &[0.5, 3.0], &[-4.0, 0.25]];
    let s = sample(&rows);
    let theta = [0.28, -0.96];
    let p = ScaleParams::new(0.7, 2.0).unwrap();
    let mut want = 0.0;
    for r in rows {
        let proj = r[0] * theta[0] + r[1] * theta[1];
        let nrm = (r[0] * r[0] + r[1] * r[1]).sqrt();
        want += phi_sym(SmoothInput::new(0.7 * proj, 0.7 * nrm / 2f64.sqrt()).unwrap());
    }
    want /= 3.0 * 0.7;
    let got = directional_estimate(&s, &theta, p).unwrap();
    assert!((got - want).abs() < 1e-15);
    let neg = directional_estimate(&s, &[-0.28, 0.96], p).unwrap();
    assert_eq!(neg, -got);
}

#[test]
fn fit_center_linear_oracle() {
    let m0 = [0.3, -1.2, 2.0];
    let oracle = FnOracle { dim: 3, f: |t: &[f64]| t.iter().zip(&m0).map(|(a, b)| a * b).sum::<f64>() };
    let fit = fit_center(&oracle, 1e-6, 1e-9, &FitOptions::default()).unwrap();
    for (a, b) in fit.m_hat.iter().zip(&m0) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(fit.reached);
}

#[test]
fn fit_center_offset_oracle() {
    // g(m) = |m - m0| + 0.1
    let m0 = [1.0, 2.0];
    let oracle = FnOracle { dim: 2, f: |t: &[f64]| t[0] * m0[0] + t[1] * m0[1] - 0.1 };
    let opts = FitOptions::default();
    let fit = fit_center(&oracle, 0.05, 1e-9, &opts).unwrap();
    assert!(!fit.reached);
    let dist = ((fit.m_hat[0] - m0[0]).powi(2) + (fit.m_hat[1] - m0[1]).powi(2)).sqrt();
    assert!(fit.gap >= 0.1 - 1e-9);
    assert!((fit.gap - (dist + 0.1)).abs() < 1e-6);
    let fit = fit_center(&oracle, 0.2, 1e-9, &opts).unwrap();
    assert!(fit.reached && fit.gap <= 0.2 + 1e-9);
}

#[test]
fn fit_center_matches_dense_grid_minimax() {
    let rows: [&[f64]; 5] = [&[1.0, 0.5], &[-0.3, 2.2], &[4.0, -1.0], &[0.2, 0.1], &[-2.5, 0.7]];
    let s = sample(&rows);
    let p = ScaleParams::new(0.4, 3.0).unwrap();
    let oracle = FnOracle { dim: 2, f: |t: &[f64]| directional_estimate_unchecked(&s, t, p) };
    let tol = 1e-6;
    let fit = fit_center(&oracle, 1e-12, tol, &FitOptions::default()).unwrap();

    let grid: Vec<([f64; 2], f64)> = (0..10_000)
        .map(|j| {
            let a = j as f64 * std::f64::consts::TAU / 10_000.0;
            let t = [a.cos(), a.sin()];
            (t, directional_estimate(&s, &t, p).unwrap())
        })
        .collect();
    let g = |m: [f64; 2]| grid.iter().map(|(t, e)| t[0] * m[0] + t[1] * m[1] - e).fold(f64::MIN, f64::max);
    // refine a box search on the convex grid objective
    let mut c = [fit.m_hat[0], fit.m_hat[1]];
    let mut w = 0.5;
    for _ in 0..14 {
        let mut best = (g(c), c);
        for i in -20..=20 {
            for j in -20..=20 {
                let m = [c[0] + w * i as f64 / 20.0, c[1] + w * j as f64 / 20.0];
                let v = g(m);
                if v < best.0 {
                    best = (v, m);
                }
            }
        }
        c = best.1;
        w /= 4.0;
    }
    let brute = g(c);
    let ours = g([fit.m_hat[0], fit.m_hat[1]]);
    assert!(ours <= brute + 2.0 * tol, "ours {ours} brute {brute}");
}

fn directional_estimate_unchecked(s: &VectorSample, t: &[f64], p: ScaleParams) -> f64 {
    let nrm = (t[0] * t[0] + t[1] * t[1]).sqrt();
    let u = [t[0] / nrm, t[1] / nrm];
    directional_estimate(s, &u, p).unwrap()
}

#[test]
fn scalar_pipeline_matches_direct_formula() {
    let xs = [0.3, -1.2, 5.0, 0.8, 1.1, -0.4, 2.2];
    let s = VectorSample::new(xs.to_vec(), xs.len(), 1).unwrap();
    let b = VecMomentBounds::new(3.0, 3.0).unwrap();
    let est = estimate_mean_uncentered(&s, b, 0.05).unwrap();
    let p = select_params_uncentered(xs.len(), b, 0.05).unwrap();
    let mut e = 0.0;
    for x in xs {
        e += phi_sym(SmoothInput::new(p.lambda * x, p.lambda * f64::abs(x) / p.beta.sqrt()).unwrap());
    }
    e /= xs.len() as f64 * p.lambda;
    assert!((est.m_hat[0] - e).abs() < 1e-12, "{} {e}", est.m_hat[0]);
    assert!(est.certified);
    assert_eq!(est.radius, 2.0 * deviation_radius(xs.len(), b, 0.05).unwrap());
}

#[test]
fn constant_sample_recovered() {
    let x0 = [0.01, -0.02, 0.005];
    let rows: Vec<Vec<f64>> = (0..50).map(|_| x0.to_vec()).collect();
    let s = VectorSample::from_rows(&rows).unwrap();
    let est = estimate_mean_uncentered(&s, VecMomentBounds::new(1.0, 3.0).unwrap(), 0.05).unwrap();
    let err: f64 = est.m_hat.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(est.certified);
    assert!(err <= est.radius);
}

#[test]
fn centered_identical_observations() {
    let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![3.0, -1.0]).collect();
    let s = VectorSample::from_rows(&rows).unwrap();
    let cb = CenteredVecMomentBounds::new(0.5, 1.0, 10.0).unwrap();
    let est = estimate_mean_centered(&s, cb, 0.05, Some(2), &FitOptions::default()).unwrap();
    let err = ((est.m_hat[0] - 3.0).powi(2) + (est.m_hat[1] + 1.0).powi(2)).sqrt();
    assert!(err <= est.radius, "{err} {}", est.radius);
    assert!(estimate_mean_centered(&s, cb, 0.05, Some(4), &FitOptions::default()).is_err());
    assert!(estimate_mean_centered(&s, cb, 0.05, Some(0), &FitOptions::default()).is_err());
}

#[test]
fn centered_radius_approaches_uncentered_form() {
    let n = 1_000_000;
    let cb = CenteredVecMomentBounds::new(1.0, 1.0, 1.0).unwrap();
    let b = centered_radius(n, default_split(n), cb, 0.05).unwrap();
    let asym = deviation_radius(n, VecMomentBounds::new(1.0, 1.0).unwrap(), 0.05).unwrap();
    assert!((b / asym - 1.0).abs() < 0.05, "{}", b / asym);
}

#[test]
fn adaptive_constant_worked_example() {
    let c = adaptive_constant_from_log_error(std::f64::consts::E, 0.01, 1e6f64.ln());
    assert!(c <= 1.6, "{c}");
    // paper's intermediate bound 1.13 + 2.2 / log(1/delta)
    assert!(c <= 1.13 + 2.2 / 100f64.ln());
}

#[test]
fn adaptive_grid_weights_sum_below_one() {
    let g = AdaptiveGrid::default_for(1000);
    let total: f64 = g.indices().into_iter().map(AdaptiveGrid::weight).sum();
    assert!(total <= 1.0);
    assert_eq!(g.indices()[..5], [0, -1, 1, -2, 2]);
    assert!(AdaptiveGrid::new(1.0, 1.0, 10).is_err());
}

#[test]
fn adaptive_zero_sample_and_antisymmetry() {
    let zeros = sample(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
    let g = AdaptiveGrid::default_for(3);
    let e = adaptive_directional_estimate(&zeros, &[1.0, 0.0], &g, adaptive_beta(0.05), 0.05).unwrap();
    assert_eq!(e, 0.0);

    let s = sample(&[&[1.0, -0.5], &[2.0, 0.3], &[-0.7, 4.0], &[0.1, 0.1]]);
    let th = [0.6, -0.8];
    let a = adaptive_directional_estimate(&s, &th, &g, 3.0, 0.05).unwrap();
    let b = adaptive_directional_estimate(&s, &[-0.6, 0.8], &g, 3.0, 0.05).unwrap();
    assert_eq!(a, -b);
}

#[test]
fn adaptive_one_point_brute_force() {
    let x: f64 = 1.7;
    let s = VectorSample::new(vec![x], 1, 1).unwrap();
    let (delta, beta): (f64, f64) = (0.05, 2.0);
    let g = AdaptiveGrid::new(0.5, 2.0, 1).unwrap();
    let side = |sign: f64| {
        let mut best = f64::NEG_INFINITY;
        for k in -g.k_max..=g.k_max {
            let lam = g.alpha.powi(k as i32) / 0.5;
            let mu = if k == 0 { 0.5 } else { 1.0 / (2.0 * (k.abs() as f64 + 1.0) * (k.abs() as f64 + 2.0)) };
            let v = phi_asym(SmoothInput::new(lam * sign * x, lam * x.abs() / beta.sqrt()).unwrap()) / lam
                - (beta + 2.0 * (1.0 / (delta * mu)).ln()) / (2.0 * lam);
            best = best.max(v);
        }
        best
    };
    let want = side(1.0) - side(-1.0);
    let got = adaptive_directional_estimate(&s, &[1.0], &g, beta, delta).unwrap();
    assert!((got - want).abs() < 1e-14, "{got} {want}");
}

#[test]
fn adaptive_grid_truncation_is_safe() {
    let s = sample(&[&[1.0, -0.5], &[2.0, 0.3], &[-0.7, 4.0], &[0.1, 0.1], &[9.0, -3.0]]);
    let g = AdaptiveGrid::default_for(s.n());
    let wide = AdaptiveGrid::with_k_max(g.sigma_guess, g.alpha, g.k_max + 10).unwrap();
    for th in [[1.0, 0.0], [0.0, -1.0], [0.8, 0.6]] {
        let a = adaptive_directional_estimate(&s, &th, &g, 6.0, 0.05).unwrap();
        let b = adaptive_directional_estimate(&s, &th, &wide, 6.0, 0.05).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn adaptive_bound_close_to_fixed_scale_bound() {
    // with the ideal guess the grid contains lambda_* and C = cosh(log(alpha)/2) + small
    let (n, v, t, delta): (usize, f64, f64, f64) = (1000, 1.0, 10.0, 0.01);
    let l = (1.0f64 / delta).ln();
    let sigma = ((2.0 * v * l + t) / (8.0 * l * l)).sqrt();
    let grid = AdaptiveGrid::new(sigma, std::f64::consts::E, n).unwrap();
    let b = VecMomentBounds::new(v, t).unwrap();
    let c = adaptive_constant(grid.alpha, grid.sigma_guess, delta, b).unwrap();
    let base = (0.5f64).cosh() + std::f64::consts::E.sqrt() / (2.0 * l) * (5.0 / 2f64.sqrt()).ln();
    assert!((c - base).abs() < 1e-12);
    let r = adaptive_radius(n, &grid, delta, b).unwrap();
    let ideal = 4.0 * (2.0 * (2.0 * v * l + t) / n as f64).sqrt();
    assert!((r / ideal - c).abs() < 1e-12);
}

#[test]
fn adaptive_fit_runs() {
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|i| vec![1.0 + ((i * 7) % 11) as f64 / 11.0 - 0.5, -2.0 + ((i * 5) % 13) as f64 / 13.0 - 0.5])
        .collect();
    let s = VectorSample::from_rows(&rows).unwrap();
    let g = AdaptiveGrid::default_for(s.n());
    let opts = FitOptions { restarts: 4, ..Default::default() };
    let b = VecMomentBounds::new(5.0, 6.0).unwrap();
    let est = estimate_mean_adaptive(&s, &g, 0.05, Some(b), &opts).unwrap();
    assert!(est.certified);
    assert!(est.constant_c.unwrap() >= 1.0);
    let err = ((est.m_hat[0] - 1.0).powi(2) + (est.m_hat[1] + 2.0).powi(2)).sqrt();
    assert!(err <= est.radius);
    let free = estimate_mean_adaptive(&s, &g, 0.05, None, &opts).unwrap();
    assert!(!free.certified);
    assert!(free.radius >= 0.0);
}
