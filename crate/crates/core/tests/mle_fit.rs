use effcov::empirics::Row;
use effcov::linear::{self, LinearModelParams};
use effcov::mle::{
    bootstrap, chi_square_1_sf, fit, fit_nested, likelihood_ratio_test, log_likelihood,
    log_likelihood_ungrouped, FitConfig, FitError,
};
use effcov::Dataset;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn twelve() -> Vec<f64> {
    linear::integer_levels(64, 75)
}

fn strength_data(n: usize, seed: u64) -> Dataset {
    let p = LinearModelParams::strength_full();
    linear::simulate(&p, &linear::uniform_levels(&twelve(), n, seed), seed + 1).unwrap()
}

/// Textbook bivariate normal log-density, written out term by term.
fn direct_log_density(x: f64, y: f64, mx: f64, my: f64, sx2: f64, sy2: f64, sxy: f64) -> f64 {
    let sx = sx2.sqrt();
    let sy = sy2.sqrt();
    let rho = sxy / (sx * sy);
    let u = (x - mx) / sx;
    let v = (y - my) / sy;
    let q = (u * u - 2.0 * rho * u * v + v * v) / (1.0 - rho * rho);
    -(2.0 * std::f64::consts::PI * sx * sy * (1.0 - rho * rho).sqrt()).ln() - q / 2.0
}

#[test]
fn five_points_match_direct_density() {
    let p = LinearModelParams::strength_full();
    let pts = [
        (64.0, 540.0, 600.0),
        (64.0, 610.0, 590.0),
        (70.0, 580.0, 640.0),
        (75.0, 700.0, 700.0),
        (71.5, 550.0, 610.0),
    ];
    let d = Dataset::from_rows(pts.iter().map(|&(z, x, y)| Row { z, x, y }).collect()).unwrap();
    let want: f64 = pts
        .iter()
        .map(|&(z, x, y)| {
            let (mx, my) = (p.mu_x + p.b_x * z, p.mu_y + p.b_y * z);
            let c = p.cov;
            let sx2 = c.var_bx * z * z + 2.0 * c.cov_bxex * z + c.var_ex;
            let sy2 = c.var_by * z * z + 2.0 * c.cov_byey * z + c.var_ey;
            let sxy = c.cov_bxby * z * z + 2.0 * c.cov_bxey * z + c.cov_exey;
            direct_log_density(x, y, mx, my, sx2, sy2, sxy)
        })
        .sum();
    let got = log_likelihood(&d, &p).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn grouped_equals_per_row() {
    let d = strength_data(5000, 3);
    for p in [
        LinearModelParams::strength_full(),
        LinearModelParams::strength_reduced(),
    ] {
        let a = log_likelihood(&d, &p).unwrap();
        let b = log_likelihood_ungrouped(&d, &p).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn true_parameters_beat_perturbed_ones() {
    let p = LinearModelParams::strength_full();
    let d = strength_data(100_000, 5);
    let ll = log_likelihood(&d, &p).unwrap();
    let mut wins = 0;
    for (k, name) in LinearModelParams::NAMES.iter().enumerate() {
        let mut q = p;
        match k {
            0 => q.mu_x += 5.0,
            1 => q.mu_y -= 5.0,
            2 => q.b_x += 0.1,
            3 => q.b_y -= 0.1,
            _ => {
                q.cov.var_bx *= 1.05;
                q.cov.cov_bxby += 0.2;
            }
        }
        if log_likelihood(&d, &q).map_or(true, |l| l < ll) {
            wins += 1;
        } else {
            eprintln!("perturbing {name} did not lower the likelihood");
        }
    }
    assert_eq!(wins, 13);
}

#[test]
fn best_start_is_monotone_in_start_count() {
    let d = strength_data(3000, 7);
    let mut prev: Option<effcov::FitResult> = None;
    for n in 1..=6 {
        let f = fit(&d, &FitConfig::default().with_starts(n).with_seed(11)).unwrap();
        assert_eq!(f.start_log_likelihoods.len(), n);
        if let Some(p) = &prev {
            assert_eq!(
                &f.start_log_likelihoods[..n - 1],
                &p.start_log_likelihoods[..]
            );
            assert!(f.log_likelihood >= p.log_likelihood);
        }
        let best = f
            .start_log_likelihoods
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        assert_eq!(f.log_likelihood, best);
        prev = Some(f);
    }
}

#[test]
fn nested_fits_and_positive_definite_estimates() {
    for seed in 0..5 {
        let d = strength_data(4000, 100 + seed);
        let (full, reduced) =
            fit_nested(&d, &FitConfig::default().with_starts(6).with_seed(seed)).unwrap();
        assert!(full.log_likelihood >= reduced.log_likelihood - 1e-6);
        assert_eq!(reduced.params.cov.cov_bxby, 0.0);
        for f in [&full, &reduced] {
            assert!(f.params.validate().is_ok(), "{:?}", f.params);
            for z in twelve() {
                assert!(f.params.conditional_moments(z).is_ok(), "seed {seed} z {z}");
            }
        }
        let t = likelihood_ratio_test(&full, &reduced).unwrap();
        assert!(t.statistic >= -1e-6 && (0.0..=1.0).contains(&t.p_value));
    }
}

#[test]
fn lrt_mismatched_data_is_rejected() {
    let cfg = FitConfig::default().with_starts(2);
    let full = fit(&strength_data(500, 1), &cfg).unwrap();
    let reduced = fit(&strength_data(500, 2), &cfg.clone().reduced(true)).unwrap();
    assert!(matches!(
        likelihood_ratio_test(&full, &reduced),
        Err(FitError::DatasetMismatch(..))
    ));
    assert!(matches!(likelihood_ratio_test(&reduced, &full), Err(_)));
}

#[test]
fn chi_square_tail_matches_reference() {
    let oracle = ChiSquared::new(1.0).unwrap();
    for d in [0.0, 1e-8, 0.3, 1.0, 3.841, 13.65, 30.0, 60.0] {
        let want = 1.0 - oracle.cdf(d);
        let got = chi_square_1_sf(d);
        assert!(
            (got - want).abs() <= 1e-12 + 1e-9 * want,
            "D={d}: {got} vs {want}"
        );
    }
    assert!((chi_square_1_sf(3.841) - 0.05).abs() < 1e-4);
}

#[test]
fn fits_do_not_depend_on_thread_count() {
    let d = strength_data(3000, 9);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let cfg = FitConfig::default().with_starts(8).with_seed(4);
                let (f, r) = fit_nested(&d, &cfg).unwrap();
                let b = bootstrap(&d, &cfg.clone().with_starts(2), 6, 5).unwrap();
                format!("{}{}{}", f.to_kv(), r.to_kv(), b.to_kv())
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn shifting_x_moves_only_the_intercept() {
    let d = strength_data(20_000, 13);
    let c = 250.0;
    let cfg = FitConfig::default().with_starts(8).with_seed(2);
    let base = bootstrap(&d, &cfg, 60, 3).unwrap();
    let moved = fit(&d.shift_x(c), &cfg).unwrap();
    let a = base.point.params;
    let se_mu = base.std_error("mu_x").unwrap();
    assert!(
        (moved.params.mu_x - a.mu_x - c).abs() < 3.0 * se_mu,
        "{} vs {}",
        moved.params.mu_x,
        a.mu_x + c
    );
    for (k, name) in LinearModelParams::NAMES.iter().enumerate().skip(1) {
        let se = base.std_error(name).unwrap();
        let diff = moved.params.values()[k] - a.values()[k];
        assert!(diff.abs() <= 3.0 * se, "{name}: moved by {diff}, se {se}");
    }
}

#[test]
fn zero_slope_variability_is_recovered() {
    let mut p = LinearModelParams::strength_full();
    p.cov.var_bx = 0.0;
    p.cov.var_by = 0.0;
    p.cov.cov_bxby = 0.0;
    p.cov.cov_bxex = 0.0;
    p.cov.cov_byey = 0.0;
    p.cov.cov_bxey = 0.0;
    let d = linear::simulate(&p, &linear::uniform_levels(&twelve(), 20_000, 1), 2).unwrap();
    let b = bootstrap(&d, &FitConfig::default().with_starts(8).with_seed(3), 60, 4).unwrap();
    for name in ["var_bx", "var_by", "cov_bxby"] {
        let est = b.point.params.get(name).unwrap();
        let se = b.std_error(name).unwrap();
        assert!(est.abs() <= 3.0 * se, "{name}: {est} with se {se}");
    }
}

#[test]
fn degenerate_data_is_refused() {
    let rows = (0..40)
        .map(|i| Row {
            z: (i % 2) as f64,
            x: 1.0,
            y: 2.0,
        })
        .collect();
    let d = Dataset::from_rows(rows).unwrap();
    assert!(fit(&d, &FitConfig::default().with_starts(2)).is_err());
    assert!(bootstrap(&d, &FitConfig::default().with_starts(2), 10, 1).is_err());
    let one_level = Dataset::from_rows(
        (0..40)
            .map(|i| Row {
                z: 1.0,
                x: i as f64,
                y: (i * i) as f64,
            })
            .collect(),
    )
    .unwrap();
    assert!(matches!(
        fit(&one_level, &FitConfig::default()),
        Err(FitError::TooFewLevels(..))
    ));
}
