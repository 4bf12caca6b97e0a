//! Oracle values: frozen fixtures, closed forms, and agreement between the two.

use efiid::experiments::{oracle_fixtures, OracleFixtures};
use efiid::oracle::{quadrature_log_partition, TinySwm};

fn frozen() -> OracleFixtures {
    serde_json::from_str(include_str!("fixtures/oracles.json")).expect("fixture file parses")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn regenerated_fixtures_match_the_frozen_file() {
    let (now, then) = (oracle_fixtures().unwrap(), frozen());
    let pairs = |a: &[(f64, f64, f64)], b: &[(f64, f64, f64)]| {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.0, x.1), (y.0, y.1));
            assert!(close(x.2, y.2, 1e-12), "{x:?} vs {y:?}");
        }
    };
    pairs(&now.single_vertex_log_partition, &then.single_vertex_log_partition);
    pairs(&now.single_vertex_cdf, &then.single_vertex_cdf);
    for (x, y) in now.mgff_means.iter().zip(&then.mgff_means) {
        assert!(close(x.5, y.5, 1e-12));
    }
    for (x, y) in now.comparison_masses.iter().zip(&then.comparison_masses) {
        assert!(close(x.1, y.1, 1e-12));
    }
    for (x, y) in now.xy_edge_marginals.iter().zip(&then.xy_edge_marginals) {
        for (a, b) in x.2.iter().chain(&x.3).zip(y.2.iter().chain(&y.3)) {
            assert!(close(*a, *b, 1e-12));
        }
    }
    for (x, y) in now.bernoulli_cluster_laws.iter().zip(&then.bernoulli_cluster_laws) {
        for (a, b) in x.2.iter().zip(&y.2) {
            assert!(close(*a, *b, 1e-12));
        }
    }
}

/// Mass of `exp(-4 beta (x - b)^2)` on `[-1, 1]` by the error function.
fn single_vertex_partition(beta: f64, b: f64) -> f64 {
    if beta == 0.0 {
        return 2.0;
    }
    let s = 2.0 * beta.sqrt();
    (std::f64::consts::PI / (4.0 * beta)).sqrt() * 0.5 * (libm::erf(s * (1.0 - b)) - libm::erf(s * (-1.0 - b)))
}

#[test]
fn single_vertex_values_match_the_error_function() {
    let fx = frozen();
    for &(beta, b, log_z) in &fx.single_vertex_log_partition {
        assert!(close(log_z, single_vertex_partition(beta, b).ln(), 1e-10), "beta={beta} b={b}");
    }
    for &(beta, x, f) in &fx.single_vertex_cdf {
        let exact = if beta == 0.0 {
            0.5 * (x + 1.0)
        } else {
            let s = 2.0 * beta.sqrt();
            (libm::erf(s * x) + libm::erf(s)) / (2.0 * libm::erf(s))
        };
        assert!((f - exact).abs() <= 1e-10, "beta={beta} x={x}: {f} vs {exact}");
    }
}

#[test]
fn log_partition_at_zero_beta_is_log_two() {
    let inst = TinySwm::constant_box(2, 1, 0.3, 0.0).unwrap();
    assert!((quadrature_log_partition(&inst).unwrap() - std::f64::consts::LN_2).abs() < 1e-14);
}

#[test]
fn single_site_mgff_is_one_step_of_the_walk() {
    // one interior site, all four neighbours on the boundary: the walk exits
    // after one step, so the mean is 1 / (1 + m / (4 beta))
    for &(a, b, beta, m, _, mean) in &frozen().mgff_means {
        if (a, b) == (1, 1) {
            assert!(close(mean, 1.0 / (1.0 + m / (4.0 * beta)), 1e-14));
        }
    }
}

#[test]
fn single_edge_marginals_have_the_closed_form() {
    let fx = frozen();
    let (beta, angles, omega, eta) = &fx.xy_edge_marginals[0];
    assert_eq!(angles.len(), 2);
    let one = |w: f64| {
        let p = 1.0 - (-2.0 * beta * w).exp();
        p / (p + 2.0 * (1.0 - p))
    };
    assert!(close(omega[0], one(angles[0].cos() * angles[1].cos()), 1e-12));
    assert!(close(eta[0], one(angles[0].sin() * angles[1].sin()), 1e-12));
    // an angle of zero has no sine component, so its eta edges stay closed
    let (_, angles, _, eta) = &fx.xy_edge_marginals[1];
    assert_eq!(angles[0], 0.0);
    assert_eq!(eta[0], 0.0);
}

#[test]
fn bernoulli_law_in_one_dimension() {
    for (eps, d, law) in &frozen().bernoulli_cluster_laws {
        assert!(close(law[0], 1.0 - eps, 1e-15));
        if *d == 1 {
            assert!(close(law[1], eps * (1.0 - eps).powi(5), 1e-14));
        }
        assert!(law.iter().sum::<f64>() < 1.0);
    }
}

#[test]
fn comparison_masses_decrease_with_beta() {
    let m = frozen().comparison_masses;
    assert!(m.windows(2).all(|w| w[1].1 < w[0].1));
    for &(beta, mass) in &m {
        assert!(mass > 0.0 && mass <= 4.0 * beta);
    }
}
