//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//! Built without the test harness so the verdict lines always print.

use std::time::Instant;

use efiid::checks::{self, NEIGHBOR_CONFIGS};
use efiid::error::Result;
use efiid::experiments::{
    decoupling_trials, free_energy_rows, mixing_rows, run_theta_tails, EpsSetting, ExperimentConfig, ExperimentKind, MixingRow,
};
use efiid::model::ModelKind;
use efiid::oracle::{quadrature_log_partition, TinySwm};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn glauber_consistency() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for (b, beta) in [0.5, 1.0].into_iter().enumerate() {
        for (i, nb) in NEIGHBOR_CONFIGS.iter().enumerate() {
            worst = worst.max(checks::glauber_ks(beta, nb, 100_000, 1000 + 10 * b as u64 + i as u64)?);
        }
    }
    verdict(worst < 0.01, format!("max KS {worst:.5} over 10 cases at 1e5 samples"))
}

fn monotonicity() -> Result<Verdict> {
    let swm = checks::swm_update_order(10_000, 2001, None)?;
    let (angle, edge) = checks::xy_update_order(10_000, 2002, None)?;
    let swm_runs = checks::sandwich_order_runs(ModelKind::Swm, 100, 3, 16.0, 2003);
    let xy_runs = checks::sandwich_order_runs(ModelKind::Xy, 100, 3, 16.0, 2004);
    let violations = swm.violations + angle.violations + edge.violations;
    verdict(
        violations == 0 && swm_runs.is_ok() && xy_runs.is_ok(),
        format!(
            "violations swm={} angle={} edge={} in {} pairs each; sandwich swm={:?} xy={:?}",
            swm.violations,
            angle.violations,
            edge.violations,
            swm.pairs,
            swm_runs.map(|e| format!("{e} events")),
            xy_runs.map(|e| format!("{e} events")),
        ),
    )
}

fn digit_matching() -> Result<Verdict> {
    let m = checks::digit_matching(1.0, 100_000, 50, 10, 3001)?;
    let gap = (m.matched_fraction - (1.0 - m.eps)).abs();
    verdict(
        gap <= 3.0 * m.se && m.identical && m.independence_p > 0.01,
        format!(
            "matched {:.5} vs {:.2} ({:.2} se), identical over {} configurations: {}, chi2 p={:.3} over {} cells",
            m.matched_fraction,
            1.0 - m.eps,
            gap / m.se,
            m.configurations,
            m.identical,
            m.independence_p,
            m.cells
        ),
    )
}

fn cftp_exactness() -> Result<Verdict> {
    let ks = checks::cftp_single_vertex_ks(1.0, 0.0, 10_000, 4001)?;
    let mean = checks::cftp_box_mean(0.5, 0.5, 10_000, 4002)?;
    let stable = checks::cftp_window_stability(0.5, 100, 4003)?;
    verdict(
        ks < 0.02 && mean.z() <= 3.0 && stable == 100,
        format!("KS {ks:.5}; 3x3 mean {:.5} vs {:.5}, z={:.2}; {stable}/100 stable", mean.sampled, mean.oracle, mean.z()),
    )
}

fn xy_representation() -> Result<Verdict> {
    let one = checks::xy_edge_marginals(1.0, &[0.3, 1.2], 1_000_000, 5001)?;
    let two = checks::xy_edge_marginals(1.0, &[0.3, 1.2, 0.7], 1_000_000, 5002)?;
    let z = one.max_z.max(two.max_z);
    let fact = one.factorization_error.max(two.factorization_error);
    verdict(z <= 3.0 && fact <= 1e-12, format!("max z {z:.3}; factorization error {fact:.1e}"))
}

fn massive_gff() -> Result<Verdict> {
    let err = checks::mgff_identity_error(5, &[0.25, 0.5, 1.0], &[0.05, 0.5, 2.0])?;
    let c = checks::swm_below_mgff(0.5, 3, 2000, 6001)?;
    verdict(
        err <= 1e-8 && c.sampled <= c.oracle + 3.0 * c.sampled_se,
        format!("identity error {err:.1e}; swm {:.4}±{:.4} vs gff {:.4} at m={:.4}", c.sampled, c.sampled_se, c.oracle, c.mass),
    )
}

fn decoupling() -> Result<Verdict> {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Decoupling,
        beta: vec![1.0],
        l: vec![16],
        delta: 0.25,
        clip: Some(3),
        replicas: 100,
        seed: 7001,
        ..Default::default()
    };
    cfg.validate()?;
    let trials = decoupling_trials(&cfg)?;
    let identical = trials.iter().filter(|t| t.identical).count();
    let changed = trials.iter().filter(|t| !t.inside_identical).count();
    verdict(
        identical == trials.len() && changed >= 1,
        format!("{identical}/{} identical after outside resampling; inside resampling changed {changed}", trials.len()),
    )
}

fn exponential_tails() -> Result<Verdict> {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::ThetaTails,
        beta: vec![0.01],
        eps: EpsSetting::Value(0.05),
        l: vec![4, 5, 6],
        delta: 0.5,
        sites: 20,
        replicas: 4,
        min_density: 0.95,
        synthetic_eps: 0.05,
        seed: 8001,
        ..Default::default()
    };
    cfg.validate()?;
    let report = run_theta_tails(&cfg)?;
    let s = &report.summary;
    let fit = |key: &str| match &s[key]["Ok"]["fit"] {
        serde_json::Value::Null => format!("{key}: {}", s[key]["Err"]),
        f => format!("{key}: slope {:.3e} R2 {:.3}", f["slope"].as_f64().unwrap_or(f64::NAN), f["r_squared"].as_f64().unwrap_or(f64::NAN)),
    };
    let synthetic = &s["synthetic"]["Ok"];
    verdict(
        report.passed,
        format!(
            "L={} from densities {:?}; {} samples; {}; {}; synthetic rate {:.4} vs {:.4}",
            s["selected_l"],
            s["density"].as_array().map(|rows| rows.iter().map(|r| r["density"].as_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()),
            s["samples"],
            fit("cluster_fit"),
            fit("local_set_fit"),
            synthetic["fitted_rate"].as_f64().unwrap_or(f64::NAN),
            synthetic["exact_rate"].as_f64().unwrap_or(f64::NAN),
        ),
    )
}

fn free_energy() -> Result<Verdict> {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::FreeEnergy,
        beta: (0..=80).map(|i| i as f64 * 0.025).collect(),
        n: vec![1],
        boundary: 0.0,
        replicas: 300_000,
        seed: 9001,
        ..Default::default()
    };
    cfg.validate()?;
    let (rows, aborted) = free_energy_rows(&cfg)?;
    let mut worst = (0.0f64, 0.0);
    for r in &rows {
        let exact = quadrature_log_partition(&TinySwm::constant_box(2, 1, 0.0, r.beta)?)?;
        if (r.f - exact).abs() > worst.0 {
            worst = ((r.f - exact).abs(), r.beta);
        }
    }
    let at_zero = rows.first().map(|r| r.f);
    verdict(
        aborted.is_none() && rows.len() == 81 && at_zero == Some(std::f64::consts::LN_2) && worst.0 < 1e-3,
        format!("f(0)={at_zero:?}; max gap {:.2e} at beta={} over {} points", worst.0, worst.1, rows.len()),
    )
}

fn mixing_curve() -> Result<Verdict> {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::MixingCurve,
        beta: vec![0.5],
        n: vec![2, 4, 8],
        replicas: 400,
        seed: 10_001,
        ..Default::default()
    };
    cfg.validate()?;
    let rows = mixing_rows(&cfg)?;
    let monotone = rows.windows(2).all(|w| w[1].nc.p <= w[0].nc.p + 3.0 * w[0].nc.se.hypot(w[1].nc.se));
    let union = rows.iter().all(MixingRow::union_holds);
    let ps: Vec<String> = rows.iter().map(|r| format!("n={}: {:.3}±{:.3}", r.n, r.nc.p, r.nc.se)).collect();
    verdict(monotone && union, format!("P[NC] {}; union bound holds at every n: {union}", ps.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Verdict>); 10] = [
        ("glauber consistency", glauber_consistency),
        ("monotone coupling", monotonicity),
        ("digit matching", digit_matching),
        ("cftp exactness", cftp_exactness),
        ("xy representation", xy_representation),
        ("massive gff comparison", massive_gff),
        ("decoupling", decoupling),
        ("exponential tails", exponential_tails),
        ("free energy", free_energy),
        ("mixing curve", mixing_curve),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!("{} {:>2} {name} ({:.1}s): {detail}", if passed { "PASS" } else { "FAIL" }, i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
