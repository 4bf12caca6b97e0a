//! Exactness checks of the samplers against the independent oracles.
//!
//! Every check returns what it measured; callers decide what passes.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cftp::{cftp_sample, replica_seed, sandwich_run, CftpOptions, Dynamics};
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Exterior, Site, SiteGraph};
use crate::model::{ModelKind, ModelSpec};
use crate::oracle::{comparison_mass, enumerate_xy, mgff_mean, quadrature_cdf, rejection_sample, TinySwm};
use crate::randomness::{event_stream, IotaStream, PoissonField, UpdateRandomness};
use crate::stats::{chi_square_independence, ks_distance, mean_se};
use crate::swm::{SwmBoundary, SwmDynamics};
use crate::xy::XyBoundary;

/// Matching parameter used by the checks unless stated otherwise.
pub const CHECK_EPS: f64 = 0.1;

/// Fixed neighbour values for the single-site checks.
pub const NEIGHBOR_CONFIGS: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 1.0],
    [-1.0, 0.5, 0.25, -0.3],
    [0.9, 0.8, -0.95, 0.7],
    [-1.0, -1.0, -0.6, -0.2],
];

/// A deliberate defect for testing that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// The upper copy sees the reflected primary uniform `1 - u`.
    SignFlip,
}

fn mutate(iota: &UpdateRandomness, mutation: Option<Mutation>) -> UpdateRandomness {
    match mutation {
        Some(Mutation::SignFlip) => UpdateRandomness { u_primary: 1.0 - iota.u_primary, ..*iota },
        None => *iota,
    }
}

/// One interior site in `d = 2` with the given neighbour values.
pub fn single_site(beta: f64, neighbors: &[f64]) -> Result<(SwmDynamics, TinySwm)> {
    let graph = SiteGraph::from_box(&BoxRegion::centered(2, 1)?);
    if neighbors.len() != graph.boundary_len() {
        return Err(Error::InvalidParameter("one value per neighbour".into()));
    }
    let spec = ModelSpec::calibrated(ModelKind::Swm, 2, beta, CHECK_EPS)?;
    let dynamics = spec.swm(Arc::new(graph.clone()), SwmBoundary::Values(neighbors.to_vec()))?;
    Ok((dynamics, TinySwm::new(graph, neighbors.to_vec(), beta)?))
}

/// Quadrature CDF of site 0 tabulated on `[-1, 1]` and interpolated linearly.
pub struct TabulatedCdf {
    values: Vec<f64>,
}

impl TabulatedCdf {
    pub fn new(inst: &TinySwm, points: usize) -> Result<Self> {
        let step = 2.0 / (points - 1) as f64;
        let values = (0..points).map(|i| quadrature_cdf(inst, 0, -1.0 + step * i as f64)).collect::<Result<_>>()?;
        Ok(Self { values })
    }

    pub fn at(&self, x: f64) -> f64 {
        let n = self.values.len() - 1;
        let s = ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * n as f64).min(n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let f = s - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// KS distance between single-site Glauber updates and the quadrature CDF.
pub fn glauber_ks(beta: f64, neighbors: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let (dynamics, inst) = single_site(beta, neighbors)?;
    let cdf = TabulatedCdf::new(&inst, 4001)?;
    let state = dynamics.state_from_values(&[0.0])?;
    let xs = IotaStream::new(seed)
        .take(samples)
        .map(|iota| dynamics.update_value(&state, 0, &iota).map(|(c, _)| dynamics.grid().value(c)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ks_distance(&xs, |x| cdf.at(x)))
}

/// Count of order violations among coupled updates of ordered pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub pairs: usize,
    pub violations: usize,
    /// Seed of the first violating pair, for replay.
    pub first_violation: Option<u64>,
}

impl OrderCheck {
    fn new() -> Self {
        Self { pairs: 0, violations: 0, first_violation: None }
    }

    fn record(&mut self, ok: bool, seed: u64) {
        self.pairs += 1;
        if !ok {
            self.violations += 1;
            self.first_violation.get_or_insert(seed);
        }
    }
}

const CHECK_BETAS: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

fn pick_beta(stream: &mut IotaStream) -> f64 {
    CHECK_BETAS[((stream.uniform() * CHECK_BETAS.len() as f64) as usize).min(CHECK_BETAS.len() - 1)]
}

/// Ordered SWM pairs on `Λ_2` with extremal boundary, updated at a random
/// site under the same randomness.
pub fn swm_update_order(pairs: usize, seed: u64, mutation: Option<Mutation>) -> Result<OrderCheck> {
    let graph = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 2)?));
    let n = graph.len();
    let mut out = OrderCheck::new();
    for r in 0..pairs as u64 {
        let trial = replica_seed(seed, r);
        let mut stream = IotaStream::new(trial);
        let spec = ModelSpec::calibrated(ModelKind::Swm, 2, pick_beta(&mut stream), CHECK_EPS)?;
        let dynamics = spec.swm(graph.clone(), SwmBoundary::Extremal)?;
        let low: Vec<f64> = (0..n).map(|_| 2.0 * stream.uniform() - 1.0).collect();
        let up: Vec<f64> = low.iter().map(|&x| x + (1.0 - x) * stream.uniform()).collect();
        let upper = dynamics.state_from_values(&up)?;
        let mut lower = dynamics.minimal();
        lower.interior = dynamics.state_from_values(&low)?.interior;
        let u = ((stream.uniform() * n as f64) as usize).min(n - 1);
        let iota = stream.next().expect("endless stream");
        let (a, _) = dynamics.update_value(&lower, u, &iota)?;
        let (b, _) = dynamics.update_value(&upper, u, &mutate(&iota, mutation))?;
        out.record(a <= b, trial);
    }
    Ok(out)
}

/// Ordered XY pairs on `Λ_2` with extremal boundary: angle updates and edge
/// updates checked separately.
pub fn xy_update_order(pairs: usize, seed: u64, mutation: Option<Mutation>) -> Result<(OrderCheck, OrderCheck)> {
    let graph = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 2)?));
    let (n, m) = (graph.len(), graph.edge_count());
    let mut angle = OrderCheck::new();
    let mut edges = OrderCheck::new();
    for r in 0..pairs as u64 {
        let trial = replica_seed(seed, r);
        let mut stream = IotaStream::new(trial);
        let spec = ModelSpec::calibrated(ModelKind::Xy, 2, pick_beta(&mut stream), CHECK_EPS)?;
        let dynamics = spec.xy(graph.clone(), XyBoundary::Extremal)?;
        let a_low: Vec<f64> = (0..n).map(|_| FRAC_PI_2 * stream.uniform()).collect();
        let a_up: Vec<f64> = a_low.iter().map(|&a| a + (FRAC_PI_2 - a) * stream.uniform()).collect();
        let o_up: Vec<bool> = (0..m).map(|_| stream.uniform() < 0.5).collect();
        let o_low: Vec<bool> = o_up.iter().map(|&o| o || stream.uniform() < 0.5).collect();
        let e_low: Vec<bool> = (0..m).map(|_| stream.uniform() < 0.5).collect();
        let e_up: Vec<bool> = e_low.iter().map(|&e| e || stream.uniform() < 0.5).collect();
        let mut lower = dynamics.state(&a_low, o_low, e_low, false)?;
        let mut upper = dynamics.state(&a_up, o_up, e_up, true)?;
        let u = ((stream.uniform() * n as f64) as usize).min(n - 1);
        let iota = stream.next().expect("endless stream");
        let (x, _) = dynamics.angle_update(&lower, u, &iota)?;
        let (y, _) = dynamics.angle_update(&upper, u, &mutate(&iota, mutation))?;
        angle.record(x <= y, trial);
        let deg = graph.degree();
        let ou: Vec<f64> = (0..deg).map(|_| stream.uniform()).collect();
        let eu: Vec<f64> = (0..deg).map(|_| stream.uniform()).collect();
        dynamics.edge_update(&mut lower, u, &ou, &eu);
        match mutation {
            Some(Mutation::SignFlip) => {
                let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
                dynamics.edge_update(&mut upper, u, &flip(&ou), &flip(&eu));
            }
            None => dynamics.edge_update(&mut upper, u, &ou, &eu),
        }
        edges.record(dynamics.ordered_at(&lower, &upper, u), trial);
    }
    Ok((angle, edges))
}

/// Sandwich runs over `[-t, 0]` on `Λ_n`; any order violation is an error.
/// Returns the number of events checked.
pub fn sandwich_order_runs(kind: ModelKind, runs: usize, n: i64, t: f64, seed: u64) -> Result<usize> {
    let graph = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, n)?));
    let mut events = 0;
    for r in 0..runs as u64 {
        let trial = replica_seed(seed, r);
        let beta = CHECK_BETAS[r as usize % CHECK_BETAS.len()];
        let spec = ModelSpec::calibrated(kind, 2, beta, CHECK_EPS)?;
        let stream = event_stream(&graph, -t, 0.0, &PoissonField::new(trial))?;
        events += match kind {
            ModelKind::Swm => sandwich_run(&spec.swm(graph.clone(), SwmBoundary::Extremal)?, &stream, |_| {})?.events,
            ModelKind::Xy => sandwich_run(&spec.xy(graph.clone(), XyBoundary::Extremal)?, &stream, |_| {})?.events,
        };
    }
    Ok(events)
}

/// Results of the digit-matching check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCheck {
    pub eps: f64,
    pub samples: usize,
    pub matched_fraction: f64,
    /// Standard error of the matched fraction under `1 - eps`.
    pub se: f64,
    /// Matched updates whose fine digits were compared across configurations.
    pub compared: usize,
    pub configurations: usize,
    /// Fine digits on the matching branch were bit-identical every time.
    pub identical: bool,
    /// Chi-square p-value for independence of the matching flag and the cell.
    pub independence_p: f64,
    pub cells: usize,
}

/// Matching frequency, bit-identical fine digits across neighbour
/// configurations, and independence of the flag from the leading digits.
pub fn digit_matching(beta: f64, samples: usize, configurations: usize, cells: usize, seed: u64) -> Result<MatchingCheck> {
    let (dynamics, _) = single_site(beta, &NEIGHBOR_CONFIGS[2])?;
    let state = dynamics.state_from_values(&[0.0])?;
    let mut stream = IotaStream::new(seed);
    let mut matched = 0usize;
    let mut by_cell: std::collections::BTreeMap<i64, [u64; 2]> = Default::default();
    for _ in 0..samples {
        let iota = stream.next().expect("endless stream");
        let (c, m) = dynamics.update_value(&state, 0, &iota)?;
        matched += usize::from(m);
        by_cell.entry(c.cell).or_default()[usize::from(m)] += 1;
    }
    let mut rows: Vec<[u64; 2]> = by_cell.into_values().collect();
    rows.sort_by_key(|r| std::cmp::Reverse(r[0] + r[1]));
    rows.truncate(cells);
    let table: Vec<Vec<u64>> = rows.iter().map(|r| r.to_vec()).collect();
    let independence_p = chi_square_independence(&table)?;

    let neighbor_sets: Vec<Vec<f64>> = (0..configurations).map(|_| (0..4).map(|_| 2.0 * stream.uniform() - 1.0).collect()).collect();
    let mut systems = Vec::with_capacity(configurations);
    for nb in &neighbor_sets {
        let (d, _) = single_site(beta, nb)?;
        let s = d.state_from_values(&[0.0])?;
        systems.push((d, s));
    }
    let mut identical = true;
    let mut compared = 0;
    while compared < 200 {
        let iota = stream.next().expect("endless stream");
        if !iota.matched(CHECK_EPS) {
            continue;
        }
        compared += 1;
        let mut first = None;
        for (d, s) in &systems {
            let (c, m) = d.update_value(s, 0, &iota)?;
            identical &= m;
            let bits = c.offset.to_bits();
            identical &= *first.get_or_insert(bits) == bits;
        }
    }
    let eps = CHECK_EPS;
    Ok(MatchingCheck {
        eps,
        samples,
        matched_fraction: matched as f64 / samples as f64,
        se: (eps * (1.0 - eps) / samples as f64).sqrt(),
        compared,
        configurations,
        identical,
        independence_p,
        cells: table.len(),
    })
}

/// KS distance of CFTP samples at one interior vertex (`Λ_1`, `d = 2`,
/// constant boundary) against the quadrature CDF.
pub fn cftp_single_vertex_ks(beta: f64, boundary: f64, samples: usize, seed: u64) -> Result<f64> {
    let (dynamics, inst) = single_site(beta, &[boundary; 4])?;
    let cdf = TabulatedCdf::new(&inst, 4001)?;
    let xs = (0..samples as u64)
        .map(|r| {
            let res = cftp_sample(&dynamics, &[0], &PoissonField::new(replica_seed(seed, r)), CftpOptions::default())?.into_result()?;
            Ok(dynamics.site_values(&res.state, 0)[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ks_distance(&xs, |x| cdf.at(x)))
}

/// Two independent estimates of the same mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanComparison {
    pub sampled: f64,
    pub sampled_se: f64,
    pub oracle: f64,
    pub oracle_se: f64,
}

impl MeanComparison {
    /// `|sampled - oracle|` in combined standard errors.
    pub fn z(&self) -> f64 {
        (self.sampled - self.oracle).abs() / self.sampled_se.hypot(self.oracle_se)
    }
}

fn cftp_center_values(dynamics: &SwmDynamics, samples: usize, seed: u64, t_max: f64) -> Result<Vec<f64>> {
    let center = dynamics.graph().len() / 2;
    (0..samples as u64)
        .map(|r| {
            let opts = CftpOptions { t_min: 1.0, t_max };
            let res = cftp_sample(dynamics, &[center], &PoissonField::new(replica_seed(seed, r)), opts)?.into_result()?;
            Ok(dynamics.site_values(&res.state, center)[0])
        })
        .collect()
}

/// Mean of the center spin of `Λ_2` (`3 x 3`) by CFTP against rejection sampling.
pub fn cftp_box_mean(beta: f64, boundary: f64, samples: usize, seed: u64) -> Result<MeanComparison> {
    let inst = TinySwm::constant_box(2, 2, boundary, beta)?;
    let spec = ModelSpec::calibrated(ModelKind::Swm, 2, beta, CHECK_EPS)?;
    let dynamics = spec.swm(Arc::new(inst.graph.clone()), SwmBoundary::Constant(boundary))?;
    let xs = cftp_center_values(&dynamics, samples, seed, 1e6)?;
    let (sampled, sampled_se) = mean_se(&xs);
    let center = inst.len() / 2;
    let rej = rejection_sample(&inst, samples, seed ^ 0x00C0_FFEE)?;
    let ys: Vec<f64> = rej.samples.iter().map(|x| x[center]).collect();
    let (oracle, oracle_se) = mean_se(&ys);
    Ok(MeanComparison { sampled, sampled_se, oracle, oracle_se })
}

/// Seeds for which the center value of a `3 x 3` box stays bit-identical
/// when the coalescing window is doubled and quadrupled.
pub fn cftp_window_stability(beta: f64, seeds: usize, seed: u64) -> Result<usize> {
    let graph = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 2)?));
    let spec = ModelSpec::calibrated(ModelKind::Swm, 2, beta, CHECK_EPS)?;
    let dynamics = spec.swm(graph.clone(), SwmBoundary::Constant(0.5))?;
    let center = graph.len() / 2;
    let mut stable = 0;
    for r in 0..seeds as u64 {
        let field = PoissonField::new(replica_seed(seed, r));
        let first = cftp_sample(&dynamics, &[center], &field, CftpOptions::default())?.into_result()?;
        let key = dynamics.site_key(&first.state, center);
        let mut same = true;
        for factor in [2.0, 4.0] {
            let opts = CftpOptions { t_min: first.window * factor, ..CftpOptions::default() };
            let again = cftp_sample(&dynamics, &[center], &field, opts)?.into_result()?;
            same &= dynamics.site_key(&again.state, center) == key;
        }
        stable += usize::from(same);
    }
    Ok(stable)
}

/// Sampled edge marginals against exhaustive enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMarginalCheck {
    pub edges: usize,
    pub samples: usize,
    pub omega_sampled: Vec<f64>,
    pub omega_exact: Vec<f64>,
    pub eta_sampled: Vec<f64>,
    pub eta_exact: Vec<f64>,
    /// Largest deviation in binomial standard errors.
    pub max_z: f64,
    pub factorization_error: f64,
}

/// Edge fields of a path with fixed angles (two or three vertices), sampled
/// by edge updates at the vertex touching every edge.
pub fn xy_edge_marginals(beta: f64, angles: &[f64], samples: usize, seed: u64) -> Result<EdgeMarginalCheck> {
    if !(2..=3).contains(&angles.len()) {
        return Err(Error::InvalidParameter("paths of two or three vertices only".into()));
    }
    let graph = Arc::new(SiteGraph::from_points(1, (0..angles.len() as i64).map(|i| vec![i]).collect(), Exterior::Free)?);
    let spec = ModelSpec::calibrated(ModelKind::Xy, 1, beta, CHECK_EPS)?;
    let dynamics = spec.xy(graph.clone(), XyBoundary::Free)?;
    let m = graph.edge_count();
    let mut state = dynamics.state(angles, vec![false; m], vec![false; m], false)?;
    let pairs: Vec<(usize, usize)> = graph
        .edges()
        .iter()
        .map(|e| match e.b {
            Site::Interior(b) => Ok((e.a, b)),
            _ => Err(Error::InvalidParameter("free path has no boundary edges".into())),
        })
        .collect::<Result<_>>()?;
    let exact = enumerate_xy(&dynamics.angles(&state), &pairs, beta)?;
    let hub = angles.len() / 2;
    let mut stream = IotaStream::new(seed);
    let (mut co, mut ce) = (vec![0u64; m], vec![0u64; m]);
    let deg = graph.degree();
    for _ in 0..samples {
        let ou: Vec<f64> = (0..deg).map(|_| stream.uniform()).collect();
        let eu: Vec<f64> = (0..deg).map(|_| stream.uniform()).collect();
        dynamics.edge_update(&mut state, hub, &ou, &eu);
        for e in 0..m {
            co[e] += u64::from(state.omega[e]);
            ce[e] += u64::from(state.eta[e]);
        }
    }
    let n = samples as f64;
    let freq = |c: &[u64]| c.iter().map(|&x| x as f64 / n).collect::<Vec<_>>();
    let (omega_sampled, eta_sampled) = (freq(&co), freq(&ce));
    let z = |p_hat: f64, p: f64| {
        let se = (p * (1.0 - p) / n).sqrt();
        if se == 0.0 {
            if p_hat == p { 0.0 } else { f64::INFINITY }
        } else {
            (p_hat - p).abs() / se
        }
    };
    let max_z = omega_sampled
        .iter()
        .zip(&exact.omega_marginals)
        .chain(eta_sampled.iter().zip(&exact.eta_marginals))
        .map(|(&a, &b)| z(a, b))
        .fold(0.0, f64::max);
    Ok(EdgeMarginalCheck {
        edges: m,
        samples,
        omega_sampled,
        omega_exact: exact.omega_marginals.clone(),
        eta_sampled,
        eta_exact: exact.eta_marginals.clone(),
        max_z,
        factorization_error: exact.factorization_error,
    })
}

/// Largest gap between the linear-solve and random-walk massive GFF means
/// over every site of every `a x b` rectangle with `a, b <= side`.
pub fn mgff_identity_error(side: i64, betas: &[f64], masses: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for a in 1..=side {
        for b in 1..=side {
            let pts = (0..a).flat_map(|i| (0..b).map(move |j| vec![i, j])).collect();
            let graph = SiteGraph::from_points(2, pts, Exterior::Boundary)?;
            for &beta in betas {
                for &m in masses {
                    for u in 0..graph.len() {
                        let r = mgff_mean(&graph, beta, m, u)?;
                        worst = worst.max((r.linear - r.walk).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// SWM center mean on `Λ_n` with boundary `+1` by CFTP, against the massive
/// GFF mean at the comparison mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCheck {
    pub beta: f64,
    pub mass: f64,
    pub sampled: f64,
    pub sampled_se: f64,
    pub oracle: f64,
}

pub fn swm_below_mgff(beta: f64, n: i64, samples: usize, seed: u64) -> Result<ComparisonCheck> {
    let graph = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, n)?));
    let spec = ModelSpec::calibrated(ModelKind::Swm, 2, beta, CHECK_EPS)?;
    let dynamics = spec.swm(graph.clone(), SwmBoundary::Constant(1.0))?;
    let xs = cftp_center_values(&dynamics, samples, seed, 1e6)?;
    let (sampled, sampled_se) = mean_se(&xs);
    let mass = comparison_mass(beta, 2)?;
    let oracle = mgff_mean(&graph, beta, mass, graph.len() / 2)?.linear;
    Ok(ComparisonCheck { beta, mass, sampled, sampled_se, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_cdf_interpolates() {
        let (_, inst) = single_site(1.0, &[0.0; 4]).unwrap();
        let t = TabulatedCdf::new(&inst, 101).unwrap();
        assert_eq!(t.at(-1.0), 0.0);
        assert!((t.at(1.0) - 1.0).abs() < 1e-12);
        assert!((t.at(0.0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn sign_flip_breaks_order() {
        assert_eq!(swm_update_order(200, 1, None).unwrap().violations, 0);
        assert!(swm_update_order(200, 1, Some(Mutation::SignFlip)).unwrap().violations > 0);
    }
}
