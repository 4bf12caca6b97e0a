//! Independent references for small instances: tensor quadrature of Gibbs
//! densities, rejection sampling, massive Gaussian free field means and
//! exhaustive enumeration of the XY edge fields.
//!
//! Nothing here shares sampling code with the dynamics modules.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cftp::Estimate;
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site, SiteGraph};
use crate::quadrature::{adaptive_simpson, gauss_legendre};

/// Largest instance for tensor quadrature.
pub const MAX_QUADRATURE_SITES: usize = 3;
/// Largest instance for rejection sampling.
pub const MAX_REJECTION_SITES: usize = 9;
/// Largest edge count for exhaustive XY enumeration.
pub const MAX_ENUMERATION_EDGES: usize = 12;

/// A tiny square well instance: interior graph, boundary values and `beta`.
#[derive(Debug, Clone)]
pub struct TinySwm {
    pub graph: SiteGraph,
    pub boundary: Vec<f64>,
    pub beta: f64,
}

impl TinySwm {
    pub fn new(graph: SiteGraph, boundary: Vec<f64>, beta: f64) -> Result<Self> {
        if boundary.len() != graph.boundary_len() {
            return Err(Error::InvalidParameter("one boundary value per boundary site".into()));
        }
        if graph.len() > MAX_REJECTION_SITES {
            return Err(Error::InstanceTooLarge(format!("{} interior sites", graph.len())));
        }
        if boundary.iter().any(|b| !(-1.0..=1.0).contains(b)) || beta < 0.0 {
            return Err(Error::InvalidParameter("boundary in [-1, 1] and beta >= 0 required".into()));
        }
        Ok(Self { graph, boundary, beta })
    }

    /// Centered box `Lambda_n` with a constant boundary value.
    pub fn constant_box(d: usize, n: i64, value: f64, beta: f64) -> Result<Self> {
        let graph = SiteGraph::from_box(&BoxRegion::centered(d, n)?);
        let nb = graph.boundary_len();
        Self::new(graph, vec![value; nb], beta)
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    fn value(&self, x: &[f64], s: Site) -> f64 {
        match s {
            Site::Interior(v) => x[v],
            Site::Boundary(b) => self.boundary[b],
            Site::Absent => 0.0,
        }
    }

    /// `H(x) = sum over edges (x_u - x_v)^2`, boundary edges included.
    pub fn energy(&self, x: &[f64]) -> f64 {
        self.graph
            .edges()
            .iter()
            .map(|e| {
                let diff = x[e.a] - self.value(x, e.b);
                diff * diff
            })
            .sum()
    }

    /// Minimum of `H` over `[-1, 1]^n` by coordinate descent (`H` is convex
    /// and each coordinate minimizer is the clamped neighbor mean).
    pub fn energy_minimum(&self) -> f64 {
        let n = self.len();
        let mut x = vec![0.0; n];
        for _ in 0..100_000 {
            let mut change = 0.0f64;
            for u in 0..n {
                let nb = self.graph.neighbors(u);
                let m = nb.iter().map(|&s| self.value(&x, s)).sum::<f64>() / nb.len() as f64;
                let new = m.clamp(-1.0, 1.0);
                change = change.max((new - x[u]).abs());
                x[u] = new;
            }
            if change < 1e-15 {
                break;
            }
        }
        self.energy(&x)
    }
}

fn tensor_integrate(bounds: &[(f64, f64)], points: usize, f: &impl Fn(&[f64]) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(points);
    let dim = bounds.len();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for a in 0..dim {
            let (lo, hi) = bounds[a];
            let h = 0.5 * (hi - lo);
            x[a] = lo + h * (1.0 + nodes[idx[a]]);
            w *= h * weights[idx[a]];
        }
        total += w * f(&x);
        let mut a = 0;
        loop {
            if a == dim {
                return total;
            }
            idx[a] += 1;
            if idx[a] < points {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Escalates 16 -> 32 -> 64 points per axis until successive values agree to
/// `tol` relative to `max(|value|, 1)`.
fn escalate(tol: f64, mut eval: impl FnMut(usize) -> f64) -> Result<f64> {
    let mut prev = eval(16);
    let mut change = f64::INFINITY;
    for points in [32, 64] {
        let v = eval(points);
        change = (v - prev).abs();
        if change <= tol * v.abs().max(1.0) {
            return Ok(v);
        }
        prev = v;
    }
    Err(Error::QuadratureNotConverged { tol, change })
}

fn quadrature_checked(inst: &TinySwm) -> Result<()> {
    if inst.len() > MAX_QUADRATURE_SITES {
        return Err(Error::InstanceTooLarge(format!("{} sites for quadrature", inst.len())));
    }
    if inst.is_empty() {
        return Err(Error::InvalidParameter("no interior sites".into()));
    }
    Ok(())
}

/// `E[obs]` under the Gibbs density of a tiny instance, to relative tolerance `1e-8`.
pub fn quadrature_expectation(inst: &TinySwm, observable: impl Fn(&[f64]) -> f64) -> Result<f64> {
    quadrature_checked(inst)?;
    let h0 = inst.energy_minimum();
    let bounds = vec![(-1.0, 1.0); inst.len()];
    let w = |x: &[f64]| (-inst.beta * (inst.energy(x) - h0)).exp();
    escalate(1e-8, |p| {
        let z = tensor_integrate(&bounds, p, &w);
        tensor_integrate(&bounds, p, &|x: &[f64]| w(x) * observable(x)) / z
    })
}

/// `log Z` with `Z = int over [-1, 1]^n of exp(-beta H)`.
pub fn quadrature_log_partition(inst: &TinySwm) -> Result<f64> {
    quadrature_checked(inst)?;
    let h0 = inst.energy_minimum();
    let bounds = vec![(-1.0, 1.0); inst.len()];
    let w = |x: &[f64]| (-inst.beta * (inst.energy(x) - h0)).exp();
    let log_z = escalate(1e-10, |p| tensor_integrate(&bounds, p, &w).ln())?;
    Ok(log_z - inst.beta * h0)
}

/// Marginal CDF `P(x_site <= x)`.
pub fn quadrature_cdf(inst: &TinySwm, site: usize, x: f64) -> Result<f64> {
    quadrature_checked(inst)?;
    if site >= inst.len() {
        return Err(Error::InvalidParameter("site outside instance".into()));
    }
    let x = x.clamp(-1.0, 1.0);
    let h0 = inst.energy_minimum();
    let full = vec![(-1.0, 1.0); inst.len()];
    let mut cut = full.clone();
    cut[site] = (-1.0, x);
    let w = |y: &[f64]| (-inst.beta * (inst.energy(y) - h0)).exp();
    escalate(1e-10, |p| tensor_integrate(&cut, p, &w) / tensor_integrate(&full, p, &w))
}

/// Closed-form mean of `N(m, v)` conditioned on `[-1, 1]`.
pub fn truncated_normal_mean(m: f64, v: f64) -> f64 {
    let s = v.sqrt();
    let (a, b) = ((-1.0 - m) / s, (1.0 - m) / s);
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    let mass = 0.5 * (libm::erfc(-b / std::f64::consts::SQRT_2) - libm::erfc(-a / std::f64::consts::SQRT_2));
    m + s * (phi(a) - phi(b)) / mass
}

/// Samples produced by [`rejection_sample`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionSamples {
    pub samples: Vec<Vec<f64>>,
    pub proposals: u64,
}

impl RejectionSamples {
    pub fn acceptance(&self) -> f64 {
        self.samples.len() as f64 / self.proposals as f64
    }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Exact i.i.d. samples: uniform proposals on `[-1, 1]^n`, accepted with
/// probability `exp(-beta (H - H_min))`.
pub fn rejection_sample(inst: &TinySwm, count: usize, seed: u64) -> Result<RejectionSamples> {
    if inst.is_empty() {
        return Err(Error::InvalidParameter("no interior sites".into()));
    }
    // a slightly low minimum keeps acceptance probabilities <= 1
    let h0 = inst.energy_minimum() - 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut proposals = 0u64;
    let mut x = vec![0.0; inst.len()];
    while samples.len() < count {
        proposals += 1;
        for v in x.iter_mut() {
            *v = 2.0 * unit(&mut rng) - 1.0;
        }
        let h = inst.energy(&x);
        if unit(&mut rng) < (-inst.beta * (h - h0)).exp() {
            samples.push(x.clone());
        }
        if proposals >= 10_000_000 && (samples.len() as f64) < 1e-6 * proposals as f64 {
            return Err(Error::AcceptanceTooLow(samples.len() as f64 / proposals as f64));
        }
    }
    Ok(RejectionSamples { samples, proposals })
}

/// Mean at `u` of the massive GFF with boundary `+1`, computed two ways.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MgffMean {
    /// From the linear stationarity system.
    pub linear: f64,
    /// `E[(1 + m / (2 d beta))^-T]` by exact propagation of the walk law.
    pub walk: f64,
}

fn mgff_check(graph: &SiteGraph, beta: f64, m: f64, u: usize) -> Result<()> {
    if !(m > 0.0 && beta > 0.0) {
        return Err(Error::InvalidParameter("need m > 0 and beta > 0".into()));
    }
    if u >= graph.len() {
        return Err(Error::InvalidParameter("site outside region".into()));
    }
    Ok(())
}

/// Massive Gaussian free field mean `nu[alpha_u]` for density
/// `exp(-beta H - m sum alpha^2)` with boundary `+1`.
pub fn mgff_mean(graph: &SiteGraph, beta: f64, m: f64, u: usize) -> Result<MgffMean> {
    mgff_check(graph, beta, m, u)?;
    let n = graph.len();
    let deg = graph.degree() as f64;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for v in 0..n {
        a[(v, v)] = deg * beta + m;
        for &s in graph.neighbors(v) {
            match s {
                Site::Interior(w) => a[(v, w)] -= beta,
                Site::Boundary(_) => rhs[v] += beta,
                Site::Absent => {}
            }
        }
    }
    let linear = a.lu().solve(&rhs).ok_or_else(|| Error::InvalidParameter("singular system".into()))?[u];
    Ok(MgffMean { linear, walk: mgff_walk_exact(graph, beta, m, u)? })
}

/// `E[r^T]`, `r = 1 / (1 + m / (2 d beta))`, `T` the boundary hitting time
/// of simple random walk from `u`, by propagating the walk law step by step.
pub fn mgff_walk_exact(graph: &SiteGraph, beta: f64, m: f64, u: usize) -> Result<f64> {
    mgff_check(graph, beta, m, u)?;
    let deg = graph.degree() as f64;
    let r = 1.0 / (1.0 + m / (deg * beta));
    let mut law = vec![0.0; graph.len()];
    law[u] = 1.0;
    let mut next = vec![0.0; graph.len()];
    let (mut total, mut rt, mut alive) = (0.0, 1.0, 1.0);
    while alive * rt > 1e-18 {
        rt *= r;
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut hit = 0.0;
        for (v, &p) in law.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for &s in graph.neighbors(v) {
                match s {
                    Site::Interior(w) => next[w] += p / deg,
                    _ => hit += p / deg,
                }
            }
        }
        total += hit * rt;
        alive -= hit;
        std::mem::swap(&mut law, &mut next);
        alive = alive.min(law.iter().sum());
    }
    Ok(total)
}

/// Monte Carlo version of [`mgff_walk_exact`].
pub fn mgff_walk_mc(graph: &SiteGraph, beta: f64, m: f64, u: usize, walks: usize, seed: u64) -> Result<Estimate> {
    mgff_check(graph, beta, m, u)?;
    let deg = graph.degree();
    let r = 1.0 / (1.0 + m / (deg as f64 * beta));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..walks {
        let mut v = u;
        let mut steps = 0i32;
        loop {
            steps += 1;
            let dir = (rng.next_u64() % deg as u64) as usize;
            match graph.neighbor(v, dir) {
                Site::Interior(w) => v = w,
                _ => break,
            }
        }
        let x = r.powi(steps);
        s1 += x;
        s2 += x * x;
    }
    let n = walks as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    Ok(Estimate { p: mean, se: (var / n).sqrt(), replicas: walks })
}

/// Mass for which the square well mean with `+1` boundary is dominated by the
/// massive GFF mean: `min(2 d beta, -ln P(|X| <= 1))`, `X ~ N(0, 1 / (8 d beta))`.
pub fn comparison_mass(beta: f64, d: usize) -> Result<f64> {
    if beta <= 0.0 || d == 0 {
        return Err(Error::InvalidParameter("need beta > 0 and d >= 1".into()));
    }
    let sd = (1.0 / (8.0 * d as f64 * beta)).sqrt();
    let inside = 1.0 - libm::erfc(1.0 / (sd * std::f64::consts::SQRT_2));
    Ok((2.0 * d as f64 * beta).min(-inside.ln()))
}

/// Exact joint law of the XY edge fields given the angles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XyEnumeration {
    /// Probabilities indexed by `omega_mask | eta_mask << edges`.
    pub joint: Vec<f64>,
    pub omega_marginals: Vec<f64>,
    pub eta_marginals: Vec<f64>,
    /// `max |P(omega, eta) - P(omega) P(eta)|`.
    pub factorization_error: f64,
    pub edges: usize,
}

impl XyEnumeration {
    pub fn prob(&self, omega_mask: usize, eta_mask: usize) -> f64 {
        self.joint[omega_mask | (eta_mask << self.edges)]
    }
}

fn components(n: usize, edges: &[(usize, usize)], mask: usize) -> usize {
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(x) = stack.pop() {
            for (i, &(a, b)) in edges.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    for (p, q) in [(a, b), (b, a)] {
                        if p == x && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
    }
    count
}

fn exact_cos_sin(a: f64) -> (f64, f64) {
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == FRAC_PI_2 {
        (0.0, 1.0)
    } else {
        (a.cos(), a.sin())
    }
}

/// Enumerates all `(omega, eta)` on a multigraph with fixed angles, using the
/// weight `prod p^w (1-p)^(1-w) 2^{k(w)}` for each field, `p_omega = 1 -
/// exp(-2 beta cos cos)` and `p_eta = 1 - exp(-2 beta sin sin)`. A wired
/// boundary is one vertex carrying several edges.
pub fn enumerate_xy(angles: &[f64], edges: &[(usize, usize)], beta: f64) -> Result<XyEnumeration> {
    let m = edges.len();
    if m > MAX_ENUMERATION_EDGES {
        return Err(Error::InstanceTooLarge(format!("{m} edges")));
    }
    if edges.iter().any(|&(a, b)| a >= angles.len() || b >= angles.len()) {
        return Err(Error::InvalidParameter("edge endpoint out of range".into()));
    }
    let n = angles.len();
    let cs: Vec<(f64, f64)> = angles.iter().map(|&a| exact_cos_sin(a)).collect();
    let p_of = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        edges.iter().map(|&(a, b)| 1.0 - (-2.0 * beta * f(a) * f(b)).exp()).collect()
    };
    let p_omega = p_of(&|v| cs[v].0);
    let p_eta = p_of(&|v| cs[v].1);
    let field_weights = |p: &[f64]| -> Vec<f64> {
        (0..1usize << m)
            .map(|mask| {
                let w: f64 = (0..m).map(|i| if mask >> i & 1 == 1 { p[i] } else { 1.0 - p[i] }).product();
                w * 2f64.powi(components(n, edges, mask) as i32)
            })
            .collect()
    };
    let wo = field_weights(&p_omega);
    let we = field_weights(&p_eta);
    let z: f64 = wo.iter().sum::<f64>() * we.iter().sum::<f64>();
    let mut joint = vec![0.0; 1 << (2 * m)];
    for (eo, &a) in wo.iter().enumerate() {
        for (ee, &b) in we.iter().enumerate() {
            joint[eo | (ee << m)] = a * b / z;
        }
    }
    let mut po = vec![0.0; 1 << m];
    let mut pe = vec![0.0; 1 << m];
    for (idx, &p) in joint.iter().enumerate() {
        po[idx & ((1 << m) - 1)] += p;
        pe[idx >> m] += p;
    }
    let mut factorization_error = 0.0f64;
    for (idx, &p) in joint.iter().enumerate() {
        factorization_error = factorization_error.max((p - po[idx & ((1 << m) - 1)] * pe[idx >> m]).abs());
    }
    let marg = |law: &[f64], i: usize| law.iter().enumerate().filter(|(mask, _)| mask >> i & 1 == 1).map(|(_, p)| p).sum();
    Ok(XyEnumeration {
        omega_marginals: (0..m).map(|i| marg(&po, i)).collect(),
        eta_marginals: (0..m).map(|i| marg(&pe, i)).collect(),
        joint,
        factorization_error,
        edges: m,
    })
}

/// CDF of the angle law with the given group sums, by adaptive Simpson on the
/// product `prod cosh(beta cos(a) S) prod cosh(beta sin(a) T)`.
pub fn angle_cdf_oracle(beta: f64, omega_sums: &[f64], eta_sums: &[f64], x: f64) -> f64 {
    let f = |a: f64| {
        let (s, c) = a.sin_cos();
        let lo: f64 = omega_sums.iter().map(|&g| (beta * c * g).cosh().ln()).sum();
        let le: f64 = eta_sums.iter().map(|&g| (beta * s * g).cosh().ln()).sum();
        (lo + le).exp()
    };
    let z = adaptive_simpson(&f, 0.0, FRAC_PI_2, 1e-14);
    (adaptive_simpson(&f, 0.0, x.clamp(0.0, FRAC_PI_2), 1e-14) / z).clamp(0.0, 1.0)
}

/// `E[cos(theta_0 - theta_1)] = I_1(beta) / I_0(beta)` for the XY model on
/// one free edge, from the integral representation of Bessel functions.
pub fn xy_pair_correlation(beta: f64) -> f64 {
    let (x, w) = gauss_legendre(64);
    let (mut i0, mut i1) = (0.0, 0.0);
    for (xi, wi) in x.iter().zip(&w) {
        let t = 0.5 * PI * (1.0 + xi);
        let e = (beta * t.cos()).exp();
        i0 += wi * e;
        i1 += wi * e * t.cos();
    }
    i1 / i0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Exterior;

    #[test]
    fn one_step_walk() {
        let g = SiteGraph::from_box(&BoxRegion::centered(2, 1).unwrap());
        let r = mgff_mean(&g, 0.7, 0.3, 0).unwrap();
        let want = 1.0 / (1.0 + 0.3 / (4.0 * 0.7));
        assert!((r.linear - want).abs() < 1e-15);
        assert!((r.walk - want).abs() < 1e-15);
    }

    #[test]
    fn path_walk_matches_solve() {
        let g = SiteGraph::from_points(1, vec![vec![-1], vec![0], vec![1]], Exterior::Boundary).unwrap();
        for u in 0..3 {
            let r = mgff_mean(&g, 1.0, 0.5, u).unwrap();
            assert!((r.linear - r.walk).abs() < 1e-10);
        }
    }

    #[test]
    fn single_edge_enumeration() {
        let beta = 0.8;
        let e = enumerate_xy(&[0.3, 1.1], &[(0, 1)], beta).unwrap();
        let p = 1.0 - (-2.0 * beta * 0.3f64.cos() * 1.1f64.cos()).exp();
        assert!((e.omega_marginals[0] - p / (p + 2.0 * (1.0 - p))).abs() < 1e-14);
        let e = enumerate_xy(&[FRAC_PI_2, 0.4], &[(0, 1)], beta).unwrap();
        assert_eq!(e.omega_marginals[0], 0.0);
        assert!((e.joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.factorization_error < 1e-12);
    }

    #[test]
    fn comparison_mass_is_positive_and_capped() {
        let m = comparison_mass(1.0, 2).unwrap();
        assert!(m > 0.0 && m <= 4.0);
        // P(|X| <= 1), X ~ N(0, 1/16), is 1 - 6.3e-5
        assert!((m - 6.334e-5).abs() < 1e-7, "{m}");
    }
}
