//! The square well model: real spins in [-1, 1] with quadratic nearest-neighbor
//! interaction, its single-site conditional laws, and the digit-matching
//! monotone Glauber update.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::cftp::Dynamics;
use crate::error::{Error, Result};
use crate::lattice::{Site, SiteGraph};
use crate::randomness::{matched_refine, quantize_parameter, OffsetLaw, CellValue, DigitGrid, UpdateRandomness, MAX_DIGITS};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal lower tail.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal upper tail.
#[inline]
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// `P(a < Z < b)` for a standard normal, computed in whichever tail keeps precision.
pub fn normal_interval(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_cdf(a) - std_normal_sf(b)
    }
}

/// Normal law with the given mean and variance conditioned on [-1, 1].
/// Infinite variance is the uniform law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormalLaw {
    pub mean: f64,
    pub variance: f64,
}

impl TruncatedNormalLaw {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn is_uniform(&self) -> bool {
        !self.variance.is_finite()
    }

    fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    fn z(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd()
    }

    /// Total Gaussian mass of [-1, 1].
    fn total(&self) -> f64 {
        normal_interval(self.z(-1.0), self.z(1.0))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= -1.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        if self.is_uniform() {
            return 0.5 * (x + 1.0);
        }
        (normal_interval(self.z(-1.0), self.z(x)) / self.total()).clamp(0.0, 1.0)
    }

    /// Unnormalized log-density `-(x - mean)^2 / (2 variance)`.
    pub fn log_density(&self, x: f64) -> f64 {
        if self.is_uniform() {
            0.0
        } else {
            -(x - self.mean).powi(2) / (2.0 * self.variance)
        }
    }

    /// The law conditioned on `[left, left + width]`, in the offset
    /// coordinate `t in [0, 1]`.
    pub fn cell_law(&self, left: f64, width: f64) -> GaussianCell {
        if self.is_uniform() || width == 0.0 {
            return GaussianCell::new(0.0, 0.0);
        }
        let (za, dz) = (self.z(left), width / self.sd());
        GaussianCell::new(za * dz, 0.5 * dz * dz)
    }
}

/// Offset law with density proportional to `exp(-a t - b t^2)` on `[0, 1]`.
///
/// Integrals use a fixed composite Gauss-Legendre rule in the offset
/// coordinate, so neither tail suffers from cancellation and the values are
/// smooth in `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianCell {
    a: f64,
    b: f64,
    shift: f64,
    panels: usize,
    total: f64,
}

impl GaussianCell {
    pub fn new(a: f64, b: f64) -> Self {
        let mut shift = 0.0f64.max(-a - b);
        if b > 0.0 {
            let s = -a / (2.0 * b);
            if (0.0..=1.0).contains(&s) {
                shift = shift.max(-a * s - b * s * s);
            }
        }
        let panels = ((a.abs() + b.abs()) / 2.0).ceil().clamp(1.0, 64.0) as usize;
        let mut cell = Self { a, b, shift, panels, total: 1.0 };
        cell.total = cell.integral(0.0, 1.0);
        cell
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        if self.a == 0.0 && self.b == 0.0 {
            return hi - lo;
        }
        let (x, w) = offset_rule();
        let h = (hi - lo) / self.panels as f64;
        let mut sum = 0.0;
        for p in 0..self.panels {
            let c = lo + h * (p as f64 + 0.5);
            for (xi, wi) in x.iter().zip(w) {
                let t = c + 0.5 * h * xi;
                sum += wi * (-self.a * t - self.b * t * t - self.shift).exp();
            }
        }
        0.5 * h * sum
    }
}

impl OffsetLaw for GaussianCell {
    fn cdf(&self, t: f64) -> f64 {
        (self.integral(0.0, t.clamp(0.0, 1.0)) / self.total).clamp(0.0, 1.0)
    }

    fn sf(&self, t: f64) -> f64 {
        (self.integral(t.clamp(0.0, 1.0), 1.0) / self.total).clamp(0.0, 1.0)
    }
}

fn offset_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| crate::quadrature::gauss_legendre(16))
}

/// Conditional law at a site whose neighbors (boundary included) have the given values.
pub fn swm_conditional(neighbor_values: &[f64], beta: f64) -> Result<TruncatedNormalLaw> {
    if neighbor_values.is_empty() {
        return Err(Error::MissingNeighbor { site: 0, dir: 0 });
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidParameter("beta must be finite and non-negative".into()));
    }
    let deg = neighbor_values.len() as f64;
    let mean = quantize_parameter(neighbor_values.iter().sum::<f64>() / deg);
    let variance = if beta == 0.0 { f64::INFINITY } else { 1.0 / (2.0 * beta * deg) };
    Ok(TruncatedNormalLaw { mean, variance })
}

/// Two-stage update for a truncated normal law on the digit grid:
/// the digit cell by the inverse CDF at `u_primary`, then the offset by the
/// matching coupling. Returns the new value and whether the branch matched.
pub fn swm_update_law(law: &TruncatedNormalLaw, grid: &DigitGrid, iota: &UpdateRandomness, eps: f64) -> Result<(CellValue, bool)> {
    let k = grid.cells_per_unit();
    let u = iota.u_primary;
    // smallest cell c with F(right edge of c) >= u
    let (mut lo, mut hi) = (-k, k - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if law.cdf(grid.left(mid + 1)) >= u {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let cell = lo;
    let (offset, matched) = matched_refine(&law.cell_law(grid.left(cell), grid.width()), iota, eps, grid.k)?;
    Ok((CellValue::new(cell, offset), matched))
}

/// Smallest digit depth `k` for which every digit cell's conditional law
/// dominates `(1 - eps)` times uniform, for all admissible neighbor means.
///
/// The log-density is `-beta D (x - m)^2`; its oscillation on a cell is
/// largest for `m = +-1`, so sweeping those two means certifies every mean.
pub fn calibrate_matching(beta: f64, d: usize, eps: f64) -> Result<u32> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter("eps must lie in (0, 1)".into()));
    }
    if beta < 0.0 || d == 0 {
        return Err(Error::InvalidParameter("need beta >= 0 and d >= 1".into()));
    }
    let bd = beta * 2.0 * d as f64;
    let target = (1.0 - eps).ln();
    for k in 0..=MAX_DIGITS {
        let cells = 10i64.pow(k);
        let w = 1.0 / cells as f64;
        let ok = if cells <= 1_000_000 {
            (-cells..cells).all(|c| {
                let (a, b) = (c as f64 * w, (c + 1) as f64 * w);
                [-1.0f64, 1.0].iter().all(|&m| {
                    let qa = (a - m).powi(2);
                    let qb = (b - m).powi(2);
                    let qmin = if (a..=b).contains(&m) { 0.0 } else { qa.min(qb) };
                    -bd * (qa.max(qb) - qmin) >= target
                })
            })
        } else {
            -bd * w * (4.0 - w) >= target
        };
        if ok {
            return Ok(k);
        }
    }
    Err(Error::DigitOverflow(MAX_DIGITS + 1))
}

/// Boundary condition of a square-well box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SwmBoundary {
    /// `+1` for the maximal state and `-1` for the minimal one.
    Extremal,
    /// The same value at every boundary site.
    Constant(f64),
    /// One value per boundary site, in the graph's boundary order.
    Values(Vec<f64>),
    /// Per boundary site: a fixed value, or `None` for an extremal site.
    Partial(Vec<Option<f64>>),
}

/// Spin configuration: interior values and boundary values on the digit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SwmState {
    pub interior: Vec<CellValue>,
    pub boundary: Vec<CellValue>,
}

/// Square-well Glauber dynamics on a graph with boundary.
#[derive(Debug, Clone)]
pub struct SwmDynamics {
    graph: Arc<SiteGraph>,
    pub beta: f64,
    pub eps: f64,
    grid: DigitGrid,
    boundary: SwmBoundary,
}

impl SwmDynamics {
    pub fn new(graph: Arc<SiteGraph>, beta: f64, k: u32, eps: f64, boundary: SwmBoundary) -> Result<Self> {
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::InvalidParameter("beta must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidParameter("eps must lie in [0, 1)".into()));
        }
        let given = match &boundary {
            SwmBoundary::Values(v) => Some(v.len()),
            SwmBoundary::Partial(v) => Some(v.len()),
            _ => None,
        };
        if given.is_some_and(|n| n != graph.boundary_len()) {
            return Err(Error::InvalidParameter("one boundary value per boundary site".into()));
        }
        let check = |x: f64| (-1.0..=1.0).contains(&x);
        let valid = match &boundary {
            SwmBoundary::Extremal => true,
            SwmBoundary::Constant(c) => check(*c),
            SwmBoundary::Values(v) => v.iter().all(|&x| check(x)),
            SwmBoundary::Partial(v) => v.iter().flatten().all(|&x| check(x)),
        };
        if !valid {
            return Err(Error::InvalidParameter("boundary values must lie in [-1, 1]".into()));
        }
        if graph.points().iter().enumerate().any(|(u, _)| graph.neighbors(u).contains(&Site::Absent)) {
            return Err(Error::MissingNeighbor { site: 0, dir: 0 });
        }
        Ok(Self { graph, beta, eps, grid: DigitGrid::new(k, 1.0)?, boundary })
    }

    pub fn grid(&self) -> &DigitGrid {
        &self.grid
    }

    pub fn boundary(&self) -> &SwmBoundary {
        &self.boundary
    }

    fn to_cell(&self, x: f64) -> CellValue {
        let scaled = x * self.grid.cells_per_unit() as f64;
        let cell = scaled.floor();
        CellValue::new(cell as i64, scaled - cell)
    }

    fn state_with(&self, interior: f64, extremal: f64) -> SwmState {
        let boundary = match &self.boundary {
            SwmBoundary::Extremal => vec![self.to_cell(extremal); self.graph.boundary_len()],
            SwmBoundary::Constant(c) => vec![self.to_cell(*c); self.graph.boundary_len()],
            SwmBoundary::Values(v) => v.iter().map(|&x| self.to_cell(x)).collect(),
            SwmBoundary::Partial(v) => v.iter().map(|x| self.to_cell(x.unwrap_or(extremal))).collect(),
        };
        SwmState { interior: vec![self.to_cell(interior); self.graph.len()], boundary }
    }

    /// A state with the given interior values and this model's boundary
    /// (extremal boundaries are taken at `+1`).
    pub fn state_from_values(&self, values: &[f64]) -> Result<SwmState> {
        if values.len() != self.graph.len() || values.iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(Error::InvalidParameter("need one value in [-1, 1] per site".into()));
        }
        let mut s = self.state_with(0.0, 1.0);
        for (c, &x) in s.interior.iter_mut().zip(values) {
            *c = self.to_cell(x);
        }
        Ok(s)
    }

    pub fn value(&self, state: &SwmState, site: Site) -> f64 {
        match site {
            Site::Interior(v) => self.grid.value(state.interior[v]),
            Site::Boundary(b) => self.grid.value(state.boundary[b]),
            Site::Absent => unreachable!("square well graphs have no absent neighbors"),
        }
    }

    pub fn values(&self, state: &SwmState) -> Vec<f64> {
        state.interior.iter().map(|&c| self.grid.value(c)).collect()
    }

    /// Conditional law at interior site `u`.
    pub fn conditional(&self, state: &SwmState, u: usize) -> TruncatedNormalLaw {
        let deg = self.graph.degree() as f64;
        let sum: f64 = self.graph.neighbors(u).iter().map(|&s| self.value(state, s)).sum();
        let mean = quantize_parameter(sum / deg);
        let variance = if self.beta == 0.0 { f64::INFINITY } else { 1.0 / (2.0 * self.beta * deg) };
        TruncatedNormalLaw { mean, variance }
    }

    /// The Glauber update at `u`: returns the new value and the matching flag.
    pub fn update_value(&self, state: &SwmState, u: usize, iota: &UpdateRandomness) -> Result<(CellValue, bool)> {
        let law = self.conditional(state, u);
        swm_update_law(&law, &self.grid, iota, self.eps)
    }

    /// Hamiltonian: sum of squared differences over edges, boundary edges included.
    pub fn energy(&self, state: &SwmState) -> f64 {
        let mut h = 0.0;
        for e in self.graph.edges() {
            let a = self.grid.value(state.interior[e.a]);
            let b = self.value(state, e.b);
            h += (a - b) * (a - b);
        }
        h
    }
}

impl Dynamics for SwmDynamics {
    type State = SwmState;
    type Scratch = ();

    fn graph(&self) -> &SiteGraph {
        &self.graph
    }

    fn maximal(&self) -> SwmState {
        self.state_with(1.0, 1.0)
    }

    fn minimal(&self) -> SwmState {
        self.state_with(-1.0, -1.0)
    }

    fn update(&self, state: &mut SwmState, site: usize, iota: &UpdateRandomness, _: &mut ()) -> Result<bool> {
        let (v, matched) = self.update_value(state, site, iota)?;
        state.interior[site] = v;
        Ok(matched)
    }

    fn same_inputs(&self, a: &SwmState, b: &SwmState, site: usize) -> bool {
        self.graph.neighbors(site).iter().all(|&s| match s {
            Site::Interior(v) => a.interior[v] == b.interior[v],
            Site::Boundary(w) => a.boundary[w] == b.boundary[w],
            Site::Absent => true,
        })
    }

    fn copy_site(&self, from: &SwmState, to: &mut SwmState, site: usize) {
        to.interior[site] = from.interior[site];
    }

    fn ordered_at(&self, lower: &SwmState, upper: &SwmState, site: usize) -> bool {
        lower.interior[site] <= upper.interior[site]
    }

    fn coalesced_at(&self, a: &SwmState, b: &SwmState, site: usize) -> bool {
        a.interior[site] == b.interior[site]
    }

    fn truncated_equal_at(&self, a: &SwmState, b: &SwmState, site: usize) -> bool {
        a.interior[site].cell == b.interior[site].cell
    }

    fn site_key(&self, s: &SwmState, site: usize) -> Vec<u64> {
        let (c, o) = s.interior[site].key();
        vec![c as u64, o]
    }

    fn site_values(&self, s: &SwmState, site: usize) -> Vec<f64> {
        vec![self.grid.value(s.interior[site])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::BoxRegion;

    #[test]
    fn conditional_examples() {
        let law = swm_conditional(&[0.0; 4], 0.7).unwrap();
        assert_eq!(law.mean, 0.0);
        assert!((law.cdf(0.0) - 0.5).abs() < 1e-15);
        let law = swm_conditional(&[1.0; 4], 1.0).unwrap();
        assert_eq!(law.mean, 1.0);
        assert!((law.variance - 0.125).abs() < 1e-15);
        let law = swm_conditional(&[0.3, -0.2, 1.0, 0.9], 1e-9).unwrap();
        let mut sup: f64 = 0.0;
        for i in 0..=2000 {
            let x = -1.0 + i as f64 / 1000.0;
            sup = sup.max((law.cdf(x) - 0.5 * (x + 1.0)).abs());
        }
        assert!(sup < 1e-6, "{sup}");
        assert!(swm_conditional(&[], 1.0).is_err());
    }

    #[test]
    fn interval_mass_is_stable_in_tails() {
        let m = normal_interval(8.0, 8.5);
        let want = std_normal_sf(8.0) - std_normal_sf(8.5);
        assert!((m - want).abs() <= 1e-15 * want);
        assert!(m > 0.0);
        let s = normal_interval(-8.5, -8.0);
        assert!((s - m).abs() <= 1e-14 * m);
        assert!((normal_interval(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-14, "{}", normal_interval(-1.0, 1.0));
    }

    #[test]
    fn cell_law_is_a_distribution() {
        let law = TruncatedNormalLaw::new(0.4, 0.05);
        let f = law.cell_law(-0.7, 0.01);
        assert_eq!(f.cdf(0.0), 0.0);
        assert!((f.cdf(1.0) - 1.0).abs() < 1e-14);
        let mut prev = 0.0;
        for i in 1..=100 {
            let t = i as f64 / 100.0;
            let v = f.cdf(t);
            assert!(v >= prev);
            assert!((v + f.sf(t) - 1.0).abs() < 1e-14);
            prev = v;
        }
        // matches the erfc form away from the tails
        let direct = (law.cdf(-0.695) - law.cdf(-0.7)) / (law.cdf(-0.69) - law.cdf(-0.7));
        assert!((f.cdf(0.5) - direct).abs() < 1e-10);
        let far = TruncatedNormalLaw::new(1.0, 1e-4);
        let g = far.cell_law(-1.0, 0.001);
        // density is exp(20 t - t^2 / 200) across the cell
        let rho = |t: f64| (20.0 * t - t * t / 200.0 - 20.0).exp();
        let simpson = |a, b| crate::quadrature::adaptive_simpson(&rho, a, b, 1e-16);
        let (lo, hi) = (simpson(0.0, 0.5), simpson(0.5, 1.0));
        assert!((g.cdf(0.5) / (lo / (lo + hi)) - 1.0).abs() < 1e-9);
        assert!((g.sf(0.5) / (hi / (lo + hi)) - 1.0).abs() < 1e-12);
        assert!((g.cdf(0.5) / ((10f64.exp() - 1.0) / (20f64.exp() - 1.0)) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_matching(0.0, 2, 0.1).unwrap(), 0);
        // frozen from the cell sweep
        assert_eq!(calibrate_matching(1.0, 2, 0.5).unwrap(), 2);
        assert_eq!(calibrate_matching(1.0, 2, 0.1).unwrap(), 3);
        assert_eq!(calibrate_matching(0.5, 2, 0.1).unwrap(), 2);
        let mut prev = u32::MAX;
        for eps in [0.01, 0.05, 0.1, 0.3, 0.6] {
            let k = calibrate_matching(1.0, 2, eps).unwrap();
            assert!(k <= prev);
            prev = k;
        }
        assert!(calibrate_matching(1.0, 2, 0.0).is_err());
    }

    #[test]
    fn calibrated_cells_dominate_uniform() {
        let eps = 0.5;
        let k = calibrate_matching(1.0, 2, eps).unwrap();
        let w = 10f64.powi(-(k as i32));
        for m in [-1.0, -0.3, 0.0, 0.8, 1.0] {
            let law = TruncatedNormalLaw::new(m, 1.0 / 8.0);
            let cells = 10i64.pow(k);
            for c in -cells..cells {
                let f = law.cell_law(c as f64 * w, w);
                for i in 1..20 {
                    let t = i as f64 / 20.0;
                    let t2 = t + 0.05;
                    assert!(f.cdf(t2.min(1.0)) - f.cdf(t) >= (1.0 - eps) * (t2.min(1.0) - t) - 1e-12);
                }
            }
        }
    }

    fn model(beta: f64, eps: f64) -> SwmDynamics {
        let g = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 3).unwrap()));
        let k = calibrate_matching(beta, 2, eps).unwrap();
        SwmDynamics::new(g, beta, k, eps, SwmBoundary::Extremal).unwrap()
    }

    #[test]
    fn update_reads_only_neighbors() {
        let m = model(1.0, 0.1);
        let mut s = m.maximal();
        for (i, c) in s.interior.iter_mut().enumerate() {
            *c = m.to_cell(((i * 37) % 19) as f64 / 10.0 - 0.9);
        }
        let u = m.graph().index_of(&[0, 0]).unwrap();
        let iota = UpdateRandomness { u_primary: 0.3, u_refine: 0.7, u_match: 0.01, aux: 3 };
        let (a, _) = m.update_value(&s, u, &iota).unwrap();
        let far = m.graph().index_of(&[2, 2]).unwrap();
        s.interior[far] = m.to_cell(-0.123);
        s.interior[u] = m.to_cell(0.999);
        let (b, _) = m.update_value(&s, u, &iota).unwrap();
        assert_eq!(a.key(), b.key());
    }

    #[test]
    fn extremal_states() {
        let m = model(0.5, 0.1);
        let top = m.maximal();
        let bot = m.minimal();
        assert!(m.ordered(&bot, &top));
        assert_eq!(m.value(&top, Site::Boundary(0)), 1.0);
        assert_eq!(m.value(&bot, Site::Boundary(0)), -1.0);
        assert_eq!(m.values(&bot)[0], -1.0);
    }

    #[test]
    fn energy_of_constant_state_is_zero() {
        let g = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 2).unwrap()));
        let m = SwmDynamics::new(g, 1.0, 2, 0.1, SwmBoundary::Constant(0.5)).unwrap();
        let s = m.state_from_values(&[0.5; 9]).unwrap();
        assert!(m.energy(&s).abs() < 1e-15);
        let s = m.state_from_values(&[0.0; 9]).unwrap();
        assert!((m.energy(&s) - 12.0 * 0.25).abs() < 1e-12);
    }
}
