//! The XY model in the coordinates `(alpha, omega, eta)`: angles in
//! `[0, pi/2]` and two FK(2) edge fields whose clusters carry the signs of
//! the real and imaginary parts. Monotone digit-matching Glauber dynamics.

use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::cftp::{site_and_neighbors, Dynamics};
use crate::error::{Error, Result};
use crate::lattice::{fine_clusters, Site, SiteGraph};
use crate::quadrature::gauss_legendre;
use crate::randomness::{matched_refine, quantize_parameter, OffsetLaw, CellValue, DigitGrid, UpdateRandomness, MAX_DIGITS};

/// Boundary condition for an XY box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XyBoundary {
    /// No boundary sites.
    Free,
    /// Boundary spins `+1`: angle 0, wired in `omega`.
    Plus,
    /// Boundary spins `+i`: angle `pi/2`, wired in `eta`.
    PlusI,
    /// `+i` for the maximal state and `+1` for the minimal one.
    Extremal,
}

/// Boundary carried by a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundarySign {
    Free,
    Plus,
    PlusI,
}

impl BoundarySign {
    fn cos_sin(self) -> (f64, f64) {
        match self {
            BoundarySign::PlusI => (0.0, 1.0),
            _ => (1.0, 0.0),
        }
    }

    fn wired(self, field: EdgeField) -> bool {
        matches!(
            (self, field),
            (BoundarySign::Plus, EdgeField::Omega) | (BoundarySign::PlusI, EdgeField::Eta)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeField {
    Omega,
    Eta,
}

/// A configuration `(alpha, omega, eta)` with its boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct XyState {
    pub alpha: Vec<CellValue>,
    pub omega: Vec<bool>,
    pub eta: Vec<bool>,
    pub boundary: BoundarySign,
}

impl XyState {
    fn field(&self, f: EdgeField) -> &[bool] {
        match f {
            EdgeField::Omega => &self.omega,
            EdgeField::Eta => &self.eta,
        }
    }
}

const CELL_NODES: usize = 8;

#[inline]
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Conditional law of the angle at a site given the rest:
/// density on `[0, pi/2]` proportional to
/// `prod_g cosh(beta cos(a) S_g) * prod_h cosh(beta sin(a) T_h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleLaw {
    pub beta: f64,
    /// Per omega-group sums of neighbor cosines.
    pub omega_sums: Vec<f64>,
    /// Per eta-group sums of neighbor sines.
    pub eta_sums: Vec<f64>,
}

impl AngleLaw {
    pub fn log_density(&self, a: f64) -> f64 {
        let (s, c) = a.sin_cos();
        let mut v = 0.0;
        for &x in &self.omega_sums {
            v += ln_cosh(self.beta * c * x);
        }
        for &y in &self.eta_sums {
            v += ln_cosh(self.beta * s * y);
        }
        v
    }

    fn shift(&self) -> f64 {
        (0..=16)
            .map(|i| self.log_density(FRAC_PI_2 * i as f64 / 16.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CDF evaluator with cumulative masses on the cells of `grid`.
    pub fn cdf_on(&self, grid: &DigitGrid) -> AngleCdf<'_> {
        let shift = self.shift();
        let n = grid.cells_per_unit() as usize;
        let mut c = AngleCdf { law: self, shift, edges: Vec::with_capacity(n + 1), masses: Vec::with_capacity(n), cum: Vec::with_capacity(n + 1) };
        c.edges.extend((0..=n as i64).map(|i| grid.left(i)));
        c.edges[n] = FRAC_PI_2;
        let mut acc = 0.0;
        c.cum.push(0.0);
        for i in 0..n {
            let m = c.piece(c.edges[i], c.edges[i + 1]);
            c.masses.push(m);
            acc += m;
            c.cum.push(acc);
        }
        c
    }

    /// CDF evaluator on a fine fixed grid.
    pub fn cdf(&self) -> AngleCdf<'_> {
        self.cdf_on(&DigitGrid::new(3, FRAC_PI_2).expect("valid grid"))
    }
}

fn cell_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(CELL_NODES))
}

/// CDF of an [`AngleLaw`] built from fixed Gauss-Legendre rules on digit
/// cells. Fixed rules keep the computed CDF smooth in the law parameters.
pub struct AngleCdf<'a> {
    law: &'a AngleLaw,
    shift: f64,
    edges: Vec<f64>,
    masses: Vec<f64>,
    cum: Vec<f64>,
}

impl<'a> AngleCdf<'a> {
    /// Density scaled by a constant.
    pub fn density(&self, a: f64) -> f64 {
        (self.law.log_density(a) - self.shift).exp()
    }

    fn piece(&self, a: f64, b: f64) -> f64 {
        let (x, w) = cell_rule();
        let (h, c) = (0.5 * (b - a), 0.5 * (b + a));
        x.iter().zip(w).map(|(xi, wi)| wi * self.density(c + h * xi)).sum::<f64>() * h
    }

    /// Normalizing mass in the scaled units of [`Self::density`].
    pub fn total(&self) -> f64 {
        *self.cum.last().expect("non-empty")
    }

    /// `F` at the left edge of cell `c` (`c` may equal the cell count).
    pub fn at_edge(&self, c: usize) -> f64 {
        self.cum[c] / self.total()
    }

    pub fn at(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= FRAC_PI_2 {
            return 1.0;
        }
        let n = self.masses.len();
        let c = self.edges.partition_point(|&e| e <= x).saturating_sub(1).min(n - 1);
        ((self.cum[c] + self.piece(self.edges[c], x)) / self.total()).clamp(0.0, 1.0)
    }

    /// Law conditioned on cell `c`, in the offset coordinate.
    pub fn cell_law(&self, c: usize) -> AngleCell<'_, 'a> {
        AngleCell { cdf: self, left: self.edges[c], right: self.edges[c + 1], mass: self.masses[c] }
    }
}

/// One digit cell of an [`AngleCdf`].
pub struct AngleCell<'c, 'a> {
    cdf: &'c AngleCdf<'a>,
    left: f64,
    right: f64,
    mass: f64,
}

impl OffsetLaw for AngleCell<'_, '_> {
    fn cdf(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        (self.cdf.piece(self.left, self.left + t * (self.right - self.left)) / self.mass).clamp(0.0, 1.0)
    }

    fn sf(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        (self.cdf.piece(self.left + t * (self.right - self.left), self.right) / self.mass).clamp(0.0, 1.0)
    }
}

/// Two-stage update of an angle on the digit grid of `[0, pi/2]`.
pub fn angle_update_law(law: &AngleLaw, grid: &DigitGrid, iota: &UpdateRandomness, eps: f64) -> Result<(CellValue, bool)> {
    let cdf = law.cdf_on(grid);
    let total = cdf.total();
    // smallest cell whose right edge has F >= u
    let n = cdf.masses.len();
    let cell = cdf.cum[1..].partition_point(|&m| m / total < iota.u_primary).min(n - 1);
    let (offset, matched) = matched_refine(&cdf.cell_law(cell), iota, eps, grid.k)?;
    Ok((CellValue::new(cell as i64, offset), matched))
}

/// Smallest digit depth `k` for which every angle cell law dominates
/// `(1 - eps)` uniform. The log-density has Lipschitz constant at most
/// `beta * 2d * sqrt(2)` on `[0, pi/2]`, whatever the clusters.
pub fn calibrate_xy(beta: f64, d: usize, eps: f64) -> Result<u32> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter("eps must lie in (0, 1)".into()));
    }
    if beta < 0.0 || d == 0 {
        return Err(Error::InvalidParameter("need beta >= 0 and d >= 1".into()));
    }
    let lip = beta * 2.0 * d as f64 * std::f64::consts::SQRT_2;
    let target = -(1.0 - eps).ln();
    (0..=MAX_DIGITS)
        .find(|&k| lip * FRAC_PI_2 * 10f64.powi(-(k as i32)) <= target)
        .ok_or(Error::DigitOverflow(MAX_DIGITS + 1))
}

/// Sites, boundary contact and edges that an update at a site can read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovSupport {
    pub sites: Vec<usize>,
    pub boundary_sites: Vec<usize>,
    pub touches_wired_boundary: bool,
    pub edges: Vec<usize>,
}

/// Reusable buffers for cluster searches.
#[derive(Debug, Default)]
pub struct XyScratch {
    stamp: Vec<u32>,
    owner: Vec<u32>,
    generation: u32,
    queues: Vec<Vec<usize>>,
    heads: Vec<usize>,
}

/// XY Glauber dynamics in coordinates.
#[derive(Debug, Clone)]
pub struct XyDynamics {
    graph: Arc<SiteGraph>,
    pub beta: f64,
    pub eps: f64,
    grid: DigitGrid,
    boundary: XyBoundary,
    boundary_edges: Vec<usize>,
    boundary_adj: Vec<Vec<usize>>,
}

impl XyDynamics {
    pub fn new(graph: Arc<SiteGraph>, beta: f64, k: u32, eps: f64, boundary: XyBoundary) -> Result<Self> {
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::InvalidParameter("beta must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidParameter("eps must lie in [0, 1)".into()));
        }
        if boundary == XyBoundary::Free && graph.boundary_len() > 0 {
            return Err(Error::InvalidParameter("free boundary needs a graph without boundary sites".into()));
        }
        let mut boundary_edges = Vec::new();
        let mut boundary_adj = vec![Vec::new(); graph.boundary_len()];
        for (e, edge) in graph.edges().iter().enumerate() {
            if let Site::Boundary(b) = edge.b {
                boundary_edges.push(e);
                boundary_adj[b].push(e);
            }
        }
        Ok(Self { graph, beta, eps, grid: DigitGrid::new(k, FRAC_PI_2)?, boundary, boundary_edges, boundary_adj })
    }

    pub fn grid(&self) -> &DigitGrid {
        &self.grid
    }

    fn sign_for(&self, top: bool) -> BoundarySign {
        match self.boundary {
            XyBoundary::Free => BoundarySign::Free,
            XyBoundary::Plus => BoundarySign::Plus,
            XyBoundary::PlusI => BoundarySign::PlusI,
            XyBoundary::Extremal if top => BoundarySign::PlusI,
            XyBoundary::Extremal => BoundarySign::Plus,
        }
    }

    /// A state with the given angles and edge fields.
    pub fn state(&self, alpha: &[f64], omega: Vec<bool>, eta: Vec<bool>, top: bool) -> Result<XyState> {
        let m = self.graph.edge_count();
        if alpha.len() != self.graph.len() || omega.len() != m || eta.len() != m {
            return Err(Error::InvalidParameter("state sizes do not match the graph".into()));
        }
        if alpha.iter().any(|a| !(0.0..=FRAC_PI_2).contains(a)) {
            return Err(Error::InvalidParameter("angles must lie in [0, pi/2]".into()));
        }
        let alpha = alpha.iter().map(|&a| self.to_cell(a)).collect();
        Ok(XyState { alpha, omega, eta, boundary: self.sign_for(top) })
    }

    fn to_cell(&self, a: f64) -> CellValue {
        let scaled = a / FRAC_PI_2 * self.grid.cells_per_unit() as f64;
        let cell = scaled.floor();
        CellValue::new(cell as i64, scaled - cell)
    }

    pub fn angle(&self, state: &XyState, u: usize) -> f64 {
        self.grid.value(state.alpha[u])
    }

    pub fn angles(&self, state: &XyState) -> Vec<f64> {
        (0..self.graph.len()).map(|u| self.angle(state, u)).collect()
    }

    /// `(cos, sin)` of a stored angle, exact at the endpoints.
    fn cell_cos_sin(&self, v: CellValue) -> (f64, f64) {
        if v.offset == 0.0 && v.cell == 0 {
            (1.0, 0.0)
        } else if v.offset == 0.0 && v.cell == self.grid.cells_per_unit() {
            (0.0, 1.0)
        } else {
            let (s, c) = self.grid.value(v).sin_cos();
            (c, s)
        }
    }

    fn site_cos_sin(&self, state: &XyState, site: Site) -> (f64, f64) {
        match site {
            Site::Interior(v) => self.cell_cos_sin(state.alpha[v]),
            Site::Boundary(_) => state.boundary.cos_sin(),
            Site::Absent => (0.0, 0.0),
        }
    }

    fn node(&self, state: &XyState, field: EdgeField, site: Site) -> Option<usize> {
        let n = self.graph.len();
        match site {
            Site::Interior(v) => Some(v),
            Site::Boundary(_) if state.boundary.wired(field) => Some(n),
            Site::Boundary(b) => Some(n + 1 + b),
            Site::Absent => None,
        }
    }

    fn expand(&self, state: &XyState, field: EdgeField, u: usize, x: usize, out: &mut Vec<usize>) {
        let n = self.graph.len();
        let open = state.field(field);
        if x < n {
            for dir in 0..self.graph.degree() {
                if let Some(e) = self.graph.edge_at(x, dir) {
                    if open[e] {
                        let s = self.graph.neighbor(x, dir);
                        if s != Site::Interior(u) {
                            out.extend(self.node(state, field, s));
                        }
                    }
                }
            }
        } else {
            let edges: &[usize] = if x == n { &self.boundary_edges } else { &self.boundary_adj[x - n - 1] };
            for &e in edges {
                if open[e] {
                    let a = self.graph.edges()[e].a;
                    if a != u {
                        out.push(a);
                    }
                }
            }
        }
    }

    fn begin(&self, scratch: &mut XyScratch) {
        let total = self.graph.len() + 1 + self.graph.boundary_len();
        if scratch.stamp.len() != total {
            scratch.stamp = vec![0; total];
            scratch.owner = vec![0; total];
            scratch.generation = 0;
        }
        if scratch.generation == u32::MAX {
            scratch.stamp.iter_mut().for_each(|s| *s = 0);
            scratch.generation = 0;
        }
        scratch.generation += 1;
    }

    /// Partition of the neighbors of `u` by the clusters of `field` in the
    /// graph with `u` removed. Entry `dir` is the group label of the neighbor
    /// in that direction (`usize::MAX` when absent).
    pub fn neighbor_groups(&self, state: &XyState, u: usize, field: EdgeField, scratch: &mut XyScratch) -> Vec<usize> {
        let deg = self.graph.degree();
        let mut start_nodes: Vec<usize> = Vec::with_capacity(deg);
        let mut dir_search = vec![usize::MAX; deg];
        for dir in 0..deg {
            if let Some(x) = self.node(state, field, self.graph.neighbor(u, dir)) {
                let s = match start_nodes.iter().position(|&y| y == x) {
                    Some(s) => s,
                    None => {
                        start_nodes.push(x);
                        start_nodes.len() - 1
                    }
                };
                dir_search[dir] = s;
            }
        }
        let m = start_nodes.len();
        let mut parent: Vec<usize> = (0..m).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        if m > 1 {
            self.begin(scratch);
            let g = scratch.generation;
            if scratch.queues.len() < m {
                scratch.queues.resize_with(m, Vec::new);
                scratch.heads.resize(m, 0);
            }
            for (s, &x) in start_nodes.iter().enumerate() {
                scratch.stamp[x] = g;
                scratch.owner[x] = s as u32;
                scratch.queues[s].clear();
                scratch.queues[s].push(x);
                scratch.heads[s] = 0;
            }
            let mut buf = Vec::new();
            loop {
                let mut working_roots: Vec<usize> = Vec::with_capacity(m);
                for s in 0..m {
                    if scratch.heads[s] < scratch.queues[s].len() {
                        let r = root(&mut parent, s);
                        if !working_roots.contains(&r) {
                            working_roots.push(r);
                        }
                    }
                }
                // at most one group is still growing: every other one is closed
                if working_roots.len() <= 1 {
                    break;
                }
                for s in 0..m {
                    if scratch.heads[s] >= scratch.queues[s].len() {
                        continue;
                    }
                    let x = scratch.queues[s][scratch.heads[s]];
                    scratch.heads[s] += 1;
                    buf.clear();
                    self.expand(state, field, u, x, &mut buf);
                    for &y in &buf {
                        if scratch.stamp[y] != g {
                            scratch.stamp[y] = g;
                            scratch.owner[y] = s as u32;
                            scratch.queues[s].push(y);
                        } else {
                            let (a, b) = (root(&mut parent, s), root(&mut parent, scratch.owner[y] as usize));
                            if a != b {
                                parent[a] = b;
                            }
                        }
                    }
                }
            }
        }
        let mut labels = vec![usize::MAX; m];
        let mut next = 0;
        let mut out = vec![usize::MAX; deg];
        for dir in 0..deg {
            let s = dir_search[dir];
            if s == usize::MAX {
                continue;
            }
            let r = root(&mut parent, s);
            if labels[r] == usize::MAX {
                labels[r] = next;
                next += 1;
            }
            out[dir] = labels[r];
        }
        out
    }

    /// Conditional law of the angle at `u` given the rest of the state.
    pub fn angle_law(&self, state: &XyState, u: usize, scratch: &mut XyScratch) -> AngleLaw {
        let og = self.neighbor_groups(state, u, EdgeField::Omega, scratch);
        let eg = self.neighbor_groups(state, u, EdgeField::Eta, scratch);
        self.law_from_groups(state, u, &og, &eg)
    }

    fn law_from_groups(&self, state: &XyState, u: usize, og: &[usize], eg: &[usize]) -> AngleLaw {
        let count = |g: &[usize]| g.iter().filter(|&&x| x != usize::MAX).max().map_or(0, |m| m + 1);
        let mut omega_sums = vec![0.0; count(og)];
        let mut eta_sums = vec![0.0; count(eg)];
        for dir in 0..self.graph.degree() {
            let (c, s) = self.site_cos_sin(state, self.graph.neighbor(u, dir));
            if og[dir] != usize::MAX {
                omega_sums[og[dir]] += c;
            }
            if eg[dir] != usize::MAX {
                eta_sums[eg[dir]] += s;
            }
        }
        for v in omega_sums.iter_mut().chain(eta_sums.iter_mut()) {
            *v = quantize_parameter(*v);
        }
        AngleLaw { beta: self.beta, omega_sums, eta_sums }
    }

    /// Resamples the edges incident to `u` given the current angles, using
    /// `uniforms(field, dir)`. Within each neighbor group, edges are drawn in
    /// direction order from the exact sequential conditionals of the FK(2) weight.
    fn resample_edges(&self, state: &mut XyState, u: usize, og: &[usize], eg: &[usize], uniforms: impl Fn(EdgeField, usize) -> f64) {
        let deg = self.graph.degree();
        let (cu, su) = self.cell_cos_sin(state.alpha[u]);
        for (field, groups, own) in [(EdgeField::Omega, og, cu), (EdgeField::Eta, eg, su)] {
            let mut p = vec![0.0; deg];
            for dir in 0..deg {
                if groups[dir] != usize::MAX {
                    let (c, s) = self.site_cos_sin(state, self.graph.neighbor(u, dir));
                    let other = if field == EdgeField::Omega { c } else { s };
                    p[dir] = -(-2.0 * self.beta * own * other).exp_m1();
                }
            }
            let ngroups = groups.iter().filter(|&&g| g != usize::MAX).max().map_or(0, |m| m + 1);
            let mut group_open = vec![false; ngroups];
            for dir in 0..deg {
                let g = groups[dir];
                if g == usize::MAX {
                    continue;
                }
                let e = self.graph.edge_at(u, dir).expect("present neighbor has an edge");
                let prob = if group_open[g] {
                    p[dir]
                } else {
                    let q: f64 = (dir + 1..deg).filter(|&d2| groups[d2] == g).map(|d2| 1.0 - p[d2]).product();
                    let denom = p[dir] + (1.0 - p[dir]) * (1.0 + q);
                    p[dir] / denom
                };
                let open = uniforms(field, dir) < prob;
                group_open[g] |= open;
                match field {
                    EdgeField::Omega => state.omega[e] = open,
                    EdgeField::Eta => state.eta[e] = open,
                }
            }
        }
    }

    /// Edge update at `u` with explicit per-edge uniforms
    /// (`omega_u[dir]`, `eta_u[dir]`).
    pub fn edge_update(&self, state: &mut XyState, u: usize, omega_u: &[f64], eta_u: &[f64]) {
        let mut scratch = XyScratch::default();
        let og = self.neighbor_groups(state, u, EdgeField::Omega, &mut scratch);
        let eg = self.neighbor_groups(state, u, EdgeField::Eta, &mut scratch);
        self.resample_edges(state, u, &og, &eg, |f, dir| match f {
            EdgeField::Omega => omega_u[dir],
            EdgeField::Eta => eta_u[dir],
        });
    }

    /// Angle update at `u` without touching the edges.
    pub fn angle_update(&self, state: &XyState, u: usize, iota: &UpdateRandomness) -> Result<(CellValue, bool)> {
        let mut scratch = XyScratch::default();
        let law = self.angle_law(state, u, &mut scratch);
        angle_update_law(&law, &self.grid, iota, self.eps)
    }

    /// The neighbors of `u` together with the omega- and eta-clusters of those
    /// neighbors in the graph with `u` removed.
    pub fn almost_markov_support(&self, state: &XyState, u: usize) -> MarkovSupport {
        let n = self.graph.len();
        let mut seen = vec![false; n + 1 + self.graph.boundary_len()];
        let mut touches = false;
        for field in [EdgeField::Omega, EdgeField::Eta] {
            let mut visited = vec![false; seen.len()];
            let mut stack = Vec::new();
            for &s in self.graph.neighbors(u) {
                if let Some(x) = self.node(state, field, s) {
                    if !visited[x] {
                        visited[x] = true;
                        stack.push(x);
                    }
                }
            }
            let mut buf = Vec::new();
            while let Some(x) = stack.pop() {
                buf.clear();
                self.expand(state, field, u, x, &mut buf);
                for &y in &buf {
                    if !visited[y] {
                        visited[y] = true;
                        stack.push(y);
                    }
                }
            }
            for (i, v) in visited.iter().enumerate() {
                seen[i] |= *v;
            }
            touches |= visited[n];
        }
        let sites: Vec<usize> = (0..n).filter(|&i| seen[i]).collect();
        let mut boundary_sites: Vec<usize> = (0..self.graph.boundary_len()).filter(|&b| seen[n + 1 + b]).collect();
        for &s in self.graph.neighbors(u) {
            if let Site::Boundary(b) = s {
                boundary_sites.push(b);
            }
        }
        boundary_sites.sort_unstable();
        boundary_sites.dedup();
        let mut edges: Vec<usize> = sites
            .iter()
            .flat_map(|&v| (0..self.graph.degree()).filter_map(move |dir| self.graph.edge_at(v, dir)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        MarkovSupport { sites, boundary_sites, touches_wired_boundary: touches, edges }
    }

    /// Spins `xi cos(alpha) + i zeta sin(alpha)` with one coin per cluster;
    /// clusters joined to a wired boundary take its sign `+1`.
    pub fn reconstruct_spins(&self, state: &XyState, omega_coins: &[bool], eta_coins: &[bool]) -> Result<Vec<(f64, f64)>> {
        let po = fine_clusters(&self.graph, &state.omega, state.boundary.wired(EdgeField::Omega))?;
        let pe = fine_clusters(&self.graph, &state.eta, state.boundary.wired(EdgeField::Eta))?;
        if omega_coins.len() < po.count() || eta_coins.len() < pe.count() {
            return Err(Error::InvalidParameter("missing coin for a cluster".into()));
        }
        let sign = |coins: &[bool], label: usize, b: Option<usize>| -> f64 {
            if Some(label) == b || coins[label] {
                1.0
            } else {
                -1.0
            }
        };
        Ok((0..self.graph.len())
            .map(|u| {
                let (c, s) = self.cell_cos_sin(state.alpha[u]);
                let xi = sign(omega_coins, po.labels[u], po.boundary_label);
                let zeta = sign(eta_coins, pe.labels[u], pe.boundary_label);
                (xi * c, zeta * s)
            })
            .collect())
    }

    /// Number of omega- and eta-clusters (coins needed by [`Self::reconstruct_spins`]).
    pub fn cluster_counts(&self, state: &XyState) -> Result<(usize, usize)> {
        let po = fine_clusters(&self.graph, &state.omega, state.boundary.wired(EdgeField::Omega))?;
        let pe = fine_clusters(&self.graph, &state.eta, state.boundary.wired(EdgeField::Eta))?;
        Ok((po.count(), pe.count()))
    }
}

impl Dynamics for XyDynamics {
    type State = XyState;
    type Scratch = XyScratch;

    fn graph(&self) -> &SiteGraph {
        &self.graph
    }

    fn maximal(&self) -> XyState {
        let m = self.graph.edge_count();
        XyState {
            alpha: vec![CellValue::new(self.grid.cells_per_unit(), 0.0); self.graph.len()],
            omega: vec![false; m],
            eta: vec![true; m],
            boundary: self.sign_for(true),
        }
    }

    fn minimal(&self) -> XyState {
        let m = self.graph.edge_count();
        XyState {
            alpha: vec![CellValue::new(0, 0.0); self.graph.len()],
            omega: vec![true; m],
            eta: vec![false; m],
            boundary: self.sign_for(false),
        }
    }

    fn update(&self, state: &mut XyState, u: usize, iota: &UpdateRandomness, scratch: &mut XyScratch) -> Result<bool> {
        let og = self.neighbor_groups(state, u, EdgeField::Omega, scratch);
        let eg = self.neighbor_groups(state, u, EdgeField::Eta, scratch);
        let law = self.law_from_groups(state, u, &og, &eg);
        let (a, matched) = angle_update_law(&law, &self.grid, iota, self.eps)?;
        state.alpha[u] = a;
        self.resample_edges(state, u, &og, &eg, |f, dir| {
            let i = 2 * dir as u64 + u64::from(f == EdgeField::Eta);
            iota.aux_uniform(i)
        });
        Ok(matched)
    }

    fn ordered_at(&self, lower: &XyState, upper: &XyState, u: usize) -> bool {
        if lower.alpha[u] > upper.alpha[u] {
            return false;
        }
        (0..self.graph.degree()).all(|dir| match self.graph.edge_at(u, dir) {
            Some(e) => lower.omega[e] >= upper.omega[e] && lower.eta[e] <= upper.eta[e],
            None => true,
        })
    }

    fn coalesced_at(&self, a: &XyState, b: &XyState, u: usize) -> bool {
        a.alpha[u] == b.alpha[u]
            && (0..self.graph.degree()).all(|dir| match self.graph.edge_at(u, dir) {
                Some(e) => a.omega[e] == b.omega[e] && a.eta[e] == b.eta[e],
                None => true,
            })
    }

    fn truncated_equal_at(&self, a: &XyState, b: &XyState, u: usize) -> bool {
        a.alpha[u].cell == b.alpha[u].cell
            && (0..self.graph.degree()).all(|dir| match self.graph.edge_at(u, dir) {
                Some(e) => a.omega[e] == b.omega[e] && a.eta[e] == b.eta[e],
                None => true,
            })
    }

    fn site_key(&self, s: &XyState, u: usize) -> Vec<u64> {
        let (c, o) = s.alpha[u].key();
        let mut key = vec![c as u64, o];
        let mut bits = 0u64;
        for dir in 0..self.graph.degree() {
            if let Some(e) = self.graph.edge_at(u, dir) {
                bits |= u64::from(s.omega[e]) << (2 * dir);
                bits |= u64::from(s.eta[e]) << (2 * dir + 1);
            }
        }
        key.push(bits);
        key
    }

    fn site_values(&self, s: &XyState, u: usize) -> Vec<f64> {
        let mut v = vec![self.angle(s, u)];
        for dir in 0..self.graph.degree() {
            if let Some(e) = self.graph.edge_at(u, dir) {
                v.push(f64::from(u8::from(s.omega[e])));
                v.push(f64::from(u8::from(s.eta[e])));
            }
        }
        v
    }

    fn touched(&self, site: usize) -> Vec<usize> {
        site_and_neighbors(&self.graph, site)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BoxRegion, Exterior};

    fn path(n: i64) -> Arc<SiteGraph> {
        Arc::new(SiteGraph::from_points(1, (0..n).map(|i| vec![i]).collect(), Exterior::Free).unwrap())
    }

    #[test]
    fn isolated_vertex_is_uniform() {
        let law = AngleLaw { beta: 2.0, omega_sums: vec![], eta_sums: vec![] };
        let c = law.cdf();
        for x in [0.1, 0.7, 1.3] {
            assert!((c.at(x) - x / FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbor_at_angle_zero() {
        let law = AngleLaw { beta: 1.3, omega_sums: vec![1.0], eta_sums: vec![0.0] };
        for a in [0.0, 0.4, 1.2] {
            let want = (1.3 * f64::cos(a)).cosh().ln() - 1.3f64.cosh().ln();
            let got = law.log_density(a) - law.log_density(0.0);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_group_versus_singletons() {
        let beta = 0.9;
        let (x, y) = (0.3f64.cos(), 0.8f64.cos());
        let merged = AngleLaw { beta, omega_sums: vec![x + y], eta_sums: vec![] };
        let split = AngleLaw { beta, omega_sums: vec![x, y], eta_sums: vec![] };
        for a in [0.2f64, 0.9, 1.4] {
            let (p, q) = (beta * a.cos() * x, beta * a.cos() * y);
            let want_merged = (2.0 * (p + q).cosh()).ln();
            let want_split = (2.0 * p.cosh()).ln() + (2.0 * q.cosh()).ln();
            let ln2 = std::f64::consts::LN_2;
            assert!((merged.log_density(a) + ln2 - want_merged).abs() < 1e-12);
            assert!((split.log_density(a) + 2.0 * ln2 - want_split).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_is_certified_by_sweep() {
        assert_eq!(calibrate_xy(0.0, 2, 0.1).unwrap(), 0);
        let eps = 0.2;
        let beta = 0.7;
        let k = calibrate_xy(beta, 2, eps).unwrap();
        let grid = DigitGrid::new(k, FRAC_PI_2).unwrap();
        for law in [
            AngleLaw { beta, omega_sums: vec![4.0], eta_sums: vec![0.0] },
            AngleLaw { beta, omega_sums: vec![0.0], eta_sums: vec![4.0] },
            AngleLaw { beta, omega_sums: vec![1.0; 4], eta_sums: vec![1.0; 4] },
        ] {
            for c in 0..grid.cells_per_unit() {
                let (a, b) = (grid.left(c), grid.left(c + 1));
                let vals: Vec<f64> = (0..=20).map(|i| law.log_density(a + (b - a) * i as f64 / 20.0)).collect();
                let osc = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
                assert!(-osc >= (1.0 - eps).ln());
            }
        }
    }

    #[test]
    fn zero_beta_update_ignores_state() {
        let g = path(3);
        let m = XyDynamics::new(g, 0.0, 2, 0.1, XyBoundary::Free).unwrap();
        let iota = UpdateRandomness { u_primary: 0.437, u_refine: 0.25, u_match: 0.5, aux: 9 };
        let (a, _) = m.angle_update(&m.maximal(), 1, &iota).unwrap();
        let (b, _) = m.angle_update(&m.minimal(), 1, &iota).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cell, 43);
        assert_eq!(a.offset, 0.25);
    }

    #[test]
    fn perpendicular_angles_close_omega() {
        let g = path(2);
        let m = XyDynamics::new(g, 3.0, 2, 0.1, XyBoundary::Free).unwrap();
        let mut s = m.state(&[FRAC_PI_2, FRAC_PI_2], vec![true], vec![false], true).unwrap();
        m.edge_update(&mut s, 0, &[1e-300, 1e-300], &[0.5, 0.5]);
        assert!(!s.omega[0]);
    }

    #[test]
    fn support_examples() {
        let g = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 4).unwrap()));
        let m = XyDynamics::new(g.clone(), 1.0, 2, 0.1, XyBoundary::Plus).unwrap();
        let u = g.index_of(&[0, 0]).unwrap();
        let s = m.state(&vec![0.5; g.len()], vec![false; g.edge_count()], vec![false; g.edge_count()], true).unwrap();
        let sup = m.almost_markov_support(&s, u);
        assert_eq!(sup.sites.len(), 4);
        let mut s2 = s.clone();
        // path from (1, 0) to (3, 0)
        for x in 1..3 {
            let v = g.index_of(&[x, 0]).unwrap();
            s2.omega[g.edge_at(v, 1).unwrap()] = true;
        }
        let sup = m.almost_markov_support(&s2, u);
        assert!(sup.sites.contains(&g.index_of(&[3, 0]).unwrap()));
        assert_eq!(sup.sites.len(), 6);
        assert!(!sup.touches_wired_boundary);
    }

    #[test]
    fn reconstructed_spins_have_unit_modulus() {
        let g = path(3);
        let m = XyDynamics::new(g, 1.0, 2, 0.1, XyBoundary::Free).unwrap();
        let s = m.state(&[0.0, 0.0, 0.0], vec![true, false], vec![false, false], false).unwrap();
        let sp = m.reconstruct_spins(&s, &[true, false], &[true, true, true]).unwrap();
        assert_eq!(sp, vec![(1.0, 0.0), (1.0, 0.0), (-1.0, 0.0)]);
        let q = std::f64::consts::FRAC_PI_4;
        let s = m.state(&[q, q, q], vec![false, false], vec![false, false], false).unwrap();
        let sp = m.reconstruct_spins(&s, &[true; 3], &[true; 3]).unwrap();
        for (re, im) in sp {
            assert!((re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
            assert!((im - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
            assert!((re * re + im * im - 1.0).abs() < 1e-15);
        }
        assert!(m.reconstruct_spins(&s, &[true], &[true; 3]).is_err());
    }

    #[test]
    fn wired_plus_boundary_gives_coherent_group() {
        let g = Arc::new(SiteGraph::from_box(&BoxRegion::centered(2, 1).unwrap()));
        let m = XyDynamics::new(g, 0.8, 2, 0.1, XyBoundary::Plus).unwrap();
        let s = m.minimal();
        let law = m.angle_law(&s, 0, &mut XyScratch::default());
        assert_eq!(law.omega_sums, vec![4.0]);
        assert_eq!(law.eta_sums, vec![0.0; 4]);
    }
}
