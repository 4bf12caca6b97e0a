//! Coarse-graining into mixed (SWM) or good (XY) space-time cells, the
//! 0-clusters of the resulting field, local sets, and the decoupling check.
//!
//! Cell `(j, x)` owns the fine slab `(L(j-1), Lj]` and the tile around `Lx`.
//! It is tested by a sandwich pair on its dependence zone `Λ_{2n_L}(Lx)`,
//! started `n_L` before the slab from the extremal states. The frozen boundary
//! is extremal, except where the zone meets the boundary of the clip box: there
//! both runs see the clip's own SWM boundary value [`CLIP_BOUNDARY`], which
//! keeps them a valid sandwich of any chain on the clip box.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cftp::{cftp_sample, sandwich_from, sandwich_while, CftpOptions, Dynamics};
use crate::error::{Error, Result};
use crate::lattice::{
    div_floor, external_complement, has_crossing, BoxRegion, CoarseCell, CoarseScale, CoarseWindow, Exterior, Point, SiteGraph,
};
use crate::model::{ModelKind, ModelSpec};
use crate::randomness::{event_stream, half_open_unit, splitmix64, vertex_key, EventSource, PoissonField, Resampled};
use crate::swm::SwmBoundary;
use crate::xy::XyBoundary;

/// SWM boundary value outside the clip box.
pub const CLIP_BOUNDARY: f64 = 0.0;

/// Everything needed to evaluate a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseParams {
    pub model: ModelSpec,
    pub scale: CoarseScale,
    /// Finite simulation volume; zones are intersected with it.
    pub clip: Option<BoxRegion>,
}

impl CoarseParams {
    pub fn new(model: ModelSpec, l: i64, delta: f64, clip: Option<BoxRegion>) -> Result<Self> {
        model.validate()?;
        if let Some(c) = &clip {
            if c.d != model.d {
                return Err(Error::InvalidParameter("clip box dimension differs from the model".into()));
            }
        }
        Ok(Self { model, scale: CoarseScale::new(l, delta)?, clip })
    }

    /// The cell whose tile and slab contain the fine point `(t, p)`.
    pub fn cell_of(&self, p: &[i64], t: f64) -> CoarseCell {
        CoarseCell { j: self.scale.slab_of(t), x: self.scale.block_of(p) }
    }

    /// Coarse window holding every cell whose core meets the clip box, plus
    /// one spare layer of trivially mixed cells.
    pub fn covering_window(&self, depth: i64) -> Result<CoarseWindow> {
        let clip = self
            .clip
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("a clip box is required".into()))?;
        let (lo, hi) = clip.bounds();
        let (l, reach) = (self.scale.l, self.scale.n_l - 1);
        let x_min = lo.iter().map(|&c| -div_floor(reach - c, l) - 1).collect();
        let x_max = hi.iter().map(|&c| div_floor(c + reach, l) + 1).collect();
        CoarseWindow::new(-depth, x_min, x_max)
    }
}

/// Result of testing one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReport {
    /// Extremal runs agree on the core at every event time of the slab.
    pub mixed: bool,
    /// An omega- or eta-open path crossed `Λ_L(Lx)` in the slab (XY only;
    /// only examined for mixed cells).
    pub crossing: bool,
}

impl CellReport {
    pub fn good(&self) -> bool {
        self.mixed && !self.crossing
    }
}

fn zone_graph(params: &CoarseParams, x: &[i64]) -> Result<Option<(Arc<SiteGraph>, Vec<usize>)>> {
    let scale = &params.scale;
    let core = scale.core(x).intersect_points(params.clip.as_ref());
    if core.is_empty() {
        return Ok(None);
    }
    let zone = scale.zone(x).intersect_points(params.clip.as_ref());
    let graph = Arc::new(SiteGraph::from_points(params.model.d, zone, Exterior::Boundary)?);
    let core = core.iter().map(|p| graph.index_of(p).expect("core lies in zone")).collect();
    Ok(Some((graph, core)))
}

fn run_cell<D: Dynamics>(
    dynamics: &D,
    core: &[usize],
    slab: (f64, f64),
    pad: f64,
    source: &dyn EventSource,
    mut crosses: impl FnMut(&D::State, Option<usize>) -> bool,
) -> Result<CellReport> {
    let graph = dynamics.graph();
    let (a, b) = slab;
    let warmup = event_stream(graph, a - pad, a, source)?;
    let pair = sandwich_from(dynamics, dynamics.maximal(), dynamics.minimal(), &warmup, |_| {})?;
    if !core.iter().all(|&s| dynamics.coalesced_at(&pair.top, &pair.bottom, s)) {
        return Ok(CellReport { mixed: false, crossing: false });
    }
    if crosses(&pair.top, None) {
        return Ok(CellReport { mixed: true, crossing: true });
    }
    let mut in_core = vec![false; graph.len()];
    for &s in core {
        in_core[s] = true;
    }
    let slab_events = event_stream(graph, a, b, source)?;
    let mut report = CellReport { mixed: true, crossing: false };
    sandwich_while(dynamics, pair.top, pair.bottom, &slab_events, |v| {
        for w in dynamics.touched(v.site) {
            if in_core[w] && !dynamics.coalesced_at(v.top, v.bottom, w) {
                report.mixed = false;
                return false;
            }
        }
        if crosses(v.top, Some(v.site)) {
            report.crossing = true;
            return false;
        }
        true
    })?;
    Ok(report)
}

/// Runs the cell test. Cells whose core misses the clip box are trivially mixed.
pub fn test_cell(params: &CoarseParams, cell: &CoarseCell, source: &dyn EventSource) -> Result<CellReport> {
    if cell.j > 0 || cell.x.len() != params.model.d {
        return Err(Error::InvalidParameter(format!("bad cell {cell:?}")));
    }
    let Some((graph, core)) = zone_graph(params, &cell.x)? else {
        return Ok(CellReport { mixed: true, crossing: false });
    };
    let scale = &params.scale;
    let slab = scale.slab(cell.j);
    let pad = scale.n_l as f64;
    match params.model.kind {
        ModelKind::Swm => {
            let clip = params.clip.as_ref();
            let boundary = graph
                .boundary_points()
                .iter()
                .map(|p| clip.filter(|c| !c.contains(p)).map(|_| CLIP_BOUNDARY))
                .collect();
            let dynamics = params.model.swm(graph, SwmBoundary::Partial(boundary))?;
            run_cell(&dynamics, &core, slab, pad, source, |_, _| false)
        }
        ModelKind::Xy => {
            let dynamics = params.model.xy(graph.clone(), XyBoundary::Extremal)?;
            let cross_box = scale.crossing_box(&cell.x);
            let near: Vec<bool> = graph
                .points()
                .iter()
                .map(|p| p.iter().zip(&cross_box.center).all(|(a, c)| (a - c).abs() <= cross_box.n))
                .collect();
            run_cell(&dynamics, &core, slab, pad, source, |top, site| {
                if site.is_some_and(|s| !near[s]) {
                    return false;
                }
                has_crossing(&graph, &top.omega, &cross_box) || has_crossing(&graph, &top.eta, &cross_box)
            })
        }
    }
}

pub fn cell_is_mixed(params: &CoarseParams, cell: &CoarseCell, source: &dyn EventSource) -> Result<bool> {
    Ok(test_cell(params, cell, source)?.mixed)
}

/// Mixed, and for XY additionally free of omega and eta crossings.
pub fn cell_is_good(params: &CoarseParams, cell: &CoarseCell, source: &dyn EventSource) -> Result<bool> {
    Ok(test_cell(params, cell, source)?.good())
}

/// Read access to a 0/1 field on coarse cells (`true` is 1).
pub trait ThetaSource {
    fn theta(&mut self, cell: &CoarseCell) -> Result<bool>;
}

/// The coarse field of a Poisson event source, evaluated on demand and cached.
pub struct LazyTheta<'a> {
    params: &'a CoarseParams,
    source: &'a dyn EventSource,
    cache: HashMap<CoarseCell, bool>,
}

impl<'a> LazyTheta<'a> {
    pub fn new(params: &'a CoarseParams, source: &'a dyn EventSource) -> Self {
        Self { params, source, cache: HashMap::new() }
    }

    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

impl ThetaSource for LazyTheta<'_> {
    fn theta(&mut self, cell: &CoarseCell) -> Result<bool> {
        if let Some(&v) = self.cache.get(cell) {
            return Ok(v);
        }
        let v = cell_is_good(self.params, cell, self.source)?;
        self.cache.insert(cell.clone(), v);
        Ok(v)
    }
}

/// I.i.d. field with `P[theta = 0] = eps`, keyed by cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliTheta {
    pub eps: f64,
    pub seed: u64,
}

impl BernoulliTheta {
    pub fn value(&self, cell: &CoarseCell) -> bool {
        let mut h = splitmix64(self.seed ^ (cell.j as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        h = splitmix64(h ^ vertex_key(&cell.x));
        half_open_unit(h) >= self.eps
    }
}

impl ThetaSource for BernoulliTheta {
    fn theta(&mut self, cell: &CoarseCell) -> Result<bool> {
        Ok(self.value(cell))
    }
}

/// Adapter turning a closure into a field.
pub struct FnTheta<F>(pub F);

impl<F: FnMut(&CoarseCell) -> bool> ThetaSource for FnTheta<F> {
    fn theta(&mut self, cell: &CoarseCell) -> Result<bool> {
        Ok((self.0)(cell))
    }
}

/// A fully evaluated field on a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaField {
    pub window: CoarseWindow,
    /// Indexed like the window; `true` is 1.
    pub values: Vec<bool>,
}

impl ThetaField {
    /// Evaluates every cell of the window, in parallel.
    pub fn evaluate(params: &CoarseParams, window: &CoarseWindow, source: &dyn EventSource) -> Result<Self> {
        let values = (0..window.len())
            .into_par_iter()
            .map(|i| cell_is_good(params, &window.cell(i), source))
            .collect::<Result<Vec<bool>>>()?;
        Ok(Self { window: window.clone(), values })
    }

    pub fn from_source(window: &CoarseWindow, source: &mut dyn ThetaSource) -> Result<Self> {
        let values = (0..window.len()).map(|i| source.theta(&window.cell(i))).collect::<Result<_>>()?;
        Ok(Self { window: window.clone(), values })
    }

    pub fn density(&self) -> f64 {
        self.values.iter().filter(|&&v| v).count() as f64 / self.values.len() as f64
    }

    /// Pearson correlation of the field over nearest-neighbor pairs
    /// (space and time); `None` when the field is constant.
    pub fn nn_correlation(&self) -> Option<f64> {
        let mut pairs = Vec::new();
        for i in 0..self.values.len() {
            for nb in self.window.nn_neighbors(i) {
                if nb > i {
                    pairs.push((f64::from(u8::from(self.values[i])), f64::from(u8::from(self.values[nb]))));
                }
            }
        }
        correlation(&pairs)
    }
}

pub(crate) fn correlation(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if n < 2.0 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

impl ThetaSource for ThetaField {
    fn theta(&mut self, cell: &CoarseCell) -> Result<bool> {
        let i = self.window.index(cell).ok_or_else(|| Error::OutsideRegion(cell.x.clone()))?;
        Ok(self.values[i])
    }
}

/// The `*`-connected 0-cluster of a cell, with the 1-cells bordering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarCluster {
    pub origin: CoarseCell,
    /// Empty when the origin is a 1-cell.
    pub cells: Vec<CoarseCell>,
    /// 1-cells `*`-adjacent to the cluster, inside the window.
    pub boundary: Vec<CoarseCell>,
}

impl StarCluster {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Explores the 0-cluster of `origin` cell by cell, querying the field only
/// on the cluster and its `*`-boundary. Fails with `WindowTooSmall` when a
/// 0-cell of the cluster lies on the outer face of the window.
pub fn star_cluster(theta: &mut dyn ThetaSource, window: &CoarseWindow, origin: &CoarseCell) -> Result<StarCluster> {
    explore(theta, window, origin, usize::MAX)
}

/// Like [`star_cluster`] but stops once `cap` cells are found, so the result
/// holds `min(|C*|, cap)` cells and a partial boundary.
pub fn star_cluster_capped(theta: &mut dyn ThetaSource, window: &CoarseWindow, origin: &CoarseCell, cap: usize) -> Result<StarCluster> {
    explore(theta, window, origin, cap)
}

fn explore(theta: &mut dyn ThetaSource, window: &CoarseWindow, origin: &CoarseCell, cap: usize) -> Result<StarCluster> {
    let o = window.index(origin).ok_or_else(|| Error::OutsideRegion(origin.x.clone()))?;
    let mut out = StarCluster { origin: origin.clone(), cells: Vec::new(), boundary: Vec::new() };
    if theta.theta(origin)? {
        return Ok(out);
    }
    let mut seen = HashSet::from([o]);
    let mut queue = VecDeque::from([o]);
    while let Some(i) = queue.pop_front() {
        let c = window.cell(i);
        if window.on_outer_face(&c) {
            return Err(Error::WindowTooSmall);
        }
        out.cells.push(c);
        if out.cells.len() >= cap {
            break;
        }
        for nb in window.star_neighbors(i) {
            if !seen.insert(nb) {
                continue;
            }
            let cell = window.cell(nb);
            if theta.theta(&cell)? {
                out.boundary.push(cell);
            } else {
                queue.push_back(nb);
            }
        }
    }
    out.cells.sort();
    out.boundary.sort();
    Ok(out)
}

/// A finite connected set of sites on which the value at `v` depends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSet {
    pub v: Point,
    pub cluster_size: usize,
    /// Sorted sites.
    pub sites: Vec<Point>,
}

impl LocalSet {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        self.sites.binary_search_by(|q| q.as_slice().cmp(p)).is_ok()
    }

    /// Largest l-infinity extent along any axis.
    pub fn diameter(&self) -> i64 {
        let d = self.v.len();
        (0..d)
            .map(|a| {
                let lo = self.sites.iter().map(|p| p[a]).min().unwrap_or(0);
                let hi = self.sites.iter().map(|p| p[a]).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }

    /// Nearest-neighbor connectivity of the site set.
    pub fn is_connected(&self) -> bool {
        let Some(first) = self.sites.first() else { return true };
        let set: HashSet<&Point> = self.sites.iter().collect();
        let mut seen = HashSet::from([first.clone()]);
        let mut stack = vec![first.clone()];
        while let Some(p) = stack.pop() {
            for a in 0..p.len() {
                for s in [-1, 1] {
                    let mut q = p.clone();
                    q[a] += s;
                    if set.contains(&q) && seen.insert(q.clone()) {
                        stack.push(q);
                    }
                }
            }
        }
        seen.len() == self.sites.len()
    }
}

/// Local set of `v` from its 0-cluster: the spatial projection of the
/// dependence zones of the cluster cells and of the 1-cells shielding it,
/// intersected with the clip box. An empty cluster gives the zone of the
/// cell of `v` alone.
pub fn local_set(params: &CoarseParams, v: &[i64], cluster: &StarCluster) -> Result<LocalSet> {
    let scale = &params.scale;
    if scale.block_of(v) != cluster.origin.x {
        return Err(Error::InvalidParameter("cluster is not rooted at the cell of v".into()));
    }
    if params.clip.as_ref().is_some_and(|c| !c.contains(v)) {
        return Err(Error::OutsideRegion(v.to_vec()));
    }
    let columns: HashSet<&Point> = if cluster.is_empty() {
        HashSet::from([&cluster.origin.x])
    } else {
        cluster.cells.iter().chain(&cluster.boundary).map(|c| &c.x).collect()
    };
    let mut sites: HashSet<Point> = HashSet::new();
    for x in columns {
        sites.extend(scale.zone(x).intersect_points(params.clip.as_ref()));
    }
    let mut sites: Vec<Point> = sites.into_iter().collect();
    sites.sort();
    Ok(LocalSet { v: v.to_vec(), cluster_size: cluster.len(), sites })
}

/// One `(|C*|, |L_v|)` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSample {
    pub seed: u64,
    pub v: Point,
    pub cluster_size: usize,
    pub local_set_size: usize,
}

/// Cluster and local-set sizes at several sites of one event field. Windows
/// extend `radius` cells around each origin and `depth` slabs into the past.
/// The field is evaluated once and shared by all sites; each site reports its
/// own failure.
pub fn tail_samples(params: &CoarseParams, seed: u64, sites: &[Point], radius: i64, depth: i64) -> Vec<Result<TailSample>> {
    let field = PoissonField::new(seed);
    let mut theta = LazyTheta::new(params, &field);
    let mut one = |v: &Point| -> Result<TailSample> {
        let origin = params.cell_of(v, 0.0);
        let window = CoarseWindow::around(&origin.x, radius, depth)?;
        let cluster = star_cluster(&mut theta, &window, &origin)?;
        let ls = local_set(params, v, &cluster)?;
        Ok(TailSample { seed, v: v.clone(), cluster_size: cluster.len(), local_set_size: ls.len() })
    };
    sites.iter().map(one).collect()
}

/// Sizes of the 0-cluster of the origin in `count` independent Bernoulli
/// fields, clamped at `cap`.
pub fn bernoulli_cluster_sizes(eps: f64, d: usize, seed: u64, count: usize, radius: i64, cap: usize) -> Result<Vec<u64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidParameter("eps must lie in [0, 1)".into()));
    }
    let origin = CoarseCell { j: 0, x: vec![0; d] };
    let window = CoarseWindow::around(&origin.x, radius, radius)?;
    (0..count as u64)
        .into_par_iter()
        .map(|r| {
            let mut theta = BernoulliTheta { eps, seed: splitmix64(seed ^ splitmix64(r)) };
            star_cluster_capped(&mut theta, &window, &origin, cap).map(|c| c.len() as u64)
        })
        .collect()
}

/// Exact law of the size of the 0-cluster of the origin under i.i.d.
/// Bernoulli cells (`P[0] = eps`) on `Z_{<=0} x Z^d`: entry `s` is
/// `P[|C*| = s]` for `s <= max_size`, by enumeration of rooted animals.
pub fn bernoulli_cluster_law(eps: f64, d: usize, max_size: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) || d == 0 {
        return Err(Error::InvalidParameter("need eps in [0, 1) and d >= 1".into()));
    }
    if max_size > 5 {
        return Err(Error::InstanceTooLarge(format!("animals up to size {max_size}")));
    }
    let dim = d + 1;
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut code| {
            (0..dim)
                .map(|_| {
                    let s = (code % 3) as i64 - 1;
                    code /= 3;
                    s
                })
                .collect()
        })
        .filter(|o: &Vec<i64>| o.iter().any(|&s| s != 0))
        .collect();
    let neighbors = |c: &Vec<i64>| -> Vec<Vec<i64>> {
        offsets
            .iter()
            .map(|o| c.iter().zip(o).map(|(a, b)| a + b).collect::<Vec<i64>>())
            .filter(|q| q[0] <= 0)
            .collect()
    };
    let mut law = vec![1.0 - eps];
    let mut level: BTreeSet<Vec<Vec<i64>>> = BTreeSet::from([vec![vec![0; dim]]]);
    for _ in 1..=max_size {
        let mut p = 0.0;
        for animal in &level {
            let members: HashSet<&Vec<i64>> = animal.iter().collect();
            let perimeter: HashSet<Vec<i64>> =
                animal.iter().flat_map(&neighbors).filter(|q| !members.contains(q)).collect();
            p += eps.powi(animal.len() as i32) * (1.0 - eps).powi(perimeter.len() as i32);
        }
        law.push(p);
        if law.len() > max_size {
            break;
        }
        let mut next = BTreeSet::new();
        for animal in &level {
            let members: HashSet<&Vec<i64>> = animal.iter().collect();
            for q in animal.iter().flat_map(&neighbors) {
                if !members.contains(&q) {
                    let mut grown = animal.clone();
                    grown.push(q);
                    grown.sort();
                    next.insert(grown);
                }
            }
        }
        level = next;
    }
    Ok(law)
}

/// Decay rate of `P[|C*| > n]` for `n < max_size` under the exact Bernoulli
/// law, by the same log-linear fit applied to samples.
pub fn bernoulli_reference_rate(eps: f64, d: usize, max_size: usize) -> Result<f64> {
    let law = bernoulli_cluster_law(eps, d, max_size)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut below = 0.0;
    for (n, p) in law.iter().enumerate().take(max_size) {
        below += p;
        xs.push(n as f64);
        ys.push((1.0 - below).ln());
    }
    Ok(-crate::stats::linear_fit(&xs, &ys)?.slope)
}

/// Options of the decoupling check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecouplingOptions {
    /// External-complement radius in cells; defaults to the shielding radius.
    pub radius: Option<i64>,
    pub cftp: CftpOptions,
    /// Depth in slabs of the window used to explore the cluster.
    pub depth: i64,
}

impl Default for DecouplingOptions {
    fn default() -> Self {
        Self { radius: None, cftp: CftpOptions { t_min: 128.0, t_max: 65536.0 }, depth: 64 }
    }
}

/// Outcome of one decoupling trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingTrial {
    pub seed: u64,
    pub cluster_size: usize,
    pub local_set_size: usize,
    pub radius: i64,
    /// Arrivals replaced inside the external complement.
    pub resampled_events: usize,
    /// Value at `v` unchanged after resampling the external complement.
    pub identical: bool,
    /// Arrivals replaced in the tile and slab of the cell of `v`.
    pub inside_events: usize,
    /// Value at `v` unchanged after resampling inside that cell.
    pub inside_identical: bool,
    pub window: f64,
}

fn cftp_key<D: Dynamics>(dynamics: &D, site: usize, source: &dyn EventSource, options: CftpOptions) -> Result<(Vec<u64>, f64)> {
    let r = cftp_sample(dynamics, &[site], source, options)?.into_result()?;
    Ok((dynamics.site_key(&r.state, site), r.window))
}

fn exact_key(params: &CoarseParams, graph: &Arc<SiteGraph>, site: usize, source: &dyn EventSource, options: CftpOptions) -> Result<(Vec<u64>, f64)> {
    match params.model.kind {
        ModelKind::Swm => cftp_key(&params.model.swm(graph.clone(), SwmBoundary::Constant(CLIP_BOUNDARY))?, site, source, options),
        ModelKind::Xy => cftp_key(&params.model.xy(graph.clone(), XyBoundary::Plus)?, site, source, options),
    }
}

fn count_in(graph: &SiteGraph, t: f64, source: &dyn EventSource, region: &dyn Fn(&[i64], f64) -> bool) -> Result<usize> {
    Ok(event_stream(graph, -t, 0.0, source)?
        .iter()
        .filter(|e| region(graph.point(e.site), e.time))
        .count())
}

/// Samples the value at the center of the clip box by coupling from the past
/// (frozen boundary `0` for SWM, `+1` for XY), finds the 0-cluster of its
/// cell, then resamples every arrival in the external complement of the
/// cluster and samples again. A second resampling, restricted to the cell of
/// the center, shows the check is not vacuous.
pub fn decoupling_trial(params: &CoarseParams, seed: u64, options: &DecouplingOptions) -> Result<DecouplingTrial> {
    let clip = params
        .clip
        .clone()
        .ok_or_else(|| Error::InvalidParameter("decoupling needs a clip box".into()))?;
    let graph = Arc::new(SiteGraph::from_box(&clip));
    let v = clip.center.clone();
    let site = graph.index_of(&v).expect("center lies in its box");
    let base = PoissonField::new(seed);
    let alt = PoissonField::new(splitmix64(seed ^ 0xA5A5_5A5A_C3C3_3C3C));

    let origin = params.cell_of(&v, 0.0);
    let explore = params.covering_window(options.depth)?;
    let mut theta = LazyTheta::new(params, &base);
    let cluster = star_cluster(&mut theta, &explore, &origin)?;
    let ls = local_set(params, &v, &cluster)?;

    let radius = options.radius.unwrap_or_else(|| params.scale.shielding_radius());
    let seeds: Vec<CoarseCell> = if cluster.is_empty() { vec![origin.clone()] } else { cluster.cells.clone() };
    let j_low = seeds.iter().map(|c| c.j).min().expect("non-empty");
    // everything below the window must be at distance > radius from the cluster
    let mut complement_window = explore.clone();
    complement_window.j_min = complement_window.j_min.min(j_low - radius - 1);
    let idx: Vec<usize> = seeds.iter().map(|c| complement_window.index(c).expect("cluster inside window")).collect();
    let mask = external_complement(&complement_window, &idx, radius, 1)?;
    let scale = params.scale;
    let outside = move |p: &[i64], t: f64| -> bool {
        let c = CoarseCell { j: scale.slab_of(t), x: scale.block_of(p) };
        match complement_window.index(&c) {
            Some(i) => mask[i],
            None => c.j < complement_window.j_min,
        }
    };
    let resampled = Resampled { base: &base, alt: &alt, region: &outside };
    // reach well into the resampled past so the comparison is not vacuous
    let deep = 2.0 * (scale.l * (radius + 1 - j_low)) as f64;
    let cftp = CftpOptions { t_min: options.cftp.t_min.max(deep), ..options.cftp };
    let (key, window) = exact_key(params, &graph, site, &base, cftp)?;
    let (key2, window2) = exact_key(params, &graph, site, &resampled, cftp)?;
    let resampled_events = count_in(&graph, window2.max(window), &base, &outside)?;

    let own = origin.clone();
    let inside = move |p: &[i64], t: f64| -> bool { scale.slab_of(t) == own.j && scale.block_of(p) == own.x };
    let resampled_in = Resampled { base: &base, alt: &alt, region: &inside };
    let (key3, _) = exact_key(params, &graph, site, &resampled_in, cftp)?;
    let inside_events = count_in(&graph, scale.l as f64, &base, &inside)?;

    Ok(DecouplingTrial {
        seed,
        cluster_size: cluster.len(),
        local_set_size: ls.len(),
        radius,
        resampled_events,
        identical: key == key2,
        inside_events,
        inside_identical: key == key3,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swm_params(beta: f64, l: i64, delta: f64, clip: Option<BoxRegion>) -> CoarseParams {
        let m = ModelSpec::calibrated(ModelKind::Swm, 2, beta, 0.1).unwrap();
        CoarseParams::new(m, l, delta, clip).unwrap()
    }

    #[test]
    fn cell_bit_is_deterministic() {
        let p = swm_params(0.5, 2, 0.5, None);
        let f = PoissonField::new(3);
        let c = CoarseCell { j: -1, x: vec![1, 0] };
        let a = test_cell(&p, &c, &f).unwrap();
        assert_eq!(a, test_cell(&p, &c, &f).unwrap());
    }

    #[test]
    fn cells_outside_the_clip_are_trivially_mixed() {
        let clip = BoxRegion::centered(2, 3).unwrap();
        let p = swm_params(1.0, 4, 0.5, Some(clip));
        let c = CoarseCell { j: 0, x: vec![5, 5] };
        assert!(cell_is_mixed(&p, &c, &PoissonField::new(1)).unwrap());
    }

    #[test]
    fn covering_window_is_bordered_by_trivial_cells() {
        let clip = BoxRegion::centered(2, 3).unwrap();
        let p = swm_params(1.0, 4, 0.2, Some(clip.clone()));
        let w = p.covering_window(1).unwrap();
        for i in 0..w.len() {
            let c = w.cell(i);
            let face = c.x.iter().zip(w.x_min.iter().zip(&w.x_max)).any(|(x, (a, b))| x == a || x == b);
            let meets = !p.scale.core(&c.x).intersect_points(Some(&clip)).is_empty();
            assert_eq!(face, !meets, "{c:?}");
        }
    }

    #[test]
    fn all_ones_gives_the_zone() {
        let p = swm_params(1.0, 4, 0.5, None);
        let w = CoarseWindow::around(&[0, 0], 3, 3).unwrap();
        let v = vec![1, -1];
        let cl = star_cluster(&mut FnTheta(|_: &CoarseCell| true), &w, &p.cell_of(&v, 0.0)).unwrap();
        assert!(cl.is_empty());
        let ls = local_set(&p, &v, &cl).unwrap();
        assert_eq!(ls.len(), p.scale.zone(&[0, 0]).len());
        assert!(ls.contains(&v) && ls.is_connected());
    }

    #[test]
    fn single_zero_cell_diameter() {
        let p = swm_params(1.0, 4, 0.5, None);
        let w = CoarseWindow::around(&[0, 0], 3, 3).unwrap();
        let origin = CoarseCell { j: 0, x: vec![0, 0] };
        let o2 = origin.clone();
        let cl = star_cluster(&mut FnTheta(move |c: &CoarseCell| *c != o2), &w, &origin).unwrap();
        assert_eq!(cl.len(), 1);
        assert_eq!(cl.boundary.len(), 17);
        let ls = local_set(&p, &[0, 0], &cl).unwrap();
        let (l, n) = (p.scale.l, p.scale.n_l);
        assert!(ls.diameter() <= 2 * (l + 2 * n));
        assert!(ls.is_connected());
    }

    #[test]
    fn escaping_cluster_is_reported() {
        let w = CoarseWindow::around(&[0], 2, 2).unwrap();
        let r = star_cluster(&mut FnTheta(|_: &CoarseCell| false), &w, &CoarseCell { j: 0, x: vec![0] });
        assert_eq!(r.unwrap_err(), Error::WindowTooSmall);
    }

    #[test]
    fn bernoulli_law_small_sizes() {
        let eps = 0.05;
        let law = bernoulli_cluster_law(eps, 1, 2).unwrap();
        // half-plane *-lattice: the origin has 5 neighbors
        assert!((law[0] - 0.95).abs() < 1e-15);
        assert!((law[1] - eps * 0.95f64.powi(5)).abs() < 1e-15);
        assert!(law.iter().sum::<f64>() < 1.0);
        let sizes = bernoulli_cluster_sizes(eps, 1, 9, 20_000, 30, usize::MAX).unwrap();
        let f1 = sizes.iter().filter(|&&s| s == 1).count() as f64 / 20_000.0;
        assert!((f1 - law[1]).abs() < 4.0 * (law[1] / 20_000.0).sqrt());
    }
}
