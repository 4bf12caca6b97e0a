//! Finite pieces of Z^d, their neighbor structure, cluster labeling, and the
//! coarse space-time grid used by the coarse-graining layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lattice point of Z^d.
pub type Point = Vec<i64>;

/// The open cube `center + (-n, n)^d` intersected with Z^d.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub d: usize,
    pub n: i64,
    pub center: Point,
}

impl BoxRegion {
    pub fn new(d: usize, n: i64, center: Point) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if n < 1 {
            return Err(Error::InvalidParameter("radius must be positive".into()));
        }
        if center.len() != d {
            return Err(Error::InvalidParameter(format!(
                "center has {} coordinates, expected {d}",
                center.len()
            )));
        }
        Ok(Self { d, n, center })
    }

    pub fn centered(d: usize, n: i64) -> Result<Self> {
        Self::new(d, n, vec![0; d])
    }

    pub fn side(&self) -> i64 {
        2 * self.n - 1
    }

    pub fn len(&self) -> usize {
        (self.side() as usize).pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        p.len() == self.d
            && p.iter()
                .zip(&self.center)
                .all(|(x, c)| (x - c).abs() < self.n)
    }

    /// Lower and upper corners (inclusive).
    pub fn bounds(&self) -> (Point, Point) {
        let lo = self.center.iter().map(|c| c - self.n + 1).collect();
        let hi = self.center.iter().map(|c| c + self.n - 1).collect();
        (lo, hi)
    }

    /// Points in lexicographic order.
    pub fn points(&self) -> Vec<Point> {
        let (lo, hi) = self.bounds();
        cuboid_points(&lo, &hi)
    }

    /// Points lying in both this box and `other`.
    pub fn intersect_points(&self, other: Option<&BoxRegion>) -> Vec<Point> {
        let (mut lo, mut hi) = self.bounds();
        if let Some(o) = other {
            let (olo, ohi) = o.bounds();
            for a in 0..self.d {
                lo[a] = lo[a].max(olo[a]);
                hi[a] = hi[a].min(ohi[a]);
            }
        }
        cuboid_points(&lo, &hi)
    }
}

/// All points of the cuboid `[lo, hi]` (inclusive), lexicographic.
pub fn cuboid_points(lo: &[i64], hi: &[i64]) -> Vec<Point> {
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cur = lo.to_vec();
    loop {
        out.push(cur.clone());
        let mut a = lo.len();
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            if cur[a] < hi[a] {
                cur[a] += 1;
                for b in a + 1..lo.len() {
                    cur[b] = lo[b];
                }
                break;
            }
        }
    }
}

/// What sits across one of the `2d` directions of an interior site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Interior(usize),
    Boundary(usize),
    /// No vertex (free boundary).
    Absent,
}

/// How exterior neighbors are treated when building a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exterior {
    /// Exterior neighbors become boundary sites carrying a boundary condition.
    Boundary,
    /// Exterior neighbors are dropped.
    Free,
}

/// Unit direction `dir`: axis `dir / 2`, sign `-` when even and `+` when odd.
pub fn step(p: &[i64], dir: usize) -> Point {
    let mut q = p.to_vec();
    q[dir / 2] += if dir % 2 == 0 { -1 } else { 1 };
    q
}

pub fn opposite(dir: usize) -> usize {
    dir ^ 1
}

/// An edge incident to at least one interior site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: Site,
    /// Direction from `a` to `b`.
    pub dir: usize,
}

/// A finite vertex set of Z^d with its exterior neighbors and edges.
#[derive(Debug, Clone)]
pub struct SiteGraph {
    d: usize,
    points: Vec<Point>,
    index: HashMap<Point, usize>,
    boundary: Vec<Point>,
    boundary_index: HashMap<Point, usize>,
    nbrs: Vec<Site>,
    edges: Vec<Edge>,
    edge_of: Vec<Option<usize>>,
}

impl SiteGraph {
    pub fn from_box(region: &BoxRegion) -> Self {
        Self::build(region.d, region.points(), Exterior::Boundary)
    }

    pub fn from_points(d: usize, points: Vec<Point>, exterior: Exterior) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::InvalidParameter(format!("point {p:?} is not in Z^{d}")));
        }
        let mut pts = points;
        pts.sort();
        pts.dedup();
        Ok(Self::build(d, pts, exterior))
    }

    fn build(d: usize, points: Vec<Point>, exterior: Exterior) -> Self {
        let index: HashMap<Point, usize> =
            points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut boundary = Vec::new();
        let mut boundary_index = HashMap::new();
        let mut nbrs = Vec::with_capacity(points.len() * 2 * d);
        for p in &points {
            for dir in 0..2 * d {
                let q = step(p, dir);
                let site = match index.get(&q) {
                    Some(&i) => Site::Interior(i),
                    None => match exterior {
                        Exterior::Free => Site::Absent,
                        Exterior::Boundary => {
                            let b = *boundary_index.entry(q.clone()).or_insert_with(|| {
                                boundary.push(q);
                                boundary.len() - 1
                            });
                            Site::Boundary(b)
                        }
                    },
                };
                nbrs.push(site);
            }
        }
        let deg = 2 * d;
        let mut edges = Vec::new();
        let mut edge_of = vec![None; points.len() * deg];
        for u in 0..points.len() {
            for dir in 0..deg {
                if edge_of[u * deg + dir].is_some() {
                    continue;
                }
                match nbrs[u * deg + dir] {
                    Site::Absent => {}
                    Site::Boundary(_) => {
                        edge_of[u * deg + dir] = Some(edges.len());
                        edges.push(Edge { a: u, b: nbrs[u * deg + dir], dir });
                    }
                    Site::Interior(v) => {
                        let e = edges.len();
                        edges.push(Edge { a: u, b: Site::Interior(v), dir });
                        edge_of[u * deg + dir] = Some(e);
                        edge_of[v * deg + opposite(dir)] = Some(e);
                    }
                }
            }
        }
        Self { d, points, index, boundary, boundary_index, nbrs, edges, edge_of }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn degree(&self) -> usize {
        2 * self.d
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, u: usize) -> &Point {
        &self.points[u]
    }

    pub fn index_of(&self, p: &[i64]) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn boundary_len(&self) -> usize {
        self.boundary.len()
    }

    pub fn boundary_points(&self) -> &[Point] {
        &self.boundary
    }

    pub fn boundary_index_of(&self, p: &[i64]) -> Option<usize> {
        self.boundary_index.get(p).copied()
    }

    #[inline]
    pub fn neighbor(&self, u: usize, dir: usize) -> Site {
        self.nbrs[u * 2 * self.d + dir]
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[Site] {
        let deg = 2 * self.d;
        &self.nbrs[u * deg..(u + 1) * deg]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    #[inline]
    pub fn edge_at(&self, u: usize, dir: usize) -> Option<usize> {
        self.edge_of[u * 2 * self.d + dir]
    }

    /// Number of boundary sites adjacent to `u`.
    pub fn boundary_degree(&self, u: usize) -> usize {
        self.neighbors(u)
            .iter()
            .filter(|s| matches!(s, Site::Boundary(_)))
            .count()
    }
}

/// Disjoint-set forest with union by rank and path compression.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    pub fn same(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Dense labels `0..count` in order of first appearance.
    pub fn labels(&mut self) -> (Vec<usize>, usize) {
        let n = self.parent.len();
        let mut map = vec![usize::MAX; n];
        let mut labels = vec![0; n];
        let mut count = 0;
        for i in 0..n {
            let r = self.find(i);
            if map[r] == usize::MAX {
                map[r] = count;
                count += 1;
            }
            labels[i] = map[r];
        }
        (labels, count)
    }
}

/// Components of the interior sites of a graph under a set of open edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Label of the wired boundary component, when the boundary is wired.
    pub boundary_label: Option<usize>,
}

impl ClusterPartition {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Connected components of the open edges of `graph`.
///
/// `open` is indexed by the graph's edge ids. With `wired` set, all boundary
/// sites form one extra node; edges to `Absent` sites do not exist.
pub fn fine_clusters(graph: &SiteGraph, open: &[bool], wired: bool) -> Result<ClusterPartition> {
    if open.len() != graph.edge_count() {
        return Err(Error::EdgeCountMismatch { got: open.len(), expected: graph.edge_count() });
    }
    let n = graph.len();
    let mut uf = UnionFind::new(n + usize::from(wired));
    for (e, edge) in graph.edges().iter().enumerate() {
        if !open[e] {
            continue;
        }
        match edge.b {
            Site::Interior(v) => {
                uf.union(edge.a, v);
            }
            Site::Boundary(_) if wired => {
                uf.union(edge.a, n);
            }
            _ => {}
        }
    }
    let (labels, count) = uf.labels();
    let mut sizes = vec![0; count];
    for &l in &labels[..n] {
        sizes[l] += 1;
    }
    let boundary_label = wired.then(|| labels[n]);
    Ok(ClusterPartition { labels: labels[..n].to_vec(), sizes, boundary_label })
}

/// Whether the open edges inside `region` join two opposite faces of it.
pub fn has_crossing(graph: &SiteGraph, open: &[bool], region: &BoxRegion) -> bool {
    let (lo, hi) = region.bounds();
    let sites: Vec<usize> = region.points().iter().filter_map(|p| graph.index_of(p)).collect();
    let mut local = HashMap::with_capacity(sites.len());
    for (i, &s) in sites.iter().enumerate() {
        local.insert(s, i);
    }
    let mut uf = UnionFind::new(sites.len());
    for (i, &s) in sites.iter().enumerate() {
        for dir in 0..graph.degree() {
            if dir % 2 == 0 {
                continue;
            }
            if let (Site::Interior(v), Some(e)) = (graph.neighbor(s, dir), graph.edge_at(s, dir)) {
                if open[e] {
                    if let Some(&j) = local.get(&v) {
                        uf.union(i, j);
                    }
                }
            }
        }
    }
    for a in 0..region.d {
        if lo[a] == hi[a] {
            continue;
        }
        let mut low_roots = std::collections::HashSet::new();
        for (i, &s) in sites.iter().enumerate() {
            if graph.point(s)[a] == lo[a] {
                low_roots.insert(uf.find(i));
            }
        }
        for (i, &s) in sites.iter().enumerate() {
            if graph.point(s)[a] == hi[a] && low_roots.contains(&uf.find(i)) {
                return true;
            }
        }
    }
    false
}

/// Floor division for integers.
pub fn div_floor(a: i64, b: i64) -> i64 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

/// Coarse-graining scale: block side `l`, mesh `delta` and `n_l = ceil(l / delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseScale {
    pub l: i64,
    pub delta: f64,
    pub n_l: i64,
}

impl CoarseScale {
    pub fn new(l: i64, delta: f64) -> Result<Self> {
        if l < 1 {
            return Err(Error::InvalidParameter("block side must be positive".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter("mesh must lie in (0, 1)".into()));
        }
        let n_l = ((l as f64 / delta) - 1e-9).ceil() as i64;
        Ok(Self { l, delta, n_l: n_l.max(l) })
    }

    /// Spatial block index of a fine site: its tile is
    /// `l x + [-floor(l/2), ceil(l/2) - 1]^d`.
    pub fn block_of(&self, p: &[i64]) -> Point {
        p.iter().map(|&c| div_floor(c + self.l / 2, self.l)).collect()
    }

    /// Time index of a non-positive time: the slab `(l (j - 1), l j]`.
    pub fn slab_of(&self, t: f64) -> i64 {
        (t / self.l as f64).ceil() as i64
    }

    pub fn slab(&self, j: i64) -> (f64, f64) {
        ((self.l * (j - 1)) as f64, (self.l * j) as f64)
    }

    pub fn tile_bounds(&self, x: &[i64]) -> (Point, Point) {
        let lo = x.iter().map(|&c| self.l * c - self.l / 2).collect();
        let hi = x.iter().map(|&c| self.l * c - self.l / 2 + self.l - 1).collect();
        (lo, hi)
    }

    pub fn center(&self, x: &[i64]) -> Point {
        x.iter().map(|&c| self.l * c).collect()
    }

    /// Core box `Λ_{n_l}(l x)`.
    pub fn core(&self, x: &[i64]) -> BoxRegion {
        BoxRegion { d: x.len(), n: self.n_l, center: self.center(x) }
    }

    /// Dependence zone `Λ_{2 n_l}(l x)`.
    pub fn zone(&self, x: &[i64]) -> BoxRegion {
        BoxRegion { d: x.len(), n: 2 * self.n_l, center: self.center(x) }
    }

    /// Box `Λ_l(l x)` checked for crossings.
    pub fn crossing_box(&self, x: &[i64]) -> BoxRegion {
        BoxRegion { d: x.len(), n: self.l, center: self.center(x) }
    }

    /// Smallest coarse radius whose external complement cannot reach the
    /// dependence zones of the cells adjacent to a cluster.
    pub fn shielding_radius(&self) -> i64 {
        let need_space = 2 * self.n_l + self.l / 2;
        let need_time = self.l + self.n_l;
        let a = (need_space + self.l - 1) / self.l;
        let b = (need_time + self.l - 1) / self.l;
        a.max(b).max(1)
    }
}

/// A coarse space-time cell `(j, x)` with `j <= 0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoarseCell {
    pub j: i64,
    pub x: Point,
}

/// A finite box of coarse cells: `j in [j_min, 0]`, `x in [x_min, x_max]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseWindow {
    pub j_min: i64,
    pub x_min: Point,
    pub x_max: Point,
}

impl CoarseWindow {
    pub fn new(j_min: i64, x_min: Point, x_max: Point) -> Result<Self> {
        if j_min > 0 {
            return Err(Error::InvalidParameter("time indices must be non-positive".into()));
        }
        if x_min.len() != x_max.len() || x_min.is_empty() {
            return Err(Error::InvalidParameter("window corners disagree in dimension".into()));
        }
        if x_min.iter().zip(&x_max).any(|(a, b)| a > b) {
            return Err(Error::InvalidParameter("empty window".into()));
        }
        Ok(Self { j_min, x_min, x_max })
    }

    /// Window of spatial radius `r` cells around block `x0` and depth `depth` slabs.
    pub fn around(x0: &[i64], r: i64, depth: i64) -> Result<Self> {
        Self::new(
            -depth.max(0),
            x0.iter().map(|c| c - r).collect(),
            x0.iter().map(|c| c + r).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    fn extents(&self) -> Vec<i64> {
        let mut e = vec![1 - self.j_min];
        e.extend(self.x_min.iter().zip(&self.x_max).map(|(a, b)| b - a + 1));
        e
    }

    pub fn len(&self) -> usize {
        self.extents().iter().product::<i64>() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, c: &CoarseCell) -> bool {
        c.j <= 0
            && c.j >= self.j_min
            && c.x.len() == self.dim()
            && c.x
                .iter()
                .enumerate()
                .all(|(a, &v)| v >= self.x_min[a] && v <= self.x_max[a])
    }

    pub fn index(&self, c: &CoarseCell) -> Option<usize> {
        if !self.contains(c) {
            return None;
        }
        let ext = self.extents();
        let mut idx = (c.j - self.j_min) as usize;
        for a in 0..self.dim() {
            idx = idx * ext[a + 1] as usize + (c.x[a] - self.x_min[a]) as usize;
        }
        Some(idx)
    }

    pub fn cell(&self, mut idx: usize) -> CoarseCell {
        let ext = self.extents();
        let d = self.dim();
        let mut x = vec![0; d];
        for a in (0..d).rev() {
            let e = ext[a + 1] as usize;
            x[a] = self.x_min[a] + (idx % e) as i64;
            idx /= e;
        }
        CoarseCell { j: self.j_min + idx as i64, x }
    }

    /// Cells from which a path can leave the window (the top face `j = 0` is excluded).
    pub fn on_outer_face(&self, c: &CoarseCell) -> bool {
        c.j == self.j_min
            || c.x
                .iter()
                .enumerate()
                .any(|(a, &v)| v == self.x_min[a] || v == self.x_max[a])
    }

    /// Indices of the `*`-neighbors (l-infinity adjacency) inside the window.
    pub fn star_neighbors(&self, idx: usize) -> Vec<usize> {
        let c = self.cell(idx);
        let d = self.dim();
        let mut out = Vec::new();
        let total = 3usize.pow(d as u32 + 1);
        for code in 0..total {
            let mut k = code;
            let dj = (k % 3) as i64 - 1;
            k /= 3;
            let mut x = c.x.clone();
            let mut zero = dj == 0;
            for xa in x.iter_mut() {
                let s = (k % 3) as i64 - 1;
                k /= 3;
                *xa += s;
                zero &= s == 0;
            }
            if zero {
                continue;
            }
            if let Some(i) = self.index(&CoarseCell { j: c.j + dj, x }) {
                out.push(i);
            }
        }
        out
    }

    /// Indices of the nearest neighbors inside the window.
    pub fn nn_neighbors(&self, idx: usize) -> Vec<usize> {
        let c = self.cell(idx);
        let mut out = Vec::with_capacity(2 * self.dim() + 2);
        for dj in [-1, 1] {
            if let Some(i) = self.index(&CoarseCell { j: c.j + dj, x: c.x.clone() }) {
                out.push(i);
            }
        }
        for a in 0..self.dim() {
            for s in [-1, 1] {
                let mut x = c.x.clone();
                x[a] += s;
                if let Some(i) = self.index(&CoarseCell { j: c.j, x }) {
                    out.push(i);
                }
            }
        }
        out
    }
}

/// l-infinity distance between coarse cells, in cell units.
pub fn cell_distance(a: &CoarseCell, b: &CoarseCell) -> i64 {
    let mut m = (a.j - b.j).abs();
    for (x, y) in a.x.iter().zip(&b.x) {
        m = m.max((x - y).abs());
    }
    m
}

/// The `*`-connected component of zero cells containing `origin`.
///
/// `is_one(idx)` reports the field value; only cells listed in `candidates`
/// (or all cells, when `None`) are examined. Returns window indices, sorted.
pub fn star_component(
    window: &CoarseWindow,
    origin: &CoarseCell,
    candidates: Option<&[usize]>,
    mut is_one: impl FnMut(usize) -> bool,
) -> Result<Vec<usize>> {
    let o = window.index(origin).ok_or_else(|| Error::OutsideRegion(origin.x.clone()))?;
    if is_one(o) {
        return Ok(Vec::new());
    }
    let zeros: Vec<usize> = match candidates {
        Some(c) => c.iter().copied().filter(|&i| !is_one(i)).collect(),
        None => (0..window.len()).filter(|&i| !is_one(i)).collect(),
    };
    let local: HashMap<usize, usize> = zeros.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut uf = UnionFind::new(zeros.len());
    for (k, &i) in zeros.iter().enumerate() {
        for nb in window.star_neighbors(i) {
            if let Some(&m) = local.get(&nb) {
                uf.union(k, m);
            }
        }
    }
    let ok = *local.get(&o).expect("origin is a zero cell");
    let root = uf.find(ok);
    let mut out: Vec<usize> = zeros
        .iter()
        .enumerate()
        .filter(|&(k, _)| uf.find(k) == root)
        .map(|(_, &i)| i)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// The `*`-connected 0-cluster of `origin` in a fully evaluated field
/// (`theta[idx]` true for value 1).
pub fn star_zero_cluster(window: &CoarseWindow, theta: &[bool], origin: &CoarseCell) -> Result<Vec<usize>> {
    if theta.len() != window.len() {
        return Err(Error::InvalidParameter("field does not match window".into()));
    }
    star_component(window, origin, None, |i| theta[i])
}

/// The `n`-external complement of `cluster` inside `window`.
///
/// Cells at l-infinity distance greater than `n` cells from every cluster cell
/// that are joined to the outer face of the window by a nearest-neighbor path
/// avoiding the cluster. The cluster must stay `margin` cells clear of the
/// outer face. Returns a mask over window indices.
pub fn external_complement(
    window: &CoarseWindow,
    cluster: &[usize],
    n: i64,
    margin: i64,
) -> Result<Vec<bool>> {
    let len = window.len();
    if cluster.is_empty() {
        return Ok(vec![true; len]);
    }
    if n < 1 {
        return Err(Error::InvalidParameter("complement radius must be positive".into()));
    }
    let d = window.dim();
    let cells: Vec<CoarseCell> = cluster.iter().map(|&i| window.cell(i)).collect();
    for c in &cells {
        if window.on_outer_face(c) {
            return Err(Error::ClusterEscapes);
        }
    }
    let jmin = cells.iter().map(|c| c.j).min().unwrap();
    if jmin - margin < window.j_min {
        return Err(Error::WindowTooSmall);
    }
    for a in 0..d {
        let lo = cells.iter().map(|c| c.x[a]).min().unwrap();
        let hi = cells.iter().map(|c| c.x[a]).max().unwrap();
        if lo - margin < window.x_min[a] || hi + margin > window.x_max[a] {
            return Err(Error::WindowTooSmall);
        }
    }

    let mut in_cluster = vec![false; len];
    for &i in cluster {
        in_cluster[i] = true;
    }
    let mut near = vec![false; len];
    for c in &cells {
        let lo: Point = c.x.iter().map(|v| v - n).collect();
        let hi: Point = c.x.iter().map(|v| v + n).collect();
        for j in (c.j - n)..=(c.j + n).min(0) {
            for x in cuboid_points(&lo, &hi) {
                if let Some(i) = window.index(&CoarseCell { j, x }) {
                    near[i] = true;
                }
            }
        }
    }

    let mut uf = UnionFind::new(len + 1);
    let outside = len;
    for i in 0..len {
        if in_cluster[i] {
            continue;
        }
        let c = window.cell(i);
        if window.on_outer_face(&c) {
            uf.union(i, outside);
        }
        for nb in window.nn_neighbors(i) {
            if nb > i && !in_cluster[nb] {
                uf.union(i, nb);
            }
        }
    }
    let root = uf.find(outside);
    Ok((0..len)
        .map(|i| !in_cluster[i] && !near[i] && uf.find(i) == root)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_examples() {
        let b = BoxRegion::centered(2, 1).unwrap();
        assert_eq!(b.points(), vec![vec![0, 0]]);
        let b = BoxRegion::centered(2, 2).unwrap();
        let pts = b.points();
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().all(|p| p.iter().all(|c| c.abs() <= 1)));
        assert_eq!(BoxRegion::centered(3, 4).unwrap().points().len(), 343);
        assert!(BoxRegion::centered(0, 2).is_err());
        assert!(BoxRegion::centered(2, 0).is_err());
    }

    #[test]
    fn box_count_matches_brute_force() {
        for d in 1..=3 {
            for n in 1..=4i64 {
                let b = BoxRegion::centered(d, n).unwrap();
                let mut count = 0;
                let r = n + 2;
                for p in cuboid_points(&vec![-r; d], &vec![r; d]) {
                    if p.iter().all(|&c| -n < c && c < n) {
                        count += 1;
                    }
                }
                assert_eq!(b.len(), count);
                assert_eq!(b.points().len(), count);
            }
        }
    }

    #[test]
    fn graph_neighbors_and_edges() {
        let g = SiteGraph::from_box(&BoxRegion::centered(2, 2).unwrap());
        assert_eq!(g.len(), 9);
        assert_eq!(g.boundary_len(), 12);
        // 12 interior edges plus 12 boundary edges
        assert_eq!(g.edge_count(), 24);
        let c = g.index_of(&[0, 0]).unwrap();
        assert_eq!(g.boundary_degree(c), 0);
        let corner = g.index_of(&[-1, -1]).unwrap();
        assert_eq!(g.boundary_degree(corner), 2);
        for u in 0..g.len() {
            for dir in 0..4 {
                if let Site::Interior(v) = g.neighbor(u, dir) {
                    assert_eq!(g.neighbor(v, opposite(dir)), Site::Interior(u));
                    assert_eq!(g.edge_at(u, dir), g.edge_at(v, opposite(dir)));
                }
            }
        }
    }

    #[test]
    fn free_graph_has_no_boundary() {
        let g = SiteGraph::from_points(1, vec![vec![0], vec![1]], Exterior::Free).unwrap();
        assert_eq!(g.boundary_len(), 0);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn cluster_examples() {
        let g = SiteGraph::from_box(&BoxRegion::centered(2, 2).unwrap());
        let closed = vec![false; g.edge_count()];
        assert_eq!(fine_clusters(&g, &closed, false).unwrap().count(), 9);
        let open = vec![true; g.edge_count()];
        let p = fine_clusters(&g, &open, false).unwrap();
        assert_eq!(p.count(), 1);
        assert_eq!(p.sizes, vec![9]);
        let mut one = closed.clone();
        let e = g.edges().iter().position(|e| matches!(e.b, Site::Interior(_))).unwrap();
        one[e] = true;
        let p = fine_clusters(&g, &one, false).unwrap();
        assert_eq!(p.count(), 8);
        let mut sizes = p.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 1, 1, 1, 1, 1, 2]);
        assert!(fine_clusters(&g, &[true], false).is_err());
    }

    #[test]
    fn wired_boundary_joins_clusters() {
        let g = SiteGraph::from_box(&BoxRegion::centered(1, 3).unwrap());
        // sites -2..2, boundary at -3 and 3
        let mut open = vec![false; g.edge_count()];
        for (e, edge) in g.edges().iter().enumerate() {
            if matches!(edge.b, Site::Boundary(_)) {
                open[e] = true;
            }
        }
        let p = fine_clusters(&g, &open, true).unwrap();
        let a = g.index_of(&[-2]).unwrap();
        let b = g.index_of(&[2]).unwrap();
        assert_eq!(p.labels[a], p.labels[b]);
        assert_eq!(Some(p.labels[a]), p.boundary_label);
        let q = fine_clusters(&g, &open, false).unwrap();
        assert_ne!(q.labels[a], q.labels[b]);
    }

    #[test]
    fn coarse_scale_geometry() {
        let s = CoarseScale::new(4, 0.5).unwrap();
        assert_eq!(s.n_l, 8);
        assert_eq!(s.block_of(&[-2, 1]), vec![0, 0]);
        assert_eq!(s.block_of(&[2, -3]), vec![1, -1]);
        assert_eq!(s.slab_of(0.0), 0);
        assert_eq!(s.slab_of(-0.5), 0);
        assert_eq!(s.slab_of(-4.0), -1);
        assert_eq!(s.slab_of(-4.1), -1);
        assert_eq!(s.slab_of(-8.0), -2);
        let (lo, hi) = s.tile_bounds(&[0]);
        assert_eq!((lo, hi), (vec![-2], vec![1]));
        let s = CoarseScale::new(6, 0.4).unwrap();
        assert_eq!(s.n_l, 15);
        assert!(CoarseScale::new(0, 0.5).is_err());
        assert!(CoarseScale::new(3, 1.0).is_err());
    }

    #[test]
    fn window_indexing_round_trips() {
        let w = CoarseWindow::new(-3, vec![-2, 1], vec![1, 3]).unwrap();
        assert_eq!(w.len(), 4 * 4 * 3);
        for i in 0..w.len() {
            assert_eq!(w.index(&w.cell(i)), Some(i));
        }
        let o = w.index(&CoarseCell { j: -1, x: vec![0, 2] }).unwrap();
        assert_eq!(w.star_neighbors(o).len(), 26);
        assert_eq!(w.nn_neighbors(o).len(), 6);
        let top = w.index(&CoarseCell { j: 0, x: vec![0, 2] }).unwrap();
        assert_eq!(w.star_neighbors(top).len(), 17);
    }

    #[test]
    fn star_cluster_examples() {
        let w = CoarseWindow::around(&[0, 0], 2, 4).unwrap();
        let origin = CoarseCell { j: -2, x: vec![0, 0] };
        let ones = vec![true; w.len()];
        assert!(star_zero_cluster(&w, &ones, &origin).unwrap().is_empty());
        let mut f = ones.clone();
        let o = w.index(&origin).unwrap();
        f[o] = false;
        assert_eq!(star_zero_cluster(&w, &f, &origin).unwrap(), vec![o]);
        // diagonal neighbor joins under *-adjacency
        let diag = w.index(&CoarseCell { j: -1, x: vec![1, 1] }).unwrap();
        f[diag] = false;
        assert_eq!(star_zero_cluster(&w, &f, &origin).unwrap().len(), 2);
        let outside = CoarseCell { j: -9, x: vec![0, 0] };
        assert!(star_zero_cluster(&w, &f, &outside).is_err());
    }

    #[test]
    fn external_complement_examples() {
        let w = CoarseWindow::around(&[0], 6, 12).unwrap();
        assert!(external_complement(&w, &[], 1, 3).unwrap().iter().all(|&b| b));
        let o = w.index(&CoarseCell { j: -6, x: vec![0] }).unwrap();
        let ext = external_complement(&w, &[o], 1, 3).unwrap();
        for i in 0..w.len() {
            let c = w.cell(i);
            let far = cell_distance(&c, &w.cell(o)) > 1;
            assert_eq!(ext[i], far, "cell {c:?}");
        }
        let all: Vec<usize> = (0..w.len()).collect();
        assert!(external_complement(&w, &all, 1, 0).is_err());
        let small = CoarseWindow::around(&[0], 1, 2).unwrap();
        let c = small.index(&CoarseCell { j: -1, x: vec![0] }).unwrap();
        assert!(matches!(external_complement(&small, &[c], 1, 3), Err(Error::WindowTooSmall)));
    }

    #[test]
    fn enclosed_cells_are_not_external() {
        // a ring cluster around the origin column in d = 1 (a 2-d space-time
        // picture); the enclosed cell is far but cannot reach the outer face.
        let w = CoarseWindow::around(&[0], 8, 16).unwrap();
        let mut ring = Vec::new();
        for j in -12..=0 {
            for x in [-4i64, 4] {
                ring.push(w.index(&CoarseCell { j, x: vec![x] }).unwrap());
            }
        }
        for x in -4..=4 {
            ring.push(w.index(&CoarseCell { j: -12, x: vec![x] }).unwrap());
        }
        ring.sort();
        ring.dedup();
        let ext = external_complement(&w, &ring, 1, 2).unwrap();
        let inside = w.index(&CoarseCell { j: -6, x: vec![0] }).unwrap();
        assert!(!ext[inside]);
        let outside = w.index(&CoarseCell { j: -6, x: vec![7] }).unwrap();
        assert!(ext[outside]);
    }

    #[test]
    fn crossing_detection() {
        let g = SiteGraph::from_box(&BoxRegion::centered(2, 4).unwrap());
        let b = BoxRegion::centered(2, 3).unwrap();
        let mut open = vec![false; g.edge_count()];
        assert!(!has_crossing(&g, &open, &b));
        for x in -2..2 {
            let u = g.index_of(&[x, 0]).unwrap();
            open[g.edge_at(u, 1).unwrap()] = true;
        }
        assert!(has_crossing(&g, &open, &b));
    }

    #[test]
    fn div_floor_matches_float_floor() {
        for a in -20..20 {
            for b in [1, 2, 3, 7] {
                assert_eq!(div_floor(a, b), (a as f64 / b as f64).floor() as i64);
            }
        }
    }
}
