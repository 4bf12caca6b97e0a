//! Matching trees: the space-time set of updates on which the fine digits of
//! the spin at the origin at time 0 depend.
//!
//! Starting from the last update of the origin before time 0, a matched update
//! is a leaf. An unmatched one depends on the current values of its
//! neighbours, so the last update before it at each neighbour becomes a child.
//! For XY the children also cover the omega- and eta-clusters of the
//! neighbours, read off a forward run from the maximal state.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cftp::Dynamics;
use crate::error::{Error, Result};
use crate::lattice::{BoxRegion, Site, SiteGraph};
use crate::model::{ModelKind, ModelSpec};
use crate::randomness::{event_stream, EventSource, UpdateEvent};
use crate::xy::XyBoundary;

/// Summary of one matching tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingTree {
    /// Distinct updates in the tree.
    pub size: usize,
    /// Matched updates.
    pub leaves: usize,
    /// Largest sup-norm distance of a tree site from the origin.
    pub radius: i64,
    /// Largest age of a tree update, rounded up.
    pub depth: i64,
    /// The tree needed a site outside the box or an update before the window.
    pub censored: bool,
}

impl MatchingTree {
    /// Whether the tree stays inside `Λ_r x (-r, 0]` without censoring.
    pub fn contained_in(&self, r: i64) -> bool {
        !self.censored && self.radius < r && self.depth <= r
    }
}

struct Children {
    sites: Vec<usize>,
    escapes: bool,
}

fn swm_children(graph: &SiteGraph, u: usize) -> Children {
    let mut sites = Vec::new();
    let mut escapes = false;
    for &s in graph.neighbors(u) {
        match s {
            Site::Interior(v) => sites.push(v),
            _ => escapes = true,
        }
    }
    Children { sites, escapes }
}

/// Children of every event for XY: the almost-Markov support in the state
/// just before the event, along a forward run from the maximal state.
fn xy_children(spec: &ModelSpec, graph: &Arc<SiteGraph>, events: &[UpdateEvent], needed: &dyn Fn(usize) -> bool) -> Result<Vec<Option<Children>>> {
    let dynamics = spec.xy(graph.clone(), XyBoundary::Plus)?;
    let mut state = dynamics.maximal();
    let mut scratch = Default::default();
    let mut out = Vec::with_capacity(events.len());
    for (i, e) in events.iter().enumerate() {
        if needed(i) {
            let support = dynamics.almost_markov_support(&state, e.site);
            let escapes = !support.boundary_sites.is_empty() || support.touches_wired_boundary;
            out.push(Some(Children { sites: support.sites, escapes }));
        } else {
            out.push(None);
        }
        dynamics.update(&mut state, e.site, &e.iota, &mut scratch)?;
    }
    Ok(out)
}

/// Builds the matching tree of the origin of `Λ_n` over arrivals in `[-horizon, 0]`.
pub fn matching_tree(spec: &ModelSpec, n: i64, horizon: f64, source: &dyn EventSource) -> Result<MatchingTree> {
    spec.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    let region = BoxRegion::centered(spec.d, n)?;
    let graph = Arc::new(SiteGraph::from_box(&region));
    let origin = graph.index_of(&region.center).expect("center lies in its box");
    let events = event_stream(&graph, -horizon, 0.0, source)?;
    let mut per_site: Vec<Vec<usize>> = vec![Vec::new(); graph.len()];
    for (i, e) in events.iter().enumerate() {
        per_site[e.site].push(i);
    }
    // last event at `site` strictly before event index `before`
    let latest = |site: usize, before: usize| -> Option<usize> {
        let list = &per_site[site];
        let k = list.partition_point(|&i| i < before);
        k.checked_sub(1).map(|k| list[k])
    };

    let mut tree = MatchingTree { size: 0, leaves: 0, radius: 0, depth: 0, censored: false };
    let Some(root) = latest(origin, events.len()) else {
        tree.censored = true;
        return Ok(tree);
    };

    // unmatched events are the only ones whose children matter
    let xy = match spec.kind {
        ModelKind::Swm => None,
        ModelKind::Xy => {
            let eps = spec.eps;
            Some(xy_children(spec, &graph, &events, &|i| !events[i].iota.matched(eps))?)
        }
    };

    let mut seen = HashSet::from([root]);
    let mut stack = vec![root];
    let mut swm_cache: HashMap<usize, Children> = HashMap::new();
    while let Some(i) = stack.pop() {
        let e = &events[i];
        tree.size += 1;
        let p = graph.point(e.site);
        tree.radius = tree.radius.max(p.iter().zip(&region.center).map(|(a, c)| (a - c).abs()).max().unwrap_or(0));
        tree.depth = tree.depth.max((-e.time).ceil() as i64);
        if e.iota.matched(spec.eps) {
            tree.leaves += 1;
            continue;
        }
        let children = match &xy {
            Some(all) => all[i].as_ref().expect("computed for unmatched events"),
            None => swm_cache.entry(e.site).or_insert_with(|| swm_children(&graph, e.site)),
        };
        tree.censored |= children.escapes;
        for &w in &children.sites {
            match latest(w, i) {
                Some(j) => {
                    if seen.insert(j) {
                        stack.push(j);
                    }
                }
                None => tree.censored = true,
            }
        }
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::PoissonField;

    #[test]
    fn zero_eps_gives_single_leaves() {
        for kind in [ModelKind::Swm, ModelKind::Xy] {
            let spec = ModelSpec { kind, d: 2, beta: 0.5, eps: 0.0, k: 1 };
            for seed in 0..20 {
                let t = matching_tree(&spec, 4, 8.0, &PoissonField::new(seed)).unwrap();
                assert_eq!((t.size, t.leaves, t.radius), (1, 1, 0));
                assert!(!t.censored);
            }
        }
    }

    #[test]
    fn unmatched_updates_branch() {
        let spec = ModelSpec { kind: ModelKind::Swm, d: 2, beta: 0.5, eps: 0.6, k: 1 };
        let mut grew = false;
        for seed in 0..20 {
            let t = matching_tree(&spec, 3, 4.0, &PoissonField::new(seed)).unwrap();
            assert!(t.leaves <= t.size);
            grew |= t.size > 1;
        }
        assert!(grew);
    }
}
