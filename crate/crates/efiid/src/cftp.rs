//! Event-driven composition of Glauber updates, sandwich runs from extremal
//! states, coalescence detection and coupling from the past.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Point, Site, SiteGraph};
use crate::randomness::{event_stream, splitmix64, EventSource, PoissonField, UpdateEvent, UpdateRandomness};

/// Default horizon for coupling from the past.
pub const DEFAULT_T_MAX: f64 = (1u64 << 20) as f64;

/// A monotone single-site dynamics on a finite graph.
pub trait Dynamics {
    type State: Clone + Send;
    type Scratch: Default;

    fn graph(&self) -> &SiteGraph;

    /// The maximal state, with the maximal boundary when the boundary is extremal.
    fn maximal(&self) -> Self::State;

    fn minimal(&self) -> Self::State;

    /// Resamples `site` in place; returns whether the matching branch was taken.
    fn update(&self, state: &mut Self::State, site: usize, iota: &UpdateRandomness, scratch: &mut Self::Scratch) -> Result<bool>;

    /// True when an update at `site` is guaranteed to act identically on both states.
    fn same_inputs(&self, _a: &Self::State, _b: &Self::State, _site: usize) -> bool {
        false
    }

    /// Copies everything an update at `site` writes.
    fn copy_site(&self, _from: &Self::State, _to: &mut Self::State, _site: usize) {}

    /// Order between the parts of the states written by an update at `site`.
    fn ordered_at(&self, lower: &Self::State, upper: &Self::State, site: usize) -> bool;

    fn ordered(&self, lower: &Self::State, upper: &Self::State) -> bool {
        (0..self.graph().len()).all(|s| self.ordered_at(lower, upper, s))
    }

    fn coalesced_at(&self, a: &Self::State, b: &Self::State, site: usize) -> bool;

    /// Equality of the leading digits at `site`.
    fn truncated_equal_at(&self, a: &Self::State, b: &Self::State, site: usize) -> bool;

    /// Bit-exact description of the state at `site`.
    fn site_key(&self, s: &Self::State, site: usize) -> Vec<u64>;

    fn site_values(&self, s: &Self::State, site: usize) -> Vec<f64>;

    /// Sites whose coalescence status can change after an update at `site`.
    fn touched(&self, site: usize) -> Vec<usize> {
        vec![site]
    }
}

/// Sites touched by an update at `site` when incident edges belong to the state.
pub fn site_and_neighbors(graph: &SiteGraph, site: usize) -> Vec<usize> {
    let mut v = vec![site];
    v.extend(graph.neighbors(site).iter().filter_map(|s| match s {
        Site::Interior(w) => Some(*w),
        _ => None,
    }));
    v
}

/// Folds `events` through the dynamics.
pub fn apply_events<D: Dynamics>(dynamics: &D, mut state: D::State, events: &[UpdateEvent]) -> Result<D::State> {
    let mut scratch = D::Scratch::default();
    for e in events {
        dynamics.update(&mut state, e.site, &e.iota, &mut scratch)?;
    }
    Ok(state)
}

/// Runs the dynamics from `initial` through all arrivals in `[t_start, t_end]`.
pub fn apply_window<D: Dynamics>(
    dynamics: &D,
    initial: D::State,
    t_start: f64,
    t_end: f64,
    source: &dyn EventSource,
) -> Result<D::State> {
    let events = event_stream(dynamics.graph(), t_start, t_end, source)?;
    apply_events(dynamics, initial, &events)
}

/// What an observer sees after each event of a sandwich run.
pub struct EventView<'a, S> {
    pub index: usize,
    pub time: f64,
    pub site: usize,
    pub matched: bool,
    pub top: &'a S,
    pub bottom: &'a S,
}

/// Top and bottom trajectories after a sandwich run.
#[derive(Debug, Clone)]
pub struct SandwichPair<S> {
    pub top: S,
    pub bottom: S,
    pub events: usize,
}

/// Evolves `top` and `bottom` under the same events, asserting the order
/// after every event.
pub fn sandwich_from<D: Dynamics>(
    dynamics: &D,
    top: D::State,
    bottom: D::State,
    events: &[UpdateEvent],
    mut observe: impl FnMut(&EventView<D::State>),
) -> Result<SandwichPair<D::State>> {
    sandwich_while(dynamics, top, bottom, events, |v| {
        observe(v);
        true
    })
}

/// Like [`sandwich_from`], but stops after the first event for which
/// `observe` returns `false`; `events` then counts the events applied.
pub fn sandwich_while<D: Dynamics>(
    dynamics: &D,
    mut top: D::State,
    mut bottom: D::State,
    events: &[UpdateEvent],
    mut observe: impl FnMut(&EventView<D::State>) -> bool,
) -> Result<SandwichPair<D::State>> {
    let mut scratch = D::Scratch::default();
    for (index, e) in events.iter().enumerate() {
        let matched = if dynamics.same_inputs(&top, &bottom, e.site) {
            let m = dynamics.update(&mut top, e.site, &e.iota, &mut scratch)?;
            dynamics.copy_site(&top, &mut bottom, e.site);
            m
        } else {
            let m = dynamics.update(&mut top, e.site, &e.iota, &mut scratch)?;
            dynamics.update(&mut bottom, e.site, &e.iota, &mut scratch)?;
            m
        };
        if !dynamics.ordered_at(&bottom, &top, e.site) {
            return Err(Error::OrderViolation { site: e.site, time: e.time });
        }
        if !observe(&EventView { index, time: e.time, site: e.site, matched, top: &top, bottom: &bottom }) {
            return Ok(SandwichPair { top, bottom, events: index + 1 });
        }
    }
    Ok(SandwichPair { top, bottom, events: events.len() })
}

/// Sandwich run from the maximal and minimal states.
pub fn sandwich_run<D: Dynamics>(
    dynamics: &D,
    events: &[UpdateEvent],
    observe: impl FnMut(&EventView<D::State>),
) -> Result<SandwichPair<D::State>> {
    sandwich_from(dynamics, dynamics.maximal(), dynamics.minimal(), events, observe)
}

/// Options for coupling from the past.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CftpOptions {
    /// First window length; doubled until coalescence.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for CftpOptions {
    fn default() -> Self {
        Self { t_min: 1.0, t_max: DEFAULT_T_MAX }
    }
}

/// A coalesced sample.
#[derive(Debug, Clone)]
pub struct CftpResult<S> {
    /// State at time 0 of the top trajectory; equals the bottom on the target.
    pub state: S,
    /// Length of the window that coalesced.
    pub window: f64,
    pub target: Vec<usize>,
    /// For each target site, the time of the event after which the two
    /// trajectories agreed there up to time 0.
    pub coalesced_since: Vec<f64>,
    pub attempts: u32,
    pub events: usize,
}

/// Outcome of coupling from the past; a timeout is never a sample.
#[derive(Debug, Clone)]
pub enum CftpOutcome<S> {
    Coalesced(CftpResult<S>),
    Timeout { t_max: f64, attempts: u32 },
}

impl<S> CftpOutcome<S> {
    pub fn into_result(self) -> Result<CftpResult<S>> {
        match self {
            CftpOutcome::Coalesced(r) => Ok(r),
            CftpOutcome::Timeout { t_max, .. } => Err(Error::Timeout(t_max)),
        }
    }
}

/// Serializable view of a coalesced sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CftpReport {
    pub window: f64,
    pub attempts: u32,
    pub target: Vec<Point>,
    pub values: Vec<Vec<f64>>,
    pub keys: Vec<Vec<u64>>,
    pub coalesced_since: Vec<f64>,
}

impl<S> CftpResult<S> {
    pub fn report<D: Dynamics<State = S>>(&self, dynamics: &D) -> CftpReport {
        CftpReport {
            window: self.window,
            attempts: self.attempts,
            target: self.target.iter().map(|&s| dynamics.graph().point(s).clone()).collect(),
            values: self.target.iter().map(|&s| dynamics.site_values(&self.state, s)).collect(),
            keys: self.target.iter().map(|&s| dynamics.site_key(&self.state, s)).collect(),
            coalesced_since: self.coalesced_since.clone(),
        }
    }
}

/// Coupling from the past with windows `t_min * 2^j` on a fixed event source.
pub fn cftp_sample<D: Dynamics>(
    dynamics: &D,
    target: &[usize],
    source: &dyn EventSource,
    options: CftpOptions,
) -> Result<CftpOutcome<D::State>> {
    if target.iter().any(|&s| s >= dynamics.graph().len()) {
        return Err(Error::InvalidParameter("target site outside region".into()));
    }
    if !(options.t_min > 0.0) || options.t_max < options.t_min {
        return Err(Error::InvalidParameter("need 0 < t_min <= t_max".into()));
    }
    let mut t = options.t_min;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let events = event_stream(dynamics.graph(), -t, 0.0, source)?;
        let mut since = vec![f64::NAN; target.len()];
        let mut is_target = vec![usize::MAX; dynamics.graph().len()];
        for (i, &s) in target.iter().enumerate() {
            is_target[s] = i;
        }
        let pair = sandwich_run(dynamics, &events, |v| {
            for w in dynamics.touched(v.site) {
                let i = is_target[w];
                if i != usize::MAX {
                    let c = dynamics.coalesced_at(v.top, v.bottom, w);
                    if !c {
                        since[i] = f64::NAN;
                    } else if since[i].is_nan() {
                        since[i] = v.time;
                    }
                }
            }
        })?;
        if target.iter().all(|&s| dynamics.coalesced_at(&pair.top, &pair.bottom, s)) {
            return Ok(CftpOutcome::Coalesced(CftpResult {
                state: pair.top,
                window: t,
                target: target.to_vec(),
                coalesced_since: since,
                attempts,
                events: events.len(),
            }));
        }
        if t * 2.0 > options.t_max {
            return Ok(CftpOutcome::Timeout { t_max: options.t_max, attempts });
        }
        t *= 2.0;
    }
}

/// Seed of replica `r` in a family keyed by `base`.
pub fn replica_seed(base: u64, r: u64) -> u64 {
    splitmix64(base ^ splitmix64(r.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// A Monte Carlo proportion with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub p: f64,
    pub se: f64,
    pub replicas: usize,
}

impl Estimate {
    pub fn from_hits(hits: usize, n: usize) -> Self {
        let p = if n == 0 { f64::NAN } else { hits as f64 / n as f64 };
        let se = if n == 0 { f64::NAN } else { (p * (1.0 - p) / n as f64).sqrt() };
        Self { p, se, replicas: n }
    }
}

/// Outcome of one coupling trial at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingTrial {
    /// Extremal runs differ at the origin at the end of the window.
    pub nc: bool,
    /// Their leading digits differ at the end of the window.
    pub nc_truncated: bool,
    /// They differ at some time in `[watch_from, end]`.
    pub nc_any: bool,
}

/// One run of the extremal dynamics over arrivals in `[-t, -s]`, watching `origin`.
pub fn coupling_trial<D: Dynamics>(
    dynamics: &D,
    origin: usize,
    source: &dyn EventSource,
    t: f64,
    s: f64,
    watch_from: Option<f64>,
) -> Result<CouplingTrial> {
    if !(0.0..=t).contains(&s) {
        return Err(Error::InvalidParameter("need 0 <= s <= t".into()));
    }
    let events = event_stream(dynamics.graph(), -t, -s, source)?;
    let watch = watch_from.unwrap_or(-s);
    let top0 = dynamics.maximal();
    let bot0 = dynamics.minimal();
    let mut differ_now = !dynamics.coalesced_at(&top0, &bot0, origin);
    let mut any = false;
    let mut checked_start = false;
    let pair = sandwich_from(dynamics, top0, bot0, &events, |v| {
        if !checked_start && v.time >= watch {
            any |= differ_now;
            checked_start = true;
        }
        if dynamics.touched(v.site).contains(&origin) {
            differ_now = !dynamics.coalesced_at(v.top, v.bottom, origin);
        }
        if v.time >= watch {
            any |= differ_now;
        }
    })?;
    if !checked_start {
        any |= differ_now;
    }
    Ok(CouplingTrial {
        nc: !dynamics.coalesced_at(&pair.top, &pair.bottom, origin),
        nc_truncated: !dynamics.truncated_equal_at(&pair.top, &pair.bottom, origin),
        nc_any: any,
    })
}

/// Monte Carlo estimates of `P[NC(n, t, s)]` and its digit-truncated version
/// on `Λ_n` with extremal boundary, over independent event fields.
pub fn coupling_probability<D, B>(
    build: B,
    d: usize,
    n: i64,
    t: f64,
    s: f64,
    replicas: usize,
    seed_base: u64,
) -> Result<(Estimate, Estimate)>
where
    D: Dynamics,
    B: Fn(Arc<SiteGraph>) -> Result<D> + Sync,
{
    let region = crate::lattice::BoxRegion::centered(d, n)?;
    let graph = Arc::new(SiteGraph::from_box(&region));
    let origin = graph.index_of(&vec![0; d]).expect("origin in box");
    let trials: Vec<Result<CouplingTrial>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let dynamics = build(graph.clone())?;
            let field = PoissonField::new(replica_seed(seed_base, r));
            coupling_trial(&dynamics, origin, &field, t, s, None)
        })
        .collect();
    let mut nc = 0;
    let mut nct = 0;
    for tr in trials {
        let tr = tr?;
        nc += usize::from(tr.nc);
        nct += usize::from(tr.nc_truncated);
    }
    Ok((Estimate::from_hits(nc, replicas), Estimate::from_hits(nct, replicas)))
}
