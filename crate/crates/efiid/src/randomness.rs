//! Seed-keyed space-time Poisson update streams, base-10 digit arithmetic,
//! and the inverse-CDF and digit-matching grand couplings.

use std::cmp::Ordering;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SiteGraph;

/// Largest supported digit depth.
pub const MAX_DIGITS: u32 = 15;

/// Bisection tolerance for inverse CDFs.
pub const INVERSE_TOL: f64 = 1e-14;

/// Spacing of the grid that conditional-law parameters are rounded down to.
pub const PARAM_QUANTUM: f64 = 1.0 / (1u64 << 32) as f64;

/// Rounds a law parameter down to a multiple of [`PARAM_QUANTUM`].
///
/// Floor is monotone, so ordered inputs keep ordered laws; inputs closer than
/// the quantum share a bit-identical law, and distinct quantized laws differ
/// by far more than the floating-point noise of CDF evaluation.
pub fn quantize_parameter(x: f64) -> f64 {
    (x / PARAM_QUANTUM).floor() * PARAM_QUANTUM
}

const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Randomness attached to one update event.
///
/// `u_match` realizes the matching bit: `b_match = 1` iff `u_match < eps`, so
/// the same stream serves every `eps`. `aux` seeds per-edge uniforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRandomness {
    pub u_primary: f64,
    pub u_refine: f64,
    pub u_match: f64,
    pub aux: u64,
}

impl UpdateRandomness {
    /// The Bernoulli(eps) bit; 0 is the matching branch.
    pub fn b_match(&self, eps: f64) -> u8 {
        u8::from(self.u_match < eps)
    }

    pub fn matched(&self, eps: f64) -> bool {
        self.b_match(eps) == 0
    }

    /// The `i`-th auxiliary uniform in (0, 1).
    pub fn aux_uniform(&self, i: u64) -> f64 {
        open_unit(splitmix64(self.aux ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }
}

/// One Poisson arrival at an interior site of a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateEvent {
    pub site: usize,
    pub time: f64,
    pub iota: UpdateRandomness,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform in the open interval (0, 1).
#[inline]
pub fn open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in [0, 1).
#[inline]
pub fn half_open_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Packs a lattice point (up to 4 coordinates in `[-2^15, 2^15)`) into a stream id.
pub fn vertex_key(p: &[i64]) -> u64 {
    assert!(p.len() <= 4, "at most 4 dimensions are keyed");
    let mut key = 0u64;
    for (a, &c) in p.iter().enumerate() {
        assert!((-(1 << 15)..(1 << 15)).contains(&c), "coordinate {c} out of key range");
        key |= ((c + (1 << 15)) as u64) << (16 * a);
    }
    key
}

/// A source of per-vertex update arrivals.
pub trait EventSource: Sync {
    /// Arrivals at `p` with time in `[t_start, t_end]`, in increasing time.
    fn vertex_events(&self, p: &[i64], t_start: f64, t_end: f64, out: &mut Vec<(f64, UpdateRandomness)>);
}

/// Unit-rate Poisson clocks at every vertex of Z^d, keyed by a master seed.
///
/// Arrivals at a vertex are generated backward from time 0: the `c`-th arrival
/// uses block `c` of the vertex's ChaCha stream, so any window is the exact
/// restriction of any larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoissonField {
    pub seed: u64,
}

impl PoissonField {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, p: &[i64]) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut s = self.seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(vertex_key(p));
        rng
    }
}

impl EventSource for PoissonField {
    fn vertex_events(&self, p: &[i64], t_start: f64, t_end: f64, out: &mut Vec<(f64, UpdateRandomness)>) {
        if t_start > t_end {
            return;
        }
        let mut rng = self.rng(p);
        let mut t = 0.0f64;
        let start = out.len();
        loop {
            let gap = -open_unit(rng.next_u64()).ln();
            let iota = draw_iota(&mut rng);
            t -= gap;
            if t < t_start {
                break;
            }
            if t <= t_end {
                out.push((t, iota));
            }
        }
        out[start..].reverse();
    }
}

fn draw_iota(rng: &mut ChaCha8Rng) -> UpdateRandomness {
    let iota = UpdateRandomness {
        u_primary: open_unit(rng.next_u64()),
        u_refine: open_unit(rng.next_u64()),
        u_match: half_open_unit(rng.next_u64()),
        aux: rng.next_u64(),
    };
    // rest of the 64-byte block is reserved
    for _ in 0..3 {
        rng.next_u64();
    }
    iota
}

/// Independent update randomness without arrival times, for checks of a
/// single update.
pub struct IotaStream {
    rng: ChaCha8Rng,
}

impl IotaStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// A uniform in `(0, 1)` from the same stream.
    pub fn uniform(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }
}

impl Iterator for IotaStream {
    type Item = UpdateRandomness;

    fn next(&mut self) -> Option<UpdateRandomness> {
        Some(draw_iota(&mut self.rng))
    }
}

/// A source equal to `base` except on a space-time region, where the events
/// come from `alt` instead.
pub struct Resampled<'a> {
    pub base: &'a dyn EventSource,
    pub alt: &'a dyn EventSource,
    pub region: &'a (dyn Fn(&[i64], f64) -> bool + Sync),
}

impl EventSource for Resampled<'_> {
    fn vertex_events(&self, p: &[i64], t_start: f64, t_end: f64, out: &mut Vec<(f64, UpdateRandomness)>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.base.vertex_events(p, t_start, t_end, &mut a);
        self.alt.vertex_events(p, t_start, t_end, &mut b);
        let mut merged: Vec<(f64, UpdateRandomness)> = a
            .into_iter()
            .filter(|(t, _)| !(self.region)(p, *t))
            .chain(b.into_iter().filter(|(t, _)| (self.region)(p, *t)))
            .collect();
        merged.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal));
        out.extend(merged);
    }
}

/// All arrivals at interior sites of `graph` in `[t_start, t_end]`, sorted by time.
pub fn event_stream(graph: &SiteGraph, t_start: f64, t_end: f64, source: &dyn EventSource) -> Result<Vec<UpdateEvent>> {
    if t_end > 0.0 || t_start > t_end || !t_start.is_finite() {
        return Err(Error::InvalidParameter(format!("bad window [{t_start}, {t_end}]")));
    }
    if t_start == t_end {
        return Ok(Vec::new());
    }
    let mut events = Vec::with_capacity((graph.len() as f64 * (t_end - t_start) * 1.1) as usize + 8);
    let mut buf = Vec::new();
    for (site, p) in graph.points().iter().enumerate() {
        buf.clear();
        source.vertex_events(p, t_start, t_end, &mut buf);
        events.extend(buf.iter().map(|&(time, iota)| UpdateEvent { site, time, iota }));
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(Ordering::Equal).then(a.site.cmp(&b.site)));
    Ok(events)
}

/// `10^k` as an integer.
pub fn pow10(k: u32) -> Result<i64> {
    if k > MAX_DIGITS {
        return Err(Error::DigitOverflow(k));
    }
    Ok(10i64.pow(k))
}

/// Splits `x` into `floor_k(x) = 10^-k floor(10^k x)` and the remainder in `[0, 10^-k)`.
pub fn digit_split(x: f64, k: u32) -> Result<(f64, f64)> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter("non-finite value".into()));
    }
    let scale = pow10(k)?;
    let sf = scale as f64;
    if (x * sf).abs() >= (1u64 << 52) as f64 {
        return Err(Error::DigitOverflow(k));
    }
    let mut c = (x * sf).floor() as i64;
    while c as f64 / sf > x {
        c -= 1;
    }
    while (c + 1) as f64 / sf <= x {
        c += 1;
    }
    let floor = c as f64 / sf;
    Ok((floor, x - floor))
}

/// A value stored exactly as a digit cell plus an offset inside it:
/// `scale * (cell + offset) / 10^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub cell: i64,
    /// In `[0, 1)`.
    pub offset: f64,
}

impl CellValue {
    pub fn new(cell: i64, offset: f64) -> Self {
        Self { cell, offset }
    }

    /// Bit-level key for exact comparisons across runs.
    pub fn key(&self) -> (i64, u64) {
        (self.cell, self.offset.to_bits())
    }
}

impl PartialOrd for CellValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.cell.cmp(&other.cell) {
            Ordering::Equal => self.offset.partial_cmp(&other.offset),
            o => Some(o),
        }
    }
}

/// Digit cells of width `scale * 10^-k` on the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DigitGrid {
    pub k: u32,
    pub scale: f64,
    cells_per_unit: i64,
}

impl DigitGrid {
    pub fn new(k: u32, scale: f64) -> Result<Self> {
        Ok(Self { k, scale, cells_per_unit: pow10(k)? })
    }

    pub fn cells_per_unit(&self) -> i64 {
        self.cells_per_unit
    }

    pub fn width(&self) -> f64 {
        self.scale / self.cells_per_unit as f64
    }

    pub fn value(&self, v: CellValue) -> f64 {
        self.scale * (v.cell as f64 + v.offset) / self.cells_per_unit as f64
    }

    pub fn left(&self, cell: i64) -> f64 {
        self.scale * cell as f64 / self.cells_per_unit as f64
    }

    /// The exact grid point `scale * cell / 10^k`.
    pub fn point(&self, cell: i64) -> CellValue {
        CellValue { cell, offset: 0.0 }
    }
}

/// `inf { x in [lo, hi] : cdf(x) >= u }` by bisection to `INVERSE_TOL`.
pub fn grand_inverse_cdf(cdf: impl Fn(f64) -> f64, lo: f64, hi: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::UniformOutOfRange(u));
    }
    if cdf(lo) >= u {
        return Ok(lo);
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > INVERSE_TOL {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if cdf(m) >= u {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(b)
}

/// A law on the offset interval `[0, 1]` of one digit cell.
///
/// Both tails are exposed so that the residual inversion can work on the
/// side where it is accurate; `sf` should not be computed as `1 - cdf`.
pub trait OffsetLaw {
    fn cdf(&self, t: f64) -> f64;
    fn sf(&self, t: f64) -> f64;
}

impl<F: Fn(f64) -> f64> OffsetLaw for F {
    fn cdf(&self, t: f64) -> f64 {
        self(t)
    }

    fn sf(&self, t: f64) -> f64 {
        1.0 - self(t)
    }
}

/// Second stage of the digit-matching coupling.
///
/// `law` is the law conditioned on one digit cell, in the offset coordinate
/// `t in [0, 1]`. On the matching branch the offset is `u_refine` whatever
/// the law; otherwise it inverts the residual `R = (F - (1 - eps) t) / eps`,
/// using `1 - R = (S - (1 - eps)(1 - t)) / eps` on the upper half. Returns
/// the offset and whether the branch matched.
pub fn matched_refine(law: &impl OffsetLaw, iota: &UpdateRandomness, eps: f64, k: u32) -> Result<(f64, bool)> {
    if iota.matched(eps) {
        return Ok((iota.u_refine, true));
    }
    let u = iota.u_refine;
    let tol = 1e-9 / eps.max(1e-300);
    let violated = || Error::DominationViolated { eps, k };
    // (R(t) >= u, R(t))
    let probe = |t: f64| -> Result<(bool, f64)> {
        let (hit, r) = if t <= 0.5 {
            let r = (law.cdf(t) - (1.0 - eps) * t) / eps;
            (r >= u, r)
        } else {
            let q = (law.sf(t) - (1.0 - eps) * (1.0 - t)) / eps;
            (q <= 1.0 - u, 1.0 - q)
        };
        if !(-tol..=1.0 + tol).contains(&r) {
            return Err(violated());
        }
        Ok((hit, r))
    };
    let (hit0, mut ra) = probe(0.0)?;
    if hit0 {
        return Ok((0.0, false));
    }
    let (_, mut rb) = probe(1.0)?;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    while b - a > INVERSE_TOL {
        let m = 0.5 * (a + b);
        let (hit, rm) = probe(m)?;
        if rm < ra - tol || rm > rb + tol {
            return Err(violated());
        }
        if hit {
            b = m;
            rb = rm;
        } else {
            a = m;
            ra = rm;
        }
    }
    Ok((b.min(ONE_BELOW), false))
}
