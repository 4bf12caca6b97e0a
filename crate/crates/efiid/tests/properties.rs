//! Randomized invariants of the lattice, coupling and sampling layers.

use std::collections::{HashSet, VecDeque};
use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use efiid::cftp::{apply_events, Dynamics};
use efiid::coarse::{local_set, star_cluster, CoarseParams, FnTheta};
use efiid::experiments::{EpsSetting, ExperimentConfig, ExperimentKind};
use efiid::lattice::{
    external_complement, fine_clusters, star_zero_cluster, BoxRegion, CoarseCell, CoarseWindow, Exterior, Site, SiteGraph,
};
use efiid::model::{ModelKind, ModelSpec};
use efiid::oracle::{enumerate_xy, mgff_mean};
use efiid::randomness::{event_stream, CellValue, DigitGrid, IotaStream, PoissonField, UpdateRandomness};
use efiid::swm::{swm_conditional, swm_update_law, SwmBoundary, TruncatedNormalLaw};
use efiid::xy::{XyBoundary, XyScratch};
use proptest::prelude::*;

fn box_graph(n: i64) -> SiteGraph {
    SiteGraph::from_box(&BoxRegion::centered(2, n).unwrap())
}

/// Component labels by breadth-first search, independent of the union-find.
fn bfs_components(graph: &SiteGraph, open: &[bool]) -> usize {
    let n = graph.len();
    let mut adj = vec![Vec::new(); n];
    for (e, edge) in graph.edges().iter().enumerate() {
        if let (true, Site::Interior(b)) = (open[e], edge.b) {
            adj[edge.a].push(b);
            adj[b].push(edge.a);
        }
    }
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
    }
    count
}

#[test]
fn all_open_or_all_closed_clusters() {
    for n in 1..=4 {
        let g = box_graph(n);
        let m = g.edge_count();
        assert_eq!(fine_clusters(&g, &vec![true; m], false).unwrap().count(), 1);
        assert_eq!(fine_clusters(&g, &vec![false; m], false).unwrap().count(), g.len());
    }
}

#[test]
fn clusters_match_bfs_on_random_configurations() {
    let g = box_graph(3);
    let mut stream = IotaStream::new(11);
    for _ in 0..1000 {
        let p = stream.uniform();
        let open: Vec<bool> = (0..g.edge_count()).map(|_| stream.uniform() < p).collect();
        let part = fine_clusters(&g, &open, false).unwrap();
        assert_eq!(part.count(), bfs_components(&g, &open));
        for (e, edge) in g.edges().iter().enumerate() {
            if let (true, Site::Interior(b)) = (open[e], edge.b) {
                assert_eq!(part.labels[edge.a], part.labels[b]);
            }
        }
    }
}

fn random_field(window: &CoarseWindow, p_zero: f64, seed: u64) -> Vec<bool> {
    let mut s = IotaStream::new(seed);
    (0..window.len()).map(|_| s.uniform() >= p_zero).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn star_cluster_is_a_connected_zero_set(seed in any::<u64>(), p in 0.1f64..0.5) {
        let w = CoarseWindow::around(&[0, 0], 3, 4).unwrap();
        let theta = random_field(&w, p, seed);
        let origin = CoarseCell { j: 0, x: vec![0, 0] };
        let cluster = star_zero_cluster(&w, &theta, &origin).unwrap();
        let members: HashSet<usize> = cluster.iter().copied().collect();
        for &i in &cluster {
            prop_assert!(!theta[i]);
            for nb in w.star_neighbors(i) {
                prop_assert!(theta[nb] || members.contains(&nb));
            }
        }
        if let Some(&first) = cluster.first() {
            let mut seen = HashSet::from([first]);
            let mut stack = vec![first];
            while let Some(i) = stack.pop() {
                for nb in w.star_neighbors(i) {
                    if members.contains(&nb) && seen.insert(nb) {
                        stack.push(nb);
                    }
                }
            }
            prop_assert_eq!(seen.len(), members.len());
        }
    }

    #[test]
    fn external_complement_is_antitone(seed in any::<u64>(), extra in 0usize..6, n in 1i64..3) {
        let w = CoarseWindow::around(&[0, 0], 8, 12).unwrap();
        let mut s = IotaStream::new(seed);
        let pick = |s: &mut IotaStream| {
            let c = CoarseCell { j: -4 - (s.uniform() * 3.0) as i64, x: vec![(s.uniform() * 3.0) as i64 - 1, (s.uniform() * 3.0) as i64 - 1] };
            w.index(&c).unwrap()
        };
        let small: Vec<usize> = (0..2).map(|_| pick(&mut s)).collect();
        let mut large = small.clone();
        large.extend((0..extra).map(|_| pick(&mut s)));
        let a = external_complement(&w, &small, n, 3).unwrap();
        let b = external_complement(&w, &large, n, 3).unwrap();
        let c = external_complement(&w, &small, n + 1, 3).unwrap();
        for i in 0..w.len() {
            prop_assert!(!b[i] || a[i]);
            prop_assert!(!c[i] || a[i]);
        }
    }

    #[test]
    fn improving_theta_shrinks_cluster_and_local_set(seed in any::<u64>(), flip in 0usize..40) {
        let spec = ModelSpec::calibrated(ModelKind::Swm, 2, 0.5, 0.1).unwrap();
        let params = CoarseParams::new(spec, 4, 0.5, None).unwrap();
        let w = CoarseWindow::around(&[0, 0], 5, 6).unwrap();
        let theta = random_field(&w, 0.3, seed);
        let origin = CoarseCell { j: 0, x: vec![0, 0] };
        let Ok(before) = star_cluster(&mut FnTheta(|c: &CoarseCell| theta[w.index(c).unwrap()]), &w, &origin) else {
            return Ok(());
        };
        let Some(target) = before.cells.get(flip % before.cells.len().max(1)) else {
            return Ok(());
        };
        let t = w.index(target).unwrap();
        let after = star_cluster(&mut FnTheta(|c: &CoarseCell| { let i = w.index(c).unwrap(); i == t || theta[i] }), &w, &origin).unwrap();
        let old: HashSet<&CoarseCell> = before.cells.iter().collect();
        prop_assert!(after.cells.iter().all(|c| old.contains(c)));
        let v = [1, 2];
        let lv = local_set(&params, &v, &before).unwrap();
        let lv2 = local_set(&params, &v, &after).unwrap();
        let own: HashSet<Vec<i64>> = params.scale.zone(&origin.x).points().into_iter().collect();
        for p in &lv2.sites {
            prop_assert!(lv.contains(p) || own.contains(p));
        }
    }

    #[test]
    fn event_lists_restrict(seed in any::<u64>(), t1 in 0.5f64..6.0, extra in 0.0f64..6.0) {
        let g = box_graph(2);
        let field = PoissonField::new(seed);
        let short = event_stream(&g, -t1, 0.0, &field).unwrap();
        let long = event_stream(&g, -t1 - extra, 0.0, &field).unwrap();
        let restricted: Vec<_> = long.iter().filter(|e| e.time >= -t1).copied().collect();
        prop_assert_eq!(short, restricted);
    }

    #[test]
    fn composite_update_is_monotone(m1 in -1.5f64..1.5, dm in 0.0f64..1.0, var in 0.01f64..5.0, k in 1u32..4,
                                    u in 0.0f64..1.0, r in 0.0f64..1.0, mm in 0.0f64..1.0) {
        let grid = DigitGrid::new(k, 1.0).unwrap();
        let iota = UpdateRandomness { u_primary: u, u_refine: r, u_match: mm, aux: 0 };
        let lo = TruncatedNormalLaw::new(m1, var);
        let hi = TruncatedNormalLaw::new(m1 + dm, var);
        let eps = 0.3;
        // domination may fail for coarse cells; only certified pairs are compared
        if let (Ok((a, _)), Ok((b, _))) = (swm_update_law(&lo, &grid, &iota, eps), swm_update_law(&hi, &grid, &iota, eps)) {
            prop_assert!(a <= b, "{a:?} > {b:?}");
        }
    }

    #[test]
    fn matching_branch_ignores_the_law_within_a_cell(m1 in -1.0f64..1.0, m2 in -1.0f64..1.0, u in 0.0f64..1.0, r in 0.0f64..1.0) {
        let spec = ModelSpec::calibrated(ModelKind::Swm, 2, 0.5, 0.1).unwrap();
        let grid = DigitGrid::new(spec.k, 1.0).unwrap();
        let iota = UpdateRandomness { u_primary: u, u_refine: r, u_match: 0.5, aux: 0 };
        let var = 1.0 / (2.0 * 0.5 * 4.0);
        let (a, ma) = swm_update_law(&TruncatedNormalLaw::new(m1, var), &grid, &iota, spec.eps).unwrap();
        let (b, mb) = swm_update_law(&TruncatedNormalLaw::new(m2, var), &grid, &iota, spec.eps).unwrap();
        prop_assert!(ma && mb);
        prop_assert_eq!(a.offset.to_bits(), b.offset.to_bits());
    }

    #[test]
    fn cell_order_is_numeric_order(c1 in -500i64..500, o1 in 0.0f64..1.0, c2 in -500i64..500, o2 in 0.0f64..1.0, k in 1u32..4) {
        let grid = DigitGrid::new(k, 1.0).unwrap();
        let (a, b) = (CellValue::new(c1, o1), CellValue::new(c2, o2));
        if a < b {
            prop_assert!(grid.value(a) <= grid.value(b));
        }
        if grid.value(a) < grid.value(b) {
            prop_assert!(a < b);
        }
    }

    #[test]
    fn conditional_law_is_monotone_in_neighbors(xs in proptest::collection::vec(-1.0f64..1.0, 4), bump in 0usize..4,
                                                delta in 0.0f64..1.0, beta in 0.05f64..3.0) {
        let mut ys = xs.clone();
        ys[bump] = (ys[bump] + delta).min(1.0);
        let lo = swm_conditional(&xs, beta).unwrap();
        let hi = swm_conditional(&ys, beta).unwrap();
        for i in 0..=40 {
            let x = -1.0 + 0.05 * i as f64;
            prop_assert!(hi.cdf(x) <= lo.cdf(x) + 1e-12);
        }
    }

    #[test]
    fn config_json_round_trips(beta in proptest::collection::vec(0.0f64..3.0, 1..4), seed in any::<u64>(), replicas in 100usize..1000,
                               eps in proptest::option::of(0.01f64..0.5), scale in 0.01f64..2.0) {
        let cfg = ExperimentConfig {
            experiment: ExperimentKind::MatchingTree,
            beta,
            seed,
            replicas,
            eps: eps.map_or(EpsSetting::Auto(efiid::experiments::Auto::Auto), EpsSetting::Value),
            scale,
            ..Default::default()
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn composite_update_is_monotone_on_many_pairs() {
    let mut s = IotaStream::new(5);
    let mut checked = 0;
    while checked < 10_000 {
        let beta = [0.1, 0.5, 1.0, 2.0][checked % 4];
        let spec = ModelSpec::calibrated(ModelKind::Swm, 2, beta, 0.1).unwrap();
        let grid = DigitGrid::new(spec.k, 1.0).unwrap();
        let var = 1.0 / (8.0 * beta);
        let m1 = 2.0 * s.uniform() - 1.0;
        let m2 = m1 + (1.0 - m1) * s.uniform();
        let iota = s.next().unwrap();
        let (a, _) = swm_update_law(&TruncatedNormalLaw::new(m1, var), &grid, &iota, spec.eps).unwrap();
        let (b, _) = swm_update_law(&TruncatedNormalLaw::new(m2, var), &grid, &iota, spec.eps).unwrap();
        assert!(a <= b, "means {m1} <= {m2} gave {a:?} > {b:?}");
        checked += 1;
    }
}

#[test]
fn matched_flag_is_independent_of_neighbors() {
    // the flag reads only u_match, so its frequency is the same for every law
    let spec = ModelSpec::calibrated(ModelKind::Swm, 2, 1.0, 0.1).unwrap();
    let grid = DigitGrid::new(spec.k, 1.0).unwrap();
    let iotas: Vec<UpdateRandomness> = IotaStream::new(3).take(20_000).collect();
    let mut freq = Vec::new();
    for mean in [-0.9, 0.0, 0.7] {
        let law = TruncatedNormalLaw::new(mean, 0.125);
        let m = iotas.iter().filter(|i| swm_update_law(&law, &grid, i, spec.eps).unwrap().1).count();
        freq.push(m);
    }
    assert!(freq.windows(2).all(|w| w[0] == w[1]));
    let p = freq[0] as f64 / iotas.len() as f64;
    assert!((p - 0.9).abs() < 3.0 * (0.09f64 / iotas.len() as f64).sqrt());
}

#[test]
fn angle_laws_dominate_for_ordered_states() {
    let graph = Arc::new(box_graph(2));
    let spec = ModelSpec::calibrated(ModelKind::Xy, 2, 1.0, 0.1).unwrap();
    let dynamics = spec.xy(graph.clone(), XyBoundary::Extremal).unwrap();
    let (n, m) = (graph.len(), graph.edge_count());
    let mut s = IotaStream::new(17);
    let mut scratch = XyScratch::default();
    for _ in 0..100 {
        let a_low: Vec<f64> = (0..n).map(|_| FRAC_PI_2 * s.uniform()).collect();
        let a_up: Vec<f64> = a_low.iter().map(|&a| a + (FRAC_PI_2 - a) * s.uniform()).collect();
        let o_up: Vec<bool> = (0..m).map(|_| s.uniform() < 0.5).collect();
        let o_low: Vec<bool> = o_up.iter().map(|&o| o || s.uniform() < 0.5).collect();
        let e_low: Vec<bool> = (0..m).map(|_| s.uniform() < 0.5).collect();
        let e_up: Vec<bool> = e_low.iter().map(|&e| e || s.uniform() < 0.5).collect();
        let lower = dynamics.state(&a_low, o_low, e_low, false).unwrap();
        let upper = dynamics.state(&a_up, o_up, e_up, true).unwrap();
        let u = ((s.uniform() * n as f64) as usize).min(n - 1);
        let ll = dynamics.angle_law(&lower, u, &mut scratch);
        let lu = dynamics.angle_law(&upper, u, &mut scratch);
        let (fl, fu) = (ll.cdf(), lu.cdf());
        for i in 0..=10_000 {
            let x = FRAC_PI_2 * i as f64 / 10_000.0;
            assert!(fu.at(x) <= fl.at(x) + 1e-12, "at {x}: {} > {}", fu.at(x), fl.at(x));
        }
    }
}

#[test]
fn top_trajectories_decrease_with_longer_windows() {
    let graph = Arc::new(box_graph(3));
    for seed in 0..20 {
        let field = PoissonField::new(seed);
        let swm = ModelSpec::calibrated(ModelKind::Swm, 2, 0.5, 0.1).unwrap().swm(graph.clone(), SwmBoundary::Extremal).unwrap();
        let xy = ModelSpec::calibrated(ModelKind::Xy, 2, 0.5, 0.1).unwrap().xy(graph.clone(), XyBoundary::Extremal).unwrap();
        let mut prev_swm = None;
        let mut prev_xy = None;
        for t in [1.0, 2.0, 4.0, 8.0] {
            let ev = event_stream(&graph, -t, 0.0, &field).unwrap();
            let a = apply_events(&swm, swm.maximal(), &ev).unwrap();
            let b = apply_events(&xy, xy.maximal(), &ev).unwrap();
            if let Some(p) = &prev_swm {
                assert!(swm.ordered(&a, p));
            }
            if let Some(p) = &prev_xy {
                assert!(xy.ordered(&b, p));
            }
            prev_swm = Some(a);
            prev_xy = Some(b);
        }
    }
}

#[test]
fn larger_boxes_give_lower_top_trajectories() {
    // a box nested in a larger one: the larger box's top run restricted to the
    // smaller box lies below the smaller box's top run
    for seed in 0..20 {
        let field = PoissonField::new(seed);
        let small = Arc::new(box_graph(2));
        let large = Arc::new(box_graph(3));
        let spec = ModelSpec::calibrated(ModelKind::Swm, 2, 1.0, 0.1).unwrap();
        let ds = spec.swm(small.clone(), SwmBoundary::Extremal).unwrap();
        let dl = spec.swm(large.clone(), SwmBoundary::Extremal).unwrap();
        let a = apply_events(&ds, ds.maximal(), &event_stream(&small, -6.0, 0.0, &field).unwrap()).unwrap();
        let b = apply_events(&dl, dl.maximal(), &event_stream(&large, -6.0, 0.0, &field).unwrap()).unwrap();
        for (u, p) in small.points().iter().enumerate() {
            let w = large.index_of(p).unwrap();
            assert!(b.interior[w] <= a.interior[u]);
        }
    }
}

#[test]
fn enumeration_is_normalized() {
    for (angles, beta) in [(vec![0.1, 1.3], 0.7), (vec![0.4, 0.9, 1.5], 2.0), (vec![0.0, FRAC_PI_2, 0.8, 0.3], 1.0)] {
        let edges: Vec<(usize, usize)> = (1..angles.len()).map(|i| (i - 1, i)).collect();
        let e = enumerate_xy(&angles, &edges, beta).unwrap();
        assert!((e.joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.factorization_error <= 1e-12);
    }
}

#[test]
fn mgff_identity_holds_in_one_dimension() {
    for len in 1..=5 {
        let g = SiteGraph::from_points(1, (0..len).map(|i| vec![i]).collect(), Exterior::Boundary).unwrap();
        for (beta, m) in [(0.5, 0.1), (1.0, 1.0), (2.0, 0.01)] {
            for u in 0..g.len() {
                let r = mgff_mean(&g, beta, m, u).unwrap();
                assert!((r.linear - r.walk).abs() <= 1e-8);
            }
        }
    }
}
