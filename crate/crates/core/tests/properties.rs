use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;

use sag_core::data::{is_stratified, toy_lake_profiles, LakeConfig, MAX_DAILY_CHANGE};
use sag_core::diff::{Tape, Tensor};
use sag_core::graph::{AdjacencyMatrix, Edge, GraphError, NetworkTopology, NodeId, NodeKind, StandardizeScope};
use sag_core::model::flow_average_temperature;
use sag_core::train::{masked_mse, ObservationMask};

/// Random DAG over `n` segments and `m` reservoirs: nodes are shuffled into
/// a random order and edges only point forward in it.
fn dag() -> impl Strategy<Value = (usize, usize, Vec<Edge>)> {
    (2usize..9, 0usize..3)
        .prop_flat_map(|(n, m)| {
            let total = n + m;
            (
                Just(n),
                Just(m),
                Just((0..total).collect::<Vec<_>>()).prop_shuffle(),
                prop::collection::vec((0..total, 0..total, 100.0f64..20_000.0), 1..20),
            )
        })
        .prop_map(|(n, m, order, raw)| {
            let node = |flat: usize| {
                if flat < n {
                    NodeId::segment(flat)
                } else {
                    NodeId::reservoir(flat - n)
                }
            };
            let mut seen = BTreeSet::new();
            let mut edges = Vec::new();
            for (a, b, d) in raw {
                let (pa, pb) = (order[a], order[b]);
                if pa == pb {
                    continue;
                }
                let (from, to) = if pa < pb { (a, b) } else { (b, a) };
                let (s, t) = (node(from), node(to));
                if s.kind == NodeKind::Reservoir && t.kind == NodeKind::Reservoir {
                    continue;
                }
                if seen.insert((from, to)) {
                    edges.push(Edge::new(s, t, d));
                }
            }
            (n, m, edges)
        })
}

fn reachable(total: usize, edges: &[(usize, usize)], from: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &(a, b) in edges {
            if a == u && b < total && out.insert(b) {
                queue.push_back(b);
            }
        }
    }
    out
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closures_match_breadth_first_search((n, m, edges) in dag()) {
        let topo = NetworkTopology::build(n, m, edges.clone()).unwrap();
        let flat = |id: NodeId| if id.kind == NodeKind::Segment { id.index } else { n + id.index };
        let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (flat(e.source), flat(e.target))).collect();
        let reach: Vec<BTreeSet<usize>> = (0..n + m).map(|u| reachable(n + m, &pairs, u)).collect();
        for k in 0..m {
            let up: Vec<usize> = (0..n).filter(|&i| reach[i].contains(&(n + k))).collect();
            prop_assert_eq!(sorted(topo.upstream_segments_of_reservoir(k)), up);
            let dn: Vec<usize> = (0..n).filter(|&i| reach[n + k].contains(&i)).collect();
            prop_assert_eq!(sorted(topo.downstream_segments_of_reservoir(k)), dn);
        }
        for i in 0..n {
            let res: Vec<usize> = (0..m).filter(|&k| reach[n + k].contains(&i)).collect();
            prop_assert_eq!(sorted(topo.upstream_reservoirs_of_segment(i)), res);
            let seg: Vec<usize> = (0..n).filter(|&j| reach[j].contains(&i)).collect();
            prop_assert_eq!(sorted(topo.upstream_segments_of_segment(i)), seg);
        }
        // every edge goes forward in the topological order
        let order = topo.topological_order();
        let pos = |id: NodeId| order.iter().position(|&x| x == id).unwrap();
        for e in &edges {
            prop_assert!(pos(e.source) < pos(e.target));
        }
    }

    #[test]
    fn adding_a_back_edge_is_rejected((n, m, edges) in dag()) {
        let seg_edge = edges.iter().find(|e| e.source.kind == NodeKind::Segment && e.target.kind == NodeKind::Segment);
        if let Some(e) = seg_edge {
            let mut with_back = edges.clone();
            with_back.push(Edge::new(e.target, e.source, 500.0));
            prop_assert_eq!(NetworkTopology::build(n, m, with_back).unwrap_err(), GraphError::CycleDetected);
        }
    }

    #[test]
    fn adjacency_is_bounded_and_decreasing_in_distance((n, m, edges) in dag()) {
        let topo = NetworkTopology::build(n, m, edges).unwrap();
        let adj = AdjacencyMatrix::compute(&topo, StandardizeScope::Global);
        let pairs = topo.connected_pairs();
        let mut connected = BTreeSet::new();
        for p in pairs {
            let w = adj.weight(p.from, p.to);
            prop_assert!(w > 0.0 && w < 1.0, "{w}");
            connected.insert((topo.flat_index(p.from), topo.flat_index(p.to)));
        }
        for a in 0..n + m {
            for b in 0..n + m {
                if !connected.contains(&(a, b)) {
                    prop_assert_eq!(adj.get(a, b), 0.0);
                }
            }
        }
        for p in pairs {
            for q in pairs {
                if p.distance < q.distance {
                    prop_assert!(adj.weight(p.from, p.to) > adj.weight(q.from, q.to));
                }
            }
        }
    }

    #[test]
    fn flow_average_is_scale_invariant_and_bounded(
        layers in prop::collection::vec((0.01f64..500.0, -2.0f64..35.0), 1..5),
        s in 0.001f64..1000.0,
    ) {
        let flows: Vec<f64> = layers.iter().map(|l| l.0).collect();
        let temps: Vec<f64> = layers.iter().map(|l| l.1).collect();
        let base = flow_average_temperature(&flows, &temps).unwrap();
        let scaled: Vec<f64> = flows.iter().map(|f| f * s).collect();
        let v = flow_average_temperature(&scaled, &temps).unwrap();
        prop_assert!((v - base).abs() <= 1e-12, "{v} vs {base}");
        let lo = temps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = temps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(base >= lo - 1e-12 && base <= hi + 1e-12);
    }

    #[test]
    fn sigmoid_and_tanh_stay_in_range(values in prop::collection::vec(-40.0f64..40.0, 1..30)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(values.clone()));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        for (&sv, &v) in tape.value(s).data().iter().zip(&values) {
            prop_assert!((0.0..=1.0).contains(&sv));
            if v.abs() < 30.0 {
                prop_assert!(sv > 0.0 && sv < 1.0);
            }
        }
        for &tv in tape.value(t).data() {
            prop_assert!((-1.0..=1.0).contains(&tv));
        }
    }

    #[test]
    fn lake_layers_respect_stratification_and_daily_change(
        start in 1u32..366,
        n in 2usize..500,
        air_seed in prop::collection::vec(-15.0f64..35.0, 1..20),
    ) {
        let cfg = LakeConfig::default();
        let doys: Vec<u32> = (0..n).map(|t| ((start as usize - 1 + t) % 365 + 1) as u32).collect();
        let air: Vec<f64> = (0..n).map(|t| air_seed[t % air_seed.len()]).collect();
        let p = toy_lake_profiles(&cfg, &doys, &air, None);
        for t in 0..n {
            if is_stratified(&cfg, doys[t]) {
                prop_assert!(p.bottom[t] <= p.surface[t]);
            }
            if t > 0 {
                prop_assert!((p.surface[t] - p.surface[t - 1]).abs() <= MAX_DAILY_CHANGE + 1e-12);
                prop_assert!((p.bottom[t] - p.bottom[t - 1]).abs() <= MAX_DAILY_CHANGE + 1e-12);
            }
        }
    }

    #[test]
    fn masked_loss_ignores_unobserved_entries(
        entries in prop::collection::vec((-5.0f64..30.0, -5.0f64..30.0, any::<bool>(), -1e6f64..1e6), 2..60),
    ) {
        prop_assume!(entries.iter().any(|e| e.2));
        let pred: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let obs: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let mask: Vec<bool> = entries.iter().map(|e| e.2).collect();
        let perturbed: Vec<f64> = entries.iter().map(|e| if e.2 { e.1 } else { e.3 }).collect();
        let a = masked_mse(&pred, &obs, &mask).unwrap();
        let b = masked_mse(&pred, &perturbed, &mask).unwrap();
        prop_assert_eq!(a - b, 0.0);

        let n = entries.len();
        let m1 = ObservationMask::new(1, n, obs, mask.clone()).unwrap();
        let m2 = ObservationMask::new(1, n, perturbed, mask).unwrap();
        for t in 0..n {
            prop_assert_eq!(m1.get(0, t), m2.get(0, t));
        }
    }
}
