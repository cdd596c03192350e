mod common;

use std::collections::HashSet;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use proxskin_core::layout::{place_nodules, poisson_disk_sample};
use proxskin_core::mesh::{extract_weighted_region, mold_dermis};
use proxskin_core::router::{attach_electrodes, build_routing_graph, place_ports, route_all, RouteParams, RoutingGraph, WirePath};
use proxskin_core::skin::{generate_skin, DesignParams};
use proxskin_core::mesh::smooth_boundary;

fn pairwise_node_disjoint(wires: &[WirePath]) -> bool {
    for (i, a) in wires.iter().enumerate() {
        let sa: HashSet<usize> = a.node_sequence.iter().copied().collect();
        for b in &wires[i + 1..] {
            if b.node_sequence.iter().any(|n| sa.contains(n)) {
                return false;
            }
        }
    }
    true
}

#[test]
fn demo_bundle_wires_are_disjoint() {
    let d = common::demo();
    assert_eq!(d.skin.wires.len(), d.skin.electrodes.len());
    assert!(pairwise_node_disjoint(&d.skin.wires));
}

#[test]
fn random_layouts_are_disjoint() {
    let d = common::demo();
    let base = d.cfg.mesh.load().unwrap();
    let mut routed = 0;
    for seed in 0..20 {
        let design = DesignParams { r_min: 0.04, layout_seed: 1000 + seed, port_count: 16, ..d.cfg.design.clone() };
        let skin = generate_skin(&base, &design).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(pairwise_node_disjoint(&skin.wires), "seed {seed}");
        routed += skin.wires.len();
    }
    assert!(routed >= 20 * 3);
}

fn to_petgraph(g: &RoutingGraph) -> UnGraph<(), f64> {
    let mut pg = UnGraph::<(), f64>::with_capacity(g.nodes().len(), g.edge_count());
    for _ in g.nodes() {
        pg.add_node(());
    }
    for (a, b, w) in g.edges() {
        pg.add_edge(NodeIndex::new(a), NodeIndex::new(b), w);
    }
    pg
}

/// Rebuilds the demo routing graph with terminals attached, but routes one
/// (port, electrode) pair at a time at pure length weighting.
#[test]
fn single_pair_matches_dijkstra() {
    let d = common::demo();
    let design = &d.cfg.design;
    let base = d.cfg.mesh.load().unwrap();
    let region = extract_weighted_region(&base, design.weight_threshold).unwrap();
    let dermis = mold_dermis(&region, design.thickness).unwrap();
    let samples = poisson_disk_sample(&dermis.outer, design.r_min, design.layout_seed, design.max_attempts).unwrap();
    let electrodes = place_nodules(&samples, &dermis, &design.nodules).unwrap();
    let mut graph = build_routing_graph(&dermis, region.weights(), design.route_layers, design.layer_gap, design.connect_radius).unwrap();
    let rim = dermis.outer_rims().into_iter().max_by(|a, b| a.len().cmp(&b.len())).unwrap();
    let boundary = smooth_boundary(&rim, design.boundary_samples).unwrap();
    let ports = place_ports(&boundary, design.port_count, &mut graph).unwrap();
    attach_electrodes(&mut graph, &electrodes).unwrap();
    let pg = to_petgraph(&graph);
    let params = RouteParams { a_mix: 1.0, profile_radius: design.profile_radius, clearance: None };
    let mut checked = 0;
    for port in &ports {
        let oracle = dijkstra(&pg, NodeIndex::new(port.node), None, |e| *e.weight());
        for e in &electrodes {
            let out = route_all(&graph, std::slice::from_ref(port), std::slice::from_ref(e), &params).unwrap();
            let goal = graph.terminal(proxskin_core::router::Terminal::Electrode(e.id)).unwrap();
            let expected = oracle[&NodeIndex::new(goal)];
            // Tied shortest paths on the regular grid can differ in summation order.
            assert!((out.wires[0].length - expected).abs() <= 1e-12 * expected, "port {} electrode {}: {} vs {}", port.id, e.id, out.wires[0].length, expected);
            checked += 1;
        }
    }
    assert_eq!(checked, ports.len() * electrodes.len());
}
