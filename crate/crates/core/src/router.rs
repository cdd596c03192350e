//! Layered routing graph and greedy non-overlapping port-to-electrode wiring.
//!
//! Every iteration runs A* (edge-length cost, Euclidean goal heuristic) for
//! each free port / unrouted electrode pair, ranks the complete candidate
//! paths with the length/bundling mix score, commits the best one, and prunes
//! the occupied nodes plus every edge that passes within the clearance of it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Point, SpatialHash, Vector};
use crate::layout::Electrode;
use crate::mesh::DermisShell;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("{num_layers} layers × {layer_gap} m gap does not fit in a {thickness} m dermis")]
    LayersExceedThickness { num_layers: usize, layer_gap: f64, thickness: f64 },
    #[error("electrode {0} cannot reach any free port")]
    Unroutable(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("{0:?} is not bound to a routing node")]
    MissingTerminal(Terminal),
    #[error("need at least as many ports ({ports}) as electrodes ({electrodes})")]
    NotEnoughPorts { ports: usize, electrodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Port(usize),
    Electrode(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteNode {
    #[serde(with = "geom::point_serde")]
    pub position: Point,
    pub layer: usize,
    pub origin_vertex: usize,
}

/// Undirected simple graph of candidate wire positions inside the dermis.
/// Removed nodes keep their index; only `alive` nodes participate.
#[derive(Debug, Clone)]
pub struct RoutingGraph {
    nodes: Vec<RouteNode>,
    adjacency: Vec<BTreeMap<usize, f64>>,
    alive: Vec<bool>,
    terminals: BTreeMap<Terminal, usize>,
}

impl RoutingGraph {
    /// Builds a graph from explicit nodes, connecting every pair closer than
    /// `connect_radius`.
    pub fn from_nodes(nodes: Vec<RouteNode>, connect_radius: f64) -> Self {
        let mut hash = SpatialHash::new(connect_radius);
        for (i, n) in nodes.iter().enumerate() {
            hash.insert(&n.position, i);
        }
        let mut adjacency = vec![BTreeMap::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for j in hash.candidates(&n.position, connect_radius) {
                if j <= i {
                    continue;
                }
                let d = (nodes[j].position - n.position).norm();
                if d <= connect_radius && d > 0.0 {
                    adjacency[i].insert(j, d);
                    adjacency[j].insert(i, d);
                }
            }
        }
        let alive = vec![true; nodes.len()];
        Self { nodes, adjacency, alive, terminals: BTreeMap::new() }
    }

    /// Empty graph for hand-built fixtures; see [`RoutingGraph::add_edge`].
    pub fn with_nodes(nodes: Vec<RouteNode>) -> Self {
        let n = nodes.len();
        Self { nodes, adjacency: vec![BTreeMap::new(); n], alive: vec![true; n], terminals: BTreeMap::new() }
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let d = (self.nodes[a].position - self.nodes[b].position).norm();
        self.adjacency[a].insert(b, d);
        self.adjacency[b].insert(a, d);
    }

    pub fn nodes(&self) -> &[RouteNode] {
        &self.nodes
    }

    pub fn position(&self, id: usize) -> Point {
        self.nodes[id].position
    }

    pub fn is_alive(&self, id: usize) -> bool {
        self.alive[id]
    }

    /// Number of live nodes.
    pub fn node_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeMap::len).sum::<usize>() / 2
    }

    /// Live undirected edges `(a, b, length)` with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, m)| m.iter().filter(move |(&b, _)| a < b).map(move |(&b, &d)| (a, b, d)))
    }

    pub fn neighbors(&self, id: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adjacency[id].iter().map(|(&b, &d)| (b, d))
    }

    pub fn degree(&self, id: usize) -> usize {
        self.adjacency[id].len()
    }

    pub fn terminals(&self) -> &BTreeMap<Terminal, usize> {
        &self.terminals
    }

    pub fn terminal(&self, t: Terminal) -> Option<usize> {
        self.terminals.get(&t).copied()
    }

    /// Nearest live node to `p`, ties broken by lowest id.
    pub fn nearest_node(&self, p: &Point) -> Option<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.alive[i])
            .min_by(|&a, &b| {
                let da = (self.nodes[a].position - p).norm_squared();
                let db = (self.nodes[b].position - p).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
    }

    /// Binds a terminal to its nearest node and returns that node.
    pub fn bind_terminal(&mut self, t: Terminal, p: &Point) -> Option<usize> {
        let n = self.nearest_node(p)?;
        self.terminals.insert(t, n);
        Some(n)
    }

    pub fn remove_node(&mut self, id: usize) {
        if !self.alive[id] {
            return;
        }
        self.alive[id] = false;
        let nbrs: Vec<usize> = self.adjacency[id].keys().copied().collect();
        for b in nbrs {
            self.adjacency[b].remove(&id);
        }
        self.adjacency[id].clear();
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) {
        self.adjacency[a].remove(&b);
        self.adjacency[b].remove(&a);
    }

    /// A* over edge lengths with the straight-line distance to `goal` as the
    /// admissible heuristic. `blocked` nodes are never expanded (start and
    /// goal are exempt). Returns the node sequence and its length.
    pub fn astar(&self, start: usize, goal: usize, blocked: &dyn Fn(usize) -> bool) -> Option<(Vec<usize>, f64)> {
        if !self.alive[start] || !self.alive[goal] {
            return None;
        }
        let target = self.nodes[goal].position;
        let h = |n: usize| (self.nodes[n].position - target).norm();
        let mut g = vec![f64::INFINITY; self.nodes.len()];
        let mut parent = vec![usize::MAX; self.nodes.len()];
        let mut closed = vec![false; self.nodes.len()];
        let mut open = BinaryHeap::new();
        g[start] = 0.0;
        open.push(Frontier { f: h(start), g: 0.0, node: start });
        while let Some(Frontier { g: gn, node, .. }) = open.pop() {
            if closed[node] {
                continue;
            }
            if node == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some((path, gn));
            }
            closed[node] = true;
            for (nb, w) in self.neighbors(node) {
                if closed[nb] || (nb != goal && blocked(nb)) {
                    continue;
                }
                let cand = gn + w;
                if cand < g[nb] {
                    g[nb] = cand;
                    parent[nb] = node;
                    open.push(Frontier { f: cand + h(nb), g: cand, node: nb });
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
struct Frontier {
    f: f64,
    g: f64,
    node: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // min-heap on f, then larger g (deeper), then lower node id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.node.cmp(&self.node))
    }
}

/// Copies the routed vertices outward in `num_layers` layers spaced
/// `layer_gap` apart and connects every node to all nodes within
/// `connect_radius`. Vertices with zero route weight are masked out.
pub fn build_routing_graph(
    dermis: &DermisShell,
    route_weights: &[f64],
    num_layers: usize,
    layer_gap: f64,
    connect_radius: f64,
) -> Result<RoutingGraph, RouteError> {
    if num_layers == 0 {
        return Err(RouteError::InvalidParameter { name: "num_layers", reason: "must be at least 1".into() });
    }
    if !(layer_gap > 0.0) {
        return Err(RouteError::InvalidParameter { name: "layer_gap", reason: format!("must be positive, got {layer_gap}") });
    }
    if !(connect_radius > 0.0) {
        return Err(RouteError::InvalidParameter { name: "connect_radius", reason: format!("must be positive, got {connect_radius}") });
    }
    if num_layers as f64 * layer_gap >= dermis.thickness {
        return Err(RouteError::LayersExceedThickness { num_layers, layer_gap, thickness: dermis.thickness });
    }
    let verts = dermis.inner.vertices();
    if route_weights.len() != verts.len() {
        return Err(RouteError::InvalidParameter {
            name: "route_weights",
            reason: format!("expected {} weights, got {}", verts.len(), route_weights.len()),
        });
    }
    let mut nodes = Vec::new();
    for layer in 0..num_layers {
        let offset = layer_gap * (layer + 1) as f64;
        for (v, p) in verts.iter().enumerate() {
            if route_weights[v] > 0.0 {
                nodes.push(RouteNode { position: p + dermis.normals[v] * offset, layer, origin_vertex: v });
            }
        }
    }
    Ok(RoutingGraph::from_nodes(nodes, connect_radius))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub id: usize,
    #[serde(with = "geom::point_serde")]
    pub position: Point,
    pub node: usize,
}

/// Spreads `count` ports at equal arc length around a closed rim polyline
/// (starting at arc length 0) and binds each to its nearest graph node.
pub fn place_ports(boundary: &[Point], count: usize, graph: &mut RoutingGraph) -> Result<Vec<Port>, RouteError> {
    if count == 0 {
        return Err(RouteError::InvalidParameter { name: "port_count", reason: "must be at least 1".into() });
    }
    if boundary.is_empty() {
        return Err(RouteError::InvalidParameter { name: "boundary", reason: "empty rim".into() });
    }
    let mut closed = boundary.to_vec();
    if closed.first() != closed.last() {
        closed.push(closed[0]);
    }
    let cum = geom::cumulative_length(&closed);
    let total = *cum.last().unwrap();
    let mut ports = Vec::with_capacity(count);
    for id in 0..count {
        let s = total * id as f64 / count as f64;
        let position = point_at_arc_length(&closed, &cum, s);
        let node = graph
            .bind_terminal(Terminal::Port(id), &position)
            .ok_or(RouteError::InvalidParameter { name: "graph", reason: "routing graph has no nodes".into() })?;
        ports.push(Port { id, position, node });
    }
    let mut seen = BTreeMap::new();
    for p in &ports {
        if let Some(prev) = seen.insert(p.node, p.id) {
            log::warn!("ports {prev} and {} share routing node {}", p.id, p.node);
        }
    }
    Ok(ports)
}

fn point_at_arc_length(pts: &[Point], cum: &[f64], s: f64) -> Point {
    let k = cum.partition_point(|&c| c <= s).clamp(1, pts.len() - 1);
    let (a, b) = (pts[k - 1], pts[k]);
    let seg = cum[k] - cum[k - 1];
    if seg <= 0.0 {
        return a;
    }
    a + (b - a) * ((s - cum[k - 1]) / seg)
}

/// Binds each electrode to its nearest routing node.
pub fn attach_electrodes(graph: &mut RoutingGraph, electrodes: &[Electrode]) -> Result<(), RouteError> {
    for e in electrodes {
        graph
            .bind_terminal(Terminal::Electrode(e.id), &e.center)
            .ok_or(RouteError::InvalidParameter { name: "graph", reason: "routing graph has no nodes".into() })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePath {
    pub port_id: usize,
    pub electrode_id: usize,
    pub node_sequence: Vec<usize>,
    #[serde(with = "geom::points_serde")]
    pub points: Vec<Point>,
    pub length: f64,
    pub profile_radius: f64,
}

impl WirePath {
    pub fn from_nodes(graph: &RoutingGraph, port_id: usize, electrode_id: usize, node_sequence: Vec<usize>, profile_radius: f64) -> Self {
        let points: Vec<Point> = node_sequence.iter().map(|&n| graph.position(n)).collect();
        let length = geom::polyline_length(&points);
        Self { port_id, electrode_id, node_sequence, points, length, profile_radius }
    }
}

/// Mean distance from each node of `path` to the nearest node of any
/// existing wire; zero when nothing has been routed yet.
pub fn bundling_distance(path: &WirePath, existing: &[WirePath]) -> f64 {
    if existing.is_empty() || path.points.is_empty() {
        return 0.0;
    }
    let total: f64 = path
        .points
        .iter()
        .map(|p| {
            existing
                .iter()
                .flat_map(|w| w.points.iter())
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / path.points.len() as f64
}

/// `a_mix · length + (1 − a_mix) · bundling distance`; lower is better.
pub fn heuristic_score(path: &WirePath, existing: &[WirePath], a_mix: f64) -> f64 {
    a_mix * path.length + (1.0 - a_mix) * bundling_distance(path, existing)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteParams {
    pub a_mix: f64,
    pub profile_radius: f64,
    /// Pruning range around committed wires; defaults to twice the profile radius.
    #[serde(default)]
    pub clearance: Option<f64>,
}

impl RouteParams {
    pub fn clearance(&self) -> f64 {
        self.clearance.unwrap_or(2.0 * self.profile_radius)
    }
}

#[derive(Debug, Clone)]
pub struct RoutingOutcome {
    pub wires: Vec<WirePath>,
    /// Graph after the final pruning step.
    pub graph: RoutingGraph,
    /// Live node count before routing and after each committed wire.
    pub node_counts: Vec<usize>,
}

/// Greedy global-minimum wiring. Each iteration commits the candidate with the
/// lowest score, breaking ties by (electrode id, port id).
pub fn route_all(graph: &RoutingGraph, ports: &[Port], electrodes: &[Electrode], params: &RouteParams) -> Result<RoutingOutcome, RouteError> {
    if !(0.0..=1.0).contains(&params.a_mix) {
        return Err(RouteError::InvalidParameter { name: "a_mix", reason: format!("must lie in [0, 1], got {}", params.a_mix) });
    }
    if ports.len() < electrodes.len() {
        return Err(RouteError::NotEnoughPorts { ports: ports.len(), electrodes: electrodes.len() });
    }
    let mut graph = graph.clone();
    let mut port_nodes = BTreeMap::new();
    for p in ports {
        port_nodes.insert(p.id, p.node);
    }
    let mut electrode_nodes = BTreeMap::new();
    for e in electrodes {
        let n = graph.terminal(Terminal::Electrode(e.id)).ok_or(RouteError::MissingTerminal(Terminal::Electrode(e.id)))?;
        electrode_nodes.insert(e.id, n);
    }
    let clearance = params.clearance();
    let mut wires: Vec<WirePath> = Vec::new();
    let mut node_counts = vec![graph.node_count()];
    let mut free_ports: Vec<usize> = port_nodes.keys().copied().collect();
    let mut pending: Vec<usize> = electrode_nodes.keys().copied().collect();

    while !pending.is_empty() {
        let mut reserved = vec![false; graph.nodes().len()];
        for &p in &free_ports {
            reserved[port_nodes[&p]] = true;
        }
        for &e in &pending {
            reserved[electrode_nodes[&e]] = true;
        }
        let pairs: Vec<(usize, usize)> = pending.iter().flat_map(|&e| free_ports.iter().map(move |&p| (e, p))).collect();
        let g = &graph;
        let existing = &wires;
        let candidates: Vec<Option<(f64, usize, usize, WirePath)>> = pairs
            .par_iter()
            .map(|&(e, p)| {
                let (start, goal) = (port_nodes[&p], electrode_nodes[&e]);
                let blocked = |n: usize| reserved[n] && n != start;
                let (seq, _) = g.astar(start, goal, &blocked)?;
                let wire = WirePath::from_nodes(g, p, e, seq, params.profile_radius);
                let h = heuristic_score(&wire, existing, params.a_mix);
                Some((h, e, p, wire))
            })
            .collect();
        for &e in &pending {
            if !candidates.iter().flatten().any(|c| c.1 == e) {
                return Err(RouteError::Unroutable(e));
            }
        }
        let (_, e, p, wire) = candidates
            .into_iter()
            .flatten()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .expect("at least one candidate exists");
        prune_around(&mut graph, &wire, clearance);
        pending.retain(|&x| x != e);
        free_ports.retain(|&x| x != p);
        wires.push(wire);
        node_counts.push(graph.node_count());
    }
    Ok(RoutingOutcome { wires, graph, node_counts })
}

/// Removes the wire's nodes and every live edge within `clearance` of it.
pub fn prune_around(graph: &mut RoutingGraph, wire: &WirePath, clearance: f64) {
    for &n in &wire.node_sequence {
        graph.remove_node(n);
    }
    let segs: Vec<(Point, Point)> = if wire.points.len() == 1 {
        vec![(wire.points[0], wire.points[0])]
    } else {
        wire.points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let doomed: Vec<(usize, usize)> = graph
        .edges()
        .filter(|&(a, b, _)| {
            let (pa, pb) = (graph.position(a), graph.position(b));
            segs.iter().any(|(q0, q1)| geom::segment_segment_distance(&pa, &pb, q0, q1) < clearance)
        })
        .map(|(a, b, _)| (a, b))
        .collect();
    for (a, b) in doomed {
        graph.remove_edge(a, b);
    }
}

/// Smoothed wire centreline with a circular profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubedWire {
    pub port_id: usize,
    pub electrode_id: usize,
    #[serde(with = "geom::points_serde")]
    pub centerline: Vec<Point>,
    pub radius: f64,
    pub length: f64,
}

/// Endpoints plus the midpoint of every edge. Interior nodes are dropped so
/// the spline rounds corners while staying on cleared graph edges.
fn corner_cut_controls(points: &[Point]) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(points.len() + 1);
    out.push(points[0]);
    out.extend(points.windows(2).map(|w| Point::from((w[0].coords + w[1].coords) * 0.5)));
    out.push(points[points.len() - 1]);
    out
}

/// Rounds a routed wire into a smooth centreline and attaches its profile.
pub fn tube_wire(path: &WirePath, profile_radius: f64, smoothing_samples: usize) -> Result<TubedWire, RouteError> {
    if !(profile_radius > 0.0) {
        return Err(RouteError::InvalidParameter { name: "profile_radius", reason: format!("must be positive, got {profile_radius}") });
    }
    let centerline = geom::catmull_rom_open(&corner_cut_controls(&path.points), smoothing_samples);
    let length = geom::polyline_length(&centerline);
    Ok(TubedWire { port_id: path.port_id, electrode_id: path.electrode_id, centerline, radius: profile_radius, length })
}

/// Sweeps a `sides`-gon along each centreline for visual inspection.
pub fn tubes_to_obj(tubes: &[TubedWire], sides: usize) -> String {
    let sides = sides.max(3);
    let mut out = String::new();
    let mut base = 1usize;
    for t in tubes {
        let n = t.centerline.len();
        if n < 2 {
            continue;
        }
        let _ = writeln!(out, "o wire_{}_{}", t.port_id, t.electrode_id);
        let mut prev_u: Option<Vector> = None;
        for i in 0..n {
            let a = t.centerline[i.saturating_sub(1)];
            let b = t.centerline[(i + 1).min(n - 1)];
            let tan = (b - a).try_normalize(1e-15).unwrap_or_else(Vector::x);
            // parallel-transport the ring frame to avoid twisting
            let seed = prev_u.unwrap_or_else(|| if tan.x.abs() < 0.9 { Vector::x() } else { Vector::y() });
            let u = (seed - tan * seed.dot(&tan)).try_normalize(1e-15).unwrap_or_else(|| tan.cross(&Vector::z()).normalize());
            let v = tan.cross(&u);
            prev_u = Some(u);
            for k in 0..sides {
                let ang = std::f64::consts::TAU * k as f64 / sides as f64;
                let p = t.centerline[i] + (u * ang.cos() + v * ang.sin()) * t.radius;
                let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
            }
        }
        for i in 0..n - 1 {
            for k in 0..sides {
                let a = base + i * sides + k;
                let b = base + i * sides + (k + 1) % sides;
                let c = base + (i + 1) * sides + (k + 1) % sides;
                let d = base + (i + 1) * sides + k;
                let _ = writeln!(out, "f {a} {b} {c}");
                let _ = writeln!(out, "f {a} {c} {d}");
            }
        }
        base += n * sides;
    }
    out
}

/// Exhaustive check that no routing node is used by two wires.
pub fn wires_are_disjoint(wires: &[WirePath]) -> bool {
    for i in 0..wires.len() {
        for j in i + 1..wires.len() {
            if wires[i].node_sequence.iter().any(|n| wires[j].node_sequence.contains(n)) {
                return false;
            }
        }
    }
    true
}
