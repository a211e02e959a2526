//! River–reservoir network topology and stream-distance adjacency.
//!
//! Nodes are indexed with segments first (`0..N`) and reservoirs after
//! (`N..N+M`) whenever a single flat index is needed, e.g. in
//! [`AdjacencyMatrix`].

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("flow graph contains a cycle")]
    CycleDetected,
    #[error("edge {from} -> {to} is not a valid {class} edge")]
    BadEdgeClass {
        from: NodeId,
        to: NodeId,
        class: EdgeClass,
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("stream distance must be positive and finite, got {0}")]
    BadDistance(f64),
    #[error("all stream distances are equal; standardization is undefined")]
    DegenerateDistances,
    #[error("network has no connected node pairs")]
    NoEdges,
    #[error("edges.csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Segment,
    Reservoir,
}

impl NodeKind {
    fn as_str(self) -> &'static str {
        match self {
            NodeKind::Segment => "segment",
            NodeKind::Reservoir => "reservoir",
        }
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "segment" | "seg" | "s" => Ok(NodeKind::Segment),
            "reservoir" | "res" | "r" => Ok(NodeKind::Reservoir),
            other => Err(format!("unknown node kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeId {
    pub const fn segment(index: usize) -> Self {
        Self {
            kind: NodeKind::Segment,
            index,
        }
    }

    pub const fn reservoir(index: usize) -> Self {
        Self {
            kind: NodeKind::Reservoir,
            index,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Segment => write!(f, "seg{}", self.index),
            NodeKind::Reservoir => write!(f, "res{}", self.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeClass {
    SegToSeg,
    SegToRes,
    ResToSeg,
}

impl EdgeClass {
    pub fn endpoints(self) -> (NodeKind, NodeKind) {
        match self {
            EdgeClass::SegToSeg => (NodeKind::Segment, NodeKind::Segment),
            EdgeClass::SegToRes => (NodeKind::Segment, NodeKind::Reservoir),
            EdgeClass::ResToSeg => (NodeKind::Reservoir, NodeKind::Segment),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            EdgeClass::SegToSeg => "seg_to_seg",
            EdgeClass::SegToRes => "seg_to_res",
            EdgeClass::ResToSeg => "res_to_seg",
        }
    }
}

impl fmt::Display for EdgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "seg_to_seg" | "ss" => Ok(EdgeClass::SegToSeg),
            "seg_to_res" | "sr" => Ok(EdgeClass::SegToRes),
            "res_to_seg" | "rs" => Ok(EdgeClass::ResToSeg),
            other => Err(format!("unknown edge class `{other}`")),
        }
    }
}

/// A direct flow connection with the stream distance between outlets (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub class: EdgeClass,
    pub stream_distance: f64,
}

impl Edge {
    pub fn new(source: NodeId, target: NodeId, stream_distance: f64) -> Self {
        let class = match (source.kind, target.kind) {
            (NodeKind::Segment, NodeKind::Segment) => EdgeClass::SegToSeg,
            (NodeKind::Segment, NodeKind::Reservoir) => EdgeClass::SegToRes,
            // Reservoir-to-reservoir is not a valid class; build_topology rejects it.
            (NodeKind::Reservoir, _) => EdgeClass::ResToSeg,
        };
        Self {
            source,
            target,
            class,
            stream_distance,
        }
    }
}

/// A connected (upstream, downstream) pair in one of the modeled edge sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectedPair {
    pub from: NodeId,
    pub to: NodeId,
    pub class: EdgeClass,
    pub distance: f64,
}

/// Immutable network with its reachability closures.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    n_segments: usize,
    n_reservoirs: usize,
    edges: Vec<Edge>,
    topo_order: Vec<NodeId>,
    /// S(k): segments anywhere upstream of reservoir k.
    res_upstream_segments: Vec<Vec<usize>>,
    /// S_dn(k): segments anywhere downstream of reservoir k.
    res_downstream_segments: Vec<Vec<usize>>,
    /// M(i): reservoirs anywhere upstream of segment i.
    seg_upstream_reservoirs: Vec<Vec<usize>>,
    /// N(i): segments anywhere upstream of segment i.
    seg_upstream_segments: Vec<Vec<usize>>,
    pairs: Vec<ConnectedPair>,
}

impl NetworkTopology {
    pub fn build(n_segments: usize, n_reservoirs: usize, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let total = n_segments + n_reservoirs;
        let flat = |id: NodeId| match id.kind {
            NodeKind::Segment => id.index,
            NodeKind::Reservoir => n_segments + id.index,
        };
        let unflat = |i: usize| {
            if i < n_segments {
                NodeId::segment(i)
            } else {
                NodeId::reservoir(i - n_segments)
            }
        };

        let mut children: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
        let mut indegree = vec![0usize; total];
        for e in &edges {
            for id in [e.source, e.target] {
                let limit = match id.kind {
                    NodeKind::Segment => n_segments,
                    NodeKind::Reservoir => n_reservoirs,
                };
                if id.index >= limit {
                    return Err(GraphError::UnknownNode(id));
                }
            }
            if (e.source.kind, e.target.kind) != e.class.endpoints() {
                return Err(GraphError::BadEdgeClass {
                    from: e.source,
                    to: e.target,
                    class: e.class,
                });
            }
            if !(e.stream_distance > 0.0) || !e.stream_distance.is_finite() {
                return Err(GraphError::BadDistance(e.stream_distance));
            }
            children[flat(e.source)].push((flat(e.target), e.stream_distance));
            indegree[flat(e.target)] += 1;
        }

        // Kahn's algorithm; leftover nodes mean a cycle.
        let mut queue: VecDeque<usize> = (0..total).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(total);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, _) in &children[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        if order.len() != total {
            return Err(GraphError::CycleDetected);
        }

        // Shortest downstream distance from every node, relaxed in topological order.
        let mut pairs = Vec::new();
        let mut res_up = vec![Vec::new(); n_reservoirs];
        let mut res_dn = vec![Vec::new(); n_reservoirs];
        let mut seg_up_res = vec![Vec::new(); n_segments];
        let mut seg_up_seg = vec![Vec::new(); n_segments];
        let position: Vec<usize> = {
            let mut p = vec![0; total];
            for (i, &u) in order.iter().enumerate() {
                p[u] = i;
            }
            p
        };
        for src in 0..total {
            let mut dist = vec![f64::INFINITY; total];
            dist[src] = 0.0;
            for &u in &order[position[src]..] {
                if !dist[u].is_finite() {
                    continue;
                }
                for &(v, d) in &children[u] {
                    let cand = dist[u] + d;
                    if cand < dist[v] {
                        dist[v] = cand;
                    }
                }
            }
            let from = unflat(src);
            for (dst, &d) in dist.iter().enumerate() {
                if dst == src || !d.is_finite() {
                    continue;
                }
                let to = unflat(dst);
                let class = match (from.kind, to.kind) {
                    (NodeKind::Segment, NodeKind::Segment) => {
                        seg_up_seg[to.index].push(from.index);
                        EdgeClass::SegToSeg
                    }
                    (NodeKind::Segment, NodeKind::Reservoir) => {
                        res_up[to.index].push(from.index);
                        EdgeClass::SegToRes
                    }
                    (NodeKind::Reservoir, NodeKind::Segment) => {
                        res_dn[from.index].push(to.index);
                        seg_up_res[to.index].push(from.index);
                        EdgeClass::ResToSeg
                    }
                    // Reservoirs in series interact only through the segments between them.
                    (NodeKind::Reservoir, NodeKind::Reservoir) => continue,
                };
                pairs.push(ConnectedPair {
                    from,
                    to,
                    class,
                    distance: d,
                });
            }
        }

        Ok(Self {
            n_segments,
            n_reservoirs,
            edges,
            topo_order: order.into_iter().map(unflat).collect(),
            res_upstream_segments: res_up,
            res_downstream_segments: res_dn,
            seg_upstream_reservoirs: seg_up_res,
            seg_upstream_segments: seg_up_seg,
            pairs,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn n_reservoirs(&self) -> usize {
        self.n_reservoirs
    }

    pub fn n_nodes(&self) -> usize {
        self.n_segments + self.n_reservoirs
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo_order
    }

    pub fn flat_index(&self, id: NodeId) -> usize {
        match id.kind {
            NodeKind::Segment => id.index,
            NodeKind::Reservoir => self.n_segments + id.index,
        }
    }

    /// S(k)
    pub fn upstream_segments_of_reservoir(&self, k: usize) -> &[usize] {
        &self.res_upstream_segments[k]
    }

    /// S_dn(k)
    pub fn downstream_segments_of_reservoir(&self, k: usize) -> &[usize] {
        &self.res_downstream_segments[k]
    }

    /// M(i)
    pub fn upstream_reservoirs_of_segment(&self, i: usize) -> &[usize] {
        &self.seg_upstream_reservoirs[i]
    }

    /// N(i)
    pub fn upstream_segments_of_segment(&self, i: usize) -> &[usize] {
        &self.seg_upstream_segments[i]
    }

    /// Union of S_dn(k) over all reservoirs, sorted.
    pub fn reservoir_downstream_union(&self) -> Vec<usize> {
        let mut flag = vec![false; self.n_segments];
        for dn in &self.res_downstream_segments {
            for &i in dn {
                flag[i] = true;
            }
        }
        (0..self.n_segments).filter(|&i| flag[i]).collect()
    }

    /// The segment each reservoir's release enters first (smallest stream distance).
    pub fn nearest_downstream_segment(&self, k: usize) -> Option<usize> {
        self.pairs
            .iter()
            .filter(|p| p.class == EdgeClass::ResToSeg && p.from.index == k)
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
            .map(|p| p.to.index)
    }

    /// Every connected pair of the three modeled edge sets, with path distance.
    pub fn connected_pairs(&self) -> &[ConnectedPair] {
        &self.pairs
    }
}

/// How stream distances are standardized before the logistic transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeScope {
    /// One z-score over all connected pairs jointly.
    #[default]
    Global,
    /// A separate z-score within each edge class.
    PerClass,
}

/// `(N+M) x (N+M)` adjacency levels; entry `(i, j)` is the influence of node
/// `i` on downstream node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n_segments: usize,
    n_reservoirs: usize,
    data: Vec<f64>,
}

fn logistic_of_negated(z: f64) -> f64 {
    1.0 / (1.0 + z.exp())
}

fn z_scores(values: &[f64]) -> Result<Vec<f64>, GraphError> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(GraphError::DegenerateDistances);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

impl AdjacencyMatrix {
    /// Strict form: zero-variance distances are reported as
    /// [`GraphError::DegenerateDistances`].
    pub fn compute_strict(topology: &NetworkTopology, scope: StandardizeScope) -> Result<Self, GraphError> {
        Self::compute_impl(topology, scope, false)
    }

    /// Zero-variance distance groups get standardized distance 0 (weight 0.5)
    /// and a logged warning.
    pub fn compute(topology: &NetworkTopology, scope: StandardizeScope) -> Self {
        Self::compute_impl(topology, scope, true).expect("lenient adjacency is total")
    }

    fn compute_impl(
        topology: &NetworkTopology,
        scope: StandardizeScope,
        lenient: bool,
    ) -> Result<Self, GraphError> {
        let size = topology.n_nodes();
        let mut out = Self {
            n_segments: topology.n_segments,
            n_reservoirs: topology.n_reservoirs,
            data: vec![0.0; size * size],
        };
        let pairs = topology.connected_pairs();
        if pairs.is_empty() {
            return if lenient { Ok(out) } else { Err(GraphError::NoEdges) };
        }
        let groups: Vec<Vec<usize>> = match scope {
            StandardizeScope::Global => vec![(0..pairs.len()).collect()],
            StandardizeScope::PerClass => [EdgeClass::SegToSeg, EdgeClass::SegToRes, EdgeClass::ResToSeg]
                .iter()
                .map(|c| (0..pairs.len()).filter(|&i| pairs[i].class == *c).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .collect(),
        };
        for group in groups {
            let raw: Vec<f64> = group.iter().map(|&i| pairs[i].distance).collect();
            let z = match z_scores(&raw) {
                Ok(z) => z,
                Err(e) if lenient => {
                    log::warn!("{e}; using uniform adjacency 0.5 for {} pair(s)", raw.len());
                    vec![0.0; raw.len()]
                }
                Err(e) => return Err(e),
            };
            for (&i, zi) in group.iter().zip(z) {
                let p = &pairs[i];
                let (a, b) = (topology.flat_index(p.from), topology.flat_index(p.to));
                out.data[a * size + b] = logistic_of_negated(zi);
            }
        }
        Ok(out)
    }

    pub fn size(&self) -> usize {
        self.n_segments + self.n_reservoirs
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.size() + to]
    }

    pub fn weight(&self, from: NodeId, to: NodeId) -> f64 {
        let flat = |id: NodeId| match id.kind {
            NodeKind::Segment => id.index,
            NodeKind::Reservoir => self.n_segments + id.index,
        };
        self.get(flat(from), flat(to))
    }

    /// `N x N` matrix whose row `i` holds `A_ji` over upstream segments `j`,
    /// so that `seg_aggregation() * H` sums upstream hidden states per segment.
    pub fn seg_aggregation(&self) -> Tensor {
        let n = self.n_segments;
        Tensor::from_fn(n, n, |i, j| self.get(j, i))
    }

    /// `M x N`: row `k` holds `A_ik` over segments `i` (S(k) pattern).
    pub fn seg_to_res_aggregation(&self) -> Tensor {
        let (n, m) = (self.n_segments, self.n_reservoirs);
        Tensor::from_fn(m, n, |k, i| self.get(i, n + k))
    }

    /// `N x M`: row `i` holds `A_ki` over reservoirs `k` (M(i) pattern).
    pub fn res_to_seg_aggregation(&self) -> Tensor {
        let (n, m) = (self.n_segments, self.n_reservoirs);
        Tensor::from_fn(n, m, |i, k| self.get(n + k, i))
    }

    /// `M x N`: row `k` holds `A_ki` over segments `i` (S_dn(k) pattern).
    pub fn res_downstream_aggregation(&self) -> Tensor {
        let (n, m) = (self.n_segments, self.n_reservoirs);
        Tensor::from_fn(m, n, |k, i| self.get(n + k, i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    source_kind: String,
    source_id: usize,
    target_kind: String,
    target_id: usize,
    edge_class: String,
    stream_distance_m: f64,
}

/// Writes `edges.csv` rows for the topology's direct edges.
pub fn write_edges_csv<W: Write>(edges: &[Edge], writer: W) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    for e in edges {
        w.serialize(EdgeRecord {
            source_kind: e.source.kind.as_str().into(),
            source_id: e.source.index,
            target_kind: e.target.kind.as_str().into(),
            target_id: e.target.index,
            edge_class: e.class.as_str().into(),
            stream_distance_m: e.stream_distance,
        })
        .map_err(|e| GraphError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| GraphError::Csv(e.to_string()))
}

/// Parses `edges.csv`.
pub fn read_edges_csv<R: Read>(reader: R) -> Result<Vec<Edge>, GraphError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| GraphError::Csv(e.to_string()))?.clone();
    for col in [
        "source_kind",
        "source_id",
        "target_kind",
        "target_id",
        "edge_class",
        "stream_distance_m",
    ] {
        if !headers.iter().any(|h| h == col) {
            return Err(GraphError::Csv(format!("missing column `{col}`")));
        }
    }
    let mut edges = Vec::new();
    for rec in r.deserialize::<EdgeRecord>() {
        let rec = rec.map_err(|e| GraphError::Csv(e.to_string()))?;
        let sk: NodeKind = rec.source_kind.parse().map_err(GraphError::Csv)?;
        let tk: NodeKind = rec.target_kind.parse().map_err(GraphError::Csv)?;
        let class: EdgeClass = rec.edge_class.parse().map_err(GraphError::Csv)?;
        edges.push(Edge {
            source: NodeId { kind: sk, index: rec.source_id },
            target: NodeId { kind: tk, index: rec.target_id },
            class,
            stream_distance: rec.stream_distance_m,
        });
    }
    Ok(edges)
}
