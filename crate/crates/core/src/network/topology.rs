use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A reservoir. Levels in meters, areas in m², release caps in m³/s per
/// outgoing channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirNode {
    pub id: String,
    pub surface_area_m2: f64,
    pub h_safe: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub a_max: f64,
    pub flood_weight: f64,
    pub op_cost: f64,
    pub eco_region: String,
}

/// A directed channel between two reservoirs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub from: String,
    pub to: String,
    pub alpha_nominal: f64,
    pub distance_km: f64,
    pub delay_steps: usize,
}

impl Channel {
    pub fn id(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

/// Where one release slot of a node sends its water.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseTarget {
    /// Index into [`NetworkTopology::edges`].
    Edge(usize),
    /// The implicit river mouth of a node without downstream channels.
    Outlet,
}

/// Validated directed reservoir graph with precomputed adjacency.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    nodes: Vec<ReservoirNode>,
    edges: Vec<Channel>,
    index: HashMap<String, usize>,
    edge_from: Vec<usize>,
    edge_to: Vec<usize>,
    upstream: Vec<Vec<usize>>,
    downstream: Vec<Vec<usize>>,
    slots: Vec<Vec<ReleaseTarget>>,
    regions: HashMap<String, Vec<usize>>,
}

impl NetworkTopology {
    pub fn nodes(&self) -> &[ReservoirNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Channel] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &ReservoirNode {
        &self.nodes[i]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edge_endpoints(&self, e: usize) -> (usize, usize) {
        (self.edge_from[e], self.edge_to[e])
    }

    /// Incoming edge indices of node `i`.
    pub fn upstream_edges(&self, i: usize) -> &[usize] {
        &self.upstream[i]
    }

    /// Outgoing edge indices of node `i`.
    pub fn downstream_edges(&self, i: usize) -> &[usize] {
        &self.downstream[i]
    }

    /// N_i^up as node indices.
    pub fn upstream_nodes(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.upstream[i].iter().map(move |&e| self.edge_from[e])
    }

    /// N_i^down as node indices.
    pub fn downstream_nodes(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.downstream[i].iter().map(move |&e| self.edge_to[e])
    }

    /// N_i = N_i^up ∪ N_i^down, each neighbor paired with the connecting edge.
    /// A neighbor linked in both directions appears once, via its first edge.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &e in self.upstream[i].iter().chain(self.downstream[i].iter()) {
            let j = if self.edge_from[e] == i {
                self.edge_to[e]
            } else {
                self.edge_from[e]
            };
            if !out.iter().any(|&(k, _)| k == j) {
                out.push((j, e));
            }
        }
        out
    }

    /// Release slots of node `i`: one per downstream channel, or a single
    /// outlet slot when the node has no downstream channel.
    pub fn release_slots(&self, i: usize) -> &[ReleaseTarget] {
        &self.slots[i]
    }

    pub fn is_sink(&self, i: usize) -> bool {
        self.downstream[i].is_empty()
    }

    /// Members of the ecological region of node `i` (P_i), including `i`.
    pub fn region_members(&self, i: usize) -> &[usize] {
        &self.regions[&self.nodes[i].eco_region]
    }

    /// Whether the graph is a single simple path; returns the node order.
    pub fn chain_order(&self) -> Result<Vec<usize>> {
        if self.nodes.is_empty() {
            return Err(Error::NotAChain("no nodes".into()));
        }
        let heads: Vec<usize> = (0..self.len())
            .filter(|&i| self.upstream[i].is_empty())
            .collect();
        if heads.len() != 1 {
            return Err(Error::NotAChain(format!("{} head nodes", heads.len())));
        }
        let mut order = vec![heads[0]];
        let mut cur = heads[0];
        loop {
            match self.downstream[cur].as_slice() {
                [] => break,
                [e] => {
                    let next = self.edge_to[*e];
                    if self.upstream[next].len() != 1 || order.contains(&next) {
                        return Err(Error::NotAChain(format!(
                            "node {:?} merges or loops",
                            self.nodes[next].id
                        )));
                    }
                    order.push(next);
                    cur = next;
                }
                _ => {
                    return Err(Error::NotAChain(format!(
                        "node {:?} branches",
                        self.nodes[cur].id
                    )))
                }
            }
        }
        if order.len() != self.len() {
            return Err(Error::NotAChain("graph is disconnected".into()));
        }
        Ok(order)
    }

    fn has_cycle(&self) -> Option<usize> {
        // Kahn's algorithm: whatever cannot be peeled lies on or behind a cycle.
        let mut indeg: Vec<usize> = self.upstream.iter().map(Vec::len).collect();
        let mut stack: Vec<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = stack.pop() {
            seen += 1;
            for &e in &self.downstream[i] {
                let j = self.edge_to[e];
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    stack.push(j);
                }
            }
        }
        (seen < self.len()).then(|| (0..self.len()).find(|&i| indeg[i] > 0).unwrap())
    }
}

/// Defaults applied to node and edge entries that omit a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyDefaults {
    /// m²
    pub surface_area_m2: f64,
    /// m
    pub h_safe: f64,
    /// m
    pub h_min: f64,
    /// m
    pub h_max: f64,
    /// m³/s per outgoing channel
    pub a_max: f64,
    pub flood_weight: f64,
    /// cost units per m³/s released per step
    pub op_cost: f64,
    pub eco_region: String,
    /// in (0, 1]
    pub alpha_nominal: f64,
    /// km
    pub distance_km: f64,
    /// steps of Δt
    pub delay_steps: usize,
}

impl Default for TopologyDefaults {
    fn default() -> Self {
        Self {
            surface_area_m2: 1.0e5,
            h_safe: 8.0,
            h_min: 1.0,
            h_max: 10.0,
            a_max: 20.0,
            flood_weight: 1.0,
            op_cost: 0.0,
            eco_region: "default".into(),
            alpha_nominal: 0.95,
            distance_km: 10.0,
            delay_steps: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_area_m2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_safe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flood_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eco_region: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_nominal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_steps: Option<usize>,
}

/// Synthetic rows × cols cascade: every cell drains right and down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

/// Topology description as read from JSON: `nodes[]`, `edges[]`,
/// `defaults{}`, optionally `grid{rows, cols}` which appends a generated
/// cascade, and `acyclic` to reject cycles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub defaults: TopologyDefaults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub acyclic: bool,
}

impl TopologySpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Row-major cascade generator. Node `r{i}c{j}` drains to `r{i}c{j+1}`
    /// and `r{i+1}c{j}`; the ecological region is the row.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut spec = TopologySpec {
            grid: Some(GridSpec { rows, cols }),
            acyclic: true,
            ..Default::default()
        };
        spec.expand_grid();
        spec
    }

    fn expand_grid(&mut self) {
        let Some(GridSpec { rows, cols }) = self.grid.take() else {
            return;
        };
        let name = |r: usize, c: usize| format!("r{r}c{c}");
        for r in 0..rows {
            for c in 0..cols {
                self.nodes.push(NodeSpec {
                    id: name(r, c),
                    eco_region: Some(format!("row{r}")),
                    ..Default::default()
                });
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    self.edges.push(EdgeSpec {
                        from: name(r, c),
                        to: name(r, c + 1),
                        ..Default::default()
                    });
                }
                if r + 1 < rows {
                    self.edges.push(EdgeSpec {
                        from: name(r, c),
                        to: name(r + 1, c),
                        ..Default::default()
                    });
                }
            }
        }
    }

    /// Linear chain `n0 -> n1 -> ... -> n{len-1}` with the given efficiencies.
    pub fn chain(alphas: &[f64]) -> Self {
        let n = alphas.len() + 1;
        let mut spec = TopologySpec {
            acyclic: true,
            ..Default::default()
        };
        spec.nodes = (0..n)
            .map(|i| NodeSpec {
                id: format!("n{i}"),
                ..Default::default()
            })
            .collect();
        spec.edges = alphas
            .iter()
            .enumerate()
            .map(|(i, &a)| EdgeSpec {
                from: format!("n{i}"),
                to: format!("n{}", i + 1),
                alpha_nominal: Some(a),
                ..Default::default()
            })
            .collect();
        spec
    }
}

/// Validate a topology description and compute adjacency.
pub fn build_topology(spec: &TopologySpec) -> Result<NetworkTopology> {
    let mut spec = spec.clone();
    spec.expand_grid();
    let d = &spec.defaults;

    let mut nodes = Vec::with_capacity(spec.nodes.len());
    let mut index = HashMap::with_capacity(spec.nodes.len());
    for ns in &spec.nodes {
        let node = ReservoirNode {
            id: ns.id.clone(),
            surface_area_m2: ns.surface_area_m2.unwrap_or(d.surface_area_m2),
            h_safe: ns.h_safe.unwrap_or(d.h_safe),
            h_min: ns.h_min.unwrap_or(d.h_min),
            h_max: ns.h_max.unwrap_or(d.h_max),
            a_max: ns.a_max.unwrap_or(d.a_max),
            flood_weight: ns.flood_weight.unwrap_or(d.flood_weight),
            op_cost: ns.op_cost.unwrap_or(d.op_cost),
            eco_region: ns.eco_region.clone().unwrap_or_else(|| d.eco_region.clone()),
        };
        validate_node(&node)?;
        if index.insert(node.id.clone(), nodes.len()).is_some() {
            return Err(Error::DuplicateNode(node.id));
        }
        nodes.push(node);
    }

    let n = nodes.len();
    let mut edges = Vec::with_capacity(spec.edges.len());
    let mut edge_from = Vec::with_capacity(spec.edges.len());
    let mut edge_to = Vec::with_capacity(spec.edges.len());
    let mut upstream = vec![Vec::new(); n];
    let mut downstream = vec![Vec::new(); n];
    for es in &spec.edges {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| Error::DanglingEndpoint {
                from: es.from.clone(),
                to: es.to.clone(),
                missing: id.to_string(),
            })
        };
        let (i, j) = (lookup(&es.from)?, lookup(&es.to)?);
        let ch = Channel {
            from: es.from.clone(),
            to: es.to.clone(),
            alpha_nominal: es.alpha_nominal.unwrap_or(d.alpha_nominal),
            distance_km: es.distance_km.unwrap_or(d.distance_km),
            delay_steps: es.delay_steps.unwrap_or(d.delay_steps),
        };
        let bad = |reason: &str| Error::InvalidEdge {
            from: ch.from.clone(),
            to: ch.to.clone(),
            reason: reason.into(),
        };
        if i == j {
            return Err(bad("self-loop"));
        }
        if !(ch.alpha_nominal > 0.0 && ch.alpha_nominal <= 1.0) {
            return Err(bad("alpha_nominal must lie in (0, 1]"));
        }
        if !(ch.distance_km >= 0.0) {
            return Err(bad("distance_km must be nonnegative"));
        }
        if downstream[i].iter().any(|&e| edge_to[e] == j) {
            return Err(bad("duplicate channel"));
        }
        let e = edges.len();
        upstream[j].push(e);
        downstream[i].push(e);
        edge_from.push(i);
        edge_to.push(j);
        edges.push(ch);
    }

    let slots = downstream
        .iter()
        .map(|down| {
            if down.is_empty() {
                vec![ReleaseTarget::Outlet]
            } else {
                down.iter().map(|&e| ReleaseTarget::Edge(e)).collect()
            }
        })
        .collect();

    let mut regions: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, node) in nodes.iter().enumerate() {
        regions.entry(node.eco_region.clone()).or_default().push(i);
    }

    let topo = NetworkTopology {
        nodes,
        edges,
        index,
        edge_from,
        edge_to,
        upstream,
        downstream,
        slots,
        regions,
    };
    if spec.acyclic {
        if let Some(i) = topo.has_cycle() {
            return Err(Error::Cycle(topo.nodes[i].id.clone()));
        }
    }
    Ok(topo)
}

fn validate_node(node: &ReservoirNode) -> Result<()> {
    let bad = |reason: &str| {
        Err(Error::InvalidNode {
            node: node.id.clone(),
            reason: reason.into(),
        })
    };
    if !(node.surface_area_m2 > 0.0) {
        return bad("nonpositive area");
    }
    if !(node.h_min < node.h_safe && node.h_safe <= node.h_max) {
        return bad("requires h_min < h_safe <= h_max");
    }
    if !(node.a_max > 0.0) {
        return bad("a_max must be positive");
    }
    if !(node.flood_weight >= 0.0) {
        return bad("flood_weight must be nonnegative");
    }
    Ok(())
}
