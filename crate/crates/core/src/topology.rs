//! Group-partitioned directed networks with per-group messenger nodes.
//!
//! A topology is a set of `N` nodes split into `q` groups. Edges live only
//! inside a group; each group designates exactly one messenger, and the
//! messengers form their own connected overlay used to exchange group
//! estimates. The graph the penalties see is the symmetric within-group
//! adjacency; the messenger overlay is kept separate.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::rng::{stream, StreamId};

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("group {0} is not connected")]
    DisconnectedGroup(usize),
    #[error("group {group} claims two messengers: nodes {first} and {second}")]
    MessengerConflict {
        group: usize,
        first: usize,
        second: usize,
    },
    #[error("messenger {node} does not belong to group {group}")]
    MessengerOutsideGroup { node: usize, group: usize },
    #[error("group {0} has no messenger")]
    MissingMessenger(usize),
    #[error("edge ({0}, {1}) crosses group boundaries")]
    CrossGroupEdge(usize, usize),
    #[error("edge ({0}, {1}) is a self loop")]
    SelfLoop(usize, usize),
    #[error("node id {0} out of range (N = {1})")]
    NodeOutOfRange(usize, usize),
    #[error("messenger overlay is not connected")]
    DisconnectedOverlay,
    #[error("n_per_group must be nonempty with positive sizes")]
    EmptyGroups,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How to generate within-group edges in [`build_topology`].
#[derive(Debug, Clone)]
pub enum EdgeSpec {
    /// Explicit 0-based within-group edge list plus one messenger per group.
    Explicit {
        edges: Vec<(usize, usize)>,
        messengers: Vec<usize>,
    },
    /// Connect every node to its group messenger (lowest id in the group).
    StarToMessenger,
    /// Nodes get planar coordinates inside per-group regions tiling an
    /// `extent` x `extent` square; same-group pairs within `radius` are
    /// connected, and every node keeps an edge to its group messenger so
    /// the group stays connected.
    RandomGeometric { extent: f64, radius: f64 },
}

/// Immutable group-structured network. Safe to share read-only.
#[derive(Debug, Clone)]
pub struct Topology {
    n: usize,
    q: usize,
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    adj: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    messenger_of: Vec<usize>,
    messenger_edges: Vec<bool>,
    positions: Option<Vec<(f64, f64)>>,
}

impl Topology {
    /// Assembles and validates a topology from raw parts. `group_of` maps
    /// each node to a 0-based group id; `edges` are within-group pairs;
    /// `messengers[g]` is group g's messenger; `messenger_edges` are pairs
    /// of group ids (pass `None` for a complete overlay).
    pub fn from_parts(
        group_of: Vec<usize>,
        edges: &[(usize, usize)],
        messengers: Vec<usize>,
        messenger_edges: Option<&[(usize, usize)]>,
        positions: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, TopologyError> {
        let n = group_of.len();
        if n == 0 {
            return Err(TopologyError::EmptyGroups);
        }
        let q = messengers.len();
        let mut members = vec![Vec::new(); q];
        for (i, &g) in group_of.iter().enumerate() {
            if g >= q {
                return Err(TopologyError::NodeOutOfRange(g, q));
            }
            members[g].push(i);
        }
        if members.iter().any(|m| m.is_empty()) {
            return Err(TopologyError::EmptyGroups);
        }
        for (g, &m) in messengers.iter().enumerate() {
            if m >= n {
                return Err(TopologyError::NodeOutOfRange(m, n));
            }
            if group_of[m] != g {
                return Err(TopologyError::MessengerOutsideGroup { node: m, group: g });
            }
        }

        let mut adj = vec![false; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(TopologyError::NodeOutOfRange(i.max(j), n));
            }
            if i == j {
                return Err(TopologyError::SelfLoop(i, j));
            }
            if group_of[i] != group_of[j] {
                return Err(TopologyError::CrossGroupEdge(i, j));
            }
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| adj[i * n + j]).collect())
            .collect();

        let mut medges = vec![false; q * q];
        match messenger_edges {
            Some(pairs) => {
                for &(a, b) in pairs {
                    if a >= q || b >= q {
                        return Err(TopologyError::NodeOutOfRange(a.max(b), q));
                    }
                    if a != b {
                        medges[a * q + b] = true;
                        medges[b * q + a] = true;
                    }
                }
            }
            None => {
                for a in 0..q {
                    for b in 0..q {
                        if a != b {
                            medges[a * q + b] = true;
                        }
                    }
                }
            }
        }

        let topo = Topology {
            n,
            q,
            group_of,
            members,
            adj,
            neighbors,
            messenger_of: messengers,
            messenger_edges: medges,
            positions,
        };
        topo.validate()?;
        Ok(topo)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        for g in 0..self.q {
            if !bfs_connected(&self.members[g], |i, j| self.adj[i * self.n + j]) {
                return Err(TopologyError::DisconnectedGroup(g));
            }
        }
        let groups: Vec<usize> = (0..self.q).collect();
        if !bfs_connected(&groups, |a, b| self.messenger_edges[a * self.q + b]) {
            return Err(TopologyError::DisconnectedOverlay);
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn group_count(&self) -> usize {
        self.q
    }

    pub fn group_of(&self, node: usize) -> usize {
        self.group_of[node]
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn messenger_of(&self, group: usize) -> usize {
        self.messenger_of[group]
    }

    pub fn is_messenger(&self, node: usize) -> bool {
        self.messenger_of[self.group_of[node]] == node
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    /// In-group neighbors of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// Groups whose messengers are linked to `group`'s messenger.
    pub fn messenger_peers(&self, group: usize) -> Vec<usize> {
        (0..self.q)
            .filter(|&h| self.messenger_edges[group * self.q + h])
            .collect()
    }

    /// Planar node coordinates when the topology was built geometrically.
    pub fn positions(&self) -> Option<&[(f64, f64)]> {
        self.positions.as_deref()
    }

    /// Graph Laplacian `L = D - A` of the within-group adjacency.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            let deg = self.neighbors[i].len() as f64;
            l[(i, i)] = deg;
            for &j in &self.neighbors[i] {
                l[(i, j)] = -1.0;
            }
        }
        l
    }

    /// Laplacian of one group's subgraph, in member order.
    pub fn group_laplacian(&self, group: usize) -> DMatrix<f64> {
        let m = &self.members[group];
        let k = m.len();
        let mut l = DMatrix::zeros(k, k);
        for (a, &i) in m.iter().enumerate() {
            for (b, &j) in m.iter().enumerate() {
                if a != b && self.adj[i * self.n + j] {
                    l[(a, b)] = -1.0;
                    l[(a, a)] += 1.0;
                }
            }
        }
        l
    }

    /// Algebraic connectivity of the whole graph and of each group.
    pub fn algebraic_connectivity(&self) -> Connectivity {
        let whole = lambda2(&self.laplacian());
        let per_group = (0..self.q)
            .map(|g| lambda2(&self.group_laplacian(g)))
            .collect();
        Connectivity { whole, per_group }
    }

    /// Serializes to the plain-text edge-list format (1-based ids).
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.n, self.q);
        for (i, &g) in self.group_of.iter().enumerate() {
            let _ = writeln!(out, "group {} {}", i + 1, g + 1);
        }
        for (g, &m) in self.messenger_of.iter().enumerate() {
            let _ = writeln!(out, "messenger {} {}", g + 1, m + 1);
        }
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.adj[i * self.n + j] {
                    let _ = writeln!(out, "edge {} {}", i + 1, j + 1);
                }
            }
        }
        out
    }

    /// Parses the plain-text edge-list format. The messenger overlay is
    /// complete (the format does not carry overlay edges).
    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(TopologyError::Parse {
            line: 0,
            msg: "empty file".into(),
        })?;
        let parse_id = |line: usize, tok: Option<&str>, what: &str| -> Result<usize, TopologyError> {
            tok.ok_or_else(|| TopologyError::Parse {
                line,
                msg: format!("missing {what}"),
            })?
            .parse::<usize>()
            .map_err(|e| TopologyError::Parse {
                line,
                msg: format!("bad {what}: {e}"),
            })
        };
        let mut hdr = header.split_whitespace();
        let n = parse_id(hline, hdr.next(), "N")?;
        let q = parse_id(hline, hdr.next(), "q")?;
        if n == 0 || q == 0 {
            return Err(TopologyError::EmptyGroups);
        }
        let mut group_of = vec![usize::MAX; n];
        let mut messengers: Vec<Option<usize>> = vec![None; q];
        let mut edges = Vec::new();
        for (lineno, line) in lines {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("group") => {
                    let node = parse_id(lineno, toks.next(), "node id")?;
                    let gid = parse_id(lineno, toks.next(), "group id")?;
                    if node == 0 || node > n || gid == 0 || gid > q {
                        return Err(TopologyError::Parse {
                            line: lineno,
                            msg: format!("id out of range in `{line}`"),
                        });
                    }
                    group_of[node - 1] = gid - 1;
                }
                Some("messenger") => {
                    let gid = parse_id(lineno, toks.next(), "group id")?;
                    let node = parse_id(lineno, toks.next(), "node id")?;
                    if node == 0 || node > n || gid == 0 || gid > q {
                        return Err(TopologyError::Parse {
                            line: lineno,
                            msg: format!("id out of range in `{line}`"),
                        });
                    }
                    if let Some(prev) = messengers[gid - 1] {
                        return Err(TopologyError::MessengerConflict {
                            group: gid - 1,
                            first: prev,
                            second: node - 1,
                        });
                    }
                    messengers[gid - 1] = Some(node - 1);
                }
                Some("edge") => {
                    let i = parse_id(lineno, toks.next(), "node id")?;
                    let j = parse_id(lineno, toks.next(), "node id")?;
                    if i == 0 || i > n || j == 0 || j > n {
                        return Err(TopologyError::Parse {
                            line: lineno,
                            msg: format!("id out of range in `{line}`"),
                        });
                    }
                    edges.push((i - 1, j - 1));
                }
                Some(other) => {
                    return Err(TopologyError::Parse {
                        line: lineno,
                        msg: format!("unknown record `{other}`"),
                    })
                }
                None => unreachable!(),
            }
        }
        if let Some(node) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(TopologyError::Parse {
                line: 0,
                msg: format!("node {} has no group line", node + 1),
            });
        }
        let messengers = messengers
            .into_iter()
            .enumerate()
            .map(|(g, m)| m.ok_or(TopologyError::MissingMessenger(g)))
            .collect::<Result<Vec<_>, _>>()?;
        Topology::from_parts(group_of, &edges, messengers, None, None)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<(), TopologyError> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn read_edge_list(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_edge_list(&text)
    }
}

/// Per-group and whole-graph algebraic connectivity.
#[derive(Debug, Clone)]
pub struct Connectivity {
    pub whole: f64,
    pub per_group: Vec<f64>,
}

/// Builds a topology with `n_per_group[g]` nodes in group g, numbered
/// consecutively. Construction fails rather than repairing an invalid spec.
pub fn build_topology(
    n_per_group: &[usize],
    spec: &EdgeSpec,
    seed: u64,
) -> Result<Topology, TopologyError> {
    if n_per_group.is_empty() || n_per_group.contains(&0) {
        return Err(TopologyError::EmptyGroups);
    }
    let q = n_per_group.len();
    let mut group_of = Vec::new();
    let mut first_of_group = Vec::with_capacity(q);
    for (g, &ng) in n_per_group.iter().enumerate() {
        first_of_group.push(group_of.len());
        group_of.extend(std::iter::repeat(g).take(ng));
    }

    match spec {
        EdgeSpec::Explicit { edges, messengers } => {
            if messengers.len() != q {
                return Err(TopologyError::MissingMessenger(messengers.len()));
            }
            Topology::from_parts(group_of, edges, messengers.clone(), None, None)
        }
        EdgeSpec::StarToMessenger => {
            let messengers = first_of_group.clone();
            let mut edges = Vec::new();
            for (g, &m) in messengers.iter().enumerate() {
                let lo = first_of_group[g];
                for i in lo..lo + n_per_group[g] {
                    if i != m {
                        edges.push((m, i));
                    }
                }
            }
            Topology::from_parts(group_of, &edges, messengers, None, None)
        }
        EdgeSpec::RandomGeometric { extent, radius } => {
            let mut rng = stream(seed, StreamId::Topology);
            // Tile the square into ceil(sqrt(q)) x ceil(sqrt(q)) regions so
            // groups are geographically separated.
            let cols = (q as f64).sqrt().ceil() as usize;
            let rows = q.div_ceil(cols);
            let (rw, rh) = (extent / cols as f64, extent / rows as f64);
            let mut positions = Vec::with_capacity(group_of.len());
            for (g, &ng) in n_per_group.iter().enumerate() {
                let (cx, cy) = ((g % cols) as f64 * rw, (g / cols) as f64 * rh);
                for _ in 0..ng {
                    let x = cx + rng.gen::<f64>() * rw;
                    let y = cy + rng.gen::<f64>() * rh;
                    positions.push((x, y));
                }
            }
            let messengers = first_of_group.clone();
            let mut edges = Vec::new();
            for (g, &m) in messengers.iter().enumerate() {
                let lo = first_of_group[g];
                let hi = lo + n_per_group[g];
                for i in lo..hi {
                    for j in (i + 1)..hi {
                        let (dx, dy) = (
                            positions[i].0 - positions[j].0,
                            positions[i].1 - positions[j].1,
                        );
                        let within = (dx * dx + dy * dy).sqrt() <= *radius;
                        if within || i == m || j == m {
                            edges.push((i, j));
                        }
                    }
                }
            }
            Topology::from_parts(group_of, &edges, messengers, None, Some(positions))
        }
    }
}

/// Second-smallest eigenvalue of a symmetric Laplacian; 0 for sizes < 2.
pub fn lambda2(laplacian: &DMatrix<f64>) -> f64 {
    if laplacian.nrows() < 2 {
        return 0.0;
    }
    let mut eigs: Vec<f64> = laplacian
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigs.sort_by(|a, b| a.total_cmp(b));
    eigs[1].max(0.0)
}

/// Breadth-first search connectivity over `nodes` under `linked`.
pub fn bfs_connected(nodes: &[usize], linked: impl Fn(usize, usize) -> bool) -> bool {
    match nodes.len() {
        0 => return true,
        1 => return true,
        _ => {}
    }
    let mut seen = vec![false; nodes.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(a) = queue.pop_front() {
        for b in 0..nodes.len() {
            if !seen[b] && linked(nodes[a], nodes[b]) {
                seen[b] = true;
                count += 1;
                queue.push_back(b);
            }
        }
    }
    count == nodes.len()
}

/// Stacks per-node consensus differences `sum_j a_ij (w_i - w_j)` over the
/// whole graph; equals `(L (x) I_p) vec(W)` column by column.
pub fn laplacian_action(topo: &Topology, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..topo.node_count() {
        let mut col = DVector::zeros(w.nrows());
        for &j in topo.neighbors(i) {
            col += w.column(i) - w.column(j);
        }
        out.set_column(i, &col);
    }
    out
}
