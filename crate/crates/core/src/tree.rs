//! Vessel trees: spanning forest construction, per-domain rooting, and
//! splitting at bifurcations into segments joined by parent->child
//! connections.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{distance, CenterlineGraph};

/// Endpoint tolerance for the shared parent/child point.
pub const JOINT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    LD,
    RD,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::LD => f.write_str("LD"),
            Domain::RD => f.write_str("RD"),
        }
    }
}

/// Ostium metadata: which centerline point (or segment) roots which domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRoot {
    pub domain: Domain,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub domain: Domain,
    pub points: Vec<[f64; 3]>,
}

impl Segment {
    pub fn first(&self) -> [f64; 3] {
        self.points[0]
    }

    pub fn last(&self) -> [f64; 3] {
        self.points[self.points.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Segments of one case with their parent->child connections. Connections
/// and roots refer to positions in `segments`, not to segment ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VesselTree {
    pub segments: Vec<Segment>,
    pub connections: Vec<(usize, usize)>,
    pub roots: Vec<(Domain, usize)>,
}

impl VesselTree {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.segments.len()];
        for &(p, c) in &self.connections {
            parent[c] = Some(p);
        }
        parent
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.segments.len()];
        for &(p, c) in &self.connections {
            children[p].push(c);
        }
        children
    }

    /// Checks every structural invariant: one tree per domain, a single parent
    /// per non-root segment, shared joints, and (optionally) bounded point
    /// spacing.
    pub fn validate(&self, max_step: Option<f64>) -> Result<()> {
        let n = self.segments.len();
        let mut seen_ids = std::collections::HashSet::new();
        for (i, s) in self.segments.iter().enumerate() {
            if s.points.is_empty() {
                return Err(Error::MalformedCase(format!("segment {} has no points", s.id)));
            }
            if !seen_ids.insert(s.id) {
                return Err(Error::MalformedCase(format!("duplicate segment id {}", s.id)));
            }
            if let Some(limit) = max_step {
                for w in s.points.windows(2) {
                    let d = distance(w[0], w[1]);
                    if d > limit {
                        return Err(Error::MalformedCase(format!(
                            "segment {} (index {i}) has a step of {d:.3} > {limit:.3}",
                            s.id
                        )));
                    }
                }
            }
        }
        let mut parent = vec![None; n];
        for &(p, c) in &self.connections {
            if p >= n || c >= n || p == c {
                return Err(Error::MalformedCase(format!("invalid connection ({p}, {c})")));
            }
            if parent[c].replace(p).is_some() {
                return Err(Error::MalformedCase(format!(
                    "segment {} has more than one parent",
                    self.segments[c].id
                )));
            }
            if self.segments[p].domain != self.segments[c].domain {
                return Err(Error::MalformedCase(format!(
                    "connection ({}, {}) crosses domains",
                    self.segments[p].id, self.segments[c].id
                )));
            }
            let gap = distance(self.segments[p].last(), self.segments[c].first());
            if gap > JOINT_TOLERANCE {
                return Err(Error::MalformedCase(format!(
                    "segments {} -> {} do not share an endpoint (gap {gap:.3e})",
                    self.segments[p].id, self.segments[c].id
                )));
            }
        }
        let mut domains = Vec::new();
        for &(domain, r) in &self.roots {
            if r >= n {
                return Err(Error::InvalidRoot(format!("root index {r} out of range")));
            }
            if parent[r].is_some() {
                return Err(Error::InvalidRoot(format!(
                    "root segment {} has a parent",
                    self.segments[r].id
                )));
            }
            if self.segments[r].domain != domain || domains.contains(&domain) {
                return Err(Error::InvalidRoot(format!(
                    "root segment {} does not uniquely root domain {domain}",
                    self.segments[r].id
                )));
            }
            domains.push(domain);
        }
        // Every segment must reach a root by following parents.
        let children = self.children();
        let mut reached = vec![false; n];
        let mut queue: VecDeque<usize> = self.roots.iter().map(|&(_, r)| r).collect();
        for &r in &queue {
            reached[r] = true;
        }
        while let Some(s) = queue.pop_front() {
            for &c in &children[s] {
                if !reached[c] {
                    reached[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(Error::MalformedCase(format!(
                "segment {} is not reachable from any domain root",
                self.segments[i].id
            )));
        }
        Ok(())
    }
}

/// Rooted view of one connected component. `source` maps local point indices
/// back to the input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RootedTree {
    pub domain: Domain,
    pub graph: CenterlineGraph,
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub source: Vec<usize>,
}

impl RootedTree {
    /// Children of every node, sorted lexicographically by position.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.graph.len()];
        for (node, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(node);
            }
        }
        for list in &mut children {
            list.sort_by(|&a, &b| {
                lexicographic(self.graph.position(a), self.graph.position(b)).then(a.cmp(&b))
            });
        }
        children
    }
}

fn lexicographic(a: [f64; 3], b: [f64; 3]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal spanning forest minimizing total Euclidean edge length. Equal
/// lengths are broken by endpoint indices so the result is deterministic.
pub fn minimum_spanning_tree(graph: &CenterlineGraph) -> CenterlineGraph {
    let mut edges: Vec<(f64, usize, usize)> = graph
        .edges
        .iter()
        .map(|&(a, b)| (graph.edge_length((a, b)), a.min(b), a.max(b)))
        .collect();
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut dsu = DisjointSet::new(graph.len());
    let mut kept: Vec<(usize, usize)> = edges
        .into_iter()
        .filter(|&(_, a, b)| a != b && dsu.union(a, b))
        .map(|(_, a, b)| (a, b))
        .collect();
    kept.sort_unstable();
    CenterlineGraph {
        points: graph.points.clone(),
        edges: kept,
    }
}

/// Splits a spanning forest into one rooted tree per ostium.
pub fn split_domains(forest: &CenterlineGraph, roots: &[DomainRoot]) -> Result<Vec<RootedTree>> {
    let (label, count) = forest.components();
    if count > 2 {
        return Err(Error::MalformedCase(format!(
            "{count} connected components; expected one per domain (at most 2)"
        )));
    }
    let mut root_of_component: Vec<Option<DomainRoot>> = vec![None; count];
    let mut domains_seen = Vec::new();
    for r in roots {
        if r.index >= forest.len() {
            return Err(Error::InvalidRoot(format!(
                "root point {} is not in the graph ({} points)",
                r.index,
                forest.len()
            )));
        }
        if domains_seen.contains(&r.domain) {
            return Err(Error::InvalidRoot(format!("domain {} listed twice", r.domain)));
        }
        domains_seen.push(r.domain);
        let c = label[r.index];
        if let Some(prev) = root_of_component[c] {
            return Err(Error::InvalidRoot(format!(
                "points {} and {} both root the same component",
                prev.index, r.index
            )));
        }
        root_of_component[c] = Some(*r);
    }
    let adj = forest.adjacency();
    let mut trees = Vec::with_capacity(count);
    for (c, root) in root_of_component.iter().enumerate() {
        let root = root.ok_or_else(|| {
            Error::MalformedCase(format!("connected component {c} has no root"))
        })?;
        // BFS orientation away from the root; discovery order becomes the local index.
        let mut local = vec![usize::MAX; forest.len()];
        let mut source = vec![root.index];
        let mut parent = vec![None];
        local[root.index] = 0;
        let mut queue = VecDeque::from([root.index]);
        while let Some(p) = queue.pop_front() {
            for &q in &adj[p] {
                if local[q] == usize::MAX {
                    local[q] = source.len();
                    source.push(q);
                    parent.push(Some(local[p]));
                    queue.push_back(q);
                } else if parent[local[p]] != Some(local[q]) {
                    return Err(Error::MalformedCase(format!(
                        "component {c} contains a cycle through point {q}"
                    )));
                }
            }
        }
        let points = source.iter().map(|&i| forest.points[i].clone()).collect();
        let edges = parent
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (p, i)))
            .collect();
        trees.push(RootedTree {
            domain: root.domain,
            graph: CenterlineGraph { points, edges },
            root: 0,
            parent,
            source,
        });
    }
    trees.sort_by_key(|t| t.domain);
    Ok(trees)
}

/// Splits a rooted tree at branch points (nodes with two or more children).
/// Branch points are duplicated as the shared endpoint of parent and child.
/// Segment ids follow breadth-first order from the root segment.
pub fn split_segments(tree: &RootedTree) -> VesselTree {
    let children = tree.children();
    let pos = |i: usize| tree.graph.position(i);
    let walk = |start: Option<usize>, first: usize| -> (Vec<[f64; 3]>, usize) {
        let mut points: Vec<[f64; 3]> = start.map(pos).into_iter().collect();
        let mut cur = first;
        points.push(pos(cur));
        while children[cur].len() == 1 {
            cur = children[cur][0];
            points.push(pos(cur));
        }
        (points, cur)
    };

    let mut segments = Vec::new();
    let mut ends = Vec::new();
    let mut connections = Vec::new();
    let (root_points, root_end) = if children[tree.root].len() == 1 {
        walk(None, tree.root)
    } else {
        (vec![pos(tree.root)], tree.root)
    };
    segments.push(Segment {
        id: 0,
        domain: tree.domain,
        points: root_points,
    });
    ends.push(root_end);

    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        let end = ends[s];
        if children[end].len() < 2 {
            continue;
        }
        for &c in &children[end] {
            let (points, child_end) = walk(Some(end), c);
            let id = segments.len();
            segments.push(Segment {
                id,
                domain: tree.domain,
                points,
            });
            ends.push(child_end);
            connections.push((s, id));
            queue.push_back(id);
        }
    }
    VesselTree {
        segments,
        connections,
        roots: vec![(tree.domain, 0)],
    }
}

/// Concatenates per-domain trees, renumbering ids and indices in order.
pub fn merge_domains(trees: Vec<VesselTree>) -> VesselTree {
    let mut out = VesselTree::default();
    for tree in trees {
        let offset = out.segments.len();
        out.segments
            .extend(tree.segments.into_iter().enumerate().map(|(i, mut s)| {
                s.id = offset + i;
                s
            }));
        out.connections
            .extend(tree.connections.iter().map(|&(p, c)| (p + offset, c + offset)));
        out.roots
            .extend(tree.roots.iter().map(|&(d, r)| (d, r + offset)));
    }
    out
}

/// Full tree construction: spanning forest, rooting, and splitting.
pub fn build_vessel_tree(graph: &CenterlineGraph, roots: &[DomainRoot]) -> Result<VesselTree> {
    if graph.is_empty() {
        return Err(Error::EmptyInput("centerline graph has no points".into()));
    }
    graph.validate()?;
    let forest = minimum_spanning_tree(graph);
    let rooted = split_domains(&forest, roots)?;
    Ok(merge_domains(rooted.iter().map(split_segments).collect()))
}
