//! Semantic hierarchy with depth-weighted edges and shortest-path distances.
//!
//! Edges run parent → child. The hierarchy is a DAG with a single root; a
//! node may have several parents. Node depth is the hop count of the
//! shortest root path, and an edge weighs `2^-l` where `l` is the depth of
//! its parent endpoint, so paths through general (shallow) concepts cost
//! more than paths through specific ones. Distances are shortest paths over
//! the undirected view of the graph.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Index of a node in a [`TaxonomyGraph`]. Indices follow the ascending
/// order of the external node ids, so they do not depend on file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A node that belongs to the declared class vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(pub(crate) u32);

impl LabelId {
    pub fn node(self) -> NodeId {
        NodeId(self.0)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub synset: String,
    pub name: String,
}

/// How edge weights are derived from the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightScheme {
    /// `2^-l` with `l` the depth of the edge's parent.
    #[default]
    Depth,
    /// Every edge weighs 1; distances become hop counts.
    Unit,
}

/// Weight of an edge whose parent sits at depth `parent_depth`.
pub fn edge_weight(parent_depth: u32) -> f64 {
    (-(parent_depth as f64)).exp2()
}

/// The 0-1 discrepancy between two labels.
pub fn zero_one_distance(a: LabelId, b: LabelId) -> u8 {
    u8::from(a != b)
}

/// Collects nodes, edges and label declarations before validation.
#[derive(Debug, Default, Clone)]
pub struct TaxonomyBuilder {
    nodes: Vec<Node>,
    edges: Vec<(String, String)>,
    labels: Vec<String>,
}

impl TaxonomyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, id: impl Into<String>, synset: impl Into<String>, name: impl Into<String>) -> &mut Self {
        self.nodes.push(Node {
            id: id.into(),
            synset: synset.into(),
            name: name.into(),
        });
        self
    }

    pub fn edge(&mut self, parent: impl Into<String>, child: impl Into<String>) -> &mut Self {
        self.edges.push((parent.into(), child.into()));
        self
    }

    pub fn label(&mut self, id: impl Into<String>) -> &mut Self {
        self.labels.push(id.into());
        self
    }

    pub fn build(&self) -> Result<TaxonomyGraph> {
        self.build_with(WeightScheme::Depth)
    }

    pub fn build_with(&self, scheme: WeightScheme) -> Result<TaxonomyGraph> {
        TaxonomyGraph::assemble(self, scheme)
    }
}

pub struct TaxonomyGraph {
    nodes: Vec<Node>,
    index: HashMap<String, u32>,
    /// Sorted `(parent, child)` pairs.
    edges: Vec<(u32, u32)>,
    weights: Vec<f64>,
    /// Undirected adjacency: `(neighbour, weight)`.
    adjacency: Vec<Vec<(u32, f64)>>,
    root: u32,
    depth: Vec<u32>,
    labels: Vec<LabelId>,
    is_label: Vec<bool>,
    scheme: WeightScheme,
    /// Per-source single-source distances, filled lazily.
    weighted_cache: Vec<OnceLock<Box<[f64]>>>,
}

impl fmt::Debug for TaxonomyGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaxonomyGraph")
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges.len())
            .field("labels", &self.labels.len())
            .field("root", &self.nodes[self.root as usize].id)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl Clone for TaxonomyGraph {
    fn clone(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            edges: self.edges.clone(),
            weights: self.weights.clone(),
            adjacency: self.adjacency.clone(),
            root: self.root,
            depth: self.depth.clone(),
            labels: self.labels.clone(),
            is_label: self.is_label.clone(),
            scheme: self.scheme,
            weighted_cache: empty_cache(self.nodes.len()),
        }
    }
}

fn empty_cache(n: usize) -> Vec<OnceLock<Box<[f64]>>> {
    (0..n).map(|_| OnceLock::new()).collect()
}

impl TaxonomyGraph {
    /// Reads the line-oriented taxonomy format:
    ///
    /// ```text
    /// # comment
    /// N <node_id> <synset_id> <name...>
    /// E <parent_id> <child_id>
    /// L <node_id>
    /// ```
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut builder = TaxonomyBuilder::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::parse(origin, lineno + 1, msg);
            let mut parts = line.splitn(2, char::is_whitespace);
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default().trim_start();
            match tag {
                "N" => {
                    let mut f = rest.splitn(3, char::is_whitespace);
                    let (Some(id), Some(synset)) = (f.next(), f.next()) else {
                        return Err(err("node line needs `N <node_id> <synset_id> <name>`"));
                    };
                    let name = f.next().map(str::trim).unwrap_or_default();
                    if name.is_empty() {
                        return Err(err("node line is missing a name"));
                    }
                    builder.node(id, synset, name);
                }
                "E" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [parent, child] = f[..] else {
                        return Err(err("edge line needs `E <parent_id> <child_id>`"));
                    };
                    builder.edge(parent, child);
                }
                "L" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [id] = f[..] else {
                        return Err(err("label line needs `L <node_id>`"));
                    };
                    builder.label(id);
                }
                other => return Err(err(&format!("unknown record type `{other}`"))),
            }
        }
        builder.build()
    }

    fn assemble(b: &TaxonomyBuilder, scheme: WeightScheme) -> Result<Self> {
        if b.nodes.is_empty() {
            return Err(Error::Taxonomy("no nodes".into()));
        }
        let mut nodes = b.nodes.clone();
        nodes.sort_by(|x, y| x.id.cmp(&y.id));
        if let Some(w) = nodes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Taxonomy(format!("duplicate node `{}`", w[0].id)));
        }
        let index: HashMap<String, u32> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i as u32))
            .collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Taxonomy(format!("edge references unknown node `{id}`")))
        };

        let mut edge_set = BTreeSet::new();
        for (p, c) in &b.edges {
            let e = (lookup(p)?, lookup(c)?);
            if !edge_set.insert(e) {
                return Err(Error::Taxonomy(format!("duplicate edge {p} -> {c}")));
            }
        }
        let edges: Vec<(u32, u32)> = edge_set.into_iter().collect();
        let n = nodes.len();
        let mut children = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        let mut touched = vec![false; n];
        for &(p, c) in &edges {
            children[p as usize].push(c);
            indegree[c as usize] += 1;
            touched[p as usize] = true;
            touched[c as usize] = true;
        }

        if has_cycle(&children) {
            return Err(Error::Taxonomy("cycle detected".into()));
        }
        if n > 1 {
            if let Some(i) = touched.iter().position(|t| !t) {
                return Err(Error::Taxonomy(format!("orphan node `{}`", nodes[i].id)));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let root = match roots[..] {
            [r] => r as u32,
            [] => return Err(Error::Taxonomy("no root node".into())),
            _ => {
                let names: Vec<&str> = roots.iter().map(|&i| nodes[i].id.as_str()).collect();
                return Err(Error::Taxonomy(format!("multiple roots: {}", names.join(", "))));
            }
        };

        // Min-hop depth from the root along parent -> child edges.
        let mut depth = vec![u32::MAX; n];
        depth[root as usize] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u as usize] {
                if depth[c as usize] == u32::MAX {
                    depth[c as usize] = depth[u as usize] + 1;
                    queue.push_back(c);
                }
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == u32::MAX) {
            return Err(Error::Taxonomy(format!(
                "orphan node `{}` unreachable from root",
                nodes[i].id
            )));
        }

        let weights: Vec<f64> = edges
            .iter()
            .map(|&(p, _)| match scheme {
                WeightScheme::Depth => edge_weight(depth[p as usize]),
                WeightScheme::Unit => 1.0,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        for (&(p, c), &w) in edges.iter().zip(&weights) {
            adjacency[p as usize].push((c, w));
            adjacency[c as usize].push((p, w));
        }

        let mut is_label = vec![false; n];
        for id in &b.labels {
            let i = index
                .get(id.as_str())
                .ok_or_else(|| Error::Taxonomy(format!("label references unknown node `{id}`")))?;
            if std::mem::replace(&mut is_label[*i as usize], true) {
                return Err(Error::Taxonomy(format!("duplicate label `{id}`")));
            }
        }
        let labels = (0..n as u32).filter(|&i| is_label[i as usize]).map(LabelId).collect();

        Ok(Self {
            weighted_cache: empty_cache(n),
            nodes,
            index,
            edges,
            weights,
            adjacency,
            root,
            depth,
            labels,
            is_label,
            scheme,
        })
    }

    /// Same hierarchy with every edge weight forced to 1.
    pub fn with_unit_weights(&self) -> Self {
        self.rescheme(WeightScheme::Unit)
    }

    pub fn rescheme(&self, scheme: WeightScheme) -> Self {
        let weights: Vec<f64> = self
            .edges
            .iter()
            .map(|&(p, _)| match scheme {
                WeightScheme::Depth => edge_weight(self.depth[p as usize]),
                WeightScheme::Unit => 1.0,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); self.nodes.len()];
        for (&(p, c), &w) in self.edges.iter().zip(&weights) {
            adjacency[p as usize].push((c, w));
            adjacency[c as usize].push((p, w));
        }
        Self {
            weights,
            adjacency,
            scheme,
            weighted_cache: empty_cache(self.nodes.len()),
            ..self.clone()
        }
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        NodeId(self.root)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn node_id(&self, external: &str) -> Option<NodeId> {
        self.index.get(external).copied().map(NodeId)
    }

    pub fn depth(&self, id: NodeId) -> u32 {
        self.depth[id.index()]
    }

    /// `(parent, child, weight)` for every edge, sorted by `(parent, child)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.edges
            .iter()
            .zip(&self.weights)
            .map(|(&(p, c), &w)| (NodeId(p), NodeId(c), w))
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn label(&self, external: &str) -> Result<LabelId> {
        match self.index.get(external) {
            Some(&i) if self.is_label[i as usize] => Ok(LabelId(i)),
            _ => Err(Error::UnknownLabel(external.to_string())),
        }
    }

    pub fn as_label(&self, id: NodeId) -> Option<LabelId> {
        self.is_label[id.index()].then_some(LabelId(id.0))
    }

    pub fn label_key(&self, label: LabelId) -> &str {
        &self.nodes[label.index()].id
    }

    pub fn label_name(&self, label: LabelId) -> &str {
        &self.nodes[label.index()].name
    }

    /// Weighted shortest-path length between two labels. The per-source
    /// distance table is computed once and shared across threads.
    pub fn semantic_distance(&self, a: LabelId, b: LabelId) -> f64 {
        if a == b {
            return 0.0;
        }
        // Both directions give the same value; key the cache on the smaller
        // index so a pair is always served from the same table.
        let (s, t) = if a <= b { (a, b) } else { (b, a) };
        self.distances_from(s.node())[t.index()]
    }

    /// Distances from `source` to every node.
    pub fn distances_from(&self, source: NodeId) -> &[f64] {
        self.weighted_cache[source.index()].get_or_init(|| self.dijkstra(source.0))
    }

    pub fn hop_distance(&self, a: LabelId, b: LabelId) -> u32 {
        if a == b {
            return 0;
        }
        self.hops_from(a.node())[b.index()]
    }

    /// Unweighted BFS hop counts from `source`.
    pub fn hops_from(&self, source: NodeId) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.nodes.len()];
        dist[source.index()] = 0;
        let mut queue = VecDeque::from([source.0]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adjacency[u as usize] {
                if dist[v as usize] == u32::MAX {
                    dist[v as usize] = dist[u as usize] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn dijkstra(&self, source: u32) -> Box<[f64]> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[source as usize] = 0.0;
        heap.push(Frontier {
            cost: 0.0,
            node: source,
        });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if cost > dist[node as usize] {
                continue;
            }
            for &(next, w) in &self.adjacency[node as usize] {
                let alt = cost + w;
                if alt < dist[next as usize] {
                    dist[next as usize] = alt;
                    heap.push(Frontier { cost: alt, node: next });
                }
            }
        }
        dist.into_boxed_slice()
    }

    /// Writes the graph back in the text format, nodes and edges sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("N {} {} {}\n", n.id, n.synset, n.name));
        }
        for &(p, c) in &self.edges {
            out.push_str(&format!(
                "E {} {}\n",
                self.nodes[p as usize].id, self.nodes[c as usize].id
            ));
        }
        for l in &self.labels {
            out.push_str(&format!("L {}\n", self.nodes[l.index()].id));
        }
        out
    }
}

#[derive(Debug, PartialEq)]
struct Frontier {
    cost: f64,
    node: u32,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn has_cycle(children: &[Vec<u32>]) -> bool {
    // Iterative three-colour DFS.
    const WHITE: u8 = 0;
    const GREY: u8 = 1;
    const BLACK: u8 = 2;
    let mut colour = vec![WHITE; children.len()];
    for start in 0..children.len() {
        if colour[start] != WHITE {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        colour[start] = GREY;
        while let Some((u, next)) = stack.last_mut() {
            if let Some(&v) = children[*u].get(*next) {
                *next += 1;
                match colour[v as usize] {
                    GREY => return true,
                    WHITE => {
                        colour[v as usize] = GREY;
                        stack.push((v as usize, 0));
                    }
                    _ => {}
                }
            } else {
                colour[*u] = BLACK;
                stack.pop();
            }
        }
    }
    false
}
