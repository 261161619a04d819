//! Node identifier spaces, CSR interaction graphs and symmetric degree
//! normalisation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
}

impl NodeKind {
    pub fn tag(self) -> &'static str {
        match self {
            NodeKind::User => "u",
            NodeKind::Item => "i",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub kind: NodeKind,
    pub domain: DomainId,
}

/// Canonical external key of a node, used by embedding files and caches.
pub fn node_key(domain: &str, kind: NodeKind, key: &str) -> String {
    format!("{domain}|{}|{key}", kind.tag())
}

/// Symmetric CSR adjacency. Edge values are 1.0 before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    edge_values: Vec<f64>,
}

impl Graph {
    pub fn empty(num_nodes: usize) -> Self {
        Self { num_nodes, row_offsets: vec![0; num_nodes + 1], col_indices: Vec::new(), edge_values: Vec::new() }
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored directed entries (twice the undirected edge count).
    #[inline]
    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.nnz() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn edge_values(&self) -> &[f64] {
        &self.edge_values
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.row_offsets[node + 1] - self.row_offsets[node]
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    #[inline]
    pub fn row(&self, node: usize) -> (&[usize], &[f64]) {
        let r = self.row_offsets[node]..self.row_offsets[node + 1];
        (&self.col_indices[r.clone()], &self.edge_values[r])
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Undirected edges as `(a, b)` with `a < b`, in CSR order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.nnz() / 2);
        for a in 0..self.num_nodes {
            for &b in self.neighbors(a) {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// SHA-256 over the CSR arrays.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_nodes as u64).to_le_bytes());
        for &o in &self.row_offsets {
            h.update((o as u64).to_le_bytes());
        }
        for &c in &self.col_indices {
            h.update((c as u64).to_le_bytes());
        }
        for &v in &self.edge_values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.num_nodes]; self.num_nodes];
        for a in 0..self.num_nodes {
            let (cols, vals) = self.row(a);
            for (&b, &v) in cols.iter().zip(vals) {
                m[a][b] = v;
            }
        }
        m
    }
}

/// Build a symmetric, deduplicated, row-sorted CSR graph from undirected
/// pairs. Every stored value is 1.0.
pub fn build_csr(edges: &[(usize, usize)], num_nodes: usize) -> Result<Graph> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        if a >= num_nodes || b >= num_nodes {
            return Err(Error::Graph(format!("edge ({a}, {b}) has an endpoint outside 0..{num_nodes}")));
        }
        if a == b {
            return Err(Error::Graph(format!("self-loop ({a}, {b})")));
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut row_offsets = Vec::with_capacity(num_nodes + 1);
    let mut col_indices = Vec::new();
    row_offsets.push(0);
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
        col_indices.extend_from_slice(row);
        row_offsets.push(col_indices.len());
    }
    let edge_values = vec![1.0; col_indices.len()];
    Ok(Graph { num_nodes, row_offsets, col_indices, edge_values })
}

/// Symmetric-normalised adjacency `D^{-1/2} A D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGraph {
    inner: Graph,
}

impl NormalizedGraph {
    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.inner.num_nodes
    }

    #[inline]
    pub fn row(&self, node: usize) -> (&[usize], &[f64]) {
        self.inner.row(node)
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.inner.degree(node)
    }

    pub fn structure(&self) -> &Graph {
        &self.inner
    }

    pub fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.inner.to_dense()
    }
}

pub fn symmetric_normalize(g: &Graph) -> NormalizedGraph {
    let inv_sqrt: Vec<f64> = (0..g.num_nodes)
        .map(|n| {
            let d = g.degree(n);
            if d == 0 {
                0.0
            } else {
                1.0 / (d as f64).sqrt()
            }
        })
        .collect();
    let mut inner = g.clone();
    for a in 0..g.num_nodes {
        let r = g.row_offsets[a]..g.row_offsets[a + 1];
        for idx in r {
            let b = g.col_indices[idx];
            inner.edge_values[idx] = g.edge_values[idx] * inv_sqrt[a] * inv_sqrt[b];
        }
    }
    NormalizedGraph { inner }
}

/// A graph placed at `offset` inside a larger node space.
#[derive(Clone, Copy, Debug)]
pub struct GraphPart<'a> {
    pub graph: &'a Graph,
    pub offset: usize,
}

/// Disjoint union of `parts` plus `extra_edges`, in a node space of
/// `num_nodes`. Extra edges that duplicate an existing edge collapse into a
/// single unit edge.
pub fn merge_graphs(num_nodes: usize, parts: &[GraphPart<'_>], extra_edges: &[(usize, usize)]) -> Result<Graph> {
    let mut ranges: Vec<Range<usize>> = parts.iter().map(|p| p.offset..p.offset + p.graph.num_nodes()).collect();
    ranges.sort_by_key(|r| (r.start, r.end));
    for w in ranges.windows(2) {
        if w[0].end > w[1].start {
            return Err(Error::Graph(format!("overlapping node ranges {:?} and {:?}", w[0], w[1])));
        }
    }
    if let Some(last) = ranges.last() {
        if last.end > num_nodes {
            return Err(Error::Graph(format!("part range {last:?} exceeds merged node count {num_nodes}")));
        }
    }
    let mut edges =
        Vec::with_capacity(parts.iter().map(|p| p.graph.num_undirected_edges()).sum::<usize>() + extra_edges.len());
    for p in parts {
        edges.extend(p.graph.undirected_edges().into_iter().map(|(a, b)| (a + p.offset, b + p.offset)));
    }
    edges.extend_from_slice(extra_edges);
    build_csr(&edges, num_nodes)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainInfo {
    pub name: String,
    pub is_target: bool,
    pub users: Range<usize>,
    pub items: Range<usize>,
}

impl DomainInfo {
    pub fn range(&self) -> Range<usize> {
        self.users.start..self.items.end
    }

    pub fn num_nodes(&self) -> usize {
        self.items.end - self.users.start
    }
}

/// Registry of every node across domains plus the per-domain interaction
/// subgraphs. Domains occupy contiguous id ranges in registration order
/// (users first, then items, each sorted by key); the target domain, if any,
/// comes last.
#[derive(Clone, Debug)]
pub struct GraphUniverse {
    domains: Vec<DomainInfo>,
    keys: Vec<String>,
    meta: Vec<NodeMeta>,
    lookup: HashMap<String, NodeId>,
    /// Per-domain subgraph in domain-local indexing.
    subgraphs: Vec<Graph>,
}

/// Collects nodes before the universe is frozen.
#[derive(Debug, Default)]
pub struct UniverseBuilder {
    domain_names: Vec<String>,
    target: Option<usize>,
    users: Vec<BTreeSet<String>>,
    items: Vec<BTreeSet<String>>,
}

impl UniverseBuilder {
    /// `sources` followed by an optional `target` define the domain order.
    pub fn new(sources: &[String], target: Option<&str>) -> Result<Self> {
        let mut domain_names: Vec<String> = sources.to_vec();
        let target = target.map(|t| {
            domain_names.push(t.to_string());
            domain_names.len() - 1
        });
        let uniq: BTreeSet<&String> = domain_names.iter().collect();
        if uniq.len() != domain_names.len() {
            return Err(Error::InvalidArgument("duplicate domain name".into()));
        }
        if domain_names.iter().any(|d| d.is_empty()) {
            return Err(Error::InvalidArgument("empty domain name".into()));
        }
        let n = domain_names.len();
        Ok(Self { domain_names, target, users: vec![BTreeSet::new(); n], items: vec![BTreeSet::new(); n] })
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }

    pub fn register(&mut self, domain: usize, kind: NodeKind, key: &str) {
        match kind {
            NodeKind::User => self.users[domain].insert(key.to_string()),
            NodeKind::Item => self.items[domain].insert(key.to_string()),
        };
    }

    pub fn freeze(self) -> GraphUniverse {
        let mut domains = Vec::with_capacity(self.domain_names.len());
        let mut keys = Vec::new();
        let mut meta = Vec::new();
        for (d, name) in self.domain_names.iter().enumerate() {
            let u0 = keys.len();
            for k in &self.users[d] {
                keys.push(node_key(name, NodeKind::User, k));
                meta.push(NodeMeta { kind: NodeKind::User, domain: DomainId(d) });
            }
            let i0 = keys.len();
            for k in &self.items[d] {
                keys.push(node_key(name, NodeKind::Item, k));
                meta.push(NodeMeta { kind: NodeKind::Item, domain: DomainId(d) });
            }
            domains.push(DomainInfo {
                name: name.clone(),
                is_target: self.target == Some(d),
                users: u0..i0,
                items: i0..keys.len(),
            });
        }
        let lookup = keys.iter().enumerate().map(|(i, k)| (k.clone(), NodeId(i))).collect();
        let subgraphs = domains.iter().map(|d| Graph::empty(d.num_nodes())).collect();
        GraphUniverse { domains, keys, meta, lookup, subgraphs }
    }
}

impl GraphUniverse {
    pub fn num_nodes(&self) -> usize {
        self.keys.len()
    }

    pub fn domains(&self) -> &[DomainInfo] {
        &self.domains
    }

    pub fn domain(&self, d: DomainId) -> &DomainInfo {
        &self.domains[d.0]
    }

    pub fn domain_by_name(&self, name: &str) -> Option<DomainId> {
        self.domains.iter().position(|d| d.name == name).map(DomainId)
    }

    pub fn target(&self) -> Option<DomainId> {
        self.domains.iter().position(|d| d.is_target).map(DomainId)
    }

    pub fn source_domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.domains.iter().enumerate().filter(|(_, d)| !d.is_target).map(|(i, _)| DomainId(i))
    }

    /// Contiguous id range covering every source-domain node.
    pub fn source_range(&self) -> Range<usize> {
        let end = self.domains.iter().filter(|d| !d.is_target).map(|d| d.items.end).max().unwrap_or(0);
        0..end
    }

    pub fn key(&self, id: NodeId) -> &str {
        &self.keys[id.0]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn meta(&self, id: NodeId) -> NodeMeta {
        self.meta[id.0]
    }

    pub fn metas(&self) -> &[NodeMeta] {
        &self.meta
    }

    pub fn lookup(&self, key: &str) -> Option<NodeId> {
        self.lookup.get(key).copied()
    }

    pub fn resolve(&self, domain: DomainId, kind: NodeKind, key: &str) -> Option<NodeId> {
        self.lookup(&node_key(&self.domains[domain.0].name, kind, key))
    }

    /// Install the interaction edges of one domain, given as global
    /// `(user, item)` ids.
    pub fn set_domain_edges(&mut self, d: DomainId, pairs: &[(NodeId, NodeId)]) -> Result<()> {
        let info = &self.domains[d.0];
        let start = info.users.start;
        let mut local = Vec::with_capacity(pairs.len());
        for &(u, v) in pairs {
            if !info.users.contains(&u.0) || !info.items.contains(&v.0) {
                return Err(Error::Graph(format!("edge ({u}, {v}) is not a user-item pair of domain `{}`", info.name)));
            }
            local.push((u.0 - start, v.0 - start));
        }
        self.subgraphs[d.0] = build_csr(&local, info.num_nodes())?;
        Ok(())
    }

    pub fn subgraph(&self, d: DomainId) -> &Graph {
        &self.subgraphs[d.0]
    }
}
