//! Thresholded cosine-similarity edges between same-kind nodes, used to
//! bridge otherwise disconnected domain subgraphs.

mod cache;
mod lsh;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{dot, Dense};
use crate::error::{Error, Result};
use crate::fusion::l2_normalize;
use crate::graph::{DomainId, GraphUniverse, NodeKind, NodeMeta};

pub use cache::{read_neighbor_cache, write_neighbor_cache, NEIGHBOR_MAGIC};
pub use lsh::{recall as lsh_recall, LshConfig, LshIndex};

pub const DEFAULT_K_CAP: usize = 20;
pub const DEFAULT_GAMMA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    /// Endpoints in two different source domains.
    PretrainCrossDomain,
    /// Exactly one endpoint in the target domain.
    FinetuneSrcTgt,
    /// At least one endpoint in the target domain.
    FinetuneTgtGlobal,
}

impl EdgeMode {
    pub fn name(self) -> &'static str {
        match self {
            EdgeMode::PretrainCrossDomain => "pretrain-cross-domain",
            EdgeMode::FinetuneSrcTgt => "finetune-src-tgt",
            EdgeMode::FinetuneTgtGlobal => "finetune-tgt-global",
        }
    }
}

/// Kind and domain of every node, plus which domain is the target.
#[derive(Clone, Debug)]
pub struct DomainLabels {
    pub meta: Vec<NodeMeta>,
    pub target: Option<DomainId>,
}

impl DomainLabels {
    pub fn from_universe(u: &GraphUniverse) -> Self {
        Self { meta: u.metas().to_vec(), target: u.target() }
    }

    fn in_target(&self, n: usize) -> bool {
        Some(self.meta[n].domain) == self.target
    }

    /// Same kind, distinct nodes, and the mode's domain predicate.
    pub fn admits(&self, mode: EdgeMode, a: usize, b: usize) -> bool {
        if a == b || self.meta[a].kind != self.meta[b].kind {
            return false;
        }
        let (ta, tb) = (self.in_target(a), self.in_target(b));
        match mode {
            EdgeMode::PretrainCrossDomain => !ta && !tb && self.meta[a].domain != self.meta[b].domain,
            EdgeMode::FinetuneSrcTgt => ta != tb,
            EdgeMode::FinetuneTgtGlobal => ta || tb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub query: usize,
    /// `(candidate, cosine)` in descending cosine, ties by ascending index.
    pub neighbors: Vec<(usize, f64)>,
}

/// Rows scaled to unit length; zero rows stay zero so their cosine with
/// anything is 0.
pub fn unit_rows(matrix: &Dense) -> Dense {
    let mut out = matrix.clone();
    for i in 0..out.rows() {
        let r = l2_normalize(matrix.row(i));
        out.row_mut(i).copy_from_slice(&r);
    }
    out
}

fn rank(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Exact top-`k` cosine neighbours of each query among `candidates`,
/// excluding the query itself.
pub fn topk_cosine_neighbors(
    matrix: &Dense,
    queries: &[usize],
    candidates: &[usize],
    k: usize,
) -> Result<Vec<NeighborList>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("text matrix".into()));
    }
    let unit = unit_rows(matrix);
    Ok(topk_unit(&unit, queries, candidates, k))
}

fn topk_unit(unit: &Dense, queries: &[usize], candidates: &[usize], k: usize) -> Vec<NeighborList> {
    queries
        .par_iter()
        .map(|&q| {
            let qrow = unit.row(q);
            let scored = candidates.iter().filter(|&&c| c != q).map(|&c| (c, dot(qrow, unit.row(c)))).collect();
            NeighborList { query: q, neighbors: rank(scored, k) }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEdgeSet {
    /// `(a, b, cosine)` with `a < b`, sorted by `(a, b)`. Each undirected
    /// edge is stored once.
    pub edges: Vec<(usize, usize, f64)>,
    pub mode: EdgeMode,
    pub gamma: f64,
    pub k_cap: usize,
}

impl SemanticEdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(a, b, _)| (a, b)).collect()
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1)")))
    }
}

/// Keep listed pairs above `gamma` that satisfy the mode, symmetrise, then
/// admit edges in descending similarity while both endpoints have fewer
/// than `k_cap` edges.
pub fn build_semantic_edges(
    neighbors: &[NeighborList],
    gamma: f64,
    mode: EdgeMode,
    labels: &DomainLabels,
    k_cap: usize,
) -> Result<SemanticEdgeSet> {
    check_gamma(gamma)?;
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for list in neighbors {
        for &(c, sim) in &list.neighbors {
            if sim > gamma && labels.admits(mode, list.query, c) {
                let key = (list.query.min(c), list.query.max(c));
                let e = pairs.entry(key).or_insert(sim);
                *e = e.max(sim);
            }
        }
    }
    let mut ranked: Vec<((usize, usize), f64)> = pairs.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut degree = vec![0usize; labels.meta.len()];
    let mut edges = Vec::new();
    for ((a, b), sim) in ranked {
        if degree[a] < k_cap && degree[b] < k_cap {
            degree[a] += 1;
            degree[b] += 1;
            edges.push((a, b, sim));
        }
    }
    edges.sort_by_key(|x| (x.0, x.1));
    Ok(SemanticEdgeSet { edges, mode, gamma, k_cap })
}

/// Candidate search plan for a mode: each query group is paired with the
/// candidates that can satisfy the mode predicate.
pub fn query_groups(labels: &DomainLabels, mode: EdgeMode) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = labels.meta.len();
    let mut groups: BTreeMap<(NodeKind, DomainId), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry((labels.meta[i].kind, labels.meta[i].domain)).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((kind, dom), queries) in groups {
        let q_target = Some(dom) == labels.target;
        if mode == EdgeMode::PretrainCrossDomain && q_target {
            continue;
        }
        let candidates: Vec<usize> = (0..n)
            .filter(|&c| labels.meta[c].kind == kind)
            .filter(|&c| {
                let c_target = labels.in_target(c);
                match mode {
                    EdgeMode::PretrainCrossDomain => !c_target && labels.meta[c].domain != dom,
                    EdgeMode::FinetuneSrcTgt => c_target != q_target,
                    EdgeMode::FinetuneTgtGlobal => q_target || c_target,
                }
            })
            .collect();
        if !candidates.is_empty() {
            out.push((queries, candidates));
        }
    }
    out
}

/// Neighbour search backend.
#[derive(Clone, Debug, Default)]
pub enum SearchBackend {
    #[default]
    Exact,
    Lsh(LshConfig),
}

/// Top-`k` lists for every query of a mode, ordered by query index.
pub fn mode_neighbors(
    matrix: &Dense,
    labels: &DomainLabels,
    mode: EdgeMode,
    k: usize,
    backend: &SearchBackend,
) -> Result<Vec<NeighborList>> {
    if matrix.rows() != labels.meta.len() {
        return Err(Error::Shape(format!("{} text rows for {} nodes", matrix.rows(), labels.meta.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("text matrix".into()));
    }
    let unit = unit_rows(matrix);
    let mut lists = Vec::new();
    for (queries, candidates) in query_groups(labels, mode) {
        match backend {
            SearchBackend::Exact => lists.extend(topk_unit(&unit, &queries, &candidates, k)),
            SearchBackend::Lsh(cfg) => {
                let index = LshIndex::build(&unit, &candidates, cfg);
                lists.extend(index.query_all(&unit, &queries, k));
            }
        }
    }
    lists.sort_by_key(|l| l.query);
    Ok(lists)
}

/// Full pipeline for one mode: search then threshold.
pub fn semantic_edges(
    matrix: &Dense,
    labels: &DomainLabels,
    mode: EdgeMode,
    gamma: f64,
    k_cap: usize,
) -> Result<SemanticEdgeSet> {
    check_gamma(gamma)?;
    let lists = mode_neighbors(matrix, labels, mode, k_cap, &SearchBackend::Exact)?;
    build_semantic_edges(&lists, gamma, mode, labels, k_cap)
}
