//! Residual graph convolution (`H <- (1-a) * Â H + a * H`) and its adjoint.
//!
//! The operator `(1-a)Â + aI` is symmetric, so the backward pass applies the
//! same sparse kernel to the incoming gradient. Rows are processed in
//! parallel but each row reduction runs sequentially in column order, which
//! keeps results bitwise identical for any worker count.

use std::ops::Range;
use std::sync::Arc;

use num_traits::Float;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dense::Dense;
use crate::error::{shape_err, Error, Result};
use crate::graph::NormalizedGraph;

#[derive(Clone, Debug)]
pub struct PropagationPlan {
    graph: Arc<NormalizedGraph>,
    alpha: f64,
    layers: usize,
    id: u64,
}

impl PropagationPlan {
    pub fn new(graph: Arc<NormalizedGraph>, alpha: f64, layers: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        if layers == 0 {
            return Err(Error::InvalidArgument("layers must be >= 1".into()));
        }
        let mut h = Sha256::new();
        h.update(graph.fingerprint().as_bytes());
        h.update(alpha.to_le_bytes());
        h.update((layers as u64).to_le_bytes());
        let digest = h.finalize();
        let id = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Ok(Self { graph, alpha, layers, id })
    }

    pub fn graph(&self) -> &NormalizedGraph {
        &self.graph
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    fn check_rows<T>(&self, h: &Dense<T>) -> Result<()> {
        if h.rows() != self.graph.num_nodes() {
            return shape_err(format!("table has {} rows but graph has {} nodes", h.rows(), self.graph.num_nodes()));
        }
        Ok(())
    }

    /// One application of `(1-a)Â + aI`.
    fn step<T: Float + Send + Sync>(&self, h: &Dense<T>) -> Dense<T> {
        let cols = h.cols();
        let mut out = Dense::zeros(h.rows(), cols);
        if cols == 0 {
            return out;
        }
        let keep = T::from(self.alpha).unwrap();
        let mix = T::from(1.0 - self.alpha).unwrap();
        let graph = &self.graph;
        out.as_mut_slice().par_chunks_mut(cols).enumerate().for_each(|(i, dst)| {
            let (nbrs, vals) = graph.row(i);
            for (&j, &w) in nbrs.iter().zip(vals) {
                let w = T::from(w).unwrap();
                for (d, &x) in dst.iter_mut().zip(h.row(j)) {
                    *d = *d + w * x;
                }
            }
            for (d, &x) in dst.iter_mut().zip(h.row(i)) {
                *d = mix * *d + keep * x;
            }
        });
        out
    }

    /// `((1-a)Â + aI)^L · h` without retaining intermediates.
    pub fn apply<T: Float + Send + Sync>(&self, h: &Dense<T>) -> Result<Dense<T>> {
        self.check_rows(h)?;
        let mut cur = self.step(h);
        for _ in 1..self.layers {
            cur = self.step(&cur);
        }
        Ok(cur)
    }
}

/// Per-layer inputs retained by a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T = f64> {
    plan_id: u64,
    inputs: Vec<Dense<T>>,
}

impl<T> LayerCache<T> {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[Dense<T>] {
        &self.inputs
    }
}

pub fn grec_forward<T: Float + Send + Sync>(
    plan: &PropagationPlan,
    h0: &Dense<T>,
) -> Result<(Dense<T>, LayerCache<T>)> {
    plan.check_rows(h0)?;
    if !h0.is_finite() {
        return Err(Error::NonFinite("propagation input".into()));
    }
    let mut inputs = Vec::with_capacity(plan.layers);
    let mut cur = h0.clone();
    for _ in 0..plan.layers {
        let next = plan.step(&cur);
        inputs.push(cur);
        cur = next;
    }
    Ok((cur, LayerCache { plan_id: plan.id, inputs }))
}

pub fn grec_backward<T: Float + Send + Sync>(
    plan: &PropagationPlan,
    cache: &LayerCache<T>,
    grad_out: &Dense<T>,
) -> Result<Dense<T>> {
    if cache.plan_id != plan.id || cache.inputs.len() != plan.layers {
        return Err(Error::StaleCache("layer cache was produced by a different plan".into()));
    }
    let first = &cache.inputs[0];
    if first.shape() != grad_out.shape() {
        return Err(Error::StaleCache(format!(
            "gradient shape {:?} does not match cached {:?}",
            grad_out.shape(),
            first.shape()
        )));
    }
    plan.apply(grad_out)
}

/// Independent propagation over disjoint contiguous row blocks, e.g. one
/// block per domain subgraph.
#[derive(Clone, Debug)]
pub struct BlockPropagation {
    num_nodes: usize,
    blocks: Vec<(Range<usize>, PropagationPlan)>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T = f64> {
    caches: Vec<LayerCache<T>>,
}

impl BlockPropagation {
    /// Blocks must tile `0..num_nodes` exactly.
    pub fn new(num_nodes: usize, mut blocks: Vec<(Range<usize>, PropagationPlan)>) -> Result<Self> {
        blocks.sort_by_key(|(r, _)| r.start);
        let mut next = 0;
        for (r, plan) in &blocks {
            if r.start != next {
                return Err(Error::Graph(format!("node {next} is not covered by any domain subgraph")));
            }
            if r.len() != plan.num_nodes() {
                return Err(Error::Graph(format!(
                    "block {r:?} has {} rows but its graph has {} nodes",
                    r.len(),
                    plan.num_nodes()
                )));
            }
            next = r.end;
        }
        if next != num_nodes {
            return Err(Error::Graph(format!("nodes {next}..{num_nodes} are not covered by any domain subgraph")));
        }
        Ok(Self { num_nodes, blocks })
    }

    pub fn single(plan: PropagationPlan) -> Self {
        let n = plan.num_nodes();
        Self { num_nodes: n, blocks: vec![(0..n, plan)] }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn blocks(&self) -> &[(Range<usize>, PropagationPlan)] {
        &self.blocks
    }

    fn check_rows<T>(&self, h: &Dense<T>) -> Result<()> {
        if h.rows() != self.num_nodes {
            return shape_err(format!("table has {} rows but propagation spans {} nodes", h.rows(), self.num_nodes));
        }
        Ok(())
    }

    pub fn apply<T: Float + Send + Sync>(&self, h: &Dense<T>) -> Result<Dense<T>> {
        self.check_rows(h)?;
        if let [(_, plan)] = self.blocks.as_slice() {
            return plan.apply(h);
        }
        let mut out = Dense::zeros(h.rows(), h.cols());
        for (r, plan) in &self.blocks {
            let y = plan.apply(&h.slice_rows(r.start, r.end))?;
            out.as_mut_slice()[r.start * h.cols()..r.end * h.cols()].copy_from_slice(y.as_slice());
        }
        Ok(out)
    }

    pub fn forward<T: Float + Send + Sync>(&self, h: &Dense<T>) -> Result<(Dense<T>, BlockCache<T>)> {
        self.check_rows(h)?;
        if let [(_, plan)] = self.blocks.as_slice() {
            let (y, c) = grec_forward(plan, h)?;
            return Ok((y, BlockCache { caches: vec![c] }));
        }
        let mut out = Dense::zeros(h.rows(), h.cols());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (r, plan) in &self.blocks {
            let (y, c) = grec_forward(plan, &h.slice_rows(r.start, r.end))?;
            out.as_mut_slice()[r.start * h.cols()..r.end * h.cols()].copy_from_slice(y.as_slice());
            caches.push(c);
        }
        Ok((out, BlockCache { caches }))
    }

    pub fn backward<T: Float + Send + Sync>(&self, cache: &BlockCache<T>, grad: &Dense<T>) -> Result<Dense<T>> {
        self.check_rows(grad)?;
        if cache.caches.len() != self.blocks.len() {
            return Err(Error::StaleCache("block count changed since forward".into()));
        }
        if let ([(_, plan)], [c]) = (self.blocks.as_slice(), cache.caches.as_slice()) {
            return grec_backward(plan, c, grad);
        }
        let mut out = Dense::zeros(grad.rows(), grad.cols());
        for ((r, plan), c) in self.blocks.iter().zip(&cache.caches) {
            let g = grec_backward(plan, c, &grad.slice_rows(r.start, r.end))?;
            out.as_mut_slice()[r.start * grad.cols()..r.end * grad.cols()].copy_from_slice(g.as_slice());
        }
        Ok(out)
    }
}

/// Outputs of the two-level pre-training propagation.
pub struct HierarchicalOutput<T = f64> {
    pub local: Dense<T>,
    pub global: Dense<T>,
    pub local_cache: BlockCache<T>,
    pub global_cache: BlockCache<T>,
}

/// Propagate the domain-local table on each domain subgraph and the global
/// table on the semantic global graph. The two tables never mix.
pub fn hierarchical_pretrain_forward<T: Float + Send + Sync>(
    domain_plans: &BlockPropagation,
    global_plan: &BlockPropagation,
    local: &Dense<T>,
    global: &Dense<T>,
) -> Result<HierarchicalOutput<T>> {
    if domain_plans.num_nodes() != global_plan.num_nodes() {
        return Err(Error::Graph(format!(
            "global graph spans {} nodes but domain subgraphs cover {}",
            global_plan.num_nodes(),
            domain_plans.num_nodes()
        )));
    }
    let (local_out, local_cache) = domain_plans.forward(local)?;
    let (global_out, global_cache) = global_plan.forward(global)?;
    Ok(HierarchicalOutput { local: local_out, global: global_out, local_cache, global_cache })
}

/// Fine-tuning propagation over the cross-domain local graph and the
/// enhanced global graph. Stacks place the target block first.
pub fn finetune_forward<T: Float + Send + Sync>(
    cross_plan: &PropagationPlan,
    global_fine_plan: &PropagationPlan,
    local_stack: &Dense<T>,
    global_stack: &Dense<T>,
) -> Result<HierarchicalOutput<T>> {
    let cross = BlockPropagation::single(cross_plan.clone());
    let global = BlockPropagation::single(global_fine_plan.clone());
    hierarchical_pretrain_forward(&cross, &global, local_stack, global_stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_csr, merge_graphs, symmetric_normalize, GraphPart};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan(edges: &[(usize, usize)], n: usize, alpha: f64, layers: usize) -> PropagationPlan {
        let g = symmetric_normalize(&build_csr(edges, n).unwrap());
        PropagationPlan::new(Arc::new(g), alpha, layers).unwrap()
    }

    fn random_edges(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<(usize, usize)> {
        (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).filter(|(a, b)| a != b).collect()
    }

    // Dense oracle: ((1-a)Â + aI)^L · H via explicit matrices.
    fn dense_oracle(p: &PropagationPlan, h: &Dense<f64>) -> Dense<f64> {
        let n = p.num_nodes();
        let a = p.graph().to_dense();
        let mut op = Dense::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                op[(i, j)] = (1.0 - p.alpha()) * a[i][j] + if i == j { p.alpha() } else { 0.0 };
            }
        }
        let mut out = h.clone();
        for _ in 0..p.layers() {
            out = op.matmul(&out).unwrap();
        }
        out
    }

    #[test]
    fn single_edge_identity_input() {
        let p = plan(&[(0, 1)], 2, 0.5, 1);
        let (h1, cache) = grec_forward(&p, &Dense::<f64>::identity(2)).unwrap();
        assert_eq!(h1.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(cache.depth(), 1);
    }

    #[test]
    fn pure_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_edges(&mut rng, 20, 40);
        let p = plan(&e, 20, 1.0, 3);
        let h = Dense::random_normal(20, 5, 1.0, &mut rng);
        let (out, cache) = grec_forward(&p, &h).unwrap();
        assert_eq!(out, h);
        let g = Dense::random_normal(20, 5, 1.0, &mut rng);
        assert_eq!(grec_backward(&p, &cache, &g).unwrap(), g);
    }

    #[test]
    fn backward_single_edge() {
        let p = plan(&[(0, 1)], 2, 0.5, 1);
        let (_, cache) = grec_forward(&p, &Dense::<f64>::identity(2)).unwrap();
        let g = Dense::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let back = grec_backward(&p, &cache, &g).unwrap();
        assert_eq!(back.as_slice(), &[0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn stale_cache_rejected() {
        let p1 = plan(&[(0, 1)], 2, 0.5, 1);
        let p2 = plan(&[(0, 1)], 2, 0.5, 2);
        let (_, cache) = grec_forward(&p1, &Dense::<f64>::identity(2)).unwrap();
        assert!(matches!(grec_backward(&p2, &cache, &Dense::<f64>::identity(2)), Err(Error::StaleCache(_))));
        assert!(grec_backward(&p1, &cache, &Dense::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let p = plan(&[(0, 1)], 2, 0.5, 1);
        assert!(matches!(grec_forward(&p, &Dense::<f64>::zeros(3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn isolated_rows_scale_by_alpha_power() {
        let p = plan(&[(0, 1)], 3, 0.5, 3);
        let h = Dense::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let (out, _) = grec_forward(&p, &h).unwrap();
        assert_eq!(out[(2, 0)], 0.5f64.powi(3) * 4.0);
    }

    #[test]
    fn matches_dense_matrix_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..50);
            let m = rng.random_range(0..150);
            let e = random_edges(&mut rng, n, m);
            let alpha: f64 = rng.random_range(0.0..1.0);
            let p = plan(&e, n, alpha, 3);
            let h = Dense::random_normal(n, 4, 1.0, &mut rng);
            let (out, _) = grec_forward(&p, &h).unwrap();
            assert!(out.max_abs_diff(&dense_oracle(&p, &h)) <= 1e-6);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let e = random_edges(&mut rng, n, 70);
        let p = plan(&e, n, 0.5, 2);
        let h0 = Dense::random_normal(n, 3, 1.0, &mut rng);
        let w = Dense::random_normal(n, 3, 1.0, &mut rng);
        // loss = sum(w ⊙ H_L^2) / 2, so dloss/dH_L = w ⊙ H_L
        let loss = |h: &Dense<f64>| -> f64 {
            let out = p.apply(h).unwrap();
            out.as_slice().iter().zip(w.as_slice()).map(|(x, c)| 0.5 * c * x * x).sum()
        };
        let (hl, cache) = grec_forward(&p, &h0).unwrap();
        let mut g = hl.clone();
        g.as_mut_slice().iter_mut().zip(w.as_slice()).for_each(|(x, c)| *x *= c);
        let grad = grec_backward(&p, &cache, &g).unwrap();
        let delta = Dense::random_normal(n, 3, 1.0, &mut rng);
        let eps = 1e-4;
        let mut plus = h0.clone();
        plus.axpy(eps, &delta).unwrap();
        let mut minus = h0.clone();
        minus.axpy(-eps, &delta).unwrap();
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        let an: f64 = grad.as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a * b).sum();
        assert!(((fd - an) / an.abs().max(1e-12)).abs() <= 1e-4, "fd {fd} vs {an}");
    }

    #[test]
    fn block_propagation_requires_tiling() {
        let p = plan(&[(0, 1)], 2, 0.5, 1);
        assert!(BlockPropagation::new(4, vec![(0..2, p.clone())]).is_err());
        assert!(BlockPropagation::new(4, vec![(0..2, p.clone()), (2..4, p)]).is_ok());
    }

    #[test]
    fn single_domain_local_equals_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_edges(&mut rng, 12, 20);
        let p = plan(&e, 12, 0.5, 2);
        let local = BlockPropagation::new(12, vec![(0..12, p.clone())]).unwrap();
        let global = BlockPropagation::single(p);
        let h = Dense::random_normal(12, 4, 0.1, &mut rng);
        let out = hierarchical_pretrain_forward(&local, &global, &h, &h).unwrap();
        assert_eq!(out.local, out.global);
    }

    #[test]
    fn disconnected_domains_match_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g1 = build_csr(&random_edges(&mut rng, 8, 12), 8).unwrap();
        let g2 = build_csr(&random_edges(&mut rng, 6, 9), 6).unwrap();
        let mk = |g: &crate::graph::Graph| PropagationPlan::new(Arc::new(symmetric_normalize(g)), 0.5, 2).unwrap();
        let local = BlockPropagation::new(14, vec![(0..8, mk(&g1)), (8..14, mk(&g2))]).unwrap();
        let union =
            merge_graphs(14, &[GraphPart { graph: &g1, offset: 0 }, GraphPart { graph: &g2, offset: 8 }], &[]).unwrap();
        let global = BlockPropagation::single(mk(&union));
        let h = Dense::random_normal(14, 3, 1.0, &mut rng);
        let out = hierarchical_pretrain_forward(&local, &global, &h, &h).unwrap();
        assert!(out.local.max_abs_diff(&out.global) <= 1e-15);
    }

    #[test]
    fn semantic_bridge_changes_only_neighbourhoods() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // two path-like domains of 20 nodes each
        let chain: Vec<(usize, usize)> = (0..19).map(|i| (i, i + 1)).collect();
        let g = build_csr(&chain, 20).unwrap();
        let parts = [GraphPart { graph: &g, offset: 0 }, GraphPart { graph: &g, offset: 20 }];
        let base = merge_graphs(40, &parts, &[]).unwrap();
        let bridged = merge_graphs(40, &parts, &[(5, 25)]).unwrap();
        let h = Dense::random_normal(40, 2, 1.0, &mut rng);
        for layers in [1usize, 2] {
            let pb = PropagationPlan::new(Arc::new(symmetric_normalize(&base)), 0.5, layers).unwrap();
            let pr = PropagationPlan::new(Arc::new(symmetric_normalize(&bridged)), 0.5, layers).unwrap();
            let a = dense_oracle(&pb, &h);
            let b = dense_oracle(&pr, &h);
            let (fast, _) = grec_forward(&pr, &h).unwrap();
            assert!(fast.max_abs_diff(&b) <= 1e-12);
            for node in 0..40 {
                let changed = a.row(node).iter().zip(b.row(node)).any(|(x, y)| (x - y).abs() > 1e-12);
                // nodes within `layers` hops of a bridge endpoint (degree changes
                // also alter the normalised weights of their incident edges)
                let hop = |c: usize| if node / 20 == c / 20 { node.abs_diff(c) } else { usize::MAX };
                let dist = hop(5).min(hop(25));
                let near = dist <= layers;
                if !near {
                    assert!(!changed, "node {node} changed at L={layers}");
                }
            }
            assert!(a.row(5) != b.row(5));
            assert!(a.row(25) != b.row(25));
        }
    }

    #[test]
    fn finetune_target_tied_to_one_source() {
        // stacked: target node 0, source nodes 1 and 2 with edge 1-2
        let p = plan(&[(0, 1), (1, 2)], 3, 0.5, 1);
        let h = Dense::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let out = finetune_forward(&p, &p, &h, &h).unwrap();
        let dt = 1.0f64;
        let ds = 2.0f64;
        let scale = 0.5 / (dt * ds).sqrt();
        assert!((out.local[(0, 0)] - scale * 1.0).abs() < 1e-15);
        assert!((out.local[(0, 1)] - scale * 2.0).abs() < 1e-15);
        assert!(finetune_forward(&p, &p, &Dense::<f64>::zeros(4, 2), &h).is_err());
    }
}
