//! The two-path recommendation network: propagated ID tables fused with
//! adapted text vectors, concatenated into final embeddings. Gradients are
//! derived by hand through fusion, the adapters and both propagations.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{dot, Dense};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{l2_normalize, l2_normalize_backward, Adapter, AdapterTrace};
use crate::propagation::BlockPropagation;
use crate::training::bpr_loss;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Full double precision; required for gradient checks.
    #[default]
    F64,
    /// Propagation kernels run in single precision.
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterSlot {
    Source,
    Global,
    Target,
}

impl AdapterSlot {
    pub fn prefix(self) -> &'static str {
        match self {
            AdapterSlot::Source => "adapter_s",
            AdapterSlot::Global => "adapter_global",
            AdapterSlot::Target => "adapter_t",
        }
    }

    pub fn down_name(self) -> String {
        format!("{}.down", self.prefix())
    }

    pub fn up_name(self) -> String {
        format!("{}.up", self.prefix())
    }
}

pub const LOCAL_IDS: &str = "local_ids";
pub const GLOBAL_IDS: &str = "global_ids";
pub const TARGET_LOCAL_IDS: &str = "target.local_ids";
pub const TARGET_GLOBAL_IDS: &str = "target.global_ids";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Dense,
    pub frozen: bool,
}

/// Named parameter blocks in a fixed order. Every trainable scalar belongs
/// to exactly one block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    blocks: Vec<ParamBlock>,
}

impl ModelParams {
    pub fn push(&mut self, name: impl Into<String>, value: Dense, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter block `{name}`")));
        }
        self.blocks.push(ParamBlock { name, value, frozen });
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Dense> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.value)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter block `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.blocks.iter().find(|b| b.name == name).is_none_or(|b| b.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let b = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter block `{name}`")))?;
        b.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.blocks.iter_mut().for_each(|b| b.frozen = true);
    }

    pub fn adapter(&self, slot: AdapterSlot) -> Result<Adapter> {
        Adapter::new(self.get(&slot.down_name())?.clone(), self.get(&slot.up_name())?.clone())
    }

    pub fn push_adapter(&mut self, slot: AdapterSlot, adapter: Adapter, frozen: bool) -> Result<()> {
        self.push(slot.down_name(), adapter.down, frozen)?;
        self.push(slot.up_name(), adapter.up, frozen)
    }

    pub fn num_trainable(&self) -> usize {
        self.blocks.iter().filter(|b| !b.frozen).map(|b| b.value.as_slice().len()).sum()
    }
}

/// Gradients aligned with [`ModelParams::blocks`]; frozen blocks hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self { blocks: params.blocks.iter().map(|b| Dense::zeros(b.value.rows(), b.value.cols())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Dense::is_finite)
    }
}

/// How the structure of a model maps parameter blocks onto nodes.
#[derive(Clone, Debug)]
pub struct Architecture {
    /// Block names stacked (in order) to form the local ID table.
    pub local_table: Vec<String>,
    /// Block names stacked to form the global ID table.
    pub global_table: Vec<String>,
    pub local_prop: BlockPropagation,
    pub global_prop: BlockPropagation,
    /// Adapter used on the local path, per node. The global path always uses
    /// [`AdapterSlot::Global`].
    pub local_slots: Vec<AdapterSlot>,
    /// Frozen text vectors in model node order.
    pub text: Arc<Dense>,
    pub precision: Precision,
}

impl Architecture {
    pub fn num_nodes(&self) -> usize {
        self.local_slots.len()
    }

    fn validate(&self, params: &ModelParams) -> Result<()> {
        let n = self.num_nodes();
        if self.local_prop.num_nodes() != n || self.global_prop.num_nodes() != n {
            return shape_err(format!(
                "propagation spans {}/{} nodes, model has {n}",
                self.local_prop.num_nodes(),
                self.global_prop.num_nodes()
            ));
        }
        if self.text.rows() != n {
            return shape_err(format!("text matrix has {} rows, model has {n}", self.text.rows()));
        }
        for names in [&self.local_table, &self.global_table] {
            let rows: usize = names.iter().map(|b| params.get(b).map(|d| d.rows())).sum::<Result<_>>()?;
            if rows != n {
                return shape_err(format!("ID blocks {names:?} stack to {rows} rows, expected {n}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegScope {
    /// Squared final-embedding norms of the nodes touched by the batch.
    #[default]
    Batch,
    /// Mean squared final-embedding norm over every regularised node.
    FullTable,
}

#[derive(Clone, Debug)]
pub struct Regularization {
    pub weight: f64,
    pub scope: RegScope,
    /// Nodes covered by [`RegScope::FullTable`].
    pub table_nodes: Vec<usize>,
}

impl Regularization {
    pub fn batch(weight: f64) -> Self {
        Self { weight, scope: RegScope::Batch, table_nodes: Vec::new() }
    }
}

/// A training triple in model node indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    /// Regularisation term before multiplying by its weight.
    pub reg_raw: f64,
    /// `weight * reg_raw`.
    pub reg: f64,
    pub total: f64,
}

struct NodeTrace {
    local_trace: AdapterTrace,
    global_trace: AdapterTrace,
    embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
}

impl Model {
    pub fn new(arch: Architecture, params: ModelParams) -> Result<Self> {
        arch.validate(&params)?;
        Ok(Self { arch, params })
    }

    pub fn num_nodes(&self) -> usize {
        self.arch.num_nodes()
    }

    pub fn id_dim(&self) -> usize {
        self.params.get(&self.arch.local_table[0]).map_or(0, |d| d.cols())
    }

    fn stack(&self, names: &[String]) -> Result<Dense> {
        let parts: Vec<&Dense> = names.iter().map(|n| self.params.get(n)).collect::<Result<_>>()?;
        Dense::vstack(&parts)
    }

    fn adapters(&self) -> Result<BTreeMap<AdapterSlot, Adapter>> {
        let mut out = BTreeMap::new();
        out.insert(AdapterSlot::Global, self.params.adapter(AdapterSlot::Global)?);
        for &s in &self.arch.local_slots {
            if let std::collections::btree_map::Entry::Vacant(e) = out.entry(s) {
                e.insert(self.params.adapter(s)?);
            }
        }
        Ok(out)
    }

    fn propagate_eval(&self, prop: &BlockPropagation, table: &Dense) -> Result<Dense> {
        match self.arch.precision {
            Precision::F64 => prop.apply(table),
            Precision::F32 => Ok(prop.apply(&table.cast::<f32>())?.cast::<f64>()),
        }
    }

    /// Propagated `(local, global)` ID tables.
    pub fn propagated(&self) -> Result<(Dense, Dense)> {
        let local = self.propagate_eval(&self.arch.local_prop, &self.stack(&self.arch.local_table)?)?;
        let global = self.propagate_eval(&self.arch.global_prop, &self.stack(&self.arch.global_table)?)?;
        Ok((local, global))
    }

    /// Final `N x 2d` embeddings of every node.
    pub fn final_embeddings(&self) -> Result<Dense> {
        let (local, global) = self.propagated()?;
        let adapters = self.adapters()?;
        let d = local.cols();
        let n = self.num_nodes();
        let mut out = Dense::zeros(n, 2 * d);
        let text = &self.arch.text;
        let slots = &self.arch.local_slots;
        out.as_mut_slice().par_chunks_mut((2 * d).max(1)).enumerate().try_for_each(|(i, row)| -> Result<()> {
            let t = self.trace_node(&adapters, slots[i], text.row(i), local.row(i), global.row(i))?;
            row.copy_from_slice(&t.embedding);
            Ok(())
        })?;
        Ok(out)
    }

    fn trace_node(
        &self,
        adapters: &BTreeMap<AdapterSlot, Adapter>,
        slot: AdapterSlot,
        x: &[f64],
        local_id: &[f64],
        global_id: &[f64],
    ) -> Result<NodeTrace> {
        let local_trace = adapters[&slot].trace(x)?;
        let global_trace = adapters[&AdapterSlot::Global].trace(x)?;
        if local_trace.out.len() != local_id.len() || global_trace.out.len() != global_id.len() {
            return shape_err("adapter output size differs from the ID dimension");
        }
        let mut embedding = Vec::with_capacity(2 * local_id.len());
        for (a, b) in l2_normalize(local_id).iter().zip(l2_normalize(&local_trace.out)) {
            embedding.push(a + b);
        }
        for (a, b) in l2_normalize(global_id).iter().zip(l2_normalize(&global_trace.out)) {
            embedding.push(a + b);
        }
        Ok(NodeTrace { local_trace, global_trace, embedding })
    }

    fn check_triples(&self, triples: &[Triple]) -> Result<()> {
        let n = self.num_nodes();
        if let Some(t) = triples.iter().find(|t| t.user >= n || t.pos >= n || t.neg >= n) {
            return Err(Error::InvalidArgument(format!("triple {t:?} outside 0..{n}")));
        }
        Ok(())
    }

    /// Objective value only.
    pub fn loss(&self, triples: &[Triple], reg: &Regularization) -> Result<LossBreakdown> {
        Ok(self.evaluate(triples, reg, false)?.0)
    }

    /// Objective and gradients for every block (zeros for frozen blocks).
    pub fn loss_and_grad(&self, triples: &[Triple], reg: &Regularization) -> Result<(LossBreakdown, Gradients)> {
        let (loss, grads) = self.evaluate(triples, reg, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn evaluate(
        &self,
        triples: &[Triple],
        reg: &Regularization,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradients>)> {
        if triples.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        self.check_triples(triples)?;
        let local_table = self.stack(&self.arch.local_table)?;
        let global_table = self.stack(&self.arch.global_table)?;
        let (local_out, global_out, caches) = match self.arch.precision {
            Precision::F64 => {
                let (l, lc) = self.arch.local_prop.forward(&local_table)?;
                let (g, gc) = self.arch.global_prop.forward(&global_table)?;
                (l, g, Some((lc, gc)))
            }
            Precision::F32 => {
                let l = self.arch.local_prop.apply(&local_table.cast::<f32>())?.cast::<f64>();
                let g = self.arch.global_prop.apply(&global_table.cast::<f32>())?.cast::<f64>();
                (l, g, None)
            }
        };
        let adapters = self.adapters()?;
        let d = local_out.cols();

        // nodes whose final embeddings enter the objective, ascending
        let mut nodes: Vec<usize> = triples.iter().flat_map(|t| [t.user, t.pos, t.neg]).collect();
        if reg.scope == RegScope::FullTable {
            nodes.extend_from_slice(&reg.table_nodes);
        }
        nodes.sort_unstable();
        nodes.dedup();
        let slot_of: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        let traces: Vec<NodeTrace> = nodes
            .iter()
            .map(|&n| {
                self.trace_node(
                    &adapters,
                    self.arch.local_slots[n],
                    self.arch.text.row(n),
                    local_out.row(n),
                    global_out.row(n),
                )
            })
            .collect::<Result<_>>()?;
        let emb = |n: usize| traces[slot_of[&n]].embedding.as_slice();

        let pos: Vec<f64> = triples.iter().map(|t| dot(emb(t.user), emb(t.pos))).collect();
        let neg: Vec<f64> = triples.iter().map(|t| dot(emb(t.user), emb(t.neg))).collect();
        let (bpr, g_pos, g_neg) = bpr_loss(&pos, &neg)?;

        let b = triples.len() as f64;
        let reg_raw = match reg.scope {
            RegScope::Batch => {
                triples
                    .iter()
                    .map(|t| dot(emb(t.user), emb(t.user)) + dot(emb(t.pos), emb(t.pos)) + dot(emb(t.neg), emb(t.neg)))
                    .sum::<f64>()
                    / b
            }
            RegScope::FullTable => {
                if reg.table_nodes.is_empty() {
                    0.0
                } else {
                    reg.table_nodes.iter().map(|&n| dot(emb(n), emb(n))).sum::<f64>() / reg.table_nodes.len() as f64
                }
            }
        };
        let loss = LossBreakdown { bpr, reg_raw, reg: reg.weight * reg_raw, total: bpr + reg.weight * reg_raw };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("objective {loss:?}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        // dL/dh for each traced node
        let mut g_emb = vec![vec![0.0; 2 * d]; nodes.len()];
        let mut add = |n: usize, c: f64, v: &[f64]| {
            for (g, x) in g_emb[slot_of[&n]].iter_mut().zip(v) {
                *g += c * x;
            }
        };
        for (k, t) in triples.iter().enumerate() {
            add(t.user, g_pos[k], emb(t.pos));
            add(t.user, g_neg[k], emb(t.neg));
            add(t.pos, g_pos[k], emb(t.user));
            add(t.neg, g_neg[k], emb(t.user));
        }
        if reg.weight != 0.0 {
            match reg.scope {
                RegScope::Batch => {
                    let c = 2.0 * reg.weight / b;
                    for t in triples {
                        add(t.user, c, emb(t.user));
                        add(t.pos, c, emb(t.pos));
                        add(t.neg, c, emb(t.neg));
                    }
                }
                RegScope::FullTable if !reg.table_nodes.is_empty() => {
                    let c = 2.0 * reg.weight / reg.table_nodes.len() as f64;
                    for &n in &reg.table_nodes {
                        add(n, c, emb(n));
                    }
                }
                RegScope::FullTable => {}
            }
        }

        let mut grads = Gradients::zeros_like(&self.params);
        let block_idx = |name: &str| self.params.position(name).expect("validated block");
        let local_trainable = self.arch.local_table.iter().any(|n| !self.params.is_frozen(n));
        let global_trainable = self.arch.global_table.iter().any(|n| !self.params.is_frozen(n));
        let mut g_local = Dense::zeros(self.num_nodes(), d);
        let mut g_global = Dense::zeros(self.num_nodes(), d);
        let mut adapter_grads: BTreeMap<AdapterSlot, (Dense, Dense)> = BTreeMap::new();

        for (k, &n) in nodes.iter().enumerate() {
            let tr = &traces[k];
            let (gl, gg) = g_emb[k].split_at(d);
            let slot = self.arch.local_slots[n];
            let x = self.arch.text.row(n);
            if local_trainable {
                g_local.row_mut(n).copy_from_slice(&l2_normalize_backward(local_out.row(n), gl));
            }
            if global_trainable {
                g_global.row_mut(n).copy_from_slice(&l2_normalize_backward(global_out.row(n), gg));
            }
            for (s, trace, g) in [(slot, &tr.local_trace, gl), (AdapterSlot::Global, &tr.global_trace, gg)] {
                if self.params.is_frozen(&s.down_name()) && self.params.is_frozen(&s.up_name()) {
                    continue;
                }
                let a = &adapters[&s];
                let entry = adapter_grads.entry(s).or_insert_with(|| {
                    (Dense::zeros(a.down.rows(), a.down.cols()), Dense::zeros(a.up.rows(), a.up.cols()))
                });
                let g_out = l2_normalize_backward(&trace.out, g);
                a.accumulate_grad(x, trace, &g_out, &mut entry.0, &mut entry.1);
            }
        }

        for (s, (gd, gu)) in adapter_grads {
            for (name, g) in [(s.down_name(), gd), (s.up_name(), gu)] {
                if !self.params.is_frozen(&name) {
                    grads.blocks[block_idx(&name)] = g;
                }
            }
        }

        let mut scatter = |names: &[String], full: Dense| {
            let mut start = 0;
            for name in names {
                let rows = self.params.get(name).expect("validated block").rows();
                if !self.params.is_frozen(name) {
                    grads.blocks[block_idx(name)] = full.slice_rows(start, start + rows);
                }
                start += rows;
            }
        };
        if local_trainable || global_trainable {
            let back = |prop: &BlockPropagation, cache: Option<&crate::propagation::BlockCache>, g: &Dense| match cache
            {
                Some(c) => prop.backward(c, g),
                None => Ok(prop.apply(&g.cast::<f32>())?.cast::<f64>()),
            };
            if local_trainable {
                let full = back(&self.arch.local_prop, caches.as_ref().map(|c| &c.0), &g_local)?;
                scatter(&self.arch.local_table, full);
            }
            if global_trainable {
                let full = back(&self.arch.global_prop, caches.as_ref().map(|c| &c.1), &g_global)?;
                scatter(&self.arch.global_table, full);
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((loss, Some(grads)))
    }
}

/// Normal(0, std) ID table.
pub fn init_id_table<R: Rng + ?Sized>(rows: usize, d: usize, std: f64, rng: &mut R) -> Dense {
    Dense::random_normal(rows, d, std, rng)
}
