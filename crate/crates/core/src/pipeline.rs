//! Assembly of datasets, propagation graphs and model layouts for the
//! three training stages. Universe ids place source domains first and the
//! target last; each layout maps universe ids to its own model indices.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::eval::{known_positives, sample_eval_negatives, EvalInstance, SamplingStats};
use crate::fusion::Adapter;
use crate::graph::{merge_graphs, symmetric_normalize, DomainId, Graph, GraphPart, GraphUniverse};
use crate::ingest::{build_universe, temporal_split, InteractionRecord, SplitDataset, SplitEdge, TextEmbeddingMatrix};
use crate::model::{
    init_id_table, AdapterSlot, Architecture, ModelParams, RegScope, Regularization, GLOBAL_IDS, LOCAL_IDS,
    TARGET_GLOBAL_IDS, TARGET_LOCAL_IDS,
};
use crate::propagation::{BlockPropagation, PropagationPlan};
use crate::semantic::{semantic_edges, DomainLabels, EdgeMode};
use crate::training::{DomainTrain, TrainConfig};

/// Records, registry with train subgraphs installed, split and text rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Arc<Vec<InteractionRecord>>,
    pub universe: GraphUniverse,
    pub split: SplitDataset,
    /// Text vectors in universe order.
    pub text: Arc<Dense>,
    pub known: Arc<HashSet<(usize, usize)>>,
}

impl Dataset {
    pub fn new(
        records: Vec<InteractionRecord>,
        sources: &[String],
        target: Option<&str>,
        text: &TextEmbeddingMatrix,
        fractions: [f64; 3],
    ) -> Result<Self> {
        let mut universe = build_universe(&records, sources, target)?;
        let split = temporal_split(&records, &universe, fractions)?;
        split.install_train_graphs(&mut universe)?;
        let text = text.aligned(&universe)?;
        let known = known_positives(&split);
        Ok(Self { records: Arc::new(records), universe, split, text: Arc::new(text), known: Arc::new(known) })
    }

    pub fn with_text(&self, text: Dense) -> Result<Self> {
        if text.rows() != self.universe.num_nodes() {
            return Err(Error::Shape(format!("{} text rows for {} nodes", text.rows(), self.universe.num_nodes())));
        }
        Ok(Self { text: Arc::new(text), ..self.clone() })
    }

    pub fn target(&self) -> Result<DomainId> {
        self.universe.target().ok_or_else(|| Error::InvalidArgument("dataset has no target domain".into()))
    }

    /// Nodes in source domains; they occupy ids `0..source_count()`.
    pub fn source_count(&self) -> usize {
        self.universe.source_range().end
    }

    /// Keep a uniform `ceil(fraction * n)` subset of the target training
    /// edges and rebuild the target subgraph.
    pub fn subsample_target_train<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
        }
        let t = self.target()?;
        let range = self.universe.domain(t).range();
        let (mut tgt, rest): (Vec<SplitEdge>, Vec<SplitEdge>) =
            self.split.train.iter().partition(|e| range.contains(&e.user.0));
        let keep = ((fraction * tgt.len() as f64).ceil() as usize).min(tgt.len());
        tgt.shuffle(rng);
        tgt.truncate(keep);
        let mut train = rest;
        train.extend(tgt);
        train.sort_by_key(|e| (e.timestamp, e.record));
        let split = SplitDataset { train, ..self.split.clone() };
        let mut universe = self.universe.clone();
        split.install_train_graphs(&mut universe)?;
        Ok(Self { universe, split, ..self.clone() })
    }

    pub fn domain_edges(&self, part: &[SplitEdge], d: DomainId) -> Vec<SplitEdge> {
        SplitDataset::domain_edges(part, &self.universe, d).copied().collect()
    }

    /// Evaluation instances over `part` for the given domains.
    pub fn eval_instances<R: Rng + ?Sized>(
        &self,
        part: &[SplitEdge],
        domains: &[DomainId],
        n_neg: usize,
        rng: &mut R,
    ) -> (Vec<EvalInstance>, SamplingStats) {
        let edges: Vec<SplitEdge> = domains.iter().flat_map(|&d| self.domain_edges(part, d)).collect();
        sample_eval_negatives(&edges, &self.universe, &self.known, n_neg, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    Pretrain,
    Finetune,
    Scratch,
}

/// A model structure bound to a dataset.
#[derive(Clone, Debug)]
pub struct Layout {
    pub kind: LayoutKind,
    pub arch: Architecture,
    /// Model index of each universe node, if it is part of the model.
    pub index: Vec<Option<usize>>,
    /// Domains whose interactions are trained and evaluated.
    pub train_domains: Vec<DomainId>,
    pub fingerprints: BTreeMap<String, String>,
    pub edge_counts: BTreeMap<String, usize>,
}

fn plan(g: &Graph, cfg: &TrainConfig) -> Result<PropagationPlan> {
    PropagationPlan::new(Arc::new(symmetric_normalize(g)), cfg.alpha, cfg.layers)
}

fn text_rows(text: &Dense, index: &[Option<usize>], n: usize) -> Dense {
    let mut out = Dense::zeros(n, text.cols());
    for (u, m) in index.iter().enumerate() {
        if let Some(m) = m {
            out.row_mut(*m).copy_from_slice(text.row(u));
        }
    }
    out
}

fn source_fingerprints(ds: &Dataset, fp: &mut BTreeMap<String, String>) {
    for d in ds.universe.source_domains() {
        fp.insert(format!("source.{}", ds.universe.domain(d).name), ds.universe.subgraph(d).fingerprint());
    }
}

struct PretrainGraphs {
    global: Graph,
    cross_edges: usize,
}

fn pretrain_global(ds: &Dataset, labels: &DomainLabels, cfg: &TrainConfig) -> Result<PretrainGraphs> {
    let ns = ds.source_count();
    let sem = semantic_edges(&ds.text, labels, EdgeMode::PretrainCrossDomain, cfg.gamma, cfg.k_cap)?;
    let parts: Vec<GraphPart> = ds
        .universe
        .source_domains()
        .map(|d| GraphPart { graph: ds.universe.subgraph(d), offset: ds.universe.domain(d).users.start })
        .collect();
    let global = merge_graphs(ns, &parts, &sem.pairs())?;
    Ok(PretrainGraphs { global, cross_edges: sem.len() })
}

pub fn pretrain_layout(ds: &Dataset, cfg: &TrainConfig) -> Result<Layout> {
    let ns = ds.source_count();
    let sources: Vec<DomainId> = ds.universe.source_domains().collect();
    if sources.is_empty() || ns == 0 {
        return Err(Error::InvalidArgument("pre-training needs at least one source domain".into()));
    }
    let labels = DomainLabels::from_universe(&ds.universe);
    let pg = pretrain_global(ds, &labels, cfg)?;
    let blocks = sources
        .iter()
        .map(|&d| Ok((ds.universe.domain(d).range(), plan(ds.universe.subgraph(d), cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let index: Vec<Option<usize>> = (0..ds.universe.num_nodes()).map(|n| (n < ns).then_some(n)).collect();
    let mut fingerprints = BTreeMap::new();
    source_fingerprints(ds, &mut fingerprints);
    fingerprints.insert("pretrain.global".into(), pg.global.fingerprint());
    let arch = Architecture {
        local_table: vec![LOCAL_IDS.into()],
        global_table: vec![GLOBAL_IDS.into()],
        local_prop: BlockPropagation::new(ns, blocks)?,
        global_prop: BlockPropagation::single(plan(&pg.global, cfg)?),
        local_slots: vec![AdapterSlot::Source; ns],
        text: Arc::new(text_rows(&ds.text, &index, ns)),
        precision: cfg.precision,
    };
    Ok(Layout {
        kind: LayoutKind::Pretrain,
        arch,
        index,
        train_domains: sources,
        fingerprints,
        edge_counts: [(EdgeMode::PretrainCrossDomain.name().to_string(), pg.cross_edges)].into(),
    })
}

/// Target block first, then every source node; `gamma_fine` thresholds
/// the target-involving semantic edges.
pub fn finetune_layout(ds: &Dataset, cfg: &TrainConfig, gamma_fine: f64) -> Result<Layout> {
    let t = ds.target()?;
    let ns = ds.source_count();
    let trange = ds.universe.domain(t).range();
    let nt = trange.len();
    let n = nt + ns;
    let index: Vec<Option<usize>> = (0..ds.universe.num_nodes())
        .map(|u| {
            if trange.contains(&u) {
                Some(u - trange.start)
            } else if u < ns {
                Some(nt + u)
            } else {
                None
            }
        })
        .collect();
    let at = |u: usize| index[u].expect("node belongs to the layout");
    let labels = DomainLabels::from_universe(&ds.universe);
    let pg = pretrain_global(ds, &labels, cfg)?;
    let src_tgt = semantic_edges(&ds.text, &labels, EdgeMode::FinetuneSrcTgt, gamma_fine, cfg.k_cap)?;
    let tgt_global = semantic_edges(&ds.text, &labels, EdgeMode::FinetuneTgtGlobal, gamma_fine, cfg.k_cap)?;

    let mut parts = vec![GraphPart { graph: ds.universe.subgraph(t), offset: 0 }];
    parts.extend(
        ds.universe
            .source_domains()
            .map(|d| GraphPart { graph: ds.universe.subgraph(d), offset: nt + ds.universe.domain(d).users.start }),
    );
    let map_pairs = |pairs: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
        pairs.into_iter().map(|(a, b)| (at(a), at(b))).collect()
    };
    let cross = merge_graphs(n, &parts, &map_pairs(src_tgt.pairs()))?;
    let mut global_extra: Vec<(usize, usize)> =
        pg.global.undirected_edges().into_iter().map(|(a, b)| (nt + a, nt + b)).collect();
    global_extra.extend(map_pairs(tgt_global.pairs()));
    let global = merge_graphs(n, &parts[..1], &global_extra)?;

    let mut fingerprints = BTreeMap::new();
    source_fingerprints(ds, &mut fingerprints);
    fingerprints.insert("pretrain.global".into(), pg.global.fingerprint());
    fingerprints.insert("finetune.cross".into(), cross.fingerprint());
    fingerprints.insert("finetune.global".into(), global.fingerprint());
    let mut slots = vec![AdapterSlot::Target; nt];
    slots.extend(std::iter::repeat_n(AdapterSlot::Source, ns));
    let arch = Architecture {
        local_table: vec![TARGET_LOCAL_IDS.into(), LOCAL_IDS.into()],
        global_table: vec![TARGET_GLOBAL_IDS.into(), GLOBAL_IDS.into()],
        local_prop: BlockPropagation::single(plan(&cross, cfg)?),
        global_prop: BlockPropagation::single(plan(&global, cfg)?),
        local_slots: slots,
        text: Arc::new(text_rows(&ds.text, &index, n)),
        precision: cfg.precision,
    };
    Ok(Layout {
        kind: LayoutKind::Finetune,
        arch,
        index,
        train_domains: vec![t],
        fingerprints,
        edge_counts: [
            (EdgeMode::PretrainCrossDomain.name().to_string(), pg.cross_edges),
            (EdgeMode::FinetuneSrcTgt.name().to_string(), src_tgt.len()),
            (EdgeMode::FinetuneTgtGlobal.name().to_string(), tgt_global.len()),
        ]
        .into(),
    })
}

/// Target domain alone, with the same two-path architecture.
pub fn scratch_layout(ds: &Dataset, cfg: &TrainConfig) -> Result<Layout> {
    let t = ds.target()?;
    let trange = ds.universe.domain(t).range();
    let nt = trange.len();
    let index: Vec<Option<usize>> =
        (0..ds.universe.num_nodes()).map(|u| trange.contains(&u).then(|| u - trange.start)).collect();
    let g = ds.universe.subgraph(t);
    let mut fingerprints = BTreeMap::new();
    fingerprints.insert(format!("target.{}", ds.universe.domain(t).name), g.fingerprint());
    let arch = Architecture {
        local_table: vec![LOCAL_IDS.into()],
        global_table: vec![GLOBAL_IDS.into()],
        local_prop: BlockPropagation::single(plan(g, cfg)?),
        global_prop: BlockPropagation::single(plan(g, cfg)?),
        local_slots: vec![AdapterSlot::Source; nt],
        text: Arc::new(text_rows(&ds.text, &index, nt)),
        precision: cfg.precision,
    };
    Ok(Layout {
        kind: LayoutKind::Scratch,
        arch,
        index,
        train_domains: vec![t],
        fingerprints,
        edge_counts: BTreeMap::new(),
    })
}

impl Layout {
    pub fn num_nodes(&self) -> usize {
        self.arch.num_nodes()
    }

    /// Fresh parameters for pre-training or from-scratch training.
    pub fn init_params<R: Rng + ?Sized>(&self, cfg: &TrainConfig, rng: &mut R) -> Result<ModelParams> {
        let n = self.num_nodes();
        let d_text = self.arch.text.cols();
        let mut p = ModelParams::default();
        p.push(LOCAL_IDS, init_id_table(n, cfg.d, cfg.init_std, rng), false)?;
        p.push(GLOBAL_IDS, init_id_table(n, cfg.d, cfg.init_std, rng), false)?;
        p.push_adapter(AdapterSlot::Source, Adapter::xavier(d_text, cfg.h, cfg.d, rng), false)?;
        p.push_adapter(AdapterSlot::Global, Adapter::xavier(d_text, cfg.h, cfg.d, rng), false)?;
        Ok(p)
    }

    /// Fine-tuning parameters: frozen pre-trained blocks, zero target ID
    /// rows, and a target adapter starting from the source adapter.
    pub fn finetune_params(&self, pretrained: &ModelParams, freeze_target_global: bool) -> Result<ModelParams> {
        let local = pretrained.get(LOCAL_IDS)?;
        let nt = self.num_nodes() - local.rows();
        let d = local.cols();
        let mut p = ModelParams::default();
        p.push(TARGET_LOCAL_IDS, Dense::zeros(nt, d), false)?;
        p.push(TARGET_GLOBAL_IDS, Dense::zeros(nt, d), freeze_target_global)?;
        p.push(LOCAL_IDS, local.clone(), true)?;
        p.push(GLOBAL_IDS, pretrained.get(GLOBAL_IDS)?.clone(), true)?;
        p.push_adapter(AdapterSlot::Source, pretrained.adapter(AdapterSlot::Source)?, true)?;
        p.push_adapter(AdapterSlot::Global, pretrained.adapter(AdapterSlot::Global)?, true)?;
        p.push_adapter(AdapterSlot::Target, pretrained.adapter(AdapterSlot::Source)?, false)?;
        Ok(p)
    }

    pub fn model_index(&self, u: usize) -> Option<usize> {
        self.index.get(u).copied().flatten()
    }

    /// Training interactions per trained domain, in model indices.
    pub fn train_domains(&self, ds: &Dataset) -> Vec<DomainTrain> {
        self.train_domains
            .iter()
            .map(|&d| {
                let edges = ds
                    .domain_edges(&ds.split.train, d)
                    .iter()
                    .filter_map(|e| Some((self.model_index(e.user.0)?, self.model_index(e.item.0)?)))
                    .collect();
                let items = ds.universe.domain(d).items.clone().filter_map(|i| self.model_index(i)).collect();
                DomainTrain::new(d, edges, items)
            })
            .collect()
    }

    pub fn regularization(&self, weight: f64, scope: RegScope, ds: &Dataset) -> Regularization {
        let table_nodes = match scope {
            RegScope::Batch => Vec::new(),
            RegScope::FullTable => self
                .train_domains
                .iter()
                .flat_map(|&d| ds.universe.domain(d).range())
                .filter_map(|u| self.model_index(u))
                .collect(),
        };
        Regularization { weight, scope, table_nodes }
    }

    /// Fail unless every fingerprint in `expected` matches this layout.
    pub fn check_fingerprints(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        for (name, fp) in expected {
            match self.fingerprints.get(name) {
                Some(have) if have == fp => {}
                Some(_) => return Err(Error::FingerprintMismatch(format!("graph `{name}` differs"))),
                None => return Err(Error::FingerprintMismatch(format!("graph `{name}` is not part of this layout"))),
            }
        }
        Ok(())
    }
}
