//! Sampled-negative evaluation: AUC and per-user Recall/Precision@K, the
//! metrics report, and its JSON/CSV renderings.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{dot, Dense};
use crate::error::{Error, Result};
use crate::graph::{DomainId, GraphUniverse};
use crate::ingest::{SplitDataset, SplitEdge};

pub const DEFAULT_EVAL_NEGATIVES: usize = 100;
pub const REPORT_KS: [usize; 2] = [10, 20];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user: usize,
    pub pos_item: usize,
    pub negatives: Vec<usize>,
    pub domain: DomainId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStats {
    /// Positives without any admissible negative.
    pub skipped: usize,
    /// Instances that received fewer than the requested negatives.
    pub clipped: usize,
}

/// Every known `(user, item)` interaction across all splits.
pub fn known_positives(split: &SplitDataset) -> HashSet<(usize, usize)> {
    split.all().map(|e| (e.user.0, e.item.0)).collect()
}

/// For each edge, `n_neg` distinct same-domain items the user never
/// interacted with, drawn uniformly without replacement.
pub fn sample_eval_negatives<R: Rng + ?Sized>(
    edges: &[SplitEdge],
    universe: &GraphUniverse,
    known: &HashSet<(usize, usize)>,
    n_neg: usize,
    rng: &mut R,
) -> (Vec<EvalInstance>, SamplingStats) {
    let mut stats = SamplingStats::default();
    let mut out = Vec::with_capacity(edges.len());
    let mut pools: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in edges {
        let domain = universe.meta(e.user).domain;
        let pool = pools.entry(e.user.0).or_insert_with(|| {
            universe.domain(domain).items.clone().filter(|&i| !known.contains(&(e.user.0, i))).collect()
        });
        if pool.is_empty() {
            stats.skipped += 1;
            continue;
        }
        let take = n_neg.min(pool.len());
        if take < n_neg {
            stats.clipped += 1;
        }
        let mut negatives: Vec<usize> = index::sample(rng, pool.len(), take).into_iter().map(|k| pool[k]).collect();
        negatives.sort_unstable();
        out.push(EvalInstance { user: e.user.0, pos_item: e.item.0, negatives, domain });
    }
    if stats.clipped > 0 {
        log::warn!("{} evaluation instances have fewer than {n_neg} negatives", stats.clipped);
    }
    (out, stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub pos: f64,
    pub neg: Vec<f64>,
}

/// Dot-product scores. The sigmoid head is strictly monotone, so rankings
/// and every metric here are unchanged by omitting it.
pub fn score_instances(
    embeddings: &Dense,
    index_of: &(dyn Fn(usize) -> Option<usize> + Sync),
    instances: &[EvalInstance],
) -> Result<Vec<InstanceScores>> {
    instances
        .par_iter()
        .map(|inst| {
            let row = |n: usize| {
                index_of(n)
                    .map(|r| embeddings.row(r))
                    .ok_or_else(|| Error::UnknownNode(format!("node {n} has no embedding")))
            };
            let u = row(inst.user)?;
            let pos = dot(u, row(inst.pos_item)?);
            let neg = inst.negatives.iter().map(|&v| Ok(dot(u, row(v)?))).collect::<Result<_>>()?;
            Ok(InstanceScores { pos, neg })
        })
        .collect()
}

fn check_finite(inst: &EvalInstance, s: &InstanceScores) -> Result<()> {
    if !s.pos.is_finite() {
        return Err(Error::NonFinite(format!("score of ({}, {})", inst.user, inst.pos_item)));
    }
    if let Some(k) = s.neg.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("score of ({}, {})", inst.user, inst.negatives[k])));
    }
    Ok(())
}

/// Fraction of negatives ranked below the positive, ties counting half.
pub fn instance_auc(s: &InstanceScores) -> f64 {
    if s.neg.is_empty() {
        return 0.5;
    }
    let below = s.neg.iter().filter(|&&n| n < s.pos).count() as f64;
    let ties = s.neg.iter().filter(|&&n| n == s.pos).count() as f64;
    (below + 0.5 * ties) / s.neg.len() as f64
}

/// Mean per-instance AUC.
pub fn auc(instances: &[EvalInstance], scores: &[InstanceScores]) -> Result<f64> {
    if instances.len() != scores.len() {
        return Err(Error::Shape(format!("{} instances, {} score sets", instances.len(), scores.len())));
    }
    if instances.is_empty() {
        return Err(Error::Empty("no evaluation instances".into()));
    }
    let mut total = 0.0;
    for (inst, s) in instances.iter().zip(scores) {
        if inst.negatives.len() != s.neg.len() {
            return Err(Error::Shape(format!("instance for user {} is partially scored", inst.user)));
        }
        check_finite(inst, s)?;
        total += instance_auc(s);
    }
    Ok(total / instances.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallMode {
    /// Per user: all test positives pooled with all sampled negatives.
    #[default]
    PerUser,
    /// Per instance: one positive against its own negatives.
    HitRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub recall: f64,
    pub precision: f64,
    /// Users (or instances, in hit-rate mode) averaged over.
    pub groups: usize,
}

/// Recall@K and Precision@K. Ranking is by descending score with ties by
/// ascending item index.
pub fn rank_metrics(
    instances: &[EvalInstance],
    scores: &[InstanceScores],
    k: usize,
    mode: RecallMode,
) -> Result<RankMetrics> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    for (inst, s) in instances.iter().zip(scores) {
        check_finite(inst, s)?;
    }
    let ranked_hits = |pool: &BTreeMap<usize, (f64, bool)>| -> (usize, usize) {
        let mut v: Vec<(usize, f64, bool)> = pool.iter().map(|(&i, &(s, p))| (i, s, p)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let hits = v.iter().take(k).filter(|x| x.2).count();
        (hits, v.iter().filter(|x| x.2).count())
    };
    let mut recall = 0.0;
    let mut precision = 0.0;
    let mut groups = 0;
    match mode {
        RecallMode::PerUser => {
            let mut pools: BTreeMap<usize, BTreeMap<usize, (f64, bool)>> = BTreeMap::new();
            for (inst, s) in instances.iter().zip(scores) {
                let pool = pools.entry(inst.user).or_default();
                pool.insert(inst.pos_item, (s.pos, true));
                for (&v, &sv) in inst.negatives.iter().zip(&s.neg) {
                    pool.entry(v).or_insert((sv, false));
                }
            }
            for pool in pools.values() {
                let (hits, npos) = ranked_hits(pool);
                if npos == 0 {
                    continue;
                }
                recall += hits as f64 / npos as f64;
                precision += hits as f64 / k as f64;
                groups += 1;
            }
        }
        RecallMode::HitRate => {
            for (inst, s) in instances.iter().zip(scores) {
                let mut pool: BTreeMap<usize, (f64, bool)> =
                    inst.negatives.iter().zip(&s.neg).map(|(&v, &sv)| (v, (sv, false))).collect();
                pool.insert(inst.pos_item, (s.pos, true));
                let (hits, _) = ranked_hits(&pool);
                recall += hits as f64;
                precision += hits as f64 / k as f64;
                groups += 1;
            }
        }
    }
    if groups == 0 {
        return Ok(RankMetrics { recall: 0.0, precision: 0.0, groups: 0 });
    }
    Ok(RankMetrics { recall: recall / groups as f64, precision: precision / groups as f64, groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub auc: f64,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub precision_at_10: f64,
    pub precision_at_20: f64,
    pub instances: usize,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Unweighted means over the per-domain rows.
    pub auc: f64,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub precision_at_10: f64,
    pub precision_at_20: f64,
    pub per_domain: Vec<DomainMetrics>,
    pub instances: usize,
    pub skipped: usize,
    pub clipped: usize,
    pub recall_mode: RecallMode,
    pub config_hash: String,
    pub build_id: String,
    /// Wall-clock stamp; excluded from the canonical form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl MetricsReport {
    /// Sorted-key JSON without the timestamp, stable across reruns.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("timestamp");
        }
        v.to_string()
    }

    pub fn to_json_pretty(&self) -> String {
        let v = serde_json::to_value(self).expect("report serialises");
        serde_json::to_string_pretty(&v).expect("value serialises")
    }

    /// One `domain,metric,value` row per domain and metric, plus `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,domain,metric,value\n");
        let mut row = |domain: &str, metric: &str, v: f64| {
            out.push_str(&format!("{},{domain},{metric},{v}\n", self.label));
        };
        for d in &self.per_domain {
            row(&d.domain, "auc", d.auc);
            row(&d.domain, "recall@10", d.recall_at_10);
            row(&d.domain, "recall@20", d.recall_at_20);
            row(&d.domain, "precision@10", d.precision_at_10);
            row(&d.domain, "precision@20", d.precision_at_20);
        }
        row("mean", "auc", self.auc);
        row("mean", "recall@10", self.recall_at_10);
        row("mean", "recall@20", self.recall_at_20);
        row("mean", "precision@10", self.precision_at_10);
        row("mean", "precision@20", self.precision_at_20);
        out
    }

    /// Range and ordering checks every emitted report must pass.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.per_domain.is_empty() {
            return Err(Error::Empty("report has no domains".into()));
        }
        let rows = self.per_domain.iter().map(|d| {
            (d.domain.as_str(), [d.auc, d.recall_at_10, d.recall_at_20, d.precision_at_10, d.precision_at_20])
        });
        let top = [self.auc, self.recall_at_10, self.recall_at_20, self.precision_at_10, self.precision_at_20];
        for (name, vals) in rows.chain(std::iter::once(("mean", top))) {
            for v in vals {
                unit(name, v)?;
            }
            if vals[2] < vals[1] {
                return Err(Error::InvalidArgument(format!("{name}: recall@20 below recall@10")));
            }
        }
        Ok(())
    }
}

/// Compute a report from scored instances, grouped per domain.
pub fn build_report(
    label: &str,
    universe: &GraphUniverse,
    instances: &[EvalInstance],
    scores: &[InstanceScores],
    stats: SamplingStats,
    mode: RecallMode,
) -> Result<MetricsReport> {
    let domains: BTreeSet<DomainId> = instances.iter().map(|i| i.domain).collect();
    let mut per_domain = Vec::new();
    for d in domains {
        let idx: Vec<usize> = (0..instances.len()).filter(|&k| instances[k].domain == d).collect();
        let inst: Vec<EvalInstance> = idx.iter().map(|&k| instances[k].clone()).collect();
        let sc: Vec<InstanceScores> = idx.iter().map(|&k| scores[k].clone()).collect();
        let r10 = rank_metrics(&inst, &sc, 10, mode)?;
        let r20 = rank_metrics(&inst, &sc, 20, mode)?;
        per_domain.push(DomainMetrics {
            domain: universe.domain(d).name.clone(),
            auc: auc(&inst, &sc)?,
            recall_at_10: r10.recall,
            recall_at_20: r20.recall,
            precision_at_10: r10.precision,
            precision_at_20: r20.precision,
            instances: inst.len(),
            users: inst.iter().map(|i| i.user).collect::<BTreeSet<_>>().len(),
        });
    }
    if per_domain.is_empty() {
        return Err(Error::Empty("no evaluation instances".into()));
    }
    let mean = |f: fn(&DomainMetrics) -> f64| per_domain.iter().map(f).sum::<f64>() / per_domain.len() as f64;
    Ok(MetricsReport {
        label: label.into(),
        auc: mean(|d| d.auc),
        recall_at_10: mean(|d| d.recall_at_10),
        recall_at_20: mean(|d| d.recall_at_20),
        precision_at_10: mean(|d| d.precision_at_10),
        precision_at_20: mean(|d| d.precision_at_20),
        per_domain,
        instances: instances.len(),
        skipped: stats.skipped,
        clipped: stats.clipped,
        recall_mode: mode,
        config_hash: String::new(),
        build_id: String::new(),
        timestamp: None,
    })
}
