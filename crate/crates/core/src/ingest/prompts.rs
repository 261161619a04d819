use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphUniverse, NodeId, NodeKind};
use crate::ingest::records::{InteractionRecord, SplitDataset};

pub const PROMPT_TEMPLATE_VERSION: &str = "prompt-v1";
const TEMPLATE_SOURCE: &str = include_str!("../../templates/prompt_v1.txt");

#[derive(Clone, Debug)]
struct Template {
    sections: HashMap<String, String>,
}

impl Template {
    fn parse(src: &str) -> Self {
        let mut sections = HashMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for line in src.lines() {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if let Some((n, body)) = current.take() {
                    sections.insert(n, body.join("\n"));
                }
                current = Some((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            }
        }
        if let Some((n, body)) = current {
            sections.insert(n, body.join("\n"));
        }
        Self { sections }
    }

    fn render(&self, section: &str, fields: &[(&str, &str)]) -> String {
        let mut out = self.sections[section].clone();
        for (k, v) in fields {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

/// Text field groups removed by the masking protocol, numbered as mask
/// types 0 to 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskGroup {
    Id,
    Review,
    Title,
    DescriptionFeatures,
    Numeric,
}

impl MaskGroup {
    pub const ALL: [MaskGroup; 5] =
        [MaskGroup::Id, MaskGroup::Review, MaskGroup::Title, MaskGroup::DescriptionFeatures, MaskGroup::Numeric];

    pub fn type_index(self) -> usize {
        self as usize
    }

    pub fn from_type_index(t: usize) -> Option<Self> {
        Self::ALL.get(t).copied()
    }

    fn covers(self, field: &str) -> bool {
        matches!(
            (self, field),
            (MaskGroup::Id, "id")
                | (MaskGroup::Review, "review")
                | (MaskGroup::Title, "title")
                | (MaskGroup::DescriptionFeatures, "description" | "features")
                | (MaskGroup::Numeric, "price" | "brand" | "salesRank")
        )
    }
}

/// Field group blanked in the prompts of the flagged nodes.
#[derive(Clone, Debug)]
pub struct PromptMask {
    pub group: MaskGroup,
    pub masked: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub k_recent: usize,
    pub truncation_quantile: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { k_recent: 10, truncation_quantile: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    /// Node keys in universe order.
    pub keys: Vec<String>,
    pub prompts: Vec<String>,
    /// Character caps for user and item prompts.
    pub user_cap: usize,
    pub item_cap: usize,
    pub k_recent: usize,
    pub truncation_quantile: f64,
    pub template_version: String,
}

/// Nearest-rank quantile: the smallest value with at least `q` of the
/// sample at or below it.
pub fn nearest_rank_quantile(values: &[usize], q: f64) -> usize {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn truncate_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((b, _)) => s[..b].to_string(),
        None => s.to_string(),
    }
}

/// Build one prompt per node from train-split history. Item metadata comes
/// from the first record mentioning the item, in input order.
pub fn build_prompts(
    records: &[InteractionRecord],
    split: &SplitDataset,
    universe: &GraphUniverse,
    config: &PromptConfig,
    mask: Option<&PromptMask>,
) -> Result<PromptSet> {
    if records.is_empty() {
        return Err(Error::Empty("no records for prompt construction".into()));
    }
    if !(config.truncation_quantile > 0.0 && config.truncation_quantile <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "truncation quantile {} outside (0, 1]",
            config.truncation_quantile
        )));
    }
    let n = universe.num_nodes();
    if let Some(m) = mask {
        if m.masked.len() != n {
            return Err(Error::Shape(format!("mask covers {} nodes, universe has {n}", m.masked.len())));
        }
    }
    let template = Template::parse(TEMPLATE_SOURCE);

    let mut item_meta: Vec<Option<&BTreeMap<String, String>>> = vec![None; n];
    let mut raw_item_key: Vec<&str> = vec![""; n];
    let mut raw_user_key: Vec<&str> = vec![""; n];
    for e in split.all() {
        let r = &records[e.record];
        raw_user_key[e.user.0] = &r.user_key;
        raw_item_key[e.item.0] = &r.item_key;
    }
    let mut first_meta: Vec<Option<usize>> = vec![None; n];
    for e in split.all() {
        let slot = &mut first_meta[e.item.0];
        if slot.is_none_or(|r| e.record < r) {
            *slot = Some(e.record);
        }
    }
    for (i, r) in first_meta.iter().enumerate() {
        item_meta[i] = r.map(|r| &records[r].item_meta);
    }

    // newest-first train history per node: (timestamp, record, other end)
    let mut history: Vec<Vec<(u64, usize, NodeId)>> = vec![Vec::new(); n];
    for e in &split.train {
        history[e.user.0].push((e.timestamp, e.record, e.item));
        history[e.item.0].push((e.timestamp, e.record, e.user));
    }
    for h in &mut history {
        h.sort_unstable_by_key(|x| std::cmp::Reverse((x.0, x.1)));
        h.truncate(config.k_recent);
    }

    let raw: Vec<String> = (0..n)
        .map(|i| {
            let group = mask.filter(|m| m.masked[i]).map(|m| m.group);
            let field = |name: &str, v: &str| -> String {
                if group.is_some_and(|g| g.covers(name)) {
                    String::new()
                } else {
                    v.to_string()
                }
            };
            let meta = |node: usize, name: &str| -> String {
                field(name, item_meta[node].and_then(|m| m.get(name)).map_or("", String::as_str))
            };
            let kind = universe.metas()[i].kind;
            let entries: Vec<String> = history[i]
                .iter()
                .map(|&(_, rec, other)| {
                    let review = field("review", records[rec].review.as_deref().unwrap_or(""));
                    match kind {
                        NodeKind::User => template.render(
                            "user_entry",
                            &[
                                ("id", &field("id", raw_item_key[other.0])),
                                ("title", &meta(other.0, "title")),
                                ("review", &review),
                            ],
                        ),
                        NodeKind::Item => template
                            .render("item_entry", &[("id", &field("id", raw_user_key[other.0])), ("review", &review)]),
                    }
                })
                .collect();
            let history = entries.join("\n");
            match kind {
                NodeKind::User => {
                    template.render("user", &[("id", &field("id", raw_user_key[i])), ("history", &history)])
                }
                NodeKind::Item => {
                    let fields: Vec<(&str, String)> =
                        ["title", "description", "features", "brand", "price", "salesRank"]
                            .iter()
                            .map(|&f| (f, meta(i, f)))
                            .collect();
                    let mut subs: Vec<(&str, &str)> = fields.iter().map(|(k, v)| (*k, v.as_str())).collect();
                    let id = field("id", raw_item_key[i]);
                    subs.push(("id", &id));
                    subs.push(("history", &history));
                    template.render("item", &subs)
                }
            }
        })
        .collect();

    let lengths = |kind: NodeKind| -> Vec<usize> {
        (0..n).filter(|&i| universe.metas()[i].kind == kind).map(|i| raw[i].chars().count()).collect()
    };
    let user_cap = nearest_rank_quantile(&lengths(NodeKind::User), config.truncation_quantile);
    let item_cap = nearest_rank_quantile(&lengths(NodeKind::Item), config.truncation_quantile);
    let prompts = raw
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cap = match universe.metas()[i].kind {
                NodeKind::User => user_cap,
                NodeKind::Item => item_cap,
            };
            truncate_chars(p, cap)
        })
        .collect();
    Ok(PromptSet {
        keys: universe.keys().to_vec(),
        prompts,
        user_cap,
        item_cap,
        k_recent: config.k_recent,
        truncation_quantile: config.truncation_quantile,
        template_version: PROMPT_TEMPLATE_VERSION.into(),
    })
}
