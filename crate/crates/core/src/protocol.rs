//! Robustness protocols: threshold sweep, prompt-field masking and
//! target cold-start. Each row pre-trains, fine-tunes and evaluates the
//! target test split under one setting.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, RecallMode};
use crate::ingest::{
    build_prompts, fetch_embeddings, FetchConfig, HashingProvider, MaskGroup, PromptConfig, PromptMask,
};
use crate::pipeline::Dataset;
use crate::training::{config_hash, evaluate_checkpoint, finetune, pretrain, EvalSplit, TrainConfig};

pub const GAMMA_GRID: [f64; 4] = [0.9, 0.95, 0.99, 0.995];
pub const MASK_RATES: [f64; 3] = [0.1, 0.2, 0.5];
pub const COLD_START_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolName {
    GammaSweep,
    Masking,
    ColdStart,
}

impl ProtocolName {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolName::GammaSweep => "gamma-sweep",
            ProtocolName::Masking => "masking",
            ProtocolName::ColdStart => "cold-start",
        }
    }
}

impl FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma-sweep" => Ok(ProtocolName::GammaSweep),
            "masking" => Ok(ProtocolName::Masking),
            "cold-start" => Ok(ProtocolName::ColdStart),
            _ => Err(Error::InvalidArgument(format!(
                "unknown protocol `{s}` (expected gamma-sweep, masking or cold-start)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolOptions {
    pub gammas: Vec<f64>,
    pub mask_rates: Vec<f64>,
    /// Mask types by index into [`MaskGroup::ALL`].
    pub mask_types: Vec<usize>,
    pub cold_start_fraction: f64,
    /// Dimension of the offline hashing encoder used by the masking runs.
    pub hashing_dim: usize,
    pub recall_mode: RecallMode,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            gammas: GAMMA_GRID.to_vec(),
            mask_rates: MASK_RATES.to_vec(),
            mask_types: (0..MaskGroup::ALL.len()).collect(),
            cold_start_fraction: COLD_START_FRACTION,
            hashing_dim: 64,
            recall_mode: RecallMode::PerUser,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub setting: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_type: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_rate: Option<f64>,
    pub target_train_edges: usize,
    pub edge_counts: BTreeMap<String, usize>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolName,
    pub config_hash: String,
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolReport {
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.metrics.timestamp = None);
        canonical_json(&r)
    }

    /// Structural checks shared by every protocol, plus weakly decreasing
    /// edge counts along the threshold sweep.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.rows.is_empty() {
            return bad("protocol report has no rows".into());
        }
        for row in &self.rows {
            row.metrics.validate()?;
            if row.metrics.config_hash.is_empty() {
                return bad(format!("row `{}` lacks a config hash", row.setting));
            }
        }
        match self.protocol {
            ProtocolName::GammaSweep => {
                let mut rows: Vec<&ProtocolRow> = self.rows.iter().collect();
                if rows.iter().any(|r| r.gamma.is_none()) {
                    return bad("gamma-sweep row without gamma".into());
                }
                rows.sort_by(|a, b| a.gamma.unwrap().total_cmp(&b.gamma.unwrap()));
                for w in rows.windows(2) {
                    for (mode, &hi) in &w[1].edge_counts {
                        let lo = w[0].edge_counts.get(mode).copied().unwrap_or(0);
                        if hi > lo {
                            return bad(format!(
                                "{mode} edges grow from {lo} to {hi} as gamma rises to {}",
                                w[1].gamma.unwrap()
                            ));
                        }
                    }
                }
            }
            ProtocolName::Masking => {
                if self.rows.iter().any(|r| r.mask_rate.is_none()) {
                    return bad("masking row without rate".into());
                }
            }
            ProtocolName::ColdStart => {}
        }
        Ok(())
    }
}

fn target_train_edges(ds: &Dataset) -> Result<usize> {
    let t = ds.target()?;
    Ok(ds.domain_edges(&ds.split.train, t).len())
}

/// Pre-train, fine-tune and evaluate the target test split.
fn transfer_row(ds: &Dataset, cfg: &TrainConfig, label: &str, mode: RecallMode) -> Result<ProtocolRow> {
    let pre = pretrain(ds, cfg, &mut |_| {})?;
    let ft = finetune(ds, &pre.checkpoint, cfg, &mut |_| {})?;
    let metrics = evaluate_checkpoint(ds, &ft.checkpoint, EvalSplit::Test, label, mode)?;
    Ok(ProtocolRow {
        setting: String::new(),
        gamma: None,
        mask_type: None,
        mask_rate: None,
        target_train_edges: target_train_edges(ds)?,
        edge_counts: ft.checkpoint.edge_counts,
        metrics,
    })
}

/// Text rows rebuilt from prompts through the hashing encoder, with an
/// optional field mask.
pub fn hashed_text(ds: &Dataset, dim: usize, seed: u64, mask: Option<&PromptMask>) -> Result<Dataset> {
    let prompts = build_prompts(&ds.records, &ds.split, &ds.universe, &PromptConfig::default(), mask)?;
    let provider = HashingProvider { dim, seed };
    let (matrix, _) = fetch_embeddings(&provider, &prompts, &FetchConfig::default())?;
    ds.with_text(matrix.aligned(&ds.universe)?)
}

/// Flag `round(rate * n)` nodes uniformly at random.
pub fn random_mask(group: MaskGroup, n: usize, rate: f64, seed: u64) -> Result<PromptMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut masked = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, (rate * n as f64).round() as usize) {
        masked[i] = true;
    }
    Ok(PromptMask { group, masked })
}

pub fn run_protocol(
    name: ProtocolName,
    ds: &Dataset,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
    on_row: &mut dyn FnMut(&ProtocolRow),
) -> Result<ProtocolReport> {
    cfg.validate()?;
    let label = name.name();
    let mode = opts.recall_mode;
    let mut rows = Vec::new();
    let mut push = |row: ProtocolRow, rows: &mut Vec<ProtocolRow>| {
        on_row(&row);
        rows.push(row);
    };
    match name {
        ProtocolName::GammaSweep => {
            for &gamma in &opts.gammas {
                let c = TrainConfig { gamma, finetune_gamma: None, ..cfg.clone() };
                c.validate()?;
                let row = transfer_row(ds, &c, label, mode)?;
                push(ProtocolRow { setting: format!("gamma={gamma}"), gamma: Some(gamma), ..row }, &mut rows);
            }
        }
        ProtocolName::Masking => {
            let base = hashed_text(ds, opts.hashing_dim, cfg.seed, None)?;
            let row = transfer_row(&base, cfg, label, mode)?;
            push(ProtocolRow { setting: "baseline".into(), mask_rate: Some(0.0), ..row }, &mut rows);
            for &t in &opts.mask_types {
                let group = MaskGroup::from_type_index(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown mask type {t}")))?;
                for &rate in &opts.mask_rates {
                    let mask = random_mask(group, ds.universe.num_nodes(), rate, cfg.seed ^ ((t as u64) << 32))?;
                    let masked = hashed_text(ds, opts.hashing_dim, cfg.seed, Some(&mask))?;
                    let row = transfer_row(&masked, cfg, label, mode)?;
                    push(
                        ProtocolRow {
                            setting: format!("type{t}@{rate}"),
                            mask_type: Some(t),
                            mask_rate: Some(rate),
                            ..row
                        },
                        &mut rows,
                    );
                }
            }
        }
        ProtocolName::ColdStart => {
            let full = transfer_row(ds, cfg, label, mode)?;
            push(ProtocolRow { setting: "full".into(), ..full }, &mut rows);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc01d);
            let cold = ds.subsample_target_train(opts.cold_start_fraction, &mut rng)?;
            let row = transfer_row(&cold, cfg, label, mode)?;
            push(ProtocolRow { setting: format!("retain={}", opts.cold_start_fraction), ..row }, &mut rows);
        }
    }
    let report = ProtocolReport { protocol: name, config_hash: config_hash(cfg)?, rows };
    report.validate()?;
    Ok(report)
}
