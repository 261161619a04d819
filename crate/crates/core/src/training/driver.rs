use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, build_report, score_instances, EvalInstance, MetricsReport, RecallMode};
use crate::graph::DomainId;
use crate::ingest::SplitEdge;
use crate::model::{Model, ModelParams, Triple};
use crate::pipeline::{finetune_layout, pretrain_layout, scratch_layout, Dataset, Layout};

use super::checkpoint::{default_build_id, Checkpoint, Stage};
use super::{best_epoch, early_stop, sample_bpr_triples, AdamConfig, AdamState, StopDecision, TrainConfig};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy)]
enum Stream {
    Init = 1,
    Sampling = 2,
    Validation = 3,
    Test = 4,
}

fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    pub bpr: f64,
    pub reg: f64,
    pub reg_raw: f64,
    pub val_auc: Option<f64>,
    pub steps: usize,
    pub forced_negatives: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub layout: Layout,
}

fn validation_auc(model: &Model, layout: &Layout, inst: &[EvalInstance]) -> Result<Option<f64>> {
    if inst.is_empty() {
        return Ok(None);
    }
    let emb = model.final_embeddings()?;
    let scores = score_instances(&emb, &|u| layout.model_index(u), inst)?;
    auc(inst, &scores).map(Some)
}

struct Fit {
    params: ModelParams,
    adam: AdamState,
    history: Vec<f64>,
    epoch: usize,
    log: Vec<EpochLog>,
}

/// BPR training with Adam and early stopping on validation AUC. The
/// returned parameters are those of the earliest best epoch; epoch 0 is
/// the untrained state.
fn fit(
    ds: &Dataset,
    layout: &Layout,
    params: ModelParams,
    cfg: &TrainConfig,
    reg_weight: f64,
    epochs: usize,
    stage: Stage,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Fit> {
    let mut model = Model::new(layout.arch.clone(), params)?;
    let domains = layout.train_domains(ds);
    let reg = layout.regularization(reg_weight, cfg.reg_scope, ds);
    let (val, _) = ds.eval_instances(
        &ds.split.valid,
        &layout.train_domains,
        cfg.eval_negatives,
        &mut rng(cfg.seed, Stream::Validation),
    );
    let mut sampler = rng(cfg.seed, Stream::Sampling);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::new();
    let mut best = (model.params.clone(), adam.clone(), 0usize);
    if let Some(a) = validation_auc(&model, layout, &val)? {
        history.push(a);
    }
    let total: usize = domains.iter().map(|d| d.edges.len()).sum();
    let steps = total.div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    for epoch in 1..=epochs {
        let start = Instant::now();
        let mut sums = [0.0; 4];
        let mut forced = 0;
        for _ in 0..steps {
            let (batch, stats) =
                sample_bpr_triples(&domains, cfg.batch_size, cfg.negatives_per_positive, &mut sampler)?;
            forced += stats.forced_collisions;
            let triples: Vec<Triple> = batch.into_iter().map(Into::into).collect();
            let (loss, grads) = model.loss_and_grad(&triples, &reg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at epoch {epoch}", stage.name())));
            }
            adam.step(&mut model.params, &grads, &adam_cfg)?;
            for (s, v) in sums.iter_mut().zip([loss.total, loss.bpr, loss.reg, loss.reg_raw]) {
                *s += v;
            }
        }
        let val_auc = validation_auc(&model, layout, &val)?;
        let n = steps.max(1) as f64;
        let entry = EpochLog {
            stage,
            epoch,
            loss: sums[0] / n,
            bpr: sums[1] / n,
            reg: sums[2] / n,
            reg_raw: sums[3] / n,
            val_auc,
            steps,
            forced_negatives: forced,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.push(entry);
        let Some(a) = val_auc else {
            best = (model.params.clone(), adam.clone(), epoch);
            continue;
        };
        history.push(a);
        if best_epoch(&history) == Some(epoch) {
            best = (model.params.clone(), adam.clone(), epoch);
        }
        if let StopDecision::Stop { .. } = early_stop(&history, cfg.patience) {
            break;
        }
    }
    let (params, adam, epoch) = best;
    Ok(Fit { params, adam, history, epoch, log })
}

fn domain_names(ds: &Dataset) -> (Vec<String>, Option<String>) {
    let u = &ds.universe;
    (u.source_domains().map(|d| u.domain(d).name.clone()).collect(), u.target().map(|t| u.domain(t).name.clone()))
}

fn outcome(ds: &Dataset, layout: Layout, cfg: TrainConfig, stage: Stage, fit: Fit) -> TrainOutcome {
    let (sources, target) = domain_names(ds);
    let checkpoint = Checkpoint {
        stage,
        config: cfg,
        params: fit.params,
        adam: Some(fit.adam),
        fingerprints: layout.fingerprints.clone(),
        epoch: fit.epoch,
        history: fit.history,
        edge_counts: layout.edge_counts.clone(),
        sources,
        target,
        build_id: default_build_id(),
    };
    TrainOutcome { checkpoint, log: fit.log, layout }
}

/// Train on the source domains with the cross-domain semantic graph.
pub fn pretrain(ds: &Dataset, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = pretrain_layout(ds, cfg)?;
    let params = layout.init_params(cfg, &mut rng(cfg.seed, Stream::Init))?;
    let fit = fit(ds, &layout, params, cfg, cfg.lambda_reg, cfg.epochs, Stage::Pretrain, on_epoch)?;
    Ok(outcome(ds, layout, cfg.clone(), Stage::Pretrain, fit))
}

/// Architecture settings come from the pre-trained checkpoint; optimisation
/// settings from `cfg`. The fine-tuning threshold defaults to the one used
/// in pre-training.
fn finetune_config(pre: &Checkpoint, cfg: &TrainConfig) -> TrainConfig {
    let p = &pre.config;
    TrainConfig {
        alpha: p.alpha,
        gamma: p.gamma,
        finetune_gamma: Some(cfg.finetune_gamma.unwrap_or(p.gamma)),
        k_cap: p.k_cap,
        layers: p.layers,
        d: p.d,
        h: p.h,
        init_std: p.init_std,
        ..cfg.clone()
    }
}

fn finetune_setup(ds: &Dataset, pre: &Checkpoint, cfg: &TrainConfig) -> Result<(TrainConfig, Layout, ModelParams)> {
    if pre.stage != Stage::Pretrain {
        return Err(Error::InvalidArgument(format!("expected a pretrain checkpoint, got {}", pre.stage.name())));
    }
    let fc = finetune_config(pre, cfg);
    fc.validate()?;
    let layout = finetune_layout(ds, &fc, fc.fine_gamma())?;
    layout.check_fingerprints(&pre.fingerprints)?;
    let params = layout.finetune_params(&pre.params, fc.freeze_target_global)?;
    Ok((fc, layout, params))
}

/// Adapt a pre-trained checkpoint to the target domain.
pub fn finetune(
    ds: &Dataset,
    pre: &Checkpoint,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let (fc, layout, params) = finetune_setup(ds, pre, cfg)?;
    let fit = fit(ds, &layout, params, &fc, fc.eta_reg, fc.finetune_epochs, Stage::Finetune, on_epoch)?;
    Ok(outcome(ds, layout, fc, Stage::Finetune, fit))
}

/// Fine-tuning initialisation scored without any update. Identical to the
/// epoch-0 state of [`finetune`].
pub fn training_free_infer(ds: &Dataset, pre: &Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (fc, layout, params) = finetune_setup(ds, pre, cfg)?;
    let fit = fit(ds, &layout, params, &fc, fc.eta_reg, 0, Stage::ZeroShot, &mut |_| {})?;
    let mut out = outcome(ds, layout, fc, Stage::ZeroShot, fit);
    out.checkpoint.adam = None;
    Ok(out)
}

/// The same architecture trained on the target domain alone.
pub fn scratch_baseline(ds: &Dataset, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = scratch_layout(ds, cfg)?;
    let params = layout.init_params(cfg, &mut rng(cfg.seed, Stream::Init))?;
    let fit = fit(ds, &layout, params, cfg, cfg.lambda_reg, cfg.epochs, Stage::Scratch, on_epoch)?;
    Ok(outcome(ds, layout, cfg.clone(), Stage::Scratch, fit))
}

/// Rebuild the layout a checkpoint was trained with, refusing graphs that
/// differ from the recorded fingerprints.
pub fn checkpoint_layout(ds: &Dataset, ckpt: &Checkpoint) -> Result<Layout> {
    let layout = match ckpt.stage {
        Stage::Pretrain => pretrain_layout(ds, &ckpt.config)?,
        Stage::Finetune | Stage::ZeroShot => finetune_layout(ds, &ckpt.config, ckpt.config.fine_gamma())?,
        Stage::Scratch => scratch_layout(ds, &ckpt.config)?,
    };
    layout.check_fingerprints(&ckpt.fingerprints)?;
    Ok(layout)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Valid,
    Test,
}

/// Metrics of a checkpoint on the validation or test interactions of the
/// domains it was trained on. Negatives depend only on the seed and the
/// dataset, so checkpoints sharing a seed see identical instances.
pub fn evaluate_checkpoint(
    ds: &Dataset,
    ckpt: &Checkpoint,
    split: EvalSplit,
    label: &str,
    mode: RecallMode,
) -> Result<MetricsReport> {
    let layout = checkpoint_layout(ds, ckpt)?;
    let model = Model::new(layout.arch.clone(), ckpt.params.clone())?;
    let emb = model.final_embeddings()?;
    let (part, stream): (&[SplitEdge], Stream) = match split {
        EvalSplit::Valid => (&ds.split.valid, Stream::Validation),
        EvalSplit::Test => (&ds.split.test, Stream::Test),
    };
    let domains: Vec<DomainId> = layout.train_domains.clone();
    let (inst, stats) =
        ds.eval_instances(part, &domains, ckpt.config.eval_negatives, &mut rng(ckpt.config.seed, stream));
    if inst.is_empty() {
        return Err(Error::Empty(format!("no {split:?} instances for evaluation")));
    }
    let scores = score_instances(&emb, &|u| layout.model_index(u), &inst)?;
    let mut report = build_report(label, &ds.universe, &inst, &scores, stats, mode)?;
    report.config_hash = ckpt.config_hash()?;
    report.build_id = ckpt.build_id.clone();
    Ok(report)
}
