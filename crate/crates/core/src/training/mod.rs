//! BPR objective, Adam, early stopping, triple sampling and the
//! pre-training / fine-tuning / training-free drivers.

mod adam;
mod bpr;
pub mod checkpoint;
mod config;
mod driver;
mod sampling;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use bpr::bpr_loss;
pub use checkpoint::{config_hash, Checkpoint, Stage};
pub use config::TrainConfig;
pub use driver::{
    checkpoint_layout, evaluate_checkpoint, finetune, pretrain, scratch_baseline, training_free_infer, EpochLog,
    EvalSplit, TrainOutcome,
};
pub use sampling::{sample_bpr_triples, BprTriple, DomainTrain, SampleStats};

/// Continue training or stop at the recorded best epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Stop once the best validation AUC has not strictly improved for
/// `patience` consecutive epochs. Ties do not reset the counter.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    let Some(best) = best_epoch(history) else {
        return StopDecision::Continue;
    };
    if history.len() - 1 - best >= patience {
        StopDecision::Stop { best_epoch: best }
    } else {
        StopDecision::Continue
    }
}

/// Earliest index of the maximum.
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        match best {
            Some(b) if v <= history[b] => {}
            _ => best = Some(i),
        }
    }
    best
}
