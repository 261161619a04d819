use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Precision, RegScope};

/// Learning rates searched by the default grid.
pub const LR_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 5e-3];
pub const BATCH_GRID: [usize; 3] = [1024, 2048, 4096];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Pre-training regularisation weight.
    pub lambda_reg: f64,
    /// Fine-tuning regularisation weight.
    pub eta_reg: f64,
    pub reg_scope: RegScope,
    pub alpha: f64,
    pub gamma: f64,
    /// Semantic-edge threshold during fine-tuning; `None` reuses `gamma`.
    pub finetune_gamma: Option<f64>,
    pub k_cap: usize,
    pub layers: usize,
    pub d: usize,
    pub h: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
    pub eval_negatives: usize,
    pub init_std: f64,
    /// Keep the target rows of the global ID table fixed during fine-tuning.
    pub freeze_target_global: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 1024,
            lambda_reg: 1e-5,
            eta_reg: 1e-5,
            reg_scope: RegScope::Batch,
            alpha: 0.5,
            gamma: 0.99,
            finetune_gamma: None,
            k_cap: 20,
            layers: 2,
            d: 64,
            h: 64,
            epochs: 50,
            finetune_epochs: 50,
            patience: 5,
            seed: 42,
            negatives_per_positive: 1,
            eval_negatives: 100,
            init_std: 0.01,
            freeze_target_global: false,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for g in std::iter::once(self.gamma).chain(self.finetune_gamma) {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma {g} outside (0, 1)"));
            }
        }
        if !(1..=4).contains(&self.layers) {
            return bad(format!("layers {} outside 1..=4", self.layers));
        }
        if self.d == 0 || self.h == 0 || self.k_cap == 0 || self.negatives_per_positive == 0 {
            return bad("d, h, k_cap and negatives_per_positive must be positive".into());
        }
        if self.lambda_reg < 0.0 || self.eta_reg < 0.0 {
            return bad("regularisation weights must be non-negative".into());
        }
        if self.eval_negatives == 0 {
            return bad("eval_negatives must be positive".into());
        }
        Ok(())
    }

    pub fn fine_gamma(&self) -> f64 {
        self.finetune_gamma.unwrap_or(self.gamma)
    }

    /// Whether `lr` and `batch_size` lie on the default search grid.
    pub fn on_grid(&self) -> bool {
        LR_GRID.contains(&self.lr) && BATCH_GRID.contains(&self.batch_size)
    }
}
