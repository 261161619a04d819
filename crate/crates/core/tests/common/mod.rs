#![allow(dead_code)]

use tbg_core::ingest::DEFAULT_FRACTIONS;
use tbg_core::pipeline::Dataset;
use tbg_core::synth::{generate, SynthOutput, SynthSpec};
use tbg_core::training::TrainConfig;

pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        users_per_domain: 60,
        items_per_domain: 60,
        density: 0.06,
        target_density: Some(0.04),
        n_concepts: 6,
        seed,
        ..SynthSpec::default()
    }
}

pub fn dataset(spec: &SynthSpec) -> (SynthOutput, Dataset) {
    let out = generate(spec).unwrap();
    let ds =
        Dataset::new(out.records.clone(), &out.sources(), Some(out.target()), &out.text, DEFAULT_FRACTIONS).unwrap();
    (out, ds)
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        h: 8,
        batch_size: 64,
        epochs: 6,
        finetune_epochs: 6,
        patience: 3,
        lr: 5e-3,
        ..TrainConfig::default()
    }
}
