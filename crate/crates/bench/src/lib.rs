//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tbg_core::ingest::DEFAULT_FRACTIONS;
use tbg_core::pipeline::Dataset;
use tbg_core::synth::{generate, SynthSpec};
use tbg_core::Dense;

/// The default synthetic fixture.
pub fn fixture() -> Dataset {
    let out = generate(&SynthSpec::default()).expect("default spec is valid");
    Dataset::new(out.records.clone(), &out.sources(), Some(out.target()), &out.text, DEFAULT_FRACTIONS)
        .expect("synthetic records split cleanly")
}

pub fn random_rows(rows: usize, cols: usize, seed: u64) -> Dense {
    Dense::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
