use std::path::PathBuf;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tbg_core::ingest::*;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn manifest() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(fixture_dir().join("interactions_1000.manifest.json")).unwrap())
        .unwrap()
}

fn fixture() -> Vec<InteractionRecord> {
    let out = parse_interactions(&fixture_dir().join("interactions_1000.tsv"), &DelimitedFormat::default()).unwrap();
    assert_eq!(out.skipped_missing + out.skipped_bad_timestamp, 0);
    out.records
}

fn sources() -> Vec<String> {
    vec!["source0".to_string()]
}

#[test]
fn fixture_matches_manifest() {
    let m = manifest();
    let bytes = std::fs::read(fixture_dir().join("interactions_1000.tsv")).unwrap();
    assert_eq!(hex::encode(Sha256::digest(&bytes)), m["file_sha256"].as_str().unwrap());
    let records = fixture();
    assert_eq!(records.len() as u64, m["records"].as_u64().unwrap());
    assert_eq!(records_checksum(&records), m["key_checksum"].as_str().unwrap());
}

#[test]
fn split_boundaries_match_sort_oracle() {
    let records = fixture();
    let universe = build_universe(&records, &sources(), Some("target")).unwrap();
    let split = temporal_split(&records, &universe, DEFAULT_FRACTIONS).unwrap();
    // oracle: full sort by (timestamp, input position), then slice
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].timestamp, i));
    let (a, b) = (800, 900);
    let ids = |part: &[SplitEdge]| part.iter().map(|e| e.record).collect::<Vec<_>>();
    assert_eq!(ids(&split.train), order[..a]);
    assert_eq!(ids(&split.valid), order[a..b]);
    assert_eq!(ids(&split.test), order[b..]);
    assert!(split.train.last().unwrap().timestamp <= split.valid[0].timestamp);
    assert!(split.valid.last().unwrap().timestamp <= split.test[0].timestamp);
}

#[test]
fn split_is_independent_of_thread_count() {
    let records = fixture();
    let universe = build_universe(&records, &sources(), Some("target")).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| temporal_split(&records, &universe, DEFAULT_FRACTIONS).unwrap().digest())
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lower_quantile_never_lengthens(q1 in 0.05f64..1.0, q2 in 0.05f64..1.0) {
        let records = fixture();
        let mut universe = build_universe(&records, &sources(), Some("target")).unwrap();
        let split = temporal_split(&records, &universe, DEFAULT_FRACTIONS).unwrap();
        split.install_train_graphs(&mut universe).unwrap();
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let build = |q: f64| {
            let cfg = PromptConfig { truncation_quantile: q, ..PromptConfig::default() };
            build_prompts(&records, &split, &universe, &cfg, None).unwrap()
        };
        let (a, b) = (build(lo), build(hi));
        for (x, y) in a.prompts.iter().zip(&b.prompts) {
            prop_assert!(x.chars().count() <= y.chars().count());
        }
    }
}
