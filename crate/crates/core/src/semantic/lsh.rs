//! Random-hyperplane locality-sensitive hashing over unit rows. Candidates
//! sharing a bucket (or differing in one signature bit) in any table are
//! re-ranked exactly.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::NeighborList;
use crate::dense::{dot, Dense};

#[derive(Clone, Debug, PartialEq)]
pub struct LshConfig {
    pub tables: usize,
    /// Signature bits per table, at most 63.
    pub bits: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        Self { tables: 8, bits: 10, seed: 0x5eed }
    }
}

pub struct LshIndex {
    planes: Vec<Dense>,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
}

fn signature(planes: &Dense, x: &[f64]) -> u64 {
    (0..planes.rows()).fold(0u64, |s, b| s | (u64::from(dot(planes.row(b), x) >= 0.0) << b))
}

impl LshIndex {
    pub fn build(unit: &Dense, candidates: &[usize], cfg: &LshConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bits = cfg.bits.clamp(1, 63);
        let planes: Vec<Dense> =
            (0..cfg.tables.max(1)).map(|_| Dense::random_normal(bits, unit.cols(), 1.0, &mut rng)).collect();
        let buckets = planes
            .iter()
            .map(|p| {
                let mut table: HashMap<u64, Vec<usize>> = HashMap::new();
                for &c in candidates {
                    table.entry(signature(p, unit.row(c))).or_default().push(c);
                }
                table
            })
            .collect();
        Self { planes, buckets }
    }

    pub fn query_all(&self, unit: &Dense, queries: &[usize], k: usize) -> Vec<NeighborList> {
        queries
            .par_iter()
            .map(|&q| {
                let x = unit.row(q);
                let mut cand = BTreeSet::new();
                for (p, table) in self.planes.iter().zip(&self.buckets) {
                    let sig = signature(p, x);
                    let probes = std::iter::once(sig).chain((0..p.rows()).map(|b| sig ^ (1 << b)));
                    for s in probes {
                        if let Some(v) = table.get(&s) {
                            cand.extend(v.iter().copied().filter(|&c| c != q));
                        }
                    }
                }
                let mut scored: Vec<(usize, f64)> = cand.into_iter().map(|c| (c, dot(x, unit.row(c)))).collect();
                scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored.truncate(k);
                NeighborList { query: q, neighbors: scored }
            })
            .collect()
    }
}

/// Fraction of exact neighbours with similarity above `floor` that the
/// approximate lists also contain. 1.0 when there are none.
pub fn recall(exact: &[NeighborList], approx: &[NeighborList], floor: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (e, a) in exact.iter().zip(approx) {
        debug_assert_eq!(e.query, a.query);
        let got: BTreeSet<usize> = a.neighbors.iter().map(|x| x.0).collect();
        for &(c, s) in &e.neighbors {
            if s > floor {
                total += 1;
                hit += usize::from(got.contains(&c));
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}
