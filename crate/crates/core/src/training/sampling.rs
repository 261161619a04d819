use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::DomainId;
use crate::model::Triple;

/// Maximum negative draws before a collision is accepted.
const MAX_NEGATIVE_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BprTriple {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
    pub domain: DomainId,
}

impl From<BprTriple> for Triple {
    fn from(t: BprTriple) -> Self {
        Triple { user: t.user, pos: t.pos_item, neg: t.neg_item }
    }
}

/// Training interactions of one domain, in model node indices.
#[derive(Clone, Debug)]
pub struct DomainTrain {
    pub domain: DomainId,
    pub edges: Vec<(usize, usize)>,
    pub items: Vec<usize>,
    positives: HashSet<(usize, usize)>,
}

impl DomainTrain {
    pub fn new(domain: DomainId, edges: Vec<(usize, usize)>, items: Vec<usize>) -> Self {
        let positives = edges.iter().copied().collect();
        Self { domain, edges, items, positives }
    }

    pub fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives.contains(&(user, item))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Negatives accepted after exhausting the retry budget.
    pub forced_collisions: usize,
}

/// Draw `batch_size` positives uniformly from the pooled training edges and
/// `negatives_per_positive` same-domain negatives for each.
pub fn sample_bpr_triples<R: Rng + ?Sized>(
    domains: &[DomainTrain],
    batch_size: usize,
    negatives_per_positive: usize,
    rng: &mut R,
) -> Result<(Vec<BprTriple>, SampleStats)> {
    if domains.is_empty() {
        return Err(Error::Empty("no training domains".into()));
    }
    for d in domains {
        if d.edges.is_empty() || d.items.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "domain {:?} needs at least one training edge and two items",
                d.domain
            )));
        }
    }
    let total: usize = domains.iter().map(|d| d.edges.len()).sum();
    let mut stats = SampleStats::default();
    let mut out = Vec::with_capacity(batch_size * negatives_per_positive);
    for _ in 0..batch_size {
        let mut k = rng.random_range(0..total);
        let dom = domains
            .iter()
            .find(|d| {
                if k < d.edges.len() {
                    true
                } else {
                    k -= d.edges.len();
                    false
                }
            })
            .expect("index within pooled edges");
        let (user, pos) = dom.edges[k];
        for _ in 0..negatives_per_positive {
            let mut neg = dom.items[rng.random_range(0..dom.items.len())];
            let mut tries = 1;
            while dom.is_positive(user, neg) {
                if tries >= MAX_NEGATIVE_TRIES {
                    stats.forced_collisions += 1;
                    break;
                }
                neg = dom.items[rng.random_range(0..dom.items.len())];
                tries += 1;
            }
            out.push(BprTriple { user, pos_item: pos, neg_item: neg, domain: dom.domain });
        }
    }
    if stats.forced_collisions > 0 {
        log::warn!("{} negatives accepted after {MAX_NEGATIVE_TRIES} draws", stats.forced_collisions);
    }
    Ok((out, stats))
}
