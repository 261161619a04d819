//! Seeded multi-domain benchmark generator with known latent structure.
//!
//! Every domain shares the same concept layout: user `i` and item `j`
//! belong to concepts `i mod C` and `j mod C`, and same-index nodes of two
//! domains are matched pairs. A node's latent factor mixes a cross-domain
//! component with weight `sqrt(rho)` and a domain-private one with weight
//! `sqrt(1 - rho)`. Users and items have separate text projections, mixed
//! the same way, so a user's text says nothing about item affinity until
//! the mapping is learned, and that mapping transfers across domains only
//! to the extent that semantics are shared.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{dot, Dense};
use crate::error::{Error, Result};
use crate::graph::{node_key, NodeKind};
use crate::ingest::{InteractionRecord, TextEmbeddingMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Domain count; the last one is the target.
    pub n_domains: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    /// Latent dimension.
    pub k: usize,
    /// Shared-semantics strength in [0, 1].
    pub rho: f64,
    /// Fraction of user-item pairs that interact.
    pub density: f64,
    /// Density of the target domain; `None` uses `density`.
    pub target_density: Option<f64>,
    /// Standard deviation of the noise added to affinities.
    pub noise: f64,
    pub n_concepts: usize,
    /// Spread of nodes around their concept centre.
    pub concept_spread: f64,
    pub text_dim: usize,
    /// Standard deviation of the text noise.
    pub text_noise: f64,
    /// Length of the common offset shared by all text vectors; large
    /// values push unrelated pairs towards high cosine similarity, as
    /// language-model embeddings do.
    pub text_offset: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 3,
            users_per_domain: 300,
            items_per_domain: 300,
            k: 16,
            rho: 0.8,
            density: 0.02,
            target_density: Some(0.003),
            noise: 0.25,
            n_concepts: 20,
            concept_spread: 1.0,
            text_dim: 32,
            text_noise: 0.1,
            text_offset: 8.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        for d in std::iter::once(self.density).chain(self.target_density) {
            if !(d > 0.0 && d <= 1.0) {
                return bad("density must lie in (0, 1]");
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.n_domains == 0 || self.users_per_domain == 0 || self.items_per_domain < 2 {
            return bad("need at least one domain, one user and two items per domain");
        }
        if self.k == 0 || self.text_dim == 0 || self.n_concepts == 0 {
            return bad("k, text_dim and n_concepts must be positive");
        }
        if self.noise < 0.0 || self.text_noise < 0.0 || self.concept_spread < 0.0 || self.text_offset < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        (0..self.n_domains)
            .map(|d| if d + 1 == self.n_domains && self.n_domains > 1 { "target".into() } else { format!("source{d}") })
            .collect()
    }
}

/// Latent factors behind one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLatents {
    pub users: Dense,
    pub items: Dense,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    pub domain_names: Vec<String>,
    pub records: Vec<InteractionRecord>,
    /// One row per user and item with at least one interaction, keyed by
    /// universe node key.
    pub text: TextEmbeddingMatrix,
    pub latents: Vec<DomainLatents>,
}

impl SynthOutput {
    pub fn sources(&self) -> Vec<String> {
        self.domain_names[..self.domain_names.len() - 1].to_vec()
    }

    pub fn target(&self) -> &str {
        self.domain_names.last().expect("at least one domain")
    }
}

pub fn user_key(i: usize) -> String {
    format!("u{i:05}")
}

pub fn item_key(j: usize) -> String {
    format!("i{j:05}")
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Dense {
    Dense::random_normal(rows, cols, std, rng)
}

/// `sqrt(rho) * shared + sqrt(1 - rho) * private`
fn mix(rho: f64, shared: &Dense, private: &Dense) -> Dense {
    let mut out = shared.clone();
    out.scale(rho.sqrt());
    out.axpy((1.0 - rho).sqrt(), private).expect("equal shapes");
    out
}

/// Concept centre plus spread, per node.
fn factors(n: usize, centres: &Dense, spread: &Dense, c: usize) -> Dense {
    let mut out = Dense::zeros(n, centres.cols());
    for i in 0..n {
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(centres.row(i % c).iter().zip(spread.row(i))) {
            *o = a + b;
        }
    }
    out
}

fn top_dims(v: &[f64], n: usize) -> Vec<String> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    idx.iter().take(n).map(|&d| format!("f{d}{}", if v[d] >= 0.0 { "p" } else { "n" })).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (nu, ni, k, c) = (spec.users_per_domain, spec.items_per_domain, spec.k, spec.n_concepts);
    let unit = 1.0 / (k as f64).sqrt();
    let spread = spec.concept_spread * unit;
    let text_std = 1.0 / (spec.text_dim as f64).sqrt();

    // cross-domain components
    let g_concepts = gaussian(c, k, unit, &mut rng);
    let g_user_spread = gaussian(nu, k, spread, &mut rng);
    let g_item_spread = gaussian(ni, k, spread, &mut rng);
    let g_proj_user = gaussian(spec.text_dim, k, text_std, &mut rng);
    let g_proj_item = gaussian(spec.text_dim, k, text_std, &mut rng);
    let mut offset_dir = gaussian(1, spec.text_dim, 1.0, &mut rng).into_vec();
    let on = offset_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    offset_dir.iter_mut().for_each(|x| *x *= spec.text_offset / on);
    let shared_users = factors(nu, &g_concepts, &g_user_spread, c);
    let shared_items = factors(ni, &g_concepts, &g_item_spread, c);

    let names = spec.domain_names();
    let mut records = Vec::new();
    let mut latents = Vec::new();
    let mut text_keys = Vec::new();
    let mut text_values: Vec<f32> = Vec::new();
    let mut stamp_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7157_a3b5);

    for (di, name) in names.iter().enumerate() {
        let density = match spec.target_density {
            Some(t) if di + 1 == names.len() && names.len() > 1 => t,
            _ => spec.density,
        };
        let d_concepts = gaussian(c, k, unit, &mut rng);
        let d_user_spread = gaussian(nu, k, spread, &mut rng);
        let d_item_spread = gaussian(ni, k, spread, &mut rng);
        let d_proj_user = gaussian(spec.text_dim, k, text_std, &mut rng);
        let d_proj_item = gaussian(spec.text_dim, k, text_std, &mut rng);
        let users = mix(spec.rho, &shared_users, &factors(nu, &d_concepts, &d_user_spread, c));
        let items = mix(spec.rho, &shared_items, &factors(ni, &d_concepts, &d_item_spread, c));
        let proj_user = mix(spec.rho, &g_proj_user, &d_proj_user);
        let proj_item = mix(spec.rho, &g_proj_item, &d_proj_item);

        // noisy affinities, thresholded at the requested density
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(nu * ni);
        for u in 0..nu {
            for v in 0..ni {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                scored.push((dot(users.row(u), items.row(v)) + spec.noise * z, u, v));
            }
        }
        let target = ((density * (nu * ni) as f64).round() as usize).max(1);
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut pairs: Vec<(usize, usize)> = scored[..target].iter().map(|&(_, u, v)| (u, v)).collect();
        let mut user_seen = vec![false; nu];
        let mut item_seen = vec![false; ni];
        for &(u, v) in &pairs {
            user_seen[u] = true;
            item_seen[v] = true;
        }
        pairs.shuffle(&mut rng);

        let texts = |m: &Dense, proj: &Dense, rng: &mut ChaCha8Rng| -> Dense {
            let t = m.matmul(&proj.transpose()).expect("shapes agree");
            let noise = gaussian(m.rows(), spec.text_dim, spec.text_noise * text_std, rng);
            let mut out = t;
            out.axpy(1.0, &noise).expect("shapes agree");
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(&offset_dir) {
                    *o += b;
                }
            }
            out
        };
        let user_text = texts(&users, &proj_user, &mut rng);
        let item_text = texts(&items, &proj_item, &mut rng);

        // textual fields that echo the latent structure
        let item_fields: Vec<BTreeMap<String, String>> = (0..ni)
            .map(|v| {
                let dims = top_dims(items.row(v), 6);
                let concept = if rng.random::<f64>() < spec.rho {
                    format!("concept{}", v % c)
                } else {
                    format!("{name}concept{}", v % c)
                };
                let mut m = BTreeMap::new();
                m.insert("title".into(), format!("{concept} {} {}", dims[0], dims[1]));
                m.insert("description".into(), format!("{concept} item with {} and {}", dims[2], dims[3]));
                m.insert("features".into(), dims[4..].join(" "));
                m.insert("brand".into(), format!("brand{}", v % 7));
                m.insert("price".into(), format!("{:.2}", 10.0 + 5.0 * items.row(v)[0].abs() * (k as f64).sqrt()));
                m.insert("salesRank".into(), format!("{}", 1 + v));
                m
            })
            .collect();
        for &(u, v) in &pairs {
            let liked = top_dims(users.row(u), 3).join(" ");
            records.push(InteractionRecord {
                user_key: user_key(u),
                item_key: item_key(v),
                timestamp: stamp_rng.random_range(0..1_000_000),
                domain: name.clone(),
                review: Some(format!("liked {liked}")),
                item_meta: item_fields[v].clone(),
            });
        }

        for u in (0..nu).filter(|&u| user_seen[u]) {
            text_keys.push(node_key(name, NodeKind::User, &user_key(u)));
            text_values.extend(user_text.row(u).iter().map(|&x| x as f32));
        }
        for v in (0..ni).filter(|&v| item_seen[v]) {
            text_keys.push(node_key(name, NodeKind::Item, &item_key(v)));
            text_values.extend(item_text.row(v).iter().map(|&x| x as f32));
        }
        latents.push(DomainLatents { users, items });
    }
    if records.is_empty() {
        return Err(Error::Empty("generator produced no interactions".into()));
    }
    let text = TextEmbeddingMatrix::new(text_keys, spec.text_dim, text_values, format!("synth:{}", spec.seed))?;
    Ok(SynthOutput { spec: spec.clone(), domain_names: names, records, text, latents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::l2_normalize;

    fn small(seed: u64, rho: f64) -> SynthSpec {
        SynthSpec { users_per_domain: 100, items_per_domain: 100, seed, rho, ..Default::default() }
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        dot(&l2_normalize(&a), &l2_normalize(&b))
    }

    /// Mean cosine between item `j` of domain 0 and item `j` (matched) or
    /// item `j + 1` (random partner) of domain 1.
    fn item_row(out: &SynthOutput, d: usize, j: usize) -> Option<&[f32]> {
        let key = node_key(&out.domain_names[d], NodeKind::Item, &item_key(j));
        out.text.keys().iter().position(|k| *k == key).map(|p| out.text.row(p))
    }

    fn matched_vs_random(out: &SynthOutput) -> (f64, f64) {
        let ni = out.spec.items_per_domain;
        let c = out.spec.n_concepts;
        let mean_cos = |shift: usize| {
            let sims: Vec<f64> = (0..ni)
                .filter_map(|j| Some(cosine(item_row(out, 0, j)?, item_row(out, 1, (j + shift) % ni)?)))
                .collect();
            sims.iter().sum::<f64>() / sims.len() as f64
        };
        // random partners come from a different concept
        (mean_cos(0), mean_cos(1 + c / 2))
    }

    #[test]
    fn rho_zero_matches_random_pairs() {
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let (m, r) = matched_vs_random(&generate(&small(seed, 0.0)).unwrap());
            gaps.push(m - r);
        }
        let mean = gaps.iter().sum::<f64>() / 5.0;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 3.0 * sd / 5f64.sqrt() + 1e-3, "gap {mean} sd {sd}");
        let (m, r) = matched_vs_random(&generate(&small(0, 0.8)).unwrap());
        assert!(m > r, "shared semantics should raise matched similarity: {m} vs {r}");
    }

    #[test]
    fn rho_one_without_noise_gives_identical_text() {
        let spec = SynthSpec { text_noise: 0.0, ..small(3, 1.0) };
        let out = generate(&spec).unwrap();
        for j in 0..100 {
            if let (Some(a), Some(b)) = (item_row(&out, 0, j), item_row(&out, 1, j)) {
                let c = cosine(a, b);
                assert!((c - 1.0).abs() < 1e-6, "{c}");
            }
        }
    }

    #[test]
    fn density_within_binomial_bound() {
        let spec = SynthSpec {
            n_domains: 1,
            users_per_domain: 100,
            items_per_domain: 100,
            density: 0.01,
            ..Default::default()
        };
        let out = generate(&spec).unwrap();
        let n = out.records.len() as f64;
        let sd = (10_000.0f64 * 0.01 * 0.99).sqrt();
        assert!((n - 100.0).abs() <= 3.0 * sd, "{n} interactions");
    }

    #[test]
    fn seeded_and_complete() {
        let a = generate(&small(7, 0.5)).unwrap();
        let b = generate(&small(7, 0.5)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.text, b.text);
        let c = generate(&small(8, 0.5)).unwrap();
        assert_ne!(a.records, c.records);
        // text rows exist exactly for nodes with history
        let u = crate::ingest::build_universe(&a.records, &a.sources(), Some(a.target())).unwrap();
        a.text.aligned(&u).unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec { density: 0.0, ..Default::default() }).is_err());
        assert!(generate(&SynthSpec { rho: 1.5, ..Default::default() }).is_err());
    }
}
