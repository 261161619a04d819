use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{DomainId, GraphUniverse, NodeId, NodeKind, UniverseBuilder};

/// Optional item metadata columns, in canonical order.
pub const META_FIELDS: [&str; 6] = ["title", "description", "features", "brand", "price", "salesRank"];
pub const REQUIRED_COLUMNS: [&str; 4] = ["user", "item", "timestamp", "domain"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: u64,
    pub domain: String,
    pub review: Option<String>,
    /// Keys drawn from [`META_FIELDS`]; empty values are omitted.
    pub item_meta: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelimitedFormat {
    pub delimiter: char,
}

impl Default for DelimitedFormat {
    fn default() -> Self {
        Self { delimiter: '\t' }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    /// Rows lacking a user, item or domain value.
    pub skipped_missing: usize,
    /// Rows whose timestamp is not a non-negative integer.
    pub skipped_bad_timestamp: usize,
}

impl ParseOutcome {
    pub fn skipped(&self) -> usize {
        self.skipped_missing + self.skipped_bad_timestamp
    }
}

pub fn parse_interactions(path: &Path, format: &DelimitedFormat) -> Result<ParseOutcome> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_interactions_str(&text, format)
}

pub fn parse_interactions_str(text: &str, format: &DelimitedFormat) -> Result<ParseOutcome> {
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse("missing header row".into()))?
        .split(format.delimiter)
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let mut required = [0usize; 4];
    for (slot, name) in required.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = col(name).ok_or_else(|| Error::Parse(format!("missing mandatory column `{name}`")))?;
    }
    let [c_user, c_item, c_ts, c_domain] = required;
    let c_review = col("review");
    let c_meta: Vec<(&str, usize)> = META_FIELDS.iter().filter_map(|&f| col(f).map(|c| (f, c))).collect();

    let mut out = ParseOutcome::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        let get = |c: usize| fields.get(c).map(|s| s.trim()).unwrap_or("");
        let (user, item, domain) = (get(c_user), get(c_item), get(c_domain));
        if user.is_empty() || item.is_empty() || domain.is_empty() {
            out.skipped_missing += 1;
            continue;
        }
        let Ok(timestamp) = get(c_ts).parse::<u64>() else {
            log::warn!("line {}: unparseable timestamp `{}`", lineno + 2, get(c_ts));
            out.skipped_bad_timestamp += 1;
            continue;
        };
        let review = c_review.map(get).filter(|s| !s.is_empty()).map(str::to_string);
        let item_meta = c_meta
            .iter()
            .filter(|(_, c)| !get(*c).is_empty())
            .map(|(f, c)| (f.to_string(), get(*c).to_string()))
            .collect();
        out.records.push(InteractionRecord {
            user_key: user.into(),
            item_key: item.into(),
            timestamp,
            domain: domain.into(),
            review,
            item_meta,
        });
    }
    Ok(out)
}

fn clean(s: &str, delimiter: char) -> String {
    s.chars().map(|c| if c == delimiter || c == '\n' || c == '\r' { ' ' } else { c }).collect()
}

/// Serialise records with every optional column present.
pub fn write_interactions(records: &[InteractionRecord], format: &DelimitedFormat) -> String {
    let d = format.delimiter;
    let mut cols: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    cols.push("review");
    cols.extend(META_FIELDS);
    let mut out = cols.join(&d.to_string());
    out.push('\n');
    for r in records {
        let mut fields = vec![
            clean(&r.user_key, d),
            clean(&r.item_key, d),
            r.timestamp.to_string(),
            clean(&r.domain, d),
            clean(r.review.as_deref().unwrap_or(""), d),
        ];
        fields.extend(META_FIELDS.iter().map(|f| clean(r.item_meta.get(*f).map_or("", String::as_str), d)));
        out.push_str(&fields.join(&d.to_string()));
        out.push('\n');
    }
    out
}

/// SHA-256 over `domain|user|item` lines in record order.
pub fn records_checksum(records: &[InteractionRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(format!("{}|{}|{}\n", r.domain, r.user_key, r.item_key).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Register every user and item mentioned by `records`. Records from
/// domains outside `sources` and `target` are an error.
pub fn build_universe(
    records: &[InteractionRecord],
    sources: &[String],
    target: Option<&str>,
) -> Result<GraphUniverse> {
    let mut b = UniverseBuilder::new(sources, target)?;
    for r in records {
        let d = b
            .domain_index(&r.domain)
            .ok_or_else(|| Error::InvalidArgument(format!("record from unlisted domain `{}`", r.domain)))?;
        b.register(d, NodeKind::User, &r.user_key);
        b.register(d, NodeKind::Item, &r.item_key);
    }
    Ok(b.freeze())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEdge {
    pub user: NodeId,
    pub item: NodeId,
    pub timestamp: u64,
    /// Index into the records the split was built from.
    pub record: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<SplitEdge>,
    pub valid: Vec<SplitEdge>,
    pub test: Vec<SplitEdge>,
    pub fractions: [f64; 3],
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Record indices of each split: a stable global sort by timestamp, then
/// consecutive slices whose boundaries are rounded cumulative fractions.
pub fn split_indices(timestamps: &[u64], fractions: [f64; 3]) -> Result<[Vec<usize>; 3]> {
    if timestamps.is_empty() {
        return Err(Error::Empty("no interaction records to split".into()));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut order: Vec<usize> = (0..timestamps.len()).collect();
    order.sort_by_key(|&i| timestamps[i]);
    let n = timestamps.len() as f64;
    let a = ((n * fractions[0]).round() as usize).min(order.len());
    let b = ((n * (fractions[0] + fractions[1])).round() as usize).clamp(a, order.len());
    Ok([order[..a].to_vec(), order[a..b].to_vec(), order[b..].to_vec()])
}

pub fn temporal_split(
    records: &[InteractionRecord],
    universe: &GraphUniverse,
    fractions: [f64; 3],
) -> Result<SplitDataset> {
    let ts: Vec<u64> = records.iter().map(|r| r.timestamp).collect();
    let parts = split_indices(&ts, fractions)?;
    let resolve = |idx: &[usize]| -> Result<Vec<SplitEdge>> {
        idx.iter()
            .map(|&i| {
                let r = &records[i];
                let d = universe
                    .domain_by_name(&r.domain)
                    .ok_or_else(|| Error::UnknownNode(format!("domain {}", r.domain)))?;
                let user = universe
                    .resolve(d, NodeKind::User, &r.user_key)
                    .ok_or_else(|| Error::UnknownNode(r.user_key.clone()))?;
                let item = universe
                    .resolve(d, NodeKind::Item, &r.item_key)
                    .ok_or_else(|| Error::UnknownNode(r.item_key.clone()))?;
                Ok(SplitEdge { user, item, timestamp: r.timestamp, record: i })
            })
            .collect()
    };
    Ok(SplitDataset { train: resolve(&parts[0])?, valid: resolve(&parts[1])?, test: resolve(&parts[2])?, fractions })
}

impl SplitDataset {
    pub fn all(&self) -> impl Iterator<Item = &SplitEdge> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Edges of `part` whose user belongs to domain `d`.
    pub fn domain_edges<'a>(
        part: &'a [SplitEdge],
        universe: &'a GraphUniverse,
        d: DomainId,
    ) -> impl Iterator<Item = &'a SplitEdge> + 'a {
        let users = universe.domain(d).users.clone();
        part.iter().filter(move |e| users.contains(&e.user.0))
    }

    /// Install each domain's train edges as its interaction subgraph.
    pub fn install_train_graphs(&self, universe: &mut GraphUniverse) -> Result<()> {
        for d in 0..universe.domains().len() {
            let d = DomainId(d);
            let pairs: Vec<_> = Self::domain_edges(&self.train, universe, d).map(|e| (e.user, e.item)).collect();
            universe.set_domain_edges(d, &pairs)?;
        }
        Ok(())
    }

    /// Deterministic textual digest, used to compare splits byte-for-byte.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        for (name, part) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for e in part {
                let _ = writeln!(s, "{name} {} {} {} {}", e.user, e.item, e.timestamp, e.record);
            }
        }
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, t: u64) -> InteractionRecord {
        InteractionRecord {
            user_key: u.into(),
            item_key: i.into(),
            timestamp: t,
            domain: "books".into(),
            review: None,
            item_meta: BTreeMap::new(),
        }
    }

    #[test]
    fn parses_three_rows() {
        let text = "user\titem\ttimestamp\tdomain\treview\ttitle\nu1\ti1\t5\tbooks\tgreat\tA\nu2\ti1\t6\tbooks\t\t\nu1\ti2\t7\tbooks\n";
        let out = parse_interactions_str(text, &DelimitedFormat::default()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.records[0].review.as_deref(), Some("great"));
        assert_eq!(out.records[0].item_meta["title"], "A");
        assert_eq!(out.records[1].review, None);
        assert_eq!(out.skipped(), 0);
    }

    #[test]
    fn skips_missing_item_and_bad_timestamp() {
        let text = "domain,timestamp,item,user\nbooks,1,,u1\nbooks,x,i1,u1\nbooks,-3,i1,u1\nbooks,2,i1,u1\n";
        let out = parse_interactions_str(text, &DelimitedFormat { delimiter: ',' }).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped_missing, 1);
        assert_eq!(out.skipped_bad_timestamp, 2);
    }

    #[test]
    fn missing_column_is_fatal() {
        let err = parse_interactions_str("user\titem\tdomain\n", &DelimitedFormat::default()).unwrap_err();
        assert!(err.to_string().contains("timestamp"));
    }

    #[test]
    fn write_parse_roundtrip() {
        let mut r = rec("u\t1", "i1", 9);
        r.review = Some("multi\nline".into());
        r.item_meta.insert("brand".into(), "acme".into());
        let text = write_interactions(&[r.clone()], &DelimitedFormat::default());
        let back = parse_interactions_str(&text, &DelimitedFormat::default()).unwrap().records;
        assert_eq!(back[0].user_key, "u 1");
        assert_eq!(back[0].review.as_deref(), Some("multi line"));
        assert_eq!(back[0].item_meta, r.item_meta);
    }

    #[test]
    fn split_distinct_and_tied() {
        let ts: Vec<u64> = (0..10).rev().collect();
        let [a, b, c] = split_indices(&ts, DEFAULT_FRACTIONS).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(c, vec![0]);
        let [a, b, c] = split_indices(&[5; 10], DEFAULT_FRACTIONS).unwrap();
        assert_eq!(a, (0..8).collect::<Vec<_>>());
        assert_eq!((b, c), (vec![8], vec![9]));
        assert!(split_indices(&[], DEFAULT_FRACTIONS).is_err());
        assert!(split_indices(&[1], [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn split_resolves_and_keeps_cold_nodes() {
        let records: Vec<_> = (0..10).map(|t| rec(&format!("u{t}"), "i0", t)).collect();
        let mut u = build_universe(&records, &["books".into()], None).unwrap();
        let s = temporal_split(&records, &u, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(s.test[0].user, u.resolve(DomainId(0), NodeKind::User, "u9").unwrap());
        s.install_train_graphs(&mut u).unwrap();
        assert_eq!(u.subgraph(DomainId(0)).num_undirected_edges(), 8);
        assert_eq!(s.digest(), temporal_split(&records, &u, DEFAULT_FRACTIONS).unwrap().digest());
        assert!(build_universe(&records, &["music".into()], None).is_err());
    }
}
