//! Append-only audit log of oracle queries, enforcing at most `q` queries
//! per base image and that every query stays in the epsilon ball.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::linf_distance;

/// Slack on the epsilon check for `clip(x + d) - x` rounding.
pub const DISTANCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub base_image_id: u64,
    /// 0-based position among this image's queries.
    pub query_index: u32,
    /// l-inf distance between the queried point and the base image.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryLedger {
    budget: u32,
    epsilon: f64,
    entries: Vec<LedgerEntry>,
    counts: HashMap<u64, u32>,
}

impl QueryLedger {
    pub fn new(budget: u32, epsilon: f64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Config("query budget must be >= 1".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(QueryLedger { budget, epsilon, entries: Vec::new(), counts: HashMap::new() })
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, image_id: u64) -> u32 {
        self.counts.get(&image_id).copied().unwrap_or(0)
    }

    /// Ids of every image queried at least once, ascending.
    pub fn base_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.counts.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Checks the budget and distance, then appends. Nothing is recorded on
    /// error.
    pub fn record_query(&mut self, base_image_id: u64, queried: &[f64], base: &[f64]) -> Result<()> {
        let distance = linf_distance(queried, base);
        if queried.len() != base.len() {
            return Err(Error::Shape {
                expected: format!("{} values", base.len()),
                found: format!("{} values", queried.len()),
            });
        }
        if !(distance <= self.epsilon + DISTANCE_TOLERANCE) {
            return Err(Error::Protocol { image_id: base_image_id, distance, epsilon: self.epsilon });
        }
        let count = self.counts.entry(base_image_id).or_insert(0);
        if *count >= self.budget {
            return Err(Error::Budget { image_id: base_image_id, budget: self.budget });
        }
        self.entries.push(LedgerEntry { base_image_id, query_index: *count, distance });
        *count += 1;
        Ok(())
    }

    /// Recomputes all invariants from the raw entries.
    pub fn audit(&self) -> LedgerAudit {
        let mut counts: HashMap<u64, u32> = HashMap::new();
        let mut violations = 0usize;
        let mut max_distance = 0.0f64;
        for e in &self.entries {
            let c = counts.entry(e.base_image_id).or_insert(0);
            if e.query_index != *c {
                violations += 1;
            }
            *c += 1;
            if *c > self.budget {
                violations += 1;
            }
            if !(e.distance <= self.epsilon + DISTANCE_TOLERANCE) {
                violations += 1;
            }
            max_distance = max_distance.max(e.distance);
        }
        let max_per_image = counts.values().copied().max().unwrap_or(0);
        let min_per_image = counts.values().copied().min().unwrap_or(0);
        LedgerAudit {
            budget: self.budget,
            epsilon: self.epsilon,
            total_queries: self.entries.len(),
            distinct_images: counts.len(),
            max_per_image,
            min_per_image,
            max_distance,
            violations,
        }
    }

    /// One JSON header line, then one line per entry.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LedgerHeader { budget: self.budget, epsilon: self.epsilon };
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).map_err(json_err)?)?;
        }
        Ok(())
    }

    /// Reads a ledger back. Entries are replayed without re-validation so an
    /// audit can report violations in a tampered file.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Parse { offset: 0, message: "empty ledger file".into() })??;
        let header: LedgerHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?;
        let mut ledger = QueryLedger::new(header.budget, header.epsilon)?;
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: LedgerEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
                offset: (k + 1) as u64,
                message: format!("line {}: {err}", k + 2),
            })?;
            *ledger.counts.entry(e.base_image_id).or_insert(0) += 1;
            ledger.entries.push(e);
        }
        Ok(ledger)
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerHeader {
    budget: u32,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerAudit {
    pub budget: u32,
    pub epsilon: f64,
    pub total_queries: usize,
    pub distinct_images: usize,
    pub max_per_image: u32,
    pub min_per_image: u32,
    pub max_distance: f64,
    pub violations: usize,
}

impl LedgerAudit {
    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.max_per_image <= self.budget
    }
}

/// Result of the pairwise separation check between queried base images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodReport {
    pub images_checked: usize,
    /// Smallest pairwise l-inf distance; `None` with fewer than two images.
    pub min_pairwise_distance: Option<f64>,
    pub closest_pair: Option<(u64, u64)>,
    /// Pairs closer than `2 * epsilon`, which could share one epsilon ball.
    pub flagged_pairs: Vec<(u64, u64, f64)>,
    pub epsilon: f64,
}

impl NeighborhoodReport {
    pub fn is_clean(&self) -> bool {
        self.flagged_pairs.is_empty()
    }
}

/// Exhaustive pairwise scan over the base images the ledger touched.
///
/// `images` maps ids to pixel data; ids absent from the ledger are skipped.
/// Per-pair distance accumulation stops early once it exceeds both the
/// running minimum and `2 * epsilon`, since such a pair can change neither
/// output.
pub fn audit_neighborhoods<'a, I>(ledger: &QueryLedger, images: I, epsilon: f64) -> NeighborhoodReport
where
    I: IntoIterator<Item = (u64, &'a [f64])>,
{
    let queried: Vec<(u64, &[f64])> = images
        .into_iter()
        .filter(|(id, _)| ledger.count_for(*id) > 0)
        .collect();
    pairwise_scan(&queried, epsilon)
}

pub(crate) fn pairwise_scan(points: &[(u64, &[f64])], epsilon: f64) -> NeighborhoodReport {
    let threshold = 2.0 * epsilon;
    let mut min = f64::INFINITY;
    let mut closest = None;
    let mut flagged = Vec::new();
    for a in 0..points.len() {
        for b in (a + 1)..points.len() {
            let (ia, xa) = points[a];
            let (ib, xb) = points[b];
            let cutoff = min.max(threshold);
            let mut d = 0.0f64;
            for (u, v) in xa.iter().zip(xb) {
                d = d.max((u - v).abs());
                if d >= cutoff {
                    break;
                }
            }
            if d < min {
                min = d;
                closest = Some((ia, ib));
            }
            if d < threshold {
                flagged.push((ia, ib, d));
            }
        }
    }
    NeighborhoodReport {
        images_checked: points.len(),
        min_pairwise_distance: if points.len() >= 2 { Some(min) } else { None },
        closest_pair: closest,
        flagged_pairs: flagged,
        epsilon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_query_budget() {
        let mut l = QueryLedger::new(1, 0.3).unwrap();
        l.record_query(7, &[0.1, 0.2], &[0.0, 0.0]).unwrap();
        assert!(matches!(l.record_query(7, &[0.1, 0.2], &[0.0, 0.0]), Err(Error::Budget { image_id: 7, .. })));
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn two_query_budget_accepts_plus_and_minus() {
        let mut l = QueryLedger::new(2, 0.3).unwrap();
        let x = [0.5, 0.5];
        l.record_query(3, &[0.5005, 0.5], &x).unwrap();
        l.record_query(3, &[0.4995, 0.5], &x).unwrap();
        assert!(matches!(l.record_query(3, &x, &x), Err(Error::Budget { .. })));
        let audit = l.audit();
        assert_eq!(audit.max_per_image, 2);
        assert_eq!(audit.violations, 0);
        assert_eq!(l.entries()[1].query_index, 1);
    }

    #[test]
    fn distance_outside_ball_is_a_protocol_error() {
        let mut l = QueryLedger::new(2, 0.3).unwrap();
        assert!(matches!(l.record_query(1, &[0.5], &[0.1]), Err(Error::Protocol { .. })));
        assert!(l.is_empty());
        // 1.0 - 0.7 rounds to 0.30000000000000004; the tolerance absorbs it
        assert!(1.0 - 0.7 > 0.3);
        l.record_query(1, &[1.0], &[0.7]).unwrap();
    }

    #[test]
    fn jsonl_round_trip_and_tamper_detection() {
        let mut l = QueryLedger::new(1, 0.3).unwrap();
        l.record_query(1, &[0.2], &[0.0]).unwrap();
        l.record_query(2, &[0.1], &[0.0]).unwrap();
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        let back = QueryLedger::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, l);
        let mut tampered = buf.clone();
        tampered.extend_from_slice(b"{\"base_image_id\":1,\"query_index\":1,\"distance\":0.2}\n");
        let audit = QueryLedger::read_jsonl(&tampered[..]).unwrap().audit();
        assert_eq!(audit.max_per_image, 2);
        assert!(audit.violations > 0 && !audit.is_clean());
        assert!(QueryLedger::read_jsonl(&b""[..]).is_err());
    }

    #[test]
    fn neighborhood_examples() {
        let mut l = QueryLedger::new(1, 0.3).unwrap();
        let a = [0.0, 0.0];
        let b = [1.0, 0.0];
        let c = [0.0, 0.0];
        for id in 0..3 {
            l.record_query(id, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        }
        let clean = audit_neighborhoods(&l, vec![(0, &a[..]), (1, &b[..])], 0.3);
        assert!(clean.is_clean());
        assert_eq!(clean.min_pairwise_distance, Some(1.0));
        let dup = audit_neighborhoods(&l, vec![(0, &a[..]), (1, &b[..]), (2, &c[..])], 0.3);
        assert_eq!(dup.flagged_pairs, vec![(0, 2, 0.0)]);
        assert_eq!(dup.min_pairwise_distance, Some(0.0));
        // unqueried ids are ignored
        let skip = audit_neighborhoods(&l, vec![(0, &a[..]), (9, &c[..])], 0.3);
        assert_eq!(skip.images_checked, 1);
        assert_eq!(skip.min_pairwise_distance, None);
    }
}
