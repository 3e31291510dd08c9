//! Leave-one-out cosine ranking with mAP and Top-1.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::DescriptorSet;
use crate::error::{Error, Result};

/// Length of the ranked list kept per query in the report.
pub const TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LabelKind {
    Writer,
    Page,
}

impl LabelKind {
    pub const ALL: [LabelKind; 2] = [LabelKind::Writer, LabelKind::Page];

    pub fn label<'a>(&self, r: &'a super::DescriptorRecord) -> &'a str {
        match self {
            LabelKind::Writer => &r.writer_id,
            LabelKind::Page => &r.page_id,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Writer => "writer",
            LabelKind::Page => "page",
        })
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "writer" => Ok(LabelKind::Writer),
            "page" => Ok(LabelKind::Page),
            other => Err(Error::config(format!("unknown label kind {other:?} (expected writer or page)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub fragment_id: String,
    /// Number of other fragments sharing the query's label.
    pub relevant: usize,
    /// `None` when the query has no relevant item.
    pub average_precision: Option<f64>,
    pub top1: Option<bool>,
    /// Leading `(fragment_id, cosine)` pairs of the ranking.
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub label_kind: LabelKind,
    pub queries: Vec<QueryResult>,
    pub mean_average_precision: f64,
    pub top1_accuracy: f64,
    pub valid_queries: usize,
    pub excluded_queries: usize,
    pub meta: BTreeMap<String, String>,
}

/// Average precision of a binary relevance list in rank order.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Indices of all rows except `q`, ordered by descending cosine similarity
/// to row `q` with ties broken by ascending fragment id, plus the scores.
pub fn rank_query(set: &DescriptorSet, norms: &[f64], q: usize) -> Vec<(usize, f64)> {
    let query = set.row(q);
    let mut scored: Vec<(usize, f64)> = (0..set.len())
        .filter(|&j| j != q)
        .map(|j| {
            let dot: f64 = query
                .iter()
                .zip(set.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let denom = norms[q] * norms[j];
            (j, if denom > 0.0 { dot / denom } else { 0.0 })
        })
        .collect();
    let records = set.records();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| records[a.0].fragment_id.cmp(&records[b.0].fragment_id))
    });
    scored
}

/// Uses every fragment once as a query against all others.
///
/// Queries without any relevant item are kept in the per-query list but
/// excluded from both aggregates; their number is reported.
pub fn rank_leave_one_out(set: &DescriptorSet, kind: LabelKind) -> Result<RetrievalReport> {
    if set.len() < 2 {
        return Err(Error::config(format!(
            "leave-one-out ranking needs at least 2 descriptors, got {}",
            set.len()
        )));
    }
    let norms: Vec<f64> = (0..set.len())
        .map(|i| set.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    let records = set.records();
    let queries: Vec<QueryResult> = (0..set.len())
        .into_par_iter()
        .map(|q| {
            let ranked = rank_query(set, &norms, q);
            let label = kind.label(&records[q]);
            let relevance: Vec<bool> = ranked.iter().map(|&(j, _)| kind.label(&records[j]) == label).collect();
            let ap = average_precision(&relevance);
            QueryResult {
                fragment_id: records[q].fragment_id.clone(),
                relevant: relevance.iter().filter(|&&r| r).count(),
                average_precision: ap,
                top1: ap.map(|_| relevance[0]),
                top: ranked
                    .iter()
                    .take(TOP_K)
                    .map(|&(j, s)| (records[j].fragment_id.clone(), s))
                    .collect(),
            }
        })
        .collect();
    let valid: Vec<&QueryResult> = queries.iter().filter(|q| q.average_precision.is_some()).collect();
    let (map, top1) = if valid.is_empty() {
        log::warn!("{kind} retrieval: no query has a relevant item; aggregates are reported as 0");
        (0.0, 0.0)
    } else {
        let n = valid.len() as f64;
        (
            valid.iter().map(|q| q.average_precision.unwrap()).sum::<f64>() / n,
            valid.iter().filter(|q| q.top1 == Some(true)).count() as f64 / n,
        )
    };
    let excluded = queries.len() - valid.len();
    if excluded > 0 {
        log::info!("{kind} retrieval: {excluded} queries without a relevant item were excluded");
    }
    Ok(RetrievalReport {
        label_kind: kind,
        valid_queries: valid.len(),
        excluded_queries: excluded,
        queries,
        mean_average_precision: map,
        top1_accuracy: top1,
        meta: set.meta.clone(),
    })
}

impl RetrievalReport {
    /// Machine-readable `key=value` lines: aggregates, metadata, then one
    /// block per query.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("label_kind={}\n", self.label_kind));
        out.push_str(&format!("queries={}\n", self.queries.len()));
        out.push_str(&format!("valid_queries={}\n", self.valid_queries));
        out.push_str(&format!("excluded_queries={}\n", self.excluded_queries));
        out.push_str(&format!("map={}\n", self.mean_average_precision));
        out.push_str(&format!("top1={}\n", self.top1_accuracy));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        for (i, q) in self.queries.iter().enumerate() {
            let ap = q.average_precision.map_or("none".to_string(), |a| a.to_string());
            let hit = q.top1.map_or("none", |h| if h { "1" } else { "0" });
            let top: Vec<String> = q.top.iter().map(|(id, s)| format!("{id}:{s}")).collect();
            out.push_str(&format!("query.{i}.id={}\n", q.fragment_id));
            out.push_str(&format!("query.{i}.relevant={}\n", q.relevant));
            out.push_str(&format!("query.{i}.ap={ap}\n"));
            out.push_str(&format!("query.{i}.top1={hit}\n"));
            out.push_str(&format!("query.{i}.top={}\n", top.join(",")));
        }
        out
    }
}

/// Human-readable summary table with one row per label kind, in percent.
pub fn format_table(reports: &[&RetrievalReport]) -> String {
    let mut out = String::from("Retrieval    mAP     Top-1   Queries\n");
    for r in reports {
        let name = match r.label_kind {
            LabelKind::Writer => "Writer",
            LabelKind::Page => "Page",
        };
        out.push_str(&format!(
            "{name:<10} {:>6.1}  {:>6.1}   {}\n",
            100.0 * r.mean_average_precision,
            100.0 * r.top1_accuracy,
            r.valid_queries
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::DescriptorRecord;

    #[test]
    fn hand_computed_average_precision() {
        assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[false, false]), None);
        assert_eq!(average_precision(&[false, true]), Some(0.5));
    }

    fn set(rows: &[[f32; 2]], labels: &[(&str, &str)]) -> DescriptorSet {
        let recs = labels
            .iter()
            .enumerate()
            .map(|(i, (w, p))| DescriptorRecord::new(format!("f{i:02}"), *w, *p))
            .collect();
        DescriptorSet::new(2, rows.concat(), recs).unwrap()
    }

    #[test]
    fn clustered_descriptors_score_perfectly() {
        let s = set(
            &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            &[("a", "p1"), ("a", "p2"), ("b", "p3"), ("b", "p4")],
        );
        let r = rank_leave_one_out(&s, LabelKind::Writer).unwrap();
        assert_eq!((r.mean_average_precision, r.top1_accuracy), (1.0, 1.0));
        assert_eq!(r.valid_queries, 4);
        let pages = rank_leave_one_out(&s, LabelKind::Page).unwrap();
        assert_eq!((pages.valid_queries, pages.excluded_queries), (0, 4));
        assert_eq!(pages.mean_average_precision, 0.0);
    }

    #[test]
    fn ties_break_by_fragment_id() {
        let s = set(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], &[("a", "p"), ("b", "p"), ("a", "p")]);
        let r = rank_leave_one_out(&s, LabelKind::Writer).unwrap();
        let ids: Vec<&str> = r.queries[0].top.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["f01", "f02"]);
        assert_eq!(r.queries[0].average_precision, Some(0.5));
    }

    #[test]
    fn query_never_ranks_itself() {
        let s = set(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]], &[("a", "p"), ("a", "p"), ("b", "q")]);
        let r = rank_leave_one_out(&s, LabelKind::Writer).unwrap();
        for q in &r.queries {
            assert!(q.top.iter().all(|(id, _)| *id != q.fragment_id));
            assert_eq!(q.top.len(), 2);
        }
    }

    #[test]
    fn too_small_sets_are_rejected() {
        let s = set(&[[1.0, 0.0]], &[("a", "p")]);
        assert!(rank_leave_one_out(&s, LabelKind::Writer).is_err());
    }

    #[test]
    fn report_text_is_parseable() {
        let s = set(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], &[("a", "p"), ("a", "p"), ("b", "q")]);
        let r = rank_leave_one_out(&s, LabelKind::Writer).unwrap();
        let text = r.to_text();
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        assert_eq!(kv["label_kind"], "writer");
        assert_eq!(kv["map"].parse::<f64>().unwrap(), r.mean_average_precision);
        assert_eq!(kv["excluded_queries"], "1");
        let table = format_table(&[&r]);
        assert!(table.contains("Writer"));
    }
}
