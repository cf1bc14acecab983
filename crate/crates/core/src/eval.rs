//! Retrieval metrics with label-overlap relevance.
//!
//! A retrieved item is relevant to a query when the two share at least one
//! label. Queries with no relevant item in their top `T` score AP = 0 rather
//! than being skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::error::{Error, Result};

pub const DEFAULT_MAP_TS: [usize; 2] = [50, 100];
pub const DEFAULT_PRECISION_TS: [usize; 6] = [1, 10, 50, 100, 500, 1000];

/// Label lists for the queries and for the database they were run against.
#[derive(Debug, Clone, Copy)]
pub struct RelevanceJudge<'a> {
    pub query_labels: &'a [LabelSet],
    pub database_labels: &'a [LabelSet],
}

impl<'a> RelevanceJudge<'a> {
    pub fn new(query_labels: &'a [LabelSet], database_labels: &'a [LabelSet]) -> Result<Self> {
        if let Some(q) = query_labels.iter().position(LabelSet::is_empty) {
            return Err(Error::Config(format!("query {q} has an empty label set")));
        }
        if let Some(i) = database_labels.iter().position(LabelSet::is_empty) {
            return Err(Error::Config(format!("database item {i} has an empty label set")));
        }
        Ok(RelevanceJudge {
            query_labels,
            database_labels,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query_labels.len()
    }

    pub fn relevant(&self, query: usize, item: usize) -> bool {
        self.query_labels[query].shares_with(&self.database_labels[item])
    }

    /// Relevance flags of a ranking, truncated to `t`.
    pub fn flags(&self, query: usize, ranking: &[usize], t: usize) -> Vec<bool> {
        ranking.iter().take(t).map(|&i| self.relevant(query, i)).collect()
    }

    /// Checks that every ranked id is a valid database index.
    pub fn check_rankings(&self, rankings: &[Vec<usize>]) -> Result<()> {
        if rankings.len() != self.query_labels.len() {
            return Err(Error::Shape(format!(
                "{} rankings for {} queries",
                rankings.len(),
                self.query_labels.len()
            )));
        }
        let n = self.database_labels.len();
        for (q, r) in rankings.iter().enumerate() {
            if let Some(&bad) = r.iter().find(|&&i| i >= n) {
                return Err(Error::Shape(format!(
                    "query {q} ranks item {bad}, database has {n} items"
                )));
            }
        }
        Ok(())
    }
}

/// `Σ P(t)δ(t) / Σ δ(t)` over the first `t` flags.
pub fn average_precision_flags(flags: &[bool], t: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().take(t).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn average_precision(ranking: &[usize], judge: &RelevanceJudge<'_>, query: usize, t: usize) -> f64 {
    average_precision_flags(&judge.flags(query, ranking, t), t)
}

pub fn per_query_ap(rankings: &[Vec<usize>], judge: &RelevanceJudge<'_>, t: usize) -> Vec<f64> {
    rankings
        .par_iter()
        .enumerate()
        .map(|(q, r)| average_precision(r, judge, q, t))
        .collect()
}

pub fn map_at(rankings: &[Vec<usize>], judge: &RelevanceJudge<'_>, t: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    per_query_ap(rankings, judge, t).iter().sum::<f64>() / rankings.len() as f64
}

/// Mean over queries of (#relevant in top `T`) / `T`, for each `T`.
pub fn precision_at(rankings: &[Vec<usize>], judge: &RelevanceJudge<'_>, ts: &[usize]) -> Vec<(usize, f64)> {
    let counts: Vec<Vec<usize>> = rankings
        .par_iter()
        .enumerate()
        .map(|(q, r)| {
            // prefix counts so every T costs O(1)
            let mut prefix = Vec::with_capacity(r.len() + 1);
            prefix.push(0);
            for &item in r {
                prefix.push(prefix.last().unwrap() + judge.relevant(q, item) as usize);
            }
            prefix
        })
        .collect();
    ts.iter()
        .map(|&t| {
            if rankings.is_empty() || t == 0 {
                return (t, 0.0);
            }
            let total: f64 = counts
                .iter()
                .map(|p| p[t.min(p.len() - 1)] as f64 / t as f64)
                .sum();
            (t, total / rankings.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricReport {
    pub num_queries: usize,
    pub database_size: usize,
    pub map_at_t: BTreeMap<usize, f64>,
    pub precision_curve: Vec<(usize, f64)>,
    /// Per-query AP at `per_query_t`.
    pub per_query_ap: Vec<f64>,
    pub per_query_t: usize,
    /// Queries whose top `per_query_t` holds nothing relevant (scored 0).
    pub zero_relevant_queries: usize,
}

impl MetricReport {
    /// `map_ts` and `precision_ts` are clamped to the database size and
    /// deduplicated.
    pub fn compute(
        rankings: &[Vec<usize>],
        judge: &RelevanceJudge<'_>,
        map_ts: &[usize],
        precision_ts: &[usize],
    ) -> Result<Self> {
        judge.check_rankings(rankings)?;
        if rankings.is_empty() {
            return Err(Error::Config("no queries to evaluate".into()));
        }
        let n = judge.database_labels.len();
        let clamp = |ts: &[usize]| -> Vec<usize> {
            let mut v: Vec<usize> = ts.iter().map(|&t| t.clamp(1, n.max(1))).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let map_ts = clamp(map_ts);
        let precision_ts = clamp(precision_ts);
        let map_at_t = map_ts.iter().map(|&t| (t, map_at(rankings, judge, t))).collect();
        let per_query_t = map_ts.first().copied().unwrap_or(1);
        let per_query_ap = per_query_ap(rankings, judge, per_query_t);
        let zero_relevant_queries = rankings
            .iter()
            .enumerate()
            .filter(|(q, r)| !judge.flags(*q, r, per_query_t).contains(&true))
            .count();
        Ok(MetricReport {
            num_queries: rankings.len(),
            database_size: n,
            map_at_t,
            precision_curve: precision_at(rankings, judge, &precision_ts),
            per_query_ap,
            per_query_t,
            zero_relevant_queries,
        })
    }

    pub fn with_defaults(rankings: &[Vec<usize>], judge: &RelevanceJudge<'_>) -> Result<Self> {
        Self::compute(rankings, judge, &DEFAULT_MAP_TS, &DEFAULT_PRECISION_TS)
    }

    /// One row per `T` appearing in either list; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut ts: Vec<usize> = self.map_at_t.keys().copied().collect();
        ts.extend(self.precision_curve.iter().map(|&(t, _)| t));
        ts.sort_unstable();
        ts.dedup();
        let precision: BTreeMap<usize, f64> = self.precision_curve.iter().copied().collect();
        let mut out = String::from("T,map,precision\n");
        for t in ts {
            let fmt = |v: Option<&f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            let _ = writeln!(out, "{t},{},{}", fmt(self.map_at_t.get(&t)), fmt(precision.get(&t)));
        }
        out
    }
}
