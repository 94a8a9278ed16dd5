//! Mean Precision@k.
//!
//! For each query `q` with `n_q` relevant index items, precision is taken over
//! the first `min(n_q, k)` ranked predictions only; missing slots count as
//! irrelevant. The score is the mean of the per-query values.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::retrieval::{read_id_lists, RankedResult, Ranking};

pub const DEFAULT_K: usize = 5;

/// Anything that carries a query id and a ranked list of index ids.
pub trait RankedIds {
    fn query_id(&self) -> &str;
    fn ranked_ids(&self) -> Vec<&str>;
}

impl RankedIds for RankedResult {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_ids(&self) -> Vec<&str> {
        self.ids().collect()
    }
}

impl RankedIds for Ranking {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_ids(&self) -> Vec<&str> {
        self.ids.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    relevant: BTreeMap<String, HashSet<String>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a query; its relevant set must be non-empty and the query new.
    pub fn insert<I, S>(&mut self, query_id: impl Into<String>, relevant: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let query_id = query_id.into();
        let set: HashSet<String> = relevant.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::Invalid(format!("query {query_id:?} has no relevant ids")));
        }
        if self.relevant.contains_key(&query_id) {
            return Err(Error::Invalid(format!(
                "query {query_id:?} listed twice in ground truth"
            )));
        }
        self.relevant.insert(query_id, set);
        Ok(())
    }

    pub fn relevant(&self, query_id: &str) -> Option<&HashSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.relevant.keys().map(String::as_str)
    }
}

/// Reads `query_id TAB id1,id2,...` lines.
pub fn read_ground_truth<R: BufRead>(source: R) -> Result<GroundTruth> {
    let mut gt = GroundTruth::new();
    for (query, ids) in read_id_lists(source)? {
        gt.insert(query, ids)?;
    }
    Ok(gt)
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruth, mut sink: W) -> Result<()> {
    for (q, ids) in &gt.relevant {
        let mut ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        ids.sort_unstable();
        writeln!(sink, "{q}\t{}", ids.join(","))?;
    }
    sink.flush()?;
    Ok(())
}

fn precision_one<P: RankedIds>(pred: &P, gt: &GroundTruth, k: usize) -> Result<f64> {
    let qid = pred.query_id();
    let relevant = gt
        .relevant(qid)
        .ok_or_else(|| Error::Invalid(format!("query {qid:?} missing from ground truth")))?;
    let ranked = pred.ranked_ids();
    let mut seen = HashSet::with_capacity(ranked.len());
    for id in &ranked {
        if !seen.insert(*id) {
            return Err(Error::Invalid(format!(
                "duplicate id {id:?} in predictions for query {qid:?}"
            )));
        }
    }
    let depth = relevant.len().min(k);
    let hits = ranked.iter().take(depth).filter(|id| relevant.contains(**id)).count();
    Ok(hits as f64 / depth as f64)
}

/// Per-query precision at `min(n_q, k)`, in prediction order.
pub fn per_query_precision<P: RankedIds>(predictions: &[P], gt: &GroundTruth, k: usize) -> Result<Vec<(String, f64)>> {
    if predictions.is_empty() {
        return Err(Error::Invalid("empty prediction list".into()));
    }
    if k == 0 {
        return Err(Error::OutOfRange("k must be at least 1".into()));
    }
    let mut queries = HashSet::with_capacity(predictions.len());
    predictions
        .iter()
        .map(|p| {
            if !queries.insert(p.query_id()) {
                return Err(Error::Invalid(format!("query {:?} predicted twice", p.query_id())));
            }
            Ok((p.query_id().to_owned(), precision_one(p, gt, k)?))
        })
        .collect()
}

pub fn mean_precision_at_k<P: RankedIds>(predictions: &[P], gt: &GroundTruth, k: usize) -> Result<f64> {
    let per_query = per_query_precision(predictions, gt, k)?;
    let sum: f64 = per_query.iter().map(|(_, p)| p).sum();
    Ok(sum / per_query.len() as f64)
}

pub fn write_per_query<W: Write>(per_query: &[(String, f64)], mut sink: W) -> Result<()> {
    for (q, p) in per_query {
        writeln!(sink, "{q}\t{p:.6}")?;
    }
    sink.flush()?;
    Ok(())
}
