//! Exact top-k retrieval under squared Euclidean distance.
//!
//! [`search`] screens every index row with the expansion
//! `‖q‖² + ‖z‖² - 2 q·z` (clamped at 0) computed in `f32`, keeping every row
//! whose screened distance can still reach the top-k once the worst-case
//! rounding error is accounted for. The surviving candidates are then scored
//! with the direct `Σ (q_j - z_j)²` in `f64`, which is also what
//! [`search_reference`] computes for every pair. Both paths therefore return
//! the same ranking on every input, not just on generic ones.

mod kernel;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};

use kernel::{dots_tile, PackedBase, GROUP, QUERY_TILE};

pub const DEFAULT_BLOCK_ROWS: usize = 256;
/// Queries handled by one task; each task streams the whole index once.
const QUERY_CHUNK: usize = 128;

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    base: EmbeddingSet,
    norms_sq: Vec<f32>,
    max_norm: f64,
    /// Position of each row's id in ascending id order; tie-break key.
    id_rank: Vec<u32>,
    packed: PackedBase,
}

impl RetrievalIndex {
    pub fn base(&self) -> &EmbeddingSet {
        &self.base
    }

    pub fn norms_sq(&self) -> &[f32] {
        &self.norms_sq
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }
}

pub fn build_index(base: EmbeddingSet) -> Result<RetrievalIndex> {
    if base.is_empty() {
        return Err(Error::Invalid("cannot build an index over an empty set".into()));
    }
    if base.len() > u32::MAX as usize {
        return Err(Error::OutOfRange(format!("{} index rows", base.len())));
    }
    let norms64: Vec<f64> = base.rows().map(norm_sq_f64).collect();
    let max_norm = norms64.iter().fold(0f64, |m, &v| m.max(v)).sqrt();
    let norms_sq = norms64.iter().map(|&v| v as f32).collect();
    let mut order: Vec<u32> = (0..base.len() as u32).collect();
    order.sort_by(|&a, &b| base.ids()[a as usize].cmp(&base.ids()[b as usize]));
    let mut id_rank = vec![0u32; base.len()];
    for (rank, &row) in order.iter().enumerate() {
        id_rank[row as usize] = rank as u32;
    }
    let packed = PackedBase::new(base.data(), base.dim());
    Ok(RetrievalIndex {
        packed,
        base,
        norms_sq,
        max_norm,
        id_rank,
    })
}

fn norm_sq_f64(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

/// Direct-subtraction squared distance, accumulated left to right in `f64`.
fn exact_dist_sq(q: &[f32], z: &[f32]) -> f64 {
    let mut s = 0f64;
    for (&a, &b) in q.iter().zip(z) {
        let d = f64::from(a) - f64::from(b);
        s += d * d;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub dist_sq: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    /// Index rows per traversal block.
    pub block_rows: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            threads: None,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }
}

fn check_query_args(index: &RetrievalIndex, queries: &EmbeddingSet, k: usize) -> Result<()> {
    if queries.dim() != index.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs index dim {}",
            queries.dim(),
            index.dim()
        )));
    }
    if k < 1 {
        return Err(Error::OutOfRange("k must be at least 1".into()));
    }
    Ok(())
}

pub fn search(index: &RetrievalIndex, queries: &EmbeddingSet, k: usize) -> Result<Vec<RankedResult>> {
    search_with(index, queries, k, &SearchOptions::default())
}

/// Top-`k` per query, in query order. Output is identical for every
/// `threads` and `block_rows` setting.
pub fn search_with(
    index: &RetrievalIndex,
    queries: &EmbeddingSet,
    k: usize,
    opts: &SearchOptions,
) -> Result<Vec<RankedResult>> {
    check_query_args(index, queries, k)?;
    if opts.block_rows == 0 {
        return Err(Error::OutOfRange("block_rows must be positive".into()));
    }
    let run = || {
        let n_chunks = queries.len().div_ceil(QUERY_CHUNK);
        (0..n_chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let lo = c * QUERY_CHUNK;
                let hi = (lo + QUERY_CHUNK).min(queries.len());
                search_chunk(index, queries, lo..hi, k, opts.block_rows)
            })
            .collect::<Vec<_>>()
    };
    let results = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(results)
}

/// Max-heap entry on screened distance.
#[derive(Clone, Copy, PartialEq)]
struct Screened(f32);

impl Eq for Screened {}

impl PartialOrd for Screened {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Screened {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct QueryState {
    /// k smallest screened distances so far.
    heap: BinaryHeap<Screened>,
    candidates: Vec<(f32, u32)>,
    norm_sq: f32,
    /// Twice the worst-case screening error for this query.
    slack: f32,
    /// Screening unusable (overflow); score every row exactly.
    exhaustive: bool,
}

impl QueryState {
    fn threshold(&self, k: usize) -> f32 {
        if self.heap.len() < k {
            f32::INFINITY
        } else {
            self.heap.peek().map_or(f32::INFINITY, |s| s.0) + self.slack
        }
    }

    fn offer(&mut self, k: usize, screened: f32, row: u32) {
        self.candidates.push((screened, row));
        if self.heap.len() < k {
            self.heap.push(Screened(screened));
        } else if screened < self.heap.peek().map_or(f32::INFINITY, |s| s.0) {
            self.heap.pop();
            self.heap.push(Screened(screened));
        }
        if self.candidates.len() >= 8 * k + 256 {
            let t = self.threshold(k);
            self.candidates.retain(|&(s, _)| s <= t);
        }
    }
}

/// Upper bound on `|screened - exact|` for one query: dot-product rounding
/// over `dim` terms plus the norm and expansion roundings, doubled.
fn screening_slack(dim: usize, q_norm: f64, max_base_norm: f64) -> f64 {
    let u = f64::from(f32::EPSILON) / 2.0;
    let terms = (dim + 16) as f64;
    let gamma = terms * u / (1.0 - terms * u);
    let scale = (q_norm + max_base_norm).powi(2);
    2.0 * (gamma + 8.0 * u) * scale + f64::from(f32::MIN_POSITIVE)
}

fn search_chunk(
    index: &RetrievalIndex,
    queries: &EmbeddingSet,
    range: std::ops::Range<usize>,
    k: usize,
    block_rows: usize,
) -> Vec<RankedResult> {
    let dim = index.dim();
    let n = index.len();
    let total_groups = n.div_ceil(GROUP);
    let block_groups = block_rows.div_ceil(GROUP);

    let mut states: Vec<QueryState> = range
        .clone()
        .map(|qi| {
            let nq = norm_sq_f64(queries.row(qi));
            let slack = screening_slack(dim, nq.sqrt(), index.max_norm);
            let exhaustive = !(slack < f64::from(f32::MAX) / 4.0) || !(nq < f64::from(f32::MAX) / 4.0);
            QueryState {
                heap: BinaryHeap::with_capacity(k + 1),
                candidates: Vec::new(),
                norm_sq: nq as f32,
                slack: slack as f32,
                exhaustive,
            }
        })
        .collect();

    let screened_rows: Vec<usize> = (0..states.len()).filter(|&i| !states[i].exhaustive).collect();
    let pad = vec![0f32; dim];
    let mut dots = vec![[0f32; GROUP]; QUERY_TILE * block_groups];
    let mut norms = vec![0f32; block_groups * GROUP];

    for g_lo in (0..total_groups).step_by(block_groups) {
        let g_hi = (g_lo + block_groups).min(total_groups);
        let n_groups = g_hi - g_lo;
        let row_lo = g_lo * GROUP;
        let row_hi = (g_hi * GROUP).min(n);
        norms.fill(f32::INFINITY);
        norms[..row_hi - row_lo].copy_from_slice(&index.norms_sq[row_lo..row_hi]);
        for tile in screened_rows.chunks(QUERY_TILE) {
            let mut qs: [&[f32]; QUERY_TILE] = [&pad; QUERY_TILE];
            for (slot, &local) in qs.iter_mut().zip(tile) {
                *slot = queries.row(range.start + local);
            }
            dots_tile(&qs, &index.packed, g_lo..g_hi, &mut dots);
            for (t, &local) in tile.iter().enumerate() {
                let st = &mut states[local];
                let nq = st.norm_sq;
                let mut thresh = st.threshold(k);
                for gi in 0..n_groups {
                    let d = &dots[t * n_groups + gi];
                    let nz = &norms[gi * GROUP..(gi + 1) * GROUP];
                    let mut screened = [0f32; GROUP];
                    let mut any = false;
                    for l in 0..GROUP {
                        screened[l] = (nq + nz[l] - 2.0 * d[l]).max(0.0);
                        any |= screened[l] <= thresh;
                    }
                    if !any {
                        continue;
                    }
                    for (l, &s) in screened.iter().enumerate() {
                        let row = row_lo + gi * GROUP + l;
                        if s <= thresh && row < n {
                            st.offer(k, s, row as u32);
                            thresh = st.threshold(k);
                        }
                    }
                }
            }
        }
    }

    range
        .zip(states)
        .map(|(qi, st)| {
            let q = queries.row(qi);
            let mut scored: Vec<(f64, u32)> = if st.exhaustive {
                (0..n as u32)
                    .map(|r| (exact_dist_sq(q, index.base.row(r as usize)), r))
                    .collect()
            } else {
                let t = st.threshold(k);
                st.candidates
                    .iter()
                    .filter(|&&(s, _)| s <= t)
                    .map(|&(_, r)| (exact_dist_sq(q, index.base.row(r as usize)), r))
                    .collect()
            };
            finish(index, queries.ids()[qi].clone(), &mut scored, k)
        })
        .collect()
}

fn finish(index: &RetrievalIndex, query_id: String, scored: &mut [(f64, u32)], k: usize) -> RankedResult {
    let key = |&(d, r): &(f64, u32)| (d, index.id_rank[r as usize]);
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        let (da, ra) = key(a);
        let (db, rb) = key(b);
        da.total_cmp(&db).then(ra.cmp(&rb))
    };
    let take = k.min(scored.len());
    if take < scored.len() {
        scored.select_nth_unstable_by(take, cmp);
    }
    let top = &mut scored[..take];
    top.sort_by(cmp);
    RankedResult {
        query_id,
        hits: top
            .iter()
            .map(|&(d, r)| Hit {
                id: index.base.ids()[r as usize].clone(),
                dist_sq: d as f32,
            })
            .collect(),
    }
}

/// Naive reference: every pair scored by direct subtraction, full sort.
pub fn search_reference(index: &RetrievalIndex, queries: &EmbeddingSet, k: usize) -> Result<Vec<RankedResult>> {
    check_query_args(index, queries, k)?;
    let ids = index.base.ids();
    let results = queries
        .rows()
        .zip(queries.ids())
        .map(|(q, qid)| {
            let mut all: Vec<(f64, &str)> = index
                .base
                .rows()
                .zip(ids)
                .map(|(z, id)| {
                    let mut s = 0f64;
                    for j in 0..q.len() {
                        let d = f64::from(q[j]) - f64::from(z[j]);
                        s += d * d;
                    }
                    (s, id.as_str())
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            all.truncate(k);
            RankedResult {
                query_id: qid.clone(),
                hits: all
                    .into_iter()
                    .map(|(d, id)| Hit {
                        id: id.to_owned(),
                        dist_sq: d as f32,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(results)
}

fn check_field(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', ',', '\n', '\r']) {
        return Err(Error::Invalid(format!("id {id:?} cannot be written to a TSV list")));
    }
    Ok(())
}

/// One line per query: `query_id TAB id1,id2,...`.
pub fn write_predictions<W: Write>(results: &[RankedResult], mut sink: W) -> Result<()> {
    for r in results {
        check_field(&r.query_id)?;
        let mut line = String::with_capacity(r.query_id.len() + 16 * r.hits.len());
        line.push_str(&r.query_id);
        line.push('\t');
        for (j, h) in r.hits.iter().enumerate() {
            check_field(&h.id)?;
            if j > 0 {
                line.push(',');
            }
            line.push_str(&h.id);
        }
        line.push('\n');
        sink.write_all(line.as_bytes())?;
    }
    sink.flush()?;
    Ok(())
}

/// Debug companion of [`write_predictions`]: `query_id TAB d1,d2,...`.
pub fn write_distances<W: Write>(results: &[RankedResult], mut sink: W) -> Result<()> {
    for r in results {
        let dists: Vec<String> = r.hits.iter().map(|h| h.dist_sq.to_string()).collect();
        writeln!(sink, "{}\t{}", r.query_id, dists.join(","))?;
    }
    sink.flush()?;
    Ok(())
}

/// Query id with its ranked index ids, as read back from a predictions file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub query_id: String,
    pub ids: Vec<String>,
}

impl From<&RankedResult> for Ranking {
    fn from(r: &RankedResult) -> Self {
        Ranking {
            query_id: r.query_id.clone(),
            ids: r.hits.iter().map(|h| h.id.clone()).collect(),
        }
    }
}

/// Parses `key TAB v1,v2,...` lines. Blank lines are skipped; an empty list is allowed.
pub(crate) fn read_id_lists<R: BufRead>(source: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `id<TAB>comma-separated ids`".into(),
        })?;
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty query id".into(),
            });
        }
        let ids = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::to_owned).collect()
        };
        if ids.iter().any(String::is_empty) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty id in list".into(),
            });
        }
        out.push((key.to_owned(), ids));
    }
    Ok(out)
}

pub fn read_predictions<R: BufRead>(source: R) -> Result<Vec<Ranking>> {
    Ok(read_id_lists(source)?
        .into_iter()
        .map(|(query_id, ids)| Ranking { query_id, ids })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: Vec<(&str, Vec<f32>)>) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows, false).unwrap()
    }

    fn hits(r: &RankedResult) -> Vec<(&str, f32)> {
        r.hits.iter().map(|h| (h.id.as_str(), h.dist_sq)).collect()
    }

    #[test]
    fn norms() {
        let idx = build_index(set(vec![("a", vec![3.0, 4.0])])).unwrap();
        assert_eq!(idx.norms_sq(), &[25.0]);
        assert!(build_index(EmbeddingSet::empty(2).unwrap()).is_err());
    }

    #[test]
    fn hand_distances() {
        let idx = build_index(set(vec![("p", vec![0.0, 0.0]), ("r", vec![3.0, 4.0])])).unwrap();
        let q = set(vec![("q", vec![0.0, 1.0])]);
        for res in [search(&idx, &q, 2).unwrap(), search_reference(&idx, &q, 2).unwrap()] {
            assert_eq!(hits(&res[0]), vec![("p", 1.0), ("r", 18.0)]);
        }
    }

    #[test]
    fn ties_by_id() {
        let idx = build_index(set(vec![("b", vec![1.0, 0.0]), ("a", vec![1.0, 0.0])])).unwrap();
        let q = set(vec![("q", vec![1.0, 0.0])]);
        for res in [search(&idx, &q, 2).unwrap(), search_reference(&idx, &q, 2).unwrap()] {
            assert_eq!(hits(&res[0]), vec![("a", 0.0), ("b", 0.0)]);
        }
    }

    #[test]
    fn truncation_and_single_row() {
        let idx = build_index(set(vec![("only", vec![1.0, 2.0, 3.0])])).unwrap();
        let q = set(vec![("x", vec![0.0, 0.0, 0.0]), ("y", vec![5.0, 5.0, 5.0])]);
        let res = search(&idx, &q, 5).unwrap();
        assert_eq!(res, search_reference(&idx, &q, 5).unwrap());
        assert!(res.iter().all(|r| r.hits.len() == 1 && r.hits[0].id == "only"));
        assert_eq!(res[1].query_id, "y");
    }

    #[test]
    fn argument_errors() {
        let idx = build_index(set(vec![("a", vec![1.0, 2.0])])).unwrap();
        let q3 = set(vec![("x", vec![0.0, 0.0, 0.0])]);
        assert!(search(&idx, &q3, 1).is_err());
        let q2 = set(vec![("x", vec![0.0, 0.0])]);
        assert!(search(&idx, &q2, 0).is_err());
        assert!(search_reference(&idx, &q2, 0).is_err());
    }

    #[test]
    fn huge_values_fall_back_to_exact_scoring() {
        let idx = build_index(set(vec![("a", vec![3e19, 0.0]), ("b", vec![-3e19, 1.0])])).unwrap();
        let q = set(vec![("q", vec![2.9e19, 0.0])]);
        let res = search(&idx, &q, 2).unwrap();
        assert_eq!(res, search_reference(&idx, &q, 2).unwrap());
        assert_eq!(res[0].hits[0].id, "a");
    }

    #[test]
    fn predictions_tsv() {
        let res = vec![RankedResult {
            query_id: "q1".into(),
            hits: vec![
                Hit {
                    id: "a".into(),
                    dist_sq: 0.5,
                },
                Hit {
                    id: "b".into(),
                    dist_sq: 1.0,
                },
            ],
        }];
        let mut buf = Vec::new();
        write_predictions(&res, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "q1\ta,b\n");
        let back = read_predictions(&buf[..]).unwrap();
        assert_eq!(back, vec![Ranking::from(&res[0])]);

        let bad = vec![RankedResult {
            query_id: "q\t1".into(),
            hits: vec![],
        }];
        assert!(write_predictions(&bad, Vec::new()).is_err());
        assert!(read_predictions(&b"no tab here\n"[..]).is_err());
    }
}
