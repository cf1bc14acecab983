//! Cross-modal nearest-neighbour search over quantized codes.
//!
//! A query is embedded into the latent space, a table of its squared
//! distances to all `M·K` dictionary elements is built once, and each
//! database item is then scored with `M` lookups. Expanding
//! `‖q − Σ_m c_m‖²` gives
//!
//! ```text
//! Σ_m ‖q − c_m‖² − (M−1)‖q‖² + cross
//! ```
//!
//! so when every item's cross term equals `ε` the lookup sum ranks items
//! exactly like the true distance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common_space::{embed_query, CommonSpaceModel};
use crate::data::{CodeMatrix, DenseMatrix, LabelSet, Modality};
use crate::error::{Error, Result};
use crate::quantizer::{cross_term, CompositeQuantizer};

/// `M × K` squared distances from one query to every dictionary element.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    dictionary_size: usize,
    /// Dictionary-major: entry `(m, k)` lives at `m·K + k`.
    entries: Vec<f64>,
}

impl DistanceTable {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.dictionary_size + k]
    }

    pub fn num_dictionaries(&self) -> usize {
        self.entries.len() / self.dictionary_size
    }

    pub fn dictionary_size(&self) -> usize {
        self.dictionary_size
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

pub fn build_table(query: &DVector<f64>, q: &CompositeQuantizer) -> Result<DistanceTable> {
    if query.len() != q.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, dictionaries {}",
            query.len(),
            q.dim()
        )));
    }
    let k = q.dictionary_size();
    let mut entries = Vec::with_capacity(q.num_dictionaries() * k);
    let qn = query.norm_squared();
    for dict in q.dictionaries() {
        let dots = dict.tr_mul(query);
        for (col, dot) in dict.column_iter().zip(dots.iter()) {
            // clamp the rounding error of the expanded form
            entries.push((qn - 2.0 * dot + col.norm_squared()).max(0.0));
        }
    }
    Ok(DistanceTable {
        dictionary_size: k,
        entries,
    })
}

pub fn score_item(table: &DistanceTable, item: &[u32]) -> f64 {
    let k = table.dictionary_size;
    item.iter()
        .enumerate()
        .map(|(m, &c)| table.entries[m * k + c as usize])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub item: usize,
    pub score: f64,
}

/// Hits sorted by ascending score, ties by ascending item id.
pub type ResultList = Vec<SearchHit>;

pub fn ids(results: &[SearchHit]) -> Vec<usize> {
    results.iter().map(|h| h.item).collect()
}

fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    a.score.total_cmp(&b.score).then(a.item.cmp(&b.item))
}

struct HeapEntry(SearchHit);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        hit_order(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        hit_order(&self.0, &other.0)
    }
}

/// Keeps the `t` best of the scores with a bounded max-heap.
pub fn top_t(scores: impl Iterator<Item = (usize, f64)>, t: usize) -> ResultList {
    if t == 0 {
        return Vec::new();
    }
    let mut heap = BinaryHeap::with_capacity(t + 1);
    for (item, score) in scores {
        let hit = SearchHit { item, score };
        if heap.len() < t {
            heap.push(HeapEntry(hit));
        } else if let Some(worst) = heap.peek() {
            if hit_order(&hit, &worst.0) == Ordering::Less {
                heap.pop();
                heap.push(HeapEntry(hit));
            }
        }
    }
    let mut out: Vec<SearchHit> = heap.into_iter().map(|e| e.0).collect();
    out.sort_by(hit_order);
    out
}

/// Work done by one table-path query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueryCost {
    pub table_entries: usize,
    pub lookups: usize,
}

/// Table-path search of a latent query against `codes`.
pub fn search_latent(query: &DVector<f64>, q: &CompositeQuantizer, codes: &CodeMatrix, t: usize) -> Result<ResultList> {
    search_latent_counted(query, q, codes, t).map(|(r, _)| r)
}

pub fn search_latent_counted(
    query: &DVector<f64>,
    q: &CompositeQuantizer,
    codes: &CodeMatrix,
    t: usize,
) -> Result<(ResultList, QueryCost)> {
    q.check_codes(codes)?;
    let table = build_table(query, q)?;
    let t = t.min(codes.num_items());
    let results = top_t(codes.items().enumerate().map(|(n, c)| (n, score_item(&table, c))), t);
    let cost = QueryCost {
        table_entries: table.entries.len(),
        lookups: codes.num_items() * codes.num_dictionaries(),
    };
    Ok((results, cost))
}

/// Exact `‖q − reconstruct(item)‖²` for every item.
pub fn exhaustive_latent(query: &DVector<f64>, q: &CompositeQuantizer, codes: &CodeMatrix, t: usize) -> Result<ResultList> {
    q.check_codes(codes)?;
    if query.len() != q.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, dictionaries {}",
            query.len(),
            q.dim()
        )));
    }
    let t = t.min(codes.num_items());
    Ok(top_t(
        codes
            .items()
            .enumerate()
            .map(|(n, c)| (n, (query - q.decode(c)).norm_squared())),
        t,
    ))
}

/// Runs every column of `queries` in parallel; order is preserved.
pub fn search_batch(
    queries: &DenseMatrix,
    q: &CompositeQuantizer,
    codes: &CodeMatrix,
    t: usize,
    exhaustive: bool,
) -> Result<Vec<ResultList>> {
    (0..queries.ncols())
        .into_par_iter()
        .map(|i| {
            let query = queries.column(i).into_owned();
            if exhaustive {
                exhaustive_latent(&query, q, codes, t)
            } else {
                search_latent(&query, q, codes, t)
            }
        })
        .collect()
}

/// `Σ_m table[m][code_m] − (M−1)‖q‖² + cross(item)`, which equals the full
/// squared distance to the item's reconstruction.
pub fn distance_from_table(table: &DistanceTable, query: &DVector<f64>, q: &CompositeQuantizer, item: &[u32]) -> f64 {
    let m = item.len() as f64;
    score_item(table, item) - (m - 1.0) * query.norm_squared() + cross_term(q, item)
}

/// Immutable database of one modality's codes.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    pub common_space: CommonSpaceModel,
    pub quantizer: CompositeQuantizer,
    pub codes: CodeMatrix,
    pub database_modality: Modality,
    pub labels: Option<Vec<LabelSet>>,
}

impl SearchIndex {
    pub fn new(
        common_space: CommonSpaceModel,
        quantizer: CompositeQuantizer,
        codes: CodeMatrix,
        database_modality: Modality,
        labels: Option<Vec<LabelSet>>,
    ) -> Result<Self> {
        quantizer.check_codes(&codes)?;
        if quantizer.dim() != common_space.latent_dim() {
            return Err(Error::Shape(format!(
                "quantizer dimension {} differs from latent dimension {}",
                quantizer.dim(),
                common_space.latent_dim()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != codes.num_items() {
                return Err(Error::Shape(format!(
                    "{} labels for {} database items",
                    l.len(),
                    codes.num_items()
                )));
            }
        }
        Ok(SearchIndex {
            common_space,
            quantizer,
            codes,
            database_modality,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.num_items()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.num_items() == 0
    }

    fn embed(&self, raw: &DVector<f64>, query_modality: Modality) -> Result<DVector<f64>> {
        if query_modality == self.database_modality {
            return Err(Error::ModalityMismatch {
                query: query_modality,
                database: self.database_modality,
            });
        }
        embed_query(&self.common_space, query_modality, raw)
    }
}

/// Embeds a raw query of the other modality and returns its top `t`
/// (clamped to the database size) by table lookup.
pub fn query_cross_modal(index: &SearchIndex, raw: &DVector<f64>, query_modality: Modality, t: usize) -> Result<ResultList> {
    let latent = index.embed(raw, query_modality)?;
    search_latent(&latent, &index.quantizer, &index.codes, t)
}

pub fn exhaustive_query(index: &SearchIndex, raw: &DVector<f64>, query_modality: Modality, t: usize) -> Result<ResultList> {
    let latent = index.embed(raw, query_modality)?;
    exhaustive_latent(&latent, &index.quantizer, &index.codes, t)
}

/// Spearman correlation between two score vectors over the same items,
/// with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

/// Table scores and exact distances for every item, for agreement reports.
pub fn score_all(query: &DVector<f64>, q: &CompositeQuantizer, codes: &CodeMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let table = build_table(query, q)?;
    Ok(codes
        .items()
        .map(|c| (score_item(&table, c), (query - q.decode(c)).norm_squared()))
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn e12() -> DenseMatrix {
        DenseMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])
    }

    #[test]
    fn hand_table() {
        let q = CompositeQuantizer::new(vec![e12()], 0.0).unwrap();
        let t = build_table(&DVector::from_vec(vec![1.0, 0.0]), &q).unwrap();
        assert_eq!(t.entries(), &[0.0, 2.0]);
    }

    #[test]
    fn table_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = CompositeQuantizer::new((0..3).map(|_| random(&mut rng, 5, 7)).collect(), 0.0).unwrap();
        let query = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let t = build_table(&query, &q).unwrap();
        for m in 0..3 {
            for k in 0..7 {
                let mut naive = 0.0;
                for i in 0..5 {
                    let d = query[i] - q.dictionaries()[m][(i, k)];
                    naive += d * d;
                }
                assert!((t.get(m, k) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_hand_example() {
        let q = CompositeQuantizer::new(vec![e12(), e12()], 0.0).unwrap();
        let query = DVector::from_vec(vec![1.0, 1.0]);
        let t = build_table(&query, &q).unwrap();
        let item = [0u32, 1];
        assert_eq!(score_item(&t, &item), 2.0);
        assert_eq!(distance_from_table(&t, &query, &q, &item), 0.0);
    }

    #[test]
    fn decomposition_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = CompositeQuantizer::new((0..4).map(|_| random(&mut rng, 6, 5)).collect(), 0.0).unwrap();
            let query = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let item: Vec<u32> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let t = build_table(&query, &q).unwrap();
            let full = (&query - q.decode(&item)).norm_squared();
            assert!((distance_from_table(&t, &query, &q, &item) - full).abs() < 1e-10);
        }
    }

    #[test]
    fn single_dictionary_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = CompositeQuantizer::new(vec![random(&mut rng, 4, 8)], 0.0).unwrap();
        let codes = CodeMatrix::new(1, 8, (0..40).map(|_| rng.random_range(0..8)).collect()).unwrap();
        let query = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let a = search_latent(&query, &q, &codes, 40).unwrap();
        let b = exhaustive_latent(&query, &q, &codes, 40).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn top_t_sorted_stable_and_clamped() {
        let scores = [3.0, 1.0, 1.0, 2.0, 0.5];
        let r = top_t(scores.iter().copied().enumerate(), 3);
        assert_eq!(ids(&r), vec![4, 1, 2]);
        let all = top_t(scores.iter().copied().enumerate(), 10);
        assert_eq!(ids(&all), vec![4, 1, 2, 3, 0]);
        assert!(top_t(scores.iter().copied().enumerate(), 0).is_empty());
    }

    #[test]
    fn top_t_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..20) as f64).collect();
            let mut full: Vec<SearchHit> = scores
                .iter()
                .enumerate()
                .map(|(item, &score)| SearchHit { item, score })
                .collect();
            full.sort_by(hit_order);
            let t = rng.random_range(1..200);
            assert_eq!(top_t(scores.iter().copied().enumerate(), t), full[..t].to_vec());
        }
    }

    #[test]
    fn cost_counts_lookups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = CompositeQuantizer::new((0..3).map(|_| random(&mut rng, 4, 6)).collect(), 0.0).unwrap();
        let codes = CodeMatrix::new(3, 6, (0..30).map(|_| rng.random_range(0..6)).collect()).unwrap();
        let (_, cost) = search_latent_counted(&DVector::zeros(4), &q, &codes, 5).unwrap();
        assert_eq!(cost, QueryCost { table_entries: 18, lookups: 30 });
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }
}
