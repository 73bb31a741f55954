//! Exact dense index, brute-force top-k search and negative sampling.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::Document;
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, Rng, Vec64};

/// Default number of mined negatives per query.
pub const DEFAULT_NEGATIVES: usize = 10;

/// Ranked `(doc_id, score)` pairs: scores non-increasing, ties by ascending id.
pub type RankedList = Vec<(String, f64)>;

/// Unit-norm document vectors in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            positions: HashMap::new(),
        }
    }

    /// Adds a vector, normalizing it to unit length.
    pub fn insert(&mut self, id: impl Into<String>, vector: &[f64]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if self.positions.contains_key(&id) {
            return Err(Error::DuplicateId { id });
        }
        let unit = l2_normalize(vector)?;
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.extend_from_slice(&unit);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.positions
            .get(id)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.chunks_exact(self.dim))
    }
}

/// Encodes every document with the current parameters.
pub fn build_index(
    corpus: &[Document],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::config("cannot index an empty corpus"));
    }
    let vectors: Vec<Vec64> = corpus
        .par_iter()
        .map(|doc| {
            if doc.text.trim().is_empty() {
                return Err(Error::EmptyText { id: doc.id.clone() });
            }
            encode(params, config, &doc.text).map_err(|e| match e {
                Error::EmptyInput => Error::EmptyText { id: doc.id.clone() },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut index = DenseIndex::new(config.d_model);
    for (doc, v) in corpus.iter().zip(&vectors) {
        index.insert(doc.id.clone(), v)?;
    }
    Ok(index)
}

/// Score descending, then id ascending.
fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Exact top-`k` by cosine similarity.
pub fn search_top_k(index: &DenseIndex, query_vec: &[f64], k: usize) -> Result<RankedList> {
    if query_vec.len() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            got: query_vec.len(),
        });
    }
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    let q = l2_normalize(query_vec)?;
    let mut scored: Vec<(usize, f64)> = index
        .vectors
        .chunks_exact(index.dim)
        .enumerate()
        .map(|(i, v)| (i, dot(&q, v)))
        .collect();
    let k = k.min(scored.len());
    let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a, b, &index.ids);
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

/// ANCE-style hard negatives: the `k` documents most similar to `query`
/// under the current model, with `positive_id` removed.
pub fn mine_ance_negatives(
    index: &DenseIndex,
    params: &EncoderParams,
    config: &EncoderConfig,
    query: &str,
    positive_id: &str,
    k: usize,
) -> Result<Vec<String>> {
    if !index.contains(positive_id) {
        return Err(Error::UnknownDocument(positive_id.to_string()));
    }
    let qv = encode(params, config, query)?;
    let ranked = search_top_k(index, &qv, k + 1)?;
    Ok(ranked
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| id != positive_id)
        .take(k)
        .collect())
}

/// Uniform sample of `k` ids without replacement, never `positive_id`. When
/// fewer than `k` candidates exist, all of them are returned shuffled.
pub fn mine_random_negatives(
    corpus_ids: &[String],
    positive_id: &str,
    k: usize,
    rng: &mut Rng,
) -> Vec<String> {
    let mut pool: Vec<&String> = corpus_ids.iter().filter(|id| *id != positive_id).collect();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.into_iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TextRecord;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_index(seed: u64, n: usize, dim: usize) -> DenseIndex {
        let mut rng = Rng::new(seed);
        let mut idx = DenseIndex::new(dim);
        for i in 0..n {
            let v: Vec64 = (0..dim).map(|_| rng.symmetric(1.0)).collect();
            idx.insert(format!("doc{i:05}"), &v).unwrap();
        }
        idx
    }

    fn full_sort(index: &DenseIndex, q: &[f64]) -> Vec<(String, f64)> {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let q: Vec64 = q.iter().map(|x| x / n).collect();
        let mut all: Vec<(String, f64)> = index
            .iter()
            .map(|(id, v)| (id.to_string(), q.iter().zip(v).map(|(a, b)| a * b).sum()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }

    #[test]
    fn small_cases() {
        let idx = random_index(1, 5, 4);
        let q = idx.get("doc00003").unwrap().to_vec();
        let all = search_top_k(&idx, &q, 50).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all[0].0, "doc00003");
        assert!((all[0].1 - 1.0).abs() < 1e-12);
        assert!(search_top_k(&idx, &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut idx = DenseIndex::new(2);
        idx.insert("b", &[1.0, 0.0]).unwrap();
        idx.insert("a", &[2.0, 0.0]).unwrap();
        idx.insert("c", &[0.0, 1.0]).unwrap();
        let r = search_top_k(&idx, &[1.0, 0.0], 2).unwrap();
        assert_eq!(
            r.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(),
            ["a", "b"]
        );
        assert!(matches!(
            idx.insert("a", &[0.0, 1.0]),
            Err(Error::DuplicateId { .. })
        ));
    }

    #[test]
    fn thousand_doc_top10_equals_full_sort() {
        let idx = random_index(99, 1000, 16);
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let q: Vec64 = (0..16).map(|_| rng.symmetric(1.0)).collect();
            let got = search_top_k(&idx, &q, 10).unwrap();
            let mut want = full_sort(&idx, &q);
            want.truncate(10);
            assert_eq!(got, want);
        }
    }

    fn corpus(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| TextRecord {
                id: format!("d{i:03}"),
                text: format!("document number {i} about topic {}", i % 7),
            })
            .collect()
    }

    #[test]
    fn build_index_errors() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let mut docs = corpus(3);
        docs.push(docs[0].clone());
        assert!(matches!(
            build_index(&docs, &p, &cfg),
            Err(Error::DuplicateId { .. })
        ));
        let mut docs = corpus(3);
        docs[1].text = "!!".into();
        match build_index(&docs, &p, &cfg) {
            Err(Error::EmptyText { id }) => assert_eq!(id, "d001"),
            other => panic!("{other:?}"),
        }
        assert_eq!(build_index(&corpus(1), &p, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn ance_excludes_positive_and_handles_small_corpora() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let docs = corpus(6);
        let idx = build_index(&docs, &p, &cfg).unwrap();
        // query equal to doc 2's text puts it at rank 1
        let negs = mine_ance_negatives(&idx, &p, &cfg, &docs[2].text, "d002", 3).unwrap();
        let ranked = search_top_k(&idx, &encode(&p, &cfg, &docs[2].text).unwrap(), 4).unwrap();
        assert_eq!(ranked[0].0, "d002");
        let expect: Vec<String> = ranked[1..].iter().map(|(id, _)| id.clone()).collect();
        assert_eq!(negs, expect);

        let all = mine_ance_negatives(&idx, &p, &cfg, "topic", "d000", 10).unwrap();
        assert_eq!(all.len(), 5);
        assert!(!all.contains(&"d000".to_string()));
        assert!(matches!(
            mine_ance_negatives(&idx, &p, &cfg, "topic", "nope", 10),
            Err(Error::UnknownDocument(_))
        ));
    }

    #[test]
    fn random_negatives_basics() {
        let ids: Vec<String> = (0..8).map(|i| format!("d{i}")).collect();
        let mut all = mine_random_negatives(&ids, "d3", 7, &mut Rng::new(1));
        all.sort();
        let mut expect: Vec<String> = ids.iter().filter(|i| *i != "d3").cloned().collect();
        expect.sort();
        assert_eq!(all, expect);
        assert_eq!(
            mine_random_negatives(&ids, "d3", 4, &mut Rng::new(9)),
            mine_random_negatives(&ids, "d3", 4, &mut Rng::new(9))
        );
        assert_eq!(
            mine_random_negatives(&ids, "d3", 50, &mut Rng::new(9)).len(),
            7
        );
    }

    #[test]
    fn random_negatives_are_uniform() {
        // chi-square, 18 degrees of freedom; 0.99 quantile is 34.805
        let ids: Vec<String> = (0..20).map(|i| format!("d{i:02}")).collect();
        let mut rng = Rng::new(2024);
        let mut counts = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let s = mine_random_negatives(&ids, "d07", 1, &mut rng);
            *counts.entry(s[0].clone()).or_insert(0usize) += 1;
        }
        assert!(!counts.contains_key("d07"));
        let expected = draws as f64 / 19.0;
        let chi2: f64 = ids
            .iter()
            .filter(|id| *id != "d07")
            .map(|id| {
                let c = *counts.get(id).unwrap_or(&0) as f64;
                (c - expected).powi(2) / expected
            })
            .sum();
        assert!(chi2 < 34.805, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn top_k_is_truncated_full_sort(seed in 0u64..500, k in 1usize..80) {
            let idx = random_index(seed, 60, 6);
            let mut rng = Rng::new(seed ^ 0xabc);
            let q: Vec64 = (0..6).map(|_| rng.symmetric(1.0)).collect();
            let got = search_top_k(&idx, &q, k).unwrap();
            let mut want = full_sort(&idx, &q);
            want.truncate(k);
            prop_assert_eq!(got, want);
        }
    }
}
