//! Deterministic synthetic retrieval benchmark.
//!
//! Each cluster owns a disjoint vocabulary. Documents draw distinct words
//! from their cluster's vocabulary; a query targets one document and draws
//! a subset of that document's words, each swapped for a query-side synonym
//! with probability `paraphrase_rate`. A shared noise vocabulary replaces
//! each word slot with probability `noise_rate`. Every document also gets
//! `neg_queries_per_doc` queries generated the same way, which stand in for
//! that document's own positive queries when it is mined as a negative.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Document, NegQueryMap, Qrels, Query, TextRecord};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_clusters: usize,
    pub docs_per_cluster: usize,
    pub queries_per_cluster: usize,
    /// Held-out queries per cluster for evaluation.
    pub eval_queries_per_cluster: usize,
    pub vocab_per_cluster: usize,
    /// Probability that a query word is replaced by its query-side synonym.
    /// Synonyms never occur in documents, so matching them has to be learned.
    pub paraphrase_rate: f64,
    pub noise_rate: f64,
    pub doc_length: usize,
    pub query_length: usize,
    pub neg_queries_per_doc: usize,
    pub noise_vocab_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clusters: 10,
            docs_per_cluster: 50,
            queries_per_cluster: 10,
            eval_queries_per_cluster: 10,
            vocab_per_cluster: 40,
            paraphrase_rate: 0.5,
            noise_rate: 0.1,
            doc_length: 16,
            query_length: 5,
            neg_queries_per_doc: 1,
            noise_vocab_size: 64,
        }
    }
}

const MAX_WORDS: usize = 200_000;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clusters", self.num_clusters),
            ("docs_per_cluster", self.docs_per_cluster),
            ("queries_per_cluster", self.queries_per_cluster),
            ("vocab_per_cluster", self.vocab_per_cluster),
            ("doc_length", self.doc_length),
            ("query_length", self.query_length),
            ("neg_queries_per_doc", self.neg_queries_per_doc),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.paraphrase_rate) {
            return Err(Error::config(format!(
                "paraphrase_rate must lie in [0, 1], got {}",
                self.paraphrase_rate
            )));
        }
        if self.noise_rate > 0.0 && self.noise_vocab_size == 0 {
            return Err(Error::config(
                "noise_rate > 0 needs a nonempty noise vocabulary",
            ));
        }
        if self.vocab_per_cluster < self.doc_length {
            return Err(Error::config(format!(
                "vocab_per_cluster ({}) is smaller than doc_length ({}); documents use distinct words",
                self.vocab_per_cluster, self.doc_length
            )));
        }
        if self.query_length > self.doc_length {
            return Err(Error::config(format!(
                "query_length ({}) exceeds doc_length ({})",
                self.query_length, self.doc_length
            )));
        }
        let words = 2 * self.num_clusters * self.vocab_per_cluster + self.noise_vocab_size;
        if words > MAX_WORDS {
            return Err(Error::config(format!(
                "synthetic data needs {words} distinct words, limit is {MAX_WORDS}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub corpus: Vec<Document>,
    /// Cluster index of each corpus document, aligned with `corpus`.
    pub doc_clusters: Vec<usize>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub eval_queries: Vec<Query>,
    pub eval_qrels: Qrels,
    pub neg_query_map: NegQueryMap,
    /// Document word to its query-side synonym.
    pub synonyms: BTreeMap<String, String>,
}

const CONSONANTS: &[u8] = b"bdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn fresh_word(rng: &mut Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let syllables = 2 + rng.below(2);
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
            w.push(VOWELS[rng.below(VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// `k` distinct indices from `0..n`, in draw order.
fn sample_distinct(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn sentence(words: &[&str], end: char) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push(end);
    s
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: Rng,
    cluster_vocab: Vec<Vec<String>>,
    noise_vocab: Vec<String>,
    synonyms: HashMap<String, String>,
}

impl Generator<'_> {
    fn noisy(&mut self, word: String) -> String {
        if self.spec.noise_rate > 0.0 && self.rng.next_f64() < self.spec.noise_rate {
            self.noise_vocab[self.rng.below(self.noise_vocab.len())].clone()
        } else {
            word
        }
    }

    /// Returns the rendered document and its clean (cluster) words.
    fn document(&mut self, cluster: usize) -> (String, Vec<String>) {
        let picks = sample_distinct(
            &mut self.rng,
            self.spec.vocab_per_cluster,
            self.spec.doc_length,
        );
        let clean: Vec<String> = picks
            .iter()
            .map(|&i| self.cluster_vocab[cluster][i].clone())
            .collect();
        let rendered: Vec<String> = clean.iter().map(|w| self.noisy(w.clone())).collect();
        let refs: Vec<&str> = rendered.iter().map(String::as_str).collect();
        (sentence(&refs, '.'), clean)
    }

    fn query_for(&mut self, doc_words: &[String]) -> String {
        let picks = sample_distinct(&mut self.rng, doc_words.len(), self.spec.query_length);
        let words: Vec<String> = picks
            .iter()
            .map(|&i| {
                let rate = self.spec.paraphrase_rate;
                let w = if rate > 0.0 && self.rng.next_f64() < rate {
                    self.synonyms[&doc_words[i]].clone()
                } else {
                    doc_words[i].clone()
                };
                self.noisy(w)
            })
            .collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        sentence(&refs, '?')
    }
}

/// Builds the benchmark for `spec`; identical `(spec, seed)` gives identical
/// output.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut taken = HashSet::new();
    let cluster_vocab: Vec<Vec<String>> = (0..spec.num_clusters)
        .map(|_| {
            (0..spec.vocab_per_cluster)
                .map(|_| fresh_word(&mut rng, &mut taken))
                .collect()
        })
        .collect();
    let noise_vocab = (0..spec.noise_vocab_size)
        .map(|_| fresh_word(&mut rng, &mut taken))
        .collect();
    let synonyms: HashMap<String, String> = cluster_vocab
        .iter()
        .flatten()
        .map(|w| (w.clone(), fresh_word(&mut rng, &mut taken)))
        .collect();
    let mut gen = Generator {
        spec,
        rng,
        cluster_vocab,
        noise_vocab,
        synonyms,
    };

    let mut corpus = Vec::new();
    let mut doc_clusters = Vec::new();
    let mut doc_words = Vec::new();
    for c in 0..spec.num_clusters {
        for j in 0..spec.docs_per_cluster {
            let (text, clean) = gen.document(c);
            corpus.push(TextRecord {
                id: format!("d{c:03}-{j:04}"),
                text,
            });
            doc_clusters.push(c);
            doc_words.push(clean);
        }
    }

    let mut neg_query_map = NegQueryMap::new();
    for (doc, words) in corpus.iter().zip(&doc_words) {
        let qs = (0..spec.neg_queries_per_doc)
            .map(|_| gen.query_for(words))
            .collect();
        neg_query_map.insert(doc.id.clone(), qs);
    }

    let mut make_queries = |prefix: &str, per_cluster: usize| {
        let mut queries = Vec::new();
        let mut qrels = Qrels::new();
        for c in 0..spec.num_clusters {
            for i in 0..per_cluster {
                let target = c * spec.docs_per_cluster + gen.rng.below(spec.docs_per_cluster);
                let id = format!("{prefix}{c:03}-{i:04}");
                queries.push(TextRecord {
                    id: id.clone(),
                    text: gen.query_for(&doc_words[target]),
                });
                qrels.insert(id, corpus[target].id.clone(), 1);
            }
        }
        (queries, qrels)
    };
    let (queries, qrels) = make_queries("q", spec.queries_per_cluster);
    let (eval_queries, eval_qrels) = make_queries("e", spec.eval_queries_per_cluster);

    Ok(SynthDataset {
        corpus,
        doc_clusters,
        queries,
        qrels,
        eval_queries,
        eval_qrels,
        neg_query_map,
        synonyms: gen.synonyms.into_iter().collect(),
    })
}

/// File names written by [`SynthDataset::write`], in write order.
pub const SYNTH_FILES: [&str; 6] = [
    "corpus.jsonl",
    "queries.jsonl",
    "qrels.tsv",
    "eval_queries.jsonl",
    "eval_qrels.tsv",
    "neg_queries.jsonl",
];

impl SynthDataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        super::save_records(&dir.join(SYNTH_FILES[0]), &self.corpus)?;
        super::save_records(&dir.join(SYNTH_FILES[1]), &self.queries)?;
        super::save_qrels(&dir.join(SYNTH_FILES[2]), &self.qrels)?;
        super::save_records(&dir.join(SYNTH_FILES[3]), &self.eval_queries)?;
        super::save_qrels(&dir.join(SYNTH_FILES[4]), &self.eval_qrels)?;
        super::save_neg_query_map(&dir.join(SYNTH_FILES[5]), &self.neg_query_map)
    }
}
