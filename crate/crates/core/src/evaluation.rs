//! Retrieval runs, nDCG@k scoring and method-comparison tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Document, Qrels, Query};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::mining::{build_index, search_top_k, RankedList};

pub const DEFAULT_K: usize = 5;

/// Ranked results per query id.
pub type RetrievalRun = BTreeMap<String, RankedList>;

/// nDCG@k with binary gains and a log₂(rank + 1) discount.
pub fn ndcg_at_k(ranking: &[(String, f64)], relevant: &HashSet<&str>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if relevant.is_empty() {
        return Err(Error::config("relevant set is empty"));
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, (id, _))| relevant.contains(id.as_str()))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {} on {}\n\n", self.method, self.dataset);
        let _ = writeln!(
            s,
            "mean nDCG@{}: {:.4} over {} queries\n",
            self.k,
            self.mean,
            self.per_query.len()
        );
        let _ = writeln!(s, "| query | nDCG@{} |", self.k);
        s.push_str("|---|---:|\n");
        for (q, v) in &self.per_query {
            let _ = writeln!(s, "| {q} | {v:.4} |");
        }
        s
    }
}

/// Mean over values in key order, so the result does not depend on how the
/// per-query scores were produced.
fn ordered_mean(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.values().sum::<f64>() / values.len() as f64
}

/// Scores an existing run against `qrels`; queries without relevant
/// documents are skipped with a warning.
pub fn score_run(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<BTreeMap<String, f64>> {
    let mut per_query = BTreeMap::new();
    for (qid, ranking) in run {
        let relevant: HashSet<&str> = qrels.relevant(qid).into_iter().collect();
        if relevant.is_empty() {
            log::warn!("query {qid} has no relevant documents; skipped");
            continue;
        }
        per_query.insert(qid.clone(), ndcg_at_k(ranking, &relevant, k)?);
    }
    Ok(per_query)
}

/// Encodes the corpus, retrieves the top `k` documents for each query and
/// scores them. Returns the report (method and dataset left empty) and the
/// run it was computed from.
pub fn evaluate(
    params: &EncoderParams,
    config: &EncoderConfig,
    corpus: &[Document],
    queries: &[Query],
    qrels: &Qrels,
    k: usize,
) -> Result<(EvalReport, RetrievalRun)> {
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput);
    }
    let index = build_index(corpus, params, config)?;
    let mut run = RetrievalRun::new();
    for q in queries {
        let v = encode(params, config, &q.text)?;
        run.insert(q.id.clone(), search_top_k(&index, &v, k)?);
    }
    let per_query = score_run(&run, qrels, k)?;
    if per_query.is_empty() {
        return Err(Error::config("no evaluated query has a relevant document"));
    }
    let report = EvalReport {
        method: String::new(),
        dataset: String::new(),
        k,
        mean: ordered_mean(&per_query),
        per_query,
    };
    Ok((report, run))
}

/// `query_id<TAB>rank<TAB>doc_id<TAB>score`, ranks starting at 1. Scores use
/// the shortest round-trip decimal form.
pub fn run_to_tsv(run: &RetrievalRun) -> String {
    let mut s = String::new();
    for (qid, ranking) in run {
        for (i, (doc, score)) in ranking.iter().enumerate() {
            let _ = writeln!(s, "{qid}\t{}\t{doc}\t{score:?}", i + 1);
        }
    }
    s
}

pub fn run_from_tsv(text: &str) -> Result<RetrievalRun> {
    let mut run = RetrievalRun::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::parse("run", n + 1, m);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let rank: usize = f[1].parse().map_err(|_| bad("bad rank"))?;
        let score: f64 = f[3].parse().map_err(|_| bad("bad score"))?;
        let list = run.entry(f[0].to_string()).or_default();
        if rank != list.len() + 1 {
            return Err(bad("ranks must be consecutive from 1"));
        }
        list.push((f[2].to_string(), score));
    }
    Ok(run)
}

/// One cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub dataset: String,
    /// nDCG in [0, 1]; tables show it ×100.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub markdown: String,
    pub tsv: String,
}

/// Methods as rows (first-seen order), datasets as columns (sorted) plus an
/// average column. Every method must cover the same datasets.
pub fn compare_methods(scores: &[MethodScore]) -> Result<Comparison> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut table: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for s in scores {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
        let row = table.entry(&s.method).or_default();
        if row.insert(&s.dataset, s.value).is_some() {
            return Err(Error::config(format!(
                "duplicate score for {} on {}",
                s.method, s.dataset
            )));
        }
    }
    let datasets: BTreeSet<&str> = table[methods[0]].keys().copied().collect();
    for m in &methods {
        let have: BTreeSet<&str> = table[m].keys().copied().collect();
        if have != datasets {
            return Err(Error::Mismatch {
                context: "compare".into(),
                message: format!("{m} covers {have:?} but {} covers {datasets:?}", methods[0]),
            });
        }
    }
    let rows: Vec<(&str, Vec<f64>)> = methods
        .iter()
        .map(|m| {
            let mut cells: Vec<f64> = datasets.iter().map(|d| table[m][d] * 100.0).collect();
            let avg = cells.iter().sum::<f64>() / cells.len() as f64;
            cells.push(avg);
            (*m, cells)
        })
        .collect();
    let ncols = datasets.len() + 1;
    let best: Vec<String> = (0..ncols)
        .map(|c| {
            format!(
                "{:.2}",
                rows.iter()
                    .map(|r| r.1[c])
                    .fold(f64::NEG_INFINITY, f64::max)
            )
        })
        .collect();

    let mut header: Vec<&str> = datasets.iter().copied().collect();
    header.push("avg");
    let mut md = format!("| method | {} |\n", header.join(" | "));
    let _ = writeln!(md, "|---|{}", "---:|".repeat(ncols));
    let mut tsv = format!("method\t{}\n", header.join("\t"));
    for (m, cells) in &rows {
        let fmt: Vec<String> = cells.iter().map(|v| format!("{v:.2}")).collect();
        let bolded: Vec<String> = fmt
            .iter()
            .zip(&best)
            .map(|(v, b)| {
                if v == b {
                    format!("**{v}**")
                } else {
                    v.clone()
                }
            })
            .collect();
        let _ = writeln!(md, "| {m} | {} |", bolded.join(" | "));
        let _ = writeln!(tsv, "{m}\t{}", fmt.join("\t"));
    }
    Ok(Comparison { markdown: md, tsv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TextRecord;
    use proptest::prelude::*;

    fn ranking(ids: &[&str]) -> RankedList {
        ids.iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), 1.0 - i as f64 * 0.1))
            .collect()
    }

    fn rel<'a>(ids: &[&'a str]) -> HashSet<&'a str> {
        ids.iter().copied().collect()
    }

    #[test]
    fn canonical_cases() {
        let r = ranking(&["a", "b", "c", "d", "e", "f"]);
        assert_eq!(ndcg_at_k(&r, &rel(&["a", "b"]), 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&r, &rel(&["f"]), 5).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&r, &rel(&["c"]), 5).unwrap(), 0.5);
        assert!(ndcg_at_k(&r, &rel(&[]), 5).is_err());
        assert!(ndcg_at_k(&r, &rel(&["a"]), 0).is_err());
        // more relevant docs than k: ideal is k hits
        assert_eq!(
            ndcg_at_k(&r, &rel(&["a", "b", "c", "d", "e", "f", "g"]), 5).unwrap(),
            1.0
        );
    }

    proptest! {
        #[test]
        fn bounded_and_tail_invariant(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
                                      tail in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(),
                                      nrel in 1usize..6) {
            let ids: Vec<String> = perm.iter().map(|i| format!("d{i}")).collect();
            let relevant: HashSet<&str> = (0..nrel).map(|i| ids[(i * 5) % 12].as_str()).collect();
            let r: RankedList = ids.iter().map(|d| (d.clone(), 0.0)).collect();
            let v = ndcg_at_k(&r, &relevant, 5).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let mut r2 = r.clone();
            let below: Vec<_> = tail.iter().map(|&i| r[5 + i].clone()).collect();
            r2.splice(5.., below);
            prop_assert_eq!(ndcg_at_k(&r2, &relevant, 5).unwrap(), v);
            // promoting any relevant doc one rank never lowers the score
            for i in 1..r.len() {
                if relevant.contains(r[i].0.as_str()) {
                    let mut up = r.clone();
                    up.swap(i - 1, i);
                    prop_assert!(ndcg_at_k(&up, &relevant, 5).unwrap() >= v);
                }
            }
        }
    }

    #[test]
    fn verbatim_duplicates_score_one() {
        let cfg = EncoderConfig::default();
        let params = EncoderParams::init(&cfg, 4).unwrap();
        let corpus: Vec<TextRecord> = (0..30)
            .map(|i| TextRecord {
                id: format!("d{i}"),
                text: format!("topic {i} alpha{i} beta{} gamma{}", i * 7, i * 13),
            })
            .collect();
        let queries: Vec<TextRecord> = corpus
            .iter()
            .map(|d| TextRecord {
                id: format!("q-{}", d.id),
                text: d.text.clone(),
            })
            .collect();
        let mut qrels = Qrels::new();
        for d in &corpus {
            qrels.insert(format!("q-{}", d.id), d.id.clone(), 1);
        }
        let (report, run) = evaluate(&params, &cfg, &corpus, &queries, &qrels, 5).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(run.len(), 30);
    }

    #[test]
    fn run_tsv_round_trip_and_mean() {
        let mut run = RetrievalRun::new();
        run.insert("q1".into(), ranking(&["a", "b", "c"]));
        run.insert(
            "q2".into(),
            vec![("x".into(), 0.1 + 0.2), ("a".into(), -1e-300)],
        );
        run.insert("q3".into(), ranking(&["b"]));
        let back = run_from_tsv(&run_to_tsv(&run)).unwrap();
        assert_eq!(back, run);
        let mut qrels = Qrels::new();
        qrels.insert("q1", "b", 1);
        qrels.insert("q2", "a", 1);
        let scores = score_run(&run, &qrels, 5).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores["q1"], 1.0 / 3f64.log2());
        assert_eq!(scores["q2"], 1.0 / 3f64.log2());
        assert!(run_from_tsv("q\t2\ta\t0.5\n").is_err());
    }

    fn ms(m: &str, d: &str, v: f64) -> MethodScore {
        MethodScore {
            method: m.into(),
            dataset: d.into(),
            value: v,
        }
    }

    #[test]
    fn single_cell_table() {
        let c = compare_methods(&[ms("cl", "synthetic", 0.5)]).unwrap();
        assert_eq!(c.tsv, "method\tsynthetic\tavg\ncl\t50.00\t50.00\n");
    }

    #[test]
    fn golden_two_methods() {
        let c = compare_methods(&[
            ms("random-dataset", "a", 0.5292),
            ms("random-dataset", "b", 0.40),
            ms("ance-dataset", "a", 0.5743),
            ms("ance-dataset", "b", 0.3511),
        ])
        .unwrap();
        let md = "| method | a | b | avg |\n\
                  |---|---:|---:|---:|\n\
                  | random-dataset | 52.92 | **40.00** | **46.46** |\n\
                  | ance-dataset | **57.43** | 35.11 | 46.27 |\n";
        assert_eq!(c.markdown, md);
        assert_eq!(
            c.tsv,
            "method\ta\tb\tavg\nrandom-dataset\t52.92\t40.00\t46.46\nance-dataset\t57.43\t35.11\t46.27\n"
        );
    }

    #[test]
    fn mismatched_datasets_rejected() {
        assert!(compare_methods(&[ms("x", "a", 0.1), ms("y", "b", 0.2)]).is_err());
        assert!(compare_methods(&[ms("x", "a", 0.1), ms("x", "a", 0.2)]).is_err());
        assert!(compare_methods(&[]).is_err());
    }
}
