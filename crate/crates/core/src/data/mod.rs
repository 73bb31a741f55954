//! Corpus, query, qrels and training-set files.
//!
//! * `corpus.jsonl` / `queries.jsonl`: `{"id": "...", "text": "..."}` per line
//! * `qrels.tsv`: `query_id<TAB>doc_id<TAB>0|1`, no header
//! * `train.jsonl`: `{"query", "pos", "neg", "neg_queries"?}` per line
//! * `neg_queries.jsonl`: `{"id": doc_id, "queries": [...]}` per line

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synth::{synth_generate, SynthDataset, SynthSpec, SYNTH_FILES};

use crate::error::{Error, Result};

/// A corpus document or a query: an id and its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub type Document = TextRecord;
pub type Query = TextRecord;

/// Binary relevance judgments, keyed by query id. Doc order within a query
/// follows the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, Vec<(String, u8)>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        doc_id: impl Into<String>,
        relevance: u8,
    ) {
        let doc_id = doc_id.into();
        let list = self.judgments.entry(query_id.into()).or_default();
        match list.iter_mut().find(|(d, _)| *d == doc_id) {
            Some(slot) => slot.1 = relevance,
            None => list.push((doc_id, relevance)),
        }
    }

    /// Relevant (relevance 1) doc ids for `query_id`, in file order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|l| {
                l.iter()
                    .filter(|(_, r)| *r > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u8)> {
        self.judgments
            .iter()
            .flat_map(|(q, l)| l.iter().map(move |(d, r)| (q.as_str(), d.as_str(), *r)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Every judged query and document must exist.
    pub fn validate(&self, queries: &[Query], corpus: &[Document]) -> Result<()> {
        let qids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        let dids: HashSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
        for (q, d, _) in self.iter() {
            if !qids.contains(q) {
                return Err(Error::Mismatch {
                    context: "qrels".into(),
                    message: format!("unknown query id {q:?}"),
                });
            }
            if !dids.contains(d) {
                return Err(Error::UnknownDocument(d.to_string()));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, d, r) in self.iter() {
            let _ = writeln!(out, "{q}\t{d}\t{r}");
        }
        out
    }
}

/// One fine-tuning example: a query, its positive passage(s), mined negative
/// passages and optionally each negative's own positive queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    pub pos: Vec<String>,
    pub neg: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_queries: Option<Vec<Vec<String>>>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::config("training example has an empty query"));
        }
        if self.pos.is_empty() {
            return Err(Error::config(
                "training example needs at least one positive",
            ));
        }
        if let Some(nq) = &self.neg_queries {
            if nq.len() != self.neg.len() {
                return Err(Error::config(format!(
                    "neg_queries has {} entries but neg has {}",
                    nq.len(),
                    self.neg.len()
                )));
            }
            if nq.iter().any(Vec::is_empty) {
                return Err(Error::config(
                    "every neg_queries entry needs at least one query",
                ));
            }
        }
        Ok(())
    }
}

/// Negative-query map: for each document, queries it answers.
pub type NegQueryMap = BTreeMap<String, Vec<String>>;

#[derive(Serialize, Deserialize)]
struct NegQueryRecord {
    id: String,
    queries: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_records(path: &Path, text: &str) -> Result<Vec<TextRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in lines(text) {
        let rec: TextRecord =
            serde_json::from_str(raw).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(Error::parse(path, line, "empty id"));
        }
        if rec.text.trim().is_empty() {
            return Err(Error::parse(
                path,
                line,
                format!("empty text for id {:?}", rec.id),
            ));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate id {:?}", rec.id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    parse_records(path, &read(path)?)
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    parse_records(path, &read(path)?)
}

pub fn records_to_jsonl(records: &[TextRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    write(path, &records_to_jsonl(records)?)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = read(path)?;
    let mut qrels = Qrels::new();
    for (line, raw) in lines(&text) {
        let fields: Vec<&str> = raw.split('\t').collect();
        let [q, d, r] = fields[..] else {
            return Err(Error::parse(
                path,
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        };
        let rel = match r.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("relevance must be 0 or 1, got {other:?}"),
                ))
            }
        };
        if q.is_empty() || d.is_empty() {
            return Err(Error::parse(path, line, "empty query or document id"));
        }
        qrels.insert(q, d, rel);
    }
    Ok(qrels)
}

pub fn save_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    write(path, &qrels.to_tsv())
}

pub fn load_train_set(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (line, raw) in lines(&text) {
        let ex: TrainingExample =
            serde_json::from_str(raw).map_err(|e| Error::parse(path, line, e.to_string()))?;
        ex.validate()
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn train_set_to_jsonl(examples: &[TrainingExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_train_set(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    write(path, &train_set_to_jsonl(examples)?)
}

pub fn load_neg_query_map(path: &Path) -> Result<NegQueryMap> {
    let text = read(path)?;
    let mut map = NegQueryMap::new();
    for (line, raw) in lines(&text) {
        let rec: NegQueryRecord =
            serde_json::from_str(raw).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.queries.is_empty() {
            return Err(Error::parse(
                path,
                line,
                format!("document {:?} has no queries", rec.id),
            ));
        }
        if map.insert(rec.id.clone(), rec.queries).is_some() {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate id {:?}", rec.id),
            ));
        }
    }
    Ok(map)
}

pub fn neg_query_map_to_jsonl(map: &NegQueryMap) -> Result<String> {
    let mut out = String::new();
    for (id, queries) in map {
        let rec = NegQueryRecord {
            id: id.clone(),
            queries: queries.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_neg_query_map(path: &Path, map: &NegQueryMap) -> Result<()> {
    write(path, &neg_query_map_to_jsonl(map)?)
}
