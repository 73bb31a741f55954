//! End-to-end commands behind the `retrieval-lab` binary: configuration
//! layering, presets and the synth / mine / train / eval / compare steps.
//!
//! Configuration is one flat JSON object. Layers are applied in order:
//! built-in defaults, the selected preset, the `--config` file, then
//! command-line flags. Unknown keys are rejected.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{
    load_corpus, load_neg_query_map, load_qrels, load_queries, load_train_set, save_train_set,
    synth_generate, Document, NegQueryMap, Qrels, Query, SynthSpec, TrainingExample, SYNTH_FILES,
};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams, MoEConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_methods, evaluate, run_to_tsv, Comparison, EvalReport, MethodScore,
};
use crate::losses::LossConfig;
use crate::mining::{build_index, mine_ance_negatives, mine_random_negatives, DenseIndex};
use crate::numerics::Rng;
use crate::training::{train_with_refresh, FreezeMode, LossKind, TrainConfig};

const MINE_STREAM: u64 = 2;

pub const PRESETS: [&str; 5] = [
    "random-dataset",
    "ance-dataset",
    "ance-clp",
    "ance-clp-intermediate",
    "ance-clp-moe-intermediate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ance,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Option<String>,
    /// Label used in reports and comparison tables.
    pub method: String,
    pub dataset: String,

    /// Directory holding the standard file names; explicit paths win.
    pub data_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub neg_queries: Option<PathBuf>,
    pub eval_queries: Option<PathBuf>,
    pub eval_qrels: Option<PathBuf>,
    pub train_set: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,

    #[serde(flatten)]
    pub synth: SynthSpec,

    pub vocab_size: usize,
    pub d_model: usize,
    pub d_intermediate: usize,
    /// 0 keeps the intermediate layer dense.
    pub num_experts: usize,
    pub experts_per_token: usize,

    pub strategy: Strategy,
    pub mine_k: usize,
    /// Re-mine ANCE negatives with the current model before each epoch.
    pub refresh: bool,

    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    pub loss: LossKind,
    pub tau: f64,
    pub lambda: f64,
    pub freeze: FreezeMode,
    pub stop_grad_neg_queries: bool,

    pub eval_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let tc = TrainConfig::default();
        Self {
            seed: 42,
            preset: None,
            method: "custom".into(),
            dataset: "synthetic".into(),
            data_dir: None,
            corpus: None,
            queries: None,
            qrels: None,
            neg_queries: None,
            eval_queries: None,
            eval_qrels: None,
            train_set: None,
            checkpoint: None,
            init_checkpoint: None,
            output_dir: PathBuf::from("out"),
            synth: SynthSpec::default(),
            vocab_size: enc.vocab_size,
            d_model: enc.d_model,
            d_intermediate: enc.d_intermediate,
            num_experts: 0,
            experts_per_token: 1,
            strategy: Strategy::Ance,
            mine_k: crate::mining::DEFAULT_NEGATIVES,
            refresh: false,
            learning_rate: tc.learning_rate,
            epochs: tc.epochs,
            grad_accum_steps: tc.grad_accum_steps,
            loss: tc.loss,
            tau: tc.loss_cfg.tau,
            lambda: tc.loss_cfg.lambda,
            freeze: tc.freeze,
            stop_grad_neg_queries: tc.stop_grad_neg_queries,
            eval_k: crate::evaluation::DEFAULT_K,
        }
    }
}

/// Settings a preset fixes: mining strategy, loss, freeze mode and MoE.
pub fn preset_values(name: &str) -> Result<Value> {
    let (strategy, loss, freeze, experts) = match name {
        "random-dataset" => ("random", "cl", "full", 0),
        "ance-dataset" => ("ance", "cl", "full", 0),
        "ance-clp" => ("ance", "clp", "full", 0),
        "ance-clp-intermediate" => ("ance", "clp", "intermediate_only", 0),
        "ance-clp-moe-intermediate" => ("ance", "clp", "moe_only", 2),
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(json!({
        "preset": name,
        "method": name,
        "strategy": strategy,
        "loss": loss,
        "freeze": freeze,
        "num_experts": experts,
    }))
}

fn overlay(
    base: &mut Map<String, Value>,
    layer: &Value,
    origin: &str,
    known: &HashSet<String>,
) -> Result<()> {
    let Value::Object(layer) = layer else {
        return Err(Error::config(format!("{origin}: expected a JSON object")));
    };
    for (k, v) in layer {
        if !known.contains(k) {
            return Err(Error::config(format!("{origin}: unknown key {k:?}")));
        }
        base.insert(k.clone(), v.clone());
    }
    Ok(())
}

impl PipelineConfig {
    /// Layers defaults, preset, config file and flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &Value) -> Result<Self> {
        let Value::Object(mut base) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object")
        };
        let known: HashSet<String> = base.keys().cloned().collect();
        let file_layer = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::parse(p, e.line(), e.to_string()))?
            }
            None => json!({}),
        };
        let preset = overrides
            .get("preset")
            .or_else(|| file_layer.get("preset"))
            .and_then(Value::as_str);
        if let Some(name) = preset {
            overlay(&mut base, &preset_values(name)?, "preset", &known)?;
        }
        let file_origin = file.map(|p| p.display().to_string()).unwrap_or_default();
        overlay(&mut base, &file_layer, &file_origin, &known)?;
        overlay(&mut base, overrides, "command line", &known)?;
        let cfg: Self = serde_json::from_value(Value::Object(base))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.train_config().validate()?;
        if self.mine_k == 0 {
            return Err(Error::config("mine_k must be positive"));
        }
        if self.eval_k == 0 {
            return Err(Error::config("eval_k must be positive"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            d_intermediate: self.d_intermediate,
            moe: (self.num_experts > 0).then_some(MoEConfig {
                num_experts: self.num_experts,
                experts_per_token: self.experts_per_token,
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            grad_accum_steps: self.grad_accum_steps,
            loss: self.loss,
            loss_cfg: LossConfig {
                tau: self.tau,
                lambda: self.lambda,
            },
            freeze: self.freeze,
            seed: self.seed,
            stop_grad_neg_queries: self.stop_grad_neg_queries,
        }
    }

    /// Explicit path, else `data_dir/default_name`.
    fn input(&self, explicit: &Option<PathBuf>, key: &str, default_name: &str) -> Result<PathBuf> {
        let p = match (explicit, &self.data_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(default_name),
            (None, None) => {
                return Err(Error::config(format!(
                    "no {key} path configured (set {key} or data_dir)"
                )))
            }
        };
        if !p.is_file() {
            return Err(Error::config(format!(
                "{key} file {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Like [`Self::input`], but a missing default file is not an error.
    fn optional_input(
        &self,
        explicit: &Option<PathBuf>,
        key: &str,
        default_name: &str,
    ) -> Result<Option<PathBuf>> {
        if explicit.is_some() {
            return self.input(explicit, key, default_name).map(Some);
        }
        Ok(self
            .data_dir
            .as_ref()
            .map(|d| d.join(default_name))
            .filter(|p| p.is_file()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::data::write(path, text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Generates the synthetic benchmark into `output_dir` together with a
/// `synth_manifest.json` of file hashes.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let ds = synth_generate(&cfg.synth, cfg.seed)?;
    ds.write(&cfg.output_dir)?;
    let mut hashes = BTreeMap::new();
    for name in SYNTH_FILES {
        hashes.insert(name.to_string(), sha256_file(&cfg.output_dir.join(name))?);
    }
    write_json(
        &cfg.output_dir.join("synth_manifest.json"),
        &json!({ "seed": cfg.seed, "spec": cfg.synth, "files": hashes }),
    )?;
    log::info!(
        "wrote {} documents to {}",
        ds.corpus.len(),
        cfg.output_dir.display()
    );
    Ok(hashes)
}

/// Builds the initial encoder: an explicit checkpoint, or a fresh dense model
/// for the seed, upcycled to MoE when configured.
pub fn initial_params(cfg: &PipelineConfig) -> Result<EncoderParams> {
    let want = cfg.encoder_config();
    let Some(path) = &cfg.init_checkpoint else {
        return EncoderParams::init(&want, cfg.seed);
    };
    let (have, params) = load_checkpoint(path)?;
    let same_dims = have.vocab_size == want.vocab_size
        && have.d_model == want.d_model
        && have.d_intermediate == want.d_intermediate;
    if !same_dims {
        return Err(Error::Mismatch {
            context: path.display().to_string(),
            message: format!("checkpoint shape {have:?} does not match configured {want:?}"),
        });
    }
    match (&have.moe, &want.moe) {
        (None, Some(moe)) => params.upcycle(moe, cfg.seed),
        (a, b) if a == b => Ok(params),
        _ => Err(Error::Mismatch {
            context: path.display().to_string(),
            message: format!(
                "checkpoint MoE settings {:?} differ from configured {:?}",
                have.moe, want.moe
            ),
        }),
    }
}

/// Inputs needed to mine negatives.
pub struct MiningInputs {
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub neg_queries: Option<NegQueryMap>,
}

impl MiningInputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let corpus = load_corpus(&cfg.input(&cfg.corpus, "corpus", "corpus.jsonl")?)?;
        let queries = load_queries(&cfg.input(&cfg.queries, "queries", "queries.jsonl")?)?;
        let qrels = load_qrels(&cfg.input(&cfg.qrels, "qrels", "qrels.tsv")?)?;
        let neg_queries =
            match cfg.optional_input(&cfg.neg_queries, "neg_queries", "neg_queries.jsonl")? {
                Some(p) => Some(load_neg_query_map(&p)?),
                None => None,
            };
        Ok(Self {
            corpus,
            queries,
            qrels,
            neg_queries,
        })
    }
}

/// One training example per query with at least one relevant document. The
/// first relevant document is the mining anchor; every relevant document is
/// a positive and none is ever a negative.
pub fn mine_training_set(
    inputs: &MiningInputs,
    params: &EncoderParams,
    config: &EncoderConfig,
    strategy: Strategy,
    k: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let texts: BTreeMap<&str, &str> = inputs
        .corpus
        .iter()
        .map(|d| (d.id.as_str(), d.text.as_str()))
        .collect();
    let corpus_ids: Vec<String> = inputs.corpus.iter().map(|d| d.id.clone()).collect();
    let index: Option<DenseIndex> = match strategy {
        Strategy::Ance => Some(build_index(&inputs.corpus, params, config)?),
        Strategy::Random => None,
    };
    let mut rng = Rng::with_stream(seed, MINE_STREAM);
    let mut out = Vec::new();
    let mut missing_neg_queries = 0usize;
    for q in &inputs.queries {
        let relevant = inputs.qrels.relevant(&q.id);
        let Some(&anchor) = relevant.first() else {
            log::warn!("query {} has no relevant documents; skipped", q.id);
            continue;
        };
        let mut pos = Vec::with_capacity(relevant.len());
        for id in &relevant {
            let text = texts.get(id).ok_or_else(|| Error::Mismatch {
                context: format!("query {}", q.id),
                message: format!("positive document {id:?} is not in the corpus"),
            })?;
            pos.push(text.to_string());
        }
        let extra = relevant.len() - 1;
        let candidates = match &index {
            Some(index) => mine_ance_negatives(index, params, config, &q.text, anchor, k + extra)?,
            None => mine_random_negatives(&corpus_ids, anchor, k + extra, &mut rng),
        };
        let neg_ids: Vec<String> = candidates
            .into_iter()
            .filter(|id| !relevant.contains(&id.as_str()))
            .take(k)
            .collect();
        let neg_queries = inputs.neg_queries.as_ref().and_then(|map| {
            let lists: Option<Vec<Vec<String>>> = neg_ids
                .iter()
                .map(|id| map.get(id).filter(|l| !l.is_empty()).cloned())
                .collect();
            if lists.is_none() {
                missing_neg_queries += 1;
            }
            lists
        });
        out.push(TrainingExample {
            query: q.text.clone(),
            pos,
            neg: neg_ids
                .iter()
                .map(|id| texts[id.as_str()].to_string())
                .collect(),
            neg_queries,
        });
    }
    if missing_neg_queries > 0 {
        log::warn!("{missing_neg_queries} examples have a negative without queries; neg_queries omitted for them");
    }
    if out.is_empty() {
        return Err(Error::config(
            "no query has a relevant document; nothing to mine",
        ));
    }
    Ok(out)
}

/// Mines negatives with the initial encoder and writes `train.jsonl`.
pub fn cmd_mine(cfg: &PipelineConfig) -> Result<Vec<TrainingExample>> {
    let inputs = MiningInputs::load(cfg)?;
    let params = initial_params(cfg)?;
    let set = mine_training_set(
        &inputs,
        &params,
        &cfg.encoder_config(),
        cfg.strategy,
        cfg.mine_k,
        cfg.seed,
    )?;
    save_train_set(&cfg.output_dir.join("train.jsonl"), &set)?;
    log::info!("mined {} training examples", set.len());
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub eval_k: usize,
    pub ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    /// sha256 of the training-set file.
    pub dataset_hash: String,
    pub config: PipelineConfig,
    /// Relative to the manifest's directory.
    pub loss_trace: String,
    pub checkpoint: String,
    pub final_metrics: FinalMetrics,
}

pub struct TrainResult {
    pub params: EncoderParams,
    pub loss_trace: Vec<f64>,
    pub manifest: RunManifest,
}

fn eval_inputs(cfg: &PipelineConfig) -> Result<Option<(Vec<Document>, Vec<Query>, Qrels)>> {
    let q = cfg.optional_input(&cfg.eval_queries, "eval_queries", "eval_queries.jsonl")?;
    let r = cfg.optional_input(&cfg.eval_qrels, "eval_qrels", "eval_qrels.tsv")?;
    let c = cfg.optional_input(&cfg.corpus, "corpus", "corpus.jsonl")?;
    match (q, r, c) {
        (Some(q), Some(r), Some(c)) => {
            Ok(Some((load_corpus(&c)?, load_queries(&q)?, load_qrels(&r)?)))
        }
        _ => Ok(None),
    }
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{l:?}", i + 1);
    }
    s
}

/// Trains on the mined set and writes `checkpoint.json`, `loss_trace.csv`
/// and `manifest.json`. When evaluation files are available the manifest
/// also records nDCG on them.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainResult> {
    let train_path = cfg.input(&cfg.train_set, "train_set", "train.jsonl")?;
    let dataset = load_train_set(&train_path)?;
    let dataset_hash = sha256_file(&train_path)?;
    let enc = cfg.encoder_config();
    let params = initial_params(cfg)?;
    let refresh_inputs = match (cfg.refresh, cfg.strategy) {
        (true, Strategy::Ance) => Some(MiningInputs::load(cfg)?),
        (true, Strategy::Random) => {
            log::warn!("refresh has no effect with random negatives");
            None
        }
        _ => None,
    };
    let outcome = train_with_refresh(
        params,
        &enc,
        &dataset,
        &cfg.train_config(),
        |epoch, current| {
            let Some(inputs) = &refresh_inputs else {
                return Ok(None);
            };
            log::info!("re-mining negatives before epoch {epoch}");
            mine_training_set(inputs, current, &enc, Strategy::Ance, cfg.mine_k, cfg.seed).map(Some)
        },
    )?;

    let ndcg = match eval_inputs(cfg)? {
        Some((corpus, queries, qrels)) => Some(
            evaluate(&outcome.params, &enc, &corpus, &queries, &qrels, cfg.eval_k)?
                .0
                .mean,
        ),
        None => None,
    };
    let out = &cfg.output_dir;
    save_checkpoint(&out.join("checkpoint.json"), &enc, &outcome.params)?;
    write_text(
        &out.join("loss_trace.csv"),
        &loss_trace_csv(&outcome.loss_trace),
    )?;
    let manifest = RunManifest {
        method: cfg.method.clone(),
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        dataset_hash,
        config: cfg.clone(),
        loss_trace: "loss_trace.csv".into(),
        checkpoint: "checkpoint.json".into(),
        final_metrics: FinalMetrics {
            steps: outcome.loss_trace.len(),
            final_loss: outcome.loss_trace.last().copied(),
            eval_k: cfg.eval_k,
            ndcg,
        },
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(TrainResult {
        params: outcome.params,
        loss_trace: outcome.loss_trace,
        manifest,
    })
}

/// Evaluates `checkpoint` on the evaluation split (or on the training
/// queries when no evaluation split is configured) and writes `run.tsv`,
/// `report.json` and `report.md`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalReport> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval needs a checkpoint path (set checkpoint)"))?;
    if !ckpt.is_file() {
        return Err(Error::config(format!(
            "checkpoint file {} does not exist",
            ckpt.display()
        )));
    }
    let (enc, params) = load_checkpoint(ckpt)?;
    let (corpus, queries, qrels) = match eval_inputs(cfg)? {
        Some(inputs) => inputs,
        None => {
            log::warn!("no eval split found; scoring the training queries");
            (
                load_corpus(&cfg.input(&cfg.corpus, "corpus", "corpus.jsonl")?)?,
                load_queries(&cfg.input(&cfg.queries, "queries", "queries.jsonl")?)?,
                load_qrels(&cfg.input(&cfg.qrels, "qrels", "qrels.tsv")?)?,
            )
        }
    };
    let (mut report, run) = evaluate(&params, &enc, &corpus, &queries, &qrels, cfg.eval_k)?;
    report.method = cfg.method.clone();
    report.dataset = cfg.dataset.clone();
    let out = &cfg.output_dir;
    write_text(&out.join("run.tsv"), &run_to_tsv(&run))?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    write_text(&out.join("report.md"), &report.to_markdown())?;
    log::info!("mean nDCG@{} = {:.4}", report.k, report.mean);
    Ok(report)
}

/// Reads one score from an evaluation report or a training manifest.
pub fn load_method_score(path: &Path) -> Result<MethodScore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    if v.get("per_query").is_some() {
        let r: EvalReport = serde_json::from_value(v)?;
        return Ok(MethodScore {
            method: r.method,
            dataset: r.dataset,
            value: r.mean,
        });
    }
    let m: RunManifest =
        serde_json::from_value(v).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let value = m.final_metrics.ndcg.ok_or_else(|| Error::Mismatch {
        context: path.display().to_string(),
        message: "manifest has no nDCG (train without evaluation files)".into(),
    })?;
    Ok(MethodScore {
        method: m.method,
        dataset: m.dataset,
        value,
    })
}

/// Writes `comparison.md` and `comparison.tsv` from reports or manifests.
pub fn cmd_compare(cfg: &PipelineConfig, inputs: &[PathBuf]) -> Result<Comparison> {
    if inputs.is_empty() {
        return Err(Error::config(
            "compare needs at least one report or manifest",
        ));
    }
    let scores = inputs
        .iter()
        .map(|p| load_method_score(p))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_methods(&scores)?;
    write_text(&cfg.output_dir.join("comparison.md"), &table.markdown)?;
    write_text(&cfg.output_dir.join("comparison.tsv"), &table.tsv)?;
    Ok(table)
}
