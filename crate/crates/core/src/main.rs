use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use retrieval_lab::data::TrainingExample;
use retrieval_lab::pipeline::{
    cmd_compare, cmd_eval, cmd_mine, cmd_synth, cmd_train, PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "retrieval-lab",
    version,
    about = "Fine-tune and evaluate a small dense retriever"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clustered benchmark
    Synth(Common),
    /// Mine negatives and write train.jsonl
    Mine(Common),
    /// Fine-tune the encoder and write a checkpoint and run manifest
    Train(Common),
    /// Score a checkpoint and write the run dump and report
    Eval(Common),
    /// Build a comparison table from reports or manifests
    Compare {
        #[command(flatten)]
        common: Common,
        /// report.json or manifest.json files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// One flag per config key.
#[derive(Args, Serialize, Default)]
struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// random-dataset | ance-dataset | ance-clp | ance-clp-intermediate | ance-clp-moe-intermediate
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    queries: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    qrels: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_queries: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_queries: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_qrels: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_set: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    init_checkpoint: Option<PathBuf>,
    #[arg(long, short = 'o')]
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_clusters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    docs_per_cluster: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    queries_per_cluster: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_queries_per_cluster: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_per_cluster: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    paraphrase_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    doc_length: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    query_length: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_queries_per_doc: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_vocab_size: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_model: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    d_intermediate: Option<usize>,
    /// 0 keeps the intermediate layer dense
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    num_experts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    experts_per_token: Option<usize>,

    /// ance | random
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    strategy: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mine_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    refresh: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_accum_steps: Option<usize>,
    /// cl | clp
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    /// full | intermediate_only | moe_only
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    freeze: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_grad_neg_queries: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_k: Option<usize>,
}

fn resolve(common: &Common) -> anyhow::Result<PipelineConfig> {
    let overrides = serde_json::to_value(&common.overrides)?;
    Ok(PipelineConfig::resolve(
        common.config.as_deref(),
        &overrides,
    )?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let hashes = cmd_synth(&resolve(&c)?)?;
            for (name, h) in hashes {
                println!("{h}  {name}");
            }
        }
        Command::Mine(c) => {
            let set: Vec<TrainingExample> = cmd_mine(&resolve(&c)?)?;
            println!("{} training examples", set.len());
        }
        Command::Train(c) => {
            let r = cmd_train(&resolve(&c)?)?;
            let m = &r.manifest.final_metrics;
            println!("{} optimizer steps, final loss {:?}", m.steps, m.final_loss);
            if let Some(n) = m.ndcg {
                println!("nDCG@{} = {n:.4}", m.eval_k);
            }
        }
        Command::Eval(c) => {
            let report = cmd_eval(&resolve(&c)?)?;
            println!(
                "nDCG@{} = {:.4} over {} queries",
                report.k,
                report.mean,
                report.per_query.len()
            );
        }
        Command::Compare { common, inputs } => {
            print!("{}", cmd_compare(&resolve(&common)?, &inputs)?.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
