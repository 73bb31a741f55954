//! Fine-tuning loop: per-example forward passes, loss gradients,
//! backpropagation into the encoder, gradient accumulation, freeze masks and
//! Adam.

use serde::{Deserialize, Serialize};

use crate::data::TrainingExample;
use crate::encoder::{forward, EncoderConfig, EncoderParams, ForwardPass, TensorKind};
use crate::error::{Error, Result};
use crate::losses::{cl_loss, cl_loss_grad, clp_loss, clp_loss_grad, ContrastiveBatch, LossConfig};
use crate::numerics::Rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cl,
    Clp,
}

/// Which parameters the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Everything trains.
    Full,
    /// Only the intermediate up-projection (dense or every expert copy).
    IntermediateOnly,
    /// Only expert up-projections and the gate; needs MoE.
    MoeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accum_steps: usize,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    pub freeze: FreezeMode,
    pub seed: u64,
    /// Treat negative-query embeddings as constants under CLP.
    pub stop_grad_neg_queries: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 1,
            grad_accum_steps: 4,
            loss: LossKind::Cl,
            loss_cfg: LossConfig::default(),
            freeze: FreezeMode::Full,
            seed: 0,
            stop_grad_neg_queries: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::config("grad_accum_steps must be at least 1"));
        }
        self.loss_cfg.validate()
    }
}

/// Zeroes the gradients of every tensor `mode` keeps frozen.
pub fn apply_freeze(grads: &mut EncoderParams, mode: FreezeMode) -> Result<()> {
    if mode == FreezeMode::MoeOnly && !grads.is_moe() {
        return Err(Error::config(
            "freeze mode moe_only requires an MoE encoder",
        ));
    }
    for (id, t) in grads.tensors_mut() {
        let trainable = match mode {
            FreezeMode::Full => true,
            FreezeMode::IntermediateOnly => id.is_intermediate(),
            FreezeMode::MoeOnly => id.is_intermediate() || id.kind == TensorKind::Gate,
        };
        if !trainable {
            t.fill(0.0);
        }
    }
    Ok(())
}

/// Adam first/second moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: EncoderParams,
    v: EncoderParams,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimizerState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let slots = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in slots {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            if m[i] == 0.0 {
                continue;
            }
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean example loss of each optimizer step, in step order.
    pub loss_trace: Vec<f64>,
}

fn check_dataset(dataset: &[TrainingExample], cfg: &TrainConfig) -> Result<()> {
    for (i, ex) in dataset.iter().enumerate() {
        ex.validate()?;
        if cfg.loss == LossKind::Clp && ex.neg_queries.is_none() {
            return Err(Error::Mismatch {
                context: format!("training example {i}"),
                message: Error::MissingNegativeQueries.to_string(),
            });
        }
    }
    Ok(())
}

fn encode_all(
    params: &EncoderParams,
    config: &EncoderConfig,
    texts: &[String],
) -> Result<Vec<ForwardPass>> {
    texts.iter().map(|t| forward(params, config, t)).collect()
}

/// Loss of one example and accumulation of its parameter gradients.
fn example_step(
    params: &EncoderParams,
    config: &EncoderConfig,
    example: &TrainingExample,
    cfg: &TrainConfig,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let q = forward(params, config, &example.query)?;
    let pos = forward(params, config, &example.pos[0])?;
    let negs = encode_all(params, config, &example.neg)?;
    let neg_queries = match (cfg.loss, &example.neg_queries) {
        (LossKind::Clp, Some(lists)) => Some(
            lists
                .iter()
                .map(|l| encode_all(params, config, l))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let batch = ContrastiveBatch {
        h: q.embedding().to_vec(),
        h_pos: pos.embedding().to_vec(),
        h_negs: negs.iter().map(|p| p.embedding().to_vec()).collect(),
        neg_query_embs: neg_queries.as_ref().map(|ls| {
            ls.iter()
                .map(|l| l.iter().map(|p| p.embedding().to_vec()).collect())
                .collect()
        }),
    };
    let (loss, g) = match cfg.loss {
        LossKind::Cl => (
            cl_loss(&batch, &cfg.loss_cfg)?,
            cl_loss_grad(&batch, &cfg.loss_cfg)?,
        ),
        LossKind::Clp => (
            clp_loss(&batch, &cfg.loss_cfg)?,
            clp_loss_grad(&batch, &cfg.loss_cfg)?,
        ),
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    q.backward(params, &g.h, grads)?;
    pos.backward(params, &g.h_pos, grads)?;
    for (pass, up) in negs.iter().zip(&g.h_negs) {
        pass.backward(params, up, grads)?;
    }
    if let (Some(lists), false) = (&neg_queries, cfg.stop_grad_neg_queries) {
        for (passes, ups) in lists.iter().zip(&g.neg_queries) {
            for (pass, up) in passes.iter().zip(ups) {
                pass.backward(params, up, grads)?;
            }
        }
    }
    Ok(loss)
}

/// Trains for `cfg.epochs` passes over `dataset` (batch size 1, seeded
/// shuffle per epoch). Gradients are averaged over `grad_accum_steps`
/// examples before each optimizer step; a partial window at the end of an
/// epoch is stepped with the average over the examples it holds.
pub fn train(
    params: EncoderParams,
    config: &EncoderConfig,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_refresh(params, config, dataset, cfg, |_, _| Ok(None))
}

/// As [`train`], but `refresh(epoch, params)` runs before every epoch after
/// the first and may return a replacement dataset (re-mined negatives).
pub fn train_with_refresh<F>(
    mut params: EncoderParams,
    config: &EncoderConfig,
    dataset: &[TrainingExample],
    cfg: &TrainConfig,
    mut refresh: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &EncoderParams) -> Result<Option<Vec<TrainingExample>>>,
{
    cfg.validate()?;
    config.validate()?;
    params.check(config)?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    check_dataset(dataset, cfg)?;
    if cfg.freeze == FreezeMode::MoeOnly && !params.is_moe() {
        return Err(Error::config(
            "freeze mode moe_only requires an MoE encoder",
        ));
    }

    let mut data: Vec<TrainingExample> = dataset.to_vec();
    let mut rng = Rng::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut state = OptimizerState::new(&params);
    let mut grads = params.zeros_like();
    let mut trace = Vec::new();

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            if let Some(fresh) = refresh(epoch, &params)? {
                if fresh.is_empty() {
                    return Err(Error::config("refreshed training dataset is empty"));
                }
                check_dataset(&fresh, cfg)?;
                data = fresh;
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);

        let mut pending = 0usize;
        let mut loss_sum = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let loss = example_step(&params, config, &data[i], cfg, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: trace.len(),
                    loss,
                });
            }
            loss_sum += loss;
            pending += 1;
            if pending == cfg.grad_accum_steps || pos + 1 == order.len() {
                grads.scale(1.0 / pending as f64);
                apply_freeze(&mut grads, cfg.freeze)?;
                adam_step(&mut params, &grads, &mut state, cfg.learning_rate);
                grads.fill(0.0);
                trace.push(loss_sum / pending as f64);
                pending = 0;
                loss_sum = 0.0;
            }
        }
    }
    params.check(config)?;
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Loss of a single example under the current parameters, without gradients.
pub fn example_loss(
    params: &EncoderParams,
    config: &EncoderConfig,
    example: &TrainingExample,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut scratch = params.zeros_like();
    example_step(params, config, example, cfg, &mut scratch)
}
