//! Contrastive loss and the contrastive-learning-penalty loss, with analytic
//! gradients with respect to every embedding in the batch.
//!
//! With scores `s = [sim(h, h⁺), sim(h, h′₁), …]` the contrastive term is
//! `−log softmax(s/τ)[0]`. The penalized loss is
//! `(1 − λ)·CL + λ·penalty` where
//! `penalty = mean_j (1 − mean_m sim(h′ⱼ, h*ⱼₘ))`: it grows as a negative
//! document drifts away from its own positive queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine_similarity, cosine_similarity_grad, log_sum_exp_temperature, softmax_temperature, Vec64,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Embeddings for one training example. Vectors need not be unit norm; every
/// score is a cosine.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub h: Vec64,
    pub h_pos: Vec64,
    pub h_negs: Vec<Vec64>,
    /// Per negative, embeddings of that negative's own positive queries.
    pub neg_query_embs: Option<Vec<Vec<Vec64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub h: Vec64,
    pub h_pos: Vec64,
    pub h_negs: Vec<Vec64>,
    /// Same layout as `neg_query_embs`; empty lists when the loss has no
    /// penalty term.
    pub neg_queries: Vec<Vec<Vec64>>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let d = self.h.len();
        let check = |v: &Vec64| {
            if v.len() != d {
                Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            } else {
                Ok(())
            }
        };
        check(&self.h_pos)?;
        self.h_negs.iter().try_for_each(check)?;
        if let Some(nq) = &self.neg_query_embs {
            if nq.len() != self.h_negs.len() {
                return Err(Error::InvalidBatch(format!(
                    "{} negative-query lists for {} negatives",
                    nq.len(),
                    self.h_negs.len()
                )));
            }
            for list in nq {
                list.iter().try_for_each(check)?;
            }
        }
        Ok(())
    }

    fn scores(&self) -> Result<Vec64> {
        std::iter::once(&self.h_pos)
            .chain(&self.h_negs)
            .map(|c| cosine_similarity(&self.h, c))
            .collect()
    }

    fn penalty_lists(&self) -> Result<&[Vec<Vec64>]> {
        let lists = self
            .neg_query_embs
            .as_deref()
            .ok_or(Error::MissingNegativeQueries)?;
        if lists.iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidBatch(
                "every negative needs at least one query embedding".into(),
            ));
        }
        Ok(lists)
    }

    fn zero_grads(&self) -> ContrastiveGrads {
        let d = self.h.len();
        ContrastiveGrads {
            h: vec![0.0; d],
            h_pos: vec![0.0; d],
            h_negs: vec![vec![0.0; d]; self.h_negs.len()],
            neg_queries: self
                .neg_query_embs
                .as_ref()
                .map(|nq| nq.iter().map(|l| vec![vec![0.0; d]; l.len()]).collect())
                .unwrap_or_default(),
        }
    }
}

/// `−log(exp(s⁺/τ) / Σ exp(s/τ))` over the positive and the example's own
/// negatives. Negative-query embeddings are ignored.
pub fn cl_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    batch.validate()?;
    let scores = batch.scores()?;
    Ok(log_sum_exp_temperature(&scores, cfg.tau)? - scores[0] / cfg.tau)
}

/// `mean_j (1 − mean_m sim(h′ⱼ, h*ⱼₘ))`, in `[0, 2]`. Zero negatives give 0.
pub fn clp_penalty(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let lists = batch.penalty_lists()?;
    if lists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (neg, queries) in batch.h_negs.iter().zip(lists) {
        let mut sim = 0.0;
        for q in queries {
            sim += cosine_similarity(neg, q)?;
        }
        total += 1.0 - sim / queries.len() as f64;
    }
    Ok(total / lists.len() as f64)
}

/// `(1 − λ)·cl_loss + λ·penalty`.
pub fn clp_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let penalty = clp_penalty(batch)?;
    let cl = cl_loss(batch, cfg)?;
    Ok((1.0 - cfg.lambda) * cl + cfg.lambda * penalty)
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn accumulate_cl_grads(
    batch: &ContrastiveBatch,
    tau: f64,
    weight: f64,
    grads: &mut ContrastiveGrads,
) -> Result<()> {
    let scores = batch.scores()?;
    let probs = softmax_temperature(&scores, tau)?;
    for (k, cand) in std::iter::once(&batch.h_pos)
        .chain(&batch.h_negs)
        .enumerate()
    {
        let target = if k == 0 { 1.0 } else { 0.0 };
        let d_score = weight * (probs[k] - target) / tau;
        let (dh, dc) = cosine_similarity_grad(&batch.h, cand)?;
        add_scaled(&mut grads.h, &dh, d_score);
        let slot = if k == 0 {
            &mut grads.h_pos
        } else {
            &mut grads.h_negs[k - 1]
        };
        add_scaled(slot, &dc, d_score);
    }
    Ok(())
}

fn accumulate_penalty_grads(
    batch: &ContrastiveBatch,
    weight: f64,
    grads: &mut ContrastiveGrads,
) -> Result<()> {
    let lists = batch.penalty_lists()?;
    if lists.is_empty() {
        return Ok(());
    }
    let per_neg = weight / lists.len() as f64;
    for (j, (neg, queries)) in batch.h_negs.iter().zip(lists).enumerate() {
        let coeff = -per_neg / queries.len() as f64;
        for (m, q) in queries.iter().enumerate() {
            let (dn, dq) = cosine_similarity_grad(neg, q)?;
            add_scaled(&mut grads.h_negs[j], &dn, coeff);
            add_scaled(&mut grads.neg_queries[j][m], &dq, coeff);
        }
    }
    Ok(())
}

pub fn cl_loss_grad(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<ContrastiveGrads> {
    cfg.validate()?;
    batch.validate()?;
    let mut grads = batch.zero_grads();
    accumulate_cl_grads(batch, cfg.tau, 1.0, &mut grads)?;
    Ok(grads)
}

/// Gradients of [`clp_loss`]. Each negative collects contributions from the
/// contrastive term and from the penalty term.
pub fn clp_loss_grad(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<ContrastiveGrads> {
    cfg.validate()?;
    batch.validate()?;
    batch.penalty_lists()?;
    let mut grads = batch.zero_grads();
    if cfg.lambda < 1.0 {
        accumulate_cl_grads(batch, cfg.tau, 1.0 - cfg.lambda, &mut grads)?;
    }
    if cfg.lambda > 0.0 {
        accumulate_penalty_grads(batch, cfg.lambda, &mut grads)?;
    }
    Ok(grads)
}
