//! Helpers shared by the integration and acceptance tests: central finite
//! differences, random instances and an independent brute-force ranker.

#![allow(dead_code)]

use retrieval_lab::encoder::{encode, encode_with_grad, EncoderConfig, EncoderParams, MoEConfig};
use retrieval_lab::losses::{
    cl_loss, cl_loss_grad, clp_loss, clp_loss_grad, ContrastiveBatch, ContrastiveGrads, LossConfig,
};
use retrieval_lab::numerics::{cosine_similarity, cosine_similarity_grad, Rng};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// max |a − n| / max(‖a‖∞, ‖n‖∞): the worst coordinate error measured
/// against the gradient's overall scale.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-300, f64::max);
    diff / scale
}

pub fn random_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.symmetric(1.0)).collect()
}

pub fn random_batch(
    rng: &mut Rng,
    dim: usize,
    negs: usize,
    queries_per_neg: usize,
) -> ContrastiveBatch {
    ContrastiveBatch {
        h: random_vec(rng, dim),
        h_pos: random_vec(rng, dim),
        h_negs: (0..negs).map(|_| random_vec(rng, dim)).collect(),
        neg_query_embs: Some(
            (0..negs)
                .map(|_| (0..queries_per_neg).map(|_| random_vec(rng, dim)).collect())
                .collect(),
        ),
    }
}

fn flatten_batch(b: &ContrastiveBatch) -> Vec<f64> {
    let mut v = b.h.clone();
    v.extend_from_slice(&b.h_pos);
    b.h_negs.iter().for_each(|n| v.extend_from_slice(n));
    for list in b.neg_query_embs.iter().flatten() {
        list.iter().for_each(|q| v.extend_from_slice(q));
    }
    v
}

fn unflatten_batch(template: &ContrastiveBatch, flat: &[f64]) -> ContrastiveBatch {
    let mut out = template.clone();
    let mut it = flat.iter().copied();
    let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|x| *x = it.next().unwrap());
    fill(&mut out.h);
    fill(&mut out.h_pos);
    out.h_negs.iter_mut().for_each(&mut fill);
    for list in out.neg_query_embs.iter_mut().flatten() {
        list.iter_mut().for_each(&mut fill);
    }
    out
}

fn flatten_grads(g: &ContrastiveGrads, with_queries: bool) -> Vec<f64> {
    let mut v = g.h.clone();
    v.extend_from_slice(&g.h_pos);
    g.h_negs.iter().for_each(|n| v.extend_from_slice(n));
    if with_queries {
        for list in &g.neg_queries {
            list.iter().for_each(|q| v.extend_from_slice(q));
        }
    }
    v
}

/// Relative error of `cl_loss_grad` on one random instance.
pub fn check_cl(seed: u64, dim: usize, negs: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let mut batch = random_batch(&mut rng, dim, negs, 1);
    batch.neg_query_embs = None;
    let cfg = LossConfig::default();
    let analytic = flatten_grads(&cl_loss_grad(&batch, &cfg).unwrap(), false);
    let x = flatten_batch(&batch);
    let numeric = numeric_grad(
        |p| cl_loss(&unflatten_batch(&batch, p), &cfg).unwrap(),
        &x,
        FD_STEP,
    );
    rel_error(&analytic, &numeric)
}

/// Relative error of `clp_loss_grad` on one random instance, including the
/// negative-query embeddings.
pub fn check_clp(seed: u64, dim: usize, negs: usize, queries_per_neg: usize, lambda: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let batch = random_batch(&mut rng, dim, negs, queries_per_neg);
    let cfg = LossConfig { tau: 0.05, lambda };
    let analytic = flatten_grads(&clp_loss_grad(&batch, &cfg).unwrap(), true);
    let x = flatten_batch(&batch);
    let numeric = numeric_grad(
        |p| clp_loss(&unflatten_batch(&batch, p), &cfg).unwrap(),
        &x,
        FD_STEP,
    );
    rel_error(&analytic, &numeric)
}

/// Relative error of `cosine_similarity_grad` with respect to both inputs.
pub fn check_cosine(seed: u64, dim: usize) -> f64 {
    let mut rng = Rng::new(seed);
    let a = random_vec(&mut rng, dim);
    let b = random_vec(&mut rng, dim);
    let (da, db) = cosine_similarity_grad(&a, &b).unwrap();
    let mut analytic = da;
    analytic.extend(db);
    let mut x = a.clone();
    x.extend_from_slice(&b);
    let numeric = numeric_grad(
        |p| cosine_similarity(&p[..dim], &p[dim..]).unwrap(),
        &x,
        FD_STEP,
    );
    rel_error(&analytic, &numeric)
}

pub fn small_config(dim: usize, moe: bool) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 64,
        d_model: dim,
        d_intermediate: 4 * dim,
        moe: moe.then(MoEConfig::default),
    }
}

pub fn random_text(rng: &mut Rng, max_words: usize) -> String {
    let n = 1 + rng.below(max_words);
    (0..n)
        .map(|_| format!("w{}", rng.below(500)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Initialized parameters with every entry jittered, so biases are nonzero
/// and upcycled experts differ.
pub fn jittered_params(config: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut params = EncoderParams::init(config, seed).unwrap();
    let mut rng = Rng::with_stream(seed, 99);
    for (_, t) in params.tensors_mut() {
        t.iter_mut().for_each(|x| *x += rng.symmetric(0.2));
    }
    params
}

fn flatten_params(p: &EncoderParams) -> Vec<f64> {
    p.tensors()
        .into_iter()
        .flat_map(|(_, t)| t.to_vec())
        .collect()
}

fn params_from(template: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let mut p = template.clone();
    let mut it = flat.iter().copied();
    for (_, t) in p.tensors_mut() {
        t.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    p
}

/// Relative error of `encode_with_grad` for `upstreamᵀ·encode(text)` over
/// every parameter.
pub fn check_encoder(seed: u64, dim: usize, moe: bool) -> f64 {
    let config = small_config(dim, moe);
    let params = jittered_params(&config, seed);
    let mut rng = Rng::with_stream(seed, 7);
    let text = random_text(&mut rng, 6);
    let upstream = random_vec(&mut rng, dim);
    let analytic = flatten_params(&encode_with_grad(&params, &config, &text, &upstream).unwrap());
    let x = flatten_params(&params);
    let objective = |p: &[f64]| {
        let e = encode(&params_from(&params, p), &config, &text).unwrap();
        e.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    rel_error(&analytic, &numeric_grad(objective, &x, FD_STEP))
}

/// Full sort of every document by cosine score, descending, ties broken by
/// ascending id. Written without the library's index or selection code.
pub fn brute_force_ranking(query: &[f64], docs: &[(String, Vec<f64>)]) -> Vec<(String, f64)> {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let q = unit(query);
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, v)| {
            let d = unit(v);
            let mut s = 0.0;
            for i in 0..d.len() {
                s += q[i] * d[i];
            }
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
