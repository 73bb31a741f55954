//! Toy text encoder with an explicit intermediate up-projection.
//!
//! Per token `t`: `x = E[t]`, `h = relu(x·W_up + b_up)` (or the routed MoE
//! expert, scaled by its gate probability), `y = h·W_down + b_down + x`.
//! The text embedding is the L2-normalized mean of `y` over tokens.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{EncoderParams, Expert, Intermediate, TensorId, TensorKind};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, norm, softmax_temperature, Vec64, NORM_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub experts_per_token: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 2,
            experts_per_token: 1,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("num_experts must be at least 1"));
        }
        if self.experts_per_token > self.num_experts {
            return Err(Error::config(format!(
                "experts_per_token ({}) exceeds num_experts ({})",
                self.experts_per_token, self.num_experts
            )));
        }
        if self.experts_per_token != 1 {
            return Err(Error::Unsupported(format!(
                "experts_per_token = {} (only top-1 routing is implemented)",
                self.experts_per_token
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_intermediate: usize,
    #[serde(default)]
    pub moe: Option<MoEConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d_model: 64,
            d_intermediate: 256,
            moe: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model must be positive"));
        }
        if self.d_intermediate < self.d_model {
            return Err(Error::config(format!(
                "d_intermediate ({}) must be >= d_model ({})",
                self.d_intermediate, self.d_model
            )));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }
}

/// 64-bit FNV-1a over the token's UTF-8 bytes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases `text`, splits it into maximal runs of alphanumeric characters
/// (whitespace and punctuation are separators) and hashes each run into
/// `0..vocab_size` with FNV-1a.
pub fn tokenize(text: &str, config: &EncoderConfig) -> Vec<usize> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a(w.as_bytes()) % config.vocab_size as u64) as usize)
        .collect()
}

/// Result of routing one token through the MoE intermediate layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub h: Vec64,
    pub route: usize,
    pub gate_prob: f64,
    /// Full gate distribution over experts.
    pub probs: Vec64,
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn up_projection(expert: &Expert, x: &[f64]) -> Vec64 {
    let mut u = expert.w_up.left_mul(x);
    for (ui, bi) in u.iter_mut().zip(&expert.b_up) {
        *ui += bi;
    }
    u
}

/// Top-1 routed intermediate layer for a single token vector `x`.
///
/// Gate logits are `x·gate`, probabilities their softmax at temperature 1.
/// The highest-probability expert wins (ties go to the lowest index) and
/// only that expert is evaluated; its ReLU output is scaled by its gate
/// probability.
pub fn moe_intermediate_forward(
    x: &[f64],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<MoeOutput> {
    let (Intermediate::Moe { experts, gate }, Some(_)) = (&params.intermediate, &config.moe) else {
        return Err(Error::MoeDisabled);
    };
    if x.len() != config.d_model {
        return Err(Error::DimensionMismatch {
            expected: config.d_model,
            got: x.len(),
        });
    }
    let (route, probs) = gate_route(gate, x)?;
    let gate_prob = probs[route];
    let mut h = up_projection(&experts[route], x);
    relu_in_place(&mut h);
    for v in h.iter_mut() {
        *v *= gate_prob;
    }
    Ok(MoeOutput {
        h,
        route,
        gate_prob,
        probs,
    })
}

fn gate_route(gate: &crate::numerics::Mat64, x: &[f64]) -> Result<(usize, Vec64)> {
    let logits = gate.left_mul(x);
    let probs = softmax_temperature(&logits, 1.0)?;
    let mut route = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[route] {
            route = i;
        }
    }
    Ok((route, probs))
}

#[derive(Debug, Clone)]
struct TokenTrace {
    id: usize,
    /// Pre-activation of the evaluated up-projection.
    u: Vec64,
    /// Post-activation intermediate output (gate-scaled under MoE).
    h: Vec64,
    route: Option<(usize, Vec64)>,
}

/// Cached forward pass of one text, enough to backpropagate without
/// recomputing activations.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    tokens: Vec<TokenTrace>,
    pool_norm: f64,
    output: Vec64,
}

impl ForwardPass {
    pub fn embedding(&self) -> &[f64] {
        &self.output
    }

    pub fn into_embedding(self) -> Vec64 {
        self.output
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Expert chosen for each token, `None` for a dense encoder.
    pub fn routes(&self) -> Vec<Option<usize>> {
        self.tokens
            .iter()
            .map(|t| t.route.as_ref().map(|r| r.0))
            .collect()
    }

    /// Accumulates `∂(upstreamᵀ·output)/∂θ` into `grads`.
    pub fn backward(
        &self,
        params: &EncoderParams,
        upstream: &[f64],
        grads: &mut EncoderParams,
    ) -> Result<()> {
        let d = self.output.len();
        if upstream.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: upstream.len(),
            });
        }
        if upstream.iter().all(|g| *g == 0.0) {
            return Ok(());
        }
        // through the final normalization
        let along = dot(upstream, &self.output);
        let inv_tokens = 1.0 / self.tokens.len() as f64;
        let g_y: Vec64 = upstream
            .iter()
            .zip(&self.output)
            .map(|(g, o)| (g - along * o) / self.pool_norm * inv_tokens)
            .collect();
        let g_h_shared = params.w_down.right_mul(&g_y);

        for tok in &self.tokens {
            for (b, g) in grads.b_down.iter_mut().zip(&g_y) {
                *b += g;
            }
            grads.w_down.add_outer(&tok.h, &g_y);

            let x = params.embedding.row(tok.id);
            let mut g_x = g_y.clone();
            match (&params.intermediate, &mut grads.intermediate, &tok.route) {
                (Intermediate::Dense(expert), Intermediate::Dense(g_expert), None) => {
                    let g_u: Vec64 = g_h_shared
                        .iter()
                        .zip(&tok.u)
                        .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
                        .collect();
                    g_expert.w_up.add_outer(x, &g_u);
                    for (b, g) in g_expert.b_up.iter_mut().zip(&g_u) {
                        *b += g;
                    }
                    for (gx, v) in g_x.iter_mut().zip(expert.w_up.right_mul(&g_u)) {
                        *gx += v;
                    }
                }
                (
                    Intermediate::Moe { experts, gate },
                    Intermediate::Moe {
                        experts: g_experts,
                        gate: g_gate,
                    },
                    Some((route, probs)),
                ) => {
                    let e = *route;
                    let p = probs[e];
                    // h = p · r with r = relu(u)
                    let g_u: Vec64 = g_h_shared
                        .iter()
                        .zip(&tok.u)
                        .map(|(g, u)| if *u > 0.0 { p * g } else { 0.0 })
                        .collect();
                    let g_p: f64 = g_h_shared
                        .iter()
                        .zip(&tok.u)
                        .map(|(g, u)| g * u.max(0.0))
                        .sum();
                    let g_expert = &mut g_experts[e];
                    g_expert.w_up.add_outer(x, &g_u);
                    for (b, g) in g_expert.b_up.iter_mut().zip(&g_u) {
                        *b += g;
                    }
                    for (gx, v) in g_x.iter_mut().zip(experts[e].w_up.right_mul(&g_u)) {
                        *gx += v;
                    }
                    // dp_e/dlogit_k = p_e (δ_ek − p_k)
                    let g_logits: Vec64 = probs
                        .iter()
                        .enumerate()
                        .map(|(k, pk)| g_p * p * (if k == e { 1.0 } else { 0.0 } - pk))
                        .collect();
                    g_gate.add_outer(x, &g_logits);
                    for (gx, v) in g_x.iter_mut().zip(gate.right_mul(&g_logits)) {
                        *gx += v;
                    }
                }
                _ => {
                    return Err(Error::config(
                        "gradient buffer does not match parameter layout",
                    ))
                }
            }
            for (e, g) in grads.embedding.row_mut(tok.id).iter_mut().zip(&g_x) {
                *e += g;
            }
        }
        Ok(())
    }
}

/// Runs the encoder on `text`, keeping the activations needed by
/// [`ForwardPass::backward`].
pub fn forward(params: &EncoderParams, config: &EncoderConfig, text: &str) -> Result<ForwardPass> {
    let ids = tokenize(text, config);
    forward_tokens(params, config, &ids)
}

pub fn forward_tokens(
    params: &EncoderParams,
    config: &EncoderConfig,
    ids: &[usize],
) -> Result<ForwardPass> {
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = config.d_model;
    let mut pool = vec![0.0; d];
    let mut tokens = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= params.embedding.rows() {
            return Err(Error::config(format!("token id {id} outside vocabulary")));
        }
        let x = params.embedding.row(id);
        let (u, h, route) = match &params.intermediate {
            Intermediate::Dense(expert) => {
                let u = up_projection(expert, x);
                let mut h = u.clone();
                relu_in_place(&mut h);
                (u, h, None)
            }
            Intermediate::Moe { experts, gate } => {
                let (route, probs) = gate_route(gate, x)?;
                let u = up_projection(&experts[route], x);
                let p = probs[route];
                let h = u.iter().map(|v| p * v.max(0.0)).collect();
                (u, h, Some((route, probs)))
            }
        };
        let y = params.w_down.left_mul(&h);
        for ((acc, yi), (bi, xi)) in pool.iter_mut().zip(&y).zip(params.b_down.iter().zip(x)) {
            *acc += yi + bi + xi;
        }
        tokens.push(TokenTrace { id, u, h, route });
    }
    let inv = 1.0 / ids.len() as f64;
    for v in pool.iter_mut() {
        *v *= inv;
    }
    let pool_norm = norm(&pool);
    if pool_norm < NORM_FLOOR {
        return Err(Error::ZeroNorm {
            norm: pool_norm,
            floor: NORM_FLOOR,
        });
    }
    let output = l2_normalize(&pool)?;
    Ok(ForwardPass {
        tokens,
        pool_norm,
        output,
    })
}

/// Unit-norm embedding of `text`.
pub fn encode(params: &EncoderParams, config: &EncoderConfig, text: &str) -> Result<Vec64> {
    forward(params, config, text).map(ForwardPass::into_embedding)
}

/// Gradient of `upstreamᵀ·encode(text)` with respect to every parameter
/// tensor, including the rows of the token embedding table.
pub fn encode_with_grad(
    params: &EncoderParams,
    config: &EncoderConfig,
    text: &str,
    upstream: &[f64],
) -> Result<EncoderParams> {
    if upstream.len() != config.d_model {
        return Err(Error::DimensionMismatch {
            expected: config.d_model,
            got: upstream.len(),
        });
    }
    let pass = forward(params, config, text)?;
    let mut grads = params.zeros_like();
    pass.backward(params, upstream, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Mat64, Rng};

    fn tiny(moe: Option<MoEConfig>) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            d_model: 8,
            d_intermediate: 32,
            moe,
        }
    }

    /// Straight-line dense forward pass written independently of
    /// `forward_tokens`.
    fn reference_encode(p: &EncoderParams, cfg: &EncoderConfig, text: &str) -> Vec64 {
        let Intermediate::Dense(ex) = &p.intermediate else {
            panic!("dense only")
        };
        let ids = tokenize(text, cfg);
        let d = cfg.d_model;
        let di = cfg.d_intermediate;
        let mut pool = vec![0.0; d];
        for &t in &ids {
            let mut h = vec![0.0; di];
            for j in 0..di {
                let mut s = ex.b_up[j];
                for i in 0..d {
                    s += p.embedding.get(t, i) * ex.w_up.get(i, j);
                }
                h[j] = if s > 0.0 { s } else { 0.0 };
            }
            for k in 0..d {
                let mut s = p.b_down[k] + p.embedding.get(t, k);
                for j in 0..di {
                    s += h[j] * p.w_down.get(j, k);
                }
                pool[k] += s / ids.len() as f64;
            }
        }
        let n = pool.iter().map(|v| v * v).sum::<f64>().sqrt();
        pool.iter().map(|v| v / n).collect()
    }

    #[test]
    fn tokenize_examples() {
        let cfg = EncoderConfig::default();
        assert!(tokenize("", &cfg).is_empty());
        assert!(tokenize("  ,.; ", &cfg).is_empty());
        let ids = tokenize("The THE the", &cfg);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|i| *i == ids[0]));
        assert_eq!(tokenize("car, vehicle!", &cfg).len(), 2);
        assert_eq!(tokenize("Seoul→Busan", &cfg), tokenize("seoul busan", &cfg));
    }

    #[test]
    fn tokenize_hash_is_stable() {
        // FNV-1a reference values
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn pairwise_collision_rate_is_small() {
        let cfg = EncoderConfig::default();
        let words: Vec<String> = (0..10_000).map(|i| format!("word{i}")).collect();
        let ids: Vec<usize> = words.iter().map(|w| tokenize(w, &cfg)[0]).collect();
        let collisions = ids.windows(2).filter(|w| w[0] == w[1]).count();
        let rate = collisions as f64 / (ids.len() - 1) as f64;
        assert!(rate < 0.05, "rate {rate}");
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 42).unwrap();
        let a = encode(&p, &cfg, "hello dense retrieval").unwrap();
        let b = encode(&p, &cfg, "hello dense retrieval").unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert!(matches!(encode(&p, &cfg, " ... "), Err(Error::EmptyInput)));
    }

    #[test]
    fn encode_matches_straight_line_reference() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 42).unwrap();
        let got = encode(&p, &cfg, "abc").unwrap();
        let want = reference_encode(&p, &cfg, "abc");
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let got = encode(&p, &cfg, "abc def, ghi").unwrap();
        let want = reference_encode(&p, &cfg, "abc def, ghi");
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_forward_requires_moe() {
        let cfg = tiny(None);
        let p = EncoderParams::init(&cfg, 1).unwrap();
        assert!(matches!(
            moe_intermediate_forward(&[0.0; 8], &p, &cfg),
            Err(Error::MoeDisabled)
        ));
    }

    #[test]
    fn moe_config_rejects_top2() {
        let bad = MoEConfig {
            num_experts: 2,
            experts_per_token: 2,
        };
        assert!(matches!(bad.validate(), Err(Error::Unsupported(_))));
        let worse = MoEConfig {
            num_experts: 1,
            experts_per_token: 2,
        };
        assert!(matches!(worse.validate(), Err(Error::InvalidConfig(_))));
    }

    fn set_gate(p: &mut EncoderParams, g: Mat64) {
        if let Intermediate::Moe { gate, .. } = &mut p.intermediate {
            *gate = g;
        }
    }

    #[test]
    fn saturated_gate_reproduces_dense_expert() {
        let cfg = tiny(Some(MoEConfig::default()));
        let mut p = EncoderParams::init(&cfg, 3).unwrap();
        // x[0] = 1, gate row 0 = (20, -20): logits exactly (20, -20)
        let x: Vec64 = (0..8)
            .map(|i| if i == 0 { 1.0 } else { 0.3 * i as f64 })
            .collect();
        let mut g = Mat64::zeros(8, 2);
        g.set(0, 0, 20.0);
        g.set(0, 1, -20.0);
        set_gate(&mut p, g);
        let out = moe_intermediate_forward(&x, &p, &cfg).unwrap();
        assert_eq!(out.route, 0);
        let mut dense = up_projection(&p.experts()[0], &x);
        relu_in_place(&mut dense);
        for (a, b) in out.h.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_tie_routes_to_lowest_index_at_half_weight() {
        let cfg = tiny(Some(MoEConfig::default()));
        let mut p = EncoderParams::init(&cfg, 3).unwrap();
        set_gate(&mut p, Mat64::zeros(8, 2));
        let x: Vec64 = (0..8).map(|i| 0.1 * i as f64 - 0.2).collect();
        let out = moe_intermediate_forward(&x, &p, &cfg).unwrap();
        assert_eq!(out.route, 0);
        assert_eq!(out.gate_prob, 0.5);
        let mut dense = up_projection(&p.experts()[0], &x);
        relu_in_place(&mut dense);
        for (a, b) in out.h.iter().zip(&dense) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn routed_output_matches_evaluate_all_then_mask() {
        let cfg = tiny(Some(MoEConfig {
            num_experts: 3,
            experts_per_token: 1,
        }));
        let mut p = EncoderParams::init(&cfg, 7).unwrap();
        // make the experts differ
        if let Intermediate::Moe { experts, .. } = &mut p.intermediate {
            let mut rng = Rng::new(7);
            for e in experts.iter_mut() {
                for w in e.w_up.as_mut_slice() {
                    *w += rng.symmetric(0.2);
                }
            }
        }
        let Intermediate::Moe { experts, gate } = &p.intermediate else {
            unreachable!()
        };
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let x: Vec64 = (0..8).map(|_| rng.symmetric(1.0)).collect();
            let logits: Vec64 = (0..3)
                .map(|k| (0..8).map(|i| x[i] * gate.get(i, k)).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let probs: Vec64 = logits.iter().map(|l| l.exp() / z).collect();
            let all: Vec<Vec64> = experts
                .iter()
                .map(|e| {
                    (0..32)
                        .map(|j| {
                            let s: f64 =
                                e.b_up[j] + (0..8).map(|i| x[i] * e.w_up.get(i, j)).sum::<f64>();
                            s.max(0.0)
                        })
                        .collect()
                })
                .collect();
            let best = (0..3).fold(0, |b, k| if probs[k] > probs[b] { k } else { b });
            let masked: Vec64 = all[best].iter().map(|v| v * probs[best]).collect();
            let out = moe_intermediate_forward(&x, &p, &cfg).unwrap();
            assert_eq!(out.route, best);
            for (a, b) in out.h.iter().zip(&masked) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny(Some(MoEConfig::default()));
        let p = EncoderParams::init(&cfg, 2).unwrap();
        let g = encode_with_grad(&p, &cfg, "one two three", &[0.0; 8]).unwrap();
        for (_, t) in g.tensors() {
            assert!(t.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_token_grad_touches_only_routed_expert() {
        let cfg = tiny(Some(MoEConfig::default()));
        let mut p = EncoderParams::init(&cfg, 5).unwrap();
        if let Intermediate::Moe { gate, .. } = &mut p.intermediate {
            for w in gate.as_mut_slice() {
                *w *= 5.0;
            }
        }
        let mut seen = [false; 2];
        for word in [
            "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta",
        ] {
            let pass = forward(&p, &cfg, word).unwrap();
            let route = pass.routes()[0].unwrap();
            seen[route] = true;
            let g = encode_with_grad(&p, &cfg, word, &[1.0, -0.5, 0.2, 0.0, 0.3, 0.1, -0.7, 0.4])
                .unwrap();
            for (e, ex) in g.experts().iter().enumerate() {
                let touched = ex.w_up.as_slice().iter().chain(&ex.b_up).any(|v| *v != 0.0);
                assert_eq!(touched, e == route, "{word}: expert {e}");
            }
        }
        let _ = seen;
    }
}
