use std::fmt;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, MoEConfig};
use crate::error::{Error, Result};
use crate::numerics::{seeded_init, Mat64, Rng, Vec64};

const GATE_STREAM: u64 = 0x6761_7465;

/// Weights of one up-projection (`d_model → d_intermediate`).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_up: Mat64,
    pub b_up: Vec64,
}

/// The intermediate up-projection: either one dense layer or a set of
/// experts plus the gate that routes between them.
#[derive(Debug, Clone, PartialEq)]
pub enum Intermediate {
    Dense(Expert),
    Moe { experts: Vec<Expert>, gate: Mat64 },
}

/// All encoder weights. The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Mat64,
    pub intermediate: Intermediate,
    pub w_down: Mat64,
    pub b_down: Vec64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorKind {
    Embedding,
    UpWeight,
    UpBias,
    Gate,
    DownWeight,
    DownBias,
}

/// Identifies one parameter tensor; `expert` is set for per-expert copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    pub kind: TensorKind,
    pub expert: Option<usize>,
}

impl TensorId {
    fn new(kind: TensorKind, expert: Option<usize>) -> Self {
        Self { kind, expert }
    }

    /// True for tensors that belong to the intermediate up-projection,
    /// dense or expert.
    pub fn is_intermediate(&self) -> bool {
        matches!(self.kind, TensorKind::UpWeight | TensorKind::UpBias)
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            TensorKind::Embedding => "embedding",
            TensorKind::UpWeight => "w_up",
            TensorKind::UpBias => "b_up",
            TensorKind::Gate => "gate",
            TensorKind::DownWeight => "w_down",
            TensorKind::DownBias => "b_down",
        };
        match self.expert {
            Some(e) => write!(f, "expert.{e}.{base}"),
            None => f.write_str(base),
        }
    }
}

impl Expert {
    fn zeros(d_model: usize, d_intermediate: usize) -> Self {
        Self {
            w_up: Mat64::zeros(d_model, d_intermediate),
            b_up: vec![0.0; d_intermediate],
        }
    }
}

impl EncoderParams {
    /// Freshly initialized weights. With MoE configured, the dense
    /// up-projection is drawn first and then upcycled into identical experts.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 0);
        let d = config.d_model;
        let di = config.d_intermediate;
        let embedding = seeded_init(&mut rng, config.vocab_size, d, 1.0)?;
        let w_up = seeded_init(&mut rng, d, di, 1.0 / (d as f64).sqrt())?;
        let w_down = seeded_init(&mut rng, di, d, 1.0 / (di as f64).sqrt())?;
        let dense = Self {
            embedding,
            intermediate: Intermediate::Dense(Expert {
                w_up,
                b_up: vec![0.0; di],
            }),
            w_down,
            b_down: vec![0.0; d],
        };
        match &config.moe {
            Some(moe) => dense.upcycle(moe, seed),
            None => Ok(dense),
        }
    }

    /// Replaces a dense up-projection with `num_experts` copies of it and a
    /// freshly drawn gate. Already-MoE parameters are rejected.
    pub fn upcycle(&self, moe: &MoEConfig, seed: u64) -> Result<Self> {
        moe.validate()?;
        let Intermediate::Dense(expert) = &self.intermediate else {
            return Err(Error::config("parameters already contain MoE experts"));
        };
        let d = self.embedding.cols();
        let mut rng = Rng::with_stream(seed, GATE_STREAM);
        let gate = seeded_init(&mut rng, d, moe.num_experts, 1.0 / (d as f64).sqrt())?;
        Ok(Self {
            embedding: self.embedding.clone(),
            intermediate: Intermediate::Moe {
                experts: vec![expert.clone(); moe.num_experts],
                gate,
            },
            w_down: self.w_down.clone(),
            b_down: self.b_down.clone(),
        })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.d_model;
        let di = config.d_intermediate;
        let intermediate = match &config.moe {
            Some(moe) => Intermediate::Moe {
                experts: vec![Expert::zeros(d, di); moe.num_experts],
                gate: Mat64::zeros(d, moe.num_experts),
            },
            None => Intermediate::Dense(Expert::zeros(d, di)),
        };
        Self {
            embedding: Mat64::zeros(config.vocab_size, d),
            intermediate,
            w_down: Mat64::zeros(di, d),
            b_down: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.intermediate, Intermediate::Moe { .. })
    }

    pub fn experts(&self) -> &[Expert] {
        match &self.intermediate {
            Intermediate::Dense(e) => std::slice::from_ref(e),
            Intermediate::Moe { experts, .. } => experts,
        }
    }

    pub fn tensors(&self) -> Vec<(TensorId, &[f64])> {
        use TensorKind::*;
        let mut out = vec![(TensorId::new(Embedding, None), self.embedding.as_slice())];
        match &self.intermediate {
            Intermediate::Dense(e) => {
                out.push((TensorId::new(UpWeight, None), e.w_up.as_slice()));
                out.push((TensorId::new(UpBias, None), &e.b_up[..]));
            }
            Intermediate::Moe { experts, gate } => {
                for (i, e) in experts.iter().enumerate() {
                    out.push((TensorId::new(UpWeight, Some(i)), e.w_up.as_slice()));
                    out.push((TensorId::new(UpBias, Some(i)), &e.b_up[..]));
                }
                out.push((TensorId::new(Gate, None), gate.as_slice()));
            }
        }
        out.push((TensorId::new(DownWeight, None), self.w_down.as_slice()));
        out.push((TensorId::new(DownBias, None), &self.b_down[..]));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorId, &mut [f64])> {
        use TensorKind::*;
        let mut out = vec![(
            TensorId::new(Embedding, None),
            self.embedding.as_mut_slice(),
        )];
        match &mut self.intermediate {
            Intermediate::Dense(e) => {
                out.push((TensorId::new(UpWeight, None), e.w_up.as_mut_slice()));
                out.push((TensorId::new(UpBias, None), &mut e.b_up[..]));
            }
            Intermediate::Moe { experts, gate } => {
                for (i, e) in experts.iter_mut().enumerate() {
                    out.push((TensorId::new(UpWeight, Some(i)), e.w_up.as_mut_slice()));
                    out.push((TensorId::new(UpBias, Some(i)), &mut e.b_up[..]));
                }
                out.push((TensorId::new(Gate, None), gate.as_mut_slice()));
            }
        }
        out.push((TensorId::new(DownWeight, None), self.w_down.as_mut_slice()));
        out.push((TensorId::new(DownBias, None), &mut self.b_down[..]));
        out
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += scale · other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Checks every tensor shape against `config` and that all entries are
    /// finite.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let shape_err = |what: &str, expected: (usize, usize), got: (usize, usize)| {
            Error::config(format!(
                "{what} has shape {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ))
        };
        let d = config.d_model;
        let di = config.d_intermediate;
        if self.embedding.shape() != (config.vocab_size, d) {
            return Err(shape_err(
                "embedding",
                (config.vocab_size, d),
                self.embedding.shape(),
            ));
        }
        if self.w_down.shape() != (di, d) {
            return Err(shape_err("w_down", (di, d), self.w_down.shape()));
        }
        if self.b_down.len() != d {
            return Err(shape_err("b_down", (1, d), (1, self.b_down.len())));
        }
        match (&self.intermediate, &config.moe) {
            (Intermediate::Dense(_), None) => {}
            (Intermediate::Moe { experts, gate }, Some(moe)) => {
                if experts.len() != moe.num_experts {
                    return Err(Error::config(format!(
                        "{} experts present, config expects {}",
                        experts.len(),
                        moe.num_experts
                    )));
                }
                if gate.shape() != (d, moe.num_experts) {
                    return Err(shape_err("gate", (d, moe.num_experts), gate.shape()));
                }
            }
            (Intermediate::Dense(_), Some(_)) => {
                return Err(Error::config("config enables MoE but parameters are dense"))
            }
            (Intermediate::Moe { .. }, None) => {
                return Err(Error::config(
                    "parameters contain MoE experts but config is dense",
                ))
            }
        }
        for e in self.experts() {
            if e.w_up.shape() != (d, di) {
                return Err(shape_err("w_up", (d, di), e.w_up.shape()));
            }
            if e.b_up.len() != di {
                return Err(shape_err("b_up", (1, di), (1, e.b_up.len())));
            }
        }
        for (id, t) in self.tensors() {
            if let Some(bad) = t.iter().find(|x| !x.is_finite()) {
                return Err(Error::config(format!(
                    "{id} contains non-finite value {bad}"
                )));
            }
        }
        Ok(())
    }
}
