//! The decoder-only stack: embedding, mixing layers interleaved with MLP
//! blocks under pre-norm residuals, final norm and tied output embedding.

mod config;
mod generate;
mod layer;
mod params;
pub mod reference;

use alloc::vec;
use alloc::vec::Vec;

pub use config::{Activation, ModelConfig, ZGating};
pub use generate::{generate, Session};
pub use params::{init_params, ConverterIds, Decay, LayerIds, Layout, MlpIds, Param, ParamStore};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::schedule::TransPointSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A transition point that exceeded the sequence and was clamped to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClampWarning {
    pub layer: usize,
    pub requested: usize,
    pub used: usize,
}

/// Result of a recorded forward pass.
pub struct Forward {
    /// `[B, T, vocab]`
    pub logits: Var,
    /// Token embeddings `[B, T, d]`, exposed for gradient probes.
    pub embeddings: Var,
    pub clamped: Vec<ClampWarning>,
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub layout: Layout,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (params, layout) = init_params(&cfg, &SeedStream::new(seed).child("model"))?;
        Ok(Model { cfg, params, layout })
    }

    /// A model with the same config and layout but another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.cfg.vocab {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab: self.cfg.vocab,
                });
            }
        }
        Ok(())
    }

    /// Looks up the token embeddings of an equal-length batch; returns `[B, T, d]` and `T`.
    pub fn embed(&self, tape: &mut Tape<S>, vars: &[Var], batch: &[Vec<u32>]) -> Result<(Var, usize)> {
        let t = batch.first().map_or(0, |s| s.len());
        let mut flat = Vec::with_capacity(batch.len() * t);
        for seq in batch {
            if seq.len() != t {
                return Err(Error::InvalidArgument("batch sequences differ in length".into()));
            }
            self.check_tokens(seq)?;
            flat.extend(seq.iter().map(|&v| v as usize));
        }
        let x = tape.embedding(vars[self.layout.embed], &flat, &[batch.len(), t])?;
        Ok((x, t))
    }

    /// Records the forward pass of an equal-length batch with explicit
    /// per-layer transition points.
    pub fn forward_points(&self, tape: &mut Tape<S>, vars: &[Var], batch: &[Vec<u32>], points: &[usize]) -> Result<Forward> {
        let (embeddings, _) = self.embed(tape, vars, batch)?;
        let (logits, clamped) = self.forward_embedded(tape, vars, embeddings, points)?;
        Ok(Forward {
            logits,
            embeddings,
            clamped,
        })
    }

    /// Runs the stack on given input embeddings `x: [B, T, d]`, which may be
    /// a trainable leaf when gradients with respect to them are wanted.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        embeddings: Var,
        points: &[usize],
    ) -> Result<(Var, Vec<ClampWarning>)> {
        if points.len() != self.cfg.n_layers {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} transition points for {} layers",
                points.len(),
                self.cfg.n_layers
            )));
        }
        let t = tape.shape(embeddings)[1];
        let mut x = embeddings;
        let mut clamped = Vec::new();
        for (i, ids) in self.layout.layers.iter().enumerate() {
            let requested = points[i];
            let p = requested.min(t);
            if p != requested {
                clamped.push(ClampWarning { layer: i, requested, used: p });
            }
            let hn = tape.rmsnorm(x, vars[ids.norm], self.cfg.norm_eps)?;
            let y = layer::layer_forward(tape, &self.cfg, vars, ids, hn, x, p)?;
            x = tape.add(x, y)?;
            x = self.mlps(tape, vars, i, x)?;
        }
        Ok((self.head(tape, vars, x)?, clamped))
    }

    pub(crate) fn mlps(&self, tape: &mut Tape<S>, vars: &[Var], layer: usize, mut x: Var) -> Result<Var> {
        for m in &self.layout.mlps[layer] {
            let hn = tape.rmsnorm(x, vars[m.norm], self.cfg.norm_eps)?;
            let y = layer::mlp_forward(tape, vars, m, hn)?;
            x = tape.add(x, y)?;
        }
        Ok(x)
    }

    pub(crate) fn head(&self, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        let x = tape.rmsnorm(x, vars[self.layout.final_norm], self.cfg.norm_eps)?;
        let et = tape.transpose_last2(vars[self.layout.embed])?;
        tape.matmul(x, et)
    }

    /// Records the forward pass of a batch under `schedule`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        batch: &[Vec<u32>],
        schedule: &TransPointSchedule,
    ) -> Result<Forward> {
        self.forward_points(tape, vars, batch, &schedule.resolve(self.cfg.n_layers))
    }

    /// Logits `[T, vocab]` for one sequence; no gradients are kept.
    pub fn forward(&self, tokens: &[u32], schedule: &TransPointSchedule) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let f = self.forward_tape(&mut tape, &vars, &[tokens.to_vec()], schedule)?;
        let logits = tape.value(f.logits);
        logits.reshape(vec![tokens.len(), self.cfg.vocab])
    }

    /// Logits `[T, vocab]` for one sequence with explicit per-layer points.
    pub fn forward_with_points(&self, tokens: &[u32], points: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let f = self.forward_points(&mut tape, &vars, &[tokens.to_vec()], points)?;
        tape.value(f.logits).reshape(vec![tokens.len(), self.cfg.vocab])
    }
}

/// Next-token training loss: predicts `tokens[b][t]` from position `t-1`,
/// weighted by `mask[b][t]`.
pub fn next_token_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    batch: &[Vec<u32>],
    mask: &[Vec<bool>],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (bsz, t, vocab) = (shape[0], shape[1], shape[2]);
    if t < 2 {
        return Err(Error::InvalidArgument("need at least two tokens for a next-token loss".into()));
    }
    let pred = tape.slice(logits, 1, 0, t - 1)?;
    let pred = tape.reshape(pred, vec![bsz * (t - 1), vocab])?;
    let mut targets = Vec::with_capacity(bsz * (t - 1));
    let mut weights = Vec::with_capacity(bsz * (t - 1));
    for (seq, m) in batch.iter().zip(mask) {
        for i in 1..t {
            targets.push(seq[i] as usize);
            weights.push(if m[i] { S::one() } else { S::zero() });
        }
    }
    tape.cross_entropy(pred, &targets, &weights)
}
