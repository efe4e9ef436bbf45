//! Single-mechanism reference stacks sharing a model's weights.
//!
//! Every mixing layer runs one mechanism over the whole sequence: causal
//! attention (a Transformer) or the SSM from a zero state (a Mamba-2 style
//! model). These contain no transition-point or converter logic and serve as
//! oracles for the degenerate schedules.

use alloc::vec;
use alloc::vec::Vec;

use super::config::ZGating;
use super::layer::{self, attention_rows, features, global_gate, project_out};
use super::Model;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Attention,
    Ssm,
}

/// One reference mixing layer over `hn: [B, T, d]`.
pub(crate) fn reference_layer<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    vars: &[Var],
    layer_idx: usize,
    hn: Var,
    resid: Var,
    mech: Mechanism,
) -> Result<Var> {
    let cfg = &model.cfg;
    let ids = &model.layout.layers[layer_idx];
    let t = tape.shape(hn)[1];
    let f = features(tape, cfg, vars, ids, hn)?;
    let y = match mech {
        Mechanism::Attention => attention_rows(tape, cfg, &f, t)?,
        Mechanism::Ssm => {
            let y = tape.ssm_scan(f.c, f.b, f.x, f.dt, f.decay, None)?;
            if cfg.z_gating == ZGating::SiluGate {
                let z = tape.matmul(hn, vars[ids.w_z])?;
                let z = tape.silu(z);
                let s = tape.shape(z).to_vec();
                let z = tape.reshape(z, vec![s[0], s[1], cfg.n_heads, cfg.head_dim()])?;
                tape.mul(y, z)?
            } else {
                y
            }
        }
    };
    let y = global_gate(tape, cfg, vars, ids, y, hn, resid)?;
    project_out(tape, cfg, vars, ids, y)
}

/// Logits `[T, vocab]` of the reference stack built from `model`'s weights.
pub fn reference_forward<S: Scalar>(model: &Model<S>, tokens: &[u32], mech: Mechanism) -> Result<Tensor<S>> {
    model.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let flat: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = tape.embedding(vars[model.layout.embed], &flat, &[1, tokens.len()])?;
    for i in 0..model.cfg.n_layers {
        let hn = tape.rmsnorm(x, vars[model.layout.layers[i].norm], model.cfg.norm_eps)?;
        let y = reference_layer(&mut tape, model, &vars, i, hn, x, mech)?;
        x = tape.add(x, y)?;
        x = model.mlps(&mut tape, &vars, i, x)?;
    }
    let logits = model.head(&mut tape, &vars, x)?;
    tape.value(logits).reshape(vec![tokens.len(), model.cfg.vocab])
}

/// Output of a single split layer and of a reference layer on the same input,
/// for layer-level equivalence checks. Returns `(split, reference)`.
pub fn layer_pair<S: Scalar>(
    model: &Model<S>,
    layer_idx: usize,
    input: &Tensor<S>,
    p: usize,
    mech: Mechanism,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let ids = &model.layout.layers[layer_idx];
    let hn = tape.rmsnorm(x, vars[ids.norm], model.cfg.norm_eps)?;
    let split = layer::layer_forward(&mut tape, &model.cfg, &vars, ids, hn, x, p)?;
    let reference = reference_layer(&mut tape, model, &vars, layer_idx, hn, x, mech)?;
    Ok((tape.value(split).clone(), tape.value(reference).clone()))
}
