//! One mixing layer split at its transition point, plus the MLP block.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{Activation, ModelConfig, ZGating};
use super::params::{LayerIds, MlpIds};
use crate::converter::ConverterMode;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-position quantities both mechanisms read.
pub(crate) struct Features {
    /// SSM inputs `[B, T, H, N]`, `[B, T, H, N]`, `[B, T, H, D]`.
    pub c: Var,
    pub b: Var,
    pub x: Var,
    /// Attention inputs; identical handles to `c`/`b`/`x` unless the
    /// convolution is confined to the SSM path.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `[B, T, H]`
    pub dt: Var,
    pub decay: Var,
}

fn act<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, v: Var, value_role: bool) -> Var {
    match (cfg.activation, value_role) {
        (Activation::Standard, true) => tape.silu(v),
        _ => v,
    }
}

fn heads<S: Scalar>(tape: &mut Tape<S>, v: Var, h: usize) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    tape.reshape(v, vec![b, t, h, w / h])
}

/// Projects the normalised input `hn: [B, T, d]` through the shared weights.
pub(crate) fn features<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &LayerIds,
    hn: Var,
) -> Result<Features> {
    let h = cfg.n_heads;
    let c_pre = tape.matmul(hn, vars[ids.w_cq])?;
    let b_pre = tape.matmul(hn, vars[ids.w_bk])?;
    let x_pre = tape.matmul(hn, vars[ids.w_xv])?;
    let (c_conv, b_conv, x_conv) = if cfg.use_conv {
        (
            tape.causal_conv(c_pre, vars[ids.conv_c_w], vars[ids.conv_c_b])?,
            tape.causal_conv(b_pre, vars[ids.conv_b_w], vars[ids.conv_b_b])?,
            tape.causal_conv(x_pre, vars[ids.conv_x_w], vars[ids.conv_x_b])?,
        )
    } else {
        (c_pre, b_pre, x_pre)
    };
    let c = act(tape, cfg, c_conv, false);
    let c = heads(tape, c, h)?;
    let b = act(tape, cfg, b_conv, false);
    let b = heads(tape, b, h)?;
    let x = act(tape, cfg, x_conv, true);
    let x = heads(tape, x, h)?;
    let (q, k, v) = if cfg.use_conv && !cfg.conv_on_attention {
        let q = act(tape, cfg, c_pre, false);
        let k = act(tape, cfg, b_pre, false);
        let v = act(tape, cfg, x_pre, true);
        (heads(tape, q, h)?, heads(tape, k, h)?, heads(tape, v, h)?)
    } else {
        (c, b, x)
    };
    let shape = tape.shape(hn);
    let (bsz, t) = (shape[0], shape[1]);
    let (dt, decay) = if cfg.unit_decay {
        let ones = tape.constant(Tensor::ones(vec![bsz, t, h]));
        (ones, ones)
    } else {
        let raw = tape.matmul(hn, vars[ids.w_dt])?;
        let raw = tape.add(raw, vars[ids.b_dt])?;
        let dt = tape.softplus(raw);
        let rate = tape.exp(vars[ids.log_a]);
        let scaled = tape.mul(dt, rate)?;
        let neg = tape.neg(scaled);
        (dt, tape.exp(neg))
    };
    Ok(Features {
        c,
        b,
        x,
        q,
        k,
        v,
        dt,
        decay,
    })
}

/// Attention over positions `[0, p)`.
pub(crate) fn attention_rows<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, f: &Features, p: usize) -> Result<Var> {
    let q = tape.slice(f.q, 1, 0, p)?;
    let k = tape.slice(f.k, 1, 0, p)?;
    let v = tape.slice(f.v, 1, 0, p)?;
    let (q, k) = if cfg.use_rope {
        let pos: Vec<usize> = (0..p).collect();
        (tape.rope(q, &pos, cfg.rope_theta)?, tape.rope(k, &pos, cfg.rope_theta)?)
    } else {
        (q, k)
    };
    tape.attention(q, k, v, cfg.attention, S::lit(cfg.attention_scale()), true)
}

/// The converter on the tape: prefix `k: [B, P, H, N]`, `v: [B, P, H, D]`,
/// `dt`, `decay: [B, P, H]` to a state `[B, H, N, D]`.
///
/// The closed form is evaluated through its linear-time recurrence.
pub(crate) fn convert_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &LayerIds,
    k: Var,
    v: Var,
    dt: Var,
    decay: Var,
) -> Result<Var> {
    let dt = if cfg.converter.include_delta {
        dt
    } else {
        let shape = tape.shape(dt).to_vec();
        tape.constant(Tensor::ones(shape))
    };
    match (cfg.converter.mode, ids.converter) {
        (ConverterMode::LearnedMlp, Some(cv)) => {
            let ks = tape.shape(k).to_vec();
            let (bsz, p, h, n) = (ks[0], ks[1], ks[2], ks[3]);
            let d = tape.shape(v)[3];
            let kt = tape.permute(k, &[0, 2, 3, 1])?; // [B,H,N,P]
            let xs = tape.scale_rows(v, dt)?;
            let xs = tape.permute(xs, &[0, 2, 1, 3])?; // [B,H,P,D]
            let outer = tape.matmul(kt, xs)?; // [B,H,N,D]
            let pooled = tape.scale(outer, S::one() / S::lit(p as f64));
            let flat = tape.reshape(pooled, vec![bsz, h, n * d])?;
            let hid = tape.matmul(flat, vars[cv.w1])?;
            let hid = tape.add(hid, vars[cv.b1])?;
            let hid = tape.silu(hid);
            let out = tape.matmul(hid, vars[cv.w2])?;
            let out = tape.add(out, vars[cv.b2])?;
            tape.reshape(out, vec![bsz, h, n, d])
        }
        _ => tape.ssm_final_state(k, v, dt, decay),
    }
}

fn gate<S: Scalar>(tape: &mut Tape<S>, cfg: &ModelConfig, vars: &[Var], ids: &LayerIds, src: Var) -> Result<Var> {
    let z = tape.matmul(src, vars[ids.w_z])?;
    let z = tape.silu(z);
    heads(tape, z, cfg.n_heads)
}

/// Mixing layer with transition point `p`: attention on `[0, p)`, SSM on
/// `[p, T)` seeded from the converted prefix, rows concatenated, gated and
/// projected back to `d_model`.
///
/// `hn` is the normalised input and `resid` the residual stream it came from,
/// both `[B, T, d]`. `p` must already be clamped to `T`.
pub(crate) fn layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &LayerIds,
    hn: Var,
    resid: Var,
    p: usize,
) -> Result<Var> {
    let shape = tape.shape(hn).to_vec();
    let (bsz, t) = (shape[0], shape[1]);
    let f = features(tape, cfg, vars, ids, hn)?;
    let prefix = if p > 0 { Some(attention_rows(tape, cfg, &f, p)?) } else { None };
    let suffix = if p < t {
        let h0 = if p > 0 {
            let k = tape.slice(f.k, 1, 0, p)?;
            let v = tape.slice(f.v, 1, 0, p)?;
            let dt = tape.slice(f.dt, 1, 0, p)?;
            let decay = tape.slice(f.decay, 1, 0, p)?;
            Some(convert_on_tape(tape, cfg, vars, ids, k, v, dt, decay)?)
        } else {
            None
        };
        let c = tape.slice(f.c, 1, p, t)?;
        let b = tape.slice(f.b, 1, p, t)?;
        let x = tape.slice(f.x, 1, p, t)?;
        let dt = tape.slice(f.dt, 1, p, t)?;
        let decay = tape.slice(f.decay, 1, p, t)?;
        let y = tape.ssm_scan(c, b, x, dt, decay, h0)?;
        Some(if cfg.z_gating == ZGating::SiluGate {
            let z = gate(tape, cfg, vars, ids, hn)?;
            let z = tape.slice(z, 1, p, t)?;
            tape.mul(y, z)?
        } else {
            y
        })
    } else {
        None
    };
    let y = match (prefix, suffix) {
        (Some(a), Some(b)) => tape.concat(a, b, 1)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Ok(tape.constant(Tensor::zeros(vec![bsz, 0, cfg.d_model]))),
    };
    let y = global_gate(tape, cfg, vars, ids, y, hn, resid)?;
    project_out(tape, cfg, vars, ids, y)
}

pub(crate) fn global_gate<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &LayerIds,
    y: Var,
    hn: Var,
    resid: Var,
) -> Result<Var> {
    match cfg.z_gating {
        ZGating::GlobalH => {
            let z = gate(tape, cfg, vars, ids, hn)?;
            tape.mul(y, z)
        }
        ZGating::GlobalResidual => {
            let z = gate(tape, cfg, vars, ids, resid)?;
            tape.mul(y, z)
        }
        _ => Ok(y),
    }
}

pub(crate) fn project_out<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &[Var],
    ids: &LayerIds,
    y: Var,
) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let flat = tape.reshape(y, vec![s[0], s[1], cfg.n_heads * cfg.head_dim()])?;
    tape.matmul(flat, vars[ids.w_o])
}

/// SiLU-gated linear unit: `(silu(h W_g) ∘ h W_u) W_d`.
pub(crate) fn mlp_forward<S: Scalar>(tape: &mut Tape<S>, vars: &[Var], ids: &MlpIds, hn: Var) -> Result<Var> {
    let g = tape.matmul(hn, vars[ids.w_gate])?;
    let g = tape.silu(g);
    let u = tape.matmul(hn, vars[ids.w_up])?;
    let hidden = tape.mul(g, u)?;
    tape.matmul(hidden, vars[ids.w_down])
}
