//! Rebuilds the SSM state at a transition point from the attention prefix.
//!
//! Because the query/key/value projections are the very weights that produce
//! `C`, `B` and `x`, the prefix keys are the `B` rows and the prefix values are
//! the `x` rows the SSM would have consumed. The state it would have reached is
//! therefore a closed-form function of `(K, V, Δ, Ā)`:
//!
//! ```text
//! h_s = (A× ∘ Kᵀ) X,   X = Δ ∘ V,   h0 = h_s[last]
//! ```
//!
//! The learned variant replaces that closed form with a small MLP over the
//! pooled outer products and exists only for ablations.

use alloc::vec;
use alloc::vec::Vec;

use crate::dual::{build_a_cross, SsmState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::scalar_fn::silu;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConverterMode {
    /// Exact closed form; adds no parameters.
    Theoretical,
    /// Two-layer MLP over mean-pooled `K ⊗ (Δ∘V)`.
    LearnedMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConverterConfig {
    pub mode: ConverterMode,
    /// Weight each value by its step size Δ; required for the conversion to
    /// match the recurrence.
    pub include_delta: bool,
    /// Hidden width of the learned MLP.
    pub mlp_hidden: usize,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        ConverterConfig {
            mode: ConverterMode::Theoretical,
            include_delta: true,
            mlp_hidden: 64,
        }
    }
}

impl ConverterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == ConverterMode::LearnedMlp && self.mlp_hidden == 0 {
            return Err(Error::Config("learned converter needs mlp_hidden > 0".into()));
        }
        Ok(())
    }
}

/// Weights of the learned converter, shared across heads.
#[derive(Debug, Clone)]
pub struct MlpConverterWeights<'a, S> {
    /// `[N·D, hidden]`
    pub w1: &'a Tensor<S>,
    /// `[hidden]`
    pub b1: &'a Tensor<S>,
    /// `[hidden, N·D]`
    pub w2: &'a Tensor<S>,
    /// `[N·D]`
    pub b2: &'a Tensor<S>,
}

struct Prefix {
    t: usize,
    heads: usize,
    n: usize,
    d: usize,
}

fn prefix_dims<S: Scalar>(k: &Tensor<S>, v: &Tensor<S>, dt: &Tensor<S>, decay: &Tensor<S>) -> Result<Prefix> {
    let bad = |lhs: &[usize], rhs: &[usize]| Error::ShapeMismatch {
        op: "memory_converter",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    let (ks, vs) = (k.shape(), v.shape());
    if ks.len() != 3 || vs.len() != 3 || ks[..2] != vs[..2] {
        return Err(bad(ks, vs));
    }
    if dt.shape() != &ks[..2] {
        return Err(bad(dt.shape(), ks));
    }
    if decay.shape() != &ks[..2] {
        return Err(bad(decay.shape(), ks));
    }
    Ok(Prefix {
        t: ks[0],
        heads: ks[1],
        n: ks[2],
        d: vs[2],
    })
}

/// Row `row` of `h_s` for one head: `Σ_{s ≤ row} A×[row, s] · K_s ⊗ X_s`.
#[allow(clippy::too_many_arguments)]
fn state_row<S: Scalar>(
    a_cross: &Tensor<S>,
    row: usize,
    head: usize,
    k: &Tensor<S>,
    v: &Tensor<S>,
    dt: &Tensor<S>,
    include_delta: bool,
    dims: &Prefix,
    out: &mut [S],
) {
    let (t, heads, n, d) = (dims.t, dims.heads, dims.n, dims.d);
    out.iter_mut().for_each(|o| *o = S::zero());
    for s in 0..=row {
        let weight = a_cross.data()[row * t + s];
        let step = if include_delta {
            dt.data()[s * heads + head]
        } else {
            S::one()
        };
        let kv = &k.data()[(s * heads + head) * n..][..n];
        let vv = &v.data()[(s * heads + head) * d..][..d];
        for (ni, &kn) in kv.iter().enumerate() {
            let coef = weight * kn * step;
            for (o, &x) in out[ni * d..(ni + 1) * d].iter_mut().zip(vv) {
                *o = *o + coef * x;
            }
        }
    }
}

fn head_decay<S: Scalar>(decay: &Tensor<S>, head: usize, dims: &Prefix) -> Vec<S> {
    (0..dims.t).map(|i| decay.data()[i * dims.heads + head]).collect()
}

/// Full trajectory `h_s`: `[T, H, N, D]`, row `t` being the state after the
/// first `t + 1` prefix tokens.
pub fn converter_row_form<S: Scalar>(
    k: &Tensor<S>,
    v: &Tensor<S>,
    dt: &Tensor<S>,
    decay: &Tensor<S>,
    include_delta: bool,
) -> Result<Tensor<S>> {
    let dims = prefix_dims(k, v, dt, decay)?;
    let sz = dims.n * dims.d;
    let mut out = Tensor::zeros(vec![dims.t, dims.heads, dims.n, dims.d]);
    let mut buf = vec![S::zero(); sz];
    for h in 0..dims.heads {
        let a_cross = build_a_cross(&head_decay(decay, h, &dims));
        for row in 0..dims.t {
            state_row(&a_cross, row, h, k, v, dt, include_delta, &dims, &mut buf);
            out.data_mut()[(row * dims.heads + h) * sz..][..sz].copy_from_slice(&buf);
        }
    }
    Ok(out)
}

/// State handed to the SSM at the transition point.
///
/// `k: [T, H, N]`, `v: [T, H, D]`, `dt` and `decay: [T, H]`. An empty prefix
/// yields the zero state. The learned mode requires `mlp`.
pub fn convert<S: Scalar>(
    k: &Tensor<S>,
    v: &Tensor<S>,
    dt: &Tensor<S>,
    decay: &Tensor<S>,
    cfg: &ConverterConfig,
    mlp: Option<&MlpConverterWeights<'_, S>>,
) -> Result<SsmState<S>> {
    let dims = prefix_dims(k, v, dt, decay)?;
    if dims.t == 0 {
        return Ok(SsmState::zeros(dims.heads, dims.n, dims.d));
    }
    match cfg.mode {
        ConverterMode::Theoretical => {
            let sz = dims.n * dims.d;
            let mut h = Tensor::zeros(vec![dims.heads, dims.n, dims.d]);
            for head in 0..dims.heads {
                let a_cross = build_a_cross(&head_decay(decay, head, &dims));
                state_row(
                    &a_cross,
                    dims.t - 1,
                    head,
                    k,
                    v,
                    dt,
                    cfg.include_delta,
                    &dims,
                    &mut h.data_mut()[head * sz..(head + 1) * sz],
                );
            }
            Ok(SsmState { h })
        }
        ConverterMode::LearnedMlp => {
            let w = mlp.ok_or_else(|| Error::Config("learned converter weights missing".into()))?;
            learned(k, v, dt, cfg.include_delta, &dims, w)
        }
    }
}

fn learned<S: Scalar>(
    k: &Tensor<S>,
    v: &Tensor<S>,
    dt: &Tensor<S>,
    include_delta: bool,
    dims: &Prefix,
    w: &MlpConverterWeights<'_, S>,
) -> Result<SsmState<S>> {
    let (t, heads, n, d) = (dims.t, dims.heads, dims.n, dims.d);
    let sz = n * d;
    let inv_t = S::one() / S::lit(t as f64);
    let mut pooled = vec![S::zero(); heads * sz];
    for s in 0..t {
        for h in 0..heads {
            let step = if include_delta { dt.data()[s * heads + h] } else { S::one() };
            let kv = &k.data()[(s * heads + h) * n..][..n];
            let vv = &v.data()[(s * heads + h) * d..][..d];
            for (ni, &kn) in kv.iter().enumerate() {
                for (di, &x) in vv.iter().enumerate() {
                    let o = &mut pooled[h * sz + ni * d + di];
                    *o = *o + kn * step * x;
                }
            }
        }
    }
    pooled.iter_mut().for_each(|p| *p = *p * inv_t);
    let pooled = Tensor::new(vec![heads, sz], pooled)?;
    let mut hidden = pooled.matmul(w.w1)?;
    let hw = w.b1.numel();
    for (i, v) in hidden.data_mut().iter_mut().enumerate() {
        *v = silu(*v + w.b1.data()[i % hw]);
    }
    let mut out = hidden.matmul(w.w2)?;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v + w.b2.data()[i % sz];
    }
    Ok(SsmState {
        h: out.reshape(vec![heads, n, d])?,
    })
}
