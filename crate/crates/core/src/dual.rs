//! The two sequence-mixing mechanisms over shared projections.
//!
//! Attention reads `(Q, K, V)`; the state-space model reads `(C, B, x)` with a
//! per-head scalar decay `Ā = exp(-Δ·exp(logA))`. Both consume tensors laid out
//! as `[T, H, D]` (or `[Bt, T, H, D]` with a leading batch axis), so the same
//! projection outputs can be fed to either.
//!
//! The SSM recurrence is `h_t = Ā_t h_{t-1} + B_t ⊗ (Δ_t x_t)`, `y_t = C_tᵀ h_t`,
//! with `h_{-1}` the initial state. Its quadratic form is
//! `y = (A× ∘ C Bᵀ)(Δ ∘ x)` where `A×[i, j] = Ā_{j+1} ⋯ Ā_i` below the diagonal.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Score function used on the attention path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// `softmax(Q Kᵀ · scale) V` with a causal mask.
    Softmax,
    /// `(L ∘ Q Kᵀ · scale) V`: masked linear attention, used to probe duality.
    Linear,
}

/// Inputs of [`attention_forward`]; every tensor is `[T, H, D]`.
#[derive(Debug, Clone)]
pub struct AttentionInputs<S> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// Rotary base; `None` skips the rotation.
    pub rope_theta: Option<f64>,
}

/// Inputs of the state-space path.
#[derive(Debug, Clone)]
pub struct SsmInputs<S> {
    /// `[T, H, N]`
    pub c: Tensor<S>,
    /// `[T, H, N]`
    pub b: Tensor<S>,
    /// `[T, H, D]`
    pub x: Tensor<S>,
    /// Step sizes Δ, `[T, H]`, positive.
    pub dt: Tensor<S>,
    /// Discrete decay Ā, `[T, H]`, in `(0, 1]`.
    pub decay: Tensor<S>,
}

/// Recurrent state carried across positions: `[H, N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState<S> {
    pub h: Tensor<S>,
}

impl<S: Scalar> SsmState<S> {
    pub fn zeros(heads: usize, state: usize, head_dim: usize) -> Self {
        SsmState {
            h: Tensor::zeros(vec![heads, state, head_dim]),
        }
    }
}

/// `Ā = exp(-Δ · exp(logA))` for `dt: [.., H]` and `log_a: [H]`.
pub fn discretize<S: Scalar>(dt: &Tensor<S>, log_a: &Tensor<S>) -> Result<Tensor<S>> {
    let h = log_a.numel();
    if log_a.rank() != 1 || dt.shape().last() != Some(&h) {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: dt.shape().to_vec(),
            rhs: log_a.shape().to_vec(),
        });
    }
    let rates: Vec<S> = log_a.data().iter().map(|v| v.exp()).collect();
    let data = dt
        .data()
        .iter()
        .enumerate()
        .map(|(i, &d)| (-(d * rates[i % h])).exp())
        .collect();
    Tensor::new(dt.shape().to_vec(), data)
}

impl<S: Scalar> SsmInputs<S> {
    /// Builds the inputs with Ā derived from a per-head `logA`.
    pub fn from_log_a(
        c: Tensor<S>,
        b: Tensor<S>,
        x: Tensor<S>,
        dt: Tensor<S>,
        log_a: &Tensor<S>,
    ) -> Result<Self> {
        let decay = discretize(&dt, log_a)?;
        Ok(SsmInputs { c, b, x, dt, decay })
    }
}

/// `(batch, time, heads, width)` of a rank-3 or rank-4 sequence tensor.
pub(crate) fn seq_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [t, h, d] => Some((1, t, h, d)),
        [b, t, h, d] => Some((b, t, h, d)),
        _ => None,
    }
}

fn dims_or_err(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    seq_dims(a).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Shape summary of an attention call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub t: usize,
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
}

pub(crate) fn attention_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnDims> {
    let (bq, tq, hq, dq) = dims_or_err("attention", q, k)?;
    let (bk, tk, hk, dk) = dims_or_err("attention", k, q)?;
    let (bv, tv, hv, dv) = dims_or_err("attention", v, q)?;
    if q.len() != k.len()
        || k.len() != v.len()
        || (bq, tq, hq, dq) != (bk, tk, hk, dk)
        || (bv, tv, hv) != (bq, tq, hq)
    {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.to_vec(),
            rhs: v.to_vec(),
        });
    }
    Ok(AttnDims {
        batch: bq,
        t: tq,
        heads: hq,
        dk: dq,
        dv,
    })
}

/// Forward attention kernel. Returns the output and the `[B, H, T, T]` score
/// weights (softmax probabilities, or raw masked scores for `Linear`).
pub(crate) fn attention_kernel<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    kind: AttentionKind,
    scale: S,
    causal: bool,
) -> Result<(Tensor<S>, Vec<S>)> {
    let d = attention_dims(q.shape(), k.shape(), v.shape())?;
    let (t, hn, dk, dv) = (d.t, d.heads, d.dk, d.dv);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![S::zero(); d.batch * t * hn * dv];
    let mut weights = vec![S::zero(); d.batch * hn * t * t];
    for b in 0..d.batch {
        for h in 0..hn {
            let wbase = (b * hn + h) * t * t;
            for i in 0..t {
                let qi = &qd[((b * t + i) * hn + h) * dk..][..dk];
                let jmax = if causal { i + 1 } else { t };
                let row = &mut weights[wbase + i * t..wbase + (i + 1) * t];
                for (j, w) in row.iter_mut().enumerate().take(jmax) {
                    let kj = &kd[((b * t + j) * hn + h) * dk..][..dk];
                    let dot: S = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum();
                    *w = dot * scale;
                }
                if kind == AttentionKind::Softmax {
                    let m = row[..jmax]
                        .iter()
                        .copied()
                        .fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for w in &mut row[..jmax] {
                        *w = (*w - m).exp();
                        z = z + *w;
                    }
                    for w in &mut row[..jmax] {
                        *w = *w / z;
                    }
                }
                let oi = &mut out[((b * t + i) * hn + h) * dv..][..dv];
                for (j, &w) in row.iter().enumerate().take(jmax) {
                    let vj = &vd[((b * t + j) * hn + h) * dv..][..dv];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o = *o + w * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(v.shape().to_vec(), out)?, weights))
}

/// Gradients `(gq, gk, gv)` of the attention kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    weights: &[S],
    g: &[S],
    kind: AttentionKind,
    scale: S,
    causal: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let d = attention_dims(q.shape(), k.shape(), v.shape()).expect("checked in forward");
    let (t, hn, dk, dv) = (d.t, d.heads, d.dk, d.dv);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![S::zero(); qd.len()];
    let mut gk = vec![S::zero(); kd.len()];
    let mut gv = vec![S::zero(); vd.len()];
    let mut gw = vec![S::zero(); t];
    for b in 0..d.batch {
        for h in 0..hn {
            let wbase = (b * hn + h) * t * t;
            for i in 0..t {
                let jmax = if causal { i + 1 } else { t };
                let row = &weights[wbase + i * t..wbase + (i + 1) * t];
                let gi = &g[((b * t + i) * hn + h) * dv..][..dv];
                for j in 0..jmax {
                    let voff = ((b * t + j) * hn + h) * dv;
                    let vj = &vd[voff..voff + dv];
                    gw[j] = gi.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                    for (gvv, &gg) in gv[voff..voff + dv].iter_mut().zip(gi) {
                        *gvv = *gvv + row[j] * gg;
                    }
                }
                if kind == AttentionKind::Softmax {
                    let dot: S = (0..jmax).map(|j| row[j] * gw[j]).sum();
                    for j in 0..jmax {
                        gw[j] = row[j] * (gw[j] - dot);
                    }
                }
                let qoff = ((b * t + i) * hn + h) * dk;
                for j in 0..jmax {
                    let s = gw[j] * scale;
                    let koff = ((b * t + j) * hn + h) * dk;
                    for c in 0..dk {
                        gq[qoff + c] = gq[qoff + c] + s * kd[koff + c];
                        gk[koff + c] = gk[koff + c] + s * qd[qoff + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Causal softmax attention with `1/√d` scaling over `[T, H, D]` inputs.
///
/// When `rope_theta` is set, `Q` and `K` are rotated by absolute position
/// before the scores are taken. An empty sequence yields an empty output.
pub fn attention_forward<S: Scalar>(inp: &AttentionInputs<S>, causal: bool) -> Result<Tensor<S>> {
    let d = attention_dims(inp.q.shape(), inp.k.shape(), inp.v.shape())?;
    if d.t == 0 {
        return Ok(Tensor::zeros(inp.v.shape().to_vec()));
    }
    let scale = S::one() / S::lit(d.dk as f64).sqrt();
    let (q, k) = match inp.rope_theta {
        Some(theta) => {
            let positions: Vec<usize> = (0..d.t).collect();
            apply_rope(&inp.q, &inp.k, &positions, theta)?
        }
        None => (inp.q.clone(), inp.k.clone()),
    };
    attention_kernel(&q, &k, &inp.v, AttentionKind::Softmax, scale, causal).map(|r| r.0)
}

// ---------------------------------------------------------------------------
// Rotary embedding
// ---------------------------------------------------------------------------

fn rope_rotate<S: Scalar>(x: &Tensor<S>, positions: &[usize], theta: f64, sign: f64) -> Result<Tensor<S>> {
    let (b, t, h, d) = seq_dims(x.shape()).ok_or_else(|| invalid("rope expects [T,H,D] or [B,T,H,D]"))?;
    if d % 2 != 0 {
        return Err(invalid(alloc::format!("rope needs an even head width, got {d}")));
    }
    if positions.len() != t {
        return Err(invalid(alloc::format!(
            "rope got {} positions for length {t}",
            positions.len()
        )));
    }
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| libm::pow(theta, -((2 * i) as f64) / d as f64))
        .collect();
    let mut out = x.clone();
    let data = out.data_mut();
    for (ti, &pos) in positions.iter().enumerate() {
        for (i, &f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (sin, cos) = (S::lit(sign * libm::sin(angle)), S::lit(libm::cos(angle)));
            for bi in 0..b {
                for hi in 0..h {
                    let off = ((bi * t + ti) * h + hi) * d + 2 * i;
                    let (a, c) = (data[off], data[off + 1]);
                    data[off] = a * cos - c * sin;
                    data[off + 1] = a * sin + c * cos;
                }
            }
        }
    }
    Ok(out)
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every head vector by
/// `position · theta^(-2i/D)`.
pub fn rope_single<S: Scalar>(x: &Tensor<S>, positions: &[usize], theta: f64) -> Result<Tensor<S>> {
    rope_rotate(x, positions, theta, 1.0)
}

/// Adjoint (inverse rotation) of [`rope_single`].
pub(crate) fn rope_inverse<S: Scalar>(x: &Tensor<S>, positions: &[usize], theta: f64) -> Result<Tensor<S>> {
    rope_rotate(x, positions, theta, -1.0)
}

/// Rotary position embedding applied to a query/key pair.
pub fn apply_rope<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    positions: &[usize],
    theta: f64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((rope_single(q, positions, theta)?, rope_single(k, positions, theta)?))
}

// ---------------------------------------------------------------------------
// State-space recurrence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub t: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
}

pub(crate) fn scan_dims(
    b: &[usize],
    x: &[usize],
    dt: &[usize],
    decay: &[usize],
    c: Option<&[usize]>,
    h0: Option<&[usize]>,
) -> Result<ScanDims> {
    let err = |lhs: &[usize], rhs: &[usize]| Error::ShapeMismatch {
        op: "ssm_scan",
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    };
    let (bb, t, h, n) = seq_dims(b).ok_or_else(|| err(b, x))?;
    let (bx, tx, hx, d) = seq_dims(x).ok_or_else(|| err(x, b))?;
    if b.len() != x.len() || (bx, tx, hx) != (bb, t, h) {
        return Err(err(b, x));
    }
    let lead = &b[..b.len() - 1];
    if dt != lead {
        return Err(err(dt, b));
    }
    if decay != lead {
        return Err(err(decay, b));
    }
    if let Some(c) = c {
        if c != b {
            return Err(err(c, b));
        }
    }
    if let Some(h0) = h0 {
        let expect: Vec<usize> = if b.len() == 4 {
            vec![bb, h, n, d]
        } else {
            vec![h, n, d]
        };
        if h0 != expect.as_slice() {
            return Err(err(h0, &expect));
        }
    }
    Ok(ScanDims {
        batch: bb,
        t,
        heads: h,
        n,
        d,
    })
}

/// Runs the recurrence, returning the readout `y` (when `c` is given), every
/// intermediate state `[B, T, H, N, D]` and the final state `[B, H, N, D]`.
pub(crate) fn scan_kernel<S: Scalar>(
    c: Option<&[S]>,
    b: &[S],
    x: &[S],
    dt: &[S],
    decay: &[S],
    h0: Option<&[S]>,
    dims: ScanDims,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let ScanDims { batch, t, heads, n, d } = dims;
    let sz = n * d;
    let mut states = vec![S::zero(); batch * t * heads * sz];
    let mut y = if c.is_some() {
        vec![S::zero(); batch * t * heads * d]
    } else {
        Vec::new()
    };
    let mut fin = vec![S::zero(); batch * heads * sz];
    if let Some(h0) = h0 {
        fin.copy_from_slice(h0);
    }
    let mut cur = vec![S::zero(); sz];
    for bi in 0..batch {
        for hi in 0..heads {
            let fo = (bi * heads + hi) * sz;
            cur.copy_from_slice(&fin[fo..fo + sz]);
            for ti in 0..t {
                let row = (bi * t + ti) * heads + hi;
                let a = decay[row];
                let step = dt[row];
                let bv = &b[row * n..row * n + n];
                let xv = &x[row * d..row * d + d];
                for (ni, &bn) in bv.iter().enumerate() {
                    let coef = bn * step;
                    let hrow = &mut cur[ni * d..ni * d + d];
                    for (hv, &xx) in hrow.iter_mut().zip(xv) {
                        *hv = a * *hv + coef * xx;
                    }
                }
                states[row * sz..row * sz + sz].copy_from_slice(&cur);
                if let Some(c) = c {
                    let cv = &c[row * n..row * n + n];
                    let yv = &mut y[row * d..row * d + d];
                    for (ni, &cn) in cv.iter().enumerate() {
                        for (yy, &hv) in yv.iter_mut().zip(&cur[ni * d..ni * d + d]) {
                            *yy = *yy + cn * hv;
                        }
                    }
                }
            }
            fin[fo..fo + sz].copy_from_slice(&cur);
        }
    }
    (y, states, fin)
}

/// Gradients of the scan.
pub(crate) struct ScanGrads<S> {
    pub c: Vec<S>,
    pub b: Vec<S>,
    pub x: Vec<S>,
    pub dt: Vec<S>,
    pub decay: Vec<S>,
    pub h0: Vec<S>,
}

/// Reverse pass of [`scan_kernel`] given upstream gradients of `y` and/or the
/// final state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<S: Scalar>(
    c: Option<&[S]>,
    b: &[S],
    x: &[S],
    dt: &[S],
    decay: &[S],
    h0: Option<&[S]>,
    states: &[S],
    gy: Option<&[S]>,
    gfinal: Option<&[S]>,
    dims: ScanDims,
) -> ScanGrads<S> {
    let ScanDims { batch, t, heads, n, d } = dims;
    let sz = n * d;
    let mut g = ScanGrads {
        c: vec![S::zero(); if c.is_some() { b.len() } else { 0 }],
        b: vec![S::zero(); b.len()],
        x: vec![S::zero(); x.len()],
        dt: vec![S::zero(); dt.len()],
        decay: vec![S::zero(); decay.len()],
        h0: vec![S::zero(); batch * heads * sz],
    };
    let mut gh = vec![S::zero(); sz];
    for bi in 0..batch {
        for hi in 0..heads {
            let fo = (bi * heads + hi) * sz;
            match gfinal {
                Some(gf) => gh.copy_from_slice(&gf[fo..fo + sz]),
                None => gh.iter_mut().for_each(|v| *v = S::zero()),
            }
            for ti in (0..t).rev() {
                let row = (bi * t + ti) * heads + hi;
                let h_t = &states[row * sz..row * sz + sz];
                if let (Some(c), Some(gy)) = (c, gy) {
                    let cv = &c[row * n..row * n + n];
                    let gyv = &gy[row * d..row * d + d];
                    for ni in 0..n {
                        let hrow = &h_t[ni * d..ni * d + d];
                        g.c[row * n + ni] = hrow.iter().zip(gyv).map(|(&a, &bb)| a * bb).sum();
                        let ghrow = &mut gh[ni * d..ni * d + d];
                        for (gg, &yy) in ghrow.iter_mut().zip(gyv) {
                            *gg = *gg + cv[ni] * yy;
                        }
                    }
                }
                let a = decay[row];
                let step = dt[row];
                let bv = &b[row * n..row * n + n];
                let xv = &x[row * d..row * d + d];
                let prev: &[S] = if ti > 0 {
                    &states[(row - heads) * sz..(row - heads) * sz + sz]
                } else {
                    match h0 {
                        Some(h0) => &h0[fo..fo + sz],
                        None => &[],
                    }
                };
                if !prev.is_empty() {
                    g.decay[row] = prev.iter().zip(&gh).map(|(&p, &q)| p * q).sum();
                }
                let mut gdt = S::zero();
                for ni in 0..n {
                    let ghrow = &gh[ni * d..ni * d + d];
                    let s: S = ghrow.iter().zip(xv).map(|(&p, &q)| p * q).sum();
                    g.b[row * n + ni] = s * step;
                    gdt = gdt + s * bv[ni];
                    for (gx, &gg) in g.x[row * d..row * d + d].iter_mut().zip(ghrow) {
                        *gx = *gx + step * bv[ni] * gg;
                    }
                }
                g.dt[row] = gdt;
                for v in gh.iter_mut() {
                    *v = *v * a;
                }
            }
            g.h0[fo..fo + sz].copy_from_slice(&gh);
        }
    }
    g
}

/// Sequential left-to-right scan over `[T, H, ·]` inputs.
///
/// Returns the readout `[T, H, D]` and the final state, which seeds a later
/// call to continue the same sequence.
pub fn ssm_scan<S: Scalar>(inp: &SsmInputs<S>, h0: Option<&SsmState<S>>) -> Result<(Tensor<S>, SsmState<S>)> {
    let dims = scan_dims(
        inp.b.shape(),
        inp.x.shape(),
        inp.dt.shape(),
        inp.decay.shape(),
        Some(inp.c.shape()),
        h0.map(|s| s.h.shape()),
    )?;
    if inp.b.rank() != 3 {
        return Err(invalid("ssm_scan expects unbatched [T, H, N] inputs"));
    }
    let (y, _, fin) = scan_kernel(
        Some(inp.c.data()),
        inp.b.data(),
        inp.x.data(),
        inp.dt.data(),
        inp.decay.data(),
        h0.map(|s| s.h.data()),
        dims,
    );
    Ok((
        Tensor::new(inp.x.shape().to_vec(), y)?,
        SsmState {
            h: Tensor::new(vec![dims.heads, dims.n, dims.d], fin)?,
        },
    ))
}

/// Lower-triangular decay matrix: `1` on the diagonal, `decay[j+1] ⋯ decay[i]`
/// below it, `0` above. `decay[0]` does not appear in any entry.
pub fn build_a_cross<S: Scalar>(decay: &[S]) -> Tensor<S> {
    let t = decay.len();
    let mut m = Tensor::zeros(vec![t, t]);
    let data = m.data_mut();
    for j in 0..t {
        let mut prod = S::one();
        data[j * t + j] = prod;
        for i in j + 1..t {
            prod = prod * decay[i];
            data[i * t + j] = prod;
        }
    }
    m
}

fn head_slice<S: Scalar>(t: &Tensor<S>, head: usize) -> Result<Tensor<S>> {
    // [T, H, W] -> [T, W] for one head.
    let w = t.dim(2);
    t.slice_axis(1, head, head + 1)?.reshape(vec![t.dim(0), w])
}

/// Quadratic (masked-matrix) form of the scan with a zero initial state.
pub fn ssm_dual<S: Scalar>(inp: &SsmInputs<S>) -> Result<Tensor<S>> {
    let dims = scan_dims(
        inp.b.shape(),
        inp.x.shape(),
        inp.dt.shape(),
        inp.decay.shape(),
        Some(inp.c.shape()),
        None,
    )?;
    if inp.b.rank() != 3 {
        return Err(invalid("ssm_dual expects unbatched [T, H, N] inputs"));
    }
    let (t, heads, d) = (dims.t, dims.heads, dims.d);
    let mut out = Tensor::zeros(vec![t, heads, d]);
    for h in 0..heads {
        let c = head_slice(&inp.c, h)?;
        let b = head_slice(&inp.b, h)?;
        let x = head_slice(&inp.x, h)?;
        let decay: Vec<S> = (0..t).map(|i| inp.decay.get(&[i, h])).collect();
        let a_cross = build_a_cross(&decay);
        let mut mixer = c.matmul(&b.transpose_last2()?)?;
        for (m, &a) in mixer.data_mut().iter_mut().zip(a_cross.data()) {
            *m = *m * a;
        }
        let xs = Tensor::from_fn(vec![t, d], |i| inp.dt.get(&[i / d, h]) * x.data()[i]);
        let y = mixer.matmul(&xs)?;
        for i in 0..t {
            for k in 0..d {
                out.set(&[i, h, k], y.get(&[i, k]));
            }
        }
    }
    Ok(out)
}

/// [`ssm_dual`] plus the contribution of a non-zero initial state,
/// `C_t · (Ā_0 ⋯ Ā_t) h0`, at every position.
pub fn ssm_dual_with_state<S: Scalar>(inp: &SsmInputs<S>, h0: &SsmState<S>) -> Result<Tensor<S>> {
    let mut out = ssm_dual(inp)?;
    let (t, heads, n) = (inp.c.dim(0), inp.c.dim(1), inp.c.dim(2));
    let d = inp.x.dim(2);
    if h0.h.shape() != [heads, n, d] {
        return Err(Error::ShapeMismatch {
            op: "ssm_dual_with_state",
            lhs: h0.h.shape().to_vec(),
            rhs: vec![heads, n, d],
        });
    }
    for h in 0..heads {
        let mut carry = S::one();
        for i in 0..t {
            carry = carry * inp.decay.get(&[i, h]);
            for k in 0..d {
                let mut acc = S::zero();
                for j in 0..n {
                    acc = acc + inp.c.get(&[i, h, j]) * h0.h.get(&[h, j, k]);
                }
                let cur = out.get(&[i, h, k]);
                out.set(&[i, h, k], cur + carry * acc);
            }
        }
    }
    Ok(out)
}
