//! Token-by-token decoding with per-layer caches.
//!
//! While a layer's position is before its transition point it appends to a
//! key/value cache and attends over it. At the first position past the point
//! the converter turns the cached prefix into an SSM state once; from then on
//! the layer only updates that state.

use alloc::vec;
use alloc::vec::Vec;

use super::config::{Activation, ModelConfig, ZGating};
use super::params::LayerIds;
use super::Model;
use crate::converter::{convert, ConverterMode, MlpConverterWeights};
use crate::dual::{rope_single, AttentionKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::TransPointSchedule;
use crate::tape::scalar_fn::{silu, softplus};
use crate::tensor::Tensor;

fn vecmat<S: Scalar>(v: &[S], w: &Tensor<S>) -> Vec<S> {
    let (k, n) = (w.dim(0), w.dim(1));
    let mut out = vec![S::zero(); n];
    S::gemm(1, k, n, S::one(), v, k, 1, w.data(), n, 1, S::zero(), &mut out, n, 1);
    out
}

fn rmsnorm<S: Scalar>(x: &[S], w: &Tensor<S>, eps: f64) -> Vec<S> {
    let d = x.len();
    let ms = x.iter().map(|&v| v * v).sum::<S>() / S::lit(d as f64);
    let inv = S::one() / (ms + S::lit(eps)).sqrt();
    x.iter().zip(w.data()).map(|(&v, &g)| v * inv * g).collect()
}

#[derive(Debug, Clone, Default)]
struct LayerCache<S> {
    /// Most recent pre-activation rows for the C, B and x convolutions.
    conv_hist: [Vec<Vec<S>>; 3],
    keys_rot: Vec<Vec<S>>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    dts: Vec<Vec<S>>,
    decays: Vec<Vec<S>>,
    state: Option<Vec<S>>,
}

/// An incremental decoding session for one sequence.
pub struct Session<'m, S> {
    model: &'m Model<S>,
    points: Vec<usize>,
    caches: Vec<LayerCache<S>>,
    pos: usize,
    converter_calls: Vec<usize>,
}

impl<'m, S: Scalar> Session<'m, S> {
    pub fn new(model: &'m Model<S>, schedule: &TransPointSchedule) -> Self {
        let n = model.cfg.n_layers;
        Session {
            model,
            points: schedule.resolve(n),
            caches: (0..n).map(|_| LayerCache::default()).collect(),
            pos: 0,
            converter_calls: vec![0; n],
        }
    }

    /// Positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// How many times each layer ran the converter.
    pub fn converter_calls(&self) -> &[usize] {
        &self.converter_calls
    }

    /// Consumes one token and returns the next-token logits `[vocab]`.
    pub fn step(&mut self, token: u32) -> Result<Tensor<S>> {
        let model = self.model;
        let cfg = &model.cfg;
        if token as usize >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                position: self.pos,
                vocab: cfg.vocab,
            });
        }
        let d = cfg.d_model;
        let emb = model.params.get(model.layout.embed);
        let mut x: Vec<S> = emb.data()[token as usize * d..(token as usize + 1) * d].to_vec();
        for i in 0..cfg.n_layers {
            let ids = &model.layout.layers[i];
            let hn = rmsnorm(&x, model.params.get(ids.norm), cfg.norm_eps);
            let y = self.mix(i, ids, &hn, &x)?;
            for (a, b) in x.iter_mut().zip(&y) {
                *a = *a + *b;
            }
            for m in &model.layout.mlps[i] {
                let hn = rmsnorm(&x, model.params.get(m.norm), cfg.norm_eps);
                let g = vecmat(&hn, model.params.get(m.w_gate));
                let u = vecmat(&hn, model.params.get(m.w_up));
                let hidden: Vec<S> = g.iter().zip(&u).map(|(&a, &b)| silu(a) * b).collect();
                let out = vecmat(&hidden, model.params.get(m.w_down));
                for (a, b) in x.iter_mut().zip(&out) {
                    *a = *a + *b;
                }
            }
        }
        let xn = rmsnorm(&x, model.params.get(model.layout.final_norm), cfg.norm_eps);
        let vocab = cfg.vocab;
        let mut logits = vec![S::zero(); vocab];
        S::gemm(1, d, vocab, S::one(), &xn, d, 1, emb.data(), 1, d, S::zero(), &mut logits, vocab, 1);
        self.pos += 1;
        Tensor::new(vec![vocab], logits)
    }

    fn conv(&mut self, layer: usize, which: usize, pre: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
        let width = w.dim(0);
        let c = pre.len();
        let hist = &mut self.caches[layer].conv_hist[which];
        let mut out: Vec<S> = b.data().to_vec();
        for j in 0..width {
            let lag = width - 1 - j;
            let row: Option<&[S]> = if lag == 0 {
                Some(pre)
            } else if lag <= hist.len() {
                Some(&hist[hist.len() - lag])
            } else {
                None
            };
            if let Some(row) = row {
                for ci in 0..c {
                    out[ci] = out[ci] + w.data()[j * c + ci] * row[ci];
                }
            }
        }
        hist.push(pre.to_vec());
        if hist.len() >= width {
            hist.remove(0);
        }
        out
    }

    fn mix(&mut self, layer: usize, ids: &LayerIds, hn: &[S], resid: &[S]) -> Result<Vec<S>> {
        let model = self.model;
        let cfg: &ModelConfig = &model.cfg;
        let p = |id: usize| model.params.get(id);
        let (h, n, hd) = (cfg.n_heads, cfg.state_size, cfg.head_dim());
        let c_pre = vecmat(hn, p(ids.w_cq));
        let b_pre = vecmat(hn, p(ids.w_bk));
        let x_pre = vecmat(hn, p(ids.w_xv));
        let (c_conv, b_conv, x_conv) = if cfg.use_conv {
            (
                self.conv(layer, 0, &c_pre, p(ids.conv_c_w), p(ids.conv_c_b)),
                self.conv(layer, 1, &b_pre, p(ids.conv_b_w), p(ids.conv_b_b)),
                self.conv(layer, 2, &x_pre, p(ids.conv_x_w), p(ids.conv_x_b)),
            )
        } else {
            (c_pre.clone(), b_pre.clone(), x_pre.clone())
        };
        let act_v = |v: Vec<S>| -> Vec<S> {
            match cfg.activation {
                Activation::Standard => v.into_iter().map(silu).collect(),
                Activation::Identity => v,
            }
        };
        let (c, b, xv) = (c_conv, b_conv, act_v(x_conv));
        let (q, k, v) = if cfg.use_conv && !cfg.conv_on_attention {
            (c_pre, b_pre, act_v(x_pre))
        } else {
            (c.clone(), b.clone(), xv.clone())
        };
        let (dt, decay) = if cfg.unit_decay {
            (vec![S::one(); h], vec![S::one(); h])
        } else {
            let raw = vecmat(hn, p(ids.w_dt));
            let dt: Vec<S> = raw.iter().zip(p(ids.b_dt).data()).map(|(&r, &bb)| softplus(r + bb)).collect();
            let decay = dt
                .iter()
                .zip(p(ids.log_a).data())
                .map(|(&s, &la)| (-(s * la.exp())).exp())
                .collect();
            (dt, decay)
        };
        let pos = self.pos;
        let mut y = vec![S::zero(); h * hd];
        if pos < self.points[layer] {
            let (q, k_rot) = if cfg.use_rope {
                let qt = Tensor::new(vec![1, h, n], q)?;
                let kt = Tensor::new(vec![1, h, n], k.clone())?;
                (
                    rope_single(&qt, &[pos], cfg.rope_theta)?.into_data(),
                    rope_single(&kt, &[pos], cfg.rope_theta)?.into_data(),
                )
            } else {
                (q, k.clone())
            };
            let cache = &mut self.caches[layer];
            cache.keys_rot.push(k_rot);
            cache.keys.push(k);
            cache.values.push(v);
            cache.dts.push(dt);
            cache.decays.push(decay);
            let scale = S::lit(cfg.attention_scale());
            let len = cache.keys_rot.len();
            let mut w = vec![S::zero(); len];
            for hi in 0..h {
                let qh = &q[hi * n..(hi + 1) * n];
                for (j, wj) in w.iter_mut().enumerate() {
                    let kj = &cache.keys_rot[j][hi * n..(hi + 1) * n];
                    *wj = qh.iter().zip(kj).map(|(&a, &bb)| a * bb).sum::<S>() * scale;
                }
                if cfg.attention == AttentionKind::Softmax {
                    let m = w.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for wj in w.iter_mut() {
                        *wj = (*wj - m).exp();
                        z = z + *wj;
                    }
                    for wj in w.iter_mut() {
                        *wj = *wj / z;
                    }
                }
                let yh = &mut y[hi * hd..(hi + 1) * hd];
                for (j, &wj) in w.iter().enumerate() {
                    for (o, &vv) in yh.iter_mut().zip(&cache.values[j][hi * hd..(hi + 1) * hd]) {
                        *o = *o + wj * vv;
                    }
                }
            }
        } else {
            if self.caches[layer].state.is_none() {
                let state = self.convert_prefix(layer, ids)?;
                self.caches[layer].state = Some(state);
            }
            let state = self.caches[layer].state.as_mut().expect("initialised above");
            let sz = n * hd;
            for hi in 0..h {
                let hs = &mut state[hi * sz..(hi + 1) * sz];
                for ni in 0..n {
                    let coef = b[hi * n + ni] * dt[hi];
                    let row = &mut hs[ni * hd..(ni + 1) * hd];
                    for (hv, &xx) in row.iter_mut().zip(&xv[hi * hd..(hi + 1) * hd]) {
                        *hv = decay[hi] * *hv + coef * xx;
                    }
                }
                let yh = &mut y[hi * hd..(hi + 1) * hd];
                for ni in 0..n {
                    let cn = c[hi * n + ni];
                    for (o, &hv) in yh.iter_mut().zip(&hs[ni * hd..(ni + 1) * hd]) {
                        *o = *o + cn * hv;
                    }
                }
            }
            if cfg.z_gating == ZGating::SiluGate {
                let z = vecmat(hn, p(ids.w_z));
                for (o, &zz) in y.iter_mut().zip(&z) {
                    *o = *o * silu(zz);
                }
            }
        }
        let gate_src = match cfg.z_gating {
            ZGating::GlobalH => Some(hn),
            ZGating::GlobalResidual => Some(resid),
            _ => None,
        };
        if let Some(src) = gate_src {
            let z = vecmat(src, p(ids.w_z));
            for (o, &zz) in y.iter_mut().zip(&z) {
                *o = *o * silu(zz);
            }
        }
        Ok(vecmat(&y, p(ids.w_o)))
    }

    fn convert_prefix(&mut self, layer: usize, ids: &LayerIds) -> Result<Vec<S>> {
        let model = self.model;
        let cfg = &model.cfg;
        let (h, n, hd) = (cfg.n_heads, cfg.state_size, cfg.head_dim());
        let cache = &self.caches[layer];
        let t = cache.keys.len();
        if t == 0 {
            return Ok(vec![S::zero(); h * n * hd]);
        }
        let flat = |rows: &[Vec<S>]| rows.iter().flatten().copied().collect::<Vec<S>>();
        let k = Tensor::new(vec![t, h, n], flat(&cache.keys))?;
        let v = Tensor::new(vec![t, h, hd], flat(&cache.values))?;
        let dt = Tensor::new(vec![t, h], flat(&cache.dts))?;
        let decay = Tensor::new(vec![t, h], flat(&cache.decays))?;
        let weights = match (cfg.converter.mode, ids.converter) {
            (ConverterMode::LearnedMlp, Some(c)) => Some(MlpConverterWeights {
                w1: model.params.get(c.w1),
                b1: model.params.get(c.b1),
                w2: model.params.get(c.w2),
                b2: model.params.get(c.b2),
            }),
            _ => None,
        };
        let state = convert(&k, &v, &dt, &decay, &cfg.converter, weights.as_ref())?;
        self.converter_calls[layer] += 1;
        Ok(state.h.into_data())
    }
}

fn argmax<S: Scalar>(v: &[S]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding: returns the prompt followed by `n_new` argmax tokens.
pub fn generate<S: Scalar>(
    model: &Model<S>,
    prompt: &[u32],
    n_new: usize,
    schedule: &TransPointSchedule,
) -> Result<Vec<u32>> {
    let mut out = prompt.to_vec();
    if n_new == 0 {
        return Ok(out);
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("generation needs a non-empty prompt".into()));
    }
    let mut session = Session::new(model, schedule);
    let mut logits = None;
    for &t in prompt {
        logits = Some(session.step(t)?);
    }
    for i in 0..n_new {
        let next = argmax(logits.as_ref().expect("prompt is non-empty").data());
        out.push(next);
        if i + 1 < n_new {
            logits = Some(session.step(next)?);
        }
    }
    Ok(out)
}
