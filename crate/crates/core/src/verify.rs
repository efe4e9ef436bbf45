//! Property suites checking the equivalences the architecture relies on.
//!
//! Each suite returns one [`Check`] per property with the largest deviation
//! seen; the caller decides how to report them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::converter::{convert, converter_row_form, ConverterConfig};
use crate::dual::{attention_kernel, scan_dims, scan_kernel, ssm_dual, ssm_dual_with_state, ssm_scan, AttentionKind, SsmInputs, SsmState};
use crate::error::Result;
use crate::gradcheck;
use crate::model::reference::{layer_pair, reference_forward, Mechanism};
use crate::model::{next_token_loss, Model, ModelConfig, Session};
use crate::rng::{Rng, SeedStream};
use crate::schedule::preset;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `max_dev <= tol` (and is not NaN).
    pub fn within(name: impl Into<String>, max_dev: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            max_dev,
            tol,
            pass: max_dev <= tol,
        }
    }

    fn flag(name: impl Into<String>, value: f64, pass: bool) -> Self {
        Check {
            name: name.into(),
            max_dev: value,
            tol: 0.0,
            pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Duality,
    Converter,
    Gradients,
    Degeneracy,
    Cache,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Duality, Suite::Converter, Suite::Gradients, Suite::Degeneracy, Suite::Cache];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Duality => "duality",
            Suite::Converter => "converter",
            Suite::Gradients => "gradients",
            Suite::Degeneracy => "degeneracy",
            Suite::Cache => "cache",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn run(self, seed: u64) -> Result<Vec<Check>> {
        let seeds = SeedStream::new(seed).child(self.name());
        match self {
            Suite::Duality => duality(&seeds),
            Suite::Converter => converter(&seeds),
            Suite::Gradients => gradients(&seeds),
            Suite::Degeneracy => degeneracy(&seeds),
            Suite::Cache => cache(&seeds),
        }
    }
}

pub const TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;

fn normal(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Random SSM inputs with step sizes in `[0.01, 0.5]` and rates in `[0.5, 4]`.
pub fn random_ssm(rng: &mut Rng, t: usize, h: usize, n: usize, d: usize) -> SsmInputs<f64> {
    let dt = Tensor::from_fn(vec![t, h], |_| rng.random_range(0.01..0.5));
    let log_a = Tensor::from_fn(vec![h], |_| libm::log(rng.random_range(0.5..4.0)));
    SsmInputs::from_log_a(
        normal(rng, vec![t, h, n]),
        normal(rng, vec![t, h, n]),
        normal(rng, vec![t, h, d]),
        dt,
        &log_a,
    )
    .expect("consistent shapes")
}

fn split_ssm(inp: &SsmInputs<f64>, start: usize, end: usize) -> Result<SsmInputs<f64>> {
    Ok(SsmInputs {
        c: inp.c.slice_axis(0, start, end)?,
        b: inp.b.slice_axis(0, start, end)?,
        x: inp.x.slice_axis(0, start, end)?,
        dt: inp.dt.slice_axis(0, start, end)?,
        decay: inp.decay.slice_axis(0, start, end)?,
    })
}

fn duality(seeds: &SeedStream) -> Result<Vec<Check>> {
    let mut rng = seeds.rng("instances");
    let (mut zero_state, mut with_state, mut linear) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let t = rng.random_range(1..=64);
        let n = rng.random_range(1..=16);
        let h = rng.random_range(1..=3);
        let d = rng.random_range(1..=8);
        let inp = random_ssm(&mut rng, t, h, n, d);
        let (scan, _) = ssm_scan(&inp, None)?;
        zero_state = zero_state.max(ssm_dual(&inp)?.max_abs_diff(&scan)?);
        let h0 = SsmState { h: normal(&mut rng, vec![h, n, d]) };
        let (scan, _) = ssm_scan(&inp, Some(&h0))?;
        with_state = with_state.max(ssm_dual_with_state(&inp, &h0)?.max_abs_diff(&scan)?);

        // Unit decay and unit steps turn the scan into causal linear attention.
        let ones = Tensor::full(vec![t, h], 1.0);
        let unit = SsmInputs {
            dt: ones.clone(),
            decay: ones,
            ..inp.clone()
        };
        let (scan, _) = ssm_scan(&unit, None)?;
        let (attn, _) = attention_kernel(&unit.c, &unit.b, &unit.x, AttentionKind::Linear, 1.0, true)?;
        linear = linear.max(attn.max_abs_diff(&scan)?);
    }
    Ok(vec![
        Check::within("dual form matches scan (zero state)", zero_state, TOL),
        Check::within("dual form matches scan (initial state)", with_state, TOL),
        Check::within("unit-decay scan matches causal linear attention", linear, TOL),
    ])
}

fn converter(seeds: &SeedStream) -> Result<Vec<Check>> {
    let mut rng = seeds.rng("sequences");
    let (t, h, n, d) = (32, 2, 4, 3);
    let cfg = ConverterConfig::default();
    let (mut suffix, mut state, mut rows) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let inp = random_ssm(&mut rng, t, h, n, d);
        let (full, _) = ssm_scan(&inp, None)?;
        let dims = scan_dims(inp.b.shape(), inp.x.shape(), inp.dt.shape(), inp.decay.shape(), None, None)?;
        let (_, states, _) = scan_kernel(None, inp.b.data(), inp.x.data(), inp.dt.data(), inp.decay.data(), None, dims);
        let row_form = converter_row_form(&inp.b, &inp.x, &inp.dt, &inp.decay, true)?;
        rows = rows.max(
            row_form
                .data()
                .iter()
                .zip(&states)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        for p in 1..t {
            let pre = split_ssm(&inp, 0, p)?;
            let h0 = convert(&pre.b, &pre.x, &pre.dt, &pre.decay, &cfg, None)?;
            let (_, scanned) = ssm_scan(&pre, None)?;
            state = state.max(h0.h.max_abs_diff(&scanned.h)?);
            let (y, _) = ssm_scan(&split_ssm(&inp, p, t)?, Some(&h0))?;
            suffix = suffix.max(y.max_abs_diff(&full.slice_axis(0, p, t)?)?);
        }
    }
    Ok(vec![
        Check::within("convert-then-scan matches full scan on the suffix", suffix, TOL),
        Check::within("converted state matches scanned prefix state", state, TOL),
        Check::within("row form matches every intermediate state", rows, TOL),
    ])
}

fn op_checks(rng: &mut Rng) -> Result<Vec<(String, f64)>> {
    type F = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, F)> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.exp(y);
            Ok(t.sum(y))
        }),
        ("rmsnorm", vec![vec![3, 5], vec![5]], |t, v| {
            let y = t.rmsnorm(v[0], v[1], 1e-6)?;
            let y = t.sigmoid(y);
            Ok(t.sum(y))
        }),
        ("softmax attention", vec![vec![1, 5, 2, 4], vec![1, 5, 2, 4], vec![1, 5, 2, 3]], |t, v| {
            let y = t.attention(v[0], v[1], v[2], AttentionKind::Softmax, 0.5, true)?;
            let y = t.silu(y);
            Ok(t.sum(y))
        }),
        ("rope", vec![vec![1, 4, 2, 4]], |t, v| {
            let y = t.rope(v[0], &[0, 1, 2, 3], 10000.0)?;
            let y = t.softplus(y);
            Ok(t.sum(y))
        }),
        ("causal conv", vec![vec![1, 6, 3], vec![4, 3], vec![3]], |t, v| {
            let y = t.causal_conv(v[0], v[1], v[2])?;
            let y = t.silu(y);
            Ok(t.sum(y))
        }),
        (
            "scan with initial state",
            vec![vec![1, 5, 2, 3], vec![1, 5, 2, 3], vec![1, 5, 2, 2], vec![1, 5, 2], vec![1, 5, 2], vec![1, 2, 3, 2]],
            |t, v| {
                let dt = t.softplus(v[3]);
                let decay = t.sigmoid(v[4]);
                let y = t.ssm_scan(v[0], v[1], v[2], dt, decay, Some(v[5]))?;
                let y = t.silu(y);
                Ok(t.sum(y))
            },
        ),
        ("final state", vec![vec![1, 4, 2, 3], vec![1, 4, 2, 2], vec![1, 4, 2], vec![1, 4, 2]], |t, v| {
            let dt = t.softplus(v[2]);
            let decay = t.sigmoid(v[3]);
            let s = t.ssm_final_state(v[0], v[1], dt, decay)?;
            let s = t.silu(s);
            Ok(t.sum(s))
        }),
        ("cross entropy", vec![vec![4, 6]], |t, v| {
            t.cross_entropy(v[0], &[1, 0, 5, 2], &[1.0, 0.0, 0.5, 1.0])
        }),
    ];
    let mut out = Vec::new();
    for (name, shapes, f) in cases {
        let inputs: Vec<Tensor<f64>> = shapes.into_iter().map(|s| normal(rng, s)).collect();
        let reports = gradcheck::check(&inputs, 1e-6, f)?;
        out.push((String::from(name), gradcheck::worst(&reports)));
    }
    Ok(out)
}

/// Result of the model-level gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    /// Norm-wise relative error over the sampled coordinates.
    pub rel_err: f64,
    /// Norm of the loss gradient with respect to the prefix input embeddings.
    pub prefix_grad_norm: f64,
    pub coords: usize,
}

/// Checks sampled parameter and input-embedding gradients of `model` against
/// central differences. The loss covers suffix tokens only (positions after
/// the largest transition point).
pub fn model_gradcheck(model: &Model<f64>, tokens: &[u32], points: &[usize], rng: &mut Rng) -> Result<ModelGradCheck> {
    let t = tokens.len();
    let split = points.iter().copied().max().unwrap_or(0).min(t);
    let mask: Vec<bool> = (0..t).map(|i| i > split).collect();
    let batch = [tokens.to_vec()];
    let mask = [mask];
    let emb = {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let (e, _) = model.embed(&mut tape, &vars, &batch)?;
        tape.value(e).clone()
    };
    let loss_of = |m: &Model<f64>, e: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = m.params.bind(&mut tape, false);
        let x = tape.constant(e.clone());
        let (logits, _) = m.forward_embedded(&mut tape, &vars, x, points)?;
        let l = next_token_loss(&mut tape, logits, &batch, &mask)?;
        Ok(tape.value(l).item())
    };

    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let x = tape.param(emb.clone());
    let (logits, _) = model.forward_embedded(&mut tape, &vars, x, points)?;
    let l = next_token_loss(&mut tape, logits, &batch, &mask)?;
    let grads = tape.backward(l)?;
    let d = emb.dim(2);
    let prefix_grad_norm = grads
        .get(x)
        .map(|g| libm::sqrt(g.data()[..split * d].iter().map(|v| v * v).sum::<f64>()))
        .unwrap_or(0.0);

    let eps = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    for (pi, var) in vars.iter().enumerate() {
        let numel = model.params.get(pi).numel();
        for _ in 0..2 {
            let j = rng.random_range(0..numel);
            analytic.push(grads.get(*var).map_or(0.0, |g| g.data()[j]));
            let orig = model.params.get(pi).data()[j];
            probe.params.get_mut(pi).data_mut()[j] = orig + eps;
            let up = loss_of(&probe, &emb)?;
            probe.params.get_mut(pi).data_mut()[j] = orig - eps;
            let down = loss_of(&probe, &emb)?;
            probe.params.get_mut(pi).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let mut e = emb.clone();
    for _ in 0..16 {
        let j = rng.random_range(0..split.max(1) * d);
        analytic.push(grads.get(x).map_or(0.0, |g| g.data()[j]));
        let orig = emb.data()[j];
        e.data_mut()[j] = orig + eps;
        let up = loss_of(model, &e)?;
        e.data_mut()[j] = orig - eps;
        let down = loss_of(model, &e)?;
        e.data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let diff = libm::sqrt(analytic.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let denom = norm(&analytic) + norm(&numeric);
    Ok(ModelGradCheck {
        rel_err: if denom == 0.0 { 0.0 } else { diff / denom },
        prefix_grad_norm,
        coords: analytic.len(),
    })
}

/// Desk-sized model trimmed to two layers.
pub fn two_layer_desk() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        ..ModelConfig::desk()
    }
}

fn random_tokens(rng: &mut Rng, t: usize, vocab: usize) -> Vec<u32> {
    (0..t).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn gradients(seeds: &SeedStream) -> Result<Vec<Check>> {
    let mut rng = seeds.rng("ops");
    let mut out: Vec<Check> = op_checks(&mut rng)?
        .into_iter()
        .map(|(name, err)| Check::within(format!("{name} gradient"), err, GRAD_TOL))
        .collect();
    let mut rng = seeds.rng("model");
    let t = 12;
    let model = Model::<f64>::new(two_layer_desk(), seeds.child("desk").seed())?;
    let tokens = random_tokens(&mut rng, t, model.cfg.vocab);
    let r = model_gradcheck(&model, &tokens, &[t / 2, t / 2], &mut rng)?;
    out.push(Check::within("two-layer model gradient (sampled coordinates)", r.rel_err, GRAD_TOL));
    out.push(Check::flag("prefix embeddings receive gradient", r.prefix_grad_norm, r.prefix_grad_norm > 0.0));

    // Without the convolution the converter is the only route from prefix to suffix.
    let cfg = ModelConfig {
        use_conv: false,
        ..two_layer_desk()
    };
    let model = Model::<f64>::new(cfg, seeds.child("noconv").seed())?;
    let r = model_gradcheck(&model, &tokens, &[t / 2, t / 2], &mut rng)?;
    out.push(Check::within("no-conv model gradient (sampled coordinates)", r.rel_err, GRAD_TOL));
    out.push(Check::flag(
        "converter alone carries gradient to the prefix",
        r.prefix_grad_norm,
        r.prefix_grad_norm > 0.0,
    ));
    Ok(out)
}

fn degeneracy(seeds: &SeedStream) -> Result<Vec<Check>> {
    let mut rng = seeds.rng("tokens");
    let model = Model::<f64>::new(ModelConfig::desk(), seeds.child("desk").seed())?;
    let t = 48;
    let tokens = random_tokens(&mut rng, t, model.cfg.vocab);
    let l = model.cfg.n_layers;
    let ssm = model.forward_with_points(&tokens, &vec![0; l])?.max_abs_diff(&reference_forward(&model, &tokens, Mechanism::Ssm)?)?;
    let attn = model.forward_with_points(&tokens, &vec![t; l])?.max_abs_diff(&reference_forward(&model, &tokens, Mechanism::Attention)?)?;

    let probe = Model::<f64>::new(ModelConfig::desk().duality_probe(), seeds.child("probe").seed())?;
    let input = normal(&mut rng, vec![1, t, probe.cfg.d_model]);
    let mut layer = 0.0f64;
    for p in [1, t / 2, t - 1] {
        let (split, full) = layer_pair(&probe, 0, &input, p, Mechanism::Attention)?;
        layer = layer.max(split.max_abs_diff(&full)?);
    }
    let whole = probe
        .forward_with_points(&tokens, &vec![t / 2; l])?
        .max_abs_diff(&reference_forward(&probe, &tokens, Mechanism::Attention)?)?;
    Ok(vec![
        Check::within("all-zero schedule is bit-identical to the SSM stack", ssm, 0.0),
        Check::within("all-T schedule is bit-identical to the attention stack", attn, 0.0),
        Check::within("linear probe: split layer matches full attention", layer, TOL),
        Check::within("linear probe: split model matches attention stack", whole, TOL),
    ])
}

fn cache(seeds: &SeedStream) -> Result<Vec<Check>> {
    let t = 32;
    let (mut logits_dev, mut mismatches, mut gen_mismatch, mut calls_bad) = (0.0f64, 0usize, 0usize, 0usize);
    for s in 0..10u64 {
        let child = seeds.child(&format!("seed{s}"));
        let mut rng = child.rng("tokens");
        let model = Model::<f64>::new(ModelConfig::desk(), child.seed())?;
        let schedule = preset(if s % 2 == 0 { "v8" } else { "v4" }, t)?;
        let tokens = random_tokens(&mut rng, t, model.cfg.vocab);
        let full = model.forward(&tokens, &schedule)?;
        let vocab = model.cfg.vocab;
        let mut session = Session::new(&model, &schedule);
        for (i, &tok) in tokens.iter().enumerate() {
            let step = session.step(tok)?;
            let row = &full.data()[i * vocab..(i + 1) * vocab];
            let dev = step.data().iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            logits_dev = logits_dev.max(dev);
            if argmax(step.data()) != argmax(row) {
                mismatches += 1;
            }
        }
        for (layer, &p) in schedule.resolve(model.cfg.n_layers).iter().enumerate() {
            let expected = usize::from(p > 0 && p < t);
            if session.converter_calls()[layer] != expected {
                calls_bad += 1;
            }
        }
        let prompt = &tokens[..8];
        let generated = crate::model::generate(&model, prompt, 8, &schedule)?;
        for i in prompt.len()..generated.len() {
            let logits = model.forward(&generated[..i], &schedule)?;
            let last = &logits.data()[(i - 1) * vocab..i * vocab];
            if argmax(last) != generated[i] as usize {
                gen_mismatch += 1;
            }
        }
    }
    Ok(vec![
        Check::within("incremental logits match full re-forward", logits_dev, TOL),
        Check::within("incremental argmax matches full re-forward", mismatches as f64, 0.0),
        Check::within("greedy generation matches re-forward argmax", gen_mismatch as f64, 0.0),
        Check::within("converter runs once per crossed transition point", calls_bad as f64, 0.0),
    ])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
