//! Named parameter storage and the layout that indexes it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::converter::ConverterMode;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether AdamW weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Yes,
    No,
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub decay: Decay,
}

/// Flat, ordered parameter list.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Tensor<S>, decay: Decay) -> usize {
        self.entries.push(Param { name, value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<S> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.entries[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Replaces every value with a same-named, same-shaped tensor from `named`.
    pub fn load(&mut self, named: impl IntoIterator<Item = (String, Tensor<S>)>) -> Result<()> {
        let mut filled = vec![false; self.entries.len()];
        for (name, value) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.entries[id].value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: self.entries[id].value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            self.entries[id].value = value;
            filled[id] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Config(format!("parameter {} missing", self.entries[i].name)));
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Indices of the learned converter's weights.
#[derive(Debug, Clone, Copy)]
pub struct ConverterIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// One mixing layer. `w_cq`, `w_bk` and `w_xv` each serve two roles:
/// query/C, key/B and value/x.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub norm: usize,
    pub w_cq: usize,
    pub w_bk: usize,
    pub w_xv: usize,
    pub w_dt: usize,
    pub b_dt: usize,
    pub log_a: usize,
    pub w_z: usize,
    pub conv_c_w: usize,
    pub conv_c_b: usize,
    pub conv_b_w: usize,
    pub conv_b_b: usize,
    pub conv_x_w: usize,
    pub conv_x_b: usize,
    pub w_o: usize,
    pub converter: Option<ConverterIds>,
}

/// Gated-linear MLP block.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerIds>,
    /// `mlps[i]` are the MLP blocks following mixing layer `i`.
    pub mlps: Vec<Vec<MlpIds>>,
    pub final_norm: usize,
}

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: crate::rng::Rng,
    std: f64,
}

impl<S: Scalar> Init<'_, S> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let dist = Normal::new(0.0, self.std).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| S::lit(dist.sample(&mut self.rng)));
        self.store.push(name, t, Decay::Yes)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.store.push(name, Tensor::full(shape.to_vec(), S::lit(v)), Decay::No)
    }

    fn with(&mut self, name: String, t: Tensor<S>, decay: Decay) -> usize {
        self.store.push(name, t, decay)
    }
}

/// Builds freshly initialised parameters and their layout.
///
/// Projections are `N(0, init_std)`, biases zero, norm weights one. `logA` is
/// the log of a rate drawn uniformly from `[1, 16]` per head; the step-size
/// bias is the inverse softplus of a step drawn log-uniformly in
/// `[0.001, 0.1]`.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seeds: &SeedStream) -> Result<(ParamStore<S>, Layout)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (d, h, n, hd) = (cfg.d_model, cfg.n_heads, cfg.state_size, cfg.head_dim());
    let mut init = Init {
        store: &mut store,
        rng: seeds.rng("init"),
        std: cfg.init_std,
    };
    let embed = init.normal("embed".into(), &[cfg.vocab, d]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut mlps = Vec::with_capacity(cfg.n_layers);
    let rate = Uniform::new(1.0f64, 16.0).expect("valid range");
    let log_step = Uniform::new(libm::log(1e-3f64), libm::log(1e-1)).expect("valid range");
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        let norm = init.fill(p("norm"), &[d], 1.0);
        let w_cq = init.normal(p("w_cq"), &[d, h * n]);
        let w_bk = init.normal(p("w_bk"), &[d, h * n]);
        let w_xv = init.normal(p("w_xv"), &[d, h * hd]);
        let w_dt = init.normal(p("w_dt"), &[d, h]);
        let b_dt_vals: Tensor<S> = Tensor::from_fn(vec![h], |_| {
            let step = libm::exp(log_step.sample(&mut init.rng));
            // inverse softplus
            S::lit(step + libm::log(-libm::expm1(-step)))
        });
        let b_dt = init.with(p("b_dt"), b_dt_vals, Decay::No);
        let log_a_vals: Tensor<S> = Tensor::from_fn(vec![h], |_| S::lit(libm::log(rate.sample(&mut init.rng))));
        let log_a = init.with(p("log_a"), log_a_vals, Decay::No);
        let w_z = init.normal(p("w_z"), &[d, h * hd]);
        let w = cfg.conv_width;
        let conv_std = 1.0 / libm::sqrt(w as f64);
        let saved = core::mem::replace(&mut init.std, conv_std);
        let conv_c_w = init.normal(p("conv_c.w"), &[w, h * n]);
        let conv_b_w = init.normal(p("conv_b.w"), &[w, h * n]);
        let conv_x_w = init.normal(p("conv_x.w"), &[w, h * hd]);
        init.std = saved;
        let conv_c_b = init.fill(p("conv_c.b"), &[h * n], 0.0);
        let conv_b_b = init.fill(p("conv_b.b"), &[h * n], 0.0);
        let conv_x_b = init.fill(p("conv_x.b"), &[h * hd], 0.0);
        let w_o = init.normal(p("w_o"), &[h * hd, d]);
        let converter = (cfg.converter.mode == ConverterMode::LearnedMlp).then(|| {
            let m = cfg.converter.mlp_hidden;
            ConverterIds {
                w1: init.normal(p("converter.w1"), &[n * hd, m]),
                b1: init.fill(p("converter.b1"), &[m], 0.0),
                w2: init.normal(p("converter.w2"), &[m, n * hd]),
                b2: init.fill(p("converter.b2"), &[n * hd], 0.0),
            }
        });
        layers.push(LayerIds {
            norm,
            w_cq,
            w_bk,
            w_xv,
            w_dt,
            b_dt,
            log_a,
            w_z,
            conv_c_w,
            conv_c_b,
            conv_b_w,
            conv_b_b,
            conv_x_w,
            conv_x_b,
            w_o,
            converter,
        });
        let mut block = Vec::new();
        for j in 0..cfg.mlps_after(i) {
            let q = |s: &str| format!("mlps.{i}.{j}.{s}");
            block.push(MlpIds {
                norm: init.fill(q("norm"), &[d], 1.0),
                w_gate: init.normal(q("w_gate"), &[d, cfg.ffn_hidden]),
                w_up: init.normal(q("w_up"), &[d, cfg.ffn_hidden]),
                w_down: init.normal(q("w_down"), &[cfg.ffn_hidden, d]),
            });
        }
        mlps.push(block);
    }
    let final_norm = init.fill("final_norm".into(), &[d], 1.0);
    Ok((
        store,
        Layout {
            embed,
            layers,
            mlps,
            final_norm,
        },
    ))
}
