//! AdamW training with cosine learning-rate decay, and evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::model::{next_token_loss, Decay, Model, ParamStore};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::schedule::TransPointSchedule;
use crate::tape::Tape;
use crate::tasks::{gen_task, gen_task_with, Batch, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Validation batch size; the batch is fixed for the whole run.
    pub val_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 3e-3,
            min_lr: 3e-4,
            weight_decay: 0.1,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 8,
            steps: 200,
            seed: 0,
            val_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.initial_lr) {
            return Err(invalid("need 0 <= min_lr <= initial_lr"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.val_batch == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// Cosine from `initial_lr` at step 0 to `min_lr` at step `steps - 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.initial_lr;
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac));
        self.min_lr + (self.initial_lr - self.min_lr) * c
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g.norm_sq().as_f64()).sum::<f64>());
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay, applied only to `Decay::Yes` tensors.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamW {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(tc.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(tc.beta2, self.t as f64);
        let (b1, b2) = (S::lit(tc.beta1), S::lit(tc.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - tc.beta1), S::lit(1.0 - tc.beta2));
        let step = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(tc.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let shrink = match p.decay {
                Decay::Yes => S::lit(1.0 - lr * tc.weight_decay),
                Decay::No => S::one(),
            };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                *w = *w * shrink - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Mean cross-entropy over target positions.
    pub loss: f64,
    pub ppl: f64,
    /// Fraction of target tokens predicted exactly by argmax.
    pub accuracy: f64,
    pub targets: usize,
}

/// Loss, perplexity and exact-match accuracy of `batch` under `points`.
pub fn evaluate<S: Scalar>(model: &Model<S>, batch: &Batch, points: &[usize]) -> Result<EvalMetrics> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let f = model.forward_points(&mut tape, &vars, &batch.tokens, points)?;
    let loss = next_token_loss(&mut tape, f.logits, &batch.tokens, &batch.mask)?;
    let loss = tape.value(loss).item().as_f64();
    let logits = tape.value(f.logits);
    let (t, vocab) = (logits.dim(1), logits.dim(2));
    let mut hits = 0;
    let mut targets = 0;
    for (b, (seq, mask)) in batch.tokens.iter().zip(&batch.mask).enumerate() {
        for i in 1..t {
            if !mask[i] {
                continue;
            }
            targets += 1;
            let row = &logits.data()[(b * t + i - 1) * vocab..][..vocab];
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            if best == seq[i] as usize {
                hits += 1;
            }
        }
    }
    Ok(EvalMetrics {
        loss,
        ppl: libm::exp(loss),
        accuracy: if targets == 0 { 0.0 } else { hits as f64 / targets as f64 },
        targets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMetrics {
    pub schedule: String,
    pub metrics: EvalMetrics,
}

/// Evaluates one model under several inference schedules.
pub fn eval_suite<S: Scalar>(model: &Model<S>, batch: &Batch, schedules: &[TransPointSchedule]) -> Result<Vec<ScheduleMetrics>> {
    schedules
        .iter()
        .map(|s| {
            Ok(ScheduleMetrics {
                schedule: s.name.clone(),
                metrics: evaluate(model, batch, &s.resolve(model.cfg.n_layers))?,
            })
        })
        .collect()
}

/// The fixed validation batch a run with this seed uses.
pub fn validation_batch(task: &TaskSpec, tc: &TrainConfig) -> Result<Batch> {
    gen_task(task, tc.val_batch, SeedStream::new(tc.seed).child("val").seed())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Validation metrics before the first update.
    pub initial: EvalMetrics,
    pub validation: EvalMetrics,
}

/// One forward/backward pass; returns the loss and per-parameter gradients.
pub fn loss_and_grads<S: Scalar>(model: &Model<S>, batch: &Batch, points: &[usize]) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let f = model.forward_points(&mut tape, &vars, &batch.tokens, points)?;
    let loss = next_token_loss(&mut tape, f.logits, &batch.tokens, &batch.mask)?;
    let value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(model.params.iter())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();
    Ok((value, g))
}

/// Trains `model` in place under `schedule`. `on_step` sees every record as
/// it is produced. A non-finite loss stops the run with the offending step.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    task: &TaskSpec,
    tc: &TrainConfig,
    schedule: &TransPointSchedule,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    tc.validate()?;
    task.validate()?;
    if task.vocab > model.cfg.vocab {
        return Err(Error::Config(alloc::format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab,
            model.cfg.vocab
        )));
    }
    let points = schedule.resolve(model.cfg.n_layers);
    let val = validation_batch(task, tc)?;
    let initial = evaluate(model, &val, &points)?;
    let mut rng = SeedStream::new(tc.seed).rng("train");
    let mut opt = AdamW::new(&model.params);
    let mut steps = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = gen_task_with(task, tc.batch_size, &mut rng)?;
        let (loss, mut grads) = loss_and_grads(model, &batch, &points)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, tc.clip);
        let lr = tc.lr_at(step);
        opt.step(&mut model.params, &grads, lr, tc);
        let rec = StepRecord { step, loss, lr, grad_norm };
        on_step(&rec);
        steps.push(rec);
    }
    let validation = evaluate(model, &val, &points)?;
    Ok(TrainReport {
        steps,
        initial,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::TaskKind;

    #[test]
    fn cosine_endpoints() {
        let tc = TrainConfig {
            initial_lr: 2.5e-4,
            min_lr: 2.5e-5,
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(tc.lr_at(0), 2.5e-4);
        assert!((tc.lr_at(99) - 2.5e-5).abs() < 1e-9);
        assert!(tc.lr_at(50) < tc.lr_at(49));
    }

    #[test]
    fn clip_to_one() {
        let mut g = vec![Tensor::<f64>::new(vec![2], vec![6.0, 8.0]).unwrap()];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!((g[0].norm_sq().sqrt() - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::<f64>::new(vec![1], vec![0.5]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::<f64>::new();
        store.push("w".into(), Tensor::scalar(0.0), Decay::Yes);
        let tc = TrainConfig {
            initial_lr: 0.05,
            min_lr: 0.001,
            weight_decay: 0.0,
            steps: 500,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store);
        for step in 0..tc.steps {
            let w = store.get(0).item();
            let g = vec![Tensor::scalar(2.0 * (w - 3.0))];
            opt.step(&mut store, &g, tc.lr_at(step), &tc);
        }
        assert!((store.get(0).item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn ppl_is_exp_loss() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let task = TaskSpec::new(TaskKind::Copy, 8, 11);
        let batch = gen_task(&task, 2, 0).unwrap();
        let m = evaluate(&model, &batch, &[4, 4]).unwrap();
        assert_eq!(m.ppl, m.loss.exp());
        assert_eq!(m.targets, 8);
    }

    #[test]
    fn nan_aborts() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        model.params.get_mut(0).data_mut()[0] = f64::NAN;
        let task = TaskSpec::new(TaskKind::Copy, 8, 11);
        let tc = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        let sched = TransPointSchedule::uniform("t", 4, 8).unwrap();
        match train(&mut model, &task, &tc, &sched, |_| {}) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
