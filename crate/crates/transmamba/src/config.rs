//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. The same text is embedded in checkpoints, so a checkpoint carries
//! everything needed to rebuild its model and its validation batch.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use transmamba_core::converter::ConverterMode;
use transmamba_core::dual::AttentionKind;
use transmamba_core::model::{Activation, ModelConfig, ZGating};
use transmamba_core::tasks::{TaskKind, TaskSpec};
use transmamba_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSettings {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub n_entries: usize,
    pub corpus: Option<PathBuf>,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            kind: TaskKind::Copy,
            seq_len: 16,
            vocab: 16,
            n_entries: 4,
            corpus: None,
        }
    }
}

impl TaskSettings {
    /// Builds the core task spec, reading the corpus file if there is one.
    pub fn spec(&self) -> Result<TaskSpec, CliError> {
        let mut spec = TaskSpec::new(self.kind, self.seq_len, self.vocab).with_entries(self.n_entries);
        if self.kind == TaskKind::CharLm {
            let path = self
                .corpus
                .as_ref()
                .ok_or_else(|| CliError::Config("char_lm needs `corpus = <path>`".into()))?;
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            spec = spec.with_corpus(bytes);
        }
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSettings,
    /// Schedule name or comma-separated per-layer points.
    pub schedule: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            task: TaskSettings::default(),
            schedule: "v9".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

fn z_gating_name(z: ZGating) -> &'static str {
    match z {
        ZGating::SiluGate => "silu_gate",
        ZGating::None => "none",
        ZGating::GlobalH => "global_h",
        ZGating::GlobalResidual => "global_residual",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "n_layers" => m.n_layers = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "state_size" => m.state_size = parse(key, v)?,
            "ffn_hidden" => m.ffn_hidden = parse(key, v)?,
            "vocab" => m.vocab = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "z_gating" => {
                m.z_gating = match v {
                    "silu_gate" => ZGating::SiluGate,
                    "none" => ZGating::None,
                    "global_h" => ZGating::GlobalH,
                    "global_residual" => ZGating::GlobalResidual,
                    _ => return Err(CliError::Config(format!("unknown z_gating `{v}`"))),
                }
            }
            "converter" => {
                m.converter.mode = match v {
                    "theoretical" => ConverterMode::Theoretical,
                    "learned_mlp" => ConverterMode::LearnedMlp,
                    _ => return Err(CliError::Config(format!("unknown converter `{v}`"))),
                }
            }
            "converter_delta" => m.converter.include_delta = parse_bool(key, v)?,
            "converter_hidden" => m.converter.mlp_hidden = parse(key, v)?,
            "conv_width" => m.conv_width = parse(key, v)?,
            "use_conv" => m.use_conv = parse_bool(key, v)?,
            "conv_on_attention" => m.conv_on_attention = parse_bool(key, v)?,
            "rope_theta" => m.rope_theta = parse(key, v)?,
            "use_rope" => m.use_rope = parse_bool(key, v)?,
            "activation" => {
                m.activation = match v {
                    "standard" => Activation::Standard,
                    "identity" => Activation::Identity,
                    _ => return Err(CliError::Config(format!("unknown activation `{v}`"))),
                }
            }
            "attention" => {
                m.attention = match v {
                    "softmax" => AttentionKind::Softmax,
                    "linear" => AttentionKind::Linear,
                    _ => return Err(CliError::Config(format!("unknown attention `{v}`"))),
                }
            }
            "unit_decay" => m.unit_decay = parse_bool(key, v)?,
            "norm_eps" => m.norm_eps = parse(key, v)?,
            "init_std" => m.init_std = parse(key, v)?,
            "lr" => t.initial_lr = parse(key, v)?,
            "min_lr" => t.min_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "clip" => t.clip = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.eps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "val_batch" => t.val_batch = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "task" => {
                self.task.kind = TaskKind::parse(v).ok_or_else(|| CliError::Config(format!("unknown task `{v}`")))?
            }
            "seq_len" => self.task.seq_len = parse(key, v)?,
            "task_vocab" => self.task.vocab = parse(key, v)?,
            "n_entries" => self.task.n_entries = parse(key, v)?,
            "corpus" => self.task.corpus = Some(PathBuf::from(v)),
            "schedule" => self.schedule = v.to_string(),
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_layers", &m.n_layers);
        kv("d_model", &m.d_model);
        kv("n_heads", &m.n_heads);
        kv("state_size", &m.state_size);
        kv("ffn_hidden", &m.ffn_hidden);
        kv("vocab", &m.vocab);
        kv("mlp_ratio", &m.mlp_ratio);
        kv("z_gating", &z_gating_name(m.z_gating));
        let conv = match m.converter.mode {
            ConverterMode::Theoretical => "theoretical",
            ConverterMode::LearnedMlp => "learned_mlp",
        };
        kv("converter", &conv);
        kv("converter_delta", &m.converter.include_delta);
        kv("converter_hidden", &m.converter.mlp_hidden);
        kv("conv_width", &m.conv_width);
        kv("use_conv", &m.use_conv);
        kv("conv_on_attention", &m.conv_on_attention);
        kv("rope_theta", &m.rope_theta);
        kv("use_rope", &m.use_rope);
        let act = match m.activation {
            Activation::Standard => "standard",
            Activation::Identity => "identity",
        };
        kv("activation", &act);
        let attn = match m.attention {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Linear => "linear",
        };
        kv("attention", &attn);
        kv("unit_decay", &m.unit_decay);
        kv("norm_eps", &m.norm_eps);
        kv("init_std", &m.init_std);
        kv("lr", &t.initial_lr);
        kv("min_lr", &t.min_lr);
        kv("weight_decay", &t.weight_decay);
        kv("clip", &t.clip);
        kv("beta1", &t.beta1);
        kv("beta2", &t.beta2);
        kv("adam_eps", &t.eps);
        kv("batch_size", &t.batch_size);
        kv("val_batch", &t.val_batch);
        kv("steps", &t.steps);
        kv("seed", &t.seed);
        kv("task", &self.task.kind.name());
        kv("seq_len", &self.task.seq_len);
        kv("task_vocab", &self.task.vocab);
        kv("n_entries", &self.task.n_entries);
        if let Some(c) = &self.task.corpus {
            kv("corpus", &c.display());
        }
        kv("schedule", &self.schedule);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.005").unwrap();
        cfg.set("z_gating", "global_residual").unwrap();
        cfg.set("corpus", "data/text.txt").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::parse("# desk\n\nsteps = 7\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert!(matches!(RunConfig::parse("stepz = 7"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("steps 7"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("n_heads = 3"), Err(CliError::Config(_))));
    }
}
