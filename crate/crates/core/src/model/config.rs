use alloc::format;

use crate::converter::ConverterConfig;
use crate::dual::AttentionKind;
use crate::error::{Error, Result};

/// Where the SiLU(z) output gate is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZGating {
    /// Gate the SSM rows only; attention rows pass ungated.
    SiluGate,
    None,
    /// Gate every row with `z = h W_z` (normalised layer input).
    GlobalH,
    /// Gate every row with `z = r W_z` (un-normalised residual stream).
    GlobalResidual,
}

/// Activation applied to the shared projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Identity on Q/K (= C/B), SiLU on V (= x).
    Standard,
    /// Identity everywhere.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of mixing (attention/SSM) layers.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// SSM state width `N`; also the query/key width.
    pub state_size: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    /// Fraction of blocks that are MLP blocks; 0.5 alternates 1:1.
    pub mlp_ratio: f64,
    pub z_gating: ZGating,
    pub converter: ConverterConfig,
    pub conv_width: usize,
    pub use_conv: bool,
    /// Feed the convolved features to attention as well as to the SSM.
    pub conv_on_attention: bool,
    pub rope_theta: f64,
    pub use_rope: bool,
    pub activation: Activation,
    pub attention: AttentionKind,
    /// Force Δ ≡ 1 and Ā ≡ 1.
    pub unit_decay: bool,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The small configuration every oracle and smoke run uses.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            state_size: 32,
            ffn_hidden: 341,
            vocab: 256,
            mlp_ratio: 0.5,
            z_gating: ZGating::SiluGate,
            converter: ConverterConfig::default(),
            conv_width: 4,
            use_conv: true,
            conv_on_attention: true,
            rope_theta: 10000.0,
            use_rope: true,
            activation: Activation::Standard,
            attention: AttentionKind::Softmax,
            unit_decay: false,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    /// A tiny config for exhaustive tests.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            state_size: 4,
            ffn_hidden: 12,
            vocab: 11,
            ..Self::desk()
        }
    }

    /// Strips every non-linear detail that separates the two mechanisms:
    /// identity activations, no rotation, no convolution, no gate, unscaled
    /// linear attention and unit decay. In this mode attention and the SSM
    /// compute the same function.
    pub fn duality_probe(mut self) -> Self {
        self.activation = Activation::Identity;
        self.use_rope = false;
        self.use_conv = false;
        self.z_gating = ZGating::None;
        self.attention = AttentionKind::Linear;
        self.unit_decay = true;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn attention_scale(&self) -> f64 {
        match self.attention {
            AttentionKind::Softmax => 1.0 / libm::sqrt(self.state_size as f64),
            AttentionKind::Linear => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("state_size", self.state_size),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab", self.vocab),
            ("conv_width", self.conv_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.use_rope && self.state_size % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even state_size".into()));
        }
        if !(0.0..1.0).contains(&self.mlp_ratio) {
            return Err(Error::Config(format!("mlp_ratio {} outside [0, 1)", self.mlp_ratio)));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("rope_theta, norm_eps and init_std must be positive".into()));
        }
        self.converter.validate()
    }

    /// Total MLP blocks implied by `mlp_ratio`.
    pub fn n_mlp_blocks(&self) -> usize {
        let per_layer = self.mlp_ratio / (1.0 - self.mlp_ratio);
        libm::round(self.n_layers as f64 * per_layer) as usize
    }

    /// MLP blocks placed right after mixing layer `layer`, spreading them evenly.
    pub fn mlps_after(&self, layer: usize) -> usize {
        let (m, l) = (self.n_mlp_blocks(), self.n_layers);
        (layer + 1) * m / l - layer * m / l
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_ratio_alternates() {
        let c = ModelConfig::desk();
        assert_eq!(c.n_mlp_blocks(), 4);
        assert!((0..4).all(|i| c.mlps_after(i) == 1));
        let none = ModelConfig { mlp_ratio: 0.0, ..c };
        assert!((0..4).all(|i| none.mlps_after(i) == 0));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 3,
            ..ModelConfig::desk()
        };
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk().validate().is_ok());
    }
}
