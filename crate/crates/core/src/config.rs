use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};

/// How a learned gated adapter is folded into the aggregation module at the
/// end of a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `E' (f) = E(f) + E(f)·W_adapter`
    #[default]
    Residual,
    /// `E' (f) = E(f)·W_adapter`
    Multiplicative,
}

/// Per-pair form of the contrastive alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// `max(0, s_kj - s_kk + ε)`
    #[default]
    Hinge,
    /// `|s_kj - s_kk + ε|`
    Absolute,
}

/// How per-modality outputs are combined for multimodal late fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub positional_encoding: bool,
    pub max_len: usize,

    pub adapter_rank: usize,
    /// Number of perturbation components `K`.
    pub perturbation_components: usize,
    /// Perturbation intensity `λ_g`.
    pub lambda_g: f64,
    /// Contrastive margin `ε`.
    pub margin: f64,
    pub lambda_con: f64,
    pub lambda_dis: f64,
    /// Weight `λ` of the alignment loss in the overall objective.
    pub lambda_align: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,

    pub merge_mode: MergeMode,
    pub contrastive_form: ContrastiveForm,
    pub fusion: FusionMode,

    pub lwf_temperature: f64,
    pub lwf_weight: f64,
    pub ewc_weight: f64,
    pub fullr_weight: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: a small backbone with the reference
    /// hyperparameters for modulation, alignment and optimisation.
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 10,
            positional_encoding: true,
            max_len: 64,
            adapter_rank: 16,
            perturbation_components: 3,
            lambda_g: 0.6,
            margin: 0.3,
            lambda_con: 0.8,
            lambda_dis: 0.6,
            lambda_align: 1.5,
            epochs: 50,
            batch_size: 64,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            seed: 0,
            merge_mode: MergeMode::Residual,
            contrastive_form: ContrastiveForm::Hinge,
            fusion: FusionMode::Logits,
            lwf_temperature: 2.0,
            lwf_weight: 1.0,
            ewc_weight: 1000.0,
            fullr_weight: 1000.0,
        }
    }
}

impl ModelConfig {
    /// Base-sized transformer: depth 12, width 768, 12 heads, rank-128
    /// adapter, batch 512.
    pub fn base() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            num_classes: 93,
            max_len: 512,
            adapter_rank: 128,
            batch_size: 512,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("max_len", self.max_len),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(MilError::config(field, "must be at least 1"));
            }
        }
        if self.width % self.heads != 0 {
            return Err(MilError::config(
                "heads",
                format!("width {} is not divisible by {} heads", self.width, self.heads),
            ));
        }
        if self.adapter_rank == 0 || self.adapter_rank > self.width {
            return Err(MilError::config(
                "adapter_rank",
                format!("must lie in 1..={} (width), got {}", self.width, self.adapter_rank),
            ));
        }
        if self.perturbation_components == 0 {
            return Err(MilError::config("perturbation_components", "must be at least 1"));
        }
        let non_negative = [
            ("lambda_g", self.lambda_g),
            ("margin", self.margin),
            ("lambda_con", self.lambda_con),
            ("lambda_dis", self.lambda_dis),
            ("lambda_align", self.lambda_align),
            ("weight_decay", self.weight_decay),
            ("lwf_weight", self.lwf_weight),
            ("ewc_weight", self.ewc_weight),
            ("fullr_weight", self.fullr_weight),
        ];
        for (field, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MilError::config(field, format!("must be finite and >= 0, got {value}")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(MilError::config("learning_rate", "must be finite and > 0"));
        }
        if !(self.lwf_temperature.is_finite() && self.lwf_temperature > 0.0) {
            return Err(MilError::config("lwf_temperature", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::base().validate().unwrap();
        assert_eq!(ModelConfig::base().adapter_rank, 128);
    }

    #[test]
    fn divisibility() {
        let cfg = ModelConfig {
            width: 64,
            heads: 4,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 16);

        let bad = ModelConfig { heads: 5, ..cfg };
        match bad.validate() {
            Err(MilError::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (ModelConfig { adapter_rank: 0, ..Default::default() }, "adapter_rank"),
            (ModelConfig { adapter_rank: 65, ..Default::default() }, "adapter_rank"),
            (ModelConfig { perturbation_components: 0, ..Default::default() }, "perturbation_components"),
            (ModelConfig { lambda_g: -0.1, ..Default::default() }, "lambda_g"),
            (ModelConfig { margin: -1.0, ..Default::default() }, "margin"),
            (ModelConfig { lambda_dis: f64::NAN, ..Default::default() }, "lambda_dis"),
        ];
        for (cfg, expected) in cases {
            match cfg.validate() {
                Err(MilError::Config { field, .. }) => assert_eq!(field, expected),
                other => panic!("expected error on {expected}, got {other:?}"),
            }
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"width": 32, "heads": 2}"#).unwrap();
        assert_eq!(cfg.width, 32);
        assert_eq!(cfg.lambda_align, 1.5);
        assert_eq!(cfg.merge_mode, MergeMode::Residual);
    }
}
