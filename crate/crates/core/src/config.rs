//! Model, optimizer and ablation configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeMode;

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError(msg()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_context: usize,
    pub d_pos: usize,
    pub d_region: usize,
    pub d_attn: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the position-wise feed-forward sublayer.
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Map unseen characters to `<unk>` instead of failing.
    pub unk_fallback: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_context: 32,
            d_pos: 16,
            d_region: 4,
            d_attn: 12,
            layers: 1,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            max_len: 256,
            unk_fallback: true,
        }
    }
}

impl EncoderConfig {
    /// Width of a character representation (also the transformer width).
    pub fn d_h(&self) -> usize {
        self.d_context + self.d_pos + self.d_region + self.d_attn
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("d_context", self.d_context),
            ("d_pos", self.d_pos),
            ("d_region", self.d_region),
            ("d_attn", self.d_attn),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            check(v >= 1, || format!("encoder.{name} must be at least 1"))?;
        }
        let d_h = self.d_h();
        check(d_h.is_multiple_of(self.heads), || {
            format!("d_h = {d_h} is not divisible by encoder.heads = {}", self.heads)
        })?;
        check(d_h.is_multiple_of(2), || format!("d_h = {d_h} must be even for sinusoidal relative positions"))?;
        check((0.0..1.0).contains(&self.dropout), || "encoder.dropout must lie in [0, 1)".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub d_dist: usize,
    pub d_region: usize,
    pub d_attn: usize,
    pub distance_buckets: usize,
    pub attn_buckets: usize,
    pub d_reduced: usize,
    pub d_c: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            d_dist: 16,
            d_region: 8,
            d_attn: 8,
            distance_buckets: crate::grid::DISTANCE_BUCKETS,
            attn_buckets: crate::grid::ATTN_BUCKETS,
            d_reduced: 64,
            d_c: 24,
            dilations: vec![1, 2, 3],
            kernel: 3,
            dropout: 0.1,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("d_dist", self.d_dist),
            ("d_region", self.d_region),
            ("d_attn", self.d_attn),
            ("d_reduced", self.d_reduced),
            ("d_c", self.d_c),
            ("kernel", self.kernel),
        ] {
            check(v >= 1, || format!("grid.{name} must be at least 1"))?;
        }
        check(self.distance_buckets == crate::grid::DISTANCE_BUCKETS, || {
            format!("grid.distance_buckets must be {}", crate::grid::DISTANCE_BUCKETS)
        })?;
        check(self.attn_buckets >= 1, || "grid.attn_buckets must be at least 1".into())?;
        check(self.kernel % 2 == 1, || "grid.kernel must be odd".into())?;
        check(!self.dilations.is_empty(), || "grid.dilations must not be empty".into())?;
        check(self.dilations.iter().all(|&d| d >= 1), || "grid.dilations must be positive".into())?;
        let mut sorted = self.dilations.clone();
        sorted.sort_unstable();
        sorted.dedup();
        check(sorted.len() == self.dilations.len(), || "grid.dilations must be distinct".into())?;
        check((0.0..1.0).contains(&self.dropout), || "grid.dropout must lie in [0, 1)".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub d_r: usize,
    pub rounds: usize,
    pub heads: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { d_r: 24, rounds: 2, heads: 4 }
    }
}

impl EnhanceConfig {
    pub fn validate(&self, d_h: usize) -> Result<(), ConfigError> {
        check(self.d_r >= 1, || "enhance.d_r must be at least 1".into())?;
        check(self.rounds >= 1, || "enhance.rounds must be at least 1".into())?;
        check(self.heads >= 1 && d_h.is_multiple_of(self.heads), || {
            format!("d_h = {d_h} is not divisible by enhance.heads = {}", self.heads)
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Multi-label: every tag scoring above `s0`.
    #[default]
    Threshold,
    /// Single label: argmax over tags plus an explicit NONE class.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub d_biaffine: usize,
    pub d_mlp: usize,
    pub mode: PredictionMode,
    pub s0: f64,
    pub decode: DecodeMode,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { d_biaffine: 64, d_mlp: 64, mode: PredictionMode::Threshold, s0: 0.0, decode: DecodeMode::Contiguous }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    #[default]
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once dev F1 reaches this value.
    pub stop_at_dev_f1: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            grad_clip_norm: 1.0,
            batch_size: 8,
            epochs: 10,
            seed: 42,
            stop_at_dev_f1: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.learning_rate > 0.0, || "optimizer.learning_rate must be positive".into())?;
        check(self.weight_decay >= 0.0, || "optimizer.weight_decay must be non-negative".into())?;
        check(self.grad_clip_norm > 0.0, || "optimizer.grad_clip_norm must be positive".into())?;
        check(self.batch_size >= 1, || "optimizer.batch_size must be at least 1".into())
    }
}

/// Component switches mirroring the model ablation study.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Skip the relative-position transformer layers.
    pub no_adapted_transformer: bool,
    /// Divide attention logits by `sqrt(d_k)` as in the vanilla transformer.
    pub use_scaling_factor: bool,
    pub no_region_matrix: bool,
    pub no_distance_matrix: bool,
    pub no_attn_matrix: bool,
    pub no_dilated_conv: bool,
    pub no_mlp_predictor: bool,
    pub no_biaffine_predictor: bool,
    /// Feed the convolution output straight to the MLP predictor.
    pub no_enhancement: bool,
    /// Tie the four tag-group projections into one shared projection.
    pub no_tag_relations: bool,
    pub rounds_override: Option<usize>,
}

impl Ablations {
    /// Every switch flipped alone from the defaults, with `rounds_override`
    /// set to a single round.
    pub fn single_flag_variants() -> Vec<(&'static str, Ablations)> {
        type Flip = fn(&mut Ablations);
        let flags: [(&str, Flip); 11] = [
            ("no_adapted_transformer", |a| a.no_adapted_transformer = true),
            ("use_scaling_factor", |a| a.use_scaling_factor = true),
            ("no_region_matrix", |a| a.no_region_matrix = true),
            ("no_distance_matrix", |a| a.no_distance_matrix = true),
            ("no_attn_matrix", |a| a.no_attn_matrix = true),
            ("no_dilated_conv", |a| a.no_dilated_conv = true),
            ("no_mlp_predictor", |a| a.no_mlp_predictor = true),
            ("no_biaffine_predictor", |a| a.no_biaffine_predictor = true),
            ("no_enhancement", |a| a.no_enhancement = true),
            ("no_tag_relations", |a| a.no_tag_relations = true),
            ("rounds_override", |a| a.rounds_override = Some(1)),
        ];
        flags
            .into_iter()
            .map(|(name, set)| {
                let mut a = Ablations::default();
                set(&mut a);
                (name, a)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobDtype {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub grid: GridConfig,
    pub enhance: EnhanceConfig,
    pub predictor: PredictorConfig,
    pub optimizer: OptimizerConfig,
    pub ablations: Ablations,
    /// Element type of checkpoint tensor blobs.
    pub checkpoint_dtype: BlobDtype,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.grid.validate()?;
        self.enhance.validate(self.encoder.d_h())?;
        self.optimizer.validate()?;
        check(self.predictor.d_biaffine >= 1 && self.predictor.d_mlp >= 1, || {
            "predictor widths must be at least 1".into()
        })?;
        check(!(self.ablations.no_mlp_predictor && self.ablations.no_biaffine_predictor), || {
            "cannot remove both predictors".into()
        })?;
        if let Some(r) = self.ablations.rounds_override {
            check(r >= 1, || "ablations.rounds_override must be at least 1".into())?;
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.ablations.rounds_override.unwrap_or(self.enhance.rounds)
    }

    /// A compact configuration used by tests and gradient checks (`d_h = 16`).
    pub fn tiny() -> Self {
        let base = Self::default();
        Self {
            encoder: EncoderConfig {
                d_context: 6,
                d_pos: 4,
                d_region: 2,
                d_attn: 4,
                layers: 1,
                heads: 2,
                d_ff: 16,
                dropout: 0.0,
                max_len: 64,
                unk_fallback: true,
            },
            grid: GridConfig { d_dist: 4, d_region: 3, d_attn: 3, d_reduced: 8, d_c: 4, dropout: 0.0, ..base.grid },
            enhance: EnhanceConfig { d_r: 4, rounds: 2, heads: 2 },
            predictor: PredictorConfig { d_biaffine: 8, d_mlp: 8, ..base.predictor },
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().encoder.d_h(), 64);
        assert_eq!(ModelConfig::tiny().encoder.d_h(), 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.encoder.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.grid.dilations = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.enhance.rounds = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.ablations.no_mlp_predictor = true;
        c.ablations.no_biaffine_predictor = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"encoder": {"bogus": 1}}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"ablations": {"no_mlp_predictor": true}}"#).unwrap();
        assert!(ok.ablations.no_mlp_predictor);
    }
}
