//! Run configuration: every hyperparameter, dimension, loss weight, seed,
//! and regime switch, serialized with each run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Modality;

/// Evaluation / corruption regime for the degraded pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regime {
    Complete,
    Noise { variance: f64, modality: Modality },
    Missing { modality: Modality },
}

impl Regime {
    /// The modality a corruption regime acts on, if any.
    pub fn modality(&self) -> Option<Modality> {
        match self {
            Regime::Complete => None,
            Regime::Noise { modality, .. } | Regime::Missing { modality } => Some(*modality),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Complete => write!(f, "complete"),
            Regime::Noise { variance, modality } => write!(f, "noise:{variance}:{modality}"),
            Regime::Missing { modality } => write!(f, "missing:{modality}"),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    /// `complete`, `noise:<variance>:<M1|M2>`, or `missing:<M1|M2>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["complete"] => Ok(Regime::Complete),
            ["noise", var, m] => {
                let variance: f64 = var
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad noise variance `{var}`")))?;
                if variance < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "noise variance must be nonnegative, got {variance}"
                    )));
                }
                Ok(Regime::Noise { variance, modality: m.parse()? })
            }
            ["missing", m] => Ok(Regime::Missing { modality: m.parse()? }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown regime `{s}` (expected complete | noise:<var>:<M1|M2> | missing:<M1|M2>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Full run configuration. Serializes losslessly; the serialized form is
/// echoed into datasets' sibling reports and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdrlConfig {
    // architecture
    pub model_dim: usize,
    pub tokens: usize,
    pub raw_widths: [usize; 2],
    pub encoder_heads: usize,
    pub encoder_blocks: usize,
    pub n_classes: usize,
    pub classifier_hidden: usize,
    /// Ratio p of common channels to total width; D_c = round(p * D).
    pub common_ratio: f64,
    // loss weights
    pub w_ce: f64,
    pub w_match: f64,
    pub w_dis: f64,
    pub w_feat: f64,
    pub w_logit: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    // optimizer
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    // schedule
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    // regime and switches
    pub regime: Regime,
    /// Train the degraded pipeline under exactly `regime` every step
    /// instead of sampling a corruption per step.
    pub fixed_regime: bool,
    pub eprl_on: bool,
    pub dilr_on: bool,
    /// Use distribution means for inference-time guiding tokens.
    pub deterministic_guiding: bool,
    /// Subtract batch means before the correlation matrix (Pearson-style)
    /// instead of the plain uncentered form.
    pub center_correlation: bool,
    /// Noise variance for the sampled-regime menu when `regime` itself is
    /// not a noise regime.
    pub sampled_noise_variance: f64,
}

impl Default for EdrlConfig {
    fn default() -> Self {
        EdrlConfig {
            model_dim: 32,
            tokens: 8,
            raw_widths: [16, 16],
            encoder_heads: 2,
            encoder_blocks: 2,
            n_classes: 2,
            classifier_hidden: 64,
            common_ratio: 0.4,
            w_ce: 1.0,
            w_match: 0.5,
            w_dis: 0.5,
            w_feat: 0.25,
            w_logit: 0.25,
            lambda_c: 0.005,
            lambda_u: 0.005,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            betas: [0.9, 0.999],
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 32,
            seed: 7,
            regime: Regime::Complete,
            fixed_regime: false,
            eprl_on: true,
            dilr_on: true,
            deterministic_guiding: true,
            center_correlation: false,
            sampled_noise_variance: 0.5,
        }
    }
}

impl EdrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim < 2 || self.tokens == 0 || self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "degenerate architecture: D={}, T={}, K={}",
                self.model_dim, self.tokens, self.n_classes
            )));
        }
        if self.encoder_heads == 0 || self.model_dim % self.encoder_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {} not divisible by {} heads",
                self.model_dim, self.encoder_heads
            )));
        }
        for w in [
            self.w_ce,
            self.w_match,
            self.w_dis,
            self.w_feat,
            self.w_logit,
            self.lambda_c,
            self.lambda_u,
        ] {
            if w < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {w} is negative")));
            }
        }
        if !(0.0 < self.common_ratio && self.common_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "common ratio must be in (0,1), got {}",
                self.common_ratio
            )));
        }
        if self.dilr_on && self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "correlation losses need a batch of at least 2".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epochs must be positive".into()));
        }
        if self.sampled_noise_variance < 0.0 {
            return Err(Error::InvalidArgument(
                "sampled noise variance must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Noise variance used by the per-step sampled-regime menu.
    pub fn menu_noise_variance(&self) -> f64 {
        match self.regime {
            Regime::Noise { variance, .. } => variance,
            _ => self.sampled_noise_variance,
        }
    }
}
