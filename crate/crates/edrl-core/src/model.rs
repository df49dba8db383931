//! The full model: per-modality encoders, the essence-point bank, the
//! realignment blocks, and the classification head, with the single
//! forward pass both pipelines share.

use crate::config::EdrlConfig;
use crate::datagen::SampleBatch;
use crate::dilr::{fuse, split_channels, RealignBlock, RealignedFeatures, SplitSpec};
use crate::eprl::{
    guiding_for_batch, infer_classes_batch, pooled_feature, EssencePointBank, GuidingTokens,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Modality, ModalityEncoder};
use crate::ops::cross_entropy;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Substream ids of the run seed.
pub const STREAM_INIT: u64 = 10;
pub const STREAM_TRAIN_SHUFFLE: u64 = 11;
pub const STREAM_GUIDING: u64 = 12;
pub const STREAM_REGIME: u64 = 13;
pub const STREAM_NOISE: u64 = 14;
pub const STREAM_EVAL: u64 = 20;

/// Everything one pipeline pass produces.
pub struct PipelineOutput {
    pub fused: Tensor,  // [B, F]
    pub logits: Tensor, // [B, K]
    /// Post-substitution pooled feature per modality, [B, D].
    pub pooled: [Tensor; 2],
    pub realigned: Option<[RealignedFeatures; 2]>,
    /// Classes used to route guiding tokens (labels in training,
    /// essence-point inference otherwise).
    pub guiding_classes: Vec<usize>,
}

pub struct EdrlModel {
    pub config: EdrlConfig,
    pub split: SplitSpec,
    pub encoders: [ModalityEncoder; 2],
    pub bank: Option<EssencePointBank>,
    pub realign: Option<[RealignBlock; 2]>,
    pub classifier: Mlp,
}

impl EdrlModel {
    /// Builds all blocks in a fixed order from the seed's init substream,
    /// so construction is deterministic.
    pub fn new(config: &EdrlConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::with_stream(config.seed, STREAM_INIT);
        let d = config.model_dim;
        let split = SplitSpec::from_ratio(d, config.common_ratio)?;
        let encoders = [
            ModalityEncoder::new(
                Modality::M1,
                config.raw_widths[0],
                d,
                config.encoder_heads,
                config.encoder_blocks,
                &mut rng,
            )?,
            ModalityEncoder::new(
                Modality::M2,
                config.raw_widths[1],
                d,
                config.encoder_heads,
                config.encoder_blocks,
                &mut rng,
            )?,
        ];
        let bank = if config.eprl_on {
            Some(EssencePointBank::new(config.n_classes, d, &mut rng)?)
        } else {
            None
        };
        let realign = if config.dilr_on {
            Some([
                RealignBlock::new(Modality::M1, d, split, &mut rng)?,
                RealignBlock::new(Modality::M2, d, split, &mut rng)?,
            ])
        } else {
            None
        };
        let fused_width = if config.dilr_on { 2 * split.unique + split.common } else { 2 * d };
        let classifier = Mlp::new(
            &[fused_width, config.classifier_hidden, config.n_classes],
            Activation::Relu,
            &mut rng,
        )?;
        Ok(EdrlModel { config: config.clone(), split, encoders, bank, realign, classifier })
    }

    /// The width of the fused feature entering the classifier.
    pub fn fused_width(&self) -> usize {
        self.classifier.in_dim()
    }

    fn validate_batch(&self, batch: &SampleBatch, use_labels: bool) -> Result<()> {
        let c = &self.config;
        for (m, tokens) in [&batch.m1, &batch.m2].iter().enumerate() {
            let want = [batch.len(), c.tokens, c.raw_widths[m]];
            if tokens.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: tokens.shape().to_vec(),
                    rhs: want.to_vec(),
                });
            }
        }
        if let Some(i) = batch.availability.iter().position(|a| !a[0] && !a[1]) {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: no modality available"
            )));
        }
        if use_labels {
            if let Some(&bad) = batch.labels.iter().find(|&&l| l >= c.n_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {} classes",
                    c.n_classes
                )));
            }
        }
        Ok(())
    }

    /// One pipeline pass: encode available modalities, derive guiding
    /// tokens (labels in training, inferred classes otherwise), substitute
    /// a missing modality's tokens with copies of its guiding token, then
    /// either realign/fuse (DiLR on) or concatenate pooled features.
    pub fn forward(
        &self,
        batch: &SampleBatch,
        rng: &mut RngState,
        use_labels: bool,
        sample_guiding: bool,
    ) -> Result<PipelineOutput> {
        self.validate_batch(batch, use_labels)?;
        let b = batch.len();
        let d = self.config.model_dim;
        let t = self.config.tokens;

        let mut encoded = [
            self.encoders[0].forward(&batch.m1)?,
            self.encoders[1].forward(&batch.m2)?,
        ];

        // classes for guiding: labels when training, essence-point
        // inference on available modalities otherwise
        let guiding_classes: Vec<usize> = if self.bank.is_none() {
            vec![0; b]
        } else if use_labels {
            batch.labels.clone()
        } else {
            let pooled_raw = [pooled_feature(&encoded[0])?, pooled_feature(&encoded[1])?];
            infer_classes_batch(
                self.bank.as_ref().unwrap(),
                &pooled_raw,
                &batch.availability,
            )?
        };

        let guiding = match &self.bank {
            Some(bank) => guiding_for_batch(bank, &guiding_classes, rng, !sample_guiding)?,
            None => GuidingTokens::zeros(b, d),
        };

        // a missing modality's encoded tokens become T copies of its
        // guiding token; without the bank the zero payload stays as-is
        if self.bank.is_some() {
            for m in 0..2 {
                if batch.availability.iter().any(|a| !a[m]) {
                    let mask = Tensor::from_vec(
                        &[b],
                        batch
                            .availability
                            .iter()
                            .map(|a| if a[m] { 1.0 } else { 0.0 })
                            .collect(),
                    )?;
                    let keep = mask.repeat_new_axis(1, t)?.repeat_new_axis(2, d)?;
                    let fill = mask
                        .neg()
                        .add_scalar(1.0)
                        .repeat_new_axis(1, t)?
                        .repeat_new_axis(2, d)?;
                    let guide_tokens = guiding.uni[m].repeat_new_axis(1, t)?;
                    encoded[m] = encoded[m]
                        .mul(&keep)?
                        .add(&guide_tokens.mul(&fill)?)?;
                }
            }
        }

        let pooled = [pooled_feature(&encoded[0])?, pooled_feature(&encoded[1])?];

        let (fused, realigned) = match &self.realign {
            Some(blocks) => {
                let mut feats = Vec::with_capacity(2);
                for m in 0..2 {
                    let (com, uni) = split_channels(&encoded[m], &self.split)?;
                    feats.push(blocks[m].forward(&com, &uni, &guiding)?);
                }
                let r2 = feats.pop().unwrap();
                let r1 = feats.pop().unwrap();
                let fused = fuse(&r1, &r2)?;
                (fused, Some([r1, r2]))
            }
            None => (Tensor::concat(&[&pooled[0], &pooled[1]], 1)?, None),
        };
        let logits = self.classifier.forward(&fused)?;
        Ok(PipelineOutput { fused, logits, pooled, realigned, guiding_classes })
    }

    /// Mean cross-entropy of this model's logits against labels.
    pub fn classification_loss(&self, out: &PipelineOutput, labels: &[usize]) -> Result<Tensor> {
        cross_entropy(&out.logits, labels)
    }

    /// Named parameters in a stable order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoders[0].collect_params("enc.m1", &mut out);
        self.encoders[1].collect_params("enc.m2", &mut out);
        if let Some(bank) = &self.bank {
            bank.collect_params("bank", &mut out);
        }
        if let Some(blocks) = &self.realign {
            blocks[0].collect_params("realign.m1", &mut out);
            blocks[1].collect_params("realign.m2", &mut out);
        }
        self.classifier.collect_params("classifier", &mut out);
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Raw values of every parameter, for checkpointing and replicas.
    pub fn param_values(&self) -> Vec<(String, Vec<f64>)> {
        self.parameters()
            .into_iter()
            .map(|(name, t)| (name, t.to_vec()))
            .collect()
    }

    /// Overwrites parameters by name. Every model parameter must be
    /// present with the right length.
    pub fn load_values(&self, values: &[(String, Vec<f64>)]) -> Result<()> {
        let params = self.parameters();
        if params.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                params.len()
            )));
        }
        for (name, tensor) in &params {
            let found = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
            tensor.set_data(&found.1).map_err(|_| {
                Error::InvalidArgument(format!(
                    "parameter `{name}`: expected {} values, found {}",
                    tensor.numel(),
                    found.1.len()
                ))
            })?;
        }
        Ok(())
    }

    /// A fresh model with identical parameter values (for read-only
    /// evaluation replicas).
    pub fn replicate(&self) -> Result<EdrlModel> {
        let clone = EdrlModel::new(&self.config)?;
        clone.load_values(&self.param_values())?;
        Ok(clone)
    }
}
