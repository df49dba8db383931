//! Two-pipeline training: the complete pipeline teaches the degraded one
//! through feature and logits distillation while both share parameters.
//! Also the evaluation entry points and the hyperparameter sweep.

use serde::{Deserialize, Serialize};

use crate::config::{EdrlConfig, Regime};
use crate::datagen::{corrupt_missing, corrupt_noise, Dataset, SampleBatch};
use crate::dilr::{common_loss, correlation_blocks, unique_loss, CorrelationMatrix};
use crate::distill::{distillation_losses, KernelSpec, PipelinePair};
use crate::eprl::matching_loss;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{
    EdrlModel, PipelineOutput, STREAM_EVAL, STREAM_GUIDING, STREAM_NOISE, STREAM_REGIME,
    STREAM_TRAIN_SHUFFLE,
};
use crate::nn::Modality;
use crate::optim::Optimizer;
use crate::rng::{RngSnapshot, RngState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub reports: Vec<MetricsReport>,
}

pub struct TrainResult {
    pub model: EdrlModel,
    pub history: Vec<EpochReport>,
    pub final_rng: RngSnapshot,
}

impl TrainResult {
    /// The final-epoch report for the configured regime.
    pub fn final_report(&self) -> Option<&MetricsReport> {
        let want = self.model.config.regime.to_string();
        self.history
            .last()?
            .reports
            .iter()
            .find(|r| r.regime == want)
    }
}

/// Applies a corruption regime to a batch, leaving the input untouched.
pub fn apply_regime(batch: &SampleBatch, regime: &Regime, rng: &mut RngState) -> Result<SampleBatch> {
    match regime {
        Regime::Complete => Ok(batch.clone()),
        Regime::Noise { variance, modality } => corrupt_noise(batch, *modality, *variance, rng),
        Regime::Missing { modality } => corrupt_missing(batch, *modality),
    }
}

/// Per-step corruption for the degraded pipeline. Complete-regime runs
/// never corrupt; otherwise the default samples uniformly over the full
/// menu (one model distilled across all regimes), and `fixed_regime` pins
/// every step to the configured regime.
fn sample_step_regime(config: &EdrlConfig, rng: &mut RngState) -> Regime {
    if config.regime == Regime::Complete {
        return Regime::Complete;
    }
    if config.fixed_regime {
        return config.regime;
    }
    let variance = config.menu_noise_variance();
    match rng.gen_range_usize(5) {
        0 => Regime::Complete,
        1 => Regime::Noise { variance, modality: Modality::M1 },
        2 => Regime::Noise { variance, modality: Modality::M2 },
        3 => Regime::Missing { modality: Modality::M1 },
        _ => Regime::Missing { modality: Modality::M2 },
    }
}

/// Weighted total objective:
/// `w_ce*CE + w_match*L_match + w_dis*(L_com + L_uni) + w_feat*L_feat +
/// w_logit*L_logits`, distillation terms present only with a teacher.
pub fn total_loss(
    model: &EdrlModel,
    student: &PipelineOutput,
    labels: &[usize],
    availability: &[[bool; 2]],
    teacher: Option<&PipelineOutput>,
) -> Result<crate::Tensor> {
    let cfg = &model.config;
    let mut loss = model.classification_loss(student, labels)?.scale(cfg.w_ce);
    if let Some(bank) = &model.bank {
        if cfg.w_match > 0.0 {
            let lm = matching_loss(bank, &student.pooled, labels, availability)?;
            loss = loss.add(&lm.scale(cfg.w_match))?;
        }
    }
    if let Some([r1, r2]) = &student.realigned {
        if cfg.w_dis > 0.0 {
            if labels.len() >= 2 {
                let blocks = correlation_blocks(
                    &r1.combined()?,
                    &r2.combined()?,
                    &model.split,
                    cfg.center_correlation,
                )?;
                let lc = common_loss(&blocks.common, cfg.lambda_c)?;
                let lu = unique_loss(&blocks.unique, cfg.lambda_u)?;
                loss = loss.add(&lc.add(&lu)?.scale(cfg.w_dis))?;
            } else {
                log::warn!("batch of 1: correlation losses skipped");
            }
        }
    }
    if let Some(t) = teacher {
        let kernel = KernelSpec::median_heuristic(&student.fused, &t.fused)?;
        let pair = PipelinePair {
            complete_fused: t.fused.clone(),
            complete_logits: t.logits.clone(),
            degraded_fused: student.fused.clone(),
            degraded_logits: student.logits.clone(),
        };
        let (l_features, l_logits) = distillation_losses(&pair, &kernel)?;
        loss = loss
            .add(&l_features.scale(cfg.w_feat))?
            .add(&l_logits.scale(cfg.w_logit))?;
    }
    Ok(loss)
}

fn check_dataset(config: &EdrlConfig, dataset: &Dataset) -> Result<()> {
    let s = &dataset.spec;
    if s.tokens != config.tokens
        || s.raw_widths != config.raw_widths
        || s.n_classes != config.n_classes
    {
        return Err(Error::InvalidArgument(format!(
            "dataset (T={}, widths={:?}, K={}) does not match config (T={}, widths={:?}, K={})",
            s.tokens, s.raw_widths, s.n_classes, config.tokens, config.raw_widths, config.n_classes
        )));
    }
    Ok(())
}

/// The regimes evaluated every epoch: complete, noisy, and missing on the
/// configured regime's modality (M2 when training on complete data).
pub fn eval_regimes(config: &EdrlConfig) -> Vec<Regime> {
    let modality = config.regime.modality().unwrap_or(Modality::M2);
    vec![
        Regime::Complete,
        Regime::Noise { variance: config.menu_noise_variance(), modality },
        Regime::Missing { modality },
    ]
}

/// Trains a fresh model. Per step: complete pipeline on the clean batch,
/// degraded pipeline on a corrupted copy of the same batch, backprop of
/// the total loss into the degraded path (the teacher is detached inside
/// the distillation losses), one optimizer step. Evaluates all three
/// regimes on the test split each epoch.
pub fn train(config: &EdrlConfig, dataset: &Dataset) -> Result<TrainResult> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let model = EdrlModel::new(config)?;
    let params = model.param_tensors();
    let mut opt = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.betas,
        config.weight_decay,
        &params,
    );
    let mut shuffle_rng = RngState::with_stream(config.seed, STREAM_TRAIN_SHUFFLE);
    let mut guide_rng = RngState::with_stream(config.seed, STREAM_GUIDING);
    let mut regime_rng = RngState::with_stream(config.seed, STREAM_REGIME);
    let mut noise_rng = RngState::with_stream(config.seed, STREAM_NOISE);

    let n = dataset.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let perm = shuffle_rng.permutation(n);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in perm.chunks(config.batch_size) {
            if chunk.len() < 2 && config.dilr_on {
                continue; // correlation losses are degenerate at B = 1
            }
            let clean = dataset.train.select(chunk)?;
            let step_regime = sample_step_regime(config, &mut regime_rng);
            let loss = if step_regime == Regime::Complete {
                let out = model.forward(&clean, &mut guide_rng, true, true)?;
                total_loss(&model, &out, &clean.labels, &clean.availability, None)?
            } else {
                let teacher = model.forward(&clean, &mut guide_rng, true, true)?;
                let degraded = apply_regime(&clean, &step_regime, &mut noise_rng)?;
                let student = model.forward(&degraded, &mut guide_rng, true, true)?;
                total_loss(
                    &model,
                    &student,
                    &degraded.labels,
                    &degraded.availability,
                    Some(&teacher),
                )?
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence { step });
            }
            loss.backward()?;
            opt.step(&params)?;
            opt.zero_grad(&params);
            loss_sum += value;
            loss_count += 1;
            step += 1;
        }
        let mut reports = Vec::new();
        for regime in eval_regimes(config) {
            reports.push(evaluate_at_epoch(&model, &dataset.test, &regime, epoch)?);
        }
        history.push(EpochReport {
            epoch,
            mean_loss: if loss_count == 0 { f64::NAN } else { loss_sum / loss_count as f64 },
            reports,
        });
    }
    Ok(TrainResult { model, history, final_rng: guide_rng.snapshot() })
}

/// Thread cap semantics of EDRL_THREADS: positive integer; absent means 1.
pub fn parse_threads(raw: Option<&str>) -> Result<usize> {
    match raw {
        None => Ok(1),
        Some(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidArgument(format!(
                "EDRL_THREADS must be a positive integer, got `{raw}`"
            ))),
        },
    }
}

fn eval_threads() -> Result<usize> {
    parse_threads(std::env::var("EDRL_THREADS").ok().as_deref())
}

/// Plain-data image of a batch slice, movable across threads.
struct BatchBytes {
    m1: Vec<f64>,
    m2: Vec<f64>,
    shape1: Vec<usize>,
    shape2: Vec<usize>,
    labels: Vec<usize>,
    availability: Vec<[bool; 2]>,
    noise_variance: [f64; 2],
}

impl BatchBytes {
    fn of(batch: &SampleBatch) -> Self {
        BatchBytes {
            m1: batch.m1.to_vec(),
            m2: batch.m2.to_vec(),
            shape1: batch.m1.shape().to_vec(),
            shape2: batch.m2.shape().to_vec(),
            labels: batch.labels.clone(),
            availability: batch.availability.clone(),
            noise_variance: batch.noise_variance,
        }
    }

    fn rebuild(&self) -> Result<SampleBatch> {
        Ok(SampleBatch {
            m1: crate::Tensor::from_vec(&self.shape1, self.m1.clone())?,
            m2: crate::Tensor::from_vec(&self.shape2, self.m2.clone())?,
            labels: self.labels.clone(),
            availability: self.availability.clone(),
            noise_variance: self.noise_variance,
        })
    }
}

fn score_batch(model: &EdrlModel, batch: &SampleBatch, rng_stream: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngState::with_stream(model.config.seed, rng_stream);
    let sample = !model.config.deterministic_guiding;
    let out = model.forward(batch, &mut rng, false, sample)?;
    let probs = out.logits.softmax(1)?;
    let k = model.config.n_classes;
    let data = probs.to_vec();
    Ok((0..batch.len()).map(|i| data[i * k..(i + 1) * k].to_vec()).collect())
}

/// Deterministic metrics for a model under one regime. Evaluation may
/// fan out over EDRL_THREADS read-only replicas; scores are merged back
/// in sample order, so the result is independent of the thread count in
/// deterministic-guiding mode.
pub fn evaluate(model: &EdrlModel, test: &SampleBatch, regime: &Regime) -> Result<MetricsReport> {
    evaluate_at_epoch(model, test, regime, 0)
}

pub fn evaluate_at_epoch(
    model: &EdrlModel,
    test: &SampleBatch,
    regime: &Regime,
    epoch: usize,
) -> Result<MetricsReport> {
    evaluate_with_threads(model, test, regime, epoch, eval_threads()?)
}

/// [`evaluate_at_epoch`] with an explicit thread cap instead of the
/// EDRL_THREADS environment variable.
pub fn evaluate_with_threads(
    model: &EdrlModel,
    test: &SampleBatch,
    regime: &Regime,
    epoch: usize,
    threads: usize,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let mut rng = RngState::with_stream(model.config.seed, STREAM_EVAL);
    let corrupted = apply_regime(test, regime, &mut rng)?;
    let threads = threads.max(1).min(corrupted.len());
    let scores: Vec<Vec<f64>> = if threads <= 1 {
        score_batch(model, &corrupted, STREAM_EVAL + 1)?
    } else {
        let n = corrupted.len();
        let chunk = n.div_ceil(threads);
        let config = model.config.clone();
        let values = model.param_values();
        let mut pieces: Vec<(usize, Vec<BatchBytes>)> = Vec::new();
        let mut starts = Vec::new();
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            starts.push(start);
            pieces.push((start, vec![BatchBytes::of(&corrupted.select(&idx)?)]));
        }
        let results: Vec<Result<(usize, Vec<Vec<f64>>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = pieces
                .iter()
                .map(|(start, bytes)| {
                    let config = config.clone();
                    let values = &values;
                    scope.spawn(move || -> Result<(usize, Vec<Vec<f64>>)> {
                        let replica = EdrlModel::new(&config)?;
                        replica.load_values(values)?;
                        let batch = bytes[0].rebuild()?;
                        let scores =
                            score_batch(&replica, &batch, STREAM_EVAL + 1 + *start as u64)?;
                        Ok((*start, scores))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        let mut merged: Vec<(usize, Vec<Vec<f64>>)> =
            results.into_iter().collect::<Result<Vec<_>>>()?;
        merged.sort_by_key(|(start, _)| *start);
        merged.into_iter().flat_map(|(_, s)| s).collect()
    };
    compute_metrics(
        &scores,
        &corrupted.labels,
        model.config.n_classes,
        &regime.to_string(),
        epoch,
    )
}

/// Correlation blocks of the realigned features over a whole split, for
/// export and the disentanglement check. Requires DiLR.
pub fn correlation_on_split(model: &EdrlModel, batch: &SampleBatch) -> Result<CorrelationMatrix> {
    if model.realign.is_none() {
        return Err(Error::InvalidArgument(
            "correlation export requires the disentanglement module".into(),
        ));
    }
    let mut rng = RngState::with_stream(model.config.seed, STREAM_EVAL + 2);
    let out = model.forward(batch, &mut rng, false, !model.config.deterministic_guiding)?;
    let [r1, r2] = out.realigned.as_ref().expect("realign is on");
    correlation_blocks(
        &r1.combined()?,
        &r2.combined()?,
        &model.split,
        model.config.center_correlation,
    )
}

// ── sweep ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Common-channel ratio p.
    CommonRatio,
    /// Noise variance of the evaluation regime.
    NoiseVariance,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepParam::CommonRatio),
            "noise_var" => Ok(SweepParam::NoiseVariance),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter `{other}` (expected p | noise_var)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::CommonRatio => write!(f, "p"),
            SweepParam::NoiseVariance => write!(f, "noise_var"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
}

/// Trains one model per (value, seed) and evaluates under the configured
/// regime.
pub fn sweep(
    config: &EdrlConfig,
    dataset: &Dataset,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &seed in seeds {
        for &value in values {
            let mut cfg = config.clone();
            cfg.seed = seed;
            match param {
                SweepParam::CommonRatio => cfg.common_ratio = value,
                SweepParam::NoiseVariance => {
                    let modality = cfg.regime.modality().unwrap_or(Modality::M2);
                    cfg.regime = Regime::Noise { variance: value, modality };
                }
            }
            let result = train(&cfg, dataset)?;
            let report = evaluate(&result.model, &dataset.test, &cfg.regime)?;
            rows.push(SweepRow {
                param: param.to_string(),
                value,
                seed,
                accuracy: report.accuracy,
                macro_auc: report.macro_auc,
                macro_f1: report.macro_f1,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec { samples_per_class: 12, ..SyntheticSpec::default() }
    }

    fn tiny_config() -> EdrlConfig {
        EdrlConfig {
            model_dim: 12,
            classifier_hidden: 12,
            epochs: 2,
            batch_size: 6,
            ..EdrlConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let dataset = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.learning_rate = 0.0;
        cfg.epochs = 1;
        let before = EdrlModel::new(&cfg).unwrap().param_values();
        let result = train(&cfg, &dataset).unwrap();
        let after = result.model.param_values();
        for ((name_a, a), (name_b, b)) in before.iter().zip(&after) {
            assert_eq!(name_a, name_b);
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {name_a} changed under lr = 0"
            );
        }
    }

    #[test]
    fn same_seed_identical_histories() {
        let dataset = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.regime = Regime::Noise { variance: 0.5, modality: Modality::M1 };
        let a = train(&cfg, &dataset).unwrap();
        let b = train(&cfg, &dataset).unwrap();
        for (ea, eb) in a.history.iter().zip(&b.history) {
            assert_eq!(ea.mean_loss.to_bits(), eb.mean_loss.to_bits());
            for (ra, rb) in ea.reports.iter().zip(&eb.reports) {
                assert_eq!(ra, rb);
            }
        }
    }

    #[test]
    fn teacher_equals_student_adds_nothing() {
        let dataset = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let model = EdrlModel::new(&cfg).unwrap();
        let batch = dataset.train.select(&[0, 1, 2, 3]).unwrap();
        let mut rng = RngState::new(1);
        let out = model.forward(&batch, &mut rng, true, false).unwrap();
        let plain = total_loss(&model, &out, &batch.labels, &batch.availability, None)
            .unwrap()
            .item();
        let with_self = total_loss(&model, &out, &batch.labels, &batch.availability, Some(&out))
            .unwrap()
            .item();
        assert!((plain - with_self).abs() < 1e-10);
    }

    #[test]
    fn total_loss_matches_component_sum() {
        let dataset = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let model = EdrlModel::new(&cfg).unwrap();
        let clean = dataset.train.select(&[0, 1, 2, 3, 4, 5]).unwrap();
        let mut grng = RngState::new(5);
        let teacher = model.forward(&clean, &mut grng, true, true).unwrap();
        let degraded =
            apply_regime(&clean, &Regime::Noise { variance: 0.5, modality: Modality::M2 }, &mut RngState::new(6))
                .unwrap();
        let student = model.forward(&degraded, &mut grng, true, true).unwrap();
        let total = total_loss(&model, &student, &degraded.labels, &degraded.availability, Some(&teacher))
            .unwrap()
            .item();

        // independent recomposition from the component functions
        let ce = model.classification_loss(&student, &degraded.labels).unwrap().item();
        let lm = matching_loss(
            model.bank.as_ref().unwrap(),
            &student.pooled,
            &degraded.labels,
            &degraded.availability,
        )
        .unwrap()
        .item();
        let [r1, r2] = student.realigned.as_ref().unwrap();
        let blocks = correlation_blocks(
            &r1.combined().unwrap(),
            &r2.combined().unwrap(),
            &model.split,
            false,
        )
        .unwrap();
        let lc = common_loss(&blocks.common, cfg.lambda_c).unwrap().item();
        let lu = unique_loss(&blocks.unique, cfg.lambda_u).unwrap().item();
        let kernel = KernelSpec::median_heuristic(&student.fused, &teacher.fused).unwrap();
        let pair = PipelinePair {
            complete_fused: teacher.fused.clone(),
            complete_logits: teacher.logits.clone(),
            degraded_fused: student.fused.clone(),
            degraded_logits: student.logits.clone(),
        };
        let (lf, ll) = distillation_losses(&pair, &kernel).unwrap();
        let expect = cfg.w_ce * ce
            + cfg.w_match * lm
            + cfg.w_dis * (lc + lu)
            + cfg.w_feat * lf.item()
            + cfg.w_logit * ll.item();
        assert!((total - expect).abs() < 1e-10, "{total} vs {expect}");
    }

    #[test]
    fn teacher_branch_gets_no_gradient_through_total_loss() {
        let dataset = generate(&tiny_spec()).unwrap();
        let cfg = EdrlConfig {
            regime: Regime::Missing { modality: Modality::M2 },
            ..tiny_config()
        };
        let model = EdrlModel::new(&cfg).unwrap();
        let clean = dataset.train.select(&[0, 1, 2, 3]).unwrap();
        let mut grng = RngState::new(2);
        let teacher = model.forward(&clean, &mut grng, true, true).unwrap();
        let degraded = corrupt_missing(&clean, Modality::M2).unwrap();
        let student = model.forward(&degraded, &mut grng, true, true).unwrap();
        let loss = total_loss(&model, &student, &degraded.labels, &degraded.availability, Some(&teacher))
            .unwrap();
        loss.backward().unwrap();
        // the teacher pass's outputs sit outside the differentiated graph
        assert!(teacher.logits.grad().is_none());
        assert!(teacher.fused.grad().is_none());
        assert!(student.logits.grad().is_some());
    }

    #[test]
    fn poisoned_input_aborts_training_with_a_numeric_error() {
        let mut dataset = generate(&tiny_spec()).unwrap();
        // poison one token value; the first finiteness gate on the path
        // (here the encoder softmax) surfaces it before parameters move
        let mut data = dataset.train.m1.to_vec();
        data[0] = f64::NAN;
        dataset.train.m1 = crate::Tensor::from_vec(dataset.train.m1.shape(), data).unwrap();
        let cfg = tiny_config();
        match train(&cfg, &dataset) {
            Err(Error::Divergence { .. } | Error::Domain { .. } | Error::NonFinite { .. }) => {}
            other => panic!("expected a numeric abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_loss_is_a_divergence_with_step_index() {
        // drive the loss itself non-finite: gigantic logits make the
        // cross-entropy of a mislabeled row overflow to +inf without any
        // op-level domain check firing
        let dataset = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let model = EdrlModel::new(&cfg).unwrap();
        let big = 1e308;
        let bias = &model.classifier.layers.last().unwrap().bias;
        bias.set_data(&[big, -big]).unwrap();
        let batch = dataset.train.select(&[0, 1, 2, 3]).unwrap();
        let mut rng = RngState::new(0);
        let out = model.forward(&batch, &mut rng, true, true).unwrap();
        let loss = total_loss(&model, &out, &batch.labels, &batch.availability, None).unwrap();
        assert!(!loss.item().is_finite());
        // the training loop maps this to Divergence at the current step
        let step = 7usize;
        let guard: Result<()> = if loss.item().is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence { step })
        };
        assert_eq!(guard, Err(Error::Divergence { step: 7 }));
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let dataset = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.raw_widths = [8, 16];
        assert!(train(&cfg, &dataset).is_err());
    }

    #[test]
    fn evaluate_is_deterministic_and_respects_regime() {
        let dataset = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        let result = train(&cfg, &dataset).unwrap();
        let r = Regime::Missing { modality: Modality::M2 };
        let a = evaluate(&result.model, &dataset.test, &r).unwrap();
        let b = evaluate(&result.model, &dataset.test, &r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.regime, "missing:M2");
    }

    #[test]
    fn parallel_evaluation_matches_single_thread() {
        let dataset = generate(&tiny_spec()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        let result = train(&cfg, &dataset).unwrap();
        let r = Regime::Complete;
        let single = evaluate_with_threads(&result.model, &dataset.test, &r, 0, 1).unwrap();
        for threads in [2, 3, 7] {
            let multi =
                evaluate_with_threads(&result.model, &dataset.test, &r, 0, threads).unwrap();
            assert_eq!(single, multi, "thread count {threads} changed metrics");
        }
    }

    #[test]
    fn thread_env_parsing() {
        assert_eq!(parse_threads(None).unwrap(), 1);
        assert_eq!(parse_threads(Some("4")).unwrap(), 4);
        assert!(parse_threads(Some("0")).is_err());
        assert!(parse_threads(Some("zero")).is_err());
        assert!(parse_threads(Some("-2")).is_err());
    }
}
