//! Synthetic two-modality data with planted common and per-modality
//! unique latent factors, the corruption operators for the noisy and
//! missing regimes, and dataset persistence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Blob};
use crate::error::{Error, Result};
use crate::nn::Modality;
use crate::rng::RngState;
use crate::tensor::Tensor;

// Named substreams of the dataset seed. Per-sample streams are offset by
// the sample's global index, so generation is independent of how samples
// are batched or threaded.
const STREAM_STRUCTURE: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SAMPLE_BASE: u64 = 1000;

/// Generation recipe; serialized with the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub tokens: usize,
    pub raw_widths: [usize; 2],
    pub common_dim: usize,
    /// Unique-factor dimension per modality.
    pub unique_dim: usize,
    /// Observation noise standard deviation is 1/snr.
    pub snr: f64,
    /// Scale of class-mean separation for the common factor.
    pub common_separation: f64,
    /// Scale of class-mean separation for unique factors. Kept small by
    /// default so one modality's unique factors stay unrecoverable from
    /// the other modality.
    pub unique_separation: f64,
    /// Pass the mixed signal through tanh before adding noise.
    pub nonlinear_mix: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 2,
            samples_per_class: 200,
            tokens: 8,
            raw_widths: [16, 16],
            common_dim: 4,
            unique_dim: 4,
            snr: 10.0,
            common_separation: 1.8,
            unique_separation: 0.4,
            nonlinear_mix: false,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_classes > 0
            && self.samples_per_class > 0
            && self.tokens > 0
            && self.raw_widths.iter().all(|&w| w > 0)
            && self.common_dim > 0
            && self.unique_dim > 0
            && self.snr > 0.0;
        if !positive {
            return Err(Error::InvalidArgument(format!(
                "degenerate synthetic spec: {self:?}"
            )));
        }
        let factor_dim = self.common_dim + self.unique_dim;
        if self.raw_widths.iter().any(|&w| factor_dim > w) {
            return Err(Error::InvalidArgument(format!(
                "factor dimension {factor_dim} exceeds a raw width in {:?}",
                self.raw_widths
            )));
        }
        if self.common_separation < 0.0 || self.unique_separation < 0.0 {
            return Err(Error::InvalidArgument(
                "class-mean separations must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of two-modality token sequences with labels and per-sample
/// availability flags. Missing payloads are zero-filled; the flag is the
/// ground truth.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub m1: Tensor, // [B, T, W1]
    pub m2: Tensor, // [B, T, W2]
    pub labels: Vec<usize>,
    pub availability: Vec<[bool; 2]>,
    /// Cumulative additive-noise variance applied per modality.
    pub noise_variance: [f64; 2],
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self, m: Modality) -> &Tensor {
        match m {
            Modality::M1 => &self.m1,
            Modality::M2 => &self.m2,
        }
    }

    /// Gathers the given sample rows into a new batch.
    pub fn select(&self, idx: &[usize]) -> Result<SampleBatch> {
        let gather = |t: &Tensor| -> Result<Tensor> {
            let (b, tk, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let flat = t.reshape(&[b, tk * w])?;
            flat.index_rows(idx)?.reshape(&[idx.len(), tk, w])
        };
        Ok(SampleBatch {
            m1: gather(&self.m1)?.detach(),
            m2: gather(&self.m2)?.detach(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            availability: idx.iter().map(|&i| self.availability[i]).collect(),
            noise_variance: self.noise_variance,
        })
    }
}

/// Train/test split plus the spec that generated it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: SampleBatch,
    pub test: SampleBatch,
}

/// Planted per-sample factor values, ordered like the dataset splits.
/// Exposed so disentanglement claims can be probed against ground truth.
#[derive(Debug, Clone)]
pub struct PlantedFactors {
    pub train_common: Vec<Vec<f64>>,
    pub train_unique: [Vec<Vec<f64>>; 2],
    pub test_common: Vec<Vec<f64>>,
    pub test_unique: [Vec<Vec<f64>>; 2],
}

/// Draws the dataset: per class-c sample, a common factor and per-modality
/// unique factors around seeded class means, linearly mixed per token and
/// observed under 1/snr noise. The 80/20 split comes from a seeded
/// shuffle.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_detailed(spec).map(|(d, _)| d)
}

/// [`generate`] plus the planted factor values behind each sample.
pub fn generate_detailed(spec: &SyntheticSpec) -> Result<(Dataset, PlantedFactors)> {
    spec.validate()?;
    let factor_dim = spec.common_dim + spec.unique_dim;
    let mut structure = RngState::with_stream(spec.seed, STREAM_STRUCTURE);
    // class means
    let mu_com: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            structure
                .normal_vec(spec.common_dim)
                .into_iter()
                .map(|v| v * spec.common_separation)
                .collect()
        })
        .collect();
    let mu_uni: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| {
            (0..spec.n_classes)
                .map(|_| {
                    structure
                        .normal_vec(spec.unique_dim)
                        .into_iter()
                        .map(|v| v * spec.unique_separation)
                        .collect()
                })
                .collect()
        })
        .collect();
    // fixed full-rank mixing maps, one [factor_dim, W] matrix per token
    let scale = 1.0 / (factor_dim as f64).sqrt();
    let maps: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|m| {
            (0..spec.tokens)
                .map(|_| {
                    structure
                        .normal_vec(factor_dim * spec.raw_widths[m])
                        .into_iter()
                        .map(|v| v * scale)
                        .collect()
                })
                .collect()
        })
        .collect();

    let total = spec.n_classes * spec.samples_per_class;
    let noise_std = 1.0 / spec.snr;
    let mut tokens = [
        vec![0.0; total * spec.tokens * spec.raw_widths[0]],
        vec![0.0; total * spec.tokens * spec.raw_widths[1]],
    ];
    let mut labels = vec![0usize; total];
    let mut all_common: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut all_unique: [Vec<Vec<f64>>; 2] = [Vec::with_capacity(total), Vec::with_capacity(total)];
    for j in 0..total {
        let class = j / spec.samples_per_class;
        labels[j] = class;
        let mut rng = RngState::with_stream(spec.seed, STREAM_SAMPLE_BASE + j as u64);
        let z_com: Vec<f64> = rng
            .normal_vec(spec.common_dim)
            .iter()
            .zip(&mu_com[class])
            .map(|(e, m)| m + e)
            .collect();
        for m in 0..2 {
            let w = spec.raw_widths[m];
            let z_uni: Vec<f64> = rng
                .normal_vec(spec.unique_dim)
                .iter()
                .zip(&mu_uni[m][class])
                .map(|(e, mu)| mu + e)
                .collect();
            let z: Vec<f64> = z_com.iter().chain(z_uni.iter()).cloned().collect();
            for t in 0..spec.tokens {
                let map = &maps[m][t];
                let base = (j * spec.tokens + t) * w;
                for col in 0..w {
                    let mut v = 0.0;
                    for (f, zf) in z.iter().enumerate() {
                        v += zf * map[f * w + col];
                    }
                    if spec.nonlinear_mix {
                        v = v.tanh();
                    }
                    tokens[m][base + col] = v + noise_std * rng.next_normal();
                }
            }
            all_unique[m].push(z_uni);
        }
        all_common.push(z_com);
    }

    let perm = RngState::with_stream(spec.seed, STREAM_SHUFFLE).permutation(total);
    let n_train = ((total as f64) * 0.8).round() as usize;
    let build = |idx: &[usize]| -> Result<SampleBatch> {
        let b = idx.len();
        let mut m1 = Vec::with_capacity(b * spec.tokens * spec.raw_widths[0]);
        let mut m2 = Vec::with_capacity(b * spec.tokens * spec.raw_widths[1]);
        let mut labs = Vec::with_capacity(b);
        for &i in idx {
            let w1 = spec.tokens * spec.raw_widths[0];
            let w2 = spec.tokens * spec.raw_widths[1];
            m1.extend_from_slice(&tokens[0][i * w1..(i + 1) * w1]);
            m2.extend_from_slice(&tokens[1][i * w2..(i + 1) * w2]);
            labs.push(labels[i]);
        }
        Ok(SampleBatch {
            m1: Tensor::from_vec(&[b, spec.tokens, spec.raw_widths[0]], m1)?,
            m2: Tensor::from_vec(&[b, spec.tokens, spec.raw_widths[1]], m2)?,
            labels: labs,
            availability: vec![[true, true]; b],
            noise_variance: [0.0, 0.0],
        })
    };
    let pick = |idx: &[usize], rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        idx.iter().map(|&i| rows[i].clone()).collect()
    };
    let factors = PlantedFactors {
        train_common: pick(&perm[..n_train], &all_common),
        train_unique: [
            pick(&perm[..n_train], &all_unique[0]),
            pick(&perm[..n_train], &all_unique[1]),
        ],
        test_common: pick(&perm[n_train..], &all_common),
        test_unique: [
            pick(&perm[n_train..], &all_unique[0]),
            pick(&perm[n_train..], &all_unique[1]),
        ],
    };
    let dataset = Dataset {
        spec: spec.clone(),
        train: build(&perm[..n_train])?,
        test: build(&perm[n_train..])?,
    };
    Ok((dataset, factors))
}

/// Flags one modality missing on every sample and zeroes its payload.
/// The input batch is untouched. Removing the last available modality of
/// any sample is an error.
pub fn corrupt_missing(batch: &SampleBatch, modality: Modality) -> Result<SampleBatch> {
    let m = modality.index();
    let other = modality.other().index();
    if let Some(i) = batch.availability.iter().position(|a| !a[other]) {
        return Err(Error::InvalidArgument(format!(
            "sample {i}: removing {modality} would leave no available modality"
        )));
    }
    let mut out = batch.clone();
    let zeroed = Tensor::zeros(batch.tokens(modality).shape());
    match modality {
        Modality::M1 => out.m1 = zeroed,
        Modality::M2 => out.m2 = zeroed,
    }
    for a in &mut out.availability {
        a[m] = false;
    }
    Ok(out)
}

/// Adds i.i.d. N(0, variance) to one modality's tokens, recording the
/// applied variance. The input batch is untouched.
pub fn corrupt_noise(
    batch: &SampleBatch,
    modality: Modality,
    variance: f64,
    rng: &mut RngState,
) -> Result<SampleBatch> {
    if variance < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be nonnegative, got {variance}"
        )));
    }
    let mut out = batch.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let std = variance.sqrt();
    let src = batch.tokens(modality);
    let noisy: Vec<f64> = src.data().iter().map(|v| v + std * rng.next_normal()).collect();
    let noisy = Tensor::from_vec(src.shape(), noisy)?;
    match modality {
        Modality::M1 => out.m1 = noisy,
        Modality::M2 => out.m2 = noisy,
    }
    out.noise_variance[modality.index()] += variance;
    Ok(out)
}

// ── persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    labels: Vec<usize>,
    availability: Vec<[bool; 2]>,
    noise_variance: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SyntheticSpec,
    train: SplitMeta,
    test: SplitMeta,
}

fn split_meta(batch: &SampleBatch) -> SplitMeta {
    SplitMeta {
        labels: batch.labels.clone(),
        availability: batch.availability.clone(),
        noise_variance: batch.noise_variance,
    }
}

pub fn save(path: &Path, dataset: &Dataset) -> Result<()> {
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        train: split_meta(&dataset.train),
        test: split_meta(&dataset.test),
    };
    let blobs = vec![
        Blob::new("train.m1", dataset.train.m1.shape().to_vec(), dataset.train.m1.to_vec())?,
        Blob::new("train.m2", dataset.train.m2.shape().to_vec(), dataset.train.m2.to_vec())?,
        Blob::new("test.m1", dataset.test.m1.shape().to_vec(), dataset.test.m1.to_vec())?,
        Blob::new("test.m2", dataset.test.m2.shape().to_vec(), dataset.test.m2.to_vec())?,
    ];
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::InvalidArgument(format!("dataset meta: {e}")))?;
    write_container(path, "dataset", meta, &blobs)
}

pub fn load(path: &Path) -> Result<Dataset> {
    let (meta, blobs) = read_container(path, "dataset")?;
    let meta: DatasetMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Format(crate::error::FormatError::BadHeader(e.to_string())))?;
    let tensor_named = |name: &str| -> Result<Tensor> {
        let b = blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(crate::error::FormatError::BadHeader(format!(
                "missing blob `{name}`"
            ))))?;
        Tensor::from_vec(&b.shape, b.data.clone())
    };
    let rebuild = |prefix: &str, sm: SplitMeta| -> Result<SampleBatch> {
        Ok(SampleBatch {
            m1: tensor_named(&format!("{prefix}.m1"))?,
            m2: tensor_named(&format!("{prefix}.m2"))?,
            labels: sm.labels,
            availability: sm.availability,
            noise_variance: sm.noise_variance,
        })
    };
    Ok(Dataset {
        spec: meta.spec,
        train: rebuild("train", meta.train)?,
        test: rebuild("test", meta.test)?,
    })
}
