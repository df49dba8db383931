//! Self-distillation losses between the complete-modality pipeline and a
//! degraded pipeline: a multi-kernel MMD on fused features and a JS
//! divergence on predictive distributions. The complete side is treated
//! as a detached teacher — gradients only reach the degraded branch.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian-RBF kernel family: `k(a,b) = exp(-|a-b|^2 / (2 s))` summed
/// over a list of bandwidths `s` (variances).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidths must be a nonempty positive list, got {bandwidths:?}"
            )));
        }
        Ok(KernelSpec { bandwidths })
    }

    /// Median heuristic over the joint batch: bandwidths {m/2, m, 2m}
    /// where m is the median pairwise squared distance. Computed from raw
    /// values, so no gradient flows through the bandwidth.
    pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "median_heuristic",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let f = x.shape()[1];
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (t, n) in [(x, x.shape()[0]), (y, y.shape()[0])] {
            let d = t.data();
            for i in 0..n {
                rows.push(d[i * f..(i + 1) * f].to_vec());
            }
        }
        let mut dists = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d2: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push(d2);
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = if dists.is_empty() {
            1.0
        } else {
            let mid = dists.len() / 2;
            let median = if dists.len() % 2 == 0 {
                0.5 * (dists[mid - 1] + dists[mid])
            } else {
                dists[mid]
            };
            if median > 0.0 {
                median
            } else {
                1.0
            }
        };
        KernelSpec::rbf(vec![0.5 * m, m, 2.0 * m])
    }
}

/// Differentiable `[B1, B2]` matrix of RBF kernel values summed over the
/// bandwidth list.
fn kernel_gram(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<Tensor> {
    let (b1, b2) = (x.shape()[0], y.shape()[0]);
    let cross = x.matmul(&y.transpose2d()?)?; // [B1, B2]
    let sqx = x.square().sum_axis(1)?.repeat_new_axis(1, b2)?; // [B1, B2]
    let sqy = y.square().sum_axis(1)?.repeat_new_axis(0, b1)?; // [B1, B2]
    let d2 = sqx.add(&sqy)?.sub(&cross.scale(2.0))?;
    let mut total: Option<Tensor> = None;
    for &s in &kernel.bandwidths {
        let k = d2.scale(-1.0 / (2.0 * s)).exp();
        total = Some(match total {
            Some(t) => t.add(&k)?,
            None => k,
        });
    }
    Ok(total.expect("bandwidth list is nonempty"))
}

/// Biased (V-statistic) maximum mean discrepancy:
/// `mean k(x,x) + mean k(y,y) - 2 mean k(x,y)`, nonnegative up to rounding
/// and zero for identical batches.
pub fn mmd_loss(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<Tensor> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let kxx = kernel_gram(x, x, kernel)?.mean_all();
    let kyy = kernel_gram(y, y, kernel)?.mean_all();
    let kxy = kernel_gram(x, y, kernel)?.mean_all();
    kxx.add(&kyy)?.sub(&kxy.scale(2.0))
}

/// Jensen-Shannon divergence between per-row probability vectors, natural
/// log, averaged over rows. Entries are clamped at 1e-12 inside the logs
/// only, so exact zeros contribute exactly zero.
pub fn js_divergence(p1: &Tensor, p2: &Tensor) -> Result<Tensor> {
    const CLAMP: f64 = 1e-12;
    if p1.rank() != 2 || p1.shape() != p2.shape() {
        return Err(Error::ShapeMismatch {
            op: "js_divergence",
            lhs: p1.shape().to_vec(),
            rhs: p2.shape().to_vec(),
        });
    }
    let (b, k) = (p1.shape()[0], p1.shape()[1]);
    for (name, p) in [("p1", p1), ("p2", p2)] {
        let d = p.data();
        for row in 0..b {
            let sum: f64 = d[row * k..(row + 1) * k].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "js_divergence: {name} row {row} sums to {sum}, not a distribution"
                )));
            }
        }
    }
    let q = p1.add(p2)?.scale(0.5);
    let log_q = q.clamp_min(CLAMP).log()?;
    let kl = |p: &Tensor| -> Result<Tensor> {
        let log_p = p.clamp_min(CLAMP).log()?;
        p.mul(&log_p.sub(&log_q)?)?.sum_axis(1)
    };
    let per_row = kl(p1)?.add(&kl(p2)?)?.scale(0.5);
    Ok(per_row.mean_all())
}

/// Matching outputs of the two pipelines for one batch.
pub struct PipelinePair {
    pub complete_fused: Tensor,
    pub complete_logits: Tensor,
    pub degraded_fused: Tensor,
    pub degraded_logits: Tensor,
}

impl PipelinePair {
    fn validate(&self) -> Result<()> {
        if self.complete_fused.shape() != self.degraded_fused.shape() {
            return Err(Error::ShapeMismatch {
                op: "pipeline_pair",
                lhs: self.complete_fused.shape().to_vec(),
                rhs: self.degraded_fused.shape().to_vec(),
            });
        }
        if self.complete_logits.shape() != self.degraded_logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "pipeline_pair",
                lhs: self.complete_logits.shape().to_vec(),
                rhs: self.degraded_logits.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Feature-level MMD and logits-level JS between the degraded pipeline and
/// the detached complete pipeline. The complete branch is detached here,
/// so its parameters receive no distillation gradient regardless of how
/// the caller built it.
pub fn distillation_losses(pair: &PipelinePair, kernel: &KernelSpec) -> Result<(Tensor, Tensor)> {
    pair.validate()?;
    let teacher_fused = pair.complete_fused.detach();
    let teacher_logits = pair.complete_logits.detach();
    let l_features = mmd_loss(&pair.degraded_fused, &teacher_fused, kernel)?;
    let l_logits = js_divergence(
        &pair.degraded_logits.softmax(1)?,
        &teacher_logits.softmax(1)?,
    )?;
    Ok((l_features, l_logits))
}
