//! Disentangled representation learning: fixed channel split into
//! common/unique subspaces, guided realignment attention, the batch
//! cross-correlation matrix, its identity/zero-diagonal losses, and
//! fusion into the combined classification feature.

use crate::eprl::GuidingTokens;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Linear, Mlp, Modality};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Norm clamp for the correlation denominators.
const CORR_EPS: f64 = 1e-8;

/// Partition of the D channels into a leading common block and a trailing
/// unique block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub total: usize,
    pub common: usize,
    pub unique: usize,
}

impl SplitSpec {
    pub fn new(total: usize, common: usize) -> Result<Self> {
        if common == 0 || common >= total {
            return Err(Error::InvalidArgument(format!(
                "split needs 1 <= common < total, got common={common}, total={total}"
            )));
        }
        Ok(SplitSpec { total, common, unique: total - common })
    }

    /// `common = round(p * total)`, clamped so both blocks are nonempty.
    pub fn from_ratio(total: usize, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || total < 2 {
            return Err(Error::InvalidArgument(format!(
                "split ratio p={p} or total={total} out of range"
            )));
        }
        let common = ((p * total as f64).round() as usize).clamp(1, total - 1);
        SplitSpec::new(total, common)
    }

    pub fn ratio(&self) -> f64 {
        self.common as f64 / self.total as f64
    }
}

/// Slices `[B, T, D]` tokens into `([B, T, Dc], [B, T, Du])`. Concatenating
/// the halves along channels reproduces the input exactly.
pub fn split_channels(tokens: &Tensor, spec: &SplitSpec) -> Result<(Tensor, Tensor)> {
    if tokens.rank() != 3 || tokens.shape()[2] != spec.total {
        return Err(Error::ShapeMismatch {
            op: "split_channels",
            lhs: tokens.shape().to_vec(),
            rhs: vec![spec.total],
        });
    }
    let common = tokens.narrow(2, 0, spec.common)?;
    let unique = tokens.narrow(2, spec.common, spec.unique)?;
    Ok((common, unique))
}

/// Realigned per-modality features.
pub struct RealignedFeatures {
    pub common: Tensor, // [B, Dc]
    pub unique: Tensor, // [B, Du]
}

impl RealignedFeatures {
    /// `[B, D]` concatenation (common then unique) — the per-modality
    /// vector entering the correlation matrix.
    pub fn combined(&self) -> Result<Tensor> {
        Tensor::concat(&[&self.common, &self.unique], 1)
    }
}

/// Per-modality realignment: the projected joint guiding token queries the
/// common tokens through cross-attention, while the modality's unique
/// guiding token biases every unique token ahead of self-attention and a
/// mean squeeze.
pub struct RealignBlock {
    pub modality: Modality,
    pub spec: SplitSpec,
    pub proj_com: Linear, // D -> Dc guiding projection
    pub proj_uni: Linear, // D -> Du guiding projection
    pub attn_com: AttentionBlock,
    pub attn_uni: AttentionBlock,
}

impl RealignBlock {
    /// Single-head attention here: Dc and Du follow the split ratio and
    /// are frequently odd.
    pub fn new(modality: Modality, dim: usize, spec: SplitSpec, rng: &mut RngState) -> Result<Self> {
        Ok(RealignBlock {
            modality,
            spec,
            proj_com: Linear::new(dim, spec.common, rng),
            proj_uni: Linear::new(dim, spec.unique, rng),
            attn_com: AttentionBlock::new(spec.common, 1, rng)?,
            attn_uni: AttentionBlock::new(spec.unique, 1, rng)?,
        })
    }

    pub fn forward(
        &self,
        common_tokens: &Tensor, // [B, T, Dc]
        unique_tokens: &Tensor, // [B, T, Du]
        guiding: &GuidingTokens,
    ) -> Result<RealignedFeatures> {
        let b = common_tokens.shape()[0];
        let t = common_tokens.shape()[1];
        // common path: one projected G_com query over the common tokens
        let q = self
            .proj_com
            .forward(&guiding.com)?
            .reshape(&[b, 1, self.spec.common])?;
        let f_com = self
            .attn_com
            .forward(&q, common_tokens, common_tokens)?
            .reshape(&[b, self.spec.common])?;
        // unique path: additive projected G_uni bias, self-attention, mean
        let g_uni = self
            .proj_uni
            .forward(&guiding.uni[self.modality.index()])?
            .repeat_new_axis(1, t)?;
        let biased = unique_tokens.add(&g_uni)?;
        let f_uni = self.attn_uni.forward(&biased, &biased, &biased)?.mean_axis(1)?;
        Ok(RealignedFeatures { common: f_com, unique: f_uni })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj_com.collect_params(&format!("{prefix}.proj_com"), out);
        self.proj_uni.collect_params(&format!("{prefix}.proj_uni"), out);
        self.attn_com.collect_params(&format!("{prefix}.attn_com"), out);
        self.attn_uni.collect_params(&format!("{prefix}.attn_uni"), out);
    }
}

/// Batch cross-correlation between feature dimensions:
/// `c_ij = sum_b f1[b,i] f2[b,j] / (|f1[:,i]| |f2[:,j]|)`, uncentered as
/// written unless `center` subtracts per-column batch means first.
pub fn correlation_matrix(f1: &Tensor, f2: &Tensor, center: bool) -> Result<Tensor> {
    if f1.rank() != 2 || f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            op: "correlation_matrix",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        });
    }
    let b = f1.shape()[0];
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation_matrix needs a batch of at least 2, got {b}"
        )));
    }
    let normalize_cols = |f: &Tensor| -> Result<Tensor> {
        let f = if center {
            let mu = f.mean_axis(0)?.repeat_new_axis(0, b)?;
            f.sub(&mu)?
        } else {
            f.clone()
        };
        let norms = f
            .square()
            .sum_axis(0)?
            .clamp_min(CORR_EPS * CORR_EPS)
            .sqrt()?
            .repeat_new_axis(0, b)?;
        f.div(&norms)
    };
    let n1 = normalize_cols(f1)?;
    let n2 = normalize_cols(f2)?;
    n1.transpose2d()?.matmul(&n2)
}

/// Correlation matrix with its common (leading) and unique (trailing)
/// diagonal blocks.
pub struct CorrelationMatrix {
    pub full: Tensor,   // [D, D]
    pub common: Tensor, // [Dc, Dc]
    pub unique: Tensor, // [Du, Du]
}

pub fn correlation_blocks(
    f1: &Tensor,
    f2: &Tensor,
    spec: &SplitSpec,
    center: bool,
) -> Result<CorrelationMatrix> {
    let full = correlation_matrix(f1, f2, center)?;
    if full.shape()[0] != spec.total {
        return Err(Error::ShapeMismatch {
            op: "correlation_blocks",
            lhs: full.shape().to_vec(),
            rhs: vec![spec.total, spec.total],
        });
    }
    let common = full
        .narrow(0, 0, spec.common)?
        .narrow(1, 0, spec.common)?;
    let unique = full
        .narrow(0, spec.common, spec.unique)?
        .narrow(1, spec.common, spec.unique)?;
    Ok(CorrelationMatrix { full, common, unique })
}

fn square_block_parts(op: &'static str, c: &Tensor) -> Result<(Tensor, Tensor)> {
    if c.rank() != 2 || c.shape()[0] != c.shape()[1] {
        return Err(Error::InvalidArgument(format!(
            "{op} expects a square block, got {:?}",
            c.shape()
        )));
    }
    let n = c.shape()[0];
    let diag = c.select_index(&(0..n).collect::<Vec<_>>())?;
    let off_sq = c.square().sum_all().sub(&diag.square().sum_all())?;
    Ok((diag, off_sq))
}

/// `sum_i (1 - c_ii)^2 + lambda * sum_{i != j} c_ij^2` — drives the common
/// block toward the identity.
pub fn common_loss(c_com: &Tensor, lambda_c: f64) -> Result<Tensor> {
    let (diag, off_sq) = square_block_parts("common_loss", c_com)?;
    let diag_term = diag.neg().add_scalar(1.0).square().sum_all();
    diag_term.add(&off_sq.scale(lambda_c))
}

/// `sum_i c_ii^2 + lambda * sum_{i != j} c_ij^2` — drives the unique block
/// diagonal toward zero.
pub fn unique_loss(c_uni: &Tensor, lambda_u: f64) -> Result<Tensor> {
    let (diag, off_sq) = square_block_parts("unique_loss", c_uni)?;
    diag.square().sum_all().add(&off_sq.scale(lambda_u))
}

/// Combined feature: unique parts concatenated, common parts summed ->
/// `[B, 2*Du + Dc]`.
pub fn fuse(r1: &RealignedFeatures, r2: &RealignedFeatures) -> Result<Tensor> {
    if r1.common.shape() != r2.common.shape() || r1.unique.shape() != r2.unique.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: r1.common.shape().to_vec(),
            rhs: r2.common.shape().to_vec(),
        });
    }
    let com = r1.common.add(&r2.common)?;
    Tensor::concat(&[&r1.unique, &r2.unique, &com], 1)
}

/// Raw logits from the fused feature.
pub fn classify(fused: &Tensor, head: &Mlp) -> Result<Tensor> {
    head.forward(fused)
}
