//! Essence-point representation learning: a learnable (modality, class)
//! prototype bank matched to pooled features by cosine similarity, with
//! per-prototype Gaussian heads whose product-of-experts joint drives
//! guiding-token sampling.

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Modality};
use crate::ops::{cosine_similarity, normalize_rows};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Norm clamp shared by every cosine similarity in the crate.
pub const COSINE_EPS: f64 = 1e-8;

/// Number of modalities; the matching-loss divisor hard-codes two.
pub const N_MODALITIES: usize = 2;

/// Diagonal Gaussian over feature space. `mean` and `variance` share a
/// shape, either `[D]` or `[B, D]`; variance entries stay strictly
/// positive by construction (heads emit log-variance).
#[derive(Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub variance: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_params",
                lhs: mean.shape().to_vec(),
                rhs: variance.shape().to_vec(),
            });
        }
        {
            let v = variance.data();
            if let Some(idx) = v.iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain { op: "gaussian_params", index: idx, value: v[idx] });
            }
        }
        Ok(GaussianParams { mean, variance })
    }
}

/// Product of two diagonal Gaussians: precisions add, means are
/// precision-weighted. Exactly commutative.
pub fn poe_join(a: &GaussianParams, b: &GaussianParams) -> Result<GaussianParams> {
    if a.mean.shape() != b.mean.shape() {
        return Err(Error::ShapeMismatch {
            op: "poe_join",
            lhs: a.mean.shape().to_vec(),
            rhs: b.mean.shape().to_vec(),
        });
    }
    let la = a.variance.recip()?;
    let lb = b.variance.recip()?;
    let lsum = la.add(&lb)?;
    let variance = lsum.recip()?;
    let weighted = la.mul(&a.mean)?.add(&lb.mul(&b.mean)?)?;
    let mean = weighted.mul(&variance)?;
    GaussianParams::new(mean, variance)
}

/// Reparameterized draw: mean + sqrt(variance) * eps. Gradients reach the
/// Gaussian parameters through the sample.
pub fn sample_guiding(params: &GaussianParams, rng: &mut RngState) -> Result<Tensor> {
    let eps = Tensor::randn(params.mean.shape(), rng);
    params.mean.add(&params.variance.sqrt()?.mul(&eps)?)
}

/// Per-sample guiding tokens for one batch, each `[B, D]`.
pub struct GuidingTokens {
    pub uni: [Tensor; 2],
    pub com: Tensor,
}

impl GuidingTokens {
    /// All-zero tokens, used when the essence-point module is ablated.
    pub fn zeros(batch: usize, dim: usize) -> Self {
        GuidingTokens {
            uni: [Tensor::zeros(&[batch, dim]), Tensor::zeros(&[batch, dim])],
            com: Tensor::zeros(&[batch, dim]),
        }
    }
}

/// Learnable essence points `[2, K, D]` plus one Gaussian head per
/// (modality, class) pair mapping a point to (mean, log-variance).
pub struct EssencePointBank {
    pub points: Tensor,
    pub heads: Vec<Mlp>, // row-major by (modality, class)
    n_classes: usize,
    dim: usize,
}

impl EssencePointBank {
    /// Points are unit-norm Gaussian draws; heads are Kaiming-initialized
    /// single affine layers `D -> 2D`.
    pub fn new(n_classes: usize, dim: usize, rng: &mut RngState) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "bank needs positive class count and width, got K={n_classes}, D={dim}"
            )));
        }
        let mut data = Vec::with_capacity(N_MODALITIES * n_classes * dim);
        for _ in 0..N_MODALITIES * n_classes {
            let row = rng.normal_vec(dim);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
            data.extend(row.iter().map(|v| v / norm));
        }
        let points = Tensor::parameter(&[N_MODALITIES, n_classes, dim], data)?;
        let heads = (0..N_MODALITIES * n_classes)
            .map(|_| Mlp::new(&[dim, 2 * dim], Activation::Relu, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(EssencePointBank { points, heads, n_classes, dim })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points as `[2K, D]`, row (m*K + c).
    pub fn points_flat(&self) -> Tensor {
        self.points
            .reshape(&[N_MODALITIES * self.n_classes, self.dim])
            .expect("bank shape is fixed")
    }

    /// Gaussian predicted from essence point (m, c). Variance is
    /// exp(log-variance), strictly positive.
    pub fn gaussian_head(&self, modality: Modality, class: usize) -> Result<GaussianParams> {
        if class >= self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {} classes",
                self.n_classes
            )));
        }
        let row = modality.index() * self.n_classes + class;
        let point = self.points_flat().index_rows(&[row])?;
        let out = self.heads[row].forward(&point)?; // [1, 2D]
        let mean = out.narrow(1, 0, self.dim)?.reshape(&[self.dim])?;
        let variance = out.narrow(1, self.dim, self.dim)?.reshape(&[self.dim])?.exp();
        GaussianParams::new(mean, variance)
    }

    /// Per-class Gaussians of one modality stacked as `[K, D]` tensors.
    pub fn class_gaussians(&self, modality: Modality) -> Result<GaussianParams> {
        let mut means = Vec::with_capacity(self.n_classes);
        let mut vars = Vec::with_capacity(self.n_classes);
        for c in 0..self.n_classes {
            let g = self.gaussian_head(modality, c)?;
            means.push(g.mean.reshape(&[1, self.dim])?);
            vars.push(g.variance.reshape(&[1, self.dim])?);
        }
        let mean = Tensor::concat(&means.iter().collect::<Vec<_>>(), 0)?;
        let variance = Tensor::concat(&vars.iter().collect::<Vec<_>>(), 0)?;
        GaussianParams::new(mean, variance)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.points"), self.points.clone()));
        for (i, head) in self.heads.iter().enumerate() {
            let (m, c) = (i / self.n_classes, i % self.n_classes);
            head.collect_params(&format!("{prefix}.head_m{m}c{c}"), out);
        }
    }
}

/// Mean over the token axis: `[B, T, D] -> [B, D]`. This is the vector
/// matched against the essence points.
pub fn pooled_feature(tokens: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "pooled_feature expects [B,T,D], got {:?}",
            tokens.shape()
        )));
    }
    tokens.mean_axis(1)
}

/// Matching loss over a batch. For each available (sample, modality)
/// pair with class c the term is
/// `-(Sim(F, E_m^c) - mean of Sim(F, E) over the other 2K-1 points)`,
/// negatives spanning both modalities' banks. Per-modality terms are
/// averaged over that modality's available samples, then summed.
pub fn matching_loss(
    bank: &EssencePointBank,
    features: &[Tensor; 2],
    labels: &[usize],
    availability: &[[bool; 2]],
) -> Result<Tensor> {
    let k = bank.n_classes();
    let b = labels.len();
    for f in features {
        if f.rank() != 2 || f.shape()[0] != b || f.shape()[1] != bank.dim() {
            return Err(Error::ShapeMismatch {
                op: "matching_loss",
                lhs: f.shape().to_vec(),
                rhs: vec![b, bank.dim()],
            });
        }
    }
    if availability.len() != b {
        return Err(Error::InvalidArgument(format!(
            "matching_loss: {} availability rows for batch {}",
            availability.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let n_points = N_MODALITIES * k;
    let bank_normed = normalize_rows(&bank.points_flat(), COSINE_EPS)?;
    let bank_t = bank_normed.transpose2d()?;
    let mut total = Tensor::scalar(0.0);
    for m in 0..N_MODALITIES {
        let count = availability.iter().filter(|a| a[m]).count();
        if count == 0 {
            continue;
        }
        let feats = normalize_rows(&features[m], COSINE_EPS)?;
        let sims = feats.matmul(&bank_t)?; // [B, 2K]
        let pos_idx: Vec<usize> = labels.iter().map(|&c| m * k + c).collect();
        let pos = sims.select_index(&pos_idx)?;
        let neg_mean = sims
            .sum_axis(1)?
            .sub(&pos)?
            .scale(1.0 / (n_points - 1) as f64);
        let mask = Tensor::from_vec(
            &[b],
            availability.iter().map(|a| if a[m] { 1.0 } else { 0.0 }).collect(),
        )?;
        let per_sample = pos.sub(&neg_mean)?.mul(&mask)?;
        let loss_m = per_sample.sum_all().scale(-1.0 / count as f64);
        total = total.add(&loss_m)?;
    }
    Ok(total)
}

/// Highest-cosine essence point of one modality; ties break to the
/// lowest class index. Scale-invariant in the feature.
pub fn infer_class(bank: &EssencePointBank, feature: &Tensor, modality: Modality) -> Result<usize> {
    let (c, _) = best_class(bank, feature, modality)?;
    Ok(c)
}

fn best_class(
    bank: &EssencePointBank,
    feature: &Tensor,
    modality: Modality,
) -> Result<(usize, f64)> {
    if feature.rank() != 1 || feature.shape()[0] != bank.dim() {
        return Err(Error::InvalidArgument(format!(
            "infer_class expects a [D={}] feature, got {:?}",
            bank.dim(),
            feature.shape()
        )));
    }
    let k = bank.n_classes();
    let flat = bank.points_flat();
    let mut best = (0usize, f64::NEG_INFINITY);
    for c in 0..k {
        let point = flat.index_rows(&[modality.index() * k + c])?.reshape(&[bank.dim()])?;
        let sim = cosine_similarity(feature, &point, COSINE_EPS)?.item();
        if sim > best.1 {
            best = (c, sim);
        }
    }
    Ok(best)
}

/// Per-sample class decision when labels are absent: argmax essence
/// similarity per available modality; with both present, the modality
/// with the higher best similarity wins (M1 on exact ties).
pub fn infer_classes_batch(
    bank: &EssencePointBank,
    pooled: &[Tensor; 2],
    availability: &[[bool; 2]],
) -> Result<Vec<usize>> {
    let b = availability.len();
    let d = bank.dim();
    let mut classes = Vec::with_capacity(b);
    for (i, avail) in availability.iter().enumerate() {
        let mut decision: Option<(usize, f64)> = None;
        for m in 0..N_MODALITIES {
            if !avail[m] {
                continue;
            }
            let feature = pooled[m].narrow(0, i, 1)?.reshape(&[d])?.detach();
            let (c, sim) = best_class(bank, &feature, Modality::from_index(m))?;
            if decision.map_or(true, |(_, s)| sim > s) {
                decision = Some((c, sim));
            }
        }
        match decision {
            Some((c, _)) => classes.push(c),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: no modality available to infer a class from"
                )))
            }
        }
    }
    Ok(classes)
}

/// Guiding tokens for a batch with known (or inferred) classes.
/// `G_uni^m` comes from modality m's class Gaussian, `G_com` from the
/// product of the two. Deterministic mode returns distribution means
/// instead of reparameterized draws.
pub fn guiding_for_batch(
    bank: &EssencePointBank,
    classes: &[usize],
    rng: &mut RngState,
    deterministic: bool,
) -> Result<GuidingTokens> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= bank.n_classes()) {
        return Err(Error::InvalidArgument(format!(
            "class {bad} out of range for {} classes",
            bank.n_classes()
        )));
    }
    let draw = |params: &GaussianParams, rng: &mut RngState| -> Result<Tensor> {
        if deterministic {
            Ok(params.mean.clone())
        } else {
            sample_guiding(params, rng)
        }
    };
    let mut per_modality = Vec::with_capacity(N_MODALITIES);
    for m in Modality::ALL {
        let table = bank.class_gaussians(m)?;
        per_modality.push(GaussianParams::new(
            table.mean.index_rows(classes)?,
            table.variance.index_rows(classes)?,
        )?);
    }
    let joint = poe_join(&per_modality[0], &per_modality[1])?;
    let g1 = draw(&per_modality[0], rng)?;
    let g2 = draw(&per_modality[1], rng)?;
    let com = draw(&joint, rng)?;
    Ok(GuidingTokens { uni: [g1, g2], com })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> RngState {
        RngState::new(2024)
    }

    fn gauss(mean: &[f64], var: &[f64]) -> GaussianParams {
        GaussianParams::new(
            Tensor::from_vec(&[mean.len()], mean.to_vec()).unwrap(),
            Tensor::from_vec(&[var.len()], var.to_vec()).unwrap(),
        )
        .unwrap()
    }

    /// Bank with orthonormal basis points: E_m^c = e_{m*K+c} in R^4, K=2.
    fn orthonormal_bank() -> EssencePointBank {
        let mut r = rng();
        let bank = EssencePointBank::new(2, 4, &mut r).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        bank.points.set_data(&eye).unwrap();
        bank
    }

    #[test]
    fn pooled_feature_examples() {
        // constant tokens -> the constant
        let t = Tensor::full(&[2, 3, 2], 1.5);
        assert_eq!(pooled_feature(&t).unwrap().to_vec(), vec![1.5; 4]);
        // [[1,1],[3,3]] -> [2,2]
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(pooled_feature(&t).unwrap().to_vec(), vec![2.0, 2.0]);
        // random case vs a scalar loop
        let mut r = rng();
        let t = Tensor::randn(&[3, 4, 5], &mut r);
        let pooled = pooled_feature(&t).unwrap();
        let data = t.to_vec();
        for b in 0..3 {
            for d in 0..5 {
                let mut s = 0.0;
                for tok in 0..4 {
                    s += data[b * 20 + tok * 5 + d];
                }
                assert!((pooled.to_vec()[b * 5 + d] - s / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_loss_perfect_match_is_minus_one_per_modality() {
        let bank = orthonormal_bank();
        // features equal their essence points, orthogonal to all others
        let f1 = Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(); // E_m1^0
        let f2 = Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap(); // E_m2^0
        let avail = vec![[true, true]];
        let loss = matching_loss(&bank, &[f1.clone(), f2.clone()], &[0], &avail).unwrap();
        assert!((loss.item() - (-2.0)).abs() < 1e-6, "both modalities: {}", loss.item());
        // one modality at a time evaluates to -1
        let only_m1 = matching_loss(&bank, &[f1, f2], &[0], &[[true, false]]).unwrap();
        assert!((only_m1.item() - (-1.0)).abs() < 1e-6);
    }

    #[test]
    fn matching_loss_degenerate_identical_bank_is_zero() {
        let mut r = rng();
        let bank = EssencePointBank::new(2, 4, &mut r).unwrap();
        let row = [0.5, -0.5, 0.5, -0.5];
        let mut same = Vec::new();
        for _ in 0..4 {
            same.extend_from_slice(&row);
        }
        bank.points.set_data(&same).unwrap();
        let f = Tensor::randn(&[3, 4], &mut r);
        let g = Tensor::randn(&[3, 4], &mut r);
        let loss =
            matching_loss(&bank, &[f, g], &[0, 1, 0], &vec![[true, true]; 3]).unwrap();
        assert!(loss.item().abs() < 1e-9, "degenerate bank: {}", loss.item());
    }

    #[test]
    fn matching_loss_explicit_brute_force_oracle() {
        // B=2, K=2, D=2 with explicit vectors, every similarity enumerated
        let mut r = rng();
        let bank = EssencePointBank::new(2, 2, &mut r).unwrap();
        let pts = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.8, 0.6]];
        bank.points.set_data(&pts.concat()).unwrap();
        let feats = [[2.0, 1.0], [-1.0, 3.0]];
        let f = Tensor::from_vec(&[2, 2], feats.concat()).unwrap();
        let labels = [0usize, 1];
        let loss =
            matching_loss(&bank, &[f.clone(), f.clone()], &labels, &vec![[true, true]; 2])
                .unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot = a[0] * b[0] + a[1] * b[1];
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt().max(COSINE_EPS);
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt().max(COSINE_EPS);
            dot / (na * nb)
        };
        let mut expect = 0.0;
        for m in 0..2 {
            let mut acc = 0.0;
            for (i, &c) in labels.iter().enumerate() {
                let pos = cos(&feats[i], &pts[m * 2 + c]);
                let mut negs = 0.0;
                for (j, p) in pts.iter().enumerate() {
                    if j != m * 2 + c {
                        negs += cos(&feats[i], p);
                    }
                }
                acc += pos - negs / 3.0;
            }
            expect -= acc / 2.0;
        }
        assert!((loss.item() - expect).abs() < 1e-10);
    }

    #[test]
    fn matching_loss_rejects_bad_label() {
        let bank = orthonormal_bank();
        let f = Tensor::zeros(&[1, 4]);
        let err = matching_loss(&bank, &[f.clone(), f], &[5], &[[true, true]]);
        assert!(err.is_err());
    }

    #[test]
    fn matching_loss_empirically_bounded() {
        let mut r = rng();
        let bank = EssencePointBank::new(3, 8, &mut r).unwrap();
        for _ in 0..1000 {
            let f1 = Tensor::randn(&[4, 8], &mut r);
            let f2 = Tensor::randn(&[4, 8], &mut r);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range_usize(3)).collect();
            let l = matching_loss(&bank, &[f1, f2], &labels, &vec![[true, true]; 4])
                .unwrap()
                .item();
            assert!((-2.0..=2.0).contains(&l), "loss {l} out of [-2,2]");
        }
    }

    #[test]
    fn matching_loss_step_increases_matched_similarity() {
        let mut r = rng();
        let bank = EssencePointBank::new(2, 8, &mut r).unwrap();
        let f1 = Tensor::parameter(&[6, 8], r.normal_vec(48)).unwrap();
        let f2 = Tensor::parameter(&[6, 8], r.normal_vec(48)).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let avail = vec![[true, true]; 6];

        let matched_sim = |bank: &EssencePointBank, f1: &Tensor, f2: &Tensor| -> f64 {
            let mut total = 0.0;
            for (m, f) in [f1, f2].iter().enumerate() {
                for (i, &c) in labels.iter().enumerate() {
                    let feat = f.narrow(0, i, 1).unwrap().reshape(&[8]).unwrap();
                    let pt = bank
                        .points_flat()
                        .index_rows(&[m * 2 + c])
                        .unwrap()
                        .reshape(&[8])
                        .unwrap();
                    total += cosine_similarity(&feat, &pt, COSINE_EPS).unwrap().item();
                }
            }
            total / 12.0
        };

        let before = matched_sim(&bank, &f1, &f2);
        let loss = matching_loss(&bank, &[f1.clone(), f2.clone()], &labels, &avail).unwrap();
        loss.backward().unwrap();
        let lr = 0.05;
        for p in [&bank.points, &f1, &f2] {
            let g = p.grad().unwrap();
            let updated: Vec<f64> =
                p.data().iter().zip(&g).map(|(v, gi)| v - lr * gi).collect();
            p.set_data(&updated).unwrap();
        }
        let after = matched_sim(&bank, &f1, &f2);
        assert!(
            after > before,
            "matched similarity should increase: {before} -> {after}"
        );
    }

    #[test]
    fn infer_class_exact_and_tie_cases() {
        let bank = orthonormal_bank();
        let e1 = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(infer_class(&bank, &e1, Modality::M1).unwrap(), 1);
        // equidistant from both points of M2 -> tie broken to class 0
        let tie = Tensor::from_vec(&[4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(infer_class(&bank, &tie, Modality::M2).unwrap(), 0);
    }

    #[test]
    fn infer_class_matches_brute_force_and_is_scale_invariant() {
        let mut r = rng();
        let bank = EssencePointBank::new(4, 6, &mut r).unwrap();
        for _ in 0..50 {
            let feat = Tensor::randn(&[6], &mut r);
            for m in Modality::ALL {
                let mut best = (0usize, f64::NEG_INFINITY);
                for c in 0..4 {
                    let pt = bank
                        .points_flat()
                        .index_rows(&[m.index() * 4 + c])
                        .unwrap()
                        .reshape(&[6])
                        .unwrap();
                    let s = cosine_similarity(&feat, &pt, COSINE_EPS).unwrap().item();
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                assert_eq!(infer_class(&bank, &feat, m).unwrap(), best.0);
                for scale in [0.1, 1.0, 10.0] {
                    let scaled = feat.scale(scale);
                    assert_eq!(infer_class(&bank, &scaled, m).unwrap(), best.0);
                }
            }
        }
    }

    #[test]
    fn zeroed_head_predicts_standard_gaussian() {
        let mut r = rng();
        let bank = EssencePointBank::new(2, 3, &mut r).unwrap();
        for head in &bank.heads {
            for layer in &head.layers {
                layer.weight.set_data(&vec![0.0; layer.weight.numel()]).unwrap();
                layer.bias.set_data(&vec![0.0; layer.bias.numel()]).unwrap();
            }
        }
        let g = bank.gaussian_head(Modality::M1, 1).unwrap();
        assert_eq!(g.mean.to_vec(), vec![0.0; 3]);
        assert_eq!(g.variance.to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn head_variance_always_positive() {
        for seed in 0..100 {
            let mut r = RngState::new(seed);
            let bank = EssencePointBank::new(2, 4, &mut r).unwrap();
            for m in Modality::ALL {
                for c in 0..2 {
                    let g = bank.gaussian_head(m, c).unwrap();
                    assert!(g.variance.to_vec().iter().all(|&v| v > 0.0));
                }
            }
        }
    }

    #[test]
    fn tiny_head_matches_hand_forward_pass() {
        let mut r = rng();
        let bank = EssencePointBank::new(1, 1, &mut r).unwrap();
        bank.points.set_data(&[2.0, 2.0]).unwrap();
        // head: out = [w0*x + b0, w1*x + b1] = [0.5*2+0.1, -0.3*2+0.2]
        bank.heads[0].layers[0].weight.set_data(&[0.5, -0.3]).unwrap();
        bank.heads[0].layers[0].bias.set_data(&[0.1, 0.2]).unwrap();
        let g = bank.gaussian_head(Modality::M1, 0).unwrap();
        assert!((g.mean.item() - 1.1).abs() < 1e-15);
        assert!((g.variance.item() - (-0.4f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn poe_symmetric_case_halves_variance() {
        let a = gauss(&[1.0, -2.0], &[0.5, 3.0]);
        let j = poe_join(&a, &a).unwrap();
        assert_eq!(j.mean.to_vec(), vec![1.0, -2.0]);
        for (v, e) in j.variance.to_vec().iter().zip([0.25, 1.5]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn poe_standard_example() {
        // N(0,1) x N(2,1) = N(1, 0.5)
        let j = poe_join(&gauss(&[0.0], &[1.0]), &gauss(&[2.0], &[1.0])).unwrap();
        assert!((j.mean.item() - 1.0).abs() < 1e-12);
        assert!((j.variance.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn poe_flat_expert_limit() {
        let a = gauss(&[3.0], &[2.0]);
        let flat = gauss(&[-50.0], &[1e12]);
        let j = poe_join(&a, &flat).unwrap();
        assert!((j.mean.item() - 3.0).abs() < 1e-6);
        assert!((j.variance.item() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn poe_commutative_and_precision_additive() {
        let mut r = rng();
        for _ in 0..200 {
            let d = 3;
            let m1 = r.normal_vec(d);
            let m2 = r.normal_vec(d);
            let v1: Vec<f64> = (0..d).map(|_| 0.1 + 2.0 * r.next_f64()).collect();
            let v2: Vec<f64> = (0..d).map(|_| 0.1 + 2.0 * r.next_f64()).collect();
            let a = gauss(&m1, &v1);
            let b = gauss(&m2, &v2);
            let ab = poe_join(&a, &b).unwrap();
            let ba = poe_join(&b, &a).unwrap();
            assert_eq!(ab.mean.to_vec(), ba.mean.to_vec());
            assert_eq!(ab.variance.to_vec(), ba.variance.to_vec());
            for i in 0..d {
                let lhs = 1.0 / ab.variance.to_vec()[i];
                let rhs = 1.0 / v1[i] + 1.0 / v2[i];
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn poe_rejects_nonpositive_variance() {
        let mean = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let var = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        assert!(GaussianParams::new(mean, var).is_err());
    }

    #[test]
    fn sampling_degenerate_variance_returns_mean() {
        let g = gauss(&[4.0, -1.0], &[1e-30, 1e-30]);
        let mut r = rng();
        let s = sample_guiding(&g, &mut r).unwrap();
        for (v, e) in s.to_vec().iter().zip([4.0, -1.0]) {
            assert!((v - e).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_monte_carlo_moments() {
        let g = gauss(&[3.0], &[4.0]);
        let mut r = rng();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_guiding(&g, &mut r).unwrap().item())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 3.0).abs() < 0.05, "sample mean {mean}");
        assert!((var - 4.0).abs() < 0.2, "sample variance {var}");
    }

    #[test]
    fn sampling_same_seed_identical() {
        let g = gauss(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        let a = sample_guiding(&g, &mut RngState::new(5)).unwrap();
        let b = sample_guiding(&g, &mut RngState::new(5)).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn guiding_routes_by_label() {
        let mut r = rng();
        let bank = EssencePointBank::new(2, 3, &mut r).unwrap();
        // force distinguishable means: head (m,c) outputs mean = c + 10*m
        for (i, head) in bank.heads.iter().enumerate() {
            let (m, c) = (i / 2, i % 2);
            let layer = &head.layers[0];
            layer.weight.set_data(&vec![0.0; layer.weight.numel()]).unwrap();
            let mut bias = vec![(c as f64) + 10.0 * m as f64; 3];
            bias.extend(vec![0.0; 3]); // log-variance 0 -> variance 1
            layer.bias.set_data(&bias).unwrap();
        }
        let g = guiding_for_batch(&bank, &[0, 1], &mut r, true).unwrap();
        assert_eq!(g.uni[0].to_vec(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.uni[1].to_vec(), vec![10.0, 10.0, 10.0, 11.0, 11.0, 11.0]);
        // PoE of equal-variance experts averages the means
        assert_eq!(g.com.to_vec(), vec![5.0, 5.0, 5.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn guiding_com_variance_is_halved_for_identical_experts() {
        let mut r = rng();
        let bank = EssencePointBank::new(1, 1, &mut r).unwrap();
        for head in &bank.heads {
            let layer = &head.layers[0];
            layer.weight.set_data(&vec![0.0; layer.weight.numel()]).unwrap();
            // mean 3, log-variance ln(4)
            layer.bias.set_data(&[3.0, 4.0f64.ln()]).unwrap();
        }
        let n = 50_000;
        let mut draws = Vec::with_capacity(n);
        let mut rs = RngState::new(777);
        for _ in 0..n {
            let g = guiding_for_batch(&bank, &[0], &mut rs, false).unwrap();
            draws.push(g.com.item());
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 3.0).abs() < 0.05);
        assert!((var - 2.0).abs() < 0.15, "PoE variance should be 4/2 = 2, got {var}");
    }

    #[test]
    fn infer_batch_requires_an_available_modality() {
        let bank = orthonormal_bank();
        let pooled = [Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 4])];
        let err = infer_classes_batch(&bank, &pooled, &[[false, false]]);
        assert!(err.is_err());
    }

    #[test]
    fn infer_batch_prefers_higher_similarity_modality() {
        let bank = orthonormal_bank();
        // M1 feature close to E_m1^0; M2 feature exactly E_m2^1 (higher sim)
        let f1 = Tensor::from_vec(&[1, 4], vec![0.9, 0.3, 0.0, 0.0]).unwrap();
        let f2 = Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let classes = infer_classes_batch(&bank, &[f1, f2], &[[true, true]]).unwrap();
        assert_eq!(classes, vec![1]);
    }
}
