//! Neural building blocks: linear layers, MLPs, scaled dot-product
//! attention, and the toy per-modality token encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One of the two input channels of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::M1, Modality::M2];

    pub fn index(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        match i {
            0 => Modality::M1,
            1 => Modality::M2,
            _ => panic!("modality index {i} out of range"),
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::M1 => Modality::M2,
            Modality::M2 => Modality::M1,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::M1 => write!(f, "M1"),
            Modality::M2 => write!(f, "M2"),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M1" | "m1" => Ok(Modality::M1),
            "M2" | "m2" => Ok(Modality::M2),
            other => Err(Error::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Kaiming-uniform fan-in weight draw: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
fn kaiming_uniform(fan_in: usize, n: usize, rng: &mut RngState) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    rng.uniform_vec(n, -bound, bound)
}

/// Affine map `x @ W + b` over the trailing axis.
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let weight =
            Tensor::parameter(&[in_dim, out_dim], kaiming_uniform(in_dim, in_dim * out_dim, rng))
                .unwrap();
        let bias = Tensor::parameter(&[out_dim], vec![0.0; out_dim]).unwrap();
        Linear { weight, bias }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::parameter(&[in_dim, out_dim], vec![0.0; in_dim * out_dim]).unwrap(),
            bias: Tensor::parameter(&[out_dim], vec![0.0; out_dim]).unwrap(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_in = self.in_dim();
        if *x.shape().last().unwrap_or(&0) != d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let rows = x.numel() / d_in;
        let flat = x.reshape(&[rows, d_in])?;
        let out = flat.matmul(&self.weight)?.add_rowvec(&self.bias)?;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim();
        out.reshape(&out_shape)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Fully connected stack; the activation is applied after every layer
/// except the last.
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(widths: &[usize], activation: Activation, rng: &mut RngState) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least input and output widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn zeroed(widths: &[usize], activation: Activation) -> Self {
        let layers = widths.windows(2).map(|w| Linear::zeroed(w[0], w[1])).collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&self.activation.apply(&h))?;
        }
        Ok(h)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Multi-head scaled dot-product attention with learned q/k/v/output
/// projections (no biases).
pub struct AttentionBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new(dim: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let mut proj = || {
            Tensor::parameter(&[dim, dim], kaiming_uniform(dim, dim * dim, rng)).unwrap()
        };
        Ok(AttentionBlock {
            wq: proj(),
            wk: proj(),
            wv: proj(),
            wo: proj(),
            heads,
            dim,
        })
    }

    fn check_inputs(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
        let bad = |lhs: &Tensor, rhs: &Tensor| Error::ShapeMismatch {
            op: "attention",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
            return Err(bad(q, k));
        }
        let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let tk = k.shape()[1];
        if d != self.dim || k.shape() != [b, tk, d] {
            return Err(bad(q, k));
        }
        if v.shape() != [b, tk, d] {
            return Err(bad(k, v));
        }
        Ok((b, tq, tk))
    }

    /// Projects to per-head q/k, returning softmaxed attention weights of
    /// shape `[B*H, Tq, Tk]`.
    pub fn attention_probs(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let (b, tq, tk) = self.check_inputs(q, k, k)?;
        let dh = self.dim / self.heads;
        let qh = self.split_heads(&q.reshape(&[b * tq, self.dim])?.matmul(&self.wq)?, b, tq)?;
        let kh = self.split_heads(&k.reshape(&[b * tk, self.dim])?.matmul(&self.wk)?, b, tk)?;
        // scores [B*H, Tq, Tk]
        let kt = kh
            .reshape(&[b * self.heads, tk, dh])?
            .permute(&[0, 2, 1])?;
        let scores = qh
            .reshape(&[b * self.heads, tq, dh])?
            .matmul(&kt)?
            .scale(1.0 / (dh as f64).sqrt());
        scores.softmax(2)
    }

    /// `[B*T, D] -> [B, H, T, dh]` head split.
    fn split_heads(&self, x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
        let dh = self.dim / self.heads;
        x.reshape(&[b, t, self.heads, dh])?.permute(&[0, 2, 1, 3])
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, tq, tk) = self.check_inputs(q, k, v)?;
        let dh = self.dim / self.heads;
        let probs = self.attention_probs(q, k)?;
        let vh = self
            .split_heads(&v.reshape(&[b * tk, self.dim])?.matmul(&self.wv)?, b, tk)?
            .reshape(&[b * self.heads, tk, dh])?;
        let ctx = probs.matmul(&vh)?; // [B*H, Tq, dh]
        let merged = ctx
            .reshape(&[b, self.heads, tq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * tq, self.dim])?;
        merged.matmul(&self.wo)?.reshape(&[b, tq, self.dim])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}

/// Stand-in backbone: input projection, two residual self-attention
/// blocks, one residual token-wise MLP. Maps `[B, T, raw]` to `[B, T, D]`.
pub struct ModalityEncoder {
    pub modality: Modality,
    pub raw_width: usize,
    pub input_proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub ffn: Mlp,
}

impl ModalityEncoder {
    pub fn new(
        modality: Modality,
        raw_width: usize,
        dim: usize,
        heads: usize,
        n_blocks: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let input_proj = Linear::new(raw_width, dim, rng);
        let blocks = (0..n_blocks)
            .map(|_| AttentionBlock::new(dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ffn = Mlp::new(&[dim, 2 * dim, dim], Activation::Relu, rng)?;
        Ok(ModalityEncoder { modality, raw_width, input_proj, blocks, ffn })
    }

    pub fn dim(&self) -> usize {
        self.input_proj.out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[2] != self.raw_width {
            return Err(Error::InvalidArgument(format!(
                "encoder for {} expects [B,T,{}] input, got {:?}",
                self.modality,
                self.raw_width,
                x.shape()
            )));
        }
        let mut h = self.input_proj.forward(x)?;
        for block in &self.blocks {
            h = h.add(&block.forward(&h, &h, &h)?)?;
        }
        h.add(&self.ffn.forward(&h)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input_proj.collect_params(&format!("{prefix}.proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.attn{i}"), out);
        }
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
    }
}
