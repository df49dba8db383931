//! Differentiable tensor operations.
//!
//! Every operation builds a fresh graph node whose backward closure
//! accumulates adjoints into the parents. Shapes are validated up front;
//! domain violations (log of a nonpositive value, division by zero) are
//! reported with the offending flat index rather than producing NaNs.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

// ── raw matrix kernels ──────────────────────────────────────────────

/// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// c[k,n] += a[m,k]^T @ g[m,n]
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

impl Tensor {
    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    pb.accumulate_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let b = pb.data();
                        g.iter().zip(b.iter()).map(|(gv, bv)| gv * bv).collect()
                    };
                    pa.accumulate_grad(&ga);
                }
                if pb.needs_grad() {
                    let gb: Vec<f64> = {
                        let a = pa.data();
                        g.iter().zip(a.iter()).map(|(gv, av)| gv * av).collect()
                    };
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("div", self, other)?;
        {
            let b = other.data();
            if let Some(idx) = b.iter().position(|&v| v == 0.0) {
                return Err(Error::Domain { op: "div", index: idx, value: 0.0 });
            }
        }
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x / y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let b = pb.data();
                if pa.needs_grad() {
                    let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(gv, bv)| gv / bv).collect();
                    pa.accumulate_grad(&ga);
                }
                if pb.needs_grad() {
                    let a = pa.data();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    drop(a);
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    // ── elementwise unary ───────────────────────────────────────────

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
            }),
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        let out_rc = Rc::new(RefCell::new(out));
        let (pa, y) = (self.clone(), Rc::clone(&out_rc));
        Tensor::from_op_shared(
            self.shape().to_vec(),
            out_rc,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let y = y.borrow();
                    let ga: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, yv)| gv * yv).collect();
                    drop(y);
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        {
            let a = self.data();
            if let Some(idx) = a.iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain { op: "log", index: idx, value: a[idx] });
            }
        }
        let out: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let a = pa.data();
                        g.iter().zip(a.iter()).map(|(gv, av)| gv / av).collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        {
            let a = self.data();
            if let Some(idx) = a.iter().position(|&v| v < 0.0) {
                return Err(Error::Domain { op: "sqrt", index: idx, value: a[idx] });
            }
        }
        let out: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        let out_rc = Rc::new(RefCell::new(out));
        let (pa, y) = (self.clone(), Rc::clone(&out_rc));
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            out_rc,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let y = y.borrow();
                        g.iter().zip(y.iter()).map(|(gv, yv)| 0.5 * gv / yv).collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    pub fn square(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * v).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let a = pa.data();
                        g.iter().zip(a.iter()).map(|(gv, av)| 2.0 * gv * av).collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    pub fn recip(&self) -> Result<Tensor> {
        {
            let a = self.data();
            if let Some(idx) = a.iter().position(|&v| v == 0.0) {
                return Err(Error::Domain { op: "recip", index: idx, value: 0.0 });
            }
        }
        let out: Vec<f64> = self.data().iter().map(|v| 1.0 / v).collect();
        let out_rc = Rc::new(RefCell::new(out));
        let (pa, y) = (self.clone(), Rc::clone(&out_rc));
        Ok(Tensor::from_op_shared(
            self.shape().to_vec(),
            out_rc,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let y = y.borrow();
                        g.iter().zip(y.iter()).map(|(gv, yv)| -gv * yv * yv).collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let a = pa.data();
                        g.iter()
                            .zip(a.iter())
                            .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                            .collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let a = pa.data();
                        g.iter()
                            .zip(a.iter())
                            .map(|(gv, &x)| {
                                let u = C * (x + A * x * x * x);
                                let t = u.tanh();
                                let sech2 = 1.0 - t * t;
                                let du = C * (1.0 + 3.0 * A * x * x);
                                gv * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)
                            })
                            .collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    /// max(x, c) elementwise; the adjoint passes where x >= c.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(c)).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let ga: Vec<f64> = {
                        let a = pa.data();
                        g.iter()
                            .zip(a.iter())
                            .map(|(gv, av)| if *av >= c { *gv } else { 0.0 })
                            .collect()
                    };
                    pa.accumulate_grad(&ga);
                }
            }),
        )
    }

    // ── matrix products ─────────────────────────────────────────────

    /// Matrix product. Accepts `[M,K] @ [K,N]` or batched `[G,M,K] @ [G,K,N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), other.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        let (g, m, k, n) = match (ls.len(), rs.len()) {
            (2, 2) => {
                if ls[1] != rs[0] {
                    return Err(mismatch());
                }
                (1, ls[0], ls[1], rs[1])
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(mismatch());
                }
                (ls[0], ls[1], ls[2], rs[2])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; g * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for gi in 0..g {
                mm_nn(
                    &a[gi * m * k..(gi + 1) * m * k],
                    &b[gi * k * n..(gi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[gi * m * n..(gi + 1) * m * n],
                );
            }
        }
        let out_shape = if ls.len() == 2 { vec![m, n] } else { vec![g, m, n] };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |gout| {
                if pa.needs_grad() {
                    // dA = G @ B^T
                    let mut ga = vec![0.0; g * m * k];
                    {
                        let b = pb.data();
                        for gi in 0..g {
                            mm_nt(
                                &gout[gi * m * n..(gi + 1) * m * n],
                                &b[gi * k * n..(gi + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[gi * m * k..(gi + 1) * m * k],
                            );
                        }
                    }
                    pa.accumulate_grad(&ga);
                }
                if pb.needs_grad() {
                    // dB = A^T @ G
                    let mut gb = vec![0.0; g * k * n];
                    {
                        let a = pa.data();
                        for gi in 0..g {
                            mm_tn(
                                &a[gi * m * k..(gi + 1) * m * k],
                                &gout[gi * m * n..(gi + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut gb[gi * k * n..(gi + 1) * k * n],
                            );
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose2d on rank-{} tensor",
                self.rank()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    /// Reorders axes, materializing the result.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_of(&in_shape);
        let out_strides = strides_of(&out_shape);
        // position of input dim d in the output
        let mut inv = vec![0usize; rank];
        for (pos, &a) in axes.iter().enumerate() {
            inv[a] = pos;
        }
        let n = self.numel();
        let map_offsets = move |flat: usize| {
            let mut rem = flat;
            let mut off = 0usize;
            for d in 0..rank {
                let c = rem / in_strides[d];
                rem %= in_strides[d];
                off += c * out_strides[inv[d]];
            }
            off
        };
        let mut out = vec![0.0; n];
        {
            let a = self.data();
            for flat in 0..n {
                out[map_offsets(flat)] = a[flat];
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; n];
                    for (flat, slot) in ga.iter_mut().enumerate() {
                        *slot = g[map_offsets(flat)];
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    /// Same buffer, new shape (row-major order preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let pa = self.clone();
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            self.data_rc(),
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
            }),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let pa = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(&vec![g[0]; n]);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(&vec![g[0] / n as f64; n]);
                }
            }),
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        {
            let a = self.data();
            for o in 0..outer {
                for i in 0..len {
                    let base = (o * len + i) * inner;
                    let orow = &mut out[o * inner..(o + 1) * inner];
                    for (ov, &av) in orow.iter_mut().zip(&a[base..base + inner]) {
                        *ov += av;
                    }
                }
            }
            if mean {
                for v in out.iter_mut() {
                    *v *= scale;
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            for (av, &gv) in ga[base..base + inner].iter_mut().zip(grow) {
                                *av = gv * scale;
                            }
                        }
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    // ── shape surgery ───────────────────────────────────────────────

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow(axis={axis}, start={start}, len={len}) invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        {
            let a = self.data();
            for o in 0..outer {
                let src = (o * alen + start) * inner;
                let dst = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&a[src..src + len * inner]);
            }
        }
        let pa = self.clone();
        let full = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; full];
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        for p in parts.iter().skip(1) {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(parts[0].shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        {
            let mut off = 0usize;
            for (p, &plen) in parts.iter().zip(&lens) {
                let a = p.data();
                for o in 0..outer {
                    let dst = (o * total + off) * inner;
                    let src = o * plen * inner;
                    out[dst..dst + plen * inner].copy_from_slice(&a[src..src + plen * inner]);
                }
                off += plen;
            }
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_parents = owned.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            owned,
            Box::new(move |g| {
                let mut off = 0usize;
                for (p, &plen) in back_parents.iter().zip(&lens) {
                    if p.needs_grad() {
                        let mut ga = vec![0.0; outer * plen * inner];
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * plen * inner;
                            ga[dst..dst + plen * inner]
                                .copy_from_slice(&g[src..src + plen * inner]);
                        }
                        p.accumulate_grad(&ga);
                    }
                    off += plen;
                }
            }),
        ))
    }

    /// Insert a new axis of extent `times` at `pos`, tiling the data.
    /// `[d0,..,dn] -> [d0,..,times at pos,..,dn]`; the adjoint sums over
    /// the inserted axis.
    pub fn repeat_new_axis(&self, pos: usize, times: usize) -> Result<Tensor> {
        let shape = self.shape();
        if pos > shape.len() || times == 0 {
            return Err(Error::InvalidArgument(format!(
                "repeat_new_axis(pos={pos}, times={times}) invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..pos].iter().product();
        let inner: usize = shape[pos..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.insert(pos, times);
        let mut out = vec![0.0; outer * times * inner];
        {
            let a = self.data();
            for o in 0..outer {
                let src = &a[o * inner..(o + 1) * inner];
                for t in 0..times {
                    let dst = (o * times + t) * inner;
                    out[dst..dst + inner].copy_from_slice(src);
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; outer * inner];
                    for o in 0..outer {
                        let arow = &mut ga[o * inner..(o + 1) * inner];
                        for t in 0..times {
                            let src = (o * times + t) * inner;
                            for (av, &gv) in arow.iter_mut().zip(&g[src..src + inner]) {
                                *av += gv;
                            }
                        }
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    /// Broadcast-add a `[D]` vector over the trailing axis of `[..., D]`.
    pub fn add_rowvec(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if bias.rank() != 1 || bias.shape()[0] != d {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        {
            let (a, b) = (self.data(), bias.data());
            for r in 0..rows {
                for (o, (&av, &bv)) in out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(a[r * d..(r + 1) * d].iter().zip(b.iter()))
                {
                    *o = av + bv;
                }
            }
        }
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for (bv, &gv) in gb.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *bv += gv;
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }),
        ))
    }

    // ── indexed access ──────────────────────────────────────────────

    /// From `[B,K]`, pick entry `idx[b]` of each row -> `[B]`.
    pub fn select_index(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "select_index on rank-{} tensor",
                self.rank()
            )));
        }
        let (b, k) = (self.shape()[0], self.shape()[1]);
        if idx.len() != b {
            return Err(Error::InvalidArgument(format!(
                "select_index: {} indices for {} rows",
                idx.len(),
                b
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "select_index: index {bad} out of range for {k} columns"
            )));
        }
        let out: Vec<f64> = {
            let a = self.data();
            idx.iter().enumerate().map(|(r, &c)| a[r * k + c]).collect()
        };
        let pa = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![b],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; b * k];
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * k + c] = g[r];
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    /// From `[K,D]`, gather rows `idx` -> `[B,D]`. Rows may repeat; the
    /// adjoint scatter-adds.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "index_rows on rank-{} tensor",
                self.rank()
            )));
        }
        let (k, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "index_rows: row {bad} out of range for {k} rows"
            )));
        }
        let b = idx.len();
        let mut out = vec![0.0; b * d];
        {
            let a = self.data();
            for (r, &src) in idx.iter().enumerate() {
                out[r * d..(r + 1) * d].copy_from_slice(&a[src * d..(src + 1) * d]);
            }
        }
        let pa = self.clone();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![b, d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut ga = vec![0.0; k * d];
                    for (r, &dst) in idx.iter().enumerate() {
                        for (av, &gv) in ga[dst * d..(dst + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *av += gv;
                        }
                    }
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }

    // ── softmax ─────────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        {
            let a = self.data();
            if let Some(idx) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::Domain { op: "softmax", index: idx, value: a[idx] });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let n = self.numel();
        let mut out = vec![0.0; n];
        {
            let a = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(a[at(j)]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (a[at(j)] - mx).exp();
                        out[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= sum;
                    }
                }
            }
        }
        let out_rc = Rc::new(RefCell::new(out));
        let (pa, y) = (self.clone(), Rc::clone(&out_rc));
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            out_rc,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let y = y.borrow();
                    let mut ga = vec![0.0; n];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                ga[at(j)] = (g[at(j)] - dot) * y[at(j)];
                            }
                        }
                    }
                    drop(y);
                    pa.accumulate_grad(&ga);
                }
            }),
        ))
    }
}

// ── composite helpers ───────────────────────────────────────────────

/// Cosine similarity of two vectors with eps-clamped norms:
/// `a.b / (max(|a|,eps) * max(|b|,eps))`. The clamp is applied to the
/// squared norm before the square root, which is the same function but
/// keeps the adjoint finite at the zero vector.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let dot = a.mul(b)?.sum_all();
    let na = a.square().sum_all().clamp_min(eps * eps).sqrt()?;
    let nb = b.square().sum_all().clamp_min(eps * eps).sqrt()?;
    dot.div(&na.mul(&nb)?)
}

/// Rows of `[B,D]` scaled to unit L2 norm (eps-clamped).
pub fn normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "normalize_rows on rank-{} tensor",
            x.rank()
        )));
    }
    let d = x.shape()[1];
    let norms = x
        .square()
        .sum_axis(1)?
        .clamp_min(eps * eps)
        .sqrt()?
        .repeat_new_axis(1, d)?;
    x.div(&norms)
}

/// Mean cross-entropy between `logits [B,K]` and integer labels, computed
/// with a detached max shift for stability.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy on rank-{} tensor",
            logits.rank()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: {} labels for batch {}",
            labels.len(),
            b
        )));
    }
    let row_max: Vec<f64> = {
        let a = logits.data();
        (0..b)
            .map(|r| a[r * k..(r + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    };
    let mx = Tensor::from_vec(&[b], row_max)?; // constant shift
    let shifted = logits.sub(&mx.repeat_new_axis(1, k)?)?;
    let lse = shifted.exp().sum_axis(1)?.log()?.add(&mx)?;
    let picked = logits.select_index(labels)?;
    Ok(lse.sub(&picked)?.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let a = t(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let b = t(&[2, 3, 2], &(0..12).map(|v| (v as f64) * 0.5).collect::<Vec<_>>());
        let c = a.matmul(&b).unwrap();
        for g in 0..2 {
            let ag = a.narrow(0, g, 1).unwrap().reshape(&[2, 3]).unwrap();
            let bg = b.narrow(0, g, 1).unwrap().reshape(&[3, 2]).unwrap();
            let cg = ag.matmul(&bg).unwrap();
            let part = c.narrow(0, g, 1).unwrap();
            assert_eq!(part.to_vec(), cg.to_vec());
        }
    }

    #[test]
    fn exp_log_inverse_pair() {
        for &x in &[-2.0, 0.0, 3.5] {
            let v = Tensor::scalar(x).exp().log().unwrap().item();
            assert!((v - x).abs() < 1e-12, "log(exp({x})) = {v}");
        }
        assert_eq!(Tensor::scalar(0.0).exp().item(), 1.0);
    }

    #[test]
    fn div_gradient_wrt_denominator() {
        // d(a/b)/db = -a/b^2 = -6/9 at (6,3)
        let a = Tensor::scalar(6.0);
        let b = Tensor::parameter(&[1], vec![3.0]).unwrap();
        let y = a.div(&b).unwrap();
        y.backward().unwrap();
        let g = b.grad().unwrap()[0];
        assert!((g - (-6.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn div_by_zero_reports_index() {
        let a = t(&[3], &[1.0, 1.0, 1.0]);
        let b = t(&[3], &[1.0, 0.0, 2.0]);
        match a.div(&b) {
            Err(Error::Domain { op: "div", index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn log_domain_error_reports_index() {
        let a = t(&[2], &[1.0, -1.0]);
        match a.log() {
            Err(Error::Domain { op: "log", index, value }) => {
                assert_eq!(index, 1);
                assert_eq!(value, -1.0);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(t(&[3], &[2.0, 4.0, 6.0]).mean_all().item(), 4.0);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.sum_axis(0).unwrap().to_vec(), vec![4.0, 6.0]);
        assert_eq!(m.sum_axis(1).unwrap().to_vec(), vec![3.0, 7.0]);
        // gradient of mean: 1/n each
        let x = Tensor::parameter(&[3], vec![5.0, 7.0, 9.0]).unwrap();
        x.mean_all().backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_axis_out_of_range() {
        assert!(t(&[2, 2], &[0.0; 4]).sum_axis(2).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // computed with exact exp ratios at high precision
        let s = t(&[3], &[1.0, 2.0, 3.0]).softmax(0).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479767,
            0.6652409557748219,
        ];
        for (a, e) in s.to_vec().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        let total: f64 = s.to_vec().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(t(&[2], &[f64::NAN, 0.0]).softmax(0).is_err());
    }

    #[test]
    fn cosine_similarity_cases() {
        let e = 1e-8;
        let a = t(&[2], &[1.0, 0.0]);
        assert!((cosine_similarity(&a, &a, e).unwrap().item() - 1.0).abs() < 1e-12);
        let b = t(&[2], &[0.0, 1.0]);
        assert!(cosine_similarity(&a, &b, e).unwrap().item().abs() < 1e-12);
        let c = t(&[2], &[1.0, 1.0]);
        let v = cosine_similarity(&c, &a, e).unwrap().item();
        assert!((v - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_finite() {
        let z = Tensor::parameter(&[2], vec![0.0, 0.0]).unwrap();
        let a = t(&[2], &[1.0, 0.0]);
        let c = cosine_similarity(&z, &a, 1e-8).unwrap();
        assert_eq!(c.item(), 0.0);
        c.backward().unwrap();
        assert!(z.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn narrow_concat_roundtrip_bitwise() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64 * 0.37).collect::<Vec<_>>());
        let a = x.narrow(2, 0, 2).unwrap();
        let b = x.narrow(2, 2, 2).unwrap();
        let back = Tensor::concat(&[&a, &b], 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn repeat_new_axis_tiles_and_sums_back() {
        let x = Tensor::parameter(&[2], vec![1.5, -2.0]).unwrap();
        let y = x.repeat_new_axis(0, 3).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn select_and_index_rows() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.select_index(&[2, 0]).unwrap().to_vec(), vec![3.0, 4.0]);
        let r = x.index_rows(&[1, 1, 0]).unwrap();
        assert_eq!(r.shape(), &[3, 3]);
        assert_eq!(r.to_vec(), vec![4.0, 5.0, 6.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert!(x.select_index(&[3, 0]).is_err());
    }

    #[test]
    fn cross_entropy_perfect_logits_vanishes() {
        let logits = t(&[2, 2], &[20.0, 0.0, 0.0, 20.0]);
        let ce = cross_entropy(&logits, &[0, 1]).unwrap().item();
        assert!(ce <= 1e-8, "ce = {ce}");
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }
}
