//! SGD and Adam over the model's named parameter list. Updates are
//! checked finite before they land; a poisoned gradient surfaces as an
//! error instead of silently corrupting parameters.

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    betas: [f64; 2],
    weight_decay: f64,
    eps: f64,
    step_count: u64,
    // Adam moments, indexed like the parameter list
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        betas: [f64; 2],
        weight_decay: f64,
        params: &[Tensor],
    ) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Optimizer {
            kind,
            learning_rate,
            betas,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// Applies one update. Parameters without gradients are skipped.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let [b1, b2] = self.betas;
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut values = p.to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in values.iter_mut().zip(&grad) {
                        let g = g + self.weight_decay * *x;
                        *x -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let bias1 = 1.0 - b1.powi(t);
                    let bias2 = 1.0 - b2.powi(t);
                    for (j, (x, g)) in values.iter_mut().zip(&grad).enumerate() {
                        let g = g + self.weight_decay * *x;
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter update at optimizer step {}", self.step_count),
                });
            }
            p.set_data(&values)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        // minimize x^2 from x = 2
        let x = Tensor::parameter(&[1], vec![2.0]).unwrap();
        let params = [x.clone()];
        let mut opt = Optimizer::new(kind, lr, [0.9, 0.999], 0.0, &params);
        for _ in 0..steps {
            opt.zero_grad(&params);
            let loss = x.square().sum_all();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }
        x.item()
    }

    #[test]
    fn sgd_descends_quadratic() {
        let x = quadratic_step(OptimizerKind::Sgd, 0.1, 50);
        assert!(x.abs() < 1e-4, "sgd left x = {x}");
    }

    #[test]
    fn adam_descends_quadratic() {
        let x = quadratic_step(OptimizerKind::Adam, 0.05, 200);
        assert!(x.abs() < 0.05, "adam left x = {x}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let x = Tensor::parameter(&[3], vec![1.5, -0.0, 2.5e-300]).unwrap();
        let before: Vec<u64> = x.to_vec().iter().map(|v| v.to_bits()).collect();
        let params = [x.clone()];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, [0.9, 0.999], 0.0, &params);
        for _ in 0..3 {
            opt.zero_grad(&params);
            x.square().sum_all().backward().unwrap();
            opt.step(&params).unwrap();
        }
        let after: Vec<u64> = x.to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let x = Tensor::parameter(&[1], vec![0.0]).unwrap();
        let params = [x.clone()];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, [0.9, 0.999], 0.0, &params);
        x.accumulate_grad(&[f64::INFINITY]);
        assert!(opt.step(&params).is_err());
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let x = Tensor::parameter(&[1], vec![4.0]).unwrap();
        let params = [x.clone()];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, [0.9, 0.999], 0.5, &params);
        // zero loss gradient: decay alone should shrink x
        x.accumulate_grad(&[0.0]);
        opt.step(&params).unwrap();
        assert!((x.item() - (4.0 - 0.1 * 0.5 * 4.0)).abs() < 1e-12);
    }
}
