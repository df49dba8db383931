//! Shared oracles for integration tests: central finite differences and a
//! ridge-regression linear probe. Both are independent re-computations —
//! they never touch the reverse-mode machinery they are used to check.

#![allow(dead_code)]

use edrl_core::Tensor;

/// Central finite differences with step `eps` on every coordinate.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Worst relative error between two gradients, with an absolute floor of 1
/// so near-zero entries are compared absolutely.
pub fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(ad.len(), fd.len());
    ad.iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / f64::max(1.0, b.abs()))
        .fold(0.0, f64::max)
}

/// Checks the autodiff gradient of `build` against central finite
/// differences (eps = 1e-5) for each input, over `trials` seeded random
/// instances. `sampler` draws one coordinate value.
pub fn gradcheck(
    name: &str,
    shapes: &[&[usize]],
    trials: usize,
    sampler: &mut dyn FnMut(&mut edrl_core::RngState) -> f64,
    build: &dyn Fn(&[Tensor]) -> Tensor,
) {
    let eps = 1e-5;
    let tol = 1e-4;
    for trial in 0..trials {
        let mut rng = edrl_core::RngState::with_stream(0xED51 + trial as u64, 77);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (0..n).map(|_| sampler(&mut rng)).collect()
            })
            .collect();
        // autodiff gradients
        let params: Vec<Tensor> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| Tensor::parameter(s, v.clone()).unwrap())
            .collect();
        let loss = build(&params);
        assert_eq!(loss.numel(), 1, "{name}: loss must be scalar");
        loss.backward().unwrap();
        for (j, p) in params.iter().enumerate() {
            let ad = p
                .grad()
                .unwrap_or_else(|| panic!("{name}: missing grad on input {j}"));
            let mut eval = |x: &[f64]| {
                let probe: Vec<Tensor> = shapes
                    .iter()
                    .zip(&inputs)
                    .enumerate()
                    .map(|(i, (s, v))| {
                        let data = if i == j { x.to_vec() } else { v.clone() };
                        Tensor::from_vec(s, data).unwrap()
                    })
                    .collect();
                build(&probe).item()
            };
            let fd = fd_grad(&mut eval, &inputs[j], eps);
            let err = max_rel_err(&ad, &fd);
            assert!(
                err <= tol,
                "{name}: input {j} trial {trial}: rel err {err:.3e} > {tol:.0e}"
            );
        }
    }
}

// ── linear probe (ridge least squares on one-hot targets) ───────────

/// Solves (X^T X + lambda I) W = X^T Y by Cholesky; X gains a bias column.
pub struct LinearProbe {
    pub weights: Vec<Vec<f64>>, // [targets][features+1]
}

fn cholesky_solve(a: &mut [Vec<f64>], b: &mut [Vec<f64>]) {
    let n = a.len();
    // in-place LL^T
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            if i == j {
                a[i][j] = s.max(1e-12).sqrt();
            } else {
                a[i][j] = s / a[j][j];
            }
        }
    }
    let m = b[0].len();
    for col in 0..m {
        // forward solve L z = b
        for i in 0..n {
            let mut s = b[i][col];
            for k in 0..i {
                s -= a[i][k] * b[k][col];
            }
            b[i][col] = s / a[i][i];
        }
        // back solve L^T w = z
        for i in (0..n).rev() {
            let mut s = b[i][col];
            for k in i + 1..n {
                s -= a[k][i] * b[k][col];
            }
            b[i][col] = s / a[i][i];
        }
    }
}

impl LinearProbe {
    /// `x`: rows of features; `y`: rows of targets (one-hot for
    /// classification, raw values for regression).
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Self {
        let n = x.len();
        assert!(n > 0 && n == y.len());
        let f = x[0].len() + 1;
        let t = y[0].len();
        let mut xtx = vec![vec![0.0; f]; f];
        let mut xty = vec![vec![0.0; t]; f];
        let aug = |row: &[f64], i: usize| if i < row.len() { row[i] } else { 1.0 };
        for (xi, yi) in x.iter().zip(y) {
            for a in 0..f {
                for b in 0..f {
                    xtx[a][b] += aug(xi, a) * aug(xi, b);
                }
                for c in 0..t {
                    xty[a][c] += aug(xi, a) * yi[c];
                }
            }
        }
        for (a, row) in xtx.iter_mut().enumerate() {
            row[a] += lambda;
        }
        cholesky_solve(&mut xtx, &mut xty);
        let weights = (0..t)
            .map(|c| (0..f).map(|a| xty[a][c]).collect())
            .collect();
        LinearProbe { weights }
    }

    pub fn predict(&self, row: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| {
                let mut s = w[row.len()];
                for (wi, xi) in w.iter().zip(row) {
                    s += wi * xi;
                }
                s
            })
            .collect()
    }

    /// Classification accuracy by argmax over one-hot targets.
    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = x
            .iter()
            .zip(labels)
            .filter(|(row, &lab)| {
                let p = self.predict(row);
                let arg = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                arg == lab
            })
            .count();
        correct as f64 / x.len() as f64
    }

    /// Mean per-target R^2 on held-out data.
    pub fn r_squared(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let t = y[0].len();
        let n = y.len() as f64;
        let mut means = vec![0.0; t];
        for row in y {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut sse = vec![0.0; t];
        let mut sst = vec![0.0; t];
        for (xi, yi) in x.iter().zip(y) {
            let p = self.predict(xi);
            for c in 0..t {
                sse[c] += (p[c] - yi[c]).powi(2);
                sst[c] += (yi[c] - means[c]).powi(2);
            }
        }
        (0..t).map(|c| 1.0 - sse[c] / sst[c].max(1e-12)).sum::<f64>() / t as f64
    }
}
