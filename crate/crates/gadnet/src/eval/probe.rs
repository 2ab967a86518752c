//! Probes: small, independently trained predictors from representations to
//! ground-truth factors.
//!
//! The probe family is fixed so numbers are comparable across runs: ridge
//! regression for continuous content factors, and one small MLP classifier
//! (one hidden ReLU layer) for style-from-representation accuracy. Probes
//! train on a seeded 80/20 split and report held-out metrics.

use ndarray::{Array1, Array2, Axis};

use crate::error::{GadError, Result};
use crate::rng::Stream;
use crate::tensor::Graph;

/// Seeded 80/20 split of row indices; the held-out part is disjoint from the
/// training part by construction.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Stream::new(seed, "probe-split");
    rng.shuffle(&mut idx);
    let cut = (n * 4) / 5;
    let train = idx[..cut].to_vec();
    let test = idx[cut..].to_vec();
    (train, test)
}

fn gather_rows(x: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Per-column standardization fitted on the training rows.
struct Standardizer {
    mean: Array1<f32>,
    inv_std: Array1<f32>,
}

impl Standardizer {
    fn fit(x: &Array2<f32>) -> Self {
        let n = x.nrows().max(1) as f32;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f32>::zeros(x.ncols());
        for row in x.axis_iter(Axis(0)) {
            for (v, (&m, &r)) in var.iter_mut().zip(mean.iter().zip(row.iter())) {
                let d = r - m;
                *v += d * d;
            }
        }
        let inv_std = var.mapv(|v| 1.0 / ((v / n).sqrt() + 1e-6));
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, (&m, &s)) in row.iter_mut().zip(self.mean.iter().zip(self.inv_std.iter())) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Train the fixed MLP classifier probe and return held-out top-1 accuracy.
pub fn mlp_probe_accuracy(
    inputs: &Array2<f32>,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f64> {
    if inputs.nrows() != labels.len() {
        return Err(GadError::contract("probe inputs/labels length mismatch"));
    }
    if inputs.nrows() < 10 {
        return Err(GadError::contract("probe needs at least 10 samples"));
    }
    let (train_idx, test_idx) = split_indices(inputs.nrows(), seed);
    let x_train = gather_rows(inputs, &train_idx);
    let x_test = gather_rows(inputs, &test_idx);
    let std = Standardizer::fit(&x_train);
    let x_train = std.apply(&x_train);
    let x_test = std.apply(&x_test);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let d = inputs.ncols();
    let hidden = 128;
    let mut rng = Stream::new(seed, "probe-mlp");

    let he = |rng: &mut Stream, rows: usize, cols: usize| {
        let bound = (6.0 / cols as f64).sqrt();
        let mut a = Array2::<f32>::zeros((rows, cols));
        for v in a.iter_mut() {
            *v = rng.uniform_in(-bound, bound) as f32;
        }
        a
    };
    let mut w1 = he(&mut rng, hidden, d).into_dyn();
    let mut b1 = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[hidden]));
    let mut w2 = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[n_classes, hidden]));
    let mut b2 = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[n_classes]));

    let mut opt = crate::training::OptState::new(crate::training::OptimKind::Adam);
    let batch = 128.min(x_train.nrows());
    let epochs = 40;
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let xb = gather_rows(&x_train, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let mut g = Graph::<f32>::new();
            let x = g.constant(xb.into_dyn());
            let w1n = g.leaf(w1.clone(), true);
            let b1n = g.leaf(b1.clone(), true);
            let w2n = g.leaf(w2.clone(), true);
            let b2n = g.leaf(b2.clone(), true);
            let h = g.linear(x, w1n, b1n);
            let h = g.relu(h);
            let logits = g.linear(h, w2n, b2n);
            let loss = g.nll_mean(logits, &yb);
            let mut grads = g.backward(loss);
            opt.advance();
            for (name, node, param) in [
                ("w1", w1n, &mut w1),
                ("b1", b1n, &mut b1),
                ("w2", w2n, &mut w2),
                ("b2", b2n, &mut b2),
            ] {
                if let Some(gr) = grads.take(node) {
                    opt.step(name, param, &gr, 1e-3);
                }
            }
        }
    }

    // held-out accuracy
    let mut g = Graph::<f32>::new();
    let x = g.constant(x_test.into_dyn());
    let w1n = g.constant(w1);
    let b1n = g.constant(b1);
    let w2n = g.constant(w2);
    let b2n = g.constant(b2);
    let h = g.linear(x, w1n, b1n);
    let h = g.relu(h);
    let logits = g.linear(h, w2n, b2n);
    let lv = g.value(logits);
    let lv = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut correct = 0usize;
    for (row, &want) in lv.axis_iter(Axis(0)).zip(y_test.iter()) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == want {
            correct += 1;
        }
    }
    Ok(correct as f64 / y_test.len() as f64)
}

/// Ridge regression (closed form, f64) from rows of `x` to targets `y`;
/// returns the held-out coefficient of determination.
pub fn ridge_r2(x: &Array2<f32>, y: &[f64], seed: u64) -> Result<f64> {
    if x.nrows() != y.len() {
        return Err(GadError::contract("ridge inputs/targets length mismatch"));
    }
    let (train_idx, test_idx) = split_indices(x.nrows(), seed);
    let d = x.ncols();
    let lambda = 1e-3;

    // center on the training split
    let mut x_mean = vec![0.0f64; d];
    let mut y_mean = 0.0f64;
    for &i in &train_idx {
        for (c, m) in x_mean.iter_mut().enumerate() {
            *m += x[(i, c)] as f64;
        }
        y_mean += y[i];
    }
    let n = train_idx.len() as f64;
    for m in x_mean.iter_mut() {
        *m /= n;
    }
    y_mean /= n;

    // normal equations on centered data
    let mut xtx = vec![0.0f64; d * d];
    let mut xty = vec![0.0f64; d];
    for &i in &train_idx {
        let row: Vec<f64> = (0..d).map(|c| x[(i, c)] as f64 - x_mean[c]).collect();
        let yc = y[i] - y_mean;
        for a in 0..d {
            xty[a] += row[a] * yc;
            for b in a..d {
                xtx[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[a * d + b] = xtx[b * d + a];
        }
        xtx[a * d + a] += lambda * n.max(1.0);
    }

    let coef = cholesky_solve(&xtx, &xty, d)
        .ok_or_else(|| GadError::contract("ridge normal equations not positive definite"))?;

    // held-out R^2
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut test_mean = 0.0;
    for &i in &test_idx {
        test_mean += y[i];
    }
    test_mean /= test_idx.len().max(1) as f64;
    for &i in &test_idx {
        let mut pred = y_mean;
        for c in 0..d {
            pred += coef[c] * (x[(i, c)] as f64 - x_mean[c]);
        }
        ss_res += (y[i] - pred).powi(2);
        ss_tot += (y[i] - test_mean).powi(2);
    }
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Dense Cholesky solve of a symmetric positive definite system (row-major).
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky_factor(a, n)?;
    // forward then backward substitution
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * n + j] * y[j];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= l[j * n + i] * x[j];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Lower-triangular Cholesky factor of a row-major symmetric matrix, or None
/// if the matrix is not positive definite.
pub fn cholesky_factor(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_seeded() {
        let (tr, te) = split_indices(100, 7);
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
        let all: std::collections::HashSet<usize> = tr.iter().chain(te.iter()).cloned().collect();
        assert_eq!(all.len(), 100);
        let (tr2, _) = split_indices(100, 7);
        assert_eq!(tr, tr2);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = [[4,1],[1,3]], b = [1, 2] -> x = [1/11, 7/11]
        let a = vec![4.0, 1.0, 1.0, 3.0];
        let b = vec![1.0, 2.0];
        let x = cholesky_solve(&a, &b, 2).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
        // not PD -> None
        assert!(cholesky_factor(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn ridge_recovers_linear_relation() {
        let mut rng = Stream::new(5, "ridge-test");
        let n = 400;
        let d = 6;
        let mut x = Array2::<f32>::zeros((n, d));
        let mut y = vec![0.0f64; n];
        let w: Vec<f64> = (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        for i in 0..n {
            let mut t = 0.3;
            for c in 0..d {
                let v = rng.normal();
                x[(i, c)] = v as f32;
                t += w[c] * v;
            }
            y[i] = t + 0.01 * rng.normal();
        }
        let r2 = ridge_r2(&x, &y, 1).unwrap();
        assert!(r2 > 0.99, "r2 {r2}");
    }

    #[test]
    fn mlp_probe_separates_blobs_and_fails_on_noise() {
        let mut rng = Stream::new(9, "mlp-test");
        let n = 300;
        let d = 8;
        let mut x = Array2::<f32>::zeros((n, d));
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let class = i % 3;
            labels[i] = class;
            for c in 0..d {
                x[(i, c)] = (rng.normal() * 0.3 + (class as f64) * 2.0 * ((c % 3 == class) as u8 as f64)) as f32;
            }
        }
        let acc = mlp_probe_accuracy(&x, &labels, 3, 11).unwrap();
        assert!(acc > 0.95, "separable blobs: {acc}");

        // pure noise inputs: near chance
        let mut noise = Array2::<f32>::zeros((n, d));
        for v in noise.iter_mut() {
            *v = rng.normal() as f32;
        }
        let acc = mlp_probe_accuracy(&noise, &labels, 3, 12).unwrap();
        assert!(acc < 0.6, "noise should be near chance: {acc}");
    }
}
