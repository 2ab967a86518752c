//! Scalar loss and distance primitives.
//!
//! These are the reference (f64) forms of every loss the two training stages
//! combine; the batched tape ops in [`crate::tensor`] implement the same
//! formulas and are cross-checked against these in tests.

use ndarray::ArrayView3;

use crate::error::{GadError, Result};
use crate::types::{ArtistId, GaussianCode, Logits};

/// Mean per-pixel euclidean distance between two images laid out (h, w, c):
/// (1/(h*w)) * sum_ij ||X_ij - Y_ij||_2. Note: the distance itself, not its
/// square.
pub fn pixel_l2_distance(x: &ArrayView3<f64>, y: &ArrayView3<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(GadError::contract(format!(
            "pixel_l2_distance shape mismatch: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (h, w, c) = x.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut sq = 0.0;
            for k in 0..c {
                let d = x[(i, j, k)] - y[(i, j, k)];
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    Ok(total / (h * w) as f64)
}

/// Negative log-likelihood of `label` under softmax(logits), computed with
/// the log-sum-exp shift.
pub fn nll(logits: &Logits, label: ArtistId) -> Result<f64> {
    let k = logits.n_classes();
    if label.0 >= k {
        return Err(GadError::contract(format!(
            "label {} out of range for {k} classes",
            label.0
        )));
    }
    Ok(logsumexp(&logits.values) - logits.values[label.0])
}

/// Negative log-unlikelihood -log(1 - softmax(logits)[label]).
///
/// Always computed as logsumexp(all) - logsumexp(all except label); the
/// naive -log(1 - p) form loses all precision once the label probability
/// saturates.
pub fn nlu(logits: &Logits, label: ArtistId) -> Result<f64> {
    let k = logits.n_classes();
    if k < 2 {
        return Err(GadError::contract(
            "nlu needs at least two classes (1 - y_i is identically zero otherwise)",
        ));
    }
    if label.0 >= k {
        return Err(GadError::contract(format!(
            "label {} out of range for {k} classes",
            label.0
        )));
    }
    let excl: Vec<f64> = logits
        .values
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label.0)
        .map(|(_, &v)| v)
        .collect();
    Ok(logsumexp(&logits.values) - logsumexp(&excl))
}

/// KL divergence of a diagonal Gaussian to the standard normal:
/// 1/2 * sum_k (mean_k^2 + std_k^2 - 1 - log std_k^2).
pub fn kl_to_standard_normal(code: &GaussianCode) -> Result<f64> {
    if code.std.iter().any(|&s| !(s > 0.0)) {
        return Err(GadError::contract("code std must be strictly positive"));
    }
    let mut total = 0.0;
    for (&m, &s) in code.mean.iter().zip(code.std.iter()) {
        let var = s * s;
        total += 0.5 * (m * m + var - 1.0 - var.ln());
    }
    Ok(total)
}

/// Reparameterized sample: mean + std ⊙ noise.
pub fn sample_code(code: &GaussianCode, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != code.dim() {
        return Err(GadError::contract(format!(
            "noise dim {} != code dim {}",
            noise.len(),
            code.dim()
        )));
    }
    Ok(code
        .mean
        .iter()
        .zip(code.std.iter())
        .zip(noise.iter())
        .map(|((&m, &s), &n)| m + s * n)
        .collect())
}

/// The three least-squares GAN terms for one discriminator output:
/// ((d-1)^2, (d+1)^2, d^2) for real / fake / adversarial targets.
pub fn lsgan_terms(d_out: f64) -> Result<(f64, f64, f64)> {
    if !d_out.is_finite() {
        return Err(GadError::contract("discriminator output must be finite"));
    }
    Ok(((d_out - 1.0).powi(2), (d_out + 1.0).powi(2), d_out.powi(2)))
}

fn logsumexp(values: &[f64]) -> f64 {
    let maxv = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| (v - maxv).exp()).sum();
    maxv + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Graph;
    use ndarray::{Array2, Array3, ArrayD, IxDyn};

    #[test]
    fn pixel_l2_identity_and_unit_cases() {
        let x = Array3::<f64>::zeros((4, 4, 3));
        assert_eq!(pixel_l2_distance(&x.view(), &x.view()).unwrap(), 0.0);

        // every pixel of y is (1, 0, 0): each per-pixel norm is exactly 1
        let mut y = Array3::<f64>::zeros((4, 4, 3));
        for i in 0..4 {
            for j in 0..4 {
                y[(i, j, 0)] = 1.0;
            }
        }
        let d = pixel_l2_distance(&x.view(), &y.view()).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pixel_l2_matches_scalar_loop_oracle() {
        let mut s = Stream::new(21, "pixel-oracle");
        for _ in 0..20 {
            let mut x = Array3::<f64>::zeros((4, 4, 3));
            let mut y = Array3::<f64>::zeros((4, 4, 3));
            for v in x.iter_mut() {
                *v = s.uniform_in(-1.0, 1.0);
            }
            for v in y.iter_mut() {
                *v = s.uniform_in(-1.0, 1.0);
            }
            // oracle: accumulate per-pixel squared channel differences by hand
            let mut acc = 0.0f64;
            for i in 0..4 {
                for j in 0..4 {
                    let d0 = x[(i, j, 0)] - y[(i, j, 0)];
                    let d1 = x[(i, j, 1)] - y[(i, j, 1)];
                    let d2 = x[(i, j, 2)] - y[(i, j, 2)];
                    acc += (d0 * d0 + d1 * d1 + d2 * d2).sqrt();
                }
            }
            let want = acc / 16.0;
            let got = pixel_l2_distance(&x.view(), &y.view()).unwrap();
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_l2_rejects_shape_mismatch() {
        let x = Array3::<f64>::zeros((4, 4, 3));
        let y = Array3::<f64>::zeros((8, 8, 3));
        assert!(pixel_l2_distance(&x.view(), &y.view()).is_err());
    }

    #[test]
    fn nll_cases() {
        // uniform softmax
        let l = Logits::new(vec![0.7; 5]).unwrap();
        let v = nll(&l, ArtistId(2)).unwrap();
        assert!((v - (5.0f64).ln()).abs() < 1e-12);

        // closed form for (10, 0), label 0
        let l = Logits::new(vec![10.0, 0.0]).unwrap();
        let v = nll(&l, ArtistId(0)).unwrap();
        let want = -((10.0f64).exp() / ((10.0f64).exp() + 1.0)).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 4.5398899216870535e-5).abs() < 1e-9);

        // huge logit must not overflow
        let mut vals = vec![0.0; 8];
        vals[3] = 1000.0;
        let l = Logits::new(vals).unwrap();
        let v = nll(&l, ArtistId(3)).unwrap();
        assert!(v.is_finite() && v >= 0.0 && v < 1e-9);

        assert!(nll(&l, ArtistId(8)).is_err());
    }

    #[test]
    fn nlu_cases() {
        // label probability ~0 -> -log(1) = 0
        let l = Logits::new(vec![-1e9, 0.0, 0.0]).unwrap();
        let v = nlu(&l, ArtistId(0)).unwrap();
        assert!(v.abs() < 1e-12);

        // two equal classes -> ln 2
        let l = Logits::new(vec![1.3, 1.3]).unwrap();
        let v = nlu(&l, ArtistId(0)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // label logit 30, nine zeros: exclusion oracle 30 + ln(1 + 9e-30) - ln 9
        let mut vals = vec![0.0; 10];
        vals[4] = 30.0;
        let l = Logits::new(vals).unwrap();
        let v = nlu(&l, ArtistId(4)).unwrap();
        let want = 30.0 + (9.0 * (-30.0f64).exp()).ln_1p() - (9.0f64).ln();
        assert!((v - want).abs() < 1e-9, "{v} vs {want}");
        // while the naive form has lost most of its precision to cancellation
        let p = (30.0f64).exp() / ((30.0f64).exp() + 9.0);
        let naive = -(1.0 - p).ln();
        assert!(naive.is_infinite() || (naive - want).abs() > 1e-7);

        // single class is rejected
        let l = Logits::new(vec![0.0]).unwrap();
        assert!(nlu(&l, ArtistId(0)).is_err());
    }

    #[test]
    fn kl_cases() {
        let c = GaussianCode::new(vec![0.0; 6], vec![1.0; 6]).unwrap();
        assert_eq!(kl_to_standard_normal(&c).unwrap(), 0.0);

        let c = GaussianCode::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_to_standard_normal(&c).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        let mut s = Stream::new(33, "kl-mc");
        let mean: Vec<f64> = (0..8).map(|_| s.uniform_in(-1.5, 1.5)).collect();
        let std: Vec<f64> = (0..8).map(|_| s.uniform_in(0.3, 2.0)).collect();
        let code = GaussianCode::new(mean.clone(), std.clone()).unwrap();
        let analytic = kl_to_standard_normal(&code).unwrap();

        // MC estimate of E_q[log q(z) - log p(z)]
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut term = 0.0;
            for k in 0..8 {
                let eps = s.normal();
                let z = mean[k] + std[k] * eps;
                let log_q = -0.5 * eps * eps - std[k].ln();
                let log_p = -0.5 * z * z;
                term += log_q - log_p;
            }
            sum += term;
            sumsq += term * term;
        }
        let est = sum / n as f64;
        let se = ((sumsq / n as f64 - est * est) / n as f64).sqrt();
        assert!(
            (analytic - est).abs() < 3.0 * se,
            "analytic {analytic} vs MC {est} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn sample_code_cases() {
        let c = GaussianCode::new(vec![2.0, -1.0], vec![1e-12, 1e-12]).unwrap();
        let s = sample_code(&c, &[0.7, -0.3]).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-9 && (s[1] + 1.0).abs() < 1e-9);

        let c = GaussianCode::new(vec![0.5, 0.25], vec![2.0, 3.0]).unwrap();
        assert_eq!(sample_code(&c, &[0.0, 0.0]).unwrap(), vec![0.5, 0.25]);
        assert!(sample_code(&c, &[0.0]).is_err());
    }

    #[test]
    fn sample_code_statistics() {
        let mut s = Stream::new(55, "sample-stats");
        let code = GaussianCode::new(vec![1.2], vec![0.7]).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample_code(&code, &[s.normal()]).unwrap()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se_mean = 0.7 / (n as f64).sqrt();
        assert!((mean - 1.2).abs() < 3.0 * se_mean);
        // SE of the std estimate is roughly std /): sqrt(2n)
        let se_std = 0.7 / (2.0 * n as f64).sqrt();
        assert!((var.sqrt() - 0.7).abs() < 3.0 * se_std);
    }

    #[test]
    fn lsgan_cases() {
        assert_eq!(lsgan_terms(1.0).unwrap().0, 0.0);
        assert_eq!(lsgan_terms(-1.0).unwrap().1, 0.0);
        let (r, f, a) = lsgan_terms(0.0).unwrap();
        assert_eq!((r, f, a), (1.0, 1.0, 0.0));
        assert!(lsgan_terms(f64::NAN).is_err());
    }

    #[test]
    fn graph_ops_agree_with_scalar_forms() {
        let mut s = Stream::new(77, "graph-consistency");
        // nll / nlu on a batch of one
        let vals: Vec<f64> = (0..7).map(|_| s.uniform_in(-3.0, 3.0)).collect();
        let logits = Logits::new(vals.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let node = g.constant(
            Array2::from_shape_vec((1, 7), vals).unwrap().into_dyn(),
        );
        let nll_node = g.nll_mean(node, &[3]);
        let nlu_node = g.nlu_mean(node, &[3]);
        assert!((g.scalar(nll_node) - nll(&logits, ArtistId(3)).unwrap()).abs() < 1e-12);
        assert!((g.scalar(nlu_node) - nlu(&logits, ArtistId(3)).unwrap()).abs() < 1e-12);

        // kl on a batch of one, std parameterized as exp(logstd)
        let mean: Vec<f64> = (0..5).map(|_| s.uniform_in(-1.0, 1.0)).collect();
        let logstd: Vec<f64> = (0..5).map(|_| s.uniform_in(-1.0, 0.5)).collect();
        let code = GaussianCode::new(
            mean.clone(),
            logstd.iter().map(|&l| l.exp()).collect(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let m = g.constant(Array2::from_shape_vec((1, 5), mean).unwrap().into_dyn());
        let l = g.constant(Array2::from_shape_vec((1, 5), logstd).unwrap().into_dyn());
        let kl_node = g.kl_std_normal_mean(m, l);
        assert!((g.scalar(kl_node) - kl_to_standard_normal(&code).unwrap()).abs() < 1e-12);

        // pixel distance on a batch of one (nchw in the graph)
        let mut x = Array3::<f64>::zeros((4, 4, 3));
        let mut y = Array3::<f64>::zeros((4, 4, 3));
        for v in x.iter_mut() {
            *v = s.uniform_in(-1.0, 1.0);
        }
        for v in y.iter_mut() {
            *v = s.uniform_in(-1.0, 1.0);
        }
        let as_batch = |a: &Array3<f64>| {
            a.clone()
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality::<ndarray::IxDyn>()
                .unwrap()
        };
        let mut g = Graph::<f64>::new();
        let xn = g.constant(as_batch(&x));
        let yn = g.constant(as_batch(&y));
        let d = g.pixel_l2_mean(xn, yn);
        assert!(
            (g.scalar(d) - pixel_l2_distance(&x.view(), &y.view()).unwrap()).abs() < 1e-12
        );
    }

    /// Central finite differences through the graph forms of every loss, the
    /// gradient route training actually uses.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut s = Stream::new(99, "loss-fd");
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        let h = 1e-5;

        for trial in 0..100 {
            let k = 4 + trial % 4;
            let vals: Vec<f64> = (0..k).map(|_| s.uniform_in(-2.0, 2.0)).collect();
            let label = trial % k;
            let arr = Array2::from_shape_vec((1, k), vals.clone()).unwrap().into_dyn();

            for use_nlu in [false, true] {
                let eval = |a: &ArrayD<f64>| {
                    let mut g = Graph::<f64>::new();
                    let n = g.constant(a.clone());
                    let loss = if use_nlu {
                        g.nlu_mean(n, &[label])
                    } else {
                        g.nll_mean(n, &[label])
                    };
                    g.scalar(loss)
                };
                let mut g = Graph::<f64>::new();
                let n = g.leaf(arr.clone(), true);
                let loss = if use_nlu {
                    g.nlu_mean(n, &[label])
                } else {
                    g.nll_mean(n, &[label])
                };
                let mut grads = g.backward(loss);
                let gn = grads.take(n).unwrap();
                let j = trial % k;
                let mut plus = arr.clone();
                let mut minus = arr.clone();
                plus[[0, j]] += h;
                minus[[0, j]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(rel(fd, gn[[0, j]]) < 1e-4, "fd {fd} vs {}", gn[[0, j]]);
            }
        }
    }
}
