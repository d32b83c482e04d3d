//! Dense binary64 reference attention, its analytic gradients, and error
//! metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::AttnConfig;
use crate::dropout::Dropout;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Reference forward results.
#[derive(Clone, Debug)]
pub struct RefForward {
    /// `[batch, heads, N, d]`
    pub o: Tensor<f64>,
    /// Softmax weights before dropout, `[batch, heads, N, N]`.
    pub p: Tensor<f64>,
    /// `[batch, heads, N]`
    pub lse: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct RefGrads {
    pub dq: Tensor<f64>,
    pub dk: Tensor<f64>,
    pub dv: Tensor<f64>,
}

fn check(tensors: &[&Tensor<f64>], cfg: &AttnConfig) -> Result<()> {
    if cfg.batch == 0 || cfg.heads == 0 || cfg.seq_len == 0 || cfg.head_dim == 0 {
        return Err(Error::Config("empty problem".into()));
    }
    let expected = cfg.qkv_shape();
    for t in tensors {
        if t.shape() != expected {
            return Err(Error::Shape(format!("{:?} vs config {expected:?}", t.shape())));
        }
    }
    Ok(())
}

fn heads(cfg: &AttnConfig) -> Vec<(usize, usize)> {
    (0..cfg.batch).flat_map(|b| (0..cfg.heads).map(move |h| (b, h))).collect()
}

/// Softmax weights `P` (`n x n`) and log-sum-exp of one head.
fn head_softmax(q: &[f64], k: &[f64], cfg: &AttnConfig) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let scale = cfg.softmax_scale as f64;
    let mut p = vec![0.0; n * n];
    let mut lse = vec![0.0; n];
    for i in 0..n {
        let row = &mut p[i * n..(i + 1) * n];
        let visible = if cfg.causal { i + 1 } else { n };
        for j in 0..visible {
            row[j] = scale * (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>();
        }
        let m = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut l = 0.0;
        for x in &mut row[..visible] {
            *x = (*x - m).exp();
            l += *x;
        }
        for x in &mut row[..visible] {
            *x /= l;
        }
        lse[i] = m + l.ln();
    }
    (p, lse)
}

/// Dense forward: `S = scale * Q K^T` (causal entries removed), row softmax,
/// dropout with the kernels' mask, `O = P V`.
pub fn attention_ref(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, cfg: &AttnConfig) -> Result<RefForward> {
    check(&[q, k, v], cfg)?;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let dropout = Dropout::new(cfg.dropout_p, cfg.seed);
    let per_head: Vec<_> = heads(cfg)
        .into_par_iter()
        .map(|(b, h)| {
            let (p, lse) = head_softmax(q.head(b, h), k.head(b, h), cfg);
            let vh = v.head(b, h);
            let mut o = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    let w = p[i * n + j] * dropout.factor_f64(b, h, i, j);
                    if w != 0.0 {
                        for c in 0..d {
                            o[i * d + c] += w * vh[j * d + c];
                        }
                    }
                }
            }
            (o, p, lse)
        })
        .collect();
    let mut out = RefForward {
        o: Tensor::zeros(&cfg.qkv_shape()),
        p: Tensor::zeros(&[cfg.batch, cfg.heads, n, n]),
        lse: Tensor::zeros(&cfg.row_shape()),
    };
    for ((b, h), (o, p, lse)) in heads(cfg).into_iter().zip(per_head) {
        out.o.head_mut(b, h).copy_from_slice(&o);
        out.p.head_mut(b, h).copy_from_slice(&p);
        out.lse.head_mut(b, h).copy_from_slice(&lse);
    }
    Ok(out)
}

/// Analytic gradients of `<O, dO>`:
///
/// ```text
/// dV = (P∘M)^T dO        dP = (dO V^T)∘M        dPsum_i = sum_j P_ij dP_ij
/// dS = P∘(dP - dPsum)    dQ = scale dS K        dK = scale dS^T Q
/// ```
///
/// with `M` the dropout multipliers.
pub fn attention_grad_ref(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    d_o: &Tensor<f64>,
    cfg: &AttnConfig,
) -> Result<RefGrads> {
    check(&[q, k, v, d_o], cfg)?;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let scale = cfg.softmax_scale as f64;
    let dropout = Dropout::new(cfg.dropout_p, cfg.seed);
    let per_head: Vec<_> = heads(cfg)
        .into_par_iter()
        .map(|(b, h)| {
            let (qh, kh, vh, doh) = (q.head(b, h), k.head(b, h), v.head(b, h), d_o.head(b, h));
            let (p, _) = head_softmax(qh, kh, cfg);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut ds = vec![0.0; n];
            for i in 0..n {
                let mut dpsum = 0.0;
                for j in 0..n {
                    let m = dropout.factor_f64(b, h, i, j);
                    let dp = m * (0..d).map(|c| doh[i * d + c] * vh[j * d + c]).sum::<f64>();
                    ds[j] = dp;
                    dpsum += p[i * n + j] * dp;
                    let w = p[i * n + j] * m;
                    for c in 0..d {
                        dv[j * d + c] += w * doh[i * d + c];
                    }
                }
                for j in 0..n {
                    let g = scale * p[i * n + j] * (ds[j] - dpsum);
                    for c in 0..d {
                        dq[i * d + c] += g * kh[j * d + c];
                        dk[j * d + c] += g * qh[i * d + c];
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();
    let mut out = RefGrads {
        dq: Tensor::zeros(&cfg.qkv_shape()),
        dk: Tensor::zeros(&cfg.qkv_shape()),
        dv: Tensor::zeros(&cfg.qkv_shape()),
    };
    for ((b, h), (dq, dk, dv)) in heads(cfg).into_iter().zip(per_head) {
        out.dq.head_mut(b, h).copy_from_slice(&dq);
        out.dk.head_mut(b, h).copy_from_slice(&dk);
        out.dv.head_mut(b, h).copy_from_slice(&dv);
    }
    Ok(out)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every
/// element of `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let x0 = x.as_slice()[i];
        probe.as_mut_slice()[i] = x0 + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = x0 - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = x0;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub mean_rel: f64,
    pub max_rel: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Element-wise `|t - r| / max(|r|, 1e-6)` and `|t - r|`, averaged and maxed
/// over all elements.
pub fn error_metrics(test: &[f64], reference: &[f64]) -> Result<ErrorMetrics> {
    if test.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} test elements vs {} reference elements",
            test.len(),
            reference.len()
        )));
    }
    if test.is_empty() {
        return Ok(ErrorMetrics::default());
    }
    let mut m = ErrorMetrics::default();
    for (&t, &r) in test.iter().zip(reference) {
        let abs = (t - r).abs();
        let rel = abs / r.abs().max(REL_FLOOR);
        m.mean_abs += abs;
        m.mean_rel += rel;
        m.max_abs = m.max_abs.max(abs);
        m.max_rel = m.max_rel.max(rel);
    }
    m.mean_abs /= test.len() as f64;
    m.mean_rel /= test.len() as f64;
    Ok(m)
}

/// [`error_metrics`] on tensors of equal shape.
pub fn tensor_error(test: &Tensor<f64>, reference: &Tensor<f64>) -> Result<ErrorMetrics> {
    if test.shape() != reference.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", test.shape(), reference.shape())));
    }
    error_metrics(test.as_slice(), reference.as_slice())
}

/// `max |t - r| / max |r|`, a scale-aware error for quantities with entries
/// near zero.
pub fn normwise_error(test: &[f64], reference: &[f64]) -> f64 {
    let diff = test.iter().zip(reference).map(|(t, r)| (t - r).abs()).fold(0.0, f64::max);
    let norm = reference.iter().map(|r| r.abs()).fold(0.0, f64::max);
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn one_hot_by_hand() {
        // q0 . k0 = 1, every other product 0; V = I
        let cfg = AttnConfig::new(1, 1, 2, 2).with_tiles(8, 8);
        let cfg = AttnConfig { softmax_scale: 1.0, ..cfg };
        let q = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = attention_ref(&q, &k, &v, &cfg).unwrap();
        let e = std::f64::consts::E;
        let o = r.o.as_slice();
        assert!((o[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((o[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(&o[2..], &[0.5, 0.5]);
        assert!((r.lse.as_slice()[0] - (e + 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_scores_average_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttnConfig::new(1, 1, 6, 4);
        let q = Tensor::zeros(&cfg.qkv_shape());
        let k = random(&mut rng, &cfg.qkv_shape());
        let v = random(&mut rng, &cfg.qkv_shape());
        let r = attention_ref(&q, &k, &v, &cfg).unwrap();
        let vs = v.as_slice();
        for i in 0..6 {
            for c in 0..4 {
                let mean = (0..6).map(|j| vs[j * 4 + c]).sum::<f64>() / 6.0;
                assert!((r.o.as_slice()[i * 4 + c] - mean).abs() < 1e-15);
            }
        }
        let d_o = random(&mut rng, &cfg.qkv_shape());
        let g = attention_grad_ref(&q, &k, &v, &d_o, &cfg).unwrap();
        let ds = d_o.as_slice();
        for j in 0..6 {
            for c in 0..4 {
                let mean = (0..6).map(|i| ds[i * 4 + c]).sum::<f64>() / 6.0;
                assert!((g.dv.as_slice()[j * 4 + c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for causal in [false, true] {
            let cfg = AttnConfig::new(2, 2, 16, 8).with_causal(causal);
            let [q, k, v] = [(); 3].map(|_| random(&mut rng, &cfg.qkv_shape()));
            let r = attention_ref(&q, &k, &v, &cfg).unwrap();
            for row in r.p.as_slice().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if causal {
                assert!(r.p.as_slice()[1..16].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttnConfig::new(1, 2, 8, 4).with_dropout(0.2, 5);
        let [q, k, v] = [(); 3].map(|_| random(&mut rng, &cfg.qkv_shape()));
        let g = attention_grad_ref(&q, &k, &v, &Tensor::zeros(&cfg.qkv_shape()), &cfg).unwrap();
        for t in [g.dq, g.dk, g.dv] {
            assert!(t.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn head_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AttnConfig::new(1, 2, 8, 4);
        let [q, k, v] = [(); 3].map(|_| random(&mut rng, &cfg.qkv_shape()));
        let swap = |t: &Tensor<f64>| {
            let mut s = t.clone();
            s.head_mut(0, 0).copy_from_slice(t.head(0, 1));
            s.head_mut(0, 1).copy_from_slice(t.head(0, 0));
            s
        };
        let a = attention_ref(&q, &k, &v, &cfg).unwrap();
        let b = attention_ref(&swap(&q), &swap(&k), &swap(&v), &cfg).unwrap();
        assert_eq!(a.o.head(0, 0), b.o.head(0, 1));
        assert_eq!(a.o.head(0, 1), b.o.head(0, 0));
        assert_eq!(attention_ref(&q, &k, &v, &cfg).unwrap().o, a.o);
    }

    #[test]
    fn finite_differences_of_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 5]);
        let g = finite_diff_grad(|t| t.as_slice().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (gi, xi) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (causal, p) in [(false, 0.0), (true, 0.0), (false, 0.3)] {
            let cfg = AttnConfig::new(1, 1, 8, 4).with_causal(causal).with_dropout(p, 11);
            let [q, k, v, d_o] = [(); 4].map(|_| random(&mut rng, &cfg.qkv_shape()));
            let g = attention_grad_ref(&q, &k, &v, &d_o, &cfg).unwrap();
            let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
                let o = attention_ref(q, k, v, &cfg).unwrap().o;
                o.as_slice().iter().zip(d_o.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fq = finite_diff_grad(|x| loss(x, &k, &v), &q, 1e-5);
            let fk = finite_diff_grad(|x| loss(&q, x, &v), &k, 1e-5);
            let fv = finite_diff_grad(|x| loss(&q, &k, x), &v, 1e-5);
            for (a, f) in [(&g.dq, &fq), (&g.dk, &fk), (&g.dv, &fv)] {
                let e = normwise_error(f.as_slice(), a.as_slice());
                assert!(e < 1e-6, "causal={causal} p={p}: {e}");
            }
        }
    }

    #[test]
    fn metrics_by_construction() {
        let r = vec![1.0; 10];
        let t = vec![1.001; 10];
        let m = error_metrics(&t, &r).unwrap();
        assert!((m.mean_rel - 1e-3).abs() < 1e-12);
        assert!((m.max_abs - 1e-3).abs() < 1e-12);
        assert_eq!(error_metrics(&r, &r).unwrap(), ErrorMetrics::default());
        assert!(error_metrics(&r, &r[1..]).is_err());
        // near-zero reference uses the floor
        let m = error_metrics(&[1e-7], &[0.0]).unwrap();
        assert!((m.max_rel - 0.1).abs() < 1e-12);
    }

    #[test]
    fn metrics_abs_symmetric() {
        let a = [0.5, -2.0, 3.0];
        let b = [0.25, -1.0, 3.5];
        let (x, y) = (error_metrics(&a, &b).unwrap(), error_metrics(&b, &a).unwrap());
        assert_eq!((x.mean_abs, x.max_abs), (y.mean_abs, y.max_abs));
    }
}
