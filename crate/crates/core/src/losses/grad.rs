//! Analytic gradients of the loss kernels and a central-difference checker.

use super::{bce_sum, cosine_matrix, similarity_softmax, LossError};
use crate::scalar::{sigmoid, softmax, Scalar};

/// Value of the regularizer and its gradient with respect to `a` (the adapted
/// encodings). With `r_i = P_ii`, `S = sum_i r_i`:
/// `dL/dz_ij = sign / (B S) * r_i (delta_ij - P_ij)`, `z = s / tau`,
/// `ds_ij/da_i = p_j / (|a_i||p_j|) - s_ij a_i / |a_i|^2`.
pub fn l_reg_grad<T: Scalar>(a: &[Vec<T>], p: &[Vec<T>], tau: T, sign: T) -> Result<(T, Vec<Vec<T>>), LossError> {
    if tau.is_nan() || tau <= T::zero() {
        return Err(LossError::Temperature(tau.as_f64()));
    }
    let s = cosine_matrix(a, p)?;
    let probs = similarity_softmax(&s, tau);
    let b = a.len();
    let bt = T::c(b as f64);
    let total: T = (0..b).map(|i| probs[i][i]).sum();
    let value = sign * total.ln() / bt;

    let na: Vec<T> = a.iter().map(|v| v.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
    let np: Vec<T> = p.iter().map(|v| v.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
    let mut grad = vec![vec![T::zero(); a[0].len()]; b];
    for i in 0..b {
        let ri = probs[i][i];
        for j in 0..b {
            let delta = if i == j { T::one() } else { T::zero() };
            let dz = sign / (bt * total) * ri * (delta - probs[i][j]);
            let ds = dz / tau;
            if ds.is_zero() {
                continue;
            }
            let inv = T::one() / (na[i] * np[j]);
            let sij_over = s[i][j] / (na[i] * na[i]);
            for (k, g) in grad[i].iter_mut().enumerate() {
                *g += ds * (p[j][k] * inv - sij_over * a[i][k]);
            }
        }
    }
    Ok((value, grad))
}

/// RTD sum on pre-sigmoid logits and its gradient `sigmoid(y) - target`.
pub fn disc_logit_grad<T: Scalar>(logits: &[T], targets: &[T]) -> (T, Vec<T>) {
    let d: Vec<T> = logits.iter().map(|&y| sigmoid(y)).collect();
    let (value, _) = bce_sum(&d, targets);
    let grad = d.iter().zip(targets).map(|(&di, &t)| di - t).collect();
    (value, grad)
}

/// `l_disc + lambda_kg * l_kg` on logits, without the regularizer.
pub fn kg_logit_grad<T: Scalar>(logits: &[T], disc_targets: &[T], kg_targets: &[T], lambda_kg: T) -> (T, Vec<T>) {
    let (vd, gd) = disc_logit_grad(logits, disc_targets);
    let (vk, gk) = disc_logit_grad(logits, kg_targets);
    let grad = gd.iter().zip(&gk).map(|(&a, &b)| a + lambda_kg * b).collect();
    (vd + lambda_kg * vk, grad)
}

/// Generator sum `-log softmax(row)[target]` over rows and its gradient
/// `softmax(row) - onehot(target)`.
pub fn mlm_logit_grad<T: Scalar>(logits: &[Vec<T>], targets: &[u32]) -> (T, Vec<Vec<T>>) {
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.iter().zip(targets) {
        let mut p = softmax(row);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        value += lse - row[t as usize];
        p[t as usize] -= T::one();
        grad.push(p);
    }
    (value, grad)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x` with step `eps`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
