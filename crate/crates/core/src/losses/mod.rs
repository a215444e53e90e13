//! Loss kernels: the contrastive vocabulary regularizer, the generator MLM
//! loss, the replaced-token-detection loss and its anatomical-site variant.
//!
//! Every kernel is generic over [`Scalar`] and has an analytic gradient in
//! [`grad`].

pub mod grad;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use grad::{disc_logit_grad, grad_check, kg_logit_grad, l_reg_grad, mlm_logit_grad, relative_error};

pub const CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("zero-norm encoding ({side} {index})")]
    ZeroNorm { side: &'static str, index: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("masked position set is empty")]
    EmptyMask,
    #[error("layer {layer} out of range ({layers} layers)")]
    Layer { layer: usize, layers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Multiplies the regularizer; `1.0` keeps it as printed, `-1.0` negates it.
    pub reg_sign: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            reg_sign: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_kg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_kg: 1.0,
        }
    }
}

/// Sentence encodings of the adapted (`h_a`) and general (`h_p`) encoders,
/// indexed `[layer][batch][dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingBatch<T> {
    pub h_a: Vec<Vec<Vec<T>>>,
    pub h_p: Vec<Vec<Vec<T>>>,
    pub tau: T,
}

impl<T: Scalar> EncodingBatch<T> {
    /// Single-layer batch.
    pub fn single(h_a: Vec<Vec<T>>, h_p: Vec<Vec<T>>, tau: T) -> Self {
        Self {
            h_a: vec![h_a],
            h_p: vec![h_p],
            tau,
        }
    }

    pub fn layers(&self) -> usize {
        self.h_a.len()
    }

    pub fn last_layer(&self) -> usize {
        self.h_a.len().saturating_sub(1)
    }
}

/// Anatomical-site link of the token at one position.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PositionLink {
    pub concept: String,
    #[serde(default)]
    pub sites: BTreeSet<String>,
    /// Immediate body-system subclasses the concept descends from.
    #[serde(default)]
    pub systems: BTreeSet<String>,
}

impl PositionLink {
    /// Same concept, a shared anatomical site, or a shared body system.
    pub fn related(&self, other: &PositionLink) -> bool {
        self.concept == other.concept
            || !self.sites.is_disjoint(&other.sites)
            || !self.systems.is_disjoint(&other.systems)
    }
}

/// Links of the original and the corrupted token at every position.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KgLinks {
    pub original: Vec<Option<PositionLink>>,
    pub corrupt: Vec<Option<PositionLink>>,
}

/// One replaced-token-detection example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtdBatch<T> {
    pub x: Vec<u32>,
    pub x_masked: Vec<u32>,
    pub x_corrupt: Vec<u32>,
    /// Masked positions, aligned with the rows of `p_g`.
    pub masked: Vec<usize>,
    pub p_g: Vec<Vec<T>>,
    /// Discriminator probabilities that each token is original.
    pub d: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<KgLinks>,
}

impl<T: Scalar> RtdBatch<T> {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.x.len();
        if self.x_masked.len() != n || self.x_corrupt.len() != n || self.d.len() != n {
            return Err(LossError::Shape(format!(
                "x {n}, x_masked {}, x_corrupt {}, d {}",
                self.x_masked.len(),
                self.x_corrupt.len(),
                self.d.len()
            )));
        }
        if self.p_g.len() != self.masked.len() {
            return Err(LossError::Shape(format!(
                "{} generator rows for {} masked positions",
                self.p_g.len(),
                self.masked.len()
            )));
        }
        if let Some(&p) = self.masked.iter().find(|&&p| p >= n) {
            return Err(LossError::Shape(format!("masked position {p} >= {n}")));
        }
        for (row, &p) in self.p_g.iter().zip(&self.masked) {
            if (self.x[p] as usize) >= row.len() {
                return Err(LossError::Shape(format!(
                    "token {} outside generator row of {}",
                    self.x[p],
                    row.len()
                )));
            }
        }
        if self.d.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("d"));
        }
        if let Some(links) = &self.links {
            if links.original.len() != n || links.corrupt.len() != n {
                return Err(LossError::Shape("links do not cover every position".into()));
            }
        }
        Ok(())
    }

    /// 1 where the corrupted token equals the original.
    pub fn disc_targets(&self) -> Vec<T> {
        self.x
            .iter()
            .zip(&self.x_corrupt)
            .map(|(a, b)| if a == b { T::one() } else { T::zero() })
            .collect()
    }

    /// 1 where the corrupted token counts as real under the site relation;
    /// positions lacking a link on either side use the plain equality target.
    pub fn kg_targets(&self) -> Vec<T> {
        let mut t = self.disc_targets();
        if let Some(links) = &self.links {
            for (i, v) in t.iter_mut().enumerate() {
                if let (Some(a), Some(b)) = (&links.original[i], &links.corrupt[i]) {
                    *v = if b.related(a) { T::one() } else { T::zero() };
                }
            }
        }
        t
    }
}

/// Kernel value plus how many probabilities hit the clamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss<T> {
    pub value: T,
    pub clamped: usize,
}

pub fn clamp_eps<T: Scalar>() -> T {
    T::c(CLAMP_EPS).max(T::epsilon())
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine similarity matrix `s[i][j] = cos(a_i, p_j)`.
pub(crate) fn cosine_matrix<T: Scalar>(a: &[Vec<T>], p: &[Vec<T>]) -> Result<Vec<Vec<T>>, LossError> {
    if a.len() != p.len() || a.is_empty() {
        return Err(LossError::Shape(format!("batch sizes {} and {}", a.len(), p.len())));
    }
    let d = a[0].len();
    if a.iter().chain(p).any(|v| v.len() != d) {
        return Err(LossError::Shape("encoding widths differ".into()));
    }
    if a.iter().chain(p).flatten().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("encodings"));
    }
    let na: Vec<T> = a.iter().map(|v| norm(v)).collect();
    let np: Vec<T> = p.iter().map(|v| norm(v)).collect();
    if let Some(i) = na.iter().position(|n| n.is_zero()) {
        return Err(LossError::ZeroNorm { side: "h_a", index: i });
    }
    if let Some(i) = np.iter().position(|n| n.is_zero()) {
        return Err(LossError::ZeroNorm { side: "h_p", index: i });
    }
    Ok(a.iter()
        .zip(&na)
        .map(|(ai, &nai)| p.iter().zip(&np).map(|(pj, &npj)| dot(ai, pj) / (nai * npj)).collect())
        .collect())
}

/// Row-wise softmax of `s / tau` with max subtraction.
pub(crate) fn similarity_softmax<T: Scalar>(s: &[Vec<T>], tau: T) -> Vec<Vec<T>> {
    s.iter()
        .map(|row| {
            let z: Vec<T> = row.iter().map(|&v| v / tau).collect();
            crate::scalar::softmax(&z)
        })
        .collect()
}

/// `sign * (1/B) * log sum_i softmax_j(cos(a_i, p_j) / tau)[i]` on one layer's encodings.
pub fn l_reg_encodings<T: Scalar>(a: &[Vec<T>], p: &[Vec<T>], tau: T, sign: T) -> Result<T, LossError> {
    if tau.is_nan() || tau <= T::zero() {
        return Err(LossError::Temperature(tau.as_f64()));
    }
    let s = cosine_matrix(a, p)?;
    let probs = similarity_softmax(&s, tau);
    let b = T::c(a.len() as f64);
    let diag: T = probs.iter().enumerate().map(|(i, r)| r[i]).sum();
    Ok(sign * diag.ln() / b)
}

pub fn l_reg<T: Scalar>(batch: &EncodingBatch<T>, layer: usize, cfg: &LossConfig) -> Result<T, LossError> {
    if layer >= batch.h_a.len() || layer >= batch.h_p.len() {
        return Err(LossError::Layer {
            layer,
            layers: batch.h_a.len().min(batch.h_p.len()),
        });
    }
    l_reg_encodings(&batch.h_a[layer], &batch.h_p[layer], batch.tau, T::c(cfg.reg_sign))
}

fn reduce<T: Scalar>(sum: T, count: usize, reduction: Reduction) -> T {
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if count == 0 => T::zero(),
        Reduction::Mean => sum / T::c(count as f64),
    }
}

/// Generator loss `lambda_a * reg + sum_{i in m} -log p_G(x_i)`.
pub fn l_mlm<T: Scalar>(batch: &RtdBatch<T>, reg: T, lambda_a: T, cfg: &LossConfig) -> Result<Loss<T>, LossError> {
    batch.validate()?;
    if batch.masked.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let eps = clamp_eps::<T>();
    let mut clamped = 0;
    let mut sum = T::zero();
    for (row, &pos) in batch.p_g.iter().zip(&batch.masked) {
        let mut p = row[batch.x[pos] as usize];
        if p < eps {
            clamped += 1;
            p = eps;
        }
        sum -= p.ln();
    }
    Ok(Loss {
        value: lambda_a * reg + reduce(sum, batch.masked.len(), cfg.reduction),
        clamped,
    })
}

/// Binary cross-entropy of `d` against `targets`, clamped to `[eps, 1 - eps]`.
pub fn bce_sum<T: Scalar>(d: &[T], targets: &[T]) -> (T, usize) {
    let eps = clamp_eps::<T>();
    let hi = T::one() - eps;
    let mut clamped = 0;
    let mut sum = T::zero();
    for (&dt, &y) in d.iter().zip(targets) {
        let c = if dt < eps {
            clamped += 1;
            eps
        } else if dt > hi {
            clamped += 1;
            hi
        } else {
            dt
        };
        if y > T::zero() {
            sum -= y * c.ln();
        }
        if y < T::one() {
            sum -= (T::one() - y) * (T::one() - c).ln();
        }
    }
    (sum, clamped)
}

/// Discriminator loss `lambda_a * reg + sum_t BCE(D_t, 1[x_corrupt_t == x_t])`.
pub fn l_disc<T: Scalar>(batch: &RtdBatch<T>, reg: T, lambda_a: T, cfg: &LossConfig) -> Result<Loss<T>, LossError> {
    batch.validate()?;
    let (sum, clamped) = bce_sum(&batch.d, &batch.disc_targets());
    Ok(Loss {
        value: lambda_a * reg + reduce(sum, batch.len(), cfg.reduction),
        clamped,
    })
}

/// Site-aware discriminator loss (no regularizer term). Requires `links`;
/// without them it reduces to the plain RTD sum.
pub fn l_kg<T: Scalar>(batch: &RtdBatch<T>, cfg: &LossConfig) -> Result<Loss<T>, LossError> {
    batch.validate()?;
    let (sum, clamped) = bce_sum(&batch.d, &batch.kg_targets());
    Ok(Loss {
        value: reduce(sum, batch.len(), cfg.reduction),
        clamped,
    })
}

/// `l_disc + lambda_kg * l_kg`.
pub fn l_disc_kg<T: Scalar>(
    batch: &RtdBatch<T>,
    reg: T,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<Loss<T>, LossError> {
    let disc = l_disc(batch, reg, T::c(weights.lambda_a), cfg)?;
    let lambda_kg = T::c(weights.lambda_kg);
    if lambda_kg.is_zero() {
        return Ok(disc);
    }
    let kg = l_kg(batch, cfg)?;
    Ok(Loss {
        value: disc.value + lambda_kg * kg.value,
        clamped: disc.clamped + kg.clamped,
    })
}

/// All four values for one batch, as printed by `loss-eval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mlm: f64,
    pub l_disc: f64,
    pub l_kg: f64,
    pub l_disc_kg: f64,
    pub clamped: usize,
}

pub fn evaluate_all<T: Scalar>(
    batch: &RtdBatch<T>,
    reg: T,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    let la = T::c(weights.lambda_a);
    let mlm = l_mlm(batch, reg, la, cfg)?;
    let disc = l_disc(batch, reg, la, cfg)?;
    let kg = l_kg(batch, cfg)?;
    let total = l_disc_kg(batch, reg, weights, cfg)?;
    Ok(LossReport {
        l_mlm: mlm.value.as_f64(),
        l_disc: disc.value.as_f64(),
        l_kg: kg.value.as_f64(),
        l_disc_kg: total.value.as_f64(),
        clamped: mlm.clamped + disc.clamped + kg.clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn rtd(x: Vec<u32>, corrupt: Vec<u32>, d: Vec<f64>) -> RtdBatch<f64> {
        RtdBatch {
            x_masked: x.clone(),
            x,
            x_corrupt: corrupt,
            masked: vec![],
            p_g: vec![],
            d,
            links: None,
        }
    }

    fn link(concept: &str, sites: &[&str]) -> Option<PositionLink> {
        Some(PositionLink {
            concept: concept.into(),
            sites: sites.iter().map(|s| s.to_string()).collect(),
            systems: BTreeSet::new(),
        })
    }

    #[test]
    fn reg_single_item_is_exactly_zero() {
        let b = EncodingBatch::single(vec![vec![0.3, -1.2, 4.0]], vec![vec![2.0, 0.1, -0.5]], 0.7);
        assert_eq!(l_reg(&b, 0, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn reg_two_orthonormal_pairs() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = EncodingBatch::single(e.clone(), e, 1.0);
        let v = l_reg(&b, 0, &LossConfig::default()).unwrap();
        let closed = 0.5 * (2.0 * E / (E + 1.0)).ln();
        assert!((v - closed).abs() < 1e-12);
        assert!((v - 0.189_942_746_5).abs() < 1e-7);
        let neg = LossConfig {
            reg_sign: -1.0,
            ..Default::default()
        };
        let b2 = EncodingBatch::single(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            1.0,
        );
        assert_eq!(l_reg(&b2, 0, &neg).unwrap(), -v);
    }

    #[test]
    fn reg_errors() {
        let b = EncodingBatch::single(vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]], 1.0);
        assert_eq!(
            l_reg(&b, 0, &LossConfig::default()),
            Err(LossError::ZeroNorm { side: "h_a", index: 0 })
        );
        let b = EncodingBatch::single(vec![vec![1.0]], vec![vec![1.0]], 0.0);
        assert!(matches!(
            l_reg(&b, 0, &LossConfig::default()),
            Err(LossError::Temperature(_))
        ));
        assert!(matches!(
            l_reg(&b, 3, &LossConfig::default()),
            Err(LossError::Layer { .. })
        ));
    }

    #[test]
    fn mlm_values() {
        let cfg = LossConfig::default();
        let mut b = rtd(vec![0, 1, 2], vec![0, 1, 2], vec![0.5; 3]);
        b.masked = vec![1];
        b.p_g = vec![vec![0.25, 0.5, 0.25]];
        assert!((l_mlm(&b, 0.0, 0.0, &cfg).unwrap().value - 2f64.ln()).abs() < 1e-15);
        b.p_g = vec![vec![0.0, 1.0, 0.0]];
        assert_eq!(l_mlm(&b, 0.0, 1.0, &cfg).unwrap().value, 0.0);
        assert!((l_mlm(&b, 0.19, 1.0, &cfg).unwrap().value - 0.19).abs() < 1e-15);
        b.p_g = vec![vec![1.0, 0.0, 0.0]];
        let l = l_mlm(&b, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + CLAMP_EPS.ln()).abs() < 1e-9);
        b.masked.clear();
        b.p_g.clear();
        assert_eq!(l_mlm(&b, 0.0, 1.0, &cfg), Err(LossError::EmptyMask));
    }

    #[test]
    fn disc_values() {
        let cfg = LossConfig::default();
        let b = rtd(vec![4, 5], vec![4, 9], vec![0.9, 0.3]);
        let v = l_disc(&b, 0.0, 1.0, &cfg).unwrap().value;
        assert!((v - (-(0.9f64.ln()) - 0.7f64.ln())).abs() < 1e-15);
        assert!((v - 0.4620).abs() < 1e-4);
        let perfect = rtd(vec![1, 2, 3], vec![1, 2, 3], vec![1.0 - CLAMP_EPS; 3]);
        assert!(l_disc(&perfect, 0.0, 1.0, &cfg).unwrap().value < 1e-10);
        let saturated = rtd(vec![1], vec![1], vec![1.0]);
        assert_eq!(l_disc(&saturated, 0.0, 1.0, &cfg).unwrap().clamped, 1);
        let mean = LossConfig {
            reduction: Reduction::Mean,
            ..cfg
        };
        assert!((l_disc(&b, 0.0, 1.0, &mean).unwrap().value - v / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kg_branches() {
        let cfg = LossConfig::default();
        let mut b = rtd(vec![10], vec![11], vec![0.2]);
        b.links = Some(KgLinks {
            original: vec![link("pneumonia", &["lungs"])],
            corrupt: vec![link("edema", &["lungs"])],
        });
        assert!((l_kg(&b, &cfg).unwrap().value - 1.609_437_912).abs() < 1e-8);
        b.links = Some(KgLinks {
            original: vec![link("pneumonia", &["lungs"])],
            corrupt: vec![link("fracture", &["rib"])],
        });
        assert!((l_kg(&b, &cfg).unwrap().value - 0.223_143_551).abs() < 1e-8);
        // unlinked falls back to equality
        b.links = Some(KgLinks {
            original: vec![None],
            corrupt: vec![link("x", &[])],
        });
        assert!((l_kg(&b, &cfg).unwrap().value - 0.8f64.ln().abs()).abs() < 1e-15);
    }

    #[test]
    fn kg_equals_disc_without_replacements() {
        let cfg = LossConfig::default();
        let mut b = rtd(vec![1, 2, 3], vec![1, 2, 3], vec![0.2, 0.6, 0.9]);
        b.links = Some(KgLinks {
            original: vec![link("a", &[]), link("b", &["s"]), None],
            corrupt: vec![link("a", &[]), link("b", &["s"]), None],
        });
        let disc = l_disc(&b, 0.0, 1.0, &cfg).unwrap().value;
        assert_eq!(l_kg(&b, &cfg).unwrap().value, disc);
    }

    #[test]
    fn disc_kg_weights() {
        let cfg = LossConfig::default();
        let b = rtd(vec![1, 2], vec![1, 3], vec![0.4, 0.4]);
        let w0 = LossWeights {
            lambda_a: 1.0,
            lambda_kg: 0.0,
        };
        assert_eq!(
            l_disc_kg(&b, 0.3, &w0, &cfg).unwrap().value,
            l_disc(&b, 0.3, 1.0, &cfg).unwrap().value
        );
        let w1 = LossWeights::default();
        let sum = l_disc(&b, 0.3, 1.0, &cfg).unwrap().value + l_kg(&b, &cfg).unwrap().value;
        assert_eq!(l_disc_kg(&b, 0.3, &w1, &cfg).unwrap().value, sum);
    }

    #[test]
    fn f32_instantiation() {
        let e = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let b = EncodingBatch::single(e.clone(), e, 1.0f32);
        let v = l_reg(&b, 0, &LossConfig::default()).unwrap();
        assert!((v as f64 - 0.189_942_746_5).abs() < 1e-6);
        let r = RtdBatch::<f32> {
            x: vec![1],
            x_masked: vec![1],
            x_corrupt: vec![1],
            masked: vec![],
            p_g: vec![],
            d: vec![1.0],
            links: None,
        };
        assert!(l_disc(&r, 0.0, 1.0, &LossConfig::default()).unwrap().value.is_finite());
    }

    #[test]
    fn shape_validation() {
        let mut b = rtd(vec![1, 2], vec![1], vec![0.5, 0.5]);
        assert!(matches!(b.validate(), Err(LossError::Shape(_))));
        b.x_corrupt = vec![1, 2];
        b.masked = vec![5];
        b.p_g = vec![vec![0.5, 0.5]];
        assert!(matches!(b.validate(), Err(LossError::Shape(_))));
    }
}
