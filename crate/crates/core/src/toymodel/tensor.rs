use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Named parameter array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul<T: Scalar>(a: &[T], n: usize, k: usize, b: &[T], m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip.is_zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a^T (k x n) * b (n x m)` accumulated into `out (k x m)`.
pub fn add_matmul_at_b<T: Scalar>(out: &mut [T], a: &[T], n: usize, k: usize, b: &[T], m: usize) {
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip.is_zero() {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub fn matmul_a_bt<T: Scalar>(a: &[T], n: usize, k: usize, b: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

pub fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_naive_loops() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, 2, 3, &b, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // a^T b with a 3x2 viewed as n=3,k=2 and b 3x4
        let mut out = vec![0.0; 8];
        add_matmul_at_b(&mut out, &a, 3, 2, &b, 4);
        for p in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|i| a[i * 2 + p] * b[i * 4 + j]).sum();
                assert!((out[p * 4 + j] - want).abs() < 1e-14);
            }
        }
        let bt = matmul_a_bt(&a, 2, 3, &a, 2);
        assert!((bt[1] - (0..3).map(|p| a[p] * a[3 + p]).sum::<f64>()).abs() < 1e-14);
    }
}
