mod common;

use proptest::prelude::*;
use radkg::losses::{
    evaluate_all, l_disc, l_disc_kg, l_kg, l_mlm, l_reg_encodings, LossConfig, LossWeights, Reduction,
};

proptest! {
    #[test]
    fn kernels_agree_with_references(seed in any::<u64>(), reg in -2.0f64..2.0, la in 0.0f64..2.0, lk in 0.0f64..2.0) {
        let b = common::random_batch(seed);
        let cfg = LossConfig::default();
        let w = LossWeights { lambda_a: la, lambda_kg: lk };
        prop_assert!((l_disc(&b, reg, la, &cfg).unwrap().value - common::disc(&b, reg, la)).abs() < 1e-12);
        prop_assert!((l_kg(&b, &cfg).unwrap().value - common::kg(&b)).abs() < 1e-12);
        prop_assert!((l_disc_kg(&b, reg, &w, &cfg).unwrap().value - common::disc_kg(&b, reg, la, lk)).abs() < 1e-12);
        if !b.masked.is_empty() {
            prop_assert!((l_mlm(&b, reg, la, &cfg).unwrap().value - common::mlm(&b, reg, la)).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_agrees_with_reference(seed in any::<u64>(), b in 1usize..8, d in 2usize..10, tau in 0.05f64..3.0) {
        let a = common::random_rows(seed, b, d);
        let p = common::random_rows(seed ^ 0x5555, b, d);
        let got = l_reg_encodings(&a, &p, tau, 1.0).unwrap();
        prop_assert!((got - common::reg(&a, &p, tau)).abs() < 1e-12);
        prop_assert!(got <= (b as f64).ln() / b as f64 + 1e-12);
        prop_assert_eq!(l_reg_encodings(&a, &p, tau, -1.0).unwrap(), -got);
    }

    #[test]
    fn regularizer_ignores_encoding_scale(seed in any::<u64>(), b in 1usize..6, scale in 0.1f64..10.0) {
        let a = common::random_rows(seed, b, 4);
        let p = common::random_rows(seed + 1, b, 4);
        let scaled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let x = l_reg_encodings(&a, &p, 0.5, 1.0).unwrap();
        let y = l_reg_encodings(&scaled, &p, 0.5, 1.0).unwrap();
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn zero_kg_weight_reduces_to_plain_rtd(seed in any::<u64>(), reg in -1.0f64..1.0) {
        let b = common::random_batch(seed);
        let cfg = LossConfig::default();
        let w = LossWeights { lambda_a: 0.7, lambda_kg: 0.0 };
        prop_assert_eq!(l_disc_kg(&b, reg, &w, &cfg).unwrap().value, l_disc(&b, reg, 0.7, &cfg).unwrap().value);
    }

    #[test]
    fn mean_reduction_divides_the_sum(seed in any::<u64>()) {
        let b = common::random_batch(seed);
        let sum = l_kg(&b, &LossConfig::default()).unwrap().value;
        let mean = l_kg(&b, &LossConfig { reduction: Reduction::Mean, ..Default::default() }).unwrap().value;
        prop_assert!((mean * b.x.len() as f64 - sum).abs() < 1e-9);
    }
}

#[test]
fn single_row_regularizer_is_zero() {
    for seed in 0..50 {
        let a = common::random_rows(seed, 1, 6);
        let p = common::random_rows(seed + 99, 1, 6);
        assert_eq!(l_reg_encodings(&a, &p, 0.3, 1.0).unwrap(), 0.0);
    }
}

#[test]
fn orthonormal_pair_value() {
    let e = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let v = l_reg_encodings(&e, &e, 1.0, 1.0).unwrap();
    assert!((v - common::reg_orthonormal_b2()).abs() < 1e-12);
    assert!((v - 0.189_942_7).abs() < 1e-7);
}

#[test]
fn loss_report_matches_individual_kernels() {
    let b = common::random_batch(77);
    let w = LossWeights {
        lambda_a: 0.5,
        lambda_kg: 1.5,
    };
    let r = evaluate_all(&b, 0.2, &w, &LossConfig::default()).unwrap();
    assert!((r.l_disc - common::disc(&b, 0.2, 0.5)).abs() < 1e-12);
    assert!((r.l_kg - common::kg(&b)).abs() < 1e-12);
    assert!((r.l_disc_kg - common::disc_kg(&b, 0.2, 0.5, 1.5)).abs() < 1e-12);
}

#[test]
fn single_precision_tracks_double() {
    let b = common::random_batch(5);
    let f: radkg::RtdBatchF32 = radkg::losses::RtdBatch {
        x: b.x.clone(),
        x_masked: b.x_masked.clone(),
        x_corrupt: b.x_corrupt.clone(),
        masked: b.masked.clone(),
        p_g: b.p_g.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect(),
        d: b.d.iter().map(|&v| v as f32).collect(),
        links: b.links.clone(),
    };
    let cfg = LossConfig::default();
    let lo = l_kg(&f, &cfg).unwrap().value as f64;
    let hi = l_kg(&b, &cfg).unwrap().value;
    assert!((lo - hi).abs() / hi.abs().max(1.0) < 1e-5);
}
