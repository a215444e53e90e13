//! Reference implementations written from the definitions, independent of the
//! library kernels, plus shared corpus helpers.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use radkg::annotator::Category;
use radkg::corpus::{RawReport, SectionKind};
use radkg::fixtures;
use radkg::losses::{KgLinks, PositionLink, RtdBatch};
use radkg::masking::MaskingOption;
use radkg::pipeline::MaskRecord;
use radkg::syngen::{self, Generated};
use radkg::taxonomy::Taxonomy;
use radkg::tokenizer::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `(1/B) log sum_i [exp(c_ii/tau) / sum_j exp(c_ij/tau)]`.
pub fn reg(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
    let b = a.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for j in 0..b {
            denom += (cos(&a[i], &p[j]) / tau).exp();
        }
        total += (cos(&a[i], &p[i]) / tau).exp() / denom;
    }
    total.ln() / b as f64
}

/// Value of the regularizer for two orthonormal pairs at unit temperature.
pub fn reg_orthonormal_b2() -> f64 {
    let e = std::f64::consts::E;
    0.5 * (2.0 * e / (e + 1.0)).ln()
}

pub fn mlm(b: &RtdBatch<f64>, reg: f64, lambda_a: f64) -> f64 {
    let mut nll = 0.0;
    for k in 0..b.masked.len() {
        let pos = b.masked[k];
        nll += -b.p_g[k][b.x[pos] as usize].ln();
    }
    lambda_a * reg + nll
}

fn bce(d: f64, y: bool) -> f64 {
    if y {
        -d.ln()
    } else {
        -(1.0 - d).ln()
    }
}

pub fn disc(b: &RtdBatch<f64>, reg: f64, lambda_a: f64) -> f64 {
    let mut s = 0.0;
    for t in 0..b.x.len() {
        s += bce(b.d[t], b.x[t] == b.x_corrupt[t]);
    }
    lambda_a * reg + s
}

fn related(a: &PositionLink, b: &PositionLink) -> bool {
    if a.concept == b.concept {
        return true;
    }
    a.sites.iter().any(|s| b.sites.contains(s)) || a.systems.iter().any(|s| b.systems.contains(s))
}

pub fn kg(b: &RtdBatch<f64>) -> f64 {
    let mut s = 0.0;
    for t in 0..b.x.len() {
        let mut y = b.x[t] == b.x_corrupt[t];
        if let Some(l) = &b.links {
            if let (Some(o), Some(c)) = (&l.original[t], &l.corrupt[t]) {
                y = related(o, c);
            }
        }
        s += bce(b.d[t], y);
    }
    s
}

pub fn disc_kg(b: &RtdBatch<f64>, reg: f64, lambda_a: f64, lambda_kg: f64) -> f64 {
    disc(b, reg, lambda_a) + lambda_kg * kg(b)
}

fn link<R: Rng>(r: &mut R) -> Option<PositionLink> {
    if r.random_bool(0.25) {
        return None;
    }
    let mut set = |n: u32| -> BTreeSet<String> {
        (0..r.random_range(0..3))
            .map(|_| format!("s{}", r.random_range(0..n)))
            .collect()
    };
    let sites = set(4);
    let systems = set(3);
    Some(PositionLink {
        concept: format!("c{}", r.random_range(0..5)),
        sites,
        systems,
    })
}

/// Random batch with probabilities kept away from the clamp.
pub fn random_batch(seed: u64) -> RtdBatch<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(1..24);
    let v = r.random_range(2..12u32);
    let x: Vec<u32> = (0..n).map(|_| r.random_range(0..v)).collect();
    let masked: Vec<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
    let mut x_masked = x.clone();
    let mut x_corrupt = x.clone();
    for &p in &masked {
        x_masked[p] = v;
        x_corrupt[p] = r.random_range(0..v);
    }
    let p_g = masked
        .iter()
        .map(|_| {
            let w: Vec<f64> = (0..v).map(|_| r.random_range(0.05..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let d = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
    let links = r.random_bool(0.7).then(|| KgLinks {
        original: (0..n).map(|_| link(&mut r)).collect(),
        corrupt: (0..n).map(|_| link(&mut r)).collect(),
    });
    RtdBatch {
        x,
        x_masked,
        x_corrupt,
        masked,
        p_g,
        d,
        links,
    }
}

pub fn random_rows(seed: u64, b: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Smallest `q` with `100 q >= 15 n`.
pub fn quota(n: usize) -> usize {
    (0..=n).find(|q| 100 * q >= 15 * n).unwrap()
}

pub fn licensed(opt: MaskingOption, cat: Category, sec: SectionKind) -> bool {
    use Category::*;
    use SectionKind::*;
    if cat == Symptom {
        return matches!(sec, Findings | Impressions);
    }
    match opt {
        MaskingOption::Opt1 => cat == Anatomy && matches!(sec, Clinical | Findings),
        MaskingOption::Opt2 => cat == Observation && sec == Findings,
        MaskingOption::Opt3 => cat == Anatomy && matches!(sec, Clinical | Impressions),
        MaskingOption::Opt4 => cat == Observation && sec == Impressions,
    }
}

const OPTIONS: [MaskingOption; 4] = [
    MaskingOption::Opt1,
    MaskingOption::Opt2,
    MaskingOption::Opt3,
    MaskingOption::Opt4,
];

/// Options whose licensed entity tokens reach the quota.
pub fn qualifying(rec: &MaskRecord) -> Vec<MaskingOption> {
    let q = quota(rec.example.ids.len());
    OPTIONS
        .into_iter()
        .filter(|&o| {
            let c: usize = rec
                .spans
                .iter()
                .filter(|s| licensed(o, s.category, s.section))
                .map(|s| s.end - s.start)
                .sum();
            c >= q
        })
        .collect()
}

/// Every violated masking property of one knowledge-aware record.
pub fn mask_violations(rec: &MaskRecord, vocab: &Vocabulary) -> Vec<String> {
    let ex = &rec.example;
    let n = ex.ids.len();
    let mut out = Vec::new();
    let mut original = ex.ids.clone();
    for (k, &p) in ex.masks.iter().enumerate() {
        original[p] = ex.labels[k];
    }
    if ex.masks.len() < quota(n) {
        out.push(format!("{} masks for {n} tokens", ex.masks.len()));
    }
    for &p in &ex.masks {
        if vocab.is_special(original[p]) {
            out.push(format!("special token masked at {p}"));
        }
    }
    let Some(opt) = ex.option else {
        return out;
    };
    let mut cats = BTreeSet::new();
    for &p in &ex.masks {
        let covering: Vec<_> = rec.spans.iter().filter(|s| s.start <= p && p < s.end).collect();
        if covering.is_empty() {
            continue;
        }
        match covering.iter().find(|s| licensed(opt, s.category, s.section)) {
            Some(s) => {
                cats.insert(s.category);
            }
            None => out.push(format!("position {p} masked outside {opt}")),
        }
    }
    if cats.contains(&Category::Anatomy) && cats.contains(&Category::Observation) {
        out.push("both anatomy and observation masked".into());
    }
    let qual = qualifying(rec);
    if !qual.is_empty() && !qual.contains(&opt) {
        out.push(format!("{opt} chosen but {qual:?} qualify"));
    }
    out
}

pub fn corpus(n: usize, seed: u64) -> (Taxonomy, Vec<Generated>, Vec<RawReport>) {
    let tax = fixtures::taxonomy();
    let generated = syngen::generate(n, &tax, &fixtures::templates(), &fixtures::header_patterns(), seed).unwrap();
    let raws = generated.iter().map(|g| g.report.clone()).collect();
    (tax, generated, raws)
}

/// Lowercased taxonomy labels and synonyms.
pub fn surfaces(tax: &Taxonomy) -> BTreeSet<String> {
    tax.concepts()
        .flat_map(|c| std::iter::once(&c.preferred_label).chain(&c.synonyms))
        .map(|s| s.trim().to_lowercase())
        .collect()
}
