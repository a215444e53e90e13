//! The invariant suite behind the `verify` subcommand: loss kernels against
//! naive loops, gradient checks, masking, vocabulary and annotator checks on a
//! seeded synthetic corpus. The report carries no timings, so two runs with
//! the same options serialize identically.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SectionKind;
use crate::fixtures;
use crate::losses::{
    self, disc_logit_grad, grad_check, kg_logit_grad, l_reg_grad, mlm_logit_grad, KgLinks, LossConfig, LossWeights,
    PositionLink, RtdBatch,
};
use crate::masking::{check_example, Objective};
use crate::pipeline::{self, MaskRecord};
use crate::scalar::softmax;
use crate::syngen;
use crate::tokenizer::{Provenance, Vocabulary};
use crate::toymodel::{Corruption, ElectraPair, EncoderConfig, SeqExample, StepInput, TrainConfig};

pub const ORACLE_TOL: f64 = 1e-12;
pub const KERNEL_GRAD_TOL: f64 = 1e-4;
pub const STEP_GRAD_TOL: f64 = 1e-3;
pub const CLOSURE_MIN: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random batches per kernel in the oracle comparison.
    pub trials: usize,
    /// Synthetic reports for the corpus-level checks.
    pub reports: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            reports: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn gaussian_rows<R: Rng>(r: &mut R, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn random_link<R: Rng>(r: &mut R) -> Option<PositionLink> {
    if r.random_bool(0.3) {
        return None;
    }
    let pick = |r: &mut R, n: usize| -> BTreeSet<String> {
        (0..r.random_range(0..3))
            .map(|_| format!("S{}", r.random_range(0..n)))
            .collect()
    };
    Some(PositionLink {
        concept: format!("C{}", r.random_range(0..4)),
        sites: pick(r, 5),
        systems: pick(r, 3),
    })
}

/// A random, valid replaced-token-detection batch away from the clamps.
pub fn random_rtd<R: Rng>(r: &mut R) -> RtdBatch<f64> {
    let n = r.random_range(2..24);
    let v = r.random_range(3..12);
    let x: Vec<u32> = (0..n).map(|_| r.random_range(0..v as u32)).collect();
    let masked: Vec<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
    let mut x_corrupt = x.clone();
    let mut x_masked = x.clone();
    for &p in &masked {
        x_masked[p] = v as u32;
        x_corrupt[p] = r.random_range(0..v as u32);
    }
    let p_g = masked
        .iter()
        .map(|_| {
            let logits: Vec<f64> = (0..v).map(|_| r.random_range(-3.0..3.0)).collect();
            softmax(&logits)
        })
        .collect();
    let d = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
    let links = KgLinks {
        original: (0..n).map(|_| random_link(r)).collect(),
        corrupt: (0..n).map(|_| random_link(r)).collect(),
    };
    RtdBatch {
        x,
        x_masked,
        x_corrupt,
        masked,
        p_g,
        d,
        links: Some(links),
    }
}

#[allow(clippy::needless_range_loop)]
mod naive {
    use super::*;

    pub fn reg(a: &[Vec<f64>], p: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |u: &[f64], w: &[f64]| {
            let mut uw = 0.0;
            let mut uu = 0.0;
            let mut ww = 0.0;
            for k in 0..u.len() {
                uw += u[k] * w[k];
                uu += u[k] * u[k];
                ww += w[k] * w[k];
            }
            uw / (uu.sqrt() * ww.sqrt())
        };
        let b = a.len();
        let mut total = 0.0;
        for i in 0..b {
            let mut den = 0.0;
            for j in 0..b {
                den += (cos(&a[i], &p[j]) / tau).exp();
            }
            total += (cos(&a[i], &p[i]) / tau).exp() / den;
        }
        total.ln() / b as f64
    }

    pub fn mlm(batch: &RtdBatch<f64>) -> f64 {
        let mut s = 0.0;
        for k in 0..batch.masked.len() {
            s -= batch.p_g[k][batch.x[batch.masked[k]] as usize].ln();
        }
        s
    }

    pub fn disc(batch: &RtdBatch<f64>) -> f64 {
        let mut s = 0.0;
        for t in 0..batch.x.len() {
            s -= if batch.x_corrupt[t] == batch.x[t] {
                batch.d[t].ln()
            } else {
                (1.0 - batch.d[t]).ln()
            };
        }
        s
    }

    pub fn kg(batch: &RtdBatch<f64>) -> f64 {
        let links = batch.links.as_ref().expect("links");
        let mut s = 0.0;
        for t in 0..batch.x.len() {
            let real = match (&links.original[t], &links.corrupt[t]) {
                (Some(a), Some(c)) => {
                    a.concept == c.concept
                        || a.sites.iter().any(|x| c.sites.contains(x))
                        || a.systems.iter().any(|x| c.systems.contains(x))
                }
                _ => batch.x_corrupt[t] == batch.x[t],
            };
            s -= if real { batch.d[t].ln() } else { (1.0 - batch.d[t]).ln() };
        }
        s
    }
}

fn check_oracles(opts: &VerifyOptions) -> Vec<Check> {
    let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = LossConfig::default();
    let weights = LossWeights::default();
    let mut dev = [0.0f64; 5];
    for _ in 0..opts.trials {
        let b = r.random_range(1..9);
        let d = r.random_range(2..10);
        let a = gaussian_rows(&mut r, b, d);
        let p = gaussian_rows(&mut r, b, d);
        let tau = r.random_range(0.2..2.0);
        let reg = losses::l_reg_encodings(&a, &p, tau, 1.0).expect("nonzero rows");
        dev[0] = dev[0].max((reg - naive::reg(&a, &p, tau)).abs());
        let batch = random_rtd(&mut r);
        if !batch.masked.is_empty() {
            let v = losses::l_mlm(&batch, 0.0, 1.0, &cfg).expect("valid").value;
            dev[1] = dev[1].max((v - naive::mlm(&batch)).abs());
        }
        let disc = losses::l_disc(&batch, 0.0, 1.0, &cfg).expect("valid").value;
        dev[2] = dev[2].max((disc - naive::disc(&batch)).abs());
        let kg = losses::l_kg(&batch, &cfg).expect("valid").value;
        dev[3] = dev[3].max((kg - naive::kg(&batch)).abs());
        let both = losses::l_disc_kg(&batch, 0.0, &weights, &cfg).expect("valid").value;
        dev[4] = dev[4].max((both - naive::disc(&batch) - naive::kg(&batch)).abs());
    }
    ["l_reg", "l_mlm", "l_disc", "l_kg", "l_disc_kg"]
        .iter()
        .zip(dev)
        .map(|(name, d)| {
            Check::new(
                &format!("oracle.{name}"),
                d <= ORACLE_TOL,
                format!("max deviation {d:.3e} over {} batches", opts.trials),
            )
        })
        .collect()
}

fn check_reg_values() -> Check {
    let cfg = LossConfig::default();
    let single = losses::l_reg(
        &losses::EncodingBatch::single(vec![vec![0.3, -1.2, 2.0]], vec![vec![1.0, 0.5, 0.1]], 0.7),
        0,
        &cfg,
    );
    let e = std::f64::consts::E;
    let expected = 0.5 * (2.0 * e / (e + 1.0)).ln();
    let two = losses::l_reg_encodings(
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        1.0,
        1.0,
    );
    let ok1 = matches!(single, Ok(v) if v == 0.0);
    let ok2 = matches!(two, Ok(v) if (v - expected).abs() < 1e-9);
    Check::new(
        "oracle.l_reg_closed_forms",
        ok1 && ok2,
        format!("B=1 -> {single:?}; B=2 orthonormal -> {two:?} (expected {expected:.10})"),
    )
}

fn check_kernel_grads(seed: u64) -> Vec<Check> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = [0.0f64; 4];
    for _ in 0..5 {
        let a = gaussian_rows(&mut r, 4, 8);
        let p = gaussian_rows(&mut r, 4, 8);
        for sign in [1.0, -1.0] {
            let (_, g) = l_reg_grad(&a, &p, 0.5, sign).expect("nonzero rows");
            let flat: Vec<f64> = a.iter().flatten().copied().collect();
            let analytic: Vec<f64> = g.into_iter().flatten().collect();
            let err = grad_check(
                |x| {
                    let rows: Vec<Vec<f64>> = x.chunks(8).map(<[f64]>::to_vec).collect();
                    losses::l_reg_encodings(&rows, &p, 0.5, sign).expect("nonzero rows")
                },
                &flat,
                &analytic,
                1e-5,
            );
            worst[0] = worst[0].max(err);
        }
        let n = 12;
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let td: Vec<f64> = (0..n).map(|_| r.random_bool(0.5) as u8 as f64).collect();
        let tk: Vec<f64> = (0..n).map(|_| r.random_bool(0.5) as u8 as f64).collect();
        let (_, g) = disc_logit_grad(&logits, &td);
        worst[1] = worst[1].max(grad_check(|x| disc_logit_grad(x, &td).0, &logits, &g, 1e-5));
        let (_, g) = kg_logit_grad(&logits, &td, &tk, 1.0);
        worst[2] = worst[2].max(grad_check(|x| kg_logit_grad(x, &td, &tk, 1.0).0, &logits, &g, 1e-5));
        let rows: Vec<Vec<f64>> = gaussian_rows(&mut r, 3, 7);
        let targets: Vec<u32> = (0..3).map(|_| r.random_range(0..7)).collect();
        let (_, g) = mlm_logit_grad(&rows, &targets);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let analytic: Vec<f64> = g.into_iter().flatten().collect();
        let err = grad_check(
            |x| mlm_logit_grad(&x.chunks(7).map(<[f64]>::to_vec).collect::<Vec<_>>(), &targets).0,
            &flat,
            &analytic,
            1e-5,
        );
        worst[3] = worst[3].max(err);
    }
    ["l_reg", "l_disc", "l_disc_kg", "l_mlm"]
        .iter()
        .zip(worst)
        .map(|(name, e)| {
            Check::new(
                &format!("grad.{name}"),
                e < KERNEL_GRAD_TOL,
                format!("max relative error {e:.3e}"),
            )
        })
        .collect()
}

/// A small pair whose weights are dense and order one, so that every
/// gradient entry sits well above finite-difference noise.
fn probe_pair(seed: u64, vocab_size: usize) -> ElectraPair<f64> {
    let cfg = EncoderConfig {
        vocab_size,
        d_model: 6,
        d_ff: 8,
        max_len: 12,
    };
    let mut pair = ElectraPair::new(cfg, seed);
    for (e, enc) in [&mut pair.generator, &mut pair.discriminator].into_iter().enumerate() {
        for (i, t) in enc.params.iter_mut().enumerate() {
            for (k, x) in t.data.iter_mut().enumerate() {
                *x = 0.4 * (1.3 * k as f64 + 0.7 * i as f64 + 0.31 * e as f64 + seed as f64).sin();
            }
        }
    }
    pair
}

fn flatten(pair: &ElectraPair<f64>) -> Vec<f64> {
    pair.generator
        .params
        .iter()
        .chain(&pair.discriminator.params)
        .flat_map(|t| t.data.iter().copied())
        .collect()
}

fn unflatten(pair: &ElectraPair<f64>, x: &[f64]) -> ElectraPair<f64> {
    let mut out = pair.clone();
    let mut off = 0;
    for t in out
        .generator
        .params
        .iter_mut()
        .chain(out.discriminator.params.iter_mut())
    {
        let n = t.len();
        t.data.copy_from_slice(&x[off..off + n]);
        off += n;
    }
    out
}

/// Largest relative error between the analytic gradient of one full training
/// step and central differences, over every parameter of both encoders.
pub fn train_step_grad_error(objective: Objective, batch: usize, seed: u64) -> f64 {
    let vocab_size = 14;
    let pair = probe_pair(seed, vocab_size);
    let cfg = TrainConfig {
        objective,
        d_model: 6,
        d_ff: 8,
        max_len: 12,
        ..Default::default()
    };
    let site = |c: &str, s: &str| PositionLink {
        concept: c.into(),
        sites: [s.to_string()].into(),
        systems: BTreeSet::new(),
    };
    let mut token_links = std::collections::BTreeMap::new();
    token_links.insert(9u32, site("C9", "lung"));
    token_links.insert(10u32, site("C10", "brain"));
    let examples: Vec<SeqExample> = (0..batch)
        .map(|b| {
            let ids: Vec<u32> = vec![2, 5 + b as u32, 7, 9, 6, 8, 3];
            let mut links = vec![None; ids.len()];
            links[3] = Some(site("C3", "lung"));
            SeqExample {
                report_id: format!("g{b}"),
                chunk_idx: 0,
                section: SectionKind::Findings,
                base_ids: ids.clone(),
                sentence_ranges: vec![(1, 4), (4, 6)],
                ids,
                spans: Vec::new(),
                links,
            }
        })
        .collect();
    let corrupt: Vec<Vec<u32>> = (0..batch).map(|b| vec![2, 5 + b as u32, 11, 10, 6, 8, 3]).collect();
    let h_p: Vec<Vec<f64>> = (0..batch)
        .map(|b| (0..6).map(|k| ((k + b) as f64 * 0.9).cos()).collect())
        .collect();
    let inputs: Vec<StepInput> = examples
        .iter()
        .enumerate()
        .map(|(b, ex)| StepInput {
            example: ex,
            masked: (objective != Objective::Ss).then(|| {
                let mut ids = ex.ids.clone();
                ids[2] = 4;
                ids[3] = 4;
                crate::masking::MaskedExample {
                    ids,
                    masks: vec![2, 3],
                    labels: vec![ex.ids[2], ex.ids[3]],
                    option: None,
                    sections: vec![ex.section],
                    seed: 0,
                }
            }),
            corruption: Corruption::Fixed(&corrupt[b]),
            h_p: (&h_p[b], &h_p[(b + 1) % batch]),
        })
        .collect();
    let out = crate::toymodel::step_loss(&pair, &cfg, &token_links, &inputs);
    let analytic: Vec<f64> = out.gen_grads.into_iter().chain(out.disc_grads).flatten().collect();
    grad_check(
        |x| {
            crate::toymodel::step_loss(&unflatten(&pair, x), &cfg, &token_links, &inputs)
                .losses
                .total
        },
        &flatten(&pair),
        &analytic,
        1e-5,
    )
}

fn check_step_grads(seed: u64) -> Vec<Check> {
    [Objective::Mlm, Objective::Kg, Objective::Ss]
        .into_iter()
        .flat_map(|o| {
            [1, 2].into_iter().map(move |b| {
                let e = train_step_grad_error(o, b, seed % 97);
                Check::new(
                    &format!("grad.train_step.{o}.b{b}"),
                    e < STEP_GRAD_TOL,
                    format!("max relative error {e:.3e}"),
                )
            })
        })
        .collect()
}

/// Re-validates a `mask` dump: quota, option licensing, special-token
/// exclusion and anatomy/observation exclusivity for every record.
pub fn check_mask_records(records: &[MaskRecord], vocab: &Vocabulary, name: &str) -> Check {
    let mut failures = Vec::new();
    for r in records {
        let original = r.example.original_ids();
        for v in check_example(&r.example, &original, &r.spans, vocab) {
            failures.push(format!("{}#{}: {v}", r.report_id, r.chunk_idx));
        }
    }
    let detail = match failures.first() {
        None => format!("{} examples compliant", records.len()),
        Some(first) => format!(
            "{} violations in {} examples; first: {first}",
            failures.len(),
            records.len()
        ),
    };
    Check::new(name, failures.is_empty(), detail)
}

fn check_corpus(opts: &VerifyOptions) -> Vec<Check> {
    let mut checks = Vec::new();
    let tax = fixtures::taxonomy();
    let rules = fixtures::clean_rules();
    let headers = fixtures::header_patterns();
    let base = fixtures::base_vocab();
    let generated = match syngen::generate(opts.reports, &tax, &fixtures::templates(), &headers, opts.seed) {
        Ok(g) => g,
        Err(e) => return vec![Check::new("corpus.generate", false, e.to_string())],
    };
    let raws: Vec<_> = generated.iter().map(|g| g.report.clone()).collect();
    let sectioned = pipeline::preprocess(&raws, &rules, &headers);
    let partition = sectioned.iter().filter(|s| !s.partition_holds()).count();
    checks.push(Check::new(
        "corpus.section_partition",
        partition == 0,
        format!("{partition} of {} reports fail to tile", sectioned.len()),
    ));
    let label_match = sectioned
        .iter()
        .zip(&generated)
        .filter(|(s, g)| s.sections != g.gold.sections)
        .count();
    checks.push(Check::new(
        "corpus.section_labels",
        label_match == 0,
        format!("{label_match} reports whose sections differ from gold"),
    ));

    let vocab = match pipeline::build_vocabulary(&sectioned, &base, &tax, base.len() + 200) {
        Ok(v) => v,
        Err(e) => {
            checks.push(Check::new("vocab.extension", false, e.to_string()));
            return checks;
        }
    };
    let base_kept = base.tokens().iter().zip(vocab.tokens()).all(|(a, b)| a == b);
    let gated = (base.len()..vocab.len())
        .map(|i| i as u32)
        .filter(|&i| vocab.provenance(i) == Provenance::New)
        .all(|i| tax.contains_surface(crate::tokenizer::strip_prefix(vocab.token(i).unwrap_or(""))));
    checks.push(Check::new(
        "vocab.extension",
        base_kept && gated,
        format!(
            "{} tokens added; base ids preserved: {base_kept}; taxonomy gate holds: {gated}",
            vocab.len() - base.len()
        ),
    ));

    match pipeline::encode(&sectioned, &vocab, crate::corpus::DEFAULT_BUDGET) {
        Ok(chunks) => {
            let ann = pipeline::annotate_all(&chunks, &tax);
            for (objective, name) in [(Objective::Kg, "masking.kg"), (Objective::Mlm, "masking.random")] {
                let (records, errors) = pipeline::mask_records(&chunks, &ann, objective, &vocab, opts.seed);
                let mut c = check_mask_records(&records, &vocab, name);
                if !errors.is_empty() {
                    c.detail.push_str(&format!("; {} chunks not maskable", errors.len()));
                }
                checks.push(c);
            }
            let again = pipeline::mask_records(&chunks, &ann, Objective::Kg, &vocab, opts.seed).0;
            let first = pipeline::mask_records(&chunks, &ann, Objective::Kg, &vocab, opts.seed).0;
            checks.push(Check::new(
                "masking.deterministic",
                again == first,
                format!("{} records", first.len()),
            ));
        }
        Err(e) => checks.push(Check::new("masking.kg", false, e.to_string())),
    }

    match pipeline::annotator_closure(&generated, &rules, &headers, &vocab, &tax) {
        Ok(c) => checks.push(Check::new(
            "annotator.closure",
            c.rate() >= CLOSURE_MIN,
            format!(
                "{} of {} gold entities recovered ({:.4})",
                c.recovered,
                c.gold,
                c.rate()
            ),
        )),
        Err(e) => checks.push(Check::new("annotator.closure", false, e.to_string())),
    }
    checks
}

pub fn run(opts: &VerifyOptions) -> VerifyReport {
    let mut checks = check_oracles(opts);
    checks.push(check_reg_values());
    checks.extend(check_kernel_grads(opts.seed));
    checks.extend(check_step_grads(opts.seed));
    checks.extend(check_corpus(opts));
    VerifyReport { options: *opts, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_repeats() {
        let opts = VerifyOptions {
            seed: 3,
            trials: 50,
            reports: 30,
        };
        let a = run(&opts);
        if let Some(c) = a.failures().next() {
            panic!("{}: {}", c.name, c.detail);
        }
        assert_eq!(a.to_json(), run(&opts).to_json());
    }
}
