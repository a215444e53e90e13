use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{self, CheckpointError};
use super::encoder::{sample_corrupt, Cache, ElectraPair, EncoderConfig, Grads, TinyEncoder};
use super::metrics::{accuracy, roc_auc};
use super::optim::{lr_factor, AdamW, AdamWConfig, Schedule};
use crate::annotator::EntitySpan;
use crate::corpus::SectionKind;
use crate::losses::{disc_logit_grad, l_reg_grad, mlm_logit_grad, LossWeights, PositionLink};
use crate::masking::{mask_kg, mask_random, seed_for, select_option, MaskedExample, Objective};
use crate::scalar::softmax;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingStrategy {
    Random,
    Kg,
}

impl std::str::FromStr for MaskingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(MaskingStrategy::Random),
            "kg" => Ok(MaskingStrategy::Kg),
            other => Err(format!("unknown masking strategy `{other}` (random|kg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Defaults to `kg` for the kg objective and `random` otherwise.
    pub masking: Option<MaskingStrategy>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub run_seed: u64,
    pub weights: LossWeights,
    pub reg_sign: f64,
    pub tau: f64,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Periodic checkpoint interval in steps; `0` writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mlm,
            masking: None,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            schedule: Schedule::Polynomial,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            run_seed: 0,
            weights: LossWeights::default(),
            reg_sign: 1.0,
            tau: 0.5,
            d_model: 32,
            d_ff: 64,
            max_len: 128,
            eval_every: 200,
            patience: 3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn masking_strategy(&self) -> MaskingStrategy {
        self.masking.unwrap_or(match self.objective {
            Objective::Kg => MaskingStrategy::Kg,
            _ => MaskingStrategy::Random,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("steps, batch_size, eval_every and patience must be positive");
        }
        if !(self.lr > 0.0 && self.tau > 0.0) {
            return bad("lr and tau must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 {
            return bad("warmup_frac must lie in [0, 1) and weight_decay must be non-negative");
        }
        if !(self.weights.lambda_a >= 0.0 && self.weights.lambda_kg >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.d_model == 0 || self.d_model > 64 || self.d_ff == 0 || self.max_len == 0 || self.max_len > 128 {
            return bad("d_model must lie in 1..=64, max_len in 1..=128, d_ff positive");
        }
        Ok(())
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }
}

/// One training sequence: an encoded chunk with its annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqExample {
    pub report_id: String,
    pub chunk_idx: usize,
    pub section: SectionKind,
    pub ids: Vec<u32>,
    /// The same text under the base vocabulary, wrapped and cut to the context.
    pub base_ids: Vec<u32>,
    pub sentence_ranges: Vec<(usize, usize)>,
    pub spans: Vec<EntitySpan>,
    /// Concept link of the token at each position.
    pub links: Vec<Option<PositionLink>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainData {
    pub train: Vec<SeqExample>,
    pub heldout: Vec<SeqExample>,
    /// Links of single tokens that spell a whole taxonomy surface.
    pub token_links: BTreeMap<u32, PositionLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub gen: Option<f64>,
    pub disc: Option<f64>,
    pub kg: Option<f64>,
    pub sec: Option<f64>,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub rtd_auc: Option<f64>,
    pub section_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub param_count: usize,
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub skipped_examples: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub best_step: usize,
    pub curve: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub rtd_auc: Option<f64>,
    pub section_accuracy: Option<f64>,
    pub checkpoints: Vec<String>,
}

impl TrainReport {
    pub fn disc_curve(&self) -> Vec<Option<f64>> {
        self.curve.iter().map(|r| r.disc).collect()
    }
}

/// The offending batch of a non-finite step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NanDump {
    pub step: usize,
    pub record: StepRecord,
    pub examples: Vec<DumpedExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpedExample {
    pub report_id: String,
    pub chunk_idx: usize,
    pub ids: Vec<u32>,
    pub x_masked: Vec<u32>,
    pub x_corrupt: Vec<u32>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no usable training examples")]
    NoData,
    #[error("non-finite loss at step {step}{}", .dump_path.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        dump: Box<NanDump>,
        dump_path: Option<PathBuf>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: ElectraPair<f64>,
}

/// Source of the discriminator input.
#[derive(Debug, Clone, Copy)]
pub enum Corruption<'a> {
    /// Draw from the generator with this seed.
    Sample(u64),
    Fixed(&'a [u32]),
}

/// Everything one example contributes to a step.
#[derive(Debug, Clone)]
pub struct StepInput<'a> {
    pub example: &'a SeqExample,
    /// `None` for the section objective.
    pub masked: Option<MaskedExample>,
    pub corruption: Corruption<'a>,
    /// Frozen general-encoder sentence encodings (generator, discriminator).
    pub h_p: (&'a [f64], &'a [f64]),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub gen: Option<f64>,
    pub disc: Option<f64>,
    pub kg: Option<f64>,
    pub sec: Option<f64>,
    pub reg: f64,
    pub total: f64,
}

pub struct StepOutput {
    pub losses: StepLosses,
    pub gen_grads: Grads<f64>,
    pub disc_grads: Grads<f64>,
    pub x_corrupt: Vec<Vec<u32>>,
    /// Discriminator probabilities that each token is original.
    pub d: Vec<Vec<f64>>,
}

struct GenPass {
    cache: Cache<f64>,
    positions: Vec<usize>,
    dlogits: Vec<Vec<f64>>,
    value: f64,
}

struct DiscPass {
    cache: Cache<f64>,
    dlogits: Vec<f64>,
    sections: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

fn add_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v);
    }
}

fn link_of<'a>(
    data_links: &'a BTreeMap<u32, PositionLink>,
    ex: &'a SeqExample,
    pos: usize,
    token: u32,
) -> Option<&'a PositionLink> {
    if token == ex.ids[pos] {
        ex.links[pos].as_ref()
    } else {
        data_links.get(&token)
    }
}

/// Loss and parameter gradients of one step over `inputs`. Per-example
/// losses are averaged; the regularizer couples the batch.
pub fn step_loss(
    pair: &ElectraPair<f64>,
    cfg: &TrainConfig,
    token_links: &BTreeMap<u32, PositionLink>,
    inputs: &[StepInput<'_>],
) -> StepOutput {
    let b = inputs.len();
    let inv_b = 1.0 / b as f64;
    let lambda_kg = cfg.weights.lambda_kg;
    let lambda_a = cfg.weights.lambda_a;
    let rtd = cfg.objective != Objective::Ss;
    let mut losses = StepLosses::default();
    let mut gens = Vec::with_capacity(b);
    let mut discs = Vec::with_capacity(b);
    let mut corrupts = Vec::with_capacity(b);
    let mut ds = Vec::with_capacity(b);

    for inp in inputs {
        let ex = inp.example;
        let (gen, x_corrupt) = match (&inp.masked, rtd) {
            (Some(m), true) => {
                let g = &pair.generator;
                let cache = g.encode(&m.ids);
                let logits = g.gen_logits(&cache.h, &m.masks);
                let (value, mut dlogits) = mlm_logit_grad(&logits, &m.labels);
                dlogits.iter_mut().flatten().for_each(|v| *v *= inv_b);
                let x_corrupt = match inp.corruption {
                    Corruption::Fixed(x) => x.to_vec(),
                    Corruption::Sample(seed) => {
                        let p_g: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
                        sample_corrupt(&p_g, &ex.ids, &m.masks, seed)
                    }
                };
                let pass = GenPass {
                    cache,
                    positions: m.masks.clone(),
                    dlogits,
                    value,
                };
                (Some(pass), x_corrupt)
            }
            _ => (None, ex.ids.clone()),
        };
        let d_enc = &pair.discriminator;
        let cache = d_enc.encode(&x_corrupt);
        let mut parts = StepLosses::default();
        let mut dlogits = vec![0.0; x_corrupt.len()];
        let mut sections = Vec::new();
        if rtd {
            let y = d_enc.disc_logits(&cache.h);
            ds.push(y.iter().map(|&v| crate::scalar::sigmoid(v)).collect());
            let td: Vec<f64> = ex
                .ids
                .iter()
                .zip(&x_corrupt)
                .map(|(a, b)| (a == b) as u8 as f64)
                .collect();
            let (vd, gd) = disc_logit_grad(&y, &td);
            parts.disc = Some(vd);
            dlogits = gd;
            if cfg.objective == Objective::Kg {
                let tk: Vec<f64> = (0..td.len())
                    .map(
                        |i| match (ex.links[i].as_ref(), link_of(token_links, ex, i, x_corrupt[i])) {
                            (Some(a), Some(c)) => c.related(a) as u8 as f64,
                            _ => td[i],
                        },
                    )
                    .collect();
                let (vk, gk) = disc_logit_grad(&y, &tk);
                parts.kg = Some(vk);
                if lambda_kg != 0.0 {
                    dlogits.iter_mut().zip(&gk).for_each(|(a, &g)| *a += lambda_kg * g);
                }
            }
            dlogits.iter_mut().for_each(|v| *v *= inv_b);
        } else {
            ds.push(Vec::new());
            let mut total = 0.0;
            for &(s, e) in &ex.sentence_ranges {
                if e <= s {
                    continue;
                }
                let pooled = d_enc.pool(&cache.h, s, e);
                let z = d_enc.section_logits(&pooled);
                let (v, mut dz) = mlm_logit_grad(&[z], &[ex.section.index() as u32]);
                total += v;
                let dz = dz.pop().expect("one row").into_iter().map(|g| g * inv_b).collect();
                sections.push((s, e, pooled, dz));
            }
            parts.sec = Some(total);
        }
        parts.gen = gen.as_ref().map(|g| g.value);
        add_opt(&mut losses.gen, parts.gen);
        add_opt(&mut losses.disc, parts.disc);
        add_opt(&mut losses.kg, parts.kg);
        add_opt(&mut losses.sec, parts.sec);
        gens.push(gen);
        discs.push(DiscPass {
            cache,
            dlogits,
            sections,
        });
        corrupts.push(x_corrupt);
    }

    let mut gen_grads = pair.generator.zero_grads();
    let mut disc_grads = pair.discriminator.zero_grads();
    let mut reg_total = 0.0;

    // regularizer on sentence encodings; B=1 contributes exactly zero
    let d_reg = |enc: &TinyEncoder<f64>, caches: Vec<&Cache<f64>>, h_p: Vec<&[f64]>| {
        let a: Vec<Vec<f64>> = caches.iter().map(|c| enc.pool(&c.h, 0, c.len())).collect();
        let p: Vec<Vec<f64>> = h_p.iter().map(|v| v.to_vec()).collect();
        match l_reg_grad(&a, &p, cfg.tau, cfg.reg_sign) {
            Ok((v, g)) => (v, g),
            Err(e) => {
                warn!("regularizer skipped: {e}");
                (0.0, vec![vec![0.0; enc.cfg.d_model]; a.len()])
            }
        }
    };
    let mut reg_gen_grad = None;
    if lambda_a != 0.0 && rtd && gens.iter().all(Option::is_some) {
        let caches = gens.iter().map(|g| &g.as_ref().expect("checked").cache).collect();
        let (v, g) = d_reg(&pair.generator, caches, inputs.iter().map(|i| i.h_p.0).collect());
        reg_total += v;
        reg_gen_grad = Some(g);
    }
    let mut reg_disc_grad = None;
    if lambda_a != 0.0 {
        let (v, g) = d_reg(
            &pair.discriminator,
            discs.iter().map(|d| &d.cache).collect(),
            inputs.iter().map(|i| i.h_p.1).collect(),
        );
        reg_total += v;
        reg_disc_grad = Some(g);
    }

    for (i, gen) in gens.iter().enumerate() {
        let Some(gp) = gen else { continue };
        let g = &pair.generator;
        let mut dh = vec![0.0; gp.cache.h.len()];
        g.gen_backward(&gp.cache.h, &gp.positions, &gp.dlogits, &mut dh, &mut gen_grads);
        if let Some(rg) = &reg_gen_grad {
            let scaled: Vec<f64> = rg[i].iter().map(|v| v * lambda_a).collect();
            g.pool_backward(&scaled, 0, gp.cache.len(), &mut dh);
        }
        g.backward(&gp.cache, &dh, &mut gen_grads);
    }
    for (i, dp) in discs.iter().enumerate() {
        let d = &pair.discriminator;
        let mut dh = vec![0.0; dp.cache.h.len()];
        if rtd {
            d.disc_backward(&dp.cache.h, &dp.dlogits, &mut dh, &mut disc_grads);
        }
        for (s, e, pooled, dz) in &dp.sections {
            let dpool = d.section_backward(pooled, dz, &mut disc_grads);
            d.pool_backward(&dpool, *s, *e, &mut dh);
        }
        if let Some(rg) = &reg_disc_grad {
            let scaled: Vec<f64> = rg[i].iter().map(|v| v * lambda_a).collect();
            d.pool_backward(&scaled, 0, dp.cache.len(), &mut dh);
        }
        d.backward(&dp.cache, &dh, &mut disc_grads);
    }

    for v in [&mut losses.gen, &mut losses.disc, &mut losses.kg, &mut losses.sec]
        .into_iter()
        .flatten()
    {
        *v *= inv_b;
    }
    losses.reg = reg_total;
    losses.total = losses.gen.unwrap_or(0.0)
        + losses.disc.unwrap_or(0.0)
        + lambda_kg * losses.kg.unwrap_or(0.0)
        + losses.sec.unwrap_or(0.0)
        + lambda_a * reg_total;
    StepOutput {
        losses,
        gen_grads,
        disc_grads,
        x_corrupt: corrupts,
        d: ds,
    }
}

/// Masks one example. KG masking covers chunks of entity-bearing sections and
/// falls back to random masking when the quota cannot be met.
pub fn mask_example(
    ex: &SeqExample,
    strategy: MaskingStrategy,
    vocab: &Vocabulary,
    seed: u64,
) -> Option<MaskedExample> {
    if strategy == MaskingStrategy::Kg && ex.section.carries_entities() {
        let (option, qualified) = select_option(&ex.spans, ex.ids.len(), seed);
        match mask_kg(&ex.ids, &ex.spans, option, qualified, vocab, seed) {
            Ok(m) => return Some(m),
            Err(e) => debug!("{}#{}: {e}; masking at random", ex.report_id, ex.chunk_idx),
        }
    }
    mask_random(&ex.ids, vocab, seed).ok()
}

fn example_seed(cfg: &TrainConfig, ex: &SeqExample) -> u64 {
    seed_for(cfg.run_seed, &ex.report_id, ex.chunk_idx)
}

/// Mean-pooled encodings of the frozen initial encoders on base-vocabulary input.
fn general_encodings(pair: &ElectraPair<f64>, examples: &[&SeqExample]) -> Vec<(Vec<f64>, Vec<f64>)> {
    examples
        .iter()
        .map(|ex| {
            let mut out = Vec::with_capacity(2);
            for enc in [&pair.generator, &pair.discriminator] {
                let c = enc.encode(&ex.base_ids);
                out.push(enc.pool(&c.h, 0, c.len()));
            }
            let d = out.pop().expect("two");
            (out.pop().expect("two"), d)
        })
        .collect()
}

struct Evaluation {
    loss: f64,
    auc: Option<f64>,
    accuracy: Option<f64>,
}

fn evaluate(
    pair: &ElectraPair<f64>,
    cfg: &TrainConfig,
    data: &TrainData,
    heldout: &[&SeqExample],
    vocab: &Vocabulary,
) -> Evaluation {
    let mut eval_cfg = cfg.clone();
    eval_cfg.weights.lambda_a = 0.0;
    let strategy = cfg.masking_strategy();
    let zero = vec![0.0; cfg.d_model];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    for ex in heldout {
        let seed = seed_for(example_seed(cfg, ex), "eval", 0);
        let masked = if cfg.objective == Objective::Ss {
            None
        } else {
            match mask_example(ex, strategy, vocab, seed) {
                Some(m) => Some(m),
                None => continue,
            }
        };
        let input = StepInput {
            example: ex,
            masked,
            corruption: Corruption::Sample(seed_for(seed, "corrupt", 0)),
            h_p: (&zero, &zero),
        };
        let out = step_loss(pair, &eval_cfg, &data.token_links, std::slice::from_ref(&input));
        total += out.losses.total;
        count += 1;
        if cfg.objective == Objective::Ss {
            let c = pair.discriminator.encode(&ex.ids);
            for &(s, e) in &ex.sentence_ranges {
                if e > s {
                    let z = pair.discriminator.section_logits(&pair.discriminator.pool(&c.h, s, e));
                    let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
                    predicted.push(best);
                    gold.push(ex.section.index());
                }
            }
        } else {
            for (t, (&orig, &cor)) in ex.ids.iter().zip(&out.x_corrupt[0]).enumerate() {
                if !vocab.is_special(orig) {
                    scores.push(1.0 - out.d[0][t]);
                    labels.push(orig != cor);
                }
            }
        }
    }
    Evaluation {
        loss: if count == 0 { f64::NAN } else { total / count as f64 },
        auc: roc_auc(&scores, &labels),
        accuracy: accuracy(&predicted, &gold),
    }
}

fn write_checkpoint(
    pair: &ElectraPair<f64>,
    out: Option<&Path>,
    name: &str,
    list: &mut Vec<String>,
) -> Result<(), TrainError> {
    if let Some(dir) = out {
        checkpoint::save(pair, &dir.join(name))?;
        list.push(name.to_string());
    }
    Ok(())
}

/// Runs the configured objective. With `out` set, checkpoints (and a dump on
/// a non-finite loss) are written there.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    vocab: &Vocabulary,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let strategy = cfg.masking_strategy();
    let fits = |ex: &&SeqExample| {
        ex.ids.len() <= cfg.max_len
            && ex.base_ids.len() <= cfg.max_len
            && (cfg.objective == Objective::Ss || mask_random(&ex.ids, vocab, 0).is_ok())
    };
    let train_set: Vec<&SeqExample> = data.train.iter().filter(fits).collect();
    let heldout: Vec<&SeqExample> = data.heldout.iter().filter(fits).collect();
    let skipped = data.train.len() + data.heldout.len() - train_set.len() - heldout.len();
    if train_set.is_empty() {
        return Err(TrainError::NoData);
    }
    let enc_cfg = cfg.encoder(vocab.len());
    let mut pair = ElectraPair::new(enc_cfg, cfg.run_seed);
    let general = general_encodings(&pair, &train_set);
    let mut gen_opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &pair.generator.params,
    );
    let mut disc_opt = gen_opt.clone();
    info!(
        "training {} on {} examples ({} held out, {} skipped), {} parameters per encoder",
        cfg.objective,
        train_set.len(),
        heldout.len(),
        skipped,
        pair.generator.param_count()
    );

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, ElectraPair<f64>)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                if !order.is_empty() {
                    epoch += 1;
                }
                order = (0..train_set.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_for(
                    cfg.run_seed,
                    "shuffle",
                    epoch as usize,
                )));
                cursor = 0;
            }
            batch.push((order[cursor], epoch));
            cursor += 1;
        }
        let inputs: Vec<StepInput> = batch
            .iter()
            .map(|&(i, ep)| {
                let ex = train_set[i];
                let seed = example_seed(cfg, ex);
                let masked = match cfg.objective {
                    Objective::Ss => None,
                    _ => mask_example(ex, strategy, vocab, seed_for(seed, "epoch", ep as usize)),
                };
                StepInput {
                    example: ex,
                    masked,
                    corruption: Corruption::Sample(seed_for(seed, "corrupt", step)),
                    h_p: (&general[i].0, &general[i].1),
                }
            })
            .collect();
        let output = step_loss(&pair, cfg, &data.token_links, &inputs);
        let factor = lr_factor(cfg.schedule, step, cfg.steps, cfg.warmup_frac);
        let l = output.losses;
        let record = StepRecord {
            step,
            lr: cfg.lr * factor,
            gen: l.gen,
            disc: l.disc,
            kg: l.kg,
            sec: l.sec,
            reg: l.reg,
            total: l.total,
        };
        let grads_finite = output
            .gen_grads
            .iter()
            .chain(&output.disc_grads)
            .flatten()
            .all(|v| v.is_finite());
        if !l.total.is_finite() || !grads_finite {
            let dump = NanDump {
                step,
                record,
                examples: inputs
                    .iter()
                    .zip(&output.x_corrupt)
                    .map(|(inp, xc)| DumpedExample {
                        report_id: inp.example.report_id.clone(),
                        chunk_idx: inp.example.chunk_idx,
                        ids: inp.example.ids.clone(),
                        x_masked: inp.masked.as_ref().map(|m| m.ids.clone()).unwrap_or_default(),
                        x_corrupt: xc.clone(),
                    })
                    .collect(),
            };
            let dump_path = match out {
                Some(dir) => {
                    let path = dir.join("nan_dump.json");
                    let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
                    std::fs::write(&path, text).map_err(|source| TrainError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    Some(path)
                }
                None => None,
            };
            return Err(TrainError::NonFinite {
                step,
                dump: Box::new(dump),
                dump_path,
            });
        }
        curve.push(record);
        if cfg.objective != Objective::Ss {
            gen_opt.step(&mut pair.generator.params, &output.gen_grads, factor);
        }
        disc_opt.step(&mut pair.discriminator.params, &output.disc_grads, factor);
        steps_run = step + 1;

        if cfg.checkpoint_every > 0 && steps_run % cfg.checkpoint_every == 0 {
            write_checkpoint(&pair, out, &format!("step{steps_run:06}.ckpt"), &mut checkpoints)?;
        }
        if steps_run % cfg.eval_every == 0 || steps_run == cfg.steps {
            if heldout.is_empty() {
                continue;
            }
            let ev = evaluate(&pair, cfg, data, &heldout, vocab);
            debug!("step {steps_run}: held-out loss {:.5}", ev.loss);
            evals.push(EvalRecord {
                step: steps_run,
                loss: ev.loss,
                rtd_auc: ev.auc,
                section_accuracy: ev.accuracy,
            });
            match &best {
                Some((b, _, _)) if ev.loss >= *b => {
                    stale += 1;
                    if stale >= cfg.patience {
                        info!("early stop at step {steps_run}");
                        stopped_early = true;
                        break;
                    }
                }
                _ => {
                    best = Some((ev.loss, steps_run, pair.clone()));
                    stale = 0;
                }
            }
        }
    }

    let best_step = match best {
        Some((_, s, model)) => {
            pair = model;
            s
        }
        None => steps_run,
    };
    let (rtd_auc, section_accuracy) = if heldout.is_empty() {
        (None, None)
    } else {
        let ev = evaluate(&pair, cfg, data, &heldout, vocab);
        (ev.auc, ev.accuracy)
    };
    write_checkpoint(&pair, out, "final.ckpt", &mut checkpoints)?;
    let report = TrainReport {
        config: cfg.clone(),
        encoder: enc_cfg,
        param_count: pair.generator.param_count() + pair.discriminator.param_count(),
        train_examples: train_set.len(),
        heldout_examples: heldout.len(),
        skipped_examples: skipped,
        steps_run,
        stopped_early,
        best_step,
        curve,
        evals,
        rtd_auc,
        section_accuracy,
        checkpoints,
    };
    Ok(TrainOutcome { report, model: pair })
}
