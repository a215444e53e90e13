//! End-to-end glue: raw reports to cleaned, sectioned, chunked, encoded,
//! annotated and masked sequences. Per-report stages run on the rayon pool and
//! return results in input order.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{annotate, choose_concept, Annotation, Category, EntitySpan};
use crate::corpus::{
    chunk_sections, clean_text, identify_sections, CorpusError, EncodedChunk, HeaderPatternSet, RawReport,
    RegexRuleSet, SectionKind, SectionedReport, DEFAULT_BUDGET,
};
use crate::losses::PositionLink;
use crate::masking::{mask_chunk, seed_for, MaskedExample, MaskingError, Objective};
use crate::syngen::{Generated, GoldEntity};
use crate::taxonomy::Taxonomy;
use crate::tokenizer::{extend_vocabulary, train_wordpiece, TokenizerError, Vocabulary, CONTINUATION};
use crate::toymodel::{SeqExample, TrainData};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{report_id}#{chunk_idx}: {source}")]
    Masking {
        report_id: String,
        chunk_idx: usize,
        #[source]
        source: MaskingError,
    },
}

pub fn preprocess(reports: &[RawReport], rules: &RegexRuleSet, headers: &HeaderPatternSet) -> Vec<SectionedReport> {
    reports
        .par_iter()
        .map(|r| identify_sections(&r.id, &clean_text(&r.text, rules), headers))
        .collect()
}

/// Chunks every report within `budget` tokens and encodes the chunks.
pub fn encode(
    reports: &[SectionedReport],
    vocab: &Vocabulary,
    budget: usize,
) -> Result<Vec<EncodedChunk>, PipelineError> {
    let per_report: Result<Vec<Vec<EncodedChunk>>, CorpusError> = reports
        .par_iter()
        .map(|r| {
            let chunks = chunk_sections(r, vocab, budget)?;
            Ok(chunks
                .iter()
                .enumerate()
                .map(|(i, c)| EncodedChunk::new(c, i, vocab))
                .collect())
        })
        .collect();
    Ok(per_report?.into_iter().flatten().collect())
}

pub fn annotate_all(chunks: &[EncodedChunk], tax: &Taxonomy) -> Vec<Annotation> {
    chunks.par_iter().map(|c| annotate(c, tax)).collect()
}

/// One example per chunk, seeded by `(run_seed, report id, chunk index)`.
pub fn mask_all(
    chunks: &[EncodedChunk],
    annotations: &[Annotation],
    objective: Objective,
    vocab: &Vocabulary,
    run_seed: u64,
) -> Vec<Result<MaskedExample, PipelineError>> {
    chunks
        .par_iter()
        .zip(annotations)
        .map(|(c, a)| {
            let seed = seed_for(run_seed, &c.report_id, c.chunk_idx);
            mask_chunk(c, &a.spans, objective, vocab, seed).map_err(|source| PipelineError::Masking {
                report_id: c.report_id.clone(),
                chunk_idx: c.chunk_idx,
                source,
            })
        })
        .collect()
}

/// One line of a `mask` dump: the example plus what is needed to re-check it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub report_id: String,
    pub chunk_idx: usize,
    pub section: SectionKind,
    pub spans: Vec<EntitySpan>,
    pub example: MaskedExample,
}

/// Mask records for every chunk; chunks too short to mask are reported and skipped.
pub fn mask_records(
    chunks: &[EncodedChunk],
    annotations: &[Annotation],
    objective: Objective,
    vocab: &Vocabulary,
    run_seed: u64,
) -> (Vec<MaskRecord>, Vec<PipelineError>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for ((c, a), r) in chunks
        .iter()
        .zip(annotations)
        .zip(mask_all(chunks, annotations, objective, vocab, run_seed))
    {
        match r {
            Ok(example) => records.push(MaskRecord {
                report_id: c.report_id.clone(),
                chunk_idx: c.chunk_idx,
                section: c.section,
                spans: a.spans.clone(),
                example,
            }),
            Err(e) => errors.push(e),
        }
    }
    (records, errors)
}

/// WordPiece tokens learned from the cleaned sentences, then the gated extension of `base`.
pub fn build_vocabulary(
    reports: &[SectionedReport],
    base: &Vocabulary,
    tax: &Taxonomy,
    target_size: usize,
) -> Result<Vocabulary, PipelineError> {
    let learned = train_wordpiece(
        reports
            .iter()
            .flat_map(|r| r.labeled_sentences().map(|(_, s)| s.text.as_str())),
        target_size,
    )?;
    Ok(extend_vocabulary(base, &learned, tax))
}

/// How many gold entities the annotator recovers with exact span and category.
/// Only entities in sections the annotator covers are counted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub gold: usize,
    pub recovered: usize,
    pub misses: Vec<GoldEntity>,
}

impl Closure {
    pub fn rate(&self) -> f64 {
        if self.gold == 0 {
            1.0
        } else {
            self.recovered as f64 / self.gold as f64
        }
    }
}

pub fn annotator_closure(
    generated: &[Generated],
    rules: &RegexRuleSet,
    headers: &HeaderPatternSet,
    vocab: &Vocabulary,
    tax: &Taxonomy,
) -> Result<Closure, PipelineError> {
    let raws: Vec<RawReport> = generated.iter().map(|g| g.report.clone()).collect();
    let chunks = encode(&preprocess(&raws, rules, headers), vocab, DEFAULT_BUDGET)?;
    let found: BTreeSet<(&str, usize, usize, Category)> = chunks
        .iter()
        .zip(annotate_all(&chunks, tax))
        .flat_map(|(c, a)| {
            a.spans
                .into_iter()
                .map(move |s| (c.report_id.as_str(), s.char_span.0, s.char_span.1, s.category))
        })
        .collect();
    let mut out = Closure::default();
    for g in generated {
        for e in g.gold.entities.iter().filter(|e| e.section.carries_entities()) {
            out.gold += 1;
            if found.contains(&(g.report.id.as_str(), e.start, e.end, e.category)) {
                out.recovered += 1;
            } else {
                out.misses.push(e.clone());
            }
        }
    }
    Ok(out)
}

/// Anatomical sites of a concept; an anatomical entity is its own site.
pub fn link_for(tax: &Taxonomy, concept_id: &str, category: Category) -> PositionLink {
    let mut sites = tax.anatomical_sites(concept_id);
    if category == Category::Anatomy {
        sites.insert(concept_id.to_string());
    }
    PositionLink {
        concept: concept_id.to_string(),
        sites,
        systems: tax.body_systems(concept_id),
    }
}

/// Links for vocabulary entries that spell a whole categorized taxonomy surface.
pub fn token_links(vocab: &Vocabulary, tax: &Taxonomy) -> BTreeMap<u32, PositionLink> {
    let mut out = BTreeMap::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        let id = id as u32;
        if vocab.is_special(id) || tok.starts_with(CONTINUATION) {
            continue;
        }
        if let Some(candidates) = tax.lookup(tok) {
            if let (c, Some(cat)) = choose_concept(tax, &candidates) {
                out.insert(id, link_for(tax, &c.id, cat));
            }
        }
    }
    out
}

/// Link of every position: the concept of the entity span covering it.
pub fn position_links(n: usize, spans: &[EntitySpan], tax: &Taxonomy) -> Vec<Option<PositionLink>> {
    let mut links = vec![None; n];
    for s in spans {
        let link = link_for(tax, &s.concept_id, s.category);
        for slot in links.iter_mut().take(s.end.min(n)).skip(s.start) {
            *slot = Some(link.clone());
        }
    }
    links
}

/// `[CLS] text [SEP]` under `vocab`, cut to `max_len` with the `[SEP]` kept.
pub fn wrap_ids(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vec![vocab.cls_id()];
    ids.extend(vocab.tokenize(text));
    ids.truncate(max_len.saturating_sub(1).max(1));
    ids.push(vocab.sep_id());
    ids
}

/// Builds the training examples. Reports whose index is a multiple of ten are
/// held out.
pub fn prepare_training(
    reports: &[RawReport],
    rules: &RegexRuleSet,
    headers: &HeaderPatternSet,
    vocab: &Vocabulary,
    base: &Vocabulary,
    tax: &Taxonomy,
    max_len: usize,
) -> Result<TrainData, PipelineError> {
    let sectioned = preprocess(reports, rules, headers);
    let heldout_ids: BTreeSet<&str> = reports.iter().step_by(10).map(|r| r.id.as_str()).collect();
    let chunks = encode(&sectioned, vocab, max_len)?;
    let annotations = annotate_all(&chunks, tax);
    let examples: Vec<SeqExample> = chunks
        .par_iter()
        .zip(&annotations)
        .map(|(c, a)| {
            let text = c.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
            SeqExample {
                report_id: c.report_id.clone(),
                chunk_idx: c.chunk_idx,
                section: c.section,
                ids: c.ids.clone(),
                base_ids: wrap_ids(base, &text, max_len),
                sentence_ranges: c.sentence_ranges.clone(),
                spans: a.spans.clone(),
                links: position_links(c.ids.len(), &a.spans, tax),
            }
        })
        .collect();
    let (heldout, train): (Vec<_>, Vec<_>) = examples
        .into_iter()
        .partition(|e| heldout_ids.contains(e.report_id.as_str()));
    Ok(TrainData {
        train,
        heldout,
        token_links: token_links(vocab, tax),
    })
}
