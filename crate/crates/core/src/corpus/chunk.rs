use serde::{Deserialize, Serialize};

use super::{CorpusError, SectionKind, SectionedReport, Sentence};
use crate::tokenizer::Vocabulary;

pub const DEFAULT_BUDGET: usize = 512;

/// Consecutive sentences of one section that fit the sequence budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub report_id: String,
    pub section: SectionKind,
    pub sentences: Vec<Sentence>,
    /// Token count including the `[CLS]`/`[SEP]` wrapper.
    pub token_count: usize,
}

/// A pre-tokenized word of a chunk with its token range in the chunk sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkWord {
    pub text: String,
    /// Byte span in the cleaned report text.
    pub char_start: usize,
    pub char_end: usize,
    pub tok_start: usize,
    pub tok_end: usize,
    pub sentence: usize,
}

/// A chunk wrapped as `[CLS] sentence tokens... [SEP]` with word alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedChunk {
    pub report_id: String,
    pub chunk_idx: usize,
    pub section: SectionKind,
    pub ids: Vec<u32>,
    pub words: Vec<ChunkWord>,
    /// Token range of each sentence.
    pub sentence_ranges: Vec<(usize, usize)>,
}

impl EncodedChunk {
    pub fn new(chunk: &Chunk, chunk_idx: usize, vocab: &Vocabulary) -> Self {
        let mut ids = vec![vocab.cls_id()];
        let mut words = Vec::new();
        let mut sentence_ranges = Vec::with_capacity(chunk.sentences.len());
        for (si, sentence) in chunk.sentences.iter().enumerate() {
            let first = ids.len();
            for enc in vocab.encode_words(&sentence.text) {
                let tok_start = ids.len();
                ids.extend_from_slice(&enc.ids);
                words.push(ChunkWord {
                    text: enc.word.text,
                    char_start: sentence.start + enc.word.start,
                    char_end: sentence.start + enc.word.end,
                    tok_start,
                    tok_end: ids.len(),
                    sentence: si,
                });
            }
            sentence_ranges.push((first, ids.len()));
        }
        ids.push(vocab.sep_id());
        Self {
            report_id: chunk.report_id.clone(),
            chunk_idx,
            section: chunk.section,
            ids,
            words,
            sentence_ranges,
        }
    }
}

impl Chunk {
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Tokens a sequence of sentences occupies once wrapped in `[CLS] ... [SEP]`.
pub fn sequence_token_count<'a>(vocab: &Vocabulary, sentences: impl IntoIterator<Item = &'a str>) -> usize {
    2 + sentences.into_iter().map(|s| vocab.tokenize(s).len()).sum::<usize>()
}

/// Greedy per-section packing: sentences are appended to the open chunk while
/// the wrapped token count stays within `budget`. A sentence that alone exceeds
/// the budget fails the whole report.
pub fn chunk_sections(report: &SectionedReport, vocab: &Vocabulary, budget: usize) -> Result<Vec<Chunk>, CorpusError> {
    let mut chunks = Vec::new();
    for (&section, sentences) in &report.sections {
        let mut open: Vec<Sentence> = Vec::new();
        let mut used = 2;
        for (idx, sentence) in sentences.iter().enumerate() {
            let n = vocab.tokenize(&sentence.text).len();
            if n + 2 > budget {
                return Err(CorpusError::OverlongSentence {
                    report_id: report.id.clone(),
                    section,
                    sentence: idx,
                    tokens: n + 2,
                    budget,
                });
            }
            if used + n > budget {
                chunks.push(Chunk {
                    report_id: report.id.clone(),
                    section,
                    sentences: std::mem::take(&mut open),
                    token_count: used,
                });
                used = 2;
            }
            open.push(sentence.clone());
            used += n;
        }
        if !open.is_empty() {
            chunks.push(Chunk {
                report_id: report.id.clone(),
                section,
                sentences: open,
                token_count: used,
            });
        }
    }
    Ok(chunks)
}
