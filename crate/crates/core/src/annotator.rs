//! Dictionary entity detection over chunk words, taxonomy linking, and the
//! Symptom / Anatomy / Observation categorization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkWord, EncodedChunk, SectionKind};
use crate::taxonomy::{Concept, Taxonomy};

/// Longest word n-gram tried against taxonomy surface forms.
pub const MAX_NGRAM: usize = 5;

const ANATOMY_CLASSES: &[&str] = &[
    "anatomical entity",
    "anatomical descriptors",
    "anatomically-related descriptor",
    "location descriptor",
];
const OBSERVATION_CLASSES: &[&str] = &[
    "clinical finding",
    "procedure",
    "imaging observation",
    "size descriptor",
    "normality descriptor",
    "turbidity descriptor",
    "stage of healing descriptor",
    "composition descriptor",
];

/// Declaration order is the ambiguity preference: Anatomy, then Observation, then Symptom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Anatomy,
    Observation,
    Symptom,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Anatomy => "anatomy",
            Category::Observation => "observation",
            Category::Symptom => "symptom",
        })
    }
}

pub fn categorize_class(class: &str) -> Option<Category> {
    if class == "symptom" {
        Some(Category::Symptom)
    } else if ANATOMY_CLASSES.contains(&class) {
        Some(Category::Anatomy)
    } else if OBSERVATION_CLASSES.contains(&class) {
        Some(Category::Observation)
    } else {
        None
    }
}

pub fn categorize(_tax: &Taxonomy, c: &Concept) -> Option<Category> {
    categorize_class(&c.radlex_class)
}

/// A linked, categorized entity inside one encoded chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub section: SectionKind,
    /// Token range `[start, end)` in the chunk sequence.
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(rename = "concept")]
    pub concept_id: String,
    pub category: Category,
    /// Byte span in the cleaned report text.
    #[serde(skip)]
    pub char_span: (usize, usize),
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

/// A taxonomy match that produced no span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discarded {
    pub surface: String,
    pub concept_id: String,
    pub class: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Annotation {
    pub spans: Vec<EntitySpan>,
    pub discarded: Vec<Discarded>,
    /// Surfaces that matched more than one concept.
    pub ambiguous: Vec<String>,
}

/// Picks the candidate whose category ranks best; uncategorized candidates only
/// win when nothing else is available. Earlier file order breaks ties.
pub fn choose_concept<'a>(tax: &Taxonomy, candidates: &[&'a Concept]) -> (&'a Concept, Option<Category>) {
    candidates
        .iter()
        .map(|c| (*c, categorize(tax, c)))
        .min_by_key(|(_, cat)| cat.map_or(3, |c| c as u8))
        .expect("lookup never yields an empty candidate list")
}

fn word_category<'t>(tax: &'t Taxonomy, word: &str) -> Option<(&'t Concept, Category)> {
    let candidates = tax.lookup_normalized(word)?;
    let (c, cat) = choose_concept(tax, &candidates);
    cat.map(|cat| (c, cat))
}

/// One span per constituent word, each categorized on its own; constituents
/// without a category are dropped (and reported).
pub fn split_mixed_entity(
    words: &[ChunkWord],
    section: SectionKind,
    tax: &Taxonomy,
) -> (Vec<EntitySpan>, Vec<Discarded>) {
    let mut spans = Vec::new();
    let mut dropped = Vec::new();
    for w in words {
        match tax.lookup_normalized(&w.text) {
            Some(candidates) => {
                let (c, cat) = choose_concept(tax, &candidates);
                match cat {
                    Some(category) => spans.push(EntitySpan {
                        section,
                        start: w.tok_start,
                        end: w.tok_end,
                        surface: w.text.clone(),
                        concept_id: c.id.clone(),
                        category,
                        char_span: (w.char_start, w.char_end),
                    }),
                    None => dropped.push(Discarded {
                        surface: w.text.clone(),
                        concept_id: c.id.clone(),
                        class: c.radlex_class.clone(),
                    }),
                }
            }
            None => dropped.push(Discarded {
                surface: w.text.clone(),
                concept_id: String::new(),
                class: String::new(),
            }),
        }
    }
    (spans, dropped)
}

/// Distinct categories among the words of a multi-word match.
pub fn constituent_categories(tax: &Taxonomy, words: &[&str]) -> BTreeSet<Category> {
    words
        .iter()
        .filter_map(|w| word_category(tax, w).map(|(_, c)| c))
        .collect()
}

/// Greedy left-to-right longest match of word n-grams (n <= 5, within one
/// sentence) against taxonomy surfaces. Multi-word matches whose words fall in
/// different categories are split into per-word spans. Only Clinical, Findings
/// and Impressions chunks are annotated.
pub fn annotate(chunk: &EncodedChunk, tax: &Taxonomy) -> Annotation {
    let mut out = Annotation::default();
    if !chunk.section.carries_entities() {
        return out;
    }
    let words = &chunk.words;
    let mut i = 0;
    while i < words.len() {
        let sentence = words[i].sentence;
        let max_n = words[i..]
            .iter()
            .take(MAX_NGRAM)
            .take_while(|w| w.sentence == sentence)
            .count();
        let mut matched = None;
        for n in (1..=max_n).rev() {
            let key = words[i..i + n]
                .iter()
                .map(|w| w.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            if let Some(candidates) = tax.lookup_normalized(&key) {
                matched = Some((n, key, candidates));
                break;
            }
        }
        let Some((n, key, candidates)) = matched else {
            i += 1;
            continue;
        };
        if candidates.len() > 1 {
            log::debug!("ambiguous surface `{key}` ({} concepts)", candidates.len());
            out.ambiguous.push(key.clone());
        }
        let (concept, category) = choose_concept(tax, &candidates);
        let span_words = &words[i..i + n];
        let mixed = n > 1 && {
            let texts: Vec<&str> = span_words.iter().map(|w| w.text.as_str()).collect();
            constituent_categories(tax, &texts).len() > 1
        };
        match category {
            Some(category) if !mixed => out.spans.push(EntitySpan {
                section: chunk.section,
                start: span_words[0].tok_start,
                end: span_words[n - 1].tok_end,
                surface: key,
                concept_id: concept.id.clone(),
                category,
                char_span: (span_words[0].char_start, span_words[n - 1].char_end),
            }),
            _ if n > 1 => {
                let (spans, dropped) = split_mixed_entity(span_words, chunk.section, tax);
                out.spans.extend(spans);
                out.discarded
                    .extend(dropped.into_iter().filter(|d| !d.concept_id.is_empty()));
            }
            _ => {
                log::debug!("`{key}` has class `{}` with no category", concept.radlex_class);
                out.discarded.push(Discarded {
                    surface: key,
                    concept_id: concept.id.clone(),
                    class: concept.radlex_class.clone(),
                });
            }
        }
        i += n;
    }
    out
}

/// Audit record: `{"report_id","chunk_idx","spans":[{"start","end","surface","concept","category"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub report_id: String,
    pub chunk_idx: usize,
    pub spans: Vec<SpanRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub concept: String,
    pub category: Category,
}

impl AnnotationRecord {
    pub fn new(chunk: &EncodedChunk, spans: &[EntitySpan]) -> Self {
        Self {
            report_id: chunk.report_id.clone(),
            chunk_idx: chunk.chunk_idx,
            spans: spans
                .iter()
                .map(|s| SpanRecord {
                    start: s.start,
                    end: s.end,
                    surface: s.surface.clone(),
                    concept: s.concept_id.clone(),
                    category: s.category,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Chunk, Sentence};
    use crate::tokenizer::Vocabulary;

    fn encode(text: &str, section: SectionKind, vocab: &Vocabulary) -> EncodedChunk {
        let chunk = Chunk {
            report_id: "r".into(),
            section,
            sentences: vec![Sentence {
                text: text.into(),
                start: 0,
                end: text.len(),
            }],
            token_count: 0,
        };
        EncodedChunk::new(&chunk, 0, vocab)
    }

    fn pairs(a: &Annotation) -> Vec<(&str, Category)> {
        a.spans.iter().map(|s| (s.surface.as_str(), s.category)).collect()
    }

    #[test]
    fn pneumonia_in_both_lungs() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let a = annotate(&encode("Pneumonia in both lungs", SectionKind::Findings, &vocab), &tax);
        assert_eq!(
            pairs(&a),
            vec![("pneumonia", Category::Observation), ("lungs", Category::Anatomy)]
        );
        let chunk = encode("Pneumonia in both lungs", SectionKind::Findings, &vocab);
        let lungs = &a.spans[1];
        assert_eq!(&chunk.ids[lungs.start..lungs.end], vocab.tokenize("lungs").as_slice());
        assert_eq!(lungs.char_span, (18, 23));
    }

    #[test]
    fn basilar_atelectasis_is_split() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let a = annotate(&encode("basilar atelectasis", SectionKind::Impressions, &vocab), &tax);
        assert_eq!(
            pairs(&a),
            vec![("basilar", Category::Anatomy), ("atelectasis", Category::Observation)]
        );
    }

    #[test]
    fn no_terms_no_spans_and_section_restriction() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        assert!(annotate(&encode("it was a day", SectionKind::Findings, &vocab), &tax)
            .spans
            .is_empty());
        for s in [SectionKind::Comparison, SectionKind::Miscellaneous] {
            assert!(annotate(&encode("pneumonia in the lungs", s, &vocab), &tax)
                .spans
                .is_empty());
        }
    }

    #[test]
    fn categorize_classes() {
        assert_eq!(categorize_class("location descriptor"), Some(Category::Anatomy));
        assert_eq!(categorize_class("normality descriptor"), Some(Category::Observation));
        assert_eq!(categorize_class("symptom"), Some(Category::Symptom));
        assert_eq!(categorize_class("report component"), None);
        assert_eq!(categorize_class("severity descriptor"), None);
    }

    #[test]
    fn split_mixed_entity_per_word_oracle() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        for (text, expected) in [
            ("basilar atelectasis", vec![Category::Anatomy, Category::Observation]),
            (
                "focal consolidation",
                vec![Category::Observation, Category::Observation],
            ),
            ("pneumonia", vec![Category::Observation]),
        ] {
            let chunk = encode(text, SectionKind::Findings, &vocab);
            let (spans, _) = split_mixed_entity(&chunk.words, SectionKind::Findings, &tax);
            // oracle: categorize each word through a direct lookup
            let oracle: Vec<Category> = text
                .split(' ')
                .filter_map(|w| {
                    let cands = tax.lookup(w)?;
                    cands.iter().filter_map(|c| categorize_class(&c.radlex_class)).min()
                })
                .collect();
            let got: Vec<Category> = spans.iter().map(|s| s.category).collect();
            assert_eq!(got, oracle);
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn same_category_compound_stays_whole() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let a = annotate(
            &encode(
                "without definite focal consolidation.",
                SectionKind::Impressions,
                &vocab,
            ),
            &tax,
        );
        assert_eq!(pairs(&a), vec![("focal consolidation", Category::Observation)]);
    }

    #[test]
    fn longest_match_dominates_prefix() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let a = annotate(&encode("small left lung base", SectionKind::Findings, &vocab), &tax);
        // "left lung" is a label, then "base" alone is nothing
        assert_eq!(
            pairs(&a),
            vec![("small", Category::Observation), ("left lung", Category::Anatomy)]
        );
    }

    #[test]
    fn ambiguity_prefers_anatomy_and_discards_are_recorded() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let a = annotate(&encode("temporal findings, mild", SectionKind::Findings, &vocab), &tax);
        assert_eq!(pairs(&a), vec![("temporal", Category::Anatomy)]);
        assert_eq!(a.ambiguous, vec!["temporal".to_string()]);
        let classes: Vec<&str> = a.discarded.iter().map(|d| d.class.as_str()).collect();
        assert_eq!(classes, vec!["report component", "severity descriptor"]);
    }

    #[test]
    fn ngram_does_not_cross_sentences() {
        let (tax, vocab) = (crate::fixtures::taxonomy(), crate::fixtures::base_vocab());
        let chunk = Chunk {
            report_id: "r".into(),
            section: SectionKind::Findings,
            sentences: vec![
                Sentence {
                    text: "left".into(),
                    start: 0,
                    end: 4,
                },
                Sentence {
                    text: "lung".into(),
                    start: 5,
                    end: 9,
                },
            ],
            token_count: 0,
        };
        let a = annotate(&EncodedChunk::new(&chunk, 0, &vocab), &tax);
        assert_eq!(
            pairs(&a),
            vec![("left", Category::Anatomy), ("lung", Category::Anatomy)]
        );
    }
}
