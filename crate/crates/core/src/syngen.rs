//! Templated synthetic report generator with gold sections and entities.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{categorize_class, Category};
use crate::corpus::{HeaderPatternSet, RawReport, SectionKind, Sentence};
use crate::jsonl::JsonlError;
use crate::masking::seed_for;
use crate::taxonomy::{Concept, Taxonomy};
use crate::tokenizer::{normalize_surface, pre_tokenize};

const MAX_NGRAM: usize = 5;
const SENTENCE_ATTEMPTS: usize = 200;
/// Order sections appear in a generated report.
const LAYOUT: [SectionKind; 5] = [
    SectionKind::Miscellaneous,
    SectionKind::Clinical,
    SectionKind::Comparison,
    SectionKind::Findings,
    SectionKind::Impressions,
];

#[derive(Debug, Error)]
pub enum SyngenError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("template `{pattern}`: {reason}")]
    Template { pattern: String, reason: String },
    #[error("no fillers for slot {0:?}")]
    EmptyPool(SlotKind),
    #[error("no header phrase for section {0}")]
    NoHeader(SectionKind),
    #[error("no templates")]
    NoTemplates,
    #[error("template `{0}` never yields an unambiguous sentence")]
    Unfillable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotKind {
    Anat,
    Obs,
    Sym,
    Desc,
}

impl SlotKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ANAT" => Some(SlotKind::Anat),
            "OBS" => Some(SlotKind::Obs),
            "SYM" => Some(SlotKind::Sym),
            "DESC" => Some(SlotKind::Desc),
            _ => None,
        }
    }

    fn admits(self, class: &str) -> bool {
        match self {
            SlotKind::Anat => class == "anatomical entity",
            SlotKind::Obs => class == "clinical finding" || class == "imaging observation",
            SlotKind::Sym => class == "symptom",
            SlotKind::Desc => class.ends_with("descriptor") || class.ends_with("descriptors"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot { kind: SlotKind, pinned: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub section: SectionKind,
    pub pattern: String,
    pub weight: f64,
    #[serde(skip)]
    pieces: Vec<Piece>,
}

fn parse_pieces(pattern: &str) -> Result<Vec<Piece>, SyngenError> {
    let err = |reason: &str| SyngenError::Template {
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Text(rest[..open].to_string()));
        }
        let close = rest[open..].find('}').ok_or_else(|| err("unclosed slot"))? + open;
        let body = &rest[open + 1..close];
        let (name, pinned) = match body.split_once('=') {
            Some((n, p)) if !p.trim().is_empty() => (n, Some(p.to_string())),
            Some(_) => return Err(err("empty pinned filler")),
            None => (body, None),
        };
        let kind = SlotKind::parse(name).ok_or_else(|| err(&format!("unknown slot `{name}`")))?;
        pieces.push(Piece::Slot { kind, pinned });
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(err("stray `}`"));
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

impl Template {
    pub fn new(section: SectionKind, pattern: &str, weight: f64) -> Result<Self, SyngenError> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(SyngenError::Template {
                pattern: pattern.into(),
                reason: format!("weight {weight} must be positive"),
            });
        }
        Ok(Self {
            section,
            pattern: pattern.to_string(),
            weight,
            pieces: parse_pieces(pattern)?,
        })
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<Template>, SyngenError> {
        let raw: Vec<Template> = crate::jsonl::parse_str(text, "templates")?;
        raw.into_iter()
            .map(|t| Template::new(t.section, &t.pattern, t.weight))
            .collect()
    }

    pub fn load(path: &std::path::Path) -> Result<Vec<Template>, SyngenError> {
        let text = std::fs::read_to_string(path).map_err(|source| JsonlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn slots(&self) -> impl Iterator<Item = (SlotKind, Option<&str>)> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot { kind, pinned } => Some((*kind, pinned.as_deref())),
            Piece::Text(_) => None,
        })
    }
}

/// A gold entity: byte span in the report text, linked concept and category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntity {
    pub section: SectionKind,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub concept: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldReport {
    pub id: String,
    pub sections: BTreeMap<SectionKind, Vec<Sentence>>,
    pub entities: Vec<GoldEntity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub report: RawReport,
    pub gold: GoldReport,
}

#[derive(Debug, Clone)]
struct Filler {
    surface: String,
    concept: String,
}

/// Unambiguous, purely alphabetic surfaces of concepts admitted by each slot.
/// Class-level grouping concepts are left out.
fn filler_pools(tax: &Taxonomy) -> BTreeMap<SlotKind, Vec<Filler>> {
    let roots: BTreeSet<&str> = tax.class_roots().values().map(String::as_str).collect();
    let mut pools: BTreeMap<SlotKind, Vec<Filler>> = BTreeMap::new();
    for c in tax.concepts() {
        if roots.contains(c.id.as_str()) || c.parents.is_empty() || c.preferred_label == c.radlex_class {
            continue;
        }
        if categorize_class(&c.radlex_class).is_none() {
            continue;
        }
        for kind in [SlotKind::Anat, SlotKind::Obs, SlotKind::Sym, SlotKind::Desc] {
            if !kind.admits(&c.radlex_class) {
                continue;
            }
            for s in std::iter::once(&c.preferred_label).chain(&c.synonyms) {
                let clean = s.chars().all(|ch| ch.is_ascii_lowercase() || ch == ' ');
                let unique = tax.lookup(s).is_some_and(|v| v.len() == 1);
                if clean && unique {
                    pools.entry(kind).or_default().push(Filler {
                        surface: s.clone(),
                        concept: c.id.clone(),
                    });
                }
            }
        }
    }
    pools
}

/// The candidate whose class gives the preferred category.
fn best_categorized<'a>(candidates: &[&'a Concept]) -> Option<(&'a Concept, Category)> {
    candidates
        .iter()
        .filter_map(|c| categorize_class(&c.radlex_class).map(|cat| (*c, cat)))
        .min_by_key(|(_, cat)| *cat)
}

/// A filler occupying `[start, end)` bytes of the sentence.
struct Placed {
    start: usize,
    end: usize,
    surface: String,
    concept: String,
    category: Category,
}

/// Gold entities for one filler: the filler itself, or one entity per word
/// when its words carry different categories.
fn gold_for_filler(tax: &Taxonomy, text: &str, offset: usize, concept: &Concept) -> Vec<Placed> {
    let words = pre_tokenize(text);
    let per_word: Vec<Option<(&Concept, Category)>> = words
        .iter()
        .map(|w| tax.lookup_normalized(&w.text).and_then(|c| best_categorized(&c)))
        .collect();
    let categories: BTreeSet<Category> = per_word.iter().flatten().map(|(_, c)| *c).collect();
    if words.len() > 1 && categories.len() > 1 {
        return words
            .iter()
            .zip(per_word)
            .filter_map(|(w, pw)| {
                pw.map(|(c, cat)| Placed {
                    start: offset + w.start,
                    end: offset + w.end,
                    surface: w.text.clone(),
                    concept: c.id.clone(),
                    category: cat,
                })
            })
            .collect();
    }
    let category = categorize_class(&concept.radlex_class).expect("fillers are categorized");
    vec![Placed {
        start: offset,
        end: offset + text.len(),
        surface: normalize_surface(text),
        concept: concept.id.clone(),
        category,
    }]
}

/// True when every taxonomy n-gram of the sentence either stays inside one
/// filler, stays clear of all fillers, or exactly covers adjacent single-word
/// gold entities of differing categories.
fn boundaries_hold(tax: &Taxonomy, sentence: &str, fillers: &[(usize, usize)], gold: &[Placed]) -> bool {
    let words = pre_tokenize(sentence);
    let filler_of = |w: &crate::tokenizer::Word| fillers.iter().position(|&(s, e)| w.start >= s && w.end <= e);
    let gold_of = |w: &crate::tokenizer::Word| gold.iter().position(|g| g.start == w.start && g.end == w.end);
    for i in 0..words.len() {
        for n in 1..=MAX_NGRAM.min(words.len() - i) {
            let span = &words[i..i + n];
            let key = span.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
            if tax.lookup_normalized(&key).is_none() {
                continue;
            }
            let owners: Vec<Option<usize>> = span.iter().map(filler_of).collect();
            if owners.iter().all(Option::is_none) {
                continue;
            }
            if owners.iter().all(|o| o.is_some() && *o == owners[0]) {
                continue;
            }
            let golds: Option<Vec<usize>> = span.iter().map(gold_of).collect();
            let split_ok =
                golds.is_some_and(|g| g.iter().map(|&k| gold[k].category).collect::<BTreeSet<_>>().len() > 1);
            if !split_ok {
                return false;
            }
        }
    }
    true
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Generator<'a> {
    tax: &'a Taxonomy,
    templates: &'a [Template],
    pools: BTreeMap<SlotKind, Vec<Filler>>,
    headers: BTreeMap<SectionKind, Vec<String>>,
    all: WeightedIndex<f64>,
}

impl<'a> Generator<'a> {
    fn new(tax: &'a Taxonomy, templates: &'a [Template], headers: &HeaderPatternSet) -> Result<Self, SyngenError> {
        if templates.is_empty() {
            return Err(SyngenError::NoTemplates);
        }
        let pools = filler_pools(tax);
        let mut phrases = BTreeMap::new();
        for t in templates {
            for (kind, pinned) in t.slots() {
                match pinned {
                    Some(p) => {
                        let ok = tax.lookup(p).is_some_and(|c| best_categorized(&c).is_some());
                        if !ok {
                            return Err(SyngenError::Template {
                                pattern: t.pattern.clone(),
                                reason: format!("pinned filler `{p}` is not a categorized concept"),
                            });
                        }
                    }
                    None if pools.get(&kind).is_none_or(Vec::is_empty) => return Err(SyngenError::EmptyPool(kind)),
                    None => {}
                }
            }
            if let std::collections::btree_map::Entry::Vacant(slot) = phrases.entry(t.section) {
                let p = headers.phrases(t.section);
                if p.is_empty() {
                    return Err(SyngenError::NoHeader(t.section));
                }
                slot.insert(p);
            }
        }
        let all = WeightedIndex::new(templates.iter().map(|t| t.weight)).map_err(|e| SyngenError::Template {
            pattern: String::new(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            tax,
            templates,
            pools,
            headers: phrases,
            all,
        })
    }

    fn sentence(&self, t: &Template, r: &mut ChaCha8Rng) -> Result<(String, Vec<Placed>), SyngenError> {
        for _ in 0..SENTENCE_ATTEMPTS {
            let mut text = String::new();
            let mut fillers = Vec::new();
            let mut gold = Vec::new();
            for (i, piece) in t.pieces.iter().enumerate() {
                match piece {
                    Piece::Text(s) => text.push_str(s),
                    Piece::Slot { kind, pinned } => {
                        let (surface, concept) = match pinned {
                            Some(p) => {
                                let cands = self.tax.lookup(p).expect("validated");
                                (p.clone(), best_categorized(&cands).expect("validated").0)
                            }
                            None => {
                                let pool = &self.pools[kind];
                                let f = &pool[r.random_range(0..pool.len())];
                                let s = if i == 0 {
                                    capitalize(&f.surface)
                                } else {
                                    f.surface.clone()
                                };
                                (s, self.tax.get(&f.concept).expect("pool ids resolve"))
                            }
                        };
                        let start = text.len();
                        text.push_str(&surface);
                        fillers.push((start, text.len()));
                        gold.extend(gold_for_filler(self.tax, &surface, start, concept));
                    }
                }
            }
            if boundaries_hold(self.tax, &text, &fillers, &gold) {
                return Ok((text, gold));
            }
        }
        Err(SyngenError::Unfillable(t.pattern.clone()))
    }

    fn report(&self, index: usize, seed: u64) -> Result<Generated, SyngenError> {
        let id = format!("syn{index:06}");
        let mut r = ChaCha8Rng::seed_from_u64(seed_for(seed, "syngen", index));
        let k = r.random_range(6..=10);
        let mut picks: Vec<usize> = (0..k).map(|_| self.all.sample(&mut r)).collect();
        let first = self.templates[picks[0]].section;
        if picks.iter().all(|&p| self.templates[p].section == first) {
            let others: Vec<usize> = (0..self.templates.len())
                .filter(|&i| self.templates[i].section != first)
                .collect();
            if !others.is_empty() {
                let w = WeightedIndex::new(others.iter().map(|&i| self.templates[i].weight)).expect("positive weights");
                picks.push(others[w.sample(&mut r)]);
            }
        }
        let mut by_section: BTreeMap<SectionKind, Vec<usize>> = BTreeMap::new();
        for p in picks {
            by_section.entry(self.templates[p].section).or_default().push(p);
        }

        let mut text = String::new();
        let mut sections: BTreeMap<SectionKind, Vec<Sentence>> = BTreeMap::new();
        let mut entities = Vec::new();
        for kind in LAYOUT {
            let Some(members) = by_section.get(&kind) else { continue };
            if !text.is_empty() {
                text.push('\n');
            }
            let headerless = kind == SectionKind::Miscellaneous && text.is_empty() && r.random_bool(0.5);
            if !headerless {
                let phrases = &self.headers[&kind];
                text.push_str(&phrases[r.random_range(0..phrases.len())]);
                text.push(' ');
            }
            for (j, &t) in members.iter().enumerate() {
                if j > 0 {
                    text.push(' ');
                }
                let (sentence, gold) = self.sentence(&self.templates[t], &mut r)?;
                let start = text.len();
                text.push_str(&sentence);
                sections.entry(kind).or_default().push(Sentence {
                    text: sentence,
                    start,
                    end: text.len(),
                });
                entities.extend(gold.into_iter().map(|g| GoldEntity {
                    section: kind,
                    start: start + g.start,
                    end: start + g.end,
                    surface: g.surface,
                    concept: g.concept,
                    category: g.category,
                }));
            }
        }
        Ok(Generated {
            report: RawReport { id: id.clone(), text },
            gold: GoldReport { id, sections, entities },
        })
    }
}

/// Generates `n` reports. Report `i` depends only on `(seed, i)`.
pub fn generate(
    n: usize,
    tax: &Taxonomy,
    templates: &[Template],
    headers: &HeaderPatternSet,
    seed: u64,
) -> Result<Vec<Generated>, SyngenError> {
    let g = Generator::new(tax, templates, headers)?;
    (0..n).map(|i| g.report(i, seed)).collect()
}

/// Expected share of sentences per section implied by the template weights.
pub fn section_weights(templates: &[Template]) -> BTreeMap<SectionKind, f64> {
    let total: f64 = templates.iter().map(|t| t.weight).sum();
    let mut out = BTreeMap::new();
    for t in templates {
        *out.entry(t.section).or_insert(0.0) += t.weight / total;
    }
    out
}
