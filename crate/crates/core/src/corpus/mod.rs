//! Report ingestion: cleaning, section identification, sentence splitting and
//! section-preserving chunking.

mod chunk;
mod clean;
mod sections;
mod sentences;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunk::{chunk_sections, sequence_token_count, Chunk, ChunkWord, EncodedChunk, DEFAULT_BUDGET};
pub use clean::{clean_text, RegexRuleSet};
pub use sections::{identify_sections, HeaderPatternSet};
pub use sentences::split_sentences;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("rule line {line}: expected `pattern<TAB>replacement`")]
    MalformedRule { line: usize },
    #[error("rule line {line}: invalid regex: {source}")]
    RuleRegex {
        line: usize,
        #[source]
        source: regex::Error,
    },
    #[error("header line {line}: unknown section kind `{name}`")]
    UnknownSectionKind { line: usize, name: String },
    #[error("header set has no pattern for section kind {0}")]
    MissingHeaderKind(SectionKind),
    #[error("report {report_id}: sentence {sentence} of {section} needs {tokens} tokens, budget is {budget}")]
    OverlongSentence {
        report_id: String,
        section: SectionKind,
        sentence: usize,
        tokens: usize,
        budget: usize,
    },
}

/// One input report, already anonymized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReport {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectionKind {
    Clinical,
    Comparison,
    Findings,
    Impressions,
    Miscellaneous,
}

impl SectionKind {
    pub const ALL: [SectionKind; 5] = [
        SectionKind::Clinical,
        SectionKind::Comparison,
        SectionKind::Findings,
        SectionKind::Impressions,
        SectionKind::Miscellaneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::Clinical => "clinical",
            SectionKind::Comparison => "comparison",
            SectionKind::Findings => "findings",
            SectionKind::Impressions => "impressions",
            SectionKind::Miscellaneous => "miscellaneous",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SectionKind> {
        Self::ALL.get(i).copied()
    }

    /// Sections whose entities feed knowledge-aware masking.
    pub fn carries_entities(self) -> bool {
        matches!(
            self,
            SectionKind::Clinical | SectionKind::Findings | SectionKind::Impressions
        )
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clinical" => Ok(SectionKind::Clinical),
            "comparison" => Ok(SectionKind::Comparison),
            "findings" => Ok(SectionKind::Findings),
            "impressions" => Ok(SectionKind::Impressions),
            "miscellaneous" => Ok(SectionKind::Miscellaneous),
            other => Err(other.to_string()),
        }
    }
}

/// A sentence with its byte span in the cleaned report text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Sentence {
    pub fn char_span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Contiguous stretch of cleaned text owned by one section (header excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub kind: SectionKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionedReport {
    pub id: String,
    pub sections: BTreeMap<SectionKind, Vec<Sentence>>,
    /// Section regions in document order; not serialized.
    #[serde(skip)]
    pub regions: Vec<Region>,
    /// Consumed header spans; not serialized.
    #[serde(skip)]
    pub headers: Vec<(usize, usize)>,
    #[serde(skip)]
    pub cleaned_len: usize,
}

impl SectionedReport {
    /// Section label of every sentence, in section order.
    pub fn labeled_sentences(&self) -> impl Iterator<Item = (SectionKind, &Sentence)> {
        self.sections.iter().flat_map(|(k, v)| v.iter().map(move |s| (*k, s)))
    }

    pub fn sentence_count(&self) -> usize {
        self.sections.values().map(Vec::len).sum()
    }

    /// Regions and headers tile the cleaned text exactly.
    pub fn partition_holds(&self) -> bool {
        let mut spans: Vec<(usize, usize)> = self
            .regions
            .iter()
            .map(|r| (r.start, r.end))
            .chain(self.headers.iter().copied())
            .collect();
        spans.sort();
        let mut cursor = 0;
        for (s, e) in spans {
            if s != cursor || e < s {
                return false;
            }
            cursor = e;
        }
        cursor == self.cleaned_len
    }
}
