//! Bundled configuration and fixture files.
//!
//! Every pipeline stage accepts user-supplied files; these are the defaults the
//! CLI falls back to and the data the test suites run against.

use crate::corpus::{HeaderPatternSet, RawReport, RegexRuleSet};
use crate::syngen::Template;
use crate::taxonomy::Taxonomy;
use crate::tokenizer::Vocabulary;

pub const TAXONOMY_JSONL: &str = include_str!("../data/taxonomy.jsonl");
pub const BASE_VOCAB_TXT: &str = include_str!("../data/base_vocab.txt");
pub const CLEAN_RULES_TSV: &str = include_str!("../data/clean_rules.tsv");
pub const HEADER_PATTERNS_TSV: &str = include_str!("../data/header_patterns.tsv");
pub const TEMPLATES_JSONL: &str = include_str!("../data/templates.jsonl");
pub const FIXTURE_REPORTS_JSONL: &str = include_str!("../data/fixture_reports.jsonl");

pub fn taxonomy() -> Taxonomy {
    Taxonomy::from_jsonl_str(TAXONOMY_JSONL).expect("bundled taxonomy is valid")
}

pub fn base_vocab() -> Vocabulary {
    Vocabulary::from_lines(BASE_VOCAB_TXT, None).expect("bundled vocabulary is valid")
}

pub fn clean_rules() -> RegexRuleSet {
    RegexRuleSet::parse(CLEAN_RULES_TSV).expect("bundled rules are valid")
}

pub fn header_patterns() -> HeaderPatternSet {
    HeaderPatternSet::parse(HEADER_PATTERNS_TSV).expect("bundled header patterns are valid")
}

pub fn templates() -> Vec<Template> {
    Template::parse_jsonl(TEMPLATES_JSONL).expect("bundled templates are valid")
}

/// A dozen hand-written reports covering every section kind and the
/// anonymization placeholders.
pub fn fixture_reports() -> Vec<RawReport> {
    crate::jsonl::parse_str(FIXTURE_REPORTS_JSONL, "fixture_reports.jsonl").expect("bundled reports are valid")
}
