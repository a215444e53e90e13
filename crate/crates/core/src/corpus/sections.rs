use std::collections::BTreeMap;

use regex::{Regex, RegexBuilder};

use super::{split_sentences, CorpusError, Region, SectionKind, SectionedReport};

/// Header regexes per section kind, loaded from `SectionKind<TAB>regex` lines.
#[derive(Debug, Clone)]
pub struct HeaderPatternSet {
    patterns: Vec<(SectionKind, Regex)>,
}

impl HeaderPatternSet {
    /// Patterns are compiled in multi-line mode so `^` anchors at line starts.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut patterns = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, pattern) = line
                .split_once('\t')
                .ok_or(CorpusError::MalformedRule { line: line_no })?;
            let kind: SectionKind = kind
                .parse()
                .map_err(|name| CorpusError::UnknownSectionKind { line: line_no, name })?;
            let regex = RegexBuilder::new(pattern)
                .multi_line(true)
                .build()
                .map_err(|source| CorpusError::RuleRegex { line: line_no, source })?;
            patterns.push((kind, regex));
        }
        for kind in SectionKind::ALL {
            if kind != SectionKind::Miscellaneous && !patterns.iter().any(|(k, _)| *k == kind) {
                return Err(CorpusError::MissingHeaderKind(kind));
            }
        }
        Ok(Self { patterns })
    }

    /// Non-overlapping header matches ordered by position. On overlap the
    /// earlier match wins, then the longer one.
    fn headers(&self, text: &str) -> Vec<(usize, usize, SectionKind)> {
        let mut found: Vec<(usize, usize, SectionKind)> = self
            .patterns
            .iter()
            .flat_map(|(kind, re)| {
                re.find_iter(text)
                    .filter(|m| !m.is_empty())
                    .map(move |m| (m.start(), m.end(), *kind))
            })
            .collect();
        found.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut kept: Vec<(usize, usize, SectionKind)> = Vec::new();
        for h in found {
            if kept.last().is_none_or(|last| h.0 >= last.1) {
                kept.push(h);
            }
        }
        kept
    }

    /// Literal alternatives of the first `(?:a|b|...)` group of each pattern for
    /// `kind`, uppercased with a trailing colon, kept only when they classify
    /// back to `kind`.
    pub fn phrases(&self, kind: SectionKind) -> Vec<String> {
        let mut out = Vec::new();
        for (k, re) in self.patterns.iter().filter(|(k, _)| *k == kind) {
            let src = re.as_str();
            let Some(open) = src.find("(?:") else { continue };
            let Some(close) = src[open..].find(')') else { continue };
            for alt in src[open + 3..open + close].split('|') {
                let phrase = format!("{}:", alt.trim().to_uppercase());
                if self.classify_header(&phrase) == Some(*k) && !out.contains(&phrase) {
                    out.push(phrase);
                }
            }
        }
        out
    }

    /// Kind of a header string if it matches any pattern over its whole length.
    pub fn classify_header(&self, header: &str) -> Option<SectionKind> {
        self.headers(header)
            .first()
            .filter(|(s, e, _)| *s == 0 && *e == header.len())
            .map(|h| h.2)
    }
}

/// Splits cleaned text at header matches. Text before the first header (or the
/// whole text when no header matches) is Miscellaneous; each header owns the text
/// up to the next header. Repeated headers of one kind append to that section.
pub fn identify_sections(id: &str, cleaned: &str, headers: &HeaderPatternSet) -> SectionedReport {
    let found = headers.headers(cleaned);
    let mut regions = Vec::new();
    let mut header_spans = Vec::new();
    let mut cursor = 0;
    let mut current = SectionKind::Miscellaneous;
    for (start, end, kind) in found {
        regions.push(Region {
            kind: current,
            start: cursor,
            end: start,
        });
        header_spans.push((start, end));
        cursor = end;
        current = kind;
    }
    regions.push(Region {
        kind: current,
        start: cursor,
        end: cleaned.len(),
    });

    let mut sections: BTreeMap<SectionKind, Vec<_>> = BTreeMap::new();
    for region in &regions {
        let body = &cleaned[region.start..region.end];
        for mut sentence in split_sentences(body) {
            sentence.start += region.start;
            sentence.end += region.start;
            sections.entry(region.kind).or_default().push(sentence);
        }
    }
    SectionedReport {
        id: id.to_string(),
        sections,
        regions,
        headers: header_spans,
        cleaned_len: cleaned.len(),
    }
}
