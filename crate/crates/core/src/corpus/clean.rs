use std::sync::LazyLock;

use regex::Regex;

use super::CorpusError;

static HSPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[ \t\x0B\x0C]+").unwrap());
static NEWLINE_PAD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r" *\n[ \n]*").unwrap());

/// Upper bound on rule-application passes before giving up on a fixed point.
const MAX_PASSES: usize = 8;

#[derive(Debug, Clone)]
struct Rule {
    pattern: Regex,
    replacement: String,
}

/// Ordered OCR substitution rules, one `pattern<TAB>replacement` per line.
#[derive(Debug, Clone, Default)]
pub struct RegexRuleSet {
    rules: Vec<Rule>,
}

impl RegexRuleSet {
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pattern, replacement) = line
                .split_once('\t')
                .ok_or(CorpusError::MalformedRule { line: line_no })?;
            if pattern.is_empty() {
                return Err(CorpusError::MalformedRule { line: line_no });
            }
            let pattern = Regex::new(pattern).map_err(|source| CorpusError::RuleRegex { line: line_no, source })?;
            rules.push(Rule {
                pattern,
                replacement: replacement.to_string(),
            });
        }
        Ok(Self { rules })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn apply_once(&self, text: &str) -> String {
        let mut out = text.replace("\r\n", "\n").replace('\r', "\n");
        for rule in &self.rules {
            if let std::borrow::Cow::Owned(s) = rule.pattern.replace_all(&out, rule.replacement.as_str()) {
                out = s;
            }
        }
        let out = HSPACE.replace_all(&out, " ");
        let out = NEWLINE_PAD.replace_all(&out, "\n");
        out.trim_matches(|c| c == ' ' || c == '\n').to_string()
    }
}

/// Applies the rules in file order, then collapses whitespace runs (spaces to one
/// space, blank lines to one newline). Repeats until a fixed point so that
/// `clean_text(clean_text(x)) == clean_text(x)`.
pub fn clean_text(raw: &str, rules: &RegexRuleSet) -> String {
    let mut current = rules.apply_once(raw);
    for _ in 1..MAX_PASSES {
        let next = rules.apply_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
    log::warn!("cleaning did not reach a fixed point after {MAX_PASSES} passes");
    current
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ligature_rule_and_space_collapse() {
        let rules = RegexRuleSet::parse("\u{FB01}\tfi\n").unwrap();
        assert_eq!(clean_text("lung  \u{FB01}elds", &rules), "lung fields");
    }

    #[test]
    fn empty_input_is_a_fixed_point() {
        let rules = RegexRuleSet::default();
        assert_eq!(clean_text("", &rules), "");
        assert_eq!(clean_text("  \n\n ", &rules), "");
    }

    #[test]
    fn rules_apply_in_file_order() {
        let rules = RegexRuleSet::parse("a\tb\nb\tc\n").unwrap();
        assert_eq!(clean_text("a", &rules), "c");
        let rules = RegexRuleSet::parse("b\tc\na\tb\n").unwrap();
        // second pass turns the b produced by the first into c
        assert_eq!(clean_text("a", &rules), "c");
    }

    #[test]
    fn newlines_survive_but_collapse() {
        let rules = RegexRuleSet::default();
        assert_eq!(
            clean_text("FINDINGS:  clear \r\n\r\n\n  IMPRESSION: ok ", &rules),
            "FINDINGS: clear\nIMPRESSION: ok"
        );
    }

    #[test]
    fn malformed_rule_names_the_line() {
        let err = RegexRuleSet::parse("# c\nok\tfine\nno-tab-here\n").unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRule { line: 3 }));
        let err = RegexRuleSet::parse("(unclosed\tx\n").unwrap_err();
        assert!(matches!(err, CorpusError::RuleRegex { line: 1, .. }));
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn bundled_rules_fix_ocr_digits() {
        let rules = crate::fixtures::clean_rules();
        assert!(rules.len() >= 5);
        assert_eq!(clean_text("n0rmal lung vo1ume...", &rules), "normal lung volume.");
        assert_eq!(clean_text("\u{201C}clear\u{201D} | lungs", &rules), "\"clear\" lungs");
    }
}
