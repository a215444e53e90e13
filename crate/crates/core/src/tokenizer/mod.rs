//! WordPiece vocabulary, greedy longest-match tokenization, WordPiece induction
//! and taxonomy-gated vocabulary extension.

mod extend;
mod wordpiece;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use extend::{extend_vocabulary, strip_prefix};
pub use wordpiece::train_wordpiece;

pub const CONTINUATION: &str = "##";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTROL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
/// Anonymization placeholders appended to every extended vocabulary.
pub const ANONYMIZATION_TOKENS: [&str; 5] = ["[date]", "[person]", "[location]", "[time]", "[removed]"];

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line}: duplicate token `{token}`")]
    Duplicate { line: usize, token: String },
    #[error("vocabulary line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("vocabulary lacks control token {0}")]
    MissingControl(&'static str),
    #[error("provenance line {line}: {reason}")]
    Provenance { line: usize, reason: String },
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Base,
    New,
    Special,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Base => "base",
            Provenance::New => "new",
            Provenance::Special => "special",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A pre-tokenized word: lowercased text plus its byte span in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// A word together with the ids it tokenizes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedWord {
    pub word: Word,
    pub ids: Vec<u32>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

fn placeholder_at(rest: &str) -> Option<&'static str> {
    ANONYMIZATION_TOKENS
        .iter()
        .chain(CONTROL_TOKENS.iter())
        .find(|p| rest.get(..p.len()).is_some_and(|s| s.eq_ignore_ascii_case(p)))
        .copied()
}

/// Lowercases, splits on whitespace and isolates each punctuation character.
/// Anonymization placeholders and control tokens stay whole.
pub fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut cur_start: Option<usize> = None;
    let mut i = 0;
    let flush = |words: &mut Vec<Word>, s: &mut Option<usize>, e: usize| {
        if let Some(start) = s.take() {
            words.push(Word {
                text: text[start..e].to_lowercase(),
                start,
                end: e,
            });
        }
    };
    while i < text.len() {
        let c = text[i..].chars().next().unwrap();
        let w = c.len_utf8();
        if c.is_whitespace() {
            flush(&mut words, &mut cur_start, i);
        } else if c == '[' {
            flush(&mut words, &mut cur_start, i);
            if let Some(p) = placeholder_at(&text[i..]) {
                let end = i + p.len();
                words.push(Word {
                    text: p.to_string(),
                    start: i,
                    end,
                });
                i = end;
                continue;
            }
            words.push(Word {
                text: "[".into(),
                start: i,
                end: i + 1,
            });
        } else if is_punct(c) {
            flush(&mut words, &mut cur_start, i);
            words.push(Word {
                text: text[i..i + w].to_lowercase(),
                start: i,
                end: i + w,
            });
        } else if cur_start.is_none() {
            cur_start = Some(i);
        }
        i += w;
    }
    flush(&mut words, &mut cur_start, text.len());
    words
}

/// Canonical surface form: pre-tokenized words joined by single spaces.
pub fn normalize_surface(text: &str) -> String {
    pre_tokenize(text)
        .into_iter()
        .map(|w| w.text)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    provenance: Vec<Provenance>,
    control: [u32; 5],
    has_new: bool,
}

impl Vocabulary {
    /// Builds from tokens in id order; `provenance` defaults to `Base` for all.
    pub fn new(tokens: Vec<String>, provenance: Option<Vec<Provenance>>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TokenizerError::EmptyToken { line: i + 1 });
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Duplicate {
                    line: i + 1,
                    token: t.clone(),
                });
            }
        }
        let mut control = [0u32; 5];
        for (slot, name) in control.iter_mut().zip(CONTROL_TOKENS) {
            *slot = *index.get(name).ok_or(TokenizerError::MissingControl(name))?;
        }
        let provenance = provenance.unwrap_or_else(|| vec![Provenance::Base; tokens.len()]);
        if provenance.len() != tokens.len() {
            return Err(TokenizerError::Provenance {
                line: provenance.len().min(tokens.len()) + 1,
                reason: format!("{} entries for {} tokens", provenance.len(), tokens.len()),
            });
        }
        let has_new = provenance.contains(&Provenance::New);
        Ok(Self {
            tokens,
            index,
            provenance,
            control,
            has_new,
        })
    }

    /// One token per line, line number = id. A trailing newline is allowed.
    pub fn from_lines(text: &str, provenance: Option<&str>) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text
            .strip_suffix('\n')
            .unwrap_or(text)
            .split('\n')
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        let prov = provenance.map(|p| parse_provenance(p, &tokens)).transpose()?;
        Self::new(tokens, prov)
    }

    /// Loads a vocab file and, when present, its provenance sidecar.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let text = read(path)?;
        let sidecar = provenance_path(path);
        let prov = if sidecar.exists() { Some(read(&sidecar)?) } else { None };
        Self::from_lines(&text, prov.as_deref())
    }

    /// Writes the vocab file and the provenance sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let write = |p: &Path, s: String| {
            fs::write(p, s).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        write(path, self.to_lines())?;
        write(&provenance_path(path), self.provenance_lines())
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn provenance_lines(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.provenance)
            .map(|(t, p)| format!("{t}\t{p}\n"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn provenance(&self, id: u32) -> Provenance {
        self.provenance[id as usize]
    }

    pub fn pad_id(&self) -> u32 {
        self.control[0]
    }
    pub fn unk_id(&self) -> u32 {
        self.control[1]
    }
    pub fn cls_id(&self) -> u32 {
        self.control[2]
    }
    pub fn sep_id(&self) -> u32 {
        self.control[3]
    }
    pub fn mask_id(&self) -> u32 {
        self.control[4]
    }

    /// Control tokens and anonymization placeholders; never masked or replaced.
    pub fn is_special(&self, id: u32) -> bool {
        self.control.contains(&id) || self.provenance.get(id as usize) == Some(&Provenance::Special)
    }

    fn greedy(&self, word: &str, allowed: impl Fn(u32) -> bool) -> Option<Vec<u32>> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            return None;
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut piece = String::with_capacity(word.len() + 2);
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                let b0 = chars[start].0;
                let b1 = chars.get(end).map_or(word.len(), |c| c.0);
                piece.push_str(&word[b0..b1]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    if allowed(id) {
                        found = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            out.push(found?);
            start = end;
        }
        Some(out)
    }

    /// Greedy longest-match-first pieces for one pre-tokenized word. When the
    /// vocabulary carries extension tokens, the base-only segmentation is used
    /// instead if it is strictly shorter, so extension never fragments a word
    /// further than the base vocabulary would.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.index.get(word) {
            return vec![id];
        }
        let full = self.greedy(word, |_| true);
        if self.has_new {
            let base = self.greedy(word, |id| self.provenance[id as usize] != Provenance::New);
            if let (Some(b), Some(f)) = (&base, &full) {
                if b.len() < f.len() {
                    return b.clone();
                }
            }
            if full.is_none() {
                if let Some(b) = base {
                    return b;
                }
            }
        }
        full.unwrap_or_else(|| vec![self.unk_id()])
    }

    /// Pre-tokenizes and encodes; placeholders missing from the vocabulary are
    /// split like ordinary punctuation and words.
    pub fn encode_words(&self, text: &str) -> Vec<EncodedWord> {
        let mut out = Vec::new();
        for word in pre_tokenize(text) {
            if word.text.starts_with('[') && word.text.len() > 1 && !self.contains(&word.text) {
                let inner = &text[word.start + 1..word.end - 1];
                out.push(self.encoded_punct(word.start, "["));
                out.extend(self.encode_words(inner).into_iter().map(|mut e| {
                    e.word.start += word.start + 1;
                    e.word.end += word.start + 1;
                    e
                }));
                out.push(self.encoded_punct(word.end - 1, "]"));
                continue;
            }
            let ids = self.encode_word(&word.text);
            out.push(EncodedWord { word, ids });
        }
        out
    }

    fn encoded_punct(&self, at: usize, p: &str) -> EncodedWord {
        EncodedWord {
            word: Word {
                text: p.to_string(),
                start: at,
                end: at + 1,
            },
            ids: self.encode_word(p),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.encode_words(text).into_iter().flat_map(|e| e.ids).collect()
    }

    /// Joins tokens with spaces, gluing `##` continuations to their predecessor.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

pub fn provenance_path(vocab: &Path) -> PathBuf {
    vocab.with_extension("provenance.tsv")
}

fn parse_provenance(text: &str, tokens: &[String]) -> Result<Vec<Provenance>, TokenizerError> {
    let mut out = Vec::with_capacity(tokens.len());
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| TokenizerError::Provenance { line: i + 1, reason };
        let (tok, tag) = line
            .rsplit_once('\t')
            .ok_or_else(|| err("expected `token<TAB>provenance`".into()))?;
        if tokens.get(out.len()).map(String::as_str) != Some(tok) {
            return Err(err(format!("token `{tok}` does not match vocabulary order")));
        }
        out.push(match tag {
            "base" => Provenance::Base,
            "new" => Provenance::New,
            "special" => Provenance::Special,
            other => return Err(err(format!("unknown provenance `{other}`"))),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        pre_tokenize(s).into_iter().map(|w| w.text).collect()
    }

    #[test]
    fn pre_tokenizer_splits_punctuation_and_keeps_placeholders() {
        assert_eq!(
            words("Seen on [DATE], stable."),
            vec!["seen", "on", "[date]", ",", "stable", "."]
        );
        assert_eq!(words("x-ray [foo]"), vec!["x", "-", "ray", "[", "foo", "]"]);
        let w = pre_tokenize("  Lungs  clear");
        assert_eq!((w[0].start, w[0].end, w[1].start), (2, 7, 9));
        assert_eq!(normalize_surface(" Body-System  disorder "), "body - system disorder");
    }

    #[test]
    fn control_tokens_required() {
        let err = Vocabulary::new(vec!["a".into()], None).unwrap_err();
        assert!(matches!(err, TokenizerError::MissingControl("[PAD]")));
    }

    #[test]
    fn whole_word_is_single_id() {
        let v = crate::fixtures::base_vocab();
        assert_eq!(v.tokenize("Lung"), vec![v.id("lung").unwrap()]);
    }

    #[test]
    fn thalamus_fragments_in_base() {
        let v = crate::fixtures::base_vocab();
        let pieces: Vec<&str> = v.tokenize("thalamus").iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["tha", "##lam", "##us"]);
    }

    #[test]
    fn unknown_alphabet_gives_unk_and_missing_placeholder_splits() {
        let v = crate::fixtures::base_vocab();
        assert_eq!(v.tokenize("\u{4E2D}"), vec![v.unk_id()]);
        let pieces: Vec<&str> = v.tokenize("[date]").iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["[", "date", "]"]);
    }

    #[test]
    fn detokenize_round_trip() {
        let v = crate::fixtures::base_vocab();
        let s = "Streaky densities at the lung base, likely pneumonia.";
        assert_eq!(v.detokenize(&v.tokenize(s)), normalize_surface(s));
    }

    #[test]
    fn save_and_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let v = crate::fixtures::base_vocab();
        let tax = crate::fixtures::taxonomy();
        let ext = extend_vocabulary(&v, &["thalamus".to_string()].into_iter().collect(), &tax);
        let path = dir.path().join("vocab.txt");
        ext.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.tokens(), ext.tokens());
        let id = back.id("thalamus").unwrap();
        assert_eq!(back.provenance(id), Provenance::New);
        assert!(back.is_special(back.id("[date]").unwrap()));
    }

    #[test]
    fn provenance_order_mismatch_rejected() {
        let err = Vocabulary::from_lines("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n", Some("[UNK]\tbase\n")).unwrap_err();
        assert!(matches!(err, TokenizerError::Provenance { line: 1, .. }));
    }
}
