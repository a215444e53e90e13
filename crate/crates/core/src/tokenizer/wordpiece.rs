use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::{pre_tokenize, TokenizerError, ANONYMIZATION_TOKENS, CONTINUATION, CONTROL_TOKENS};

struct Candidate {
    left: String,
    right: String,
    merged: String,
    pair: u64,
    left_freq: u64,
    right_freq: u64,
}

impl Candidate {
    /// Higher score first, then lexicographically smaller merged token, then pair.
    fn better_than(&self, other: &Candidate) -> bool {
        // pair/(l*r) > pair'/(l'*r')  <=>  pair*l'*r' > pair'*l*r
        let lhs = self.pair as u128 * other.left_freq as u128 * other.right_freq as u128;
        let rhs = other.pair as u128 * self.left_freq as u128 * self.right_freq as u128;
        match lhs.cmp(&rhs) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => (&self.merged, &self.left, &self.right)
                .cmp(&(&other.merged, &other.left, &other.right))
                .is_lt(),
        }
    }
}

fn merge_symbols(left: &str, right: &str) -> String {
    let mut m = left.to_string();
    m.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    m
}

/// WordPiece induction. The alphabet seeds both the word-initial and the `##`
/// form of every character seen; merges then proceed greedily by
/// `freq(pair) / (freq(left) * freq(right))` until `target_size` tokens exist
/// or no pair remains. Ties break toward the lexicographically smaller token.
pub fn train_wordpiece<'a, I>(corpus: I, target_size: usize) -> Result<BTreeSet<String>, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut any_text = false;
    for text in corpus {
        any_text = true;
        for w in pre_tokenize(text) {
            if ANONYMIZATION_TOKENS.contains(&w.text.as_str()) || CONTROL_TOKENS.contains(&w.text.as_str()) {
                continue;
            }
            *counts.entry(w.text).or_default() += 1;
        }
    }
    if !any_text || counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut vocab: BTreeSet<String> = BTreeSet::new();
    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, n)| {
            let symbols: Vec<String> = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    }
                })
                .collect();
            for c in w.chars() {
                vocab.insert(c.to_string());
                vocab.insert(format!("{CONTINUATION}{c}"));
            }
            (symbols, n)
        })
        .collect();

    while vocab.len() < target_size {
        let mut symbol_freq: BTreeMap<&str, u64> = BTreeMap::new();
        let mut pair_freq: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (symbols, n) in &words {
            for s in symbols {
                *symbol_freq.entry(s.as_str()).or_default() += n;
            }
            for w in symbols.windows(2) {
                *pair_freq.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        let mut best: Option<Candidate> = None;
        for (&(l, r), &pair) in &pair_freq {
            let cand = Candidate {
                left: l.to_string(),
                right: r.to_string(),
                merged: merge_symbols(l, r),
                pair,
                left_freq: symbol_freq[l],
                right_freq: symbol_freq[r],
            };
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
        let Some(best) = best else {
            log::warn!(
                "corpus exhausted all merges at {} tokens (target {target_size})",
                vocab.len()
            );
            break;
        };
        for (symbols, _) in &mut words {
            let mut i = 0;
            let mut merged = Vec::with_capacity(symbols.len());
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == best.left && symbols[i + 1] == best.right {
                    merged.push(best.merged.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
        }
        vocab.insert(best.merged);
    }
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    /// Hand-run induction on {"aaab" x 100}:
    /// seed {a, ##a, b, ##b}; scores (a,##a)=100/(100*200), (##a,##a)=100/(200*200),
    /// (##a,##b)=100/(200*100); tie between "aa" and "##ab" goes to "##ab".
    /// Then (a,##a) and (##a,##ab) both score 100/(100*100); "##aab" < "aa".
    #[test]
    fn four_symbol_corpus_hand_run() {
        let corpus = vec!["aaab"; 100];
        let vocab = train_wordpiece(corpus.iter().copied(), 6).unwrap();
        assert_eq!(vocab, set(&["a", "b", "##a", "##b", "##ab", "##aab"]));
        let vocab = train_wordpiece(corpus.iter().copied(), 7).unwrap();
        assert_eq!(vocab, set(&["a", "b", "##a", "##b", "##ab", "##aab", "aaab"]));
    }

    #[test]
    fn exhausted_corpus_returns_smaller_set() {
        let vocab = train_wordpiece(["ab"], 1000).unwrap();
        assert_eq!(vocab, set(&["a", "b", "##a", "##b", "ab"]));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            train_wordpiece(std::iter::empty(), 300),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            train_wordpiece(["  [date] "], 300),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn deterministic() {
        let corpus = ["the lungs are clear", "no pneumonia in the lungs", "clear"];
        let a = train_wordpiece(corpus, 40).unwrap();
        let b = train_wordpiece(corpus, 40).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }
}
