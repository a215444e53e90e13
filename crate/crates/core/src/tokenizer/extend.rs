use std::collections::BTreeSet;

use super::{Provenance, Vocabulary, ANONYMIZATION_TOKENS, CONTINUATION};
use crate::taxonomy::Taxonomy;

pub fn strip_prefix(token: &str) -> &str {
    token.strip_prefix(CONTINUATION).unwrap_or(token)
}

/// Appends to `base` every induced token that is new to it and, stripped of the
/// continuation prefix, is a taxonomy surface form (sorted), followed by the
/// anonymization placeholders. Base ids are unchanged.
pub fn extend_vocabulary(base: &Vocabulary, corpus_tokens: &BTreeSet<String>, tax: &Taxonomy) -> Vocabulary {
    let mut tokens = base.tokens().to_vec();
    let mut provenance: Vec<Provenance> = (0..base.len() as u32).map(|i| base.provenance(i)).collect();

    // BTreeSet iteration is already sorted
    for t in corpus_tokens {
        if base.contains(t) {
            continue;
        }
        let stripped = strip_prefix(t);
        if !stripped.is_empty() && tax.contains_surface(stripped) {
            tokens.push(t.clone());
            provenance.push(Provenance::New);
        } else {
            log::debug!("candidate token `{t}` rejected by taxonomy gate");
        }
    }
    for special in ANONYMIZATION_TOKENS {
        match base.id(special) {
            Some(_) => {}
            None if tokens.iter().any(|t| t == special) => {}
            None => {
                tokens.push(special.to_string());
                provenance.push(Provenance::Special);
            }
        }
    }
    // placeholders already in the base keep their id but are still special
    for special in ANONYMIZATION_TOKENS {
        if let Some(id) = base.id(special) {
            provenance[id as usize] = Provenance::Special;
        }
    }
    Vocabulary::new(tokens, Some(provenance)).expect("extension preserves vocabulary invariants")
}
