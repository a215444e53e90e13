use super::Sentence;

/// Words that end in a period without ending the sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "st", "vs", "e.g", "i.e", "approx", "fig", "jr", "sr", "cf", "al", "inc", "no",
];

fn is_closer(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ')' | '"' | '\'')
}

fn guarded(text: &str, dot: usize) -> bool {
    let word_start = text[..dot].rfind(char::is_whitespace).map(|i| i + 1).unwrap_or(0);
    let word = text[word_start..dot].trim_start_matches(['(', '"', '\'']);
    if word.len() == 1 && word.chars().all(|c| c.is_ascii_uppercase()) {
        return true;
    }
    let lower = word.to_ascii_lowercase();
    // "No." only abbreviates when a number follows
    if lower == "no" {
        return text[dot + 1..].trim_start().starts_with(|c: char| c.is_ascii_digit());
    }
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Rule-based splitter: sentences end at `.`, `!` or `?` followed by whitespace
/// (or end of text), unless the period closes a guarded abbreviation, and at
/// every newline. Spans are byte offsets into `section_text`; only whitespace
/// lies between consecutive sentences.
pub fn split_sentences(section_text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let bytes_len = section_text.len();
    let mut chars = section_text.char_indices().peekable();

    let push = |out: &mut Vec<Sentence>, s: usize, e: usize| {
        let raw = &section_text[s..e];
        let trimmed_end = s + raw.trim_end().len();
        if trimmed_end > s {
            out.push(Sentence {
                text: section_text[s..trimmed_end].to_string(),
                start: s,
                end: trimmed_end,
            });
        }
    };

    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(i);
            } else {
                continue;
            }
        }
        if c == '\n' {
            push(&mut out, start.take().unwrap(), i);
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + c.len_utf8();
            while let Some(&(j, n)) = chars.peek() {
                if is_closer(n) {
                    end = j + n.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            let at_boundary = end == bytes_len || section_text[end..].starts_with(char::is_whitespace);
            if at_boundary && !(c == '.' && guarded(section_text, i)) {
                push(&mut out, start.take().unwrap(), end);
            }
        }
    }
    if let Some(s) = start {
        push(&mut out, s, bytes_len);
    }
    out
}
