//! Rule-based sentence segmentation and word tokenization.
//!
//! The splitter is deterministic: a sentence ends at a run of `.`, `!` or `?`
//! (optionally followed by closing quotes or brackets) that is followed by whitespace
//! or the end of input, unless the word carrying the period is a guarded
//! abbreviation such as `Mr.`. A blank line also ends a sentence.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// One sentence of a story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub words: Vec<String>,
}

impl Sentence {
    pub fn new(index: usize, text: String) -> Self {
        let words = word_tokens(&text);
        Sentence { index, text, words }
    }
}

/// Lowercased abbreviations (without the trailing period) that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "mx", "dr", "prof", "sr", "jr", "st", "mt", "ft", "vs", "etc", "e.g",
    "i.e", "cf", "capt", "col", "gen", "lt", "sgt", "cpl", "maj", "rev", "hon", "gov", "sen",
    "rep", "pres", "vol", "approx", "dept", "est", "fig", "inc", "ltd", "co", "jan",
    "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec", "a.m", "p.m",
    "u.s",
];

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

fn is_closer(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | '”' | '’' | '»' | ')' | ']' | '}' | '`'
    )
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '“' | '‘' | '«' | '(' | '[' | '{' | '`')
}

/// True when the period at byte offset `dot` closes a guarded abbreviation.
fn guarded_abbreviation(text: &str, dot: usize) -> bool {
    let before = &text[..dot];
    let start = before
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace() || *c == '~')
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    let word: String = before[start..]
        .trim_start_matches(is_opener)
        .chars()
        .flat_map(char::to_lowercase)
        .collect();
    !word.is_empty() && ABBREVIATIONS.contains(&word.as_str())
}

fn push_sentence(out: &mut Vec<Sentence>, piece: &str) {
    let mut text = String::with_capacity(piece.len());
    for word in piece.split_whitespace() {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(word);
    }
    if !text.is_empty() {
        let index = out.len();
        out.push(Sentence::new(index, text));
    }
}

/// Splits raw story text into sentences, indexed from zero.
///
/// Internal whitespace runs are collapsed to single spaces. Text with no terminator
/// becomes a single sentence; whitespace-only input yields an empty list.
pub fn split_sentences(raw_text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = raw_text.char_indices().collect();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            // Blank line: newline, optional horizontal whitespace, newline.
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j].1 == '\n' {
                push_sentence(&mut out, &raw_text[start..pos]);
                start = chars[j].0;
                i = j + 1;
                continue;
            }
        }
        if is_terminator(c) {
            let mut j = i;
            while j < chars.len() && is_terminator(chars[j].1) {
                j += 1;
            }
            while j < chars.len() && is_closer(chars[j].1) {
                j += 1;
            }
            let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
            let single_period = c == '.' && (i + 1 == chars.len() || !is_terminator(chars[i + 1].1));
            if at_boundary && !(single_period && guarded_abbreviation(raw_text, pos)) {
                let end = if j == chars.len() {
                    raw_text.len()
                } else {
                    chars[j].0
                };
                push_sentence(&mut out, &raw_text[start..end]);
                start = end;
            }
            i = j.max(i + 1);
            continue;
        }
        i += 1;
    }
    push_sentence(&mut out, &raw_text[start..]);
    out
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

/// Lowercased word terms: whitespace-delimited, leading and trailing punctuation
/// stripped, internal apostrophes kept (and normalized to `'`).
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                return None;
            }
            let term: String = trimmed
                .chars()
                .map(|c| if is_apostrophe(c) { '\'' } else { c })
                .flat_map(char::to_lowercase)
                .collect();
            Some(term)
        })
        .collect()
}

/// A corpus hygiene warning for one line of input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LintIssue {
    /// More than half of the non-whitespace characters are punctuation or symbols.
    MostlyPunctuation,
    /// The line contains combining diacritical marks.
    CombiningDiacritics,
}

fn is_combining(c: char) -> bool {
    matches!(c as u32,
        0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

/// Checks one line for the hygiene problems that plague scraped story corpora.
pub fn lint_line(line: &str) -> Vec<LintIssue> {
    let mut issues = Vec::new();
    let mut visible = 0usize;
    let mut punct = 0usize;
    let mut combining = false;
    for c in line.chars() {
        if c.is_whitespace() {
            continue;
        }
        if is_combining(c) {
            combining = true;
        }
        visible += 1;
        if !c.is_alphanumeric() && !is_combining(c) {
            punct += 1;
        }
    }
    if visible > 0 && punct * 2 > visible {
        issues.push(LintIssue::MostlyPunctuation);
    }
    if combining {
        issues.push(LintIssue::CombiningDiacritics);
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn texts(raw: &str) -> Vec<String> {
        split_sentences(raw).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn one_boundary_per_terminator() {
        assert_eq!(texts("A. B? C!"), vec!["A.", "B?", "C!"]);
    }

    #[test]
    fn honorific_is_not_a_boundary() {
        assert_eq!(texts("Mr. Jones woke. He left."), vec!["Mr. Jones woke.", "He left."]);
        let table_two = "\u{201c}Welcome back, Mr. Jones\u{201d}. I blinked at the bright light until my eyes \
                         were able to focus on the overly-cheerful blonde standing next to me. I ran my \
                         tongue over my lips to try getting some moisture onto them. \u{201c}Where am I?\u{201d} I croaked.";
        let got = texts(table_two);
        assert_eq!(got.len(), 5, "{got:?}");
        assert!(got[0].contains("Mr. Jones"));
    }

    #[test]
    fn residual_text_is_final_sentence() {
        assert_eq!(texts("no terminator"), vec!["no terminator"]);
        assert_eq!(texts("One. two"), vec!["One.", "two"]);
    }

    #[test]
    fn whitespace_only_is_empty() {
        assert!(split_sentences("   \n\t ").is_empty());
    }

    #[test]
    fn closing_quotes_stay_with_sentence() {
        assert_eq!(
            texts("\"Please don't go!\" She wept. \"Why?\""),
            vec!["\"Please don't go!\"", "She wept.", "\"Why?\""]
        );
    }

    #[test]
    fn ellipsis_and_mixed_runs() {
        assert_eq!(texts("Wait... What?! Fine."), vec!["Wait...", "What?!", "Fine."]);
    }

    #[test]
    fn decimals_do_not_split() {
        assert_eq!(texts("It cost 3.50 dollars. Ok."), vec!["It cost 3.50 dollars.", "Ok."]);
    }

    #[test]
    fn blank_line_splits() {
        assert_eq!(texts("Look around us\n\nLook what I did"), vec!["Look around us", "Look what I did"]);
        assert_eq!(texts("one line\ncontinues."), vec!["one line continues."]);
    }

    #[test]
    fn indices_are_sequential() {
        let s = split_sentences("A. B. C.");
        assert_eq!(s.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn word_token_rules() {
        assert_eq!(word_tokens("The swamp creatures!"), vec!["the", "swamp", "creatures"]);
        assert!(word_tokens("").is_empty());
        assert_eq!(word_tokens("I'm nurse Patkins,"), vec!["i'm", "nurse", "patkins"]);
        assert_eq!(word_tokens("\u{201c}I\u{2019}m -- fine\u{201d}"), vec!["i'm", "fine"]);
        assert_eq!(word_tokens("overly-cheerful"), vec!["overly-cheerful"]);
    }

    #[test]
    fn lint_flags() {
        assert_eq!(lint_line("!!!??? ok"), vec![LintIssue::MostlyPunctuation]);
        assert!(lint_line("A plain sentence.").is_empty());
        assert_eq!(lint_line("Z\u{0301}a\u{0302}lgo"), vec![LintIssue::CombiningDiacritics]);
    }
}
