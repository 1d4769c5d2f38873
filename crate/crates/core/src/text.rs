//! Language filtering, normalization and tokenization of comment text.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Version tag of the bundled common-word list.
pub const WORDLIST_VERSION: &str = "v1";

const WORDLIST: &str = include_str!("../assets/english_common_words_v1.txt");

/// Minimum share of common English words among tokens (texts of 3+ tokens).
pub const MIN_COMMON_WORD_SHARE: f64 = 0.30;
/// Minimum share of ASCII characters for texts shorter than 3 tokens.
pub const MIN_ASCII_SHARE: f64 = 0.80;

/// The bundled 1,000-word list of English function and common words.
pub fn common_words() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        WORDLIST
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonEnglish,
    EmptyAfterClean,
}

/// A comment's tokens; `dropped_reason` is set exactly when `tokens` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub comment_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_reason: Option<DropReason>,
}

impl TokenizedDoc {
    /// Cleans and tokenizes raw text, dropping it when it is not English or
    /// nothing survives cleaning.
    pub fn from_text(comment_id: impl Into<String>, text: &str) -> Self {
        let tokens = tokenize(&normalize(text));
        let dropped_reason = if tokens.is_empty() {
            Some(DropReason::EmptyAfterClean)
        } else if !english_tokens(text, &tokens) {
            Some(DropReason::NonEnglish)
        } else {
            None
        };
        Self {
            comment_id: comment_id.into(),
            tokens: if dropped_reason.is_some() {
                Vec::new()
            } else {
                tokens
            },
            dropped_reason,
        }
    }

    pub fn is_dropped(&self) -> bool {
        self.dropped_reason.is_some()
    }
}

pub fn is_english(text: &str) -> bool {
    english_tokens(text, &tokenize(&normalize(text)))
}

fn english_tokens(text: &str, tokens: &[String]) -> bool {
    if tokens.len() >= 3 {
        let words = common_words();
        let common = tokens.iter().filter(|t| words.contains(t.as_str())).count();
        return common as f64 >= MIN_COMMON_WORD_SHARE * tokens.len() as f64;
    }
    let (ascii, total) = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .fold((0usize, 0usize), |(a, t), c| (a + usize::from(c.is_ascii()), t + 1));
    total > 0 && ascii as f64 >= MIN_ASCII_SHARE * total as f64
}

/// NFKC-normalizes, strips everything outside printable ASCII, replaces
/// punctuation (except apostrophes between two alphanumerics) by spaces,
/// lowercases and collapses whitespace. Idempotent.
pub fn normalize(text: &str) -> String {
    let ascii: Vec<char> = text
        .nfkc()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else if c.is_ascii_graphic() {
                Some(c.to_ascii_lowercase())
            } else {
                None
            }
        })
        .collect();

    let mut out = String::with_capacity(ascii.len());
    let mut pending_space = false;
    for (i, &c) in ascii.iter().enumerate() {
        let keep = c.is_ascii_alphanumeric()
            || (c == '\''
                && i > 0
                && ascii[i - 1].is_ascii_alphanumeric()
                && ascii.get(i + 1).is_some_and(|n| n.is_ascii_alphanumeric()));
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Splits normalized text on single spaces.
pub fn tokenize(normalized: &str) -> Vec<String> {
    normalized
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wordlist_has_one_thousand_lowercase_words() {
        let words = common_words();
        assert_eq!(words.len(), 1000);
        assert!(words.iter().all(|w| normalize(w) == *w));
    }

    #[test]
    fn language_filter() {
        assert!(is_english("this is the best video ever"));
        assert!(!is_english("これはすばらしい動画です"));
        assert!(is_english("lol"));
        assert!(!is_english("das ist ein sehr schönes Video gewesen"));
        assert!(!is_english(""));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize("So COOL!!! 😀😀"), "so cool");
        assert_eq!(normalize("don't stop"), "don't stop");
        assert_eq!(normalize("'quoted' rock'n'roll"), "quoted rock'n'roll");
        assert_eq!(normalize("line\nbreak\ttab"), "line break tab");
        assert_eq!(normalize("ﬁne Ｆｕｌｌwidth"), "fine fullwidth");
        assert_eq!(normalize("   "), "");
    }

    #[test]
    fn tokenization_examples() {
        assert_eq!(tokenize("so cool"), ["so", "cool"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a b c"), ["a", "b", "c"]);
    }

    #[test]
    fn tokenized_doc_drop_reasons() {
        let d = TokenizedDoc::from_text("1", "😀😀!!");
        assert_eq!(d.dropped_reason, Some(DropReason::EmptyAfterClean));
        let d = TokenizedDoc::from_text("2", "ceci est une tres belle video");
        assert_eq!(d.dropped_reason, Some(DropReason::NonEnglish));
        assert!(d.tokens.is_empty());
        let d = TokenizedDoc::from_text("3", "I love this show!");
        assert_eq!(d.tokens, ["i", "love", "this", "show"]);
        assert!(!d.is_dropped());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_restricted(s in "\\PC{0,60}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert!(once.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' || c == ' '));
            prop_assert!(tokenize(&once).iter().all(|t| !t.is_empty()));
        }

        #[test]
        fn normalize_handles_ascii_noise(s in "[ -~\\t\\n]{0,80}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }

        #[test]
        fn is_english_is_pure(s in "\\PC{0,40}") {
            prop_assert_eq!(is_english(&s), is_english(&s));
        }
    }
}
