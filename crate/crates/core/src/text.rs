//! Whitespace normalization and the shared word tokenizer.
//!
//! Every module that counts, matches or scores words goes through
//! [`tokenize`], so BM25, SET-BSR, ROUGE-L and NLE length statistics all
//! agree on what a token is.

/// Trims both ends and collapses every internal whitespace run to one space.
/// Case and punctuation are preserved.
pub fn normalize_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_runs() {
        assert_eq!(normalize_whitespace("  a \t b\n\nc  "), "a b c");
        assert_eq!(normalize_whitespace(""), "");
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("The boy's WINDOW, open!"), ["the", "boy", "s", "window", "open"]);
        assert!(tokenize(" ,.; ").is_empty());
        assert_eq!(tokenize("SSN4EGS411 board"), ["ssn4egs411", "board"]);
    }
}
