//! Caption tokenization and normalization.

/// Maximum number of tokens kept per caption; longer captions are truncated.
pub const MAX_CAPTION_TOKENS: usize = 50;

/// Lowercase, drop punctuation other than apostrophes, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Tokenize and cap at [`MAX_CAPTION_TOKENS`].
pub fn tokenize_capped(text: &str) -> Vec<String> {
    let mut tokens = tokenize(text);
    tokens.truncate(MAX_CAPTION_TOKENS);
    tokens
}

/// Key under which two captions count as identical for deduplication.
pub fn dedup_key(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Token-set Jaccard similarity. Two empty sets are identical (1.0).
pub fn jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_punctuation_but_keeps_apostrophes() {
        assert_eq!(
            tokenize("A man's Dog, running!  Fast."),
            vec!["a", "man's", "dog", "running", "fast"]
        );
    }

    #[test]
    fn empty_and_punctuation_only() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" .,; ").is_empty());
    }

    #[test]
    fn caps_length() {
        let long = vec!["w"; 80].join(" ");
        assert_eq!(tokenize_capped(&long).len(), MAX_CAPTION_TOKENS);
    }

    #[test]
    fn dedup_key_collapses_surface_variants() {
        assert_eq!(dedup_key("A dog runs."), dedup_key("a  DOG runs"));
    }

    #[test]
    fn jaccard_small_dog() {
        let a = tokenize("a small dog");
        let b = tokenize("a dog");
        assert!((jaccard(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
    }
}
