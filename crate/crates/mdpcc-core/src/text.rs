//! Text primitives shared by every stage: the `⊕` join, case-insensitive
//! scanning, and whitespace tokenization.

use alloc::string::String;
use alloc::vec::Vec;

/// Joins text fragments with single spaces: each fragment is trimmed, empty
/// fragments are skipped, and exactly one space separates neighbours. Interior
/// whitespace of a fragment is left untouched.
///
/// This is the concatenation operator used everywhere a prompt, expression, or
/// augmented article is assembled, so `x ⊕ "" == x` holds by construction.
pub fn space_join<'a, I>(parts: I) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = String::new();
    for part in parts {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}

/// Finds the first occurrence of `needle` in `haystack`, comparing ASCII
/// letters case-insensitively. Returns the byte offset of the match.
///
/// `needle` is expected to be plain ASCII (slot labels, "is", "and"); matches
/// therefore always start and end on UTF-8 character boundaries.
pub fn find_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() {
        return Some(0);
    }
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// True when `text` starts with `prefix`, ASCII-case-insensitively.
pub fn starts_with_ascii_ci(text: &str, prefix: &str) -> bool {
    let t = text.as_bytes();
    let p = prefix.as_bytes();
    t.len() >= p.len() && t[..p.len()].eq_ignore_ascii_case(p)
}

/// Splits on Unicode whitespace, dropping empty pieces. The token count
/// feeds the detector's input budget; the pieces feed the bag-of-tokens
/// encoder.
pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Number of whitespace-delimited tokens in `text`.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max_tokens` whitespace tokens of `text`, re-joined with
/// single spaces. Used to trim article bodies from their end while an
/// appended expression survives intact.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    space_join(text.split_whitespace().take(max_tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_join_collapses_and_skips_empty() {
        assert_eq!(space_join(["a", "b"]), "a b");
        assert_eq!(space_join(["a ", "  b"]), "a b");
        assert_eq!(space_join(["a", "", "b"]), "a b");
        assert_eq!(space_join(["", ""]), "");
        assert_eq!(space_join(["x"]), "x");
    }

    #[test]
    fn space_join_preserves_interior_whitespace() {
        assert_eq!(space_join(["a  b", "c"]), "a  b c");
    }

    #[test]
    fn join_with_empty_is_identity() {
        let article = "Meat floss is made of cotton.";
        assert_eq!(space_join([article, ""]), article);
    }

    #[test]
    fn find_ci_ignores_ascii_case() {
        assert_eq!(find_ascii_ci("Entity1 IS meat", "entity1 is "), Some(0));
        assert_eq!(find_ascii_ci("abc AND xyz", " and "), Some(3));
        assert_eq!(find_ascii_ci("abc", "xyz"), None);
    }

    #[test]
    fn find_ci_safe_on_multibyte_haystack() {
        let h = "niece’s ENTITY2 is x";
        let at = find_ascii_ci(h, "entity2 is ").unwrap();
        assert_eq!(&h[at..at + 7], "ENTITY2");
    }

    #[test]
    fn truncation_keeps_prefix_tokens() {
        assert_eq!(truncate_tokens("a b c d", 2), "a b");
        assert_eq!(truncate_tokens("a b", 10), "a b");
        assert_eq!(truncate_tokens("a b", 0), "");
    }
}
