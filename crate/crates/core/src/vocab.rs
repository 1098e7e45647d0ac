//! Fixed toy vocabulary shared by the corpus generator and the denoiser.

/// Id of the empty (null) prompt.
pub const NULL_ID: usize = 0;
/// Id every unknown word maps to.
pub const UNKNOWN_ID: usize = 1;

pub const COLORS: &[&str] = &["red", "green", "blue", "yellow", "white", "purple", "orange", "cyan"];
pub const SHAPES: &[&str] = &["square", "circle", "diamond"];
pub const MOTIONS: &[&str] = &["left", "right", "up", "down", "still"];
const FILLER: &[&str] = &["a", "moving", "on", "background", "dark", "light"];

/// All known words; a word's id is its index plus 2.
pub fn words() -> impl Iterator<Item = &'static str> {
    FILLER
        .iter()
        .chain(COLORS)
        .chain(SHAPES)
        .chain(MOTIONS)
        .copied()
}

pub fn size() -> usize {
    2 + words().count()
}

pub fn token_id(word: &str) -> usize {
    let w = word.to_ascii_lowercase();
    words()
        .position(|k| k == w)
        .map_or(UNKNOWN_ID, |i| i + 2)
}

/// Whitespace tokenizer; an empty prompt yields no tokens.
pub fn tokenize(prompt: &str) -> Vec<usize> {
    prompt.split_whitespace().map(token_id).collect()
}

pub fn is_known(prompt: &str) -> bool {
    tokenize(prompt).iter().all(|&t| t != UNKNOWN_ID)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_and_distinct() {
        let ids: Vec<usize> = words().map(token_id).collect();
        let mut sorted = ids.clone();
        sorted.dedup();
        assert_eq!(ids.len(), sorted.len());
        assert!(ids.iter().all(|&i| i >= 2 && i < size()));
        assert_eq!(tokenize("A Red square"), vec![token_id("a"), token_id("red"), token_id("square")]);
        assert_eq!(tokenize("zebra"), vec![UNKNOWN_ID]);
        assert!(tokenize("  ").is_empty());
    }
}
