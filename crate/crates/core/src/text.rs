//! Tokenization helpers and the published word lists that drive the mock providers.
//!
//! Every mock behavior in this crate is a pure function of its inputs plus the
//! constants in this module, so changing a list here changes test semantics.

use std::collections::BTreeSet;

/// Function words removed before content comparison.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "in", "on", "at", "of", "and", "or", "to", "with", "by", "for", "from",
    "into", "onto", "over", "under", "is", "are", "was", "were", "be", "been", "its", "it",
    "this", "that", "these", "those", "as", "while", "his", "her", "their", "some",
];

/// Verb-like tokens recognized by the mock scene extractor.
pub const MOCK_VERBS: &[&str] = &[
    "cooking", "cooks", "running", "runs", "walking", "walks", "sitting", "sits", "standing",
    "stands", "dancing", "dances", "playing", "plays", "jumping", "jumps", "swimming", "swims",
    "flying", "flies", "eating", "eats", "riding", "rides", "reading", "reads", "singing",
    "sings", "driving", "drives", "sleeping", "sleeps", "talking", "talks", "representing",
    "wearing", "holding", "looking", "smiling", "painting", "climbing", "surfing", "skiing",
    "drinking", "writing", "typing", "working", "waving", "laughing", "crying", "fishing",
];

/// Motion verbs counted by the motion-proxy task assessor.
pub const MOTION_VERBS: &[&str] = &[
    "run", "runs", "running", "jump", "jumps", "jumping", "walk", "walks", "walking", "dance",
    "dances", "dancing", "fly", "flies", "flying", "swim", "swims", "swimming", "ride", "rides",
    "riding", "drive", "drives", "driving", "climb", "climbs", "climbing", "fall", "falls",
    "falling", "spin", "spins", "spinning", "roll", "rolls", "rolling", "race", "races",
    "racing", "surf", "surfs", "surfing", "skate", "skates", "skating", "throw", "throws",
    "throwing", "kick", "kicks", "kicking", "wave", "waves", "waving", "flow", "flows",
    "flowing", "pour", "pours", "pouring", "splash", "splashes", "splashing", "bounce",
    "bounces", "bouncing",
];

/// Scene markers used by the mock extractor, matched as lowercase word pairs.
pub const SCENE_MARKERS: &[(&str, &str)] = &[("in", "a"), ("in", "the"), ("at", "a"), ("at", "the")];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Collapses every whitespace run to one space and trims the ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips leading and trailing non-alphanumeric characters from a raw token.
pub fn trim_token(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Lowercase whitespace tokens with edge punctuation removed; empty tokens dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| trim_token(t).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Content tokens in text order, duplicates kept.
pub fn content_tokens(text: &str) -> Vec<String> {
    words(text).into_iter().filter(|w| !is_stop_word(w)).collect()
}

/// Distinct content tokens in order of first appearance.
pub fn distinct_content_tokens(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    content_tokens(text)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

pub fn content_set(text: &str) -> BTreeSet<String> {
    content_tokens(text).into_iter().collect()
}

/// Number of whitespace-separated tokens.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}
