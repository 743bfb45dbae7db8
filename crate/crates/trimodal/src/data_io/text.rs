//! Tokenization, part-of-speech tags, lemmatization, and the bundled
//! English word lists.
//!
//! Linguistic resources are deliberately data, not code: the stop-word list
//! and the word→POS lexicon ship as plain text files embedded at compile
//! time, and both can be overridden by loading a file at runtime. The
//! lemmatizer is an explicit surface→canonical map with a crude English
//! suffix-stripping fallback for unmapped tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

const STOPWORDS_EN: &str = include_str!("../../assets/stopwords_en.txt");
const POS_LEXICON_EN: &str = include_str!("../../assets/pos_lexicon_en.txt");

/// Lowercases and splits on every non-alphanumeric character. Empty pieces
/// are dropped, so punctuation never yields tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect()
}

/// Coarse part-of-speech label. Only the noun/verb distinction matters for
/// dummy-tag derivation; everything else collapses to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

impl FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "NOUN" => Ok(PosTag::Noun),
            "VERB" => Ok(PosTag::Verb),
            "OTHER" => Ok(PosTag::Other),
            other => Err(format!("unknown POS tag '{other}' (expected NOUN, VERB, or OTHER)")),
        }
    }
}

impl std::fmt::Display for PosTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Other => "OTHER",
        })
    }
}

/// Surface→canonical word grouping. Lookup order: explicit map first, then a
/// small suffix-stripping fallback (-ing, -ed, -ies, -es after a sibilant,
/// plural -s). The fallback is knowingly crude; anything that matters should
/// be in the map.
#[derive(Debug, Clone, Default)]
pub struct Lemmatizer {
    map: BTreeMap<String, String>,
}

impl Lemmatizer {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Lemmatizer { map }
    }

    /// No explicit groups; suffix fallback only.
    pub fn empty() -> Self {
        Lemmatizer::default()
    }

    pub fn canonical(&self, token: &str) -> String {
        if let Some(c) = self.map.get(token) {
            return c.clone();
        }
        suffix_fallback(token)
    }
}

fn suffix_fallback(token: &str) -> String {
    let n = token.len();
    if let Some(stem) = token.strip_suffix("ing") {
        if n > 4 {
            return stem.to_string();
        }
    }
    if let Some(stem) = token.strip_suffix("ed") {
        if n > 3 {
            return stem.to_string();
        }
    }
    if let Some(stem) = token.strip_suffix("ies") {
        if n > 4 {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = token.strip_suffix("es") {
        if n > 3
            && (stem.ends_with('s')
                || stem.ends_with('x')
                || stem.ends_with('z')
                || stem.ends_with("ch")
                || stem.ends_with("sh"))
        {
            return stem.to_string();
        }
    }
    if let Some(stem) = token.strip_suffix('s') {
        if n > 3 && !token.ends_with("ss") {
            return stem.to_string();
        }
    }
    token.to_string()
}

/// Loads a lemma map from lines of `surface<TAB>canonical`.
pub fn load_lemma_map(path: &Path) -> Result<Lemmatizer> {
    let text = fs::read_to_string(path)?;
    let label = path.display().to_string();
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (surface, canonical) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: label.clone(),
            line: Some(idx + 1),
            msg: "expected 'surface<TAB>canonical'".into(),
        })?;
        if surface.is_empty() || canonical.is_empty() {
            return Err(Error::Format {
                path: label,
                line: Some(idx + 1),
                msg: "empty surface or canonical form".into(),
            });
        }
        if map.insert(surface.to_string(), canonical.to_string()).is_some() {
            return Err(Error::Format {
                path: label,
                line: Some(idx + 1),
                msg: format!("surface form '{surface}' mapped twice"),
            });
        }
    }
    Ok(Lemmatizer::new(map))
}

fn parse_word_set(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// The bundled English stop-word list.
pub fn default_stopwords() -> BTreeSet<String> {
    parse_word_set(STOPWORDS_EN)
}

/// Loads a stop-word list, one word per line.
pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    Ok(parse_word_set(&fs::read_to_string(path)?))
}

fn parse_pos_lexicon(text: &str, label: &str) -> Result<BTreeMap<String, PosTag>> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (word, tag) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: label.to_string(),
            line: Some(idx + 1),
            msg: "expected 'word<TAB>TAG'".into(),
        })?;
        let tag: PosTag = tag.parse().map_err(|msg| Error::Format {
            path: label.to_string(),
            line: Some(idx + 1),
            msg,
        })?;
        if map.insert(word.to_string(), tag).is_some() {
            return Err(Error::Format {
                path: label.to_string(),
                line: Some(idx + 1),
                msg: format!("word '{word}' tagged twice"),
            });
        }
    }
    Ok(map)
}

/// The bundled English word→POS lexicon (base forms; inflected forms reach
/// it through the lemmatizer fallback).
pub fn default_pos_lexicon() -> BTreeMap<String, PosTag> {
    parse_pos_lexicon(POS_LEXICON_EN, "bundled pos lexicon")
        .expect("bundled lexicon is checked by tests")
}

/// Loads a word→POS lexicon from lines of `word<TAB>TAG`.
pub fn load_pos_lexicon(path: &Path) -> Result<BTreeMap<String, PosTag>> {
    parse_pos_lexicon(&fs::read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("A dog, runs!  Fast..."),
            vec!["a", "dog", "runs", "fast"]
        );
        assert_eq!(tokenize("don't"), vec!["don", "t"]);
        assert_eq!(tokenize("  ,,, "), Vec::<String>::new());
    }

    #[test]
    fn lemmatizer_map_wins_over_fallback() {
        let mut map = BTreeMap::new();
        map.insert("running".to_string(), "run".to_string());
        let lem = Lemmatizer::new(map);
        assert_eq!(lem.canonical("running"), "run");
        assert_eq!(lem.canonical("dog"), "dog");
    }

    #[test]
    fn suffix_fallback_cases() {
        let lem = Lemmatizer::empty();
        assert_eq!(lem.canonical("jumping"), "jump");
        assert_eq!(lem.canonical("walked"), "walk");
        assert_eq!(lem.canonical("puppies"), "puppy");
        assert_eq!(lem.canonical("dishes"), "dish");
        assert_eq!(lem.canonical("boxes"), "box");
        assert_eq!(lem.canonical("trees"), "tree");
        assert_eq!(lem.canonical("glass"), "glass", "-ss words are not plurals");
        assert_eq!(lem.canonical("is"), "is", "short words stay whole");
        assert_eq!(lem.canonical("sing"), "sing", "length guard protects -ing");
    }

    #[test]
    fn bundled_stopwords_look_sane() {
        let sw = default_stopwords();
        for expected in ["a", "an", "the", "is", "of", "and"] {
            assert!(sw.contains(expected), "missing stop-word '{expected}'");
        }
        assert!(!sw.contains("dog"));
        assert!(sw.len() > 50);
    }

    #[test]
    fn bundled_pos_lexicon_parses_and_covers_basics() {
        let lex = default_pos_lexicon();
        assert_eq!(lex.get("dog"), Some(&PosTag::Noun));
        assert_eq!(lex.get("run"), Some(&PosTag::Verb));
        assert_eq!(lex.get("the"), None, "function words are simply absent");
        assert!(lex.len() > 100);
    }

    #[test]
    fn pos_tag_round_trips_through_display() {
        for tag in [PosTag::Noun, PosTag::Verb, PosTag::Other] {
            assert_eq!(tag.to_string().parse::<PosTag>().unwrap(), tag);
        }
        assert!("noun".parse::<PosTag>().is_err(), "tags are case-sensitive");
    }

    #[test]
    fn lexicon_rejects_duplicate_words() {
        let err = parse_pos_lexicon("dog\tNOUN\ndog\tVERB\n", "mem").unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(2), .. }));
    }
}
