//! Subject extraction: the head of the first noun group of a query.
//!
//! A small lexicon assigns coarse part-of-speech tags; unknown words are
//! treated as nouns, with positional rules for `-ing`/`-ed` forms. A noun
//! group is `(determiner | number | adjective | adverb)* noun+`; the first
//! group that contains a noun wins and its noun run (compound modifiers plus
//! head) is returned. Possessives restart the group so that in
//! "the man's hat" the subject is "hat".

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::jsonl::{self, LoadError};

/// The subject tokens and where they sit in the query.
///
/// Offsets count Unicode scalar values, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub tokens: Vec<String>,
    pub char_start: usize,
    pub char_end: usize,
    /// True when no noun was found and the span is the whole query.
    #[serde(default)]
    pub fallback: bool,
}

impl SubjectSpan {
    pub fn text<'a>(&self, query: &'a str) -> &'a str {
        let start = byte_offset(query, self.char_start);
        let end = byte_offset(query, self.char_end);
        &query[start..end]
    }

    /// Last token of the group.
    pub fn head(&self) -> &str {
        self.tokens.last().map(String::as_str).unwrap_or_default()
    }
}

fn byte_offset(s: &str, chars: usize) -> usize {
    s.char_indices().nth(chars).map_or(s.len(), |(b, _)| b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Det,
    Num,
    Adj,
    Adv,
    Noun,
    Verb,
    Prep,
    Conj,
    Pron,
    Possessive,
    Boundary,
}

#[derive(Debug)]
struct Token {
    text: String,
    start: usize,
    end: usize,
    boundary: bool,
}

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "his", "her", "its", "their", "my",
    "your", "our", "some", "any", "each", "every", "another", "both", "all", "no", "either",
    "neither", "which", "what",
];

const NUMBERS: &[&str] = &[
    "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "dozen", "several", "many", "few", "couple",
];

const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "with", "by", "from", "to", "into", "onto", "near", "behind",
    "beside", "besides", "between", "under", "over", "above", "below", "next", "across",
    "along", "around", "against", "toward", "towards", "through", "inside", "outside",
    "without", "among", "beneath", "underneath", "atop", "up", "down", "off", "out", "like",
    "for", "about", "after", "before", "past", "than", "as", "via", "within", "upon", "beyond",
    "amongst", "facing",
];

const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "while", "who", "whose", "where", "when", "whom", "so",
    "because", "if", "then", "also", "not",
];

const PRONOUNS: &[&str] = &[
    "it", "he", "she", "they", "them", "him", "i", "you", "we", "me", "us", "itself",
    "himself", "herself", "themselves", "someone", "something", "anyone", "everyone",
    "somebody", "anybody", "everybody", "there", "here",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "am", "has", "have", "had", "do", "does", "did",
    "can", "could", "will", "would", "should", "may", "might", "must", "holds", "wears",
    "sits", "stands", "looks", "walks", "rides", "eats", "plays", "carries", "faces", "lies",
    "leans", "hangs", "seems", "appears", "shows", "covers", "contains", "reads", "waits",
    "watches", "uses", "swings", "throws", "catches", "runs", "flies", "drinks", "talks",
    "pulls", "pushes", "jumps", "points", "smiles", "touches", "sleeps", "grazes", "kicks",
    "hits", "takes", "makes", "gets", "goes", "comes", "cuts", "pours", "serves",
    "sit", "stand", "hold", "wear", "cut", "sat", "put", "set", "held", "worn", "seen",
    "shown", "made", "lying", "laying", "being", "done", "gone", "taken", "eaten", "ridden",
    "hung", "stood", "got", "grown", "drawn", "written", "broken", "hidden", "shot",
];

const ADJECTIVES: &[&str] = &[
    "white", "black", "red", "blue", "green", "yellow", "orange", "pink", "purple", "brown",
    "gray", "grey", "silver", "gold", "golden", "tan", "beige", "dark", "light", "bright",
    "pale", "colorful", "big", "small", "large", "little", "tiny", "huge", "tall", "short",
    "long", "wide", "narrow", "thin", "thick", "fat", "giant", "left", "right", "middle",
    "center", "centre", "top", "bottom", "front", "far", "closest", "nearest", "furthest",
    "farthest", "leftmost", "rightmost", "upper", "lower", "first", "second", "third",
    "fourth", "last", "other", "same", "whole", "half", "full", "empty", "entire", "main",
    "young", "old", "new", "wooden", "metal", "plastic", "striped", "spotted", "plaid",
    "checkered", "open", "closed", "clear", "wet", "dry", "hot", "cold", "fresh", "adult",
    "male", "female", "single", "double", "triple", "partial", "visible", "blurry", "smaller",
    "bigger", "larger", "taller", "shorter", "smallest", "biggest", "largest", "tallest",
    "shortest", "closer", "further", "farther", "lighter", "darker", "older", "younger",
    "more", "most", "less", "least", "furry", "fluffy", "cute", "happy", "sad", "dirty",
    "clean", "shiny", "round", "square", "flat", "curly", "bald", "blond", "blonde",
    "asian", "elderly", "heavy", "rear", "back", "lone", "only", "nearby",
    "distant", "background", "foreground", "sliced", "cooked", "grilled", "fried",
];

const ADVERBS: &[&str] = &[
    "very", "really", "just", "almost", "barely", "fully", "slightly", "mostly", "partly",
    "completely", "somewhat", "extremely", "too", "quite", "rather", "so", "much",
];

/// Words ending in -ing/-ed that are nouns wherever they appear.
const NOUN_EXCEPTIONS: &[&str] = &[
    "building", "ceiling", "painting", "clothing", "railing", "icing", "frosting", "topping",
    "stuffing", "filling", "wedding", "pudding", "king", "ring", "wing", "string", "thing",
    "evening", "morning", "sibling", "duckling", "spring", "swing", "sling", "bed", "sled",
    "shed", "head", "bread", "thread", "seed", "reed", "steed", "sheep",
    "forehead", "bobsled", "bird", "herd", "billboard", "cupboard", "skateboard", "surfboard",
    "snowboard", "keyboard", "board",
];

fn tokenize(query: &str) -> Vec<Token> {
    let chars: Vec<char> = query.chars().collect();
    let is_word = |c: char| c.is_alphanumeric();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_word(c) {
            let start = i;
            while i < chars.len() {
                let ch = chars[i];
                let joiner = matches!(ch, '-' | '\'' | '’')
                    && i + 1 < chars.len()
                    && is_word(chars[i + 1])
                    && i > start;
                if is_word(ch) || joiner {
                    i += 1;
                } else {
                    break;
                }
            }
            let text: String = chars[start..i].iter().collect::<String>().to_lowercase();
            let split = ["'s", "’s"].iter().find(|p| text.len() > 2 && text.ends_with(*p));
            match split {
                Some(p) => {
                    let word_chars = i - start - 2;
                    out.push(Token {
                        text: text[..text.len() - p.len()].to_string(),
                        start,
                        end: start + word_chars,
                        boundary: false,
                    });
                    out.push(Token {
                        text: "'s".into(),
                        start: start + word_chars,
                        end: i,
                        boundary: false,
                    });
                }
                None => out.push(Token {
                    text,
                    start,
                    end: i,
                    boundary: false,
                }),
            }
        } else {
            if matches!(c, ',' | ';' | ':' | '.' | '!' | '?' | '(' | ')' | '"') {
                out.push(Token {
                    text: c.to_string(),
                    start: i,
                    end: i + 1,
                    boundary: true,
                });
            }
            i += 1;
        }
    }
    out
}

/// Context-free tag; `None` for open-class words decided by position.
fn lexicon_tag(word: &str) -> Option<Tag> {
    if word == "'s" {
        return Some(Tag::Possessive);
    }
    if NOUN_EXCEPTIONS.contains(&word) {
        return Some(Tag::Noun);
    }
    if DETERMINERS.contains(&word) {
        return Some(Tag::Det);
    }
    if NUMBERS.contains(&word) || word.chars().all(|c| c.is_ascii_digit()) {
        return Some(Tag::Num);
    }
    if PREPOSITIONS.contains(&word) {
        return Some(Tag::Prep);
    }
    if CONJUNCTIONS.contains(&word) {
        return Some(Tag::Conj);
    }
    if PRONOUNS.contains(&word) {
        return Some(Tag::Pron);
    }
    if VERBS.contains(&word) {
        return Some(Tag::Verb);
    }
    if ADJECTIVES.contains(&word) {
        return Some(Tag::Adj);
    }
    if ADVERBS.contains(&word) || (word.len() > 4 && word.ends_with("ly")) {
        return Some(Tag::Adv);
    }
    None
}

fn is_participle(word: &str) -> bool {
    (word.len() > 4 && word.ends_with("ing")) || (word.len() > 3 && word.ends_with("ed"))
}

/// Whether `tokens[i]` could continue a noun group as a noun.
fn could_be_noun(tokens: &[Token], i: usize) -> bool {
    tokens.get(i).is_some_and(|t| {
        !t.boundary
            && match lexicon_tag(&t.text) {
                Some(Tag::Noun) => true,
                Some(Tag::Adj) | Some(Tag::Num) => could_be_noun(tokens, i + 1),
                Some(_) => false,
                None => true,
            }
    })
}

/// Tag of `tokens[i]` given whether a noun has already been seen in the
/// current group.
fn tag_at(tokens: &[Token], i: usize, seen_noun: bool) -> Tag {
    let t = &tokens[i];
    if t.boundary {
        return Tag::Boundary;
    }
    let word = t.text.as_str();
    if word == "one" || word == "ones" {
        return if !seen_noun && could_be_noun(tokens, i + 1) {
            Tag::Num
        } else {
            Tag::Noun
        };
    }
    if word == "that" && !seen_noun && !could_be_noun(tokens, i + 1) {
        return Tag::Conj;
    }
    if let Some(tag) = lexicon_tag(word) {
        return tag;
    }
    if is_participle(word) {
        // Before the head a participle modifies ("a sleeping cat") or, with
        // nothing noun-like after it, is itself the head ("the building").
        if seen_noun {
            return Tag::Verb;
        }
        return if could_be_noun(tokens, i + 1) {
            Tag::Adj
        } else {
            Tag::Noun
        };
    }
    Tag::Noun
}

/// Finds the query's subject. Never fails: with no noun in sight the whole
/// (trimmed) query is returned with `fallback` set.
pub fn extract_subject(query: &str) -> SubjectSpan {
    let tokens = tokenize(query);
    let mut i = 0;
    while i < tokens.len() {
        // skip to a token that can open a group
        let tag = tag_at(&tokens, i, false);
        if !matches!(tag, Tag::Det | Tag::Num | Tag::Adj | Tag::Adv | Tag::Noun) {
            i += 1;
            continue;
        }
        let mut nouns: Vec<usize> = Vec::new();
        let mut stashed: Vec<usize> = Vec::new();
        while i < tokens.len() {
            match tag_at(&tokens, i, !nouns.is_empty()) {
                Tag::Noun => nouns.push(i),
                Tag::Det | Tag::Num | Tag::Adj | Tag::Adv if nouns.is_empty() => {}
                Tag::Possessive if !nouns.is_empty() => {
                    stashed = std::mem::take(&mut nouns);
                }
                _ => break,
            }
            i += 1;
        }
        let nouns = if nouns.is_empty() { stashed } else { nouns };
        if let (Some(&first), Some(&last)) = (nouns.first(), nouns.last()) {
            return SubjectSpan {
                tokens: nouns.iter().map(|&k| tokens[k].text.clone()).collect(),
                char_start: tokens[first].start,
                char_end: tokens[last].end,
                fallback: false,
            };
        }
        // `i` now sits on a token that cannot open a group
    }
    debug!("no noun group in query {query:?}; using the whole query");
    fallback_span(query)
}

fn fallback_span(query: &str) -> SubjectSpan {
    let lead = query.chars().take_while(|c| c.is_whitespace()).count();
    let total = query.chars().count();
    let trail = query.chars().rev().take_while(|c| c.is_whitespace()).count();
    let end = total.saturating_sub(trail).max(lead);
    SubjectSpan {
        tokens: query.split_whitespace().map(str::to_lowercase).collect(),
        char_start: lead,
        char_end: end,
        fallback: true,
    }
}

#[derive(Debug, Deserialize)]
struct OverrideLine {
    sample_id: String,
    tokens: Vec<String>,
}

/// Subject tokens supplied per sample, bypassing the built-in chunker.
pub type SubjectOverrides = HashMap<String, Vec<String>>;

pub fn load_overrides(path: &Path) -> Result<SubjectOverrides, LoadError> {
    let lines: Vec<OverrideLine> = jsonl::read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .filter(|l| !l.tokens.is_empty())
        .map(|l| (l.sample_id, l.tokens))
        .collect())
}

/// Subject tokens for a sample: the override when present, else the chunker.
pub fn subject_tokens(
    sample_id: &str,
    query: &str,
    overrides: Option<&SubjectOverrides>,
) -> Vec<String> {
    overrides
        .and_then(|o| o.get(sample_id).cloned())
        .unwrap_or_else(|| extract_subject(query).tokens)
}
