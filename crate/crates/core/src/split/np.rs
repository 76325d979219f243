//! Noun-phrase chunking with a small lexicon-and-suffix tagger.

use crate::dataset::CaptionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Prep,
    Pron,
    Conj,
    Num,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "another", "its", "his", "her",
    "their", "my", "your", "our", "no", "several", "many", "few", "both", "all",
];

const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "of", "with", "by", "from", "to", "into", "onto", "near", "under", "over", "above", "below",
    "behind", "beside", "between", "through", "across", "along", "around", "inside", "outside", "next", "for",
    "against", "up", "down", "off", "out", "toward", "towards", "while", "during", "like", "atop", "beneath",
];

const PRONOUNS: &[&str] = &["it", "he", "she", "they", "them", "him", "we", "you", "i", "there", "who", "which", "what", "something", "someone"];

const CONJUNCTIONS: &[&str] = &["and", "or", "but", "as", "than", "so", "if", "then"];

const NUMBERS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "dozen", "couple", "pair"];

const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "white", "black", "brown", "gray", "grey", "orange", "pink", "purple", "small",
    "large", "big", "little", "tiny", "huge", "tall", "short", "long", "old", "young", "new", "wooden", "metal",
    "empty", "full", "open", "closed", "dark", "bright", "light", "clean", "dirty", "hot", "cold", "wet", "dry",
    "busy", "various", "different", "other", "same", "round", "square-shaped", "flat", "high", "low", "close",
    "far", "front", "back", "top", "bottom", "left", "right", "middle", "fresh", "plastic", "glass", "cute",
    "pretty", "beautiful", "nice", "good", "bad", "giant", "narrow", "wide", "colorful", "striped", "blurry",
    "fluffy", "furry", "sunny", "cloudy", "grassy", "sandy", "snowy", "rocky", "single", "double", "half",
];

/// Words that carry a noun sense despite a verb/adverb/adjective-looking suffix.
const NOUNS: &[&str] = &[
    "building", "ceiling", "painting", "clothing", "bedding", "sibling", "wedding", "pudding", "icing", "railing",
    "awning", "sling", "king", "ring", "string", "wing", "thing", "something", "morning", "evening", "ceiling",
    "bed", "shed", "sled", "family", "butterfly", "fly", "lily", "jelly", "belly", "bottle", "table", "vegetable",
    "cable", "animal", "signal", "meal", "seal", "pedal", "metal", "crystal", "hospital", "capital", "label",
    "towel", "jewel", "bowl", "owl", "teddy", "pizza", "person", "people", "man", "woman", "men", "women", "child",
    "children", "boy", "girl", "dog", "cat", "horse", "bird", "car", "bus", "train", "truck", "plane", "boat",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does", "did", "can",
    "could", "will", "would", "should", "may", "might", "must", "sit", "sits", "sat", "stand", "stands", "stood",
    "run", "runs", "ran", "walk", "walks", "walked", "ride", "rides", "rode", "hold", "holds", "held", "eat",
    "eats", "ate", "look", "looks", "play", "plays", "fly", "flies", "lay", "lays", "lie", "lies", "lean", "leans",
    "wear", "wears", "wore", "go", "goes", "went", "take", "takes", "took", "show", "shows", "shown", "contain",
    "contains", "appear", "appears", "seem", "seems", "make", "makes", "made", "get", "gets", "got", "see",
    "sees", "seen", "read", "reads", "says", "say", "said", "hang", "hangs", "hung", "park", "parks", "swim",
    "swims", "jump", "jumps", "fill", "fills", "cover", "covers", "rest", "rests", "carry", "carries", "pose",
    "poses", "wait", "waits", "watch", "watches", "drive", "drives", "cut", "cuts", "stack", "stacked",
];

const ADVERBS: &[&str] = &["not", "very", "too", "also", "just", "here", "together", "away", "still", "almost", "only", "really", "quite"];

/// Tag one lowercase token. Lexicon lookups first, then suffix rules, then noun.
pub fn tag(token: &str) -> Tag {
    let in_list = |list: &[&str]| list.contains(&token);
    if token.chars().all(|c| c.is_ascii_digit()) || in_list(NUMBERS) {
        return Tag::Num;
    }
    if in_list(DETERMINERS) {
        return Tag::Det;
    }
    if in_list(PRONOUNS) {
        return Tag::Pron;
    }
    if in_list(CONJUNCTIONS) {
        return Tag::Conj;
    }
    if in_list(PREPOSITIONS) {
        return Tag::Prep;
    }
    if in_list(ADJECTIVES) {
        return Tag::Adj;
    }
    if in_list(NOUNS) {
        return Tag::Noun;
    }
    if in_list(VERBS) {
        return Tag::Verb;
    }
    if in_list(ADVERBS) {
        return Tag::Adv;
    }
    let ends = |suffixes: &[&str]| suffixes.iter().any(|s| token.len() > s.len() + 2 && token.ends_with(s));
    if ends(&["ly"]) {
        Tag::Adv
    } else if ends(&["ing", "ed"]) {
        Tag::Verb
    } else if ends(&["ous", "ful", "ive", "able", "ible", "al", "ic", "less", "ish", "est", "er"]) && !ends(&["ter", "ner", "ver", "ber", "mer"]) {
        // Comparatives/superlatives and derived adjectives; common -er nouns
        // (computer, corner, cover, number, hammer) stay nouns.
        Tag::Adj
    } else {
        Tag::Noun
    }
}

/// Chunks matching `(ADJ)* (NOUN)+`, joined by spaces, deduplicated within
/// the token list in order of first appearance. Determiners never appear.
pub fn noun_phrases(tokens: &[String]) -> Vec<String> {
    let tags: Vec<Tag> = tokens.iter().map(|t| tag(t)).collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let start = i;
        while i < tokens.len() && tags[i] == Tag::Adj {
            i += 1;
        }
        let noun_start = i;
        while i < tokens.len() && tags[i] == Tag::Noun {
            i += 1;
        }
        if i > noun_start {
            let np = tokens[start..i].join(" ");
            if !out.contains(&np) {
                out.push(np);
            }
        } else if i == start {
            i += 1;
        }
    }
    out
}

pub fn extract_noun_phrases(caption: &CaptionRecord) -> Vec<String> {
    noun_phrases(&caption.tokens)
}
