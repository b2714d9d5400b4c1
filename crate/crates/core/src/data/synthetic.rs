//! Seeded English-like text generator used when no corpus file is supplied.
//!
//! Paragraphs draw their nouns from a small per-paragraph topic set, so words
//! recur at short range the way they do in real prose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Alice", "Bruno", "Chen", "Dana", "Elena", "Farid", "Grace", "Hugo", "Ines", "Jonas", "Kira",
    "Luca", "Maya", "Nils", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tara",
];

const NOUNS: &[&str] = &[
    "river", "garden", "window", "teacher", "letter", "market", "engine", "village", "forest",
    "bridge", "kitchen", "station", "library", "student", "doctor", "farmer", "painter", "sailor",
    "mountain", "harbor", "castle", "storm", "lantern", "machine", "notebook", "violin", "orchard",
    "meadow", "island", "bakery", "school", "tower", "valley", "candle", "mirror", "wagon",
    "basket", "blanket", "coin", "door", "field", "fire", "friend", "house", "key", "lake", "map",
    "moon", "road", "ship", "song", "stone", "table", "tree", "wall", "wheel", "wind", "cat",
    "dog", "horse", "bird", "apple", "bread", "cheese", "coffee", "paper", "pencil", "clock",
    "box", "boat", "train", "city", "street", "room", "garden", "child", "king", "queen",
];

const VERBS: &[&str] = &[
    "found", "carried", "opened", "painted", "watched", "followed", "repaired", "visited",
    "built", "cleaned", "described", "moved", "noticed", "lifted", "pushed", "pulled", "sold",
    "bought", "borrowed", "remembered", "forgot", "crossed", "reached", "touched", "covered",
    "measured", "counted", "shared", "wrapped", "hid", "drew", "saw", "took", "gave", "left",
];

const ADJECTIVES: &[&str] = &[
    "old", "small", "quiet", "bright", "heavy", "narrow", "green", "wooden", "broken", "warm",
    "cold", "gentle", "tall", "distant", "empty", "golden", "dusty", "careful", "strange",
    "simple", "ancient", "little", "red", "blue", "silver", "hidden", "busy", "calm",
];

const ADVERBS: &[&str] = &[
    "slowly", "quickly", "carefully", "quietly", "again", "later", "suddenly", "together",
    "finally", "often", "early",
];

const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "beside", "across", "inside", "along", "over", "through",
    "toward", "past",
];

const CONNECTIVES: &[&str] = &["and", "but", "because", "while", "so", "before", "after"];

const OPENERS: &[&str] = &[
    "In the morning", "That evening", "Years later", "After the rain", "At noon", "Every day",
    "Once", "Soon",
];

/// Generates at least `bytes` bytes of deterministic prose for `seed`.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 1024);
    while out.len() < bytes {
        paragraph(&mut rng, &mut out);
        out.push_str("\n\n");
    }
    out.into_bytes()
}

/// Zipf-like pick: low indices are much more frequent.
fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    let u: f64 = rng.random();
    let idx = ((u * u) * words.len() as f64) as usize;
    words[idx.min(words.len() - 1)]
}

fn article(noun: &str, rng: &mut ChaCha8Rng) -> &'static str {
    if rng.random_bool(0.5) {
        "the"
    } else if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, topic: &[&str], out: &mut String) {
    let noun = if rng.random_bool(0.75) {
        topic[rng.random_range(0..topic.len())]
    } else {
        pick(rng, NOUNS)
    };
    if rng.random_bool(0.4) {
        let adj = pick(rng, ADJECTIVES);
        out.push_str(article(adj, rng));
        out.push(' ');
        out.push_str(adj);
    } else {
        out.push_str(article(noun, rng));
    }
    out.push(' ');
    out.push_str(noun);
}

fn clause(rng: &mut ChaCha8Rng, topic: &[&str], cast: &[&str], out: &mut String) {
    if rng.random_bool(0.45) {
        out.push_str(cast[rng.random_range(0..cast.len())]);
    } else {
        noun_phrase(rng, topic, out);
    }
    out.push(' ');
    if rng.random_bool(0.2) {
        out.push_str(pick(rng, ADVERBS));
        out.push(' ');
    }
    out.push_str(pick(rng, VERBS));
    out.push(' ');
    noun_phrase(rng, topic, out);
    if rng.random_bool(0.5) {
        out.push(' ');
        out.push_str(pick(rng, PREPOSITIONS));
        out.push(' ');
        noun_phrase(rng, topic, out);
    }
}

fn sentence(rng: &mut ChaCha8Rng, topic: &[&str], cast: &[&str], out: &mut String) {
    let start = out.len();
    if rng.random_bool(0.2) {
        out.push_str(pick(rng, OPENERS));
        out.push_str(", ");
    }
    clause(rng, topic, cast, out);
    if rng.random_bool(0.35) {
        out.push_str(", ");
        out.push_str(pick(rng, CONNECTIVES));
        out.push(' ');
        clause(rng, topic, cast, out);
    }
    out.push(if rng.random_bool(0.1) { '!' } else { '.' });
    // capitalize the first letter
    if let Some(first) = out[start..].chars().next() {
        let upper = first.to_ascii_uppercase();
        out.replace_range(start..start + first.len_utf8(), &upper.to_string());
    }
}

fn paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    let topic: Vec<&str> = (0..4).map(|_| NOUNS[rng.random_range(0..NOUNS.len())]).collect();
    let cast: Vec<&str> = (0..2).map(|_| NAMES[rng.random_range(0..NAMES.len())]).collect();
    let n = rng.random_range(3..8);
    for i in 0..n {
        if i > 0 {
            out.push(' ');
        }
        sentence(rng, &topic, &cast, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_corpus(10_000, 7);
        let b = synthetic_corpus(10_000, 7);
        assert_eq!(a, b);
        assert!(a.len() >= 10_000);
        assert!(a.is_ascii());
        assert_ne!(a, synthetic_corpus(10_000, 8));
    }
}
