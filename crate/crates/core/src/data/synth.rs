//! Seeded generator for English-like prose.
//!
//! Produces text from a small phrase grammar with Zipf-weighted word
//! choice. It exists so the repository can ship a reproducible training
//! corpus with byte-level statistics close to ordinary English (letter
//! frequencies, word boundaries, punctuation, paragraph breaks).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::substream;

const NAMES: &[&str] = &[
    "Anna", "Thomas", "Mary", "John", "Elena", "Peter", "Clara", "Henry", "Sofia", "Walter",
    "Lucy", "Edward", "Martha", "Oliver", "Grace", "Samuel",
];
const NOUNS: &[&str] = &[
    "man", "woman", "house", "river", "city", "garden", "road", "letter", "king", "ship",
    "village", "door", "window", "child", "friend", "mountain", "horse", "book", "table",
    "forest", "morning", "evening", "voice", "field", "stone", "bridge", "harbour", "storm",
    "lamp", "winter", "summer", "doctor", "teacher", "farmer", "soldier", "market", "church",
    "tower", "island", "captain", "servant", "merchant", "valley", "garden wall", "kitchen",
    "mother", "father", "sister", "brother", "question", "answer", "story", "song", "fire",
    "rain", "wind", "sea", "boat", "carriage", "candle", "clock", "dog", "cat", "bird",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "small", "great", "quiet", "dark", "bright", "cold", "warm", "long",
    "little", "strange", "gentle", "heavy", "narrow", "empty", "green", "grey", "white",
    "broken", "distant", "proud", "tired", "happy", "silent", "ancient", "careful", "simple",
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "saw"), ("finds", "found"), ("opens", "opened"), ("carries", "carried"),
    ("follows", "followed"), ("watches", "watched"), ("remembers", "remembered"),
    ("leaves", "left"), ("reaches", "reached"), ("builds", "built"), ("keeps", "kept"),
    ("loves", "loved"), ("calls", "called"), ("brings", "brought"), ("hears", "heard"),
    ("knows", "knew"), ("takes", "took"), ("gives", "gave"), ("reads", "read"),
    ("writes", "wrote"), ("crosses", "crossed"), ("closes", "closed"), ("paints", "painted"),
];
const INTRANSITIVE: &[(&str, &str)] = &[
    ("walks", "walked"), ("waits", "waited"), ("sleeps", "slept"), ("smiles", "smiled"),
    ("returns", "returned"), ("speaks", "spoke"), ("listens", "listened"), ("laughs", "laughed"),
    ("works", "worked"), ("rests", "rested"), ("sings", "sang"), ("falls", "fell"),
];
const ADVERBS: &[&str] = &[
    "slowly", "quickly", "again", "quietly", "at last", "often", "never", "always", "once",
    "suddenly", "softly", "carefully", "gladly", "still",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "near", "across", "under", "behind", "beside", "through", "towards", "over",
    "along", "beyond",
];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "when", "until", "so", "though"];
const OPENERS: &[&str] = &[
    "In the morning", "After a while", "That night", "Long ago", "For many years",
    "On the next day", "At the end of the road", "Without a word", "Before the storm",
];
const SAYINGS: &[&str] = &[
    "I have waited long enough", "the road is longer than it looks", "we shall see",
    "nothing is lost", "come with me", "the river knows the way", "it is late",
    "there is time yet", "look at the sky",
];

/// Samples an index with probability proportional to 1/(rank+1).
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * h;
    for k in 0..n {
        u -= 1.0 / (k + 1) as f64;
        if u <= 0.0 {
            return k;
        }
    }
    n - 1
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[zipf(rng, words.len())]
}

fn pick_pair(rng: &mut ChaCha8Rng, words: &[(&'static str, &'static str)], past: bool) -> &'static str {
    let (present, p) = words[zipf(rng, words.len())];
    if past {
        p
    } else {
        present
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.15) {
        return pick(rng, NAMES).to_string();
    }
    let det = match rng.random_range(0..10) {
        0..=4 => "the",
        5..=6 => "a",
        7 => "his",
        8 => "her",
        _ => "their",
    };
    let noun = pick(rng, NOUNS);
    let mut s = if rng.random_bool(0.4) {
        format!("{det} {} {noun}", pick(rng, ADJECTIVES))
    } else {
        format!("{det} {noun}")
    };
    if det == "a" && s[2..].starts_with(['a', 'e', 'i', 'o', 'u']) {
        s.insert(1, 'n');
    }
    s
}

fn clause(rng: &mut ChaCha8Rng, past: bool) -> String {
    let subject = noun_phrase(rng);
    let mut s = if rng.random_bool(0.65) {
        format!("{subject} {} {}", pick_pair(rng, VERBS, past), noun_phrase(rng))
    } else {
        format!("{subject} {}", pick_pair(rng, INTRANSITIVE, past))
    };
    if rng.random_bool(0.35) {
        s = format!("{s} {}", pick(rng, ADVERBS));
    }
    if rng.random_bool(0.45) {
        s = format!("{s} {} {}", pick(rng, PREPOSITIONS), noun_phrase(rng));
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut ChaCha8Rng, past: bool) -> String {
    let body = match rng.random_range(0..10) {
        0..=3 => clause(rng, past),
        4..=6 => format!(
            "{} {} {}",
            clause(rng, past),
            pick(rng, CONNECTIVES),
            clause(rng, past)
        ),
        7 => format!("{}, {}", pick(rng, OPENERS), clause(rng, past)),
        8 => {
            let speaker = noun_phrase(rng);
            let verb = if past { "said" } else { "says" };
            return format!("\"{},\" {speaker} {verb}.", capitalize(pick(rng, SAYINGS)));
        }
        _ => {
            return format!(
                "Did {} {}?",
                noun_phrase(rng),
                pick_pair(rng, INTRANSITIVE, false).trim_end_matches('s')
            )
        }
    };
    format!("{}.", capitalize(&body))
}

/// Deterministic prose of exactly `len` bytes (ASCII only).
pub fn generate_text(seed: u64, len: usize) -> String {
    let mut rng = substream(seed, "corpus");
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        let past = rng.random_bool(0.7);
        let n = rng.random_range(3..9);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng, past));
        }
        out.push_str("\n\n");
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_ascii_of_requested_length() {
        let a = generate_text(1, 5000);
        assert_eq!(a.len(), 5000);
        assert!(a.is_ascii());
        assert_eq!(a, generate_text(1, 5000));
        assert_ne!(a, generate_text(2, 5000));
        assert!(a.contains(". "));
        assert!(a.contains("\n\n"));
    }

    #[test]
    fn articles_agree() {
        let t = generate_text(3, 50_000);
        for v in ["a old", "a empty", "a ancient", "a island"] {
            assert!(!t.contains(&format!(" {v} ")), "{v}");
        }
    }
}
