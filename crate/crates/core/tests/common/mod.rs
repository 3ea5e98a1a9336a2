//! Shared fixtures for integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the old man", "a young woman", "the farmer", "my brother", "the teacher", "her friend", "the captain",
    "a small child", "the doctor", "our neighbour", "the king", "the merchant", "a tired traveller", "the cook",
    "his mother", "the soldier", "a quiet girl", "the baker", "the sailor", "the painter",
];
const VERBS: &[&str] = &[
    "walked to", "looked at", "carried", "found", "opened", "closed", "painted", "remembered", "watched",
    "followed", "cleaned", "visited", "left", "noticed", "bought", "sold", "repaired", "described", "wanted",
    "forgot",
];
const OBJECTS: &[&str] = &[
    "the red door", "a wooden box", "the long road", "the river", "an old letter", "the green hill",
    "the market", "a silver coin", "the broken chair", "the window", "a warm loaf of bread", "the garden",
    "the tall tower", "a heavy stone", "the little boat", "the dark forest", "a bright lamp", "the village",
    "the narrow bridge", "a blue cup",
];
const TAILS: &[&str] = &[
    "in the morning", "before the rain", "after dinner", "with great care", "without a word", "at night",
    "for a long time", "once again", "near the sea", "in silence", "on a cold day", "with his hands",
    "as the sun set", "every evening", "in the spring",
];
const LINKS: &[&str] = &["and then", "but later", "so", "because", "while", "although"];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn clause<R: Rng>(rng: &mut R) -> String {
    let mut s = format!(
        "{} {} {}",
        SUBJECTS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap()
    );
    if rng.random_bool(0.5) {
        s.push(' ');
        s.push_str(TAILS.choose(rng).unwrap());
    }
    s
}

/// Deterministic pseudo-English prose of at least `min_bytes` bytes.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    while out.len() < min_bytes {
        let n = rng.random_range(2..6);
        for _ in 0..n {
            let mut sentence = clause(&mut rng);
            if rng.random_bool(0.4) {
                sentence = format!("{sentence}, {} {}", LINKS.choose(&mut rng).unwrap(), clause(&mut rng));
            }
            out.push_str(&capitalize(&sentence));
            out.push_str(if rng.random_bool(0.1) { "! " } else { ". " });
        }
        out.pop();
        out.push('\n');
    }
    out.into_bytes()
}

/// Training text: the file named by `XSA_CORPUS` when set, otherwise 1.2 MB
/// of synthetic prose.
pub fn corpus() -> Vec<u8> {
    match std::env::var_os("XSA_CORPUS") {
        Some(path) => std::fs::read(&path).unwrap_or_else(|e| panic!("reading {path:?}: {e}")),
        None => synthetic_text(1_200_000, 2024),
    }
}
