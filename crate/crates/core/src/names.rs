//! Invented two-word celebrity names for the toy world.

use std::collections::HashSet;

use rand::Rng;

use crate::rng;
use crate::text::BASE_WORDS;

const ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr",
    "st", "th",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const CODAS: [&str; 10] = ["", "", "n", "r", "l", "s", "x", "nd", "rk", "ll"];

fn word(r: &mut impl Rng, syllables: usize) -> String {
    let mut w = String::new();
    for i in 0..syllables {
        w.push_str(ONSETS[r.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[r.random_range(0..VOWELS.len())]);
        if i + 1 == syllables {
            w.push_str(CODAS[r.random_range(0..CODAS.len())]);
        }
    }
    let mut c = w.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => w,
    }
}

/// `count` distinct names. No word is shared between two names or with the
/// base vocabulary, so every name owns its tokens.
pub fn invent(count: usize, seed: u64) -> Vec<String> {
    let mut r = rng::rng(rng::derive_seed(seed, &["names"]));
    let mut used: HashSet<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let first = word(&mut r, 2);
        let syllables = r.random_range(1..=2);
        let last = word(&mut r, syllables);
        let (fl, ll) = (first.to_lowercase(), last.to_lowercase());
        if fl == ll || used.contains(&fl) || used.contains(&ll) {
            continue;
        }
        used.insert(fl);
        used.insert(ll);
        out.push(format!("{first} {last}"));
    }
    out
}
