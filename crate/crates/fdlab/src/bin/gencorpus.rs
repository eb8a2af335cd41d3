//! Deterministic generator for the bundled desk-scale corpus.
//!
//! Emits a synthetic English-like language from a small template grammar
//! with noun-class/verb agreement, so models have real structure to
//! learn. Regenerating with the same seed reproduces the files byte for
//! byte.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240917;
const TRAIN_BYTES: usize = 1_000_000;
const HELDOUT_BYTES: usize = 60_000;

fn pseudowords(rng: &mut ChaCha8Rng, n: usize, min_syl: usize, max_syl: usize) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr",
        "kl", "pl", "st", "tr",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ei", "ou"];
    const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "t", "k", "m"];
    let mut words = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while words.len() < n {
        let syl = rng.gen_range(min_syl..=max_syl);
        let mut w = String::new();
        for _ in 0..syl {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct Grammar {
    nouns_a: Vec<String>,
    nouns_b: Vec<String>,
    verbs_a: Vec<String>,
    verbs_b: Vec<String>,
    adjectives: Vec<String>,
    adverbs: Vec<String>,
}

impl Grammar {
    fn build(rng: &mut ChaCha8Rng) -> Self {
        let nouns = pseudowords(rng, 80, 2, 3);
        let verbs = pseudowords(rng, 40, 2, 2);
        Grammar {
            nouns_a: nouns[..40].to_vec(),
            nouns_b: nouns[40..].to_vec(),
            verbs_a: verbs[..20].to_vec(),
            verbs_b: verbs[20..].to_vec(),
            adjectives: pseudowords(rng, 25, 2, 3),
            adverbs: pseudowords(rng, 15, 3, 3),
        }
    }

    /// One sentence; verbs agree with the subject's noun class, which is
    /// the long-range dependency the models must pick up.
    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        const DETS: &[&str] = &["the", "a", "one", "this", "each"];
        const PREPS: &[&str] = &["in", "on", "under", "near", "with"];
        let mut s = String::new();
        let class_a = rng.gen_bool(0.5);
        let (nouns, verbs) = if class_a {
            (&self.nouns_a, &self.verbs_a)
        } else {
            (&self.nouns_b, &self.verbs_b)
        };
        let pick = |rng: &mut ChaCha8Rng, v: &[String]| v[rng.gen_range(0..v.len())].clone();
        s.push_str(DETS[rng.gen_range(0..DETS.len())]);
        if rng.gen_bool(0.35) {
            let _ = write!(s, " {}", pick(rng, &self.adjectives));
        }
        let _ = write!(s, " {}", pick(rng, nouns));
        let _ = write!(s, " {}", pick(rng, verbs));
        if rng.gen_bool(0.6) {
            s.push(' ');
            s.push_str(DETS[rng.gen_range(0..DETS.len())]);
            if rng.gen_bool(0.25) {
                let _ = write!(s, " {}", pick(rng, &self.adjectives));
            }
            let all = if rng.gen_bool(0.5) {
                &self.nouns_a
            } else {
                &self.nouns_b
            };
            let _ = write!(s, " {}", pick(rng, all));
        }
        if rng.gen_bool(0.3) {
            let prep = PREPS[rng.gen_range(0..PREPS.len())];
            let det = DETS[rng.gen_range(0..DETS.len())];
            let pool = if rng.gen_bool(0.5) {
                &self.nouns_a
            } else {
                &self.nouns_b
            };
            let noun = pick(rng, pool);
            let _ = write!(s, " {prep} {det} {noun}");
        }
        if rng.gen_bool(0.2) {
            let _ = write!(s, " {}", pick(rng, &self.adverbs));
        }
        s
    }
}

fn emit(grammar: &Grammar, rng: &mut ChaCha8Rng, bytes: usize) -> String {
    let mut out = String::with_capacity(bytes + 128);
    while out.len() < bytes {
        out.push_str(&grammar.sentence(rng));
        out.push('\n');
    }
    out
}

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/desk"));
    std::fs::create_dir_all(&dir).expect("create data dir");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let grammar = Grammar::build(&mut rng);
    for (name, bytes) in [
        ("train.txt", TRAIN_BYTES),
        ("valid.txt", HELDOUT_BYTES),
        ("test.txt", HELDOUT_BYTES),
    ] {
        let text = emit(&grammar, &mut rng, bytes);
        std::fs::write(dir.join(name), &text).expect("write split");
        println!("{}: {} bytes", dir.join(name).display(), text.len());
    }
}
