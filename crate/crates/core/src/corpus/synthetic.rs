use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A fixed set of random lowercase words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub words: Vec<String>,
}

impl Lexicon {
    /// `size` distinct words with lengths drawn uniformly from `min_len..=max_len`.
    pub fn random(size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if size == 0 || min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("bad lexicon shape: {size} words of {min_len}..={max_len} letters")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = Vec::with_capacity(size);
        let mut attempts = 0;
        while words.len() < size {
            attempts += 1;
            if attempts > 1000 * size {
                return Err(Error::Config("cannot draw that many distinct words".into()));
            }
            let len = rng.gen_range(min_len..=max_len);
            let w: String = (0..len).map(|_| rng.gen_range('a'..='z')).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Ok(Self { words })
    }
}

/// Words from the lexicon drawn uniformly and joined by single spaces,
/// cut to exactly `chars` characters.
pub fn lexicon_text(lexicon: &Lexicon, chars: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(chars + 16);
    while out.len() < chars {
        out.push_str(lexicon.words.choose(&mut rng).expect("non-empty lexicon"));
        out.push(' ');
    }
    out.truncate(chars);
    out
}

/// Entropy in bits of the symbol frequencies of a stream.
pub fn unigram_entropy_bits(stream: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &s in stream {
        *counts.entry(s).or_insert(0usize) += 1;
    }
    let n = stream.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}
