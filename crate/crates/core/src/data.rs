//! Character-level corpus loading, vocabulary sidecars and seeded batch windows.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Characters sorted by codepoint; the id of a character is its rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_chars(text.chars().collect())
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Ingest(format!("character {c:?} (U+{:04X}) is not in the vocabulary", c as u32))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| self.chars.get(i).copied().ok_or(Error::Index { what: "token id", index: i, bound: self.len() }))
            .collect()
    }

    /// One decimal codepoint per line, in id order.
    pub fn to_sidecar(&self) -> String {
        self.chars.iter().map(|&c| format!("{}\n", c as u32)).collect()
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cp: u32 = line.trim().parse().map_err(|_| Error::Ingest(format!("sidecar line {}: not a codepoint", n + 1)))?;
            let c = char::from_u32(cp).ok_or_else(|| Error::Ingest(format!("sidecar line {}: invalid codepoint {cp}", n + 1)))?;
            chars.push(c);
        }
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ingest("sidecar codepoints must be strictly increasing".into()));
        }
        Ok(Self::from_chars(chars))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_sidecar())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_sidecar(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Token ids with a contiguous tail held out for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub vocab: Vocab,
    /// First eval position; `ids[..train_end]` is the training split.
    pub train_end: usize,
}

impl Corpus {
    pub fn from_text(text: &str, eval_fraction: f64) -> Result<Self> {
        Self::with_vocab(text, Vocab::from_text(text), eval_fraction)
    }

    /// Tokenizes with a fixed vocabulary, e.g. the one a checkpoint was trained with.
    pub fn with_vocab(text: &str, vocab: Vocab, eval_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Ingest("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Argument(format!("eval_fraction must lie in [0, 1), got {eval_fraction}")));
        }
        let ids = vocab.encode(text)?;
        let eval_len = (ids.len() as f64 * eval_fraction).round() as usize;
        let train_end = ids.len() - eval_len;
        Ok(Self { ids, vocab, train_end })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.ids[..self.train_end],
            Split::Eval => &self.ids[self.train_end..],
        }
    }

    pub fn train(&self) -> &[usize] {
        self.split(Split::Train)
    }

    pub fn eval(&self) -> &[usize] {
        self.split(Split::Eval)
    }
}

pub fn load_corpus(path: impl AsRef<Path>, eval_fraction: f64) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Ingest(format!("{}: not UTF-8 ({e})", path.display())))?;
    Corpus::from_text(&text, eval_fraction)
}

/// One batch of windows: `inputs[b·T..]` and `targets` shifted by one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub starts: Vec<usize>,
}

/// Endless iterator of random windows from one split.
#[derive(Clone, Debug)]
pub struct Batches<'a> {
    ids: &'a [usize],
    t: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batches<'_> {
    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut b = Batch {
            inputs: Vec::with_capacity(self.batch_size * self.t),
            targets: Vec::with_capacity(self.batch_size * self.t),
            starts: Vec::with_capacity(self.batch_size),
        };
        for _ in 0..self.batch_size {
            // the window plus its shifted target must fit: start + T < len
            let start = self.rng.random_range(0..self.ids.len() - self.t);
            b.inputs.extend_from_slice(&self.ids[start..start + self.t]);
            b.targets.extend_from_slice(&self.ids[start + 1..start + self.t + 1]);
            b.starts.push(start);
        }
        Some(b)
    }
}

pub fn batches(corpus: &Corpus, split: Split, t: usize, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    let ids = corpus.split(split);
    if t == 0 || batch_size == 0 {
        return Err(Error::Argument("window length and batch size must be positive".into()));
    }
    if t >= ids.len() {
        return Err(Error::Argument(format!("window length {t} needs a split longer than {} tokens", ids.len())));
    }
    Ok(Batches { ids, t, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) })
}

/// Deterministic English-like text: sentences drawn from a seeded word-level
/// Markov chain over a fixed lexicon, grouped into paragraphs.
///
/// Dependencies are mostly local, so a model that handles position well can
/// keep its short-context perplexity on much longer windows.
pub fn synthetic_text(n_chars: usize, seed: u64) -> String {
    const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st"];
    const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ou"];
    const CODAS: [&str; 6] = ["", "n", "r", "s", "t", "l"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..160)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            (0..syllables)
                .map(|_| {
                    let o = ONSETS[rng.random_range(0..ONSETS.len())];
                    let n = NUCLEI[rng.random_range(0..NUCLEI.len())];
                    let c = CODAS[rng.random_range(0..CODAS.len())];
                    format!("{o}{n}{c}")
                })
                .collect()
        })
        .collect();
    // each word has a short list of likely successors
    let successors: Vec<Vec<usize>> =
        (0..lexicon.len()).map(|_| (0..4).map(|_| rng.random_range(0..lexicon.len())).collect()).collect();
    let mut out = String::with_capacity(n_chars + 64);
    let mut sentences_in_par = 0;
    while out.len() < n_chars {
        let len = rng.random_range(4..=11);
        let mut w = rng.random_range(0..lexicon.len());
        for i in 0..len {
            let word = &lexicon[w];
            if i == 0 {
                let mut cs = word.chars();
                let first = cs.next().expect("non-empty word");
                out.extend(first.to_uppercase());
                out.push_str(cs.as_str());
            } else {
                out.push_str(word);
            }
            if i + 1 < len {
                out.push(if i == len / 2 && rng.random_bool(0.3) { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
            w = if rng.random_bool(0.8) {
                successors[w][rng.random_range(0..4)]
            } else {
                rng.random_range(0..lexicon.len())
            };
        }
        out.push(if rng.random_bool(0.15) { '?' } else { '.' });
        sentences_in_par += 1;
        if sentences_in_par >= rng.random_range(3..8) {
            out.push('\n');
            sentences_in_par = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(n_chars);
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn small_vocab_example() {
        let c = Corpus::from_text("aab", 0.0).unwrap();
        assert_eq!(c.vocab.chars(), &['a', 'b']);
        assert_eq!(c.ids, vec![0, 0, 1]);
        assert_eq!(c.train(), &[0, 0, 1]);
        assert!(c.eval().is_empty());
    }

    #[test]
    fn eval_split_size() {
        let text = "ab".repeat(500_000);
        let c = Corpus::from_text(&text, 0.01).unwrap();
        assert_eq!(c.eval().len(), 10_000);
        assert_eq!(c.train().len() + c.eval().len(), 1_000_000);
    }

    #[test]
    fn loading_is_deterministic_and_validates_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, synthetic_text(5000, 1)).unwrap();
        assert_eq!(load_corpus(&path, 0.1).unwrap(), load_corpus(&path, 0.1).unwrap());
        fs::write(&path, "").unwrap();
        assert!(matches!(load_corpus(&path, 0.1), Err(Error::Ingest(_))));
        fs::write(&path, [0x66, 0xff, 0xfe]).unwrap();
        assert!(matches!(load_corpus(&path, 0.1), Err(Error::Ingest(_))));
        assert!(matches!(load_corpus(dir.path().join("nope.txt"), 0.1), Err(Error::Ingest(_))));
    }

    #[test]
    fn window_example_and_bounds() {
        let c = Corpus { ids: vec![5, 6, 7, 8], vocab: Vocab::from_chars(vec!['a']), train_end: 4 };
        let b = batches(&c, Split::Train, 3, 4, 0).unwrap().next().unwrap();
        assert_eq!(b.inputs, vec![5, 6, 7].repeat(4));
        assert_eq!(b.targets, vec![6, 7, 8].repeat(4));
        assert!(matches!(batches(&c, Split::Train, 4, 1, 0), Err(Error::Argument(_))));
        assert!(matches!(batches(&c, Split::Eval, 1, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn windows_are_seeded_and_inside_the_split() {
        let c = Corpus::from_text(&synthetic_text(3000, 2), 0.2).unwrap();
        let a: Vec<Batch> = batches(&c, Split::Train, 16, 3, 7).unwrap().take(20).collect();
        let b: Vec<Batch> = batches(&c, Split::Train, 16, 3, 7).unwrap().take(20).collect();
        assert_eq!(a, b);
        let other: Vec<Batch> = batches(&c, Split::Train, 16, 3, 8).unwrap().take(20).collect();
        assert_ne!(a, other);
        for batch in batches(&c, Split::Eval, 16, 4, 1).unwrap().take(200) {
            for &s in &batch.starts {
                assert!(s + 16 < c.eval().len());
            }
        }
        for batch in &a {
            for &s in &batch.starts {
                assert!(s + 16 < c.train_end);
            }
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let v = Vocab::from_text("héllo wörld\n");
        let back = Vocab::from_sidecar(&v.to_sidecar()).unwrap();
        assert_eq!(v, back);
        assert!(v.to_sidecar().starts_with("10\n32\n"));
        assert!(Vocab::from_sidecar("98\n97\n").is_err());
        assert!(Vocab::from_sidecar("x\n").is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        let a = synthetic_text(20_000, 3);
        assert_eq!(a, synthetic_text(20_000, 3));
        assert_ne!(a, synthetic_text(20_000, 4));
        assert_eq!(a.len(), 20_000);
        let v = Vocab::from_text(&a);
        assert!(v.len() > 20 && v.len() < 60, "{}", v.len());
    }

    proptest! {
        #[test]
        fn tokenize_round_trip(s in "\\PC{1,200}") {
            let v = Vocab::from_text(&s);
            let ids = v.encode(&s).unwrap();
            prop_assert!(ids.iter().all(|&i| i < v.len()));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
