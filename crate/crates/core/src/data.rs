//! Byte-level tokenization, corpus splits and seeded batch sampling.
//!
//! A corpus file is raw bytes; documents are separated by `0x00`. Each
//! document becomes `BOS bytes... EOS` and the documents are concatenated
//! into one token stream, which is cut into contiguous train / calibration
//! pool / evaluation ranges.
//!
//! [`sample_batch`] divides a split into `floor(len / seq_len)` aligned
//! slots, shifts them by a random phase in `[0, len mod seq_len]`, and picks
//! `n` distinct slots with a partial Fisher–Yates shuffle driven by
//! [`SplitMix64`] seeded with `seed`. Each call is pure.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Drops BOS/EOS markers and maps the remaining ids back to bytes.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    CalibPool,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::CalibPool => "calib-pool",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calib" | "calib-pool" => Ok(Split::CalibPool),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Fractions of the token stream given to the train and calibration-pool
/// splits; the remainder is the evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub calib: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.90,
            calib: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub tokens: Vec<u32>,
    /// Half-open token ranges `[train, calib-pool, eval]`.
    pub ranges: [std::ops::Range<usize>; 3],
}

impl Corpus {
    pub fn from_bytes(name: &str, bytes: &[u8], ratios: SplitRatios) -> Result<Self> {
        if !(ratios.train > 0.0 && ratios.calib > 0.0 && ratios.train + ratios.calib < 1.0) {
            return Err(Error::invalid(
                "split",
                format!("ratios {}/{} leave no eval split", ratios.train, ratios.calib),
            ));
        }
        let mut docs: Vec<&[u8]> = bytes.split(|&b| b == 0).collect();
        if docs.len() > 1 && docs.last().is_some_and(|d| d.is_empty()) {
            docs.pop();
        }
        let tokens: Vec<u32> = docs.into_iter().flat_map(tokenize).collect();
        let n = tokens.len();
        let a = (n as f64 * ratios.train).round() as usize;
        let b = (n as f64 * (ratios.train + ratios.calib)).round() as usize;
        Ok(Corpus {
            name: name.to_string(),
            tokens,
            ranges: [0..a, a..b, b..n],
        })
    }

    pub fn load(path: &Path, ratios: SplitRatios) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(&name, &bytes, ratios)
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => self.ranges[0].clone(),
            Split::CalibPool => self.ranges[1].clone(),
            Split::Eval => self.ranges[2].clone(),
        }
    }

    pub fn split(&self, split: Split) -> &[u32] {
        &self.tokens[self.range(split)]
    }

    /// Consecutive non-overlapping windows covering the start of a split.
    pub fn windows(&self, split: Split, seq_len: usize) -> Vec<Vec<u32>> {
        self.split(split)
            .chunks_exact(seq_len)
            .map(<[u32]>::to_vec)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub samples: Vec<Vec<u32>>,
    pub seed: u64,
    pub split: Split,
    pub seq_len: usize,
    /// Absolute token offset of each sample in the corpus.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

pub fn sample_batch(corpus: &Corpus, split: Split, seed: u64, n: usize, seq_len: usize) -> Result<Batch> {
    if n == 0 || seq_len == 0 {
        return Err(Error::invalid("batch", "n and seq_len must be positive"));
    }
    let range = corpus.range(split);
    let len = range.len();
    let slots = len / seq_len;
    if slots < n {
        return Err(Error::SplitTooSmall {
            split: split.name(),
            available: len,
            needed: n * seq_len,
        });
    }
    let mut rng = SplitMix64::new(seed);
    let phase = rng.below((len - slots * seq_len) as u64 + 1) as usize;
    let mut order: Vec<usize> = (0..slots).collect();
    for i in 0..n {
        let j = i + rng.below((slots - i) as u64) as usize;
        order.swap(i, j);
    }
    let offsets: Vec<usize> = order[..n]
        .iter()
        .map(|&s| range.start + phase + s * seq_len)
        .collect();
    let samples = offsets
        .iter()
        .map(|&o| corpus.tokens[o..o + seq_len].to_vec())
        .collect();
    Ok(Batch {
        samples,
        seed,
        split,
        seq_len,
        offsets,
    })
}

pub mod synthetic {
    //! Deterministic mixed-genre text for experiments without external data.
    //!
    //! Documents are drawn from five genres (narrative prose, arithmetic
    //! drills, key/value records, code-like snippets and dialogue) so that
    //! different windows of the corpus exercise different model circuitry.

    use crate::rng::SplitMix64;

    const NOUNS: &[&str] = &[
        "river", "garden", "engine", "teacher", "window", "forest", "market", "letter",
        "mountain", "harbor", "village", "lantern", "captain", "student", "bridge", "kitchen",
        "signal", "meadow", "library", "compass", "painter", "orchard", "station", "ladder",
    ];
    const ADJS: &[&str] = &[
        "quiet", "bright", "old", "narrow", "golden", "cold", "busy", "gentle", "tall",
        "hidden", "silver", "broken", "early", "distant", "careful", "small",
    ];
    const VERBS: &[&str] = &[
        "watched", "carried", "found", "opened", "followed", "painted", "crossed", "repaired",
        "visited", "remembered", "described", "measured",
    ];
    const NAMES: &[&str] = &[
        "alice", "bruno", "chen", "dara", "emil", "fatima", "goran", "hana", "ivan", "jun",
    ];
    const CITIES: &[&str] = &["paris", "lagos", "lima", "oslo", "kyoto", "cairo", "quito", "perth"];
    const IDENTS: &[&str] = &["count", "total", "index", "value", "limit", "offset", "width", "sum"];

    fn pick<'a>(rng: &mut SplitMix64, xs: &[&'a str]) -> &'a str {
        xs[rng.below(xs.len() as u64) as usize]
    }

    fn prose(rng: &mut SplitMix64, out: &mut String) {
        let sentences = 3 + rng.below(6);
        for _ in 0..sentences {
            let a = pick(rng, ADJS);
            let n1 = pick(rng, NOUNS);
            let v = pick(rng, VERBS);
            let n2 = pick(rng, NOUNS);
            let mut s = format!("the {a} {n1} {v} the {n2}");
            if rng.below(3) == 0 {
                s.push_str(&format!(" near the {} {}", pick(rng, ADJS), pick(rng, NOUNS)));
            }
            let mut chars = s.chars();
            let first = chars.next().unwrap().to_ascii_uppercase();
            out.push(first);
            out.extend(chars);
            out.push_str(". ");
        }
        out.push('\n');
    }

    fn arithmetic(rng: &mut SplitMix64, out: &mut String) {
        let lines = 4 + rng.below(8);
        for _ in 0..lines {
            let a = rng.below(50);
            let b = rng.below(50);
            if rng.below(2) == 0 {
                out.push_str(&format!("{a} + {b} = {}\n", a + b));
            } else {
                let (hi, lo) = (a.max(b), a.min(b));
                out.push_str(&format!("{hi} - {lo} = {}\n", hi - lo));
            }
        }
    }

    fn records(rng: &mut SplitMix64, out: &mut String) {
        let lines = 3 + rng.below(6);
        for _ in 0..lines {
            out.push_str(&format!(
                "name: {}; age: {}; city: {}\n",
                pick(rng, NAMES),
                18 + rng.below(60),
                pick(rng, CITIES)
            ));
        }
    }

    fn code(rng: &mut SplitMix64, out: &mut String) {
        let f = pick(rng, IDENTS);
        let x = pick(rng, IDENTS);
        let k = 1 + rng.below(9);
        out.push_str(&format!("fn {f}_of({x}: u32) -> u32 {{\n"));
        let body = 1 + rng.below(3);
        for _ in 0..body {
            let y = pick(rng, IDENTS);
            out.push_str(&format!("    let {y} = {x} * {k} + {};\n", rng.below(10)));
        }
        out.push_str(&format!("    {x} + {k}\n}}\n"));
    }

    fn dialogue(rng: &mut SplitMix64, out: &mut String) {
        let turns = 2 + rng.below(5);
        for _ in 0..turns {
            let who = pick(rng, NAMES);
            let n = pick(rng, NOUNS);
            if rng.below(2) == 0 {
                out.push_str(&format!("{who}: where is the {n}?\n"));
            } else {
                out.push_str(&format!("{who}: the {n} is in {}.\n", pick(rng, CITIES)));
            }
        }
    }

    /// Generates `docs` documents separated by `0x00`.
    pub fn generate(seed: u64, docs: usize) -> Vec<u8> {
        let mut rng = SplitMix64::new(seed);
        let mut out = Vec::new();
        for i in 0..docs {
            let mut text = String::new();
            match rng.below(5) {
                0 => prose(&mut rng, &mut text),
                1 => arithmetic(&mut rng, &mut text),
                2 => records(&mut rng, &mut text),
                3 => code(&mut rng, &mut text),
                _ => dialogue(&mut rng, &mut text),
            }
            out.extend_from_slice(text.as_bytes());
            if i + 1 < docs {
                out.push(0);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document() {
        assert_eq!(tokenize(b""), vec![BOS, EOS]);
        assert_eq!(tokenize(b"A")[1], 65);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }
    }

    fn corpus() -> Corpus {
        Corpus::from_bytes("t", &synthetic::generate(1, 400), SplitRatios::default()).unwrap()
    }

    #[test]
    fn splits_partition_the_stream() {
        let c = corpus();
        assert_eq!(c.ranges[0].start, 0);
        assert_eq!(c.ranges[0].end, c.ranges[1].start);
        assert_eq!(c.ranges[1].end, c.ranges[2].start);
        assert_eq!(c.ranges[2].end, c.tokens.len());
        assert!(c.tokens.iter().all(|&t| t < 258));
    }

    #[test]
    fn documents_are_delimited() {
        let c = Corpus::from_bytes("t", b"ab\0\0c\0", SplitRatios::default()).unwrap();
        assert_eq!(c.tokens, vec![BOS, 97, 98, EOS, BOS, EOS, BOS, 99, EOS]);
    }

    #[test]
    fn sampling_is_deterministic_and_disjoint() {
        let c = corpus();
        let a = sample_batch(&c, Split::CalibPool, 7, 4, 32).unwrap();
        let b = sample_batch(&c, Split::CalibPool, 7, 4, 32).unwrap();
        assert_eq!(a, b);
        let r = c.range(Split::CalibPool);
        let mut offs = a.offsets.clone();
        offs.sort();
        for w in offs.windows(2) {
            assert!(w[1] >= w[0] + 32);
        }
        assert!(offs.iter().all(|&o| o >= r.start && o + 32 <= r.end));
        assert_ne!(a, sample_batch(&c, Split::CalibPool, 8, 4, 32).unwrap());
    }

    #[test]
    fn split_too_small() {
        let c = corpus();
        let len = c.split(Split::Eval).len();
        assert!(matches!(
            sample_batch(&c, Split::Eval, 0, len / 16 + 1, 16),
            Err(Error::SplitTooSmall { .. })
        ));
    }
}
