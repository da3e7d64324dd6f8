//! Text ingestion, the character vocabulary, splits and batch geometry.

mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{lexicon_text, unigram_entropy_bits, Lexicon};

use crate::error::{Error, Result};

/// Character table built from the training split, in ascending code-point
/// order, plus one trailing index for characters it has never seen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl From<Vec<char>> for Vocab {
    fn from(chars: Vec<char>) -> Self {
        Self::from_chars(chars)
    }
}

impl From<Vocab> for Vec<char> {
    fn from(v: Vocab) -> Self {
        v.chars
    }
}

/// Stand-in printed for the unknown index.
pub const UNKNOWN_CHAR: char = '\u{fffd}';

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::from_chars(chars)
    }

    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of classes, including the unknown index.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn unknown(&self) -> usize {
        self.chars.len()
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.unknown())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    pub fn decode(&self, symbols: &[usize]) -> String {
        symbols.iter().map(|&s| self.chars.get(s).copied().unwrap_or(UNKNOWN_CHAR)).collect()
    }
}

/// How to cut a corpus into train / valid / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    Fractions([f64; 3]),
    /// Character counts; they must add up to the corpus length.
    Counts([usize; 3]),
}

impl SplitSpec {
    /// `0.9,0.05,0.05` gives fractions, `90,5,5` gives counts.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("split needs three comma-separated parts, got {s:?}")));
        }
        if parts.iter().all(|p| p.parse::<usize>().is_ok()) {
            let v: Vec<usize> = parts.iter().map(|p| p.parse().expect("checked")).collect();
            return Ok(SplitSpec::Counts([v[0], v[1], v[2]]));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| Error::Config(format!("bad split part {p:?}")))?;
        }
        Ok(SplitSpec::Fractions(v))
    }

    /// Split lengths for a corpus of `n` characters.
    pub fn lengths(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitSpec::Counts(c) => {
                if c.iter().sum::<usize>() != n {
                    return Err(Error::Ingestion(format!("split counts {c:?} do not add up to {n} characters")));
                }
                Ok(c)
            }
            SplitSpec::Fractions(f) => {
                if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Ingestion(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
                }
                let train = ((n as f64) * f[0]).round() as usize;
                let valid = (((n as f64) * f[1]).round() as usize).min(n - train.min(n));
                let train = train.min(n);
                Ok([train, valid, n - train - valid])
            }
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions([0.9, 0.05, 0.05])
    }
}

/// Encoded splits of one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn from_text(text: &str, split: SplitSpec) -> Result<Self> {
        let chars: Vec<char> = text.chars().collect();
        let [a, b, c] = split.lengths(chars.len())?;
        for (name, len) in [("train", a), ("valid", b), ("test", c)] {
            if len == 0 {
                return Err(Error::Ingestion(format!("{name} split is empty")));
            }
        }
        let train: String = chars[..a].iter().collect();
        let vocab = Vocab::from_text(&train);
        let enc = |s: &[char]| s.iter().map(|&ch| vocab.index_of(ch)).collect::<Vec<_>>();
        Ok(Self {
            train: enc(&chars[..a]),
            valid: enc(&chars[a..a + b]),
            test: enc(&chars[a + b..]),
            vocab,
        })
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Reads a UTF-8 text file and splits it.
pub fn load_and_split(path: &Path, split: SplitSpec) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Corpus::from_text(&text, split)
}

/// A stream cut into `lanes` equal contiguous lanes read `window` steps at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    lanes: Vec<Vec<usize>>,
    window: usize,
    windows: usize,
}

impl BatchPlan {
    pub fn new(stream: &[usize], lanes: usize, window: usize) -> Result<Self> {
        if lanes == 0 || window == 0 {
            return Err(Error::Config("batch size and window length must be at least 1".into()));
        }
        if stream.len() < lanes * (window + 1) {
            return Err(Error::Usage(format!(
                "a stream of {} symbols cannot fill {lanes} lanes of {} symbols",
                stream.len(),
                window + 1
            )));
        }
        let lane_len = stream.len() / lanes;
        Ok(Self {
            lanes: stream[..lane_len * lanes].chunks(lane_len).map(<[usize]>::to_vec).collect(),
            window,
            windows: (lane_len - 1) / window,
        })
    }

    pub fn lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn lane_len(&self) -> usize {
        self.lanes[0].len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Windows per lane in one epoch.
    pub fn windows(&self) -> usize {
        self.windows
    }

    /// Inputs and targets of window `k` in lane `lane`.
    pub fn window_slices(&self, lane: usize, k: usize) -> (&[usize], &[usize]) {
        let start = k * self.window;
        let l = &self.lanes[lane];
        (&l[start..start + self.window], &l[start + 1..start + self.window + 1])
    }

    /// Inputs and targets of window `k` for every lane.
    pub fn batch(&self, k: usize) -> (Vec<&[usize]>, Vec<&[usize]>) {
        (0..self.lanes()).map(|b| self.window_slices(b, k)).unzip()
    }
}

pub fn plan_batches(stream: &[usize], lanes: usize, window: usize) -> Result<BatchPlan> {
    BatchPlan::new(stream, lanes, window)
}
