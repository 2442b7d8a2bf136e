//! Sentences with typed, possibly nested entity spans; JSONL ingestion,
//! vocabularies, synthetic corpora and dataset statistics.

mod stats;
mod synth;
mod vocab;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use stats::{corpus_stats, is_nested, CorpusStats};
pub use synth::{generate_synthetic, SynthParams};
pub use vocab::{build_vocabs, Vocab, VocabKind, Vocabs};

/// POS tag used when the input has none.
pub const DEFAULT_POS: &str = "X";

/// A typed span with an inclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    pub class_id: usize,
}

impl Entity {
    pub fn new(start: usize, end: usize, class_id: usize) -> Self {
        Entity {
            start,
            end,
            class_id,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &Entity) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

/// A span whose class is still a string, as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RawEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

/// A tokenized sentence. Entity ids refer to a class [`Vocab`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub entities: Vec<RawEntity>,
}

impl Sentence {
    pub fn new(
        tokens: Vec<String>,
        pos: Option<Vec<String>>,
        mut entities: Vec<RawEntity>,
    ) -> Result<Self> {
        let pos = pos.unwrap_or_else(|| vec![DEFAULT_POS.to_string(); tokens.len()]);
        if tokens.is_empty() {
            return Err(Error::Invalid("sentence without tokens".into()));
        }
        if pos.len() != tokens.len() {
            return Err(Error::Invalid(format!(
                "{} tokens but {} POS tags",
                tokens.len(),
                pos.len()
            )));
        }
        for e in &entities {
            if e.start > e.end || e.end >= tokens.len() {
                return Err(Error::EntityRange {
                    start: e.start,
                    end: e.end,
                    len: tokens.len(),
                });
            }
        }
        entities.sort();
        entities.dedup();
        Ok(Sentence {
            tokens,
            pos,
            entities,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entities with class ids from `classes`; unknown labels are an error.
    pub fn typed_entities(&self, classes: &Vocab) -> Result<BTreeSet<Entity>> {
        self.entities
            .iter()
            .map(|e| {
                classes
                    .get(&e.label)
                    .map(|c| Entity::new(e.start, e.end, c))
                    .ok_or_else(|| {
                        Error::Incompatible(format!(
                            "entity class {:?} is not in the class vocabulary",
                            e.label
                        ))
                    })
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSentence {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<String>>,
    #[serde(default)]
    entities: Vec<RawEntity>,
}

/// Reads one sentence per non-blank line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path)
}

pub fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let raw: JsonSentence = serde_json::from_str(&line).map_err(|source| Error::Json {
            line: lineno,
            source,
        })?;
        let sentence =
            Sentence::new(raw.tokens, raw.pos, raw.entities).map_err(|e| Error::Corpus {
                line: lineno,
                message: e.to_string(),
            })?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        let line = sentence_to_json(s);
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn sentence_to_json(s: &Sentence) -> String {
    let raw = JsonSentence {
        tokens: s.tokens.clone(),
        pos: Some(s.pos.clone()),
        entities: s.entities.clone(),
    };
    serde_json::to_string(&raw).expect("sentence serializes")
}

/// Seeded shuffle split into train/dev/test.
///
/// Dev and test sizes are the rounded ratio shares; train takes the rest.
pub fn split(
    sentences: &[Sentence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Sentence>, Vec<Sentence>, Vec<Sentence>)> {
    if sentences.is_empty() {
        return Err(Error::Invalid("cannot split an empty corpus".into()));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let n = sentences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((b * n as f64).round() as usize).min(n);
    let n_test = ((c * n as f64).round() as usize).min(n - n_dev);
    let n_train = n - n_dev - n_test;
    let pick = |idx: &[usize]| {
        idx.iter()
            .map(|&i| sentences[i].clone())
            .collect::<Vec<_>>()
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}
