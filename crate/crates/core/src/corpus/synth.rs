//! Seeded generator of nested-entity corpora with learnable surface cues.
//!
//! Every entity of class `c` opens with an open cue of `c` (`<per1`) and ends
//! with a close cue (`per2>`). Entities may contain other entities, and an
//! entity may be extended past its close by an extension cue (`org1>>`),
//! which yields a second entity sharing the same start token. The grammar
//! is unambiguous, so a perfect tagger exists for every generated corpus.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawEntity, Sentence};
use crate::error::{Error, Result};

const CLASS_NAMES: [&str; 7] = ["PER", "ORG", "GPE", "LOC", "FAC", "VEH", "WEA"];
const SYLLABLES: [&str; 12] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vo", "ne", "pi", "dar", "el", "gu",
];
const FILLER_POS: [&str; 8] = ["NN", "VB", "JJ", "RB", "IN", "DT", "CD", "PRP"];
const N_FILLERS: usize = 144;
const CUE_VARIANTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_classes: usize,
    pub max_depth: usize,
    /// Target fraction of entities that are nested, in `[0, 1]`.
    pub nesting_rate: f64,
    pub max_len: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_classes: 3,
            max_depth: 3,
            nesting_rate: 0.4,
            max_len: 20,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config(
                "synthetic corpus needs at least one class".into(),
            ));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nesting_rate) {
            return Err(Error::Config(format!(
                "nesting rate {} outside [0, 1]",
                self.nesting_rate
            )));
        }
        if self.nesting_rate > 0.0 && self.max_depth < 2 {
            return Err(Error::Config(
                "a positive nesting rate needs max_depth >= 2".into(),
            ));
        }
        let needed = 2 * self.max_depth + 1;
        if self.max_len < needed {
            return Err(Error::Config(format!(
                "max_len {} cannot hold an entity nested {} deep (needs {needed})",
                self.max_len, self.max_depth
            )));
        }
        Ok(())
    }
}

pub fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("C{c}"), |s| s.to_string())
}

fn filler_word(k: usize) -> String {
    let n = SYLLABLES.len();
    let mut w = String::new();
    w.push_str(SYLLABLES[k % n]);
    w.push_str(SYLLABLES[(k / n) % n]);
    if k.is_multiple_of(3) {
        w.push_str(SYLLABLES[(k * 7 + 5) % n]);
    }
    w
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    params: &'a SynthParams,
    tokens: Vec<String>,
    pos: Vec<String>,
    entities: Vec<RawEntity>,
    total: usize,
    nested: usize,
}

impl Builder<'_> {
    fn push(&mut self, word: String, tag: &str) {
        self.tokens.push(word);
        self.pos.push(tag.to_string());
    }

    fn filler(&mut self) {
        // Skewed towards low indices, like word frequencies.
        let u: f64 = self.rng.gen();
        let k = ((u * u) * N_FILLERS as f64) as usize;
        self.push(filler_word(k), FILLER_POS[k % FILLER_POS.len()]);
    }

    fn class(&mut self) -> usize {
        self.rng.gen_range(0..self.params.n_classes)
    }

    fn open(&mut self, c: usize) {
        let v = self.rng.gen_range(1..=CUE_VARIANTS);
        self.push(format!("<{}{v}", class_name(c).to_lowercase()), "DT");
    }

    fn close(&mut self, c: usize, extension: bool) {
        let v = self.rng.gen_range(1..=CUE_VARIANTS);
        let arrow = if extension { ">>" } else { ">" };
        self.push(format!("{}{v}{arrow}", class_name(c).to_lowercase()), "NNP");
    }

    fn record(&mut self, start: usize, c: usize, nested: bool) {
        self.entities.push(RawEntity {
            start,
            end: self.tokens.len() - 1,
            label: class_name(c),
        });
        self.total += 1;
        if nested {
            self.nested += 1;
        }
    }

    /// Open cue, one to three fillers, close cue. Needs 3 tokens.
    fn flat(&mut self, budget: usize, nested: bool) -> usize {
        let before = self.tokens.len();
        let c = self.class();
        let start = self.tokens.len();
        self.open(c);
        let body = self.rng.gen_range(1..=3usize.min(budget - 2));
        for _ in 0..body {
            self.filler();
        }
        self.close(c, false);
        self.record(start, c, nested);
        self.tokens.len() - before
    }

    /// A group of at least two mutually nested entities, at most `depth`
    /// levels deep. Needs 5 tokens.
    fn nested_group(&mut self, depth: usize, budget: usize) -> usize {
        debug_assert!(depth >= 2 && budget >= 5);
        let before = self.tokens.len();
        let start = self.tokens.len();
        let c = self.class();
        self.open(c);
        if self.rng.gen_bool(0.3) {
            // Shared start: the entity is closed, then extended to a second one.
            self.filler();
            if budget >= 7 && self.rng.gen_bool(0.5) {
                self.filler();
            }
            self.close(c, false);
            self.record(start, c, true);
            self.filler();
            let c2 = self.class();
            self.close(c2, true);
            self.record(start, c2, true);
        } else {
            // Containment: the body holds one inner entity and some fillers.
            let mut left = budget - 2;
            let lead = self.rng.gen_range(0..=1usize.min(left.saturating_sub(3)));
            for _ in 0..lead {
                self.filler();
            }
            left -= lead;
            let used = if depth >= 3 && left >= 5 && self.rng.gen_bool(0.35) {
                self.nested_group(depth - 1, left.min(9))
            } else {
                self.flat(left.min(5), true)
            };
            left -= used;
            if left > 0 && self.rng.gen_bool(0.5) {
                self.filler();
            }
            self.close(c, false);
            self.record(start, c, true);
        }
        self.tokens.len() - before
    }

    fn sentence(&mut self) -> Result<Sentence> {
        let p = self.params;
        let low = 5.max(p.max_len / 3).min(p.max_len);
        let target = self.rng.gen_range(low..=p.max_len);
        while self.tokens.len() < target {
            let budget = target - self.tokens.len();
            if budget >= 3 && self.rng.gen_bool(0.45) {
                let can_nest = p.max_depth >= 2 && budget >= 5 && p.nesting_rate > 0.0;
                let below_target =
                    (self.nested as f64) < p.nesting_rate * (self.total as f64 + 1.0);
                let want_nested = can_nest
                    && (p.nesting_rate >= 1.0
                        || self.rng.gen_bool(if below_target { 0.9 } else { 0.1 }));
                if want_nested {
                    self.nested_group(p.max_depth, budget);
                } else {
                    self.flat(budget, false);
                }
            } else {
                self.filler();
            }
        }
        let tokens = std::mem::take(&mut self.tokens);
        let pos = std::mem::take(&mut self.pos);
        let entities = std::mem::take(&mut self.entities);
        Sentence::new(tokens, Some(pos), entities)
    }
}

/// `n_sentences` sentences drawn from the cue grammar. A pure function of
/// `(seed, n_sentences, params)`.
pub fn generate_synthetic(
    seed: u64,
    n_sentences: usize,
    params: &SynthParams,
) -> Result<Vec<Sentence>> {
    params.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params,
        tokens: Vec::new(),
        pos: Vec::new(),
        entities: Vec::new(),
        total: 0,
        nested: 0,
    };
    (0..n_sentences).map(|_| b.sentence()).collect()
}
