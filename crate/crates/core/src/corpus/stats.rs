use serde::{Deserialize, Serialize};

use super::{RawEntity, Sentence};

/// Dataset statistics in the layout of the usual nested-NER corpus tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub sentences_with_nested: usize,
    pub avg_sentence_length: f64,
    pub total_entities: usize,
    pub nested_entities: usize,
    pub nested_percentage: f64,
}

/// An entity is nested iff another entity of the same sentence contains it
/// or is contained by it. Identical spans with different classes count.
pub fn is_nested(e: &RawEntity, all: &[RawEntity]) -> bool {
    all.iter().any(|o| {
        o != e && ((o.start <= e.start && e.end <= o.end) || (e.start <= o.start && o.end <= e.end))
    })
}

pub fn corpus_stats(sentences: &[Sentence]) -> CorpusStats {
    let mut total = 0;
    let mut nested = 0;
    let mut with_nested = 0;
    let mut tokens = 0;
    for s in sentences {
        tokens += s.len();
        total += s.entities.len();
        let n = s
            .entities
            .iter()
            .filter(|e| is_nested(e, &s.entities))
            .count();
        nested += n;
        if n > 0 {
            with_nested += 1;
        }
    }
    CorpusStats {
        sentences: sentences.len(),
        sentences_with_nested: with_nested,
        avg_sentence_length: if sentences.is_empty() {
            0.0
        } else {
            tokens as f64 / sentences.len() as f64
        },
        total_entities: total,
        nested_entities: nested,
        nested_percentage: if total == 0 {
            0.0
        } else {
            100.0 * nested as f64 / total as f64
        },
    }
}
