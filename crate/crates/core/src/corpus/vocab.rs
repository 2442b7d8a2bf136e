use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::Sentence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    Word,
    Char,
    Pos,
    Class,
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Dense symbol ↔ index map. Word, char and POS vocabularies reserve index
/// 0 for padding and 1 for unknown symbols; the class vocabulary has no
/// specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    kind: VocabKind,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    kind: VocabKind,
    symbols: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_symbols(r.kind, r.symbols)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            kind: v.kind,
            symbols: v.symbols,
        }
    }
}

impl Vocab {
    fn from_symbols(kind: VocabKind, symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocab {
            kind,
            symbols,
            index,
        }
    }

    /// Builds a vocabulary over `symbols` (specials prepended for every kind
    /// except classes). Symbols keep the given order.
    pub fn new(kind: VocabKind, symbols: impl IntoIterator<Item = String>) -> Self {
        let mut all = Vec::new();
        if kind != VocabKind::Class {
            all.push(PAD.to_string());
            all.push(UNK.to_string());
        }
        let mut seen: HashSet<String> = all.iter().cloned().collect();
        for s in symbols {
            if seen.insert(s.clone()) {
                all.push(s);
            }
        }
        Vocab::from_symbols(kind, all)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Index of `symbol`, or the unknown index.
    pub fn lookup(&self, symbol: &str) -> usize {
        self.get(symbol)
            .unwrap_or_else(|| self.unk().expect("class vocabulary has no unknown symbol"))
    }

    pub fn unk(&self) -> Option<usize> {
        (self.kind != VocabKind::Class).then_some(1)
    }

    pub fn pad(&self) -> Option<usize> {
        (self.kind != VocabKind::Class).then_some(0)
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub word: Vocab,
    pub char: Vocab,
    pub pos: Vocab,
    pub class: Vocab,
}

/// Word, char, POS and class vocabularies. Words seen fewer than
/// `min_word_freq` times map to the unknown index. Every symbol list is in
/// lexicographic order, so class ids do not depend on corpus order.
pub fn build_vocabs(sentences: &[Sentence], min_word_freq: usize) -> Vocabs {
    let mut words: BTreeMap<&str, usize> = BTreeMap::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    let mut pos: BTreeSet<&str> = BTreeSet::new();
    let mut classes: BTreeSet<&str> = BTreeSet::new();
    for s in sentences {
        for t in &s.tokens {
            *words.entry(t).or_default() += 1;
            chars.extend(t.chars());
        }
        pos.extend(s.pos.iter().map(String::as_str));
        classes.extend(s.entities.iter().map(|e| e.label.as_str()));
    }
    Vocabs {
        word: Vocab::new(
            VocabKind::Word,
            words
                .into_iter()
                .filter(|&(_, c)| c >= min_word_freq)
                .map(|(w, _)| w.to_string()),
        ),
        char: Vocab::new(VocabKind::Char, chars.into_iter().map(String::from)),
        pos: Vocab::new(VocabKind::Pos, pos.into_iter().map(String::from)),
        class: Vocab::new(VocabKind::Class, classes.into_iter().map(String::from)),
    }
}
