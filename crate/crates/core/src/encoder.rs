//! Token representations: context, word, POS and character features
//! concatenated per token and contextualized by a sentence-level BiLSTM.
//!
//! Four encoders with identical structure and independent parameters
//! produce the start, end, query and content views of a sentence.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocabs};
use crate::error::{Error, Result};
use crate::nn::params::uniform_embedding;
use crate::nn::{BiLstm, Graph, LrGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    /// Context vector width.
    pub d_lm: usize,
    pub d_w: usize,
    pub d_pos: usize,
    /// Character feature width; split evenly between the two directions.
    pub d_char: usize,
    /// Character embedding width fed to the character BiLSTM.
    pub char_emb: usize,
    /// Per-direction hidden size of the sentence BiLSTM.
    pub hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            d_lm: 32,
            d_w: 32,
            d_pos: 8,
            d_char: 16,
            char_emb: 16,
            hidden: 64,
        }
    }
}

impl EncoderDims {
    /// Width of a token representation.
    pub fn d_t(&self) -> usize {
        2 * self.hidden
    }

    /// Width of the concatenated token features.
    pub fn input_dim(&self) -> usize {
        self.d_lm + self.d_w + self.d_pos + self.d_char
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_lm,
            self.d_w,
            self.d_pos,
            self.d_char,
            self.char_emb,
            self.hidden,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_char.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_char {} must be even",
                self.d_char
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Start,
    End,
    Query,
    Content,
}

impl View {
    pub const ALL: [View; 4] = [View::Start, View::End, View::Query, View::Content];

    pub fn short_name(self) -> &'static str {
        match self {
            View::Start => "s",
            View::End => "e",
            View::Query => "q",
            View::Content => "c",
        }
    }
}

/// Vocabulary indices of one sentence, plus optional precomputed context
/// vectors that replace the context table lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenIds {
    pub words: Vec<usize>,
    pub pos: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub vectors: Option<Tensor>,
}

impl TokenIds {
    pub fn new(sentence: &Sentence, vocabs: &Vocabs) -> Self {
        let pad = vocabs.char.pad().expect("char vocabulary has padding");
        let chars = sentence
            .tokens
            .iter()
            .map(|t| {
                let ids: Vec<usize> = t
                    .chars()
                    .map(|c| vocabs.char.lookup(c.encode_utf8(&mut [0; 4])))
                    .collect();
                if ids.is_empty() {
                    vec![pad]
                } else {
                    ids
                }
            })
            .collect();
        TokenIds {
            words: sentence
                .tokens
                .iter()
                .map(|t| vocabs.word.lookup(t))
                .collect(),
            pos: sentence.pos.iter().map(|p| vocabs.pos.lookup(p)).collect(),
            chars,
            vectors: None,
        }
    }

    pub fn with_vectors(mut self, vectors: Tensor) -> Result<Self> {
        if vectors.rows() != self.len() {
            return Err(Error::Vectors(format!(
                "{} context vectors for a {}-token sentence",
                vectors.rows(),
                self.len()
            )));
        }
        self.vectors = Some(vectors);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub context: ParamId,
    pub word: ParamId,
    pub pos: ParamId,
    pub chars: ParamId,
    pub char_lstm: BiLstm,
    pub sentence_lstm: BiLstm,
}

impl EncoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: EncoderDims,
        vocabs: &Vocabs,
    ) -> Result<Self> {
        dims.validate()?;
        let context = store.add(
            format!("{name}.context"),
            uniform_embedding(rng, vocabs.word.len(), dims.d_lm),
            LrGroup::Contextual,
        )?;
        let word = store.add(
            format!("{name}.word"),
            uniform_embedding(rng, vocabs.word.len(), dims.d_w),
            LrGroup::Pretrained,
        )?;
        let pos = store.add(
            format!("{name}.pos"),
            uniform_embedding(rng, vocabs.pos.len(), dims.d_pos),
            LrGroup::Other,
        )?;
        let chars = store.add(
            format!("{name}.chars"),
            uniform_embedding(rng, vocabs.char.len(), dims.char_emb),
            LrGroup::Other,
        )?;
        let char_lstm = BiLstm::new(
            store,
            rng,
            &format!("{name}.char_lstm"),
            dims.char_emb,
            dims.d_char / 2,
            LrGroup::Other,
        )?;
        let sentence_lstm = BiLstm::new(
            store,
            rng,
            &format!("{name}.sentence_lstm"),
            dims.input_dim(),
            dims.hidden,
            LrGroup::Other,
        )?;
        Ok(EncoderParams {
            dims,
            context,
            word,
            pos,
            chars,
            char_lstm,
            sentence_lstm,
        })
    }

    /// Final forward ⊕ final backward state of the character BiLSTM, `[1, d_char]`.
    pub fn char_encode(&self, g: &mut Graph, chars: &[usize]) -> Result<Var> {
        if chars.is_empty() {
            return Err(Error::Shape("character encoding of an empty token".into()));
        }
        let x = g.gather(self.chars, chars)?;
        self.char_lstm.summary(g, x)
    }

    /// Character features for every token of every sentence, computing each
    /// distinct spelling once.
    fn char_features(&self, g: &mut Graph, batch: &[&TokenIds]) -> Result<Vec<Var>> {
        let mut unique: HashMap<&[usize], usize> = HashMap::new();
        let mut spellings: Vec<&[usize]> = Vec::new();
        let slots: Vec<Vec<usize>> = batch
            .iter()
            .map(|s| {
                s.chars
                    .iter()
                    .map(|c| {
                        *unique.entry(c.as_slice()).or_insert_with(|| {
                            spellings.push(c.as_slice());
                            spellings.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();

        let all: Vec<usize> = spellings.iter().flat_map(|s| s.iter().copied()).collect();
        if all.is_empty() {
            return Err(Error::Shape("character encoding of an empty token".into()));
        }
        let emb = g.gather(self.chars, &all)?;
        let half = self.dims.d_char / 2;
        let xf = self.char_lstm.forward.project(g, emb)?;
        let xb = self.char_lstm.backward.project(g, emb)?;
        let zero = g.input(Tensor::zeros(&[1, half]));
        let (mut lasts, mut firsts) = (
            Vec::with_capacity(spellings.len()),
            Vec::with_capacity(spellings.len()),
        );
        let mut offset = 0;
        for s in &spellings {
            let len = s.len();
            let pf = g.rows(xf, offset, len)?;
            let hf = self
                .char_lstm
                .forward
                .run_projected(g, pf, zero, zero, false)?;
            lasts.push(g.rows(hf, len - 1, 1)?);
            let pb = g.rows(xb, offset, len)?;
            let hb = self
                .char_lstm
                .backward
                .run_projected(g, pb, zero, zero, true)?;
            firsts.push(g.rows(hb, 0, 1)?);
            offset += len;
        }
        let fw = g.stack_rows(&lasts)?;
        let bw = g.stack_rows(&firsts)?;
        let table = g.concat_cols(&[fw, bw])?;
        slots.iter().map(|idx| g.select_rows(table, idx)).collect()
    }

    /// Concatenated token features `[n, input_dim]` per sentence, before the
    /// sentence BiLSTM.
    pub fn features(&self, g: &mut Graph, batch: &[&TokenIds]) -> Result<Vec<Var>> {
        if batch.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("encoding an empty sentence".into()));
        }
        let chars = self.char_features(g, batch)?;
        let mut out = Vec::with_capacity(batch.len());
        for (s, ch) in batch.iter().zip(chars) {
            let context = match &s.vectors {
                Some(v) => {
                    if v.cols() != self.dims.d_lm {
                        return Err(Error::Vectors(format!(
                            "context vectors of width {} for d_lm {}",
                            v.cols(),
                            self.dims.d_lm
                        )));
                    }
                    g.input(v.clone())
                }
                None => g.gather(self.context, &s.words)?,
            };
            let word = g.gather(self.word, &s.words)?;
            let pos = g.gather(self.pos, &s.pos)?;
            out.push(g.concat_cols(&[context, word, pos, ch])?);
        }
        Ok(out)
    }

    /// Token representations `[n, d_t]` per sentence.
    pub fn encode_batch(&self, g: &mut Graph, batch: &[&TokenIds]) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.features(g, batch)?;
        let stacked = g.stack_rows(&z)?;
        let lstm = &self.sentence_lstm;
        let xf = lstm.forward.project(g, stacked)?;
        let xb = lstm.backward.project(g, stacked)?;
        let zero = g.input(Tensor::zeros(&[1, self.dims.hidden]));
        let mut out = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for s in batch {
            let n = s.len();
            let pf = g.rows(xf, offset, n)?;
            let hf = lstm.forward.run_projected(g, pf, zero, zero, false)?;
            let pb = g.rows(xb, offset, n)?;
            let hb = lstm.backward.run_projected(g, pb, zero, zero, true)?;
            out.push(g.concat_cols(&[hf, hb])?);
            offset += n;
        }
        Ok(out)
    }

    pub fn encode(&self, g: &mut Graph, tokens: &TokenIds) -> Result<Var> {
        Ok(self.encode_batch(g, &[tokens])?.remove(0))
    }
}

/// The start, end, query and content encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderBank {
    pub start: EncoderParams,
    pub end: EncoderParams,
    pub query: EncoderParams,
    pub content: EncoderParams,
}

impl EncoderBank {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        dims: EncoderDims,
        vocabs: &Vocabs,
    ) -> Result<Self> {
        let mut make = |v: View| {
            EncoderParams::new(
                store,
                rng,
                &format!("encoder_{}", v.short_name()),
                dims,
                vocabs,
            )
        };
        Ok(EncoderBank {
            start: make(View::Start)?,
            end: make(View::End)?,
            query: make(View::Query)?,
            content: make(View::Content)?,
        })
    }

    pub fn get(&self, view: View) -> &EncoderParams {
        match view {
            View::Start => &self.start,
            View::End => &self.end,
            View::Query => &self.query,
            View::Content => &self.content,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        self.content.dims
    }
}

/// Reads a context-vector file: a header `n_vectors dim`, then `n_vectors`
/// rows of `dim` reals, one row per token of `sentences` in order.
pub fn load_precomputed_vectors(
    path: impl AsRef<Path>,
    sentences: &[Sentence],
    d_lm: usize,
) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&text, sentences, d_lm)
}

pub fn parse_vectors(text: &str, sentences: &[Sentence], d_lm: usize) -> Result<Vec<Tensor>> {
    let mut words = text.split_ascii_whitespace();
    let mut header = |what: &str| -> Result<usize> {
        words
            .next()
            .ok_or_else(|| Error::Vectors(format!("missing {what} in header")))?
            .parse()
            .map_err(|_| Error::Vectors(format!("header {what} is not a count")))
    };
    let n = header("vector count")?;
    let dim = header("dimension")?;
    if dim != d_lm {
        return Err(Error::Vectors(format!(
            "vectors of dimension {dim}, encoder expects {d_lm}"
        )));
    }
    let tokens: usize = sentences.iter().map(Sentence::len).sum();
    if n != tokens {
        return Err(Error::Vectors(format!("{n} vectors for {tokens} tokens")));
    }
    let values = words
        .map(|w| {
            w.parse::<f64>()
                .map_err(|_| Error::Vectors(format!("{w:?} is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != n * dim {
        return Err(Error::Vectors(format!(
            "expected {} values, found {}",
            n * dim,
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(sentences.len());
    let mut offset = 0;
    for s in sentences {
        let len = s.len() * dim;
        out.push(Tensor::matrix(
            s.len(),
            dim,
            values[offset..offset + len].to_vec(),
        )?);
        offset += len;
    }
    Ok(out)
}
