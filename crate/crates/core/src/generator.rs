//! Query-initialized tagger that grows a local hypergraph one token at a
//! time from a start token.
//!
//! The LSTM state starts as the query representation of the start token.
//! Step `j` consumes the content representation of token `start + j − 1`
//! and emits one tag through a two-layer feed-forward head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Tag;
use crate::nn::kernels::softmax_row;
use crate::nn::{
    Activation, Ffn, Graph, Linear, LrGroup, LstmCell, LstmState, ParamStore, Tensor, Var,
};

/// Source of the initial LSTM state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// The start token's row of the dedicated query encoder.
    #[default]
    Query,
    /// A zero state.
    Zero,
    /// The start token's row of the content encoder.
    SharedContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    OEmitted,
    SequenceExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub tags: Vec<Tag>,
    /// Tag distribution at each step.
    pub probs: Vec<Vec<f64>>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Generator {
    pub lstm: LstmCell,
    pub head: Ffn,
    pub n_classes: usize,
}

impl Generator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_t: usize,
        ffn_hidden: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let lstm = LstmCell::new(store, rng, "generator.lstm", d_t, d_t, LrGroup::Other)?;
        let head = Ffn::new(
            store,
            rng,
            "generator.head",
            d_t,
            ffn_hidden,
            Tag::alphabet_size(n_classes),
            Activation::Relu,
            LrGroup::Other,
        )?;
        Ok(Generator {
            lstm,
            head,
            n_classes,
        })
    }

    pub fn d_t(&self) -> usize {
        self.lstm.hidden
    }

    pub fn alphabet_size(&self) -> usize {
        Tag::alphabet_size(self.n_classes)
    }

    /// `(C_0, h_0)`, both equal to `query`.
    pub fn init_state(&self, query: &[f64]) -> Result<LstmState> {
        if query.len() != self.d_t() {
            return Err(Error::Shape(format!(
                "query of width {} for hidden size {}",
                query.len(),
                self.d_t()
            )));
        }
        Ok(LstmState {
            cell: query.to_vec(),
            hidden: query.to_vec(),
        })
    }

    /// Input projections of every content row, `[n, 4·d_t]`.
    pub fn project_content(&self, g: &mut Graph, content: Var) -> Result<Var> {
        self.lstm.project(g, content)
    }

    /// Gradient-free version of [`Generator::project_content`].
    pub fn project_content_values(&self, store: &ParamStore, content: &Tensor) -> Result<Tensor> {
        let n = content.rows();
        let data = self.lstm_input_apply(store, content.data(), n)?;
        Tensor::matrix(n, 4 * self.d_t(), data)
    }

    fn lstm_input_apply(&self, store: &ParamStore, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let proj = Linear {
            w: self.lstm.w_ih,
            b: self.lstm.b,
            input: self.lstm.input,
            output: 4 * self.lstm.hidden,
        };
        proj.apply(store, x, n)
    }

    /// Greedy decoding from `start` over projected content rows.
    ///
    /// Stops after emitting O or after tagging the last token.
    pub fn decode_greedy(
        &self,
        store: &ParamStore,
        start: usize,
        content_proj: &Tensor,
        query: &[f64],
    ) -> Result<DecodeTrace> {
        let n = content_proj.rows();
        if start >= n {
            return Err(Error::Invalid(format!(
                "start {start} outside a {n}-token sentence"
            )));
        }
        let mut state = self.init_state(query)?;
        let mut trace = DecodeTrace {
            tags: Vec::new(),
            probs: Vec::new(),
            stop: StopReason::SequenceExhausted,
        };
        let k = self.alphabet_size();
        for pos in start..n {
            state = self
                .lstm
                .step_projected(store, &state, content_proj.row(pos))?;
            let logits = self.head.apply(store, &state.hidden, 1)?;
            let mut probs = vec![0.0; k];
            softmax_row(&logits, &mut probs);
            let best = (0..k).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
            let tag = Tag::from_index(best, self.n_classes)?;
            trace.tags.push(tag);
            trace.probs.push(probs);
            if tag == Tag::O {
                trace.stop = StopReason::OEmitted;
                break;
            }
        }
        Ok(trace)
    }

    /// Logits `[len, alphabet]` of `len` steps from `start` with the state
    /// initialized to `query: [1, d_t]`.
    pub fn step_logits(
        &self,
        g: &mut Graph,
        content_proj: Var,
        start: usize,
        len: usize,
        query: Var,
    ) -> Result<Var> {
        let xp = g.rows(content_proj, start, len)?;
        let h = self.lstm.run_projected(g, xp, query, query, false)?;
        self.head.forward(g, h)
    }

    /// `Σ_t CE(y_t, p_t)` over the gold tags of one candidate.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph,
        content_proj: Var,
        start: usize,
        query: Var,
        gold: &[Tag],
    ) -> Result<Var> {
        let c = Candidate {
            content_proj,
            start,
            query,
            gold,
        };
        self.summed_loss(g, &[c])?
            .ok_or_else(|| Error::Invalid("empty candidate list".into()))
    }

    /// Mean teacher-forced loss over candidates. `None` when there are none.
    pub fn batch_loss(&self, g: &mut Graph, candidates: &[Candidate<'_>]) -> Result<Option<Var>> {
        let Some(sum) = self.summed_loss(g, candidates)? else {
            return Ok(None);
        };
        Ok(Some(
            g.weighted_sum(&[(sum, 1.0 / candidates.len() as f64)])?,
        ))
    }

    /// Sum over candidates of their teacher-forced losses. Candidates may
    /// come from different sentences.
    pub fn summed_loss(&self, g: &mut Graph, candidates: &[Candidate<'_>]) -> Result<Option<Var>> {
        if candidates.is_empty() {
            return Ok(None);
        }
        let mut hidden = Vec::with_capacity(candidates.len());
        let mut targets = Vec::new();
        for c in candidates {
            if c.gold.is_empty() {
                return Err(Error::Tags(format!(
                    "empty gold tags for start {}",
                    c.start
                )));
            }
            let xp = g.rows(c.content_proj, c.start, c.gold.len())?;
            hidden.push(self.lstm.run_projected(g, xp, c.query, c.query, false)?);
            targets.extend(c.gold.iter().map(|t| t.index()));
        }
        let all = g.stack_rows(&hidden)?;
        let logits = self.head.forward(g, all)?;
        Ok(Some(g.softmax_cross_entropy(logits, &targets)?))
    }
}

/// One teacher-forced training sequence.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    /// Projected content rows of the candidate's sentence.
    pub content_proj: Var,
    pub start: usize,
    /// Initial state `[1, d_t]`.
    pub query: Var,
    pub gold: &'a [Tag],
}
