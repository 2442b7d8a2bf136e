use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{lstm_cell_forward, Graph, Var};
use super::kernels;
use super::params::{uniform_fan_in, LrGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map `y = W·x + b` with `W: [out, in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        group: LrGroup,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            uniform_fan_in(rng, output, input),
            group,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, output]), group)?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }

    /// Gradient-free forward over `n` rows of `x`.
    pub fn apply(&self, store: &ParamStore, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if x.len() != n * self.input {
            return Err(Error::Shape(format!(
                "linear expects {} inputs per row, got {} values for {n} rows",
                self.input,
                x.len()
            )));
        }
        let mut out = vec![0.0; n * self.output];
        kernels::matmul_nt(
            x,
            n,
            self.input,
            store.value(self.w).data(),
            self.output,
            Some(store.value(self.b).data()),
            &mut out,
        );
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Two-layer feed-forward network `W2·act(W1·x + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ffn {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Ffn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(Ffn {
            first: Linear::new(store, rng, &format!("{name}.l1"), input, hidden, group)?,
            second: Linear::new(store, rng, &format!("{name}.l2"), hidden, output, group)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let a = match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Tanh => g.tanh(h),
        };
        self.second.forward(g, a)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut h = self.first.apply(store, x, n)?;
        h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        self.second.apply(store, &h, n)
    }
}

/// Standard LSTM cell. Gates `i, f, g, o` are rows `[0, h)`, `[h, 2h)`,
/// `[2h, 3h)`, `[3h, 4h)` of `W_ih·x_t + W_hh·h_{t−1} + b`, which is the
/// single affine map over `[h_{t−1}; x_t]` split into its two column blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// `(C, h)` of an LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LstmState {
    pub fn zeros(size: usize) -> Self {
        LstmState {
            cell: vec![0.0; size],
            hidden: vec![0.0; size],
        }
    }
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        group: LrGroup,
    ) -> Result<Self> {
        let fan_in = input + hidden;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::matrix(rows, cols, data)
        };
        let w_ih = store.add(format!("{name}.w_ih"), draw(4 * hidden, input)?, group)?;
        let w_hh = store.add(format!("{name}.w_hh"), draw(4 * hidden, hidden)?, group)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, 4 * hidden]), group)?;
        Ok(LstmCell {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        })
    }

    /// Input projection `x_t·W_ihᵀ + b` for every row of `x`.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w_ih), g.param(self.b));
        g.linear(x, w, Some(b))
    }

    /// Runs the recurrence over projected inputs from the given initial state.
    pub fn run_projected(
        &self,
        g: &mut Graph,
        xproj: Var,
        c0: Var,
        h0: Var,
        reverse: bool,
    ) -> Result<Var> {
        let w_hh = g.param(self.w_hh);
        g.lstm(xproj, w_hh, c0, h0, reverse)
    }

    /// Runs the recurrence over `x: [T, input]` from a zero state.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let xproj = self.project(g, x)?;
        let c0 = g.input(Tensor::zeros(&[1, self.hidden]));
        let h0 = g.input(Tensor::zeros(&[1, self.hidden]));
        self.run_projected(g, xproj, c0, h0, reverse)
    }

    /// One gradient-free step from `state` on input `x`.
    pub fn step(&self, store: &ParamStore, state: &LstmState, x: &[f64]) -> Result<LstmState> {
        if x.len() != self.input {
            return Err(Error::Shape(format!(
                "lstm input of {} for cell of {}",
                x.len(),
                self.input
            )));
        }
        let mut pre = vec![0.0; 4 * self.hidden];
        kernels::matmul_nt(
            x,
            1,
            self.input,
            store.value(self.w_ih).data(),
            4 * self.hidden,
            Some(store.value(self.b).data()),
            &mut pre,
        );
        self.step_projected(store, state, &pre)
    }

    /// One step given the already projected input row.
    pub fn step_projected(
        &self,
        store: &ParamStore,
        state: &LstmState,
        xproj: &[f64],
    ) -> Result<LstmState> {
        let hs = self.hidden;
        if state.cell.len() != hs || state.hidden.len() != hs || xproj.len() != 4 * hs {
            return Err(Error::Shape(format!(
                "lstm state {}/{} and projection {} for hidden {hs}",
                state.cell.len(),
                state.hidden.len(),
                xproj.len()
            )));
        }
        let mut pre = xproj.to_vec();
        let mut next = LstmState::zeros(hs);
        let mut tanh_c = vec![0.0; hs];
        lstm_cell_forward(
            &mut pre,
            store.value(self.w_hh).data(),
            &state.hidden,
            &state.cell,
            &mut next.cell,
            &mut tanh_c,
            &mut next.hidden,
        );
        Ok(next)
    }
}

/// Forward and backward LSTMs whose hidden states are concatenated per position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        group: LrGroup,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmCell::new(store, rng, &format!("{name}.fwd"), input, hidden, group)?,
            backward: LstmCell::new(store, rng, &format!("{name}.bwd"), input, hidden, group)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// Per-position hidden states `[T, 2h]`, each row `h→_i ⊕ h←_i`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (fw, bw) = self.directions(g, x)?;
        g.concat_cols(&[fw, bw])
    }

    /// Final forward state ⊕ final backward state, `[1, 2h]`.
    pub fn summary(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (fw, bw) = self.directions(g, x)?;
        let t_len = g.value(fw).rows();
        let last = g.rows(fw, t_len - 1, 1)?;
        let first = g.rows(bw, 0, 1)?;
        g.concat_cols(&[last, first])
    }

    fn directions(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        if g.value(x).rows() == 0 || g.value(x).is_empty() {
            return Err(Error::Shape("bilstm over an empty sequence".into()));
        }
        let fw = self.forward.run(g, x, false)?;
        let bw = self.backward.run(g, x, true)?;
        Ok((fw, bw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_ffn_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = Ffn::new(
            &mut store,
            &mut rng,
            "f",
            3,
            4,
            2,
            Activation::Relu,
            LrGroup::Other,
        )
        .unwrap();
        zero_all(&mut store);
        assert_eq!(
            ffn.apply(&store, &[1.0, -2.0, 3.0], 1).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn identity_ffn_applies_relu_gate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = Ffn::new(
            &mut store,
            &mut rng,
            "f",
            2,
            2,
            2,
            Activation::Relu,
            LrGroup::Other,
        )
        .unwrap();
        zero_all(&mut store);
        for w in [ffn.first.w, ffn.second.w] {
            store
                .value_mut(w)
                .data_mut()
                .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        assert_eq!(ffn.apply(&store, &[-1.0, 2.0], 1).unwrap(), vec![0.0, 2.0]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![-1.0, 2.0]));
        let y = ffn.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn ffn_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = Ffn::new(
            &mut store,
            &mut rng,
            "f",
            3,
            4,
            2,
            Activation::Relu,
            LrGroup::Other,
        )
        .unwrap();
        assert!(ffn.apply(&store, &[1.0, 2.0], 1).is_err());
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(ffn.forward(&mut g, x).is_err());
    }

    #[test]
    fn zero_lstm_fixpoint_and_half_forget() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::new(&mut store, &mut rng, "c", 3, 2, LrGroup::Other).unwrap();
        zero_all(&mut store);
        let mut state = LstmState::zeros(2);
        for _ in 0..5 {
            state = cell.step(&store, &state, &[0.3, -1.0, 2.0]).unwrap();
            assert_eq!(state, LstmState::zeros(2));
        }
        let start = LstmState {
            cell: vec![0.8, -0.4],
            hidden: vec![0.0, 0.0],
        };
        let next = cell.step(&store, &start, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(next.cell, vec![0.4, -0.2]);
        assert!(cell.step(&store, &start, &[1.0]).is_err());
    }

    #[test]
    fn graph_lstm_matches_stepwise() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = LstmCell::new(&mut store, &mut rng, "c", 3, 4, LrGroup::Other).unwrap();
        let xs: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(5, 3, xs.clone()).unwrap());
        let h = cell.run(&mut g, x, false).unwrap();
        let mut state = LstmState::zeros(4);
        for t in 0..5 {
            state = cell.step(&store, &state, &xs[t * 3..(t + 1) * 3]).unwrap();
            assert_eq!(g.value(h).row(t), &state.hidden[..]);
        }
    }

    #[test]
    fn bilstm_reversal_symmetry() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bi = BiLstm::new(&mut store, &mut rng, "bi", 2, 3, LrGroup::Other).unwrap();
        // Swap roles: a BiLSTM whose directions are exchanged.
        let swapped = BiLstm {
            forward: bi.backward,
            backward: bi.forward,
        };
        let xs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
        let rev: Vec<f64> = xs.chunks(2).rev().flatten().copied().collect();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(4, 2, xs).unwrap());
        let xr = g.input(Tensor::matrix(4, 2, rev).unwrap());
        let out = bi.forward(&mut g, x).unwrap();
        let out_rev = swapped.forward(&mut g, xr).unwrap();
        for t in 0..4 {
            let a = g.value(out).row(t);
            let b = g.value(out_rev).row(3 - t);
            assert_eq!(&a[..3], &b[3..]);
            assert_eq!(&a[3..], &b[..3]);
        }
    }

    #[test]
    fn bilstm_single_step_and_empty() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bi = BiLstm::new(&mut store, &mut rng, "bi", 2, 3, LrGroup::Other).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let out = bi.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 6]);
        let fw = bi
            .forward
            .step(&store, &LstmState::zeros(3), &[0.5, -0.5])
            .unwrap();
        let bw = bi
            .backward
            .step(&store, &LstmState::zeros(3), &[0.5, -0.5])
            .unwrap();
        assert_eq!(&g.value(out).data()[..3], &fw.hidden[..]);
        assert_eq!(&g.value(out).data()[3..], &bw.hidden[..]);
        let empty = g.input(Tensor::zeros(&[0, 2]));
        assert!(bi.forward(&mut g, empty).is_err());
    }
}
