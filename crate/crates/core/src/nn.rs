//! Trainable building blocks: a named parameter registry, affine layers,
//! word embeddings, a bidirectional LSTM and variational dropout.

use rand::Rng;

use crate::tensor::{Gradients, Result, Tape, Tensor, TensorError, Var};

/// Width of word vectors.
pub const EMBED_DIM: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named trainable tensors. Every layer registers its
/// tensors here exactly once; optimizers and checkpoints walk this order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: layouts are built by
    /// code, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Replaces every value, keeping names. Shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(TensorError::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (old, new) in self.values.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(TensorError::Shape {
                    op: "set_values",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter in store order, zeros where none flowed.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect()
    }
}

/// Uniform Xavier/Glorot initialization for an `[out, in]` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("shape matches by construction")
}

/// `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, out_dim, in_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, out_dim, in_dim));
        Self {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Lookup table of word vectors, one row per vocabulary entry.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    /// Rows drawn from U(-1, 1).
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, vocab_size: usize, dim: usize) -> Self {
        let data = (0..vocab_size * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let table = store.add(
            format!("{name}.table"),
            Tensor::new(vec![vocab_size, dim], data).expect("shape matches by construction"),
        );
        Self {
            table,
            vocab_size,
            dim,
        }
    }

    /// Rows of the table for `tokens`, as an `[S, dim]` matrix.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(TensorError::Domain {
                op: "embed",
                msg: format!("token id {} outside vocabulary of {}", bad, self.vocab_size),
            });
        }
        tape.gather_rows(p.var(self.table), tokens)
    }
}

/// One direction of an LSTM. Gate blocks are stacked `[input, forget,
/// candidate, output]` along the output axis of both weight matrices.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, hidden: usize) -> Self {
        let w_input = store.add(format!("{name}.w_input"), xavier_uniform(rng, 4 * hidden, in_dim));
        let w_hidden = store.add(format!("{name}.w_hidden"), xavier_uniform(rng, 4 * hidden, hidden));
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            hidden,
        }
    }
}

/// Bidirectional LSTM whose per-token output concatenates the forward and
/// backward hidden states (`hidden` each, `2 * hidden` total).
#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

/// Output of [`BiLstm::forward`] for a padded batch.
pub struct BiLstmOutput {
    /// `[B*S, 2h]`, row `b*S + s` holds token `s` of sequence `b`.
    pub states: Var,
    /// `[B, 2h]`: backward state at the first token, forward state at the last.
    pub summary: Var,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        assert!(out_dim.is_multiple_of(2), "biLSTM output width must be even");
        Self {
            forward: LstmDirection::new(store, rng, &format!("{name}.fwd"), in_dim, out_dim / 2),
            backward: LstmDirection::new(store, rng, &format!("{name}.bwd"), in_dim, out_dim / 2),
        }
    }

    /// Runs both directions over `inputs` (`[B*S, in]`, sequence-major
    /// blocks of `seq_len` rows). Positions at or beyond `lengths[b]` are
    /// padding: the forward pass carries its state through them unchanged and
    /// the backward pass starts from zero at the last real token.
    /// `recurrent_dropout`, if given, is a `[B, h]` mask per direction
    /// applied to the hidden state before every recurrent projection.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: Var,
        lengths: &[usize],
        seq_len: usize,
        recurrent_dropout: Option<(&DropoutMask, &DropoutMask)>,
    ) -> Result<BiLstmOutput> {
        let batch = lengths.len();
        if seq_len == 0 || lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(TensorError::Contract(format!(
                "biLSTM needs 1 <= length <= {seq_len}, got {lengths:?}"
            )));
        }
        if tape.value(inputs).rows() != batch * seq_len {
            return Err(TensorError::Contract(format!(
                "biLSTM input has {} rows, expected {}",
                tape.value(inputs).rows(),
                batch * seq_len
            )));
        }
        let padded = lengths.iter().any(|&l| l < seq_len);
        let fwd_states = self.run_direction(
            tape,
            p,
            &self.forward,
            inputs,
            lengths,
            seq_len,
            false,
            padded,
            recurrent_dropout.map(|m| m.0),
        )?;
        let bwd_states = self.run_direction(
            tape,
            p,
            &self.backward,
            inputs,
            lengths,
            seq_len,
            true,
            padded,
            recurrent_dropout.map(|m| m.1),
        )?;
        // Both state lists are indexed by position t.
        let fwd_all = tape.concat_rows(&fwd_states)?;
        let bwd_all = tape.concat_rows(&bwd_states)?;
        let time_major = tape.concat(fwd_all, bwd_all)?;
        let perm: Vec<usize> = (0..batch)
            .flat_map(|b| (0..seq_len).map(move |t| t * batch + b))
            .collect();
        let states = tape.gather_rows(time_major, &perm)?;
        let summary = tape.concat(bwd_states[0], fwd_states[seq_len - 1])?;
        Ok(BiLstmOutput { states, summary })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction(
        &self,
        tape: &mut Tape,
        p: &Bound,
        dir: &LstmDirection,
        inputs: Var,
        lengths: &[usize],
        seq_len: usize,
        reverse: bool,
        padded: bool,
        dropout: Option<&DropoutMask>,
    ) -> Result<Vec<Var>> {
        let batch = lengths.len();
        let h = dir.hidden;
        let projected = tape.matmul_t(inputs, p.var(dir.w_input))?;
        let projected = tape.add_row(projected, p.var(dir.bias))?;
        let mut hidden = tape.constant(Tensor::zeros(&[batch, h]));
        let mut cell = tape.constant(Tensor::zeros(&[batch, h]));
        let mut out = vec![hidden; seq_len];
        let order: Vec<usize> = if reverse {
            (0..seq_len).rev().collect()
        } else {
            (0..seq_len).collect()
        };
        for t in order {
            let rows: Vec<usize> = (0..batch).map(|b| b * seq_len + t).collect();
            let x_t = tape.gather_rows(projected, &rows)?;
            let h_in = match dropout {
                Some(mask) => mask.apply(tape, hidden, true, 1)?,
                None => hidden,
            };
            let rec = tape.matmul_t(h_in, p.var(dir.w_hidden))?;
            let gates = tape.add(x_t, rec)?;
            let i = tape.slice_cols(gates, 0, h)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h, h)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let ig = tape.hadamard(i, g)?;
            let fc = tape.hadamard(f, cell)?;
            let new_cell = tape.add(ig, fc)?;
            let tc = tape.tanh(new_cell);
            let new_hidden = tape.hadamard(o, tc)?;
            if padded {
                let live: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
                cell = tape.select_rows(new_cell, cell, &live)?;
                hidden = tape.select_rows(new_hidden, hidden, &live)?;
            } else {
                cell = new_cell;
                hidden = new_hidden;
            }
            out[t] = hidden;
        }
        Ok(out)
    }
}

/// Variational dropout: one inverted-scale mask per sequence, reused at every
/// position or step it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep_prob: f64,
    mask: Tensor,
}

impl DropoutMask {
    /// Draws a `[rows, dim]` mask of `{0, 1/keep}` values.
    pub fn sample(rng: &mut impl Rng, rows: usize, dim: usize, keep_prob: f64) -> Self {
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep probability {keep_prob} out of (0, 1]");
        let scale = 1.0 / keep_prob;
        let data = (0..rows * dim)
            .map(|_| {
                if keep_prob >= 1.0 || rng.gen::<f64>() < keep_prob {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            keep_prob,
            mask: Tensor::new(vec![rows, dim], data).expect("shape matches by construction"),
        }
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Applies the mask to `x`, whose rows come in consecutive groups of
    /// `group` per mask row. Identity in eval mode or when nothing is dropped.
    pub fn apply(&self, tape: &mut Tape, x: Var, training: bool, group: usize) -> Result<Var> {
        if !training || self.keep_prob >= 1.0 {
            return Ok(x);
        }
        let tx = tape.value(x);
        if tx.cols() != self.mask.cols() || tx.rows() != self.mask.rows() * group {
            return Err(TensorError::Shape {
                op: "dropout",
                lhs: tx.shape().to_vec(),
                rhs: self.mask.shape().to_vec(),
            });
        }
        let m = tape.constant(self.mask.clone());
        let m = if group == 1 { m } else { tape.repeat_rows(m, group)? };
        tape.hadamard(x, m)
    }
}
