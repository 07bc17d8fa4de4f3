//! Parameters and forward rules of the control, read and write units.
//!
//! Every unit works on a batch: per-example states are `[B, d]`, and
//! per-example sequences (words, grid cells, earlier steps) are stacked
//! example-major into `[B*n, d]`.

use rand::Rng;

use super::config::{ControlVariant, MacConfig, WriteVariant};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// `[B*n, 1]` scores to a `[B, n]` softmax, honoring `mask` if given.
fn attend(tape: &mut Tape, scores: Var, batch: usize, n: usize, mask: Option<&[bool]>) -> Result<Var> {
    let scores = tape.reshape(scores, &[batch, n])?;
    tape.softmax(scores, mask)
}

#[derive(Clone, Copy, Debug)]
pub struct ControlParams {
    pub cq: Linear,
    pub attn: Linear,
}

pub struct ControlOut {
    /// `[B, d]`.
    pub c: Var,
    /// `[B, S]`, zero at masked positions.
    pub cv: Var,
}

impl ControlParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Self {
            cq: Linear::new(store, rng, &format!("{name}.cq"), 2 * d, d),
            attn: Linear::new(store, rng, &format!("{name}.attn"), d, 1),
        }
    }

    /// New control state as an attention-weighted average of `words`
    /// (`[B*S, d]`). `mask[b*S + s]` is false at padding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        c_prev: Var,
        q_i: Var,
        words: Var,
        seq_len: usize,
        mask: Option<&[bool]>,
    ) -> Result<ControlOut> {
        if seq_len == 0 {
            return Err(TensorError::Contract("control unit needs at least one word".into()));
        }
        let batch = tape.value(c_prev).rows();
        let joined = tape.concat(c_prev, q_i)?;
        let cq = self.cq.forward(tape, p, joined)?;
        let cq = tape.repeat_rows(cq, seq_len)?;
        let inter = tape.hadamard(cq, words)?;
        let ca = self.attn.forward(tape, p, inter)?;
        let cv = attend(tape, ca, batch, seq_len, mask)?;
        let c = tape.weighted_sum(cv, words)?;
        Ok(ControlOut { c, cv })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReadParams {
    pub mem: Linear,
    pub kb: Linear,
    pub concat: Linear,
    pub attn: Linear,
    pub direct_kb: bool,
}

pub struct ReadOut {
    /// `[B, d]`.
    pub r: Var,
    /// `[B, H*W]`.
    pub rv: Var,
}

impl ReadParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, direct_kb: bool) -> Self {
        let concat_in = if direct_kb { 2 * d } else { d };
        Self {
            mem: Linear::new(store, rng, &format!("{name}.mem"), d, d),
            kb: Linear::new(store, rng, &format!("{name}.kb"), d, d),
            concat: Linear::new(store, rng, &format!("{name}.concat"), concat_in, d),
            attn: Linear::new(store, rng, &format!("{name}.attn"), d, 1),
            direct_kb,
        }
    }

    /// `W_k k + b_k` for every location. Independent of the step, so shared
    /// weights let callers compute it once.
    pub fn project_kb(&self, tape: &mut Tape, p: &Bound, kb: Var) -> Result<Var> {
        self.kb.forward(tape, p, kb)
    }

    /// Attention read over `kb` (`[B*L, d]`) given its projection from
    /// [`ReadParams::project_kb`]. The question reaches this unit only
    /// through `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        m_prev: Var,
        kb: Var,
        kb_proj: Var,
        locations: usize,
        c: Var,
    ) -> Result<ReadOut> {
        let batch = tape.value(m_prev).rows();
        let mem = self.mem.forward(tape, p, m_prev)?;
        let mem = tape.repeat_rows(mem, locations)?;
        let inter = tape.hadamard(mem, kb_proj)?;
        let inter = if self.direct_kb {
            tape.concat(inter, kb)?
        } else {
            inter
        };
        let inter = self.concat.forward(tape, p, inter)?;
        let c_rep = tape.repeat_rows(c, locations)?;
        let scored = tape.hadamard(c_rep, inter)?;
        let ra = self.attn.forward(tape, p, scored)?;
        let rv = attend(tape, ra, batch, locations, None)?;
        let r = tape.weighted_sum(rv, kb)?;
        Ok(ReadOut { r, rv })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WriteParams {
    pub variant: WriteVariant,
    /// `W[r, m_prev] + b` (linear variant).
    pub info: Option<Linear>,
    /// Self-attention score, `m_sa` projection and `m_info` projection.
    pub sa_attn: Option<Linear>,
    pub sa_proj: Option<Linear>,
    pub proj: Option<Linear>,
    /// `W r + b` (retrieved_affine variant).
    pub affine: Option<Linear>,
    /// `[d -> 1]` gate logit.
    pub gate: Option<Linear>,
}

pub struct WriteOut {
    /// New memory `[B, d]`.
    pub m: Var,
    /// Candidate memory before gating `[B, d]`.
    pub candidate: Var,
    /// `[B, 1]` gate value `sigma(c')` when gated.
    pub gate: Option<Var>,
    /// `[B, i-1]` attention over earlier steps when self-attending and `i > 1`.
    pub sa: Option<Var>,
}

impl WriteParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &MacConfig) -> Self {
        let d = cfg.d;
        let linear = cfg.write_variant == WriteVariant::Linear;
        let sa = cfg.self_attends();
        let mut lin = |suffix: &str, i, o| Linear::new(store, rng, &format!("{name}.{suffix}"), i, o);
        let info = linear.then(|| lin("info", 2 * d, d));
        let sa_attn = sa.then(|| lin("sa_attn", d, 1));
        let proj = sa.then(|| lin("proj", d, d));
        let affine = (cfg.write_variant == WriteVariant::RetrievedAffine).then(|| lin("affine", d, d));
        let gate = cfg.gated().then(|| lin("gate", d, 1));
        let sa_proj = sa.then(|| Linear::without_bias(store, rng, &format!("{name}.sa_proj"), d, d));
        if let Some(g) = gate {
            let b = g.b.expect("gate has a bias");
            store.get_mut(b).data_mut().fill(cfg.gate_bias);
        }
        Self {
            variant: cfg.write_variant,
            info,
            sa_attn,
            sa_proj,
            proj,
            affine,
            gate,
        }
    }

    /// Writes step `step` (1-based). `history` holds `(c_j, m_j)` for
    /// `j = 1..step-1`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        r: Var,
        m_prev: Var,
        c: Var,
        history: &[(Var, Var)],
        step: usize,
    ) -> Result<WriteOut> {
        if step == 0 || history.len() != step - 1 {
            return Err(TensorError::Contract(format!(
                "write unit at step {step} got {} history entries",
                history.len()
            )));
        }
        let mut sa = None;
        let candidate = match self.variant {
            WriteVariant::Linear => {
                let info = self.info.expect("linear write has an info layer");
                let joined = tape.concat(r, m_prev)?;
                let m_info = info.forward(tape, p, joined)?;
                match (self.sa_attn, self.sa_proj, self.proj) {
                    (Some(sa_attn), Some(sa_proj), Some(proj)) => {
                        let projected = proj.forward(tape, p, m_info)?;
                        if history.is_empty() {
                            projected
                        } else {
                            let (weights, m_sa) = self.self_attend(tape, p, sa_attn, c, history)?;
                            sa = Some(weights);
                            let from_sa = sa_proj.forward(tape, p, m_sa)?;
                            tape.add(from_sa, projected)?
                        }
                    }
                    _ => m_info,
                }
            }
            WriteVariant::RetrievedDirect | WriteVariant::GateOnly => r,
            WriteVariant::RetrievedAffine => self.affine.expect("affine write has a layer").forward(tape, p, r)?,
        };
        let (m, gate) = match self.gate {
            Some(gate) => {
                let logit = gate.forward(tape, p, c)?;
                let g = tape.sigmoid(logit);
                // m = g * m_prev + (1 - g) * m' = m' + g * (m_prev - m')
                let diff = tape.sub(m_prev, candidate)?;
                let kept = tape.mul_col(diff, g)?;
                (tape.add(candidate, kept)?, Some(g))
            }
            None => (candidate, None),
        };
        Ok(WriteOut { m, candidate, gate, sa })
    }

    fn self_attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        sa_attn: Linear,
        c: Var,
        history: &[(Var, Var)],
    ) -> Result<(Var, Var)> {
        let batch = tape.value(c).rows();
        let n = history.len();
        let cs: Vec<Var> = history.iter().map(|h| h.0).collect();
        let ms: Vec<Var> = history.iter().map(|h| h.1).collect();
        let perm: Vec<usize> = (0..batch).flat_map(|b| (0..n).map(move |j| j * batch + b)).collect();
        let cs = tape.concat_rows(&cs)?;
        let cs = tape.gather_rows(cs, &perm)?;
        let ms = tape.concat_rows(&ms)?;
        let ms = tape.gather_rows(ms, &perm)?;
        let c_rep = tape.repeat_rows(c, n)?;
        let inter = tape.hadamard(c_rep, cs)?;
        let scores = sa_attn.forward(tape, p, inter)?;
        let weights = attend(tape, scores, batch, n, None)?;
        let m_sa = tape.weighted_sum(weights, ms)?;
        Ok((weights, m_sa))
    }
}

/// One cell's worth of unit parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellParams {
    /// Absent for the `question_vector` and `none` control variants.
    pub control: Option<ControlParams>,
    pub read: ReadParams,
    pub write: WriteParams,
}

impl CellParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &MacConfig) -> Self {
        let attends = matches!(
            cfg.control_variant,
            ControlVariant::WordAttention | ControlVariant::WordVectors
        );
        Self {
            control: attends.then(|| ControlParams::new(store, rng, &format!("{name}.control"), cfg.d)),
            read: ReadParams::new(store, rng, &format!("{name}.read"), cfg.d, cfg.direct_kb_in_read),
            write: WriteParams::new(store, rng, &format!("{name}.write"), cfg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(d: usize) -> MacConfig {
        MacConfig {
            d,
            use_memory_gate: true,
            use_self_attention: true,
            ..MacConfig::default()
        }
    }

    #[test]
    fn single_word_control_copies_the_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let unit = ControlParams::new(&mut store, &mut rng, "c", 6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let c_prev = tape.constant(random(&mut rng, 1, 6));
        let q = tape.constant(random(&mut rng, 1, 6));
        let w = random(&mut rng, 1, 6);
        let words = tape.constant(w.clone());
        let out = unit.forward(&mut tape, &p, c_prev, q, words, 1, None).unwrap();
        assert_eq!(tape.value(out.cv).data(), &[1.0]);
        assert_eq!(tape.value(out.c).data(), w.data());
        assert!(unit.forward(&mut tape, &p, c_prev, q, words, 0, None).is_err());
    }

    #[test]
    fn identical_words_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let unit = ControlParams::new(&mut store, &mut rng, "c", 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let c_prev = tape.constant(random(&mut rng, 1, 4));
        let q = tape.constant(random(&mut rng, 1, 4));
        let w = random(&mut rng, 1, 4);
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.extend_from_slice(w.data());
        }
        let words = tape.constant(Tensor::new(vec![5, 4], rows).unwrap());
        let out = unit.forward(&mut tape, &p, c_prev, q, words, 5, None).unwrap();
        for &v in tape.value(out.cv).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        for (a, b) in tape.value(out.c).data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_read_returns_that_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let unit = ReadParams::new(&mut store, &mut rng, "r", 4, true);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let m = tape.constant(random(&mut rng, 1, 4));
        let c = tape.constant(random(&mut rng, 1, 4));
        let k = random(&mut rng, 1, 4);
        let kb = tape.constant(k.clone());
        let proj = unit.project_kb(&mut tape, &p, kb).unwrap();
        let out = unit.forward(&mut tape, &p, m, kb, proj, 1, c).unwrap();
        assert_eq!(tape.value(out.rv).data(), &[1.0]);
        assert_eq!(tape.value(out.r).data(), k.data());
    }

    #[test]
    fn identical_cells_give_uniform_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let unit = ReadParams::new(&mut store, &mut rng, "r", 4, false);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let m = tape.constant(random(&mut rng, 1, 4));
        let c = tape.constant(random(&mut rng, 1, 4));
        let k = random(&mut rng, 1, 4);
        let kb = tape.constant(Tensor::new(vec![9, 4], k.data().repeat(9)).unwrap());
        let proj = unit.project_kb(&mut tape, &p, kb).unwrap();
        let out = unit.forward(&mut tape, &p, m, kb, proj, 9, c).unwrap();
        for &v in tape.value(out.rv).data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
        for (a, b) in tape.value(out.r).data().iter().zip(k.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_logit_averages_memories() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mut c = cfg(4);
        c.gate_bias = 0.0;
        let unit = WriteParams::new(&mut store, &mut rng, "w", &c);
        let g = unit.gate.unwrap();
        store.get_mut(g.w).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let r = tape.constant(random(&mut rng, 1, 4));
        let m_prev = tape.constant(random(&mut rng, 1, 4));
        let ctl = tape.constant(random(&mut rng, 1, 4));
        let out = unit.forward(&mut tape, &p, r, m_prev, ctl, &[], 1).unwrap();
        assert_eq!(tape.value(out.gate.unwrap()).data(), &[0.5]);
        let (m, mp, cand) = (tape.value(out.m), tape.value(m_prev), tape.value(out.candidate));
        for i in 0..4 {
            assert!((m.data()[i] - 0.5 * (mp.data()[i] + cand.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_self_attention_uses_only_the_info_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = MacConfig {
            use_memory_gate: false,
            ..cfg(4)
        };
        let unit = WriteParams::new(&mut store, &mut rng, "w", &c);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let r = tape.constant(random(&mut rng, 1, 4));
        let m_prev = tape.constant(random(&mut rng, 1, 4));
        let ctl = tape.constant(random(&mut rng, 1, 4));
        let out = unit.forward(&mut tape, &p, r, m_prev, ctl, &[], 1).unwrap();
        assert!(out.sa.is_none());
        let joined = tape.concat(r, m_prev).unwrap();
        let info = unit.info.unwrap().forward(&mut tape, &p, joined).unwrap();
        let want = unit.proj.unwrap().forward(&mut tape, &p, info).unwrap();
        assert_eq!(tape.value(out.m), tape.value(want));
        assert!(matches!(
            unit.forward(&mut tape, &p, r, m_prev, ctl, &[], 2),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn gate_bias_sets_the_initial_gate_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for bias in [-1.0, 0.0, 1.0] {
            let mut store = ParamStore::new();
            let c = MacConfig { gate_bias: bias, ..cfg(4) };
            let unit = WriteParams::new(&mut store, &mut rng, "w", &c);
            assert_eq!(store.get(unit.gate.unwrap().b.unwrap()).data(), &[bias]);
        }
    }
}
