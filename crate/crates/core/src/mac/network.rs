use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cell::CellParams;
use super::config::{ConfigError, ControlVariant, MacConfig};
use super::kb::{scene_features, KbStem};
use super::trace::{CellTrace, ParamSource, StepTrace};
use crate::gridworld::{Scene, SceneError};
use crate::nn::{BiLstm, Bound, DropoutMask, Embedding, Linear, ParamId, ParamStore, EMBED_DIM};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// Where each parameter group lives in the store.
#[derive(Clone, Debug)]
pub struct MacLayout {
    pub embedding: Embedding,
    pub lstm: BiLstm,
    pub kb: KbStem,
    /// Projects embeddings to width `d` for the `word_vectors` control.
    pub word_proj: Option<Linear>,
    /// Per-step `q_i` projections, never shared.
    pub q_proj: Vec<Linear>,
    /// One entry when weights are shared, `p` otherwise.
    pub cells: Vec<CellParams>,
    pub c0: ParamId,
    pub m0: ParamId,
    pub out_hidden: Linear,
    pub out_logits: Linear,
}

/// Name prefix of the recurrent cell block.
pub const CELL_PREFIX: &str = "cell";

/// A MAC network: configuration, parameters and their layout.
#[derive(Clone, Debug)]
pub struct MacModel {
    pub config: MacConfig,
    pub params: ParamStore,
    pub layout: MacLayout,
}

/// One question over one scene. Token ids must be nonzero (0 is padding).
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: &'a [usize],
    pub scene: &'a Scene,
}

/// Training mode samples dropout masks from the given generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

struct StepVars {
    c: Var,
    m: Var,
    m_prev: Var,
    candidate: Var,
    cv: Option<Var>,
    rv: Var,
    gate: Option<Var>,
    sa: Option<Var>,
}

/// Handles into a tape after [`MacModel::forward`].
pub struct Forward {
    /// `[B, A]`.
    pub logits: Var,
    /// `[B, d]` question vector.
    pub q: Var,
    words: Option<Var>,
    lengths: Vec<usize>,
    seq_len: usize,
    steps: Vec<StepVars>,
}

impl Forward {
    /// Per-example traces read back from `tape`.
    pub fn traces(&self, tape: &Tape, source: ParamSource) -> Vec<CellTrace> {
        let row = |v: Var, b: usize| tape.value(v).row(b).to_vec();
        (0..self.lengths.len())
            .map(|b| {
                let len = self.lengths[b];
                let words = self.words.map_or_else(Vec::new, |w| {
                    (0..len).map(|s| row(w, b * self.seq_len + s)).collect()
                });
                let steps = self
                    .steps
                    .iter()
                    .map(|s| StepTrace {
                        c: row(s.c, b),
                        m: row(s.m, b),
                        m_prev: row(s.m_prev, b),
                        candidate: row(s.candidate, b),
                        cv: s.cv.map(|cv| tape.value(cv).row(b)[..len].to_vec()),
                        rv: row(s.rv, b),
                        gate: s.gate.map(|g| tape.value(g).at(b, 0)),
                        sa: s.sa.map(|sa| row(sa, b)),
                    })
                    .collect();
                CellTrace { source, words, steps }
            })
            .collect()
    }
}

fn cell_name(shared: bool, i: usize) -> String {
    if shared {
        CELL_PREFIX.to_string()
    } else {
        format!("{CELL_PREFIX}{i}")
    }
}

impl MacModel {
    /// Builds freshly initialized parameters. The draw order is fixed, so
    /// equal seeds give bitwise-equal models.
    pub fn new(config: MacConfig, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, &mut rng, "input.embedding", cfg.vocab_size, EMBED_DIM);
        let lstm = BiLstm::new(&mut store, &mut rng, "input.lstm", EMBED_DIM, d);
        let kb = KbStem::new(&mut store, &mut rng, "input.kb", d);
        let word_proj = (cfg.control_variant == ControlVariant::WordVectors)
            .then(|| Linear::new(&mut store, &mut rng, "input.word_proj", EMBED_DIM, d));
        let q_proj = (1..=cfg.p)
            .map(|i| Linear::new(&mut store, &mut rng, &format!("input.q_proj.{i}"), d, d))
            .collect();
        let n_cells = if cfg.share_weights { 1 } else { cfg.p };
        let cells = (1..=n_cells)
            .map(|i| CellParams::new(&mut store, &mut rng, &cell_name(cfg.share_weights, i), cfg))
            .collect();
        let c0 = store.add("init.c0", Tensor::zeros(&[d]));
        let m0 = store.add("init.m0", Tensor::zeros(&[d]));
        let out_in = if cfg.predict_with_question { 2 * d } else { d };
        let out_hidden = Linear::new(&mut store, &mut rng, "output.hidden", out_in, d);
        let out_logits = Linear::new(&mut store, &mut rng, "output.logits", d, cfg.num_answers);
        Ok(Self {
            config,
            params: store,
            layout: MacLayout {
                embedding,
                lstm,
                kb,
                word_proj,
                q_proj,
                cells,
                c0,
                m0,
                out_hidden,
                out_logits,
            },
        })
    }

    /// Scalars in the recurrent cell block.
    pub fn cell_param_count(&self) -> usize {
        self.params.count_with_prefix(CELL_PREFIX)
    }

    fn cell(&self, step: usize) -> &CellParams {
        if self.config.share_weights {
            &self.layout.cells[0]
        } else {
            &self.layout.cells[step - 1]
        }
    }

    /// `q_i = W_i q + b_i` for step `i` in `1..=p`.
    pub fn position_aware_question(&self, tape: &mut Tape, p: &Bound, q: Var, i: usize) -> ModelResult<Var> {
        if i == 0 || i > self.config.p {
            return Err(TensorError::Contract(format!("step {i} outside 1..={}", self.config.p)).into());
        }
        Ok(self.layout.q_proj[i - 1].forward(tape, p, q)?)
    }

    /// Knowledge bases for `scenes`, stacked to `[B*H*W, d]`.
    pub fn build_knowledge_base(&self, tape: &mut Tape, p: &Bound, scenes: &[&Scene]) -> ModelResult<Var> {
        let g = self.config.grid_size;
        let mut data = Vec::new();
        for s in scenes {
            data.extend_from_slice(scene_features(s, g)?.data());
        }
        let rows = scenes.len() * g * g;
        let features = Tensor::new(vec![rows, super::kb::CELL_FEATURES], data)?;
        let features = tape.constant(features);
        Ok(self.layout.kb.forward(tape, p, features)?)
    }

    /// Runs the whole network on a batch with parameters `p` bound on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &[Example], mode: Mode) -> ModelResult<Forward> {
        let cfg = &self.config;
        let d = cfg.d;
        let b = batch.len();
        if b == 0 {
            return Err(TensorError::Contract("empty batch".into()).into());
        }
        let lengths: Vec<usize> = batch.iter().map(|e| e.tokens.len()).collect();
        let seq_len = *lengths.iter().max().expect("non-empty batch");
        if lengths.contains(&0) {
            return Err(TensorError::Contract("question with no tokens".into()).into());
        }
        if batch.iter().any(|e| e.tokens.contains(&0)) {
            return Err(TensorError::Domain {
                op: "embed",
                msg: "token id 0 is reserved for padding".into(),
            }
            .into());
        }
        let (training, mut rng) = match mode {
            Mode::Eval => (false, None),
            Mode::Train(r) => (true, Some(r)),
        };
        let mut mask = |rows: usize, dim: usize, keep: f64| -> Option<DropoutMask> {
            match rng.as_deref_mut() {
                Some(r) if keep < 1.0 => Some(DropoutMask::sample(r, rows, dim, keep)),
                _ => None,
            }
        };
        let h = d / 2;
        let embed_mask = mask(b, EMBED_DIM, cfg.embed_keep);
        let lstm_masks = (mask(b, h, cfg.lstm_recurrent_keep), mask(b, h, cfg.lstm_recurrent_keep));
        let kb_mask = mask(b, d, cfg.kb_keep);
        let memory_mask = mask(b, d, cfg.memory_keep);
        let output_mask = mask(b, d, cfg.output_keep);

        let padded = lengths.iter().any(|&l| l < seq_len);
        let mut ids = vec![0usize; b * seq_len];
        for (i, e) in batch.iter().enumerate() {
            ids[i * seq_len..i * seq_len + e.tokens.len()].copy_from_slice(e.tokens);
        }
        let token_mask: Option<Vec<bool>> = padded.then(|| ids.iter().map(|&t| t != 0).collect());

        let embedded = self.layout.embedding.forward(tape, p, &ids)?;
        let embedded = match &embed_mask {
            Some(m) => m.apply(tape, embedded, training, seq_len)?,
            None => embedded,
        };
        let recurrent = match &lstm_masks {
            (Some(f), Some(bw)) => Some((f, bw)),
            _ => None,
        };
        let encoded = self.layout.lstm.forward(tape, p, embedded, &lengths, seq_len, recurrent)?;
        let q = encoded.summary;

        let scenes: Vec<&Scene> = batch.iter().map(|e| e.scene).collect();
        let locations = cfg.locations();
        let kb = self.build_knowledge_base(tape, p, &scenes)?;
        let kb = match &kb_mask {
            Some(m) => m.apply(tape, kb, training, locations)?,
            None => kb,
        };

        let words = match cfg.control_variant {
            ControlVariant::WordAttention => Some(encoded.states),
            ControlVariant::WordVectors => {
                let proj = self.layout.word_proj.expect("word_vectors has a projection");
                Some(proj.forward(tape, p, embedded)?)
            }
            ControlVariant::QuestionVector | ControlVariant::None => None,
        };

        let mut c = tape.repeat_rows(p.var(self.layout.c0), b)?;
        let mut m = tape.repeat_rows(p.var(self.layout.m0), b)?;
        let zero_control = (cfg.control_variant == ControlVariant::None).then(|| tape.constant(Tensor::zeros(&[b, d])));
        let mut kb_proj: Vec<Option<Var>> = vec![None; self.layout.cells.len()];
        let mut history: Vec<(Var, Var)> = Vec::new();
        let mut steps = Vec::with_capacity(cfg.p);
        for i in 1..=cfg.p {
            let cell = self.cell(i);
            let slot = if cfg.share_weights { 0 } else { i - 1 };
            let q_i = self.position_aware_question(tape, p, q, i)?;
            let (c_new, cv) = match (cfg.control_variant, cell.control) {
                (ControlVariant::QuestionVector, _) => (q_i, None),
                (ControlVariant::None, _) => (zero_control.expect("zero control exists"), None),
                (_, Some(control)) => {
                    let w = words.expect("attending control has words");
                    let out = control.forward(tape, p, c, q_i, w, seq_len, token_mask.as_deref())?;
                    (out.c, Some(out.cv))
                }
                (_, None) => unreachable!("attending control variants build control parameters"),
            };
            let m_in = match &memory_mask {
                Some(mm) => mm.apply(tape, m, training, 1)?,
                None => m,
            };
            let projected = match kb_proj[slot] {
                Some(v) => v,
                None => {
                    let v = cell.read.project_kb(tape, p, kb)?;
                    kb_proj[slot] = Some(v);
                    v
                }
            };
            let read = cell.read.forward(tape, p, m_in, kb, projected, locations, c_new)?;
            let write = cell.write.forward(tape, p, read.r, m_in, c_new, &history, i)?;
            history.push((c_new, write.m));
            steps.push(StepVars {
                c: c_new,
                m: write.m,
                m_prev: m_in,
                candidate: write.candidate,
                cv,
                rv: read.rv,
                gate: write.gate,
                sa: write.sa,
            });
            c = c_new;
            m = write.m;
        }

        let out_in = if cfg.predict_with_question {
            tape.concat(q, m)?
        } else {
            m
        };
        let hidden = self.layout.out_hidden.forward(tape, p, out_in)?;
        let hidden = tape.elu(hidden);
        let hidden = match &output_mask {
            Some(om) => om.apply(tape, hidden, training, 1)?,
            None => hidden,
        };
        let logits = self.layout.out_logits.forward(tape, p, hidden)?;
        Ok(Forward {
            logits,
            q,
            words,
            lengths,
            seq_len,
            steps,
        })
    }

    /// Mean cross-entropy of `answers` under the network's logits.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[Example],
        answers: &[usize],
        mode: Mode,
    ) -> ModelResult<(Var, Forward)> {
        let fwd = self.forward(tape, p, batch, mode)?;
        let loss = tape.cross_entropy(fwd.logits, answers)?;
        Ok((loss, fwd))
    }

    /// Eval-mode logits using `values` (the model's own or a shadow copy).
    pub fn logits_with(&self, values: &ParamStore, batch: &[Example]) -> ModelResult<Tensor> {
        let mut tape = Tape::new();
        let p = values.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, batch, Mode::Eval)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Eval-mode traces using `values`.
    pub fn traces_with(
        &self,
        values: &ParamStore,
        source: ParamSource,
        batch: &[Example],
    ) -> ModelResult<(Tensor, Vec<CellTrace>)> {
        let mut tape = Tape::new();
        let p = values.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, batch, Mode::Eval)?;
        Ok((tape.value(fwd.logits).clone(), fwd.traces(&tape, source)))
    }

    /// Argmax answer id per example.
    pub fn predict_with(&self, values: &ParamStore, batch: &[Example]) -> ModelResult<Vec<usize>> {
        let logits = self.logits_with(values, batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::generate_scene;
    use crate::mac::WriteVariant;

    fn small(cfg: MacConfig) -> MacConfig {
        MacConfig {
            d: 8,
            p: 2,
            grid_size: 3,
            vocab_size: 10,
            num_answers: 5,
            ..cfg
        }
    }

    fn scene(seed: u64) -> Scene {
        generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), 3, 3).unwrap()
    }

    #[test]
    fn shared_cell_block_is_constant_in_p() {
        let count = |p, share| {
            MacModel::new(MacConfig { p, share_weights: share, ..MacConfig::default() }, 0)
                .unwrap()
                .cell_param_count()
        };
        assert_eq!(count(4, true), count(8, true));
        assert_eq!(count(4, false), 4 * count(4, true));
        assert_eq!(count(1, false), count(1, true));
    }

    #[test]
    fn same_seed_same_logits() {
        let s = scene(1);
        let ex = [Example { tokens: &[1, 2, 3], scene: &s }];
        let a = MacModel::new(small(MacConfig::default()), 5).unwrap();
        let b = MacModel::new(small(MacConfig::default()), 5).unwrap();
        assert_eq!(a.logits_with(&a.params, &ex).unwrap(), b.logits_with(&b.params, &ex).unwrap());
    }

    #[test]
    fn padding_and_batching_leave_logits_bitwise_unchanged() {
        let (s1, s2) = (scene(1), scene(2));
        let model = MacModel::new(small(MacConfig::default()), 7).unwrap();
        let short = Example { tokens: &[4, 2], scene: &s1 };
        let long = Example { tokens: &[1, 2, 3, 5, 9], scene: &s2 };
        let alone = model.logits_with(&model.params, &[short]).unwrap();
        let batched = model.logits_with(&model.params, &[long, short]).unwrap();
        assert_eq!(alone.row(0), batched.row(1));
    }

    #[test]
    fn single_word_questions_attend_fully_to_it() {
        let s = scene(3);
        let model = MacModel::new(small(MacConfig::default()), 1).unwrap();
        let (_, traces) = model
            .traces_with(&model.params, ParamSource::Raw, &[Example { tokens: &[7], scene: &s }])
            .unwrap();
        for step in &traces[0].steps {
            assert_eq!(step.cv.as_deref(), Some(&[1.0][..]));
        }
    }

    #[test]
    fn every_variant_runs_and_traces_are_distributions() {
        let s = scene(4);
        let ex = [
            Example { tokens: &[1, 2, 3], scene: &s },
            Example { tokens: &[4], scene: &s },
        ];
        for &control in ControlVariant::ALL {
            for &write in WriteVariant::ALL {
                for (sa, gate) in [(false, false), (true, true)] {
                    let cfg = MacConfig {
                        p: 3,
                        ..small(MacConfig {
                            control_variant: control,
                            write_variant: write,
                            use_self_attention: sa,
                            use_memory_gate: gate,
                            ..MacConfig::default()
                        })
                    };
                    let model = MacModel::new(cfg, 2).unwrap();
                    let (logits, traces) = model.traces_with(&model.params, ParamSource::Raw, &ex).unwrap();
                    assert!(logits.all_finite());
                    assert_eq!(logits.shape(), &[2, 5]);
                    for t in &traces {
                        assert_eq!(t.steps.len(), 3);
                        assert!(t.distributions_ok(1e-9));
                        let e = t.control_reconstruction_error();
                        assert!(e < 1e-12, "{control} {write} {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn training_mode_is_reproducible_from_the_generator() {
        let s = scene(5);
        let ex = [Example { tokens: &[1, 2, 3], scene: &s }];
        let model = MacModel::new(small(MacConfig::default()), 3).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let (loss, _) = model.loss(&mut tape, &p, &ex, &[1], Mode::Train(&mut rng)).unwrap();
            tape.value(loss).item()
        };
        assert_eq!(run(9).to_bits(), run(9).to_bits());
        let eval = {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let (loss, _) = model.loss(&mut tape, &p, &ex, &[1], Mode::Eval).unwrap();
            tape.value(loss).item()
        };
        assert_ne!(run(9), eval);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let s = scene(6);
        let model = MacModel::new(small(MacConfig::default()), 0).unwrap();
        assert!(model.logits_with(&model.params, &[]).is_err());
        assert!(model.logits_with(&model.params, &[Example { tokens: &[], scene: &s }]).is_err());
        assert!(model.logits_with(&model.params, &[Example { tokens: &[0, 1], scene: &s }]).is_err());
        assert!(model.logits_with(&model.params, &[Example { tokens: &[10], scene: &s }]).is_err());
        let big = generate_scene(&mut ChaCha8Rng::seed_from_u64(0), 4, 3).unwrap();
        assert!(matches!(
            model.logits_with(&model.params, &[Example { tokens: &[1], scene: &big }]),
            Err(ModelError::Scene(SceneError::GridMismatch { .. }))
        ));
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let q = tape.constant(Tensor::zeros(&[1, 8]));
        assert!(model.position_aware_question(&mut tape, &p, q, 0).is_err());
        assert!(model.position_aware_question(&mut tape, &p, q, 3).is_err());
    }

    #[test]
    fn zero_output_weights_give_uniform_answers() {
        let s = scene(7);
        let mut model = MacModel::new(small(MacConfig::default()), 0).unwrap();
        let l = model.layout.out_logits;
        model.params.get_mut(l.w).data_mut().fill(0.0);
        let logits = model.logits_with(&model.params, &[Example { tokens: &[1, 2], scene: &s }]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
}
