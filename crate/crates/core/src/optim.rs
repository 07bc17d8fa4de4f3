//! Adam, global-norm clipping, weight averaging and early stopping.

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in `{name}` at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("expected {want} gradient tensors, got {got}")]
    Count { want: usize, got: usize },
    #[error("gradient for `{name}` has shape {got:?}, parameter has {want:?}")]
    Shape { name: String, want: Vec<usize>, got: Vec<usize> },
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Count {
                want: params.len(),
                got: grads.len(),
            });
        }
        for (id, g) in params.ids().zip(grads) {
            let p = params.get(id);
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name: params.name(id).into(),
                    want: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFinite {
                    name: params.name(id).into(),
                    index,
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ParamStore,
}

impl Ema {
    /// Shadow starts as a copy of `params`.
    pub fn new(decay: f64, params: &ParamStore) -> Self {
        assert!((0.0..=1.0).contains(&decay), "decay must lie in [0, 1]");
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamStore) {
        let d = self.decay;
        for (s, p) in self.shadow.values_mut().iter_mut().zip(params.values()) {
            assert_eq!(s.shape(), p.shape(), "EMA shadow shape drifted");
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_index: usize },
}

/// Stops once the best validation score is `patience` evaluations old.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    history: Vec<f64>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            history: Vec::new(),
        }
    }

    /// Index of the first maximum so far.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.history.iter().enumerate() {
            if best.is_none_or(|b| v > self.history[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Records a score and reports whether training should stop.
    pub fn observe(&mut self, score: f64) -> StopDecision {
        self.history.push(score);
        let best = self.best_index().expect("history is non-empty");
        if self.history.len() - 1 - best >= self.patience {
            StopDecision::Stop { best_index: best }
        } else {
            StopDecision::Continue
        }
    }
}

/// Decision for a whole history at once.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    let mut es = EarlyStopping::new(patience);
    let mut last = StopDecision::Continue;
    for &h in history {
        last = es.observe(h);
        if last != StopDecision::Continue {
            break;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[&[f64]]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::vector(v.to_vec()));
        }
        s
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::vector(vec![0.3, 0.4])];
        clip_gradients(&mut g, 8.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = store(&[&[0.5]]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((0.5 - p.values()[0].data()[0] - 1e-4).abs() < 1e-11);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[&[0.5, -2.0]]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_is_an_error_and_changes_nothing() {
        let mut p = store(&[&[1.0], &[2.0]]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam
            .step(&mut p, &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert_eq!(err, OptimError::NonFinite { name: "p1".into(), index: 0 });
        assert_eq!(p, before);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn ema_examples() {
        let zero = store(&[&[0.0]]);
        let one = store(&[&[1.0]]);
        let mut ema = Ema::new(0.999, &zero);
        ema.update(&one);
        assert!((ema.shadow.values()[0].data()[0] - 0.001).abs() < 1e-15);
        let mut fixed = Ema::new(0.999, &one);
        for _ in 0..100 {
            fixed.update(&one);
        }
        assert_eq!(fixed.shadow, one);
    }

    #[test]
    fn ema_converges_geometrically() {
        let start = store(&[&[5.0]]);
        let target = store(&[&[2.0]]);
        let mut ema = Ema::new(0.999, &start);
        for k in 1..=500 {
            ema.update(&target);
            let want = 0.999f64.powi(k) * 3.0;
            let got = ema.shadow.values()[0].data()[0] - 2.0;
            assert!((got - want).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn early_stopping_examples() {
        assert_eq!(early_stop(&[0.5, 0.6, 0.7], 2), StopDecision::Continue);
        assert_eq!(early_stop(&[0.7, 0.6, 0.6], 2), StopDecision::Stop { best_index: 0 });
        let rising: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(early_stop(&rising, 1), StopDecision::Continue);
    }
}
