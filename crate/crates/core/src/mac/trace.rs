use serde::{Deserialize, Serialize};

/// Which weights produced a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    Raw,
    Ema,
}

/// Values recorded for one reasoning step of one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub c: Vec<f64>,
    pub m: Vec<f64>,
    /// Memory fed into the cell.
    pub m_prev: Vec<f64>,
    /// Candidate memory before the gate.
    pub candidate: Vec<f64>,
    /// Word attention over real tokens; absent when control does not attend.
    pub cv: Option<Vec<f64>>,
    /// Grid attention, row-major.
    pub rv: Vec<f64>,
    pub gate: Option<f64>,
    /// Attention over steps `1..i`, present from step 2 when self-attending.
    pub sa: Option<Vec<f64>>,
}

/// Everything a forward pass exposes about one example's reasoning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    pub source: ParamSource,
    /// Vectors the control unit attends over, one per real token.
    pub words: Vec<Vec<f64>>,
    pub steps: Vec<StepTrace>,
}

fn is_distribution(v: &[f64], tol: f64) -> bool {
    !v.is_empty() && v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

impl CellTrace {
    /// Checks that every recorded attention vector is a distribution.
    pub fn distributions_ok(&self, tol: f64) -> bool {
        self.steps.iter().all(|s| {
            s.cv.as_ref().is_none_or(|cv| is_distribution(cv, tol))
                && is_distribution(&s.rv, tol)
                && s.sa.as_ref().is_none_or(|sa| is_distribution(sa, tol))
        })
    }

    /// Largest deviation between each stored `c_i` and `sum_s cv_s * word_s`.
    pub fn control_reconstruction_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in &self.steps {
            let Some(cv) = &s.cv else { continue };
            for (j, &c) in s.c.iter().enumerate() {
                let rebuilt: f64 = cv.iter().zip(&self.words).map(|(w, word)| w * word[j]).sum();
                worst = worst.max((rebuilt - c).abs());
            }
        }
        worst
    }
}
