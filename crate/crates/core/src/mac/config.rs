use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::gridworld::{answer_vocabulary, vocabulary_words};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
}

/// What the control state is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// Attention over the biLSTM's contextual words.
    WordAttention,
    /// Attention over (projected) raw word embeddings.
    WordVectors,
    /// `c_i = q_i`, no attention.
    QuestionVector,
    /// Constant zero control.
    None,
}

/// How the write unit forms the candidate memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteVariant {
    /// `W[r, m_prev] + b`, optionally with self-attention and a gate.
    Linear,
    /// The retrieved vector itself.
    RetrievedDirect,
    /// `W r + b`.
    RetrievedAffine,
    /// Gated blend of the previous memory and the retrieved vector.
    GateOnly,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($name => Some($ty::$variant),)* _ => None }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(ControlVariant {
    WordAttention => "word_attention",
    WordVectors => "word_vectors",
    QuestionVector => "question_vector",
    None => "none",
});

named_enum!(WriteVariant {
    Linear => "linear",
    RetrievedDirect => "retrieved_direct",
    RetrievedAffine => "retrieved_affine",
    GateOnly => "gate_only",
});

/// Architecture, ablation switches and task dimensions of a MAC network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacConfig {
    /// State width.
    pub d: usize,
    /// Number of cells.
    pub p: usize,
    pub share_weights: bool,
    pub use_self_attention: bool,
    pub use_memory_gate: bool,
    /// Initial value of the gate's bias.
    pub gate_bias: f64,
    pub control_variant: ControlVariant,
    pub write_variant: WriteVariant,
    pub predict_with_question: bool,
    pub direct_kb_in_read: bool,
    pub grid_size: usize,
    /// Word ids including the padding id 0.
    pub vocab_size: usize,
    pub num_answers: usize,
    /// Keep probabilities of the dropout sites; 1.0 disables a site.
    pub embed_keep: f64,
    pub kb_keep: f64,
    pub memory_keep: f64,
    pub lstm_recurrent_keep: f64,
    pub output_keep: f64,
}

impl Default for MacConfig {
    fn default() -> Self {
        Self {
            d: 64,
            p: 4,
            share_weights: true,
            use_self_attention: false,
            use_memory_gate: false,
            gate_bias: 1.0,
            control_variant: ControlVariant::WordAttention,
            write_variant: WriteVariant::Linear,
            predict_with_question: true,
            direct_kb_in_read: true,
            grid_size: 5,
            vocab_size: vocabulary_words().len() + 1,
            num_answers: answer_vocabulary(5).len(),
            embed_keep: 0.85,
            kb_keep: 0.85,
            memory_keep: 0.85,
            lstm_recurrent_keep: 1.0,
            output_keep: 1.0,
        }
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_named<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<T, ConfigError> {
    f(value.trim()).ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "unknown variant".into(),
    })
}

impl MacConfig {
    /// Names accepted by [`MacConfig::set`], in canonical order.
    pub const KEYS: [&'static str; 18] = [
        "d",
        "p",
        "share_weights",
        "use_self_attention",
        "use_memory_gate",
        "gate_bias",
        "control_variant",
        "write_variant",
        "predict_with_question",
        "direct_kb_in_read",
        "grid_size",
        "vocab_size",
        "num_answers",
        "embed_keep",
        "kb_keep",
        "memory_keep",
        "lstm_recurrent_keep",
        "output_keep",
    ];

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.p < 1 {
            return bad("p must be at least 1".into());
        }
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be even and positive, got {}", self.d));
        }
        if self.grid_size < 1 {
            return bad("grid_size must be at least 1".into());
        }
        if self.vocab_size < 2 || self.num_answers < 1 {
            return bad("vocab_size and num_answers must be positive".into());
        }
        if !self.gate_bias.is_finite() {
            return bad("gate_bias must be finite".into());
        }
        for (k, v) in [
            ("embed_keep", self.embed_keep),
            ("kb_keep", self.kb_keep),
            ("memory_keep", self.memory_keep),
            ("lstm_recurrent_keep", self.lstm_recurrent_keep),
            ("output_keep", self.output_keep),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{k} must lie in (0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "d" => self.d = parse_value(key, value)?,
            "p" => self.p = parse_value(key, value)?,
            "share_weights" => self.share_weights = parse_value(key, value)?,
            "use_self_attention" => self.use_self_attention = parse_value(key, value)?,
            "use_memory_gate" => self.use_memory_gate = parse_value(key, value)?,
            "gate_bias" => self.gate_bias = parse_value(key, value)?,
            "control_variant" => self.control_variant = parse_named(key, value, ControlVariant::from_name)?,
            "write_variant" => self.write_variant = parse_named(key, value, WriteVariant::from_name)?,
            "predict_with_question" => self.predict_with_question = parse_value(key, value)?,
            "direct_kb_in_read" => self.direct_kb_in_read = parse_value(key, value)?,
            "grid_size" => self.grid_size = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "num_answers" => self.num_answers = parse_value(key, value)?,
            "embed_keep" => self.embed_keep = parse_value(key, value)?,
            "kb_keep" => self.kb_keep = parse_value(key, value)?,
            "memory_keep" => self.memory_keep = parse_value(key, value)?,
            "lstm_recurrent_keep" => self.lstm_recurrent_keep = parse_value(key, value)?,
            "output_keep" => self.output_keep = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d" => self.d.to_string(),
            "p" => self.p.to_string(),
            "share_weights" => self.share_weights.to_string(),
            "use_self_attention" => self.use_self_attention.to_string(),
            "use_memory_gate" => self.use_memory_gate.to_string(),
            "gate_bias" => format!("{:?}", self.gate_bias),
            "control_variant" => self.control_variant.to_string(),
            "write_variant" => self.write_variant.to_string(),
            "predict_with_question" => self.predict_with_question.to_string(),
            "direct_kb_in_read" => self.direct_kb_in_read.to_string(),
            "grid_size" => self.grid_size.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "num_answers" => self.num_answers.to_string(),
            "embed_keep" => format!("{:?}", self.embed_keep),
            "kb_keep" => format!("{:?}", self.kb_keep),
            "memory_keep" => format!("{:?}", self.memory_keep),
            "lstm_recurrent_keep" => format!("{:?}", self.lstm_recurrent_keep),
            "output_keep" => format!("{:?}", self.output_keep),
            _ => return None,
        })
    }

    /// Canonical `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    /// Hex SHA-256 of [`MacConfig::to_text`]; checkpoints record it.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Whether the write unit ends in the sigmoid gate.
    pub fn gated(&self) -> bool {
        self.use_memory_gate || self.write_variant == WriteVariant::GateOnly
    }

    /// Whether the write unit attends over earlier steps.
    pub fn self_attends(&self) -> bool {
        self.use_self_attention && self.write_variant == WriteVariant::Linear
    }

    /// Locations in the knowledge base.
    pub fn locations(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = MacConfig {
            gate_bias: -1.0,
            control_variant: ControlVariant::QuestionVector,
            ..MacConfig::default()
        };
        cfg.embed_keep = 0.9;
        let mut back = MacConfig::default();
        for line in cfg.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn validation_rejects_odd_d_and_zero_p() {
        assert!(MacConfig { d: 7, ..MacConfig::default() }.validate().is_err());
        assert!(MacConfig { p: 0, ..MacConfig::default() }.validate().is_err());
        assert!(MacConfig { kb_keep: 0.0, ..MacConfig::default() }.validate().is_err());
        MacConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_variants_are_errors() {
        let mut cfg = MacConfig::default();
        assert_eq!(cfg.set("depth", "3"), Err(ConfigError::UnknownKey("depth".into())));
        assert!(matches!(cfg.set("control_variant", "magic"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("p", "four"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = MacConfig::default();
        for key in MacConfig::KEYS {
            let mut other = base.clone();
            let v = match key {
                "control_variant" => "none".to_string(),
                "write_variant" => "gate_only".to_string(),
                k if base.get(k).unwrap().parse::<bool>().is_ok() => (!base.get(k).unwrap().parse::<bool>().unwrap()).to_string(),
                "gate_bias" | "embed_keep" | "kb_keep" | "memory_keep" | "lstm_recurrent_keep" | "output_keep" => "0.5".to_string(),
                _ => "2".to_string(),
            };
            other.set(key, &v).unwrap();
            assert_ne!(other.hash(), base.hash(), "{key}");
        }
    }
}
