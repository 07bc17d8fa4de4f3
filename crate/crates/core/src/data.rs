//! Vocabularies, JSONL datasets, batching and binary checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::gridworld::{answer_vocabulary, vocabulary_words, Answer, Category, QAInstance};
use crate::mac::{Example, MacConfig, MacModel, ModelError};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("word `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("answer `{0}` is not in the answer vocabulary")]
    UnknownAnswer(String),
    #[error("id {0} is outside the vocabulary")]
    UnknownId(usize),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const PAD: &str = "<pad>";

/// Word and answer id maps. Word id 0 is padding; answers start at 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    answers: Vec<String>,
}

impl Vocab {
    pub fn new(words: Vec<String>, answers: Vec<String>) -> Self {
        let mut all = vec![PAD.to_string()];
        all.extend(words.into_iter().filter(|w| w != PAD));
        Self { words: all, answers }
    }

    /// Every word the question templates can emit and every answer on a
    /// `grid_size` grid.
    pub fn standard(grid_size: usize) -> Self {
        Self::new(vocabulary_words(), answer_vocabulary(grid_size))
    }

    /// Word ids including padding.
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn word_id(&self, w: &str) -> Result<usize, DataError> {
        match self.words.iter().position(|x| x == w) {
            Some(0) | None => Err(DataError::UnknownWord(w.into())),
            Some(i) => Ok(i),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, DataError> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, DataError> {
        ids.iter()
            .map(|&i| match self.words.get(i) {
                Some(w) if i != 0 => Ok(w.clone()),
                _ => Err(DataError::UnknownId(i)),
            })
            .collect()
    }

    pub fn answer_id(&self, a: &Answer) -> Result<usize, DataError> {
        let w = a.word();
        self.answers
            .iter()
            .position(|x| *x == w)
            .ok_or(DataError::UnknownAnswer(w))
    }

    pub fn answer_word(&self, id: usize) -> Result<&str, DataError> {
        self.answers.get(id).map(String::as_str).ok_or(DataError::UnknownId(id))
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("vocab serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// One JSON object per line.
pub fn write_dataset(instances: &[QAInstance], path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for q in instances {
        let line = serde_json::to_string(q).expect("instances serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<QAInstance>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let q = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

/// Instances with their token and answer ids.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub instances: Vec<QAInstance>,
    pub tokens: Vec<Vec<usize>>,
    pub answers: Vec<usize>,
}

impl EncodedDataset {
    pub fn new(instances: Vec<QAInstance>, vocab: &Vocab) -> Result<Self, DataError> {
        let tokens = instances
            .iter()
            .map(|q| vocab.encode(&q.tokens))
            .collect::<Result<_, _>>()?;
        let answers = instances
            .iter()
            .map(|q| vocab.answer_id(&q.answer))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            instances,
            tokens,
            answers,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            tokens: &self.tokens[i],
            scene: &self.instances[i].scene,
        }
    }

    pub fn category(&self, i: usize) -> Category {
        self.instances[i].category
    }
}

/// A padded group of instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, seq_len]` row-major, 0 at padding.
    pub token_ids: Vec<usize>,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub answers: Vec<usize>,
}

impl Batch {
    pub fn from_indices(data: &EncodedDataset, indices: Vec<usize>) -> Self {
        let lengths: Vec<usize> = indices.iter().map(|&i| data.tokens[i].len()).collect();
        let seq_len = lengths.iter().copied().max().unwrap_or(0);
        let mut token_ids = vec![0; indices.len() * seq_len];
        for (b, &i) in indices.iter().enumerate() {
            token_ids[b * seq_len..][..lengths[b]].copy_from_slice(&data.tokens[i]);
        }
        let answers = indices.iter().map(|&i| data.answers[i]).collect();
        Self {
            indices,
            token_ids,
            seq_len,
            lengths,
            answers,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Network inputs borrowing this batch's tokens and `data`'s scenes.
    pub fn examples<'a>(&'a self, data: &'a EncodedDataset) -> Vec<Example<'a>> {
        self.indices
            .iter()
            .enumerate()
            .map(|(b, &i)| Example {
                tokens: &self.token_ids[b * self.seq_len..][..self.lengths[b]],
                scene: &data.instances[i].scene,
            })
            .collect()
    }
}

/// Splits `0..data.len()` into batches, shuffled by `seed` when asked. The
/// last batch may be short.
pub fn make_batches(data: &EncodedDataset, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|c| Batch::from_indices(data, c.to_vec()))
        .collect()
}

const MAGIC: &[u8; 8] = b"MACNETCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    config: String,
    params: Vec<TensorEntry>,
    has_ema: bool,
    meta: serde_json::Value,
}

/// A loaded checkpoint: a model (raw weights) and optional averaged weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MacModel,
    pub ema: Option<ParamStore>,
    pub meta: serde_json::Value,
}

/// Writes magic, version, a length-prefixed JSON manifest, then every
/// parameter as little-endian f64 (raw weights, then averaged weights).
pub fn save_checkpoint(
    path: &Path,
    model: &MacModel,
    ema: Option<&ParamStore>,
    meta: serde_json::Value,
) -> Result<(), DataError> {
    let manifest = Manifest {
        config_hash: model.config.hash(),
        config: model.config.to_text(),
        params: model
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        has_ema: ema.is_some(),
        meta,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(20 + json.len() + 16 * model.params.num_scalars());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for store in std::iter::once(&model.params).chain(ema) {
        for t in store.values() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn parse_config_text(text: &str) -> Result<MacConfig, DataError> {
    let mut cfg = MacConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Checkpoint(format!("bad config line `{line}`")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| DataError::Checkpoint(e.to_string()))?;
    }
    Ok(cfg)
}

/// Reads a checkpoint. With `expected`, refuses one written under a
/// different configuration.
pub fn load_checkpoint(path: &Path, expected: Option<&MacConfig>) -> Result<Checkpoint, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |m: &str| DataError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let config = parse_config_text(&manifest.config)?;
    if config.hash() != manifest.config_hash {
        return Err(bad("config text does not match its hash"));
    }
    if let Some(want) = expected {
        if want.hash() != manifest.config_hash {
            return Err(DataError::HashMismatch {
                expected: want.hash(),
                found: manifest.config_hash,
            });
        }
    }
    let mut model = MacModel::new(config, 0)?;
    let layout: Vec<TensorEntry> = model
        .params
        .iter()
        .map(|(n, t)| TensorEntry {
            name: n.into(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if layout != manifest.params {
        return Err(bad("parameter layout does not match the configuration"));
    }
    let mut values = bytes[20 + len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let stores = if manifest.has_ema { 2 } else { 1 };
    if bytes.len() - 20 - len != 8 * stores * model.params.num_scalars() {
        return Err(bad("value block has the wrong length"));
    }
    let mut read_store = |like: &ParamStore| -> Vec<Tensor> {
        like.values()
            .iter()
            .map(|t| {
                let data = values.by_ref().take(t.numel()).collect();
                Tensor::new(t.shape().to_vec(), data).expect("lengths checked above")
            })
            .collect()
    };
    let raw = read_store(&model.params);
    let ema = manifest.has_ema.then(|| read_store(&model.params));
    model.params.set_values(raw).map_err(ModelError::from)?;
    let ema = match ema {
        Some(v) => {
            let mut s = model.params.clone();
            s.set_values(v).map_err(ModelError::from)?;
            Some(s)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        ema,
        meta: manifest.meta,
    })
}
