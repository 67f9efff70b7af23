//! Toy caption tokenizer and the learnable text embedder standing in for a real encoder.

use std::collections::HashMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ditlab_numerics::{init::trunc_normal, Graph, Scalar, Tensor, Var};

use crate::backbone::{INIT_STD, MLP_RATIO};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<unk>"];

/// Word-level vocabulary. Every encoded caption starts with BOS, so even the
/// empty (null) caption has one visible position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let lookup = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, lookup }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.lookup.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    /// BOS, the caption's words truncated to fit, then PAD up to `len`.
    pub fn encode(&self, caption: &str, len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut ids = vec![BOS];
        ids.extend(
            caption
                .split_whitespace()
                .map(|w| self.id(w.trim_matches(|c: char| !c.is_alphanumeric())))
                .take(len.saturating_sub(1)),
        );
        ids.truncate(len);
        let mut mask = vec![true; ids.len()];
        ids.resize(len, PAD);
        mask.resize(len, false);
        (ids, mask)
    }
}

/// Token ids and padding mask of a caption batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn encode(vocab: &Vocab, captions: &[&str], len: usize) -> Self {
        let mut ids = Vec::with_capacity(captions.len() * len);
        let mut mask = Vec::with_capacity(captions.len() * len);
        for c in captions {
            let (i, m) = vocab.encode(c, len);
            ids.extend(i);
            mask.extend(m);
        }
        Self {
            ids,
            mask,
            batch: captions.len(),
            len,
        }
    }

    /// The null caption (BOS only) repeated `batch` times.
    pub fn null(batch: usize, len: usize) -> Self {
        let mut ids = vec![PAD; batch * len];
        let mut mask = vec![false; batch * len];
        for b in 0..batch {
            ids[b * len] = BOS;
            mask[b * len] = true;
        }
        Self {
            ids,
            mask,
            batch,
            len,
        }
    }

    /// Rows flagged in `drop` replaced by the null caption.
    pub fn with_dropped(&self, drop: &[bool]) -> Self {
        let null = Self::null(self.batch, self.len);
        let mut out = self.clone();
        for (b, &d) in drop.iter().enumerate() {
            if d {
                let r = b * self.len..(b + 1) * self.len;
                out.ids[r.clone()].copy_from_slice(&null.ids[r.clone()]);
                out.mask[r.clone()].copy_from_slice(&null.mask[r]);
            }
        }
        out
    }

    pub fn row(&self, b: usize) -> Self {
        let r = b * self.len..(b + 1) * self.len;
        Self {
            ids: self.ids[r.clone()].to_vec(),
            mask: self.mask[r].to_vec(),
            batch: 1,
            len: self.len,
        }
    }

    pub fn concat(parts: &[TextBatch]) -> Result<Self> {
        let len = parts.first().map_or(0, |p| p.len);
        if parts.iter().any(|p| p.len != len) {
            return Err(Error::Input("text batches of different lengths".into()));
        }
        Ok(Self {
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            mask: parts.iter().flat_map(|p| p.mask.iter().copied()).collect(),
            batch: parts.iter().map(|p| p.batch).sum(),
            len,
        })
    }
}

/// Token table plus positions, one pre-norm residual MLP and a final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedder<T: Scalar = f32> {
    pub vocab_size: usize,
    pub dim: usize,
    pub len: usize,
    params: Vec<(String, Tensor<T>)>,
}

const EMBEDDER_PARAMS: [&str; 8] = [
    "tok_embed",
    "pos_embed",
    "norm.g",
    "norm.b",
    "mlp.fc1.w",
    "mlp.fc1.b",
    "mlp.fc2.w",
    "mlp.fc2.b",
];

impl<T: Scalar> TextEmbedder<T> {
    pub fn new(vocab_size: usize, dim: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            ("tok_embed".to_string(), trunc_normal(vec![vocab_size, dim], INIT_STD, &mut rng)),
            ("pos_embed".to_string(), trunc_normal(vec![len, dim], INIT_STD, &mut rng)),
            ("norm.g".to_string(), Tensor::ones(vec![dim])),
            ("norm.b".to_string(), Tensor::zeros(vec![dim])),
            ("mlp.fc1.w".to_string(), trunc_normal(vec![dim, MLP_RATIO * dim], INIT_STD, &mut rng)),
            ("mlp.fc1.b".to_string(), Tensor::zeros(vec![MLP_RATIO * dim])),
            ("mlp.fc2.w".to_string(), trunc_normal(vec![MLP_RATIO * dim, dim], INIT_STD, &mut rng)),
            ("mlp.fc2.b".to_string(), Tensor::zeros(vec![dim])),
        ];
        debug_assert!(params.iter().map(|(n, _)| n.as_str()).eq(EMBEDDER_PARAMS));
        Self {
            vocab_size,
            dim,
            len,
            params,
        }
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// `[batch, len, dim]` embeddings of `text`.
    pub fn embed(&self, g: &mut Graph<T>, vars: &[Var], text: &TextBatch) -> Result<Var> {
        if text.len != self.len {
            return Err(Error::Input(format!(
                "text embedder holds {} positions, got {}",
                self.len, text.len
            )));
        }
        if let Some(&bad) = text.ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let [tok, pos, ng, nb, w1, b1, w2, b2] = vars else {
            return Err(Error::Input("text embedder vars do not match".into()));
        };
        let e = g.gather_rows(*tok, &text.ids)?;
        let e = g.reshape(e, vec![text.batch, text.len, self.dim])?;
        let p = g.expand(*pos, 0, text.batch)?;
        let e = g.add(e, p)?;
        let n = g.layer_norm(e, Some(*ng), Some(*nb))?;
        let m = g.linear(n, *w1, Some(*b1))?;
        let m = g.gelu(m);
        let m = g.linear(m, *w2, Some(*b2))?;
        let e = g.add(e, m)?;
        Ok(g.layer_norm(e, None, None)?)
    }

    pub fn cast<U: Scalar>(&self) -> TextEmbedder<U> {
        TextEmbedder {
            vocab_size: self.vocab_size,
            dim: self.dim,
            len: self.len,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub(crate) fn from_params(vocab_size: usize, dim: usize, len: usize, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if !params.iter().map(|(n, _)| n.as_str()).eq(EMBEDDER_PARAMS) {
            return Err(Error::Data("text embedder parameter names do not match".into()));
        }
        Ok(Self {
            vocab_size,
            dim,
            len,
            params,
        })
    }
}
