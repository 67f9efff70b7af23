//! A denoiser paired with its text embedder.

use std::path::Path;

use ditlab_numerics::{io, Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardInputs, Network, ParamVars};
use crate::diffusion::EpsPredictor;
use crate::text::{TextBatch, TextEmbedder, Vocab};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TextToImage<T: Scalar = f32> {
    pub net: Network<T>,
    pub embedder: TextEmbedder<T>,
}

/// A model registered on one graph.
pub struct BoundModel<'a, T: Scalar = f32> {
    pub model: &'a TextToImage<T>,
    pub net_vars: ParamVars,
    pub text_vars: Vec<Var>,
}

impl<T: Scalar> TextToImage<T> {
    /// Embedder width and length follow the network's text settings.
    pub fn new(net: Network<T>, vocab_size: usize, seed: u64) -> Self {
        let c = net.config();
        let embedder = TextEmbedder::new(vocab_size, c.text_dim, c.text_len, seed);
        Self { net, embedder }
    }

    pub fn bind(&self, g: &mut Graph<T>, train_net: bool, train_text: bool) -> BoundModel<'_, T> {
        BoundModel {
            model: self,
            net_vars: self.net.bind(g, train_net),
            text_vars: self.embedder.bind(g, train_text),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TextToImage<U> {
        TextToImage {
            net: self.net.cast(),
            embedder: self.embedder.cast(),
        }
    }
}

impl<T: Scalar> EpsPredictor<T> for BoundModel<'_, T> {
    fn predict_eps(
        &self,
        g: &mut Graph<T>,
        x_t: Var,
        timesteps: &[f64],
        text: &TextBatch,
        condition: Option<Var>,
    ) -> Result<Var> {
        let emb = self.model.embedder.embed(g, &self.text_vars, text)?;
        self.model.net.forward(
            g,
            &self.net_vars,
            ForwardInputs {
                x: x_t,
                timesteps,
                text: emb,
                text_mask: Some(&text.mask),
                condition,
            },
        )
    }
}

/// Binds every parameter as a constant on each call.
impl<T: Scalar> EpsPredictor<T> for TextToImage<T> {
    fn predict_eps(
        &self,
        g: &mut Graph<T>,
        x_t: Var,
        timesteps: &[f64],
        text: &TextBatch,
        condition: Option<Var>,
    ) -> Result<Var> {
        self.bind(g, false, false).predict_eps(g, x_t, timesteps, text, condition)
    }
}

pub const TEXT_FILE: &str = "text_embedder.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Serialize, Deserialize)]
struct EmbedderMeta {
    vocab: Vocab,
    dim: usize,
    len: usize,
}

impl TextToImage<f32> {
    /// Network checkpoint plus the embedder tensors and vocabulary.
    pub fn save(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        self.net.save(dir)?;
        let meta = EmbedderMeta {
            vocab: vocab.clone(),
            dim: self.embedder.dim,
            len: self.embedder.len,
        };
        std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(TEXT_FILE))?);
        for (_, t) in self.embedder.params() {
            io::write_tensor(&mut w, t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Vocab)> {
        let net = Network::load(dir)?;
        let meta: EmbedderMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let tensors = io::read_tensors(&mut std::io::BufReader::new(std::fs::File::open(dir.join(TEXT_FILE))?))?;
        let fresh = TextEmbedder::<f32>::new(meta.vocab.len(), meta.dim, meta.len, 0);
        if tensors.len() != fresh.params().len()
            || tensors.iter().zip(fresh.params()).any(|(a, (_, b))| a.shape() != b.shape())
        {
            return Err(Error::Data("text embedder tensors do not match the vocabulary".into()));
        }
        let params = fresh.params().iter().map(|(n, _)| n.clone()).zip(tensors).collect();
        let embedder = TextEmbedder::from_params(meta.vocab.len(), meta.dim, meta.len, params)?;
        Ok((Self { net, embedder }, meta.vocab))
    }
}
