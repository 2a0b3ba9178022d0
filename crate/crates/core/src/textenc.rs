//! Closed-vocabulary tokenizer and a small bidirectional transformer encoder.

use ldz_tensor::nn::{Attention, Builder, LayerNorm, Linear};
use ldz_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdzError, Result};
use crate::synthdata::{Background, ColorName, ShapeKind, PREFIXES};

pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";

/// Sorted token list; ids are positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// Every word the caption grammar can produce, plus `a` and the specials.
    pub fn from_grammar() -> Vocab {
        let mut tokens: Vec<String> = vec![BOS.into(), PAD.into(), "a".into()];
        for p in PREFIXES {
            tokens.extend(p.split_whitespace().map(String::from));
        }
        for c in ColorName::ALL {
            tokens.push(c.word().into());
        }
        for s in ShapeKind::ALL {
            tokens.push(s.word().into());
            tokens.push(s.plural().into());
        }
        for b in Background::ALL {
            tokens.push(b.word().into());
        }
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(mut tokens: Vec<String>) -> Vocab {
        tokens.sort();
        tokens.dedup();
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }

    pub fn bos(&self) -> usize {
        self.id(BOS).expect("vocabulary has BOS")
    }

    pub fn pad(&self) -> usize {
        self.id(PAD).expect("vocabulary has PAD")
    }

    /// `[BOS, words.., PAD..]` of length exactly `max_len`.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> Result<TokenSequence> {
        let lowered = caption.to_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().collect();
        let unknown: Vec<String> = words.iter().filter(|w| self.id(w).is_none()).map(|w| w.to_string()).collect();
        if !unknown.is_empty() {
            return Err(LdzError::OutOfVocabulary(unknown));
        }
        if words.len() + 1 > max_len {
            return Err(LdzError::Invalid(format!(
                "caption has {} words, at most {} fit",
                words.len(),
                max_len - 1
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(self.bos());
        ids.extend(words.iter().map(|w| self.id(w).unwrap()));
        ids.resize(max_len, self.pad());
        Ok(TokenSequence(ids))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub mlp_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig { dim: 64, heads: 4, layers: 2, max_len: 16, mlp_hidden: 128 }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer over token embeddings plus learned positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab: Vocab,
    token: ParamId,
    position: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, vocab: Vocab, config: TextEncoderConfig) -> Self {
        let d = config.dim;
        b.scoped("text", |b| {
            let token = b.with_init("token", &[vocab.len(), d], d, ldz_tensor::nn::Init::Normal(0.3));
            let position = b.with_init("position", &[config.max_len, d], d, ldz_tensor::nn::Init::Normal(0.1));
            let layers = (0..config.layers)
                .map(|i| {
                    b.scoped(&format!("layer{i}"), |b| EncoderLayer {
                        ln1: LayerNorm::new(b, "ln1", d),
                        attn: Attention::new(b, "attn", d, d, config.heads),
                        ln2: LayerNorm::new(b, "ln2", d),
                        fc1: Linear::new(b, "fc1", d, config.mlp_hidden, true),
                        fc2: Linear::new(b, "fc2", config.mlp_hidden, d, true),
                    })
                })
                .collect();
            let final_ln = LayerNorm::new(b, "final_ln", d);
            TextEncoder { config, vocab, token, position, layers, final_ln }
        })
    }

    pub fn tokenize(&self, caption: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(caption, self.config.max_len)
    }

    /// `[n, max_len, dim]` embeddings for a batch of token sequences.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &ParamStore<T>, batch: &[TokenSequence]) -> Var {
        let (l, d) = (self.config.max_len, self.config.dim);
        let n = batch.len();
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.0.iter().copied()).collect();
        let x = g.embedding(g.param(p, self.token), &ids);
        let x = g.reshape(x, &[n, l * d]);
        let pos = g.reshape(g.param(p, self.position), &[l * d]);
        let x = g.add_channel(x, pos, 1);
        let mut x = g.reshape(x, &[n, l, d]);
        for layer in &self.layers {
            let h = layer.ln1.forward(g, p, x);
            let h = layer.attn.forward(g, p, h, h);
            x = g.add(x, h);
            let h = layer.ln2.forward(g, p, x);
            let h = layer.fc1.forward(g, p, h);
            let h = g.silu(h);
            let h = layer.fc2.forward(g, p, h);
            x = g.add(x, h);
        }
        self.final_ln.forward(g, p, x)
    }

    /// Inference-mode embedding `[max_len, dim]` of one caption.
    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, caption: &str) -> Result<Tensor<T>> {
        let seq = self.tokenize(caption)?;
        let g = Graph::inference();
        let out = self.forward(&g, p, &[seq]);
        Ok(g.value(out).index0(0))
    }

    /// Batched inference over captions, `[n, max_len, dim]`.
    pub fn encode_batch<T: Scalar>(&self, p: &ParamStore<T>, captions: &[&str]) -> Result<Tensor<T>> {
        let seqs = captions.iter().map(|c| self.tokenize(c)).collect::<Result<Vec<_>>>()?;
        let g = Graph::inference();
        let out = self.forward(&g, p, &seqs);
        Ok(g.value(out).as_ref().clone())
    }
}

/// Cosine distance between two flattened embeddings.
pub fn cosine_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64c(), y.to_f64c());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    1.0 - ab / (aa.sqrt() * bb.sqrt()).max(1e-30)
}
