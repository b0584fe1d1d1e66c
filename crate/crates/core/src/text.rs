//! Word-level tokenizer and the toy contextual text encoder.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use candle_core::{Device, Tensor};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::nn::{key_padding_bias, EncoderBlock, Init, LayerNorm, Params};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
/// Reserved pseudo-word token; never split or lower-cased.
pub const PLACEHOLDER: &str = "S*";

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, UNK, PLACEHOLDER];

/// Words every toy vocabulary knows, besides names.
pub const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "of", "as", "in", "on", "with", "and", "photo", "picture", "portrait",
    "face", "person", "looking", "at", "camera", "style", "painting", "oil", "watercolor",
    "pencil", "art", "fauvism", "wizard", "wearing", "hat", "chef", "nurse", "police", ",",
    ".",
];

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"S\*|[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
            .expect("static regex")
    })
}

/// Splits text into tokenizer pieces. `S*` stays whole; words are
/// lower-cased; punctuation marks are pieces of their own.
pub fn pieces(text: &str) -> Vec<String> {
    piece_regex()
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if s == PLACEHOLDER {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Special tokens first, then the given words sorted and deduplicated.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| pieces(w.as_ref()))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let vocab: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Self::from_vocab(vocab)
    }

    /// Base words plus every piece of the given names.
    pub fn with_names<S: AsRef<str>>(names: &[S]) -> Self {
        let words = BASE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(names.iter().map(|n| n.as_ref().to_string()));
        Self::new(words)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    pub fn placeholder_id(&self) -> u32 {
        self.index[PLACEHOLDER]
    }

    pub fn knows(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    /// Token ids framed by `<bos>` and `<eos>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        std::iter::once(self.index[BOS])
            .chain(pieces(text).iter().map(|p| self.id(p)))
            .chain(std::iter::once(self.index[EOS]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub dim: usize,
    pub max_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_len: 24,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
        }
    }
}

/// Embedding table plus a small transformer run over (possibly spliced)
/// embedding sequences.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextConfig,
    token_embedding: Tensor,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(p: Params, config: &TextConfig, vocab_size: usize) -> Result<Self> {
        let blocks = (0..config.depth)
            .map(|i| {
                EncoderBlock::new(
                    p.pp(format!("blocks.{i}")),
                    config.dim,
                    config.heads,
                    config.mlp_hidden,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding: p.get((vocab_size, config.dim), "token_embedding", Init::Normal(1.0))?,
            pos: p.get((config.max_len, config.dim), "pos", Init::Normal(0.1))?,
            blocks,
            norm: LayerNorm::new(p.pp("norm"), config.dim)?,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `(L, dim)` rows of the embedding table.
    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let vocab = self.token_embedding.dims()[0];
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), &Device::Cpu)?;
        Ok(self.token_embedding.index_select(&idx, 0)?)
    }

    /// Contextual states for `(B, L, dim)` input embeddings and a `(B, L)`
    /// 0/1 mask of real positions.
    pub fn contextualize(&self, embeddings: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (_, l, d) = embeddings.dims3()?;
        if d != self.config.dim {
            return Err(Error::Shape(format!(
                "text encoder width is {}, got {d}-wide embeddings",
                self.config.dim
            )));
        }
        if l > self.config.max_len {
            return Err(Error::Truncation {
                len: l,
                max: self.config.max_len,
            });
        }
        let bias = key_padding_bias(mask)?;
        let mut x = embeddings.broadcast_add(&self.pos.narrow(0, 0, l)?)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&bias))?;
        }
        self.norm.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_is_one_piece() {
        assert_eq!(
            pieces("S* as a chef, looking at the camera"),
            vec!["S*", "as", "a", "chef", ",", "looking", "at", "the", "camera"]
        );
        assert_eq!(pieces("Oil painting style, S* face")[4..], ["S*", "face"]);
        assert_eq!(pieces("S*,"), vec!["S*", ","]);
    }

    #[test]
    fn vocabulary_layout() {
        let t = Tokenizer::with_names(&["Ada Vell"]);
        assert_eq!(t.token(0), Some(PAD));
        assert_eq!(t.token(t.placeholder_id()), Some(PLACEHOLDER));
        assert!(t.knows("ada") && t.knows("vell"));
        let ids = t.encode("Ada Vell face");
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], t.id(BOS));
        assert_eq!(*ids.last().unwrap(), t.id(EOS));
        assert_eq!(t.encode("zzz")[1], t.id(UNK));
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let t = Tokenizer::with_names(&["Bo Tarn"]);
        let json = serde_json::to_string(t.vocab()).unwrap();
        let back = Tokenizer::from_vocab(serde_json::from_str(&json).unwrap());
        assert_eq!(back.encode("bo tarn"), t.encode("bo tarn"));
    }
}
