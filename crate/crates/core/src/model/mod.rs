//! Encoder-decoder models over code sequences.

mod recurrent;
mod train;
mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Record, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, DType};
use crate::nn::{Grads, ParamStore};
use crate::rng::Rng64;

pub use recurrent::RecurrentState;
pub use train::{evaluate_loss, train, EpochMetrics, TrainConfig, TrainOutcome};
pub use transformer::position_encoding;
use recurrent::RecurrentNet;
use transformer::TransformerNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Mean,
    Brnn,
    Transformer,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [EncoderKind::Lstm, EncoderKind::Mean, EncoderKind::Brnn, EncoderKind::Transformer];
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" | "rnn" => Ok(Self::Lstm),
            "mean" => Ok(Self::Mean),
            "brnn" => Ok(Self::Brnn),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::ConfigInvalid(format!("unknown encoder type `{other}`"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lstm => "lstm",
            Self::Mean => "mean",
            Self::Brnn => "brnn",
            Self::Transformer => "transformer",
        })
    }
}

/// Size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size settings (500-unit LSTMs, 6-layer transformer).
    Full,
    /// Small settings that train on one CPU core in minutes.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(Error::ConfigInvalid(format!("unknown preset `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters.
///
/// For the recurrent encoders `hidden_dims` lists one size per layer (per
/// direction for `brnn`) and the decoder has the same number of layers, each
/// of width `dec_hidden`. `layers`, `heads` and `ff_dim` apply to the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub dec_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub input_feed: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(EncoderKind::Lstm, Preset::Desk)
    }
}

impl ModelConfig {
    pub fn preset(encoder: EncoderKind, preset: Preset) -> Self {
        let base = Self {
            encoder,
            embed_dim: 32,
            hidden_dims: vec![64, 64],
            dec_hidden: 64,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            dropout: 0.0,
            input_feed: true,
            seed: 1,
        };
        match (preset, encoder) {
            (Preset::Desk, EncoderKind::Lstm) => base,
            (Preset::Desk, EncoderKind::Mean) => Self { embed_dim: 64, ..base },
            (Preset::Desk, EncoderKind::Brnn) => Self { hidden_dims: vec![32, 32], ..base },
            (Preset::Desk, EncoderKind::Transformer) => Self { embed_dim: 32, hidden_dims: Vec::new(), dec_hidden: 32, ..base },
            (Preset::Full, EncoderKind::Transformer) => Self {
                embed_dim: 512,
                hidden_dims: Vec::new(),
                dec_hidden: 512,
                layers: 6,
                heads: 8,
                ff_dim: 2048,
                dropout: 0.1,
                ..base
            },
            (Preset::Full, EncoderKind::Brnn) => Self {
                embed_dim: 500,
                hidden_dims: vec![250, 250],
                dec_hidden: 500,
                dropout: 0.3,
                ..base
            },
            (Preset::Full, _) => Self {
                embed_dim: 500,
                hidden_dims: vec![500, 500],
                dec_hidden: 500,
                dropout: 0.3,
                ..base
            },
        }
    }

    pub fn decoder_layers(&self) -> usize {
        match self.encoder {
            EncoderKind::Transformer => self.layers,
            _ => self.hidden_dims.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.encoder {
            EncoderKind::Transformer => {
                if self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
                    return bad("transformer needs positive layers, heads and ff_dim".into());
                }
                if self.embed_dim % self.heads != 0 {
                    return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
                }
            }
            kind => {
                if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) || self.dec_hidden == 0 {
                    return bad("recurrent models need non-empty positive hidden_dims and dec_hidden".into());
                }
                if kind == EncoderKind::Lstm && self.hidden_dims.iter().any(|&h| h != self.dec_hidden) {
                    return bad(format!("lstm encoder states are copied into the decoder, so hidden_dims {:?} must all equal dec_hidden {}", self.hidden_dims, self.dec_hidden));
                }
                if kind == EncoderKind::Mean && self.embed_dim != self.dec_hidden {
                    return bad(format!("mean encoder needs embed_dim ({}) == dec_hidden ({})", self.embed_dim, self.dec_hidden));
                }
            }
        }
        Ok(())
    }
}

/// Encoder output shared by every decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    /// Memory bank attended over, one vector per source position.
    pub hidden_states: Vec<Vec<f64>>,
    /// Fixed-size summary of the source.
    pub summary: Vec<f64>,
    pub src_len: usize,
    pub(crate) init: Vec<(Vec<f64>, Vec<f64>)>,
    pub(crate) keys: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderState {
    Recurrent(RecurrentState),
    Transformer { prefix: Vec<usize> },
}

/// Unnormalised next-token scores and the attention row over source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Net {
    Recurrent(RecurrentNet),
    Transformer(TransformerNet),
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: ParamStore,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

const FORMAT: &str = "codchain-seq2seq";

impl Seq2Seq {
    pub fn new(config: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = match config.encoder {
            EncoderKind::Transformer => Net::Transformer(TransformerNet::new(&mut params, &config, src_vocab.len(), tgt_vocab.len())),
            _ => Net::Recurrent(RecurrentNet::new(&mut params, &config, src_vocab.len(), tgt_vocab.len())),
        };
        Ok(Self { config, src_vocab, tgt_vocab, params, net })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    fn check_ids(ids: &[usize], size: usize) -> Result<()> {
        match ids.iter().find(|&&i| i >= size) {
            Some(&index) => Err(Error::OutOfVocabIndex { index, size }),
            None => Ok(()),
        }
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderState> {
        self.encode_with(&self.params, src)
    }

    fn encode_with(&self, p: &ParamStore, src: &[usize]) -> Result<EncoderState> {
        if src.is_empty() {
            return Err(Error::InvalidRecord { id: String::new(), msg: "empty source sequence".into() });
        }
        Self::check_ids(src, self.src_vocab.len())?;
        Ok(match &self.net {
            Net::Recurrent(r) => r.encode(p, src),
            Net::Transformer(t) => t.encode(p, src),
        })
    }

    pub fn initial_state(&self, enc: &EncoderState) -> DecoderState {
        match &self.net {
            Net::Recurrent(r) => DecoderState::Recurrent(r.initial_state(enc)),
            Net::Transformer(_) => DecoderState::Transformer { prefix: Vec::new() },
        }
    }

    /// One decoder step fed with `prev` (BOS on the first step).
    pub fn decode_step(&self, prev: usize, state: &DecoderState, enc: &EncoderState) -> (StepOutput, DecoderState) {
        match (&self.net, state) {
            (Net::Recurrent(r), DecoderState::Recurrent(s)) => {
                let (out, next) = r.decode_step(&self.params, prev, s, enc);
                (out, DecoderState::Recurrent(next))
            }
            (Net::Transformer(t), DecoderState::Transformer { prefix }) => {
                let mut prefix = prefix.clone();
                prefix.push(prev);
                let out = t.decode_prefix(&self.params, &prefix, enc);
                (out, DecoderState::Transformer { prefix })
            }
            _ => panic!("decoder state does not belong to this architecture"),
        }
    }

    /// Source and target ids for a record; unknown codes map to UNK.
    pub fn encode_record(&self, record: &Record) -> (Vec<usize>, Vec<usize>) {
        (self.src_vocab.encode_all(&record.src_tokens()), self.tgt_vocab.encode_all(&record.tgt_tokens()))
    }

    fn run(&self, p: &ParamStore, src: &[usize], tgt: &[usize], dropout: Option<&mut Rng64>, grads: Option<&mut Grads>) -> Result<(f64, Vec<Vec<f64>>)> {
        if src.is_empty() {
            return Err(Error::InvalidRecord { id: String::new(), msg: "empty source sequence".into() });
        }
        Self::check_ids(src, self.src_vocab.len())?;
        Self::check_ids(tgt, self.tgt_vocab.len())?;
        let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
        tgt_in.push(Vocabulary::BOS);
        tgt_in.extend_from_slice(tgt);
        let mut tgt_out = tgt.to_vec();
        tgt_out.push(Vocabulary::EOS);
        let dropout = dropout.map(|rng| (self.config.dropout, rng));
        Ok(match &self.net {
            Net::Recurrent(r) => r.forward_backward(p, src, &tgt_in, &tgt_out, dropout, grads),
            Net::Transformer(t) => t.forward_backward(p, src, &tgt_in, &tgt_out, dropout, grads),
        })
    }

    /// Summed negative log-likelihood of `tgt` followed by EOS, without dropout.
    pub fn loss_with(&self, p: &ParamStore, src: &[usize], tgt: &[usize]) -> Result<f64> {
        Ok(self.run(p, src, tgt, None, None)?.0)
    }

    pub fn loss(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        self.loss_with(&self.params, src, tgt)
    }

    /// Teacher-forced logits, one row per target position including EOS.
    pub fn teacher_forced_logits(&self, src: &[usize], tgt: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(&self.params, src, tgt, None, None)?.1)
    }

    /// Summed loss and its gradient. Dropout is applied when `dropout` is given.
    pub fn loss_and_grads_with(&self, p: &ParamStore, src: &[usize], tgt: &[usize], dropout: Option<&mut Rng64>) -> Result<(f64, Grads)> {
        let mut g = p.zero_grads();
        let (loss, _) = self.run(p, src, tgt, dropout, Some(&mut g))?;
        Ok((loss, g))
    }

    pub fn loss_and_grads(&self, src: &[usize], tgt: &[usize], dropout: Option<&mut Rng64>) -> Result<(f64, Grads)> {
        self.loss_and_grads_with(&self.params, src, tgt, dropout)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.header()?, &self.params, DType::F64)
    }

    fn header(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(Header {
            format: FORMAT.into(),
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
        })?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path.as_ref(), &self.header()?, &self.params, DType::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode(bytes)?;
        Self::from_parts(header, tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, tensors) = checkpoint::load(path).map_err(|e| e.context(format!("loading model {}", path.display())))?;
        Self::from_parts(header, tensors)
    }

    fn from_parts(header: serde_json::Value, tensors: Vec<crate::nn::ParamTensor>) -> Result<Self> {
        let header: Header = serde_json::from_value(header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", header.format)));
        }
        let mut model = Self::new(header.config, header.src_vocab, header.tgt_vocab)?;
        checkpoint::restore(&mut model.params, tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
