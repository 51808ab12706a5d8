//! Greedy and beam search, optionally constrained by a causal-validity mask.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acme::{CausalGraph, ConstraintMask};
use crate::corpus::{Record, Vocabulary};
use crate::error::Result;
use crate::model::{DecoderState, EncoderState, Seq2Seq};
use crate::nn::ops::log_softmax;

/// Autoregressive scorer seen by the search procedures.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize {
        Vocabulary::EOS
    }

    fn bos(&self) -> usize {
        Vocabulary::BOS
    }

    /// Tokens that may appear in output at all.
    fn can_emit(&self, token: usize) -> bool;

    fn start(&self) -> Self::State;

    /// Log-probabilities of the next token after `prev`, the attention row,
    /// and the successor state.
    fn step(&self, state: &Self::State, prev: usize) -> (Vec<f64>, Vec<f64>, Self::State);
}

/// A trained model conditioned on one encoded source.
pub struct Conditioned<'a> {
    pub model: &'a Seq2Seq,
    pub encoded: EncoderState,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a Seq2Seq, src: &[usize]) -> Result<Self> {
        Ok(Self { model, encoded: model.encode(src)? })
    }
}

impl StepModel for Conditioned<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.tgt_vocab.len()
    }

    fn can_emit(&self, token: usize) -> bool {
        !matches!(token, Vocabulary::PAD | Vocabulary::BOS | Vocabulary::UNK)
    }

    fn start(&self) -> DecoderState {
        self.model.initial_state(&self.encoded)
    }

    fn step(&self, state: &DecoderState, prev: usize) -> (Vec<f64>, Vec<f64>, DecoderState) {
        let (out, next) = self.model.decode_step(prev, state, &self.encoded);
        (log_softmax(&out.logits), out.attention, next)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions<'a> {
    /// 1 selects greedy decoding.
    pub beam_size: usize,
    /// Maximum decoding steps, EOS included.
    pub max_len: usize,
    pub mask: Option<&'a ConstraintMask>,
    /// Wu et al. length-penalty exponent for the final beam ranking; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for SearchOptions<'_> {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 20, mask: None, length_penalty: 0.0 }
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// One attention row per decoding step, including the EOS step when finished.
    pub attention: Vec<Vec<f64>>,
    /// False when the hypothesis was cut off at `max_len` without EOS.
    pub finished: bool,
}

fn allowed<M: StepModel>(model: &M, mask: Option<&ConstraintMask>, prev: Option<usize>, t: usize) -> bool {
    if !model.can_emit(t) {
        return false;
    }
    match (mask, prev) {
        (Some(mask), Some(p)) => t == model.eos() || mask.allows(p, t),
        _ => true,
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Picks the most probable allowed token at each step.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize, mask: Option<&ConstraintMask>) -> Hypothesis {
    let eos = model.eos();
    let mut state = model.start();
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0, attention: Vec::new(), finished: false };
    for _ in 0..max_len {
        let prev_tok = hyp.tokens.last().copied();
        let (lp, attn, next) = model.step(&state, prev_tok.unwrap_or(model.bos()));
        let best = (0..lp.len()).filter(|&t| allowed(model, mask, prev_tok, t)).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)));
        let Some(t) = best else { break };
        hyp.log_prob += lp[t];
        hyp.attention.push(attn);
        if t == eos {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(t);
        state = next;
    }
    hyp
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search returning up to `beam_size` hypotheses, best first.
///
/// Each step expands every live hypothesis; extensions by EOS join the
/// finished pool and the best `beam_size` other extensions stay live. Search
/// ends at `max_len` (live hypotheses then count as truncated results) or once
/// the `beam_size`-th best finished score is at least the best live score,
/// since extending a prefix can only lower its score. Scores are summed log-probabilities with
/// no length normalisation; ties go to the lexicographically smaller sequence.
pub fn beam_decode<M: StepModel>(model: &M, beam_size: usize, max_len: usize, mask: Option<&ConstraintMask>) -> Vec<Hypothesis> {
    beam_decode_normalized(model, beam_size, max_len, mask, 0.0)
}

/// [`beam_decode`] with final ranking by `log_prob / length_penalty(len, alpha)`.
/// Early stopping is only sound without normalisation, so `alpha > 0` runs
/// every step up to `max_len`.
pub fn beam_decode_normalized<M: StepModel>(
    model: &M,
    beam_size: usize,
    max_len: usize,
    mask: Option<&ConstraintMask>,
    alpha: f64,
) -> Vec<Hypothesis> {
    let k = beam_size.max(1);
    let eos = model.eos();
    let mut live = vec![Live { hyp: Hypothesis { tokens: Vec::new(), log_prob: 0.0, attention: Vec::new(), finished: false }, state: model.start() }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut outputs = Vec::with_capacity(live.len());
        for (hi, l) in live.iter().enumerate() {
            let prev_tok = l.hyp.tokens.last().copied();
            let (lp, attn, next) = model.step(&l.state, prev_tok.unwrap_or(model.bos()));
            for (t, &score) in lp.iter().enumerate() {
                if !allowed(model, mask, prev_tok, t) {
                    continue;
                }
                let total = l.hyp.log_prob + score;
                if t == eos {
                    let mut h = l.hyp.clone();
                    h.log_prob = total;
                    h.finished = true;
                    h.attention.push(attn.clone());
                    finished.push(h);
                } else {
                    candidates.push((total, hi, t));
                }
            }
            outputs.push((attn, next));
        }
        let key = |c: &(f64, usize, usize)| {
            let mut seq = live[c.1].hyp.tokens.clone();
            seq.push(c.2);
            (c.0, seq)
        };
        let mut keyed: Vec<((f64, Vec<usize>), (f64, usize, usize))> = candidates.into_iter().map(|c| (key(&c), c)).collect();
        keyed.sort_by(|a, b| rank((a.0 .0, &a.0 .1), (b.0 .0, &b.0 .1)));
        keyed.truncate(k);
        live = keyed
            .into_iter()
            .map(|((score, tokens), (_, hi, _))| {
                let (attn, next) = &outputs[hi];
                let mut attention = live[hi].hyp.attention.clone();
                attention.push(attn.clone());
                Live { hyp: Hypothesis { tokens, log_prob: score, attention, finished: false }, state: next.clone() }
            })
            .collect();
        let best_live = live.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let settled = alpha == 0.0 && finished.len() >= k && {
            let mut scores: Vec<f64> = finished.iter().map(|h| h.log_prob).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            scores[k - 1] >= best_live
        };
        if live.is_empty() || settled {
            live.clear();
            break;
        }
    }
    finished.extend(live.into_iter().map(|l| l.hyp));
    let ranked = |h: &Hypothesis| if alpha == 0.0 { h.log_prob } else { h.log_prob / length_penalty(h.tokens.len(), alpha) };
    finished.sort_by(|a, b| rank((ranked(a), &a.tokens), (ranked(b), &b.tokens)));
    finished.truncate(k);
    finished
}

/// Best hypothesis under `opts`; greedy when `beam_size` is 1.
pub fn decode<M: StepModel>(model: &M, opts: &SearchOptions<'_>) -> Hypothesis {
    if opts.beam_size <= 1 {
        greedy_decode(model, opts.max_len, opts.mask)
    } else {
        beam_decode_normalized(model, opts.beam_size, opts.max_len, opts.mask, opts.length_penalty)
            .into_iter()
            .next()
            .unwrap_or(Hypothesis { tokens: Vec::new(), log_prob: f64::NEG_INFINITY, attention: Vec::new(), finished: false })
    }
}

/// One line of translation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub id: String,
    pub chain: Vec<String>,
    pub log_prob: f64,
    /// Validity of each adjacent pair, cause first; null without a graph.
    pub edge_valid: Option<Vec<bool>>,
}

/// Decoded chain and attention for one record.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub translation: Translation,
    pub hypothesis: Hypothesis,
}

pub fn translate_record(model: &Seq2Seq, record: &Record, opts: &SearchOptions<'_>, graph: Option<&CausalGraph>) -> Result<Decoded> {
    let (src, _) = model.encode_record(record);
    let cond = Conditioned::new(model, &src)?;
    let hyp = decode(&cond, opts);
    let chain = model.tgt_vocab.decode_codes(&hyp.tokens);
    let edge_valid = graph.map(|g| g.edge_validity(&chain));
    Ok(Decoded { translation: Translation { id: record.id.clone(), chain, log_prob: hyp.log_prob, edge_valid }, hypothesis: hyp })
}

/// Decodes every record; output order matches input order.
pub fn translate_corpus(model: &Seq2Seq, records: &[Record], opts: &SearchOptions<'_>, graph: Option<&CausalGraph>) -> Result<Vec<Decoded>> {
    records.par_iter().map(|r| translate_record(model, r, opts, graph)).collect()
}
