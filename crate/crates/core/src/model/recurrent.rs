//! LSTM, mean and bidirectional encoders with a stacked LSTM decoder using
//! Luong global attention ("general" score) and input feeding.

use super::{EncoderKind, EncoderState, ModelConfig, StepOutput};
use crate::nn::layers::{Embedding, Linear, LstmCell, LstmStep};
use crate::nn::ops::{add_assign, axpy, dot, log_softmax, matvec, matvec_t_acc, outer_acc, softmax_backward, softmax_in_place};
use crate::nn::{xavier_init, Grads, ParamId, ParamStore};
use crate::rng::Rng64;

#[derive(Debug, Clone)]
enum Encoder {
    Lstm(Vec<LstmCell>),
    Brnn { fwd: Vec<LstmCell>, bwd: Vec<LstmCell>, bridge_h: Vec<Linear>, bridge_c: Vec<Linear> },
    Mean,
}

#[derive(Debug, Clone)]
pub(crate) struct RecurrentNet {
    src_emb: Embedding,
    tgt_emb: Embedding,
    encoder: Encoder,
    dec_cells: Vec<LstmCell>,
    /// `W_a`, `[dec_hidden × memory_dim]`
    attn_w: ParamId,
    /// `W_c` over `[context; h_dec]`, no bias
    attn_out: Linear,
    out: Linear,
    memory_dim: usize,
    dec_hidden: usize,
    input_feed: bool,
}

/// Recurrent decoder state: per-layer `(h, c)` and the previous attentional vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub feed: Vec<f64>,
}

enum EncCache {
    Lstm { layers: Vec<Vec<LstmStep>> },
    Brnn { fwd: Vec<Vec<LstmStep>>, bwd: Vec<Vec<LstmStep>>, bridge_in: Vec<(Vec<f64>, Vec<f64>)> },
    Mean,
}

struct DecStepCache {
    layers: Vec<LstmStep>,
    alpha: Vec<f64>,
    concat: Vec<f64>,
    attn: Vec<f64>,
    mask: Option<Vec<f64>>,
    dropped: Vec<f64>,
    probs: Vec<f64>,
}

impl RecurrentNet {
    pub(crate) fn new(store: &mut ParamStore, cfg: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let seed = cfg.seed;
        let e = cfg.embed_dim;
        let h = cfg.dec_hidden;
        let src_emb = Embedding::new(store, "src_emb", src_vocab, e, seed);
        let tgt_emb = Embedding::new(store, "tgt_emb", tgt_vocab, e, seed);
        let (encoder, memory_dim) = match cfg.encoder {
            EncoderKind::Lstm => {
                let mut cells = Vec::new();
                let mut input = e;
                for (l, &hd) in cfg.hidden_dims.iter().enumerate() {
                    cells.push(LstmCell::new(store, &format!("enc.lstm{l}"), input, hd, seed));
                    input = hd;
                }
                (Encoder::Lstm(cells), input)
            }
            EncoderKind::Brnn => {
                let (mut fwd, mut bwd, mut bridge_h, mut bridge_c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let mut input = e;
                for (l, &hd) in cfg.hidden_dims.iter().enumerate() {
                    fwd.push(LstmCell::new(store, &format!("enc.fwd{l}"), input, hd, seed));
                    bwd.push(LstmCell::new(store, &format!("enc.bwd{l}"), input, hd, seed));
                    bridge_h.push(Linear::new(store, &format!("bridge.h{l}"), 2 * hd, h, true, seed));
                    bridge_c.push(Linear::new(store, &format!("bridge.c{l}"), 2 * hd, h, true, seed));
                    input = 2 * hd;
                }
                (Encoder::Brnn { fwd, bwd, bridge_h, bridge_c }, input)
            }
            EncoderKind::Mean => (Encoder::Mean, e),
            EncoderKind::Transformer => unreachable!("transformer handled elsewhere"),
        };
        let dec_in = e + if cfg.input_feed { h } else { 0 };
        let dec_cells = (0..cfg.decoder_layers())
            .map(|l| LstmCell::new(store, &format!("dec.lstm{l}"), if l == 0 { dec_in } else { h }, h, seed))
            .collect();
        let attn_w = store.add(xavier_init("attn.w_a", &[h, memory_dim], seed));
        let attn_out = Linear::new(store, "attn.w_c", memory_dim + h, h, false, seed);
        let out = Linear::new(store, "generator", h, tgt_vocab, true, seed);
        Self { src_emb, tgt_emb, encoder, dec_cells, attn_w, attn_out, out, memory_dim, dec_hidden: h, input_feed: cfg.input_feed }
    }

    fn run_layer(cell: &LstmCell, p: &ParamStore, xs: &[Vec<f64>], reverse: bool) -> Vec<LstmStep> {
        let m = xs.len();
        let mut h = vec![0.0; cell.hidden];
        let mut c = vec![0.0; cell.hidden];
        let mut steps: Vec<Option<LstmStep>> = (0..m).map(|_| None).collect();
        let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
        for t in order {
            let s = cell.step(p, &xs[t], &h, &c);
            h.clone_from(&s.h);
            c.clone_from(&s.c);
            steps[t] = Some(s);
        }
        steps.into_iter().map(Option::unwrap).collect()
    }

    /// BPTT over one layer. `steps` are indexed by position. Returns input grads.
    fn backprop_layer(
        cell: &LstmCell,
        p: &ParamStore,
        g: &mut Grads,
        steps: &[LstmStep],
        d_out: &[Vec<f64>],
        d_final: (Vec<f64>, Vec<f64>),
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        let m = steps.len();
        let mut d_in = vec![Vec::new(); m];
        let (mut dh_next, mut dc_next) = d_final;
        let order: Vec<usize> = if reverse { (0..m).collect() } else { (0..m).rev().collect() };
        for t in order {
            let mut dh = d_out[t].clone();
            add_assign(&mut dh, &dh_next);
            let (dx, dhp, dcp) = cell.backward(p, g, &steps[t], &dh, &dc_next);
            d_in[t] = dx;
            dh_next = dhp;
            dc_next = dcp;
        }
        d_in
    }

    fn encode_cached(&self, p: &ParamStore, src: &[usize]) -> (EncoderState, EncCache) {
        let xs: Vec<Vec<f64>> = src.iter().map(|&i| self.src_emb.lookup(p, i).to_vec()).collect();
        let m = xs.len();
        let n_dec = self.dec_cells.len();
        let (memory, summary, init, cache) = match &self.encoder {
            Encoder::Lstm(cells) => {
                let mut input = xs;
                let mut layers = Vec::new();
                let mut init = Vec::new();
                for cell in cells {
                    let steps = Self::run_layer(cell, p, &input, false);
                    init.push((steps[m - 1].h.clone(), steps[m - 1].c.clone()));
                    input = steps.iter().map(|s| s.h.clone()).collect();
                    layers.push(steps);
                }
                let summary = input[m - 1].clone();
                (input, summary, init, EncCache::Lstm { layers })
            }
            Encoder::Brnn { fwd, bwd, bridge_h, bridge_c } => {
                let mut input = xs;
                let (mut f_steps, mut b_steps, mut bridge_in, mut init) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for l in 0..fwd.len() {
                    let fs = Self::run_layer(&fwd[l], p, &input, false);
                    let bs = Self::run_layer(&bwd[l], p, &input, true);
                    let sh = [fs[m - 1].h.as_slice(), bs[0].h.as_slice()].concat();
                    let sc = [fs[m - 1].c.as_slice(), bs[0].c.as_slice()].concat();
                    init.push((bridge_h[l].forward(p, &sh), bridge_c[l].forward(p, &sc)));
                    bridge_in.push((sh, sc));
                    input = (0..m).map(|t| [fs[t].h.as_slice(), bs[t].h.as_slice()].concat()).collect();
                    f_steps.push(fs);
                    b_steps.push(bs);
                }
                let summary = bridge_in.last().map(|(sh, _)| sh.clone()).unwrap_or_default();
                (input, summary, init, EncCache::Brnn { fwd: f_steps, bwd: b_steps, bridge_in })
            }
            Encoder::Mean => {
                let mut mean = vec![0.0; self.memory_dim];
                for x in &xs {
                    axpy(1.0 / m as f64, x, &mut mean);
                }
                let init = vec![(mean.clone(), mean.clone()); n_dec];
                (xs, mean, init, EncCache::Mean)
            }
        };
        let wa = p.get(self.attn_w);
        let keys = memory
            .iter()
            .map(|hi| {
                let mut k = vec![0.0; self.dec_hidden];
                matvec(wa, self.memory_dim, hi, &mut k);
                k
            })
            .collect();
        let state = EncoderState { src_len: m, hidden_states: memory, summary, init, keys };
        (state, cache)
    }

    pub(crate) fn encode(&self, p: &ParamStore, src: &[usize]) -> EncoderState {
        self.encode_cached(p, src).0
    }

    pub(crate) fn initial_state(&self, enc: &EncoderState) -> RecurrentState {
        RecurrentState { layers: enc.init.clone(), feed: vec![0.0; if self.input_feed { self.dec_hidden } else { 0 }] }
    }

    /// Global attention over the memory bank: returns `(alpha, concat, attn)`.
    fn attend(&self, p: &ParamStore, enc: &EncoderState, h_top: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut alpha: Vec<f64> = enc.keys.iter().map(|k| dot(h_top, k)).collect();
        softmax_in_place(&mut alpha);
        let mut concat = vec![0.0; self.memory_dim + self.dec_hidden];
        for (a, hi) in alpha.iter().zip(&enc.hidden_states) {
            axpy(*a, hi, &mut concat[..self.memory_dim]);
        }
        concat[self.memory_dim..].copy_from_slice(h_top);
        let attn: Vec<f64> = self.attn_out.forward(p, &concat).into_iter().map(f64::tanh).collect();
        (alpha, concat, attn)
    }

    fn cells_step(&self, p: &ParamStore, prev: usize, state: &RecurrentState) -> Vec<LstmStep> {
        let mut x = self.tgt_emb.lookup(p, prev).to_vec();
        if self.input_feed {
            x.extend_from_slice(&state.feed);
        }
        let mut steps = Vec::with_capacity(self.dec_cells.len());
        for (l, cell) in self.dec_cells.iter().enumerate() {
            let s = cell.step(p, &x, &state.layers[l].0, &state.layers[l].1);
            x.clone_from(&s.h);
            steps.push(s);
        }
        steps
    }

    pub(crate) fn decode_step(&self, p: &ParamStore, prev: usize, state: &RecurrentState, enc: &EncoderState) -> (StepOutput, RecurrentState) {
        let steps = self.cells_step(p, prev, state);
        let h_top = &steps.last().unwrap().h;
        let (alpha, _, attn) = self.attend(p, enc, h_top);
        let logits = self.out.forward(p, &attn);
        let next = RecurrentState {
            layers: steps.into_iter().map(|s| (s.h, s.c)).collect(),
            feed: if self.input_feed { attn } else { Vec::new() },
        };
        (StepOutput { logits, attention: alpha }, next)
    }

    /// Teacher-forced loss `-Σ log p(y_t | y_<t, x)`, optionally with gradients.
    /// `tgt_in` starts with BOS, `tgt_out` ends with EOS.
    pub(crate) fn forward_backward(
        &self,
        p: &ParamStore,
        src: &[usize],
        tgt_in: &[usize],
        tgt_out: &[usize],
        dropout: Option<(f64, &mut Rng64)>,
        grads: Option<&mut Grads>,
    ) -> (f64, Vec<Vec<f64>>) {
        let (enc, enc_cache) = self.encode_cached(p, src);
        let mut state = self.initial_state(&enc);
        let mut caches = Vec::with_capacity(tgt_in.len());
        let mut loss = 0.0;
        let mut all_logits = Vec::with_capacity(tgt_in.len());
        let mut dropout = dropout;
        for (t, &prev) in tgt_in.iter().enumerate() {
            let steps = self.cells_step(p, prev, &state);
            let h_top = steps.last().unwrap().h.clone();
            let (alpha, concat, attn) = self.attend(p, &enc, &h_top);
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    Some((0..attn.len()).map(|_| if rng.unit() < *rate { 0.0 } else { 1.0 / keep }).collect::<Vec<f64>>())
                }
                _ => None,
            };
            let dropped: Vec<f64> = match &mask {
                Some(m) => attn.iter().zip(m).map(|(a, k)| a * k).collect(),
                None => attn.clone(),
            };
            let logits = self.out.forward(p, &dropped);
            let lp = log_softmax(&logits);
            loss -= lp[tgt_out[t]];
            state = RecurrentState {
                layers: steps.iter().map(|s| (s.h.clone(), s.c.clone())).collect(),
                feed: if self.input_feed { dropped.clone() } else { Vec::new() },
            };
            let probs = lp.iter().map(|v| v.exp()).collect();
            all_logits.push(logits);
            caches.push(DecStepCache { layers: steps, alpha, concat, attn, mask, dropped, probs });
        }
        if let Some(g) = grads {
            self.backward(p, g, src, &enc, &enc_cache, &caches, tgt_in, tgt_out);
        }
        (loss, all_logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(&self, p: &ParamStore, g: &mut Grads, src: &[usize], enc: &EncoderState, enc_cache: &EncCache, caches: &[DecStepCache], tgt_in: &[usize], tgt_out: &[usize]) {
        let (h, md) = (self.dec_hidden, self.memory_dim);
        let n_layers = self.dec_cells.len();
        let m = enc.src_len;
        let mut dmem = vec![vec![0.0; md]; m];
        let mut dkeys = vec![vec![0.0; h]; m];
        let mut dh_rec = vec![vec![0.0; h]; n_layers];
        let mut dc_rec = vec![vec![0.0; h]; n_layers];
        let mut dfeed = vec![0.0; if self.input_feed { h } else { 0 }];

        for t in (0..caches.len()).rev() {
            let c = &caches[t];
            let mut dlogits = c.probs.clone();
            dlogits[tgt_out[t]] -= 1.0;
            let mut ddropped = vec![0.0; h];
            self.out.backward(p, g, &c.dropped, &dlogits, &mut ddropped);
            if self.input_feed {
                add_assign(&mut ddropped, &dfeed);
            }
            let mut dattn = ddropped;
            if let Some(mask) = &c.mask {
                for (d, k) in dattn.iter_mut().zip(mask) {
                    *d *= k;
                }
            }
            let dpre: Vec<f64> = dattn.iter().zip(&c.attn).map(|(d, a)| d * (1.0 - a * a)).collect();
            let mut dconcat = vec![0.0; md + h];
            self.attn_out.backward(p, g, &c.concat, &dpre, &mut dconcat);
            let dctx = &dconcat[..md];
            let mut dh_top = dconcat[md..].to_vec();
            let dalpha: Vec<f64> = enc.hidden_states.iter().map(|hi| dot(dctx, hi)).collect();
            for (i, a) in c.alpha.iter().enumerate() {
                axpy(*a, dctx, &mut dmem[i]);
            }
            let dscore = softmax_backward(&c.alpha, &dalpha);
            let h_top = &c.concat[md..];
            for i in 0..m {
                axpy(dscore[i], &enc.keys[i], &mut dh_top);
                axpy(dscore[i], h_top, &mut dkeys[i]);
            }

            let mut carry = dh_top;
            for l in (0..n_layers).rev() {
                let mut dh = dh_rec[l].clone();
                add_assign(&mut dh, &carry);
                let (dx, dhp, dcp) = self.dec_cells[l].backward(p, g, &c.layers[l], &dh, &dc_rec[l]);
                dh_rec[l] = dhp;
                dc_rec[l] = dcp;
                carry = dx;
            }
            let e = self.tgt_emb.dim;
            self.tgt_emb.backward(g, tgt_in[t], &carry[..e]);
            if self.input_feed {
                dfeed = carry[e..].to_vec();
            }
        }

        // keys = W_a h_i
        for i in 0..m {
            outer_acc(g.get_mut(self.attn_w), md, &dkeys[i], &enc.hidden_states[i]);
            matvec_t_acc(p.get(self.attn_w), md, &dkeys[i], &mut dmem[i]);
        }
        let d_init: Vec<(Vec<f64>, Vec<f64>)> = dh_rec.into_iter().zip(dc_rec).collect();
        self.backward_encoder(p, g, src, enc_cache, dmem, d_init);
    }

    fn backward_encoder(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        src: &[usize],
        cache: &EncCache,
        dmem: Vec<Vec<f64>>,
        d_init: Vec<(Vec<f64>, Vec<f64>)>,
    ) {
        let m = src.len();
        let dxs: Vec<Vec<f64>> = match (&self.encoder, cache) {
            (Encoder::Lstm(cells), EncCache::Lstm { layers }) => {
                let mut d_out = dmem;
                for l in (0..cells.len()).rev() {
                    let d_final = d_init[l].clone();
                    d_out = Self::backprop_layer(&cells[l], p, g, &layers[l], &d_out, d_final, false);
                }
                d_out
            }
            (Encoder::Brnn { fwd, bwd, bridge_h, bridge_c }, EncCache::Brnn { fwd: fs, bwd: bs, bridge_in }) => {
                let mut d_out = dmem;
                for l in (0..fwd.len()).rev() {
                    let hd = fwd[l].hidden;
                    let (sh, sc) = &bridge_in[l];
                    let mut dsh = vec![0.0; 2 * hd];
                    let mut dsc = vec![0.0; 2 * hd];
                    bridge_h[l].backward(p, g, sh, &d_init[l].0, &mut dsh);
                    bridge_c[l].backward(p, g, sc, &d_init[l].1, &mut dsc);
                    let df: Vec<Vec<f64>> = d_out.iter().map(|d| d[..hd].to_vec()).collect();
                    let db: Vec<Vec<f64>> = d_out.iter().map(|d| d[hd..].to_vec()).collect();
                    let din_f = Self::backprop_layer(&fwd[l], p, g, &fs[l], &df, (dsh[..hd].to_vec(), dsc[..hd].to_vec()), false);
                    let din_b = Self::backprop_layer(&bwd[l], p, g, &bs[l], &db, (dsh[hd..].to_vec(), dsc[hd..].to_vec()), true);
                    d_out = din_f
                        .into_iter()
                        .zip(din_b)
                        .map(|(mut a, b)| {
                            add_assign(&mut a, &b);
                            a
                        })
                        .collect();
                }
                d_out
            }
            (Encoder::Mean, EncCache::Mean) => {
                let mut dmean = vec![0.0; self.memory_dim];
                for (dh, dc) in &d_init {
                    add_assign(&mut dmean, dh);
                    add_assign(&mut dmean, dc);
                }
                dmem.into_iter()
                    .map(|mut d| {
                        axpy(1.0 / m as f64, &dmean, &mut d);
                        d
                    })
                    .collect()
            }
            _ => unreachable!("encoder cache does not match encoder"),
        };
        for (t, dx) in dxs.iter().enumerate() {
            self.src_emb.backward(g, src[t], dx);
        }
    }
}
