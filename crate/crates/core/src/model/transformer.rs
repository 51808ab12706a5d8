//! Pre-norm encoder-decoder transformer with sinusoidal positions.

use super::{EncoderState, ModelConfig, StepOutput};
use crate::nn::layers::{AttentionCache, Embedding, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention};
use crate::nn::ops::{add_assign, log_softmax};
use crate::nn::{Grads, ParamStore};
use crate::rng::Rng64;

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerNet {
    src_emb: Embedding,
    tgt_emb: Embedding,
    enc: Vec<EncLayer>,
    enc_ln: LayerNorm,
    dec: Vec<DecLayer>,
    dec_ln: LayerNorm,
    out: Linear,
    dim: usize,
}

struct EncLayerCache {
    n1: Vec<LayerNormCache>,
    attn: AttentionCache,
    n2: Vec<LayerNormCache>,
    ff: Vec<FeedForwardCache>,
}

struct DecLayerCache {
    n1: Vec<LayerNormCache>,
    self_attn: AttentionCache,
    n2: Vec<LayerNormCache>,
    cross: AttentionCache,
    n3: Vec<LayerNormCache>,
    ff: Vec<FeedForwardCache>,
}

struct EncCache {
    layers: Vec<EncLayerCache>,
    final_ln: Vec<LayerNormCache>,
}

struct DecCache {
    layers: Vec<DecLayerCache>,
    final_ln: Vec<LayerNormCache>,
    normed: Vec<Vec<f64>>,
}

/// Sinusoidal position encoding for one position.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn layer_norm_all(ln: &LayerNorm, p: &ParamStore, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<LayerNormCache>) {
    xs.iter().map(|x| ln.forward(p, x)).unzip()
}

fn layer_norm_back(ln: &LayerNorm, p: &ParamStore, g: &mut Grads, caches: &[LayerNormCache], dy: &[Vec<f64>]) -> Vec<Vec<f64>> {
    caches.iter().zip(dy).map(|(c, d)| ln.backward(p, g, c, d)).collect()
}

fn add_rows(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (x, y) in a.iter_mut().zip(b) {
        add_assign(x, y);
    }
}

impl TransformerNet {
    pub(crate) fn new(store: &mut ParamStore, cfg: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (d, seed) = (cfg.embed_dim, cfg.seed);
        let src_emb = Embedding::new(store, "src_emb", src_vocab, d, seed);
        let tgt_emb = Embedding::new(store, "tgt_emb", tgt_vocab, d, seed);
        let enc = (0..cfg.layers)
            .map(|l| EncLayer {
                ln1: LayerNorm::new(store, &format!("enc{l}.ln1"), d),
                attn: MultiHeadAttention::new(store, &format!("enc{l}.attn"), d, cfg.heads, seed),
                ln2: LayerNorm::new(store, &format!("enc{l}.ln2"), d),
                ff: FeedForward::new(store, &format!("enc{l}.ff"), d, cfg.ff_dim, seed),
            })
            .collect();
        let enc_ln = LayerNorm::new(store, "enc.ln", d);
        let dec = (0..cfg.layers)
            .map(|l| DecLayer {
                ln1: LayerNorm::new(store, &format!("dec{l}.ln1"), d),
                self_attn: MultiHeadAttention::new(store, &format!("dec{l}.self"), d, cfg.heads, seed),
                ln2: LayerNorm::new(store, &format!("dec{l}.ln2"), d),
                cross: MultiHeadAttention::new(store, &format!("dec{l}.cross"), d, cfg.heads, seed),
                ln3: LayerNorm::new(store, &format!("dec{l}.ln3"), d),
                ff: FeedForward::new(store, &format!("dec{l}.ff"), d, cfg.ff_dim, seed),
            })
            .collect();
        let dec_ln = LayerNorm::new(store, "dec.ln", d);
        let out = Linear::new(store, "generator", d, tgt_vocab, true, seed);
        Self { src_emb, tgt_emb, enc, enc_ln, dec, dec_ln, out, dim: d }
    }

    fn embed(&self, emb: &Embedding, p: &ParamStore, ids: &[usize]) -> Vec<Vec<f64>> {
        let scale = (self.dim as f64).sqrt();
        ids.iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut x: Vec<f64> = emb.lookup(p, i).iter().map(|v| v * scale).collect();
                add_assign(&mut x, &position_encoding(pos, self.dim));
                x
            })
            .collect()
    }

    fn embed_back(&self, emb: &Embedding, g: &mut Grads, ids: &[usize], dx: &[Vec<f64>]) {
        let scale = (self.dim as f64).sqrt();
        for (&i, d) in ids.iter().zip(dx) {
            let scaled: Vec<f64> = d.iter().map(|v| v * scale).collect();
            emb.backward(g, i, &scaled);
        }
    }

    fn encode_cached(&self, p: &ParamStore, src: &[usize]) -> (Vec<Vec<f64>>, EncCache) {
        let mut x = self.embed(&self.src_emb, p, src);
        let mut layers = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            let (n1, n1c) = layer_norm_all(&layer.ln1, p, &x);
            let (a, ac) = layer.attn.forward(p, &n1, &n1, false);
            add_rows(&mut x, &a);
            let (n2, n2c) = layer_norm_all(&layer.ln2, p, &x);
            let (f, fc): (Vec<Vec<f64>>, Vec<FeedForwardCache>) = n2.iter().map(|v| layer.ff.forward(p, v)).unzip();
            add_rows(&mut x, &f);
            layers.push(EncLayerCache { n1: n1c, attn: ac, n2: n2c, ff: fc });
        }
        let (memory, final_ln) = layer_norm_all(&self.enc_ln, p, &x);
        (memory, EncCache { layers, final_ln })
    }

    pub(crate) fn encode(&self, p: &ParamStore, src: &[usize]) -> EncoderState {
        let (memory, _) = self.encode_cached(p, src);
        let m = memory.len();
        let mut summary = vec![0.0; self.dim];
        for h in &memory {
            for (s, v) in summary.iter_mut().zip(h) {
                *s += v / m as f64;
            }
        }
        EncoderState { src_len: m, hidden_states: memory, summary, init: Vec::new(), keys: Vec::new() }
    }

    fn decode_cached(&self, p: &ParamStore, tgt_in: &[usize], memory: &[Vec<f64>]) -> (Vec<Vec<f64>>, DecCache) {
        let mut y = self.embed(&self.tgt_emb, p, tgt_in);
        let mut layers = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let (n1, n1c) = layer_norm_all(&layer.ln1, p, &y);
            let (a, ac) = layer.self_attn.forward(p, &n1, &n1, true);
            add_rows(&mut y, &a);
            let (n2, n2c) = layer_norm_all(&layer.ln2, p, &y);
            let (c, cc) = layer.cross.forward(p, &n2, memory, false);
            add_rows(&mut y, &c);
            let (n3, n3c) = layer_norm_all(&layer.ln3, p, &y);
            let (f, fc): (Vec<Vec<f64>>, Vec<FeedForwardCache>) = n3.iter().map(|v| layer.ff.forward(p, v)).unzip();
            add_rows(&mut y, &f);
            layers.push(DecLayerCache { n1: n1c, self_attn: ac, n2: n2c, cross: cc, n3: n3c, ff: fc });
        }
        let (normed, final_ln) = layer_norm_all(&self.dec_ln, p, &y);
        (normed.clone(), DecCache { layers, final_ln, normed })
    }

    /// Recomputes the decoder over the whole prefix and returns the last position.
    pub(crate) fn decode_prefix(&self, p: &ParamStore, prefix: &[usize], enc: &EncoderState) -> StepOutput {
        let (normed, cache) = self.decode_cached(p, prefix, &enc.hidden_states);
        let last = normed.len() - 1;
        let logits = self.out.forward(p, &normed[last]);
        let probs = &cache.layers.last().expect("at least one layer").cross.probs;
        let mut attention = vec![0.0; enc.src_len];
        for head in probs {
            for (a, v) in attention.iter_mut().zip(&head[last]) {
                *a += v / probs.len() as f64;
            }
        }
        StepOutput { logits, attention }
    }

    pub(crate) fn forward_backward(
        &self,
        p: &ParamStore,
        src: &[usize],
        tgt_in: &[usize],
        tgt_out: &[usize],
        dropout: Option<(f64, &mut Rng64)>,
        grads: Option<&mut Grads>,
    ) -> (f64, Vec<Vec<f64>>) {
        let (memory, enc_cache) = self.encode_cached(p, src);
        let (normed, dec_cache) = self.decode_cached(p, tgt_in, &memory);
        let mut dropout = dropout;
        let mut loss = 0.0;
        let mut logits_all = Vec::with_capacity(normed.len());
        let mut masks = Vec::with_capacity(normed.len());
        let mut probs_all = Vec::with_capacity(normed.len());
        let mut dropped_all = Vec::with_capacity(normed.len());
        for (t, n) in normed.iter().enumerate() {
            let mask: Option<Vec<f64>> = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    Some((0..n.len()).map(|_| if rng.unit() < *rate { 0.0 } else { 1.0 / keep }).collect())
                }
                _ => None,
            };
            let dropped: Vec<f64> = match &mask {
                Some(m) => n.iter().zip(m).map(|(a, k)| a * k).collect(),
                None => n.clone(),
            };
            let logits = self.out.forward(p, &dropped);
            let lp = log_softmax(&logits);
            loss -= lp[tgt_out[t]];
            probs_all.push(lp.iter().map(|v| v.exp()).collect::<Vec<f64>>());
            logits_all.push(logits);
            masks.push(mask);
            dropped_all.push(dropped);
        }
        let Some(g) = grads else {
            return (loss, logits_all);
        };

        let mut dnormed = Vec::with_capacity(normed.len());
        for t in 0..normed.len() {
            let mut dlogits = probs_all[t].clone();
            dlogits[tgt_out[t]] -= 1.0;
            let mut dn = vec![0.0; self.dim];
            self.out.backward(p, g, &dropped_all[t], &dlogits, &mut dn);
            if let Some(m) = &masks[t] {
                for (d, k) in dn.iter_mut().zip(m) {
                    *d *= k;
                }
            }
            dnormed.push(dn);
        }
        debug_assert_eq!(dec_cache.normed.len(), dnormed.len());

        let mut dy = layer_norm_back(&self.dec_ln, p, g, &dec_cache.final_ln, &dnormed);
        let mut dmemory = vec![vec![0.0; self.dim]; memory.len()];
        for (layer, c) in self.dec.iter().zip(&dec_cache.layers).rev() {
            let dn3: Vec<Vec<f64>> = c.ff.iter().zip(&dy).map(|(fc, d)| layer.ff.backward(p, g, fc, d)).collect();
            add_rows(&mut dy, &layer_norm_back(&layer.ln3, p, g, &c.n3, &dn3));
            let (dq, dm) = layer.cross.backward(p, g, &c.cross, &dy);
            add_rows(&mut dmemory, &dm);
            add_rows(&mut dy, &layer_norm_back(&layer.ln2, p, g, &c.n2, &dq));
            let (mut dq, dk) = layer.self_attn.backward(p, g, &c.self_attn, &dy);
            add_rows(&mut dq, &dk);
            add_rows(&mut dy, &layer_norm_back(&layer.ln1, p, g, &c.n1, &dq));
        }
        self.embed_back(&self.tgt_emb, g, tgt_in, &dy);

        let mut dx = layer_norm_back(&self.enc_ln, p, g, &enc_cache.final_ln, &dmemory);
        for (layer, c) in self.enc.iter().zip(&enc_cache.layers).rev() {
            let dn2: Vec<Vec<f64>> = c.ff.iter().zip(&dx).map(|(fc, d)| layer.ff.backward(p, g, fc, d)).collect();
            add_rows(&mut dx, &layer_norm_back(&layer.ln2, p, g, &c.n2, &dn2));
            let (mut dq, dk) = layer.attn.backward(p, g, &c.attn, &dx);
            add_rows(&mut dq, &dk);
            add_rows(&mut dx, &layer_norm_back(&layer.ln1, p, g, &c.n1, &dq));
        }
        self.embed_back(&self.src_emb, g, src, &dx);
        (loss, logits_all)
    }
}
