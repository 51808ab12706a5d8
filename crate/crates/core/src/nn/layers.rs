//! Layers with explicit forward caches and backward passes.
//!
//! Every `backward` accumulates parameter gradients into [`Grads`] and
//! returns (or accumulates) gradients with respect to its inputs.

use super::ops::{add_assign, axpy, dot, matvec, matvec_t_acc, outer_acc, sigmoid, softmax_backward, softmax_in_place};
use super::{xavier_init, Grads, ParamId, ParamStore, ParamTensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, seed: u64) -> Self {
        let w = store.add(xavier_init(&format!("{name}.weight"), &[output, input], seed));
        let b = bias.then(|| store.add(ParamTensor::zeros(format!("{name}.bias"), &[output])));
        Self { w, b, input, output }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output];
        matvec(p.get(self.w), self.input, x, &mut y);
        if let Some(b) = self.b {
            add_assign(&mut y, p.get(b));
        }
        y
    }

    /// Accumulates `dx += Wᵀ dy` and the parameter gradients.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        outer_acc(g.get_mut(self.w), self.input, dy, x);
        if let Some(b) = self.b {
            add_assign(g.get_mut(b), dy);
        }
        matvec_t_acc(p.get(self.w), self.input, dy, dx);
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, g: &mut Grads, x: &[f64], dy: &[f64]) {
        outer_acc(g.get_mut(self.w), self.input, dy, x);
        if let Some(b) = self.b {
            add_assign(g.get_mut(b), dy);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, seed: u64) -> Self {
        let table = store.add(xavier_init(&format!("{name}.weight"), &[vocab, dim], seed));
        Self { table, vocab, dim }
    }

    pub fn lookup<'a>(&self, p: &'a ParamStore, index: usize) -> &'a [f64] {
        &p.get(self.table)[index * self.dim..(index + 1) * self.dim]
    }

    pub fn backward(&self, g: &mut Grads, index: usize, dy: &[f64]) {
        add_assign(&mut g.get_mut(self.table)[index * self.dim..(index + 1) * self.dim], dy);
    }
}

/// LSTM cell with gates laid out `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStep {
    xh: Vec<f64>,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, seed: u64) -> Self {
        let w = store.add(xavier_init(&format!("{name}.weight"), &[4 * hidden, input + hidden], seed));
        let mut bias = ParamTensor::zeros(format!("{name}.bias"), &[4 * hidden]);
        bias.values[hidden..2 * hidden].fill(1.0);
        let b = store.add(bias);
        Self { w, b, input, hidden }
    }

    pub fn step(&self, p: &ParamStore, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let hd = self.hidden;
        let mut xh = Vec::with_capacity(self.input + hd);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let mut gates = vec![0.0; 4 * hd];
        matvec(p.get(self.w), self.input + hd, &xh, &mut gates);
        add_assign(&mut gates, p.get(self.b));
        for (k, z) in gates.iter_mut().enumerate() {
            *z = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(*z) };
        }
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for k in 0..hd {
            c[k] = gates[hd + k] * c_prev[k] + gates[k] * gates[2 * hd + k];
            tanh_c[k] = c[k].tanh();
            h[k] = gates[3 * hd + k] * tanh_c[k];
        }
        LstmStep { xh, gates, c_prev: c_prev.to_vec(), tanh_c, h, c }
    }

    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, s: &LstmStep, dh: &[f64], dc: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, gg, o) = (s.gates[k], s.gates[hd + k], s.gates[2 * hd + k], s.gates[3 * hd + k]);
            let dct = dc[k] + dh[k] * o * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
            dz[k] = dct * gg * i * (1.0 - i);
            dz[hd + k] = dct * s.c_prev[k] * f * (1.0 - f);
            dz[2 * hd + k] = dct * i * (1.0 - gg * gg);
            dz[3 * hd + k] = dh[k] * s.tanh_c[k] * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        let cols = self.input + hd;
        outer_acc(g.get_mut(self.w), cols, &dz, &s.xh);
        add_assign(g.get_mut(self.b), &dz);
        let mut dxh = vec![0.0; cols];
        matvec_t_acc(p.get(self.w), cols, &dz, &mut dxh);
        let dh_prev = dxh.split_off(self.input);
        (dxh, dh_prev, dc_prev)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_sigma: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut gain = ParamTensor::zeros(format!("{name}.gain"), &[dim]);
        gain.values.fill(1.0);
        let gain = store.add(gain);
        let bias = store.add(ParamTensor::zeros(format!("{name}.bias"), &[dim]));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_sigma = 1.0 / (var + Self::EPS).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_sigma).collect();
        let (gain, bias) = (p.get(self.gain), p.get(self.bias));
        let y = xhat.iter().zip(gain).zip(bias).map(|((xh, g), b)| xh * g + b).collect();
        (y, LayerNormCache { xhat, inv_sigma })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LayerNormCache, dy: &[f64]) -> Vec<f64> {
        let gain = p.get(self.gain);
        {
            let dg = g.get_mut(self.gain);
            for k in 0..self.dim {
                dg[k] += dy[k] * cache.xhat[k];
            }
        }
        add_assign(g.get_mut(self.bias), dy);
        let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
        let n = self.dim as f64;
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dot(&dxhat, &cache.xhat) / n;
        dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, xh)| cache.inv_sigma * (d - mean_d - xh * mean_dx))
            .collect()
    }
}

/// Scaled dot-product multi-head attention. Q/K/V projections have no bias;
/// the output projection does.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    queries: Vec<Vec<f64>>,
    memory: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `probs[head][i][j]`
    pub probs: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<f64>>,
    causal: bool,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, seed: u64) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, seed),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, seed),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, seed),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, seed),
            heads,
            dim,
        }
    }

    /// Attention of `queries` over `memory`. With `causal`, query `i` sees
    /// memory positions `0..=i` only.
    pub fn forward(&self, p: &ParamStore, queries: &[Vec<f64>], memory: &[Vec<f64>], causal: bool) -> (Vec<Vec<f64>>, AttentionCache) {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q: Vec<Vec<f64>> = queries.iter().map(|x| self.q.forward(p, x)).collect();
        let k: Vec<Vec<f64>> = memory.iter().map(|x| self.k.forward(p, x)).collect();
        let v: Vec<Vec<f64>> = memory.iter().map(|x| self.v.forward(p, x)).collect();
        let mut probs = vec![vec![Vec::new(); q.len()]; self.heads];
        let mut ctx = vec![vec![0.0; self.dim]; q.len()];
        for (h, head_probs) in probs.iter_mut().enumerate() {
            let r = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let visible = if causal { (i + 1).min(k.len()) } else { k.len() };
                let mut s: Vec<f64> = k[..visible].iter().map(|kj| dot(&qi[r.clone()], &kj[r.clone()]) * scale).collect();
                softmax_in_place(&mut s);
                for (j, a) in s.iter().enumerate() {
                    axpy(*a, &v[j][r.clone()], &mut ctx[i][r.clone()]);
                }
                s.resize(k.len(), 0.0);
                head_probs[i] = s;
            }
        }
        let out = ctx.iter().map(|c| self.o.forward(p, c)).collect();
        let cache = AttentionCache { queries: queries.to_vec(), memory: memory.to_vec(), q, k, v, probs, ctx, causal };
        (out, cache)
    }

    /// Returns `(d_queries, d_memory)`.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &AttentionCache, dout: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (c.q.len(), c.k.len());
        let mut dctx = vec![vec![0.0; self.dim]; nq];
        for i in 0..nq {
            self.o.backward(p, g, &c.ctx[i], &dout[i], &mut dctx[i]);
        }
        let mut dq = vec![vec![0.0; self.dim]; nq];
        let mut dk = vec![vec![0.0; self.dim]; nk];
        let mut dv = vec![vec![0.0; self.dim]; nk];
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let visible = if c.causal { (i + 1).min(nk) } else { nk };
                let a = &c.probs[h][i][..visible];
                let dci = &dctx[i][r.clone()];
                let da: Vec<f64> = (0..visible).map(|j| dot(dci, &c.v[j][r.clone()])).collect();
                for j in 0..visible {
                    axpy(a[j], dci, &mut dv[j][r.clone()]);
                }
                let ds = softmax_backward(a, &da);
                for j in 0..visible {
                    let s = ds[j] * scale;
                    if s != 0.0 {
                        axpy(s, &c.k[j][r.clone()], &mut dq[i][r.clone()]);
                        axpy(s, &c.q[i][r.clone()], &mut dk[j][r.clone()]);
                    }
                }
            }
        }
        let mut dqueries = vec![vec![0.0; self.dim]; nq];
        for i in 0..nq {
            self.q.backward(p, g, &c.queries[i], &dq[i], &mut dqueries[i]);
        }
        let mut dmemory = vec![vec![0.0; self.dim]; nk];
        for j in 0..nk {
            self.k.backward(p, g, &c.memory[j], &dk[j], &mut dmemory[j]);
            self.v.backward(p, g, &c.memory[j], &dv[j], &mut dmemory[j]);
        }
        (dqueries, dmemory)
    }
}

/// Position-wise `W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff: usize, seed: u64) -> Self {
        Self {
            w1: Linear::new(store, &format!("{name}.w1"), dim, ff, true, seed),
            w2: Linear::new(store, &format!("{name}.w2"), ff, dim, true, seed),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> (Vec<f64>, FeedForwardCache) {
        let pre = self.w1.forward(p, x);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let y = self.w2.forward(p, &act);
        (y, FeedForwardCache { x: x.to_vec(), pre, act })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &FeedForwardCache, dy: &[f64]) -> Vec<f64> {
        let mut dact = vec![0.0; c.act.len()];
        self.w2.backward(p, g, &c.act, dy, &mut dact);
        for (d, pre) in dact.iter_mut().zip(&c.pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dx = vec![0.0; c.x.len()];
        self.w1.backward(p, g, &c.x, &dact, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::rng::Rng64;

    fn randvec(rng: &mut Rng64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    /// Loss `Σ r·y` for a fixed random projection `r`, so dL/dy = r.
    fn check<F>(p: &ParamStore, f: F, tol: f64)
    where
        F: Fn(&ParamStore, bool) -> (f64, Grads),
    {
        let (_, g) = f(p, true);
        let r = grad_check(|q| f(q, false).0, p, &g, 1e-5, 2000, 0).unwrap();
        assert!(r.max_relative_error < tol, "{r:?}");
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut p = ParamStore::new();
        let cell = LstmCell::new(&mut p, "cell", 3, 4, 5);
        let mut rng = Rng64::new(1);
        let (x, h0, c0, rh, rc) = (randvec(&mut rng, 3), randvec(&mut rng, 4), randvec(&mut rng, 4), randvec(&mut rng, 4), randvec(&mut rng, 4));
        check(
            &p,
            |p, _| {
                let s = cell.step(p, &x, &h0, &c0);
                let loss = dot(&s.h, &rh) + dot(&s.c, &rc);
                let mut g = p.zero_grads();
                cell.backward(p, &mut g, &s, &rh, &rc);
                (loss, g)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut p = ParamStore::new();
        let ln = LayerNorm::new(&mut p, "ln", 5);
        let mut rng = Rng64::new(2);
        for v in p.tensors_mut().iter_mut().flat_map(|t| t.values.iter_mut()) {
            *v += 0.3 * rng.normal();
        }
        let x = randvec(&mut rng, 5);
        let r = randvec(&mut rng, 5);
        check(
            &p,
            |p, _| {
                let (y, c) = ln.forward(p, &x);
                let mut g = p.zero_grads();
                ln.backward(p, &mut g, &c, &r);
                (dot(&y, &r), g)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_gradients_including_inputs() {
        let mut p = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut p, "att", 4, 2, 3);
        let mut rng = Rng64::new(4);
        let xs_id = p.add(ParamTensor { name: "x".into(), shape: vec![3, 4], values: randvec(&mut rng, 12) });
        let r: Vec<Vec<f64>> = (0..3).map(|_| randvec(&mut rng, 4)).collect();
        for causal in [false, true] {
            check(
                &p,
                |p, _| {
                    let x: Vec<Vec<f64>> = p.get(xs_id).chunks(4).map(<[f64]>::to_vec).collect();
                    let (y, c) = mha.forward(p, &x, &x, causal);
                    let loss: f64 = y.iter().zip(&r).map(|(a, b)| dot(a, b)).sum();
                    let mut g = p.zero_grads();
                    let (dq, dm) = mha.backward(p, &mut g, &c, &r);
                    let gx = g.get_mut(xs_id);
                    for i in 0..3 {
                        for k in 0..4 {
                            gx[i * 4 + k] += dq[i][k] + dm[i][k];
                        }
                    }
                    (loss, g)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn causal_mask_hides_future() {
        let mut p = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut p, "att", 4, 2, 3);
        let mut rng = Rng64::new(5);
        let x: Vec<Vec<f64>> = (0..3).map(|_| randvec(&mut rng, 4)).collect();
        let (_, c) = mha.forward(&p, &x, &x, true);
        for h in 0..2 {
            for i in 0..3 {
                let row = &c.probs[h][i];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&a| a == 0.0));
            }
        }
    }

    #[test]
    fn feed_forward_gradients() {
        let mut p = ParamStore::new();
        let ff = FeedForward::new(&mut p, "ff", 4, 6, 8);
        let mut rng = Rng64::new(6);
        let x = randvec(&mut rng, 4);
        let r = randvec(&mut rng, 4);
        check(
            &p,
            |p, _| {
                let (y, c) = ff.forward(p, &x);
                let mut g = p.zero_grads();
                ff.backward(p, &mut g, &c, &r);
                (dot(&y, &r), g)
            },
            1e-6,
        );
    }
}
