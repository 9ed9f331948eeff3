//! A pre-norm decoder-only transformer in f64 with explicit backward passes.
//!
//! Layout: token + learned position embeddings, `n_layers` blocks of
//! causal multi-head attention and a GELU MLP (each behind a LayerNorm and a
//! residual), a final LayerNorm whose output is the per-position hidden
//! state, and an untied linear LM head. All matrices are row-major with
//! shape `(in, out)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.context_length == 0
        {
            return Err(CctError::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CctError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Anything that exposes named f64 tensors to optimizers and checkpoints.
pub trait ParamTensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub w_qkv: Vec<f64>,
    pub b_qkv: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub wte: Vec<f64>,
    pub wpe: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub w_lm: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, d, t) = (cfg.vocab_size, cfg.d_model, cfg.context_length);
        let layer = LayerParams {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: vec![0.0; d * 3 * d],
            b_qkv: vec![0.0; 3 * d],
            w_o: vec![0.0; d * d],
            b_o: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_fc: vec![0.0; d * 4 * d],
            b_fc: vec![0.0; 4 * d],
            w_proj: vec![0.0; 4 * d * d],
            b_proj: vec![0.0; d],
        };
        Self {
            wte: vec![0.0; v * d],
            wpe: vec![0.0; t * d],
            layers: vec![layer; cfg.n_layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            w_lm: vec![0.0; d * v],
        }
    }

    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj = Normal::new(0.0, INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt())
            .expect("valid std");
        let mut fill = |xs: &mut [f64], dist: &Normal<f64>| {
            xs.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut p.wte, &normal);
        fill(&mut p.wpe, &normal);
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(&mut l.w_qkv, &normal);
            fill(&mut l.w_o, &proj);
            fill(&mut l.w_fc, &normal);
            fill(&mut l.w_proj, &proj);
        }
        p.lnf_g.fill(1.0);
        fill(&mut p.w_lm, &normal);
        p
    }
}

impl ParamTensors for Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("wte", &self.wte);
        f("wpe", &self.wpe);
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("b_qkv", &l.b_qkv),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_fc", &l.w_fc),
                ("b_fc", &l.b_fc),
                ("w_proj", &l.w_proj),
                ("b_proj", &l.b_proj),
            ] {
                f(&format!("h{i}.{name}"), t);
            }
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        f("w_lm", &self.w_lm);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("wte", &mut self.wte);
        f("wpe", &mut self.wpe);
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("w_qkv", &mut l.w_qkv),
                ("b_qkv", &mut l.b_qkv),
                ("w_o", &mut l.w_o),
                ("b_o", &mut l.b_o),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w_fc", &mut l.w_fc),
                ("b_fc", &mut l.b_fc),
                ("w_proj", &mut l.w_proj),
                ("b_proj", &mut l.b_proj),
            ] {
                f(&format!("h{i}.{name}"), t);
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_lm", &mut self.w_lm);
    }
}

/// Final-layer hidden vectors, one row of `d_model` per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub d_model: usize,
    pub data: Vec<f64>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.data.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_model..(i + 1) * self.d_model]
    }

    /// Rows `[start, end)` as their own states.
    pub fn slice(&self, start: usize, end: usize) -> HiddenStates {
        HiddenStates {
            d_model: self.d_model,
            data: self.data[start * self.d_model..end * self.d_model].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub vocab_size: usize,
    /// Row-major `(positions, vocab_size)`.
    pub logits: Vec<f64>,
    pub hidden: HiddenStates,
}

impl ForwardOutput {
    pub fn logits_row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.vocab_size..(i + 1) * self.vocab_size]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    att_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc: Vec<f64>,
    gelu: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Activations {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub hidden: HiddenStates,
    /// Empty when the pass was run without the LM head.
    pub logits: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput> {
        let acts = self.forward_cached(ids, true)?;
        Ok(ForwardOutput {
            vocab_size: self.config.vocab_size,
            logits: acts.logits,
            hidden: acts.hidden,
        })
    }

    pub fn forward_cached(&self, ids: &[u32], with_logits: bool) -> Result<Activations> {
        let cfg = &self.config;
        let (t_len, d, v) = (ids.len(), cfg.d_model, cfg.vocab_size);
        if t_len > cfg.context_length {
            return Err(CctError::Contract(format!(
                "sequence of {t_len} tokens exceeds context length {}",
                cfg.context_length
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(CctError::Contract(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let p = &self.params;
        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let e = &p.wte[id as usize * d..(id as usize + 1) * d];
            let pe = &p.wpe[t * d..(t + 1) * d];
            for (k, xv) in x[t * d..(t + 1) * d].iter_mut().enumerate() {
                *xv = e[k] + pe[k];
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &p.layers {
            let x_in = x.clone();
            let mut ln1 = vec![0.0; t_len * d];
            let (ln1_mean, ln1_rstd) = layernorm_forward(&mut ln1, &x_in, &lp.ln1_g, &lp.ln1_b, d);
            let mut qkv = vec![0.0; t_len * 3 * d];
            matmul_forward(&mut qkv, &ln1, &lp.w_qkv, Some(&lp.b_qkv), d, 3 * d);
            let mut att = vec![0.0; cfg.n_heads * t_len * t_len];
            let mut att_out = vec![0.0; t_len * d];
            attention_forward(&mut att_out, &mut att, &qkv, t_len, d, cfg.n_heads);
            let mut proj = vec![0.0; t_len * d];
            matmul_forward(&mut proj, &att_out, &lp.w_o, Some(&lp.b_o), d, d);
            let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let mut ln2 = vec![0.0; t_len * d];
            let (ln2_mean, ln2_rstd) = layernorm_forward(&mut ln2, &x_mid, &lp.ln2_g, &lp.ln2_b, d);
            let mut fc = vec![0.0; t_len * 4 * d];
            matmul_forward(&mut fc, &ln2, &lp.w_fc, Some(&lp.b_fc), d, 4 * d);
            let gelu: Vec<f64> = fc.iter().map(|&u| gelu_forward(u)).collect();
            let mut mlp = vec![0.0; t_len * d];
            matmul_forward(&mut mlp, &gelu, &lp.w_proj, Some(&lp.b_proj), 4 * d, d);
            x = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            layers.push(LayerCache {
                x_in,
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                att_out,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                fc,
                gelu,
            });
        }
        let mut hidden = vec![0.0; t_len * d];
        let (lnf_mean, lnf_rstd) = layernorm_forward(&mut hidden, &x, &p.lnf_g, &p.lnf_b, d);
        let logits = if with_logits {
            let mut l = vec![0.0; t_len * v];
            matmul_forward(&mut l, &hidden, &p.w_lm, None, d, v);
            l
        } else {
            Vec::new()
        };
        Ok(Activations {
            ids: ids.to_vec(),
            layers,
            x_final: x,
            lnf_mean,
            lnf_rstd,
            hidden: HiddenStates {
                d_model: d,
                data: hidden,
            },
            logits,
        })
    }

    /// Accumulates parameter gradients into `grads` given upstream
    /// gradients on the logits and/or directly on the hidden states.
    pub fn backward(
        &self,
        acts: &Activations,
        dlogits: Option<&[f64]>,
        dhidden: Option<&[f64]>,
        grads: &mut Params,
    ) {
        let cfg = &self.config;
        let (t_len, d, v) = (acts.ids.len(), cfg.d_model, cfg.vocab_size);
        let p = &self.params;
        let mut dh = match dhidden {
            Some(g) => g.to_vec(),
            None => vec![0.0; t_len * d],
        };
        if let Some(dl) = dlogits {
            matmul_backward(&mut dh, &mut grads.w_lm, None, dl, &acts.hidden.data, &p.w_lm, d, v);
        }
        let mut dx = vec![0.0; t_len * d];
        layernorm_backward(
            &mut dx,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
            &dh,
            &acts.x_final,
            &p.lnf_g,
            &acts.lnf_mean,
            &acts.lnf_rstd,
            d,
        );
        for (li, cache) in acts.layers.iter().enumerate().rev() {
            let lp = &p.layers[li];
            let lg = &mut grads.layers[li];
            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid)))).
            let mut dgelu = vec![0.0; t_len * 4 * d];
            matmul_backward(
                &mut dgelu,
                &mut lg.w_proj,
                Some(&mut lg.b_proj),
                &dx,
                &cache.gelu,
                &lp.w_proj,
                4 * d,
                d,
            );
            let dfc: Vec<f64> = dgelu
                .iter()
                .zip(&cache.fc)
                .map(|(g, &u)| g * gelu_backward(u))
                .collect();
            let mut dln2 = vec![0.0; t_len * d];
            matmul_backward(&mut dln2, &mut lg.w_fc, Some(&mut lg.b_fc), &dfc, &cache.ln2, &lp.w_fc, d, 4 * d);
            let mut dx_mid = dx.clone();
            layernorm_backward(
                &mut dx_mid,
                &mut lg.ln2_g,
                &mut lg.ln2_b,
                &dln2,
                &cache.x_mid,
                &lp.ln2_g,
                &cache.ln2_mean,
                &cache.ln2_rstd,
                d,
            );
            // Attention branch: x_mid = x_in + o(attn(qkv(ln1(x_in)))).
            let mut datt_out = vec![0.0; t_len * d];
            matmul_backward(&mut datt_out, &mut lg.w_o, Some(&mut lg.b_o), &dx_mid, &cache.att_out, &lp.w_o, d, d);
            let mut dqkv = vec![0.0; t_len * 3 * d];
            attention_backward(&mut dqkv, &datt_out, &cache.qkv, &cache.att, t_len, d, cfg.n_heads);
            let mut dln1 = vec![0.0; t_len * d];
            matmul_backward(&mut dln1, &mut lg.w_qkv, Some(&mut lg.b_qkv), &dqkv, &cache.ln1, &lp.w_qkv, d, 3 * d);
            let mut dx_in = dx_mid;
            layernorm_backward(
                &mut dx_in,
                &mut lg.ln1_g,
                &mut lg.ln1_b,
                &dln1,
                &cache.x_in,
                &lp.ln1_g,
                &cache.ln1_mean,
                &cache.ln1_rstd,
                d,
            );
            dx = dx_in;
        }
        for (t, &id) in acts.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let id = id as usize;
            for k in 0..d {
                grads.wte[id * d + k] += row[k];
                grads.wpe[t * d + k] += row[k];
            }
        }
    }

    /// Incremental decoder with a key/value cache.
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            model: self,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }
}

/// Feeds tokens one at a time, caching per-layer keys and values.
#[derive(Clone)]
pub struct Decoder<'a> {
    model: &'a Model,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes one token and returns the next-token logits.
    pub fn step(&mut self, id: u32) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let p = &self.model.params;
        let (d, v, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let hd = cfg.head_dim();
        if self.len >= cfg.context_length {
            return Err(CctError::Contract("decoder context is full".into()));
        }
        if id as usize >= v {
            return Err(CctError::Contract(format!("token id {id} outside vocabulary")));
        }
        let pos = self.len;
        let mut x: Vec<f64> = p.wte[id as usize * d..(id as usize + 1) * d]
            .iter()
            .zip(&p.wpe[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (hd as f64).sqrt();
        for (li, lp) in p.layers.iter().enumerate() {
            let mut ln = vec![0.0; d];
            layernorm_forward(&mut ln, &x, &lp.ln1_g, &lp.ln1_b, d);
            let mut qkv = vec![0.0; 3 * d];
            matmul_forward(&mut qkv, &ln, &lp.w_qkv, Some(&lp.b_qkv), d, 3 * d);
            self.keys[li].extend_from_slice(&qkv[d..2 * d]);
            self.values[li].extend_from_slice(&qkv[2 * d..]);
            let n = pos + 1;
            let mut out = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for h in 0..nh {
                let q = &qkv[h * hd..(h + 1) * hd];
                for (u, s) in scores.iter_mut().enumerate() {
                    let k = &self.keys[li][u * d + h * hd..u * d + (h + 1) * hd];
                    *s = dot(q, k) * scale;
                }
                softmax_in_place(&mut scores);
                let o = &mut out[h * hd..(h + 1) * hd];
                for (u, &w) in scores.iter().enumerate() {
                    let val = &self.values[li][u * d + h * hd..u * d + (h + 1) * hd];
                    for (oi, vi) in o.iter_mut().zip(val) {
                        *oi += w * vi;
                    }
                }
            }
            let mut proj = vec![0.0; d];
            matmul_forward(&mut proj, &out, &lp.w_o, Some(&lp.b_o), d, d);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            layernorm_forward(&mut ln, &x, &lp.ln2_g, &lp.ln2_b, d);
            let mut fc = vec![0.0; 4 * d];
            matmul_forward(&mut fc, &ln, &lp.w_fc, Some(&lp.b_fc), d, 4 * d);
            fc.iter_mut().for_each(|u| *u = gelu_forward(*u));
            let mut mlp = vec![0.0; d];
            matmul_forward(&mut mlp, &fc, &lp.w_proj, Some(&lp.b_proj), 4 * d, d);
            x.iter_mut().zip(&mlp).for_each(|(a, b)| *a += b);
        }
        let mut h = vec![0.0; d];
        layernorm_forward(&mut h, &x, &p.lnf_g, &p.lnf_b, d);
        let mut logits = vec![0.0; v];
        matmul_forward(&mut logits, &h, &p.w_lm, None, d, v);
        self.len += 1;
        Ok(logits)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

/// `out[t, :] = inp[t, :] @ w + b` over all rows of `inp`.
fn matmul_forward(out: &mut [f64], inp: &[f64], w: &[f64], b: Option<&[f64]>, n_in: usize, n_out: usize) {
    let rows = inp.len() / n_in;
    for t in 0..rows {
        let o = &mut out[t * n_out..(t + 1) * n_out];
        match b {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
        for (i, &a) in inp[t * n_in..(t + 1) * n_in].iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov += a * wv;
            }
        }
    }
}

/// Accumulates `din += dout @ w^T`, `dw += inp^T @ dout`, `db += sum(dout)`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    din: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    n_in: usize,
    n_out: usize,
) {
    let rows = inp.len() / n_in;
    for t in 0..rows {
        let go = &dout[t * n_out..(t + 1) * n_out];
        let x = &inp[t * n_in..(t + 1) * n_in];
        let di = &mut din[t * n_in..(t + 1) * n_in];
        for i in 0..n_in {
            let wr = &w[i * n_out..(i + 1) * n_out];
            di[i] += dot(go, wr);
            let a = x[i];
            if a != 0.0 {
                let dwr = &mut dw[i * n_out..(i + 1) * n_out];
                for (dv, gv) in dwr.iter_mut().zip(go) {
                    *dv += a * gv;
                }
            }
        }
    }
    if let Some(db) = db {
        for t in 0..rows {
            for (bv, gv) in db.iter_mut().zip(&dout[t * n_out..(t + 1) * n_out]) {
                *bv += gv;
            }
        }
    }
}

fn layernorm_forward(out: &mut [f64], inp: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = inp.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for t in 0..rows {
        let x = &inp[t * d..(t + 1) * d];
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for k in 0..d {
            out[t * d + k] = (x[k] - mean) * rstd * g[k] + b[k];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    g: &[f64],
    means: &[f64],
    rstds: &[f64],
    d: usize,
) {
    let rows = inp.len() / d;
    for t in 0..rows {
        let x = &inp[t * d..(t + 1) * d];
        let go = &dout[t * d..(t + 1) * d];
        let (mean, rstd) = (means[t], rstds[t]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for k in 0..d {
            let norm = (x[k] - mean) * rstd;
            let dnorm = g[k] * go[k];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= d as f64;
        dnorm_norm_mean /= d as f64;
        for k in 0..d {
            let norm = (x[k] - mean) * rstd;
            let dnorm = g[k] * go[k];
            db[k] += go[k];
            dg[k] += norm * go[k];
            dinp[t * d + k] += rstd * (dnorm - dnorm_mean - norm * dnorm_norm_mean);
        }
    }
}

/// Causal attention. `att` receives the `(head, query, key)` probabilities.
fn attention_forward(out: &mut [f64], att: &mut [f64], qkv: &[f64], t_len: usize, d: usize, nh: usize) {
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..nh {
        for t in 0..t_len {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            for u in 0..=t {
                let k = &qkv[u * 3 * d + d + h * hd..u * 3 * d + d + (h + 1) * hd];
                row[u] = dot(q, k) * scale;
            }
            softmax_in_place(&mut row[..=t]);
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            for u in 0..=t {
                let w = row[u];
                let val = &qkv[u * 3 * d + 2 * d + h * hd..u * 3 * d + 2 * d + (h + 1) * hd];
                for (ov, vv) in o.iter_mut().zip(val) {
                    *ov += w * vv;
                }
            }
        }
    }
}

fn attention_backward(
    dqkv: &mut [f64],
    dout: &[f64],
    qkv: &[f64],
    att: &[f64],
    t_len: usize,
    d: usize,
    nh: usize,
) {
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut datt = vec![0.0; t_len];
    for h in 0..nh {
        for t in 0..t_len {
            let row = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let go = &dout[t * d + h * hd..t * d + (h + 1) * hd];
            for u in 0..=t {
                let voff = u * 3 * d + 2 * d + h * hd;
                datt[u] = dot(go, &qkv[voff..voff + hd]);
                for k in 0..hd {
                    dqkv[voff + k] += row[u] * go[k];
                }
            }
            let weighted: f64 = (0..=t).map(|u| row[u] * datt[u]).sum();
            let qoff = t * 3 * d + h * hd;
            for u in 0..=t {
                let ds = row[u] * (datt[u] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let koff = u * 3 * d + d + h * hd;
                for k in 0..hd {
                    dqkv[qoff + k] += ds * qkv[koff + k];
                    dqkv[koff + k] += ds * qkv[qoff + k];
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_backward(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Uniform draw used for the scalar head.
pub(crate) fn small_uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}
