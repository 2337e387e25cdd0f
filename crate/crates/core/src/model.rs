//! Desk-scale decoder-only transformer with RoPE attention over a
//! [`DualCache`], plus the FLAG-token response head.
//!
//! The backbone (embeddings, attention, MLP, norms, LM head) is frozen
//! seeded-random; only the response head is trained. Blocks are pre-norm
//! with RMS normalization and a SiLU MLP. Hidden states are returned for
//! every layer so the FLAG hidden can be taken from the penultimate layer.

use crate::kvcache::{CacheEntry, CacheError, DualCache, KvPair, Segment};
use crate::rope::{rope_rotate_into, RopeError, RopeFreqs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("flag position {0} outside chunk span of {1} tokens")]
    MissingFlag(usize, usize),
    #[error("token id {0} outside vocabulary of {1}")]
    TokenOutOfVocab(u32, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Max total KV entries (system + streaming segments).
    pub max_window: usize,
    pub rope_base: f64,
    /// Max tokens generated per chunk.
    pub gen_budget: usize,
    /// Hidden width of the gated response head.
    pub response_hidden: usize,
}

impl ModelConfig {
    /// 2 layers, 4 heads, d_model=128 — small enough for sub-second suites.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 256,
            vocab_size,
            max_window: 4096,
            rope_base: 10000.0,
            gen_budget: 12,
            response_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("d_head must be even".into()));
        }
        if self.gen_budget < 1 {
            return Err(ModelError::InvalidConfig("gen_budget must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln1: Vec<f64>,
    pub ln2: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

/// Gated MLP response head: p = sigmoid(w . (sigmoid(Wg h + bg) * tanh(Wv h + bv)) + b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseHead {
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub hidden: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embeddings: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Vec<f64>,
    pub response_head: ResponseHead,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Row-major `out[i] = sum_j w[i * in_dim + j] * x[j]`.
fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut out = vec![0.0; out_dim];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

impl ResponseHead {
    pub fn seeded(d_model: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / d_model as f64).sqrt();
        let mut mat = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        Self {
            w_g: mat(hidden * d_model, scale),
            b_g: vec![0.0; hidden],
            w_v: mat(hidden * d_model, scale),
            b_v: vec![0.0; hidden],
            w: mat(hidden, (1.0 / hidden as f64).sqrt()),
            b: 0.0,
            hidden,
            d_model,
        }
    }

    pub fn score(&self, h: &[f64]) -> f64 {
        let zg = {
            let mut z = matvec(&self.w_g, h, self.hidden, self.d_model);
            for (zi, bi) in z.iter_mut().zip(&self.b_g) {
                *zi += bi;
            }
            z
        };
        let zv = {
            let mut z = matvec(&self.w_v, h, self.hidden, self.d_model);
            for (zi, bi) in z.iter_mut().zip(&self.b_v) {
                *zi += bi;
            }
            z
        };
        let mut s = self.b;
        for i in 0..self.hidden {
            s += self.w[i] * sigmoid(zg[i]) * zv[i].tanh();
        }
        sigmoid(s)
    }

    /// Score plus the gradient of the score w.r.t. every head parameter,
    /// in the same flat layout as [`ResponseHead::flatten`].
    pub fn score_with_grad(&self, h: &[f64]) -> (f64, Vec<f64>) {
        let mut zg = matvec(&self.w_g, h, self.hidden, self.d_model);
        for (zi, bi) in zg.iter_mut().zip(&self.b_g) {
            *zi += bi;
        }
        let mut zv = matvec(&self.w_v, h, self.hidden, self.d_model);
        for (zi, bi) in zv.iter_mut().zip(&self.b_v) {
            *zi += bi;
        }
        let g: Vec<f64> = zg.iter().map(|&z| sigmoid(z)).collect();
        let v: Vec<f64> = zv.iter().map(|&z| z.tanh()).collect();
        let mut s = self.b;
        for i in 0..self.hidden {
            s += self.w[i] * g[i] * v[i];
        }
        let p = sigmoid(s);
        let dp_ds = p * (1.0 - p);

        // ds/dz_g = w * v * g(1-g); ds/dz_v = w * g * (1 - v^2)
        let dz_g: Vec<f64> = (0..self.hidden)
            .map(|i| self.w[i] * v[i] * g[i] * (1.0 - g[i]))
            .collect();
        let dz_v: Vec<f64> = (0..self.hidden)
            .map(|i| self.w[i] * g[i] * (1.0 - v[i] * v[i]))
            .collect();

        let mut grad = Vec::with_capacity(self.num_params());
        for dz in &dz_g {
            for hj in h {
                grad.push(dp_ds * dz * hj);
            }
        }
        grad.extend(dz_g.iter().map(|d| dp_ds * d));
        for dz in &dz_v {
            for hj in h {
                grad.push(dp_ds * dz * hj);
            }
        }
        grad.extend(dz_v.iter().map(|d| dp_ds * d));
        grad.extend((0..self.hidden).map(|i| dp_ds * g[i] * v[i]));
        grad.push(dp_ds);
        (p, grad)
    }

    pub fn num_params(&self) -> usize {
        2 * self.hidden * self.d_model + 3 * self.hidden + 1
    }

    /// Flat layout: w_g rows, b_g, w_v rows, b_v, w, b.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(&self.w_g);
        out.extend(&self.b_g);
        out.extend(&self.w_v);
        out.extend(&self.b_v);
        out.extend(&self.w);
        out.push(self.b);
        out
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let (hd, h) = (self.hidden * self.d_model, self.hidden);
        let mut off = 0;
        self.w_g.copy_from_slice(&flat[off..off + hd]);
        off += hd;
        self.b_g.copy_from_slice(&flat[off..off + h]);
        off += h;
        self.w_v.copy_from_slice(&flat[off..off + hd]);
        off += hd;
        self.b_v.copy_from_slice(&flat[off..off + h]);
        off += h;
        self.w.copy_from_slice(&flat[off..off + h]);
        off += h;
        self.b = flat[off];
    }
}

impl ModelWeights {
    /// Frozen random backbone; deterministic for a given seed.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let scale = (1.0 / d as f64).sqrt();
        let mut mat = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: mat(d * d, scale),
                wk: mat(d * d, scale),
                wv: mat(d * d, scale),
                wo: mat(d * d, scale),
                ln1: vec![1.0; d],
                ln2: vec![1.0; d],
                w_up: mat(config.d_ff * d, scale),
                w_down: mat(d * config.d_ff, (1.0 / config.d_ff as f64).sqrt()),
            })
            .collect();
        let embeddings = mat(config.vocab_size * d, 1.0);
        let final_norm = vec![1.0; d];
        let lm_head = mat(config.vocab_size * d, scale);
        let response_head = ResponseHead::seeded(d, config.response_hidden, &mut rng);
        Ok(Self {
            config,
            embeddings,
            layers,
            final_norm,
            lm_head,
            response_head,
        })
    }
}

/// Per-layer hidden states for the tokens of one prefill call.
/// `states[0]` is the embedding layer; `states[l]` the residual stream
/// after block `l` (1-based), so `states[n_layers]` feeds the LM head.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub states: Vec<Vec<Vec<f64>>>,
}

impl HiddenStates {
    pub fn n_tokens(&self) -> usize {
        self.states[0].len()
    }
}

/// Penultimate-layer hidden at the FLAG token of a chunk.
#[derive(Debug, Clone)]
pub struct FlagState {
    pub hidden: Vec<f64>,
    pub chunk_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Speak,
    Silence,
}

/// a_t = 1 iff p_t >= tau.
pub fn decide(p: f64, tau: f64) -> Action {
    if p >= tau {
        Action::Speak
    } else {
        Action::Silence
    }
}

pub struct Model {
    weights: ModelWeights,
    freqs: RopeFreqs,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self, ModelError> {
        weights.config.validate()?;
        let freqs = RopeFreqs::new(weights.config.d_head, weights.config.rope_base)?;
        Ok(Self { weights, freqs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn response_head(&self) -> &ResponseHead {
        &self.weights.response_head
    }

    pub fn set_response_head(&mut self, head: ResponseHead) {
        self.weights.response_head = head;
    }

    pub fn freqs(&self) -> &RopeFreqs {
        &self.freqs
    }

    pub fn new_cache(&self) -> DualCache {
        let c = &self.weights.config;
        DualCache::new(c.n_layers, c.n_heads, c.d_head, c.max_window)
    }

    pub fn new_cache_with_window(&self, window: usize) -> DualCache {
        let c = &self.weights.config;
        DualCache::new(c.n_layers, c.n_heads, c.d_head, window)
    }

    fn embed(&self, token: u32) -> Result<Vec<f64>, ModelError> {
        let c = &self.weights.config;
        if token as usize >= c.vocab_size {
            return Err(ModelError::TokenOutOfVocab(token, c.vocab_size));
        }
        let d = c.d_model;
        let row = &self.weights.embeddings[token as usize * d..(token as usize + 1) * d];
        Ok(row.to_vec())
    }

    /// Causal forward over `cache ++ tokens`, appending the new keys/values
    /// to the cache. Streaming prefills trigger budget eviction first.
    pub fn prefill(
        &self,
        tokens: &[u32],
        cache: &mut DualCache,
        segment: Segment,
    ) -> Result<HiddenStates, ModelError> {
        assert!(!tokens.is_empty(), "prefill requires at least one token");
        if segment == Segment::Streaming {
            cache.maybe_evict(tokens.len(), &self.freqs)?;
        }
        let c = &self.weights.config;
        let (d, nh, dh) = (c.d_model, c.n_heads, c.d_head);
        let n = tokens.len();
        let start_pos = cache.next_position();

        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embed(t))
            .collect::<Result<_, _>>()?;
        let mut states = Vec::with_capacity(c.n_layers + 1);
        states.push(x.clone());

        // Rotated keys and values per layer for the new tokens, kept for
        // cache append after the full pass.
        let mut new_keys: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); c.n_layers];
        let mut new_values: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); c.n_layers];

        for (l, lw) in self.weights.layers.iter().enumerate() {
            // Attention sub-block (pre-norm residual).
            let mut q_rot: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (i, xi) in x.iter().enumerate() {
                let normed = rms_norm(xi, &lw.ln1);
                let q = matvec(&lw.wq, &normed, d, d);
                let k = matvec(&lw.wk, &normed, d, d);
                let v = matvec(&lw.wv, &normed, d, d);
                let pos = (start_pos + i as i64) as f64;
                let mut qr = vec![0.0; d];
                let mut kr = vec![0.0; d];
                for h in 0..nh {
                    let s = h * dh;
                    rope_rotate_into(&q[s..s + dh], pos, &self.freqs, &mut qr[s..s + dh]);
                    rope_rotate_into(&k[s..s + dh], pos, &self.freqs, &mut kr[s..s + dh]);
                }
                q_rot.push(qr);
                new_keys[l].push(kr);
                new_values[l].push(v);
            }

            let scale = 1.0 / (dh as f64).sqrt();
            for i in 0..n {
                let mut attn_out = vec![0.0; d];
                for h in 0..nh {
                    let s = h * dh;
                    let qh = &q_rot[i][s..s + dh];
                    let mut logits: Vec<f64> = Vec::with_capacity(cache.len() + i + 1);
                    for e in cache.entries() {
                        let kh = &e.layers[l].key[s..s + dh];
                        logits.push(scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>());
                    }
                    for keys in &new_keys[l][..=i] {
                        let kh = &keys[s..s + dh];
                        logits.push(scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>());
                    }
                    let weights = softmax(&logits);
                    let cache_len = cache.len();
                    for (idx, e) in cache.entries().enumerate() {
                        let vh = &e.layers[l].value[s..s + dh];
                        let w = weights[idx];
                        for (o, val) in attn_out[s..s + dh].iter_mut().zip(vh) {
                            *o += w * val;
                        }
                    }
                    for j in 0..=i {
                        let vh = &new_values[l][j][s..s + dh];
                        let w = weights[cache_len + j];
                        for (o, val) in attn_out[s..s + dh].iter_mut().zip(vh) {
                            *o += w * val;
                        }
                    }
                }
                let proj = matvec(&lw.wo, &attn_out, d, d);
                for (xi, pi) in x[i].iter_mut().zip(&proj) {
                    *xi += pi;
                }
            }

            // MLP sub-block.
            for xi in x.iter_mut() {
                let normed = rms_norm(xi, &lw.ln2);
                let up = matvec(&lw.w_up, &normed, c.d_ff, d);
                let act: Vec<f64> = up.into_iter().map(silu).collect();
                let down = matvec(&lw.w_down, &act, d, c.d_ff);
                for (a, b) in xi.iter_mut().zip(&down) {
                    *a += b;
                }
            }
            states.push(x.clone());
        }

        let entries: Vec<CacheEntry> = (0..n)
            .map(|i| CacheEntry {
                position: start_pos + i as i64,
                layers: (0..c.n_layers)
                    .map(|l| KvPair {
                        key: new_keys[l][i].clone(),
                        value: new_values[l][i].clone(),
                    })
                    .collect(),
            })
            .collect();
        cache.append(entries, segment)?;
        Ok(HiddenStates { states })
    }

    /// LM-head logits from a final-block residual vector.
    pub fn logits(&self, h_final: &[f64]) -> Vec<f64> {
        let c = &self.weights.config;
        let normed = rms_norm(h_final, self.final_norm_gain());
        matvec(&self.weights.lm_head, &normed, c.vocab_size, c.d_model)
    }

    fn final_norm_gain(&self) -> &[f64] {
        &self.weights.final_norm
    }

    /// One-token causal step; returns the next-token logits.
    pub fn decode_step(&self, token: u32, cache: &mut DualCache) -> Result<Vec<f64>, ModelError> {
        let states = self.prefill(&[token], cache, Segment::Streaming)?;
        let last = states.states.last().unwrap();
        Ok(self.logits(&last[0]))
    }

    /// Penultimate-layer hidden at `flag_pos` within the chunk's token span.
    pub fn flag_hidden(
        &self,
        states: &HiddenStates,
        flag_pos: usize,
        chunk_index: u64,
    ) -> Result<FlagState, ModelError> {
        let n = states.n_tokens();
        if flag_pos >= n {
            return Err(ModelError::MissingFlag(flag_pos, n));
        }
        let penultimate = &states.states[self.weights.config.n_layers.saturating_sub(1)];
        Ok(FlagState {
            hidden: penultimate[flag_pos].clone(),
            chunk_index,
        })
    }

    /// p_t in (0,1) from the FLAG hidden.
    pub fn response_score(&self, flag: &FlagState) -> f64 {
        self.weights.response_head.score(&flag.hidden)
    }
}
