// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny decoder-only transformer with hidden-state hooks.
//!
//! Pre-norm blocks (attention then GELU MLP with 4× expansion), learned
//! absolute positions and an untied LM head `logits = W_U h + b`.
//!
//! Layer indexing for hooks is 1-based. For `ℓ < L` the layer-ℓ hidden state
//! is the residual stream after block ℓ. For `ℓ = L` it is the final
//! normalized state that feeds the head, so the head is exactly affine in it.

mod cache;
mod checkpoint;
mod train;

pub use cache::DecodeCache;
pub use train::{train_lm, AdamW, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads, 32 positions.
    pub fn desk_scale(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            embed_size: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 4 entries (pad/bos/eos/mask), got {}",
                self.vocab_size
            )));
        }
        if self.hidden_size < 2 || self.layers == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!("non-positive model dimension in {self:?}")));
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.heads
            )));
        }
        if self.embed_size != self.hidden_size {
            return Err(Error::Config(format!(
                "embed size {} must equal hidden size {}",
                self.embed_size, self.hidden_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn mlp_size(&self) -> usize {
        4 * self.hidden_size
    }
}

/// Parameters of one pre-norm block. Weight matrices are `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

/// The language model. `token_embedding` (E) and `unembedding` (W_U) are
/// separate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    pub config: ModelConfig,
    /// `E: [|V| × d_e]`
    pub token_embedding: Tensor,
    /// `[max_seq_len × D]`
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `W_U: [|V| × D]`
    pub unembedding: Tensor,
    /// `b: [|V|]`
    pub unembedding_bias: Tensor,
}

/// Last-position activation captured at a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layer: usize,
    pub position: usize,
    pub vector: Tensor,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl TinyTransformer {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.hidden_size, config.mlp_size());
        let w_std = 1.0 / (d as f64).sqrt();
        let out_std = w_std / (2.0 * config.layers as f64).sqrt();
        let token_embedding = normal_matrix(&mut rng, v, d, 0.3);
        let position_embedding = normal_matrix(&mut rng, config.max_seq_len, d, 0.1);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: normal_matrix(&mut rng, d, d, w_std),
                w_k: normal_matrix(&mut rng, d, d, w_std),
                w_v: normal_matrix(&mut rng, d, d, w_std),
                w_o: normal_matrix(&mut rng, d, d, out_std),
                b_o: Tensor::zeros(&[d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w_fc: normal_matrix(&mut rng, d, f, w_std),
                b_fc: Tensor::zeros(&[f]),
                w_proj: normal_matrix(&mut rng, f, d, out_std / 2.0),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
            unembedding: normal_matrix(&mut rng, v, d, w_std),
            unembedding_bias: Tensor::zeros(&[v]),
            config,
        })
    }

    /// Named parameters in declaration order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("b_o", &b.b_o),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_fc", &b.w_fc),
                ("b_fc", &b.b_fc),
                ("w_proj", &b.w_proj),
                ("b_proj", &b.b_proj),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("unembedding".to_string(), &self.unembedding));
        out.push(("unembedding_bias".to_string(), &self.unembedding_bias));
        out
    }

    /// Mutable parameters, same order as [`TinyTransformer::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_fc,
                &mut b.b_fc,
                &mut b.w_proj,
                &mut b.b_proj,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.unembedding,
            &mut self.unembedding_bias,
        ]);
        out
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::Input(format!(
                "layer {layer} outside 1..={}",
                self.config.layers
            )));
        }
        Ok(())
    }

    /// Places every parameter in `g`; `trainable` selects inputs vs constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
        let token_embedding = leaf(&self.token_embedding);
        let position_embedding = leaf(&self.position_embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln1_gain: leaf(&b.ln1_gain),
                ln1_bias: leaf(&b.ln1_bias),
                w_q: leaf(&b.w_q),
                w_k: leaf(&b.w_k),
                w_v: leaf(&b.w_v),
                w_o: leaf(&b.w_o),
                b_o: leaf(&b.b_o),
                ln2_gain: leaf(&b.ln2_gain),
                ln2_bias: leaf(&b.ln2_bias),
                w_fc: leaf(&b.w_fc),
                b_fc: leaf(&b.b_fc),
                w_proj: leaf(&b.w_proj),
                b_proj: leaf(&b.b_proj),
            })
            .collect();
        BoundParams {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: leaf(&self.final_gain),
            final_bias: leaf(&self.final_bias),
            unembedding: leaf(&self.unembedding),
            unembedding_bias: leaf(&self.unembedding_bias),
        }
    }

    /// One pre-norm block over `x: [n × D]` whose first row sits at absolute
    /// position `past_len`, attending to `past` keys/values when present.
    /// Returns the new residual and the full key/value matrices.
    fn block_graph(
        &self,
        g: &mut Graph,
        b: &BoundBlock,
        x: Var,
        past: Option<(Var, Var)>,
        past_len: usize,
    ) -> Result<(Var, Var, Var)> {
        let d = self.config.hidden_size;
        let dh = self.config.head_dim();
        let n = g.value(x).rows();
        let xn = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
        let q = g.matmul(xn, b.w_q)?;
        let k_new = g.matmul(xn, b.w_k)?;
        let v_new = g.matmul(xn, b.w_v)?;
        let (k, v) = match past {
            Some((pk, pv)) => (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?),
            None => (k_new, v_new),
        };
        let total = past_len + n;
        let mask = if n > 1 {
            let mut m = vec![0.0; n * total];
            for i in 0..n {
                for j in (past_len + i + 1)..total {
                    m[i * total + j] = MASKED;
                }
            }
            Some(g.constant(Tensor::matrix(n, total, m)))
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let raw = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(raw, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let att = g.softmax(scores, 1.0)?;
            heads.push(g.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let proj = g.matmul(cat, b.w_o)?;
        let proj = g.add_row_bias(proj, b.b_o)?;
        let x = g.add(x, proj)?;
        let xn2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
        let hid = g.matmul(xn2, b.w_fc)?;
        let hid = g.add_row_bias(hid, b.b_fc)?;
        let hid = g.gelu(hid)?;
        let out = g.matmul(hid, b.w_proj)?;
        let out = g.add_row_bias(out, b.b_proj)?;
        let x = g.add(x, out)?;
        debug_assert_eq!(g.value(x).cols(), d);
        Ok((x, k, v))
    }

    /// Full-sequence forward in `g`. When `patch = Some((ℓ, h))`, the last
    /// row of the layer-ℓ hidden state is replaced by `h` (a `[1 × D]` var).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        tokens: &[usize],
        patch: Option<(usize, Var)>,
    ) -> Result<SequenceForward> {
        self.check_tokens(tokens)?;
        if let Some((layer, h)) = patch {
            self.check_layer(layer)?;
            if g.value(h).len() != self.config.hidden_size {
                return Err(Error::Shape(format!(
                    "replacement of shape {:?}, expected {}",
                    g.value(h).shape(),
                    self.config.hidden_size
                )));
            }
        }
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather_rows(p.token_embedding, tokens)?;
        let pos = g.gather_rows(p.position_embedding, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut residuals = Vec::with_capacity(self.config.layers);
        let mut kv = Vec::with_capacity(self.config.layers);
        let n_layers = self.config.layers;
        for (i, b) in p.blocks.iter().enumerate() {
            let (nx, k, v) = self.block_graph(g, b, x, None, 0)?;
            x = nx;
            kv.push((k, v));
            if let Some((layer, h)) = patch {
                if layer == i + 1 && layer < n_layers {
                    x = replace_last_row(g, x, h)?;
                }
            }
            residuals.push(x);
        }
        let mut normalized = g.layer_norm(x, p.final_gain, p.final_bias, LN_EPS)?;
        if let Some((layer, h)) = patch {
            if layer == n_layers {
                normalized = replace_last_row(g, normalized, h)?;
            }
        }
        Ok(SequenceForward { normalized, residuals, kv })
    }

    /// Head applied to a `[n × D]` var: `[n × |V|]` logits.
    pub fn head_graph(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<Var> {
        let raw = g.matmul_nt(h, p.unembedding)?;
        g.add_row_bias(raw, p.unembedding_bias)
    }

    /// `W_U h + b` for a single hidden vector.
    pub fn head(&self, h: &Tensor) -> Result<Tensor> {
        if h.len() != self.config.hidden_size {
            return Err(Error::Shape(format!(
                "hidden of shape {:?}, expected {}",
                h.shape(),
                self.config.hidden_size
            )));
        }
        self.unembedding.matvec(&h.flatten())?.add(&self.unembedding_bias)
    }

    /// Hidden state at layer ℓ for the hidden rows of a forward.
    fn layer_var(&self, fwd: &SequenceForward, layer: usize) -> Var {
        if layer == self.config.layers {
            fwd.normalized
        } else {
            fwd.residuals[layer - 1]
        }
    }

    /// Next-token logits `W_U h_L + b` at the last position.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let (logits, _) = self.forward_capture(tokens, self.config.layers)?;
        Ok(logits)
    }

    /// Logits at every position, `[T × |V|]`.
    pub fn forward_all_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let fwd = self.forward_graph(&mut g, &p, tokens, None)?;
        let logits = self.head_graph(&mut g, &p, fwd.normalized)?;
        Ok(g.value(logits).clone())
    }

    /// Logits plus the last-position hidden state at `layer`.
    pub fn forward_capture(&self, tokens: &[usize], layer: usize) -> Result<(Tensor, HiddenState)> {
        self.check_layer(layer)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let fwd = self.forward_graph(&mut g, &p, tokens, None)?;
        let t = tokens.len();
        let last = g.slice_rows(fwd.normalized, t - 1, t)?;
        let logits = self.head_graph(&mut g, &p, last)?;
        let hv = self.layer_var(&fwd, layer);
        let hidden = g.value(hv).row(t - 1).to_vec();
        Ok((
            g.value(logits).flatten(),
            HiddenState { layer, position: t - 1, vector: Tensor::vector(hidden) },
        ))
    }

    /// Last-position hidden states at every layer `1..=L`, plus logits.
    pub fn forward_capture_all(&self, tokens: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let fwd = self.forward_graph(&mut g, &p, tokens, None)?;
        let t = tokens.len();
        let last = g.slice_rows(fwd.normalized, t - 1, t)?;
        let logits = self.head_graph(&mut g, &p, last)?;
        let states = (1..=self.config.layers)
            .map(|l| Tensor::vector(g.value(self.layer_var(&fwd, l)).row(t - 1).to_vec()))
            .collect();
        Ok((g.value(logits).flatten(), states))
    }

    /// Clean forward except that layers after ℓ see `replacement` as the
    /// layer-ℓ state at the final position.
    pub fn forward_patch(&self, tokens: &[usize], layer: usize, replacement: &Tensor) -> Result<Tensor> {
        if replacement.len() != self.config.hidden_size {
            return Err(Error::Shape(format!(
                "replacement of shape {:?}, expected {}",
                replacement.shape(),
                self.config.hidden_size
            )));
        }
        if !replacement.is_finite() {
            return Err(Error::Input("replacement contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = g.constant(replacement.reshape(&[1, self.config.hidden_size])?);
        let fwd = self.forward_graph(&mut g, &p, tokens, Some((layer, h)))?;
        let t = tokens.len();
        let last = g.slice_rows(fwd.normalized, t - 1, t)?;
        let logits = self.head_graph(&mut g, &p, last)?;
        Ok(g.value(logits).flatten())
    }

    /// Runs blocks `first_block..L` (0-based) for one new position whose
    /// residual input is `x: [1 × D]`, appending keys/values to `cache`.
    /// Returns the final normalized hidden `[1 × D]`.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        cache: &mut GraphCache,
        x: Var,
        first_block: usize,
    ) -> Result<Var> {
        let past_len = cache.len;
        let mut x = x;
        for (i, b) in p.blocks.iter().enumerate() {
            if i < first_block {
                continue;
            }
            let (nx, k, v) = self.block_graph(g, b, x, cache.layers[i], past_len)?;
            cache.layers[i] = Some((k, v));
            x = nx;
        }
        cache.len += 1;
        g.layer_norm(x, p.final_gain, p.final_bias, LN_EPS)
    }

    /// Final-position logits `[1 × |V|]` when the layer-ℓ state at that
    /// position is the var `h`. `prefix` must be the cache of every earlier
    /// position; only blocks after ℓ are evaluated.
    pub fn resume_logits_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prefix: &DecodeCache,
        layer: usize,
        h: Var,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let d = self.config.hidden_size;
        if g.value(h).len() != d {
            return Err(Error::Shape(format!("state of shape {:?}, expected {d}", g.value(h).shape())));
        }
        let h = g.reshape(h, &[1, d])?;
        let normalized = if layer == self.config.layers {
            h
        } else {
            let mut gc = GraphCache::from_cache(g, prefix, self.config.layers);
            self.step_graph(g, p, &mut gc, h, layer)?
        };
        self.head_graph(g, p, normalized)
    }

    /// Decoder one-step transition from an arbitrary input embedding,
    /// recorded in `g` so it can be differentiated.
    pub fn transition_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        cache: &mut GraphCache,
        input_embedding: Var,
    ) -> Result<Var> {
        if cache.len >= self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "decode cache holds {} positions, max_seq_len is {}",
                cache.len, self.config.max_seq_len
            )));
        }
        if g.value(input_embedding).len() != self.config.embed_size {
            return Err(Error::Shape(format!(
                "input embedding of shape {:?}, expected {}",
                g.value(input_embedding).shape(),
                self.config.embed_size
            )));
        }
        let e = g.reshape(input_embedding, &[1, self.config.embed_size])?;
        let pos = g.gather_rows(p.position_embedding, &[cache.len])?;
        let x = g.add(e, pos)?;
        self.step_graph(g, p, cache, x, 0)
    }

    /// Plain-tensor transition: returns `h_{t+1}` and the extended cache.
    pub fn transition_step(&self, cache: &DecodeCache, input_embedding: &Tensor) -> Result<(Tensor, DecodeCache)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut gc = GraphCache::from_cache(&mut g, cache, self.config.layers);
        let e = g.constant(input_embedding.clone());
        let h = self.transition_graph(&mut g, &p, &mut gc, e)?;
        Ok((g.value(h).flatten(), gc.to_cache(&g)))
    }

    /// Cache and last hidden after consuming `tokens`.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(DecodeCache, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let fwd = self.forward_graph(&mut g, &p, tokens, None)?;
        let t = tokens.len();
        let cache = DecodeCache::from_parts(
            fwd.kv.iter().map(|&(k, v)| (g.value(k).clone(), g.value(v).clone())).collect(),
            t,
        );
        Ok((cache, Tensor::vector(g.value(fwd.normalized).row(t - 1).to_vec())))
    }

    /// Row of `E` for a token.
    pub fn embedding_row(&self, token: usize) -> Result<Tensor> {
        if token >= self.config.vocab_size {
            return Err(Error::Input(format!("token id {token} out of range")));
        }
        Ok(Tensor::vector(self.token_embedding.row(token).to_vec()))
    }

    /// Greedy continuation; argmax ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        let mut out = prompt.to_vec();
        if max_new == 0 {
            return Ok(out);
        }
        let (mut cache, mut h) = self.prefill(prompt)?;
        for i in 0..max_new {
            let next = self.head(&h)?.argmax();
            out.push(next);
            if i + 1 == max_new {
                break;
            }
            let (nh, nc) = self.transition_step(&cache, &self.embedding_row(next)?)?;
            h = nh;
            cache = nc;
        }
        Ok(out)
    }
}

fn replace_last_row(g: &mut Graph, x: Var, h: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let d = g.value(x).cols();
    let h = g.reshape(h, &[1, d])?;
    if rows == 1 {
        return Ok(h);
    }
    let head = g.slice_rows(x, 0, rows - 1)?;
    g.concat_rows(&[head, h])
}

/// Graph handles for one block's parameters.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_proj: Var,
    pub b_proj: Var,
}

/// Graph handles for all model parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub unembedding: Var,
    pub unembedding_bias: Var,
}

impl BoundParams {
    /// Handles in the order of [`TinyTransformer::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.w_q, b.w_k, b.w_v, b.w_o, b.b_o, b.ln2_gain, b.ln2_bias,
                b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        out.extend([self.final_gain, self.final_bias, self.unembedding, self.unembedding_bias]);
        out
    }
}

/// Vars produced by [`TinyTransformer::forward_graph`].
#[derive(Debug, Clone)]
pub struct SequenceForward {
    /// Final normalized states `[T × D]` (the layer-L hidden rows).
    pub normalized: Var,
    /// Residual stream after each block.
    pub residuals: Vec<Var>,
    /// Per-layer keys and values `[T × D]`.
    pub kv: Vec<(Var, Var)>,
}

/// A [`DecodeCache`] living inside a graph; entries added by virtual steps
/// stay differentiable.
#[derive(Debug, Clone)]
pub struct GraphCache {
    pub layers: Vec<Option<(Var, Var)>>,
    pub len: usize,
}

impl GraphCache {
    pub fn from_cache(g: &mut Graph, cache: &DecodeCache, n_layers: usize) -> Self {
        let layers = if cache.is_empty() {
            vec![None; n_layers]
        } else {
            cache
                .layers()
                .iter()
                .map(|(k, v)| Some((g.constant(k.clone()), g.constant(v.clone()))))
                .collect()
        };
        Self { layers, len: cache.len() }
    }

    pub fn to_cache(&self, g: &Graph) -> DecodeCache {
        if self.len == 0 {
            return DecodeCache::empty();
        }
        DecodeCache::from_parts(
            self.layers
                .iter()
                .map(|kv| {
                    let (k, v) = kv.expect("non-empty cache has every layer");
                    (g.value(k).clone(), g.value(v).clone())
                })
                .collect(),
            self.len,
        )
    }
}
