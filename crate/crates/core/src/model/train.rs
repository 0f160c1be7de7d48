// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token cross-entropy training with AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TinyTransformer;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Adam with decoupled weight decay over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(shapes: &[usize], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Language-model training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 1e-3, weight_decay: 1e-6, batch_size: 16, seed: 0 }
    }
}

/// Mean loss of every optimizer step, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.loss_trace.len()).max(1);
        self.loss_trace.iter().rev().take(k).sum::<f64>() / k as f64
    }
}

fn sequence_gradients(model: &TinyTransformer, seq: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let fwd = model.forward_graph(&mut g, &p, inputs, None)?;
    let logits = model.head_graph(&mut g, &p, fwd.normalized)?;
    let loss = g.cross_entropy(logits, targets)?;
    let mut grads = g.backward(loss)?;
    let tensors = p
        .vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|_| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((g.value(loss).data()[0], tensors))
}

/// Trains `model` in place on tokenized sequences (each at least 2 tokens).
///
/// Sequences in a minibatch are differentiated in parallel and their
/// gradients summed in batch order, so results do not depend on thread count.
pub fn train_lm(model: &mut TinyTransformer, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.lr < 0.0 {
        return Err(Error::Config(format!("bad training config {cfg:?}")));
    }
    if let Some(bad) = corpus.iter().find(|s| s.len() < 2 || s.len() > model.config.max_seq_len + 1) {
        return Err(Error::Input(format!(
            "training sequence of length {} (need 2..={})",
            bad.len(),
            model.config.max_seq_len + 1
        )));
    }
    let sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &TinyTransformer = model;
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| sequence_gradients(frozen, &corpus[i]))
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let mut total_loss = 0.0;
            let mut sum: Vec<Tensor> = Vec::new();
            for (loss, grads) in results {
                total_loss += loss;
                if sum.is_empty() {
                    sum = grads;
                } else {
                    for (s, g) in sum.iter_mut().zip(&grads) {
                        s.axpy(1.0, g)?;
                    }
                }
            }
            for s in &mut sum {
                *s = s.scale(1.0 / n);
            }
            let mut params = model.parameters_mut();
            opt.step(&mut params, &sum);
            loss_trace.push(total_loss / n);
        }
    }
    Ok(TrainReport { loss_trace })
}
