// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lookahead editing: at every decoding step the last-layer state is pushed
//! up a margin objective summed over upcoming edit positions. Future steps
//! are reached through the expected embedding `Eᵀ softmax(φ/β_g)` and the
//! one-step transition, so the gradient sees edits that have not been
//! generated yet. The committed forward path uses a sharp temperature β_f.

use crate::error::{Error, Result};
use crate::model::{DecodeCache, GraphCache, TinyTransformer};
use crate::tensor::{ops, Graph, Tensor, Var};

/// Original and edited continuation of a teacher-forced prefix.
///
/// The prefix (normally starting with BOS) is consumed as is; generation
/// then produces one token per continuation position. Only same-length
/// single-token substitutions are edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSpec {
    pub prefix: Vec<usize>,
    pub input: Vec<usize>,
    pub edited: Vec<usize>,
}

impl EditSpec {
    pub fn new(prefix: Vec<usize>, input: Vec<usize>, edited: Vec<usize>) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::Input("edit prefix must hold at least one token".into()));
        }
        if input.is_empty() || edited.is_empty() {
            return Err(Error::Input("input and edited continuations must be nonempty".into()));
        }
        Ok(Self { prefix, input, edited })
    }

    /// Number of generated positions, `min(T_in, T_ed)`.
    pub fn len(&self) -> usize {
        self.input.len().min(self.edited.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(a_j, b_j)` when continuation position `j` (0-based) is edited.
    pub fn edit_at(&self, j: usize) -> Option<(usize, usize)> {
        if j >= self.len() || self.input[j] == self.edited[j] {
            return None;
        }
        Some((self.input[j], self.edited[j]))
    }

    /// Edited positions `M`.
    pub fn edit_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.edit_at(j).is_some()).collect()
    }

    fn check(&self, model: &TinyTransformer) -> Result<()> {
        let v = model.vocab_size();
        if let Some(t) = self.prefix.iter().chain(&self.input).chain(&self.edited).find(|&&t| t >= v) {
            return Err(Error::Input(format!("token id {t} out of range for vocabulary {v}")));
        }
        Ok(())
    }
}

/// Step size, temperatures and horizon of the editor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditConfig {
    /// `S_max`, how many future positions contribute.
    pub horizon: usize,
    pub beta_f: f64,
    pub beta_g: f64,
    pub lambda_fact: f64,
    pub step_size: f64,
    pub steps: usize,
}

impl Default for EditConfig {
    /// Picked by a small grid on the desk-scale model.
    fn default() -> Self {
        Self { horizon: 4, beta_f: 0.05, beta_g: 1.0, lambda_fact: 0.5, step_size: 0.5, steps: 10 }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("lookahead horizon must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one inner ascent step is needed".into()));
        }
        if !(self.beta_f > 0.0 && self.beta_f < self.beta_g) || !self.beta_g.is_finite() {
            return Err(Error::Config(format!(
                "temperatures must satisfy 0 < beta_f < beta_g, got {} and {}",
                self.beta_f, self.beta_g
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_fact) {
            return Err(Error::Config(format!("lambda_fact {} outside [0, 1]", self.lambda_fact)));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step size {} must be finite and nonnegative", self.step_size)));
        }
        Ok(())
    }
}

/// Committed decoding state before predicting continuation position `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadState {
    pub cache: DecodeCache,
    /// Last-layer state of the last consumed position.
    pub hidden: Tensor,
    /// Embedding fed at the last consumed position.
    pub expected_embedding: Tensor,
    pub step: usize,
}

impl LookaheadState {
    /// State after consuming the prefix.
    pub fn start(model: &TinyTransformer, spec: &EditSpec) -> Result<Self> {
        spec.check(model)?;
        let (cache, hidden) = model.prefill(&spec.prefix)?;
        let last = *spec.prefix.last().expect("prefix checked nonempty");
        Ok(Self { cache, hidden, expected_embedding: model.embedding_row(last)?, step: 0 })
    }
}

/// Objective value and its gradient with respect to the last-layer state,
/// evaluated at `hidden` instead of `state.hidden`.
pub fn lookahead_objective_at(
    model: &TinyTransformer,
    state: &LookaheadState,
    hidden: &Tensor,
    spec: &EditSpec,
    cfg: &EditConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let t = state.step;
    if t >= spec.len() {
        return Err(Error::Input(format!("step {t} past the {} editable positions", spec.len())));
    }
    let d = model.hidden_size();
    if hidden.len() != d {
        return Err(Error::Shape(format!("state of shape {:?}, expected {d}", hidden.shape())));
    }
    // Unroll only as far as the last edit inside the horizon.
    let reach = (1..=cfg.horizon).filter(|s| spec.edit_at(t + s - 1).is_some()).max().unwrap_or(1);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let h = g.input(hidden.reshape(&[1, d])?);
    let mut phi = model.head_graph(&mut g, &p, h)?;
    let mut cache = (reach > 1).then(|| GraphCache::from_cache(&mut g, &state.cache, model.layers()));
    let mut root: Option<Var> = None;
    for s in 1..=reach {
        if s > 1 {
            let y = g.softmax(phi, cfg.beta_g)?;
            let m = g.matmul(y, p.token_embedding)?;
            let next = model.transition_graph(&mut g, &p, cache.as_mut().expect("cache built when reach > 1"), m)?;
            phi = model.head_graph(&mut g, &p, next)?;
        }
        let mut terms = Vec::new();
        if let Some((a, b)) = spec.edit_at(t + s - 1) {
            terms.extend([(b, 1.0), (a, -1.0)]);
        }
        if s == 1 && cfg.lambda_fact > 0.0 {
            terms.push((spec.input[t], cfg.lambda_fact));
        }
        if terms.is_empty() {
            continue;
        }
        let term = g.select(phi, &terms)?;
        root = Some(match root {
            Some(r) => g.add(r, term)?,
            None => term,
        });
    }
    match root {
        Some(r) => Ok((g.value(r).data()[0], g.grad(r, h)?.flatten())),
        None => Ok((0.0, Tensor::zeros(&[d]))),
    }
}

/// Objective at the committed state.
pub fn lookahead_objective(
    model: &TinyTransformer,
    state: &LookaheadState,
    spec: &EditSpec,
    cfg: &EditConfig,
) -> Result<(f64, Tensor)> {
    lookahead_objective_at(model, state, &state.hidden, spec, cfg)
}

/// What happened at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Norm of the first inner-step gradient.
    pub gradient_norm: f64,
    pub display_token: usize,
    /// Three most probable tokens under the sharp forward distribution.
    pub top3: Vec<(usize, f64)>,
    /// `φ_b − φ_a` after ascent when this position is edited.
    pub edit_margin: Option<f64>,
}

fn step_inner(
    model: &TinyTransformer,
    state: &LookaheadState,
    spec: &EditSpec,
    cfg: &EditConfig,
    advance: bool,
) -> Result<(StepDiagnostics, Option<LookaheadState>)> {
    let (before, first_grad) = lookahead_objective(model, state, spec, cfg)?;
    let mut h = state.hidden.clone();
    let mut grad = first_grad.clone();
    for k in 0..cfg.steps {
        if k > 0 {
            grad = lookahead_objective_at(model, state, &h, spec, cfg)?.1;
        }
        h.axpy(cfg.step_size, &grad)?;
    }
    let (after, _) = lookahead_objective_at(model, state, &h, spec, cfg)?;
    let logits = model.head(&h)?;
    let y = ops::softmax(&logits, cfg.beta_f)?;
    let display_token = y.argmax();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&i, &j| y.data()[j].total_cmp(&y.data()[i]).then(i.cmp(&j)));
    let top3 = order.iter().take(3).map(|&i| (i, y.data()[i])).collect();
    let edit_margin = spec.edit_at(state.step).map(|(a, b)| logits.data()[b] - logits.data()[a]);
    let diag = StepDiagnostics {
        step: state.step,
        objective_before: before,
        objective_after: after,
        gradient_norm: first_grad.norm_l2(),
        display_token,
        top3,
        edit_margin,
    };
    let next = if advance {
        let m = model.token_embedding.t_matvec(&y)?;
        let (hidden, cache) = model.transition_step(&state.cache, &m)?;
        Some(LookaheadState { cache, hidden, expected_embedding: m, step: state.step + 1 })
    } else {
        None
    };
    Ok((diag, next))
}

/// K ascent steps on the current state, then one committed step with the
/// sharp expected embedding. Returns the display token and the next state.
pub fn la_hdmi_step(
    model: &TinyTransformer,
    state: &LookaheadState,
    spec: &EditSpec,
    cfg: &EditConfig,
) -> Result<(usize, LookaheadState, StepDiagnostics)> {
    let (diag, next) = step_inner(model, state, spec, cfg, true)?;
    Ok((diag.display_token, next.expect("advance requested"), diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    /// Display tokens of the continuation, one per position.
    pub tokens: Vec<usize>,
    pub steps: Vec<StepDiagnostics>,
}

/// Regenerates the continuation position by position. The last position
/// is not fed back, so the cache never holds more than
/// `prefix + len − 1` positions.
pub fn la_hdmi_generate(model: &TinyTransformer, spec: &EditSpec, cfg: &EditConfig) -> Result<EditOutput> {
    cfg.validate()?;
    let mut state = LookaheadState::start(model, spec)?;
    let n = spec.len();
    let mut out = EditOutput { tokens: Vec::with_capacity(n), steps: Vec::with_capacity(n) };
    for t in 0..n {
        let (diag, next) = step_inner(model, &state, spec, cfg, t + 1 < n)?;
        out.tokens.push(diag.display_token);
        out.steps.push(diag);
        if let Some(next) = next {
            state = next;
        }
    }
    Ok(out)
}
