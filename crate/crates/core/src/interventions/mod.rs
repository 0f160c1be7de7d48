// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hidden-state interventions: margin ascent, the target-only ablation and
//! the probe-driven baselines.

mod baselines;
mod records;

pub use baselines::{alterrep_apply, fgsm, inlp_fit, pgd, BallConstraint, InlpProjection, Norm};
pub use records::{parse_records, read_state, InterventionRecord, RecordWriter};

use crate::error::{Error, Result};
use crate::model::{DecodeCache, TinyTransformer};
use crate::tensor::{Graph, Tensor};

/// Token sets `T⁺` (targets) and `T⁻` (sources) of a margin objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarginObjective {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
}

impl MarginObjective {
    pub fn new(targets: Vec<usize>, sources: Vec<usize>) -> Result<Self> {
        let obj = Self { targets, sources };
        obj.validate(None)?;
        Ok(obj)
    }

    /// Single-token margin `φ_τ − φ_σ`.
    pub fn pair(target: usize, source: usize) -> Result<Self> {
        Self::new(vec![target], vec![source])
    }

    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        if self.targets.is_empty() || self.sources.is_empty() {
            return Err(Error::Objective("target and source sets must be nonempty".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| self.sources.contains(t)) {
            return Err(Error::Objective(format!("token {t} is both a target and a source")));
        }
        if let Some(v) = vocab_size {
            if let Some(t) = self.targets.iter().chain(&self.sources).find(|&&t| t >= v) {
                return Err(Error::Objective(format!("token {t} outside a vocabulary of {v}")));
            }
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self { targets: self.sources.clone(), sources: self.targets.clone() }
    }

    /// `(token, coefficient)` pairs: `+1` on targets, `−1` on sources.
    pub fn terms(&self) -> Vec<(usize, f64)> {
        self.targets
            .iter()
            .map(|&t| (t, 1.0))
            .chain(self.sources.iter().map(|&s| (s, -1.0)))
            .collect()
    }

    /// Targets only, the ablated objective.
    pub fn target_terms(&self) -> Vec<(usize, f64)> {
        self.targets.iter().map(|&t| (t, 1.0)).collect()
    }
}

fn linear_form(logits: &Tensor, terms: &[(usize, f64)]) -> Result<f64> {
    let v = logits.data();
    terms.iter().try_fold(0.0, |acc, &(i, c)| {
        v.get(i)
            .map(|x| acc + c * x)
            .ok_or_else(|| Error::Objective(format!("token {i} outside logits of length {}", v.len())))
    })
}

/// `Σ φ[τ_i] − Σ φ[σ_j]`.
pub fn margin_loss(logits: &Tensor, obj: &MarginObjective) -> Result<f64> {
    obj.validate(Some(logits.len()))?;
    linear_form(logits, &obj.terms())
}

/// `W_Uᵀ c` for a coefficient vector given as sparse terms.
fn head_direction(model: &TinyTransformer, terms: &[(usize, f64)]) -> Result<Tensor> {
    let mut c = Tensor::zeros(&[model.vocab_size()]);
    for &(i, w) in terms {
        if i >= model.vocab_size() {
            return Err(Error::Objective(format!("token {i} outside the vocabulary")));
        }
        c.data_mut()[i] += w;
    }
    model.unembedding.t_matvec(&c)
}

/// `W_Uᵀ(u⁺ − u⁻)`: the margin gradient at the last layer, which does not
/// depend on the input because the head is affine.
pub fn closed_form_final_gradient(model: &TinyTransformer, obj: &MarginObjective) -> Result<Tensor> {
    obj.validate(Some(model.vocab_size()))?;
    head_direction(model, &obj.terms())
}

/// Step size, step count and layer of an ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub step_size: f64,
    pub steps: usize,
    pub layer: usize,
}

impl AscentConfig {
    pub fn validate(&self, model: &TinyTransformer) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("ascent needs at least one step".into()));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step size {} must be finite and nonnegative", self.step_size)));
        }
        if self.layer == 0 || self.layer > model.layers() {
            return Err(Error::Config(format!("layer {} outside 1..={}", self.layer, model.layers())));
        }
        Ok(())
    }
}

/// Clean and intervened activations and logits of one ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentOutcome {
    pub original_state: Tensor,
    pub original_logits: Tensor,
    pub state: Tensor,
    pub logits: Tensor,
}

/// Gradient of `Σ c_i φ_i` with respect to the layer-ℓ state at the last
/// position, given the prefix cache of the earlier positions.
pub fn state_gradient(
    model: &TinyTransformer,
    prefix: &DecodeCache,
    layer: usize,
    state: &Tensor,
    terms: &[(usize, f64)],
) -> Result<(f64, Tensor)> {
    if layer == model.layers() {
        let value = linear_form(&model.head(state)?, terms)?;
        return Ok((value, head_direction(model, terms)?));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let h = g.input(state.clone());
    let logits = model.resume_logits_graph(&mut g, &p, prefix, layer, h)?;
    let root = g.select(logits, terms)?;
    let grad = g.grad(root, h)?;
    Ok((g.value(root).data()[0], grad.flatten()))
}

fn ascend(model: &TinyTransformer, tokens: &[usize], terms: &[(usize, f64)], cfg: &AscentConfig) -> Result<AscentOutcome> {
    cfg.validate(model)?;
    let (original_logits, captured) = model.forward_capture(tokens, cfg.layer)?;
    let prefix = if cfg.layer < model.layers() && tokens.len() > 1 {
        model.prefill(&tokens[..tokens.len() - 1])?.0
    } else {
        DecodeCache::empty()
    };
    let mut h = captured.vector.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = state_gradient(model, &prefix, cfg.layer, &h, terms)?;
        h.axpy(cfg.step_size, &grad)?;
    }
    let logits = model.forward_patch(tokens, cfg.layer, &h)?;
    Ok(AscentOutcome { original_state: captured.vector, original_logits, state: h, logits })
}

/// K steps of `h ← h + α ∇_h (Σ φ_τ − Σ φ_σ)` on the last-position layer-ℓ
/// state, then a patched forward.
pub fn hdmi_ascend(model: &TinyTransformer, tokens: &[usize], obj: &MarginObjective, cfg: &AscentConfig) -> Result<AscentOutcome> {
    obj.validate(Some(model.vocab_size()))?;
    ascend(model, tokens, &obj.terms(), cfg)
}

/// As [`hdmi_ascend`] but only the target logits are promoted.
pub fn target_only_ascend(
    model: &TinyTransformer,
    tokens: &[usize],
    obj: &MarginObjective,
    cfg: &AscentConfig,
) -> Result<AscentOutcome> {
    obj.validate(Some(model.vocab_size()))?;
    ascend(model, tokens, &obj.target_terms(), cfg)
}
