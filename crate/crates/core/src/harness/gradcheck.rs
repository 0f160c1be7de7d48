// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient fidelity checks against finite differences on random cases.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::interventions::{closed_form_final_gradient, margin_loss, state_gradient, MarginObjective};
use crate::lookahead::{la_hdmi_step, lookahead_objective, lookahead_objective_at, EditConfig, EditSpec, LookaheadState};
use crate::model::{DecodeCache, TinyTransformer};
use crate::tasks::vocab::BOS;
use crate::tensor::gradcheck::{central_difference, relative_error};
use crate::tensor::Graph;

pub const CLOSED_FORM_TOLERANCE: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    /// Max-abs difference of the closed form and the backward pass at ℓ = L.
    pub closed_form_max_abs: f64,
    /// Worst relative error of the backward pass at ℓ < L.
    pub earlier_layer_max_rel: f64,
    /// Worst relative error of the lookahead gradient.
    pub lookahead_max_rel: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.closed_form_max_abs < CLOSED_FORM_TOLERANCE
            && self.earlier_layer_max_rel < FD_TOLERANCE
            && self.lookahead_max_rel < FD_TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut s = String::from("check\tworst\ttolerance\tstatus\n");
        for (name, v, tol) in [
            ("closed_form_vs_backward", self.closed_form_max_abs, CLOSED_FORM_TOLERANCE),
            ("earlier_layer_vs_fd", self.earlier_layer_max_rel, FD_TOLERANCE),
            ("lookahead_vs_fd", self.lookahead_max_rel, FD_TOLERANCE),
        ] {
            let status = if v < tol { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{name}\t{v:.3e}\t{tol:.0e}\t{status}");
        }
        let _ = writeln!(s, "cases\t{}", self.cases);
        s
    }
}

fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    let mut v = vec![BOS];
    v.extend((1..len).map(|_| rng.gen_range(4..vocab)));
    v
}

/// Two distinct non-special tokens.
fn random_pair(rng: &mut impl Rng, vocab: usize) -> (usize, usize) {
    let a = rng.gen_range(4..vocab);
    let b = 4 + (a - 4 + rng.gen_range(1..vocab - 4)) % (vocab - 4);
    (a, b)
}

/// Runs `cases` random checks of each kind. Token ids start at 4 so the
/// special tokens are never targets.
pub fn gradient_fidelity(model: &TinyTransformer, cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.vocab_size();
    let n_layers = model.layers();
    let max_len = model.config.max_seq_len.min(12);
    let mut report = GradcheckReport { cases, closed_form_max_abs: 0.0, earlier_layer_max_rel: 0.0, lookahead_max_rel: 0.0 };
    for _ in 0..cases {
        let (t, s) = random_pair(&mut rng, v);
        let obj = MarginObjective::pair(t, s)?;
        let len = rng.gen_range(1..=max_len);
        let tokens = random_tokens(&mut rng, v, len);
        let (_, captured) = model.forward_capture(&tokens, n_layers)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let h = g.input(captured.vector.clone());
        let logits = model.resume_logits_graph(&mut g, &p, &DecodeCache::empty(), n_layers, h)?;
        let root = g.select(logits, &obj.terms())?;
        let vjp = g.grad(root, h)?.flatten();
        let closed = closed_form_final_gradient(model, &obj)?;
        report.closed_form_max_abs = report.closed_form_max_abs.max(closed.max_abs_diff(&vjp));

        if n_layers > 1 {
            let layer = rng.gen_range(1..n_layers);
            let (_, hl) = model.forward_capture(&tokens, layer)?;
            let prefix =
                if tokens.len() > 1 { model.prefill(&tokens[..tokens.len() - 1])?.0 } else { DecodeCache::empty() };
            let (_, grad) = state_gradient(model, &prefix, layer, &hl.vector, &obj.terms())?;
            let fd = central_difference(|x| margin_loss(&model.forward_patch(&tokens, layer, x)?, &obj), &hl.vector)?;
            report.earlier_layer_max_rel = report.earlier_layer_max_rel.max(relative_error(&grad, &fd));
        }

        let n = rng.gen_range(2..=5);
        let input: Vec<usize> = (0..n).map(|_| rng.gen_range(4..v)).collect();
        let mut edited = input.clone();
        while edited == input {
            for (j, e) in edited.iter_mut().enumerate() {
                if rng.gen_bool(0.4) {
                    *e = 4 + (input[j] - 4 + rng.gen_range(1..v - 4)) % (v - 4);
                }
            }
        }
        let len = rng.gen_range(1..=4);
        let prefix = random_tokens(&mut rng, v, len);
        let spec = EditSpec::new(prefix, input, edited)?;
        let cfg = EditConfig { horizon: rng.gen_range(1..=4), lambda_fact: rng.gen_range(0.0..=1.0), ..Default::default() };
        let mut state = LookaheadState::start(model, &spec)?;
        let advance = rng.gen_range(0..n - 1);
        for _ in 0..advance {
            state = la_hdmi_step(model, &state, &spec, &cfg)?.1;
        }
        let (_, grad) = lookahead_objective(model, &state, &spec, &cfg)?;
        let fd = central_difference(|x| Ok(lookahead_objective_at(model, &state, x, &spec, &cfg)?.0), &state.hidden)?;
        if grad.norm_l2() > 0.0 || fd.norm_l2() > 0.0 {
            report.lookahead_max_rel = report.lookahead_max_rel.max(relative_error(&grad, &fd));
        }
    }
    Ok(report)
}
