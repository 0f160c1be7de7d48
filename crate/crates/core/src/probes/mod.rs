// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear and one-hidden-layer MLP classifiers over hidden states.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::AdamW;
use crate::tensor::{ops, Tensor};

/// Provenance tag of probes fit on the interventional split.
pub const INTERVENTIONAL: &str = "interventional";
/// Provenance tag of validation probes.
pub const VALIDATION_PROBE: &str = "validation_probe";
/// Tag of the held-out test split; no probe may be trained on it.
pub const TEST_SPLIT: &str = "test";
/// Hidden widths searched when an MLP width is not fixed.
pub const MLP_WIDTHS: [usize; 3] = [64, 256, 512];
/// Minimum holdout accuracy before a probe may drive an intervention.
pub const ACCURACY_GATE: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "mlp" => Ok(ProbeKind::Mlp),
            _ => Err(Error::Config(format!("unknown probe kind `{s}`"))),
        }
    }
}

/// Probe training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the data held out to report accuracy.
    pub holdout_fraction: f64,
    /// MLP width; `None` selects from [`MLP_WIDTHS`] by holdout accuracy.
    pub hidden: Option<usize>,
}

impl Default for ProbeHparams {
    fn default() -> Self {
        Self { lr: 1e-2, weight_decay: 1e-6, batch_size: 256, epochs: 100, holdout_fraction: 0.2, hidden: None }
    }
}

/// A trained classifier. Linear: `logits = W x + b` with `W: [K × D]`.
/// MLP: `logits = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Option<Tensor>,
    pub b2: Option<Tensor>,
    pub trained_on: String,
    pub holdout_accuracy: f64,
}

impl ProbeModel {
    /// Linear probe from explicit weights.
    pub fn linear(weights: Tensor, bias: Tensor, trained_on: &str) -> Result<Self> {
        if weights.shape().len() != 2 || bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "linear probe weights {:?} with bias {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            kind: ProbeKind::Linear,
            input_dim: weights.cols(),
            num_classes: weights.rows(),
            w1: weights,
            b1: bias.flatten(),
            w2: None,
            b2: None,
            trained_on: trained_on.to_string(),
            holdout_accuracy: f64::NAN,
        })
    }

    pub fn hidden_width(&self) -> Option<usize> {
        match self.kind {
            ProbeKind::Linear => None,
            ProbeKind::Mlp => Some(self.w1.rows()),
        }
    }

    fn check(&self, state: &Tensor) -> Result<()> {
        if state.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "probe expects a state of length {}, got {:?}",
                self.input_dim,
                state.shape()
            )));
        }
        Ok(())
    }

    /// Returns (hidden pre-activation, logits).
    fn forward(&self, x: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        self.check(x)?;
        let x = x.flatten();
        let first = self.w1.matvec(&x)?.add(&self.b1)?;
        match (&self.w2, &self.b2) {
            (Some(w2), Some(b2)) => {
                let logits = w2.matvec(&ops::relu(&first))?.add(b2)?;
                Ok((Some(first), logits))
            }
            _ => Ok((None, first)),
        }
    }

    pub fn logits(&self, state: &Tensor) -> Result<Tensor> {
        Ok(self.forward(state)?.1)
    }

    /// Class distribution `softmax(probe(state))`.
    pub fn predict(&self, state: &Tensor) -> Result<Tensor> {
        ops::softmax(&self.logits(state)?, 1.0)
    }

    pub fn predict_class(&self, state: &Tensor) -> Result<usize> {
        Ok(self.logits(state)?.argmax())
    }

    /// `∂ log p_target / ∂ state`.
    pub fn gradient(&self, state: &Tensor, target: usize) -> Result<Tensor> {
        if target >= self.num_classes {
            return Err(Error::Input(format!("class {target} out of range for {} classes", self.num_classes)));
        }
        let (pre, logits) = self.forward(state)?;
        let p = ops::softmax(&logits, 1.0)?;
        let mut g = p.scale(-1.0);
        g.data_mut()[target] += 1.0;
        match (pre, &self.w2) {
            (Some(pre), Some(w2)) => {
                let gh = w2.t_matvec(&g)?;
                let gpre = ops::relu_vjp(&pre, &gh)?;
                self.w1.t_matvec(&gpre)
            }
            _ => self.w1.t_matvec(&g),
        }
    }

    pub fn accuracy(&self, states: &[Tensor], labels: &[usize]) -> Result<f64> {
        if states.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0;
        for (s, &y) in states.iter().zip(labels) {
            if self.predict_class(s)? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / states.len() as f64)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w1, &mut self.b1];
        if let (Some(w2), Some(b2)) = (&mut self.w2, &mut self.b2) {
            v.push(w2);
            v.push(b2);
        }
        v
    }

    /// Mean cross-entropy gradients over a batch, parameter order as
    /// `params_mut`.
    fn batch_gradients(&self, states: &[&Tensor], labels: &[usize]) -> Result<Vec<Tensor>> {
        let mut gw1 = Tensor::zeros(self.w1.shape());
        let mut gb1 = Tensor::zeros(self.b1.shape());
        let mut gw2 = self.w2.as_ref().map(|w| Tensor::zeros(w.shape()));
        let mut gb2 = self.b2.as_ref().map(|b| Tensor::zeros(b.shape()));
        let scale = 1.0 / states.len() as f64;
        for (x, &y) in states.iter().zip(labels) {
            let (pre, logits) = self.forward(x)?;
            let mut g = ops::softmax(&logits, 1.0)?;
            g.data_mut()[y] -= 1.0;
            let g = g.scale(scale);
            let (gin, input) = match (&pre, &self.w2, &mut gw2, &mut gb2) {
                (Some(pre), Some(w2), Some(gw2), Some(gb2)) => {
                    let act = ops::relu(pre);
                    outer_add(gw2, &g, &act);
                    gb2.axpy(1.0, &g)?;
                    (ops::relu_vjp(pre, &w2.t_matvec(&g)?)?, x.flatten())
                }
                _ => (g, x.flatten()),
            };
            outer_add(&mut gw1, &gin, &input);
            gb1.axpy(1.0, &gin)?;
        }
        let mut out = vec![gw1, gb1];
        if let (Some(a), Some(b)) = (gw2, gb2) {
            out.push(a);
            out.push(b);
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("format", "probe");
        c.set("kind", self.kind.name());
        c.set("input_dim", self.input_dim);
        c.set("num_classes", self.num_classes);
        c.set("hidden", self.hidden_width().unwrap_or(0));
        c.set("trained_on", &self.trained_on);
        c.set("holdout_accuracy", self.holdout_accuracy);
        c.push("w1", &self.w1);
        c.push("b1", &self.b1);
        if let (Some(w2), Some(b2)) = (&self.w2, &self.b2) {
            c.push("w2", w2);
            c.push("b2", b2);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("format")? != "probe" {
            return Err(Error::Format("not a probe checkpoint".into()));
        }
        let kind = ProbeKind::parse(c.get("kind")?).map_err(|e| Error::Format(e.to_string()))?;
        let d = c.get_usize("input_dim")?;
        let k = c.get_usize("num_classes")?;
        let h = c.get_usize("hidden")?;
        let holdout_accuracy = c
            .get("holdout_accuracy")?
            .parse()
            .map_err(|e| Error::Format(format!("holdout_accuracy: {e}")))?;
        let (w1, b1, w2, b2) = match kind {
            ProbeKind::Linear => (c.take_tensor(0, &[k, d])?, c.take_tensor(1, &[k])?, None, None),
            ProbeKind::Mlp => (
                c.take_tensor(0, &[h, d])?,
                c.take_tensor(1, &[h])?,
                Some(c.take_tensor(2, &[k, h])?),
                Some(c.take_tensor(3, &[k])?),
            ),
        };
        Ok(Self {
            kind,
            input_dim: d,
            num_classes: k,
            w1,
            b1,
            w2,
            b2,
            trained_on: c.get("trained_on")?.to_string(),
            holdout_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn outer_add(acc: &mut Tensor, a: &Tensor, b: &Tensor) {
    let cols = b.len();
    let data = acc.data_mut();
    for (i, &ai) in a.data().iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.data().iter().enumerate() {
            data[i * cols + j] += ai * bj;
        }
    }
}

fn init(kind: ProbeKind, d: usize, k: usize, hidden: usize, rng: &mut ChaCha8Rng, tag: &str) -> ProbeModel {
    let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
    };
    let (w1, b1, w2, b2) = match kind {
        ProbeKind::Linear => (Tensor::zeros(&[k, d]), Tensor::zeros(&[k]), None, None),
        ProbeKind::Mlp => (
            normal(rng, hidden, d, (2.0 / d as f64).sqrt()),
            Tensor::zeros(&[hidden]),
            Some(normal(rng, k, hidden, (1.0 / hidden as f64).sqrt())),
            Some(Tensor::zeros(&[k])),
        ),
    };
    ProbeModel {
        kind,
        input_dim: d,
        num_classes: k,
        w1,
        b1,
        w2,
        b2,
        trained_on: tag.to_string(),
        holdout_accuracy: f64::NAN,
    }
}

fn validate_data(states: &[Tensor], labels: &[usize], num_classes: usize) -> Result<usize> {
    if states.len() != labels.len() {
        return Err(Error::Shape(format!("{} states but {} labels", states.len(), labels.len())));
    }
    let Some(first) = states.first() else {
        return Err(Error::Input("no probe training data".into()));
    };
    let d = first.len();
    if let Some(s) = states.iter().find(|s| s.len() != d) {
        return Err(Error::Shape(format!("state of shape {:?} among length-{d} states", s.shape())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Input(format!("label {y} out of range for {num_classes} classes")));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::DegenerateLabels(format!("probe labels contain {} class(es)", present.len())));
    }
    Ok(d)
}

fn fit(
    mut probe: ProbeModel,
    states: &[Tensor],
    labels: &[usize],
    train_idx: &[usize],
    hp: &ProbeHparams,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeModel> {
    let sizes: Vec<usize> = probe.params_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, hp.lr, hp.weight_decay);
    let mut order = train_idx.to_vec();
    for _ in 0..hp.epochs {
        order.shuffle(rng);
        for batch in order.chunks(hp.batch_size.max(1)) {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &states[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = probe.batch_gradients(&xs, &ys)?;
            opt.step(&mut probe.params_mut(), &grads);
        }
    }
    Ok(probe)
}

/// Trains a probe with cross-entropy and AdamW, holding out
/// `hp.holdout_fraction` of the data (seeded) to report accuracy.
pub fn train_probe(
    states: &[Tensor],
    labels: &[usize],
    num_classes: usize,
    kind: ProbeKind,
    hp: &ProbeHparams,
    seed: u64,
    trained_on: &str,
) -> Result<ProbeModel> {
    if trained_on == TEST_SPLIT {
        return Err(Error::Leakage("probes are never trained on test-split states".into()));
    }
    let d = validate_data(states, labels, num_classes)?;
    if !(hp.holdout_fraction > 0.0 && hp.holdout_fraction < 1.0) || hp.lr < 0.0 {
        return Err(Error::Config(format!("bad probe hyperparameters {hp:?}")));
    }
    let n = states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if n < 2 {
        return Err(Error::Input("need at least 2 examples to hold one out".into()));
    }
    let n_hold = ((n as f64 * hp.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (hold, train) = order.split_at(n_hold);
    let hold_x: Vec<Tensor> = hold.iter().map(|&i| states[i].clone()).collect();
    let hold_y: Vec<usize> = hold.iter().map(|&i| labels[i]).collect();
    let widths: Vec<usize> = match (kind, hp.hidden) {
        (ProbeKind::Linear, _) => vec![0],
        (ProbeKind::Mlp, Some(h)) => vec![h],
        (ProbeKind::Mlp, None) => MLP_WIDTHS.to_vec(),
    };
    let mut best: Option<ProbeModel> = None;
    for h in widths {
        let mut wrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(h as u64));
        let probe = init(kind, d, num_classes, h, &mut wrng, trained_on);
        let mut probe = fit(probe, states, labels, train, hp, &mut wrng)?;
        probe.holdout_accuracy = probe.accuracy(&hold_x, &hold_y)?;
        if best.as_ref().map_or(true, |b| probe.holdout_accuracy > b.holdout_accuracy) {
            best = Some(probe);
        }
    }
    Ok(best.expect("at least one width"))
}

/// Outcome of [`train_probe_gated`].
#[derive(Debug, Clone)]
pub struct GatedProbe {
    pub probe: ProbeModel,
    /// Whether the 90/10 retry was needed.
    pub retried: bool,
}

/// Trains a probe and enforces [`ACCURACY_GATE`]; on failure retries once
/// with a 10% holdout before giving up.
pub fn train_probe_gated(
    states: &[Tensor],
    labels: &[usize],
    num_classes: usize,
    kind: ProbeKind,
    hp: &ProbeHparams,
    seed: u64,
    trained_on: &str,
) -> Result<GatedProbe> {
    let probe = train_probe(states, labels, num_classes, kind, hp, seed, trained_on)?;
    if probe.holdout_accuracy >= ACCURACY_GATE {
        return Ok(GatedProbe { probe, retried: false });
    }
    let first = probe.holdout_accuracy;
    let retry_hp = ProbeHparams { holdout_fraction: 0.1, ..hp.clone() };
    let probe = train_probe(states, labels, num_classes, kind, &retry_hp, seed, trained_on)?;
    if probe.holdout_accuracy >= ACCURACY_GATE {
        return Ok(GatedProbe { probe, retried: true });
    }
    Err(Error::ProbeGate(format!(
        "{trained_on} probe holdout accuracy {first:.3} (80/20) and {:.3} (90/10), gate is {ACCURACY_GATE}",
        probe.holdout_accuracy
    )))
}
