// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe-driven baselines: FGSM, PGD, iterative nullspace projection and
//! AlterRep.

use crate::error::{Error, Result};
use crate::probes::{train_probe, ProbeHparams, ProbeKind, ProbeModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    LInf,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linf" | "l_inf" | "inf" => Ok(Norm::LInf),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::Config(format!("unknown norm `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::LInf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub fn of(self, v: &Tensor) -> f64 {
        match self {
            Norm::LInf => v.norm_linf(),
            Norm::L2 => v.norm_l2(),
        }
    }
}

/// `‖x − x₀‖ ≤ ε` in the chosen norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallConstraint {
    pub norm: Norm,
    pub radius: f64,
}

impl BallConstraint {
    pub fn new(norm: Norm, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!("ball radius {radius} must be positive")));
        }
        Ok(Self { norm, radius })
    }

    /// Projection of `x` onto the ball around `center`.
    pub fn project(&self, center: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut diff = x.sub(center)?;
        match self.norm {
            Norm::LInf => {
                for v in diff.data_mut() {
                    *v = v.clamp(-self.radius, self.radius);
                }
            }
            Norm::L2 => {
                let n = diff.norm_l2();
                if n > self.radius {
                    diff = diff.scale(self.radius / n);
                }
            }
        }
        center.add(&diff)
    }
}

/// Steepest-ascent step of length `step` in the given norm; `sign(0) = +1`.
/// A zero gradient under `l2` gives a zero step.
fn norm_step(g: &Tensor, norm: Norm, step: f64) -> Tensor {
    match norm {
        Norm::LInf => g.map(|v| if v >= 0.0 { step } else { -step }),
        Norm::L2 => {
            let n = g.norm_l2();
            if n == 0.0 {
                Tensor::zeros(g.shape())
            } else {
                g.scale(step / n)
            }
        }
    }
}

/// One signed or normalized step of size ε toward `class`.
pub fn fgsm(state: &Tensor, probe: &ProbeModel, class: usize, ball: &BallConstraint) -> Result<Tensor> {
    let g = probe.gradient(state, class)?;
    state.add(&norm_step(&g, ball.norm, ball.radius))
}

/// Iterated steps toward `class`, projected onto the ε-ball around `state`
/// after each step.
pub fn pgd(
    state: &Tensor,
    probe: &ProbeModel,
    class: usize,
    ball: &BallConstraint,
    steps: usize,
    step_size: f64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("pgd needs at least one step".into()));
    }
    if !(step_size > 0.0) {
        return Err(Error::Config(format!("pgd step size {step_size} must be positive")));
    }
    let mut x = state.clone();
    for _ in 0..steps {
        let g = probe.gradient(&x, class)?;
        x = ball.project(state, &x.add(&norm_step(&g, ball.norm, step_size))?)?;
    }
    Ok(x)
}

/// Orthonormal rowspace basis found by INLP and the nullspace projector.
#[derive(Debug, Clone, PartialEq)]
pub struct InlpProjection {
    /// Orthonormal rows `w_i`, each pointing toward class 1.
    pub basis: Vec<Vec<f64>>,
    /// `P = I − WᵀW`.
    pub projection: Tensor,
    pub rank: usize,
}

impl InlpProjection {
    pub fn project(&self, state: &Tensor) -> Result<Tensor> {
        self.projection.matvec(&state.flatten())
    }
}

fn projector(basis: &[Vec<f64>], d: usize) -> Tensor {
    let mut p = Tensor::eye(d);
    let data = p.data_mut();
    for w in basis {
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] -= w[i] * w[j];
            }
        }
    }
    p
}

/// Iterative nullspace projection for binary labels: repeatedly fit a
/// linear classifier on projected states and remove its direction.
/// Stops early if a classifier direction vanishes.
pub fn inlp_fit(states: &[Tensor], labels: &[usize], rank: usize, seed: u64, hp: &ProbeHparams) -> Result<InlpProjection> {
    let d = states.first().map(|s| s.len()).ok_or_else(|| Error::Input("no states for INLP".into()))?;
    if rank >= d {
        return Err(Error::Config(format!("INLP rank {rank} must be below the state dimension {d}")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Input("INLP expects binary labels".into()));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    let mut p = Tensor::eye(d);
    for r in 0..rank {
        let projected: Vec<Tensor> = states.iter().map(|s| p.matvec(&s.flatten())).collect::<Result<_>>()?;
        let clf = train_probe(&projected, labels, 2, ProbeKind::Linear, hp, seed.wrapping_add(r as u64), "inlp")?;
        let mut w: Vec<f64> = clf.w1.row(1).iter().zip(clf.w1.row(0)).map(|(a, b)| a - b).collect();
        for b in &basis {
            let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in w.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-10 {
            break;
        }
        basis.push(w.into_iter().map(|x| x / n).collect());
        p = projector(&basis, d);
    }
    Ok(InlpProjection { rank: basis.len(), basis, projection: p })
}

/// Replaces the rowspace part of `state` by `s·α_r·|c_i|·w_i` for every
/// basis row `w_i` with coefficient `c_i = w_i·state`.
pub fn alterrep_apply(state: &Tensor, basis: &[Vec<f64>], sign: f64, strength: f64) -> Result<Tensor> {
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::Input(format!("direction sign must be ±1, got {sign}")));
    }
    let d = state.len();
    for (i, a) in basis.iter().enumerate() {
        if a.len() != d {
            return Err(Error::Shape(format!("basis row of length {}, state has {d}", a.len())));
        }
        for (j, b) in basis.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if (dot - expected).abs() > 1e-8 {
                return Err(Error::Input(format!("basis rows {i},{j} not orthonormal (dot {dot})")));
            }
        }
    }
    let mut out = state.flatten();
    let coeffs: Vec<f64> = basis.iter().map(|w| w.iter().zip(state.data()).map(|(a, b)| a * b).sum()).collect();
    for (w, c) in basis.iter().zip(coeffs) {
        let shift = sign * strength * c.abs() - c;
        for (o, wi) in out.data_mut().iter_mut().zip(w) {
            *o += shift * wi;
        }
    }
    Ok(out)
}
