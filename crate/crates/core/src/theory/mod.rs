// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric checks of margin optimality for an affine logit head
//! `z(h) = W h + b`: the ε-ball margin optimum, the target-only update and
//! its `cos θ` gap, and an instance where the target-only update lowers the
//! margin.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logit head, base state, token pair and radius. `d = w_τ − w_σ` is
/// derived on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremInstance {
    pub w: Tensor,
    pub b: Tensor,
    pub h: Tensor,
    pub tau: usize,
    pub sigma: usize,
    pub epsilon: f64,
    pub d: Tensor,
}

impl TheoremInstance {
    pub fn new(w: Tensor, b: Tensor, h: Tensor, tau: usize, sigma: usize, epsilon: f64) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape(format!("head must be a matrix, got {:?}", w.shape())));
        }
        let (v, dim) = (w.rows(), w.cols());
        if b.len() != v || h.len() != dim {
            return Err(Error::Shape(format!("head {v}x{dim} with bias {} and state {}", b.len(), h.len())));
        }
        if tau == sigma || tau >= v || sigma >= v {
            return Err(Error::Input(format!("need distinct tokens below {v}, got τ={tau} σ={sigma}")));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Input(format!("radius {epsilon} must be finite and nonnegative")));
        }
        let d = Tensor::vector(w.row(tau).iter().zip(w.row(sigma)).map(|(a, c)| a - c).collect());
        Ok(Self { w, b, h: h.flatten(), tau, sigma, epsilon, d })
    }

    /// Uniform entries in `[-1, 1]`, base state and bias included.
    pub fn random(rng: &mut impl Rng, dim: usize, vocab: usize, epsilon: f64) -> Result<Self> {
        if vocab < 2 || dim == 0 {
            return Err(Error::Input(format!("need vocab ≥ 2 and dim ≥ 1, got {vocab} and {dim}")));
        }
        let mut uni = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect() };
        let w = Tensor::matrix(vocab, dim, uni(vocab * dim));
        let b = Tensor::vector(uni(vocab));
        let h = Tensor::vector(uni(dim));
        let tau = rng.gen_range(0..vocab);
        let sigma = (tau + rng.gen_range(1..vocab)) % vocab;
        Self::new(w, b, h, tau, sigma, epsilon)
    }

    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        self.w.matvec(h)?.add(&self.b)
    }

    /// `z_τ(h) − z_σ(h)` from the full logits.
    pub fn margin(&self, h: &Tensor) -> Result<f64> {
        let z = self.logits(h)?;
        Ok(z.data()[self.tau] - z.data()[self.sigma])
    }

    /// `m(h + δ) − m(h)`, evaluated through the head.
    pub fn margin_gain(&self, delta: &Tensor) -> Result<f64> {
        Ok(self.margin(&self.h.add(delta)?)? - self.margin(&self.h)?)
    }

    fn w_tau(&self) -> Tensor {
        Tensor::vector(self.w.row(self.tau).to_vec())
    }
}

/// `δ* = ε d/‖d‖₂` and its gain `ε‖d‖₂`.
pub fn optimal_margin_delta(inst: &TheoremInstance) -> Result<(Tensor, f64)> {
    let n = inst.d.norm_l2();
    if n == 0.0 {
        return Err(Error::DegenerateInstance("w_τ = w_σ, the margin does not depend on h".into()));
    }
    Ok((inst.d.scale(inst.epsilon / n), inst.epsilon * n))
}

/// `δ_T = ε w_τ/‖w_τ‖₂`, its margin gain `dᵀδ_T` and `cos θ` between `d`
/// and `w_τ`.
pub fn target_only_delta(inst: &TheoremInstance) -> Result<(Tensor, f64, f64)> {
    let w_tau = inst.w_tau();
    let nw = w_tau.norm_l2();
    if nw == 0.0 {
        return Err(Error::DegenerateInstance("w_τ = 0, the target logit does not depend on h".into()));
    }
    let delta = w_tau.scale(inst.epsilon / nw);
    let gain = inst.d.dot(&delta)?;
    let nd = inst.d.norm_l2();
    let cos = if nd == 0.0 { 0.0 } else { (inst.d.dot(&w_tau)? / (nd * nw)).clamp(-1.0, 1.0) };
    Ok((delta, gain, cos))
}

/// Two-token head with `w_τ = u`, `w_σ = 2u`, zero bias and zero base state.
pub fn build_failure_case(u: &Tensor, epsilon: f64) -> Result<TheoremInstance> {
    if u.is_empty() || u.norm_l2() == 0.0 {
        return Err(Error::Input("failure case needs a nonzero direction".into()));
    }
    let u = u.flatten();
    let mut rows = u.data().to_vec();
    rows.extend(u.data().iter().map(|x| 2.0 * x));
    let dim = u.len();
    TheoremInstance::new(Tensor::matrix(2, dim, rows), Tensor::zeros(&[2]), Tensor::zeros(&[dim]), 0, 1, epsilon)
}

/// Largest margin gain over `n` uniform unit directions scaled by ε.
pub fn sampled_best_gain(inst: &TheoremInstance, n: usize, rng: &mut impl Rng) -> Result<f64> {
    let dim = inst.h.len();
    let base = inst.margin(&inst.h)?;
    let mut best = f64::NEG_INFINITY;
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let point = Tensor::vector(inst.h.data().iter().zip(&v).map(|(h, x)| h + inst.epsilon * x / norm).collect());
        best = best.max(inst.margin(&point)? - base);
    }
    Ok(best)
}

/// One row of the verification table: worst observed deviation against its
/// tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct PartCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl PartCheck {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub instances: usize,
    pub directions: usize,
    pub degenerate: usize,
    pub parts: Vec<PartCheck>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.parts.iter().all(PartCheck::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("part\tworst\ttolerance\tstatus\n");
        for p in &self.parts {
            let status = if p.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{}\t{:.3e}\t{:.0e}\t{status}", p.name, p.worst, p.tolerance);
        }
        let _ = writeln!(s, "instances\t{}\tdirections\t{}\tdegenerate\t{}", self.instances, self.directions, self.degenerate);
        s
    }
}

pub const GAIN_TOLERANCE: f64 = 1e-10;
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Default)]
struct InstanceDeviation {
    optimal: f64,
    target_only: f64,
    linearity: f64,
    oracle: f64,
    degenerate: bool,
}

fn check_instance(seed: u64, directions: usize) -> Result<InstanceDeviation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=16);
    let vocab = rng.gen_range(2..=32);
    let eps = rng.gen_range(0.05..2.0);
    let inst = TheoremInstance::random(&mut rng, dim, vocab, eps)?;
    let (delta, gain) = match optimal_margin_delta(&inst) {
        Ok(r) => r,
        Err(Error::DegenerateInstance(_)) => return Ok(InstanceDeviation { degenerate: true, ..Default::default() }),
        Err(e) => return Err(e),
    };
    let mut dev = InstanceDeviation {
        optimal: (inst.margin_gain(&delta)? - gain).abs().max((gain - eps * inst.d.norm_l2()).abs()),
        ..Default::default()
    };
    let (dt, tgain, cos) = target_only_delta(&inst)?;
    let expected = eps * inst.d.norm_l2() * cos;
    dev.target_only = (inst.margin_gain(&dt)? - expected).abs().max((tgain - expected).abs());
    let probe = Tensor::vector((0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect());
    dev.linearity = (inst.margin_gain(&probe)? - inst.d.dot(&probe)?).abs();
    dev.oracle = (sampled_best_gain(&inst, directions, &mut rng)? - gain).max(0.0);
    Ok(dev)
}

fn failure_deviation(seed: u64, directions: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gain: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..10 {
        let dim = rng.gen_range(1..=16);
        let u = Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        let eps = rng.gen_range(0.05..2.0);
        let inst = build_failure_case(&u, eps)?;
        let bound = eps * u.norm_l2();
        let (dt, tgain, _) = target_only_delta(&inst)?;
        let (ds, sgain) = optimal_margin_delta(&inst)?;
        for dev in [tgain + bound, inst.margin_gain(&dt)? + bound, sgain - bound, inst.margin_gain(&ds)? - bound] {
            worst_gain = worst_gain.max(dev.abs());
        }
        worst_oracle = worst_oracle.max(sampled_best_gain(&inst, directions, &mut rng)? - bound);
    }
    Ok((worst_gain, worst_oracle.max(0.0)))
}

/// Runs every check over `instances` random heads (D ≤ 16, V ≤ 32) and ten
/// random failure cases, sampling `directions` unit directions per
/// instance for the oracle.
pub fn verify_theory(instances: usize, directions: usize, seed: u64) -> Result<TheoryReport> {
    let devs: Vec<InstanceDeviation> = (0..instances)
        .into_par_iter()
        .map(|i| check_instance(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), directions))
        .collect::<Result<_>>()?;
    let worst = |f: fn(&InstanceDeviation) -> f64| devs.iter().map(f).fold(0.0, f64::max);
    let (failure_gain, failure_oracle) = failure_deviation(seed.wrapping_add(1), directions)?;
    Ok(TheoryReport {
        instances,
        directions,
        degenerate: devs.iter().filter(|d| d.degenerate).count(),
        parts: vec![
            PartCheck { name: "optimal_gain", worst: worst(|d| d.optimal), tolerance: GAIN_TOLERANCE },
            PartCheck { name: "target_only_gain", worst: worst(|d| d.target_only), tolerance: GAIN_TOLERANCE },
            PartCheck { name: "margin_linearity", worst: worst(|d| d.linearity), tolerance: GAIN_TOLERANCE },
            PartCheck { name: "sampling_oracle", worst: worst(|d| d.oracle), tolerance: ORACLE_TOLERANCE },
            PartCheck { name: "failure_case_gain", worst: failure_gain, tolerance: GAIN_TOLERANCE },
            PartCheck { name: "failure_case_oracle", worst: failure_oracle, tolerance: ORACLE_TOLERANCE },
        ],
    })
}
