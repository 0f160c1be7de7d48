// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomized invariants of every module, shared by the property tests and
//! the acceptance run.

// each test target uses a different half of this module
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdmi_core::interventions::{
    closed_form_final_gradient, fgsm, hdmi_ascend, inlp_fit, margin_loss, pgd, AscentConfig, BallConstraint,
    MarginObjective, Norm,
};
use hdmi_core::lookahead::{la_hdmi_step, lookahead_objective, lookahead_objective_at, EditConfig, EditSpec, LookaheadState};
use hdmi_core::metrics::{completeness, reliability, selectivity, tv_distance};
use hdmi_core::model::{DecodeCache, ModelConfig, TinyTransformer};
use hdmi_core::probes::{train_probe, ProbeHparams, ProbeKind, ProbeModel, TEST_SPLIT, VALIDATION_PROBE};
use hdmi_core::tasks::{
    flip_zc, gen_causalgym_suite, gen_suite, independence_subsample, make_splits, LabeledExample, Vocab, CAUSALGYM_SUITES,
    DEFAULT_FRACTIONS,
};
use hdmi_core::tensor::gradcheck::{central_difference, relative_error};
use hdmi_core::tensor::{ops, Graph, Tensor, Var};
use hdmi_core::theory::{optimal_margin_delta, target_only_delta, TheoremInstance};
use hdmi_core::{Error, Result};

pub type Outcome = std::result::Result<(), String>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap()
}

fn tiny(seed: u64) -> TinyTransformer {
    TinyTransformer::new(ModelConfig {
        vocab_size: 12,
        hidden_size: 8,
        embed_size: 8,
        layers: 2,
        heads: 2,
        max_seq_len: 24,
        seed,
    })
    .unwrap()
}

fn distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // occasionally exactly zero entries
    let raw: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; k];
        v[rng.gen_range(0..k)] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / s).collect()
}

pub mod tensor_core {
    use super::*;

    type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

    /// Worst relative error between the backward pass with cotangent `c` and
    /// central differences of `x ↦ Σ c ⊙ op(x)`, over every operand read.
    fn vjp_error(inputs: &[Tensor], build: Build, rng: &mut ChaCha8Rng) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let cot = uniform(rng, g.value(out).shape(), 1.0);
        let grads = g.backward_with(out, cot.clone()).unwrap();
        let mut worst = 0.0_f64;
        for (i, v) in vars.iter().enumerate() {
            // operands the op does not read get no gradient
            let Ok(analytic) = grads.wrt(*v).map(Tensor::clone) else { continue };
            let fd = central_difference(
                |x| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> =
                        inputs.iter().enumerate().map(|(j, t)| g.input(if j == i { x.clone() } else { t.clone() })).collect();
                    let out = build(&mut g, &vars)?;
                    g.value(out).dot(&cot)
                },
                &inputs[i],
            )
            .unwrap();
            worst = worst.max(relative_error(&analytic, &fd));
        }
        worst
    }

    fn ops_table() -> Vec<(&'static str, bool, Build)> {
        vec![
            ("matmul", true, |g, v| g.matmul(v[0], v[1])),
            ("matmul_nt", true, |g, v| g.matmul_nt(v[0], v[2])),
            ("add", true, |g, v| g.add(v[0], v[3])),
            ("sub", true, |g, v| g.sub(v[0], v[3])),
            ("mul", false, |g, v| g.mul(v[0], v[3])),
            ("scale", true, |g, v| g.scale(v[0], -1.7)),
            ("add_row_bias", true, |g, v| g.add_row_bias(v[0], v[4])),
            ("gelu", false, |g, v| g.gelu(v[0])),
            ("layer_norm", false, |g, v| g.layer_norm(v[0], v[4], v[5], 1e-5)),
            ("softmax", false, |g, v| g.softmax(v[0], 0.7)),
            ("slice_rows", true, |g, v| g.slice_rows(v[0], 1, 3)),
            ("slice_cols", true, |g, v| g.slice_cols(v[0], 1, 4)),
            ("concat_rows", true, |g, v| g.concat_rows(&[v[0], v[3]])),
            ("concat_cols", true, |g, v| g.concat_cols(&[v[0], v[3]])),
            ("gather_rows", true, |g, v| g.gather_rows(v[1], &[0, 4, 0, 2])),
            ("sum", true, |g, v| g.sum(v[0])),
            ("select", true, |g, v| g.select(v[0], &[(0, 1.0), (7, -2.0), (0, 0.5)])),
            ("cross_entropy", false, |g, v| g.cross_entropy(v[0], &[0, 4, 2])),
            ("reshape", true, |g, v| g.reshape(v[0], &[5, 3])),
        ]
    }

    /// `[a: 3×5, b: 5×4, c: 4×5, d: 3×5, gain: 5, bias: 5]`.
    fn operands(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            uniform(rng, &[3, 5], 2.0),
            uniform(rng, &[5, 4], 2.0),
            uniform(rng, &[4, 5], 2.0),
            uniform(rng, &[3, 5], 2.0),
            uniform(rng, &[5], 2.0),
            uniform(rng, &[5], 2.0),
        ]
    }

    pub fn every_op_matches_finite_differences(runner: &mut TestRunner) -> Outcome {
        runner.run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = operands(&mut rng);
            for (name, linear, build) in ops_table() {
                let err = vjp_error(&inputs, build, &mut rng);
                let tol = if linear { 1e-6 } else { 1e-4 };
                prop_assert!(err < tol, "{name}: relative error {err:e}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn relu_matches_finite_differences_away_from_the_kink(runner: &mut TestRunner) -> Outcome {
        runner.run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, &[3, 5], 2.0).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            let err = vjp_error(&[x], |g, v| g.relu(v[0]), &mut rng);
            prop_assert!(err < 1e-6, "{err:e}");
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn softmax_is_a_distribution(runner: &mut TestRunner) -> Outcome {
        runner.run(&(prop::collection::vec(-1e4f64..1e4, 1..40), prop::sample::select(vec![0.01, 0.05, 0.5, 1.0, 3.0])), |(v, t)| {
            let p = ops::softmax(&Tensor::vector(v), t).unwrap();
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12, "sum {}", p.sum());
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn backward_is_linear_in_the_cotangent(runner: &mut TestRunner) -> Outcome {
        runner.run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = operands(&mut rng);
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let a = g.matmul(v[0], v[1]).unwrap();
            let a = g.gelu(a).unwrap();
            let a = g.matmul(a, v[2]).unwrap();
            let a = g.layer_norm(a, v[4], v[5], 1e-5).unwrap();
            let a = g.softmax(a, 0.8).unwrap();
            let root = g.mul(a, v[3]).unwrap();
            let c = uniform(&mut rng, g.value(root).shape(), 1.0);
            let one = g.backward_with(root, c.clone()).unwrap();
            let two = g.backward_with(root, c.scale(2.0)).unwrap();
            for var in &v {
                let (x, y) = (one.wrt(*var).unwrap(), two.wrt(*var).unwrap());
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!((2.0 * p - q).abs() <= 1e-15 * q.abs().max(1e-300));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod model {
    use super::*;

    pub fn patch_with_the_captured_state_is_a_no_op(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000, 1usize..20, 1usize..=2), |(seed, len, layer)| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            let (logits, h) = m.forward_capture(&tokens, layer).unwrap();
            let patched = m.forward_patch(&tokens, layer, &h.vector).unwrap();
            prop_assert!(patched.max_abs_diff(&logits) < 1e-6);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn incremental_decoding_matches_recompute(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcafe);
            let tokens: Vec<usize> = (0..20).map(|_| rng.gen_range(0..12)).collect();
            let split = rng.gen_range(1..20);
            let (mut cache, h) = m.prefill(&tokens[..split]).unwrap();
            let full = m.forward_all_logits(&tokens).unwrap();
            prop_assert!(m.head(&h).unwrap().max_abs_diff(&Tensor::vector(full.row(split - 1).to_vec())) < 1e-5);
            for (t, &tok) in tokens.iter().enumerate().skip(split) {
                let (h, next) = m.transition_step(&cache, &m.embedding_row(tok).unwrap()).unwrap();
                cache = next;
                let inc = m.head(&h).unwrap();
                prop_assert!(inc.max_abs_diff(&Tensor::vector(full.row(t).to_vec())) < 1e-5, "position {t}");
            }
            prop_assert_eq!(cache.len(), 20);
            prop_assert_eq!(DecodeCache::empty().len(), 0);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn later_tokens_never_change_earlier_logits(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000, 2usize..20), |(seed, len)| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            let j = rng.gen_range(1..len);
            let mut changed = tokens.clone();
            changed[j] = (changed[j] + 1 + rng.gen_range(0..11)) % 12;
            let (a, b) = (m.forward_all_logits(&tokens).unwrap(), m.forward_all_logits(&changed).unwrap());
            for t in 0..j {
                prop_assert_eq!(a.row(t), b.row(t), "position {}", t);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn forward_is_deterministic(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000, 1usize..20), |(seed, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            prop_assert_eq!(tiny(seed).forward_all_logits(&tokens).unwrap(), tiny(seed).forward_all_logits(&tokens).unwrap());
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod tasks {
    use super::*;

    fn ex(z_c: usize, z_e: usize) -> LabeledExample {
        LabeledExample { prompt: vec![4], source_token: 5, target_token: 6, z_c, z_e, suite: "agreement".into() }
    }

    pub fn flipping_zc_regenerates_the_swapped_partner(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 0usize..6), |(seed, which)| {
            let vocab = Vocab::standard();
            let name = if which == 0 { "agreement" } else { CAUSALGYM_SUITES[which - 1] };
            for e in gen_suite(&vocab, name, 40, seed).unwrap() {
                let f = flip_zc(&vocab, &e).unwrap();
                prop_assert_eq!((f.source_token, f.target_token), (e.target_token, e.source_token));
                prop_assert_eq!(f.z_c, 1 - e.z_c);
                prop_assert_eq!(flip_zc(&vocab, &f).unwrap(), e);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn splits_are_disjoint_and_seed_deterministic(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 10usize..200), |(seed, n)| {
            let vocab = Vocab::standard();
            let data = gen_causalgym_suite(&vocab, "cleft", 2 * (n / 2).max(5), 1).unwrap();
            // tiny suites can leave the validation slice with one Z_c class,
            // which the splitter must refuse rather than paper over
            let s = match make_splits(&data, DEFAULT_FRACTIONS, seed) {
                Ok(s) => s,
                Err(e) => {
                    prop_assert!(matches!(e, Error::DegenerateLabels(_)), "unexpected error {}", e);
                    prop_assert!(make_splits(&data, DEFAULT_FRACTIONS, seed).is_err());
                    return Ok(());
                }
            };
            prop_assert!(s.is_disjoint());
            prop_assert_eq!(&s, &make_splits(&data, DEFAULT_FRACTIONS, seed).unwrap());
            let mut all: Vec<usize> = s.interventional.iter().chain(&s.validation_probe).chain(&s.test).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), s.interventional.len() + s.validation_probe.len() + s.test.len());
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn subsample_makes_labels_exactly_independent(runner: &mut TestRunner) -> Outcome {
        runner.run(&(prop::collection::vec(1usize..12, 6), any::<u64>()), |(counts, seed)| {
            let mut data = Vec::new();
            for (k, &c) in counts.iter().enumerate() {
                data.extend((0..c).map(|_| ex(k % 2, k / 2)));
            }
            let keep = independence_subsample(&data, seed).unwrap();
            let n = keep.len();
            let count = |f: &dyn Fn(&LabeledExample) -> bool| keep.iter().filter(|&&i| f(&data[i])).count();
            for c in 0..2 {
                for e in 0..3 {
                    let joint = count(&|x| x.z_c == c && x.z_e == e);
                    let pc = count(&|x| x.z_c == c);
                    let pe = count(&|x| x.z_e == e);
                    prop_assert_eq!(joint * n, pc * pe, "cell ({}, {})", c, e);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod probes {
    use super::*;

    fn random_probe(rng: &mut ChaCha8Rng, kind: ProbeKind, d: usize, k: usize) -> ProbeModel {
        let mut p = ProbeModel::linear(uniform(rng, &[k, d], 3.0), uniform(rng, &[k], 3.0), "x").unwrap();
        if kind == ProbeKind::Mlp {
            let h = 6;
            p.kind = ProbeKind::Mlp;
            p.w1 = uniform(rng, &[h, d], 3.0);
            p.b1 = uniform(rng, &[h], 3.0);
            p.w2 = Some(uniform(rng, &[k, h], 3.0));
            p.b2 = Some(uniform(rng, &[k], 3.0));
        }
        p
    }

    pub fn predictions_are_distributions(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), any::<bool>(), 2usize..6, 1e-3f64..1e3), |(seed, mlp, k, scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = if mlp { ProbeKind::Mlp } else { ProbeKind::Linear };
            let p = random_probe(&mut rng, kind, 5, k);
            let p_out = p.predict(&uniform(&mut rng, &[5], scale)).unwrap();
            prop_assert_eq!(p_out.len(), k);
            prop_assert!(p_out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((p_out.sum() - 1.0).abs() < 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn binary_linear_decision_is_monotone_along_the_weight_gap(runner: &mut TestRunner) -> Outcome {
        runner.run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probe(&mut rng, ProbeKind::Linear, 5, 2);
            let dir = Tensor::vector(p.w1.row(1).iter().zip(p.w1.row(0)).map(|(a, b)| a - b).collect());
            let s0 = uniform(&mut rng, &[5], 2.0);
            let mut last_p = -1.0;
            let mut flips = 0;
            let mut last_class = None;
            for i in -40..=40 {
                let mut s = s0.clone();
                s.axpy(i as f64 * 0.25, &dir).unwrap();
                let q = p.predict(&s).unwrap().data()[1];
                prop_assert!(q >= last_p - 1e-15);
                last_p = q;
                let c = p.predict_class(&s).unwrap();
                if last_class.is_some_and(|l| l != c) {
                    flips += 1;
                    prop_assert_eq!(c, 1);
                }
                last_class = Some(c);
            }
            prop_assert!(flips <= 1);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }


    pub fn training_refuses_test_split_states(runner: &mut TestRunner) -> Outcome {
        runner
            .run(&any::<u64>(), |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let xs: Vec<Tensor> = (0..20).map(|_| uniform(&mut rng, &[4], 1.0)).collect();
                let ys: Vec<usize> = (0..20).map(|i| i % 2).collect();
                let hp = ProbeHparams { epochs: 2, ..Default::default() };
                let refused = train_probe(&xs, &ys, 2, ProbeKind::Linear, &hp, seed, TEST_SPLIT);
                prop_assert!(matches!(refused, Err(Error::Leakage(_))));
                prop_assert!(train_probe(&xs, &ys, 2, ProbeKind::Linear, &hp, seed, VALIDATION_PROBE).is_ok());
                Ok(())
            })
            .map_err(|e| e.to_string())
    }
}

pub mod interventions {
    use super::*;

    fn pair(rng: &mut ChaCha8Rng) -> MarginObjective {
        let a = rng.gen_range(0..12);
        let b = (a + rng.gen_range(1..12)) % 12;
        MarginObjective::pair(a, b).unwrap()
    }

    pub fn final_layer_gain_is_alpha_times_squared_gradient_norm(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000, 1e-3f64..2.0, 1usize..6), |(seed, alpha, steps)| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = pair(&mut rng);
            let tokens: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..12)).collect();
            let out = hdmi_ascend(&m, &tokens, &obj, &AscentConfig { step_size: alpha, steps, layer: 2 }).unwrap();
            let g = closed_form_final_gradient(&m, &obj).unwrap();
            let gain = margin_loss(&out.logits, &obj).unwrap() - margin_loss(&out.original_logits, &obj).unwrap();
            let expected = steps as f64 * alpha * g.dot(&g).unwrap();
            prop_assert!((gain - expected).abs() <= 1e-6 * expected.max(1.0), "{gain} vs {expected}");
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn earlier_layer_ascent_does_not_lower_the_margin(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = pair(&mut rng);
            let tokens: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..12)).collect();
            let out = hdmi_ascend(&m, &tokens, &obj, &AscentConfig { step_size: 1e-3, steps: 1, layer: 1 }).unwrap();
            prop_assert!(margin_loss(&out.logits, &obj).unwrap() >= margin_loss(&out.original_logits, &obj).unwrap() - 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn closed_form_equals_backward_and_negates_on_swap(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = pair(&mut rng);
            let closed = closed_form_final_gradient(&m, &obj).unwrap();
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let h = g.input(uniform(&mut rng, &[1, 8], 2.0));
            let logits = m.head_graph(&mut g, &p, h).unwrap();
            let root = g.select(logits, &obj.terms()).unwrap();
            let vjp = g.grad(root, h).unwrap().flatten();
            prop_assert!(closed.max_abs_diff(&vjp) < 1e-6);
            let swapped = closed_form_final_gradient(&m, &obj.swapped()).unwrap();
            prop_assert_eq!(swapped, closed.scale(-1.0));
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn ball_constraints_hold_after_every_step(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), any::<bool>(), 1e-3f64..10.0, 1usize..8), |(seed, l2, radius, steps)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let norm = if l2 { Norm::L2 } else { Norm::LInf };
            let ball = BallConstraint::new(norm, radius).unwrap();
            let probe = ProbeModel::linear(uniform(&mut rng, &[2, 6], 2.0), uniform(&mut rng, &[2], 1.0), "x").unwrap();
            let s = uniform(&mut rng, &[6], 3.0);
            let tol = radius * (1.0 + 1e-12);
            let x = fgsm(&s, &probe, 1, &ball).unwrap();
            prop_assert!(norm.of(&x.sub(&s).unwrap()) <= tol);
            for k in 1..=steps {
                let x = pgd(&s, &probe, rng.gen_range(0..2), &ball, k, 2.5 * radius / steps as f64).unwrap();
                prop_assert!(norm.of(&x.sub(&s).unwrap()) <= tol, "after {k} steps");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }


    pub fn nullspace_projector_is_idempotent(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 1usize..4), |(seed, rank)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states: Vec<Tensor> = (0..60).map(|_| uniform(&mut rng, &[6], 2.0)).collect();
            let labels: Vec<usize> = states.iter().map(|s| usize::from(s.data()[0] + 0.5 * s.data()[1] > 0.0)).collect();
            let hp = ProbeHparams { epochs: 20, ..Default::default() };
            let proj = inlp_fit(&states, &labels, rank, seed, &hp).unwrap();
            let p = &proj.projection;
            for s in &states[..10] {
                let once = proj.project(s).unwrap();
                prop_assert!(proj.project(&once).unwrap().max_abs_diff(&once) < 1e-10);
                for w in &proj.basis {
                    let dot: f64 = w.iter().zip(once.data()).map(|(a, b)| a * b).sum();
                    prop_assert!(dot.abs() < 1e-10);
                }
            }
            prop_assert!(p.transpose().max_abs_diff(p) < 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod theory {
    use super::*;

    pub fn margin_change_is_exactly_linear(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 1usize..17, 2usize..33), |(seed, dim, vocab)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TheoremInstance::random(&mut rng, dim, vocab, 1.0).unwrap();
            let delta = uniform(&mut rng, &[dim], 3.0);
            let moved = inst.h.add(&delta).unwrap();
            let change = inst.margin(&moved).unwrap() - inst.margin(&inst.h).unwrap();
            prop_assert!((change - inst.d.dot(&delta).unwrap()).abs() < 1e-10);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn optimal_gain_ignores_bias_and_base_state(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 1usize..17, 2usize..33, 0.05f64..2.0), |(seed, dim, vocab, eps)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TheoremInstance::random(&mut rng, dim, vocab, eps).unwrap();
            let (_, gain) = optimal_margin_delta(&inst).unwrap();
            let other = TheoremInstance::new(
                inst.w.clone(),
                uniform(&mut rng, &[vocab], 5.0),
                uniform(&mut rng, &[dim], 5.0),
                inst.tau,
                inst.sigma,
                eps,
            )
            .unwrap();
            let (_, gain2) = optimal_margin_delta(&other).unwrap();
            prop_assert!((gain - gain2).abs() < 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn cosine_is_bounded_and_signs_the_gain(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 1usize..17, 2usize..33), |(seed, dim, vocab)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TheoremInstance::random(&mut rng, dim, vocab, 1.0).unwrap();
            let (delta, gain, cos) = target_only_delta(&inst).unwrap();
            prop_assert!((-1.0..=1.0).contains(&cos));
            prop_assert!((gain - inst.margin_gain(&delta).unwrap()).abs() < 1e-10);
            if cos.abs() > 1e-12 {
                prop_assert_eq!(gain.signum(), cos.signum());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod lookahead {
    use super::*;

    fn random_spec(rng: &mut ChaCha8Rng, edits: bool) -> EditSpec {
        let prefix: Vec<usize> = std::iter::once(1).chain((0..rng.gen_range(0..4)).map(|_| rng.gen_range(4..12))).collect();
        let input: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..12)).collect();
        let edited = if edits {
            input.iter().map(|&x| if rng.gen_bool(0.4) { 4 + (x - 3) % 8 } else { x }).collect()
        } else {
            input.clone()
        };
        EditSpec::new(prefix, input, edited).unwrap()
    }

    pub fn sharp_expected_embedding_is_the_argmax_row(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, true);
            let cfg = EditConfig { beta_f: 0.01, lambda_fact: 1.0, ..Default::default() };
            let mut state = LookaheadState::start(&m, &spec).unwrap();
            for _ in 0..spec.len() {
                let (display, next, diag) = la_hdmi_step(&m, &state, &spec, &cfg).unwrap();
                if diag.top3[0].1 > 1.0 - 1e-8 {
                    prop_assert!(next.expected_embedding.max_abs_diff(&m.embedding_row(display).unwrap()) < 1e-6);
                }
                state = next;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn empty_objective_is_zero(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, false);
            let cfg = EditConfig { lambda_fact: 0.0, ..Default::default() };
            let state = LookaheadState::start(&m, &spec).unwrap();
            let (v, g) = lookahead_objective(&m, &state, &spec, &cfg).unwrap();
            prop_assert_eq!(v, 0.0);
            prop_assert!(g.data().iter().all(|&x| x == 0.0));
            let (v, g) = lookahead_objective_at(&m, &state, &uniform(&mut rng, &[8], 3.0), &spec, &cfg).unwrap();
            prop_assert_eq!(v, 0.0);
            prop_assert!(g.data().iter().all(|&x| x == 0.0));
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn small_steps_raise_the_objective_monotonically(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0u64..1000), |seed| {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, true);
            let cfg = EditConfig { step_size: 1e-2, ..Default::default() };
            let state = LookaheadState::start(&m, &spec).unwrap();
            let mut h = state.hidden.clone();
            let (mut last, mut grad) = lookahead_objective(&m, &state, &spec, &cfg).unwrap();
            for _ in 0..cfg.steps {
                h.axpy(cfg.step_size, &grad).unwrap();
                let (v, g) = lookahead_objective_at(&m, &state, &h, &spec, &cfg).unwrap();
                prop_assert!(v >= last - 1e-12, "{v} < {last}");
                (last, grad) = (v, g);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

pub mod metrics {
    use super::*;

    pub fn scores_lie_in_the_unit_interval(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 2usize..8), |(seed, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, q) = (distribution(&mut rng, k), distribution(&mut rng, k));
            let tv = tv_distance(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&tv));
            prop_assert!((tv - tv_distance(&q, &p).unwrap()).abs() < 1e-15);
            let c = completeness(&q, rng.gen_range(0..k)).unwrap();
            let s = selectivity(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&s));
            let r = reliability(c, s).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn reliability_is_a_symmetric_mean_below_the_arithmetic_one(runner: &mut TestRunner) -> Outcome {
        runner.run(&(0.0f64..=1.0, 0.0f64..=1.0), |(c, s)| {
            let r = reliability(c, s).unwrap();
            prop_assert_eq!(r, reliability(s, c).unwrap());
            prop_assert!(r <= (c + s) / 2.0 + 1e-15);
            prop_assert!(r <= c.max(s) + 1e-15);
            prop_assert!((reliability(c, c).unwrap() - c).abs() < 1e-15);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    pub fn extremes_are_exactly_the_degenerate_cases(runner: &mut TestRunner) -> Outcome {
        runner.run(&(any::<u64>(), 2usize..8), |(seed, k)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = distribution(&mut rng, k);
            let z = rng.gen_range(0..k);
            let one_hot: Vec<f64> = (0..k).map(|i| if i == z { 1.0 } else { 0.0 }).collect();
            prop_assert_eq!(completeness(&one_hot, z).unwrap(), 1.0);
            prop_assert_eq!(completeness(&p, z).unwrap() == 1.0, p == one_hot);
            prop_assert_eq!(selectivity(&p, &p).unwrap(), 1.0);
            let q = distribution(&mut rng, k);
            if p != q {
                prop_assert!(selectivity(&p, &q).unwrap() < 1.0);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

}

/// One named invariant and its case budget.
pub struct Property {
    pub name: &'static str,
    pub cases: u32,
    pub check: fn(&mut TestRunner) -> Outcome,
}

impl Property {
    /// Runs the property; a fixed generator seed makes the run repeatable.
    pub fn run(&self, deterministic: bool) -> Outcome {
        let config = Config { cases: self.cases, failure_persistence: None, ..Config::default() };
        let mut runner = if deterministic {
            TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
        } else {
            TestRunner::new(config)
        };
        (self.check)(&mut runner)
    }
}

macro_rules! registry {
    ($($m:ident :: $name:ident = $cases:expr,)*) => {
        pub fn properties() -> Vec<Property> {
            vec![$(Property { name: concat!(stringify!($m), "::", stringify!($name)), cases: $cases, check: $m::$name },)*]
        }

        #[cfg(test)]
        mod generated {
            $(
                #[test]
                fn $name() {
                    if let Err(e) = super::$m::$name(&mut super::TestRunner::new(super::Config {
                        cases: $cases,
                        failure_persistence: None,
                        ..super::Config::default()
                    })) {
                        panic!("{e}");
                    }
                }
            )*
        }
    };
}

registry! {
    tensor_core::every_op_matches_finite_differences = 48,
    tensor_core::relu_matches_finite_differences_away_from_the_kink = 48,
    tensor_core::softmax_is_a_distribution = 48,
    tensor_core::backward_is_linear_in_the_cotangent = 48,
    model::patch_with_the_captured_state_is_a_no_op = 24,
    model::incremental_decoding_matches_recompute = 24,
    model::later_tokens_never_change_earlier_logits = 24,
    model::forward_is_deterministic = 24,
    tasks::flipping_zc_regenerates_the_swapped_partner = 32,
    tasks::splits_are_disjoint_and_seed_deterministic = 32,
    tasks::subsample_makes_labels_exactly_independent = 32,
    probes::predictions_are_distributions = 64,
    probes::binary_linear_decision_is_monotone_along_the_weight_gap = 64,
    probes::training_refuses_test_split_states = 8,
    interventions::final_layer_gain_is_alpha_times_squared_gradient_norm = 32,
    interventions::earlier_layer_ascent_does_not_lower_the_margin = 32,
    interventions::closed_form_equals_backward_and_negates_on_swap = 32,
    interventions::ball_constraints_hold_after_every_step = 32,
    interventions::nullspace_projector_is_idempotent = 8,
    theory::margin_change_is_exactly_linear = 128,
    theory::optimal_gain_ignores_bias_and_base_state = 128,
    theory::cosine_is_bounded_and_signs_the_gain = 128,
    lookahead::sharp_expected_embedding_is_the_argmax_row = 24,
    lookahead::empty_objective_is_zero = 24,
    lookahead::small_steps_raise_the_objective_monotonically = 24,
    metrics::scores_lie_in_the_unit_interval = 256,
    metrics::reliability_is_a_symmetric_mean_below_the_arithmetic_one = 256,
    metrics::extremes_are_exactly_the_degenerate_cases = 256,
}
