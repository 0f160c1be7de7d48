// SPDX-License-Identifier: MIT OR Apache-2.0

//! Data generation, training, probe fitting, grid search and test-split
//! evaluation.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use super::config::{derive_seed, ExperimentConfig};
use crate::error::{Error, Result};
use crate::interventions::{
    alterrep_apply, fgsm, hdmi_ascend, inlp_fit, pgd, target_only_ascend, AscentConfig, BallConstraint, InlpProjection,
    MarginObjective, RecordWriter,
};
use crate::metrics::{MetricsRecord, SampleScores};
use crate::model::{train_lm, TinyTransformer, TrainConfig, TrainReport};
use crate::probes::{train_probe, train_probe_gated, GatedProbe, ProbeHparams, ProbeKind, ProbeModel, INTERVENTIONAL, VALIDATION_PROBE};
use crate::tasks::{gen_suite, lm_corpus, make_splits, LabeledExample, SplitSpec, Vocab};
use crate::tensor::Tensor;

/// One point of a method's hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    Hdmi { alpha: f64, steps: usize },
    TargetOnly { alpha: f64, steps: usize },
    Fgsm { epsilon: f64 },
    Pgd { epsilon: f64, steps: usize },
    AlterRep { alpha: f64, inlp_epochs: usize },
}

impl Setting {
    pub fn method(&self) -> &'static str {
        match self {
            Setting::Hdmi { .. } => "hdmi",
            Setting::TargetOnly { .. } => "target_only",
            Setting::Fgsm { .. } => "fgsm",
            Setting::Pgd { .. } => "pgd",
            Setting::AlterRep { .. } => "alterrep",
        }
    }

    pub fn needs_probe(&self) -> bool {
        !matches!(self, Setting::Hdmi { .. } | Setting::TargetOnly { .. })
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Hdmi { alpha, steps } | Setting::TargetOnly { alpha, steps } => {
                write!(f, "hdmi_alpha={alpha} hdmi_inner_steps={steps}")
            }
            Setting::Fgsm { epsilon } => write!(f, "epsilon={epsilon}"),
            Setting::Pgd { epsilon, steps } => write!(f, "epsilon={epsilon} pgd_steps={steps}"),
            Setting::AlterRep { alpha, inlp_epochs } => write!(f, "alterrep_alpha={alpha} inlp_epochs={inlp_epochs}"),
        }
    }
}

/// Grid of `method` in listed order.
pub fn method_grid(cfg: &ExperimentConfig, method: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    match method {
        "hdmi" | "target_only" => {
            for &alpha in &cfg.hdmi_alpha {
                for &steps in &cfg.hdmi_inner_steps {
                    out.push(if method == "hdmi" {
                        Setting::Hdmi { alpha, steps }
                    } else {
                        Setting::TargetOnly { alpha, steps }
                    });
                }
            }
        }
        "fgsm" => out.extend(cfg.epsilon.iter().map(|&epsilon| Setting::Fgsm { epsilon })),
        "pgd" => {
            for &epsilon in &cfg.epsilon {
                for &steps in &cfg.pgd_steps {
                    out.push(Setting::Pgd { epsilon, steps });
                }
            }
        }
        "alterrep" => {
            for &alpha in &cfg.alterrep_alpha {
                for &inlp_epochs in &cfg.inlp_epochs {
                    out.push(Setting::AlterRep { alpha, inlp_epochs });
                }
            }
        }
        _ => return Err(Error::Config(format!("unknown method `{method}`"))),
    }
    Ok(out)
}

/// Index of the best-scoring setting (first on ties) and every score.
pub fn grid_search<S>(grid: &[S], mut score: impl FnMut(&S) -> Result<f64>) -> Result<(usize, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (i, s) in grid.iter().enumerate() {
        let v = score(s)?;
        if v > scores.get(best).copied().unwrap_or(f64::NEG_INFINITY) {
            best = i;
        }
        scores.push(v);
    }
    Ok((best, scores))
}

/// Trains the language model on the synthetic corpus.
pub fn train_model(cfg: &ExperimentConfig, vocab: &Vocab) -> Result<(TinyTransformer, TrainReport)> {
    let mut model = TinyTransformer::new(cfg.model_config(vocab.len())?)?;
    let corpus = lm_corpus(vocab, cfg.lm_sentences, derive_seed(cfg.seed, "lm_corpus"))?;
    let tc = TrainConfig {
        epochs: cfg.lm_epochs,
        lr: cfg.lm_lr,
        weight_decay: cfg.lm_weight_decay,
        batch_size: cfg.lm_batch_size,
        seed: derive_seed(cfg.seed, "lm_train"),
    };
    let report = train_lm(&mut model, &corpus, &tc)?;
    Ok((model, report))
}

pub fn generate_suite(cfg: &ExperimentConfig, vocab: &Vocab, suite: &str) -> Result<Vec<LabeledExample>> {
    gen_suite(vocab, suite, cfg.examples_per_suite, derive_seed(cfg.seed, &format!("data/{suite}")))
}

pub fn split_suite(cfg: &ExperimentConfig, suite: &str, examples: &[LabeledExample]) -> Result<SplitSpec> {
    let mut splits = make_splits(examples, cfg.split_fractions, derive_seed(cfg.seed, &format!("split/{suite}")))?;
    if let Some(limit) = cfg.interventional_limit {
        splits.limit_interventional(limit);
    }
    if !splits.is_disjoint() {
        return Err(Error::Leakage(format!("{suite}: splits overlap")));
    }
    Ok(splits)
}

/// Clean last-position states at the probing layer and clean logits.
#[derive(Debug, Clone)]
pub struct CleanStates {
    pub states: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

pub fn capture_clean(model: &TinyTransformer, examples: &[LabeledExample], layer: usize) -> Result<CleanStates> {
    let pairs: Vec<(Tensor, Tensor)> = examples
        .par_iter()
        .map(|ex| {
            let (logits, h) = model.forward_capture(&ex.model_input(), layer)?;
            Ok((h.vector, logits))
        })
        .collect::<Result<_>>()?;
    let (states, logits) = pairs.into_iter().unzip();
    Ok(CleanStates { states, logits })
}

/// Fraction of examples whose clean logits rank the source continuation
/// above the counterfactual one.
pub fn clean_accuracy(examples: &[LabeledExample], clean: &CleanStates) -> f64 {
    let correct = examples
        .iter()
        .zip(&clean.logits)
        .filter(|(ex, l)| l.data()[ex.source_token] > l.data()[ex.target_token])
        .count();
    correct as f64 / examples.len().max(1) as f64
}

/// Validation probes for Z_c and Z_e, fitted on clean states of the
/// validation-probe split only.
#[derive(Debug, Clone)]
pub struct ValidationProbes {
    pub zc: ProbeModel,
    pub ze: ProbeModel,
}

/// Probes driving the baselines; built on demand so a margin-only run
/// never fits one.
#[derive(Debug, Clone, Default)]
pub struct InterventionalResources {
    pub probe: Option<GatedProbe>,
    /// INLP projection per `inlp_epochs` value.
    pub inlp: BTreeMap<usize, InlpProjection>,
}

fn gather<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

pub fn num_ze_classes(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.z_e + 1).max().unwrap_or(1).max(2)
}

/// Fits both validation probes. Must run before any intervention.
pub fn fit_validation_probes(
    cfg: &ExperimentConfig,
    suite: &str,
    examples: &[LabeledExample],
    clean: &CleanStates,
    splits: &SplitSpec,
) -> Result<ValidationProbes> {
    let idx = &splits.validation_probe;
    let x = gather(&clean.states, idx);
    let zc: Vec<usize> = idx.iter().map(|&i| examples[i].z_c).collect();
    let ze: Vec<usize> = idx.iter().map(|&i| examples[i].z_e).collect();
    let hp = ProbeHparams {
        lr: cfg.probe_lr,
        weight_decay: cfg.probe_weight_decay,
        batch_size: cfg.probe_batch_size,
        epochs: *cfg.probe_epochs.iter().max().expect("validated nonempty"),
        hidden: Some(cfg.probe_hidden),
        ..Default::default()
    };
    let kind = cfg.validation_probe;
    let zc = train_probe(&x, &zc, 2, kind, &hp, derive_seed(cfg.seed, &format!("probe/zc/{suite}")), VALIDATION_PROBE)?;
    let ze = train_probe(
        &x,
        &ze,
        num_ze_classes(examples),
        kind,
        &hp,
        derive_seed(cfg.seed, &format!("probe/ze/{suite}")),
        VALIDATION_PROBE,
    )?;
    Ok(ValidationProbes { zc, ze })
}

/// Gated MLP Z_c probe on the interventional split; `probe_epochs` is
/// searched by holdout accuracy.
pub fn fit_interventional_probe(
    cfg: &ExperimentConfig,
    suite: &str,
    examples: &[LabeledExample],
    clean: &CleanStates,
    splits: &SplitSpec,
) -> Result<GatedProbe> {
    let idx = &splits.interventional;
    let x = gather(&clean.states, idx);
    let y: Vec<usize> = idx.iter().map(|&i| examples[i].z_c).collect();
    let seed = derive_seed(cfg.seed, &format!("probe/interventional/{suite}"));
    let mut best: Option<GatedProbe> = None;
    let mut last_err = None;
    for &epochs in &cfg.probe_epochs {
        let hp = ProbeHparams {
            lr: cfg.probe_lr,
            weight_decay: cfg.probe_weight_decay,
            batch_size: cfg.probe_batch_size,
            epochs,
            hidden: Some(cfg.probe_hidden),
            ..Default::default()
        };
        match train_probe_gated(&x, &y, 2, ProbeKind::Mlp, &hp, seed, INTERVENTIONAL) {
            Ok(p) => {
                if best.as_ref().map_or(true, |b| p.probe.holdout_accuracy > b.probe.holdout_accuracy) {
                    best = Some(p);
                }
            }
            Err(e @ Error::ProbeGate(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("nonempty grid"))
}

pub fn fit_inlp(
    cfg: &ExperimentConfig,
    suite: &str,
    examples: &[LabeledExample],
    clean: &CleanStates,
    splits: &SplitSpec,
    epochs: usize,
) -> Result<InlpProjection> {
    let idx = &splits.interventional;
    let x = gather(&clean.states, idx);
    let y: Vec<usize> = idx.iter().map(|&i| examples[i].z_c).collect();
    let hp = ProbeHparams { lr: cfg.inlp_lr, epochs, ..Default::default() };
    let proj = inlp_fit(&x, &y, cfg.inlp_rank, derive_seed(cfg.seed, &format!("inlp/{suite}")), &hp)?;
    Ok(proj)
}

/// A ready-to-run intervention. Margin variants carry no probe.
pub enum Intervener<'a> {
    Margin { target_only: bool, ascent: AscentConfig },
    Fgsm { probe: &'a ProbeModel, ball: BallConstraint },
    Pgd { probe: &'a ProbeModel, ball: BallConstraint, steps: usize, step_size: f64 },
    AlterRep { basis: &'a [Vec<f64>], alpha: f64 },
}

impl<'a> Intervener<'a> {
    pub fn build(cfg: &ExperimentConfig, setting: &Setting, res: &'a InterventionalResources, layer: usize) -> Result<Self> {
        let probe = || {
            res.probe
                .as_ref()
                .map(|g| &g.probe)
                .ok_or_else(|| Error::Config(format!("{} needs an interventional probe", setting.method())))
        };
        Ok(match *setting {
            Setting::Hdmi { alpha, steps } | Setting::TargetOnly { alpha, steps } => Intervener::Margin {
                target_only: matches!(setting, Setting::TargetOnly { .. }),
                ascent: AscentConfig { step_size: alpha, steps, layer },
            },
            Setting::Fgsm { epsilon } => Intervener::Fgsm { probe: probe()?, ball: BallConstraint::new(cfg.gbi_norm, epsilon)? },
            Setting::Pgd { epsilon, steps } => Intervener::Pgd {
                probe: probe()?,
                ball: BallConstraint::new(cfg.gbi_norm, epsilon)?,
                steps,
                // 2.5ε/steps lets the iterate cross the ball within the budget
                step_size: 2.5 * epsilon / steps as f64,
            },
            Setting::AlterRep { alpha, inlp_epochs } => {
                let proj = res
                    .inlp
                    .get(&inlp_epochs)
                    .ok_or_else(|| Error::Config(format!("no INLP projection for {inlp_epochs} epochs")))?;
                let k = cfg.alterrep_inlp_rank_apply.min(proj.basis.len());
                Intervener::AlterRep { basis: &proj.basis[..k], alpha }
            }
        })
    }

    /// The probe this intervention reads, if any.
    pub fn probe_handle(&self) -> Option<&ProbeModel> {
        match self {
            Intervener::Fgsm { probe, .. } | Intervener::Pgd { probe, .. } => Some(probe),
            Intervener::Margin { .. } | Intervener::AlterRep { .. } => None,
        }
    }

    /// Intervened state and the patched logits.
    pub fn apply(&self, model: &TinyTransformer, ex: &LabeledExample, clean: &Tensor, layer: usize) -> Result<(Tensor, Tensor)> {
        let zprime = ex.counterfactual_zc();
        let state = match self {
            Intervener::Margin { target_only, ascent } => {
                let obj = MarginObjective::pair(ex.target_token, ex.source_token)?;
                let out = if *target_only {
                    target_only_ascend(model, &ex.model_input(), &obj, ascent)?
                } else {
                    hdmi_ascend(model, &ex.model_input(), &obj, ascent)?
                };
                return Ok((out.state, out.logits));
            }
            Intervener::Fgsm { probe, ball } => fgsm(clean, probe, zprime, ball)?,
            Intervener::Pgd { probe, ball, steps, step_size } => pgd(clean, probe, zprime, ball, *steps, *step_size)?,
            Intervener::AlterRep { basis, alpha } => {
                let sign = if zprime == 1 { 1.0 } else { -1.0 };
                alterrep_apply(clean, basis, sign, *alpha)?
            }
        };
        let logits = model.forward_patch(&ex.model_input(), layer, &state)?;
        Ok((state, logits))
    }
}

/// Scores of one setting over a set of examples.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: MetricsRecord,
    /// Fraction whose patched argmax is the counterfactual token.
    pub flip_rate: f64,
    pub records: RecordWriter,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_setting(
    cfg: &ExperimentConfig,
    model: &TinyTransformer,
    suite: &str,
    examples: &[LabeledExample],
    clean: &CleanStates,
    idx: &[usize],
    setting: &Setting,
    res: &InterventionalResources,
    val: &ValidationProbes,
) -> Result<Evaluation> {
    let layer = cfg.layer_or_last();
    let iv = Intervener::build(cfg, setting, res, layer)?;
    if !setting.needs_probe() && iv.probe_handle().is_some() {
        return Err(Error::Leakage(format!("{} holds an interventional probe", setting.method())));
    }
    let rows: Vec<(SampleScores, bool, f64, f64, usize, usize, Tensor)> = idx
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let (state, logits) = iv.apply(model, ex, &clean.states[i], layer)?;
            let ze_before = val.ze.predict(&clean.states[i])?;
            let scores = SampleScores::from_posteriors(
                val.zc.predict(&state)?.data(),
                ex.counterfactual_zc(),
                ze_before.data(),
                val.ze.predict(&state)?.data(),
            )?;
            let margin = |l: &Tensor| l.data()[ex.target_token] - l.data()[ex.source_token];
            let flipped = logits.argmax() == ex.target_token;
            Ok((scores, flipped, margin(&clean.logits[i]), margin(&logits), clean.logits[i].argmax(), logits.argmax(), state))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<SampleScores> = rows.iter().map(|r| r.0).collect();
    let record = MetricsRecord::aggregate(suite, setting.method(), &scores)?;
    let flip_rate = rows.iter().filter(|r| r.1).count() as f64 / rows.len().max(1) as f64;
    let mut records = RecordWriter::default();
    for (&i, r) in idx.iter().zip(&rows) {
        records.push(i, setting.method(), r.2, r.3, r.4, r.5, &r.6);
    }
    Ok(Evaluation { record, flip_rate, records })
}

/// Outcome for one `(suite, method)`.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub suite: String,
    pub method: String,
    pub best: Setting,
    pub grid: Vec<(Setting, f64)>,
    pub test: Evaluation,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub examples: Vec<LabeledExample>,
    pub splits: SplitSpec,
    pub clean_accuracy: f64,
    pub validation: ValidationProbes,
    pub interventional: InterventionalResources,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub suites: Vec<SuiteReport>,
    pub seeds: BTreeMap<String, u64>,
}

impl PipelineOutput {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.suites.iter().flat_map(|s| s.methods.iter().map(|m| m.test.record.clone())).collect()
    }

    pub fn method(&self, suite: &str, method: &str) -> Option<&MethodReport> {
        self.suites.iter().find(|s| s.suite == suite)?.methods.iter().find(|m| m.method == method)
    }
}

/// Every stage seed derived from the master seed.
pub fn stage_seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut stages = vec!["model_init".to_string(), "lm_corpus".into(), "lm_train".into()];
    for s in &cfg.suites {
        for stage in ["data", "split", "probe/zc", "probe/ze", "probe/interventional", "inlp"] {
            stages.push(format!("{stage}/{s}"));
        }
    }
    stages.into_iter().map(|s| (s.clone(), derive_seed(cfg.seed, &s))).collect()
}

pub fn run_suite(cfg: &ExperimentConfig, model: &TinyTransformer, vocab: &Vocab, suite: &str) -> Result<SuiteReport> {
    let layer = cfg.layer_or_last();
    let examples = generate_suite(cfg, vocab, suite)?;
    let splits = split_suite(cfg, suite, &examples)?;
    let clean = capture_clean(model, &examples, layer)?;
    let clean_accuracy = clean_accuracy(&examples, &clean);
    // Validation probes come first: nothing has been intervened on yet.
    let validation = fit_validation_probes(cfg, suite, &examples, &clean, &splits)?;
    if validation.zc.trained_on != VALIDATION_PROBE || validation.ze.trained_on != VALIDATION_PROBE {
        return Err(Error::Leakage("validation probe with the wrong provenance".into()));
    }
    let mut res = InterventionalResources::default();
    let grids: Vec<(String, Vec<Setting>)> =
        cfg.methods.iter().map(|m| Ok((m.clone(), method_grid(cfg, m)?))).collect::<Result<_>>()?;
    if grids.iter().any(|(m, _)| m == "fgsm" || m == "pgd") {
        let p = fit_interventional_probe(cfg, suite, &examples, &clean, &splits)?;
        if p.probe.trained_on != INTERVENTIONAL {
            return Err(Error::Leakage("interventional probe with the wrong provenance".into()));
        }
        res.probe = Some(p);
    }
    if grids.iter().any(|(m, _)| m == "alterrep") {
        for &e in &cfg.inlp_epochs {
            res.inlp.insert(e, fit_inlp(cfg, suite, &examples, &clean, &splits, e)?);
        }
    }
    let mut methods = Vec::new();
    for (method, grid) in grids {
        let (best, scores) = grid_search(&grid, |s| {
            let ev = evaluate_setting(cfg, model, suite, &examples, &clean, &splits.interventional, s, &res, &validation)?;
            Ok(ev.record.reliability)
        })?;
        let test = evaluate_setting(cfg, model, suite, &examples, &clean, &splits.test, &grid[best], &res, &validation)?;
        methods.push(MethodReport {
            suite: suite.to_string(),
            method,
            best: grid[best],
            grid: grid.into_iter().zip(scores).collect(),
            test,
        });
    }
    Ok(SuiteReport { suite: suite.to_string(), examples, splits, clean_accuracy, validation, interventional: res, methods })
}

/// Every stage after LM training, with a model supplied by the caller.
pub fn run_pipeline_with_model(cfg: &ExperimentConfig, model: &TinyTransformer) -> Result<PipelineOutput> {
    cfg.validate()?;
    let vocab = Vocab::standard();
    if model.vocab_size() != vocab.len() {
        return Err(Error::Config(format!("model vocabulary {} differs from {}", model.vocab_size(), vocab.len())));
    }
    let suites = cfg.suites.iter().map(|s| run_suite(cfg, model, &vocab, s)).collect::<Result<_>>()?;
    Ok(PipelineOutput { suites, seeds: stage_seeds(cfg) })
}

/// Trains the model and runs every stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(TinyTransformer, PipelineOutput)> {
    cfg.validate()?;
    let (model, _) = train_model(cfg, &Vocab::standard())?;
    let out = run_pipeline_with_model(cfg, &model)?;
    Ok((model, out))
}
