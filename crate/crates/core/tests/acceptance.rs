// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hdmi_core::harness::{
    capture_clean, evaluate_setting, gradient_fidelity, run_pipeline_with_model, train_model, ExperimentConfig,
    InterventionalResources, PipelineOutput, Setting, SuiteReport,
};
use hdmi_core::lookahead::{la_hdmi_generate, EditConfig, EditSpec};
use hdmi_core::metrics::{reliability, reported_scores};
use hdmi_core::model::TinyTransformer;
use hdmi_core::tasks::{Vocab, AGREEMENT};
use hdmi_core::theory::verify_theory;

const THEORY_BUDGET: Duration = Duration::from_secs(5);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const HARMONIC_TOLERANCE: f64 = 0.0105;
const HEADLINE_TOLERANCE: f64 = 1e-4;
const CLEAN_ACCURACY_GATE: f64 = 0.95;
const COMPLETENESS_GATE: f64 = 0.90;
const FLIP_GATE: f64 = 0.90;
const EDIT_GATE: f64 = 0.80;
const EDIT_CASES: usize = 50;
const GREEDY_PROMPTS: usize = 20;
const CONTINUATION: usize = 4;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, id: u8, name: &'static str, passed: bool, detail: String) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("criterion {id} {name}: {status} ({detail})");
    outcomes.push(Outcome { id, name, passed, detail });
}

fn theory(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let r = verify_theory(50, 10_000, 0).expect("theory verification runs");
    let elapsed = start.elapsed();
    print!("{}", r.render());
    let worst: Vec<String> = r.parts.iter().map(|p| format!("{}={:.1e}", p.name, p.worst)).collect();
    report(
        out,
        1,
        "theorem verification",
        r.all_passed() && elapsed < THEORY_BUDGET,
        format!("{} instances, {:.2}s, {}", r.instances, elapsed.as_secs_f64(), worst.join(" ")),
    );
}

fn gradients(out: &mut Vec<Outcome>, model: &TinyTransformer) {
    let start = Instant::now();
    let r = gradient_fidelity(model, 20, 0).expect("gradient checks run");
    let elapsed = start.elapsed();
    print!("{}", r.render());
    report(
        out,
        2,
        "gradient fidelity",
        r.passed() && r.cases >= 20 && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} cases, closed form {:.1e}, earlier layer {:.1e}, lookahead {:.1e}, {:.1}s",
            r.cases,
            r.closed_form_max_abs,
            r.earlier_layer_max_rel,
            r.lookahead_max_rel,
            elapsed.as_secs_f64()
        ),
    );
}

fn audit(out: &mut Vec<Outcome>) {
    let rows = reported_scores().expect("fixture parses");
    let mut worst = 0.0_f64;
    for r in &rows {
        let h = reliability(r.completeness, r.selectivity).expect("scores in range");
        worst = worst.max((h - r.reliability).abs());
    }
    let headline = rows
        .iter()
        .find(|r| r.group == "main" && r.task == "LGD" && r.method == "HDMI" && r.model == "llama-3-8b-instruct")
        .expect("headline row present");
    let h = reliability(headline.completeness, headline.selectivity).expect("scores in range");
    let headline_ok = (headline.completeness, headline.selectivity) == (0.9412, 0.8117)
        && (h - 0.8716).abs() <= HEADLINE_TOLERANCE;
    report(
        out,
        3,
        "metric audit",
        worst <= HARMONIC_TOLERANCE && headline_ok,
        format!("{} rows, worst |R - harmonic| {worst:.4}, headline harmonic {h:.6} vs 0.8716", rows.len()),
    );
}

fn agreement(out: &PipelineOutput) -> &SuiteReport {
    out.suites.iter().find(|s| s.suite == AGREEMENT).expect("agreement suite ran")
}

fn end_to_end(out: &mut Vec<Outcome>, train_time: Duration, run: &PipelineOutput) {
    let suite = agreement(run);
    let hdmi = run.method(AGREEMENT, "hdmi").expect("hdmi ran");
    report(
        out,
        4,
        "desk-scale end to end",
        train_time < TRAIN_BUDGET
            && suite.clean_accuracy >= CLEAN_ACCURACY_GATE
            && hdmi.test.record.completeness >= COMPLETENESS_GATE
            && hdmi.test.flip_rate >= FLIP_GATE,
        format!(
            "train {:.1}s, clean accuracy {:.4}, hdmi ({}) completeness {:.6}, flip rate {:.4}, n={}",
            train_time.as_secs_f64(),
            suite.clean_accuracy,
            hdmi.best,
            hdmi.test.record.completeness,
            hdmi.test.flip_rate,
            hdmi.test.record.n_samples
        ),
    );
}

/// Both objectives at smaller budgets, where neither saturates. Printed
/// only; the criterion uses the configured grid.
fn ablation_sweep(cfg: &ExperimentConfig, model: &TinyTransformer, suite: &SuiteReport) {
    let clean = capture_clean(model, &suite.examples, cfg.layer_or_last()).expect("clean states");
    let res = InterventionalResources::default();
    println!("budget\thdmi_completeness\ttarget_only_completeness");
    for (alpha, steps) in [(0.01, 1), (0.05, 1), (0.1, 1), (0.1, 5)] {
        let c = |s: Setting| {
            evaluate_setting(cfg, model, AGREEMENT, &suite.examples, &clean, &suite.splits.test, &s, &res, &suite.validation)
                .expect("evaluation runs")
                .record
                .completeness
        };
        let h = c(Setting::Hdmi { alpha, steps });
        let t = c(Setting::TargetOnly { alpha, steps });
        println!("alpha={alpha} steps={steps}\t{h:.6}\t{t:.6}");
    }
}

fn ablation(out: &mut Vec<Outcome>, cfg: &ExperimentConfig, model: &TinyTransformer, run: &PipelineOutput) {
    let h = run.method(AGREEMENT, "hdmi").expect("hdmi ran").test.record.completeness;
    let t = run.method(AGREEMENT, "target_only").expect("target_only ran").test.record.completeness;
    ablation_sweep(cfg, model, agreement(run));
    report(out, 5, "margin vs target-only ablation", h > t, format!("completeness hdmi {h:.9} vs target-only {t:.9}"));
}

fn probe_freeness(out: &mut Vec<Outcome>, cfg: &ExperimentConfig, model: &TinyTransformer, full: &PipelineOutput) {
    let mut small = cfg.clone();
    small.methods = vec!["hdmi".into()];
    small.interventional_limit = Some(10);
    let limited = run_pipeline_with_model(&small, model).expect("limited pipeline runs");
    let a = full.method(AGREEMENT, "hdmi").expect("hdmi ran");
    let b = limited.method(AGREEMENT, "hdmi").expect("hdmi ran");
    let metrics_equal = a.test.record == b.test.record && a.test.flip_rate.to_bits() == b.test.flip_rate.to_bits();
    let records_equal = a.test.records.to_jsonl().expect("records serialize")
        == b.test.records.to_jsonl().expect("records serialize")
        && a.test.records.state_bytes() == b.test.records.state_bytes();
    let interventional = agreement(&limited).splits.interventional.len();
    let no_probe = agreement(&limited).interventional.probe.is_none();
    report(
        out,
        6,
        "probe-freeness",
        metrics_equal && records_equal && interventional == 10 && no_probe,
        format!(
            "interventional split {} -> {interventional}, metrics equal {metrics_equal}, records equal {records_equal}, \
             probe fitted {}",
            agreement(full).splits.interventional.len(),
            !no_probe
        ),
    );
}

/// Continuation of `prompt` by greedy decoding.
fn continuation(model: &TinyTransformer, prompt: &[usize]) -> Vec<usize> {
    model.greedy_decode(prompt, CONTINUATION).expect("decoding runs")[prompt.len()..].to_vec()
}

/// Case `c` edits continuation position `c mod 3` to the runner-up token
/// of the clean next-token logits there.
fn edit_case(model: &TinyTransformer, prompt: &[usize], c: usize) -> (EditSpec, usize, usize) {
    let input = continuation(model, prompt);
    let j = c % 3;
    let mut ctx = prompt.to_vec();
    ctx.extend(&input[..j]);
    let logits = model.forward_logits(&ctx).expect("forward runs");
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]).then(a.cmp(&b)));
    let mut edited = input.clone();
    edited[j] = order[1];
    (EditSpec::new(prompt.to_vec(), input, edited).expect("valid edit"), j, order[1])
}

fn realization_rate(model: &TinyTransformer, cases: &[(EditSpec, usize, usize)], cfg: &EditConfig) -> f64 {
    let hits = cases
        .iter()
        .filter(|(spec, j, target)| la_hdmi_generate(model, spec, cfg).expect("generation runs").tokens[*j] == *target)
        .count();
    hits as f64 / cases.len() as f64
}

fn lookahead(out: &mut Vec<Outcome>, model: &TinyTransformer, suite: &SuiteReport) {
    let prompts = |idx: &[usize]| -> Vec<Vec<usize>> { idx.iter().map(|&i| suite.examples[i].model_input()).collect() };
    let test = prompts(&suite.splits.test);
    let tuning = prompts(&suite.splits.interventional);

    let sharp = EditConfig { beta_f: 0.01, lambda_fact: 1.0, ..Default::default() };
    let matched = test[..GREEDY_PROMPTS]
        .iter()
        .filter(|p| {
            let input = continuation(model, p);
            let spec = EditSpec::new(p.to_vec(), input.clone(), input.clone()).expect("valid spec");
            la_hdmi_generate(model, &spec, &sharp).expect("generation runs").tokens == input
        })
        .count();

    // The ascent budget is picked on interventional-split prompts and
    // reported on test-split prompts.
    let tuning_cases: Vec<_> = tuning[..EDIT_CASES].iter().enumerate().map(|(c, p)| edit_case(model, p, c)).collect();
    let test_cases: Vec<_> =
        test[GREEDY_PROMPTS..GREEDY_PROMPTS + EDIT_CASES].iter().enumerate().map(|(c, p)| edit_case(model, p, c)).collect();
    let grid: Vec<EditConfig> = [(0.5, 10), (1.0, 10), (0.5, 30), (1.0, 30)]
        .into_iter()
        .map(|(step_size, steps)| EditConfig { step_size, steps, ..Default::default() })
        .collect();
    println!("edit_budget\ttuning_realization");
    let mut best = (0, f64::NEG_INFINITY);
    for (i, cfg) in grid.iter().enumerate() {
        let r = realization_rate(model, &tuning_cases, cfg);
        println!("alpha={} steps={}\t{r:.2}", cfg.step_size, cfg.steps);
        if r > best.1 {
            best = (i, r);
        }
    }
    let chosen = grid[best.0];
    let rate = realization_rate(model, &test_cases, &chosen);
    let default_rate = realization_rate(model, &test_cases, &EditConfig::default());
    report(
        out,
        7,
        "lookahead consistency",
        matched == GREEDY_PROMPTS && rate >= EDIT_GATE,
        format!(
            "greedy match {matched}/{GREEDY_PROMPTS}, edits realized {:.0}/{EDIT_CASES} at alpha={} steps={} \
             (default budget {:.0}/{EDIT_CASES})",
            rate * EDIT_CASES as f64,
            chosen.step_size,
            chosen.steps,
            default_rate * EDIT_CASES as f64
        ),
    );
}

fn properties(out: &mut Vec<Outcome>) {
    let props = common::properties();
    let mut failed = Vec::new();
    let mut cases = 0;
    for p in &props {
        cases += p.cases;
        if let Err(e) = p.run(true) {
            println!("property {} failed: {e}", p.name);
            failed.push(p.name);
        }
    }
    report(
        out,
        8,
        "property suites",
        failed.is_empty(),
        format!("{} properties, {cases} generated cases, failed: [{}]", props.len(), failed.join(", ")),
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are harness options; nothing to list
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut out = Vec::new();
    theory(&mut out);
    audit(&mut out);
    properties(&mut out);

    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let (model, _) = train_model(&cfg, &Vocab::standard()).expect("training runs");
    let train_time = start.elapsed();
    let run = run_pipeline_with_model(&cfg, &model).expect("pipeline runs");
    gradients(&mut out, &model);
    end_to_end(&mut out, train_time, &run);
    ablation(&mut out, &cfg, &model, &run);
    probe_freeness(&mut out, &cfg, &model, &run);
    lookahead(&mut out, &model, agreement(&run));

    out.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &out {
        println!("{} {} {}: {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if out.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
