// SPDX-License-Identifier: MIT OR Apache-2.0

//! `hdmi` command line: every pipeline stage as a subcommand.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hdmi_core::harness::{
    capture_clean, clean_accuracy, evaluate_setting, fit_inlp, fit_interventional_probe, fit_validation_probes,
    generate_suite, gradient_fidelity, method_grid, run_pipeline, run_pipeline_with_model, split_suite, train_model,
    write_run, ExperimentConfig, InterventionalResources, ValidationProbes,
};
use hdmi_core::lookahead::{la_hdmi_generate, EditConfig, EditSpec};
use hdmi_core::metrics::{render_table, TSV_HEADER};
use hdmi_core::model::TinyTransformer;
use hdmi_core::probes::ProbeModel;
use hdmi_core::tasks::{vocab::BOS, write_dataset, LabeledExample, Vocab};
use hdmi_core::theory::verify_theory;
use hdmi_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hdmi", version, about = "Logit-margin hidden-state interventions on a tiny transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file; missing keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epsilon=0.5,1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("`{kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate every suite and its splits as TSV files.
    GenData(ConfigArgs),
    /// Train the language model and save `model.ckpt`.
    Train(ConfigArgs),
    /// Fit the validation and interventional probes on a trained model.
    FitProbes(ConfigArgs),
    /// Run one method's grid on one split and write per-sample records.
    Intervene {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "agreement")]
        suite: String,
        /// `interventional` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Regenerate a continuation under token edits with lookahead ascent.
    Edit(EditArgs),
    /// Every stage after training, using the saved model.
    Evaluate(ConfigArgs),
    /// Check the margin-gain identities on random affine heads.
    VerifyTheory {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 10_000)]
        directions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic, backward-pass and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Train, evaluate, verify the theory and check gradients.
    RunAll(ConfigArgs),
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Context before the regenerated span (BOS is prepended).
    #[arg(long, default_value = "")]
    prompt: String,
    /// The original continuation.
    #[arg(long)]
    input: String,
    /// The continuation with single-token substitutions.
    #[arg(long)]
    edited: String,
    #[arg(long, default_value_t = EditConfig::default().horizon)]
    horizon: usize,
    #[arg(long, default_value_t = EditConfig::default().beta_f)]
    beta_f: f64,
    #[arg(long, default_value_t = EditConfig::default().beta_g)]
    beta_g: f64,
    #[arg(long, default_value_t = EditConfig::default().lambda_fact)]
    lambda_fact: f64,
    #[arg(long, default_value_t = EditConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = EditConfig::default().steps)]
    steps: usize,
}

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("model.ckpt")
}

fn load_model(cfg: &ExperimentConfig) -> Result<TinyTransformer> {
    let path = model_path(cfg);
    TinyTransformer::load(&path).map_err(|e| Error::Input(format!("cannot load {} ({e}); run `hdmi train` first", path.display())))
}

fn subset(examples: &[LabeledExample], idx: &[usize]) -> Vec<LabeledExample> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

fn gen_data(cfg: &ExperimentConfig) -> Result<bool> {
    let vocab = Vocab::standard();
    let dir = cfg.output_dir.join("data");
    fs::create_dir_all(&dir)?;
    println!("suite\tsplit\tn\tpath");
    for suite in &cfg.suites {
        let examples = generate_suite(cfg, &vocab, suite)?;
        let splits = split_suite(cfg, suite, &examples)?;
        let all = dir.join(format!("{suite}.tsv"));
        write_dataset(&all, &vocab, &examples)?;
        println!("{suite}\tall\t{}\t{}", examples.len(), all.display());
        for (name, idx) in
            [("interventional", &splits.interventional), ("validation_probe", &splits.validation_probe), ("test", &splits.test)]
        {
            let p = dir.join(format!("{suite}.{name}.tsv"));
            write_dataset(&p, &vocab, &subset(&examples, idx))?;
            println!("{suite}\t{name}\t{}\t{}", idx.len(), p.display());
        }
    }
    Ok(true)
}

fn train(cfg: &ExperimentConfig) -> Result<bool> {
    let vocab = Vocab::standard();
    let start = Instant::now();
    let (model, report) = train_model(cfg, &vocab)?;
    let secs = start.elapsed().as_secs_f64();
    fs::create_dir_all(&cfg.output_dir)?;
    model.save(&model_path(cfg))?;
    println!("train_seconds\t{secs:.1}");
    println!("final_loss\t{:.4}", report.tail_mean(50));
    println!("suite\tclean_accuracy");
    for suite in &cfg.suites {
        let examples = generate_suite(cfg, &vocab, suite)?;
        let clean = capture_clean(&model, &examples, cfg.layer_or_last())?;
        println!("{suite}\t{:.4}", clean_accuracy(&examples, &clean));
    }
    println!("model\t{}", model_path(cfg).display());
    Ok(true)
}

fn fit_probes(cfg: &ExperimentConfig) -> Result<bool> {
    let vocab = Vocab::standard();
    let model = load_model(cfg)?;
    let dir = cfg.output_dir.join("probes");
    fs::create_dir_all(&dir)?;
    println!("suite\tprobe\tkind\tholdout_accuracy\tretried\tpath");
    for suite in &cfg.suites {
        let examples = generate_suite(cfg, &vocab, suite)?;
        let splits = split_suite(cfg, suite, &examples)?;
        let clean = capture_clean(&model, &examples, cfg.layer_or_last())?;
        let val = fit_validation_probes(cfg, suite, &examples, &clean, &splits)?;
        for (tag, p) in [("zc", &val.zc), ("ze", &val.ze)] {
            let path = dir.join(format!("{suite}_{tag}.probe"));
            p.save(&path)?;
            println!("{suite}\t{tag}\t{}\t{:.4}\tno\t{}", p.kind.name(), p.holdout_accuracy, path.display());
        }
        let gated = fit_interventional_probe(cfg, suite, &examples, &clean, &splits)?;
        let path = dir.join(format!("{suite}_interventional.probe"));
        gated.probe.save(&path)?;
        let retried = if gated.retried { "yes" } else { "no" };
        println!(
            "{suite}\tinterventional\t{}\t{:.4}\t{retried}\t{}",
            gated.probe.kind.name(),
            gated.probe.holdout_accuracy,
            path.display()
        );
    }
    Ok(true)
}

/// Saved validation probes when present, otherwise refitted with the same
/// seeds.
fn validation_probes(
    cfg: &ExperimentConfig,
    suite: &str,
    examples: &[LabeledExample],
    clean: &hdmi_core::harness::CleanStates,
    splits: &hdmi_core::tasks::SplitSpec,
) -> Result<ValidationProbes> {
    let dir = cfg.output_dir.join("probes");
    let (zc, ze) = (dir.join(format!("{suite}_zc.probe")), dir.join(format!("{suite}_ze.probe")));
    if zc.exists() && ze.exists() {
        return Ok(ValidationProbes { zc: ProbeModel::load(&zc)?, ze: ProbeModel::load(&ze)? });
    }
    fit_validation_probes(cfg, suite, examples, clean, splits)
}

fn intervene(cfg: &ExperimentConfig, method: &str, suite: &str, split: &str) -> Result<bool> {
    if !cfg.suites.iter().any(|s| s == suite) {
        return Err(Error::Config(format!("suite `{suite}` is not in the configuration")));
    }
    let vocab = Vocab::standard();
    let model = load_model(cfg)?;
    let examples = generate_suite(cfg, &vocab, suite)?;
    let splits = split_suite(cfg, suite, &examples)?;
    let idx = match split {
        "interventional" => &splits.interventional,
        "test" => &splits.test,
        _ => return Err(Error::Config(format!("split must be `interventional` or `test`, not `{split}`"))),
    };
    let clean = capture_clean(&model, &examples, cfg.layer_or_last())?;
    let val = validation_probes(cfg, suite, &examples, &clean, &splits)?;
    let grid = method_grid(cfg, method)?;
    let mut res = InterventionalResources::default();
    if method == "fgsm" || method == "pgd" {
        res.probe = Some(fit_interventional_probe(cfg, suite, &examples, &clean, &splits)?);
    }
    if method == "alterrep" {
        for &e in &cfg.inlp_epochs {
            res.inlp.insert(e, fit_inlp(cfg, suite, &examples, &clean, &splits, e)?);
        }
    }
    let dir = cfg.output_dir.join("records");
    fs::create_dir_all(&dir)?;
    println!("setting\t{TSV_HEADER}\tflip_rate\trecords");
    for (i, setting) in grid.iter().enumerate() {
        let ev = evaluate_setting(cfg, &model, suite, &examples, &clean, idx, setting, &res, &val)?;
        let base = dir.join(format!("{suite}_{method}_{split}_{i}"));
        let (jsonl, states) = (base.with_extension("jsonl"), base.with_extension("states"));
        ev.records.write(&jsonl, &states)?;
        println!("{setting}\t{}\t{:.6}\t{}", ev.record.to_tsv_row(), ev.flip_rate, jsonl.display());
    }
    Ok(true)
}

fn edit(args: &EditArgs) -> Result<bool> {
    let cfg = args.cfg.load()?;
    let vocab = Vocab::standard();
    let model = load_model(&cfg)?;
    let mut prefix = vec![BOS];
    prefix.extend(vocab.encode(&args.prompt)?);
    let spec = EditSpec::new(prefix, vocab.encode(&args.input)?, vocab.encode(&args.edited)?)?;
    let ec = EditConfig {
        horizon: args.horizon,
        beta_f: args.beta_f,
        beta_g: args.beta_g,
        lambda_fact: args.lambda_fact,
        step_size: args.step_size,
        steps: args.steps,
    };
    let out = la_hdmi_generate(&model, &spec, &ec)?;
    for d in &out.steps {
        let top3: Vec<_> =
            d.top3.iter().map(|&(t, p)| json!({"token": vocab.word(t).unwrap_or("?"), "p": p})).collect();
        let line = json!({
            "step": d.step,
            "objective_before": d.objective_before,
            "objective_after": d.objective_after,
            "gradient_norm": d.gradient_norm,
            "display_token": vocab.word(d.display_token)?,
            "top3": top3,
            "edit_margin": d.edit_margin,
        });
        println!("{line}");
    }
    println!("generated\t{}", vocab.decode(&out.tokens)?);
    Ok(true)
}

fn evaluate(cfg: &ExperimentConfig) -> Result<bool> {
    let model = load_model(cfg)?;
    let out = run_pipeline_with_model(cfg, &model)?;
    report_run(cfg, &model, &out)?;
    Ok(true)
}

fn report_run(cfg: &ExperimentConfig, model: &TinyTransformer, out: &hdmi_core::harness::PipelineOutput) -> Result<()> {
    let manifest = write_run(&cfg.output_dir, cfg, model, out)?;
    print!("{}", render_table(&out.records()));
    println!("suite\tclean_accuracy\tmethod\tbest_setting\tflip_rate");
    for s in &out.suites {
        for m in &s.methods {
            println!("{}\t{:.4}\t{}\t{}\t{:.4}", s.suite, s.clean_accuracy, m.method, m.best, m.test.flip_rate);
        }
    }
    println!("manifest\t{}\tconfig_hash\t{}", cfg.output_dir.join("manifest.json").display(), manifest.config_hash);
    Ok(())
}

fn theory(instances: usize, directions: usize, seed: u64) -> Result<bool> {
    let start = Instant::now();
    let report = verify_theory(instances, directions, seed)?;
    print!("{}", report.render());
    println!("seconds\t{:.2}", start.elapsed().as_secs_f64());
    Ok(report.all_passed())
}

fn gradcheck(cfg: &ExperimentConfig, cases: usize) -> Result<bool> {
    let path = model_path(cfg);
    let model = if path.exists() {
        TinyTransformer::load(&path)?
    } else {
        eprintln!("no checkpoint at {}; checking a freshly initialized model", path.display());
        TinyTransformer::new(cfg.model_config(Vocab::standard().len())?)?
    };
    let report = gradient_fidelity(&model, cases, cfg.seed)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn run_all(cfg: &ExperimentConfig) -> Result<bool> {
    let start = Instant::now();
    let (model, out) = run_pipeline(cfg)?;
    println!("pipeline_seconds\t{:.1}", start.elapsed().as_secs_f64());
    report_run(cfg, &model, &out)?;
    let theory_ok = theory(50, 10_000, cfg.seed)?;
    let report = gradient_fidelity(&model, 20, cfg.seed)?;
    print!("{}", report.render());
    Ok(theory_ok && report.passed())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => gen_data(&a.load()?),
        Command::Train(a) => train(&a.load()?),
        Command::FitProbes(a) => fit_probes(&a.load()?),
        Command::Intervene { cfg, method, suite, split } => intervene(&cfg.load()?, method, suite, split),
        Command::Edit(a) => edit(a),
        Command::Evaluate(a) => evaluate(&a.load()?),
        Command::VerifyTheory { instances, directions, seed } => theory(*instances, *directions, *seed),
        Command::Gradcheck { cfg, cases } => gradcheck(&cfg.load()?, *cases),
        Command::RunAll(a) => run_all(&a.load()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
