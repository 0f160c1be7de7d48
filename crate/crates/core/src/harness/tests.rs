// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::error::Error;
use crate::metrics::reliability;
use crate::model::{ModelConfig, TinyTransformer};

#[test]
fn config_roundtrip_and_errors() {
    let cfg = ExperimentConfig::parse("# comment\nepsilon = {0.5, 1, 10}\nmethods = hdmi, fgsm\nseed = 7\n").unwrap();
    assert_eq!(cfg.epsilon, vec![0.5, 1.0, 10.0]);
    assert_eq!(cfg.methods, vec!["hdmi", "fgsm"]);
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(cfg.hash(), ExperimentConfig::parse(&cfg.to_text()).unwrap().hash());
    let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
    assert_eq!(moved.hash(), cfg.hash());
    assert_ne!(ExperimentConfig { seed: 8, ..cfg.clone() }.hash(), cfg.hash());
    for bad in ["nope = 1", "epsilon = ", "methods = hdmi,magic", "suites = x", "inlp_rank = 64", "layer = 3", "seed"] {
        assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
    }
    let d = ExperimentConfig::default();
    assert_eq!((d.hdmi_alpha.clone(), d.hdmi_inner_steps.clone()), (vec![1.0], vec![30]));
    assert_eq!(d.pgd_steps, vec![40, 50, 100]);
}

#[test]
fn seeds_are_stable_and_distinct() {
    assert_eq!(derive_seed(3, "lm_train"), derive_seed(3, "lm_train"));
    assert_ne!(derive_seed(3, "lm_train"), derive_seed(4, "lm_train"));
    assert_ne!(derive_seed(3, "lm_train"), derive_seed(3, "lm_corpus"));
    let seeds = stage_seeds(&ExperimentConfig::default());
    let mut values: Vec<u64> = seeds.values().copied().collect();
    values.sort_unstable();
    values.dedup();
    assert_eq!(values.len(), seeds.len());
}

#[test]
fn grid_search_argmax_first_on_tie() {
    let (best, scores) = grid_search(&[0.3, 0.9, 0.9, 0.1], |&x| Ok(x)).unwrap();
    assert_eq!(best, 1);
    assert_eq!(scores, vec![0.3, 0.9, 0.9, 0.1]);
    assert_eq!(grid_search(&[5.0], |&x| Ok(x)).unwrap().0, 0);
    assert!(grid_search::<f64>(&[], |&x| Ok(x)).is_err());
    let cfg = ExperimentConfig::default();
    let fgsm = method_grid(&cfg, "fgsm").unwrap();
    assert_eq!(fgsm.len(), 3);
    let (best, _) = grid_search(&fgsm, |s| Ok(if let Setting::Fgsm { epsilon } = s { -epsilon } else { 0.0 })).unwrap();
    assert_eq!(fgsm[best], Setting::Fgsm { epsilon: 0.5 });
    assert_eq!(method_grid(&cfg, "pgd").unwrap().len(), 9);
    assert_eq!(method_grid(&cfg, "alterrep").unwrap().len(), 4);
    assert!(method_grid(&cfg, "x").is_err());
}

#[test]
fn gradient_fidelity_on_random_model() {
    let model = TinyTransformer::new(ModelConfig {
        vocab_size: 20,
        hidden_size: 16,
        embed_size: 16,
        layers: 2,
        heads: 2,
        max_seq_len: 24,
        seed: 3,
    })
    .unwrap();
    let r = gradient_fidelity(&model, 6, 1).unwrap();
    assert!(r.passed(), "{}", r.render());
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "hidden_size = 64\nheads = 4\nlm_sentences = 2000\nlm_epochs = 2\nexamples_per_suite = 300\n\
         inlp_rank = 4\nalterrep_inlp_rank_apply = 4\ninlp_epochs = 20\npgd_steps = 5\nepsilon = 0.5, 1\n\
         probe_epochs = 150\nprobe_hidden = 32\nhdmi_inner_steps = 5\noutput_dir = {}\n",
        dir.display()
    ))
    .unwrap()
}

#[test]
fn small_pipeline_is_consistent_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (model, out) = match run_pipeline(&cfg) {
        Ok(r) => r,
        Err(Error::ProbeGate(m)) => panic!("interventional probe gate failed on the small model: {m}"),
        Err(e) => panic!("{e}"),
    };
    let records = out.records();
    assert_eq!(records.len(), 5);
    for r in &records {
        for v in [r.completeness, r.selectivity, r.reliability] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((r.reliability - reliability(r.completeness, r.selectivity).unwrap()).abs() < 1e-6);
    }
    for m in &out.suites[0].methods {
        let best = m.grid.iter().find(|(s, _)| *s == m.best).unwrap().1;
        assert!(m.grid.iter().all(|(_, r)| *r <= best));
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let manifest = write_run(&a, &cfg, &model, &out).unwrap();
    let (model2, out2) = run_pipeline(&cfg).unwrap();
    write_run(&b, &cfg, &model2, &out2).unwrap();
    for rel in manifest.paths.values() {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    assert_eq!(RunManifest::read(&a.join("manifest.json")).unwrap(), manifest);
    assert!(manifest.seeds.contains_key("lm_train"));
}

#[test]
fn margin_only_run_fits_no_interventional_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.methods = vec!["hdmi".into()];
    cfg.interventional_limit = Some(3);
    let (model, out) = run_pipeline(&cfg).unwrap();
    let suite = &out.suites[0];
    assert!(suite.interventional.probe.is_none() && suite.interventional.inlp.is_empty());
    assert_eq!(suite.splits.interventional.len(), 3);
    let iv = Intervener::build(&cfg, &suite.methods[0].best, &suite.interventional, 2).unwrap();
    assert!(iv.probe_handle().is_none());
    let full = run_pipeline_with_model(&ExperimentConfig { interventional_limit: None, ..cfg.clone() }, &model).unwrap();
    assert_eq!(full.records(), out.records());
}
