// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat `key = value` experiment configuration.
//!
//! Lists are comma separated and may be wrapped in braces, so
//! `epsilon = {0.5, 1, 10}` and `epsilon = 0.5,1,10` are the same.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `suites` | `agreement` | suites to run |
//! | `methods` | all five | subset of `hdmi, target_only, fgsm, pgd, alterrep` |
//! | `examples_per_suite` | 600 | generated examples per suite (even) |
//! | `split_fractions` | `0.4, 0.3, 0.3` | interventional, validation-probe, test |
//! | `interventional_limit` | none | keep only the first n interventional examples |
//! | `layer` | last | intervention and probing layer |
//! | `hidden_size`, `layers`, `heads`, `max_seq_len` | 64, 2, 4, 32 | model shape |
//! | `lm_sentences`, `lm_epochs`, `lm_lr`, `lm_weight_decay`, `lm_batch_size` | 4000, 3, 1e-3, 1e-6, 16 | LM training |
//! | `hdmi_alpha`, `hdmi_inner_steps` | 1, 30 | margin ascent grid |
//! | `epsilon`, `gbi_norm`, `pgd_steps` | `{0.5, 1, 10}`, `linf`, `{40, 50, 100}` | FGSM/PGD grid |
//! | `inlp_rank`, `inlp_epochs`, `inlp_lr` | 32, `{50, 100}`, 1e-2 | nullspace projection |
//! | `alterrep_alpha`, `alterrep_inlp_rank_apply` | `{0.1, 0.5}`, 32 | AlterRep |
//! | `probe_epochs`, `probe_lr`, `probe_weight_decay`, `probe_batch_size`, `probe_hidden` | `{75, 100}`, 1e-2, 1e-6, 256, 256 | interventional probe |
//! | `validation_probe` | `linear` | validation probe kind |
//! | `output_dir` | `runs/default` | where artifacts go |
//! | `seed` | 0 | master seed |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::Norm;
use crate::model::ModelConfig;
use crate::probes::ProbeKind;
use crate::tasks::{AGREEMENT, CAUSALGYM_SUITES};

pub const METHODS: [&str; 5] = ["hdmi", "target_only", "fgsm", "pgd", "alterrep"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub suites: Vec<String>,
    pub methods: Vec<String>,
    pub examples_per_suite: usize,
    pub split_fractions: [f64; 3],
    pub interventional_limit: Option<usize>,
    pub layer: Option<usize>,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub lm_sentences: usize,
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub lm_weight_decay: f64,
    pub lm_batch_size: usize,
    pub hdmi_alpha: Vec<f64>,
    pub hdmi_inner_steps: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub gbi_norm: Norm,
    pub pgd_steps: Vec<usize>,
    pub inlp_rank: usize,
    pub inlp_epochs: Vec<usize>,
    pub inlp_lr: f64,
    pub alterrep_alpha: Vec<f64>,
    pub alterrep_inlp_rank_apply: usize,
    pub probe_epochs: Vec<usize>,
    pub probe_lr: f64,
    pub probe_weight_decay: f64,
    pub probe_batch_size: usize,
    pub probe_hidden: usize,
    pub validation_probe: ProbeKind,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suites: vec![AGREEMENT.to_string()],
            methods: METHODS.iter().map(|m| m.to_string()).collect(),
            examples_per_suite: 600,
            split_fractions: [0.4, 0.3, 0.3],
            interventional_limit: None,
            layer: None,
            hidden_size: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 32,
            lm_sentences: 4000,
            lm_epochs: 3,
            lm_lr: 1e-3,
            lm_weight_decay: 1e-6,
            lm_batch_size: 16,
            hdmi_alpha: vec![1.0],
            hdmi_inner_steps: vec![30],
            epsilon: vec![0.5, 1.0, 10.0],
            gbi_norm: Norm::LInf,
            pgd_steps: vec![40, 50, 100],
            inlp_rank: 32,
            inlp_epochs: vec![50, 100],
            inlp_lr: 1e-2,
            alterrep_alpha: vec![0.1, 0.5],
            alterrep_inlp_rank_apply: 32,
            probe_epochs: vec![75, 100],
            probe_lr: 1e-2,
            probe_weight_decay: 1e-6,
            probe_batch_size: 256,
            probe_hidden: 256,
            validation_probe: ProbeKind::Linear,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let inner = v.trim().trim_start_matches('{').trim_end_matches('}');
    inner.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_one(key, s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Starts from the defaults and applies every `key = value` line;
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "suites" => self.suites = parse_list(key, v)?,
            "methods" => self.methods = parse_list(key, v)?,
            "examples_per_suite" => self.examples_per_suite = parse_one(key, v)?,
            "split_fractions" => {
                let f: Vec<f64> = parse_list(key, v)?;
                self.split_fractions = f
                    .try_into()
                    .map_err(|_| Error::Config("`split_fractions` needs exactly three values".into()))?;
            }
            "interventional_limit" => {
                self.interventional_limit = if v == "none" { None } else { Some(parse_one(key, v)?) }
            }
            "layer" => self.layer = if v == "last" { None } else { Some(parse_one(key, v)?) },
            "hidden_size" => self.hidden_size = parse_one(key, v)?,
            "layers" => self.layers = parse_one(key, v)?,
            "heads" => self.heads = parse_one(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_one(key, v)?,
            "lm_sentences" => self.lm_sentences = parse_one(key, v)?,
            "lm_epochs" => self.lm_epochs = parse_one(key, v)?,
            "lm_lr" => self.lm_lr = parse_one(key, v)?,
            "lm_weight_decay" => self.lm_weight_decay = parse_one(key, v)?,
            "lm_batch_size" => self.lm_batch_size = parse_one(key, v)?,
            "hdmi_alpha" => self.hdmi_alpha = parse_list(key, v)?,
            "hdmi_inner_steps" => self.hdmi_inner_steps = parse_list(key, v)?,
            "epsilon" => self.epsilon = parse_list(key, v)?,
            "gbi_norm" => self.gbi_norm = Norm::parse(v)?,
            "pgd_steps" => self.pgd_steps = parse_list(key, v)?,
            "inlp_rank" => self.inlp_rank = parse_one(key, v)?,
            "inlp_epochs" => self.inlp_epochs = parse_list(key, v)?,
            "inlp_lr" => self.inlp_lr = parse_one(key, v)?,
            "alterrep_alpha" => self.alterrep_alpha = parse_list(key, v)?,
            "alterrep_inlp_rank_apply" => self.alterrep_inlp_rank_apply = parse_one(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_list(key, v)?,
            "probe_lr" => self.probe_lr = parse_one(key, v)?,
            "probe_weight_decay" => self.probe_weight_decay = parse_one(key, v)?,
            "probe_batch_size" => self.probe_batch_size = parse_one(key, v)?,
            "probe_hidden" => self.probe_hidden = parse_one(key, v)?,
            "validation_probe" => self.validation_probe = ProbeKind::parse(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse_one(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.suites.is_empty() || self.methods.is_empty() {
            return bad("suites and methods must be nonempty".into());
        }
        for s in &self.suites {
            if s != AGREEMENT && !CAUSALGYM_SUITES.contains(&s.as_str()) {
                return bad(format!("unknown suite `{s}`"));
            }
        }
        for m in &self.methods {
            if !METHODS.contains(&m.as_str()) {
                return bad(format!("unknown method `{m}`"));
            }
        }
        let grids = [
            ("hdmi_alpha", self.hdmi_alpha.len()),
            ("hdmi_inner_steps", self.hdmi_inner_steps.len()),
            ("epsilon", self.epsilon.len()),
            ("pgd_steps", self.pgd_steps.len()),
            ("inlp_epochs", self.inlp_epochs.len()),
            ("alterrep_alpha", self.alterrep_alpha.len()),
            ("probe_epochs", self.probe_epochs.len()),
        ];
        if let Some((name, _)) = grids.iter().find(|(_, n)| *n == 0) {
            return bad(format!("grid `{name}` is empty"));
        }
        if self.inlp_rank >= self.hidden_size || self.alterrep_inlp_rank_apply > self.inlp_rank {
            return bad(format!(
                "need alterrep_inlp_rank_apply ({}) <= inlp_rank ({}) < hidden_size ({})",
                self.alterrep_inlp_rank_apply, self.inlp_rank, self.hidden_size
            ));
        }
        if let Some(l) = self.layer {
            if l == 0 || l > self.layers {
                return bad(format!("layer {l} outside 1..={}", self.layers));
            }
        }
        if self.epsilon.iter().any(|&e| !(e > 0.0)) || self.hdmi_alpha.iter().any(|&a| !(a >= 0.0)) {
            return bad("epsilon must be positive and hdmi_alpha nonnegative".into());
        }
        if self.examples_per_suite < 2 || self.lm_sentences == 0 || self.lm_epochs == 0 {
            return bad("examples_per_suite, lm_sentences and lm_epochs are too small".into());
        }
        self.model_config(4)?.validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            embed_size: self.hidden_size,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
            seed: derive_seed(self.seed, "model_init"),
        };
        Ok(cfg)
    }

    pub fn layer_or_last(&self) -> usize {
        self.layer.unwrap_or(self.layers)
    }

    /// Canonical text: every key in a fixed order. Parsing it gives back
    /// the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("suites", self.suites.join(","));
        kv("methods", self.methods.join(","));
        kv("examples_per_suite", self.examples_per_suite.to_string());
        kv("split_fractions", join(&self.split_fractions));
        kv("interventional_limit", self.interventional_limit.map_or("none".into(), |n| n.to_string()));
        kv("layer", self.layer.map_or("last".into(), |n| n.to_string()));
        kv("hidden_size", self.hidden_size.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("lm_sentences", self.lm_sentences.to_string());
        kv("lm_epochs", self.lm_epochs.to_string());
        kv("lm_lr", self.lm_lr.to_string());
        kv("lm_weight_decay", self.lm_weight_decay.to_string());
        kv("lm_batch_size", self.lm_batch_size.to_string());
        kv("hdmi_alpha", join(&self.hdmi_alpha));
        kv("hdmi_inner_steps", join(&self.hdmi_inner_steps));
        kv("epsilon", join(&self.epsilon));
        kv("gbi_norm", self.gbi_norm.name().into());
        kv("pgd_steps", join(&self.pgd_steps));
        kv("inlp_rank", self.inlp_rank.to_string());
        kv("inlp_epochs", join(&self.inlp_epochs));
        kv("inlp_lr", self.inlp_lr.to_string());
        kv("alterrep_alpha", join(&self.alterrep_alpha));
        kv("alterrep_inlp_rank_apply", self.alterrep_inlp_rank_apply.to_string());
        kv("probe_epochs", join(&self.probe_epochs));
        kv("probe_lr", self.probe_lr.to_string());
        kv("probe_weight_decay", self.probe_weight_decay.to_string());
        kv("probe_batch_size", self.probe_batch_size.to_string());
        kv("probe_hidden", self.probe_hidden.to_string());
        kv("validation_probe", self.validation_probe.name().into());
        kv("output_dir", self.output_dir.display().to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// SHA-256 of [`Self::to_text`] without the output directory, so moving
    /// a run does not change its identity.
    pub fn hash(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("output_dir")).collect::<Vec<_>>().join("\n");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Per-stage seed: the first eight bytes of `SHA-256("{master}/{stage}")`,
/// little endian.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}/{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
