// SPDX-License-Identifier: MIT OR Apache-2.0

//! Result files and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::PipelineOutput;
use crate::error::Result;
use crate::metrics::render_table;
use crate::model::TinyTransformer;
use crate::tasks::{write_dataset, Vocab};

/// Identity and inventory of a run. Paths are relative to the output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub paths: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes every artifact of a run below `dir` and returns the manifest,
/// which is also written as `manifest.json`. Nothing written depends on
/// the clock or the thread count.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, model: &TinyTransformer, out: &PipelineOutput) -> Result<RunManifest> {
    let vocab = Vocab::standard();
    for sub in ["data", "probes", "records"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut paths = BTreeMap::new();
    let mut put = |key: String, rel: String| {
        paths.insert(key, rel);
    };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    put("config".into(), "config.txt".into());
    model.save(&dir.join("model.ckpt"))?;
    put("model".into(), "model.ckpt".into());

    let mut grid = String::from("suite\tmethod\tsetting\treliability\tselected\n");
    let mut flips = String::from("suite\tmethod\tflip_rate\n");
    for s in &out.suites {
        let data = format!("data/{}.tsv", s.suite);
        write_dataset(&dir.join(&data), &vocab, &s.examples)?;
        put(format!("data/{}", s.suite), data);
        for (tag, probe) in [("zc", &s.validation.zc), ("ze", &s.validation.ze)] {
            let rel = format!("probes/{}_{tag}.probe", s.suite);
            probe.save(&dir.join(&rel))?;
            put(format!("probe/{tag}/{}", s.suite), rel);
        }
        if let Some(p) = &s.interventional.probe {
            let rel = format!("probes/{}_interventional.probe", s.suite);
            p.probe.save(&dir.join(&rel))?;
            put(format!("probe/interventional/{}", s.suite), rel);
        }
        for m in &s.methods {
            let base = format!("records/{}_{}", s.suite, m.method);
            m.test.records.write(&dir.join(format!("{base}.jsonl")), &dir.join(format!("{base}.states")))?;
            put(format!("records/{}/{}", s.suite, m.method), format!("{base}.jsonl"));
            for (setting, r) in &m.grid {
                let sel = if *setting == m.best { "yes" } else { "no" };
                grid.push_str(&format!("{}\t{}\t{setting}\t{r:.6}\t{sel}\n", s.suite, m.method));
            }
            flips.push_str(&format!("{}\t{}\t{:.6}\n", s.suite, m.method, m.test.flip_rate));
        }
    }
    let records = out.records();
    fs::write(dir.join("results.tsv"), render_table(&records))?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&r.to_json_line()?);
        jsonl.push('\n');
    }
    fs::write(dir.join("results.jsonl"), jsonl)?;
    fs::write(dir.join("grid.tsv"), grid)?;
    fs::write(dir.join("flips.tsv"), flips)?;
    for f in ["results.tsv", "results.jsonl", "grid.tsv", "flips.tsv"] {
        put(f.into(), f.into());
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: out.seeds.clone(),
        paths,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
