// SPDX-License-Identifier: MIT OR Apache-2.0

//! Completeness, selectivity and reliability of an intervention, read
//! from validation-probe posteriors.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` when validating distributions.
pub const SUM_TOLERANCE: f64 = 1e-6;

static SELECTIVITY_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// How many selectivity values were clamped up to 0 so far.
pub fn selectivity_clamp_count() -> usize {
    SELECTIVITY_CLAMPS.load(Ordering::Relaxed)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Input("empty distribution".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Input(format!("distribution has negative or non-finite entries: {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Input(format!("distribution sums to {s}")));
    }
    Ok(())
}

/// `½‖p − q‖₁`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// `1 − d_TV(p_after, e_z')`.
pub fn completeness(p_after: &[f64], zprime: usize) -> Result<f64> {
    if zprime >= p_after.len() {
        return Err(Error::Input(format!("class {zprime} outside {} classes", p_after.len())));
    }
    let mut target = vec![0.0; p_after.len()];
    target[zprime] = 1.0;
    Ok(1.0 - tv_distance(p_after, &target)?)
}

/// `max{1 − min_i p_i, max_i p_i}`, the largest TV shift any distribution
/// can have from `p`.
pub fn max_tv_shift(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    if p.len() < 2 {
        return Err(Error::DegenerateLabels("max TV shift needs at least two classes".into()));
    }
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((1.0 - min).max(max))
}

/// `1 − d_TV(p_after, p_before)/m(p_before)`, clamped to `[0, 1]`.
pub fn selectivity(p_before: &[f64], p_after: &[f64]) -> Result<f64> {
    let m = max_tv_shift(p_before)?;
    let s = 1.0 - tv_distance(p_after, p_before)? / m;
    if s < 0.0 {
        SELECTIVITY_CLAMPS.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    Ok(s.min(1.0))
}

/// Harmonic mean; 0 when both are 0.
pub fn reliability(comp: f64, sel: f64) -> Result<f64> {
    for (name, v) in [("completeness", comp), ("selectivity", sel)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{name} {v} outside [0, 1]")));
        }
    }
    if comp + sel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * comp * sel / (comp + sel))
}

/// Per-sample scores before aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    pub completeness: f64,
    pub selectivity: f64,
}

impl SampleScores {
    pub fn from_posteriors(
        zc_after: &[f64],
        zprime: usize,
        ze_before: &[f64],
        ze_after: &[f64],
    ) -> Result<Self> {
        Ok(Self { completeness: completeness(zc_after, zprime)?, selectivity: selectivity(ze_before, ze_after)? })
    }
}

/// One `(task, method)` row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: String,
    pub method: String,
    pub completeness: f64,
    pub selectivity: f64,
    pub reliability: f64,
    pub n_samples: usize,
}

pub const TSV_HEADER: &str = "task\tmethod\tcompleteness\tselectivity\treliability\tn_samples";

impl MetricsRecord {
    /// Unweighted means of the per-sample scores; reliability is the
    /// harmonic mean of the two means. Samples are summed in order so the
    /// result does not depend on how they were computed.
    pub fn aggregate(task: &str, method: &str, samples: &[SampleScores]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input(format!("no samples to aggregate for {task}/{method}")));
        }
        let n = samples.len() as f64;
        let completeness = (samples.iter().map(|s| s.completeness).sum::<f64>() / n).clamp(0.0, 1.0);
        let selectivity = (samples.iter().map(|s| s.selectivity).sum::<f64>() / n).clamp(0.0, 1.0);
        Ok(Self {
            task: task.to_string(),
            method: method.to_string(),
            completeness,
            selectivity,
            reliability: reliability(completeness, selectivity)?,
            n_samples: samples.len(),
        })
    }

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.task, self.method, self.completeness, self.selectivity, self.reliability, self.n_samples
        )
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut s = String::from(TSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_tsv_row());
        s.push('\n');
    }
    s
}

/// A published `(C, S, R)` triple kept as fixture data for arithmetic
/// audits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportedRow {
    pub group: String,
    pub task: String,
    pub method: String,
    pub model: String,
    pub completeness: f64,
    pub selectivity: f64,
    pub reliability: f64,
}

const REPORTED: &str = include_str!("reported_scores.tsv");

pub fn reported_scores() -> Result<Vec<ReportedRow>> {
    REPORTED
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("fixture row with {} fields: {l}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
            Ok(ReportedRow {
                group: f[0].into(),
                task: f[1].into(),
                method: f[2].into(),
                model: f[3].into(),
                completeness: num(f[4])?,
                selectivity: num(f[5])?,
                reliability: num(f[6])?,
            })
        })
        .collect()
}
