// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic labeled suites, the Z_e heuristic, splits and independence
//! subsampling.

mod suites;
pub mod vocab;

pub use suites::{
    gen_agreement_suite, gen_causalgym_suite, gen_minimal_pairs, gen_suite, label_agreement, lm_corpus, pair_capacity, AGREEMENT,
    CAUSALGYM_SUITES,
};
pub use vocab::Vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use vocab::{BOS, NAMES, NOUNS, PREPOSITIONS};

/// Tokens scanned backwards by [`assign_ze`].
pub const ZE_WINDOW: usize = 12;

/// One prediction site with its source/target continuation and labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledExample {
    /// Tokens up to (excluding) the prediction site, without `<bos>`.
    pub prompt: Vec<usize>,
    /// `v_a`: the continuation the clean model should prefer.
    pub source_token: usize,
    /// `v_b`: the counterfactual continuation.
    pub target_token: usize,
    pub z_c: usize,
    pub z_e: usize,
    pub suite: String,
}

impl LabeledExample {
    /// `<bos>` followed by the prompt.
    pub fn model_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.prompt.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.prompt);
        v
    }

    /// Counterfactual Z_c value; every property here is binary.
    pub fn counterfactual_zc(&self) -> usize {
        1 - self.z_c
    }
}

/// Two prompts identical except for the Z_c tokens, with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub x_src: Vec<usize>,
    pub x_cf: Vec<usize>,
    pub y_src: usize,
    pub y_cf: usize,
}

impl MinimalPair {
    /// Both role assignments: `(x_src, v_a = y_src, v_b = y_cf, z_c = 0)` and
    /// `(x_cf, v_a = y_cf, v_b = y_src, z_c = 1)`.
    pub fn into_examples(self, vocab: &Vocab, suite: &str) -> [LabeledExample; 2] {
        let z_e = assign_ze(vocab, &self.x_src);
        [
            LabeledExample {
                z_e,
                prompt: self.x_src,
                source_token: self.y_src,
                target_token: self.y_cf,
                z_c: 0,
                suite: suite.to_string(),
            },
            LabeledExample {
                z_e,
                prompt: self.x_cf,
                source_token: self.y_cf,
                target_token: self.y_src,
                z_c: 1,
                suite: suite.to_string(),
            },
        ]
    }
}

/// Preposition family of the most recent preposition among the last
/// [`ZE_WINDOW`] tokens: 0 none, 1 `of`, 2 `in`, 3 `with`/`by`, 4 other.
pub fn assign_ze(vocab: &Vocab, prompt: &[usize]) -> usize {
    let start = prompt.len().saturating_sub(ZE_WINDOW);
    for &t in prompt[start..].iter().rev() {
        let Ok(w) = vocab.word(t) else { continue };
        match w {
            "of" => return 1,
            "in" => return 2,
            "with" | "by" => return 3,
            _ if PREPOSITIONS.contains(&w) => return 4,
            _ => {}
        }
    }
    0
}

/// Index of the token realizing Z_c and its counterpart word.
fn zc_site(vocab: &Vocab, ex: &LabeledExample) -> Result<(usize, &'static str)> {
    let words: Vec<&str> = ex.prompt.iter().map(|&t| vocab.word(t)).collect::<Result<_>>()?;
    let swap = |w: &str| -> Option<&'static str> {
        match ex.suite.as_str() {
            "agreement" | "agr_sv_num_pp" => NOUNS
                .iter()
                .find_map(|&(s, p)| if w == s { Some(p) } else if w == p { Some(s) } else { None }),
            "agr_gender" => NAMES
                .iter()
                .find_map(|&(m, f)| if w == m { Some(f) } else if w == f { Some(m) } else { None }),
            "npi_any" => match w {
                "the" => Some("no"),
                "no" => Some("the"),
                _ => None,
            },
            "cleft" => match w {
                "did" => Some("saw"),
                "saw" => Some("did"),
                _ => None,
            },
            "filler_gap" => match w {
                "that" => Some("who"),
                "who" => Some("that"),
                _ => None,
            },
            _ => None,
        }
    };
    words
        .iter()
        .enumerate()
        .find_map(|(i, w)| swap(w).map(|c| (i, c)))
        .ok_or_else(|| Error::Input(format!("no Z_c token found for suite `{}`", ex.suite)))
}

/// Regenerates the partner example: the Z_c token is swapped for its
/// counterpart and `v_a`/`v_b` are exchanged.
pub fn flip_zc(vocab: &Vocab, ex: &LabeledExample) -> Result<LabeledExample> {
    let (pos, word) = zc_site(vocab, ex)?;
    let mut out = ex.clone();
    out.prompt[pos] = vocab.id(word)?;
    out.source_token = ex.target_token;
    out.target_token = ex.source_token;
    out.z_c = ex.counterfactual_zc();
    Ok(out)
}

/// Index sets of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub interventional: Vec<usize>,
    pub validation_probe: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    /// Keeps only the first `limit` interventional indices.
    pub fn limit_interventional(&mut self, limit: usize) {
        self.interventional.truncate(limit);
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self
            .interventional
            .iter()
            .chain(&self.validation_probe)
            .chain(&self.test)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.4, 0.3, 0.3];

/// Seeded three-way split (interventional, validation-probe, test); each
/// split takes `floor(fraction · n)` indices and the validation-probe split
/// is then passed through [`independence_subsample`].
pub fn make_splits(examples: &[LabeledExample], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|&f| !(f > 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to at most 1")));
    }
    let n = examples.len();
    let sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64 + 1e-9).floor() as usize).collect();
    if sizes.contains(&0) {
        return Err(Error::Config(format!("split sizes {sizes:?} from {n} examples include an empty split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let interventional = order[..sizes[0]].to_vec();
    let raw_validation = &order[sizes[0]..sizes[0] + sizes[1]];
    let test = order[sizes[0] + sizes[1]..sizes[0] + sizes[1] + sizes[2]].to_vec();
    let subset: Vec<LabeledExample> = raw_validation.iter().map(|&i| examples[i].clone()).collect();
    let keep = independence_subsample(&subset, seed ^ 0x5eed)?;
    let validation_probe = keep.into_iter().map(|k| raw_validation[k]).collect();
    Ok(SplitSpec { interventional, validation_probe, test, seed })
}

/// Equal-cell subsample making Z_c and Z_e exactly independent.
///
/// Z_e classes that do not co-occur with every Z_c class are dropped; every
/// remaining joint cell is cut to the smallest cell count. Returns sorted
/// indices into `examples`.
pub fn independence_subsample(examples: &[LabeledExample], seed: u64) -> Result<Vec<usize>> {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        cells.entry((ex.z_c, ex.z_e)).or_default().push(i);
    }
    let mut zc: Vec<usize> = cells.keys().map(|k| k.0).collect();
    zc.dedup();
    if zc.len() < 2 {
        return Err(Error::DegenerateLabels(format!("need at least 2 Z_c classes, found {}", zc.len())));
    }
    let mut ze: Vec<usize> = cells.keys().map(|k| k.1).collect();
    ze.sort_unstable();
    ze.dedup();
    let ze: Vec<usize> = ze
        .into_iter()
        .filter(|&e| zc.iter().all(|&c| cells.contains_key(&(c, e))))
        .collect();
    if ze.is_empty() {
        return Err(Error::DegenerateLabels("no Z_e class co-occurs with every Z_c class".into()));
    }
    let min = zc
        .iter()
        .flat_map(|&c| ze.iter().map(move |&e| (c, e)))
        .map(|k| cells[&k].len())
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for &c in &zc {
        for &e in &ze {
            let mut members = cells[&(c, e)].clone();
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..min]);
        }
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Writes one tab-separated record per example:
/// `prompt words, v_a, v_b, z_c, z_e, suite`.
pub fn write_dataset(path: &Path, vocab: &Vocab, examples: &[LabeledExample]) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            vocab.decode(&ex.prompt)?,
            vocab.word(ex.source_token)?,
            vocab.word(ex.target_token)?,
            ex.z_c,
            ex.z_e,
            ex.suite
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn parse_dataset(text: &str, vocab: &Vocab) -> Result<Vec<LabeledExample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("line {}: expected 6 fields, got {}", n + 1, f.len())));
            }
            let int = |s: &str| -> Result<usize> {
                s.parse().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))
            };
            Ok(LabeledExample {
                prompt: vocab.encode_prompt(f[0])?,
                source_token: vocab.id(f[1])?,
                target_token: vocab.id(f[2])?,
                z_c: int(f[3])?,
                z_e: int(f[4])?,
                suite: f[5].to_string(),
            })
        })
        .collect()
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<LabeledExample>> {
    parse_dataset(&fs::read_to_string(path)?, vocab)
}
