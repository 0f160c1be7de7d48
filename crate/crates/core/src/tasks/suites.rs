// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template generators for the agreement corpus clone and the minimal-pair
//! suites, plus the language-model training corpus built from the same
//! grammar.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{
    Vocab, ADJECTIVES, BARE_VERBS, BOS, EOS, GENDER_VERBS, NAMES, NOUNS, PARTICIPLES, PREPOSITIONS, VERBS,
};
use super::{LabeledExample, MinimalPair};
use crate::error::{Error, Result};

pub const AGREEMENT: &str = "agreement";
/// Minimal-pair suite names.
pub const CAUSALGYM_SUITES: [&str; 5] = ["agr_gender", "agr_sv_num_pp", "npi_any", "cleft", "filler_gap"];

const PP_PROB: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Pp {
    prep: usize,
    noun: usize,
    plural: bool,
}

fn noun(i: usize, plural: bool) -> &'static str {
    if plural {
        NOUNS[i].1
    } else {
        NOUNS[i].0
    }
}

fn sample_pp(rng: &mut ChaCha8Rng, subject: usize) -> Pp {
    let mut n = rng.gen_range(0..NOUNS.len() - 1);
    if n >= subject {
        n += 1;
    }
    Pp { prep: rng.gen_range(0..PREPOSITIONS.len()), noun: n, plural: rng.gen_bool(0.5) }
}

fn maybe_pp(rng: &mut ChaCha8Rng, subject: usize) -> Option<Pp> {
    if rng.gen_bool(PP_PROB) {
        Some(sample_pp(rng, subject))
    } else {
        None
    }
}

fn maybe_adj(rng: &mut ChaCha8Rng) -> Option<usize> {
    let k = rng.gen_range(0..=ADJECTIVES.len());
    (k < ADJECTIVES.len()).then_some(k)
}

/// `the [adj] noun [prep the noun2]`
fn noun_phrase(words: &mut Vec<&'static str>, adj: Option<usize>, subject: &'static str, pp: Option<Pp>) {
    words.push("the");
    if let Some(a) = adj {
        words.push(ADJECTIVES[a]);
    }
    words.push(subject);
    push_pp(words, pp);
}

fn push_pp(words: &mut Vec<&'static str>, pp: Option<Pp>) {
    if let Some(pp) = pp {
        words.extend([PREPOSITIONS[pp.prep], "the", noun(pp.noun, pp.plural)]);
    }
}

fn ids(vocab: &Vocab, words: &[&str]) -> Result<Vec<usize>> {
    words.iter().map(|w| vocab.id(w)).collect()
}

fn attempt_budget(n: usize) -> usize {
    1000 + 100 * n
}

/// Agreement corpus clone: subject phrase with an optional prepositional
/// distractor, ending at the verb slot. `z_c` is subject number and `z_e`
/// the distractor number (0 = none, 1 = singular, 2 = plural). The six
/// joint cells are filled round-robin.
pub fn gen_agreement_suite(vocab: &Vocab, n: usize, seed: u64, with_replacement: bool) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::Input("suite size must be at least 1".into()));
    }
    let per_cell = n.div_ceil(6);
    let no_pp_capacity = NOUNS.len() * (ADJECTIVES.len() + 1) * VERBS.len();
    if !with_replacement && per_cell > no_pp_capacity {
        return Err(Error::Capacity(format!(
            "agreement suite of {n} needs {per_cell} distinct prompts per cell, template capacity is {no_pp_capacity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > attempt_budget(n) {
            return Err(Error::Capacity(format!("could not draw {n} distinct agreement prompts")));
        }
        let cell = out.len() % 6;
        let (z_c, z_e) = (cell / 3, cell % 3);
        let subject = rng.gen_range(0..NOUNS.len());
        let adj = maybe_adj(&mut rng);
        let pp = match z_e {
            0 => None,
            _ => Some(Pp { plural: z_e == 2, ..sample_pp(&mut rng, subject) }),
        };
        let verb = rng.gen_range(0..VERBS.len());
        let mut words = Vec::new();
        noun_phrase(&mut words, adj, noun(subject, z_c == 1), pp);
        let prompt = ids(vocab, &words)?;
        if !with_replacement && !seen.insert((prompt.clone(), verb)) {
            continue;
        }
        let ex = label_agreement(vocab, &prompt, verb)?;
        debug_assert_eq!((ex.z_c, ex.z_e), (z_c, z_e));
        out.push(ex);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn noun_number(w: &str) -> Option<usize> {
    NOUNS.iter().find_map(|&(s, p)| {
        if w == s {
            Some(0)
        } else if w == p {
            Some(1)
        } else {
            None
        }
    })
}

/// Labels an agreement prompt: `z_c` from the first noun, `z_e` from the
/// noun closing a prepositional phrase (0 when there is none), `v_a`/`v_b`
/// from the verb pair `VERBS[verb]`.
pub fn label_agreement(vocab: &Vocab, prompt: &[usize], verb: usize) -> Result<LabeledExample> {
    let words: Vec<&str> = prompt.iter().map(|&t| vocab.word(t)).collect::<Result<_>>()?;
    let (subject_at, z_c) = words
        .iter()
        .enumerate()
        .find_map(|(i, w)| noun_number(w).map(|n| (i, n)))
        .ok_or_else(|| Error::Input(format!("agreement prompt without a subject noun: {}", words.join(" "))))?;
    let z_e = match words[subject_at..].iter().position(|w| PREPOSITIONS.contains(w)) {
        None => 0,
        Some(_) => 1 + words
            .iter()
            .rev()
            .find_map(|w| noun_number(w))
            .expect("subject noun exists"),
    };
    let (sg, pl) = *VERBS
        .get(verb)
        .ok_or_else(|| Error::Input(format!("verb pair index {verb} out of range")))?;
    let (src, tgt) = if z_c == 0 { (sg, pl) } else { (pl, sg) };
    Ok(LabeledExample {
        prompt: prompt.to_vec(),
        source_token: vocab.id(src)?,
        target_token: vocab.id(tgt)?,
        z_c,
        z_e,
        suite: AGREEMENT.to_string(),
    })
}

/// Distinct minimal pairs a suite's templates can produce.
pub fn pair_capacity(name: &str) -> Result<usize> {
    let nouns = NOUNS.len();
    let adj = ADJECTIVES.len() + 1;
    let pps = PREPOSITIONS.len() * (nouns - 1) * 2;
    Ok(match name {
        "agr_sv_num_pp" => nouns * adj * pps * VERBS.len(),
        "agr_gender" => NAMES.len() * GENDER_VERBS.len() * (1 + PREPOSITIONS.len() * nouns * 2),
        "npi_any" => nouns * adj * (1 + pps),
        "cleft" => 2 * nouns * adj * (1 + pps) * BARE_VERBS.len(),
        "filler_gap" => 2 * nouns * adj * (1 + pps),
        _ => return Err(Error::Input(format!("unknown suite `{name}`"))),
    })
}

fn sample_pair(name: &str, rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<&'static str>, &'static str, &'static str) {
    let mut src = Vec::new();
    let mut cf = Vec::new();
    match name {
        "agr_sv_num_pp" => {
            let s = rng.gen_range(0..NOUNS.len());
            let adj = maybe_adj(rng);
            let pp = Some(sample_pp(rng, s));
            let verb = VERBS[rng.gen_range(0..VERBS.len())];
            noun_phrase(&mut src, adj, noun(s, false), pp);
            noun_phrase(&mut cf, adj, noun(s, true), pp);
            (src, cf, verb.0, verb.1)
        }
        "agr_gender" => {
            let (m, f) = NAMES[rng.gen_range(0..NAMES.len())];
            let verb = GENDER_VERBS[rng.gen_range(0..GENDER_VERBS.len())];
            let pp = if rng.gen_bool(PP_PROB) {
                Some(Pp {
                    prep: rng.gen_range(0..PREPOSITIONS.len()),
                    noun: rng.gen_range(0..NOUNS.len()),
                    plural: rng.gen_bool(0.5),
                })
            } else {
                None
            };
            for (words, name) in [(&mut src, m), (&mut cf, f)] {
                words.extend([name, verb]);
                push_pp(words, pp);
                words.push("because");
            }
            (src, cf, "he", "she")
        }
        "npi_any" => {
            let s = rng.gen_range(0..NOUNS.len());
            let adj = maybe_adj(rng);
            let pp = maybe_pp(rng, s);
            noun_phrase(&mut src, adj, noun(s, false), pp);
            noun_phrase(&mut cf, adj, noun(s, false), pp);
            cf[0] = "no";
            src.extend(["has", "seen"]);
            cf.extend(["has", "seen"]);
            (src, cf, "some", "any")
        }
        "cleft" => {
            let s = rng.gen_range(0..NOUNS.len());
            let plural = rng.gen_bool(0.5);
            let adj = maybe_adj(rng);
            let pp = maybe_pp(rng, s);
            let bare = BARE_VERBS[rng.gen_range(0..BARE_VERBS.len())];
            for (words, aux) in [(&mut src, "did"), (&mut cf, "saw")] {
                words.push("what");
                noun_phrase(words, adj, noun(s, plural), pp);
                words.extend([aux, "was"]);
            }
            (src, cf, bare, "the")
        }
        "filler_gap" => {
            let s = rng.gen_range(0..NOUNS.len());
            let plural = rng.gen_bool(0.5);
            let adj = maybe_adj(rng);
            let pp = maybe_pp(rng, s);
            for (words, comp) in [(&mut src, "that"), (&mut cf, "who")] {
                words.extend(["i", "know", comp]);
                noun_phrase(words, adj, noun(s, plural), pp);
                words.push("saw");
            }
            (src, cf, "the", "yesterday")
        }
        _ => unreachable!("suite name checked by caller"),
    }
}

/// Draws `n_pairs` distinct minimal pairs of a named suite.
pub fn gen_minimal_pairs(vocab: &Vocab, name: &str, n_pairs: usize, seed: u64) -> Result<Vec<MinimalPair>> {
    let capacity = pair_capacity(name)?;
    if n_pairs > capacity {
        return Err(Error::Capacity(format!("suite `{name}` holds {capacity} distinct pairs, asked for {n_pairs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    let mut attempts = 0;
    while out.len() < n_pairs {
        attempts += 1;
        if attempts > attempt_budget(n_pairs) {
            return Err(Error::Capacity(format!("could not draw {n_pairs} distinct `{name}` pairs")));
        }
        let (src, cf, y_src, y_cf) = sample_pair(name, &mut rng);
        let pair = MinimalPair {
            x_src: ids(vocab, &src)?,
            x_cf: ids(vocab, &cf)?,
            y_src: vocab.id(y_src)?,
            y_cf: vocab.id(y_cf)?,
        };
        if seen.insert((pair.x_src.clone(), pair.y_src)) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Minimal-pair suite with both role assignments of every pair; examples
/// `2k` and `2k+1` are partners. `n` must be even.
pub fn gen_causalgym_suite(vocab: &Vocab, name: &str, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if !CAUSALGYM_SUITES.contains(&name) {
        return Err(Error::Input(format!("unknown suite `{name}`")));
    }
    if n == 0 || n % 2 == 1 {
        return Err(Error::Input(format!("suite size must be a positive even number, got {n}")));
    }
    let pairs = gen_minimal_pairs(vocab, name, n / 2, seed)?;
    let mut out = Vec::with_capacity(n);
    for p in pairs {
        out.extend(p.into_examples(vocab, name));
    }
    Ok(out)
}

/// Dispatches on suite name (`agreement` or a minimal-pair suite).
pub fn gen_suite(vocab: &Vocab, name: &str, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if name == AGREEMENT {
        gen_agreement_suite(vocab, n, seed, false)
    } else {
        gen_causalgym_suite(vocab, name, n, seed)
    }
}

fn agreement_sentence(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let s = rng.gen_range(0..NOUNS.len());
    let plural = rng.gen_bool(0.5);
    let adj = maybe_adj(rng);
    let pp = if rng.gen_bool(2.0 / 3.0) { Some(sample_pp(rng, s)) } else { None };
    let mut w = Vec::new();
    noun_phrase(&mut w, adj, noun(s, plural), pp);
    let k = rng.gen_range(0..VERBS.len());
    w.push(if plural { VERBS[k].1 } else { VERBS[k].0 });
    if k == 2 {
        w.push(PARTICIPLES[rng.gen_range(0..PARTICIPLES.len())]);
    } else {
        w.push(ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())]);
    }
    w
}

fn pair_sentence(name: &str, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let (src, cf, y_src, y_cf) = sample_pair(name, rng);
    let flip = rng.gen_bool(0.5);
    let (mut w, y) = if flip { (cf, y_cf) } else { (src, y_src) };
    w.push(y);
    let object = noun(rng.gen_range(0..NOUNS.len()), rng.gen_bool(0.5));
    match (name, y) {
        ("agr_gender", _) => w.extend(["was", "tired"]),
        ("npi_any", _) => w.push(object),
        ("cleft", "the") | ("filler_gap", "the") => w.push(object),
        ("agr_sv_num_pp", "has") | ("agr_sv_num_pp", "have") => {
            w.push(PARTICIPLES[rng.gen_range(0..PARTICIPLES.len())])
        }
        ("agr_sv_num_pp", _) => w.push(ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())]),
        _ => {}
    }
    w
}

/// Complete `<bos> … . <eos>` training sentences: half agreement sentences,
/// the rest spread evenly over the minimal-pair families.
pub fn lm_corpus(vocab: &Vocab, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut words = if i % 2 == 0 {
            agreement_sentence(&mut rng)
        } else {
            let name = CAUSALGYM_SUITES[(i / 2) % CAUSALGYM_SUITES.len()];
            pair_sentence(name, &mut rng)
        };
        words.push(".");
        let mut ids_ = vec![BOS];
        ids_.extend(ids(vocab, &words)?);
        ids_.push(EOS);
        out.push(ids_);
    }
    Ok(out)
}
