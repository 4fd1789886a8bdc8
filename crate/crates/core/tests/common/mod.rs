#![allow(dead_code)]

use std::sync::Arc;

use fewshot_ner::corpus::{TagLabel, TagScheme, TaggedSentence};
use fewshot_ner::knn::EmissionRow;
use fewshot_ner::transitions::ExpandedTransitions;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("C{i}")).collect()
}

pub fn io_sentence(tags: Vec<TagLabel>) -> TaggedSentence {
    let tokens = (0..tags.len()).map(|i| format!("w{i}")).collect();
    TaggedSentence::new(tokens, tags, TagScheme::Io).unwrap()
}

/// Random IO sentence over `classes`, `len` tokens, entity rate `p`.
pub fn random_io(rng: &mut impl Rng, classes: &[String], len: usize, p: f64) -> TaggedSentence {
    let tags = (0..len)
        .map(|_| {
            if rng.random_bool(p) {
                TagLabel::Inside(classes.choose(rng).unwrap().clone())
            } else {
                TagLabel::Outside
            }
        })
        .collect();
    io_sentence(tags)
}

pub fn random_io_corpus(rng: &mut impl Rng, classes: &[String], sentences: usize) -> Vec<TaggedSentence> {
    (0..sentences)
        .map(|_| {
            let len = rng.random_range(1..=12);
            let p = rng.random_range(0.0..0.7);
            random_io(rng, classes, len, p)
        })
        .collect()
}

/// Random valid BIO sentence. With `separated`, two entities of the same
/// class are never adjacent.
pub fn random_bio(rng: &mut impl Rng, classes: &[String], len: usize, separated: bool) -> TaggedSentence {
    let mut tags: Vec<TagLabel> = Vec::with_capacity(len);
    while tags.len() < len {
        if rng.random_bool(0.5) {
            tags.push(TagLabel::Outside);
            continue;
        }
        let prev = tags.last().and_then(|t| t.class().map(str::to_string));
        let choices: Vec<&String> = classes
            .iter()
            .filter(|c| !separated || prev.as_deref() != Some(c.as_str()))
            .collect();
        let Some(class) = choices.choose(rng) else {
            tags.push(TagLabel::Outside);
            continue;
        };
        tags.push(TagLabel::Begin((*class).clone()));
        let extra = rng.random_range(0..3);
        for _ in 0..extra {
            if tags.len() < len {
                tags.push(TagLabel::Inside((*class).clone()));
            }
        }
    }
    let tokens = (0..len).map(|i| format!("t{i}")).collect();
    TaggedSentence::new(tokens, tags, TagScheme::Bio).unwrap()
}

/// Random row-stochastic matrix for `n` classes. Rows are drawn from
/// positive weights; START never goes to END.
pub fn random_matrix(rng: &mut impl Rng, n: usize) -> ExpandedTransitions {
    let side = n + 2;
    let rows = (0..side)
        .map(|r| {
            let mut row: Vec<f64> = (0..side).map(|_| rng.random_range(0.01..1.0)).collect();
            if r == 0 {
                row[side - 1] = 0.0;
            }
            let total: f64 = row.iter().sum();
            row.iter().map(|x| x / total).collect()
        })
        .collect();
    ExpandedTransitions::from_matrix(class_names(n), rows).unwrap()
}

/// Emission rows over `O` plus the matrix's classes, from random distances.
pub fn random_emissions(rng: &mut impl Rng, trans: &ExpandedTransitions, len: usize) -> Vec<EmissionRow> {
    let labels: Arc<[TagLabel]> = trans.labels().into();
    (0..len)
        .map(|_| {
            let d = (0..labels.len()).map(|_| rng.random_range(0.0..4.0)).collect();
            EmissionRow::from_distances(labels.clone(), d).unwrap()
        })
        .collect()
}

/// Exhaustive search over all state sequences, scoring in log space.
/// Returns the first best path in lexicographic order and its score.
pub fn brute_force_decode(emissions: &[EmissionRow], trans: &ExpandedTransitions) -> (Vec<usize>, f64) {
    let states = trans.num_states();
    let len = emissions.len();
    let log = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut path = vec![0usize; len];
    let total = states.pow(len as u32);
    for code in 0..total {
        let mut c = code;
        for t in (0..len).rev() {
            path[t] = c % states;
            c /= states;
        }
        let mut score = log(trans.start(path[0])) + log(emissions[0].probs()[path[0]]);
        for t in 1..len {
            score += log(trans.transition(path[t - 1], path[t])) + log(emissions[t].probs()[path[t]]);
        }
        score += log(trans.end(path[len - 1]));
        if score > best.1 {
            best = (path.clone(), score);
        }
    }
    best
}

/// Unit vector with a random direction.
pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
