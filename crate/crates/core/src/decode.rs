//! Viterbi decoding over nearest-neighbor emissions and expanded transitions.
//!
//! The decoder maximizes
//!
//! ```text
//! log p(y_1|START) + Σ_t log p(y_t|x_t) + Σ_{t>1} log p(y_t|y_{t-1}) + log p(END|y_T)
//! ```
//!
//! in log space. Zero probabilities become `-inf`. Ties are resolved toward
//! the lower state index, both for backpointers and for the final state.

use thiserror::Error;

use crate::corpus::TagLabel;
use crate::knn::{argmax, EmissionRow};
use crate::transitions::ExpandedTransitions;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("nothing to decode")]
    Empty,
    #[error("emission states {emission:?} do not match transition states {transition:?}")]
    StateMismatch {
        emission: Vec<String>,
        transition: Vec<String>,
    },
    #[error("temperature must be positive")]
    BadTemperature,
}

/// Decoding switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodingConfig {
    pub tau: f64,
    /// `false` skips Viterbi and predicts each token independently.
    pub use_transitions: bool,
}

impl DecodingConfig {
    pub fn new(tau: f64, use_transitions: bool) -> Result<Self, DecodeError> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(DecodeError::BadTemperature);
        }
        Ok(Self {
            tau,
            use_transitions,
        })
    }
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            use_transitions: true,
        }
    }
}

/// Result of [`viterbi`].
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    /// State indices in transition-matrix order (`0` is `O`).
    pub states: Vec<usize>,
    pub tags: Vec<TagLabel>,
    /// Log score of the path; `-inf` when every path was impossible.
    pub log_score: f64,
    /// Every path had zero probability and per-token argmax was used.
    pub fallback: bool,
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Max-product decoding over log scores.
///
/// `emit[t][s]`, `start[s]`, `trans[from][to]` and `end[s]` are all log
/// probabilities. Returns `None` when every path scores `-inf`.
pub fn viterbi_log(
    emit: &[Vec<f64>],
    start: &[f64],
    trans: &[Vec<f64>],
    end: &[f64],
) -> Option<(Vec<usize>, f64)> {
    let len = emit.len();
    let states = start.len();
    if len == 0 || states == 0 {
        return None;
    }
    let mut score: Vec<f64> = (0..states).map(|s| start[s] + emit[0][s]).collect();
    let mut back = vec![vec![0usize; states]; len];

    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; states];
        for to in 0..states {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for from in 0..states {
                let s = score[from] + trans[from][to];
                if s > best {
                    best = s;
                    arg = from;
                }
            }
            next[to] = best + emit[t][to];
            back[t][to] = arg;
        }
        score = next;
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for s in 0..states {
        let total = score[s] + end[s];
        if total > best {
            best = total;
            last = s;
        }
    }
    if best == f64::NEG_INFINITY {
        return None;
    }
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Some((path, best))
}

/// Column of each transition state in the emission rows.
fn align_states(row: &EmissionRow, trans: &ExpandedTransitions) -> Result<Vec<usize>, DecodeError> {
    let labels = trans.labels();
    let mismatch = || DecodeError::StateMismatch {
        emission: row.labels().iter().map(ToString::to_string).collect(),
        transition: labels.iter().map(ToString::to_string).collect(),
    };
    if row.labels().len() != labels.len() {
        return Err(mismatch());
    }
    labels
        .iter()
        .map(|l| row.labels().iter().position(|e| e == l).ok_or_else(mismatch))
        .collect()
}

/// Most likely tag sequence for one sentence.
///
/// Emission rows may list states in any order but must cover exactly the
/// states of `trans`.
pub fn viterbi(emissions: &[EmissionRow], trans: &ExpandedTransitions) -> Result<ViterbiPath, DecodeError> {
    if emissions.is_empty() {
        return Err(DecodeError::Empty);
    }
    let n = trans.num_states();
    let emit = emissions
        .iter()
        .map(|row| {
            let columns = align_states(row, trans)?;
            Ok(columns.iter().map(|&c| ln(row.probs()[c])).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, DecodeError>>()?;
    let start: Vec<f64> = (0..n).map(|s| ln(trans.start(s))).collect();
    let step: Vec<Vec<f64>> = (0..n)
        .map(|from| (0..n).map(|to| ln(trans.transition(from, to))).collect())
        .collect();
    let end: Vec<f64> = (0..n).map(|s| ln(trans.end(s))).collect();

    let (states, log_score, fallback) = match viterbi_log(&emit, &start, &step, &end) {
        Some((states, score)) => (states, score, false),
        None => {
            log::warn!("all decoding paths have zero probability; using per-token argmax");
            let states = emit.iter().map(|row| argmax(row)).collect();
            (states, f64::NEG_INFINITY, true)
        }
    };
    Ok(ViterbiPath {
        tags: states.iter().map(|&s| trans.label(s)).collect(),
        states,
        log_score,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn labels() -> Arc<[TagLabel]> {
        vec![TagLabel::Outside, TagLabel::Inside("A".into())].into()
    }

    fn rows(probs: &[[f64; 2]]) -> Vec<EmissionRow> {
        probs
            .iter()
            .map(|p| EmissionRow::from_distances(labels(), p.iter().map(|x| -x.ln()).collect()).unwrap())
            .collect()
    }

    /// 2 states with start uniform over states, end uniform over states.
    fn matrix(step: [[f64; 2]; 2]) -> ExpandedTransitions {
        let end = 0.5;
        let r = |s: [f64; 2]| vec![s[0] * (1.0 - end), s[1] * (1.0 - end), end];
        ExpandedTransitions::from_matrix(
            vec!["A".into()],
            vec![vec![0.5, 0.5, 0.0], r(step[0]), r(step[1])],
        )
        .unwrap()
    }

    #[test]
    fn uniform_transitions_reduce_to_argmax() {
        let e = rows(&[[0.9, 0.1], [0.4, 0.6]]);
        let uniform = ExpandedTransitions::uniform(vec!["A".into()]).unwrap();
        let path = viterbi(&e, &uniform).unwrap();
        assert_eq!(path.states, [0, 1]);
        assert!(!path.fallback);
    }

    #[test]
    fn sticky_transitions_enumerated() {
        // Path scores (emission × transition, start/end constant):
        // 00: .9·.9·.4 = .324, 01: .9·.1·.6 = .054, 10: .1·.1·.4 = .004,
        // 11: .1·.9·.6 = .054.
        let e = rows(&[[0.9, 0.1], [0.4, 0.6]]);
        let m = matrix([[0.9, 0.1], [0.1, 0.9]]);
        let path = viterbi(&e, &m).unwrap();
        assert_eq!(path.states, [0, 0]);
        assert_eq!(path.tags, [TagLabel::Outside, TagLabel::Outside]);
        let expected = (0.5f64 * 0.324 * 0.5 * 0.5).ln();
        assert!((path.log_score - expected).abs() < 1e-12);
    }

    #[test]
    fn single_step_uses_start_and_end() {
        let e = rows(&[[0.6, 0.4]]);
        let m = ExpandedTransitions::from_matrix(
            vec!["A".into()],
            vec![vec![0.2, 0.8, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.5]],
        )
        .unwrap();
        // O: .2·.6·.5 = .06, A: .8·.4·.5 = .16
        assert_eq!(viterbi(&e, &m).unwrap().states, [1]);
    }

    #[test]
    fn impossible_paths_fall_back() {
        let e = rows(&[[0.3, 0.7], [0.8, 0.2]]);
        let m = ExpandedTransitions::from_matrix(
            vec!["A".into()],
            vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        )
        .unwrap();
        let path = viterbi(&e, &m).unwrap();
        assert!(path.fallback);
        assert_eq!(path.states, [1, 0]);
        assert_eq!(path.log_score, f64::NEG_INFINITY);
    }

    #[test]
    fn state_mismatch_and_empty() {
        let m = ExpandedTransitions::uniform(vec!["B".into()]).unwrap();
        let e = rows(&[[0.5, 0.5]]);
        assert!(matches!(
            viterbi(&e, &m),
            Err(DecodeError::StateMismatch { .. })
        ));
        assert_eq!(viterbi(&[], &m), Err(DecodeError::Empty));
    }

    #[test]
    fn emission_columns_may_be_permuted() {
        let swapped: Arc<[TagLabel]> = vec![TagLabel::Inside("A".into()), TagLabel::Outside].into();
        let e: Vec<EmissionRow> = [[0.1, 0.9], [0.6, 0.4]]
            .iter()
            .map(|p| EmissionRow::from_distances(swapped.clone(), p.iter().map(|x: &f64| -x.ln()).collect()).unwrap())
            .collect();
        let m = ExpandedTransitions::uniform(vec!["A".into()]).unwrap();
        let path = viterbi(&e, &m).unwrap();
        assert_eq!(path.tags, [TagLabel::Outside, TagLabel::Inside("A".into())]);
    }

    #[test]
    fn config_validation() {
        assert!(DecodingConfig::new(0.01, true).is_ok());
        assert!(DecodingConfig::new(0.0, true).is_err());
        assert!(DecodingConfig::new(f64::NAN, false).is_err());
    }
}
