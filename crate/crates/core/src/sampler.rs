//! K-shot support set construction by greedy, frequency-ordered sampling.
//!
//! Classes are visited from rarest to most frequent. For each class,
//! sentences containing it are drawn uniformly without replacement until the
//! class has at least `k` entity spans in the selection; every draw also
//! counts toward the other classes in the drawn sentence. A class that runs
//! out of sentences is recorded as a [`Shortfall`] and sampling moves on.
//!
//! Draws come from [`ChaCha8Rng`] seeded with `seed_from_u64(seed)`, so a
//! support set is a pure function of `(pool, k, seed)` on every platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{compute_tag_set, span_counts, TagSet, TaggedSentence};

/// Default number of test sentences per episode.
pub const DEFAULT_TEST_SIZE: usize = 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("sampling pool is empty")]
    EmptyPool,
    #[error("k must be positive")]
    ZeroK,
    #[error("test size must be positive")]
    ZeroTestSize,
    #[error("pool mixes tagging schemes")]
    MixedSchemes,
    #[error("support set consumed the whole pool; no sentences left for testing")]
    EmptyRemainder,
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("manifest: {0}")]
    ManifestContent(String),
}

/// A class that could not reach `k` spans because the pool ran out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub class: String,
    pub wanted: usize,
    pub got: usize,
}

/// One sampling step: the class being filled and the sentence drawn for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draw {
    pub class: String,
    pub sentence: usize,
}

/// A sampled K-shot set of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    sentences: Vec<TaggedSentence>,
    k: usize,
    seed: u64,
    counts: BTreeMap<String, usize>,
    source_ids: Vec<usize>,
    class_order: Vec<String>,
    shortfalls: Vec<Shortfall>,
    draws: Vec<Draw>,
}

impl SupportSet {
    pub fn sentences(&self) -> &[TaggedSentence] {
        &self.sentences
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Entity-span count per class over the selected sentences.
    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    pub fn count(&self, class: &str) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }

    /// Indices of the selected sentences in the pool, in selection order.
    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    /// Order in which classes were filled.
    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    pub fn shortfalls(&self) -> &[Shortfall] {
        &self.shortfalls
    }

    /// Draw trace. Empty for sets restored from a manifest.
    pub fn draws(&self) -> &[Draw] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Tag set of the selected sentences.
    pub fn tag_set(&self) -> TagSet {
        TagSet::from_counts(self.counts.clone())
    }

    /// Line-oriented `key=value` manifest. Lists are space separated.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let join = |items: Vec<String>| items.join(" ");
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "k={}", self.k).unwrap();
        writeln!(
            out,
            "sentences={}",
            join(self.source_ids.iter().map(usize::to_string).collect())
        )
        .unwrap();
        writeln!(out, "class_order={}", join(self.class_order.clone())).unwrap();
        for (class, n) in &self.counts {
            writeln!(out, "count.{class}={n}").unwrap();
        }
        for s in &self.shortfalls {
            writeln!(out, "shortfall.{}={}/{}", s.class, s.got, s.wanted).unwrap();
        }
        out
    }

    /// Restores a support set from its manifest and the pool it was drawn
    /// from. Recorded counts must match a recount of the pool sentences.
    pub fn from_manifest(text: &str, pool: &[TaggedSentence]) -> Result<Self, SampleError> {
        let mut seed = None;
        let mut k = None;
        let mut ids: Option<Vec<usize>> = None;
        let mut class_order = Vec::new();
        let mut recorded = BTreeMap::new();
        let mut shortfalls = Vec::new();

        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| SampleError::Manifest {
                line: line_no,
                reason: reason.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let int = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("expected integer"));
            match key.trim() {
                "seed" => {
                    seed = Some(value.trim().parse::<u64>().map_err(|_| bad("bad seed"))?)
                }
                "k" => k = Some(int(value)?),
                "sentences" => {
                    ids = Some(value.split_whitespace().map(int).collect::<Result<_, _>>()?)
                }
                "class_order" => {
                    class_order = value.split_whitespace().map(str::to_string).collect()
                }
                key => {
                    if let Some(class) = key.strip_prefix("count.") {
                        recorded.insert(class.to_string(), int(value)?);
                    } else if let Some(class) = key.strip_prefix("shortfall.") {
                        let (got, wanted) =
                            value.split_once('/').ok_or_else(|| bad("expected got/wanted"))?;
                        shortfalls.push(Shortfall {
                            class: class.to_string(),
                            wanted: int(wanted)?,
                            got: int(got)?,
                        });
                    } else {
                        return Err(bad("unknown key"));
                    }
                }
            }
        }

        let missing = |what: &str| SampleError::ManifestContent(format!("missing `{what}`"));
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let k = k.ok_or_else(|| missing("k"))?;
        let ids = ids.ok_or_else(|| missing("sentences"))?;

        let mut seen = BTreeSet::new();
        let mut counts = BTreeMap::new();
        let mut sentences = Vec::with_capacity(ids.len());
        for &id in &ids {
            let sentence = pool.get(id).ok_or_else(|| {
                SampleError::ManifestContent(format!(
                    "sentence index {id} out of range for a pool of {}",
                    pool.len()
                ))
            })?;
            if !seen.insert(id) {
                return Err(SampleError::ManifestContent(format!(
                    "sentence index {id} listed twice"
                )));
            }
            for (class, n) in span_counts(sentence) {
                *counts.entry(class).or_insert(0) += n;
            }
            sentences.push(sentence.clone());
        }
        if counts != recorded {
            return Err(SampleError::ManifestContent(
                "recorded counts do not match the pool sentences".into(),
            ));
        }
        Ok(Self {
            sentences,
            k,
            seed,
            counts,
            source_ids: ids,
            class_order,
            shortfalls,
            draws: Vec::new(),
        })
    }
}

/// A support set and a disjoint test set drawn from the same pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: SupportSet,
    /// Test selection; its `source_ids` index the same pool as the support.
    pub test: SupportSet,
}

impl Episode {
    pub fn test_sentences(&self) -> &[TaggedSentence] {
        self.test.sentences()
    }
}

struct Selection {
    ids: Vec<usize>,
    counts: BTreeMap<String, usize>,
    class_order: Vec<String>,
    shortfalls: Vec<Shortfall>,
    draws: Vec<Draw>,
}

/// Greedy selection restricted to `candidates` (pool indices).
///
/// `extra_classes` are classes expected to be filled even though no
/// candidate contains them; they end up as shortfalls.
fn greedy_select(
    per_sentence: &[BTreeMap<String, usize>],
    candidates: &[usize],
    extra_classes: &[String],
    k: usize,
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Selection {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for &id in candidates {
        for (class, n) in &per_sentence[id] {
            *freq.entry(class.clone()).or_insert(0) += n;
        }
    }
    let mut class_order: Vec<String> = TagSet::from_counts(freq).classes().to_vec();
    for class in extra_classes {
        if !class_order.contains(class) {
            class_order.insert(0, class.clone());
        }
    }

    let mut selected = vec![false; per_sentence.len()];
    let mut counts: BTreeMap<String, usize> =
        class_order.iter().map(|c| (c.clone(), 0)).collect();
    let mut ids = Vec::new();
    let mut shortfalls = Vec::new();
    let mut draws = Vec::new();

    'classes: for class in &class_order {
        if counts[class] >= k {
            continue;
        }
        let mut eligible: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&id| !selected[id] && per_sentence[id].contains_key(class))
            .collect();
        while counts[class] < k {
            if cap.is_some_and(|cap| ids.len() >= cap) {
                break 'classes;
            }
            if eligible.is_empty() {
                shortfalls.push(Shortfall {
                    class: class.clone(),
                    wanted: k,
                    got: counts[class],
                });
                log::warn!("class {class}: only {} of {k} spans available", counts[class]);
                break;
            }
            let id = eligible.swap_remove(rng.random_range(0..eligible.len()));
            selected[id] = true;
            ids.push(id);
            draws.push(Draw {
                class: class.clone(),
                sentence: id,
            });
            for (c, n) in &per_sentence[id] {
                *counts.entry(c.clone()).or_insert(0) += n;
            }
        }
    }

    Selection {
        ids,
        counts,
        class_order,
        shortfalls,
        draws,
    }
}

fn check_pool(pool: &[TaggedSentence], k: usize) -> Result<(), SampleError> {
    if pool.is_empty() {
        return Err(SampleError::EmptyPool);
    }
    if k == 0 {
        return Err(SampleError::ZeroK);
    }
    let scheme = pool[0].scheme();
    if pool.iter().any(|s| s.scheme() != scheme) {
        return Err(SampleError::MixedSchemes);
    }
    Ok(())
}

fn materialize(
    pool: &[TaggedSentence],
    selection: Selection,
    k: usize,
    seed: u64,
) -> SupportSet {
    SupportSet {
        sentences: selection.ids.iter().map(|&i| pool[i].clone()).collect(),
        k,
        seed,
        counts: selection.counts.into_iter().filter(|(_, n)| *n > 0).collect(),
        source_ids: selection.ids,
        class_order: selection.class_order,
        shortfalls: selection.shortfalls,
        draws: selection.draws,
    }
}

/// Samples a K-shot support set from `pool`.
pub fn greedy_sample(
    pool: &[TaggedSentence],
    k: usize,
    seed: u64,
) -> Result<SupportSet, SampleError> {
    check_pool(pool, k)?;
    let per_sentence: Vec<_> = pool.iter().map(span_counts).collect();
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selection = greedy_select(&per_sentence, &all, &[], k, None, &mut rng);
    Ok(materialize(pool, selection, k, seed))
}

/// Samples a support set, then a K-shot test set of at most `test_size`
/// sentences from what remains of the pool.
pub fn build_episode(
    pool: &[TaggedSentence],
    k: usize,
    test_size: usize,
    seed: u64,
) -> Result<Episode, SampleError> {
    check_pool(pool, k)?;
    if test_size == 0 {
        return Err(SampleError::ZeroTestSize);
    }
    let per_sentence: Vec<_> = pool.iter().map(span_counts).collect();
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let support = greedy_select(&per_sentence, &all, &[], k, None, &mut rng);
    let taken: BTreeSet<usize> = support.ids.iter().copied().collect();
    let remainder: Vec<usize> = all.into_iter().filter(|i| !taken.contains(i)).collect();
    if remainder.is_empty() {
        return Err(SampleError::EmptyRemainder);
    }
    let pool_classes = compute_tag_set(pool).classes().to_vec();
    let test = greedy_select(
        &per_sentence,
        &remainder,
        &pool_classes,
        k,
        Some(test_size),
        &mut rng,
    );
    Ok(Episode {
        support: materialize(pool, support, k, seed),
        test: materialize(pool, test, k, seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{TagLabel, TagScheme};

    /// Sentence with one single-token span per listed class.
    fn sent(classes: &[&str]) -> TaggedSentence {
        let mut tags = Vec::new();
        for c in classes {
            tags.push(TagLabel::Inside(c.to_string()));
            tags.push(TagLabel::Outside);
        }
        tags.push(TagLabel::Outside);
        let tokens = (0..tags.len()).map(|i| format!("t{i}")).collect();
        TaggedSentence::new(tokens, tags, TagScheme::Io).unwrap()
    }

    #[test]
    fn small_pool_traces() {
        // s0:[PER], s1:[PER, LOC], s2:[LOC]. Both classes have frequency 2,
        // so LOC is filled first; any trace ends with at most 2 sentences.
        let pool = vec![sent(&["PER"]), sent(&["PER", "LOC"]), sent(&["LOC"])];
        for seed in 0..64 {
            let s = greedy_sample(&pool, 1, seed).unwrap();
            assert!(s.count("PER") >= 1 && s.count("LOC") >= 1);
            assert!(s.len() <= 2);
            assert_eq!(s.class_order(), ["LOC", "PER"]);
            assert!(s.shortfalls().is_empty());
        }
    }

    #[test]
    fn forced_single_sentence() {
        let pool = vec![sent(&["A", "B", "C"])];
        let s = greedy_sample(&pool, 1, 3).unwrap();
        assert_eq!(s.source_ids(), [0]);
        assert!(s.counts().values().all(|&n| n >= 1));
    }

    #[test]
    fn exhaustion_records_shortfall() {
        let pool = vec![sent(&["C"]), sent(&["C"]), sent(&["D"]), sent(&["D"])];
        let s = greedy_sample(&pool, 5, 9).unwrap();
        assert_eq!(s.count("C"), 2);
        assert!(s.shortfalls().contains(&Shortfall {
            class: "C".into(),
            wanted: 5,
            got: 2
        }));
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn errors() {
        assert_eq!(greedy_sample(&[], 1, 0), Err(SampleError::EmptyPool));
        assert_eq!(greedy_sample(&[sent(&["A"])], 0, 0), Err(SampleError::ZeroK));
        let bio = TaggedSentence::new(
            vec!["a".into()],
            vec![TagLabel::Begin("A".into())],
            TagScheme::Bio,
        )
        .unwrap();
        assert_eq!(
            greedy_sample(&[sent(&["A"]), bio], 1, 0),
            Err(SampleError::MixedSchemes)
        );
        assert_eq!(
            build_episode(&[sent(&["A"])], 1, 5, 0),
            Err(SampleError::EmptyRemainder)
        );
    }

    #[test]
    fn entity_free_sentences_are_never_drawn() {
        let pool = vec![sent(&[]), sent(&["A"]), sent(&[])];
        let s = greedy_sample(&pool, 3, 1).unwrap();
        assert_eq!(s.source_ids(), [1]);
    }

    #[test]
    fn episode_is_disjoint_and_deterministic() {
        let pool: Vec<_> = (0..10)
            .map(|i| match i % 3 {
                0 => sent(&["PER"]),
                1 => sent(&["LOC", "PER"]),
                _ => sent(&["ORG"]),
            })
            .collect();
        let a = build_episode(&pool, 1, 30, 5).unwrap();
        let b = build_episode(&pool, 1, 30, 5).unwrap();
        assert_eq!(a, b);
        let support: BTreeSet<_> = a.support.source_ids().iter().collect();
        assert!(a.test.source_ids().iter().all(|i| !support.contains(i)));
        assert!(!a.test_sentences().is_empty());
    }

    #[test]
    fn episode_test_shortfall_when_support_takes_everything() {
        // Only one sentence has RARE; the support must take it.
        let pool = vec![sent(&["RARE", "X"]), sent(&["X"]), sent(&["X"])];
        let e = build_episode(&pool, 1, 30, 0).unwrap();
        assert!(e.support.source_ids().contains(&0));
        assert!(e
            .test
            .shortfalls()
            .iter()
            .any(|s| s.class == "RARE" && s.got == 0));
    }

    #[test]
    fn episode_test_size_caps_selection() {
        let pool: Vec<_> = (0..40).map(|_| sent(&["A"])).collect();
        let e = build_episode(&pool, 10, 3, 2).unwrap();
        assert_eq!(e.support.len(), 10);
        assert_eq!(e.test.len(), 3);
    }

    #[test]
    fn manifest_round_trip() {
        let pool: Vec<_> = (0..12)
            .map(|i| if i % 2 == 0 { sent(&["A", "B"]) } else { sent(&["B"]) })
            .collect();
        let s = greedy_sample(&pool, 2, 11).unwrap();
        let text = s.to_manifest();
        let back = SupportSet::from_manifest(&text, &pool).unwrap();
        assert_eq!(back.source_ids(), s.source_ids());
        assert_eq!(back.counts(), s.counts());
        assert_eq!(back.seed(), 11);
        assert_eq!(back.k(), 2);
        assert_eq!(back.class_order(), s.class_order());

        let tampered = text.replace("count.B=", "count.B=9");
        assert!(SupportSet::from_manifest(&tampered, &pool).is_err());
        assert!(SupportSet::from_manifest("seed=1\nk=1\nsentences=99\n", &pool).is_err());
        assert!(SupportSet::from_manifest("seed=1\nk=1\nsentences=0 0\n", &pool).is_err());
    }
}
