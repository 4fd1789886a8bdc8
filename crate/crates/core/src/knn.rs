//! Token-level nearest-neighbor classification over support tokens.
//!
//! A token's distance to a class is the smallest squared Euclidean distance
//! to any support token of that class. The predicted tag is the class with
//! the smallest such distance, and the emission distribution is a softmax
//! over the negated class distances.
//!
//! Tag states are ordered `O` first, then entity classes in the order given
//! at build time. Ties always go to the lower state index. `B-X` support
//! tokens are pooled with `I-X`, so states are always IO tags.

use std::sync::Arc;

use thiserror::Error;

use crate::corpus::TagLabel;
use crate::embed::EmbeddingTable;
use crate::sampler::SupportSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnnError {
    #[error("support index is empty")]
    EmptyIndex,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("class {0} has no support tokens")]
    MissingClass(String),
    #[error("support token has class {0}, which is not in the class list")]
    UnknownClass(String),
    #[error("support sentence {sentence}: {found} vectors for {expected} tokens")]
    Alignment {
        sentence: usize,
        expected: usize,
        found: usize,
    },
    #[error("emission row has {probs} probabilities for {labels} labels")]
    RowShape { labels: usize, probs: usize },
}

/// Squared Euclidean distance.
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64, KnnError> {
    if a.len() != b.len() {
        return Err(KnnError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(sq_dist(a, b))
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Support tokens grouped by tag state.
#[derive(Debug, Clone)]
pub struct SupportIndex {
    dim: usize,
    labels: Arc<[TagLabel]>,
    vectors: Vec<f64>,
    tags: Vec<usize>,
    by_state: Vec<Vec<usize>>,
}

impl SupportIndex {
    /// Builds an index from `(vector, tag)` entries.
    ///
    /// `classes` fixes the order of entity states. Every listed class must
    /// have at least one entry and every entry's class must be listed. The
    /// `O` state exists only when some entry is tagged `O`.
    pub fn build<'a, I>(entries: I, classes: &[String]) -> Result<Self, KnnError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a TagLabel)>,
    {
        let mut vectors = Vec::new();
        let mut raw_tags: Vec<Option<usize>> = Vec::new();
        let mut dim = None;
        for (vector, tag) in entries {
            let d = *dim.get_or_insert(vector.len());
            if vector.len() != d {
                return Err(KnnError::DimMismatch {
                    expected: d,
                    found: vector.len(),
                });
            }
            let state = match tag.class() {
                None => None,
                Some(c) => Some(
                    classes
                        .iter()
                        .position(|x| x == c)
                        .ok_or_else(|| KnnError::UnknownClass(c.to_string()))?,
                ),
            };
            vectors.extend_from_slice(vector);
            raw_tags.push(state);
        }
        let dim = dim.ok_or(KnnError::EmptyIndex)?;
        if dim == 0 {
            return Err(KnnError::EmptyIndex);
        }

        let has_outside = raw_tags.iter().any(Option::is_none);
        let offset = usize::from(has_outside);
        let mut labels = Vec::with_capacity(classes.len() + offset);
        if has_outside {
            labels.push(TagLabel::Outside);
        }
        labels.extend(classes.iter().map(|c| TagLabel::Inside(c.clone())));

        let tags: Vec<usize> = raw_tags
            .iter()
            .map(|t| t.map_or(0, |c| c + offset))
            .collect();
        let mut by_state = vec![Vec::new(); labels.len()];
        for (entry, &state) in tags.iter().enumerate() {
            by_state[state].push(entry);
        }
        if let Some(empty) = by_state.iter().position(Vec::is_empty) {
            return Err(KnnError::MissingClass(
                labels[empty].class().unwrap_or("O").to_string(),
            ));
        }
        Ok(Self {
            dim,
            labels: labels.into(),
            vectors,
            tags,
            by_state,
        })
    }

    /// Builds the index for a support set whose sentences are rows
    /// `support.source_ids()` of `table`. Classes follow the support set's
    /// tag set order.
    pub fn from_support(support: &SupportSet, table: &EmbeddingTable) -> Result<Self, KnnError> {
        let classes = support.tag_set().classes().to_vec();
        let mut entries = Vec::new();
        for (sentence, &id) in support.sentences().iter().zip(support.source_ids()) {
            let found = if id < table.len() { table.token_count(id) } else { 0 };
            if found != sentence.len() {
                return Err(KnnError::Alignment {
                    sentence: id,
                    expected: sentence.len(),
                    found,
                });
            }
            for (t, tag) in sentence.tags().iter().enumerate() {
                entries.push((table.vector(id, t), tag));
            }
        }
        Self::build(entries, &classes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tag states, `O` first when present.
    pub fn labels(&self) -> &[TagLabel] {
        &self.labels
    }

    pub fn shared_labels(&self) -> Arc<[TagLabel]> {
        Arc::clone(&self.labels)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn entry(&self, i: usize) -> (&[f64], &TagLabel) {
        (
            &self.vectors[i * self.dim..(i + 1) * self.dim],
            &self.labels[self.tags[i]],
        )
    }

    /// Entry indices of one state.
    pub fn state_entries(&self, state: usize) -> &[usize] {
        &self.by_state[state]
    }

    fn check_query(&self, query: &[f64]) -> Result<(), KnnError> {
        if query.len() != self.dim {
            return Err(KnnError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(())
    }
}

/// Minimum squared distance from `query` to each state's support tokens,
/// aligned with [`SupportIndex::labels`].
pub fn class_distances(query: &[f64], index: &SupportIndex) -> Result<Vec<f64>, KnnError> {
    index.check_query(query)?;
    let mut best = vec![f64::INFINITY; index.labels.len()];
    for (entry, &state) in index.tags.iter().enumerate() {
        let v = &index.vectors[entry * index.dim..(entry + 1) * index.dim];
        let d = sq_dist(query, v);
        if d < best[state] {
            best[state] = d;
        }
    }
    Ok(best)
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tag of the closest class.
pub fn nearest_tag(query: &[f64], index: &SupportIndex) -> Result<TagLabel, KnnError> {
    let d = class_distances(query, index)?;
    Ok(index.labels[argmin(&d)].clone())
}

/// Emission distribution of one token over the index's tag states.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionRow {
    labels: Arc<[TagLabel]>,
    probs: Vec<f64>,
    min_dists: Vec<f64>,
}

impl EmissionRow {
    /// Softmax over negated distances, shifted by the minimum distance.
    pub fn from_distances(labels: Arc<[TagLabel]>, min_dists: Vec<f64>) -> Result<Self, KnnError> {
        if labels.len() != min_dists.len() || labels.is_empty() {
            return Err(KnnError::RowShape {
                labels: labels.len(),
                probs: min_dists.len(),
            });
        }
        let lowest = min_dists.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = min_dists.iter().map(|d| (lowest - d).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(Self {
            labels,
            probs: weights.iter().map(|w| w / total).collect(),
            min_dists,
        })
    }

    pub fn labels(&self) -> &[TagLabel] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn min_dists(&self) -> &[f64] {
        &self.min_dists
    }

    pub fn prob(&self, label: &TagLabel) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.probs[i])
    }

    /// Most probable state index (lowest index on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Emission row of one token.
pub fn emissions(query: &[f64], index: &SupportIndex) -> Result<EmissionRow, KnnError> {
    let d = class_distances(query, index)?;
    EmissionRow::from_distances(index.shared_labels(), d)
}

/// Emission rows of a sentence.
pub fn emission_rows<'a, I>(vectors: I, index: &SupportIndex) -> Result<Vec<EmissionRow>, KnnError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    vectors.into_iter().map(|v| emissions(v, index)).collect()
}

/// Independent nearest-class prediction for every token of a sentence.
pub fn nnshot_predict<'a, I>(vectors: I, index: &SupportIndex) -> Result<Vec<TagLabel>, KnnError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    vectors.into_iter().map(|v| nearest_tag(v, index)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per() -> TagLabel {
        TagLabel::Inside("PER".into())
    }

    fn two_class_index() -> SupportIndex {
        let entries: Vec<(Vec<f64>, TagLabel)> =
            vec![(vec![1.0, 0.0], per()), (vec![0.0, 1.0], TagLabel::Outside)];
        SupportIndex::build(
            entries.iter().map(|(v, t)| (v.as_slice(), t)),
            &["PER".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn sq_euclidean_examples() {
        assert_eq!(sq_euclidean(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(sq_euclidean(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 25.0);
        assert_eq!(
            sq_euclidean(&[1.0], &[1.0, 2.0]),
            Err(KnnError::DimMismatch {
                expected: 1,
                found: 2
            })
        );
    }

    #[test]
    fn class_distance_examples() {
        let index = two_class_index();
        assert_eq!(index.labels(), [TagLabel::Outside, per()]);
        let d = class_distances(&[0.6, 0.8], &index).unwrap();
        // d_O = 0.6² + 0.2² = 0.4, d_PER = 0.4² + 0.8² = 0.8
        assert!((d[0] - 0.4).abs() < 1e-12);
        assert!((d[1] - 0.8).abs() < 1e-12);
        assert_eq!(class_distances(&[1.0, 0.0], &index).unwrap()[1], 0.0);

        let single = SupportIndex::build(
            [([1.0, 0.0].as_slice(), &per())],
            &["PER".to_string()],
        )
        .unwrap();
        assert_eq!(class_distances(&[0.0, 1.0], &single).unwrap().len(), 1);
    }

    #[test]
    fn nearest_tag_examples() {
        let index = two_class_index();
        assert_eq!(nearest_tag(&[1.0, 0.0], &index).unwrap(), per());
        assert_eq!(nearest_tag(&[0.6, 0.8], &index).unwrap(), TagLabel::Outside);
        let mid = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(nearest_tag(&[mid, mid], &index).unwrap(), TagLabel::Outside);
    }

    #[test]
    fn emission_examples() {
        let labels: Arc<[TagLabel]> = vec![TagLabel::Outside, per()].into();
        let row = EmissionRow::from_distances(labels.clone(), vec![0.0, 0.0]).unwrap();
        assert_eq!(row.probs(), [0.5, 0.5]);
        let row = EmissionRow::from_distances(labels.clone(), vec![0.0, 3f64.ln()]).unwrap();
        assert!((row.probs()[0] - 0.75).abs() < 1e-12);
        assert!((row.probs()[1] - 0.25).abs() < 1e-12);
        let one: Arc<[TagLabel]> = vec![per()].into();
        assert_eq!(
            EmissionRow::from_distances(one, vec![1.7]).unwrap().probs(),
            [1.0]
        );
        assert!(EmissionRow::from_distances(labels, vec![0.0]).is_err());
    }

    #[test]
    fn shift_invariance() {
        let labels: Arc<[TagLabel]> = vec![TagLabel::Outside, per()].into();
        let a = EmissionRow::from_distances(labels.clone(), vec![0.2, 1.1]).unwrap();
        let b = EmissionRow::from_distances(labels, vec![500.2, 501.1]).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_sentence() {
        let index = two_class_index();
        let sentence = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let tags = nnshot_predict(sentence.iter().map(Vec::as_slice), &index).unwrap();
        assert_eq!(tags, [per(), TagLabel::Outside]);
        let one = nnshot_predict([[0.6, 0.8].as_slice()], &index).unwrap();
        assert_eq!(one.len(), 1);
        let rows = emission_rows(sentence.iter().map(Vec::as_slice), &index).unwrap();
        for (row, tag) in rows.iter().zip(&tags) {
            assert_eq!(&row.labels()[row.argmax()], tag);
        }
    }

    #[test]
    fn build_errors() {
        let empty: Vec<(&[f64], &TagLabel)> = Vec::new();
        assert_eq!(
            SupportIndex::build(empty, &[]).unwrap_err(),
            KnnError::EmptyIndex
        );
        let o = TagLabel::Outside;
        assert_eq!(
            SupportIndex::build([([1.0].as_slice(), &o)], &["PER".to_string()]).unwrap_err(),
            KnnError::MissingClass("PER".into())
        );
        assert_eq!(
            SupportIndex::build([([1.0].as_slice(), &per())], &[]).unwrap_err(),
            KnnError::UnknownClass("PER".into())
        );
        assert!(matches!(
            SupportIndex::build(
                [([1.0].as_slice(), &o), ([1.0, 2.0].as_slice(), &o)],
                &[]
            ),
            Err(KnnError::DimMismatch { .. })
        ));
        let index = two_class_index();
        assert!(nearest_tag(&[1.0], &index).is_err());
    }

    #[test]
    fn begin_tags_pool_with_inside() {
        let b = TagLabel::Begin("PER".into());
        let entries = [([1.0, 0.0].as_slice(), &b), ([0.0, 1.0].as_slice(), &per())];
        let index = SupportIndex::build(entries, &["PER".to_string()]).unwrap();
        assert_eq!(index.labels(), [per()]);
        assert_eq!(index.state_entries(0), [0, 1]);
    }
}
