//! Column-format NER corpora: parsing, tagging schemes, entity spans and
//! label remapping.
//!
//! The reader accepts whitespace-separated columns with the token in the
//! first column and the tag in the last one; anything in between is ignored.
//! A blank line ends a sentence. If any tag in the file carries a `B-`
//! prefix the whole file is read under [`TagScheme::Bio`], otherwise under
//! [`TagScheme::Io`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: expected at least 2 columns, found {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: tag `{tag}` has an empty class name")]
    EmptyClass { line: usize, tag: String },
    #[error("line {line}: unrecognized tag `{tag}`")]
    UnknownTag { line: usize, tag: String },
    #[error("sentence has {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("sentence is empty")]
    EmptySentence,
    #[error("position {position}: {reason}")]
    InvalidTag { position: usize, reason: String },
    #[error("target class set is empty")]
    NoTargetClasses,
}

/// Tagging scheme of a sentence or corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagScheme {
    Bio,
    Io,
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagScheme::Bio => f.write_str("BIO"),
            TagScheme::Io => f.write_str("IO"),
        }
    }
}

impl FromStr for TagScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BIO" | "IOB2" => Ok(TagScheme::Bio),
            "IO" => Ok(TagScheme::Io),
            other => Err(format!("unknown tagging scheme `{other}`")),
        }
    }
}

/// A per-token tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagLabel {
    Outside,
    Inside(String),
    Begin(String),
}

impl TagLabel {
    /// Entity class of the tag, `None` for `O`.
    pub fn class(&self) -> Option<&str> {
        match self {
            TagLabel::Outside => None,
            TagLabel::Inside(c) | TagLabel::Begin(c) => Some(c),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, TagLabel::Outside)
    }

    /// The IO form of this tag (`B-X` becomes `I-X`).
    pub fn to_io(&self) -> TagLabel {
        match self {
            TagLabel::Begin(c) => TagLabel::Inside(c.clone()),
            other => other.clone(),
        }
    }

    /// Parses `O`, `I-X` or `B-X`. Returns `None` for anything else.
    fn parse(tag: &str) -> Option<Result<TagLabel, ()>> {
        if tag == "O" {
            return Some(Ok(TagLabel::Outside));
        }
        let (prefix, class) = (tag.get(..2)?, tag.get(2..)?);
        let make = match prefix {
            "I-" => TagLabel::Inside as fn(String) -> TagLabel,
            "B-" => TagLabel::Begin,
            _ => return None,
        };
        if class.is_empty() {
            Some(Err(()))
        } else {
            Some(Ok(make(class.to_string())))
        }
    }
}

impl fmt::Display for TagLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagLabel::Outside => f.write_str("O"),
            TagLabel::Inside(c) => write!(f, "I-{c}"),
            TagLabel::Begin(c) => write!(f, "B-{c}"),
        }
    }
}

/// A tokenized sentence with one tag per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    tokens: Vec<String>,
    tags: Vec<TagLabel>,
    scheme: TagScheme,
}

impl TaggedSentence {
    /// Builds a sentence, checking lengths and tag validity under `scheme`.
    pub fn new(
        tokens: Vec<String>,
        tags: Vec<TagLabel>,
        scheme: TagScheme,
    ) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        if tokens.is_empty() {
            return Err(CorpusError::EmptySentence);
        }
        validate_tags(&tags, scheme)?;
        Ok(Self {
            tokens,
            tags,
            scheme,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[TagLabel] {
        &self.tags
    }

    pub fn scheme(&self) -> TagScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Returns a copy with the tags replaced. The result is validated under
    /// the same scheme.
    pub fn with_tags(&self, tags: Vec<TagLabel>) -> Result<Self, CorpusError> {
        Self::new(self.tokens.clone(), tags, self.scheme)
    }
}

fn validate_tags(tags: &[TagLabel], scheme: TagScheme) -> Result<(), CorpusError> {
    let mut prev: Option<&TagLabel> = None;
    for (position, tag) in tags.iter().enumerate() {
        if let Some(c) = tag.class() {
            if c.is_empty() {
                return Err(CorpusError::InvalidTag {
                    position,
                    reason: "empty class name".into(),
                });
            }
        }
        match (scheme, tag) {
            (TagScheme::Io, TagLabel::Begin(_)) => {
                return Err(CorpusError::InvalidTag {
                    position,
                    reason: format!("`{tag}` is not allowed under IO"),
                })
            }
            (TagScheme::Bio, TagLabel::Inside(c)) if prev.and_then(|p| p.class()) != Some(c) => {
                return Err(CorpusError::InvalidTag {
                    position,
                    reason: format!("`{tag}` does not continue an entity of class {c}"),
                })
            }
            _ => {}
        }
        prev = Some(tag);
    }
    Ok(())
}

/// Entity span over token indices, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub class: String,
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({},{})", self.class, self.start, self.end)
    }
}

/// Counters collected while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    /// `I-X` tags without a valid opener that were promoted to `B-X`.
    pub repaired: usize,
    /// Sentences consisting only of a `-DOCSTART-` marker that were skipped.
    pub docstarts: usize,
}

/// Parses column-format text. See [`parse_conll_with_stats`].
pub fn parse_conll(text: &str) -> Result<Vec<TaggedSentence>, CorpusError> {
    parse_conll_with_stats(text).map(|(sentences, _)| sentences)
}

/// Parses column-format text and reports repairs made along the way.
///
/// Under BIO an `I-X` that does not follow `B-X` or `I-X` is promoted to
/// `B-X` (the conlleval convention).
pub fn parse_conll_with_stats(
    text: &str,
) -> Result<(Vec<TaggedSentence>, ParseStats), CorpusError> {
    let mut raw: Vec<(Vec<String>, Vec<TagLabel>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut bio = false;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !tokens.is_empty() {
                raw.push((std::mem::take(&mut tokens), std::mem::take(&mut tags)));
            }
            continue;
        }
        let columns: Vec<&str> = trimmed.split_whitespace().collect();
        if columns.len() < 2 {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                found: columns.len(),
            });
        }
        let tag_text = columns[columns.len() - 1];
        let tag = match TagLabel::parse(tag_text) {
            Some(Ok(tag)) => tag,
            Some(Err(())) => {
                return Err(CorpusError::EmptyClass {
                    line: line_no,
                    tag: tag_text.to_string(),
                })
            }
            None => {
                return Err(CorpusError::UnknownTag {
                    line: line_no,
                    tag: tag_text.to_string(),
                })
            }
        };
        bio |= matches!(tag, TagLabel::Begin(_));
        tokens.push(columns[0].to_string());
        tags.push(tag);
    }
    if !tokens.is_empty() {
        raw.push((tokens, tags));
    }

    let scheme = if bio { TagScheme::Bio } else { TagScheme::Io };
    let mut stats = ParseStats::default();
    let mut sentences = Vec::with_capacity(raw.len());
    for (tokens, mut tags) in raw {
        if tokens.len() == 1 && tokens[0] == "-DOCSTART-" {
            stats.docstarts += 1;
            continue;
        }
        if scheme == TagScheme::Bio {
            stats.repaired += repair_bio(&mut tags);
        }
        sentences.push(TaggedSentence::new(tokens, tags, scheme)?);
    }
    if stats.repaired > 0 {
        log::warn!("promoted {} orphan I- tags to B-", stats.repaired);
    }
    Ok((sentences, stats))
}

fn repair_bio(tags: &mut [TagLabel]) -> usize {
    let mut repaired = 0;
    for t in 0..tags.len() {
        if let TagLabel::Inside(c) = &tags[t] {
            let continues = t > 0 && tags[t - 1].class() == Some(c.as_str());
            if !continues {
                tags[t] = TagLabel::Begin(c.clone());
                repaired += 1;
            }
        }
    }
    repaired
}

/// Renders sentences as two-column text (`token<TAB>tag`), one blank line
/// after each sentence.
pub fn render_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (token, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(token);
            out.push('\t');
            out.push_str(&tag.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Converts a BIO sentence to IO. Adjacent same-class entities merge.
pub fn to_io(sentence: &TaggedSentence) -> TaggedSentence {
    TaggedSentence {
        tokens: sentence.tokens.clone(),
        tags: sentence.tags.iter().map(TagLabel::to_io).collect(),
        scheme: TagScheme::Io,
    }
}

/// Entity spans of a sentence, in start order.
pub fn to_spans(sentence: &TaggedSentence) -> Vec<EntitySpan> {
    spans_from_tags(&sentence.tags)
}

/// Entity spans of a bare tag sequence.
///
/// `B-X` always opens a span; `I-X` extends the current span when the
/// previous tag had class `X` and opens a new one otherwise. Under IO this
/// yields maximal same-class runs and under valid BIO it matches conlleval.
pub fn spans_from_tags(tags: &[TagLabel]) -> Vec<EntitySpan> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    for (t, tag) in tags.iter().enumerate() {
        let (class, begins) = match tag {
            TagLabel::Outside => continue,
            TagLabel::Begin(c) => (c, true),
            TagLabel::Inside(c) => (c, false),
        };
        match spans.last_mut() {
            Some(last) if !begins && last.class == *class && last.end + 1 == t => last.end = t,
            _ => spans.push(EntitySpan {
                class: class.clone(),
                start: t,
                end: t,
            }),
        }
    }
    spans
}

/// Entity classes of a corpus with their span counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagSet {
    classes: Vec<String>,
    frequencies: BTreeMap<String, usize>,
}

impl TagSet {
    /// Builds a tag set from span counts. Zero counts are dropped.
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Self {
        let frequencies: BTreeMap<String, usize> =
            counts.into_iter().filter(|(_, n)| *n > 0).collect();
        let mut classes: Vec<String> = frequencies.keys().cloned().collect();
        // BTreeMap keys are already sorted, so a stable sort keeps ties lexicographic.
        classes.sort_by_key(|c| frequencies[c]);
        Self {
            classes,
            frequencies,
        }
    }

    /// Classes in ascending frequency order, ties broken lexicographically.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn frequency(&self, class: &str) -> usize {
        self.frequencies.get(class).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &BTreeMap<String, usize> {
        &self.frequencies
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of tags (`|classes| + 1` under IO, `2·|classes| + 1` under BIO).
    pub fn tag_count(&self, scheme: TagScheme) -> usize {
        match scheme {
            TagScheme::Io => self.classes.len() + 1,
            TagScheme::Bio => 2 * self.classes.len() + 1,
        }
    }
}

/// Span count per class in a single sentence.
pub fn span_counts(sentence: &TaggedSentence) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for span in to_spans(sentence) {
        *counts.entry(span.class).or_insert(0) += 1;
    }
    counts
}

/// Counts entity spans (not tokens) per class over a corpus.
pub fn compute_tag_set(corpus: &[TaggedSentence]) -> TagSet {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for sentence in corpus {
        for (class, n) in span_counts(sentence) {
            *counts.entry(class).or_insert(0) += n;
        }
    }
    TagSet::from_counts(counts)
}

/// Which side of the tag-set extension split a corpus is remapped for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemapMode {
    /// Hide the target classes (they become `O`).
    Train,
    /// Keep only the target classes.
    Test,
}

/// Relabels a corpus for the tag-set extension setting.
pub fn remap_for_extension(
    corpus: &[TaggedSentence],
    target_classes: &BTreeSet<String>,
    mode: RemapMode,
) -> Result<Vec<TaggedSentence>, CorpusError> {
    if target_classes.is_empty() {
        return Err(CorpusError::NoTargetClasses);
    }
    let erase = |class: &str| match mode {
        RemapMode::Train => target_classes.contains(class),
        RemapMode::Test => !target_classes.contains(class),
    };
    Ok(corpus
        .iter()
        .map(|s| {
            let tags = s
                .tags
                .iter()
                .map(|tag| match tag.class() {
                    Some(c) if erase(c) => TagLabel::Outside,
                    _ => tag.clone(),
                })
                .collect();
            // Erasing whole classes keeps BIO runs of the other classes intact.
            TaggedSentence {
                tokens: s.tokens.clone(),
                tags,
                scheme: s.scheme,
            }
        })
        .collect())
}
