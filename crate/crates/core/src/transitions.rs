//! Abstract tag transitions estimated on a source corpus and expanded to an
//! arbitrary target tag set.
//!
//! The abstract states are `O`, `I` (inside some entity) and, as a target of
//! an `I` state, `I-Other` (a different entity class), plus sentence
//! boundaries `START` and `END`. Expansion to `N` target classes divides
//! each abstract probability evenly among the concrete transitions it
//! stands for, so every expanded row remains a distribution.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{TagLabel, TagScheme, TaggedSentence};

#[derive(Debug, Error, PartialEq)]
pub enum TransitionError {
    #[error("transition counting needs IO-tagged input; convert BIO with corpus::to_io")]
    NotIo,
    #[error("no transitions were counted")]
    EmptyCounts,
    #[error("expansion needs at least one target class")]
    NoClasses,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("matrix must be {expected}x{expected}, got {found}")]
    Shape { expected: usize, found: String },
    #[error("matrix entry {row},{col} is {value}; entries must be finite and non-negative")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("transition file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Normalization used when turning counts into probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `p(Y|X) = N(X→Y) / N(X→·)`; every row is a distribution.
    #[default]
    RowWise,
    /// `p(Y|X) = N(X→Y) / N(·→Y)`, normalizing by incoming mass. Rows are
    /// generally not distributions.
    Incoming,
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row" | "rowwise" | "row-wise" => Ok(Normalization::RowWise),
            "incoming" | "literal" => Ok(Normalization::Incoming),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::RowWise => "row",
            Normalization::Incoming => "incoming",
        })
    }
}

/// Abstract transition counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransitionCounts {
    pub start_o: u64,
    pub start_i: u64,
    pub o_o: u64,
    pub o_i: u64,
    pub o_end: u64,
    pub i_o: u64,
    pub i_same: u64,
    pub i_other: u64,
    pub i_end: u64,
}

impl TransitionCounts {
    pub fn total(&self) -> u64 {
        self.start_o
            + self.start_i
            + self.o_o
            + self.o_i
            + self.o_end
            + self.i_o
            + self.i_same
            + self.i_other
            + self.i_end
    }
}

impl std::ops::AddAssign for TransitionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.start_o += rhs.start_o;
        self.start_i += rhs.start_i;
        self.o_o += rhs.o_o;
        self.o_i += rhs.o_i;
        self.o_end += rhs.o_end;
        self.i_o += rhs.i_o;
        self.i_same += rhs.i_same;
        self.i_other += rhs.i_other;
        self.i_end += rhs.i_end;
    }
}

/// Counts abstract transitions over an IO corpus, including `START→first`
/// and `last→END` for every sentence.
pub fn count_abstract(corpus: &[TaggedSentence]) -> Result<TransitionCounts, TransitionError> {
    let mut counts = TransitionCounts::default();
    for sentence in corpus {
        if sentence.scheme() != TagScheme::Io {
            return Err(TransitionError::NotIo);
        }
        let tags = sentence.tags();
        match tags.first().and_then(TagLabel::class) {
            None => counts.start_o += 1,
            Some(_) => counts.start_i += 1,
        }
        for pair in tags.windows(2) {
            match (pair[0].class(), pair[1].class()) {
                (None, None) => counts.o_o += 1,
                (None, Some(_)) => counts.o_i += 1,
                (Some(_), None) => counts.i_o += 1,
                (Some(x), Some(y)) if x == y => counts.i_same += 1,
                (Some(_), Some(_)) => counts.i_other += 1,
            }
        }
        match tags.last().and_then(TagLabel::class) {
            None => counts.o_end += 1,
            Some(_) => counts.i_end += 1,
        }
    }
    Ok(counts)
}

/// `p(· | START)` over `{O, I}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartRow {
    pub o: f64,
    pub i: f64,
}

/// `p(· | O)` over `{O, I, END}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutsideRow {
    pub o: f64,
    pub i: f64,
    pub end: f64,
}

/// `p(· | I)` over `{O, I, I-Other, END}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsideRow {
    pub o: f64,
    pub same: f64,
    pub other: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstractTransitions {
    pub from_start: StartRow,
    pub from_o: OutsideRow,
    pub from_i: InsideRow,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Turns counts into probabilities. Rows with no outgoing transitions
/// become uniform over their successors.
pub fn estimate_abstract(
    counts: &TransitionCounts,
    mode: Normalization,
) -> Result<AbstractTransitions, TransitionError> {
    if counts.total() == 0 {
        return Err(TransitionError::EmptyCounts);
    }
    let c = counts;
    let start_out = c.start_o + c.start_i;
    let o_out = c.o_o + c.o_i + c.o_end;
    let i_out = c.i_o + c.i_same + c.i_other + c.i_end;

    let (from_start, from_o, from_i) = match mode {
        Normalization::RowWise => (
            StartRow {
                o: ratio(c.start_o, start_out),
                i: ratio(c.start_i, start_out),
            },
            OutsideRow {
                o: ratio(c.o_o, o_out),
                i: ratio(c.o_i, o_out),
                end: ratio(c.o_end, o_out),
            },
            InsideRow {
                o: ratio(c.i_o, i_out),
                same: ratio(c.i_same, i_out),
                other: ratio(c.i_other, i_out),
                end: ratio(c.i_end, i_out),
            },
        ),
        Normalization::Incoming => {
            let into_o = c.start_o + c.o_o + c.i_o;
            let into_i = c.start_i + c.o_i + c.i_same;
            let into_end = c.o_end + c.i_end;
            (
                StartRow {
                    o: ratio(c.start_o, into_o),
                    i: ratio(c.start_i, into_i),
                },
                OutsideRow {
                    o: ratio(c.o_o, into_o),
                    i: ratio(c.o_i, into_i),
                    end: ratio(c.o_end, into_end),
                },
                InsideRow {
                    o: ratio(c.i_o, into_o),
                    same: ratio(c.i_same, into_i),
                    other: ratio(c.i_other, c.i_other),
                    end: ratio(c.i_end, into_end),
                },
            )
        }
    };

    Ok(AbstractTransitions {
        from_start: if start_out == 0 {
            StartRow { o: 0.5, i: 0.5 }
        } else {
            from_start
        },
        from_o: if o_out == 0 {
            let third = 1.0 / 3.0;
            OutsideRow {
                o: third,
                i: third,
                end: third,
            }
        } else {
            from_o
        },
        from_i: if i_out == 0 {
            InsideRow {
                o: 0.25,
                same: 0.25,
                other: 0.25,
                end: 0.25,
            }
        } else {
            from_i
        },
    })
}

/// Concrete transition matrix over `O` and one `I-c` state per target class.
///
/// State `0` is `O` and state `1 + j` is `I-classes[j]`. Rows run over
/// `START` followed by the states; columns run over the states followed by
/// `END`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedTransitions {
    classes: Vec<String>,
    /// `(states + 1) x (states + 1)`, row-major. Row 0 is START.
    matrix: Vec<f64>,
    tau: f64,
    mode: Normalization,
    /// Number of rows where `I-Other` mass had no target and was folded into
    /// the self transition.
    folded_other: usize,
}

impl ExpandedTransitions {
    /// Wraps an explicit `(N+2) x (N+2)` matrix (START row first, END column
    /// last). Entries must be finite and non-negative; the START→END cell
    /// must be zero.
    pub fn from_matrix(classes: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, TransitionError> {
        if classes.is_empty() {
            return Err(TransitionError::NoClasses);
        }
        let side = classes.len() + 2;
        if rows.len() != side || rows.iter().any(|r| r.len() != side) {
            return Err(TransitionError::Shape {
                expected: side,
                found: format!(
                    "{}x[{}]",
                    rows.len(),
                    rows.iter()
                        .map(|r| r.len().to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                ),
            });
        }
        for (row, values) in rows.iter().enumerate() {
            for (col, &value) in values.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(TransitionError::BadEntry { row, col, value });
                }
            }
        }
        if rows[0][side - 1] != 0.0 {
            return Err(TransitionError::BadEntry {
                row: 0,
                col: side - 1,
                value: rows[0][side - 1],
            });
        }
        Ok(Self {
            classes,
            matrix: rows.into_iter().flatten().collect(),
            tau: 1.0,
            mode: Normalization::RowWise,
            folded_other: 0,
        })
    }

    /// Uniform transitions: START spreads evenly over all states, every
    /// state spreads evenly over all states and END.
    pub fn uniform(classes: Vec<String>) -> Result<Self, TransitionError> {
        let side = classes.len() + 2;
        let mut rows = vec![vec![1.0 / side as f64; side]; side];
        rows[0] = vec![1.0 / (side - 1) as f64; side];
        rows[0][side - 1] = 0.0;
        Self::from_matrix(classes, rows)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Number of tag states (`O` plus one per class).
    pub fn num_states(&self) -> usize {
        self.classes.len() + 1
    }

    /// Tag label of a state index.
    pub fn label(&self, state: usize) -> TagLabel {
        if state == 0 {
            TagLabel::Outside
        } else {
            TagLabel::Inside(self.classes[state - 1].clone())
        }
    }

    pub fn labels(&self) -> Vec<TagLabel> {
        (0..self.num_states()).map(|s| self.label(s)).collect()
    }

    fn side(&self) -> usize {
        self.classes.len() + 2
    }

    /// Full row (START is row 0, state `s` is row `s + 1`), END column last.
    pub fn row(&self, row: usize) -> &[f64] {
        let side = self.side();
        &self.matrix[row * side..(row + 1) * side]
    }

    /// All rows.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.matrix.chunks(self.side())
    }

    /// `p(to | START)`.
    pub fn start(&self, to: usize) -> f64 {
        self.row(0)[to]
    }

    /// `p(to | from)` between tag states.
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.row(from + 1)[to]
    }

    /// `p(END | from)`.
    pub fn end(&self, from: usize) -> f64 {
        self.row(from + 1)[self.side() - 1]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mode(&self) -> Normalization {
        self.mode
    }

    pub fn folded_other(&self) -> usize {
        self.folded_other
    }

    /// Records the normalization the matrix was estimated with.
    pub fn with_mode(mut self, mode: Normalization) -> Self {
        self.mode = mode;
        self
    }

    /// Text form: header lines for classes, tau and mode, then one
    /// `row <name> <p...>` line per row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "classes={}", self.classes.join(" ")).unwrap();
        writeln!(out, "tau={}", self.tau).unwrap();
        writeln!(out, "mode={}", self.mode).unwrap();
        let mut columns: Vec<String> = self.labels().iter().map(ToString::to_string).collect();
        columns.push("END".into());
        writeln!(out, "columns={}", columns.join(" ")).unwrap();
        for (r, row) in self.rows().enumerate() {
            let name = if r == 0 {
                "START".to_string()
            } else {
                self.label(r - 1).to_string()
            };
            let values: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            writeln!(out, "row {name} {}", values.join(" ")).unwrap();
        }
        out
    }

    /// Parses [`ExpandedTransitions::to_text`] output or a hand-written
    /// matrix in the same layout.
    pub fn from_text(text: &str) -> Result<Self, TransitionError> {
        let mut classes = None;
        let mut tau = 1.0;
        let mut mode = Normalization::RowWise;
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let bad = |reason: String| TransitionError::Parse {
                line: line_no,
                reason,
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("row ") {
                let mut fields = rest.split_whitespace();
                fields.next().ok_or_else(|| bad("missing row name".into()))?;
                let values = fields
                    .map(|v| v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                rows.push(values);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value or row".into()))?;
            match key.trim() {
                "classes" => {
                    classes = Some(value.split_whitespace().map(str::to_string).collect())
                }
                "tau" => {
                    tau = value
                        .trim()
                        .parse()
                        .map_err(|e| bad(format!("tau: {e}")))?
                }
                "mode" => mode = value.trim().parse().map_err(bad)?,
                "columns" => {}
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let classes = classes.ok_or(TransitionError::Parse {
            line: 0,
            reason: "missing classes".into(),
        })?;
        let mut m = Self::from_matrix(classes, rows)?;
        m.tau = tau;
        m.mode = mode;
        Ok(m)
    }
}

/// Spreads abstract probabilities over `classes`.
///
/// With a single class, `I-Other` has no target and its mass is added to the
/// self transition.
pub fn expand(
    abs: &AbstractTransitions,
    classes: &[String],
) -> Result<ExpandedTransitions, TransitionError> {
    let n = classes.len();
    if n == 0 {
        return Err(TransitionError::NoClasses);
    }
    let side = n + 2;
    let end = side - 1;
    let nf = n as f64;
    let mut rows = vec![vec![0.0; side]; side];

    rows[0][0] = abs.from_start.o;
    rows[0][1..=n].fill(abs.from_start.i / nf);

    rows[1][0] = abs.from_o.o;
    rows[1][1..=n].fill(abs.from_o.i / nf);
    rows[1][end] = abs.from_o.end;

    let mut folded = 0;
    for from in 1..=n {
        let row = &mut rows[from + 1];
        row[0] = abs.from_i.o;
        row[end] = abs.from_i.end;
        if n == 1 {
            row[from] = abs.from_i.same + abs.from_i.other;
            if abs.from_i.other > 0.0 {
                folded += 1;
            }
        } else {
            row[1..=n].fill(abs.from_i.other / (nf - 1.0));
            row[from] = abs.from_i.same;
        }
    }
    if folded > 0 {
        log::warn!("single target class: I-Other mass folded into the self transition");
    }

    let mut m = ExpandedTransitions::from_matrix(classes.to_vec(), rows)?;
    m.folded_other = folded;
    Ok(m)
}

/// Raises every entry to the power `tau` and renormalizes each row.
///
/// Zeros stay zero. A row that is entirely zero becomes uniform over its
/// legal successors (START never goes to END).
pub fn apply_temperature(
    m: &ExpandedTransitions,
    tau: f64,
) -> Result<ExpandedTransitions, TransitionError> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(TransitionError::BadTemperature(tau));
    }
    let side = m.side();
    let mut out = m.clone();
    for (r, row) in out.matrix.chunks_mut(side).enumerate() {
        for p in row.iter_mut() {
            if *p > 0.0 {
                *p = p.powf(tau);
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        } else {
            let legal = if r == 0 { side - 1 } else { side };
            for (c, p) in row.iter_mut().enumerate() {
                *p = if c < legal { 1.0 / legal as f64 } else { 0.0 };
            }
        }
    }
    out.tau = m.tau * tau;
    Ok(out)
}

/// Counts, estimates and expands in one step.
pub fn estimate_expanded(
    source: &[TaggedSentence],
    classes: &[String],
    mode: Normalization,
    tau: f64,
) -> Result<ExpandedTransitions, TransitionError> {
    let counts = count_abstract(source)?;
    let abs = estimate_abstract(&counts, mode)?;
    let expanded = expand(&abs, classes)?.with_mode(mode);
    apply_temperature(&expanded, tau)
}
