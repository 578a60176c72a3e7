//! Event-sequence datasets and the gap-size split protocol.
//!
//! Positions are 1-based throughout, matching the text format: an example
//! with target position `t` predicts `x_t` from the prefix `x_1..x_{t-1}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no sequences")]
    Empty,
    #[error("gap size {g} outside [0, {max}]")]
    GapRange { g: usize, max: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Event-type id, 1-based.
pub type EventId = u32;

/// Ordered, non-empty list of event ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSequence(Vec<EventId>);

impl EventSequence {
    pub fn new(events: Vec<EventId>) -> Result<Self, DataError> {
        if events.is_empty() {
            return Err(DataError::Invalid("empty sequence".into()));
        }
        if events.contains(&0) {
            return Err(DataError::Invalid("event id 0".into()));
        }
        Ok(Self(events))
    }

    pub fn events(&self) -> &[EventId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `S[:t]`, the first `t` events.
    pub fn head(&self, t: usize) -> &[EventId] {
        &self.0[..t.min(self.0.len())]
    }

    /// Event at 1-based position `t`.
    pub fn at(&self, t: usize) -> EventId {
        self.0[t - 1]
    }
}

/// Keeps the most recent `max_len` events.
pub fn truncate_prefix(seq: &[EventId], max_len: usize) -> &[EventId] {
    let max_len = max_len.max(1);
    &seq[seq.len().saturating_sub(max_len)..]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_types: usize,
    /// Latent context id per (sequence, position) when produced by the simulator.
    pub contexts: Option<Vec<Vec<u32>>>,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize) -> Result<Self, DataError> {
        if sequences.is_empty() {
            return Err(DataError::Empty);
        }
        if num_types < 2 {
            return Err(DataError::Invalid(format!("need at least 2 event types, got {num_types}")));
        }
        if let Some(bad) = sequences
            .iter()
            .flat_map(|s| s.events())
            .find(|&&e| e as usize > num_types)
        {
            return Err(DataError::Invalid(format!("event id {bad} exceeds M={num_types}")));
        }
        Ok(Self {
            sequences,
            num_types,
            contexts: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn prefix(&self, ex: &Example) -> &[EventId] {
        self.sequences[ex.seq].head(ex.position - 1)
    }

    /// One line per sequence, whitespace-separated ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            let mut first = true;
            for e in s.events() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Parses the whitespace-separated text format. Blank lines are skipped.
pub fn parse_dataset_str(text: &str, num_types: Option<usize>) -> Result<Dataset, DataError> {
    let mut sequences = Vec::new();
    let mut max_id = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut events = Vec::new();
        for tok in line.split_whitespace() {
            let id: i64 = tok.parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("not an integer: {tok:?}"),
            })?;
            if id < 1 {
                return Err(DataError::Parse {
                    line: lineno,
                    msg: format!("event id {id} < 1"),
                });
            }
            if let Some(m) = num_types {
                if id as usize > m {
                    return Err(DataError::Parse {
                        line: lineno,
                        msg: format!("event id {id} exceeds M={m}"),
                    });
                }
            }
            max_id = max_id.max(id as usize);
            events.push(id as EventId);
        }
        sequences.push(EventSequence(events));
    }
    if sequences.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(sequences, num_types.unwrap_or(max_id).max(2))
}

pub fn parse_dataset(path: &Path, num_types: Option<usize>) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset_str(&text, num_types)
}

/// `(S_i[:t-1], x_{i,t})`, addressed by origin rather than copied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub seq: usize,
    /// 1-based target position `t`.
    pub position: usize,
    pub target: EventId,
    /// Gap size for test examples.
    pub gap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSplit {
    pub max_gap: usize,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Splits every sequence by target position:
/// train `t in 2..=|S|-G-2`, valid `t = |S|-G-1`, test `t in |S|-G..=|S|` with
/// gap `g = t - (|S|-G)`. Sequences with `|S| <= G+3` go entirely to train.
pub fn build_splits(dataset: &Dataset, max_gap: usize) -> GapSplit {
    let mut split = GapSplit {
        max_gap,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut dropped = 0;
    for (i, s) in dataset.sequences.iter().enumerate() {
        let n = s.len();
        let ex = |t: usize, gap: Option<usize>| Example {
            seq: i,
            position: t,
            target: s.at(t),
            gap,
        };
        if n < 2 {
            dropped += 1;
            continue;
        }
        if n <= max_gap + 3 {
            split.train.extend((2..=n).map(|t| ex(t, None)));
            continue;
        }
        split.train.extend((2..=n - max_gap - 2).map(|t| ex(t, None)));
        split.valid.push(ex(n - max_gap - 1, None));
        let base = n - max_gap;
        split.test.extend((base..=n).map(|t| ex(t, Some(t - base))));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} length-1 sequences with no trainable target");
    }
    split
}

/// Test examples at gap size `g`.
pub fn test_subset(split: &GapSplit, g: usize) -> Result<Vec<Example>, DataError> {
    if g > split.max_gap {
        return Err(DataError::GapRange {
            g,
            max: split.max_gap,
        });
    }
    Ok(split.test.iter().filter(|e| e.gap == Some(g)).copied().collect())
}

impl GapSplit {
    /// CSV rows `sequence,position,role,gap`, one per example.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("sequence,position,role,gap\n");
        for (role, set) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for e in set.iter() {
                let gap = e.gap.map(|g| g.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{},{},{}", e.seq, e.position, role, gap);
            }
        }
        out
    }
}

/// Consecutive training targets of one sequence, fed through the model in a
/// single causal pass: logits at input position `m` predict `targets[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub seq: usize,
    pub input: Vec<EventId>,
    pub targets: Vec<EventId>,
}

/// Groups examples by sequence into causal windows. An example whose prefix
/// exceeds `max_len` gets its own window over the truncated prefix, in which
/// case only the last position carries a target.
pub fn group_windows(dataset: &Dataset, examples: &[Example], max_len: usize) -> Vec<TrainWindow> {
    let mut by_seq: std::collections::BTreeMap<usize, Vec<&Example>> = Default::default();
    for e in examples {
        by_seq.entry(e.seq).or_default().push(e);
    }
    let mut windows = Vec::new();
    for (seq, mut exs) in by_seq {
        exs.sort_by_key(|e| e.position);
        let s = &dataset.sequences[seq];
        let (short, long): (Vec<&Example>, Vec<&Example>) =
            exs.into_iter().partition(|e| e.position - 1 <= max_len);
        // Short prefixes: one pass over the longest, targets only where requested.
        if let Some(last) = short.last() {
            let len = last.position - 1;
            let mut targets = vec![0; len];
            for e in &short {
                targets[e.position - 2] = e.target;
            }
            windows.push(TrainWindow {
                seq,
                input: s.head(len).to_vec(),
                targets,
            });
        }
        for e in long {
            let input = truncate_prefix(s.head(e.position - 1), max_len).to_vec();
            let mut targets = vec![0; input.len()];
            *targets.last_mut().unwrap() = e.target;
            windows.push(TrainWindow { seq, input, targets });
        }
    }
    windows
}

impl TrainWindow {
    /// Positions (0-based into `input`) that carry a target, with the target.
    pub fn labelled(&self) -> impl Iterator<Item = (usize, EventId)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0)
            .map(|(i, &t)| (i, t))
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != 0).count()
    }
}
