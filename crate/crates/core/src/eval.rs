//! Ranking and classification metrics, gap-wise evaluation and diagnostic
//! dumps.
//!
//! Ranks are pessimistic: every other candidate whose logit is at least the
//! target's counts against it, so a fully tied list puts the target last.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use thiserror::Error;

use crate::data::{test_subset, truncate_prefix, Dataset, EventId, Example, GapSplit, TrainWindow};
use crate::model::{infer, CaseqConfig, CaseqParams, ModelError};
use crate::objective::{loss_and_grad, ObjectiveError};
use crate::model::RoutingMode;
use crate::par;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("empty input")]
    Empty,
    #[error("target {0} is not among the candidates")]
    TargetAbsent(EventId),
    #[error("rank must be at least 1")]
    BadRank,
    #[error("gap {gap} exceeds the split's maximal gap {max}")]
    GapRange { gap: usize, max: usize },
    #[error("drop undefined: {0}")]
    Drop(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Hr(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Self::Accuracy => "acc".into(),
            Self::Hr(k) => format!("hr@{k}"),
            Self::Ndcg(k) => format!("ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (base, k) = match s.split_once('@') {
            Some((b, k)) => (b, k.parse().map_err(|_| format!("bad cutoff in `{s}`"))?),
            None => (s, 10),
        };
        match base {
            "acc" | "accuracy" => Ok(Self::Accuracy),
            "hr" => Ok(Self::Hr(k)),
            "ndcg" => Ok(Self::Ndcg(k)),
            _ => Err(format!("unknown metric `{s}` (valid: acc, hr, ndcg)")),
        }
    }
}

/// `1 +` the number of other candidates scoring at least the target.
/// Ids are 1-based; `None` ranks against the whole vocabulary.
pub fn rank_of_target(logits: &[f64], target: EventId, candidates: Option<&[EventId]>) -> Result<usize> {
    let ti = target as usize;
    if ti == 0 || ti > logits.len() {
        return Err(EvalError::TargetAbsent(target));
    }
    let t = logits[ti - 1];
    let beats = |c: EventId| c != target && logits[c as usize - 1] >= t;
    Ok(1 + match candidates {
        None => (1..=logits.len() as EventId).filter(|&c| beats(c)).count(),
        Some(cands) => {
            if !cands.contains(&target) {
                return Err(EvalError::TargetAbsent(target));
            }
            cands.iter().filter(|&&c| beats(c)).count()
        }
    })
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> Result<f64> {
    let n = it.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(it.sum::<f64>() / n as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.contains(&0) {
        return Err(EvalError::BadRank);
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    mean(ranks.iter().map(|&r| f64::from(u8::from(r <= k))))
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    mean(ranks.iter().map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }))
}

pub fn accuracy(preds: &[EventId], targets: &[EventId]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(EvalError::Empty);
    }
    mean(preds.iter().zip(targets).map(|(p, t)| f64::from(u8::from(p == t))))
}

/// First index of the maximum, as a 1-based id.
pub fn argmax(logits: &[f64]) -> EventId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as EventId + 1
}

/// Next-event logits for each example, in input order. Examples of one
/// sequence share a forward pass when their prefixes fit in `max_len`.
pub fn example_logits(params: &CaseqParams, config: &CaseqConfig, ds: &Dataset, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let mut by_seq: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, e) in examples.iter().enumerate() {
        by_seq.entry(e.seq).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_seq.into_iter().collect();
    let parts = par::map(&groups, |_, (seq, idx)| -> Result<Vec<(usize, Vec<f64>)>> {
        let s = &ds.sequences[*seq];
        let mut out = Vec::with_capacity(idx.len());
        let (short, long): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| examples[i].position - 1 <= config.max_len);
        if let Some(len) = short.iter().map(|&i| examples[i].position - 1).max() {
            let (logits, _) = infer(params, config, s.head(len))?;
            for i in short {
                out.push((i, logits.row(examples[i].position - 2).to_vec()));
            }
        }
        for i in long {
            let prefix = truncate_prefix(s.head(examples[i].position - 1), config.max_len);
            let (logits, _) = infer(params, config, prefix)?;
            out.push((i, logits.row(prefix.len() - 1).to_vec()));
        }
        Ok(out)
    });
    let mut result = vec![Vec::new(); examples.len()];
    for part in parts {
        for (i, l) in part? {
            result[i] = l;
        }
    }
    Ok(result)
}

/// Distinct non-target negatives for one example; `None` means full ranking.
fn candidates_for(e: &Example, m: usize, negatives: usize, seed: u64) -> Option<Vec<EventId>> {
    if negatives == 0 || negatives >= m - 1 {
        return None;
    }
    let mut rng = stream(seed, &[e.seq as u64, e.position as u64]);
    let mut c: Vec<EventId> = sample(&mut rng, m - 1, negatives)
        .into_iter()
        .map(|i| {
            let id = i as EventId + 1;
            if id >= e.target {
                id + 1
            } else {
                id
            }
        })
        .collect();
    c.push(e.target);
    Some(c)
}

/// Metric values over a set of examples; `None` when the set is empty.
pub fn score_examples(
    params: &CaseqParams,
    config: &CaseqConfig,
    ds: &Dataset,
    examples: &[Example],
    metrics: &[Metric],
    negatives: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    if examples.is_empty() {
        return Ok(vec![None; metrics.len()]);
    }
    let logits = example_logits(params, config, ds, examples)?;
    let targets: Vec<EventId> = examples.iter().map(|e| e.target).collect();
    let preds: Vec<EventId> = logits.iter().map(|l| argmax(l)).collect();
    let ranks = examples
        .iter()
        .zip(&logits)
        .map(|(e, l)| rank_of_target(l, e.target, candidates_for(e, ds.num_types, negatives, seed).as_deref()))
        .collect::<Result<Vec<_>>>()?;
    metrics
        .iter()
        .map(|m| {
            Ok(Some(match m {
                Metric::Accuracy => accuracy(&preds, &targets)?,
                Metric::Hr(k) => hr_at_k(&ranks, *k)?,
                Metric::Ndcg(k) => ndcg_at_k(&ranks, *k)?,
            }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub gap: usize,
    pub metric: Metric,
    /// `None` when no test example exists at this gap.
    pub value: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<GapRow>,
}

impl MetricsReport {
    pub fn value(&self, gap: usize, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.gap == gap && r.metric == metric)
            .and_then(|r| r.value)
    }

    pub fn gaps(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.rows.iter().map(|r| r.gap).collect();
        g.dedup();
        g
    }

    /// CSV with columns `gap,metric,value,n`; absent values are left empty.
    /// With two or more gaps, one `drop` row per metric follows when defined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gap,metric,value,n\n");
        let mut metrics = Vec::new();
        for r in &self.rows {
            let v = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.gap, r.metric.name(), v, r.n);
            if !metrics.contains(&r.metric) {
                metrics.push(r.metric);
            }
        }
        if self.gaps().len() < 2 {
            return out;
        }
        for m in metrics {
            if let Ok(d) = drop_percent(self, m) {
                let _ = writeln!(out, "drop,{},{d:.6},", m.name());
            }
        }
        out
    }
}

/// Evaluates every requested gap with the same parameters. Gaps without test
/// examples are reported with `value = None`.
pub fn evaluate_gaps(
    params: &CaseqParams,
    config: &CaseqConfig,
    ds: &Dataset,
    split: &GapSplit,
    gaps: &[usize],
    metrics: &[Metric],
    negatives: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for &g in gaps {
        let subset = test_subset(split, g).map_err(|_| EvalError::GapRange { gap: g, max: split.max_gap })?;
        let values = score_examples(params, config, ds, &subset, metrics, negatives, seed)?;
        for (m, v) in metrics.iter().zip(values) {
            rows.push(GapRow {
                gap: g,
                metric: *m,
                value: v,
                n: subset.len(),
            });
        }
    }
    Ok(MetricsReport { rows })
}

/// `100 (v0 - v1) / v0` between the smallest and largest reported gap.
pub fn drop_percent(report: &MetricsReport, metric: Metric) -> Result<f64> {
    let gaps = report.gaps();
    let (Some(&lo), Some(&hi)) = (gaps.iter().min(), gaps.iter().max()) else {
        return Err(EvalError::Drop("empty report".into()));
    };
    let v0 = report.value(lo, metric).ok_or_else(|| EvalError::Drop(format!("no value at gap {lo}")))?;
    let v1 = report.value(hi, metric).ok_or_else(|| EvalError::Drop(format!("no value at gap {hi}")))?;
    drop_between(v0, v1)
}

pub fn drop_between(v0: f64, v1: f64) -> Result<f64> {
    if !(v0 > 0.0) {
        return Err(EvalError::Drop("reference value is not positive".into()));
    }
    Ok(100.0 * (v0 - v1) / v0)
}

/// Rows `sequence,position,context,prob` of the soft flattened posterior.
/// Positions are 1-based event positions; contexts are 0-based path indices.
pub fn dump_context_probs(params: &CaseqParams, config: &CaseqConfig, ds: &Dataset) -> Result<String> {
    let parts = par::map(&ds.sequences, |i, s| -> Result<String> {
        let seq = truncate_prefix(s.events(), config.max_len);
        let offset = s.len() - seq.len();
        let (_, post) = infer(params, config, seq)?;
        let mut out = String::new();
        for t in 0..post.rows() {
            for (c, p) in post.row(t).iter().enumerate() {
                let _ = writeln!(out, "{i},{},{c},{p:.12}", offset + t + 1);
            }
        }
        Ok(out)
    });
    let mut out = String::from("sequence,position,context,prob\n");
    for p in parts {
        out.push_str(&p?);
    }
    Ok(out)
}

/// Raw context-embedding rows `layer,unit,v0,...`.
pub fn dump_context_embeddings(params: &CaseqParams) -> String {
    let width = params.layers.first().map_or(0, |l| l.context_emb.cols());
    let mut out = String::from("layer,unit");
    for j in 0..width {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    for (l, layer) in params.layers.iter().enumerate() {
        for k in 0..layer.context_emb.rows() {
            let _ = write!(out, "{l},{k}");
            for v in layer.context_emb.row(k) {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub batch_size: usize,
    pub paths: usize,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

/// Wall-clock of one training step (forward and backward) and of soft
/// inference over batches of the given sizes, cycling through `ds`.
pub fn time_forward(params: &CaseqParams, config: &CaseqConfig, ds: &Dataset, batch_sizes: &[usize]) -> Result<Vec<TimingRow>> {
    if ds.is_empty() {
        return Err(EvalError::Empty);
    }
    let pseudo: Vec<Vec<EventId>> = ds.sequences.iter().take(4).map(|s| truncate_prefix(s.events(), config.max_len).to_vec()).collect();
    batch_sizes
        .iter()
        .map(|&b| {
            let windows: Vec<TrainWindow> = (0..b)
                .map(|i| {
                    let s = &ds.sequences[i % ds.len()];
                    let input = truncate_prefix(s.head(s.len() - 1), config.max_len).to_vec();
                    let start = s.len() - input.len();
                    TrainWindow {
                        seq: i,
                        targets: s.events()[start..].to_vec(),
                        input,
                    }
                })
                .collect();
            let t0 = Instant::now();
            loss_and_grad(params, config, &windows, 0.1, &pseudo, RoutingMode::Gumbel, 0)?;
            let train_seconds = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            for w in &windows {
                infer(params, config, &w.input)?;
            }
            let infer_seconds = t1.elapsed().as_secs_f64();
            Ok(TimingRow {
                batch_size: b,
                paths: config.num_paths(),
                train_seconds,
                infer_seconds,
            })
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("batch_size,paths,train_seconds,infer_seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.9},{:.9}", r.batch_size, r.paths, r.train_seconds, r.infer_seconds);
    }
    out
}
