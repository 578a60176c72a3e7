//! Ground-truth confounded sequence generator and its exact oracles.
//!
//! A latent context `c_t` is drawn independently at every position from a
//! position-indexed schedule `pi_t`. The next event follows the mixed kernel
//! `(1 - lambda) T_c[x_{t-1}] + lambda T_inv[x_{t-1}]`. Because the schedule
//! drifts with position, later positions (the test gaps) see a different
//! context mixture than the training positions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EventId, EventSequence};
use crate::par;
use crate::rng::{self, categorical, StreamRng};

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("spec key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("cannot read spec {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("event {y} is impossible under every context")]
    Degenerate { y: EventId },
}

/// Context prior at a position: linear interpolation between breakpoints,
/// constant before the first and after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub position: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub breakpoints: Vec<Breakpoint>,
}

impl Schedule {
    pub fn constant(probs: Vec<f64>) -> Self {
        Self {
            breakpoints: vec![Breakpoint { position: 1, probs }],
        }
    }

    /// `pi_t` for 1-based position `t`.
    pub fn at(&self, t: usize) -> Vec<f64> {
        let bps = &self.breakpoints;
        if t <= bps[0].position {
            return bps[0].probs.clone();
        }
        for w in bps.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if t <= b.position {
                let frac = (t - a.position) as f64 / (b.position - a.position) as f64;
                return a
                    .probs
                    .iter()
                    .zip(&b.probs)
                    .map(|(pa, pb)| (1.0 - frac) * pa + frac * pb)
                    .collect();
            }
        }
        bps[bps.len() - 1].probs.clone()
    }
}

/// Sequence-length distribution: uniform over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthDist {
    pub min: usize,
    pub max: usize,
}

impl LengthDist {
    pub fn fixed(len: usize) -> Self {
        Self { min: len, max: len }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    /// Number of latent contexts.
    pub contexts: usize,
    /// Number of event types `M`.
    pub event_types: usize,
    /// `transitions[c][i][j] = T_c(next = j+1 | last = i+1)`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Context-invariant kernel `T_inv`.
    pub invariant: Vec<Vec<f64>>,
    pub init_dist: Vec<f64>,
    pub schedule: Schedule,
    pub lambda_inv: f64,
}

fn check_simplex(v: &[f64], what: &str) -> Result<(), ScmError> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(ScmError::Key {
            key: what.to_string(),
            msg: format!("not a probability vector (sum {sum})"),
        });
    }
    Ok(())
}

pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, concentration: f64) -> Vec<f64> {
    // Gamma(concentration) via -ln(u) powers is only exact at 1; a power
    // transform of exponentials is enough for spiky-vs-flat test kernels.
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (-u.ln()).powf(1.0 / concentration)
        })
        .collect();
    normalize(raw)
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    let mut out: Vec<f64> = v.into_iter().map(|x| x / s).collect();
    // Push the rounding residue into the largest entry so sums are exact to 1e-15.
    let resid = 1.0 - out.iter().sum::<f64>();
    if let Some(i) = out
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
    {
        out[i] += resid;
    }
    out
}

fn random_kernel<R: Rng + ?Sized>(rng: &mut R, m: usize, concentration: f64) -> Vec<Vec<f64>> {
    (0..m).map(|_| random_simplex(rng, m, concentration)).collect()
}

impl ScmSpec {
    pub fn validate(&self) -> Result<(), ScmError> {
        let (c, m) = (self.contexts, self.event_types);
        if c == 0 {
            return Err(ScmError::Key {
                key: "contexts".into(),
                msg: "must be at least 1".into(),
            });
        }
        if m < 2 {
            return Err(ScmError::Key {
                key: "event_types".into(),
                msg: "must be at least 2".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda_inv) {
            return Err(ScmError::Key {
                key: "lambda_inv".into(),
                msg: format!("{} outside [0, 1]", self.lambda_inv),
            });
        }
        if self.transitions.len() != c {
            return Err(ScmError::Key {
                key: "transitions".into(),
                msg: format!("expected {c} matrices, got {}", self.transitions.len()),
            });
        }
        let check_kernel = |k: &Vec<Vec<f64>>, name: &str| -> Result<(), ScmError> {
            if k.len() != m || k.iter().any(|r| r.len() != m) {
                return Err(ScmError::Key {
                    key: name.to_string(),
                    msg: format!("expected {m}x{m} matrix"),
                });
            }
            for (i, row) in k.iter().enumerate() {
                check_simplex(row, &format!("{name}[{i}]"))?;
            }
            Ok(())
        };
        for (ci, k) in self.transitions.iter().enumerate() {
            check_kernel(k, &format!("transitions[{ci}]"))?;
        }
        check_kernel(&self.invariant, "invariant")?;
        if self.init_dist.len() != m {
            return Err(ScmError::Key {
                key: "init_dist".into(),
                msg: format!("expected length {m}"),
            });
        }
        check_simplex(&self.init_dist, "init_dist")?;
        let bps = &self.schedule.breakpoints;
        if bps.is_empty() {
            return Err(ScmError::Key {
                key: "schedule".into(),
                msg: "needs at least one breakpoint".into(),
            });
        }
        for (i, bp) in bps.iter().enumerate() {
            if bp.probs.len() != c {
                return Err(ScmError::Key {
                    key: format!("schedule.breakpoints[{i}]"),
                    msg: format!("expected {c} probabilities"),
                });
            }
            check_simplex(&bp.probs, &format!("schedule.breakpoints[{i}]"))?;
            if i > 0 && bp.position <= bps[i - 1].position {
                return Err(ScmError::Key {
                    key: format!("schedule.breakpoints[{i}]"),
                    msg: "positions must increase".into(),
                });
            }
        }
        Ok(())
    }

    /// Random spec with Dirichlet-like kernels; used by oracle tests.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, contexts: usize, event_types: usize, lambda_inv: f64) -> Self {
        let transitions = (0..contexts)
            .map(|_| random_kernel(rng, event_types, 0.5))
            .collect();
        let invariant = random_kernel(rng, event_types, 0.5);
        let init_dist = random_simplex(rng, event_types, 1.0);
        let breakpoints = (0..3)
            .map(|i| Breakpoint {
                position: 1 + 10 * i,
                probs: random_simplex(rng, contexts, 0.7),
            })
            .collect();
        Self {
            contexts,
            event_types,
            transitions,
            invariant,
            init_dist,
            schedule: Schedule { breakpoints },
            lambda_inv,
        }
    }

    /// Confounded benchmark spec: each context owns a sharp, distinct
    /// transition structure, the invariant kernel is flatter, and the schedule
    /// keeps the first context dominant for most of the range before the
    /// others take over in turn, the last one at `horizon`.
    pub fn drifting(event_types: usize, contexts: usize, lambda_inv: f64, horizon: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x5c4d]);
        let m = event_types;
        // Each row puts `peak` mass on one successor drawn at random.
        let sharp = |r: &mut StreamRng, peak: f64| -> Vec<Vec<f64>> {
            (0..m)
                .map(|_| {
                    let mut row = random_simplex(r, m, 1.0);
                    let at = r.gen_range(0..m);
                    for v in row.iter_mut() {
                        *v *= 1.0 - peak;
                    }
                    row[at] += peak;
                    normalize(row)
                })
                .collect()
        };
        let transitions: Vec<_> = (0..contexts).map(|_| sharp(&mut r, 0.9)).collect();
        let invariant = sharp(&mut r, 0.6);
        let init_dist = vec![1.0 / m as f64; m];
        let horizon = horizon.max(2 * contexts + 2);
        let dominant = |c: usize| {
            let mut probs = vec![0.1 / (contexts.max(2) - 1) as f64; contexts];
            if contexts == 1 {
                probs[0] = 1.0;
            } else {
                probs[c] = 0.9;
            }
            normalize(probs)
        };
        // Context 1 holds for the first 60% of positions, then the remaining
        // contexts take over one after another, the last at `horizon`.
        let hold = (horizon * 3) / 5;
        let mut breakpoints = vec![Breakpoint {
            position: 1,
            probs: dominant(0),
        }];
        if contexts > 1 {
            breakpoints.push(Breakpoint {
                position: hold,
                probs: dominant(0),
            });
            for c in 1..contexts {
                breakpoints.push(Breakpoint {
                    position: hold + c * (horizon - hold) / (contexts - 1),
                    probs: dominant(c),
                });
            }
        }
        Self {
            contexts,
            event_types,
            transitions,
            invariant,
            init_dist,
            schedule: Schedule { breakpoints },
            lambda_inv,
        }
    }

    /// `P(next | last, c)` for 0-based context `c` and 1-based event `last`.
    pub fn kernel_row(&self, c: usize, last: EventId) -> Vec<f64> {
        let i = last as usize - 1;
        let lam = self.lambda_inv;
        self.transitions[c][i]
            .iter()
            .zip(&self.invariant[i])
            .map(|(tc, ti)| (1.0 - lam) * tc + lam * ti)
            .collect()
    }

    pub fn prior_at(&self, t: usize) -> Vec<f64> {
        self.schedule.at(t)
    }

    pub fn from_toml(text: &str) -> Result<Self, ScmError> {
        let file: ScmSpecFile = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.lines().next().unwrap_or("").to_string())
                .unwrap_or_else(|| "<document>".into());
            ScmError::Key { key, msg }
        })?;
        let spec = file.resolve()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScmError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ScmSpecFile::from(self.clone())).expect("spec serializes")
    }
}

/// On-disk form of [`ScmSpec`]. Kernels may be given explicitly or generated
/// from a `[generate]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpecFile {
    pub contexts: usize,
    pub event_types: usize,
    pub lambda_inv: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<LengthDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_dist: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transitions: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
}

/// Shorthand for the drifting benchmark family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub seed: u64,
    pub horizon: usize,
}

impl From<ScmSpec> for ScmSpecFile {
    fn from(s: ScmSpec) -> Self {
        Self {
            contexts: s.contexts,
            event_types: s.event_types,
            lambda_inv: s.lambda_inv,
            lengths: None,
            init_dist: Some(s.init_dist),
            schedule: Some(s.schedule),
            transitions: Some(s.transitions),
            invariant: Some(s.invariant),
            generate: None,
        }
    }
}

impl ScmSpecFile {
    pub fn resolve(self) -> Result<ScmSpec, ScmError> {
        let base = match &self.generate {
            Some(g) => Some(ScmSpec::drifting(self.event_types, self.contexts, self.lambda_inv, g.horizon, g.seed)),
            None => None,
        };
        fn pick<T>(explicit: Option<T>, from_base: Option<T>, key: &str) -> Result<T, ScmError> {
            explicit.or(from_base).ok_or_else(|| ScmError::Key {
                key: key.to_string(),
                msg: "missing (and no [generate] section)".into(),
            })
        }
        Ok(ScmSpec {
            contexts: self.contexts,
            event_types: self.event_types,
            lambda_inv: self.lambda_inv,
            transitions: pick(self.transitions, base.as_ref().map(|b| b.transitions.clone()), "transitions")?,
            invariant: pick(self.invariant, base.as_ref().map(|b| b.invariant.clone()), "invariant")?,
            init_dist: pick(self.init_dist, base.as_ref().map(|b| b.init_dist.clone()), "init_dist")?,
            schedule: pick(self.schedule, base.as_ref().map(|b| b.schedule.clone()), "schedule")?,
        })
    }

    pub fn lengths(text: &str) -> Option<LengthDist> {
        toml::from_str::<ScmSpecFile>(text).ok().and_then(|f| f.lengths)
    }
}

/// Samples `n` sequences with their realized contexts (1-based ids).
pub fn sample_dataset(spec: &ScmSpec, n: usize, lengths: LengthDist, seed: u64) -> Result<Dataset, ScmError> {
    spec.validate()?;
    if n == 0 || lengths.min < 2 || lengths.max < lengths.min {
        return Err(ScmError::Invalid(format!(
            "need n >= 1 and 2 <= min <= max lengths, got n={n}, {lengths:?}"
        )));
    }
    let rows = par::map_range(n, |i| {
        let mut r = rng::stream(seed, &[i as u64]);
        let len = lengths.sample(&mut r);
        let mut events = Vec::with_capacity(len);
        let mut ctx = Vec::with_capacity(len);
        events.push(categorical(&mut r, &spec.init_dist) as EventId + 1);
        ctx.push(categorical(&mut r, &spec.prior_at(1)) as u32 + 1);
        for t in 2..=len {
            let c = categorical(&mut r, &spec.prior_at(t));
            let row = spec.kernel_row(c, events[t - 2]);
            events.push(categorical(&mut r, &row) as EventId + 1);
            ctx.push(c as u32 + 1);
        }
        (events, ctx)
    });
    let mut sequences = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    for (e, c) in rows {
        sequences.push(EventSequence::new(e).map_err(|e| ScmError::Invalid(e.to_string()))?);
        contexts.push(c);
    }
    let mut ds = Dataset::new(sequences, spec.event_types).map_err(|e| ScmError::Invalid(e.to_string()))?;
    ds.contexts = Some(contexts);
    Ok(ds)
}

/// Context-label CSV: `sequence,position,context`.
pub fn context_labels_csv(ds: &Dataset) -> String {
    let mut out = String::from("sequence,position,context\n");
    if let Some(ctx) = &ds.contexts {
        for (i, row) in ctx.iter().enumerate() {
            for (t, c) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i, t + 1, c));
            }
        }
    }
    out
}

fn last_event(prefix: &[EventId]) -> EventId {
    *prefix.last().expect("prefix must be non-empty")
}

/// Monte-Carlo `P(Y | do(S = prefix))` at position `t`: the context is drawn
/// from `pi_t` independently of the prefix, then `y` from the mixed kernel.
pub fn interventional_dist_mutilated(spec: &ScmSpec, prefix: &[EventId], t: usize, samples: usize, seed: u64) -> Vec<f64> {
    let prior = spec.prior_at(t);
    let rows: Vec<Vec<f64>> = (0..spec.contexts).map(|c| spec.kernel_row(c, last_event(prefix))).collect();
    let mut r = rng::stream(seed, &[0xd0]);
    let mut counts = vec![0usize; spec.event_types];
    for _ in 0..samples.max(1) {
        let c = categorical(&mut r, &prior);
        counts[categorical(&mut r, &rows[c])] += 1;
    }
    counts.into_iter().map(|k| k as f64 / samples.max(1) as f64).collect()
}

/// Exact backdoor sum `sum_c P(Y | S, c) pi_t(c)`.
pub fn backdoor_sum(spec: &ScmSpec, prefix: &[EventId], t: usize) -> Vec<f64> {
    let prior = spec.prior_at(t);
    let mut out = vec![0.0; spec.event_types];
    for (c, &pc) in prior.iter().enumerate() {
        if pc == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(spec.kernel_row(c, last_event(prefix))) {
            *o += pc * p;
        }
    }
    out
}

/// Exact `P(c | S, y) ∝ pi_t(c) P(y | S, c)`.
pub fn true_posterior(spec: &ScmSpec, prefix: &[EventId], t: usize, y: EventId) -> Result<Vec<f64>, ScmError> {
    let prior = spec.prior_at(t);
    let joint: Vec<f64> = (0..spec.contexts)
        .map(|c| prior[c] * spec.kernel_row(c, last_event(prefix))[y as usize - 1])
        .collect();
    let z: f64 = joint.iter().sum();
    if z <= 0.0 {
        return Err(ScmError::Degenerate { y });
    }
    Ok(joint.into_iter().map(|j| j / z).collect())
}

/// `log sum_c pi_t(c) P(y | S, c)`.
pub fn log_marginal(spec: &ScmSpec, prefix: &[EventId], t: usize, y: EventId) -> f64 {
    backdoor_sum(spec, prefix, t)[y as usize - 1].ln()
}

/// `sum_c Q(c) log P(y | S, c) - KL(Q || pi_t)`, with `0 log 0 = 0`.
/// Returns `-inf` when `Q` puts mass on a context under which `y` is impossible.
pub fn elbo_enumerate(spec: &ScmSpec, prefix: &[EventId], t: usize, y: EventId, q: &[f64]) -> f64 {
    let prior = spec.prior_at(t);
    let mut total = 0.0;
    for c in 0..spec.contexts {
        let qc = q[c];
        if qc == 0.0 {
            continue;
        }
        let lik = spec.kernel_row(c, last_event(prefix))[y as usize - 1];
        if lik == 0.0 || prior[c] == 0.0 {
            return f64::NEG_INFINITY;
        }
        total += qc * lik.ln() - qc * (qc / prior[c]).ln();
    }
    total
}

/// Observational `P(Y | S)` when one context stratum generates both the
/// prefix transitions and the next event: `P(c | S) ∝ pi_t(c) prod_m
/// P(x_m | x_{m-1}, c)`, then `sum_c P(c | S) P(Y | S, c)`.
pub fn observational_conditional(spec: &ScmSpec, prefix: &[EventId], t: usize) -> Vec<f64> {
    let prior = spec.prior_at(t);
    let mut log_w: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    for (c, lw) in log_w.iter_mut().enumerate() {
        for w in prefix.windows(2) {
            *lw += spec.kernel_row(c, w[0])[w[1] as usize - 1].ln();
        }
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; spec.event_types];
    for (c, wc) in w.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(spec.kernel_row(c, last_event(prefix))) {
            *o += wc / z * p;
        }
    }
    out
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ScmSpec {
        ScmSpec {
            contexts: 2,
            event_types: 3,
            transitions: vec![
                vec![vec![0.7, 0.3, 0.0], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]],
                vec![vec![0.1, 0.2, 0.7], vec![0.5, 0.0, 0.5], vec![0.3, 0.3, 0.4]],
            ],
            invariant: vec![vec![1.0 / 3.0; 3]; 3].into_iter().map(normalize).collect(),
            init_dist: vec![0.5, 0.25, 0.25],
            schedule: Schedule {
                breakpoints: vec![
                    Breakpoint {
                        position: 19,
                        probs: vec![1.0, 0.0],
                    },
                    Breakpoint {
                        position: 20,
                        probs: vec![0.0, 1.0],
                    },
                ],
            },
            lambda_inv: 0.0,
        }
    }

    #[test]
    fn schedule_interpolates() {
        let s = Schedule {
            breakpoints: vec![
                Breakpoint {
                    position: 1,
                    probs: vec![1.0, 0.0],
                },
                Breakpoint {
                    position: 11,
                    probs: vec![0.0, 1.0],
                },
            ],
        };
        assert_eq!(s.at(1), vec![1.0, 0.0]);
        assert_eq!(s.at(6), vec![0.5, 0.5]);
        assert_eq!(s.at(50), vec![0.0, 1.0]);
    }

    #[test]
    fn validation_names_key() {
        let mut spec = tiny_spec();
        spec.transitions[1][2] = vec![0.5, 0.5, 0.5];
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("transitions[1][2]"), "{msg}");
        assert!(sample_dataset(&spec, 1, LengthDist::fixed(3), 0).is_err());
    }

    #[test]
    fn backdoor_point_mass_and_uniform() {
        let spec = tiny_spec();
        assert_eq!(backdoor_sum(&spec, &[1], 5), spec.kernel_row(0, 1));
        assert_eq!(backdoor_sum(&spec, &[1], 25), spec.kernel_row(1, 1));
        let mut uni = spec.clone();
        uni.schedule = Schedule::constant(vec![0.5, 0.5]);
        let got = backdoor_sum(&uni, &[2], 3);
        let (a, b) = (spec.kernel_row(0, 2), spec.kernel_row(1, 2));
        for j in 0..3 {
            assert!((got[j] - (a[j] + b[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_cases() {
        let mut spec = tiny_spec();
        spec.schedule = Schedule::constant(vec![0.3, 0.7]);
        // From event 2, y = 2 is impossible under context 2 and y = ... both possible.
        let post = true_posterior(&spec, &[1], 4, 3).unwrap();
        assert_eq!(post, vec![0.0, 1.0]);
        let mut same = spec.clone();
        same.transitions[1] = same.transitions[0].clone();
        let post = true_posterior(&same, &[2], 4, 1).unwrap();
        assert!((post[0] - 0.3).abs() < 1e-15 && (post[1] - 0.7).abs() < 1e-15);
        // Enumeration oracle: P(c, y) / P(y) from the joint table.
        let (prefix, y) = ([3u32], 3u32);
        let joint: Vec<f64> = (0..2).map(|c| [0.3, 0.7][c] * spec.transitions[c][2][2]).collect();
        let py: f64 = joint.iter().sum();
        let post = true_posterior(&spec, &prefix, 4, y).unwrap();
        for c in 0..2 {
            assert!((post[c] - joint[c] / py).abs() < 1e-15);
        }
        let mut dead = spec.clone();
        dead.transitions[0][0][2] = 0.0;
        dead.transitions[0][0][1] = 0.3 + 0.0;
        dead.transitions[0][0][0] = 0.7;
        dead.transitions[1][0] = vec![0.5, 0.5, 0.0];
        assert!(matches!(true_posterior(&dead, &[1], 4, 3), Err(ScmError::Degenerate { .. })));
    }

    #[test]
    fn elbo_tight_at_posterior_and_symmetric_case() {
        let mut spec = tiny_spec();
        spec.schedule = Schedule::constant(vec![0.4, 0.6]);
        spec.lambda_inv = 0.5;
        let post = true_posterior(&spec, &[2], 7, 3).unwrap();
        let lm = log_marginal(&spec, &[2], 7, 3);
        assert!((elbo_enumerate(&spec, &[2], 7, 3, &post) - lm).abs() < 1e-12);
        let mut same = spec.clone();
        same.transitions[1] = same.transitions[0].clone();
        let prior = same.prior_at(7);
        let lm = log_marginal(&same, &[2], 7, 3);
        assert!((elbo_enumerate(&same, &[2], 7, 3, &prior) - lm).abs() < 1e-12);
        // Mass on a context where y is impossible.
        let spec0 = tiny_spec();
        assert_eq!(elbo_enumerate(&spec0, &[1], 30, 3, &[1.0, 0.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn single_context_markov_chain_bigrams() {
        let mut spec = tiny_spec();
        spec.contexts = 1;
        spec.transitions.truncate(1);
        spec.schedule = Schedule::constant(vec![1.0]);
        let ds = sample_dataset(&spec, 2000, LengthDist::fixed(60), 3).unwrap();
        let mut counts = vec![vec![0f64; 3]; 3];
        for s in &ds.sequences {
            for w in s.events().windows(2) {
                counts[w[0] as usize - 1][w[1] as usize - 1] += 1.0;
            }
        }
        // Pearson chi-square per row against T_1, df = (#nonzero cells - 1).
        for i in 0..3 {
            let n: f64 = counts[i].iter().sum();
            let mut chi2 = 0.0;
            let mut df = 0.0;
            for j in 0..3 {
                let e = n * spec.transitions[0][i][j];
                if e > 0.0 {
                    chi2 += (counts[i][j] - e).powi(2) / e;
                    df += 1.0;
                } else {
                    assert_eq!(counts[i][j], 0.0);
                }
            }
            // 99.9% quantile of chi-square with <= 2 df is 13.8.
            assert!(chi2 < 13.8, "row {i}: chi2 {chi2} df {}", df - 1.0);
        }
    }

    #[test]
    fn invariant_only_ignores_schedule() {
        let mut a = tiny_spec();
        a.lambda_inv = 1.0;
        a.invariant = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.2, 0.2], vec![0.1, 0.1, 0.8]];
        let mut b = a.clone();
        b.schedule = Schedule::constant(vec![0.5, 0.5]);
        for (t, prefix) in [(4usize, [1u32]), (30, [3])] {
            assert_eq!(backdoor_sum(&a, &prefix, t), a.invariant[prefix[0] as usize - 1]);
            assert_eq!(backdoor_sum(&b, &prefix, t), a.invariant[prefix[0] as usize - 1]);
        }
        let count = |spec: &ScmSpec| {
            let ds = sample_dataset(spec, 1000, LengthDist::fixed(40), 11).unwrap();
            let mut c = vec![0f64; 9];
            for s in &ds.sequences {
                for w in s.events().windows(2) {
                    c[(w[0] as usize - 1) * 3 + w[1] as usize - 1] += 1.0;
                }
            }
            c
        };
        let (ca, cb) = (count(&a), count(&b));
        // Two-sample chi-square on the 3x3 bigram table.
        let (na, nb): (f64, f64) = (ca.iter().sum(), cb.iter().sum());
        let mut chi2 = 0.0;
        for k in 0..9 {
            let tot = ca[k] + cb[k];
            if tot == 0.0 {
                continue;
            }
            let ea = tot * na / (na + nb);
            let eb = tot * nb / (na + nb);
            chi2 += (ca[k] - ea).powi(2) / ea + (cb[k] - eb).powi(2) / eb;
        }
        // df = 8; 99.9% quantile 26.1.
        assert!(chi2 < 26.1, "chi2 {chi2}");
    }

    #[test]
    fn labels_follow_schedule_flip() {
        let mut spec = tiny_spec();
        spec.schedule = Schedule {
            breakpoints: vec![
                Breakpoint {
                    position: 19,
                    probs: vec![0.8, 0.2],
                },
                Breakpoint {
                    position: 20,
                    probs: vec![0.1, 0.9],
                },
            ],
        };
        let ds = sample_dataset(&spec, 3000, LengthDist::fixed(30), 5).unwrap();
        let ctx = ds.contexts.as_ref().unwrap();
        for (range, p) in [(1..19, 0.8), (19..30, 0.1)] {
            let n = (range.len() * ctx.len()) as f64;
            let k = ctx
                .iter()
                .flat_map(|row| row[range.clone()].iter())
                .filter(|&&c| c == 1)
                .count() as f64;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((k / n - p).abs() < 3.0 * sigma, "{} vs {p}", k / n);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = tiny_spec();
        let a = sample_dataset(&spec, 50, LengthDist { min: 3, max: 9 }, 42).unwrap();
        let b = sample_dataset(&spec, 50, LengthDist { min: 3, max: 9 }, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toml_roundtrip_and_generate() {
        let spec = tiny_spec();
        let back = ScmSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        let gen = "contexts = 4\nevent_types = 20\nlambda_inv = 0.5\n[generate]\nseed = 1\nhorizon = 50\n";
        let s = ScmSpec::from_toml(gen).unwrap();
        assert_eq!(s.transitions.len(), 4);
        let bad = "contexts = 2\nevent_types = 3\nlambda_inv = 2.0\n[generate]\nseed = 1\nhorizon = 5\n";
        let msg = ScmSpec::from_toml(bad).unwrap_err().to_string();
        assert!(msg.contains("lambda_inv"), "{msg}");
    }

    #[test]
    fn confounding_is_visible() {
        let spec = ScmSpec::drifting(6, 3, 0.5, 30, 9);
        let prefix: Vec<u32> = vec![1, 2, 3, 4, 5, 6, 1, 2];
        let mut worst: f64 = 0.0;
        for t in [2, 9, 20, 30] {
            let obs = observational_conditional(&spec, &prefix, t);
            worst = worst.max(total_variation(&obs, &backdoor_sum(&spec, &prefix, t)));
        }
        assert!(worst > 0.0);
    }
}
