//! Training losses.
//!
//! The regularized loss is the per-position cross-entropy plus
//! `alpha * KL(q_t || p)`, where `q_t` is the flattened routing posterior and
//! `p` the prior: the mean final-position soft posterior over a set of random
//! pseudo sequences. The prior is a function of the parameters, so its
//! gradient is propagated as well. The MLE baselines drop the KL term.

use rand::Rng;
use thiserror::Error;

use crate::data::{EventId, TrainWindow};
use crate::model::{forward, BaselineMode, CaseqConfig, CaseqParams, ModelError, ParamVars, RoutingMode};
use crate::par;
use crate::rng::stream;
use crate::scm::LengthDist;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Lower clamp applied to prior entries inside the KL logarithm.
pub const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no pseudo sequences")]
    NoPseudo,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("alpha must be finite and non-negative, got {0}")]
    Alpha(f64),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorEstimate {
    pub probs: Vec<f64>,
    pub pseudo: Vec<Vec<EventId>>,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub kl: f64,
    pub alpha: f64,
    /// Prior entries that hit [`PRIOR_FLOOR`], summed over KL evaluations.
    pub floor_hits: usize,
    /// Number of labelled positions averaged over.
    pub positions: usize,
}

/// Default pseudo length law: uniform over `[1, median]`, capped at `max_len`.
pub fn default_pseudo_lengths(train_lengths: &[usize], max_len: usize) -> LengthDist {
    let mut v = train_lengths.to_vec();
    v.sort_unstable();
    let median = v.get(v.len() / 2).copied().unwrap_or(1);
    LengthDist {
        min: 1,
        max: median.clamp(1, max_len.max(1)),
    }
}

/// `r` sequences of i.i.d. uniform events over `[1, m]`.
pub fn sample_pseudo_sequences<R: Rng + ?Sized>(r: usize, m: usize, lengths: LengthDist, rng: &mut R) -> Vec<Vec<EventId>> {
    (0..r)
        .map(|_| {
            let len = lengths.sample(rng);
            (0..len).map(|_| rng.gen_range(1..=m as EventId)).collect()
        })
        .collect()
}

/// Soft final-position posterior of one sequence, `1 x K^D`.
fn final_posterior<'t>(vars: &ParamVars<'t>, seq: &[EventId], config: &CaseqConfig) -> Result<Var<'t>> {
    let mut rng = stream(0, &[]);
    let pass = forward(vars, seq, config, RoutingMode::Soft, &mut rng)?;
    Ok(pass.posterior.row(seq.len() - 1)?)
}

/// The prior as a tape expression of the parameters.
pub fn prior_var<'t>(vars: &ParamVars<'t>, pseudo: &[Vec<EventId>], config: &CaseqConfig) -> Result<Var<'t>> {
    if pseudo.is_empty() {
        return Err(ObjectiveError::NoPseudo);
    }
    let rows = pseudo
        .iter()
        .map(|s| final_posterior(vars, s, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat_rows(&rows)?.mean_rows())
}

pub fn prior_estimate(params: &CaseqParams, config: &CaseqConfig, pseudo: &[Vec<EventId>], epoch: usize) -> Result<PriorEstimate> {
    if pseudo.is_empty() {
        return Err(ObjectiveError::NoPseudo);
    }
    let rows = par::map(pseudo, |_, s| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = params.register(&tape);
        Ok(final_posterior(&vars, s, config)?.value().into_data())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = rows[0].len();
    let mut probs = vec![0.0; n];
    for r in &rows {
        for (p, v) in probs.iter_mut().zip(r) {
            *p += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    probs.iter_mut().for_each(|p| *p *= inv);
    Ok(PriorEstimate {
        probs,
        pseudo: pseudo.to_vec(),
        epoch,
    })
}

/// `sum q_i log(q_i / max(p_i, 1e-12))` with `0 log 0 = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(ObjectiveError::Length(q.len(), p.len()));
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi.max(PRIOR_FLOOR)).ln())
        .sum())
}

fn uses_prior(config: &CaseqConfig, alpha: f64) -> bool {
    config.baseline == BaselineMode::None && alpha > 0.0
}

struct WindowTerms {
    ce: f64,
    kl: f64,
    hits: usize,
    positions: usize,
    grads: Vec<Tensor>,
    prior_grad: Vec<f64>,
}

/// Per-window cross-entropy and KL sums; with `scale` set, also backpropagates
/// `scale * (ce + alpha * kl)`.
fn window_terms(
    params: &CaseqParams,
    config: &CaseqConfig,
    window: &TrainWindow,
    prior: Option<&[f64]>,
    alpha: f64,
    mode: RoutingMode,
    seed: u64,
    scale: Option<f64>,
) -> Result<WindowTerms> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let mut rng = stream(seed, &[]);
    let pass = forward(&vars, &window.input, config, mode, &mut rng)?;
    let (rows, targets): (Vec<usize>, Vec<usize>) = window.labelled().map(|(i, t)| (i, t as usize - 1)).unzip();
    let ce = pass.logits.gather_rows(&rows)?.cross_entropy_sum(&targets)?;
    let (prior_leaf, kl) = match prior {
        Some(p) => {
            let leaf = tape.leaf(Tensor::new(vec![1, p.len()], p.to_vec())?);
            let kl = pass.posterior.gather_rows(&rows)?.kl_rows_sum(leaf, PRIOR_FLOOR)?;
            (Some(leaf), Some(kl))
        }
        None => (None, None),
    };
    let mut out = WindowTerms {
        ce: ce.item(),
        kl: kl.map_or(0.0, |k| k.item()),
        hits: tape.floor_hits(),
        positions: rows.len(),
        grads: Vec::new(),
        prior_grad: Vec::new(),
    };
    if let Some(s) = scale {
        let loss = match kl {
            Some(k) => ce.add(k.scale(alpha))?,
            None => ce,
        };
        tape.backward(loss.scale(s))?;
        out.grads = vars.grads();
        out.prior_grad = prior_leaf.map(|p| p.grad().into_data()).unwrap_or_default();
    }
    Ok(out)
}

fn check_batch(windows: &[TrainWindow], alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(ObjectiveError::Alpha(alpha));
    }
    if windows.iter().all(|w| w.num_targets() == 0) {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(())
}

fn summarize(terms: &[WindowTerms], alpha: f64) -> LossBreakdown {
    let positions: usize = terms.iter().map(|t| t.positions).sum();
    let n = positions as f64;
    let prediction = terms.iter().map(|t| t.ce).sum::<f64>() / n;
    let kl = terms.iter().map(|t| t.kl).sum::<f64>() / n;
    LossBreakdown {
        total: prediction + alpha * kl,
        prediction,
        kl,
        alpha,
        floor_hits: terms.iter().map(|t| t.hits).sum(),
        positions,
    }
}

/// Loss value against a fixed prior. Window `i` draws its routing noise from
/// `stream(seed, [i])`.
pub fn caseq_loss(
    params: &CaseqParams,
    config: &CaseqConfig,
    windows: &[TrainWindow],
    alpha: f64,
    prior: &PriorEstimate,
    mode: RoutingMode,
    seed: u64,
) -> Result<LossBreakdown> {
    check_batch(windows, alpha)?;
    let prior = uses_prior(config, alpha).then_some(prior.probs.as_slice());
    let terms = par::map(windows, |i, w| {
        window_terms(params, config, w, prior, alpha, mode, crate::rng::derive_seed(seed, &[i as u64]), None)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&terms, alpha))
}

/// Mean per-position cross-entropy of a baseline model.
pub fn mle_loss(params: &CaseqParams, config: &CaseqConfig, windows: &[TrainWindow]) -> Result<f64> {
    check_batch(windows, 0.0)?;
    let terms = par::map(windows, |_, w| window_terms(params, config, w, None, 0.0, RoutingMode::Soft, 0, None))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&terms, 0.0).total)
}

/// Loss and its gradient in canonical parameter order. The prior is
/// recomputed from `params` over `pseudo`, and its gradient is chained back
/// into the parameters.
pub fn loss_and_grad(
    params: &CaseqParams,
    config: &CaseqConfig,
    windows: &[TrainWindow],
    alpha: f64,
    pseudo: &[Vec<EventId>],
    mode: RoutingMode,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    check_batch(windows, alpha)?;
    let with_prior = uses_prior(config, alpha);
    let prior = if with_prior {
        Some(prior_estimate(params, config, pseudo, 0)?.probs)
    } else {
        None
    };
    let n: usize = windows.iter().map(TrainWindow::num_targets).sum();
    let scale = 1.0 / n as f64;
    let terms = par::map(windows, |i, w| {
        if w.num_targets() == 0 {
            return Ok(None);
        }
        window_terms(
            params,
            config,
            w,
            prior.as_deref(),
            alpha,
            mode,
            crate::rng::derive_seed(seed, &[i as u64]),
            Some(scale),
        )
        .map(Some)
    })
    .into_iter()
    .filter_map(Result::transpose)
    .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut prior_grad = vec![0.0; prior.as_ref().map_or(0, Vec::len)];
    for t in &terms {
        add_into(&mut grads, &t.grads);
        for (a, b) in prior_grad.iter_mut().zip(&t.prior_grad) {
            *a += b;
        }
    }
    if with_prior {
        // d p / d theta = (1/R) sum_j d q_j / d theta, one tape per pseudo sequence.
        let r = pseudo.len() as f64;
        let seed_vec: Vec<f64> = prior_grad.iter().map(|g| g / r).collect();
        let parts = par::map(pseudo, |_, s| -> Result<Vec<Tensor>> {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let q = final_posterior(&vars, s, config)?;
            tape.backward_with_seed(q, &seed_vec)?;
            Ok(vars.grads())
        });
        for p in parts {
            add_into(&mut grads, &p?);
        }
    }
    Ok((summarize(&terms, alpha), grads))
}

fn add_into(acc: &mut [Tensor], part: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(part) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backbone;

    fn cfg(k: usize, layers: usize, m: usize) -> CaseqConfig {
        CaseqConfig {
            event_types: m,
            dim: 3,
            units: k,
            layers,
            routing: RoutingMode::Soft,
            ..CaseqConfig::default()
        }
    }

    fn params(config: &CaseqConfig, seed: u64) -> CaseqParams {
        let mut p = CaseqParams::zeros(config);
        let mut r = stream(seed, &[]);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = r.gen_range(-0.6..0.6);
            }
        }
        p
    }

    fn window(input: Vec<u32>, targets: Vec<u32>) -> TrainWindow {
        TrainWindow { seq: 0, input, targets }
    }

    #[test]
    fn pseudo_sequence_cases() {
        let mut r = stream(1, &[]);
        let one = sample_pseudo_sequences(1, 5, LengthDist::fixed(1), &mut r);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 1);
        let ones = sample_pseudo_sequences(4, 1, LengthDist { min: 1, max: 6 }, &mut r);
        assert!(ones.iter().flatten().all(|&e| e == 1));
        assert_eq!(default_pseudo_lengths(&[3, 9, 5], 100), LengthDist { min: 1, max: 5 });
        assert_eq!(default_pseudo_lengths(&[300, 300], 100).max, 100);
    }

    #[test]
    fn pseudo_events_are_uniform() {
        let m = 20;
        let mut counts = vec![0usize; m];
        let mut r = stream(0, &[]);
        let mut total = 0;
        while total < 100_000 {
            for s in sample_pseudo_sequences(8, m, LengthDist { min: 1, max: 25 }, &mut r) {
                for e in s {
                    counts[e as usize - 1] += 1;
                    total += 1;
                }
            }
        }
        let p = 1.0 / m as f64;
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - total as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn prior_cases() {
        let c = cfg(2, 2, 5);
        let p = params(&c, 3);
        let seqs = vec![vec![1u32, 4, 2]];
        let est = prior_estimate(&p, &c, &seqs, 0).unwrap();
        let (_, post) = crate::model::infer(&p, &c, &seqs[0]).unwrap();
        assert_eq!(est.probs, post.row(2));
        assert!((est.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let c1 = cfg(1, 1, 5);
        let est = prior_estimate(&params(&c1, 4), &c1, &[vec![2, 3], vec![5]], 1).unwrap();
        assert_eq!(est.probs, vec![1.0]);
        assert!(matches!(prior_estimate(&p, &c, &[], 0), Err(ObjectiveError::NoPseudo)));
    }

    #[test]
    fn prior_is_mean_of_posteriors() {
        let tape = Tape::new();
        let rows = tape.leaf(Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap());
        let m = rows.mean_rows().value();
        assert!((m.data()[0] - 0.4).abs() < 1e-15 && (m.data()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.5108).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_finite());
    }

    #[test]
    fn alpha_zero_matches_mle() {
        let c = cfg(2, 2, 5);
        let p = params(&c, 5);
        let ws = vec![window(vec![1, 2, 3], vec![2, 3, 4]), window(vec![5, 1], vec![0, 2])];
        let prior = prior_estimate(&p, &c, &[vec![1, 2]], 0).unwrap();
        let l = caseq_loss(&p, &c, &ws, 0.0, &prior, RoutingMode::Soft, 0).unwrap();
        assert_eq!(l.total, l.prediction);
        let gated = CaseqConfig {
            baseline: BaselineMode::Gated,
            ..c.clone()
        };
        assert!((mle_loss(&p, &gated, &ws).unwrap() - l.prediction).abs() < 1e-12);
        assert_eq!(l.positions, 4);
    }

    #[test]
    fn single_path_has_zero_kl() {
        let c = cfg(1, 1, 5);
        let p = params(&c, 6);
        let ws = vec![window(vec![1, 2, 3], vec![2, 3, 4])];
        let prior = prior_estimate(&p, &c, &[vec![3]], 0).unwrap();
        for alpha in [0.0, 0.5, 10.0] {
            let l = caseq_loss(&p, &c, &ws, alpha, &prior, RoutingMode::Gumbel, 1).unwrap();
            assert_eq!(l.kl, 0.0);
            assert_eq!(l.total, l.prediction);
        }
    }

    #[test]
    fn uniform_logits_give_log_m() {
        for (m, k) in [(4usize, 2usize), (10, 1)] {
            let c = cfg(k, 1, m);
            let p = CaseqParams::zeros(&c);
            let ws = vec![window(vec![1, 2, 3], vec![2, 3, 4])];
            let prior = prior_estimate(&p, &c, &[vec![1]], 0).unwrap();
            let l = caseq_loss(&p, &c, &ws, 1.0, &prior, RoutingMode::Gumbel, 2).unwrap();
            assert!((l.prediction - (m as f64).ln()).abs() < 1e-9);
            let single = CaseqConfig {
                baseline: BaselineMode::Single,
                ..c.clone()
            };
            assert!((mle_loss(&p, &single, &ws).unwrap() - (m as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_logits_give_small_loss() {
        let c = CaseqConfig {
            baseline: BaselineMode::Single,
            ..cfg(1, 1, 3)
        };
        let mut p = CaseqParams::zeros(&c);
        // Zero unit weights make the GRU output a constant; set the update
        // gate to pass nothing so h stays tanh(b_n) and scale the embeddings.
        p.event_emb = Tensor::new(vec![3, 3], vec![40.0, 0.0, 0.0, 0.0, 40.0, 0.0, 0.0, 0.0, 40.0]).unwrap();
        if let crate::model::UnitParams::Gru { b_x, .. } = &mut p.layers[0].units[0] {
            b_x.data_mut().copy_from_slice(&[0.0, 0.0, 0.0, -50.0, -50.0, -50.0, 0.0, 50.0, 0.0]);
        }
        let ws = vec![window(vec![1, 2], vec![2, 2])];
        assert!(mle_loss(&p, &c, &ws).unwrap() < 1e-10);
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let c = CaseqConfig {
            baseline: BaselineMode::Ensemble,
            ..cfg(2, 2, 5)
        };
        let p = params(&c, 7);
        let ws = vec![window(vec![1, 2, 3], vec![2, 0, 4]), window(vec![5, 1], vec![1, 2])];
        let doubled: Vec<_> = ws.iter().chain(&ws).cloned().collect();
        let a = mle_loss(&p, &c, &ws).unwrap();
        let b = mle_loss(&p, &c, &doubled).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(mle_loss(&p, &c, &[]), Err(ObjectiveError::EmptyBatch)));
    }

    #[test]
    fn total_is_monotone_in_alpha() {
        let c = cfg(2, 2, 5);
        let p = params(&c, 8);
        let ws = vec![window(vec![1, 2, 3, 5], vec![2, 3, 5, 1])];
        let prior = prior_estimate(&p, &c, &[vec![4, 4], vec![1, 2, 3]], 0).unwrap();
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.0, 0.1, 1.0, 5.0] {
            let l = caseq_loss(&p, &c, &ws, alpha, &prior, RoutingMode::Gumbel, 9).unwrap();
            assert!(l.kl >= -1e-10);
            assert!((l.total - (l.prediction + alpha * l.kl)).abs() < 1e-10);
            assert!(l.total >= last);
            last = l.total;
        }
    }

    fn check_gradient(backbone: Backbone) {
        let c = CaseqConfig {
            backbone,
            max_len: 8,
            ..cfg(2, 2, 4)
        };
        let p = params(&c, 10);
        let ws = vec![window(vec![1, 3, 2, 4], vec![3, 2, 4, 1]), window(vec![2, 2], vec![0, 1])];
        let pseudo = vec![vec![1u32, 2], vec![4, 3, 1]];
        let alpha = 0.7;
        let (_, grads) = loss_and_grad(&p, &c, &ws, alpha, &pseudo, RoutingMode::Soft, 0).unwrap();
        let value = |q: &CaseqParams| {
            let prior = prior_estimate(q, &c, &pseudo, 0).unwrap();
            caseq_loss(q, &c, &ws, alpha, &prior, RoutingMode::Soft, 0).unwrap().total
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[j] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= eps;
                let num = (value(&plus) - value(&minus)) / (2.0 * eps);
                let err = (g.data()[j] - num).abs() / num.abs().max(1e-8);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "{backbone:?}: {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences_recurrent() {
        check_gradient(Backbone::RecurrentGated);
    }

    #[test]
    fn gradient_matches_finite_differences_attention() {
        check_gradient(Backbone::CausalAttention);
    }
}
