//! Self-checks behind `caseq verify`: gradient, ELBO, backdoor and
//! reduction suites. Each returns one [`Check`] per named invariant.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::{EventId, TrainWindow};
use crate::model::{
    embed_events, forward, inference_unit_forward, Backbone, BaselineMode, CaseqConfig, CaseqParams, RoutingMode,
};
use crate::objective::{caseq_loss, loss_and_grad, prior_estimate};
use crate::rng::stream;
use crate::scm::{
    backdoor_sum, elbo_enumerate, interventional_dist_mutilated, log_marginal, observational_conditional,
    random_simplex, sample_dataset, total_variation, true_posterior, LengthDist, ScmSpec,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Elbo,
    Backdoor,
    Reduction,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grads" => Ok(Self::Grads),
            "elbo" => Ok(Self::Elbo),
            "backdoor" => Ok(Self::Backdoor),
            "reduction" => Ok(Self::Reduction),
            "all" => Ok(Self::All),
            _ => Err(format!("unknown suite '{s}' (valid: grads, elbo, backdoor, reduction, all)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Grads => grads(),
        Suite::Elbo => elbo(),
        Suite::Backdoor => backdoor(),
        Suite::Reduction => reduction(),
        Suite::All => [grads(), elbo(), backdoor(), reduction()].concat(),
    }
}

fn random_params(config: &CaseqConfig, seed: u64, scale: f64) -> CaseqParams {
    let mut p = CaseqParams::zeros(config);
    let mut r = stream(seed, &[0x9a]);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
    p
}

/// Largest relative error of the analytic gradient of the full regularized
/// loss (soft routing, prior path included) against central differences.
pub fn max_grad_error(backbone: Backbone, eps: f64, seed: u64) -> f64 {
    let config = CaseqConfig {
        event_types: 6,
        dim: 4,
        units: 2,
        layers: 2,
        tau: 0.8,
        backbone,
        max_len: 5,
        routing: RoutingMode::Soft,
        baseline: BaselineMode::None,
    };
    let params = random_params(&config, seed, 0.5);
    let windows = vec![TrainWindow {
        seq: 0,
        input: vec![3, 1, 6, 2, 5],
        targets: vec![1, 6, 2, 5, 4],
    }];
    let pseudo: Vec<Vec<EventId>> = vec![vec![2, 4, 1], vec![6], vec![5, 5, 3, 1]];
    let alpha = 0.5;
    let (_, grads) =
        loss_and_grad(&params, &config, &windows, alpha, &pseudo, RoutingMode::Soft, seed).expect("valid setup");
    let value = |p: &CaseqParams| {
        let prior = prior_estimate(p, &config, &pseudo, 0).expect("valid setup");
        caseq_loss(p, &config, &windows, alpha, &prior, RoutingMode::Soft, seed)
            .expect("valid setup")
            .total
    };
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[j] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= eps;
            let num = (value(&plus) - value(&minus)) / (2.0 * eps);
            worst = worst.max((g.data()[j] - num).abs() / num.abs().max(1e-8));
        }
    }
    worst
}

fn grads() -> Vec<Check> {
    [Backbone::RecurrentGated, Backbone::CausalAttention]
        .into_iter()
        .map(|b| {
            let err = max_grad_error(b, 1e-5, 11);
            let name = match b {
                Backbone::RecurrentGated => "grads.gru",
                Backbone::CausalAttention => "grads.attention",
            };
            Check::new(name, err < 1e-4, format!("max rel err {err:.3e} (bound 1e-4)"))
        })
        .collect()
}

/// `(max excess of ELBO over the log-marginal, max gap at the posterior)`
/// over `draws` random specs, prefixes, targets and variational laws.
pub fn elbo_stats(draws: usize, seed: u64) -> (f64, f64) {
    let mut r = stream(seed, &[0xe1]);
    let mut excess = f64::NEG_INFINITY;
    let mut gap: f64 = 0.0;
    for _ in 0..draws {
        let c = r.gen_range(1..=4);
        let m = r.gen_range(2..=6);
        let lambda = r.gen_range(0.0..1.0);
        let spec = ScmSpec::random(&mut r, c, m, lambda);
        let len = r.gen_range(1..=6);
        let prefix: Vec<EventId> = (0..len).map(|_| r.gen_range(1..=m as EventId)).collect();
        let t = len + 1 + r.gen_range(0..30);
        let y = r.gen_range(1..=m as EventId);
        let q = random_simplex(&mut r, c, 1.0);
        let lm = log_marginal(&spec, &prefix, t, y);
        excess = excess.max(elbo_enumerate(&spec, &prefix, t, y, &q) - lm);
        if let Ok(post) = true_posterior(&spec, &prefix, t, y) {
            gap = gap.max((elbo_enumerate(&spec, &prefix, t, y, &post) - lm).abs());
        }
    }
    (excess, gap)
}

fn elbo() -> Vec<Check> {
    let (excess, gap) = elbo_stats(1000, 0);
    vec![
        Check::new(
            "elbo.bound",
            excess <= 1e-12,
            format!("max(ELBO - log p) = {excess:.3e} over 1000 draws"),
        ),
        Check::new("elbo.tight", gap <= 1e-12, format!("max |ELBO - log p| at posterior = {gap:.3e}")),
    ]
}

/// Worst `|MC - exact| / sigma` over `specs` random 3-context specs.
pub fn backdoor_z(specs: usize, samples: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..specs {
        let mut r = stream(seed, &[0xbd, i as u64]);
        let m = 4;
        let spec = ScmSpec::random(&mut r, 3, m, 0.3);
        let prefix: Vec<EventId> = (0..3).map(|_| r.gen_range(1..=m as EventId)).collect();
        let t = r.gen_range(2..30);
        let exact = backdoor_sum(&spec, &prefix, t);
        let mc = interventional_dist_mutilated(&spec, &prefix, t, samples, seed.wrapping_add(i as u64));
        for (p, f) in exact.iter().zip(&mc) {
            let sd = (p * (1.0 - p) / samples as f64).sqrt();
            if sd > 0.0 {
                worst = worst.max((f - p).abs() / sd);
            } else if f != p {
                worst = f64::INFINITY;
            }
        }
    }
    worst
}

/// Largest total-variation distance between the observational and the
/// interventional next-event law over prefixes drawn from a confounded spec.
pub fn confounding_gap(seed: u64) -> f64 {
    let spec = ScmSpec::drifting(20, 4, 0.5, 50, 7);
    let ds = sample_dataset(&spec, 50, LengthDist::fixed(50), seed).expect("valid spec");
    let mut worst: f64 = 0.0;
    for s in &ds.sequences {
        for t in [5, 20, 35, 50] {
            let prefix = s.head(t);
            let tv = total_variation(
                &observational_conditional(&spec, prefix, t),
                &backdoor_sum(&spec, prefix, t),
            );
            worst = worst.max(tv);
        }
    }
    worst
}

fn backdoor() -> Vec<Check> {
    let z = backdoor_z(20, 1_000_000, 0);
    let tv = confounding_gap(0);
    vec![
        Check::new("backdoor.identity", z <= 3.0, format!("worst deviation {z:.2} sigma (bound 3)")),
        Check::new("backdoor.confounded", tv > 0.05, format!("max TV(observational, interventional) = {tv:.4}")),
    ]
}

/// Compares a one-unit one-layer model with the bare backbone. Returns
/// `(logits bitwise equal, KL term exactly zero)`.
pub fn reduction_holds(backbone: Backbone, mode: RoutingMode, seed: u64) -> (bool, bool) {
    let config = CaseqConfig {
        event_types: 7,
        dim: 5,
        units: 1,
        layers: 1,
        tau: 0.5,
        backbone,
        max_len: 10,
        routing: mode,
        baseline: BaselineMode::None,
    };
    let params = random_params(&config, seed, 0.7);
    let seq: Vec<EventId> = vec![2, 7, 1, 1, 4, 6];
    let tape = Tape::new();
    let vars = params.register(&tape);
    let mut r = stream(seed, &[]);
    let pass = forward(&vars, &seq, &config, mode, &mut r).expect("valid setup");
    let h = embed_events(&vars, &seq, &config).expect("valid setup");
    let bare = inference_unit_forward(h, &vars.layers[0].units[0], backbone)
        .and_then(|h| Ok(h.matmul_t(vars.event_emb)?))
        .expect("valid setup");
    let equal = pass.logits.value() == bare.value();
    let windows = vec![TrainWindow {
        seq: 0,
        input: seq[..5].to_vec(),
        targets: seq[1..].to_vec(),
    }];
    let prior = prior_estimate(&params, &config, &[vec![3, 1]], 0).expect("valid setup");
    let loss = caseq_loss(&params, &config, &windows, 1.0, &prior, mode, seed).expect("valid setup");
    (equal, loss.kl == 0.0)
}

fn reduction() -> Vec<Check> {
    let mut out = Vec::new();
    for backbone in [Backbone::RecurrentGated, Backbone::CausalAttention] {
        let mut eq = true;
        let mut kl = true;
        for mode in [RoutingMode::Soft, RoutingMode::Gumbel] {
            for seed in 0..3 {
                let (e, k) = reduction_holds(backbone, mode, seed);
                eq &= e;
                kl &= k;
            }
        }
        let tag = match backbone {
            Backbone::RecurrentGated => "gru",
            Backbone::CausalAttention => "attention",
        };
        out.push(Check::new(&format!("reduction.{tag}.bitwise"), eq, "K=1, D=1 logits vs bare backbone".into()));
        out.push(Check::new(&format!("reduction.{tag}.kl_zero"), kl, "KL term with a single path".into()));
    }
    out
}
