//! Hierarchical branching network.
//!
//! Events are embedded with a shared matrix `H_x`, then pass through `D`
//! layers. Each layer holds `K` inference units (gated recurrent cells or
//! causal self-attention blocks) and a context-embedding matrix `H_c` whose
//! rows parameterize the branching scores. At every position the layer output
//! is the routing-weighted mixture of the unit outputs. Logits are the hidden
//! states scored against `H_x` (tied output weights).
//!
//! Path indexing: the flattened posterior over the `K^D` unit combinations
//! uses layer 1 as the most significant base-`K` digit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EventId;
use crate::rng::gumbel;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("event id {id} outside [1, {max}]")]
    EventRange { id: EventId, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("path index {index} outside [0, {size})")]
    PathRange { index: usize, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    #[serde(alias = "gru")]
    RecurrentGated,
    #[serde(alias = "attention")]
    CausalAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Gumbel-Softmax samples; used during training.
    Gumbel,
    /// Plain temperature softmax; used for evaluation and diagnostics.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Full model with learned routing and the KL-regularized objective.
    None,
    /// Unit 1 of every layer only.
    Single,
    /// Uniform mixture of all units.
    Ensemble,
    /// Soft learned gating without any prior attachment.
    Gated,
}

impl std::str::FromStr for BaselineMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" | "caseq" => Ok(Self::None),
            "single" => Ok(Self::Single),
            "ensemble" => Ok(Self::Ensemble),
            "gated" => Ok(Self::Gated),
            other => Err(format!("unknown baseline `{other}` (valid: none, single, ensemble, gated)")),
        }
    }
}

fn default_max_len() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseqConfig {
    /// Number of event types `M`; 0 means "take it from the data".
    #[serde(default)]
    pub event_types: usize,
    /// Embedding and hidden width `d`.
    pub dim: usize,
    /// Inference units per layer `K`.
    pub units: usize,
    /// Number of layers `D`.
    pub layers: usize,
    /// Routing temperature.
    pub tau: f64,
    pub backbone: Backbone,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub routing: RoutingMode,
    pub baseline: BaselineMode,
}

impl Default for CaseqConfig {
    fn default() -> Self {
        Self {
            event_types: 0,
            dim: 16,
            units: 2,
            layers: 2,
            tau: 1.0,
            backbone: Backbone::RecurrentGated,
            max_len: default_max_len(),
            routing: RoutingMode::Gumbel,
            baseline: BaselineMode::None,
        }
    }
}

impl CaseqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.event_types < 2 {
            return bad("event_types must be at least 2");
        }
        if self.dim == 0 || self.units == 0 || self.layers == 0 || self.max_len == 0 {
            return bad("dim, units, layers and max_len must be positive");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if self.num_paths_checked().is_none() {
            return bad("units^layers overflows");
        }
        Ok(())
    }

    /// Context-embedding width `d(d+1)`.
    pub fn context_dim(&self) -> usize {
        self.dim * (self.dim + 1)
    }

    fn num_paths_checked(&self) -> Option<usize> {
        (0..self.layers).try_fold(1usize, |acc, _| acc.checked_mul(self.units))
    }

    /// `K^D`.
    pub fn num_paths(&self) -> usize {
        self.num_paths_checked().expect("validated config")
    }
}

/// Parameters of one inference unit.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitParams {
    /// Gate order along the `3d` axis: reset, update, candidate.
    Gru {
        w_x: Tensor,
        w_h: Tensor,
        b_x: Tensor,
        b_h: Tensor,
    },
    Attention {
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_1: Tensor,
        b_1: Tensor,
        w_2: Tensor,
        b_2: Tensor,
    },
}

impl UnitParams {
    fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Gru { w_x, w_h, b_x, b_h } => vec![("w_x", w_x), ("w_h", w_h), ("b_x", b_x), ("b_h", b_h)],
            Self::Attention {
                w_q,
                w_k,
                w_v,
                w_1,
                b_1,
                w_2,
                b_2,
            } => vec![
                ("w_q", w_q),
                ("w_k", w_k),
                ("w_v", w_v),
                ("w_1", w_1),
                ("b_1", b_1),
                ("w_2", w_2),
                ("b_2", b_2),
            ],
        }
    }

    fn fields_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Gru { w_x, w_h, b_x, b_h } => vec![w_x, w_h, b_x, b_h],
            Self::Attention {
                w_q,
                w_k,
                w_v,
                w_1,
                b_1,
                w_2,
                b_2,
            } => vec![w_q, w_k, w_v, w_1, b_1, w_2, b_2],
        }
    }

    /// Zero-initialized unit of the given backbone.
    pub fn zeros(backbone: Backbone, d: usize) -> Self {
        match backbone {
            Backbone::RecurrentGated => Self::Gru {
                w_x: Tensor::zeros(&[d, 3 * d]),
                w_h: Tensor::zeros(&[d, 3 * d]),
                b_x: Tensor::zeros(&[1, 3 * d]),
                b_h: Tensor::zeros(&[1, 3 * d]),
            },
            Backbone::CausalAttention => Self::Attention {
                w_q: Tensor::zeros(&[d, d]),
                w_k: Tensor::zeros(&[d, d]),
                w_v: Tensor::zeros(&[d, d]),
                w_1: Tensor::zeros(&[d, d]),
                b_1: Tensor::zeros(&[1, d]),
                w_2: Tensor::zeros(&[d, d]),
                b_2: Tensor::zeros(&[1, d]),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `K x d(d+1)` context embeddings.
    pub context_emb: Tensor,
    pub units: Vec<UnitParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseqParams {
    /// `M x d`; row `i` embeds event id `i + 1`.
    pub event_emb: Tensor,
    /// `max_len x d`, attention backbone only.
    pub positional: Option<Tensor>,
    pub layers: Vec<LayerParams>,
}

impl CaseqParams {
    pub fn zeros(config: &CaseqConfig) -> Self {
        let d = config.dim;
        Self {
            event_emb: Tensor::zeros(&[config.event_types, d]),
            positional: (config.backbone == Backbone::CausalAttention).then(|| Tensor::zeros(&[config.max_len, d])),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    context_emb: Tensor::zeros(&[config.units, config.context_dim()]),
                    units: (0..config.units).map(|_| UnitParams::zeros(config.backbone, d)).collect(),
                })
                .collect(),
        }
    }

    /// Every array with its canonical name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("event_emb".to_string(), &self.event_emb)];
        if let Some(p) = &self.positional {
            out.push(("positional".to_string(), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.context_emb"), &layer.context_emb));
            for (k, unit) in layer.units.iter().enumerate() {
                for (name, t) in unit.fields() {
                    out.push((format!("layer{l}.unit{k}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.event_emb];
        if let Some(p) = &mut self.positional {
            out.push(p);
        }
        for layer in &mut self.layers {
            out.push(&mut layer.context_emb);
            for unit in &mut layer.units {
                out.extend(unit.fields_mut());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check(&self, config: &CaseqConfig) -> Result<()> {
        let reference = Self::zeros(config);
        let a: Vec<_> = reference.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let b: Vec<_> = self.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if a != b {
            return Err(ModelError::Config("parameters do not match config".into()));
        }
        Ok(())
    }

    /// Registers every array as a leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            event_emb: tape.leaf(self.event_emb.clone()),
            positional: self.positional.as_ref().map(|p| tape.leaf(p.clone())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    context_emb: tape.leaf(l.context_emb.clone()),
                    units: l
                        .units
                        .iter()
                        .map(|u| UnitVars(u.fields().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect()))
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Tape handles of one unit's arrays, in [`UnitParams`] field order.
#[derive(Debug, Clone)]
pub struct UnitVars<'t>(pub Vec<Var<'t>>);

#[derive(Debug, Clone)]
pub struct LayerVars<'t> {
    pub context_emb: Var<'t>,
    pub units: Vec<UnitVars<'t>>,
}

#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub event_emb: Var<'t>,
    pub positional: Option<Var<'t>>,
    pub layers: Vec<LayerVars<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.event_emb];
        out.extend(self.positional);
        for l in &self.layers {
            out.push(l.context_emb);
            for u in &l.units {
                out.extend(u.0.iter().copied());
            }
        }
        out
    }

    /// Accumulated gradients in canonical order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars().iter().map(Var::grad).collect()
    }
}

/// `h^1`: embedding rows of the events, plus positional rows for attention.
pub fn embed_events<'t>(vars: &ParamVars<'t>, seq: &[EventId], config: &CaseqConfig) -> Result<Var<'t>> {
    if seq.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let m = config.event_types;
    let idx = seq
        .iter()
        .map(|&id| {
            if id == 0 || id as usize > m {
                Err(ModelError::EventRange { id, max: m })
            } else {
                Ok(id as usize - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let h = vars.event_emb.gather_rows(&idx)?;
    match (config.backbone, vars.positional) {
        (Backbone::CausalAttention, Some(p)) => {
            if seq.len() > config.max_len {
                return Err(ModelError::Config(format!(
                    "sequence length {} exceeds max_len {}",
                    seq.len(),
                    config.max_len
                )));
            }
            let pos: Vec<usize> = (0..seq.len()).collect();
            Ok(h.add(p.gather_rows(&pos)?)?)
        }
        _ => Ok(h),
    }
}

/// Runs one inference unit over a `T x d` sequence of hidden states.
pub fn inference_unit_forward<'t>(hidden: Var<'t>, unit: &UnitVars<'t>, backbone: Backbone) -> Result<Var<'t>> {
    match backbone {
        Backbone::RecurrentGated => gru_forward(hidden, unit),
        Backbone::CausalAttention => attention_forward(hidden, unit),
    }
}

fn gru_forward<'t>(hidden: Var<'t>, unit: &UnitVars<'t>) -> Result<Var<'t>> {
    let [w_x, w_h, b_x, b_h] = unit.0[..] else {
        return Err(ModelError::Config("recurrent unit expects 4 arrays".into()));
    };
    let tape = hidden.tape();
    let (t_len, d) = hidden.dims2();
    let xp = hidden.matmul(w_x)?.add_row(b_x)?;
    let mut h = tape.constant(Tensor::zeros(&[1, d]));
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = xp.row(t)?;
        let hp = h.matmul(w_h)?.add_row(b_h)?;
        let gate = |v: Var<'t>, i: usize| v.slice(i * d, &[1, d]);
        let r = gate(x_t, 0)?.add(gate(hp, 0)?)?.sigmoid();
        let z = gate(x_t, 1)?.add(gate(hp, 1)?)?.sigmoid();
        let n = gate(x_t, 2)?.add(r.mul(gate(hp, 2)?)?)?.tanh();
        h = n.add(z.mul(h.sub(n)?)?)?;
        outputs.push(h);
    }
    Ok(Var::concat_rows(&outputs)?)
}

fn attention_forward<'t>(hidden: Var<'t>, unit: &UnitVars<'t>) -> Result<Var<'t>> {
    let [w_q, w_k, w_v, w_1, b_1, w_2, b_2] = unit.0[..] else {
        return Err(ModelError::Config("attention unit expects 7 arrays".into()));
    };
    let d = hidden.dims2().1;
    let q = hidden.matmul(w_q)?;
    let k = hidden.matmul(w_k)?;
    let v = hidden.matmul(w_v)?;
    let attn = q.matmul_t(k)?.causal_softmax(1.0 / (d as f64).sqrt());
    let h1 = hidden.add(attn.matmul(v)?)?;
    let ff = h1.matmul(w_1)?.add_row(b_1)?.relu().matmul(w_2)?.add_row(b_2)?;
    Ok(h1.add(ff)?)
}

/// `s_k = <a_k, tanh(W_k h)>` for every position: `T x d -> T x K`.
pub fn branching_scores<'t>(hidden: Var<'t>, context_emb: Var<'t>) -> Result<Var<'t>> {
    let d = hidden.dims2().1;
    let (k_units, width) = context_emb.dims2();
    if width != d * (d + 1) {
        return Err(ModelError::Config(format!(
            "context embedding width {width} != d(d+1) = {}",
            d * (d + 1)
        )));
    }
    let mut cols = Vec::with_capacity(k_units);
    for k in 0..k_units {
        let w = context_emb.slice(k * width, &[d, d])?;
        let a = context_emb.slice(k * width + d * d, &[d, 1])?;
        cols.push(hidden.matmul_t(w)?.tanh().matmul(a)?);
    }
    Ok(Var::concat_cols(&cols)?)
}

/// Row-wise routing probabilities from scores. Gumbel mode adds i.i.d.
/// standard Gumbel noise per entry before the temperature softmax.
pub fn branch_probs<'t, R: Rng + ?Sized>(scores: Var<'t>, tau: f64, mode: RoutingMode, rng: &mut R) -> Result<Var<'t>> {
    let s = match mode {
        RoutingMode::Soft => scores,
        RoutingMode::Gumbel => {
            let (m, k) = scores.dims2();
            let noise: Vec<f64> = (0..m * k).map(|_| gumbel(rng)).collect();
            scores.add(scores.tape().constant(Tensor::new(vec![m, k], noise)?))?
        }
    };
    Ok(s.softmax_rows(tau)?)
}

/// Output of one layer: next hidden states and the `T x K` routing matrix.
pub struct LayerOut<'t> {
    pub hidden: Var<'t>,
    pub routing: Var<'t>,
}

/// Weighted per-position mixture of unit outputs.
pub fn mix_candidates<'t>(candidates: &[Var<'t>], routing: Var<'t>) -> Result<Var<'t>> {
    let mut out: Option<Var<'t>> = None;
    for (k, cand) in candidates.iter().enumerate() {
        let term = cand.scale_rows(routing.col(k)?)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    out.ok_or_else(|| ModelError::Config("layer has no units".into()))
}

pub fn layer_forward<'t, R: Rng + ?Sized>(
    hidden: Var<'t>,
    layer: &LayerVars<'t>,
    config: &CaseqConfig,
    mode: RoutingMode,
    rng: &mut R,
) -> Result<LayerOut<'t>> {
    let tape = hidden.tape();
    let t_len = hidden.dims2().0;
    let k_units = layer.units.len();
    if config.baseline == BaselineMode::Single {
        let mut onehot = vec![0.0; t_len * k_units];
        for t in 0..t_len {
            onehot[t * k_units] = 1.0;
        }
        return Ok(LayerOut {
            hidden: inference_unit_forward(hidden, &layer.units[0], config.backbone)?,
            routing: tape.constant(Tensor::new(vec![t_len, k_units], onehot)?),
        });
    }
    let routing = match config.baseline {
        BaselineMode::Ensemble => tape.constant(Tensor::filled(&[t_len, k_units], 1.0 / k_units as f64)),
        BaselineMode::Gated => branch_probs(branching_scores(hidden, layer.context_emb)?, config.tau, RoutingMode::Soft, rng)?,
        _ => branch_probs(branching_scores(hidden, layer.context_emb)?, config.tau, mode, rng)?,
    };
    let candidates = layer
        .units
        .iter()
        .map(|u| inference_unit_forward(hidden, u, config.backbone))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerOut {
        hidden: mix_candidates(&candidates, routing)?,
        routing,
    })
}

/// Result of a full forward pass over one sequence.
pub struct ForwardPass<'t> {
    /// `T x M` scores; row `m` ranks the event following position `m`.
    pub logits: Var<'t>,
    /// One `T x K` routing matrix per layer.
    pub layer_routing: Vec<Var<'t>>,
    /// `T x K^D` flattened posterior.
    pub posterior: Var<'t>,
}

pub fn forward<'t, R: Rng + ?Sized>(
    vars: &ParamVars<'t>,
    seq: &[EventId],
    config: &CaseqConfig,
    mode: RoutingMode,
    rng: &mut R,
) -> Result<ForwardPass<'t>> {
    if vars.layers.len() != config.layers || vars.layers.iter().any(|l| l.units.len() != config.units) {
        return Err(ModelError::Config("parameters do not match config".into()));
    }
    let mut h = embed_events(vars, seq, config)?;
    let mut layer_routing = Vec::with_capacity(config.layers);
    for layer in &vars.layers {
        let out = layer_forward(h, layer, config, mode, rng)?;
        h = out.hidden;
        layer_routing.push(out.routing);
    }
    let logits = h.matmul_t(vars.event_emb)?;
    let mut posterior = layer_routing[0];
    for q in &layer_routing[1..] {
        posterior = posterior.row_kron(*q)?;
    }
    Ok(ForwardPass {
        logits,
        layer_routing,
        posterior,
    })
}

/// Tape-free forward in soft routing: `(logits, flattened posterior)`.
pub fn infer(params: &CaseqParams, config: &CaseqConfig, seq: &[EventId]) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    // Soft routing draws no randomness.
    let mut rng = crate::rng::stream(0, &[]);
    let pass = forward(&vars, seq, config, RoutingMode::Soft, &mut rng)?;
    Ok((pass.logits.value(), pass.posterior.value()))
}

/// Flattened Kronecker product of per-layer routing vectors.
pub fn flatten_posterior(layers: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for q in layers {
        out = out.iter().flat_map(|&a| q.iter().map(move |&b| a * b)).collect();
    }
    out
}

/// Unit choice per layer (0-based), layer 1 first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPath(pub Vec<usize>);

impl ContextPath {
    /// The `D x K` one-hot matrix.
    pub fn matrix(&self, units: usize) -> Vec<Vec<u8>> {
        self.0
            .iter()
            .map(|&u| (0..units).map(|k| u8::from(k == u)).collect())
            .collect()
    }

    pub fn index(&self, units: usize) -> usize {
        self.0.iter().fold(0, |acc, &u| acc * units + u)
    }
}

/// Base-`K` digits of `index`, most significant digit for layer 1.
pub fn path_index(index: usize, units: usize, layers: usize) -> Result<ContextPath> {
    let size = (0..layers).try_fold(1usize, |acc, _| acc.checked_mul(units)).unwrap_or(usize::MAX);
    if index >= size {
        return Err(ModelError::PathRange { index, size });
    }
    let mut digits = vec![0; layers];
    let mut rest = index;
    for slot in digits.iter_mut().rev() {
        *slot = rest % units;
        rest /= units;
    }
    Ok(ContextPath(digits))
}

const CHECKPOINT_MAGIC: &str = "caseq-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes config and parameters.
///
/// Layout: a text header `caseq-checkpoint <version>\n`, `config <n>\n`
/// followed by `n` bytes of TOML, `arrays <count>\n`, then per array a line
/// `<name> <dims joined by 'x'> <len>\n` followed by `len` little-endian f64.
pub fn save_checkpoint(config: &CaseqConfig, params: &CaseqParams) -> Vec<u8> {
    let cfg = toml::to_string(config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").as_bytes());
    out.extend_from_slice(format!("config {}\n", cfg.len()).as_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let named = params.named();
    out.extend_from_slice(format!("arrays {}\n", named.len()).as_bytes());
    for (name, t) in named {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{name} {} {}\n", dims.join("x"), t.len()).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Checkpoint("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| ModelError::Checkpoint("header is not utf-8".into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(CaseqConfig, CaseqParams)> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = cur.line()?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a caseq checkpoint".into()))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len: usize = cur
        .line()?
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing config length".into()))?;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len)?).map_err(|_| bad("config is not utf-8".into()))?;
    let config: CaseqConfig = toml::from_str(cfg_text).map_err(|e| bad(format!("config: {e}")))?;
    config.validate()?;
    let count: usize = cur
        .line()?
        .strip_prefix("arrays ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing array count".into()))?;
    let mut params = CaseqParams::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(bad(format!("expected {} arrays, found {count}", expected.len())));
    }
    let mut slots = params.tensors_mut();
    for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
        let line = cur.line()?;
        let mut parts = line.split(' ');
        let (Some(n), Some(dims), Some(len)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("malformed array header `{line}`")));
        };
        let dims: Vec<usize> = dims.split('x').filter_map(|d| d.parse().ok()).collect();
        let len: usize = len.parse().map_err(|_| bad(format!("bad length in `{line}`")))?;
        if n != name || &dims != shape || len != shape.iter().product::<usize>() {
            return Err(bad(format!("array `{n}` {dims:?} does not match expected `{name}` {shape:?}")));
        }
        let raw = cur.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        **slot = Tensor::new(dims, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok((config, params))
}
