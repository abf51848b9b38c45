//! Tiny autoregressive policy: token embeddings, a stack of GRU mixers and
//! an untied output head.
//!
//! Rollouts and teacher-forced replay share [`BoundPolicy::step`] and
//! [`step_quantities`], so replaying a trajectory at the rollout parameters
//! reproduces every rollout-time log quantity bit for bit.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients, Tape, Value};
use crate::error::{Error, Result};
use crate::latent::{
    make_perturbation_record, mix_embeddings, LatentToken, NoiseMode, PerturbationConfig,
    PerturbationRecord, TopKSlice,
};
use crate::rng::{self, Rng};
use crate::surrogate::latent_log_likelihood;
use crate::task::{extract_answer, vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 32, d_model: 32, layers: 2, init_scale: 1.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < vocab::MIN_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} is below the {} reserved tokens",
                self.vocab_size,
                vocab::MIN_SIZE
            )));
        }
        if self.d_model == 0 || self.layers == 0 {
            return Err(Error::Config("d_model and layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Per-layer GRU tensors, in storage order.
const GRU_TENSORS: [&str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub tensors: Vec<NamedArray>,
    pub version: u64,
}

impl PolicyParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let mut r = rng::stream(config.seed, &[0x1417]);
        let mut uniform = |shape: Vec<usize>, bound: f64, name: String| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
            NamedArray { name, shape, data }
        };
        let s = config.init_scale;
        let w = s / (d as f64).sqrt();
        let mut tensors = vec![uniform(vec![v, d], s * 3f64.sqrt() * 0.5, "embed".into())];
        for l in 0..config.layers {
            for (i, name) in GRU_TENSORS.iter().enumerate() {
                let shape = if i < 6 { vec![d, d] } else { vec![d] };
                let bound = if i < 6 { w } else { 0.0 };
                tensors.push(uniform(shape, bound, format!("gru{l}.{name}")));
            }
        }
        tensors.push(uniform(vec![d, v], w, "head.w".into()));
        tensors.push(uniform(vec![v], 0.0, "head.b".into()));
        Ok(Self { config: config.clone(), tensors, version: 0 })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedArray> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut NamedArray> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn embedding_table(&self) -> Array {
        let t = &self.tensors[0];
        Array { shape: t.shape.clone(), data: t.data.clone() }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Deep copy, used for the rollout and reference policies.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// Sets the output head to zero, which makes every next-token
    /// distribution uniform.
    pub fn zero_head(&mut self) {
        for name in ["head.w", "head.b"] {
            if let Some(t) = self.tensor_mut(name) {
                t.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Gradient buffers aligned with [`PolicyParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self(params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

struct GruLayer {
    w: [Value; 3],
    u: [Value; 3],
    b: [Value; 3],
}

/// Parameters recorded as leaves on a tape.
pub struct BoundPolicy {
    tape: Tape,
    leaves: Vec<Value>,
    embed: Value,
    layers: Vec<GruLayer>,
    head_w: Value,
    head_b: Value,
    embed_table: Array,
    d: usize,
    v: usize,
}

impl BoundPolicy {
    pub fn bind(params: &PolicyParams, tape: &Tape, requires_grad: bool) -> Result<Self> {
        let cfg = &params.config;
        let expected = 3 + 9 * cfg.layers;
        if params.tensors.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} tensors, found {}",
                params.tensors.len()
            )));
        }
        let leaves: Vec<Value> = params
            .tensors
            .iter()
            .map(|t| Array::new(t.shape.clone(), t.data.clone()).map(|a| tape.leaf(a, requires_grad)))
            .collect::<Result<_>>()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let base = 1 + 9 * l;
                let g = |i: usize| leaves[base + i].clone();
                GruLayer { w: [g(0), g(1), g(2)], u: [g(3), g(4), g(5)], b: [g(6), g(7), g(8)] }
            })
            .collect();
        Ok(Self {
            tape: tape.clone(),
            embed: leaves[0].clone(),
            head_w: leaves[expected - 2].clone(),
            head_b: leaves[expected - 1].clone(),
            leaves,
            layers,
            embed_table: params.embedding_table(),
            d: cfg.d_model,
            v: cfg.vocab_size,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn embedding_table(&self) -> &Array {
        &self.embed_table
    }

    pub fn embed_leaf(&self) -> &Value {
        &self.embed
    }

    pub fn initial_state(&self) -> Vec<Value> {
        (0..self.layers.len()).map(|_| self.tape.vector(vec![0.0; self.d], false)).collect()
    }

    pub fn token_input(&self, token: usize) -> Result<Value> {
        if token >= self.v {
            return Err(Error::Invalid(format!("token {token} outside vocabulary of {}", self.v)));
        }
        self.embed.row(token)
    }

    /// A frozen input vector (recorded latent embeddings).
    pub fn vector_input(&self, x: &[f64]) -> Result<Value> {
        if x.len() != self.d {
            return Err(Error::Shape(format!("input of width {} vs d_model {}", x.len(), self.d)));
        }
        Ok(self.tape.vector(x.to_vec(), false))
    }

    /// One causal step: new per-layer state and next-token logits.
    pub fn step(&self, state: &[Value], input: &Value) -> Result<(Vec<Value>, Value)> {
        let mut x = input.clone();
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, h) in self.layers.iter().zip(state) {
            let gate = |i: usize| -> Result<Value> { x.matmul(&layer.w[i])?.add(&h.matmul(&layer.u[i])?)?.add(&layer.b[i]) };
            let z = gate(0)?.sigmoid()?;
            let r = gate(1)?.sigmoid()?;
            let n = x
                .matmul(&layer.w[2])?
                .add(&r.mul(&h.matmul(&layer.u[2])?)?)?
                .add(&layer.b[2])?
                .tanh()?;
            let h_new = n.add(&z.mul(&h.sub(&n)?)?)?;
            x = h_new.clone();
            next.push(h_new);
        }
        let logits = x.matmul(&self.head_w)?.add(&self.head_b)?;
        Ok((next, logits))
    }

    /// Runs the prefix and returns the logits for the next position.
    pub fn run(&self, inputs: &[Value]) -> Result<(Vec<Value>, Value)> {
        let mut state = self.initial_state();
        let mut logits = None;
        for x in inputs {
            let (s, l) = self.step(&state, x)?;
            state = s;
            logits = Some(l);
        }
        logits
            .map(|l| (state, l))
            .ok_or_else(|| Error::Invalid("empty prefix".into()))
    }

    /// Gradients for every parameter tensor, in storage order.
    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        ParamGrads(
            self.leaves
                .iter()
                .map(|l| grads.wrt(l).unwrap_or_else(|| vec![0.0; l.len()]))
                .collect(),
        )
    }
}

/// Next-token logits after `prefix` (token or latent embeddings).
pub fn forward(params: &PolicyParams, prefix: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::Invalid("forward needs a non-empty prefix".into()));
    }
    let tape = Tape::new();
    let bound = BoundPolicy::bind(params, &tape, false)?;
    let inputs = prefix.iter().map(|x| bound.vector_input(x)).collect::<Result<Vec<_>>>()?;
    Ok(bound.run(&inputs)?.1.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    LatentDeterministic,
    LatentOneSided,
    LatentTwoSided,
    LatentSampledInference,
    ExplicitSampled,
    ExplicitGreedy,
}

impl RolloutMode {
    pub fn noise(self) -> Option<NoiseMode> {
        match self {
            RolloutMode::LatentDeterministic => Some(NoiseMode::None),
            RolloutMode::LatentOneSided => Some(NoiseMode::OneSided),
            RolloutMode::LatentTwoSided | RolloutMode::LatentSampledInference => Some(NoiseMode::TwoSided),
            RolloutMode::ExplicitSampled | RolloutMode::ExplicitGreedy => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub top_k: usize,
    pub t_lat_max: usize,
    pub l_max: usize,
    pub perturbation: PerturbationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStep {
    pub token: LatentToken,
    pub record: PerturbationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub latent_steps: Vec<LatentStep>,
    pub explicit_steps: Vec<usize>,
    pub terminated: bool,
    pub reward: f64,
    /// Per-step log quantity at the rollout parameters: the latent
    /// surrogate on latent steps, the token log-probability on explicit ones.
    pub step_logs: Vec<f64>,
}

impl Trajectory {
    pub fn t_lat(&self) -> usize {
        self.latent_steps.len()
    }

    pub fn t_exp(&self) -> usize {
        self.explicit_steps.len()
    }

    pub fn len(&self) -> usize {
        self.t_lat() + self.t_exp()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn answer(&self) -> &[usize] {
        extract_answer(&self.explicit_steps)
    }

    /// `true` when the latent phase was closed by the end-of-latent marker.
    pub fn marker_terminated(&self) -> bool {
        self.explicit_steps.first() == Some(&vocab::MARK)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Per-step log quantity from next-token logits: the latent surrogate over
/// `record` when given, otherwise the log-probability of `token`.
pub fn step_quantities(logits: &Value, step: StepRef<'_>) -> Result<(Value, Value)> {
    let log_probs = logits.log_softmax()?;
    let q = match step {
        StepRef::Latent { token_ids, record } => {
            let sel = log_probs.select(token_ids)?;
            latent_log_likelihood(record, &sel)?
        }
        StepRef::Explicit(token) => log_probs.select(&[token])?.sum()?,
    };
    Ok((log_probs, q))
}

#[derive(Clone, Copy)]
pub enum StepRef<'a> {
    Latent { token_ids: &'a [usize], record: &'a PerturbationRecord },
    Explicit(usize),
}

pub fn rollout(
    params: &PolicyParams,
    prompt: &[usize],
    mode: RolloutMode,
    settings: &RolloutSettings,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if prompt.is_empty() {
        return Err(Error::Invalid("rollout needs a non-empty prompt".into()));
    }
    if settings.l_max == 0 {
        return Err(Error::Invalid("l_max must be positive".into()));
    }
    let tape = Tape::new();
    let policy = BoundPolicy::bind(params, &tape, false)?;
    let inputs = prompt.iter().map(|&t| policy.token_input(t)).collect::<Result<Vec<_>>>()?;
    let (mut state, mut logits) = policy.run(&inputs)?;

    let noise = mode.noise();
    let t_lat_max = if noise.is_some() { settings.t_lat_max } else { 0 };
    let mut traj = Trajectory {
        prompt: prompt.to_vec(),
        latent_steps: vec![],
        explicit_steps: vec![],
        terminated: false,
        reward: 0.0,
        step_logs: vec![],
    };
    let mut latent_phase = t_lat_max > 0;
    while traj.len() < settings.l_max {
        let lp_now = logits.log_softmax()?.data();
        if latent_phase && (traj.t_lat() >= t_lat_max || argmax(&lp_now) == vocab::MARK) {
            latent_phase = false;
        }
        let input = if latent_phase {
            let probs: Vec<f64> = lp_now.iter().map(|l| l.exp()).collect();
            let source = TopKSlice::select(&probs, settings.top_k, &[vocab::MARK])?;
            let rollout_lp: Vec<f64> = source.token_ids.iter().map(|&i| lp_now[i]).collect();
            let record = make_perturbation_record(
                &rollout_lp,
                noise.expect("latent phase implies a latent mode"),
                &settings.perturbation,
                rng,
            )?;
            let weights = record.mixture_weights()?;
            let embedding = mix_embeddings(policy.embedding_table(), &source.token_ids, &weights)?;
            let (_, q) = step_quantities(
                &logits,
                StepRef::Latent { token_ids: &source.token_ids, record: &record },
            )?;
            traj.step_logs.push(q.item());
            let input = policy.vector_input(&embedding)?;
            traj.latent_steps.push(LatentStep {
                token: LatentToken { embedding, weights, source },
                record,
            });
            input
        } else {
            let token = match mode {
                RolloutMode::ExplicitSampled => {
                    let probs: Vec<f64> = lp_now.iter().map(|l| l.exp()).collect();
                    sample_categorical(&probs, rng)
                }
                _ => argmax(&lp_now),
            };
            let (_, q) = step_quantities(&logits, StepRef::Explicit(token))?;
            traj.step_logs.push(q.item());
            traj.explicit_steps.push(token);
            if token == vocab::EOS {
                traj.terminated = true;
                break;
            }
            policy.token_input(token)?
        };
        if traj.len() >= settings.l_max {
            break;
        }
        let (s, l) = policy.step(&state, &input)?;
        state = s;
        logits = l;
    }
    Ok(traj)
}

/// Current-policy quantities for one recorded step.
pub struct StepEval {
    /// Full-vocabulary log-probabilities (for the KL penalty).
    pub log_probs: Value,
    /// Latent surrogate or explicit token log-probability.
    pub log_likelihood: Value,
    pub latent: bool,
}

/// Replays `traj` under `policy`. Recorded latent embeddings enter as
/// constants, so gradients reach the parameters only through the current
/// step log-probabilities and the token embeddings.
pub fn teacher_forced_eval(policy: &BoundPolicy, traj: &Trajectory) -> Result<Vec<StepEval>> {
    if traj.step_logs.len() != traj.len() {
        return Err(Error::Misaligned(format!(
            "{} step logs for {} steps",
            traj.step_logs.len(),
            traj.len()
        )));
    }
    for (i, s) in traj.latent_steps.iter().enumerate() {
        let ids = &s.token.source.token_ids;
        if ids.len() != s.record.len() || s.token.weights.len() != ids.len() {
            return Err(Error::Misaligned(format!("latent step {i}: top-K and record lengths differ")));
        }
        if ids.iter().any(|&t| t >= policy.vocab_size()) {
            return Err(Error::Misaligned(format!("latent step {i}: token id outside vocabulary")));
        }
    }
    let inputs = traj.prompt.iter().map(|&t| policy.token_input(t)).collect::<Result<Vec<_>>>()?;
    let (mut state, mut logits) = policy.run(&inputs)?;
    let mut out = Vec::with_capacity(traj.len());
    let total = traj.len();
    for (t, s) in traj.latent_steps.iter().enumerate() {
        let (log_probs, q) = step_quantities(
            &logits,
            StepRef::Latent { token_ids: &s.token.source.token_ids, record: &s.record },
        )?;
        out.push(StepEval { log_probs, log_likelihood: q, latent: true });
        if t + 1 < total {
            let (st, l) = policy.step(&state, &policy.vector_input(&s.token.embedding)?)?;
            state = st;
            logits = l;
        }
    }
    for (i, &tok) in traj.explicit_steps.iter().enumerate() {
        let (log_probs, q) = step_quantities(&logits, StepRef::Explicit(tok))?;
        out.push(StepEval { log_probs, log_likelihood: q, latent: false });
        if traj.t_lat() + i + 1 < total {
            let (st, l) = policy.step(&state, &policy.token_input(tok)?)?;
            state = st;
            logits = l;
        }
    }
    Ok(out)
}

/// Full next-token distributions at every step of `traj` under `params`.
pub fn step_distributions(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let policy = BoundPolicy::bind(params, &tape, false)?;
    Ok(teacher_forced_eval(&policy, traj)?
        .into_iter()
        .map(|s| s.log_probs.data().into_iter().map(f64::exp).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Skipped,
}

/// Plain SGD with optional global-norm clipping. Non-finite gradients leave
/// the parameters untouched.
pub fn optimizer_step(params: &mut PolicyParams, grads: &ParamGrads, cfg: &SgdConfig) -> StepOutcome {
    if !grads.all_finite() {
        return StepOutcome::Skipped;
    }
    let norm = grads.norm();
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (t, g) in params.tensors.iter_mut().zip(&grads.0) {
        for (p, gv) in t.data.iter_mut().zip(g) {
            *p -= cfg.learning_rate * scale * gv;
        }
    }
    params.version += 1;
    StepOutcome::Applied { grad_norm: norm }
}

/// Adam, used for the supervised warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &PolicyParams, learning_rate: f64, clip_norm: Option<f64>) -> Self {
        let z = ParamGrads::zeros_like(params).0;
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, m: z.clone(), v: z, t: 0 }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &ParamGrads) -> StepOutcome {
        if !grads.all_finite() {
            return StepOutcome::Skipped;
        }
        let norm = grads.norm();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, g), (m, v)) in params.tensors.iter_mut().zip(&grads.0).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                t.data[i] -= self.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        params.version += 1;
        StepOutcome::Applied { grad_norm: norm }
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Plain-text (JSON) checkpoint with shape-tagged parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    /// Every random stream derives from this seed and the step counter.
    pub rng_seed: u64,
    pub config_hash: String,
    pub params: PolicyParams,
    pub reference: Option<PolicyParams>,
    pub consecutive_skips: u32,
    pub skipped_total: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ck.format_version
            )));
        }
        for t in ck.params.tensors.iter().chain(ck.reference.iter().flat_map(|r| r.tensors.iter())) {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {} does not match its shape {:?}", t.name, t.shape)));
            }
        }
        Ok(ck)
    }
}
