//! Supervised warmup that gives the policy a usable latent phase before RL.
//!
//! Stage 1 is next-token cross-entropy on explicit chains. Stage 2 replaces
//! each chain position by a latent token built from the model's own top-K
//! distribution at that position; cross-entropy then applies to the marker,
//! answer and EOS, plus a weighted chain-token term at latent positions.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::latent::{make_perturbation_record, mix_embeddings, PerturbationConfig, TopKSlice};
use crate::policy::{Adam, BoundPolicy, ParamGrads, PolicyParams, RolloutMode, RolloutSettings, StepOutcome};
use crate::rng;
use crate::task::{task_set, vocab, Split, TaskInstance, WarmupExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Explicit,
    Latent,
}

fn cross_entropy(logits: &Value, target: usize) -> Result<Value> {
    logits.log_softmax()?.select(&[target])?.sum()?.neg()
}

/// Mean per-token loss of one example and its parameter gradients.
pub fn example_loss(
    params: &PolicyParams,
    ex: &WarmupExample,
    stage: Stage,
    cfg: &RunConfig,
    rng_tags: &[u64],
) -> Result<(f64, ParamGrads)> {
    let tape = Tape::new();
    let policy = BoundPolicy::bind(params, &tape, true)?;
    let inputs = ex
        .instance
        .prompt_tokens
        .iter()
        .map(|&t| policy.token_input(t))
        .collect::<Result<Vec<_>>>()?;
    let (mut state, mut logits) = policy.run(&inputs)?;
    let mut terms: Vec<Value> = vec![];
    let mut explicit_targets = ex.response();

    if stage == Stage::Latent {
        let mut r = rng::stream(cfg.warmup.seed, rng_tags);
        let pert = PerturbationConfig {
            noise_scale: cfg.warmup.latent_noise_scale,
            ..cfg.rl.perturbation()
        };
        for &chain_tok in &ex.chain {
            let lp = logits.log_softmax()?;
            if cfg.warmup.latent_aux_weight > 0.0 {
                let ce = lp.select(&[chain_tok])?.sum()?.neg()?;
                terms.push(ce.scale(cfg.warmup.latent_aux_weight)?);
            }
            let lp_data = lp.data();
            let probs: Vec<f64> = lp_data.iter().map(|l| l.exp()).collect();
            let slice = TopKSlice::select(&probs, cfg.rl.top_k, &[vocab::MARK])?;
            let rollout_lp: Vec<f64> = slice.token_ids.iter().map(|&i| lp_data[i]).collect();
            let rec = make_perturbation_record(&rollout_lp, cfg.warmup.latent_noise, &pert, &mut r)?;
            let emb = mix_embeddings(policy.embedding_table(), &slice.token_ids, &rec.mixture_weights()?)?;
            let (s, l) = policy.step(&state, &policy.vector_input(&emb)?)?;
            state = s;
            logits = l;
        }
        explicit_targets.drain(..ex.chain.len());
    }

    let n = explicit_targets.len();
    for (i, &tok) in explicit_targets.iter().enumerate() {
        terms.push(cross_entropy(&logits, tok)?);
        if i + 1 < n {
            let (s, l) = policy.step(&state, &policy.token_input(tok)?)?;
            state = s;
            logits = l;
        }
    }
    let count = terms.len() as f64;
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    let loss = total.scale(1.0 / count)?;
    let grads = loss.backward()?;
    Ok((loss.item(), policy.gradients(&grads)))
}

/// One pass over `corpus` in a seeded shuffled order. Returns the mean loss.
pub fn run_epoch(
    params: &mut PolicyParams,
    opt: &mut Adam,
    corpus: &[WarmupExample],
    stage: Stage,
    cfg: &RunConfig,
    epoch: u64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(cfg.warmup.seed, &[0x5ff1, stage as u64, epoch]));
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.warmup.batch_size) {
        let snapshot = &*params;
        let results: Vec<(f64, ParamGrads)> = batch
            .par_iter()
            .map(|&i| example_loss(snapshot, &corpus[i], stage, cfg, &[stage as u64, epoch, i as u64]))
            .collect::<Result<_>>()?;
        let mut grads = ParamGrads::zeros_like(params);
        for (l, g) in &results {
            loss_sum += l;
            grads.add_assign(g);
        }
        grads.scale(1.0 / batch.len() as f64);
        if opt.step(params, &grads) == StepOutcome::Skipped {
            return Err(Error::Aborted("non-finite warmup gradient".into()));
        }
    }
    Ok(loss_sum / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Explicit greedy pass@1 on the gate prompts after stage 1.
    pub stage1_explicit_pass_at_1: f64,
    /// Latent deterministic pass@1 on the difficulty-1 gate prompts.
    pub pass_at_1: f64,
    pub marker_rate: f64,
    pub mean_length: f64,
    pub passed: bool,
}

impl WarmupReport {
    pub fn summary(&self, cfg: &RunConfig) -> String {
        format!(
            "latent pass@1 {:.3} (gate {:.2}), marker rate {:.3} (gate {:.2}), stage-1 explicit pass@1 {:.3}",
            self.pass_at_1, cfg.warmup.gate_pass_at_1, self.marker_rate, cfg.warmup.gate_marker_rate, self.stage1_explicit_pass_at_1
        )
    }
}

/// Held-out difficulty-1 prompts used by the warmup gate.
pub fn gate_tasks(cfg: &RunConfig) -> Result<Vec<TaskInstance>> {
    task_set(Split::Eval, cfg.warmup.gate_prompts.max(1), (1, 1), cfg.task.eval_seed)
}

pub fn gate_eval(params: &PolicyParams, cfg: &RunConfig, mode: RolloutMode) -> Result<EvalReport> {
    let settings: RolloutSettings = cfg.rl.rollout_settings();
    evaluate(params, &gate_tasks(cfg)?, mode, mode, &settings, 0, 0.0, cfg.run.seed)
}

/// Runs both stages from a fresh initialization. The report says whether
/// the gate passed; the caller decides what a failure means.
pub fn warmup(cfg: &RunConfig, corpus: &[WarmupExample]) -> Result<(PolicyParams, WarmupReport)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("warmup corpus is empty".into()));
    }
    cfg.validate()?;
    let mut params = PolicyParams::init(&cfg.model)?;
    let mut opt = Adam::new(&params, cfg.warmup.learning_rate, Some(1.0));
    let mut stage1_losses = vec![];
    for e in 0..cfg.warmup.stage1_epochs {
        stage1_losses.push(run_epoch(&mut params, &mut opt, corpus, Stage::Explicit, cfg, e as u64)?);
    }
    let explicit = gate_eval(&params, cfg, RolloutMode::ExplicitGreedy)?;
    let mut stage2_losses = vec![];
    for e in 0..cfg.warmup.stage2_epochs {
        stage2_losses.push(run_epoch(&mut params, &mut opt, corpus, Stage::Latent, cfg, e as u64)?);
    }
    let latent = gate_eval(&params, cfg, RolloutMode::LatentDeterministic)?;
    let passed = latent.pass_at_1 >= cfg.warmup.gate_pass_at_1 && latent.marker_rate >= cfg.warmup.gate_marker_rate;
    Ok((
        params,
        WarmupReport {
            stage1_losses,
            stage2_losses,
            stage1_explicit_pass_at_1: explicit.pass_at_1,
            pass_at_1: latent.pass_at_1,
            marker_rate: latent.marker_rate,
            mean_length: latent.mean_length,
            passed,
        },
    ))
}
