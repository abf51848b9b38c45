//! Group-relative policy optimization over mixed latent/explicit rollouts.
//!
//! Three algorithms share this loop and differ only in a handful of
//! switches: the latent noise mode, invalid-sample masking and first-step
//! selection among correct paths.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{advantage_table, trajectory_score, AdvantageSwitches, AdvantageTable, GroupOutcome};
use crate::autodiff::{Tape, Value};
use crate::config::{RlConfig, RunConfig, Switch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, reward_of, EvalReport};
use crate::latent::NoiseMode;
use crate::policy::{
    optimizer_step, rollout, step_distributions, teacher_forced_eval, BoundPolicy, Checkpoint, ParamGrads,
    PolicyParams, RolloutMode, SgdConfig, StepOutcome, Trajectory, CHECKPOINT_FORMAT,
};
use crate::rng;
use crate::surrogate::{analytic_score, categorical_kl_value, SurrogateKind};
use crate::task::{generate_task, task_set, Split, TaskInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    LatentGrpo,
    SoftGrpo,
    ExplicitGrpo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::LatentGrpo, Algorithm::SoftGrpo, Algorithm::ExplicitGrpo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::LatentGrpo => "latent_grpo",
            Algorithm::SoftGrpo => "soft_grpo",
            Algorithm::ExplicitGrpo => "explicit_grpo",
        }
    }

    pub fn is_latent(self) -> bool {
        self != Algorithm::ExplicitGrpo
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            Error::Invalid(format!("unknown algorithm `{s}` (valid: {})", names.join(", ")))
        })
    }
}

/// Resolved algorithm behaviour after config overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub rollout_mode: RolloutMode,
    pub advantage: AdvantageSwitches,
}

impl Switches {
    pub fn resolve(alg: Algorithm, rl: &RlConfig) -> Self {
        let latent = alg == Algorithm::LatentGrpo;
        let rollout_mode = match alg {
            Algorithm::ExplicitGrpo => RolloutMode::ExplicitSampled,
            _ if rl.one_sided.resolve(latent) => RolloutMode::LatentOneSided,
            _ => RolloutMode::LatentTwoSided,
        };
        Self {
            rollout_mode,
            advantage: AdvantageSwitches {
                invalid_masking: rl.invalid_masking.resolve(latent),
                first_token_selection: rl.first_token_selection.resolve(latent),
            },
        }
    }

    pub fn eval_mode(&self) -> RolloutMode {
        match self.rollout_mode {
            RolloutMode::ExplicitSampled | RolloutMode::ExplicitGreedy => RolloutMode::ExplicitGreedy,
            _ => RolloutMode::LatentDeterministic,
        }
    }
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Per-step ratio from current and rollout-time log quantities.
pub fn step_ratio(current: f64, rollout: f64) -> f64 {
    (current - rollout).exp()
}

/// G trajectories for one prompt with frozen advantages and reference
/// distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    pub outcome: GroupOutcome,
    pub table: AdvantageTable,
    /// Reference-policy next-token distributions per trajectory and step.
    pub reference: Vec<Vec<Vec<f64>>>,
}

impl RolloutGroup {
    pub fn build(
        task: TaskInstance,
        trajectories: Vec<Trajectory>,
        switches: AdvantageSwitches,
        l_max: usize,
        reference: &PolicyParams,
    ) -> Result<Self> {
        let mut trajectories = trajectories;
        for t in &mut trajectories {
            t.reward = reward_of(t, &task);
        }
        let outcome = GroupOutcome {
            rewards: trajectories.iter().map(|t| t.reward).collect(),
            lengths: trajectories.iter().map(|t| t.len()).collect(),
            terminated: trajectories.iter().map(|t| t.terminated).collect(),
            correct: trajectories.iter().map(|t| t.reward > 0.5).collect(),
            traj_scores: trajectories
                .iter()
                .map(|t| trajectory_score(&t.step_logs))
                .collect::<Result<_>>()?,
        };
        let t_max = outcome.lengths.iter().copied().max().unwrap_or(0);
        let table = advantage_table(&outcome, l_max, t_max, switches);
        let reference = trajectories
            .par_iter()
            .map(|t| step_distributions(reference, t))
            .collect::<Result<_>>()?;
        Ok(Self { task, trajectories, outcome, table, reference })
    }

    /// Drops trajectory `j` and its rows, keeping the frozen advantages of
    /// the others.
    pub fn without(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.trajectories.len()).filter(|j| !drop.contains(j)).collect();
        let pick = |v: &Vec<f64>| keep.iter().map(|&j| v[j]).collect::<Vec<_>>();
        let mut g = self.clone();
        g.trajectories = keep.iter().map(|&j| self.trajectories[j].clone()).collect();
        g.reference = keep.iter().map(|&j| self.reference[j].clone()).collect();
        g.outcome.rewards = pick(&self.outcome.rewards);
        g.outcome.traj_scores = pick(&self.outcome.traj_scores);
        g.outcome.lengths = keep.iter().map(|&j| self.outcome.lengths[j]).collect();
        g.outcome.terminated = keep.iter().map(|&j| self.outcome.terminated[j]).collect();
        g.outcome.correct = keep.iter().map(|&j| self.outcome.correct[j]).collect();
        g.table.base = pick(&self.table.base);
        g.table.mask = keep.iter().map(|&j| self.table.mask[j].clone()).collect();
        g.table.masked = keep.iter().map(|&j| self.table.masked[j].clone()).collect();
        g
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub steps: usize,
    pub ratio_sum: f64,
    pub max_ratio: f64,
    pub clipped: usize,
    pub kl_sum: f64,
}

impl StepStats {
    fn merge(&mut self, o: &StepStats) {
        self.steps += o.steps;
        self.ratio_sum += o.ratio_sum;
        self.max_ratio = self.max_ratio.max(o.max_ratio);
        self.clipped += o.clipped;
        self.kl_sum += o.kl_sum;
    }
}

/// `(1/L) Σ_t [min(r·Ã, clip(r)·Ã) − β·KL_t]` for one trajectory, built on
/// `policy`'s tape.
pub fn trajectory_objective(
    policy: &BoundPolicy,
    traj: &Trajectory,
    advantages: &[f64],
    reference: &[Vec<f64>],
    rl: &RlConfig,
) -> Result<(Value, StepStats)> {
    let evals = teacher_forced_eval(policy, traj)?;
    if advantages.len() < evals.len() || reference.len() != evals.len() {
        return Err(Error::Misaligned(format!(
            "{} steps, {} advantages, {} reference rows",
            evals.len(),
            advantages.len(),
            reference.len()
        )));
    }
    let tape = policy.tape();
    let (lo, hi) = (1.0 - rl.clip_eps, 1.0 + rl.clip_eps);
    let mut stats = StepStats::default();
    let mut total: Option<Value> = None;
    for (t, ev) in evals.iter().enumerate() {
        let a = advantages[t];
        let ratio = ev.log_likelihood.add_scalar(-traj.step_logs[t])?.exp()?;
        let adv = tape.scalar(a, false);
        let unclipped = ratio.mul(&adv)?;
        let clipped = ratio.clip_value(lo, hi)?.mul(&adv)?;
        let mut term = unclipped.minimum(&clipped)?;
        let r = ratio.item();
        if rl.kl_coeff > 0.0 {
            let kl = categorical_kl_value(&ev.log_probs, &reference[t])?;
            stats.kl_sum += kl.item();
            term = term.sub(&kl.scale(rl.kl_coeff)?)?;
        } else {
            stats.kl_sum += crate::surrogate::categorical_kl(
                &ev.log_probs.data().iter().map(|l| l.exp()).collect::<Vec<_>>(),
                &reference[t],
            );
        }
        stats.steps += 1;
        stats.ratio_sum += r;
        stats.max_ratio = stats.max_ratio.max(r);
        stats.clipped += ((r - 1.0).abs() > rl.clip_eps) as usize;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty trajectory".into()))?;
    Ok((total.scale(1.0 / evals.len() as f64)?, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub stats: StepStats,
}

/// Negated objective averaged over groups (`1/|B|`) and over the nominal
/// group size (`1/G`), with parameter gradients. Each trajectory gets its
/// own tape; contributions are summed in batch order.
pub fn latent_grpo_loss(groups: &[RolloutGroup], params: &PolicyParams, rl: &RlConfig) -> Result<LossOutput> {
    if groups.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let weight = 1.0 / (groups.len() * rl.group_size) as f64;
    let items: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| (0..grp.trajectories.len()).map(move |j| (g, j)))
        .collect();
    let parts: Vec<(f64, ParamGrads, StepStats)> = items
        .par_iter()
        .map(|&(g, j)| -> Result<_> {
            let grp = &groups[g];
            let tape = Tape::new();
            let policy = BoundPolicy::bind(params, &tape, true)?;
            let (obj, stats) =
                trajectory_objective(&policy, &grp.trajectories[j], &grp.table.masked[j], &grp.reference[j], rl)?;
            let loss = obj.scale(-weight)?;
            let grads = loss.backward()?;
            Ok((loss.item(), policy.gradients(&grads), stats))
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::zeros_like(params);
    let mut stats = StepStats::default();
    let mut loss = 0.0;
    for (l, g, s) in &parts {
        loss += l;
        grads.add_assign(g);
        stats.merge(s);
    }
    Ok(LossOutput { loss, grads, stats })
}

/// Direct-score signs of every latent component on positive-advantage
/// trajectories, measured at `params`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignAudit {
    pub components: usize,
    pub negative_scores: usize,
    /// Components whose current log-probability exceeds its target.
    pub crossed: usize,
    /// Crossed components whose direct score is still non-negative.
    pub crossed_non_negative: usize,
}

pub fn sign_audit(groups: &[RolloutGroup], params: &PolicyParams) -> Result<SignAudit> {
    let mut audit = SignAudit::default();
    for grp in groups {
        for (j, traj) in grp.trajectories.iter().enumerate() {
            if grp.table.base[j] <= 0.0 || traj.latent_steps.is_empty() {
                continue;
            }
            let dists = step_distributions(params, traj)?;
            for (step, dist) in traj.latent_steps.iter().zip(&dists) {
                let kind = match step.record.mode {
                    NoiseMode::OneSided => SurrogateKind::OneSided,
                    _ => SurrogateKind::TwoSided,
                };
                for (&id, &g) in step.token.source.token_ids.iter().zip(&step.record.targets) {
                    let delta = g - dist[id].ln();
                    let score = analytic_score(kind, delta);
                    audit.components += 1;
                    audit.negative_scores += (score < 0.0) as usize;
                    if delta < 0.0 {
                        audit.crossed += 1;
                        audit.crossed_non_negative += (score >= 0.0) as usize;
                    }
                }
            }
        }
    }
    Ok(audit)
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub run_id: String,
    pub algorithm: Algorithm,
    pub step: u64,
    pub mean_reward: f64,
    pub valid_fraction: f64,
    /// Held-out pass@1; `None` on steps without an evaluation.
    pub pass_at_1: Option<f64>,
    /// Mean eval trajectory length (#L); `None` on steps without one.
    pub mean_length: Option<f64>,
    pub train_mean_length: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub clipped_fraction: f64,
    pub masked_first_tokens: usize,
    pub selected_paths: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub skipped_total: u64,
}

pub const MAX_CONSECUTIVE_SKIPS: u32 = 3;

pub struct Trainer {
    pub algorithm: Algorithm,
    pub cfg: RunConfig,
    pub switches: Switches,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub step: u64,
    pub consecutive_skips: u32,
    pub skipped_total: u64,
    eval_tasks: Vec<TaskInstance>,
    run_id: String,
}

impl Trainer {
    /// Starts RL from `init`; the reference policy is frozen here.
    pub fn new(algorithm: Algorithm, cfg: RunConfig, init: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        if init.config != cfg.model {
            return Err(Error::Config("initial parameters do not match [model]".into()));
        }
        let eval_tasks = eval_tasks(&cfg)?;
        Ok(Self {
            algorithm,
            switches: Switches::resolve(algorithm, &cfg.rl),
            reference: init.snapshot(),
            params: init,
            step: 0,
            consecutive_skips: 0,
            skipped_total: 0,
            eval_tasks,
            run_id: cfg.run_id(),
            cfg,
        })
    }

    pub fn checkpoint_kind(algorithm: Algorithm) -> String {
        format!("rl:{}", algorithm.name())
    }

    pub fn resume(algorithm: Algorithm, cfg: RunConfig, ck: Checkpoint) -> Result<Self> {
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the current config {}",
                ck.config_hash,
                cfg.hash()
            )));
        }
        if ck.kind != Self::checkpoint_kind(algorithm) {
            return Err(Error::Config(format!("checkpoint kind `{}` cannot resume {algorithm}", ck.kind)));
        }
        let reference = ck.reference.ok_or_else(|| Error::Invalid("checkpoint lacks the reference policy".into()))?;
        let mut t = Self::new(algorithm, cfg, reference)?;
        t.params = ck.params;
        t.step = ck.step;
        t.consecutive_skips = ck.consecutive_skips;
        t.skipped_total = ck.skipped_total;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            kind: Self::checkpoint_kind(self.algorithm),
            step: self.step,
            rng_seed: self.cfg.rl.seed,
            config_hash: self.cfg.hash(),
            params: self.params.clone(),
            reference: Some(self.reference.clone()),
            consecutive_skips: self.consecutive_skips,
            skipped_total: self.skipped_total,
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.rl.total_steps
    }

    /// Training prompts of step `step`.
    pub fn train_tasks(&self, step: u64) -> Result<Vec<TaskInstance>> {
        let [lo, hi] = self.cfg.task.train_difficulty;
        let span = (hi - lo + 1) as u64;
        (0..self.cfg.rl.batch_size as u64)
            .map(|i| {
                let idx = step * self.cfg.rl.batch_size as u64 + i;
                let seed = crate::task::split_seed(Split::Train, self.cfg.task.train_seed, idx);
                let difficulty = lo + (rng::derive_seed(seed, &[0xd1ff]) % span) as usize;
                generate_task(seed, difficulty)
            })
            .collect()
    }

    /// Rollouts from the current parameters (the θ_old snapshot).
    pub fn collect(&self, step: u64) -> Result<Vec<RolloutGroup>> {
        let tasks = self.train_tasks(step)?;
        let g = self.cfg.rl.group_size;
        let settings = self.cfg.rl.rollout_settings();
        let seed = self.cfg.rl.seed;
        let mode = self.switches.rollout_mode;
        let trajectories: Vec<Trajectory> = (0..tasks.len() * g)
            .into_par_iter()
            .map(|i| {
                let (p, m) = (i / g, i % g);
                let mut r = rng::stream(seed, &[step, p as u64, m as u64]);
                rollout(&self.params, &tasks[p].prompt_tokens, mode, &settings, &mut r)
            })
            .collect::<Result<_>>()?;
        let mut it = trajectories.into_iter();
        tasks
            .into_iter()
            .map(|task| {
                let trajs: Vec<Trajectory> = it.by_ref().take(g).collect();
                RolloutGroup::build(task, trajs, self.switches.advantage, self.cfg.rl.l_max, &self.reference)
            })
            .collect()
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let settings = self.cfg.rl.rollout_settings();
        let mode = self.switches.eval_mode();
        evaluate(&self.params, &self.eval_tasks, mode, mode, &settings, 0, 0.0, self.cfg.run.seed)
    }

    /// One RL step: rollouts, frozen advantages, `ppo_epochs` updates.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let groups = self.collect(step)?;
        let rl = self.cfg.rl.clone();
        let sgd = SgdConfig { learning_rate: rl.learning_rate, clip_norm: Some(rl.clip_norm) };

        let mut first: Option<LossOutput> = None;
        let mut skipped = false;
        let mut grad_norm = 0.0;
        for _ in 0..rl.ppo_epochs {
            let out = latent_grpo_loss(&groups, &self.params, &rl)?;
            let finite = out.loss.is_finite() && out.grads.all_finite();
            if first.is_none() {
                first = Some(out.clone());
            }
            if !finite {
                skipped = true;
                break;
            }
            let mut candidate = self.params.clone();
            match optimizer_step(&mut candidate, &out.grads, &sgd) {
                StepOutcome::Applied { grad_norm: n } if candidate.all_finite() => {
                    grad_norm = n;
                    self.params = candidate;
                }
                _ => {
                    skipped = true;
                    break;
                }
            }
        }
        if skipped {
            self.consecutive_skips += 1;
            self.skipped_total += 1;
        } else {
            self.consecutive_skips = 0;
        }
        self.step += 1;

        let first = first.expect("ppo_epochs >= 1");
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
        let n = trajs.len() as f64;
        let valid_total: usize = groups
            .iter()
            .map(|g| crate::advantage::valid_set(&g.outcome, rl.l_max).len())
            .sum();
        let steps = first.stats.steps.max(1) as f64;
        let evaluated = self.step % rl.eval_interval == 0 || self.done();
        let eval = if evaluated { Some(self.evaluate()?) } else { None };
        let metrics = StepMetrics {
            run_id: self.run_id.clone(),
            algorithm: self.algorithm,
            step: self.step,
            mean_reward: trajs.iter().map(|t| t.reward).sum::<f64>() / n,
            valid_fraction: valid_total as f64 / n,
            pass_at_1: eval.as_ref().map(|e| e.pass_at_1),
            mean_length: eval.as_ref().map(|e| e.mean_length),
            train_mean_length: trajs.iter().map(|t| t.len() as f64).sum::<f64>() / n,
            mean_kl: first.stats.kl_sum / steps,
            mean_ratio: first.stats.ratio_sum / steps,
            max_ratio: first.stats.max_ratio,
            clipped_fraction: first.stats.clipped as f64 / steps,
            masked_first_tokens: groups.iter().map(|g| g.table.masked_first_tokens()).sum(),
            selected_paths: groups.iter().filter(|g| g.table.selected_path.is_some()).count(),
            loss: first.loss,
            grad_norm,
            skipped,
            skipped_total: self.skipped_total,
        };
        if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::Aborted(format!(
                "{MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps ending at step {} (last loss {})",
                self.step, first.loss
            )));
        }
        Ok(metrics)
    }
}

/// Sweep variants: the three algorithms plus single-switch ablations of
/// latent_grpo.
pub const VARIANTS: [&str; 6] = ["latent_grpo", "soft_grpo", "explicit_grpo", "no_one_sided", "no_selection", "no_masking"];

pub fn variant_config(base: &RunConfig, variant: &str) -> Result<(Algorithm, RunConfig)> {
    let mut cfg = base.clone();
    let alg = match variant {
        "latent_grpo" | "soft_grpo" | "explicit_grpo" => variant.parse()?,
        "no_one_sided" => {
            cfg.rl.one_sided = Switch::Off;
            Algorithm::LatentGrpo
        }
        "no_selection" => {
            cfg.rl.first_token_selection = Switch::Off;
            Algorithm::LatentGrpo
        }
        "no_masking" => {
            cfg.rl.invalid_masking = Switch::Off;
            Algorithm::LatentGrpo
        }
        other => {
            return Err(Error::Invalid(format!("unknown variant `{other}` (valid: {})", VARIANTS.join(", "))));
        }
    };
    Ok((alg, cfg))
}

/// Held-out RL evaluation prompts.
pub fn eval_tasks(cfg: &RunConfig) -> Result<Vec<TaskInstance>> {
    let [lo, hi] = cfg.task.eval_difficulty;
    task_set(Split::Eval, cfg.eval.prompts, (lo, hi), cfg.task.eval_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipped_term_examples() {
        assert_eq!(clipped_term(1.0, 0.5, 0.2), 0.5);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(step_ratio(-0.7, -0.7), 1.0);
        assert!((step_ratio(-1.0, -1.5) - 1.6487).abs() < 1e-4);
        assert_eq!(step_ratio(-5.0, -5.0), 1.0);
    }

    #[test]
    fn algorithm_names() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        let err = "ppo".parse::<Algorithm>().unwrap_err().to_string();
        assert!(err.contains("latent_grpo") && err.contains("explicit_grpo"));
    }

    #[test]
    fn switch_resolution() {
        let rl = RlConfig::default();
        let l = Switches::resolve(Algorithm::LatentGrpo, &rl);
        assert_eq!(l.rollout_mode, RolloutMode::LatentOneSided);
        assert!(l.advantage.invalid_masking && l.advantage.first_token_selection);
        let s = Switches::resolve(Algorithm::SoftGrpo, &rl);
        assert_eq!(s.rollout_mode, RolloutMode::LatentTwoSided);
        assert!(!s.advantage.invalid_masking && !s.advantage.first_token_selection);
        assert_eq!(Switches::resolve(Algorithm::ExplicitGrpo, &rl).rollout_mode, RolloutMode::ExplicitSampled);
        let forced = RlConfig {
            one_sided: crate::config::Switch::Off,
            invalid_masking: crate::config::Switch::Off,
            first_token_selection: crate::config::Switch::Off,
            ..rl
        };
        assert_eq!(Switches::resolve(Algorithm::LatentGrpo, &forced), s);
    }
}
