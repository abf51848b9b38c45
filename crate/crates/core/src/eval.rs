//! Held-out evaluation: deterministic pass@1 and sampled pass@k.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{rollout, PolicyParams, RolloutMode, RolloutSettings, Trajectory};
use crate::rng;
use crate::task::{verify, TaskInstance};

/// Unbiased pass@k estimate `1 − C(n−c, k) / C(n, k)`, evaluated as a
/// running product so it stays monotone in `k`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n || c > n {
        return Err(Error::Invalid(format!("pass@k needs 1 <= k <= n and c <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// `k ∈ {1, 2, 4, ...}` up to `k_max`, always ending at `k_max`.
pub fn k_ladder(k_max: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k <= k_max)
        .collect();
    if ks.last() != Some(&k_max) {
        ks.push(k_max);
    }
    ks
}

/// Mean pass@k over prompts from their sampled-correct counts.
pub fn pass_at_k_mean(outcomes: &[PromptOutcome], n: usize, k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Invalid("no prompts".into()));
    }
    let total = outcomes.iter().map(|o| pass_at_k(n, o.sampled_correct, k)).sum::<Result<f64>>()?;
    Ok(total / outcomes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub seed: u64,
    pub difficulty: usize,
    pub deterministic_correct: bool,
    pub sampled_correct: usize,
    pub length: usize,
    pub marker_terminated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RolloutMode,
    pub sampled_mode: RolloutMode,
    pub prompts: usize,
    pub pass_at_1: f64,
    /// `(k, pass@k)` pairs from sampled rollouts; empty when `n = 0`.
    pub pass_at_k: Vec<(usize, f64)>,
    /// Mean trajectory length (latent plus explicit steps).
    pub mean_length: f64,
    pub marker_rate: f64,
    pub valid_fraction: f64,
    pub n: usize,
    pub noise_scale: f64,
    pub per_prompt: Vec<PromptOutcome>,
}

pub fn reward_of(traj: &Trajectory, task: &TaskInstance) -> f64 {
    if traj.terminated {
        verify(traj.answer(), task)
    } else {
        0.0
    }
}

/// Deterministic accuracy under `mode` (greedy or no-noise latent).
pub fn deterministic_rollouts(
    params: &PolicyParams,
    tasks: &[TaskInstance],
    mode: RolloutMode,
    settings: &RolloutSettings,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| rollout(params, &t.prompt_tokens, mode, settings, &mut rng::stream(seed, &[0xe7a1, i as u64])))
        .collect()
}

/// Stochastic counterpart of a deterministic decoding mode.
pub fn sampled_mode_for(mode: RolloutMode) -> RolloutMode {
    match mode {
        RolloutMode::ExplicitGreedy | RolloutMode::ExplicitSampled => RolloutMode::ExplicitSampled,
        _ => RolloutMode::LatentSampledInference,
    }
}

/// pass@1 through the deterministic `mode`, plus pass@k over `n` draws per
/// prompt through `sampled_mode` with the given noise scale. `n = 0`
/// skips the sampled part.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[TaskInstance],
    mode: RolloutMode,
    sampled_mode: RolloutMode,
    settings: &RolloutSettings,
    n: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one prompt".into()));
    }
    let det = deterministic_rollouts(params, tasks, mode, settings, seed)?;
    let mut sampled_settings = *settings;
    sampled_settings.perturbation.noise_scale = noise_scale;
    let counts: Vec<usize> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<usize> {
            let mut c = 0;
            for s in 0..n {
                let mut r = rng::stream(seed, &[0x5a3b, i as u64, s as u64]);
                let traj = rollout(params, &t.prompt_tokens, sampled_mode, &sampled_settings, &mut r)?;
                c += (reward_of(&traj, t) > 0.5) as usize;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;

    let per_prompt: Vec<PromptOutcome> = tasks
        .iter()
        .zip(&det)
        .zip(&counts)
        .map(|((t, traj), &c)| PromptOutcome {
            seed: t.seed,
            difficulty: t.difficulty,
            deterministic_correct: reward_of(traj, t) > 0.5,
            sampled_correct: c,
            length: traj.len(),
            marker_terminated: traj.marker_terminated(),
        })
        .collect();
    let m = tasks.len() as f64;
    let frac = |f: &dyn Fn(&PromptOutcome) -> bool| per_prompt.iter().filter(|p| f(p)).count() as f64 / m;
    let pass_at_k = if n == 0 {
        vec![]
    } else {
        k_ladder(n)
            .into_iter()
            .map(|k| Ok((k, pass_at_k_mean(&per_prompt, n, k)?)))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport {
        mode,
        sampled_mode,
        prompts: tasks.len(),
        pass_at_1: frac(&|p| p.deterministic_correct),
        pass_at_k,
        mean_length: per_prompt.iter().map(|p| p.length as f64).sum::<f64>() / m,
        marker_rate: frac(&|p| p.marker_terminated),
        valid_fraction: det.iter().filter(|t| t.terminated).count() as f64 / m,
        n,
        noise_scale,
        per_prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_examples() {
        assert_eq!(pass_at_k(1, 1, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(1, 0, 1).unwrap(), 0.0);
        assert!((pass_at_k(4, 1, 2).unwrap() - 0.5).abs() < 1e-15);
        for k in 1..=5 {
            assert_eq!(pass_at_k(5, 5, k).unwrap(), 1.0);
        }
        assert!(pass_at_k(2, 1, 3).is_err());
        assert!(pass_at_k(2, 1, 0).is_err());
    }

    #[test]
    fn estimator_matches_binomials() {
        fn binom(n: usize, k: usize) -> f64 {
            (0..k).map(|i| (n as f64 - i as f64) / (i + 1) as f64).product()
        }
        for n in 1..=12 {
            for c in 0..=n {
                let mut prev = 0.0;
                for k in 1..=n {
                    let direct = 1.0 - binom(n - c, k) / binom(n, k);
                    let est = pass_at_k(n, c, k).unwrap();
                    assert!((est - direct).abs() < 1e-12, "n={n} c={c} k={k}");
                    assert!(est >= prev);
                    prev = est;
                }
            }
        }
    }

    #[test]
    fn ladder() {
        assert_eq!(k_ladder(1), vec![1]);
        assert_eq!(k_ladder(8), vec![1, 2, 4, 8]);
        assert_eq!(k_ladder(6), vec![1, 2, 4, 6]);
    }
}
