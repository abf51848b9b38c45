//! Group-relative advantages with invalid-sample masking and first-step
//! selection among correct paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rewards and status flags of one rollout group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub rewards: Vec<f64>,
    pub lengths: Vec<usize>,
    pub terminated: Vec<bool>,
    pub correct: Vec<bool>,
    pub traj_scores: Vec<f64>,
}

impl GroupOutcome {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn correct_set(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.correct[j]).collect()
    }
}

/// Below this the group spread counts as zero.
pub const SIGMA_EPS: f64 = 1e-8;

/// Trajectories that stopped before reaching `l_max`.
pub fn valid_set(outcome: &GroupOutcome, l_max: usize) -> Vec<usize> {
    (0..outcome.len())
        .filter(|&j| outcome.terminated[j] && outcome.lengths[j] < l_max)
        .collect()
}

/// Population mean and standard deviation of `rewards` over `members`.
pub fn group_stats(rewards: &[f64], members: &[usize]) -> (f64, f64) {
    if members.is_empty() {
        return (0.0, 0.0);
    }
    let n = members.len() as f64;
    let mean = members.iter().map(|&j| rewards[j]).sum::<f64>() / n;
    let var = members.iter().map(|&j| (rewards[j] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_j − μ_R) / σ_R` with statistics over `members`; zero elsewhere and
/// everywhere when the member set is empty or has no spread.
pub fn normalized_advantages(rewards: &[f64], members: &[usize]) -> (Vec<f64>, f64, f64) {
    let (mean, std) = group_stats(rewards, members);
    let mut out = vec![0.0; rewards.len()];
    if !members.is_empty() && std >= SIGMA_EPS {
        for &j in members {
            out[j] = (rewards[j] - mean) / std;
        }
    }
    (out, mean, std)
}

pub fn masked_group_advantages(outcome: &GroupOutcome, valid: &[usize]) -> Vec<f64> {
    normalized_advantages(&outcome.rewards, valid).0
}

/// Mean of per-step rollout log-likelihoods.
pub fn trajectory_score(step_logs: &[f64]) -> Result<f64> {
    if step_logs.is_empty() {
        return Err(Error::Invalid("trajectory score of an empty trajectory".into()));
    }
    Ok(step_logs.iter().sum::<f64>() / step_logs.len() as f64)
}

/// Highest-scoring correct trajectory (lowest index on ties); `None` when
/// fewer than two trajectories are correct.
pub fn select_optimal_path(correct: &[usize], scores: &[f64]) -> Option<usize> {
    if correct.len() <= 1 {
        return None;
    }
    let mut best = correct[0];
    for &j in &correct[1..] {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    Some(best)
}

/// `M[j][0] = 0` for every correct trajectory other than `selected`.
pub fn first_token_mask(g: usize, t_max: usize, correct: &[usize], selected: Option<usize>) -> Vec<Vec<f64>> {
    let mut mask = vec![vec![1.0; t_max]; g];
    if let Some(best) = selected {
        debug_assert!(correct.contains(&best));
        for &j in correct {
            if j != best && t_max > 0 {
                mask[j][0] = 0.0;
            }
        }
    }
    mask
}

pub fn masked_advantage(base: &[f64], mask: &[Vec<f64>]) -> Vec<Vec<f64>> {
    base.iter().zip(mask).map(|(&a, row)| row.iter().map(|m| m * a).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub base: Vec<f64>,
    pub mask: Vec<Vec<f64>>,
    pub masked: Vec<Vec<f64>>,
    pub selected_path: Option<usize>,
    pub group_mean: f64,
    pub group_std: f64,
    pub valid: Vec<usize>,
}

impl AdvantageTable {
    pub fn masked_first_tokens(&self) -> usize {
        self.mask.iter().filter(|row| row.first() == Some(&0.0)).count()
    }
}

/// Which of the advantage-side switches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvantageSwitches {
    pub invalid_masking: bool,
    pub first_token_selection: bool,
}

/// Builds the full table for one group. Without invalid masking the
/// statistics run over every trajectory, as in plain GRPO.
pub fn advantage_table(outcome: &GroupOutcome, l_max: usize, t_max: usize, sw: AdvantageSwitches) -> AdvantageTable {
    let valid = if sw.invalid_masking {
        valid_set(outcome, l_max)
    } else {
        (0..outcome.len()).collect()
    };
    let (base, group_mean, group_std) = normalized_advantages(&outcome.rewards, &valid);
    let correct = outcome.correct_set();
    let selected_path = if sw.first_token_selection {
        select_optimal_path(&correct, &outcome.traj_scores)
    } else {
        None
    };
    let mask = first_token_mask(outcome.len(), t_max, &correct, selected_path);
    let masked = masked_advantage(&base, &mask);
    AdvantageTable { base, mask, masked, selected_path, group_mean, group_std, valid }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(rewards: &[f64], terminated: &[bool], lengths: &[usize]) -> GroupOutcome {
        GroupOutcome {
            rewards: rewards.to_vec(),
            lengths: lengths.to_vec(),
            terminated: terminated.to_vec(),
            correct: rewards.iter().map(|&r| r > 0.5).collect(),
            traj_scores: vec![0.0; rewards.len()],
        }
    }

    #[test]
    fn valid_set_examples() {
        let o = outcome(&[1.0, 0.0], &[true, true], &[3, 4]);
        assert_eq!(valid_set(&o, 8), vec![0, 1]);
        let o = outcome(&[1.0, 0.0], &[true, false], &[3, 8]);
        assert_eq!(valid_set(&o, 8), vec![0]);
        assert!(valid_set(&GroupOutcome::default(), 8).is_empty());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(normalized_advantages(&[1.0, 0.0], &[0, 1]).0, vec![1.0, -1.0]);
        assert_eq!(normalized_advantages(&[1.0, 1.0, 1.0], &[0, 1, 2]).0, vec![0.0; 3]);
        let a = normalized_advantages(&[1.0, 1.0, 0.0, 0.0], &[0, 1, 2]).0;
        let expect = [0.5f64.sqrt(), 0.5f64.sqrt(), -(2f64.sqrt()), 0.0];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12, "{a:?}");
        }
        assert_eq!(normalized_advantages(&[1.0, 0.0], &[0]).0, vec![0.0, 0.0]);
    }

    #[test]
    fn score_examples() {
        assert_eq!(trajectory_score(&[-0.5]).unwrap(), -0.5);
        assert_eq!(trajectory_score(&[-1.0, -2.0]).unwrap(), -1.5);
        assert_eq!(trajectory_score(&[-2.0, -1.0]).unwrap(), -1.5);
        assert!(trajectory_score(&[]).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_optimal_path(&[1], &[0.0, 5.0, 0.0]), None);
        assert_eq!(select_optimal_path(&[0, 1], &[-1.2, -0.8]), Some(1));
        assert_eq!(select_optimal_path(&[0, 2], &[-1.0, 9.0, -1.0]), Some(0));
    }

    #[test]
    fn mask_examples() {
        assert!(first_token_mask(3, 4, &[], None).iter().flatten().all(|&m| m == 1.0));
        let m = first_token_mask(3, 2, &[0, 2], Some(2));
        assert_eq!(m, vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let m = first_token_mask(4, 3, &[0, 1, 2, 3], Some(0));
        let zeros: Vec<(usize, usize)> = (0..4)
            .flat_map(|j| (0..3).map(move |t| (j, t)))
            .filter(|&(j, t)| m[j][t] == 0.0)
            .collect();
        assert_eq!(zeros, vec![(1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn masked_advantage_examples() {
        let ones = vec![vec![1.0; 3]; 2];
        assert_eq!(masked_advantage(&[0.5, -0.5], &ones), vec![vec![0.5; 3], vec![-0.5; 3]]);
        let mask = vec![vec![0.0, 1.0, 1.0], vec![1.0; 3]];
        assert_eq!(
            masked_advantage(&[1.0, -1.0], &mask),
            vec![vec![0.0, 1.0, 1.0], vec![-1.0; 3]]
        );
        assert_eq!(masked_advantage(&[0.0], &[vec![0.0, 1.0]]), vec![vec![0.0, 0.0]]);
    }
}
