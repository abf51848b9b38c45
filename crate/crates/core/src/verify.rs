//! Randomized gradient-identity suite over latent surrogate steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::NoiseMode;
use crate::rng;
use crate::surrogate::{analytic_score, gradient_report_with, random_instance, SurrogateKind};

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Drops the gradient flip on crossed one-sided margins.
    MissingFlip,
}

fn missing_flip(_: SurrogateKind, delta: f64) -> f64 {
    1.0 - (-delta).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub trial: usize,
    pub kind: SurrogateKind,
    pub identity: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub trials: usize,
    pub seed: u64,
    pub reports: usize,
    pub max_rel_error: f64,
    pub failures: Vec<Failure>,
    /// One-sided scores that are negative, or zero at a non-zero margin.
    pub alignment_violations: usize,
    /// Instances with a crossed margin.
    pub crossed_instances: usize,
    /// Crossed instances where the two-sided surrogate showed no negative score.
    pub missing_witnesses: usize,
    pub max_k: usize,
    pub max_v: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.alignment_violations == 0 && self.missing_witnesses == 0
    }

    pub fn failed_identities(&self) -> Vec<String> {
        let mut names: Vec<String> = self.failures.iter().map(|f| f.identity.clone()).collect();
        names.sort();
        names.dedup();
        if self.alignment_violations > 0 {
            names.push("one_sided_alignment".into());
        }
        if self.missing_witnesses > 0 {
            names.push("two_sided_misalignment_witness".into());
        }
        names
    }
}

/// Runs `trials` random instances (K ≤ 8, V ≤ 32), alternating one- and
/// two-sided records. One-sided records are checked under both surrogate
/// kinds; two-sided records under the two-sided kind.
pub fn verify_gradients(trials: usize, seed: u64, fault: Fault) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::Invalid("verify-gradients needs at least one trial".into()));
    }
    let score = match fault {
        Fault::None => analytic_score,
        Fault::MissingFlip => missing_flip,
    };
    let (max_k, max_v) = (8, 32);
    let mut report = SuiteReport { trials, seed, max_k, max_v, ..Default::default() };
    for trial in 0..trials {
        let mut r = rng::stream(seed, &[0x9ad, trial as u64]);
        let mode = if trial % 2 == 0 { NoiseMode::OneSided } else { NoiseMode::TwoSided };
        let inst = random_instance(&mut r, mode, max_k, max_v)?;
        let kinds: &[SurrogateKind] = match mode {
            NoiseMode::OneSided => &[SurrogateKind::OneSided, SurrogateKind::TwoSided],
            _ => &[SurrogateKind::TwoSided],
        };
        for &kind in kinds {
            let rep = gradient_report_with(&inst.record, &inst.token_ids, &inst.logits, kind, score)?;
            report.reports += 1;
            report.max_rel_error = report.max_rel_error.max(rep.max_rel_error);
            for c in rep.failures() {
                report.failures.push(Failure {
                    trial,
                    kind,
                    identity: c.name.clone(),
                    max_rel_error: c.max_rel_error,
                });
            }
            let crossed = rep.margins.deltas.iter().any(|&d| d < 0.0);
            match kind {
                SurrogateKind::OneSided => {
                    report.alignment_violations += rep
                        .margins
                        .deltas
                        .iter()
                        .zip(&rep.autodiff_scores)
                        .filter(|&(&d, &h)| h < 0.0 || (d != 0.0 && h <= 0.0))
                        .count();
                }
                SurrogateKind::TwoSided => {
                    if crossed {
                        report.crossed_instances += 1;
                        if rep.autodiff_scores.iter().all(|&h| h >= 0.0) {
                            report.missing_witnesses += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let rep = verify_gradients(40, 1, Fault::None).unwrap();
        assert!(rep.passed(), "{:?}", rep.failed_identities());
        assert!(rep.crossed_instances > 0);
    }

    #[test]
    fn missing_flip_is_caught() {
        let rep = verify_gradients(40, 1, Fault::None).unwrap();
        assert!(rep.passed());
        let bad = verify_gradients(40, 1, Fault::MissingFlip).unwrap();
        assert!(!bad.passed());
        assert!(bad.failed_identities().contains(&"one_sided_component_score".to_string()));
    }

    #[test]
    fn zero_trials_is_an_error() {
        assert!(verify_gradients(0, 1, Fault::None).is_err());
    }
}
