//! Surrogate log-likelihoods for latent and explicit steps.
//!
//! Latent steps are scored through the perturbation margins
//! `Δ_i(θ) = g_i − log p_i(θ)` between frozen target scores and the current
//! top-K log-probabilities:
//!
//! * two-sided (Gumbel) density: `Σ_i −Δ_i − exp(−Δ_i)`, whose derivative
//!   `1 − exp(−Δ_i)` turns negative once a margin is crossed;
//! * one-sided surrogate: the same sum over `Δ̃_i`, where a crossed margin
//!   (`Δ_i < 0`) is routed through [`Value::flip_grad`]. The forward value is
//!   unchanged while the direct score becomes `exp(−Δ_i) − 1 ≥ 0`.
//!
//! [`gradient_report`] checks the analytic scores and the logit-level
//! decomposition `h_l − p_l H` (selected) / `−p_l H` (unselected) against
//! autodiff and against central differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, Tape, Value};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, max_rel_error};
use crate::latent::{make_perturbation_record, NoiseMode, PerturbationConfig, PerturbationRecord, TopKSlice};
use crate::rng::Rng;

/// Margins `Δ_i = g_i − log p_i` and which of them are crossed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    pub deltas: Vec<f64>,
    pub flipped: Vec<bool>,
}

impl MarginVector {
    pub fn new(targets: &[f64], current_log_probs: &[f64]) -> Self {
        let deltas: Vec<f64> = targets.iter().zip(current_log_probs).map(|(g, l)| g - l).collect();
        let flipped = deltas.iter().map(|&d| d < 0.0).collect();
        Self { deltas, flipped }
    }
}

fn check_len(targets: &[f64], current: &Value) -> Result<()> {
    if current.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets vs {} current log-probs",
            targets.len(),
            current.len()
        )));
    }
    Ok(())
}

fn margins(targets: &[f64], current: &Value) -> Result<Value> {
    check_len(targets, current)?;
    current.tape().vector(targets.to_vec(), false).sub(current)
}

/// `Σ_i −m_i − exp(−m_i)`.
fn gumbel_terms(m: &Value) -> Result<Value> {
    let neg = m.neg()?;
    neg.sub(&neg.exp()?)?.sum()
}

/// Two-sided Gumbel-perturbation log-density.
pub fn gumbel_log_density(targets: &[f64], current_log_probs: &Value) -> Result<Value> {
    gumbel_terms(&margins(targets, current_log_probs)?)
}

/// `Δ̃`: forward value `Δ`, with crossed components passed through
/// [`Value::flip_grad`]. `Δ = 0` is not crossed.
pub fn one_sided_margin(targets: &[f64], current_log_probs: &Value) -> Result<Value> {
    let delta = margins(targets, current_log_probs)?;
    let tape = current_log_probs.tape();
    let crossed: Vec<f64> = delta.data().iter().map(|&d| if d < 0.0 { 1.0 } else { 0.0 }).collect();
    if crossed.iter().all(|&c| c == 0.0) {
        return Ok(delta);
    }
    let keep: Vec<f64> = crossed.iter().map(|c| 1.0 - c).collect();
    let flipped = delta.flip_grad()?;
    let a = flipped.mul(&tape.vector(crossed, false))?;
    let b = delta.mul(&tape.vector(keep, false))?;
    a.add(&b)
}

/// One-sided Gumbel-margin surrogate log-likelihood.
pub fn one_sided_log_likelihood(record: &PerturbationRecord, current_log_probs: &Value) -> Result<Value> {
    if record.mode != NoiseMode::OneSided {
        return Err(Error::Invalid(format!(
            "one-sided surrogate needs a one-sided record, got {:?}",
            record.mode
        )));
    }
    gumbel_terms(&one_sided_margin(&record.targets, current_log_probs)?)
}

/// Surrogate log-likelihood of a latent step under its record's mode.
pub fn latent_log_likelihood(record: &PerturbationRecord, current_log_probs: &Value) -> Result<Value> {
    match record.mode {
        NoiseMode::OneSided => one_sided_log_likelihood(record, current_log_probs),
        NoiseMode::TwoSided | NoiseMode::None => gumbel_log_density(&record.targets, current_log_probs),
    }
}

/// Categorical log-probability of `token` under `logits`.
pub fn explicit_log_prob(logits: &Value, token: usize) -> Result<Value> {
    if token >= logits.len() {
        return Err(Error::Invalid(format!("token {token} outside vocabulary of {}", logits.len())));
    }
    logits.log_softmax()?.select(&[token])?.sum()
}

const KL_FLOOR: f64 = 1e-12;

/// `Σ p log(p / q)` with `0 log 0 = 0` and `q` floored at 1e-12.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum()
}

/// Differentiable KL between the current distribution (given by its
/// log-probabilities) and a fixed reference distribution.
pub fn categorical_kl_value(current_log_probs: &Value, reference: &[f64]) -> Result<Value> {
    check_len(reference, current_log_probs)?;
    let tape = current_log_probs.tape();
    let log_q: Vec<f64> = reference.iter().map(|q| q.max(KL_FLOOR).ln()).collect();
    let p = current_log_probs.exp()?;
    let diff = current_log_probs.sub(&tape.vector(log_q, false))?;
    p.mul(&diff)?.sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    OneSided,
    TwoSided,
}

/// Analytic direct score `∂ℓ/∂log p_i` at margin `Δ`.
pub fn analytic_score(kind: SurrogateKind, delta: f64) -> f64 {
    match kind {
        SurrogateKind::TwoSided => 1.0 - (-delta).exp(),
        SurrogateKind::OneSided if delta < 0.0 => (-delta).exp() - 1.0,
        SurrogateKind::OneSided => 1.0 - (-delta).exp(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub kind: SurrogateKind,
    pub token_ids: Vec<usize>,
    pub margins: MarginVector,
    /// Analytic `h_i = ∂ℓ/∂log p_i`.
    pub per_component_score: Vec<f64>,
    /// `H = Σ h_i`.
    pub score_sum: f64,
    /// Analytic `∂ℓ/∂z_l` over the whole vocabulary.
    pub logit_grads: Vec<f64>,
    pub autodiff_scores: Vec<f64>,
    pub autodiff_logit_grads: Vec<f64>,
    pub finite_diff_scores: Vec<f64>,
    pub finite_diff_logit_grads: Vec<f64>,
    pub checks: Vec<IdentityCheck>,
    pub max_rel_error: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&IdentityCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for the gradient identities.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Below this magnitude errors are measured absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;
/// Absolute floor for comparisons against central differences. Their
/// roundoff is about `eps * |f| / FD_STEP`, near 1e-10 here, which swamps
/// the relative error of gradients on very unlikely tokens.
pub const FD_ABS_FLOOR: f64 = 1e-5;

/// Surrogate value as a smooth function of the top-K log-probabilities,
/// with each crossed margin reflected (straight-through linearization
/// around `base`). Independent of the autodiff implementation.
fn reflected_surrogate(kind: SurrogateKind, targets: &[f64], base: &[f64], lp: &[f64]) -> f64 {
    targets
        .iter()
        .zip(base)
        .zip(lp)
        .map(|((&g, &l0), &l)| {
            let d0 = g - l0;
            let slope = match kind {
                SurrogateKind::OneSided if d0 < 0.0 => 1.0,
                _ => -1.0,
            };
            let m = d0 + slope * (l - l0);
            -m - (-m).exp()
        })
        .sum()
}

/// Checks the analytic component scores and logit gradients of one latent
/// step against autodiff and against central differences.
pub fn gradient_report(
    record: &PerturbationRecord,
    token_ids: &[usize],
    logits: &[f64],
    kind: SurrogateKind,
) -> Result<GradientReport> {
    gradient_report_with(record, token_ids, logits, kind, analytic_score)
}

/// [`gradient_report`] with a substitute analytic score (fault injection).
pub fn gradient_report_with(
    record: &PerturbationRecord,
    token_ids: &[usize],
    logits: &[f64],
    kind: SurrogateKind,
    score: fn(SurrogateKind, f64) -> f64,
) -> Result<GradientReport> {
    let k = token_ids.len();
    if k != record.len() {
        return Err(Error::Shape(format!("{k} token ids vs record of {}", record.len())));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= logits.len()) {
        return Err(Error::Invalid(format!("token {bad} outside vocabulary of {}", logits.len())));
    }
    let lp_full = log_softmax(logits);
    let probs: Vec<f64> = lp_full.iter().map(|l| l.exp()).collect();
    let lp: Vec<f64> = token_ids.iter().map(|&i| lp_full[i]).collect();
    let margins = MarginVector::new(&record.targets, &lp);

    // analytic
    let h: Vec<f64> = margins.deltas.iter().map(|&d| score(kind, d)).collect();
    let big_h: f64 = h.iter().sum();
    let mut logit_grads: Vec<f64> = probs.iter().map(|p| -p * big_h).collect();
    for (&id, &hi) in token_ids.iter().zip(&h) {
        logit_grads[id] += hi;
    }

    // autodiff
    let surrogate = |lp: &Value| -> Result<Value> {
        match kind {
            SurrogateKind::OneSided => {
                let mut r = record.clone();
                r.mode = NoiseMode::OneSided;
                one_sided_log_likelihood(&r, lp)
            }
            SurrogateKind::TwoSided => gumbel_log_density(&record.targets, lp),
        }
    };
    let tape = Tape::new();
    let lp_leaf = tape.vector(lp.clone(), true);
    let autodiff_scores = surrogate(&lp_leaf)?.backward()?.wrt(&lp_leaf).expect("leaf requires grad");
    let tape = Tape::new();
    let z = tape.vector(logits.to_vec(), true);
    let sel = z.log_softmax()?.select(token_ids)?;
    let autodiff_logit_grads = surrogate(&sel)?.backward()?.wrt(&z).expect("leaf requires grad");

    // finite differences on the reflected surrogate
    let fd_scores =
        central_difference(|x| reflected_surrogate(kind, &record.targets, &lp, x), &lp, FD_STEP);
    let fd_logits = central_difference(
        |zz| {
            let l = log_softmax(zz);
            let cur: Vec<f64> = token_ids.iter().map(|&i| l[i]).collect();
            reflected_surrogate(kind, &record.targets, &lp, &cur)
        },
        logits,
        FD_STEP,
    );

    let (sel_idx, unsel_idx): (Vec<usize>, Vec<usize>) =
        (0..logits.len()).partition(|l| token_ids.contains(l));
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let tri = |a: &[f64], b: &[f64], c: &[f64]| {
        max_rel_error(a, b, GRAD_ABS_FLOOR)
            .max(max_rel_error(a, c, FD_ABS_FLOOR))
            .max(max_rel_error(b, c, FD_ABS_FLOOR))
    };
    let mut checks = vec![];
    let mut push = |name: &str, err: f64| {
        checks.push(IdentityCheck { name: name.into(), max_rel_error: err, passed: err <= GRAD_REL_TOL });
    };
    push(
        match kind {
            SurrogateKind::OneSided => "one_sided_component_score",
            SurrogateKind::TwoSided => "two_sided_component_score",
        },
        tri(&h, &autodiff_scores, &fd_scores),
    );
    push(
        "selected_logit_decomposition",
        tri(
            &pick(&logit_grads, &sel_idx),
            &pick(&autodiff_logit_grads, &sel_idx),
            &pick(&fd_logits, &sel_idx),
        ),
    );
    push(
        "unselected_logit_downward",
        tri(
            &pick(&logit_grads, &unsel_idx),
            &pick(&autodiff_logit_grads, &unsel_idx),
            &pick(&fd_logits, &unsel_idx),
        ),
    );
    push("score_sum", (big_h - h.iter().sum::<f64>()).abs());
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        kind,
        token_ids: token_ids.to_vec(),
        margins,
        per_component_score: h,
        score_sum: big_h,
        logit_grads,
        autodiff_scores,
        autodiff_logit_grads,
        finite_diff_scores: fd_scores,
        finite_diff_logit_grads: fd_logits,
        checks,
        max_rel_error,
    })
}

/// A randomized latent step: old logits produce the record; the current
/// logits drift from them so that some margins may be crossed.
#[derive(Clone, Debug)]
pub struct GradientInstance {
    pub record: PerturbationRecord,
    pub token_ids: Vec<usize>,
    pub logits: Vec<f64>,
}

pub fn random_instance(rng: &mut Rng, mode: NoiseMode, max_k: usize, max_v: usize) -> Result<GradientInstance> {
    let v = rng.random_range(2..=max_v.max(2));
    let k = rng.random_range(1..=max_k.min(v));
    let normal = |r: &mut Rng| {
        // Box-Muller
        let u1: f64 = r.random::<f64>().max(1e-300);
        let u2: f64 = r.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let old: Vec<f64> = (0..v).map(|_| 1.5 * normal(rng)).collect();
    let old_lp = log_softmax(&old);
    let probs: Vec<f64> = old_lp.iter().map(|l| l.exp()).collect();
    let slice = TopKSlice::select(&probs, k, &[])?;
    let rollout_lp: Vec<f64> = slice.token_ids.iter().map(|&i| old_lp[i]).collect();
    let record = make_perturbation_record(&rollout_lp, mode, &PerturbationConfig::default(), rng)?;
    let drift = rng.random_range(0.0..2.5);
    let logits = old.iter().map(|&z| z + drift * normal(rng)).collect();
    Ok(GradientInstance { record, token_ids: slice.token_ids, logits })
}
