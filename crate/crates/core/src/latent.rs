//! Latent token construction and rollout-time perturbations.
//!
//! A latent token is the weighted mixture of the top-K token embeddings of
//! the current vocabulary distribution. During rollouts the mixture weights
//! come from a temperature-scaled softmax over perturbed scores
//! `log p_i + perturbation_i`, where the perturbation is zero, a scaled
//! Gumbel draw (two-sided), or a clipped-and-shifted Gumbel draw that is
//! strictly positive (one-sided).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Array};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Top-K tokens of a distribution, probabilities renormalized over the slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKSlice {
    pub token_ids: Vec<usize>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TopKSlice {
    /// Selects up to `k` tokens with positive mass, descending by
    /// probability with ties broken by lower id, skipping `exclude`.
    pub fn select(dist: &[f64], k: usize, exclude: &[usize]) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("top-K needs K >= 1".into()));
        }
        if k > dist.len() {
            return Err(Error::Invalid(format!("K = {k} exceeds vocabulary size {}", dist.len())));
        }
        let mut ids: Vec<usize> = (0..dist.len())
            .filter(|i| !exclude.contains(i) && dist[*i] > 0.0)
            .collect();
        if ids.is_empty() {
            return Err(Error::Invalid("distribution has no mass to select".into()));
        }
        ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        ids.truncate(k);
        let mass: f64 = ids.iter().map(|&i| dist[i]).sum();
        let probs: Vec<f64> = ids.iter().map(|&i| dist[i] / mass).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { token_ids: ids, probs, log_probs })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentToken {
    pub embedding: Vec<f64>,
    pub weights: Vec<f64>,
    pub source: TopKSlice,
}

/// `Σ weights[i] · table[ids[i]]` for a `[V, d]` embedding table.
pub fn mix_embeddings(table: &Array, ids: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    if table.shape.len() != 2 {
        return Err(Error::Shape(format!("embedding table must be 2-D, got {:?}", table.shape)));
    }
    if ids.len() != weights.len() {
        return Err(Error::Shape(format!("{} ids vs {} weights", ids.len(), weights.len())));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    let mut out = vec![0.0; d];
    for (&id, &w) in ids.iter().zip(weights) {
        if id >= v {
            return Err(Error::Invalid(format!("token {id} outside vocabulary of {v}")));
        }
        for (o, &e) in out.iter_mut().zip(&table.data[id * d..(id + 1) * d]) {
            *o += w * e;
        }
    }
    Ok(out)
}

/// Noise-free latent token: weights are the renormalized top-K probabilities.
pub fn build_latent_token(dist: &[f64], k: usize, table: &Array) -> Result<LatentToken> {
    let total: f64 = dist.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("distribution has zero total mass".into()));
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("distribution sums to {total}, not 1")));
    }
    if table.shape.len() != 2 || table.shape[0] != dist.len() {
        return Err(Error::Shape(format!(
            "embedding table {:?} does not match vocabulary {}",
            table.shape,
            dist.len()
        )));
    }
    let source = TopKSlice::select(dist, k, &[])?;
    let weights = source.probs.clone();
    let embedding = mix_embeddings(table, &source.token_ids, &weights)?;
    Ok(LatentToken { embedding, weights, source })
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` kept inside `[1e-12, 1 - 1e-12]`.
pub fn sample_standard_gumbel(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Clipping magnitudes `a`, `b` and positive offset `δ` of the one-sided
/// transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneSidedBounds {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

impl Default for OneSidedBounds {
    fn default() -> Self {
        Self { a: 1.5, b: 3.0, delta: 0.01 }
    }
}

impl OneSidedBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("delta", self.delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("one-sided bound {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `clip(ξ, -a, b) + a + δ`, elementwise; the result lies in `[δ, a + b + δ]`.
pub fn one_sided_transform(noise: &[f64], bounds: OneSidedBounds) -> Result<Vec<f64>> {
    bounds.validate()?;
    let OneSidedBounds { a, b, delta } = bounds;
    Ok(noise.iter().map(|&x| x.clamp(-a, b) + a + delta).collect())
}

/// Mixture weights `softmax((log p + perturbation) / τ)`.
pub fn noisy_mixture_weights(log_probs: &[f64], perturbation: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    if log_probs.len() != perturbation.len() {
        return Err(Error::Shape(format!(
            "{} log-probs vs {} perturbations",
            log_probs.len(),
            perturbation.len()
        )));
    }
    let scores: Vec<f64> = log_probs.iter().zip(perturbation).map(|(l, g)| (l + g) / tau).collect();
    Ok(softmax(&scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    None,
    TwoSided,
    OneSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub bounds: OneSidedBounds,
    pub tau: f64,
    pub noise_scale: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { bounds: OneSidedBounds::default(), tau: 1.0, noise_scale: 1.0 }
    }
}

/// Everything needed to recompute a latent step's surrogate likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub mode: NoiseMode,
    /// Raw standard-Gumbel draws (zeros in `None` mode).
    pub raw_noise: Vec<f64>,
    /// `ξ⁺` in one-sided mode, zeros otherwise.
    pub one_sided_noise: Vec<f64>,
    /// Perturbed target scores `g`.
    pub targets: Vec<f64>,
    /// Full-vocabulary log-probabilities of the top-K ids at rollout time.
    pub rollout_log_probs: Vec<f64>,
    pub temperature: f64,
    pub noise_scale: f64,
}

impl PerturbationRecord {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// The additive perturbation applied to the rollout log-probabilities.
    pub fn perturbation(&self) -> Vec<f64> {
        match self.mode {
            NoiseMode::None => vec![0.0; self.rollout_log_probs.len()],
            NoiseMode::TwoSided => self.raw_noise.iter().map(|x| self.noise_scale * x).collect(),
            NoiseMode::OneSided => self.one_sided_noise.clone(),
        }
    }

    /// Rollout mixture weights `softmax(g / τ)`.
    pub fn mixture_weights(&self) -> Result<Vec<f64>> {
        noisy_mixture_weights(&self.rollout_log_probs, &self.perturbation(), self.temperature)
    }
}

pub fn make_perturbation_record(
    rollout_log_probs: &[f64],
    mode: NoiseMode,
    cfg: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<PerturbationRecord> {
    let k = rollout_log_probs.len();
    let zeros = vec![0.0; k];
    let (raw_noise, one_sided_noise) = match mode {
        NoiseMode::None => (zeros.clone(), zeros),
        NoiseMode::TwoSided => (sample_standard_gumbel(k, rng), zeros),
        NoiseMode::OneSided => {
            let raw = sample_standard_gumbel(k, rng);
            let scaled: Vec<f64> = raw.iter().map(|x| cfg.noise_scale * x).collect();
            let plus = one_sided_transform(&scaled, cfg.bounds)?;
            (raw, plus)
        }
    };
    let mut rec = PerturbationRecord {
        mode,
        raw_noise,
        one_sided_noise,
        targets: vec![],
        rollout_log_probs: rollout_log_probs.to_vec(),
        temperature: cfg.tau,
        noise_scale: cfg.noise_scale,
    };
    rec.targets = rollout_log_probs.iter().zip(rec.perturbation()).map(|(l, g)| l + g).collect();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn table(rows: &[&[f64]]) -> Array {
        let d = rows[0].len();
        Array::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn single_component() {
        let t = table(&[&[2.0, -1.0]]);
        let lt = build_latent_token(&[1.0], 1, &t).unwrap();
        assert_eq!(lt.embedding, vec![2.0, -1.0]);
    }

    #[test]
    fn symmetric_average() {
        let t = table(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let lt = build_latent_token(&[0.5, 0.5], 2, &t).unwrap();
        assert_eq!(lt.embedding, vec![0.5, 0.5]);
    }

    #[test]
    fn renormalized_top_two() {
        let t = table(&[&[1.0, 0.0], &[0.0, 2.0], &[5.0, 5.0], &[7.0, 7.0]]);
        let lt = build_latent_token(&[0.5, 0.3, 0.1, 0.1], 2, &t).unwrap();
        assert_eq!(lt.source.token_ids, vec![0, 1]);
        assert!((lt.weights[0] - 0.625).abs() < 1e-12);
        assert!((lt.weights[1] - 0.375).abs() < 1e-12);
        assert!((lt.embedding[0] - 0.625).abs() < 1e-12);
        assert!((lt.embedding[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let s = TopKSlice::select(&[0.2, 0.4, 0.2, 0.2], 2, &[]).unwrap();
        assert_eq!(s.token_ids, vec![1, 0]);
    }

    #[test]
    fn zero_mass_and_bad_k() {
        let t = table(&[&[1.0], &[2.0]]);
        assert!(build_latent_token(&[0.0, 0.0], 1, &t).is_err());
        assert!(build_latent_token(&[0.5, 0.5], 0, &t).is_err());
        assert!(build_latent_token(&[0.5, 0.5], 3, &t).is_err());
    }

    #[test]
    fn one_sided_examples() {
        let b = OneSidedBounds { a: 1.5, b: 3.0, delta: 0.01 };
        let out = one_sided_transform(&[-5.0, 10.0, 0.3], b).unwrap();
        assert_eq!(out[0], 0.01);
        assert!((out[1] - 4.51).abs() < 1e-12);
        assert!((out[2] - 1.81).abs() < 1e-12);
        for bad in [
            OneSidedBounds { a: 0.0, ..b },
            OneSidedBounds { b: -1.0, ..b },
            OneSidedBounds { delta: 0.0, ..b },
        ] {
            assert!(matches!(one_sided_transform(&[0.0], bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mixture_weight_examples() {
        let half = 0.5f64.ln();
        let w = noisy_mixture_weights(&[half, half], &[0.0, 0.0], 1.0).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        let w = noisy_mixture_weights(&[0.0, -0.6931], &[0.0, 0.0], 1.0).unwrap();
        assert!((w[0] - 0.6667).abs() < 1e-4 && (w[1] - 0.3333).abs() < 1e-4);
        assert!(noisy_mixture_weights(&[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn none_mode_matches_renormalized_probs() {
        let slice = TopKSlice::select(&[0.4, 0.3, 0.2, 0.1], 3, &[]).unwrap();
        let full_lp: Vec<f64> = [0.4f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let rec = make_perturbation_record(&full_lp, NoiseMode::None, &PerturbationConfig::default(), &mut rng::stream(0, &[]))
            .unwrap();
        assert_eq!(rec.targets, full_lp);
        let w = rec.mixture_weights().unwrap();
        for (a, b) in w.iter().zip(&slice.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_sided_targets_exceed_rollout_log_probs() {
        let lp = vec![-0.2, -1.9, -3.5, -7.0];
        let mut r = rng::stream(11, &[]);
        for _ in 0..200 {
            let rec = make_perturbation_record(&lp, NoiseMode::OneSided, &PerturbationConfig::default(), &mut r)
                .unwrap();
            for (g, l) in rec.targets.iter().zip(&lp) {
                assert!(g > l);
            }
        }
    }

    #[test]
    fn two_sided_records_reproduce() {
        let lp = vec![-0.2, -1.9];
        let cfg = PerturbationConfig::default();
        let a = make_perturbation_record(&lp, NoiseMode::TwoSided, &cfg, &mut rng::stream(5, &[1])).unwrap();
        let b = make_perturbation_record(&lp, NoiseMode::TwoSided, &cfg, &mut rng::stream(5, &[1])).unwrap();
        assert_eq!(a, b);
    }
}
