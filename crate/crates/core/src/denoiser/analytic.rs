//! Exact denoiser for a Gaussian-mixture data distribution.
//!
//! With `q(z₀) = Σ w_k N(μ_k, σ²I)` the noisy marginal at step `t` is
//! `Σ w_k N(√ᾱ μ_k, s²I)` with `s² = ᾱσ² + 1 − ᾱ`, so the optimal noise
//! prediction has a closed form:
//!
//! ```text
//! ε*(z, t) = √(1 − ᾱ) / s² · Σ r_k (z − √ᾱ μ_k)
//! ```
//!
//! which equals `(z − √ᾱ E[z₀ | z_t = z]) / √(1 − ᾱ)` for `t ≥ 1` and stays
//! well defined at `t = 0`.

use std::sync::RwLock;

use ndarray::Zip;

use super::{fresh_scope, ConditionHandle, ConditionKind, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ensure_finite, LatentTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<LatentTensor>,
    sigma: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<LatentTensor>, sigma: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::param(
                "means",
                "mixture needs at least one component",
            ));
        }
        if weights.len() != means.len() {
            return Err(Error::param(
                "weights",
                format!("{} weights for {} means", weights.len(), means.len()),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::param("weights", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param("weights", format!("weights sum to {total}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::param("sigma", format!("{sigma} must be positive")));
        }
        let shape = means[0].dim();
        for m in &means {
            if m.dim() != shape {
                return Err(Error::param("means", "component shapes differ"));
            }
            ensure_finite(m, "mixture mean")?;
        }
        Ok(Self {
            weights,
            means,
            sigma,
        })
    }

    /// Equal-weight mixture over the given images.
    pub fn from_images(images: Vec<LatentTensor>, sigma: f64) -> Result<Self> {
        let k = images.len();
        if k == 0 {
            return Err(Error::param("images", "need at least one image"));
        }
        Self::new(vec![1.0 / k as f64; k], images, sigma)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[LatentTensor] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.means[0].dim()
    }
}

/// Exact posterior over mixture components given `z_t = z`.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// Indices of the contributing components.
    pub components: Vec<usize>,
    /// Responsibilities aligned with `components`; sum to one.
    pub responsibilities: Vec<f64>,
    /// `E[z₀ | z_t = z]`.
    pub mean: LatentTensor,
    /// `Σ r_k μ_k`.
    pub(crate) mean_of_means: LatentTensor,
}

pub fn posterior(
    z: &LatentTensor,
    t: usize,
    components: &[usize],
    mix: &GaussianMixture,
    sched: &NoiseSchedule,
) -> Result<Posterior> {
    if components.is_empty() {
        return Err(Error::Condition("empty component subset".into()));
    }
    if let Some(&bad) = components.iter().find(|&&k| k >= mix.len()) {
        return Err(Error::Condition(format!("component {bad} out of range")));
    }
    if z.dim() != mix.dim() {
        return Err(Error::param(
            "z",
            format!("shape {:?} does not match mixture {:?}", z.dim(), mix.dim()),
        ));
    }
    sched.check_timestep(t, "t")?;
    let ab = sched.alpha_bar(t);
    let sqrt_ab = ab.sqrt();
    let s2 = ab * mix.sigma * mix.sigma + (1.0 - ab);

    // Max-subtracted log-sum-exp over the selected components.
    let logits: Vec<f64> = components
        .iter()
        .map(|&k| {
            let d2 = Zip::from(z)
                .and(&mix.means[k])
                .fold(0.0, |acc, &x, &m| acc + (x - sqrt_ab * m).powi(2));
            mix.weights[k].ln() - d2 / (2.0 * s2)
        })
        .collect();
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let responsibilities: Vec<f64> = unnorm.iter().map(|u| u / total).collect();

    let mut mean_of_means = LatentTensor::zeros(z.dim());
    for (&k, &r) in components.iter().zip(&responsibilities) {
        mean_of_means.scaled_add(r, &mix.means[k]);
    }
    // E[z₀|z] = Σ r_k (μ_k + c (z − √ᾱ μ_k)) = (1 − c√ᾱ) Σ r_k μ_k + c z
    let c = sqrt_ab * mix.sigma * mix.sigma / s2;
    let mean = Zip::from(z)
        .and(&mean_of_means)
        .map_collect(|&x, &m| (1.0 - c * sqrt_ab) * m + c * x);
    Ok(Posterior {
        components: components.to_vec(),
        responsibilities,
        mean,
        mean_of_means,
    })
}

/// Optimal noise prediction under `mix` restricted to `components`.
pub fn analytic_eps(
    z: &LatentTensor,
    t: usize,
    components: &[usize],
    mix: &GaussianMixture,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let post = posterior(z, t, components, mix, sched)?;
    let ab = sched.alpha_bar(t);
    let s2 = ab * mix.sigma * mix.sigma + (1.0 - ab);
    let scale = (1.0 - ab).sqrt() / s2;
    let sqrt_ab = ab.sqrt();
    Ok(Zip::from(z)
        .and(&post.mean_of_means)
        .map_collect(|&x, &m| scale * (x - sqrt_ab * m)))
}

/// Analytic backend; prompt conditions restrict the mixture to a subset of
/// its components, the null condition uses all of them.
#[derive(Debug)]
pub struct AnalyticDenoiser {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
    names: Vec<String>,
    scope: u64,
    subsets: RwLock<Vec<Vec<usize>>>,
}

impl AnalyticDenoiser {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        let names = (0..mixture.len()).map(|k| format!("c{k}")).collect();
        Self::with_names(mixture, schedule, names)
    }

    /// Component names are used by [`AnalyticDenoiser::prompt`].
    pub fn with_names(
        mixture: GaussianMixture,
        schedule: NoiseSchedule,
        names: Vec<String>,
    ) -> Self {
        let all = (0..mixture.len()).collect();
        Self {
            mixture,
            schedule,
            names,
            scope: fresh_scope(),
            subsets: RwLock::new(vec![all]),
        }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers a prompt condition selecting the given components.
    pub fn condition(&self, components: &[usize]) -> Result<ConditionHandle> {
        if components.is_empty() {
            return Err(Error::Condition("empty component subset".into()));
        }
        if let Some(&bad) = components.iter().find(|&&k| k >= self.mixture.len()) {
            return Err(Error::Condition(format!("component {bad} out of range")));
        }
        let mut subsets = self.subsets.write().unwrap();
        subsets.push(components.to_vec());
        Ok(ConditionHandle::new(
            self.scope,
            (subsets.len() - 1) as u64,
            ConditionKind::Prompt,
        ))
    }

    /// Prompt condition from a comma-separated list of component-name
    /// prefixes, e.g. `"stripes"` or `"checker_2,checker_4"`.
    pub fn prompt(&self, selector: &str) -> Result<ConditionHandle> {
        let mut picked = Vec::new();
        for word in selector.split(',').map(str::trim).filter(|w| !w.is_empty()) {
            let before = picked.len();
            for (k, name) in self.names.iter().enumerate() {
                if name.starts_with(word) && !picked.contains(&k) {
                    picked.push(k);
                }
            }
            if picked.len() == before {
                return Err(Error::Condition(format!("no component matches `{word}`")));
            }
        }
        picked.sort_unstable();
        self.condition(&picked)
    }

    pub fn components_of(&self, cond: &ConditionHandle) -> Result<Vec<usize>> {
        if cond.scope() != self.scope {
            return Err(Error::Condition(
                "condition handle was issued by a different backend".into(),
            ));
        }
        self.subsets
            .read()
            .unwrap()
            .get(cond.id() as usize)
            .cloned()
            .ok_or_else(|| Error::Condition(format!("unknown condition id {}", cond.id())))
    }
}

impl Denoiser for AnalyticDenoiser {
    fn eps(&self, z: &LatentTensor, t: usize, cond: &ConditionHandle) -> Result<LatentTensor> {
        let components = self.components_of(cond)?;
        analytic_eps(z, t, &components, &self.mixture, &self.schedule)
    }

    fn null_condition(&self) -> ConditionHandle {
        ConditionHandle::new(self.scope, 0, ConditionKind::NullText)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, randn};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::ddpm_linear()
    }

    fn scalar(v: f64) -> LatentTensor {
        Array3::from_elem((1, 1, 1), v)
    }

    #[test]
    fn unit_gaussian_closed_form() {
        // N(0, 1): s² = 1, posterior mean √ᾱ z, so ε* = √(1−ᾱ) z.
        let s = sched();
        let mix = GaussianMixture::from_images(vec![Array3::zeros((1, 4, 4))], 1.0).unwrap();
        let z = randn((1, 4, 4), &mut ChaCha8Rng::seed_from_u64(1));
        for t in [0, 1, 10, 500, 1000] {
            let eps = analytic_eps(&z, t, &[0], &mix, &s).unwrap();
            let expected = z.mapv(|v| (1.0 - s.alpha_bar(t)).sqrt() * v);
            assert!(max_abs_diff(&eps, &expected) < 1e-12, "t={t}");
        }
    }

    #[test]
    fn single_gaussian_matches_quadrature() {
        // E[z₀ | z_t = z] by numerical integration over z₀ on a 1×1×1 latent.
        let s = sched();
        let (mu, sigma) = (0.7, 0.4);
        let mix = GaussianMixture::from_images(vec![scalar(mu)], sigma).unwrap();
        for (z, t) in [(0.3, 50usize), (-1.2, 400), (2.1, 900)] {
            let ab = s.alpha_bar(t);
            let (mut num, mut den) = (0.0, 0.0);
            let n = 200_000;
            let (lo, hi) = (mu - 10.0 * sigma, mu + 10.0 * sigma);
            let h = (hi - lo) / n as f64;
            for i in 0..=n {
                let x0 = lo + h * i as f64;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let prior = (-(x0 - mu).powi(2) / (2.0 * sigma * sigma)).exp();
                let lik = (-(z - ab.sqrt() * x0).powi(2) / (2.0 * (1.0 - ab))).exp();
                num += w * x0 * prior * lik;
                den += w * prior * lik;
            }
            let mean = num / den;
            let expected = (z - ab.sqrt() * mean) / (1.0 - ab).sqrt();
            let eps = analytic_eps(&scalar(z), t, &[0], &mix, &s).unwrap()[[0, 0, 0]];
            assert!((eps - expected).abs() < 1e-6, "t={t}: {eps} vs {expected}");
        }
    }

    #[test]
    fn exactness_identity_against_posterior_mean() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let means = vec![randn((1, 3, 3), &mut rng)];
        let mix = GaussianMixture::from_images(means, 0.3).unwrap();
        let z = randn((1, 3, 3), &mut rng);
        for t in [1, 20, 300, 1000] {
            let post = posterior(&z, t, &[0], &mix, &s).unwrap();
            let ab = s.alpha_bar(t);
            let symbolic = (&z - &(&post.mean * ab.sqrt())) / (1.0 - ab).sqrt();
            let eps = analytic_eps(&z, t, &[0], &mix, &s).unwrap();
            assert!(max_abs_diff(&eps, &symbolic) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let s = sched();
        let t = 300;
        let mix = GaussianMixture::from_images(vec![scalar(-1.0), scalar(1.0)], 0.5).unwrap();
        let post = posterior(&scalar(0.0), t, &[0, 1], &mix, &s).unwrap();
        assert!((post.responsibilities[0] - 0.5).abs() < 1e-15);
        let ab = s.alpha_bar(t);
        let c = ab.sqrt() * 0.25 / (ab * 0.25 + 1.0 - ab);
        let m0 = -1.0 + c * (0.0 + ab.sqrt());
        let m1 = 1.0 + c * (0.0 - ab.sqrt());
        assert!((post.mean[[0, 0, 0]] - 0.5 * (m0 + m1)).abs() < 1e-15);
    }

    #[test]
    fn responsibilities_sum_to_one_and_stay_finite() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means: Vec<_> = (0..5)
            .map(|_| randn((1, 4, 4), &mut rng).mapv(|v| 3.0 * v))
            .collect();
        for sigma in [1e-3, 0.1, 1.0, 10.0] {
            let mix = GaussianMixture::from_images(means.clone(), sigma).unwrap();
            for t in [0, 1, 999, 1000] {
                let z = randn((1, 4, 4), &mut rng).mapv(|v| 5.0 * v);
                let post = posterior(&z, t, &[0, 1, 2, 3, 4], &mix, &s).unwrap();
                let total: f64 = post.responsibilities.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let eps = analytic_eps(&z, t, &[0, 1, 2, 3, 4], &mix, &s).unwrap();
                assert!(eps.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn full_subset_prompt_matches_null() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let means: Vec<_> = (0..3).map(|_| randn((1, 4, 4), &mut rng)).collect();
        let d = AnalyticDenoiser::new(GaussianMixture::from_images(means, 0.5).unwrap(), s);
        let all = d.condition(&[0, 1, 2]).unwrap();
        let null = d.null_condition();
        let z = randn((1, 4, 4), &mut rng);
        for t in [0, 10, 1000] {
            let a = d.eps(&z, t, &all).unwrap();
            let b = d.eps(&z, t, &null).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-12);
            assert_eq!(b, d.eps(&z, t, &null).unwrap());
        }
    }

    #[test]
    fn condition_errors() {
        let d = AnalyticDenoiser::with_names(
            GaussianMixture::from_images(vec![scalar(0.0), scalar(1.0)], 1.0).unwrap(),
            sched(),
            vec!["stripes_h".into(), "checker".into()],
        );
        assert!(matches!(d.condition(&[]), Err(Error::Condition(_))));
        assert!(matches!(d.condition(&[5]), Err(Error::Condition(_))));
        assert!(matches!(d.prompt("dots"), Err(Error::Condition(_))));
        let h = d.prompt("stripes").unwrap();
        assert_eq!(d.components_of(&h).unwrap(), vec![0]);
        let other = AnalyticDenoiser::new(
            GaussianMixture::from_images(vec![scalar(0.0)], 1.0).unwrap(),
            sched(),
        );
        assert!(matches!(
            other.eps(&scalar(0.0), 1, &h),
            Err(Error::Condition(_))
        ));
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::from_images(vec![], 1.0).is_err());
        assert!(GaussianMixture::from_images(vec![scalar(0.0)], 0.0).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![scalar(0.0), scalar(1.0)], 1.0).is_err());
        assert!(
            GaussianMixture::from_images(vec![scalar(0.0), Array3::zeros((1, 2, 2))], 1.0).is_err()
        );
        let two = GaussianMixture::from_images(vec![scalar(0.0), scalar(1.0)], 1.0).unwrap();
        assert_eq!(two.weights(), &[0.5, 0.5]);
        let one = GaussianMixture::from_images(vec![scalar(0.0)], 1.0).unwrap();
        assert_eq!(one.weights(), &[1.0]);
    }
}
