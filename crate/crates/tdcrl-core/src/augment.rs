//! Style word-vector augmentation: mixup over a small basis of base styles
//! plus Gaussian jitter, regenerated once per epoch.

use crate::error::{Error, Result};
use crate::matrix::l2_norm;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

/// The predefined base styles: one word vector per domain word.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBasis {
    vectors: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl StyleBasis {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Domain("style basis needs at least one vector".into()));
        }
        if vectors.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} vectors vs {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        let dim = vectors[0].len();
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::Dimension("ragged style vectors".into()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite style vector".into()));
            }
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::Domain(format!("duplicate domain word {a:?}")));
            }
        }
        Ok(Self { vectors, labels })
    }

    /// Random basis in word-vector space, entries N(0, 1/dim) so each base
    /// vector has roughly unit norm.
    pub fn synthetic(labels: &[String], word_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (word_dim as f64).sqrt();
        let vectors = labels
            .iter()
            .map(|_| {
                (0..word_dim)
                    .map(|_| scale * crate::rng::standard_normal(rng))
                    .collect()
            })
            .collect();
        Self::new(vectors, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn word_dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, d: usize) -> &[f64] {
        &self.vectors[d]
    }

    pub fn label(&self, d: usize) -> &str {
        &self.labels[d]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Sub-basis of the first `count` styles, in predefined order.
    pub fn prefix(&self, count: usize) -> Result<StyleBasis> {
        if count == 0 || count > self.len() {
            return Err(Error::Domain(format!(
                "prefix {count} out of range for basis of {}",
                self.len()
            )));
        }
        StyleBasis::new(
            self.vectors[..count].to_vec(),
            self.labels[..count].to_vec(),
        )
    }

    /// Root-mean-square L2 norm of the base vectors.
    pub fn rms_norm(&self) -> f64 {
        let mean_sq: f64 = self
            .vectors
            .iter()
            .map(|v| l2_norm(v).powi(2))
            .sum::<f64>()
            / self.len() as f64;
        mean_sq.sqrt()
    }
}

/// A (possibly mixed) style point in word-vector space, with the provenance
/// needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleWordVector {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
    pub noise_seed: u64,
}

impl StyleWordVector {
    /// A pure base style: one-hot weights, no jitter.
    pub fn pure(basis: &StyleBasis, d: usize) -> Result<Self> {
        if d >= basis.len() {
            return Err(Error::Domain(format!(
                "style index {d} out of range for basis of {}",
                basis.len()
            )));
        }
        let mut weights = vec![0.0; basis.len()];
        weights[d] = 1.0;
        Ok(Self {
            vector: basis.vector(d).to_vec(),
            weights,
            noise_seed: 0,
        })
    }
}

/// Per-epoch augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Beta(alpha, alpha) concentration for the mix weights.
    pub concentration: f64,
    /// Std-dev of the additive Gaussian jitter; `None` means 0.01 x the RMS
    /// norm of the base vectors.
    pub noise_sigma: Option<f64>,
    /// Fraction of draws replaced by a uniformly chosen one-hot base style.
    pub random_sampling_fraction: f64,
    /// Styles generated per epoch.
    #[serde(rename = "M")]
    pub count: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            concentration: 0.5,
            noise_sigma: None,
            random_sampling_fraction: 0.0,
            count: 80,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concentration <= 0.0 {
            return Err(Error::Config(format!(
                "aug.concentration {} must be > 0",
                self.concentration
            )));
        }
        if let Some(s) = self.noise_sigma {
            if s < 0.0 || !s.is_finite() {
                return Err(Error::Config(format!("aug.noise_sigma {s} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.random_sampling_fraction) {
            return Err(Error::Config(format!(
                "aug.random_sampling_fraction {} must lie in [0, 1]",
                self.random_sampling_fraction
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("aug.M must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_noise_sigma(&self, basis: &StyleBasis) -> f64 {
        self.noise_sigma.unwrap_or(0.01 * basis.rms_norm())
    }
}

/// D i.i.d. Beta(alpha, alpha) draws renormalized onto the simplex.
pub fn sample_mix_weights(d: usize, concentration: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::Domain("cannot mix zero styles".into()));
    }
    if concentration <= 0.0 {
        return Err(Error::Domain(format!(
            "concentration {concentration} must be > 0"
        )));
    }
    let beta = Beta::new(concentration, concentration)
        .map_err(|e| Error::Domain(format!("beta distribution: {e}")))?;
    let mut weights: Vec<f64> = (0..d).map(|_| beta.sample(rng)).collect();
    let sum: f64 = weights.iter().sum();
    if sum <= f64::MIN_POSITIVE {
        // All draws underflowed to zero; fall back to the uniform mixture.
        weights.fill(1.0 / d as f64);
    } else {
        for w in &mut weights {
            *w /= sum;
        }
    }
    Ok(weights)
}

/// `s = sum_d w_d base_d + eps`, `eps ~ N(0, sigma^2 I)` drawn from a seed
/// recorded in the provenance.
pub fn make_style_vector(
    basis: &StyleBasis,
    weights: &[f64],
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<StyleWordVector> {
    if weights.len() != basis.len() {
        return Err(Error::Dimension(format!(
            "{} weights for basis of {}",
            weights.len(),
            basis.len()
        )));
    }
    let dim = basis.word_dim();
    let mut vector = vec![0.0; dim];
    for (d, &w) in weights.iter().enumerate() {
        for (v, &b) in vector.iter_mut().zip(basis.vector(d)) {
            *v += w * b;
        }
    }
    let noise_seed: u64 = rng.random();
    if noise_sigma > 0.0 {
        let mut noise_rng = crate::rng::substream(noise_seed, "style-noise", 0);
        for v in &mut vector {
            *v += noise_sigma * crate::rng::standard_normal(&mut noise_rng);
        }
    }
    Ok(StyleWordVector {
        vector,
        weights: weights.to_vec(),
        noise_seed,
    })
}

/// Draws the epoch's M style vectors. In random-sampling mode a configurable
/// fraction of draws uses one-hot weights over a uniformly chosen base style
/// instead of mixup weights; jitter applies either way.
pub fn generate_epoch_styles(
    basis: &StyleBasis,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<StyleWordVector>> {
    cfg.validate()?;
    let sigma = cfg.resolved_noise_sigma(basis);
    let mut styles = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let weights = if cfg.random_sampling_fraction > 0.0
            && rng.random::<f64>() < cfg.random_sampling_fraction
        {
            let pick = rng.random_range(0..basis.len());
            let mut w = vec![0.0; basis.len()];
            w[pick] = 1.0;
            w
        } else {
            sample_mix_weights(basis.len(), cfg.concentration, rng)?
        };
        styles.push(make_style_vector(basis, &weights, sigma, rng)?);
    }
    Ok(styles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn test_basis(d: usize, dim: usize, seed: u64) -> StyleBasis {
        let labels: Vec<String> = (0..d).map(|i| format!("style-{i}")).collect();
        StyleBasis::synthetic(&labels, dim, &mut substream(seed, "basis", 0)).unwrap()
    }

    #[test]
    fn single_style_weight_is_one() {
        let mut rng = substream(3, "aug", 0);
        let w = sample_mix_weights(1, 0.5, &mut rng).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn weights_live_on_the_simplex() {
        let mut rng = substream(3, "aug", 1);
        for d in [2usize, 5, 13] {
            for _ in 0..50 {
                let w = sample_mix_weights(d, 0.5, &mut rng).unwrap();
                assert!(w.iter().all(|&x| x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        assert!(sample_mix_weights(0, 0.5, &mut rng).is_err());
    }

    // Monte-Carlo symmetry oracle: exchangeable renormalized draws give each
    // coordinate mean 1/D.
    #[test]
    fn mix_weight_means_are_symmetric() {
        let d = 13;
        let trials = 10_000;
        let mut rng = substream(9, "aug-mc", 0);
        let mut sums = vec![0.0; d];
        let mut sq_sums = vec![0.0; d];
        for _ in 0..trials {
            let w = sample_mix_weights(d, 0.5, &mut rng).unwrap();
            for (i, &x) in w.iter().enumerate() {
                sums[i] += x;
                sq_sums[i] += x * x;
            }
        }
        for i in 0..d {
            let mean = sums[i] / trials as f64;
            let var = sq_sums[i] / trials as f64 - mean * mean;
            let se = (var / trials as f64).sqrt();
            assert!(
                (mean - 1.0 / d as f64).abs() <= 3.0 * se,
                "coordinate {i}: mean {mean}, se {se}"
            );
        }
    }

    #[test]
    fn one_hot_weights_recover_base_vector() {
        let basis = test_basis(4, 8, 1);
        let mut rng = substream(3, "aug", 2);
        let mut weights = vec![0.0; 4];
        weights[2] = 1.0;
        let s = make_style_vector(&basis, &weights, 0.0, &mut rng).unwrap();
        assert_eq!(s.vector, basis.vector(2));
    }

    #[test]
    fn even_mix_is_the_midpoint() {
        let basis = test_basis(2, 8, 2);
        let mut rng = substream(3, "aug", 3);
        let s = make_style_vector(&basis, &[0.5, 0.5], 0.0, &mut rng).unwrap();
        for i in 0..8 {
            let mid = 0.5 * basis.vector(0)[i] + 0.5 * basis.vector(1)[i];
            assert!((s.vector[i] - mid).abs() <= 1e-15);
        }
    }

    // Monte-Carlo mean oracle: jitter is zero-mean, so the empirical mean of
    // many draws approaches the pure mixture.
    #[test]
    fn noisy_draws_center_on_the_mixture() {
        let basis = test_basis(3, 4, 3);
        let weights = [0.2, 0.5, 0.3];
        let sigma = 0.01;
        let trials = 100_000;
        let mut rng = substream(17, "aug-mc", 1);
        let mut sums = [0.0; 4];
        for _ in 0..trials {
            let s = make_style_vector(&basis, &weights, sigma, &mut rng).unwrap();
            for (acc, v) in sums.iter_mut().zip(&s.vector) {
                *acc += v;
            }
        }
        let se = sigma / (trials as f64).sqrt();
        for (i, acc) in sums.iter().enumerate() {
            let mean = acc / trials as f64;
            let expect: f64 = (0..3).map(|d| weights[d] * basis.vector(d)[i]).sum();
            assert!(
                (mean - expect).abs() <= 3.0 * se,
                "coord {i}: mean {mean} vs {expect}"
            );
        }
    }

    #[test]
    fn epoch_generation_is_deterministic() {
        let basis = test_basis(13, 16, 4);
        let cfg = AugmentConfig::default();
        let a = generate_epoch_styles(&basis, &cfg, &mut substream(7, "augment", 0)).unwrap();
        let b = generate_epoch_styles(&basis, &cfg, &mut substream(7, "augment", 0)).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_basis_reproduces_single_vector() {
        let basis = test_basis(1, 8, 5);
        let cfg = AugmentConfig {
            count: 1,
            noise_sigma: Some(0.0),
            ..Default::default()
        };
        let styles = generate_epoch_styles(&basis, &cfg, &mut substream(7, "augment", 1)).unwrap();
        assert_eq!(styles.len(), 1);
        assert_eq!(styles[0].vector, basis.vector(0));
    }

    // With sigma = 0 every generated vector is exactly its provenance
    // mixture, hence inside the convex hull of the base vectors.
    #[test]
    fn noise_free_styles_stay_in_the_convex_hull() {
        let basis = test_basis(5, 8, 9);
        let cfg = AugmentConfig {
            count: 30,
            noise_sigma: Some(0.0),
            ..Default::default()
        };
        let styles = generate_epoch_styles(&basis, &cfg, &mut substream(7, "augment", 5)).unwrap();
        for s in &styles {
            assert!(s.weights.iter().all(|&w| w >= 0.0));
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (c, &v) in s.vector.iter().enumerate() {
                let mix: f64 = (0..5).map(|d| s.weights[d] * basis.vector(d)[c]).sum();
                assert!((v - mix).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn random_sampling_mode_yields_one_hot_weights() {
        let basis = test_basis(5, 8, 6);
        let cfg = AugmentConfig {
            count: 40,
            random_sampling_fraction: 1.0,
            noise_sigma: Some(0.0),
            ..Default::default()
        };
        let styles = generate_epoch_styles(&basis, &cfg, &mut substream(7, "augment", 2)).unwrap();
        for s in &styles {
            assert_eq!(s.weights.iter().filter(|&&w| w == 1.0).count(), 1);
            assert_eq!(s.weights.iter().filter(|&&w| w == 0.0).count(), 4);
        }
    }
}
