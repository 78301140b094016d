//! Truncated Gaussian noise with exact moments and fixed quadrature.
//!
//! All process noise in this crate has compact support by construction: a
//! Gaussian restricted to a finite box (default ±4σ). Sampling uses the
//! inverse-CDF transform, so every draw consumes exactly one uniform and
//! replay is bit-exact for a given RNG stream.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::quad::gauss_legendre_on;

/// A scalar Gaussian N(mu, sigma^2) truncated to [lo, hi].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl TruncatedGaussian {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "noise sigma must be positive and finite, got {sigma}"
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "truncation box [{lo}, {hi}] must be finite and non-empty"
            )));
        }
        let out = Self { mu, sigma, lo, hi };
        if out.mass() < 1e-12 {
            return Err(Error::InvalidInput(
                "truncation box carries negligible probability mass".into(),
            ));
        }
        Ok(out)
    }

    /// Zero-mean noise truncated at ±4σ.
    pub fn symmetric(sigma: f64) -> Result<Self> {
        Self::new(0.0, sigma, -4.0 * sigma, 4.0 * sigma)
    }

    fn alpha(&self) -> f64 {
        (self.lo - self.mu) / self.sigma
    }

    fn beta(&self) -> f64 {
        (self.hi - self.mu) / self.sigma
    }

    /// Probability mass of the untruncated Gaussian inside the box.
    pub fn mass(&self) -> f64 {
        let n = std_normal();
        n.cdf(self.beta()) - n.cdf(self.alpha())
    }

    /// Exact mean of the truncated distribution.
    pub fn mean(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        self.mu + self.sigma * (phi(a) - phi(b)) / self.mass()
    }

    /// Exact variance of the truncated distribution.
    pub fn variance(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        let z = self.mass();
        let shift = (phi(a) - phi(b)) / z;
        self.sigma * self.sigma * (1.0 + (a * phi(a) - b * phi(b)) / z - shift * shift)
    }

    /// Normalized density at `x` (zero outside the box).
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        phi((x - self.mu) / self.sigma) / (self.sigma * self.mass())
    }

    /// One draw via the inverse-CDF transform; always lands in [lo, hi].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = std_normal();
        let (ca, cb) = (n.cdf(self.alpha()), n.cdf(self.beta()));
        let u: f64 = rng.random::<f64>().clamp(1e-16, 1.0 - 1e-16);
        let p = (ca + u * (cb - ca)).clamp(1e-300, 1.0 - 1e-16);
        let x = self.mu + self.sigma * n.inverse_cdf(p);
        x.clamp(self.lo, self.hi)
    }

    /// Fixed quadrature for expectations against this density.
    ///
    /// Gauss–Legendre nodes on the truncation box weighted by the density and
    /// renormalized so constants integrate exactly to 1.
    pub fn quadrature(&self, n_points: usize) -> Vec<(f64, f64)> {
        let raw: Vec<(f64, f64)> = gauss_legendre_on(n_points, self.lo, self.hi)
            .into_iter()
            .map(|(x, w)| (w * self.pdf(x), x))
            .collect();
        let total: f64 = raw.iter().map(|&(w, _)| w).sum();
        raw.into_iter().map(|(w, x)| (w / total, x)).collect()
    }
}

/// Independent per-dimension truncated Gaussians.
pub fn sample_vec<R: Rng + ?Sized>(noise: &[TruncatedGaussian], rng: &mut R) -> Vec<f64> {
    noise.iter().map(|n| n.sample(rng)).collect()
}

/// Tensor-product quadrature over independent noise dimensions.
///
/// Returns (weight, point) pairs; weights sum to 1.
pub fn tensor_quadrature(noise: &[TruncatedGaussian], n_per_dim: usize) -> Vec<(f64, Vec<f64>)> {
    let rules: Vec<Vec<(f64, f64)>> = noise.iter().map(|n| n.quadrature(n_per_dim)).collect();
    let mut out: Vec<(f64, Vec<f64>)> = vec![(1.0, Vec::new())];
    for rule in &rules {
        let mut next = Vec::with_capacity(out.len() * rule.len());
        for (w0, pt) in &out {
            for &(w, x) in rule {
                let mut p = pt.clone();
                p.push(x);
                next.push((w0 * w, p));
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_truncation_has_zero_mean() {
        let n = TruncatedGaussian::symmetric(0.3).unwrap();
        assert_relative_eq!(n.mean(), 0.0, epsilon = 1e-15);
        // ±4σ truncation trims a little variance
        let v = n.variance();
        assert!(v < 0.09 && v > 0.09 * 0.99, "variance {v}");
    }

    #[test]
    fn shifted_box_induces_nonzero_mean() {
        let n = TruncatedGaussian::new(0.0, 0.2, -0.1, 0.8).unwrap();
        assert!(n.mean() > 0.01);
    }

    #[test]
    fn samples_stay_inside_the_box() {
        let n = TruncatedGaussian::new(0.1, 0.5, -1.2, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let x = n.sample(&mut rng);
            assert!((-1.2..=0.9).contains(&x));
        }
    }

    #[test]
    fn sample_moments_match_analytic_moments() {
        let n = TruncatedGaussian::new(-0.05, 0.3, -0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..200_000).map(|_| n.sample(&mut rng)).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / draws.len() as f64;
        assert_relative_eq!(m, n.mean(), epsilon = 3e-3);
        assert_relative_eq!(v, n.variance(), max_relative = 2e-2);
    }

    #[test]
    fn quadrature_reproduces_moments() {
        let n = TruncatedGaussian::new(0.2, 0.4, -1.4, 1.8).unwrap();
        for (pts, tol) in [(15, 1e-6), (31, 1e-11)] {
            let rule = n.quadrature(pts);
            let total: f64 = rule.iter().map(|&(w, _)| w).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-14);
            let mean: f64 = rule.iter().map(|&(w, x)| w * x).sum();
            assert_relative_eq!(mean, n.mean(), epsilon = tol);
            let var: f64 = rule.iter().map(|&(w, x)| w * (x - mean) * (x - mean)).sum();
            assert_relative_eq!(var, n.variance(), max_relative = tol);
        }
    }

    #[test]
    fn tensor_rule_weights_sum_to_one() {
        let dims = vec![
            TruncatedGaussian::symmetric(0.1).unwrap(),
            TruncatedGaussian::symmetric(0.5).unwrap(),
        ];
        let rule = tensor_quadrature(&dims, 15);
        assert_eq!(rule.len(), 225);
        let total: f64 = rule.iter().map(|(w, _)| w).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TruncatedGaussian::new(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(TruncatedGaussian::new(0.0, 1.0, 1.0, -1.0).is_err());
        assert!(TruncatedGaussian::new(0.0, 0.01, 5.0, 6.0).is_err());
    }
}
