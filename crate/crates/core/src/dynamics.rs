//! State-transition models: deterministic drifts plus noise structure.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{tensor_quadrature, TruncatedGaussian};

/// Deterministic part of the dynamics, s+ = drift(s, a).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// s+ = A s + B a + c
    Affine {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        c: Vec<f64>,
    },
    /// Scalar s+ = rho * s + gain * tanh(a)
    TanhSaturated { rho: f64, gain: f64 },
}

impl Drift {
    pub fn affine_scalar(a: f64, b: f64) -> Drift {
        Drift::Affine {
            a: vec![vec![a]],
            b: vec![vec![b]],
            c: vec![],
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Drift::Affine { a, .. } => a.len(),
            Drift::TanhSaturated { .. } => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Drift::Affine { b, .. } => b.first().map_or(0, Vec::len),
            Drift::TanhSaturated { .. } => 1,
        }
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        match self {
            Drift::Affine { a, b, c } => {
                if a.len() != state_dim || a.iter().any(|row| row.len() != state_dim) {
                    return Err(Error::InvalidInput(format!(
                        "drift matrix A must be {state_dim}x{state_dim}"
                    )));
                }
                if b.len() != state_dim || b.iter().any(|row| row.len() != action_dim) {
                    return Err(Error::InvalidInput(format!(
                        "drift matrix B must be {state_dim}x{action_dim}"
                    )));
                }
                if !c.is_empty() && c.len() != state_dim {
                    return Err(Error::InvalidInput("drift offset c has wrong length".into()));
                }
                Ok(())
            }
            Drift::TanhSaturated { .. } => {
                if state_dim != 1 || action_dim != 1 {
                    return Err(Error::InvalidInput(
                        "tanh-saturated drift is scalar only".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            Drift::Affine { a: am, b: bm, c } => {
                let n = am.len();
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let mut acc = if c.is_empty() { 0.0 } else { c[i] };
                    for (j, &sj) in s.iter().enumerate() {
                        acc += am[i][j] * sj;
                    }
                    for (k, &ak) in a.iter().enumerate() {
                        acc += bm[i][k] * ak;
                    }
                    out[i] = acc;
                }
                out
            }
            Drift::TanhSaturated { rho, gain } => vec![rho * s[0] + gain * a[0].tanh()],
        }
    }

    /// (A, B, c) when the drift is affine.
    pub fn linear_parts(&self) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        match self {
            Drift::Affine { a, b, c } => {
                let c = if c.is_empty() { vec![0.0; a.len()] } else { c.clone() };
                Some((a.clone(), b.clone(), c))
            }
            Drift::TanhSaturated { .. } => None,
        }
    }
}

/// Exact finite-support kernel: outcome lists per (state, action) anchor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelEntry {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// (successor state, probability) pairs; probabilities sum to 1.
    pub outcomes: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    pub entries: Vec<KernelEntry>,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("kernel has no entries".into()));
        }
        for e in &self.entries {
            let total: f64 = e.outcomes.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "kernel probabilities at s={:?}, a={:?} sum to {total}, not 1",
                    e.s, e.a
                )));
            }
            if e.outcomes.iter().any(|&(_, p)| p < 0.0) {
                return Err(Error::InvalidInput("negative kernel probability".into()));
            }
        }
        Ok(())
    }

    /// Nearest anchor in (s, a) space.
    fn lookup(&self, s: &[f64], a: &[f64]) -> &KernelEntry {
        let dist = |e: &KernelEntry| -> f64 {
            let ds: f64 = e.s.iter().zip(s).map(|(x, y)| (x - y) * (x - y)).sum();
            let da: f64 = e.a.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
            ds + da
        };
        self.entries
            .iter()
            .min_by(|x, y| dist(x).partial_cmp(&dist(y)).unwrap())
            .unwrap()
    }
}

/// Stochastic state-transition map.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// s+ = f(s, a)
    Deterministic { drift: Drift },
    /// s+ = f(s, a) + w, w per-dimension truncated Gaussian
    AdditiveNoise {
        drift: Drift,
        noise: Vec<TruncatedGaussian>,
    },
    /// s+ = f(s, a) + diag(s) w, so the conditional covariance scales with s^2
    StateScaledNoise {
        drift: Drift,
        noise: Vec<TruncatedGaussian>,
    },
    /// Explicit finite-support kernel
    FiniteKernel { kernel: KernelSpec },
}

impl Transition {
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        match self {
            Transition::Deterministic { drift } => drift.validate(state_dim, action_dim),
            Transition::AdditiveNoise { drift, noise }
            | Transition::StateScaledNoise { drift, noise } => {
                drift.validate(state_dim, action_dim)?;
                if noise.len() != state_dim {
                    return Err(Error::InvalidInput(format!(
                        "need one noise term per state dimension ({state_dim}), got {}",
                        noise.len()
                    )));
                }
                Ok(())
            }
            Transition::FiniteKernel { kernel } => kernel.validate(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Transition::Deterministic { .. })
    }

    pub fn drift(&self) -> Option<&Drift> {
        match self {
            Transition::Deterministic { drift }
            | Transition::AdditiveNoise { drift, .. }
            | Transition::StateScaledNoise { drift, .. } => Some(drift),
            Transition::FiniteKernel { .. } => None,
        }
    }

    /// Draw a successor state.
    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Vec<f64> {
        match self {
            Transition::Deterministic { drift } => drift.eval(s, a),
            Transition::AdditiveNoise { drift, noise } => {
                let mut out = drift.eval(s, a);
                for (o, n) in out.iter_mut().zip(noise) {
                    *o += n.sample(rng);
                }
                out
            }
            Transition::StateScaledNoise { drift, noise } => {
                let mut out = drift.eval(s, a);
                for ((o, n), &si) in out.iter_mut().zip(noise).zip(s) {
                    *o += si * n.sample(rng);
                }
                out
            }
            Transition::FiniteKernel { kernel } => {
                let entry = kernel.lookup(s, a);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (sp, p) in &entry.outcomes {
                    acc += p;
                    if u < acc {
                        return sp.clone();
                    }
                }
                entry.outcomes.last().unwrap().0.clone()
            }
        }
    }

    /// Exact conditional mean E[s+ | s, a].
    pub fn mean(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            Transition::Deterministic { drift } => drift.eval(s, a),
            Transition::AdditiveNoise { drift, noise } => {
                let mut out = drift.eval(s, a);
                for (o, n) in out.iter_mut().zip(noise) {
                    *o += n.mean();
                }
                out
            }
            Transition::StateScaledNoise { drift, noise } => {
                let mut out = drift.eval(s, a);
                for ((o, n), &si) in out.iter_mut().zip(noise).zip(s) {
                    *o += si * n.mean();
                }
                out
            }
            Transition::FiniteKernel { kernel } => {
                let entry = kernel.lookup(s, a);
                let dim = entry.outcomes[0].0.len();
                let mut out = vec![0.0; dim];
                for (sp, p) in &entry.outcomes {
                    for (o, &x) in out.iter_mut().zip(sp) {
                        *o += p * x;
                    }
                }
                out
            }
        }
    }

    /// Diagonal of the conditional covariance of s+ given (s, a).
    pub fn covariance_diag(&self, s: &[f64], _a: &[f64]) -> Vec<f64> {
        match self {
            Transition::Deterministic { drift } => vec![0.0; drift.state_dim()],
            Transition::AdditiveNoise { noise, .. } => {
                noise.iter().map(TruncatedGaussian::variance).collect()
            }
            Transition::StateScaledNoise { noise, .. } => noise
                .iter()
                .zip(s)
                .map(|(n, &si)| si * si * n.variance())
                .collect(),
            Transition::FiniteKernel { kernel } => {
                let entry = kernel.lookup(s, _a);
                let mean = self.mean(s, _a);
                let mut var = vec![0.0; mean.len()];
                for (sp, p) in &entry.outcomes {
                    for ((v, &x), &m) in var.iter_mut().zip(sp).zip(&mean) {
                        *v += p * (x - m) * (x - m);
                    }
                }
                var
            }
        }
    }

    /// Weighted successor points for evaluating E[g(s+) | s, a].
    ///
    /// Deterministic transitions return a single unit-weight point; noisy
    /// transitions a tensor Gauss–Legendre rule over the truncation box;
    /// kernels their exact support. Weights sum to 1.
    pub fn expectation_nodes(
        &self,
        s: &[f64],
        a: &[f64],
        quad_points: usize,
    ) -> Vec<(f64, Vec<f64>)> {
        match self {
            Transition::Deterministic { drift } => vec![(1.0, drift.eval(s, a))],
            Transition::AdditiveNoise { drift, noise } => {
                let f = drift.eval(s, a);
                tensor_quadrature(noise, quad_points)
                    .into_iter()
                    .map(|(w, dw)| {
                        let pt = f.iter().zip(&dw).map(|(x, d)| x + d).collect();
                        (w, pt)
                    })
                    .collect()
            }
            Transition::StateScaledNoise { drift, noise } => {
                let f = drift.eval(s, a);
                // dimensions with s_i == 0 degenerate to a point mass
                tensor_quadrature(noise, quad_points)
                    .into_iter()
                    .map(|(w, dw)| {
                        let pt = f
                            .iter()
                            .zip(&dw)
                            .zip(s)
                            .map(|((x, d), &si)| x + si * d)
                            .collect();
                        (w, pt)
                    })
                    .collect()
            }
            Transition::FiniteKernel { kernel } => {
                let entry = kernel.lookup(s, a);
                entry
                    .outcomes
                    .iter()
                    .filter(|&&(_, p)| p > 0.0)
                    .map(|(sp, p)| (*p, sp.clone()))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_lqr_transition(sigma: f64) -> Transition {
        Transition::AdditiveNoise {
            drift: Drift::affine_scalar(0.9, 1.0),
            noise: vec![TruncatedGaussian::symmetric(sigma).unwrap()],
        }
    }

    #[test]
    fn affine_drift_evaluates() {
        let d = Drift::Affine {
            a: vec![vec![0.5, 0.1], vec![0.0, 0.8]],
            b: vec![vec![1.0], vec![0.5]],
            c: vec![0.0, -0.2],
        };
        let out = d.eval(&[1.0, 2.0], &[0.5]);
        assert_relative_eq!(out[0], 0.5 + 0.2 + 0.5);
        assert_relative_eq!(out[1], 1.6 + 0.25 - 0.2);
    }

    #[test]
    fn expectation_nodes_average_to_the_mean() {
        let t = scalar_lqr_transition(0.1);
        let s = [0.3];
        let a = [-0.2];
        let nodes = t.expectation_nodes(&s, &a, 31);
        let mean: f64 = nodes.iter().map(|(w, p)| w * p[0]).sum();
        assert_relative_eq!(mean, t.mean(&s, &a)[0], epsilon = 1e-10);
        let var: f64 = nodes
            .iter()
            .map(|(w, p)| w * (p[0] - mean) * (p[0] - mean))
            .sum();
        assert_relative_eq!(var, t.covariance_diag(&s, &a)[0], max_relative = 1e-8);
    }

    #[test]
    fn state_scaled_noise_vanishes_at_origin() {
        let t = Transition::StateScaledNoise {
            drift: Drift::affine_scalar(0.9, 1.0),
            noise: vec![TruncatedGaussian::symmetric(0.2).unwrap()],
        };
        assert_relative_eq!(t.covariance_diag(&[0.0], &[0.1])[0], 0.0);
        assert!(t.covariance_diag(&[2.0], &[0.1])[0] > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sp = t.sample(&[0.0], &[0.25], &mut rng);
        assert_relative_eq!(sp[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn kernel_sampling_matches_probabilities() {
        // chi-square goodness of fit at 1e5 draws, significance 1e-3
        let kernel = KernelSpec {
            entries: vec![KernelEntry {
                s: vec![0.0],
                a: vec![0.0],
                outcomes: vec![
                    (vec![0.0], 0.2),
                    (vec![1.0], 0.5),
                    (vec![2.0], 0.3),
                ],
            }],
        };
        kernel.validate().unwrap();
        let t = Transition::FiniteKernel { kernel };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let sp = t.sample(&[0.0], &[0.0], &mut rng)[0];
            counts[sp as usize] += 1;
        }
        let probs = [0.2, 0.5, 0.3];
        let chi2: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, p)| {
                let e = p * n as f64;
                (c as f64 - e) * (c as f64 - e) / e
            })
            .sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let crit = ChiSquared::new(2.0).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(chi2 < crit, "chi2 {chi2} exceeds critical value {crit}");
    }

    #[test]
    fn kernel_rejects_unnormalized_probabilities() {
        let kernel = KernelSpec {
            entries: vec![KernelEntry {
                s: vec![0.0],
                a: vec![0.0],
                outcomes: vec![(vec![0.0], 0.5), (vec![1.0], 0.6)],
            }],
        };
        assert!(kernel.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let t = scalar_lqr_transition(0.25);
        let draw = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| t.sample(&[0.1], &[0.0], &mut rng)[0]).collect()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }
}
