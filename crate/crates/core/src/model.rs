//! Deterministic prediction models for MPC and their regression-based fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Drift, Transition};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Where a prediction model came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TrueDeterministic,
    ExpectedValueAnalytic,
    ExpectedValueRegressed,
    Perturbed,
}

/// Regression basis for expected-value model fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// [1, s..., a...]
    Linear,
    /// All monomials of total degree <= 2 in (s, a).
    Polynomial2,
}

impl Basis {
    pub fn features(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(s.len() + a.len());
        z.extend_from_slice(s);
        z.extend_from_slice(a);
        match self {
            Basis::Linear => {
                let mut f = Vec::with_capacity(1 + z.len());
                f.push(1.0);
                f.extend_from_slice(&z);
                f
            }
            Basis::Polynomial2 => {
                let mut f = Vec::with_capacity(1 + z.len() + z.len() * (z.len() + 1) / 2);
                f.push(1.0);
                f.extend_from_slice(&z);
                for i in 0..z.len() {
                    for j in i..z.len() {
                        f.push(z[i] * z[j]);
                    }
                }
                f
            }
        }
    }

    pub fn feature_names(&self, state_dim: usize, action_dim: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
        names.extend((0..action_dim).map(|i| format!("a{i}")));
        match self {
            Basis::Linear => {
                let mut out = vec!["1".to_string()];
                out.extend(names);
                out
            }
            Basis::Polynomial2 => {
                let mut out = vec!["1".to_string()];
                out.extend(names.clone());
                for i in 0..names.len() {
                    for j in i..names.len() {
                        out.push(format!("{}*{}", names[i], names[j]));
                    }
                }
                out
            }
        }
    }

    pub fn len(&self, state_dim: usize, action_dim: usize) -> usize {
        let z = state_dim + action_dim;
        match self {
            Basis::Linear => 1 + z,
            Basis::Polynomial2 => 1 + z + z * (z + 1) / 2,
        }
    }
}

/// The deterministic map behind a prediction model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMap {
    /// A drift evaluated directly (true dynamics of a deterministic MDP).
    Drift(Drift),
    /// The exact conditional mean of a stochastic transition.
    Mean(Transition),
    /// Least-squares fit: one coefficient row per output dimension.
    Fitted {
        basis: Basis,
        coeffs: Vec<Vec<f64>>,
    },
    /// Another map plus a constant bias (model-error experiments).
    Biased { inner: Box<ModelMap>, bias: Vec<f64> },
}

/// Deterministic prediction model f(s, a) for the MPC recursion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionModel {
    pub map: ModelMap,
    pub provenance: Provenance,
    /// RMS residual of the fit, for regressed models.
    pub residual_rms: Option<f64>,
}

impl PredictionModel {
    pub fn true_deterministic(drift: Drift) -> Self {
        Self {
            map: ModelMap::Drift(drift),
            provenance: Provenance::TrueDeterministic,
            residual_rms: None,
        }
    }

    /// Analytic expected-value model f(s, a) = E[s+ | s, a].
    pub fn expected_value(transition: Transition) -> Self {
        Self {
            map: ModelMap::Mean(transition),
            provenance: Provenance::ExpectedValueAnalytic,
            residual_rms: None,
        }
    }

    pub fn with_bias(self, bias: Vec<f64>) -> Self {
        Self {
            map: ModelMap::Biased {
                inner: Box::new(self.map),
                bias,
            },
            provenance: Provenance::Perturbed,
            residual_rms: self.residual_rms,
        }
    }

    pub fn eval(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match &self.map {
            ModelMap::Drift(d) => d.eval(s, a),
            ModelMap::Mean(t) => t.mean(s, a),
            ModelMap::Fitted { basis, coeffs } => {
                let feats = basis.features(s, a);
                coeffs
                    .iter()
                    .map(|row| row.iter().zip(&feats).map(|(c, f)| c * f).sum())
                    .collect()
            }
            ModelMap::Biased { inner, bias } => {
                let mut out = eval_map(inner, s, a);
                for (o, b) in out.iter_mut().zip(bias) {
                    *o += b;
                }
                out
            }
        }
    }

    /// f clamped into the state box, per the model contract.
    pub fn eval_clamped(&self, grid: &Grid, s: &[f64], a: &[f64]) -> Vec<f64> {
        grid.clamp(&self.eval(s, a))
    }

    /// (A, B, c) such that f(s, a) = A s + B a + c, when the map is affine.
    pub fn linear_parts(&self) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        linear_parts_of(&self.map)
    }
}

fn eval_map(map: &ModelMap, s: &[f64], a: &[f64]) -> Vec<f64> {
    match map {
        ModelMap::Drift(d) => d.eval(s, a),
        ModelMap::Mean(t) => t.mean(s, a),
        ModelMap::Fitted { basis, coeffs } => {
            let feats = basis.features(s, a);
            coeffs
                .iter()
                .map(|row| row.iter().zip(&feats).map(|(c, f)| c * f).sum())
                .collect()
        }
        ModelMap::Biased { inner, bias } => {
            let mut out = eval_map(inner, s, a);
            for (o, b) in out.iter_mut().zip(bias) {
                *o += b;
            }
            out
        }
    }
}

fn linear_parts_of(map: &ModelMap) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    match map {
        ModelMap::Drift(d) => d.linear_parts(),
        ModelMap::Mean(t) => {
            let drift = t.drift()?;
            let (a, b, mut c) = drift.linear_parts()?;
            match t {
                Transition::AdditiveNoise { noise, .. } => {
                    for (ci, n) in c.iter_mut().zip(noise) {
                        *ci += n.mean();
                    }
                    Some((a, b, c))
                }
                // the scaled-noise mean depends on s only through s * mean(w);
                // still affine when the noise is centred
                Transition::StateScaledNoise { noise, .. } => {
                    if noise.iter().all(|n| n.mean().abs() < 1e-14) {
                        Some((a, b, c))
                    } else {
                        None
                    }
                }
                Transition::Deterministic { .. } => Some((a, b, c)),
                Transition::FiniteKernel { .. } => None,
            }
        }
        ModelMap::Fitted { basis, coeffs } => {
            if *basis != Basis::Linear {
                return None;
            }
            let n_out = coeffs.len();
            let k = coeffs.first()?.len();
            // layout [1, s..., a...]; infer dims from the square A block
            let state_dim = n_out;
            let action_dim = k.checked_sub(1 + state_dim)?;
            let mut a = vec![vec![0.0; state_dim]; n_out];
            let mut b = vec![vec![0.0; action_dim]; n_out];
            let mut c = vec![0.0; n_out];
            for (i, row) in coeffs.iter().enumerate() {
                c[i] = row[0];
                for j in 0..state_dim {
                    a[i][j] = row[1 + j];
                }
                for j in 0..action_dim {
                    b[i][j] = row[1 + state_dim + j];
                }
            }
            Some((a, b, c))
        }
        ModelMap::Biased { inner, bias } => {
            let (a, b, mut c) = linear_parts_of(inner)?;
            for (ci, bi) in c.iter_mut().zip(bias) {
                *ci += bi;
            }
            Some((a, b, c))
        }
    }
}

/// Least-squares fit of s+ on basis(s, a) from observed transitions.
///
/// Requires at least 10 samples per coefficient and a full-rank regressor
/// matrix; the error for a deficient fit names the dead feature directions.
pub fn fit_expected_value_model(
    data: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    basis: Basis,
) -> Result<PredictionModel> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no transition samples".into()));
    }
    let state_dim = data[0].0.len();
    let action_dim = data[0].1.len();
    let k = basis.len(state_dim, action_dim);
    let n = data.len();
    if n < 10 * k {
        return Err(Error::InvalidInput(format!(
            "need at least {} samples for {k} coefficients, got {n}",
            10 * k
        )));
    }
    let x = DMatrix::from_fn(n, k, |i, j| {
        basis.features(&data[i].0, &data[i].1)[j]
    });
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank_tol = smax * 1e-10;
    let deficient: Vec<usize> = {
        let vt = svd.v_t.as_ref().unwrap();
        let mut cols = Vec::new();
        for (idx, &sv) in svd.singular_values.iter().enumerate() {
            if sv <= rank_tol {
                // name the features loading on this null direction
                for j in 0..k {
                    if vt[(idx, j)].abs() > 0.3 && !cols.contains(&j) {
                        cols.push(j);
                    }
                }
            }
        }
        cols
    };
    if !deficient.is_empty() {
        let names = basis.feature_names(state_dim, action_dim);
        let named: Vec<&str> = deficient.iter().map(|&j| names[j].as_str()).collect();
        return Err(Error::RankDeficient(format!(
            "regressors not persistently exciting; deficient directions involve {named:?}"
        )));
    }
    let mut coeffs = Vec::with_capacity(state_dim);
    let mut sq_err = 0.0;
    for d in 0..state_dim {
        let y = DVector::from_fn(n, |i, _| data[i].2[d]);
        let beta = svd
            .solve(&y, rank_tol)
            .map_err(|e| Error::NoConvergence(format!("least squares failed: {e}")))?;
        let resid = &x * &beta - &y;
        sq_err += resid.norm_squared();
        coeffs.push(beta.iter().copied().collect::<Vec<f64>>());
    }
    let residual_rms = (sq_err / (n * state_dim) as f64).sqrt();
    Ok(PredictionModel {
        map: ModelMap::Fitted { basis, coeffs },
        provenance: Provenance::ExpectedValueRegressed,
        residual_rms: Some(residual_rms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::stream_rng;
    use crate::noise::TruncatedGaussian;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn make_data(
        n: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        // s+ = 0.5 s + a (+ noise)
        let mut rng = stream_rng(seed, 0);
        let noise = TruncatedGaussian::symmetric(noise_sigma.max(1e-12)).unwrap();
        (0..n)
            .map(|_| {
                let s = 2.0 * rng.random::<f64>() - 1.0;
                let a = 2.0 * rng.random::<f64>() - 1.0;
                let w = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (vec![s], vec![a], vec![0.5 * s + a + w])
            })
            .collect()
    }

    #[test]
    fn noiseless_fit_recovers_exact_coefficients() {
        let data = make_data(100, 0.0, 1);
        let model = fit_expected_value_model(&data, Basis::Linear).unwrap();
        match &model.map {
            ModelMap::Fitted { coeffs, .. } => {
                assert_relative_eq!(coeffs[0][0], 0.0, epsilon = 1e-8);
                assert_relative_eq!(coeffs[0][1], 0.5, epsilon = 1e-8);
                assert_relative_eq!(coeffs[0][2], 1.0, epsilon = 1e-8);
            }
            other => panic!("unexpected map {other:?}"),
        }
        assert!(model.residual_rms.unwrap() < 1e-10);
        assert_eq!(model.provenance, Provenance::ExpectedValueRegressed);
    }

    #[test]
    fn noisy_fit_lands_within_three_standard_errors() {
        let data = make_data(10_000, 0.1, 7);
        let model = fit_expected_value_model(&data, Basis::Linear).unwrap();
        // standard errors from the normal equations, as the regression oracle
        let n = data.len();
        let k = 3;
        let x = DMatrix::from_fn(n, k, |i, j| {
            Basis::Linear.features(&data[i].0, &data[i].1)[j]
        });
        let y = DVector::from_fn(n, |i, _| data[i].2[0]);
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let beta = &xtx_inv * x.transpose() * &y;
        let resid = &x * &beta - &y;
        let sigma2 = resid.norm_squared() / (n - k) as f64;
        let truth = [0.0, 0.5, 1.0];
        let fitted = match &model.map {
            ModelMap::Fitted { coeffs, .. } => coeffs[0].clone(),
            _ => unreachable!(),
        };
        for j in 0..k {
            let se = (sigma2 * xtx_inv[(j, j)]).sqrt();
            assert!(
                (fitted[j] - truth[j]).abs() <= 3.0 * se,
                "coefficient {j}: {} vs {} (se {se})",
                fitted[j],
                truth[j]
            );
        }
    }

    #[test]
    fn all_zero_data_is_rank_deficient_in_named_directions() {
        let data: Vec<_> = (0..100).map(|_| (vec![0.0], vec![0.0], vec![0.0])).collect();
        match fit_expected_value_model(&data, Basis::Linear) {
            Err(Error::RankDeficient(msg)) => {
                assert!(msg.contains("s0") || msg.contains("a0"), "{msg}");
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let data = make_data(20, 0.0, 2);
        assert!(fit_expected_value_model(&data, Basis::Linear).is_err());
    }

    #[test]
    fn fitted_linear_model_exposes_linear_parts() {
        let data = make_data(120, 0.0, 3);
        let model = fit_expected_value_model(&data, Basis::Linear).unwrap();
        let (a, b, c) = model.linear_parts().unwrap();
        assert_relative_eq!(a[0][0], 0.5, epsilon = 1e-8);
        assert_relative_eq!(b[0][0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(c[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn biased_model_shifts_predictions() {
        let model = PredictionModel::true_deterministic(Drift::affine_scalar(0.5, 1.0))
            .with_bias(vec![0.5]);
        assert_eq!(model.provenance, Provenance::Perturbed);
        assert_relative_eq!(model.eval(&[1.0], &[0.0])[0], 1.0);
    }
}
