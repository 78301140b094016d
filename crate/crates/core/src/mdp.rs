//! Discretized stochastic MDPs, closed-loop simulation, and Monte-Carlo
//! estimators for performance and steady-state behaviour.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cost::{Constraint, StageCost};
use crate::dynamics::Transition;
use crate::error::{Error, Result};
use crate::grid::{AxisSpec, Grid};
use crate::noise::TruncatedGaussian;

/// RNG stream for replicate `index` of a seeded experiment.
///
/// Streams derived from the same seed are independent and replayable, which
/// makes Monte-Carlo loops safe to parallelize.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A discretized stochastic MDP with extended-real stage cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularMdp {
    pub state_grid: Grid,
    pub action_grid: Grid,
    pub transition: Transition,
    pub cost: StageCost,
    pub constraint: Constraint,
    pub gamma: f64,
}

/// JSON-facing MDP description with grids given as axis specs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub state_grid: Vec<AxisSpec>,
    pub action_grid: Vec<AxisSpec>,
    pub transition: Transition,
    pub cost: StageCost,
    #[serde(default = "Constraint::default_none")]
    pub constraint: Constraint,
    pub gamma: f64,
}

impl Constraint {
    fn default_none() -> Constraint {
        Constraint::None
    }
}

impl MdpSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        let mdp = TabularMdp {
            state_grid: Grid::from_specs(&self.state_grid)?,
            action_grid: Grid::from_specs(&self.action_grid)?,
            transition: self.transition.clone(),
            cost: self.cost.clone(),
            constraint: self.constraint.clone(),
            gamma: self.gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidInput(format!(
                "discount must lie strictly inside (0, 1), got {}",
                self.gamma
            )));
        }
        let (sd, ad) = (self.state_grid.dim(), self.action_grid.dim());
        self.transition.validate(sd, ad)?;
        self.cost.validate(sd, ad)?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<TabularMdp> {
        let spec: MdpSpec = serde_json::from_str(text)?;
        spec.build()
    }

    /// Constraint-encoded stage cost: L(s, a) if h(s, a) <= 0, else +inf.
    pub fn stage_cost(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if !self.state_grid.contains(s) {
            return Err(Error::OutOfDomain(format!(
                "state {s:?} outside the state box"
            )));
        }
        if !self.action_grid.contains(a) {
            return Err(Error::OutOfDomain(format!(
                "action {a:?} outside the action box"
            )));
        }
        if self.constraint.satisfied(s, a) {
            Ok(self.cost.eval(s, a))
        } else {
            Ok(f64::INFINITY)
        }
    }

    /// Rollout horizon H with gamma^H * cost_scale below `tail_tol`.
    pub fn tail_horizon(&self, cost_scale: f64, tail_tol: f64) -> usize {
        let h = (tail_tol / cost_scale.max(1e-300)).ln() / self.gamma.ln();
        (h.ceil().max(1.0)) as usize
    }
}

/// One realized closed-loop run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    /// Discounted cost sum over the recorded horizon.
    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        let mut acc = 0.0;
        let mut g = 1.0;
        for &c in &self.costs {
            if c == f64::INFINITY {
                return f64::INFINITY;
            }
            acc += g * c;
            g *= gamma;
        }
        acc
    }

    /// CSV rows `k, s..., a..., cost`; the final state row leaves action and
    /// cost blank.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let sd = self.states.first().map_or(0, Vec::len);
        let ad = self.actions.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string()];
        header.extend((0..sd).map(|i| format!("s{i}")));
        header.extend((0..ad).map(|i| format!("a{i}")));
        header.push("cost".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.states.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.states[k].iter().map(|v| format!("{v}")));
            if k < self.actions.len() {
                row.extend(self.actions[k].iter().map(|v| format!("{v}")));
                row.push(format!("{}", self.costs[k]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), ad + 1));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// A state-feedback policy.
pub trait Policy: Sync {
    fn action(&self, s: &[f64]) -> Result<Vec<f64>>;
}

/// The zero policy.
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn action(&self, _s: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.action_dim])
    }
}

/// u = -K s, clamped into the action box when one is supplied.
pub struct LinearFeedback {
    pub k: Vec<Vec<f64>>,
    pub clamp_to: Option<Grid>,
}

impl Policy for LinearFeedback {
    fn action(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut a: Vec<f64> = self
            .k
            .iter()
            .map(|row| -row.iter().zip(s).map(|(k, x)| k * x).sum::<f64>())
            .collect();
        if let Some(grid) = &self.clamp_to {
            a = grid.clamp(&a);
        }
        Ok(a)
    }
}

/// Arbitrary closure policy, mostly for tests.
pub struct FnPolicy<F: Fn(&[f64]) -> Vec<f64> + Sync>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Policy for FnPolicy<F> {
    fn action(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok((self.0)(s))
    }
}

/// Simulate the closed-loop chain for exactly `horizon` transitions.
///
/// Deterministic in `seed`; fails if the policy leaves the action box or a
/// sampled successor escapes the declared state box.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    s0: &[f64],
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    if horizon < 1 {
        return Err(Error::InvalidInput("rollout horizon must be >= 1".into()));
    }
    if !mdp.state_grid.contains(s0) {
        return Err(Error::OutOfDomain(format!(
            "initial state {s0:?} outside the state box"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout_with_rng(mdp, policy, s0, horizon, seed, &mut rng, 0.0)
}

/// Rollout drawing its noise from stream (seed, stream); two policies run on
/// the same stream see the same noise realization (common random numbers).
pub fn rollout_paired(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    s0: &[f64],
    horizon: usize,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    let mut rng = stream_rng(seed, stream);
    rollout_with_rng(mdp, policy, s0, horizon, seed, &mut rng, 0.0)
}

fn rollout_with_rng(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    s0: &[f64],
    horizon: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
    perturb_radius: f64,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut s = s0.to_vec();
    states.push(s.clone());
    for _ in 0..horizon {
        let mut a = policy.action(&s)?;
        if perturb_radius > 0.0 {
            let delta = sample_ball(rng, a.len(), perturb_radius);
            for (ai, di) in a.iter_mut().zip(delta) {
                *ai += di;
            }
            a = mdp.action_grid.clamp(&a);
        }
        if !mdp.action_grid.contains(&a) {
            return Err(Error::OutOfDomain(format!(
                "policy action {a:?} outside the action box"
            )));
        }
        let cost = mdp.stage_cost(&s, &a)?;
        let sp = mdp.transition.sample(&s, &a, rng);
        if !mdp.state_grid.contains(&sp) {
            return Err(Error::OutOfDomain(format!(
                "sampled successor {sp:?} escaped the state box (truncation guarantee broken)"
            )));
        }
        actions.push(a);
        costs.push(cost);
        states.push(sp.clone());
        s = sp;
    }
    Ok(Trajectory {
        states,
        actions,
        costs,
        seed,
    })
}

/// Uniform draw from the Euclidean ball of radius `r`.
pub(crate) fn sample_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, r: f64) -> Vec<f64> {
    if dim == 1 {
        let u: f64 = rng.random();
        return vec![(2.0 * u - 1.0) * r];
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut dir: Vec<f64> = (0..dim)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-16, 1.0 - 1e-16);
            normal.inverse_cdf(u)
        })
        .collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let radius = r * rng.random::<f64>().powf(1.0 / dim as f64);
    for d in dir.iter_mut() {
        *d *= radius / norm;
    }
    dir
}

/// Monte-Carlo estimate of the truncated discounted cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerformanceEstimate {
    pub mean: f64,
    /// 95% normal-approximation half width; zero variance gives zero width.
    pub ci_half_width: f64,
    pub n_rollouts: usize,
    pub horizon: usize,
    /// Count of rollouts that hit an infinite stage cost.
    pub n_infeasible: usize,
}

/// Estimate J(pi) from `s0` by averaging discounted rollout costs.
///
/// Replicate `i` uses RNG stream (seed, i), so estimates are reproducible and
/// safely parallel. Returns +inf as the mean if any rollout hits an infinite
/// stage cost.
pub fn estimate_performance(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    s0: &[f64],
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<PerformanceEstimate> {
    if n_rollouts < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 rollouts for a variance estimate".into(),
        ));
    }
    let returns: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            rollout_with_rng(mdp, policy, s0, horizon, seed, &mut rng, 0.0)
                .map(|t| t.discounted_cost(mdp.gamma))
        })
        .collect::<Result<_>>()?;
    let n_infeasible = returns.iter().filter(|r| **r == f64::INFINITY).count();
    if n_infeasible > 0 {
        return Ok(PerformanceEstimate {
            mean: f64::INFINITY,
            ci_half_width: f64::INFINITY,
            n_rollouts,
            horizon,
            n_infeasible,
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    Ok(PerformanceEstimate {
        mean,
        ci_half_width: 1.96 * (var / n).sqrt(),
        n_rollouts,
        horizon,
        n_infeasible,
    })
}

/// Empirical steady-state summary of the perturbed closed loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SteadyStateReport {
    /// Mass per state-grid cell (row-major over cells), summing to 1.
    pub histogram: Vec<f64>,
    /// Tight bounding box of the post-burn-in samples.
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    pub perturbation_radius: f64,
    pub diverged: bool,
    pub n_samples: usize,
    /// Post-burn-in states, in visit order.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl SteadyStateReport {
    /// Variance of one state coordinate over the retained samples.
    pub fn sample_variance(&self, dim: usize) -> f64 {
        let n = self.samples.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.samples.iter().map(|s| s[dim]).sum::<f64>() / n;
        self.samples
            .iter()
            .map(|s| (s[dim] - mean) * (s[dim] - mean))
            .sum::<f64>()
            / (n - 1.0)
    }
}

/// Simulate the chain under `policy` plus a uniform action-ball perturbation
/// of radius `r`, and histogram the post-burn-in states on the grid cells.
///
/// Escaping the state box sets `diverged` (a reported outcome, not an error)
/// and stops the chain.
pub fn estimate_steady_state(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    r: f64,
    s0: &[f64],
    burn_in: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SteadyStateReport> {
    if r < 0.0 {
        return Err(Error::InvalidInput("perturbation radius must be >= 0".into()));
    }
    let sd = mdp.state_grid.dim();
    let cells: usize = (0..sd)
        .map(|d| (mdp.state_grid.axis(d).len() - 1).max(1))
        .product();
    let mut histogram = vec![0.0; cells];
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    let mut diverged = false;
    let mut rng = stream_rng(seed, 0);
    let mut s = s0.to_vec();
    'chain: for step in 0..(burn_in + n_samples) {
        let mut a = policy.action(&s)?;
        if r > 0.0 {
            let delta = sample_ball(&mut rng, a.len(), r);
            for (ai, di) in a.iter_mut().zip(delta) {
                *ai += di;
            }
        }
        a = mdp.action_grid.clamp(&a);
        let sp = mdp.transition.sample(&s, &a, &mut rng);
        if !mdp.state_grid.contains(&sp) {
            diverged = true;
            break 'chain;
        }
        if step >= burn_in {
            samples.push(sp.clone());
            let mut cell = 0usize;
            for d in 0..sd {
                let axis = mdp.state_grid.axis(d);
                let n_cells_d = (axis.len() - 1).max(1);
                let (i, _) = axis.locate(sp[d]);
                cell = cell * n_cells_d + i.min(n_cells_d - 1);
            }
            histogram[cell] += 1.0;
        }
        s = sp;
    }
    let total: f64 = histogram.iter().sum();
    if total > 0.0 {
        for h in histogram.iter_mut() {
            *h /= total;
        }
    }
    let (mut lo, mut hi) = (vec![f64::INFINITY; sd], vec![f64::NEG_INFINITY; sd]);
    for s in &samples {
        for d in 0..sd {
            lo[d] = lo[d].min(s[d]);
            hi[d] = hi[d].max(s[d]);
        }
    }
    Ok(SteadyStateReport {
        histogram,
        support_lo: lo,
        support_hi: hi,
        perturbation_radius: r,
        diverged,
        n_samples: samples.len(),
        samples,
    })
}

/// Scalar stochastic linear system with quadratic costs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StochasticLinearSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Output map y = C x.
    pub c: Vec<Vec<f64>>,
    /// Process noise, one term per state dimension.
    #[serde(default)]
    pub noise: Option<Vec<TruncatedGaussian>>,
    /// Measurement noise on recorded outputs.
    #[serde(default)]
    pub measurement_noise: Option<Vec<TruncatedGaussian>>,
    /// State cost weight (PSD).
    pub q_cost: Vec<Vec<f64>>,
    /// Input cost weight (PD).
    pub r_cost: Vec<Vec<f64>>,
}

impl StochasticLinearSystem {
    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput("system needs state and input dims".into()));
        }
        if self.a.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInput("A must be square".into()));
        }
        if self.b.len() != n {
            return Err(Error::InvalidInput("B must have one row per state".into()));
        }
        if self.c.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInput("C must have one column per state".into()));
        }
        if let Some(noise) = &self.noise {
            if noise.len() != n {
                return Err(Error::InvalidInput("need one process-noise term per state".into()));
            }
        }
        if let Some(mn) = &self.measurement_noise {
            if mn.len() != self.output_dim() {
                return Err(Error::InvalidInput(
                    "need one measurement-noise term per output".into(),
                ));
            }
        }
        if self.q_cost.len() != n || self.r_cost.len() != m {
            return Err(Error::InvalidInput("cost matrices have wrong shape".into()));
        }
        Ok(())
    }

    /// Diagonal of the effective process covariance (truncated moments).
    pub fn noise_covariance_diag(&self) -> Vec<f64> {
        match &self.noise {
            Some(noise) => noise.iter().map(TruncatedGaussian::variance).collect(),
            None => vec![0.0; self.state_dim()],
        }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.c
            .iter()
            .map(|row| row.iter().zip(x).map(|(c, xi)| c * xi).sum())
            .collect()
    }

    /// Simulate under the given input sequence from `x0`.
    ///
    /// Returns states x_0..x_T and measured outputs y_0..y_T (with
    /// measurement noise applied when configured).
    pub fn simulate(
        &self,
        x0: &[f64],
        inputs: &[Vec<f64>],
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = stream_rng(seed, 0);
        let n = self.state_dim();
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        let mut ys = Vec::with_capacity(inputs.len() + 1);
        let mut x = x0.to_vec();
        let measure = |x: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut y = self.output(x);
            if let Some(mn) = &self.measurement_noise {
                for (yi, nv) in y.iter_mut().zip(mn) {
                    *yi += nv.sample(rng);
                }
            }
            y
        };
        xs.push(x.clone());
        ys.push(measure(&x, &mut rng));
        for u in inputs {
            let mut xp = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, &xj) in x.iter().enumerate() {
                    acc += self.a[i][j] * xj;
                }
                for (k, &uk) in u.iter().enumerate() {
                    acc += self.b[i][k] * uk;
                }
                xp[i] = acc;
            }
            if let Some(noise) = &self.noise {
                for (xpi, nv) in xp.iter_mut().zip(noise) {
                    *xpi += nv.sample(&mut rng);
                }
            }
            xs.push(xp.clone());
            ys.push(measure(&xp, &mut rng));
            x = xp;
        }
        (xs, ys)
    }

    /// The MDP on the true state with output-weighted stage cost
    /// L(x, u) = (Cx)' Q_y (Cx) + u' R u, as a tabular problem.
    pub fn as_mdp(&self, state_grid: Grid, action_grid: Grid, gamma: f64) -> Result<TabularMdp> {
        // fold C into the state weight: Q_x = C' Q_y C
        let n = self.state_dim();
        let qy = &self.q_cost;
        let qdim = qy.len();
        let mut qx = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (r, qr) in qy.iter().enumerate().take(qdim) {
                    for (c, &q_rc) in qr.iter().enumerate().take(qdim) {
                        acc += self.c[r][i] * q_rc * self.c[c][j];
                    }
                }
                qx[i][j] = acc;
            }
        }
        let drift = crate::dynamics::Drift::Affine {
            a: self.a.clone(),
            b: self.b.clone(),
            c: vec![],
        };
        let transition = match &self.noise {
            Some(noise) => Transition::AdditiveNoise {
                drift,
                noise: noise.clone(),
            },
            None => Transition::Deterministic { drift },
        };
        let mdp = TabularMdp {
            state_grid,
            action_grid,
            transition,
            cost: StageCost::Quadratic {
                q: qx,
                r: self.r_cost.clone(),
            },
            constraint: Constraint::None,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Output-cost weight translated onto the state: C' Q_y C.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Drift;
    use approx::assert_relative_eq;

    fn contraction_mdp() -> TabularMdp {
        TabularMdp {
            state_grid: Grid::new(vec![crate::grid::Axis::uniform(-2.0, 2.0, 41).unwrap()])
                .unwrap(),
            action_grid: Grid::new(vec![crate::grid::Axis::uniform(-1.0, 1.0, 21).unwrap()])
                .unwrap(),
            transition: Transition::Deterministic {
                drift: Drift::affine_scalar(0.5, 0.0),
            },
            cost: StageCost::quadratic_scalar(1.0, 0.0),
            constraint: Constraint::None,
            gamma: 0.9,
        }
    }

    fn scalar_lqr(sigma: f64) -> TabularMdp {
        TabularMdp {
            state_grid: Grid::new(vec![crate::grid::Axis::uniform(-2.0, 2.0, 81).unwrap()])
                .unwrap(),
            action_grid: Grid::new(vec![crate::grid::Axis::uniform(-1.5, 1.5, 31).unwrap()])
                .unwrap(),
            transition: Transition::AdditiveNoise {
                drift: Drift::affine_scalar(0.9, 1.0),
                noise: vec![TruncatedGaussian::symmetric(sigma).unwrap()],
            },
            cost: StageCost::quadratic_scalar(1.0, 0.1),
            constraint: Constraint::None,
            gamma: 0.9,
        }
    }

    #[test]
    fn stage_cost_constraint_encoding() {
        // L = s^2 + a^2, h = s - 1
        let mut mdp = contraction_mdp();
        mdp.cost = StageCost::quadratic_scalar(1.0, 1.0);
        mdp.constraint = Constraint::Affine {
            rows: vec![crate::cost::AffineRow {
                c_s: vec![1.0],
                c_a: vec![],
                offset: -1.0,
            }],
        };
        assert_relative_eq!(mdp.stage_cost(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(mdp.stage_cost(&[2.0], &[0.0]).unwrap(), f64::INFINITY);
        assert_relative_eq!(mdp.stage_cost(&[1.0], &[1.0]).unwrap(), 2.0);
        assert!(mdp.stage_cost(&[3.0], &[0.0]).is_err());
    }

    #[test]
    fn rollout_contracts_by_half() {
        let mdp = contraction_mdp();
        let pi = ZeroPolicy { action_dim: 1 };
        let t = rollout(&mdp, &pi, &[1.0], 3, 0).unwrap();
        let states: Vec<f64> = t.states.iter().map(|s| s[0]).collect();
        assert_eq!(states.len(), 4);
        for (got, want) in states.iter().zip([1.0, 0.5, 0.25, 0.125]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_dynamics_zero_policy_stays_at_zero() {
        let mut mdp = contraction_mdp();
        mdp.transition = Transition::Deterministic {
            drift: Drift::affine_scalar(0.0, 0.0),
        };
        let pi = ZeroPolicy { action_dim: 1 };
        let t = rollout(&mdp, &pi, &[0.0], 5, 3).unwrap();
        assert!(t.states.iter().all(|s| s[0] == 0.0));
        assert!(t.costs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn rollouts_replay_bit_exactly_for_a_seed() {
        let mdp = scalar_lqr(0.1);
        let pi = ZeroPolicy { action_dim: 1 };
        let a = rollout(&mdp, &pi, &[0.5], 40, 9).unwrap();
        let b = rollout(&mdp, &pi, &[0.5], 40, 9).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.costs, b.costs);
        let c = rollout(&mdp, &pi, &[0.5], 40, 10).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn deterministic_geometric_series_performance() {
        // s+ = 0.5 s, L = s^2, gamma = 0.9 from s0 = 1:
        // J = sum (0.9 * 0.25)^k = 1 / (1 - 0.225)
        let mdp = contraction_mdp();
        let pi = ZeroPolicy { action_dim: 1 };
        let horizon = mdp.tail_horizon(1.0, 1e-10);
        let est = estimate_performance(&mdp, &pi, &[1.0], 4, horizon, 0).unwrap();
        assert_relative_eq!(est.mean, 1.0 / (1.0 - 0.225), epsilon = 1e-8);
        // deterministic MDP: zero CI width
        assert_eq!(est.ci_half_width, 0.0);
    }

    #[test]
    fn zero_cost_gives_exactly_zero() {
        let mut mdp = contraction_mdp();
        mdp.cost = StageCost::Zero;
        let pi = ZeroPolicy { action_dim: 1 };
        let est = estimate_performance(&mdp, &pi, &[1.0], 3, 50, 0).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn performance_requires_two_rollouts() {
        let mdp = contraction_mdp();
        let pi = ZeroPolicy { action_dim: 1 };
        assert!(estimate_performance(&mdp, &pi, &[1.0], 1, 10, 0).is_err());
    }

    #[test]
    fn steady_state_of_contraction_is_a_point() {
        let mdp = contraction_mdp();
        let pi = ZeroPolicy { action_dim: 1 };
        let report = estimate_steady_state(&mdp, &pi, 0.0, &[1.0], 200, 500, 0).unwrap();
        assert!(!report.diverged);
        assert_relative_eq!(report.support_lo[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(report.support_hi[0], 0.0, epsilon = 1e-12);
        let mass: f64 = report.histogram.iter().sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn lqr_steady_state_variance_matches_lyapunov_fixed_point() {
        // closed loop s+ = a_cl s + w has stationary variance v = W / (1 - a_cl^2)
        let mdp = scalar_lqr(0.1);
        let a_cl = 0.6f64;
        let pi = LinearFeedback {
            k: vec![vec![0.3]], // a = -0.3 s, so a_cl = 0.9 - 0.3
            clamp_to: None,
        };
        let report = estimate_steady_state(&mdp, &pi, 0.0, &[0.0], 2_000, 200_000, 1).unwrap();
        assert!(!report.diverged);
        let noise_var = TruncatedGaussian::symmetric(0.1).unwrap().variance();
        let expect = noise_var / (1.0 - a_cl * a_cl);
        let got = report.sample_variance(0);
        assert_relative_eq!(got, expect, max_relative = 0.05);
    }

    #[test]
    fn unstable_loop_reports_divergence() {
        let mut mdp = contraction_mdp();
        mdp.transition = Transition::Deterministic {
            drift: Drift::affine_scalar(1.5, 0.0),
        };
        let pi = ZeroPolicy { action_dim: 1 };
        let report = estimate_steady_state(&mdp, &pi, 0.0, &[1.0], 0, 100, 0).unwrap();
        assert!(report.diverged);
    }

    #[test]
    fn histogram_mass_and_support_cover_samples() {
        let mdp = scalar_lqr(0.1);
        let pi = LinearFeedback {
            k: vec![vec![0.3]],
            clamp_to: None,
        };
        let report = estimate_steady_state(&mdp, &pi, 0.1, &[0.0], 500, 5_000, 4).unwrap();
        let mass: f64 = report.histogram.iter().sum();
        assert_relative_eq!(mass, 1.0, epsilon = 1e-9);
        for s in &report.samples {
            assert!(s[0] >= report.support_lo[0] && s[0] <= report.support_hi[0]);
        }
    }

    #[test]
    fn mdp_json_roundtrip() {
        let text = r#"{
            "state_grid": [{"min": -1.0, "max": 1.0, "points": 11}],
            "action_grid": [{"min": -0.5, "max": 0.5, "points": 5}],
            "transition": {"kind": "deterministic", "drift": {"kind": "affine", "a": [[0.5]], "b": [[1.0]]}},
            "cost": {"kind": "quadratic", "q": [[1.0]], "r": [[0.1]]},
            "gamma": 0.9
        }"#;
        let mdp = TabularMdp::from_json_str(text).unwrap();
        assert_eq!(mdp.state_grid.num_nodes(), 11);
        assert_relative_eq!(mdp.stage_cost(&[1.0], &[0.5]).unwrap(), 1.0 + 0.1 * 0.25);
        // gamma outside (0,1) rejected
        let bad = text.replace("0.9", "1.0");
        assert!(TabularMdp::from_json_str(&bad).is_err());
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let mdp = contraction_mdp();
        let pi = ZeroPolicy { action_dim: 1 };
        let t = rollout(&mdp, &pi, &[1.0], 2, 0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,s0,a0,cost");
        assert_eq!(lines.len(), 4);
    }
}
