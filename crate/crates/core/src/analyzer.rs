//! Quantifies the optimality conditions of a predictive controller against
//! the exact MDP solution: the gap Delta(s, a) between the averaged and the
//! model-propagated optimal value, its constancy over the attraction region,
//! the Taylor decomposition of the gap with a checkable remainder bound, and
//! the action-value / argmin / closed-loop equivalences.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    estimate_steady_state, rollout_paired, sample_ball, stream_rng, Policy, SteadyStateReport,
    TabularMdp,
};
use crate::model::PredictionModel;
use crate::mpc::{GridDpMpc, MpcProblem, TerminalCost};
use crate::table::{GreedyQPolicy, QTable, ValueTable};

/// One probed state-action pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbePoint {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
}

/// Settings shared by the probe-based analyses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub n_probes: usize,
    /// Radius of the action ball around pi*(s).
    pub radius: f64,
    pub seed: u64,
    pub quad_points: usize,
    pub burn_in: usize,
    pub chain_samples: usize,
    pub s0: Vec<f64>,
    /// Marks the optimal value function as a smooth (4x differentiable)
    /// proxy so derivative-based checks apply.
    pub smooth: bool,
    /// Paired rollouts for the closed-loop gap estimate.
    pub n_eval_rollouts: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            n_probes: 200,
            radius: 0.2,
            seed: 0,
            quad_points: 31,
            burn_in: 1_000,
            chain_samples: 5_000,
            s0: vec![0.0],
            smooth: true,
            n_eval_rollouts: 400,
        }
    }
}

/// Delta samples over a probe region with the Taylor decomposition
/// Delta = 1/2 tr(Sigma Hess V*) + R and the checkable remainder bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub probes: Vec<ProbePoint>,
    pub delta: Vec<f64>,
    /// Mean of Delta over the probes (the estimated constant).
    pub v0_hat: f64,
    /// max |Delta - v0_hat|.
    pub spread: f64,
    /// std(Delta) / |mean(Delta)|; infinite when the mean is zero but the
    /// spread is not.
    pub coeff_variation: f64,
    /// 1/2 tr(Sigma(s,a) Hess V*(f(s,a))) per probe.
    pub quad_term: Vec<f64>,
    /// R = Delta - quad_term, by definition.
    pub remainder: Vec<f64>,
    pub mu2: Vec<f64>,
    pub mu3: Vec<f64>,
    pub mu4: Vec<f64>,
    /// sum_{|alpha|=3} |D^alpha V*(f)| / alpha! * mu3 per probe.
    pub third_term: Vec<f64>,
    /// c * mu4 per probe, with c = max_{|alpha|=4, hull} |D^alpha V*| / 4!.
    pub c_mu_term: Vec<f64>,
    pub taylor_c: f64,
    pub smooth: bool,
    pub perturbation_radius: f64,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
}

impl GapReport {
    /// |mean(R)| over probes: the remainder magnitude with interpolation
    /// noise averaged out.
    pub fn abs_mean_remainder(&self) -> f64 {
        let n = self.remainder.len() as f64;
        (self.remainder.iter().sum::<f64>() / n).abs()
    }

    pub fn mean_abs_remainder(&self) -> f64 {
        let n = self.remainder.len() as f64;
        self.remainder.iter().map(|r| r.abs()).sum::<f64>() / n
    }

    /// CSV rows, one per probe.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let sd = self.probes.first().map_or(0, |p| p.s.len());
        let ad = self.probes.first().map_or(0, |p| p.a.len());
        let mut header = vec!["probe".to_string()];
        header.extend((0..sd).map(|i| format!("s{i}")));
        header.extend((0..ad).map(|i| format!("a{i}")));
        for name in [
            "delta",
            "quad_term",
            "remainder",
            "mu2",
            "mu3",
            "mu4",
            "third_term",
            "c_mu_term",
        ] {
            header.push(name.into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, p) in self.probes.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.s.iter().map(|x| format!("{x}")));
            row.extend(p.a.iter().map(|x| format!("{x}")));
            for v in [
                self.delta[i],
                self.quad_term[i],
                self.remainder[i],
                self.mu2[i],
                self.mu3[i],
                self.mu4[i],
                self.third_term[i],
                self.c_mu_term[i],
            ] {
                row.push(format!("{v}"));
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

/// E[V*(s+) | s, a] - V*(f(s, a)), both through the same interpolant.
pub fn compute_delta(
    mdp: &TabularMdp,
    model: &PredictionModel,
    vstar: &ValueTable,
    s: &[f64],
    a: &[f64],
    quad_points: usize,
) -> Result<f64> {
    let mut expected = 0.0;
    for (w, pt) in mdp.transition.expectation_nodes(s, a, quad_points) {
        let v = vstar.eval(&vstar.grid().clamp(&pt));
        if v == f64::INFINITY {
            return Err(Error::Infeasible(format!(
                "optimal value is infinite on the reachable set at {pt:?}"
            )));
        }
        expected += w * v;
    }
    let f = model.eval_clamped(vstar.grid(), s, a);
    let vf = vstar.eval(&f);
    if vf == f64::INFINITY {
        return Err(Error::Infeasible(format!(
            "optimal value is infinite at the model prediction {f:?}"
        )));
    }
    Ok(expected - vf)
}

// ---------------------------------------------------------------------------
// finite differences on the interpolated table
// ---------------------------------------------------------------------------

/// Central-difference stencil (offsets, weights) for one axis, order 0..=4.
fn stencil_1d(order: usize) -> (&'static [i32], &'static [f64]) {
    match order {
        0 => (&[0], &[1.0]),
        1 => (&[-1, 1], &[-0.5, 0.5]),
        2 => (&[-1, 0, 1], &[1.0, -2.0, 1.0]),
        3 => (&[-2, -1, 1, 2], &[-0.5, 1.0, -1.0, 0.5]),
        4 => (&[-2, -1, 0, 1, 2], &[1.0, -4.0, 6.0, -4.0, 1.0]),
        _ => panic!("finite differences implemented up to order 4"),
    }
}

/// D^alpha of the interpolated table at `x` by tensor-product central
/// differences with per-axis step of `scale` grid cells.
fn fd_multi(vt: &ValueTable, x: &[f64], alpha: &[usize], scale: f64) -> f64 {
    let d = x.len();
    let mut terms: Vec<(Vec<i32>, f64)> = vec![(vec![0; d], 1.0)];
    for (axis, &ord) in alpha.iter().enumerate() {
        let (offs, wts) = stencil_1d(ord);
        let h = vt.grid().axis(axis).max_spacing() * scale;
        let scale_w = h.powi(ord as i32);
        let mut next = Vec::with_capacity(terms.len() * offs.len());
        for (base, w0) in &terms {
            for (&o, &w) in offs.iter().zip(wts) {
                let mut ofs = base.clone();
                ofs[axis] = o;
                next.push((ofs, w0 * w / scale_w));
            }
        }
        terms = next;
    }
    let mut acc = 0.0;
    for (ofs, w) in terms {
        let pt: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, &xk)| xk + ofs[k] as f64 * vt.grid().axis(k).max_spacing() * scale)
            .collect();
        acc += w * vt.eval(&vt.grid().clamp(&pt));
    }
    acc
}

/// D^alpha with one Richardson extrapolation (steps h and 2h).
fn fd_richardson(vt: &ValueTable, x: &[f64], alpha: &[usize]) -> f64 {
    let d1 = fd_multi(vt, x, alpha, 1.0);
    let d2 = fd_multi(vt, x, alpha, 2.0);
    (4.0 * d1 - d2) / 3.0
}

/// All multi-indices over `dims` axes with |alpha| = `total`.
fn multi_indices(dims: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(dims: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dims == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=total {
            prefix.push(k);
            rec(dims - 1, total - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dims, total, &mut Vec::new(), &mut out);
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product::<f64>().max(1.0)
}

/// Interior test: `x` at least `cells` grid cells from every edge.
fn is_interior(vt: &ValueTable, x: &[f64], cells: f64) -> bool {
    x.iter().enumerate().all(|(k, &xk)| {
        let axis = vt.grid().axis(k);
        let h = axis.max_spacing() * cells;
        xk >= axis.min() + h && xk <= axis.max() - h
    })
}

// ---------------------------------------------------------------------------
// probe machinery
// ---------------------------------------------------------------------------

fn draw_probes(
    mdp: &TabularMdp,
    policy: &dyn Policy,
    opts: &ProbeOptions,
    stream: u64,
) -> Result<(Vec<ProbePoint>, SteadyStateReport)> {
    let steady = estimate_steady_state(
        mdp,
        policy,
        opts.radius,
        &opts.s0,
        opts.burn_in,
        opts.chain_samples,
        opts.seed,
    )?;
    if steady.diverged {
        return Err(Error::InvalidInput(
            "steady-state estimation diverged; probe region undefined".into(),
        ));
    }
    if steady.samples.is_empty() {
        return Err(Error::InvalidInput(
            "steady-state chain kept no samples".into(),
        ));
    }
    let mut rng = stream_rng(opts.seed, stream);
    let mut probes = Vec::with_capacity(opts.n_probes);
    for _ in 0..opts.n_probes {
        let s = steady.samples[rng.random_range(0..steady.samples.len())].clone();
        let mut a = policy.action(&s)?;
        let delta = sample_ball(&mut rng, a.len(), opts.radius);
        for (ai, di) in a.iter_mut().zip(delta) {
            *ai += di;
        }
        let a = mdp.action_grid.clamp(&a);
        probes.push(ProbePoint { s, a });
    }
    Ok((probes, steady))
}

/// Probe the gap Delta over the empirical attraction region and decompose it.
///
/// States come from the perturbed steady-state distribution, actions from a
/// uniform ball around pi*(s). Hessian and third derivatives are central
/// finite differences on the interpolant (step one grid cell, Richardson
/// extrapolated once); the Taylor constant takes the max fourth-derivative
/// magnitude over the probe hull.
pub fn delta_constancy_report(
    mdp: &TabularMdp,
    model: &PredictionModel,
    vstar: &ValueTable,
    policy: &dyn Policy,
    opts: &ProbeOptions,
) -> Result<GapReport> {
    let (candidates, steady) = draw_probes(mdp, policy, opts, 1)?;
    let sd = mdp.state_grid.dim();

    struct Row {
        probe: ProbePoint,
        delta: f64,
        quad: f64,
        mu: [f64; 3],
        third: f64,
        f: Vec<f64>,
    }

    let rows: Vec<Option<Row>> = candidates
        .into_par_iter()
        .map(|probe| {
            let delta =
                match compute_delta(mdp, model, vstar, &probe.s, &probe.a, opts.quad_points) {
                    Ok(d) => d,
                    Err(_) => return None,
                };
            let f = model.eval_clamped(vstar.grid(), &probe.s, &probe.a);
            let sigma = mdp.transition.covariance_diag(&probe.s, &probe.a);
            let mut quad = 0.0;
            for k in 0..sd {
                let mut alpha = vec![0usize; sd];
                alpha[k] = 2;
                quad += 0.5 * sigma[k] * fd_richardson(vstar, &f, &alpha);
            }
            // transition moments around the model prediction
            let mut mu = [0.0f64; 3];
            for (w, pt) in mdp
                .transition
                .expectation_nodes(&probe.s, &probe.a, opts.quad_points)
            {
                let dist: f64 = pt
                    .iter()
                    .zip(&f)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                mu[0] += w * dist.powi(2);
                mu[1] += w * dist.powi(3);
                mu[2] += w * dist.powi(4);
            }
            let mut third = 0.0;
            if opts.smooth {
                for alpha in multi_indices(sd, 3) {
                    let coeff = 1.0 / alpha.iter().map(|&k| factorial(k)).product::<f64>();
                    third += coeff * fd_richardson(vstar, &f, &alpha).abs() * mu[1];
                }
            }
            Some(Row {
                probe,
                delta,
                quad,
                mu,
                third,
                f,
            })
        })
        .collect();
    let rows: Vec<Row> = rows.into_iter().flatten().collect();
    if rows.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "only {} usable probes (need at least 10)",
            rows.len()
        )));
    }

    // Taylor constant over the probe hull: interior prediction points plus
    // interior grid nodes inside the sampled support box.
    let mut taylor_c = 0.0f64;
    if opts.smooth {
        let mut eval_points: Vec<Vec<f64>> = rows
            .iter()
            .filter(|r| is_interior(vstar, &r.f, 4.5))
            .map(|r| r.f.clone())
            .collect();
        for flat in 0..vstar.grid().num_nodes() {
            let node = vstar.grid().node(flat);
            let inside = node
                .iter()
                .zip(steady.support_lo.iter().zip(&steady.support_hi))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi);
            if inside && is_interior(vstar, &node, 4.5) {
                eval_points.push(node);
            }
        }
        for alpha in multi_indices(sd, 4) {
            for pt in &eval_points {
                taylor_c = taylor_c.max(fd_multi(vstar, pt, &alpha, 1.0).abs() / 24.0);
            }
        }
    }

    let n = rows.len() as f64;
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let v0_hat = deltas.iter().sum::<f64>() / n;
    let spread = deltas
        .iter()
        .map(|d| (d - v0_hat).abs())
        .fold(0.0, f64::max);
    let std = (deltas
        .iter()
        .map(|d| (d - v0_hat) * (d - v0_hat))
        .sum::<f64>()
        / n)
        .sqrt();
    let coeff_variation = if v0_hat.abs() > 0.0 {
        std / v0_hat.abs()
    } else if std == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };

    Ok(GapReport {
        delta: deltas,
        v0_hat,
        spread,
        coeff_variation,
        quad_term: rows.iter().map(|r| r.quad).collect(),
        remainder: rows.iter().map(|r| r.delta - r.quad).collect(),
        mu2: rows.iter().map(|r| r.mu[0]).collect(),
        mu3: rows.iter().map(|r| r.mu[1]).collect(),
        mu4: rows.iter().map(|r| r.mu[2]).collect(),
        third_term: rows.iter().map(|r| r.third).collect(),
        c_mu_term: rows.iter().map(|r| taylor_c * r.mu[2]).collect(),
        taylor_c,
        smooth: opts.smooth,
        perturbation_radius: opts.radius,
        support_lo: steady.support_lo,
        support_hi: steady.support_hi,
        probes: rows.into_iter().map(|r| r.probe).collect(),
    })
}

/// Per-probe outcome of the remainder bound |R| <= c mu4 + third_term.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma1Point {
    pub abs_remainder: f64,
    pub bound: f64,
    pub pass: bool,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma1Outcome {
    /// False when the value function is not a smooth proxy; the bound is
    /// then not applicable rather than failed.
    pub applicable: bool,
    pub points: Vec<Lemma1Point>,
    pub all_pass: bool,
}

/// Check |R(s, a)| <= c mu4 + sum_{|alpha|=3} |D^alpha V*| / alpha! mu3 at
/// every probe of a completed gap report.
pub fn lemma1_check(report: &GapReport) -> Lemma1Outcome {
    if !report.smooth {
        return Lemma1Outcome {
            applicable: false,
            points: Vec::new(),
            all_pass: true,
        };
    }
    let points: Vec<Lemma1Point> = (0..report.remainder.len())
        .map(|i| {
            let abs_r = report.remainder[i].abs();
            let bound = report.c_mu_term[i] + report.third_term[i];
            Lemma1Point {
                abs_remainder: abs_r,
                bound,
                pass: abs_r <= bound,
                margin: bound - abs_r,
            }
        })
        .collect();
    let all_pass = points.iter().all(|p| p.pass);
    Lemma1Outcome {
        applicable: true,
        points,
        all_pass,
    }
}

/// Combined interpolation-resolution bound for action-value comparisons:
/// the discounted sum of the state-grid interpolation error and one action
/// cell's quadratic resolution.
pub fn grid_error_bound(vstar: &ValueTable, qstar: &QTable, gamma: f64, n_horizon: usize) -> f64 {
    let geom = (1.0 - gamma.powi(n_horizon as i32 + 1)) / (1.0 - gamma);
    let mut state_term = 0.0;
    for d in 0..vstar.grid().dim() {
        let h = vstar.grid().axis(d).max_spacing();
        state_term += h * h * vstar.max_curvature(d) / 8.0;
    }
    let mut action_term = 0.0;
    for d in 0..qstar.action_grid().dim() {
        let h = qstar.action_grid().axis(d).max_spacing();
        action_term += (h / 2.0) * (h / 2.0) * qstar.max_action_curvature(d) / 2.0;
    }
    geom * (state_term + action_term)
}

/// Result of comparing Q^MPC against Q* over the probe region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalityVerdict {
    /// Mean of Q* - Q^MPC over finite probes.
    pub q0_hat: f64,
    /// max |Q^MPC + q0_hat - Q*| over the probes.
    pub max_eq15_residual: f64,
    /// The pinned numerical-resolution bound the residual is judged against.
    pub eq15_bound: f64,
    /// Fraction of probed states whose greedy actions differ by more than
    /// the tie guard in Q* value.
    pub argmin_mismatch_rate: f64,
    pub argmin_mismatch_count: usize,
    /// Differing argmins only count as mismatches when the Q* gap between
    /// the two chosen actions exceeds this guard; near-ties at grid
    /// resolution are not decidable.
    pub tie_guard: f64,
    pub n_probes: usize,
    /// Paired estimate of J(pi_mpc) - J(pi*).
    pub policy_gap: f64,
    pub policy_gap_ci_half: f64,
}

impl OptimalityVerdict {
    pub fn policy_gap_lower_ci(&self) -> f64 {
        self.policy_gap - self.policy_gap_ci_half
    }

    pub fn gap_ci_contains_zero(&self) -> bool {
        self.policy_gap.abs() <= self.policy_gap_ci_half
    }
}

fn grid_argmin_qstar(qstar: &QTable, s: &[f64]) -> usize {
    let na = qstar.action_grid().num_nodes();
    let mut best = f64::INFINITY;
    let mut arg = 0usize;
    for j in 0..na {
        let a = qstar.action_grid().node(j);
        let v = qstar.eval(s, &a);
        if v < best {
            best = v;
            arg = j;
        }
    }
    arg
}

fn max_stage_cost(mdp: &TabularMdp) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..mdp.state_grid.num_nodes() {
        let s = mdp.state_grid.node(i);
        for j in 0..mdp.action_grid.num_nodes() {
            let a = mdp.action_grid.node(j);
            let l = mdp.cost.eval(&s, &a);
            if l.is_finite() {
                worst = worst.max(l.abs());
            }
        }
    }
    worst
}

/// Build the MPC with terminal cost V* and compare its action-value function,
/// greedy policy and closed-loop performance against the exact solution.
pub fn theorem1_check(
    mdp: &TabularMdp,
    model: &PredictionModel,
    vstar: &ValueTable,
    qstar: &QTable,
    n_horizon: usize,
    opts: &ProbeOptions,
) -> Result<OptimalityVerdict> {
    let pistar = GreedyQPolicy { qtable: qstar };
    let (probes, _) = draw_probes(mdp, &pistar, opts, 2)?;
    let problem = MpcProblem {
        model: model.clone(),
        cost: mdp.cost.clone(),
        constraint: mdp.constraint.clone(),
        stage_offset: 0.0,
        terminal: TerminalCost::Table(vstar.clone()),
        terminal_set: None,
        horizon: n_horizon,
        gamma: mdp.gamma,
    };
    let mpc = GridDpMpc::new(problem, mdp.state_grid.clone(), mdp.action_grid.clone())?;

    let mut diffs = Vec::with_capacity(probes.len());
    for p in &probes {
        let qm = mpc.q(&p.s, &p.a);
        let qs = qstar.eval(&p.s, &p.a);
        if qm.is_finite() && qs.is_finite() {
            diffs.push((qm, qs));
        }
    }
    if diffs.len() < 10 {
        return Err(Error::InvalidInput(
            "fewer than 10 finite probes for the action-value comparison".into(),
        ));
    }
    let q0_hat = diffs.iter().map(|(qm, qs)| qs - qm).sum::<f64>() / diffs.len() as f64;
    let max_eq15_residual = diffs
        .iter()
        .map(|(qm, qs)| (qm + q0_hat - qs).abs())
        .fold(0.0, f64::max);
    let eq15_bound = grid_error_bound(vstar, qstar, mdp.gamma, n_horizon);

    let tie_guard = eq15_bound;
    let mismatches: Vec<bool> = probes
        .par_iter()
        .map(|p| {
            let am = mpc.min_q(&p.s).1;
            let astar = grid_argmin_qstar(qstar, &p.s);
            if am == astar {
                return false;
            }
            let a_m = qstar.action_grid().node(am);
            let a_s = qstar.action_grid().node(astar);
            let gap = qstar.eval(&p.s, &a_m) - qstar.eval(&p.s, &a_s);
            gap > tie_guard
        })
        .collect();
    let argmin_mismatch_count = mismatches.iter().filter(|&&m| m).count();
    let argmin_mismatch_rate = argmin_mismatch_count as f64 / probes.len() as f64;

    // paired closed-loop comparison with common random numbers
    let lmax = max_stage_cost(mdp);
    let horizon = mdp.tail_horizon(lmax.max(1.0), 1e-8);
    let mpc_policy = mpc.policy();
    let paired: Vec<f64> = (0..opts.n_eval_rollouts)
        .into_par_iter()
        .map(|i| {
            let stream = 100 + i as u64;
            let t_mpc = rollout_paired(mdp, &mpc_policy, &opts.s0, horizon, opts.seed, stream)?;
            let t_star = rollout_paired(mdp, &pistar, &opts.s0, horizon, opts.seed, stream)?;
            Ok(t_mpc.discounted_cost(mdp.gamma) - t_star.discounted_cost(mdp.gamma))
        })
        .collect::<Result<_>>()?;
    let n = paired.len() as f64;
    let policy_gap = paired.iter().sum::<f64>() / n;
    let var = paired
        .iter()
        .map(|d| (d - policy_gap) * (d - policy_gap))
        .sum::<f64>()
        / (n - 1.0);
    let policy_gap_ci_half = 1.96 * (var / n).sqrt();

    Ok(OptimalityVerdict {
        q0_hat,
        max_eq15_residual,
        eq15_bound,
        argmin_mismatch_rate,
        argmin_mismatch_count,
        tie_guard,
        n_probes: probes.len(),
        policy_gap,
        policy_gap_ci_half,
    })
}

/// Numbers from the telescoping construction: an MPC with stage cost
/// L + gamma v0 and terminal cost V* should reproduce Q* exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TelescopeReport {
    /// max |Qhat^MPC(s, a) - Q*(s, a)| over the probes.
    pub max_q_residual: f64,
    /// max |min_a A*(s, a)| over the probed states (should vanish).
    pub max_min_advantage: f64,
    pub n_probes: usize,
}

/// Run the telescoping identity at the given constant `v0`.
///
/// The correct constant collapses the residual to grid resolution; a
/// miscalibrated constant v0 + e shifts it by gamma (1 - gamma^N) / (1 -
/// gamma) * e.
pub fn telescoping_identity_check(
    mdp: &TabularMdp,
    model: &PredictionModel,
    vstar: &ValueTable,
    qstar: &QTable,
    n_horizon: usize,
    v0: f64,
    opts: &ProbeOptions,
) -> Result<TelescopeReport> {
    let pistar = GreedyQPolicy { qtable: qstar };
    let (probes, _) = draw_probes(mdp, &pistar, opts, 3)?;
    let problem = MpcProblem {
        model: model.clone(),
        cost: mdp.cost.clone(),
        constraint: mdp.constraint.clone(),
        stage_offset: mdp.gamma * v0,
        terminal: TerminalCost::Table(vstar.clone()),
        terminal_set: None,
        horizon: n_horizon,
        gamma: mdp.gamma,
    };
    let mpc = GridDpMpc::new(problem, mdp.state_grid.clone(), mdp.action_grid.clone())?;
    let mut max_q_residual = 0.0f64;
    let mut max_min_advantage = 0.0f64;
    for p in &probes {
        let qm = mpc.q(&p.s, &p.a);
        let qs = qstar.eval(&p.s, &p.a);
        if qm.is_finite() && qs.is_finite() {
            max_q_residual = max_q_residual.max((qm - qs).abs());
        }
        let mut min_q = f64::INFINITY;
        for j in 0..qstar.action_grid().num_nodes() {
            let a = qstar.action_grid().node(j);
            min_q = min_q.min(qstar.eval(&p.s, &a));
        }
        let adv = min_q - vstar.eval(&p.s);
        if adv.is_finite() {
            max_min_advantage = max_min_advantage.max(adv.abs());
        }
    }
    Ok(TelescopeReport {
        max_q_residual,
        max_min_advantage,
        n_probes: probes.len(),
    })
}
