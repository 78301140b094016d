//! Ground-truth optimal objects: tabular value iteration and the discounted
//! Riccati recursion for stochastic LQR.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{StochasticLinearSystem, TabularMdp};
use crate::table::{min_argmin, PolicyTable, QTable, ValueTable};

/// Settings for value iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViOptions {
    /// Sup-norm Bellman residual over finite nodes at convergence.
    pub tol: f64,
    pub max_iters: usize,
    /// Gauss–Legendre points per noise dimension (>= 15).
    pub quad_points: usize,
}

impl Default for ViOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 5_000,
            quad_points: 31,
        }
    }
}

/// Output of value iteration: mutually consistent V*, Q*, pi* tables.
#[derive(Clone, Debug)]
pub struct MdpSolution {
    pub v: ValueTable,
    pub q: QTable,
    pub policy: PolicyTable,
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Precomputed expectation stencils: for each (state node, action node) the
/// sparse weights over state nodes realizing E[V(s+) | s, a] through the
/// multilinear interpolant. Fixed across sweeps, so each sweep is a sparse
/// matrix-vector pass.
struct ExpectationOp {
    offsets: Vec<usize>,
    nodes: Vec<u32>,
    weights: Vec<f64>,
}

impl ExpectationOp {
    fn build(mdp: &TabularMdp, quad_points: usize) -> Self {
        let ns = mdp.state_grid.num_nodes();
        let na = mdp.action_grid.num_nodes();
        let rows: Vec<Vec<(u32, f64)>> = (0..ns)
            .into_par_iter()
            .flat_map_iter(|i| {
                let s = mdp.state_grid.node(i);
                let mdp = &*mdp;
                (0..na).map(move |j| {
                    let a = mdp.action_grid.node(j);
                    let mut entries: Vec<(u32, f64)> = Vec::new();
                    let mut stencil = Vec::with_capacity(16);
                    for (w, pt) in mdp.transition.expectation_nodes(&s, &a, quad_points) {
                        stencil.clear();
                        let clamped = mdp.state_grid.clamp(&pt);
                        mdp.state_grid.stencil(&clamped, &mut stencil);
                        for &(node, cw) in &stencil {
                            entries.push((node, w * cw));
                        }
                    }
                    entries
                })
            })
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0usize);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (n, w) in row {
                nodes.push(n);
                weights.push(w);
            }
            offsets.push(nodes.len());
        }
        Self {
            offsets,
            nodes,
            weights,
        }
    }

    /// E[V(s+)] for row (state i, action j); infinite if any positive-weight
    /// node is infinite.
    #[inline]
    fn expect(&self, row: usize, v: &[f64]) -> f64 {
        let lo = self.offsets[row];
        let hi = self.offsets[row + 1];
        let mut acc = 0.0;
        for k in lo..hi {
            let val = v[self.nodes[k] as usize];
            if val == f64::INFINITY {
                return f64::INFINITY;
            }
            acc += self.weights[k] * val;
        }
        acc
    }
}

/// Solve the Bellman equations on the grids by Jacobi value iteration.
///
/// Expectations use the exact kernel when the transition is finite-support
/// and fixed Gauss–Legendre quadrature over the truncated noise box
/// otherwise, always through the clamped multilinear interpolant. Nodes whose
/// every action has infinite cost stay infinite and are excluded from the
/// residual.
pub fn value_iteration(mdp: &TabularMdp, opts: &ViOptions) -> Result<MdpSolution> {
    mdp.validate()?;
    if opts.quad_points < 15 && !matches!(mdp.transition, crate::dynamics::Transition::Deterministic { .. } | crate::dynamics::Transition::FiniteKernel { .. })
    {
        return Err(Error::InvalidInput(
            "quadrature needs at least 15 points per noise dimension".into(),
        ));
    }
    let ns = mdp.state_grid.num_nodes();
    let na = mdp.action_grid.num_nodes();
    let gamma = mdp.gamma;

    // constraint-encoded stage cost per (state, action) node
    let lbar: Vec<f64> = (0..ns * na)
        .into_par_iter()
        .map(|row| {
            let (i, j) = (row / na, row % na);
            let s = mdp.state_grid.node(i);
            let a = mdp.action_grid.node(j);
            if mdp.constraint.satisfied(&s, &a) {
                mdp.cost.eval(&s, &a)
            } else {
                f64::INFINITY
            }
        })
        .collect();

    let op = ExpectationOp::build(mdp, opts.quad_points);

    let mut v = vec![0.0f64; ns];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        let v_ref = &v;
        let lbar_ref = &lbar;
        let op_ref = &op;
        let new_v: Vec<f64> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let mut best = f64::INFINITY;
                for j in 0..na {
                    let l = lbar_ref[i * na + j];
                    if l == f64::INFINITY {
                        continue;
                    }
                    let e = op_ref.expect(i * na + j, v_ref);
                    if e == f64::INFINITY {
                        continue;
                    }
                    let q = l + gamma * e;
                    if q < best {
                        best = q;
                    }
                }
                best
            })
            .collect();

        residual = 0.0;
        let mut any_finite = false;
        for (old, new) in v.iter().zip(&new_v) {
            match (old.is_finite(), new.is_finite()) {
                (true, true) => residual = residual.max((old - new).abs()),
                (false, false) => {}
                // feasibility flip: not converged this sweep
                _ => residual = f64::INFINITY,
            }
            any_finite |= new.is_finite();
        }
        v = new_v;
        iterations = iter + 1;
        history.push(residual);
        if !any_finite {
            return Err(Error::Infeasible(
                "infeasible MDP: every state node has infinite value".into(),
            ));
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "value iteration stopped after {} sweeps with residual {residual:.3e} > tol {:.3e}",
            iterations, opts.tol
        )));
    }

    // final Q from the converged V; V and pi are then read off the Q rows so
    // the three tables are exactly consistent.
    let v_ref = &v;
    let q_values: Vec<f64> = (0..ns * na)
        .into_par_iter()
        .map(|row| {
            let l = lbar[row];
            if l == f64::INFINITY {
                return f64::INFINITY;
            }
            let e = op.expect(row, v_ref);
            if e == f64::INFINITY {
                return f64::INFINITY;
            }
            l + gamma * e
        })
        .collect();
    let mut v_out = vec![0.0f64; ns];
    let mut pi_out = vec![0usize; ns];
    for i in 0..ns {
        let (vi, ai) = min_argmin(&q_values[i * na..(i + 1) * na]);
        v_out[i] = vi;
        pi_out[i] = ai;
    }

    Ok(MdpSolution {
        v: ValueTable::new(mdp.state_grid.clone(), v_out)?,
        q: QTable::new(mdp.state_grid.clone(), mdp.action_grid.clone(), q_values)?,
        policy: PolicyTable::new(mdp.state_grid.clone(), mdp.action_grid.clone(), pi_out)?,
        iterations,
        final_residual: residual,
        residual_history: history,
    })
}

/// Solution of the discounted algebraic Riccati equation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiSolution {
    /// V*(s) = s' P s + v0 on the attraction set.
    pub p: Vec<Vec<f64>>,
    /// pi*(s) = -K s.
    pub k: Vec<Vec<f64>>,
    /// Additive value offset gamma tr(P W) / (1 - gamma).
    pub v0: f64,
    /// Fixed-point residual max-norm at convergence.
    pub residual: f64,
    pub iterations: usize,
}

impl RiccatiSolution {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        mat_from(&self.p)
    }

    pub fn k_matrix(&self) -> DMatrix<f64> {
        mat_from(&self.k)
    }

    /// Quadratic value prediction s' P s + v0.
    pub fn value(&self, s: &[f64]) -> f64 {
        let sv = DVector::from_column_slice(s);
        (sv.transpose() * self.p_matrix() * &sv)[(0, 0)] + self.v0
    }

    /// Feedback action -K s.
    pub fn action(&self, s: &[f64]) -> Vec<f64> {
        let sv = DVector::from_column_slice(s);
        let a = -(self.k_matrix() * sv);
        a.iter().copied().collect()
    }
}

pub fn mat_from(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

fn mat_to(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Solve P = Q + g A'PA - g^2 A'PB (R + g B'PB)^-1 B'PA by fixed-point
/// iteration, with K = g (R + g B'PB)^-1 B'PA and
/// v0 = g tr(P W) / (1 - g) for the truncated process covariance W.
pub fn riccati_solve(sys: &StochasticLinearSystem, gamma: f64, tol: f64) -> Result<RiccatiSolution> {
    sys.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "riccati discount must lie in (0, 1], got {gamma}"
        )));
    }
    let a = mat_from(&sys.a);
    let b = mat_from(&sys.b);
    let q = mat_from(&sys.q_cost);
    let r = mat_from(&sys.r_cost);
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let max_iters = 200_000usize;
    for iter in 0..max_iters {
        let btpb = &r + gamma * (b.transpose() * &p * &b);
        let inv = btpb.clone().try_inverse().ok_or_else(|| {
            Error::NoConvergence("R + g B'PB became singular in the Riccati recursion".into())
        })?;
        let apb = a.transpose() * &p * &b;
        let next = &q + gamma * (a.transpose() * &p * &a)
            - gamma * gamma * (&apb * &inv * apb.transpose());
        let next = (&next + next.transpose()) * 0.5;
        residual = (&next - &p).abs().max();
        p = next;
        iterations = iter + 1;
        if !p.iter().all(|x| x.is_finite()) || p.abs().max() > 1e14 {
            return Err(Error::NoConvergence(
                "Riccati fixed point diverged; system may not be stabilizable".into(),
            ));
        }
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NoConvergence(format!(
            "Riccati recursion residual {residual:.3e} > tol {tol:.3e} after {max_iters} iters"
        )));
    }
    let btpb = &r + gamma * (b.transpose() * &p * &b);
    let inv = btpb
        .try_inverse()
        .ok_or_else(|| Error::NoConvergence("R + g B'PB singular at the fixed point".into()))?;
    let k = gamma * (&inv * b.transpose() * &p * &a);
    let w = sys.noise_covariance_diag();
    let trace_pw: f64 = (0..p.nrows()).map(|i| p[(i, i)] * w[i]).sum();
    let v0 = if gamma < 1.0 {
        gamma * trace_pw / (1.0 - gamma)
    } else {
        0.0
    };
    Ok(RiccatiSolution {
        p: mat_to(&p),
        k: mat_to(&k),
        v0,
        residual,
        iterations,
    })
}

/// Advantage A*(s, a) = Q*(s, a) - V*(s) where Q* is finite, +inf otherwise.
pub fn advantage(q: &QTable, v: &ValueTable, s: &[f64], a: &[f64]) -> f64 {
    let qv = q.eval(s, a);
    if !qv.is_finite() {
        return f64::INFINITY;
    }
    qv - v.eval(s)
}
