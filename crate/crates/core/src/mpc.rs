//! Receding-horizon control on a deterministic prediction model.
//!
//! Two backends solve the finite-horizon problem: a grid dynamic program
//! (general costs and constraints, exact over the discretized action grid)
//! and a batch least-squares solve (exact continuous optimum for the
//! unconstrained linear-quadratic case).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{Constraint, StageCost};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mdp::Policy;
use crate::model::PredictionModel;
use crate::solver::mat_from;
use crate::table::ValueTable;

/// Terminal cost T(x_N).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
    /// x' P x + v0
    Quadratic { p: Vec<Vec<f64>>, v0: f64 },
    /// A stored value table (T = V* experiments).
    Table(ValueTable),
}

impl TerminalCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Quadratic { p, v0 } => {
                let mut acc = *v0;
                for (i, row) in p.iter().enumerate() {
                    for (j, &pij) in row.iter().enumerate() {
                        acc += x[i] * pij * x[j];
                    }
                }
                acc
            }
            TerminalCost::Table(t) => t.eval(x),
        }
    }

    fn quadratic_parts(&self, dim: usize) -> Option<(DMatrix<f64>, f64)> {
        match self {
            TerminalCost::Zero => Some((DMatrix::zeros(dim, dim), 0.0)),
            TerminalCost::Quadratic { p, v0 } => Some((mat_from(p), *v0)),
            TerminalCost::Table(_) => None,
        }
    }
}

/// Axis-aligned terminal set; `None` means the whole state box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }
}

/// Finite-horizon optimal control problem solved at every decision step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcProblem {
    pub model: PredictionModel,
    pub cost: StageCost,
    pub constraint: Constraint,
    /// Added to every stage cost (modified stage cost experiments).
    pub stage_offset: f64,
    pub terminal: TerminalCost,
    /// Terminal set; defaults to the whole state box.
    pub terminal_set: Option<BoxSet>,
    pub horizon: usize,
    pub gamma: f64,
}

impl MpcProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidInput("MPC horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput("MPC discount must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Stage cost with constraint encoding and the additive offset.
    fn stage_bar(&self, s: &[f64], a: &[f64]) -> f64 {
        if self.constraint.satisfied(s, a) {
            self.cost.eval(s, a) + self.stage_offset
        } else {
            f64::INFINITY
        }
    }
}

/// Solution of one MPC solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcSolution {
    pub value: f64,
    pub inputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub feasible: bool,
}

/// Grid dynamic-programming backend.
///
/// Cost-to-go tables V_t are computed once over the state grid; afterwards
/// the action-value q(s, a) = Lbar(s, a) + gamma V_1(f(s, a)) is cheap at
/// arbitrary (s, a) and the optimum over the action grid is exact.
pub struct GridDpMpc {
    problem: MpcProblem,
    state_grid: Grid,
    action_grid: Grid,
    /// tables[t-1] = cost-to-go with t stages already taken, t = 1..=N.
    tables: Vec<ValueTable>,
}

impl GridDpMpc {
    pub fn new(problem: MpcProblem, state_grid: Grid, action_grid: Grid) -> Result<Self> {
        problem.validate()?;
        let n = problem.horizon;
        let ns = state_grid.num_nodes();
        let mut tables: Vec<ValueTable> = Vec::with_capacity(n);
        // V_N = terminal cost on the terminal set
        let v_n: Vec<f64> = (0..ns)
            .map(|i| {
                let x = state_grid.node(i);
                let inside = problem
                    .terminal_set
                    .as_ref()
                    .map_or(true, |set| set.contains(&x));
                if inside {
                    problem.terminal.eval(&x)
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        tables.push(ValueTable::new(state_grid.clone(), v_n)?);
        // backwards: V_t(x) = min_a Lbar(x, a) + gamma V_{t+1}(f(x, a))
        for _t in (1..n).rev() {
            let next = tables.last().unwrap();
            let values: Vec<f64> = (0..ns)
                .into_par_iter()
                .map(|i| {
                    let x = state_grid.node(i);
                    let mut best = f64::INFINITY;
                    for j in 0..action_grid.num_nodes() {
                        let a = action_grid.node(j);
                        let stage = problem.stage_bar(&x, &a);
                        if stage == f64::INFINITY {
                            continue;
                        }
                        let xp = problem.model.eval_clamped(&state_grid, &x, &a);
                        let tail = next.eval(&xp);
                        if tail == f64::INFINITY {
                            continue;
                        }
                        let q = stage + problem.gamma * tail;
                        if q < best {
                            best = q;
                        }
                    }
                    best
                })
                .collect();
            tables.push(ValueTable::new(state_grid.clone(), values)?);
        }
        tables.reverse();
        Ok(Self {
            problem,
            state_grid,
            action_grid,
            tables,
        })
    }

    pub fn problem(&self) -> &MpcProblem {
        &self.problem
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    pub fn action_grid(&self) -> &Grid {
        &self.action_grid
    }

    /// Cost-to-go table after t steps (t = 1..=N).
    pub fn cost_to_go(&self, t: usize) -> &ValueTable {
        &self.tables[t - 1]
    }

    /// Q^MPC(s, a): the MPC optimum with the first input pinned to `a`.
    pub fn q(&self, s: &[f64], a: &[f64]) -> f64 {
        let stage = self.problem.stage_bar(s, a);
        if stage == f64::INFINITY {
            return f64::INFINITY;
        }
        let xp = self.problem.model.eval_clamped(&self.state_grid, s, a);
        let tail = self.tables[0].eval(&xp);
        if tail == f64::INFINITY {
            return f64::INFINITY;
        }
        stage + self.problem.gamma * tail
    }

    /// min and argmin of q(s, .) over the action grid (lowest-index ties).
    pub fn min_q(&self, s: &[f64]) -> (f64, usize) {
        let mut best = f64::INFINITY;
        let mut arg = 0usize;
        for j in 0..self.action_grid.num_nodes() {
            let a = self.action_grid.node(j);
            let q = self.q(s, &a);
            if q < best {
                best = q;
                arg = j;
            }
        }
        (best, arg)
    }

    /// Full receding-horizon solve from state `s`.
    pub fn solve(&self, s: &[f64]) -> MpcSolution {
        let (value, first) = self.min_q(s);
        if value == f64::INFINITY {
            return MpcSolution {
                value,
                inputs: Vec::new(),
                states: vec![s.to_vec()],
                feasible: false,
            };
        }
        let n = self.problem.horizon;
        let mut inputs = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n + 1);
        let mut x = s.to_vec();
        states.push(x.clone());
        let mut first_action = Some(self.action_grid.node(first));
        for t in 0..n {
            let a = match first_action.take() {
                Some(a) => a,
                None => {
                    // greedy against the next cost-to-go table
                    let mut best = f64::INFINITY;
                    let mut arg = 0usize;
                    for j in 0..self.action_grid.num_nodes() {
                        let cand = self.action_grid.node(j);
                        let stage = self.problem.stage_bar(&x, &cand);
                        if stage == f64::INFINITY {
                            continue;
                        }
                        let xp = self.problem.model.eval_clamped(&self.state_grid, &x, &cand);
                        let tail = if t + 1 < n {
                            self.tables[t + 1].eval(&xp)
                        } else {
                            0.0
                        };
                        let q = if t + 1 < n {
                            stage + self.problem.gamma * tail
                        } else {
                            stage
                        };
                        if q < best {
                            best = q;
                            arg = j;
                        }
                    }
                    self.action_grid.node(arg)
                }
            };
            let xp = self
                .problem
                .model
                .eval_clamped(&self.state_grid, &x, &a);
            inputs.push(a);
            states.push(xp.clone());
            x = xp;
        }
        MpcSolution {
            value,
            inputs,
            states,
            feasible: true,
        }
    }

    /// The receding-horizon policy: first input of the solve.
    pub fn policy(&self) -> GridMpcPolicy<'_> {
        GridMpcPolicy { mpc: self }
    }
}

/// Policy wrapper around the grid backend.
pub struct GridMpcPolicy<'a> {
    mpc: &'a GridDpMpc,
}

impl Policy for GridMpcPolicy<'_> {
    fn action(&self, s: &[f64]) -> Result<Vec<f64>> {
        let (value, arg) = self.mpc.min_q(s);
        if value == f64::INFINITY {
            return Err(Error::Infeasible(format!(
                "MPC problem infeasible at state {s:?}"
            )));
        }
        Ok(self.mpc.action_grid.node(arg))
    }
}

/// Batch linear-quadratic backend: exact continuous optimum of the
/// unconstrained problem with affine dynamics, quadratic stage cost and
/// quadratic terminal cost.
#[derive(Debug)]
pub struct BatchLqMpc {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c_off: DVector<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    p_term: DMatrix<f64>,
    v0: f64,
    stage_offset_total: f64,
    gamma: f64,
    n: usize,
    m: usize,
}

impl BatchLqMpc {
    /// Build from an MPC problem; errors when the pieces are not LQ.
    pub fn from_problem(problem: &MpcProblem) -> Result<Self> {
        problem.validate()?;
        let (a, b, c) = problem.model.linear_parts().ok_or_else(|| {
            Error::BackendMismatch("batch-LQ backend needs an affine prediction model".into())
        })?;
        let (q, r) = problem.cost.quadratic_parts().ok_or_else(|| {
            Error::BackendMismatch("batch-LQ backend needs a quadratic stage cost".into())
        })?;
        if !problem.constraint.is_none() {
            return Err(Error::BackendMismatch(
                "batch-LQ backend does not support constraints".into(),
            ));
        }
        if problem.terminal_set.is_some() {
            return Err(Error::BackendMismatch(
                "batch-LQ backend does not support terminal sets".into(),
            ));
        }
        let dim = a.len();
        let (p_term, v0) = problem.terminal.quadratic_parts(dim).ok_or_else(|| {
            Error::BackendMismatch("batch-LQ backend needs a quadratic terminal cost".into())
        })?;
        let n = problem.horizon;
        let gamma = problem.gamma;
        let geom: f64 = (0..n).map(|i| gamma.powi(i as i32)).sum();
        Ok(Self {
            a: mat_from(&a),
            b: mat_from(&b),
            c_off: DVector::from_column_slice(&c),
            q: mat_from(&q),
            r: mat_from(&r),
            p_term,
            v0,
            stage_offset_total: problem.stage_offset * geom,
            gamma,
            n,
            m: problem.model.linear_parts().unwrap().1[0].len(),
        })
    }

    pub fn new_lq(
        a: &[Vec<f64>],
        b: &[Vec<f64>],
        q: &[Vec<f64>],
        r: &[Vec<f64>],
        p_term: &[Vec<f64>],
        v0: f64,
        gamma: f64,
        horizon: usize,
    ) -> Self {
        Self {
            a: mat_from(a),
            b: mat_from(b),
            c_off: DVector::zeros(a.len()),
            q: mat_from(q),
            r: mat_from(r),
            p_term: mat_from(p_term),
            v0,
            stage_offset_total: 0.0,
            gamma,
            n: horizon,
            m: b[0].len(),
        }
    }

    /// Prediction matrices: x_i = phi_i x0 + sum_j gamma_{i,j} u_j + d_i.
    fn prediction(&self) -> (Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>, Vec<DVector<f64>>) {
        let nx = self.a.nrows();
        let mut phis = Vec::with_capacity(self.n + 1);
        let mut gams: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(self.n + 1);
        let mut ds = Vec::with_capacity(self.n + 1);
        phis.push(DMatrix::identity(nx, nx));
        gams.push(Vec::new());
        ds.push(DVector::zeros(nx));
        for i in 1..=self.n {
            let prev_phi = &phis[i - 1];
            phis.push(&self.a * prev_phi);
            let mut row: Vec<DMatrix<f64>> = Vec::with_capacity(i);
            for j in 0..i {
                if j == i - 1 {
                    row.push(self.b.clone());
                } else {
                    row.push(&self.a * &gams[i - 1][j]);
                }
            }
            gams.push(row);
            ds.push(&self.a * &ds[i - 1] + &self.c_off);
        }
        (phis, gams, ds)
    }

    /// Quadratic form of the objective in the stacked inputs:
    /// J(U) = U' H U + 2 g' U + c.
    fn assemble(&self, x0: &[f64]) -> (DMatrix<f64>, DVector<f64>, f64) {
        let (phis, gams, ds) = self.prediction();
        let nu = self.n * self.m;
        let x0 = DVector::from_column_slice(x0);
        let mut h = DMatrix::zeros(nu, nu);
        let mut g = DVector::zeros(nu);
        let mut cst = self.stage_offset_total + self.gamma.powi(self.n as i32) * self.v0;
        // state costs at stages 1..N-1 with weight gamma^i Q, terminal with gamma^N P
        for i in 0..=self.n {
            let (weight, w_mat) = if i < self.n {
                (self.gamma.powi(i as i32), &self.q)
            } else {
                (self.gamma.powi(self.n as i32), &self.p_term)
            };
            let free = &phis[i] * &x0 + &ds[i];
            // constant
            cst += weight * (free.transpose() * w_mat * &free)[(0, 0)];
            for j in 0..i.min(self.n) {
                let gj = &gams[i][j];
                // linear
                let lin = weight * (gj.transpose() * w_mat * &free);
                for r in 0..self.m {
                    g[j * self.m + r] += lin[r];
                }
                for k in 0..i.min(self.n) {
                    let gk = &gams[i][k];
                    let blk = weight * (gj.transpose() * w_mat * gk);
                    for r in 0..self.m {
                        for s in 0..self.m {
                            h[(j * self.m + r, k * self.m + s)] += blk[(r, s)];
                        }
                    }
                }
            }
        }
        // input costs
        for i in 0..self.n {
            let w = self.gamma.powi(i as i32);
            for r in 0..self.m {
                for s in 0..self.m {
                    h[(i * self.m + r, i * self.m + s)] += w * self.r[(r, s)];
                }
            }
        }
        (h, g, cst)
    }

    fn objective(h: &DMatrix<f64>, g: &DVector<f64>, cst: f64, u: &DVector<f64>) -> f64 {
        (u.transpose() * h * u)[(0, 0)] + 2.0 * (g.transpose() * u)[(0, 0)] + cst
    }

    /// Exact unconstrained optimum from `x0`.
    pub fn solve(&self, x0: &[f64]) -> Result<MpcSolution> {
        let (h, g, cst) = self.assemble(x0);
        let u = h
            .clone()
            .lu()
            .solve(&(-&g))
            .ok_or_else(|| Error::NoConvergence("batch-LQ Hessian is singular".into()))?;
        let value = Self::objective(&h, &g, cst, &u);
        Ok(self.plan_from(x0, &u, value))
    }

    /// Optimum with the first input pinned to `a`.
    pub fn q(&self, x0: &[f64], a: &[f64]) -> Result<f64> {
        let (h, g, cst) = self.assemble(x0);
        let nu = self.n * self.m;
        let m = self.m;
        let u0 = DVector::from_column_slice(a);
        if nu == m {
            return Ok(Self::objective(&h, &g, cst, &u0));
        }
        let h00 = h.view((0, 0), (m, m)).into_owned();
        let h0r = h.view((0, m), (m, nu - m)).into_owned();
        let hrr = h.view((m, m), (nu - m, nu - m)).into_owned();
        let g0 = g.rows(0, m).into_owned();
        let gr = g.rows(m, nu - m).into_owned();
        // minimize over the free tail: hrr u_r = -(gr + h0r' u0)
        let rhs = -(&gr + h0r.transpose() * &u0);
        let ur = hrr
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoConvergence("batch-LQ tail Hessian is singular".into()))?;
        let value = (u0.transpose() * &h00 * &u0)[(0, 0)]
            + 2.0 * (u0.transpose() * &h0r * &ur)[(0, 0)]
            + (ur.transpose() * &hrr * &ur)[(0, 0)]
            + 2.0 * (g0.transpose() * &u0)[(0, 0)]
            + 2.0 * (gr.transpose() * &ur)[(0, 0)]
            + cst;
        Ok(value)
    }

    fn plan_from(&self, x0: &[f64], u: &DVector<f64>, value: f64) -> MpcSolution {
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.n);
        for i in 0..self.n {
            inputs.push((0..self.m).map(|r| u[i * self.m + r]).collect());
        }
        let mut states = Vec::with_capacity(self.n + 1);
        let mut x = DVector::from_column_slice(x0);
        states.push(x0.to_vec());
        for input in &inputs {
            let uv = DVector::from_column_slice(input);
            x = &self.a * &x + &self.b * uv + &self.c_off;
            states.push(x.iter().copied().collect());
        }
        MpcSolution {
            value,
            inputs,
            states,
            feasible: true,
        }
    }
}
