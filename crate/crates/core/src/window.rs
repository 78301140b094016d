//! Input-output windows: the stacked state that makes IO systems Markov.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::StochasticLinearSystem;
use crate::solver::mat_from;

/// Recent measurements available at time k: outputs y_{k-p..k} and inputs
/// u_{k-l..k-1}, each stored oldest-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoWindow {
    pub y_past: Vec<Vec<f64>>,
    pub u_past: Vec<Vec<f64>>,
}

impl IoWindow {
    pub fn new(y_past: Vec<Vec<f64>>, u_past: Vec<Vec<f64>>) -> Self {
        Self { y_past, u_past }
    }

    pub fn p(&self) -> usize {
        self.y_past.len().saturating_sub(1)
    }

    pub fn l(&self) -> usize {
        self.u_past.len()
    }

    pub fn output_dim(&self) -> usize {
        self.y_past.first().map_or(0, Vec::len)
    }

    pub fn input_dim(&self) -> usize {
        self.u_past.first().map_or(0, Vec::len)
    }

    /// The stacked Markov state (y_k, ..., y_{k-p}, u_{k-1}, ..., u_{k-l}),
    /// newest first.
    pub fn stacked_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for y in self.y_past.iter().rev() {
            out.extend_from_slice(y);
        }
        for u in self.u_past.iter().rev() {
            out.extend_from_slice(u);
        }
        out
    }

    /// Oldest-first concatenation (y_{k-p}..y_k, u_{k-l}..u_{k-1}), matching
    /// trajectory-library column order.
    pub fn stacked_oldest_first(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for y in &self.y_past {
            out.extend_from_slice(y);
        }
        for u in &self.u_past {
            out.extend_from_slice(u);
        }
        out
    }

    /// Slice the window ending at time index `k` out of recorded signals.
    pub fn from_records(
        ys: &[Vec<f64>],
        us: &[Vec<f64>],
        k: usize,
        p: usize,
        l: usize,
    ) -> Result<Self> {
        if k < p || k < l || k > ys.len().saturating_sub(1) || k > us.len() {
            return Err(Error::InvalidInput(format!(
                "window at k={k} with p={p}, l={l} does not fit the records"
            )));
        }
        Ok(Self {
            y_past: ys[k - p..=k].to_vec(),
            u_past: us[k - l..k].to_vec(),
        })
    }
}

/// Reconstruct the state x_k of a noise-free linear system from an IO window.
///
/// Solves the stacked observability system for x_{k-p} in least squares and
/// rolls it forward through the recorded inputs. Requires l >= p so the
/// inputs covering the window are known.
pub fn window_to_state(sys: &StochasticLinearSystem, window: &IoWindow) -> Result<Vec<f64>> {
    let p = window.p();
    let l = window.l();
    if l < p {
        return Err(Error::InvalidInput(
            "state reconstruction needs input lag l >= output lag p".into(),
        ));
    }
    let n = sys.state_dim();
    let q = sys.output_dim();
    let a = mat_from(&sys.a);
    let b = mat_from(&sys.b);
    let c = mat_from(&sys.c);
    // y_{k-p+i} = C A^i x_{k-p} + sum_{j<i} C A^{i-1-j} B u_{k-p+j}
    let rows = (p + 1) * q;
    let mut obs = DMatrix::zeros(rows, n);
    let mut rhs = nalgebra::DVector::zeros(rows);
    let mut a_pow = DMatrix::identity(n, n);
    for i in 0..=p {
        let block = &c * &a_pow;
        for r in 0..q {
            for col in 0..n {
                obs[(i * q + r, col)] = block[(r, col)];
            }
            rhs[i * q + r] = window.y_past[i][r];
        }
        // subtract known input contributions
        for j in 0..i {
            let mut a_mid = DMatrix::identity(n, n);
            for _ in 0..(i - 1 - j) {
                a_mid = &a_mid * &a;
            }
            let g = &c * &a_mid * &b;
            // u_{k-p+j} = u_past[l - p + j]
            let u = &window.u_past[l - p + j];
            for r in 0..q {
                let contrib: f64 = (0..sys.input_dim()).map(|m| g[(r, m)] * u[m]).sum();
                rhs[i * q + r] -= contrib;
            }
        }
        a_pow = &a_pow * &a;
    }
    let svd = obs.svd(true, true);
    if svd.rank(1e-10) < n {
        return Err(Error::RankDeficient(
            "window too short to reconstruct the state (unobservable)".into(),
        ));
    }
    let x0 = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::NoConvergence(format!("observability solve failed: {e}")))?;
    // roll x_{k-p} forward through u_{k-p..k-1}
    let mut x = x0;
    for j in 0..p {
        let u = &window.u_past[l - p + j];
        let uv = nalgebra::DVector::from_column_slice(u);
        x = &a * x + &b * uv;
    }
    Ok(x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_system() -> StochasticLinearSystem {
        StochasticLinearSystem {
            a: vec![vec![0.8, 0.3], vec![-0.2, 0.9]],
            b: vec![vec![0.0], vec![1.0]],
            c: vec![vec![1.0, 0.0]],
            noise: None,
            measurement_noise: None,
            q_cost: vec![vec![1.0]],
            r_cost: vec![vec![0.1]],
        }
    }

    #[test]
    fn stacked_state_orders_newest_first() {
        let w = IoWindow::new(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![10.0], vec![20.0]],
        );
        assert_eq!(w.p(), 2);
        assert_eq!(w.l(), 2);
        assert_eq!(w.stacked_state(), vec![3.0, 2.0, 1.0, 20.0, 10.0]);
        assert_eq!(w.stacked_oldest_first(), vec![1.0, 2.0, 3.0, 10.0, 20.0]);
    }

    #[test]
    fn reconstructs_the_state_of_a_noiseless_run() {
        let sys = two_state_system();
        let inputs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![((i * 7 + 3) % 11) as f64 / 11.0 - 0.5])
            .collect();
        let (xs, ys) = sys.simulate(&[0.4, -0.3], &inputs, 0);
        for k in [2usize, 5, 12] {
            let w = IoWindow::from_records(&ys, &inputs, k, 1, 1).unwrap();
            let got = window_to_state(&sys, &w).unwrap();
            for (g, e) in got.iter().zip(&xs[k]) {
                assert!((g - e).abs() < 1e-9, "x_{k}: {got:?} vs {:?}", xs[k]);
            }
        }
    }
}
