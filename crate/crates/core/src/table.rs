//! Grid-indexed value, action-value and policy tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mdp::Policy;

/// Dense extended-real values over state-grid nodes, evaluated off-grid by
/// multilinear interpolation with clamped extrapolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueTable {
    grid: Grid,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::InvalidInput(format!(
                "value table needs {} entries, got {}",
                grid.num_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let n = grid.num_nodes();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.num_nodes()).map(|i| f(&grid.node(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, s)
    }

    pub fn node_value(&self, flat: usize) -> f64 {
        self.values[flat]
    }

    /// Finite-valued range (max - min) over nodes, ignoring infinities.
    pub fn finite_range(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &self.values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }

    /// Max |second difference| / h^2 along `axis` over finite node triples.
    ///
    /// A curvature scale for interpolation-error bounds.
    pub fn max_curvature(&self, axis: usize) -> f64 {
        max_curvature_along(&self.grid, &self.values, axis)
    }

    /// CSV rows `s..., value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|i| format!("s{i}")).collect();
        header.push("value".into());
        writeln!(w, "{}", header.join(","))?;
        for (flat, &v) in self.values.iter().enumerate() {
            let node = self.grid.node(flat);
            let mut row: Vec<String> = node.iter().map(|x| format!("{x}")).collect();
            row.push(if v.is_finite() {
                format!("{v}")
            } else {
                "inf".into()
            });
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn max_curvature_along(grid: &Grid, values: &[f64], axis: usize) -> f64 {
    let n_axis = grid.axis(axis).len();
    if n_axis < 3 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for flat in 0..grid.num_nodes() {
        let multi = grid.multi_index(flat);
        let i = multi[axis];
        if i == 0 || i + 1 >= n_axis {
            continue;
        }
        let mut lo = multi.clone();
        lo[axis] -= 1;
        let mut hi = multi.clone();
        hi[axis] += 1;
        let (vm, v0, vp) = (
            values[grid.flat_index(&lo)],
            values[flat],
            values[grid.flat_index(&hi)],
        );
        if !(vm.is_finite() && v0.is_finite() && vp.is_finite()) {
            continue;
        }
        let xm = grid.axis(axis).at(i - 1);
        let x0 = grid.axis(axis).at(i);
        let xp = grid.axis(axis).at(i + 1);
        let second =
            2.0 * ((vp - v0) / (xp - x0) - (v0 - vm) / (x0 - xm)) / (xp - xm);
        worst = worst.max(second.abs());
    }
    worst
}

/// Extended-real action values over state-grid x action-grid nodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QTable {
    state_grid: Grid,
    action_grid: Grid,
    joint: Grid,
    /// Row-major with state axes first: values[state_flat * NA + action_flat].
    values: Vec<f64>,
}

impl QTable {
    pub fn new(state_grid: Grid, action_grid: Grid, values: Vec<f64>) -> Result<Self> {
        let expect = state_grid.num_nodes() * action_grid.num_nodes();
        if values.len() != expect {
            return Err(Error::InvalidInput(format!(
                "q table needs {expect} entries, got {}",
                values.len()
            )));
        }
        let joint = Grid::product(&state_grid, &action_grid)?;
        Ok(Self {
            state_grid,
            action_grid,
            joint,
            values,
        })
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    pub fn action_grid(&self) -> &Grid {
        &self.action_grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, s: &[f64], a: &[f64]) -> f64 {
        let mut pt = Vec::with_capacity(s.len() + a.len());
        pt.extend_from_slice(s);
        pt.extend_from_slice(a);
        self.joint.interpolate(&self.values, &pt)
    }

    pub fn row(&self, state_flat: usize) -> &[f64] {
        let na = self.action_grid.num_nodes();
        &self.values[state_flat * na..(state_flat + 1) * na]
    }

    /// Row minimum with lowest-action-index tie-break.
    pub fn min_argmin(&self, state_flat: usize) -> (f64, usize) {
        min_argmin(self.row(state_flat))
    }

    /// Max |d2/da2| curvature over action axis `axis` (for error bounds).
    pub fn max_action_curvature(&self, axis: usize) -> f64 {
        max_curvature_along(&self.joint, &self.values, self.state_grid.dim() + axis)
    }

    /// CSV rows `s..., a..., value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let sd = self.state_grid.dim();
        let ad = self.action_grid.dim();
        let mut header: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
        header.extend((0..ad).map(|i| format!("a{i}")));
        header.push("value".into());
        writeln!(w, "{}", header.join(","))?;
        for (flat, &v) in self.values.iter().enumerate() {
            let pt = self.joint.node(flat);
            let mut row: Vec<String> = pt.iter().map(|x| format!("{x}")).collect();
            row.push(if v.is_finite() {
                format!("{v}")
            } else {
                "inf".into()
            });
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Lowest-index argmin; all-infinite rows return (inf, 0).
pub fn min_argmin(row: &[f64]) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut arg = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v < best {
            best = v;
            arg = j;
        }
    }
    (best, arg)
}

/// Greedy action index per state node, with the lowest-index tie-break.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyTable {
    state_grid: Grid,
    action_grid: Grid,
    actions: Vec<usize>,
}

impl PolicyTable {
    pub fn new(state_grid: Grid, action_grid: Grid, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != state_grid.num_nodes() {
            return Err(Error::InvalidInput(
                "policy table needs one action index per state node".into(),
            ));
        }
        Ok(Self {
            state_grid,
            action_grid,
            actions,
        })
    }

    pub fn action_index(&self, state_flat: usize) -> usize {
        self.actions[state_flat]
    }

    pub fn action_at_node(&self, state_flat: usize) -> Vec<f64> {
        self.action_grid.node(self.actions[state_flat])
    }

    pub fn indices(&self) -> &[usize] {
        &self.actions
    }

    pub fn state_grid(&self) -> &Grid {
        &self.state_grid
    }

    /// CSV rows `s..., a...` of the stored greedy action.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let sd = self.state_grid.dim();
        let ad = self.action_grid.dim();
        let mut header: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
        header.extend((0..ad).map(|i| format!("a{i}")));
        writeln!(w, "{}", header.join(","))?;
        for flat in 0..self.state_grid.num_nodes() {
            let s = self.state_grid.node(flat);
            let a = self.action_at_node(flat);
            let mut row: Vec<String> = s.iter().map(|x| format!("{x}")).collect();
            row.extend(a.iter().map(|x| format!("{x}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Greedy policy over an interpolated Q table: argmin over the action grid of
/// Q(s, a_j), with the lowest-index tie-break.
pub struct GreedyQPolicy<'a> {
    pub qtable: &'a QTable,
}

impl Policy for GreedyQPolicy<'_> {
    fn action(&self, s: &[f64]) -> Result<Vec<f64>> {
        let na = self.qtable.action_grid().num_nodes();
        let mut best = f64::INFINITY;
        let mut arg = 0usize;
        for j in 0..na {
            let a = self.qtable.action_grid().node(j);
            let v = self.qtable.eval(s, &a);
            if v < best {
                best = v;
                arg = j;
            }
        }
        if best == f64::INFINITY {
            return Err(Error::Infeasible(format!(
                "every action is infeasible at state {s:?}"
            )));
        }
        Ok(self.qtable.action_grid().node(arg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use approx::assert_relative_eq;

    #[test]
    fn value_table_reproduces_nodes_and_clamps() {
        let grid = Grid::new(vec![Axis::uniform(-1.0, 1.0, 5).unwrap()]).unwrap();
        let vt = ValueTable::from_fn(grid.clone(), |s| s[0] * s[0]);
        for flat in 0..grid.num_nodes() {
            assert_relative_eq!(vt.eval(&grid.node(flat)), vt.node_value(flat));
        }
        // clamped extrapolation
        assert_relative_eq!(vt.eval(&[5.0]), vt.eval(&[1.0]));
    }

    #[test]
    fn q_table_min_is_lowest_index_on_ties() {
        let sg = Grid::new(vec![Axis::uniform(0.0, 1.0, 2).unwrap()]).unwrap();
        let ag = Grid::new(vec![Axis::uniform(0.0, 1.0, 3).unwrap()]).unwrap();
        let q = QTable::new(sg, ag, vec![1.0, 0.5, 0.5, 2.0, 2.0, 2.0]).unwrap();
        let (v, j) = q.min_argmin(0);
        assert_relative_eq!(v, 0.5);
        assert_eq!(j, 1);
        let (_, j0) = q.min_argmin(1);
        assert_eq!(j0, 0);
    }

    #[test]
    fn curvature_of_quadratic_is_constant() {
        let grid = Grid::new(vec![Axis::uniform(-1.0, 1.0, 21).unwrap()]).unwrap();
        let vt = ValueTable::from_fn(grid, |s| 3.0 * s[0] * s[0]);
        assert_relative_eq!(vt.max_curvature(0), 6.0, epsilon = 1e-9);
    }

    #[test]
    fn greedy_policy_errors_when_all_actions_infinite() {
        let sg = Grid::new(vec![Axis::uniform(0.0, 1.0, 2).unwrap()]).unwrap();
        let ag = Grid::new(vec![Axis::uniform(0.0, 1.0, 2).unwrap()]).unwrap();
        let q = QTable::new(sg, ag, vec![f64::INFINITY; 4]).unwrap();
        let pi = GreedyQPolicy { qtable: &q };
        assert!(pi.action(&[0.5]).is_err());
    }
}
