//! Ordered axis grids with multilinear interpolation and clamped extrapolation.
//!
//! Tables of extended-real values (`f64::INFINITY` marks infeasible nodes) are
//! interpolated so that a corner with zero weight never contaminates the
//! result, which keeps node values exactly reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolation supports up to this many axes per grid.
pub const MAX_DIM: usize = 4;

/// One strictly increasing coordinate axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    points: Vec<f64>,
}

impl Axis {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("axis needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("axis points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "axis points must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// Uniformly spaced axis over `[min, max]` with `count` nodes.
    pub fn uniform(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 1 {
            return Err(Error::InvalidInput("axis needs at least one point".into()));
        }
        if count == 1 {
            return Self::new(vec![min]);
        }
        if !(min < max) {
            return Err(Error::InvalidInput(format!(
                "axis range [{min}, {max}] is empty"
            )));
        }
        let step = (max - min) / (count - 1) as f64;
        let mut pts: Vec<f64> = (0..count).map(|i| min + step * i as f64).collect();
        // pin the endpoint exactly
        *pts.last_mut().unwrap() = max;
        Self::new(pts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.points[0]
    }

    pub fn max(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn at(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// Largest cell width.
    pub fn max_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Clamped cell lookup: lower node index and fractional offset in [0, 1].
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.points.len();
        if n == 1 || x <= self.points[0] {
            return (0, 0.0);
        }
        if x >= self.points[n - 1] {
            return (n - 2, 1.0);
        }
        // first index with points[j] > x; x is inside [points[j-1], points[j])
        let j = self.points.partition_point(|&p| p <= x);
        let i0 = j - 1;
        let frac = (x - self.points[i0]) / (self.points[j] - self.points[i0]);
        (i0, frac)
    }

    /// Subdivide every cell into `factor` equal parts.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("refine factor must be >= 1".into()));
        }
        if factor == 1 || self.points.len() == 1 {
            return Ok(self.clone());
        }
        let mut pts = Vec::with_capacity((self.points.len() - 1) * factor + 1);
        for w in self.points.windows(2) {
            for k in 0..factor {
                pts.push(w[0] + (w[1] - w[0]) * k as f64 / factor as f64);
            }
        }
        pts.push(self.max());
        Self::new(pts)
    }
}

/// JSON-facing axis description: `{min, max, points}` or an explicit node list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    Uniform { min: f64, max: f64, points: usize },
    Explicit(Vec<f64>),
}

impl AxisSpec {
    pub fn to_axis(&self) -> Result<Axis> {
        match self {
            AxisSpec::Uniform { min, max, points } => Axis::uniform(*min, *max, *points),
            AxisSpec::Explicit(pts) => Axis::new(pts.clone()),
        }
    }
}

/// Cartesian product of axes, indexed row-major (first axis slowest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidInput("grid needs at least one axis".into()));
        }
        if axes.len() > MAX_DIM {
            return Err(Error::InvalidInput(format!(
                "grid supports at most {MAX_DIM} axes, got {}",
                axes.len()
            )));
        }
        Ok(Self { axes })
    }

    pub fn from_specs(specs: &[AxisSpec]) -> Result<Self> {
        let axes = specs.iter().map(AxisSpec::to_axis).collect::<Result<_>>()?;
        Self::new(axes)
    }

    /// Concatenation of two grids' axes (state x action product grids).
    pub fn product(a: &Grid, b: &Grid) -> Result<Grid> {
        let mut axes = a.axes.clone();
        axes.extend(b.axes.iter().cloned());
        Grid::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, d: usize) -> &Axis {
        &self.axes[d]
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn num_nodes(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::min).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::max).collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut idx = 0;
        for (axis, &i) in self.axes.iter().zip(multi) {
            debug_assert!(i < axis.len());
            idx = idx * axis.len() + i;
        }
        idx
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rem = flat;
        let mut multi = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            let n = self.axes[d].len();
            multi[d] = rem % n;
            rem /= n;
        }
        multi
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let multi = self.multi_index(flat);
        multi
            .iter()
            .zip(&self.axes)
            .map(|(&i, axis)| axis.at(i))
            .collect()
    }

    pub fn contains(&self, pt: &[f64]) -> bool {
        pt.len() == self.dim()
            && pt
                .iter()
                .zip(&self.axes)
                .all(|(&x, axis)| x >= axis.min() && x <= axis.max())
    }

    pub fn clamp(&self, pt: &[f64]) -> Vec<f64> {
        pt.iter()
            .zip(&self.axes)
            .map(|(&x, axis)| x.clamp(axis.min(), axis.max()))
            .collect()
    }

    /// Multilinear interpolation of node `values` at `pt`, clamped to the box.
    ///
    /// Corners with zero weight are skipped so an infinite neighbour does not
    /// leak into a finite cell; any positive-weight infinite corner makes the
    /// result infinite.
    pub fn interpolate(&self, values: &[f64], pt: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.num_nodes());
        debug_assert_eq!(pt.len(), self.dim());
        let d = self.dim();
        let mut i0 = [0usize; MAX_DIM];
        let mut fr = [0f64; MAX_DIM];
        for k in 0..d {
            let (i, f) = self.axes[k].locate(pt[k]);
            i0[k] = i;
            fr[k] = f;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                w *= if hi { fr[k] } else { 1.0 - fr[k] };
                let n = self.axes[k].len();
                let node = if n == 1 { 0 } else { i0[k] + hi as usize };
                idx = idx * n + node;
            }
            if w > 0.0 {
                let v = values[idx];
                if v == f64::INFINITY {
                    return f64::INFINITY;
                }
                acc += w * v;
            }
        }
        acc
    }

    /// Gather the interpolation stencil at `pt`: (flat node index, weight)
    /// pairs with strictly positive weight.
    pub fn stencil(&self, pt: &[f64], out: &mut Vec<(u32, f64)>) {
        let d = self.dim();
        let mut i0 = [0usize; MAX_DIM];
        let mut fr = [0f64; MAX_DIM];
        for k in 0..d {
            let (i, f) = self.axes[k].locate(pt[k]);
            i0[k] = i;
            fr[k] = f;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                w *= if hi { fr[k] } else { 1.0 - fr[k] };
                let n = self.axes[k].len();
                let node = if n == 1 { 0 } else { i0[k] + hi as usize };
                idx = idx * n + node;
            }
            if w > 0.0 {
                out.push((idx as u32, w));
            }
        }
    }

    pub fn refine(&self, factor: usize) -> Result<Grid> {
        let axes = self
            .axes
            .iter()
            .map(|a| a.refine(factor))
            .collect::<Result<_>>()?;
        Grid::new(axes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn axis_rejects_non_increasing() {
        assert!(Axis::new(vec![0.0, 0.0, 1.0]).is_err());
        assert!(Axis::new(vec![1.0, 0.0]).is_err());
        assert!(Axis::new(vec![]).is_err());
        assert!(Axis::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn locate_clamps_and_interpolates() {
        let axis = Axis::uniform(-1.0, 1.0, 5).unwrap();
        assert_eq!(axis.locate(-2.0), (0, 0.0));
        assert_eq!(axis.locate(2.0), (3, 1.0));
        let (i, f) = axis.locate(0.25);
        assert_eq!(i, 2);
        assert_relative_eq!(f, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_reproduces_node_values() {
        let grid = Grid::new(vec![
            Axis::uniform(0.0, 1.0, 3).unwrap(),
            Axis::uniform(-1.0, 1.0, 4).unwrap(),
        ])
        .unwrap();
        let values: Vec<f64> = (0..grid.num_nodes()).map(|i| i as f64 * 0.37 - 1.0).collect();
        for flat in 0..grid.num_nodes() {
            let node = grid.node(flat);
            assert_relative_eq!(grid.interpolate(&values, &node), values[flat], epsilon = 1e-14);
        }
    }

    #[test]
    fn interpolation_is_exact_on_linear_functions() {
        let grid = Grid::new(vec![
            Axis::uniform(0.0, 2.0, 5).unwrap(),
            Axis::uniform(0.0, 2.0, 7).unwrap(),
        ])
        .unwrap();
        let f = |p: &[f64]| 3.0 * p[0] - 2.0 * p[1] + 0.5;
        let values: Vec<f64> = (0..grid.num_nodes()).map(|i| f(&grid.node(i))).collect();
        for pt in [[0.3, 1.7], [1.99, 0.01], [0.0, 2.0]] {
            assert_relative_eq!(grid.interpolate(&values, &pt), f(&pt), epsilon = 1e-12);
        }
    }

    #[test]
    fn infinite_node_with_zero_weight_does_not_leak() {
        let grid = Grid::new(vec![Axis::uniform(0.0, 2.0, 3).unwrap()]).unwrap();
        let values = vec![1.0, 2.0, f64::INFINITY];
        // exactly on node 1: weight on the infinite node is zero
        assert_relative_eq!(grid.interpolate(&values, &[1.0]), 2.0);
        // interior of the last cell picks up the infinity
        assert_eq!(grid.interpolate(&values, &[1.5]), f64::INFINITY);
    }

    #[test]
    fn refine_doubles_resolution() {
        let axis = Axis::uniform(0.0, 1.0, 5).unwrap();
        let fine = axis.refine(2).unwrap();
        assert_eq!(fine.len(), 9);
        assert_relative_eq!(fine.max_spacing(), axis.max_spacing() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn flat_and_multi_index_roundtrip() {
        let grid = Grid::new(vec![
            Axis::uniform(0.0, 1.0, 3).unwrap(),
            Axis::uniform(0.0, 1.0, 4).unwrap(),
            Axis::uniform(0.0, 1.0, 2).unwrap(),
        ])
        .unwrap();
        for flat in 0..grid.num_nodes() {
            assert_eq!(grid.flat_index(&grid.multi_index(flat)), flat);
        }
    }
}
