//! Data-driven predictive control: trajectory libraries, the implicit
//! minimum-norm predictor, the explicit multi-step least-squares predictor,
//! the self-consistency (iterated one-step structure) test, and the
//! receding-horizon controllers built on either predictor.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::StageCost;
use crate::error::{Error, Result};
use crate::mdp::{stream_rng, StochasticLinearSystem};
use crate::mpc::TerminalCost;
use crate::window::IoWindow;

/// Excitation signal for data collection.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    /// Independent uniform draws inside the input box.
    UniformRandom { lo: Vec<f64>, hi: Vec<f64> },
    /// Random binary sequence at +/- amplitude.
    Prbs { amplitude: f64 },
}

impl Excitation {
    fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Excitation::UniformRandom { lo, hi } => (0..m)
                .map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>())
                .collect(),
            Excitation::Prbs { amplitude } => (0..m)
                .map(|_| {
                    if rng.random::<f64>() < 0.5 {
                        -*amplitude
                    } else {
                        *amplitude
                    }
                })
                .collect(),
        }
    }
}

/// Stacked past/future input-output windows collected from one recorded run.
///
/// Column j stacks (y_{j-p} ... y_{j+N}, u_{j-l} ... u_{j+N-1}), oldest
/// first within each block.
#[derive(Clone, Debug)]
pub struct TrajectoryLibrary {
    pub columns: DMatrix<f64>,
    pub p: usize,
    pub l: usize,
    pub n_hor: usize,
    pub q_dim: usize,
    pub m_dim: usize,
    pub seed: u64,
    pub excitation: Excitation,
}

impl TrajectoryLibrary {
    pub fn column_height(p: usize, l: usize, n_hor: usize, q: usize, m: usize) -> usize {
        (p + n_hor + 1) * q + (l + n_hor) * m
    }

    /// Number of windows a record of `length` inputs yields.
    pub fn column_count(length: usize, p: usize, l: usize, n_hor: usize) -> usize {
        (length - n_hor).saturating_sub(p.max(l)) + 1
    }

    pub fn n_columns(&self) -> usize {
        self.columns.ncols()
    }

    // row ranges of the blocks inside one column
    pub fn y_past_rows(&self) -> std::ops::Range<usize> {
        0..(self.p + 1) * self.q_dim
    }

    pub fn y_future_rows(&self) -> std::ops::Range<usize> {
        (self.p + 1) * self.q_dim..(self.p + 1 + self.n_hor) * self.q_dim
    }

    pub fn u_past_rows(&self) -> std::ops::Range<usize> {
        let y_block = (self.p + 1 + self.n_hor) * self.q_dim;
        y_block..y_block + self.l * self.m_dim
    }

    pub fn u_future_rows(&self) -> std::ops::Range<usize> {
        let y_block = (self.p + 1 + self.n_hor) * self.q_dim;
        y_block + self.l * self.m_dim..y_block + (self.l + self.n_hor) * self.m_dim
    }

    fn rows(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        self.columns
            .view((range.start, 0), (range.len(), self.columns.ncols()))
            .into_owned()
    }

    /// Regressor rows for the explicit predictor: past outputs plus the
    /// whole input window.
    pub fn regressor_rows(&self) -> DMatrix<f64> {
        let ncols = self.columns.ncols();
        let top = self.rows(self.y_past_rows());
        let mid = self.rows(self.u_past_rows());
        let bot = self.rows(self.u_future_rows());
        let mut out = DMatrix::zeros(top.nrows() + mid.nrows() + bot.nrows(), ncols);
        out.view_mut((0, 0), (top.nrows(), ncols)).copy_from(&top);
        out.view_mut((top.nrows(), 0), (mid.nrows(), ncols))
            .copy_from(&mid);
        out.view_mut((top.nrows() + mid.nrows(), 0), (bot.nrows(), ncols))
            .copy_from(&bot);
        out
    }

    /// CSV export with one labelled row per signal lag.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut labels = Vec::new();
        for t in 0..=(self.p + self.n_hor) {
            let lag = t as i64 - self.p as i64;
            for r in 0..self.q_dim {
                labels.push(format!("y[k{lag:+}][{r}]"));
            }
        }
        for t in 0..(self.l + self.n_hor) {
            let lag = t as i64 - self.l as i64;
            for r in 0..self.m_dim {
                labels.push(format!("u[k{lag:+}][{r}]"));
            }
        }
        writeln!(w, "signal,{}", (0..self.n_columns()).map(|j| format!("col{j}")).collect::<Vec<_>>().join(","))?;
        for (i, label) in labels.iter().enumerate() {
            let mut row = vec![label.clone()];
            for j in 0..self.n_columns() {
                row.push(format!("{}", self.columns[(i, j)]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// The recent window inside column `j` (for replaying library data).
    pub fn window_of_column(&self, j: usize) -> IoWindow {
        let col = self.columns.column(j);
        let mut y_past = Vec::with_capacity(self.p + 1);
        for t in 0..=self.p {
            y_past.push((0..self.q_dim).map(|r| col[t * self.q_dim + r]).collect());
        }
        let u_base = (self.p + 1 + self.n_hor) * self.q_dim;
        let mut u_past = Vec::with_capacity(self.l);
        for t in 0..self.l {
            u_past.push(
                (0..self.m_dim)
                    .map(|r| col[u_base + t * self.m_dim + r])
                    .collect(),
            );
        }
        IoWindow::new(y_past, u_past)
    }

    /// Future inputs stored in column `j`.
    pub fn future_u_of_column(&self, j: usize) -> Vec<Vec<f64>> {
        let col = self.columns.column(j);
        let base = self.u_future_rows().start;
        (0..self.n_hor)
            .map(|t| {
                (0..self.m_dim)
                    .map(|r| col[base + t * self.m_dim + r])
                    .collect()
            })
            .collect()
    }

    /// Future outputs stored in column `j`.
    pub fn future_y_of_column(&self, j: usize) -> Vec<Vec<f64>> {
        let col = self.columns.column(j);
        let base = self.y_future_rows().start;
        (0..self.n_hor)
            .map(|t| {
                (0..self.q_dim)
                    .map(|r| col[base + t * self.q_dim + r])
                    .collect()
            })
            .collect()
    }
}

/// Simulate the system under the excitation and slice overlapping windows.
///
/// The record needs enough columns for persistent excitation: at least four
/// times the column height.
pub fn collect_library(
    sys: &StochasticLinearSystem,
    excitation: Excitation,
    length: usize,
    p: usize,
    l: usize,
    n_hor: usize,
    seed: u64,
) -> Result<TrajectoryLibrary> {
    sys.validate()?;
    if n_hor < 1 {
        return Err(Error::InvalidInput("prediction horizon must be >= 1".into()));
    }
    let q = sys.output_dim();
    let m = sys.input_dim();
    let height = TrajectoryLibrary::column_height(p, l, n_hor, q, m);
    let min_cols = 4 * height;
    let min_length = min_cols + n_hor + p.max(l) - 1;
    if length < min_length {
        return Err(Error::InvalidInput(format!(
            "record of {length} inputs yields {} columns; need >= {min_cols} \
             (record length >= {min_length})",
            TrajectoryLibrary::column_count(length, p, l, n_hor)
        )));
    }
    let mut input_rng = stream_rng(seed, 1);
    let inputs: Vec<Vec<f64>> = (0..length)
        .map(|_| excitation.sample(m, &mut input_rng))
        .collect();
    let x0 = vec![0.0; sys.state_dim()];
    let (_, ys) = sys.simulate(&x0, &inputs, seed);
    let start = p.max(l);
    let n_cols = TrajectoryLibrary::column_count(length, p, l, n_hor);
    let mut columns = DMatrix::zeros(height, n_cols);
    for (c, j) in (start..=(length - n_hor)).enumerate() {
        let mut r = 0usize;
        for t in (j - p)..=(j + n_hor) {
            for k in 0..q {
                columns[(r, c)] = ys[t][k];
                r += 1;
            }
        }
        for t in (j - l)..(j + n_hor) {
            for k in 0..m {
                columns[(r, c)] = inputs[t][k];
                r += 1;
            }
        }
        debug_assert_eq!(r, height);
    }
    Ok(TrajectoryLibrary {
        columns,
        p,
        l,
        n_hor,
        q_dim: q,
        m_dim: m,
        seed,
        excitation,
    })
}

/// Outcome of one implicit prediction.
#[derive(Clone, Debug)]
pub struct ImplicitPrediction {
    pub outputs: Vec<Vec<f64>>,
    pub alpha: DVector<f64>,
    /// Relative residual of the known-row equality constraints.
    pub residual: f64,
}

/// Minimum-norm combination predictor over the library columns.
///
/// Solves min ||alpha||^2 subject to the known rows (past outputs, past
/// inputs, planned inputs) matching the query, and reads the future outputs
/// off the unknown rows.
pub struct ImplicitPredictor {
    d_known: DMatrix<f64>,
    d_unknown: DMatrix<f64>,
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub p: usize,
    pub l: usize,
    pub n_hor: usize,
    pub q_dim: usize,
    pub m_dim: usize,
    /// Relative residual above which a query is outside the behavior span.
    pub residual_tol: f64,
}

impl ImplicitPredictor {
    pub fn new(lib: &TrajectoryLibrary) -> Self {
        let ncols = lib.columns.ncols();
        let yp = lib.rows(lib.y_past_rows());
        let up = lib.rows(lib.u_past_rows());
        let uf = lib.rows(lib.u_future_rows());
        let mut d_known = DMatrix::zeros(yp.nrows() + up.nrows() + uf.nrows(), ncols);
        d_known.view_mut((0, 0), (yp.nrows(), ncols)).copy_from(&yp);
        d_known
            .view_mut((yp.nrows(), 0), (up.nrows(), ncols))
            .copy_from(&up);
        d_known
            .view_mut((yp.nrows() + up.nrows(), 0), (uf.nrows(), ncols))
            .copy_from(&uf);
        let d_unknown = lib.rows(lib.y_future_rows());
        let svd = d_known.clone().svd(true, true);
        Self {
            d_known,
            d_unknown,
            svd,
            p: lib.p,
            l: lib.l,
            n_hor: lib.n_hor,
            q_dim: lib.q_dim,
            m_dim: lib.m_dim,
            residual_tol: 1e-6,
        }
    }

    fn stack_known(&self, window: &IoWindow, future_u: &[Vec<f64>]) -> Result<DVector<f64>> {
        if window.p() != self.p || window.l() != self.l {
            return Err(Error::InvalidInput(format!(
                "window lags (p={}, l={}) do not match the library (p={}, l={})",
                window.p(),
                window.l(),
                self.p,
                self.l
            )));
        }
        if future_u.len() != self.n_hor {
            return Err(Error::InvalidInput(format!(
                "need {} planned inputs, got {}",
                self.n_hor,
                future_u.len()
            )));
        }
        let mut b = Vec::with_capacity(self.d_known.nrows());
        for y in &window.y_past {
            b.extend_from_slice(y);
        }
        for u in &window.u_past {
            b.extend_from_slice(u);
        }
        for u in future_u {
            b.extend_from_slice(u);
        }
        Ok(DVector::from_vec(b))
    }

    /// Predict y_{k+1..k+N} for the given recent window and input plan.
    pub fn predict(&self, window: &IoWindow, future_u: &[Vec<f64>]) -> Result<ImplicitPrediction> {
        let b = self.stack_known(window, future_u)?;
        let alpha = self
            .svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::NoConvergence(format!("min-norm solve failed: {e}")))?;
        let residual = (&self.d_known * &alpha - &b).norm() / b.norm().max(1.0);
        if residual > self.residual_tol {
            return Err(Error::OutOfDomain(format!(
                "query outside behavior span (residual {residual:.3e} > {:.1e})",
                self.residual_tol
            )));
        }
        let pred = &self.d_unknown * &alpha;
        let outputs = (0..self.n_hor)
            .map(|t| {
                (0..self.q_dim)
                    .map(|r| pred[t * self.q_dim + r])
                    .collect::<Vec<f64>>()
            })
            .collect();
        Ok(ImplicitPrediction {
            outputs,
            alpha,
            residual,
        })
    }

    /// Norm of alpha's component outside the row space of the constraints;
    /// zero for the exact minimum-norm solution (the KKT condition).
    pub fn kkt_residual(&self, alpha: &DVector<f64>) -> f64 {
        let d_alpha = &self.d_known * alpha;
        match self.svd.solve(&d_alpha, 1e-12) {
            Ok(projected) => (alpha - projected).norm(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Linear multi-step predictor y_{k+1..k+N} = Psi (y_{k-p..k}, u_{k-l..k+N-1}).
#[derive(Clone, Debug)]
pub struct ExplicitPredictor {
    pub psi: DMatrix<f64>,
    pub p: usize,
    pub l: usize,
    pub n_hor: usize,
    pub q_dim: usize,
    pub m_dim: usize,
    pub residual_rms: f64,
    pub ridge: f64,
}

impl ExplicitPredictor {
    pub fn regressor_len(&self) -> usize {
        (self.p + 1) * self.q_dim + (self.l + self.n_hor) * self.m_dim
    }

    fn stack_regressor(&self, window: &IoWindow, future_u: &[Vec<f64>]) -> Result<DVector<f64>> {
        if window.p() != self.p || window.l() != self.l || future_u.len() != self.n_hor {
            return Err(Error::InvalidInput(
                "window or plan does not match the predictor dimensions".into(),
            ));
        }
        let mut reg = Vec::with_capacity(self.regressor_len());
        for y in &window.y_past {
            reg.extend_from_slice(y);
        }
        for u in &window.u_past {
            reg.extend_from_slice(u);
        }
        for u in future_u {
            reg.extend_from_slice(u);
        }
        Ok(DVector::from_vec(reg))
    }

    pub fn predict(&self, window: &IoWindow, future_u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let reg = self.stack_regressor(window, future_u)?;
        let out = &self.psi * reg;
        Ok((0..self.n_hor)
            .map(|t| {
                (0..self.q_dim)
                    .map(|r| out[t * self.q_dim + r])
                    .collect::<Vec<f64>>()
            })
            .collect())
    }

    /// Psi as CSV (one matrix row per line).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.psi.nrows() {
            let row: Vec<String> = (0..self.psi.ncols())
                .map(|j| format!("{}", self.psi[(i, j)]))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Fit Psi by least squares over the library columns, optionally ridged.
pub fn fit_explicit_predictor(lib: &TrajectoryLibrary, ridge: f64) -> Result<ExplicitPredictor> {
    if ridge < 0.0 {
        return Err(Error::InvalidInput("ridge weight must be >= 0".into()));
    }
    let g = lib.regressor_rows();
    let f = lib.rows(lib.y_future_rows());
    let psi = if ridge == 0.0 {
        let svd = g.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.rank(smax * 1e-10);
        if rank < g.nrows() {
            return Err(Error::RankDeficient(format!(
                "regressor matrix has rank {rank} < {}; add ridge or enrich the excitation",
                g.nrows()
            )));
        }
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::NoConvergence(format!("pseudo-inverse failed: {e}")))?;
        &f * pinv
    } else {
        let ggt = &g * g.transpose() + DMatrix::identity(g.nrows(), g.nrows()) * ridge;
        let gft = &g * f.transpose();
        let chol = ggt
            .cholesky()
            .ok_or_else(|| Error::NoConvergence("ridged Gram matrix not PD".into()))?;
        chol.solve(&gft).transpose()
    };
    let resid = &psi * &g - &f;
    let residual_rms = (resid.norm_squared() / (resid.nrows() * resid.ncols()) as f64).sqrt();
    Ok(ExplicitPredictor {
        psi,
        p: lib.p,
        l: lib.l,
        n_hor: lib.n_hor,
        q_dim: lib.q_dim,
        m_dim: lib.m_dim,
        residual_rms,
        ridge,
    })
}

/// One-step output predictor y_{t+1} = g(y_{t-p..t}, u_{t-l..t}).
#[derive(Clone, Debug)]
pub struct OneStepMap {
    /// q x (p+1)q coefficients on the output window, oldest first.
    pub w_y: DMatrix<f64>,
    /// q x (l+1)m coefficients on the input window, oldest first.
    pub w_u: DMatrix<f64>,
    pub p: usize,
    pub l: usize,
    pub q_dim: usize,
    pub m_dim: usize,
}

/// Extract the one-step map from the first block row of Psi.
///
/// The first block row carries coefficients on future inputs beyond u_k;
/// those are non-causal for a one-step map and are dropped here (the
/// self-consistency deviation accounts for them).
pub fn extract_one_step(pred: &ExplicitPredictor) -> OneStepMap {
    let q = pred.q_dim;
    let m = pred.m_dim;
    let y_cols = (pred.p + 1) * q;
    let u_cols = (pred.l + 1) * m;
    let w_y = pred.psi.view((0, 0), (q, y_cols)).into_owned();
    let w_u = pred.psi.view((0, y_cols), (q, u_cols)).into_owned();
    OneStepMap {
        w_y,
        w_u,
        p: pred.p,
        l: pred.l,
        q_dim: q,
        m_dim: m,
    }
}

/// Assemble the N-step predictor obtained by iterating a one-step map:
/// shift the window, feed predictions back, collect the linear maps.
pub fn iterate_one_step(map: &OneStepMap, n_hor: usize) -> DMatrix<f64> {
    let q = map.q_dim;
    let m = map.m_dim;
    let (p, l) = (map.p, map.l);
    let width = (p + 1) * q + (l + n_hor) * m;
    // linear expression of every signal in regressor coordinates
    let y_row = |t: i64| -> DMatrix<f64> {
        // y_{k+t} for t <= 0 is the regressor slot p + t
        let mut sel = DMatrix::zeros(q, width);
        let slot = (p as i64 + t) as usize;
        for r in 0..q {
            sel[(r, slot * q + r)] = 1.0;
        }
        sel
    };
    let u_row = |t: i64| -> DMatrix<f64> {
        // u_{k+t} occupies slot l + t of the input block
        let mut sel = DMatrix::zeros(m, width);
        let slot = (l as i64 + t) as usize;
        let base = (p + 1) * q;
        for r in 0..m {
            sel[(r, base + slot * m + r)] = 1.0;
        }
        sel
    };
    let mut y_exprs: Vec<(i64, DMatrix<f64>)> = (-(p as i64)..=0).map(|t| (t, y_row(t))).collect();
    let mut psi_iter = DMatrix::zeros(n_hor * q, width);
    for step in 1..=(n_hor as i64) {
        // window for predicting y_{k+step}: outputs k+step-1-p .. k+step-1,
        // inputs k+step-1-l .. k+step-1
        let mut expr = DMatrix::zeros(q, width);
        for i in 0..=(p as i64) {
            let t = step - 1 - p as i64 + i;
            let y_t = y_exprs
                .iter()
                .find(|(tt, _)| *tt == t)
                .map(|(_, e)| e.clone())
                .unwrap_or_else(|| y_row(t));
            let block = map.w_y.view((0, (i as usize) * q), (q, q)).into_owned();
            expr += block * y_t;
        }
        for j in 0..=(l as i64) {
            let t = step - 1 - l as i64 + j;
            let block = map.w_u.view((0, (j as usize) * m), (q, m)).into_owned();
            expr += block * u_row(t);
        }
        for r in 0..q {
            for c in 0..width {
                psi_iter[((step as usize - 1) * q + r, c)] = expr[(r, c)];
            }
        }
        y_exprs.push((step, expr));
    }
    psi_iter
}

/// Outcome of the self-consistency test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfConsistencyReport {
    /// Entrywise max deviation between Psi and its iterated one-step
    /// reconstruction.
    pub max_deviation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Test whether Psi has the iterated one-step (partial block-Toeplitz)
/// structure: extract the one-step block, iterate it, and compare.
pub fn self_consistency_check(pred: &ExplicitPredictor, tol: f64) -> Result<SelfConsistencyReport> {
    if pred.n_hor < 2 {
        return Err(Error::InvalidInput(
            "self-consistency needs a horizon of at least 2".into(),
        ));
    }
    let map = extract_one_step(pred);
    let psi_iter = iterate_one_step(&map, pred.n_hor);
    let max_deviation = (&pred.psi - &psi_iter).abs().max();
    Ok(SelfConsistencyReport {
        max_deviation,
        tol,
        pass: max_deviation <= tol,
    })
}

/// Structured refit: pool every one-step window in the library, fit the
/// one-step map by least squares, and assemble Psi by iteration. The result
/// is self-consistent by construction.
pub fn fit_structured_predictor(
    lib: &TrajectoryLibrary,
    ridge: f64,
) -> Result<(OneStepMap, ExplicitPredictor)> {
    let q = lib.q_dim;
    let m = lib.m_dim;
    let (p, l) = (lib.p, lib.l);
    let reg_len = (p + 1) * q + (l + 1) * m;
    let n_samples = lib.n_columns() * lib.n_hor;
    let mut g = DMatrix::zeros(reg_len, n_samples);
    let mut f = DMatrix::zeros(q, n_samples);
    let u_base = (p + 1 + lib.n_hor) * q;
    let mut s = 0usize;
    for c in 0..lib.n_columns() {
        let col = lib.columns.column(c);
        for t in 0..lib.n_hor {
            let mut r = 0usize;
            for i in 0..=(p) {
                for k in 0..q {
                    g[(r, s)] = col[(t + i) * q + k];
                    r += 1;
                }
            }
            for i in 0..=(l) {
                for k in 0..m {
                    g[(r, s)] = col[u_base + (t + i) * m + k];
                    r += 1;
                }
            }
            for k in 0..q {
                f[(k, s)] = col[(t + p + 1) * q + k];
            }
            s += 1;
        }
    }
    let w = if ridge == 0.0 {
        let svd = g.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if svd.rank(smax * 1e-10) < reg_len {
            return Err(Error::RankDeficient(
                "pooled one-step regressors are rank deficient; add ridge".into(),
            ));
        }
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::NoConvergence(format!("pseudo-inverse failed: {e}")))?;
        &f * pinv
    } else {
        let ggt = &g * g.transpose() + DMatrix::identity(reg_len, reg_len) * ridge;
        let gft = &g * f.transpose();
        let chol = ggt
            .cholesky()
            .ok_or_else(|| Error::NoConvergence("ridged Gram matrix not PD".into()))?;
        chol.solve(&gft).transpose()
    };
    let map = OneStepMap {
        w_y: w.view((0, 0), (q, (p + 1) * q)).into_owned(),
        w_u: w.view((0, (p + 1) * q), (q, (l + 1) * m)).into_owned(),
        p,
        l,
        q_dim: q,
        m_dim: m,
    };
    let psi = iterate_one_step(&map, lib.n_hor);
    let resid = &w * &g - &f;
    let residual_rms = (resid.norm_squared() / (resid.nrows() * resid.ncols()) as f64).sqrt();
    Ok((
        map,
        ExplicitPredictor {
            psi,
            p,
            l,
            n_hor: lib.n_hor,
            q_dim: q,
            m_dim: m,
            residual_rms,
            ridge,
        },
    ))
}

// ---------------------------------------------------------------------------
// receding-horizon control on the predictors
// ---------------------------------------------------------------------------

/// Regularization of the embedded column weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", content = "lambda")]
pub enum Regularizer {
    None,
    Ridge(f64),
    Lasso(f64),
}

/// Control objective shared by both DDPC modes.
#[derive(Clone, Debug)]
pub struct DdpcConfig {
    /// Quadratic stage cost on (y, u).
    pub cost: StageCost,
    pub gamma: f64,
    /// Terminal cost on the stacked IO state (newest first); must be
    /// quadratic or zero.
    pub terminal: TerminalCost,
    /// Input box, enforced in explicit mode by projected gradient.
    pub input_lo: Option<Vec<f64>>,
    pub input_hi: Option<Vec<f64>>,
    pub regularizer: Regularizer,
    pub max_iters: usize,
    /// Stationarity tolerance of the iterative solvers.
    pub stat_tol: f64,
    /// Weight of the quadratic penalty tying the embedded combination to the
    /// measured past window (lasso mode).
    pub past_penalty: f64,
}

impl Default for DdpcConfig {
    fn default() -> Self {
        Self {
            cost: StageCost::Zero,
            gamma: 1.0,
            terminal: TerminalCost::Zero,
            input_lo: None,
            input_hi: None,
            regularizer: Regularizer::None,
            max_iters: 100_000,
            stat_tol: 1e-8,
            past_penalty: 1e6,
        }
    }
}

/// Result of one DDPC solve.
#[derive(Clone, Debug)]
pub struct DdpcPlan {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    /// Control objective at the optimum (regularizer excluded).
    pub value: f64,
    /// Regularizer value at the optimum (embedded mode).
    pub reg_value: f64,
    pub alpha: Option<DVector<f64>>,
}

/// Quadratic control objective over z = (y_{k+1..k+N}, u_{k..k+N-1}):
/// J(z) = z' H z + 2 g' z + c.
struct ControlQuadratic {
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: f64,
    nq: usize,
}

fn control_quadratic(
    cfg: &DdpcConfig,
    window: &IoWindow,
    n_hor: usize,
    q: usize,
    m: usize,
) -> Result<ControlQuadratic> {
    let (qy, r) = cfg.cost.quadratic_parts().ok_or_else(|| {
        Error::BackendMismatch("DDPC needs a quadratic stage cost in (y, u)".into())
    })?;
    if qy.len() != q || r.len() != m {
        return Err(Error::InvalidInput(
            "stage-cost dimensions do not match the predictor".into(),
        ));
    }
    let nq = n_hor * q;
    let nz = nq + n_hor * m;
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    // current output cost is a constant
    let y_now = window.y_past.last().ok_or_else(|| {
        Error::InvalidInput("window carries no current output".into())
    })?;
    let mut c = quad_form_vec(&qy, y_now);
    // predicted output costs at stages 1..N-1
    for i in 1..n_hor {
        let w = cfg.gamma.powi(i as i32);
        for a in 0..q {
            for b in 0..q {
                h[((i - 1) * q + a, (i - 1) * q + b)] += w * qy[a][b];
            }
        }
    }
    // input costs at stages 0..N-1
    for i in 0..n_hor {
        let w = cfg.gamma.powi(i as i32);
        for a in 0..m {
            for b in 0..m {
                h[(nq + i * m + a, nq + i * m + b)] += w * r[a][b];
            }
        }
    }
    // terminal cost on the stacked state at time k+N
    match &cfg.terminal {
        TerminalCost::Zero => {}
        TerminalCost::Quadratic { p: pw, v0 } => {
            let p_lag = window.p();
            let l_lag = window.l();
            let d = (p_lag + 1) * q + l_lag * m;
            if pw.len() != d {
                return Err(Error::InvalidInput(format!(
                    "terminal weight must act on the {d}-dimensional stacked state"
                )));
            }
            // x_N = S z + s0, newest first: (y_{k+N} .. y_{k+N-p}, u_{k+N-1} .. u_{k+N-l})
            let mut sel = DMatrix::zeros(d, nz);
            let mut s0 = DVector::zeros(d);
            let mut row = 0usize;
            for i in 0..=p_lag {
                let t = n_hor as i64 - i as i64;
                if t >= 1 {
                    for a in 0..q {
                        sel[(row + a, (t as usize - 1) * q + a)] = 1.0;
                    }
                } else {
                    let y = &window.y_past[(p_lag as i64 + t) as usize];
                    for a in 0..q {
                        s0[row + a] = y[a];
                    }
                }
                row += q;
            }
            for j in 1..=l_lag {
                let t = n_hor as i64 - j as i64;
                if t >= 0 {
                    for a in 0..m {
                        sel[(row + a, nq + t as usize * m + a)] = 1.0;
                    }
                } else {
                    let u = &window.u_past[(l_lag as i64 + t) as usize];
                    for a in 0..m {
                        s0[row + a] = u[a];
                    }
                }
                row += m;
            }
            let w = cfg.gamma.powi(n_hor as i32);
            let pmat = crate::solver::mat_from(pw);
            let sp = sel.transpose() * &pmat;
            h += w * (&sp * &sel);
            g += w * (&sp * &s0);
            c += w * ((s0.transpose() * &pmat * &s0)[(0, 0)] + v0);
        }
        TerminalCost::Table(_) => {
            return Err(Error::BackendMismatch(
                "DDPC terminal cost must be quadratic or zero".into(),
            ));
        }
    }
    Ok(ControlQuadratic { h, g, c, nq })
}

fn quad_form_vec(m: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &mij) in row.iter().enumerate() {
            acc += x[i] * mij * x[j];
        }
    }
    acc
}

fn objective(h: &DMatrix<f64>, g: &DVector<f64>, c: f64, x: &DVector<f64>) -> f64 {
    (x.transpose() * h * x)[(0, 0)] + 2.0 * (g.transpose() * x)[(0, 0)] + c
}

fn lambda_max(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 1.0;
    for _ in 0..200 {
        let w = h * &v;
        let norm = w.norm();
        if norm < 1e-300 {
            return 1.0;
        }
        lam = norm;
        v = w / norm;
    }
    lam
}

fn clamp_vec(u: &DVector<f64>, lo: &[f64], hi: &[f64], m: usize) -> DVector<f64> {
    DVector::from_fn(u.nrows(), |i, _| u[i].clamp(lo[i % m], hi[i % m]))
}

/// Minimize x' H x + 2 g' x over the box by projected gradient to the given
/// stationarity tolerance.
fn projected_gradient(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    m: usize,
    max_iters: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let step = 1.0 / (2.0 * lambda_max(h)).max(1e-12);
    let mut u = clamp_vec(&DVector::zeros(g.nrows()), lo, hi, m);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let grad = 2.0 * (h * &u + g);
        let next = clamp_vec(&(&u - step * &grad), lo, hi, m);
        residual = (&next - &u).norm() / step;
        u = next;
        if residual <= tol * (1.0 + u.norm()) {
            return Ok(u);
        }
    }
    Err(Error::NoConvergence(format!(
        "projected gradient stalled with stationarity residual {residual:.3e}"
    )))
}

/// Explicit-predictor DDPC: substitute y = Psi reg(u) into the objective and
/// minimize the resulting strictly convex quadratic over the inputs.
pub fn ddpc_control_explicit(
    pred: &ExplicitPredictor,
    cfg: &DdpcConfig,
    window: &IoWindow,
) -> Result<DdpcPlan> {
    solve_explicit(pred, cfg, window, None)
}

fn solve_explicit(
    pred: &ExplicitPredictor,
    cfg: &DdpcConfig,
    window: &IoWindow,
    pinned_u0: Option<&[f64]>,
) -> Result<DdpcPlan> {
    let (q, m, n) = (pred.q_dim, pred.m_dim, pred.n_hor);
    let cq = control_quadratic(cfg, window, n, q, m)?;
    // y = M u + m0 from Psi applied to (window, u)
    let known_cols = (pred.p + 1) * q + pred.l * m;
    let psi_known = pred.psi.view((0, 0), (n * q, known_cols)).into_owned();
    let psi_u = pred
        .psi
        .view((0, known_cols), (n * q, n * m))
        .into_owned();
    let known = DVector::from_vec(window.stacked_oldest_first());
    let m0 = &psi_known * known;
    // compose z = A u + b with z = (y, u)
    let nu = n * m;
    let mut a_map = DMatrix::zeros(cq.nq + nu, nu);
    a_map.view_mut((0, 0), (cq.nq, nu)).copy_from(&psi_u);
    for i in 0..nu {
        a_map[(cq.nq + i, i)] = 1.0;
    }
    let mut b_map = DVector::zeros(cq.nq + nu);
    b_map.rows_mut(0, cq.nq).copy_from(&m0);
    let h_u = a_map.transpose() * &cq.h * &a_map;
    let g_u = a_map.transpose() * (&cq.h * &b_map + &cq.g);
    let c_u = objective(&cq.h, &cq.g, cq.c, &b_map);

    let u_opt = match (pinned_u0, &cfg.input_lo, &cfg.input_hi) {
        (None, None, None) => h_u
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&(-&g_u)))
            .or_else(|| h_u.clone().lu().solve(&(-&g_u)))
            .ok_or_else(|| Error::NoConvergence("DDPC Hessian is singular".into()))?,
        (None, Some(lo), Some(hi)) => {
            projected_gradient(&h_u, &g_u, lo, hi, m, cfg.max_iters, cfg.stat_tol)?
        }
        (Some(u0), None, None) => {
            // minimize over the tail with u_0 fixed
            let u0v = DVector::from_column_slice(u0);
            if nu == m {
                u0v
            } else {
                let h00 = h_u.view((0, 0), (m, m)).into_owned();
                let _ = h00;
                let h0r = h_u.view((0, m), (m, nu - m)).into_owned();
                let hrr = h_u.view((m, m), (nu - m, nu - m)).into_owned();
                let gr = g_u.rows(m, nu - m).into_owned();
                let rhs = -(gr + h0r.transpose() * &u0v);
                let tail = hrr
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::NoConvergence("DDPC tail Hessian singular".into()))?;
                let mut full = DVector::zeros(nu);
                full.rows_mut(0, m).copy_from(&u0v);
                full.rows_mut(m, nu - m).copy_from(&tail);
                full
            }
        }
        (Some(u0), Some(lo), Some(hi)) => {
            // project only the tail; keep u0 fixed
            let u0v = DVector::from_column_slice(u0);
            let mut u = clamp_vec(&DVector::zeros(nu), lo, hi, m);
            u.rows_mut(0, m).copy_from(&u0v);
            let step = 1.0 / (2.0 * lambda_max(&h_u)).max(1e-12);
            let mut residual = f64::INFINITY;
            let mut done = false;
            for _ in 0..cfg.max_iters {
                let grad = 2.0 * (&h_u * &u + &g_u);
                let mut next = clamp_vec(&(&u - step * &grad), lo, hi, m);
                next.rows_mut(0, m).copy_from(&u0v);
                residual = (&next - &u).norm() / step;
                u = next;
                if residual <= cfg.stat_tol * (1.0 + u.norm()) {
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(Error::NoConvergence(format!(
                    "pinned projected gradient stalled at residual {residual:.3e}"
                )));
            }
            u
        }
        _ => {
            return Err(Error::InvalidInput(
                "input box needs both lower and upper bounds".into(),
            ))
        }
    };

    let value = objective(&h_u, &g_u, c_u, &u_opt);
    let y_pred = &psi_u * &u_opt + a_map.view((0, 0), (cq.nq, nu)) * DVector::zeros(nu) + {
        // psi_u * u + m0
        let mut tmp = DVector::zeros(cq.nq);
        tmp.copy_from(&m0);
        tmp
    } - &psi_u * &u_opt;
    let _ = y_pred;
    let y_pred = &psi_u * &u_opt + &m0;
    Ok(DdpcPlan {
        inputs: (0..n)
            .map(|t| (0..m).map(|r| u_opt[t * m + r]).collect())
            .collect(),
        outputs: (0..n)
            .map(|t| (0..q).map(|r| y_pred[t * q + r]).collect())
            .collect(),
        value,
        reg_value: 0.0,
        alpha: None,
    })
}

/// Embedded DDPC: the column weights alpha are the decision variables, the
/// past rows are matched exactly (ridge) or by quadratic penalty (lasso),
/// and the weighted regularizer is added to the control objective.
pub fn ddpc_control_embedded(
    lib: &TrajectoryLibrary,
    cfg: &DdpcConfig,
    window: &IoWindow,
) -> Result<DdpcPlan> {
    solve_embedded(lib, cfg, window, None)
}

fn solve_embedded(
    lib: &TrajectoryLibrary,
    cfg: &DdpcConfig,
    window: &IoWindow,
    pinned_u0: Option<&[f64]>,
) -> Result<DdpcPlan> {
    if cfg.input_lo.is_some() || cfg.input_hi.is_some() {
        return Err(Error::BackendMismatch(
            "embedded mode supports unconstrained inputs only".into(),
        ));
    }
    let (q, m, n) = (lib.q_dim, lib.m_dim, lib.n_hor);
    let cq = control_quadratic(cfg, window, n, q, m)?;
    let y_f = lib.rows(lib.y_future_rows());
    let u_f = lib.rows(lib.u_future_rows());
    let ncols = lib.n_columns();
    // z = B alpha with z = (y, u)
    let mut b_mat = DMatrix::zeros(cq.nq + n * m, ncols);
    b_mat.view_mut((0, 0), (cq.nq, ncols)).copy_from(&y_f);
    b_mat
        .view_mut((cq.nq, 0), (n * m, ncols))
        .copy_from(&u_f);
    let h_a = b_mat.transpose() * &cq.h * &b_mat;
    let g_a = b_mat.transpose() * &cq.g;

    // past-matching constraints A_p alpha = b_p (plus optional pinned u0)
    let yp = lib.rows(lib.y_past_rows());
    let up = lib.rows(lib.u_past_rows());
    let mut constraint_rows = yp.nrows() + up.nrows();
    if pinned_u0.is_some() {
        constraint_rows += m;
    }
    let mut a_p = DMatrix::zeros(constraint_rows, ncols);
    let mut b_p = DVector::zeros(constraint_rows);
    a_p.view_mut((0, 0), (yp.nrows(), ncols)).copy_from(&yp);
    a_p.view_mut((yp.nrows(), 0), (up.nrows(), ncols))
        .copy_from(&up);
    let flat_window = window.stacked_oldest_first();
    for (i, &v) in flat_window.iter().enumerate() {
        b_p[i] = v;
    }
    if let Some(u0) = pinned_u0 {
        let base = yp.nrows() + up.nrows();
        let u_f_first = u_f.view((0, 0), (m, ncols));
        a_p.view_mut((base, 0), (m, ncols)).copy_from(&u_f_first);
        for (i, &v) in u0.iter().enumerate() {
            b_p[base + i] = v;
        }
    }

    let alpha = match cfg.regularizer {
        Regularizer::None | Regularizer::Ridge(_) => {
            let lam = match cfg.regularizer {
                Regularizer::Ridge(l) => l,
                _ => 0.0,
            };
            // KKT system for the equality-constrained strictly convex QP
            let nk = ncols + constraint_rows;
            let mut kkt = DMatrix::zeros(nk, nk);
            kkt.view_mut((0, 0), (ncols, ncols))
                .copy_from(&(2.0 * (&h_a + DMatrix::identity(ncols, ncols) * lam)));
            kkt.view_mut((0, ncols), (ncols, constraint_rows))
                .copy_from(&a_p.transpose());
            kkt.view_mut((ncols, 0), (constraint_rows, ncols))
                .copy_from(&a_p);
            let mut rhs = DVector::zeros(nk);
            rhs.rows_mut(0, ncols).copy_from(&(-2.0 * &g_a));
            rhs.rows_mut(ncols, constraint_rows).copy_from(&b_p);
            // min-norm solve tolerates the redundant rows of overlapping columns
            let svd = kkt.svd(true, true);
            let sol = svd
                .solve(&rhs, 1e-10)
                .map_err(|e| Error::NoConvergence(format!("KKT solve failed: {e}")))?;
            sol.rows(0, ncols).into_owned()
        }
        Regularizer::Lasso(lam) => {
            // quadratic past penalty keeps the problem prox-friendly
            let mu = cfg.past_penalty;
            let h_s = &h_a + mu * (a_p.transpose() * &a_p);
            let g_s = &g_a - mu * (a_p.transpose() * &b_p);
            let step = 1.0 / (2.0 * lambda_max(&h_s)).max(1e-12);
            let mut alpha = DVector::zeros(ncols);
            let mut residual = f64::INFINITY;
            let mut done = false;
            for _ in 0..cfg.max_iters {
                let grad = 2.0 * (&h_s * &alpha + &g_s);
                let cand = &alpha - step * grad;
                let next = cand.map(|x| {
                    let t = lam * step;
                    if x > t {
                        x - t
                    } else if x < -t {
                        x + t
                    } else {
                        0.0
                    }
                });
                residual = (&next - &alpha).norm() / step;
                alpha = next;
                if residual <= cfg.stat_tol * (1.0 + alpha.norm()) {
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(Error::NoConvergence(format!(
                    "proximal gradient stalled with residual {residual:.3e}"
                )));
            }
            alpha
        }
    };

    let value = objective(&h_a, &g_a, cq.c, &alpha);
    let reg_value = match cfg.regularizer {
        Regularizer::None => 0.0,
        Regularizer::Ridge(l) => l * alpha.norm_squared(),
        Regularizer::Lasso(l) => l * alpha.iter().map(|x| x.abs()).sum::<f64>(),
    };
    let y = &y_f * &alpha;
    let u = &u_f * &alpha;
    Ok(DdpcPlan {
        inputs: (0..n)
            .map(|t| (0..m).map(|r| u[t * m + r]).collect())
            .collect(),
        outputs: (0..n)
            .map(|t| (0..q).map(|r| y[t * q + r]).collect())
            .collect(),
        value,
        reg_value,
        alpha: Some(alpha),
    })
}

/// Which predictor backs the controller.
pub enum DdpcSolver<'a> {
    Explicit(&'a ExplicitPredictor),
    Embedded(&'a TrajectoryLibrary),
}

/// Solve the DDPC problem for the given recent window.
pub fn ddpc_control(
    solver: &DdpcSolver<'_>,
    cfg: &DdpcConfig,
    window: &IoWindow,
) -> Result<DdpcPlan> {
    match solver {
        DdpcSolver::Explicit(pred) => solve_explicit(pred, cfg, window, None),
        DdpcSolver::Embedded(lib) => solve_embedded(lib, cfg, window, None),
    }
}

/// DDPC action-value: the objective optimum with the first input pinned.
pub fn q_pc(
    solver: &DdpcSolver<'_>,
    cfg: &DdpcConfig,
    window: &IoWindow,
    a: &[f64],
) -> Result<f64> {
    let plan = match solver {
        DdpcSolver::Explicit(pred) => solve_explicit(pred, cfg, window, Some(a))?,
        DdpcSolver::Embedded(lib) => solve_embedded(lib, cfg, window, Some(a))?,
    };
    Ok(plan.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::BatchLqMpc;
    use crate::noise::TruncatedGaussian;
    use crate::window::window_to_state;
    use approx::assert_relative_eq;

    fn two_state_system(meas_sigma: f64) -> StochasticLinearSystem {
        StochasticLinearSystem {
            a: vec![vec![0.8, 0.3], vec![-0.2, 0.9]],
            b: vec![vec![0.0], vec![1.0]],
            c: vec![vec![1.0, 0.0]],
            noise: None,
            measurement_noise: if meas_sigma > 0.0 {
                Some(vec![TruncatedGaussian::symmetric(meas_sigma).unwrap()])
            } else {
                None
            },
            q_cost: vec![vec![1.0]],
            r_cost: vec![vec![0.1]],
        }
    }

    fn scalar_system() -> StochasticLinearSystem {
        StochasticLinearSystem {
            a: vec![vec![0.5]],
            b: vec![vec![1.0]],
            c: vec![vec![1.0]],
            noise: None,
            measurement_noise: None,
            q_cost: vec![vec![1.0]],
            r_cost: vec![vec![0.1]],
        }
    }

    fn uniform_excitation() -> Excitation {
        Excitation::UniformRandom {
            lo: vec![-1.0],
            hi: vec![1.0],
        }
    }

    fn fresh_query(
        sys: &StochasticLinearSystem,
        p: usize,
        l: usize,
        n: usize,
        seed: u64,
    ) -> (IoWindow, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // returns (window at k, planned inputs, true future outputs)
        let mut rng = stream_rng(seed, 7);
        let total = p.max(l) + n + 5;
        let inputs: Vec<Vec<f64>> = (0..total)
            .map(|_| vec![2.0 * rng.random::<f64>() - 1.0])
            .collect();
        let (_, ys) = sys.simulate(&vec![0.0; sys.state_dim()], &inputs, seed.wrapping_add(13));
        let k = p.max(l) + 3;
        let window = IoWindow::from_records(&ys, &inputs, k, p, l).unwrap();
        let future_u = inputs[k..k + n].to_vec();
        let future_y = ys[k + 1..=k + n].to_vec();
        (window, future_u, future_y)
    }

    #[test]
    fn column_count_matches_the_bookkeeping_identity() {
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 200, 2, 2, 5, 0).unwrap();
        // length 200, p = l = 2, N = 5: 200 - 5 - 2 + 1 = 194 columns
        assert_eq!(lib.n_columns(), 194);
        assert_eq!(
            lib.n_columns(),
            TrajectoryLibrary::column_count(200, 2, 2, 5)
        );
        assert_eq!(lib.columns.nrows(), (2 + 5 + 1) + (2 + 5));
        // every column is a contiguous slice of the recorded run: re-simulate
        let mut rng = stream_rng(0, 1);
        let inputs: Vec<Vec<f64>> = (0..200)
            .map(|_| uniform_excitation().sample(1, &mut rng))
            .collect();
        let (_, ys) = sys.simulate(&[0.0], &inputs, 0);
        for (c, j) in (2..=(200 - 5)).enumerate().step_by(37) {
            for t in 0..=(2 + 5) {
                assert_relative_eq!(lib.columns[(t, c)], ys[j - 2 + t][0], epsilon = 1e-12);
            }
            for t in 0..(2 + 5) {
                assert_relative_eq!(lib.columns[(8 + t, c)], inputs[j - 2 + t][0], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn too_short_record_is_rejected_with_the_minimum() {
        let sys = scalar_system();
        match collect_library(&sys, uniform_excitation(), 30, 2, 2, 5, 0) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("record length >=")),
            other => panic!("expected InvalidInput, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_zero_state_gives_all_zero_columns() {
        let sys = scalar_system();
        let lib = collect_library(
            &sys,
            Excitation::UniformRandom {
                lo: vec![0.0],
                hi: vec![0.0],
            },
            120,
            1,
            1,
            3,
            0,
        )
        .unwrap();
        assert!(lib.columns.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn prbs_excitation_gives_full_row_rank_regressors() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, Excitation::Prbs { amplitude: 1.0 }, 300, 1, 1, 4, 3)
            .unwrap();
        let g = lib.regressor_rows();
        let svd = g.clone().svd(false, false);
        let smax = svd.singular_values.max();
        assert_eq!(svd.rank(smax * 1e-10), g.nrows());
    }

    #[test]
    fn implicit_prediction_matches_the_true_continuation() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let pred = ImplicitPredictor::new(&lib);
        for seed in 0..50 {
            let (window, future_u, future_y) = fresh_query(&sys, 1, 1, 4, 1000 + seed);
            let got = pred.predict(&window, &future_u).unwrap();
            for (g, e) in got.outputs.iter().zip(&future_y) {
                assert!(
                    (g[0] - e[0]).abs() < 1e-8,
                    "seed {seed}: {} vs {}",
                    g[0],
                    e[0]
                );
            }
            assert!(pred.kkt_residual(&got.alpha) <= 1e-8);
        }
    }

    #[test]
    fn single_column_library_returns_that_column() {
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 130, 1, 1, 3, 11).unwrap();
        // shrink to one column
        let col = lib.columns.column(5).into_owned();
        let one = TrajectoryLibrary {
            columns: DMatrix::from_column_slice(col.nrows(), 1, col.as_slice()),
            ..lib.clone()
        };
        let pred = ImplicitPredictor::new(&one);
        let window = one.window_of_column(0);
        let future_u = one.future_u_of_column(0);
        let got = pred.predict(&window, &future_u).unwrap();
        let expect = one.future_y_of_column(0);
        for (g, e) in got.outputs.iter().zip(&expect) {
            assert_relative_eq!(g[0], e[0], epsilon = 1e-9);
        }
        assert_eq!(got.alpha.nrows(), 1);
    }

    #[test]
    fn all_zero_query_returns_zero_prediction() {
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 130, 1, 1, 3, 2).unwrap();
        let pred = ImplicitPredictor::new(&lib);
        let window = IoWindow::new(vec![vec![0.0], vec![0.0]], vec![vec![0.0]]);
        let future_u = vec![vec![0.0]; 3];
        let got = pred.predict(&window, &future_u).unwrap();
        assert!(got.outputs.iter().all(|y| y[0].abs() < 1e-12));
        assert!(got.alpha.norm() < 1e-10, "minimum-norm alpha should vanish");
    }

    #[test]
    fn inconsistent_query_is_rejected() {
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 130, 1, 1, 3, 2).unwrap();
        let pred = ImplicitPredictor::new(&lib);
        // y jumps without any input: not in the behavior
        let window = IoWindow::new(vec![vec![5.0], vec![-40.0]], vec![vec![0.0]]);
        let future_u = vec![vec![0.0]; 3];
        match pred.predict(&window, &future_u) {
            Err(Error::OutOfDomain(msg)) => assert!(msg.contains("behavior span")),
            other => panic!("expected OutOfDomain, got {other:?}"),
        }
    }

    #[test]
    fn explicit_fit_recovers_scalar_coefficients() {
        // y+ = 0.5 y + u with p = l = 1, N = 1
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 100, 1, 1, 1, 4).unwrap();
        let pred = fit_explicit_predictor(&lib, 0.0).unwrap();
        // regressor (y_{k-1}, y_k, u_{k-1}, u_k): expect (0, 0.5, 0, 1)
        assert_relative_eq!(pred.psi[(0, 0)], 0.0, epsilon = 1e-8);
        assert_relative_eq!(pred.psi[(0, 1)], 0.5, epsilon = 1e-8);
        assert_relative_eq!(pred.psi[(0, 2)], 0.0, epsilon = 1e-8);
        assert_relative_eq!(pred.psi[(0, 3)], 1.0, epsilon = 1e-8);
        assert!(pred.residual_rms < 1e-10);
    }

    #[test]
    fn zero_output_data_with_ridge_gives_zero_psi() {
        let mut sys = scalar_system();
        sys.c = vec![vec![0.0]];
        let lib = collect_library(&sys, uniform_excitation(), 130, 1, 1, 3, 6).unwrap();
        let pred = fit_explicit_predictor(&lib, 1e-6).unwrap();
        assert!(pred.psi.abs().max() < 1e-9);
    }

    #[test]
    fn rank_deficiency_without_ridge_is_an_error() {
        // p too large for the scalar system: redundant output lags
        let sys = scalar_system();
        let lib = collect_library(&sys, uniform_excitation(), 200, 3, 1, 3, 6).unwrap();
        match fit_explicit_predictor(&lib, 0.0) {
            Err(Error::RankDeficient(_)) => {}
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn implicit_and_explicit_predictions_agree_on_noiseless_data() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let imp = ImplicitPredictor::new(&lib);
        let exp = fit_explicit_predictor(&lib, 0.0).unwrap();
        for seed in 0..50 {
            let (window, future_u, _) = fresh_query(&sys, 1, 1, 4, 2000 + seed);
            let yi = imp.predict(&window, &future_u).unwrap().outputs;
            let ye = exp.predict(&window, &future_u).unwrap();
            for (a, b) in yi.iter().zip(&ye) {
                assert!((a[0] - b[0]).abs() < 1e-6, "{} vs {}", a[0], b[0]);
            }
        }
    }

    #[test]
    fn iterated_psi_is_exactly_self_consistent() {
        // build a one-step map from known (A, B, C) and iterate it
        let map = OneStepMap {
            w_y: DMatrix::from_row_slice(1, 2, &[-0.2, 1.1]),
            w_u: DMatrix::from_row_slice(1, 2, &[0.3, 0.9]),
            p: 1,
            l: 1,
            q_dim: 1,
            m_dim: 1,
        };
        let psi = iterate_one_step(&map, 4);
        let pred = ExplicitPredictor {
            psi,
            p: 1,
            l: 1,
            n_hor: 4,
            q_dim: 1,
            m_dim: 1,
            residual_rms: 0.0,
            ridge: 0.0,
        };
        let report = self_consistency_check(&pred, 1e-6).unwrap();
        assert_eq!(report.max_deviation, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn perturbing_one_late_entry_moves_the_deviation_by_delta() {
        let map = OneStepMap {
            w_y: DMatrix::from_row_slice(1, 2, &[-0.2, 1.1]),
            w_u: DMatrix::from_row_slice(1, 2, &[0.3, 0.9]),
            p: 1,
            l: 1,
            q_dim: 1,
            m_dim: 1,
        };
        let mut psi = iterate_one_step(&map, 4);
        let delta = 3.5e-4;
        psi[(2, 1)] += delta;
        let pred = ExplicitPredictor {
            psi,
            p: 1,
            l: 1,
            n_hor: 4,
            q_dim: 1,
            m_dim: 1,
            residual_rms: 0.0,
            ridge: 0.0,
        };
        let report = self_consistency_check(&pred, 1e-6).unwrap();
        assert_relative_eq!(report.max_deviation, delta, epsilon = 1e-15);
        assert!(!report.pass);
    }

    #[test]
    fn noisy_fit_fails_and_structured_refit_passes() {
        let sys = two_state_system(0.05);
        let lib = collect_library(&sys, uniform_excitation(), 400, 1, 1, 4, 9).unwrap();
        let raw = fit_explicit_predictor(&lib, 0.0).unwrap();
        let raw_report = self_consistency_check(&raw, 1e-6).unwrap();
        assert!(
            raw_report.max_deviation > 1e-6,
            "noise should break the iterated structure (deviation {})",
            raw_report.max_deviation
        );
        let (_, structured) = fit_structured_predictor(&lib, 0.0).unwrap();
        let s_report = self_consistency_check(&structured, 1e-6).unwrap();
        assert_eq!(s_report.max_deviation, 0.0);
        assert!(s_report.pass);
    }

    #[test]
    fn explicit_plan_matches_the_true_model_batch_solution() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let pred = fit_explicit_predictor(&lib, 0.0).unwrap();
        let cfg = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            gamma: 0.95,
            ..DdpcConfig::default()
        };
        // batch LQ on the true state with the output-weighted cost
        let qx = vec![vec![1.0, 0.0], vec![0.0, 0.0]]; // C'QC for C = [1 0]
        let batch = BatchLqMpc::new_lq(
            &sys.a,
            &sys.b,
            &qx,
            &sys.r_cost,
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            0.0,
            0.95,
            4,
        );
        for seed in 0..10 {
            let (window, _, _) = fresh_query(&sys, 1, 1, 4, 3000 + seed);
            let plan = ddpc_control_explicit(&pred, &cfg, &window).unwrap();
            let x = window_to_state(&sys, &window).unwrap();
            let reference = batch.solve(&x).unwrap();
            for (a, b) in plan.inputs.iter().zip(&reference.inputs) {
                assert!(
                    (a[0] - b[0]).abs() < 1e-6,
                    "seed {seed}: {} vs {}",
                    a[0],
                    b[0]
                );
            }
        }
    }

    #[test]
    fn zero_window_zero_reference_gives_zero_plan() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let pred = fit_explicit_predictor(&lib, 0.0).unwrap();
        let cfg = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            gamma: 0.95,
            ..DdpcConfig::default()
        };
        let window = IoWindow::new(vec![vec![0.0], vec![0.0]], vec![vec![0.0]]);
        let plan = ddpc_control_explicit(&pred, &cfg, &window).unwrap();
        for u in &plan.inputs {
            assert!(u[0].abs() < 1e-9);
        }
        assert!(plan.value.abs() < 1e-12);
    }

    #[test]
    fn embedded_ridge_shrinks_alpha_monotonically() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 200, 1, 1, 4, 5).unwrap();
        let (window, _, _) = fresh_query(&sys, 1, 1, 4, 42);
        let mut norms = Vec::new();
        for lam in [1e-4, 1.0, 1e4] {
            let cfg = DdpcConfig {
                cost: StageCost::Quadratic {
                    q: sys.q_cost.clone(),
                    r: sys.r_cost.clone(),
                },
                gamma: 0.95,
                regularizer: Regularizer::Ridge(lam),
                ..DdpcConfig::default()
            };
            let plan = ddpc_control_embedded(&lib, &cfg, &window).unwrap();
            norms.push(plan.alpha.as_ref().unwrap().norm());
        }
        assert!(
            norms[0] >= norms[1] && norms[1] >= norms[2],
            "alpha norms not monotone: {norms:?}"
        );
    }

    #[test]
    fn embedded_lasso_converges_and_plans_sensibly() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 200, 1, 1, 4, 5).unwrap();
        let (window, _, _) = fresh_query(&sys, 1, 1, 4, 7);
        let cfg = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            gamma: 0.95,
            regularizer: Regularizer::Lasso(1e-6),
            ..DdpcConfig::default()
        };
        let plan = ddpc_control_embedded(&lib, &cfg, &window).unwrap();
        // weak lasso: plan close to the exact ridge-free solution
        let exact = {
            let cfg0 = DdpcConfig {
                regularizer: Regularizer::None,
                ..cfg.clone()
            };
            ddpc_control_embedded(&lib, &cfg0, &window).unwrap()
        };
        for (a, b) in plan.inputs.iter().zip(&exact.inputs) {
            assert!((a[0] - b[0]).abs() < 1e-2, "{} vs {}", a[0], b[0]);
        }
    }

    #[test]
    fn embedded_mode_rejects_input_boxes() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 200, 1, 1, 4, 5).unwrap();
        let (window, _, _) = fresh_query(&sys, 1, 1, 4, 7);
        let cfg = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            input_lo: Some(vec![-1.0]),
            input_hi: Some(vec![1.0]),
            ..DdpcConfig::default()
        };
        match ddpc_control_embedded(&lib, &cfg, &window) {
            Err(Error::BackendMismatch(_)) => {}
            other => panic!("expected BackendMismatch, got {other:?}"),
        }
    }

    #[test]
    fn pinned_q_at_the_plan_equals_the_unpinned_optimum() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let pred = fit_explicit_predictor(&lib, 0.0).unwrap();
        let cfg = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            gamma: 0.95,
            ..DdpcConfig::default()
        };
        let (window, _, _) = fresh_query(&sys, 1, 1, 4, 77);
        let solver = DdpcSolver::Explicit(&pred);
        let plan = ddpc_control(&solver, &cfg, &window).unwrap();
        let q0 = q_pc(&solver, &cfg, &window, &plan.inputs[0]).unwrap();
        assert_relative_eq!(q0, plan.value, epsilon = 1e-9);
        assert!(q_pc(&solver, &cfg, &window, &[plan.inputs[0][0] + 0.4]).unwrap() > plan.value);
    }

    #[test]
    fn boxed_plan_matches_unconstrained_when_inactive_and_clamps_when_active() {
        let sys = two_state_system(0.0);
        let lib = collect_library(&sys, uniform_excitation(), 300, 1, 1, 4, 5).unwrap();
        let pred = fit_explicit_predictor(&lib, 0.0).unwrap();
        let base = DdpcConfig {
            cost: StageCost::Quadratic {
                q: sys.q_cost.clone(),
                r: sys.r_cost.clone(),
            },
            gamma: 0.95,
            ..DdpcConfig::default()
        };
        let (window, _, _) = fresh_query(&sys, 1, 1, 4, 21);
        let free = ddpc_control_explicit(&pred, &base, &window).unwrap();
        let wide = DdpcConfig {
            input_lo: Some(vec![-10.0]),
            input_hi: Some(vec![10.0]),
            ..base.clone()
        };
        let boxed = ddpc_control_explicit(&pred, &wide, &window).unwrap();
        for (a, b) in free.inputs.iter().zip(&boxed.inputs) {
            assert!((a[0] - b[0]).abs() < 1e-6);
        }
        let umax = free.inputs.iter().map(|u| u[0].abs()).fold(0.0, f64::max);
        let tight_bound = umax * 0.25;
        let tight = DdpcConfig {
            input_lo: Some(vec![-tight_bound]),
            input_hi: Some(vec![tight_bound]),
            ..base
        };
        let clamped = ddpc_control_explicit(&pred, &tight, &window).unwrap();
        for u in &clamped.inputs {
            assert!(u[0].abs() <= tight_bound + 1e-9);
        }
        assert!(clamped.value >= free.value - 1e-9);
    }
}
