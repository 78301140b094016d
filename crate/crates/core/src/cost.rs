//! Stage costs and constraint encodings.
//!
//! Constraints enter the stage cost through the extended-real convention: a
//! violated constraint makes the stage cost +inf, and infinity saturates
//! through every downstream sum and minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base stage cost L(s, a) before constraint encoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageCost {
    Zero,
    /// s' Q s + a' R a
    Quadratic { q: Vec<Vec<f64>>, r: Vec<Vec<f64>> },
    /// sum_i q4_i s_i^4 + a' R a
    QuarticQuadratic { q4: Vec<f64>, r: Vec<Vec<f64>> },
}

fn quad_form(m: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &mij) in row.iter().enumerate() {
            acc += x[i] * mij * x[j];
        }
    }
    acc
}

impl StageCost {
    pub fn quadratic_scalar(q: f64, r: f64) -> StageCost {
        StageCost::Quadratic {
            q: vec![vec![q]],
            r: vec![vec![r]],
        }
    }

    pub fn eval(&self, s: &[f64], a: &[f64]) -> f64 {
        match self {
            StageCost::Zero => 0.0,
            StageCost::Quadratic { q, r } => quad_form(q, s) + quad_form(r, a),
            StageCost::QuarticQuadratic { q4, r } => {
                let quartic: f64 = q4.iter().zip(s).map(|(&c, &si)| c * si.powi(4)).sum();
                quartic + quad_form(r, a)
            }
        }
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let check = |m: &Vec<Vec<f64>>, n: usize, name: &str| -> Result<()> {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return Err(Error::InvalidInput(format!("cost matrix {name} must be {n}x{n}")));
            }
            Ok(())
        };
        match self {
            StageCost::Zero => Ok(()),
            StageCost::Quadratic { q, r } => {
                check(q, state_dim, "Q")?;
                check(r, action_dim, "R")
            }
            StageCost::QuarticQuadratic { q4, r } => {
                if q4.len() != state_dim {
                    return Err(Error::InvalidInput("quartic weights must match state dim".into()));
                }
                check(r, action_dim, "R")
            }
        }
    }

    /// (Q, R) when the cost is purely quadratic.
    pub fn quadratic_parts(&self) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match self {
            StageCost::Quadratic { q, r } => Some((q.clone(), r.clone())),
            _ => None,
        }
    }
}

/// One affine constraint row: c_s . s + c_a . a + offset <= 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineRow {
    #[serde(default)]
    pub c_s: Vec<f64>,
    #[serde(default)]
    pub c_a: Vec<f64>,
    pub offset: f64,
}

/// Constraint map h(s, a) <= 0, componentwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    None,
    Affine { rows: Vec<AffineRow> },
}

impl Constraint {
    pub fn is_none(&self) -> bool {
        matches!(self, Constraint::None)
    }

    /// True when every component of h(s, a) is <= 0.
    pub fn satisfied(&self, s: &[f64], a: &[f64]) -> bool {
        match self {
            Constraint::None => true,
            Constraint::Affine { rows } => rows.iter().all(|row| {
                let mut h = row.offset;
                for (c, &x) in row.c_s.iter().zip(s) {
                    h += c * x;
                }
                for (c, &x) in row.c_a.iter().zip(a) {
                    h += c * x;
                }
                h <= 0.0
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_cost_evaluates() {
        let c = StageCost::quadratic_scalar(1.0, 1.0);
        assert_relative_eq!(c.eval(&[1.0], &[1.0]), 2.0);
        assert_relative_eq!(c.eval(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn quartic_cost_evaluates() {
        let c = StageCost::QuarticQuadratic {
            q4: vec![1.0],
            r: vec![vec![1.0]],
        };
        assert_relative_eq!(c.eval(&[2.0], &[3.0]), 16.0 + 9.0);
    }

    #[test]
    fn affine_constraint_matches_sign_convention() {
        // h = s - 1 <= 0
        let h = Constraint::Affine {
            rows: vec![AffineRow {
                c_s: vec![1.0],
                c_a: vec![],
                offset: -1.0,
            }],
        };
        assert!(h.satisfied(&[0.0], &[0.0]));
        assert!(h.satisfied(&[1.0], &[5.0]));
        assert!(!h.satisfied(&[2.0], &[0.0]));
    }
}
