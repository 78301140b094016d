//! Gauss–Legendre quadrature nodes and weights.

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
///
/// Computed by Newton iteration on the Legendre recurrence; accurate to
/// machine precision for the small rules used here.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "quadrature order must be >= 1");
    let mut rule = Vec::with_capacity(n);
    let m = n.div_ceil(2);
    for k in 0..m {
        // Tricomi initial guess for the k-th positive root.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_n(x) and P_n'(x) by recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
        if !(n % 2 == 1 && k == m - 1) {
            rule.push((-x, w));
        } else {
            // odd rule: center node, avoid duplicating x = 0
            rule.pop();
            rule.push((0.0, w));
        }
    }
    rule.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    rule
}

/// Gauss–Legendre rule mapped onto [lo, hi].
pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    gauss_legendre(n)
        .into_iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 5, 15, 31, 64] {
            let total: f64 = gauss_legendre(n).iter().map(|&(_, w)| w).sum();
            assert_relative_eq!(total, 2.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn five_point_nodes_match_reference() {
        let rule = gauss_legendre(5);
        let expect = 0.906_179_845_938_664;
        assert_relative_eq!(rule[4].0, expect, epsilon = 1e-12);
        assert_relative_eq!(rule[0].0, -expect, epsilon = 1e-12);
        assert_relative_eq!(rule[2].0, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn integrates_polynomials_exactly() {
        // n points are exact through degree 2n-1
        let n = 7;
        let rule = gauss_legendre_on(n, 0.0, 2.0);
        for deg in 0..(2 * n) {
            let got: f64 = rule.iter().map(|&(x, w)| w * x.powi(deg as i32)).sum();
            let exact = 2.0f64.powi(deg as i32 + 1) / (deg as f64 + 1.0);
            assert_relative_eq!(got, exact, max_relative = 1e-12);
        }
    }
}
