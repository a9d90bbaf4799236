//! Small statistical toolbox: moments, binomial intervals, two-sample
//! Kolmogorov–Smirnov, least-squares power-law fits, quantiles.

use crate::tolerances::KS_C_001;

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n−1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// (mean, standard error of the mean).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let se = (variance(xs) / xs.len() as f64).sqrt();
    (m, se)
}

/// A two-sided binomial confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Wilson score interval for `k` successes out of `n` at `z` standard
/// normal quantiles (z = 1.96 for 95%, z = 2.5758 for 99%).
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Interval {
    if n == 0 {
        return Interval { lo: 0.0, hi: 1.0 };
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Interval {
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
    }
}

/// Two-sample Kolmogorov–Smirnov distance D = sup |F̂_a − F̂_b|.
/// Sorts copies of its inputs; NaNs are rejected by debug assertion.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "KS needs nonempty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS sample"));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let xa = a[i];
        let xb = b[j];
        let x = xa.min(xb);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical KS distance c(α)·√((n+m)/(n·m)) for the asymptotic two-sample
/// test; `c_alpha` is the Kolmogorov quantile coefficient (1.6276… at 1%).
pub fn ks_critical(c_alpha: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    c_alpha * ((n + m) / (n * m)).sqrt()
}

/// Critical KS distance at α = 0.01.
pub fn ks_critical_001(n: usize, m: usize) -> f64 {
    ks_critical(KS_C_001, n, m)
}

/// Asymptotic two-sample KS p-value: Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}
/// at λ = D·√(nm/(n+m)).
pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let lambda = d * ne.sqrt();
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// Ordinary least squares for y = intercept + slope·x.
/// Returns (slope, intercept, stderr of slope).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    assert!(xs.len() >= 3, "need ≥ 3 points for a slope with stderr");
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, intercept, se)
}

/// Least squares for the two-exponent power law
/// ln p = c + a·ln u + b·ln v over points (u, v, p), p > 0.
/// Returns (a, b, c). Used to test joint scaling in two variables.
pub fn power_law_fit2(points: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    assert!(points.len() >= 4, "need ≥ 4 points for a 2-exponent fit");
    // Normal equations for design matrix [ln u, ln v, 1].
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(u, v, p) in points {
        assert!(u > 0.0 && v > 0.0 && p > 0.0, "power-law fit needs positive data");
        let row = [u.ln(), v.ln(), 1.0];
        let y = p.ln();
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    let x = solve3(ata, atb);
    (x[0], x[1], x[2])
}

/// Gaussian elimination with partial pivoting for a 3×3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        assert!(a[col][col].abs() > 1e-300, "singular normal equations");
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

/// Quantile of a *sorted* sample by linear interpolation of order
/// statistics (type-7: the default of most statistical environments).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical CDF of a *sorted* sample evaluated at x (right-continuous).
pub fn ecdf_sorted(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_basic() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        let (m, se) = mean_se(&xs);
        assert_eq!(m, 2.5);
        assert!((se - (5.0 / 3.0f64 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn wilson_known_value() {
        // k=8, n=10, z=1.96: classical Wilson interval (0.4930, 0.9436).
        let iv = wilson_interval(8, 10, 1.96);
        assert!((iv.lo - 0.49024).abs() < 5e-3, "lo {}", iv.lo);
        assert!((iv.hi - 0.94331).abs() < 5e-3, "hi {}", iv.hi);
        // Degenerate cases stay in [0,1].
        let z = wilson_interval(0, 50, 3.0);
        assert!(z.lo == 0.0 && z.hi > 0.0 && z.hi < 0.5);
        let o = wilson_interval(50, 50, 3.0);
        assert!(o.hi == 1.0 && o.lo < 1.0 && o.lo > 0.5);
    }

    #[test]
    fn ks_distance_hand_computed() {
        // a = {1,2,3}, b = {1.5, 2.5}: D = sup|F_a−F_b| = 1/3 (at x∈[1,1.5)).
        let d = ks_distance(&[1.0, 2.0, 3.0], &[1.5, 2.5]);
        assert!((d - 1.0 / 3.0).abs() < 1e-15, "D = {d}");
        // Identical samples → D = 0.
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // Disjoint supports → D = 1.
        assert_eq!(ks_distance(&[0.0, 0.1], &[5.0, 6.0]), 1.0);
    }

    #[test]
    fn ks_distance_with_ties_across_samples() {
        // Ties handled by advancing both pointers past the tie value.
        let d = ks_distance(&[1.0, 1.0, 2.0], &[1.0, 3.0]);
        // F_a(1)=2/3, F_b(1)=1/2 → |...|=1/6; F_a(2)=1, F_b(2)=1/2 → 1/2.
        assert!((d - 0.5).abs() < 1e-15, "D = {d}");
    }

    #[test]
    fn ks_critical_frozen_value() {
        // n = m = 5000 at α = 0.01.
        let c = ks_critical_001(5000, 5000);
        assert!((c - 0.032552473).abs() < 1e-9, "crit {c}");
        // Consistency: Q(c(α)) = α.
        let p = ks_p_value(c, 5000, 5000);
        assert!((p - 0.01).abs() < 2e-4, "p at crit {p}");
    }

    #[test]
    fn ks_p_value_limits() {
        assert!((ks_p_value(0.0, 100, 100) - 1.0).abs() < 1e-12);
        assert!(ks_p_value(1.0, 1000, 1000) < 1e-12);
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (a, b, se) = linear_fit(&xs, &ys);
        assert!((a - 2.0).abs() < 1e-14);
        assert!((b - 1.0).abs() < 1e-13);
        assert!(se < 1e-13);
    }

    #[test]
    fn power_law_fit_recovers_exponents() {
        // p = 0.7 · u^1.3 · v^0.8 on a 4×4 grid.
        let mut pts = Vec::new();
        for &u in &[0.02f64, 0.05, 0.1, 0.3] {
            for &v in &[0.04f64, 0.1, 0.2, 0.5] {
                pts.push((u, v, 0.7 * u.powf(1.3) * v.powf(0.8)));
            }
        }
        let (a, b, c) = power_law_fit2(&pts);
        assert!((a - 1.3).abs() < 1e-10, "a = {a}");
        assert!((b - 0.8).abs() < 1e-10, "b = {b}");
        assert!((c - 0.7f64.ln()).abs() < 1e-10, "c = {c}");
    }

    #[test]
    fn quantiles_and_ecdf() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 5.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.25), 2.0);
        assert!((quantile_sorted(&xs, 0.1) - 1.4).abs() < 1e-15);
        assert_eq!(ecdf_sorted(&xs, 2.5), 0.4);
        assert_eq!(ecdf_sorted(&xs, 5.0), 1.0);
        assert_eq!(ecdf_sorted(&xs, 0.5), 0.0);
    }
}
