//! Parameter bundles and derived constants.
//!
//! The experiments are governed by a vector of auxiliary exponents
//! (η, α, L, β, β′, ξ, N₀) subject to four admissibility constraints:
//!
//! ```text
//! (a)  Σ_{j=1}^{N₀} α^j ≤ ξ < Σ_{j=1}^{N₀+1} α^j
//! (b)  α < β′/β < 1
//! (c)  β′ − η/2 + 3α/2 > 0
//! (d)  min(β′+1, β′ − η/2 + 3ξ/2) > η
//! ```
//!
//! From a valid vector three strictly positive rate constants are derived,
//!
//! ```text
//! κ₁ = min(β′+1, β′ − η/2 + 3ξ/2),   κ₂ = α^{N₀}/4,   κ₃ = β′ − η/2 + 3α/2,
//! ```
//!
//! together with a small margin exponent ℘ ∈ (0, κ₁∧κ₃) with κ₁ − ℘ > η.
//! The separation experiment then works below the radius r₀ at which the
//! margin function
//!
//! ```text
//! Δ(r) = ½ · min( (r^η/4 − 2K* r^{κ₁−℘}) / (2 + 2r^β), 1 )
//! ```
//!
//! is still positive, and below the regime threshold
//! ε₀(r) = min(r^{(κ₁−κ₃)/κ₂}, r, 1/(8ψ(1)), 1).

use crate::{Error, Result};
use serde::Serialize;

/// Grid granularity for the r₀ search: r is restricted to multiples of
/// 2⁻²⁰.
const R0_GRID: f64 = 1.0 / (1 << 20) as f64;

/// The auxiliary exponent vector (η, α, L, β, β′, ξ, N₀).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Params {
    /// Growth exponent η > 1 (mass floor (t−s_i)^η/4 in growth events).
    pub eta: f64,
    /// Hölder exponent α ∈ (0, ½) of the mass-modulus bound.
    pub alpha: f64,
    /// Modulus coefficient L > 0.
    pub l: f64,
    /// Support-envelope exponent β ∈ [⅓, ½).
    pub beta: f64,
    /// Rectangle exponent β′ ∈ [⅓, ½).
    pub beta_prime: f64,
    /// Iterated-improvement exponent ξ ∈ (0, 1).
    pub xi: f64,
    /// Iteration depth N₀ ≥ 1.
    pub n0: u32,
}

impl Default for Params {
    /// The canonical working point: (1.01, 0.49, 1.0, 0.49, 0.45, 0.9, 3).
    fn default() -> Self {
        Params {
            eta: 1.01,
            alpha: 0.49,
            l: 1.0,
            beta: 0.49,
            beta_prime: 0.45,
            xi: 0.9,
            n0: 3,
        }
    }
}

/// One violated constraint: its name and the two sides that failed to
/// satisfy the required relation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Constraint identifier, e.g. `"a_lower"`, `"b_upper"`, `"range_beta"`.
    pub name: String,
    /// The relation that failed, e.g. `"Σα^j ≤ ξ"`.
    pub relation: String,
    /// Left-hand side value.
    pub lhs: f64,
    /// Right-hand side value.
    pub rhs: f64,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} violated (lhs = {:.12}, rhs = {:.12})",
            self.name, self.relation, self.lhs, self.rhs
        )
    }
}

fn violation(name: &str, relation: &str, lhs: f64, rhs: f64) -> Violation {
    Violation {
        name: name.into(),
        relation: relation.into(),
        lhs,
        rhs,
    }
}

/// Σ_{j=1}^{n} α^j (geometric partial sum, computed directly).
fn geom_partial(alpha: f64, n: u32) -> f64 {
    (1..=n).map(|j| alpha.powi(j as i32)).sum()
}

/// Checks ranges and constraints (a)–(d); returns the list of violations
/// (empty means the vector is admissible).
///
/// Errors: any non-finite field is a rejected input.
pub fn validate_params(p: &Params) -> Result<Vec<Violation>> {
    for (name, v) in [
        ("eta", p.eta),
        ("alpha", p.alpha),
        ("l", p.l),
        ("beta", p.beta),
        ("beta_prime", p.beta_prime),
        ("xi", p.xi),
    ] {
        if !v.is_finite() {
            return Err(Error::rejected(format!("field {name} is not finite: {v}")));
        }
    }
    let mut out = Vec::new();
    // Declared ranges.
    if p.eta <= 1.0 {
        out.push(violation("range_eta", "η > 1", p.eta, 1.0));
    }
    if !(p.alpha > 0.0 && p.alpha < 0.5) {
        out.push(violation("range_alpha", "α ∈ (0, ½)", p.alpha, 0.5));
    }
    if p.l <= 0.0 {
        out.push(violation("range_l", "L > 0", p.l, 0.0));
    }
    let third = 1.0 / 3.0;
    if !(p.beta >= third && p.beta < 0.5) {
        out.push(violation("range_beta", "β ∈ [⅓, ½)", p.beta, third));
    }
    if !(p.beta_prime >= third && p.beta_prime < 0.5) {
        out.push(violation("range_beta_prime", "β′ ∈ [⅓, ½)", p.beta_prime, third));
    }
    if !(p.xi > 0.0 && p.xi < 1.0) {
        out.push(violation("range_xi", "ξ ∈ (0, 1)", p.xi, 1.0));
    }
    if p.n0 == 0 {
        out.push(violation("range_n0", "N₀ ≥ 1", 0.0, 1.0));
    }
    if !out.is_empty() {
        // Constraint evaluation with out-of-range fields would be
        // meaningless; report range problems alone.
        return Ok(out);
    }
    // (a) Σ_{j≤N₀} α^j ≤ ξ < Σ_{j≤N₀+1} α^j.
    let s_lo = geom_partial(p.alpha, p.n0);
    let s_hi = geom_partial(p.alpha, p.n0 + 1);
    if !(s_lo <= p.xi) {
        out.push(violation("a_lower", "Σ_{j≤N₀} α^j ≤ ξ", s_lo, p.xi));
    }
    if !(p.xi < s_hi) {
        out.push(violation("a_upper", "ξ < Σ_{j≤N₀+1} α^j", p.xi, s_hi));
    }
    // (b) α < β′/β < 1.
    let ratio = p.beta_prime / p.beta;
    if !(p.alpha < ratio) {
        out.push(violation("b_lower", "α < β′/β", p.alpha, ratio));
    }
    if !(ratio < 1.0) {
        out.push(violation("b_upper", "β′/β < 1", ratio, 1.0));
    }
    // (c) β′ − η/2 + 3α/2 > 0.
    let c = p.beta_prime - p.eta / 2.0 + 1.5 * p.alpha;
    if !(c > 0.0) {
        out.push(violation("c", "β′ − η/2 + 3α/2 > 0", c, 0.0));
    }
    // (d) min(β′+1, β′ − η/2 + 3ξ/2) > η.
    let d = (p.beta_prime + 1.0).min(p.beta_prime - p.eta / 2.0 + 1.5 * p.xi);
    if !(d > p.eta) {
        out.push(violation("d", "min(β′+1, β′−η/2+3ξ/2) > η", d, p.eta));
    }
    Ok(out)
}

/// Convenience: validate and either return the vector or the first error.
pub fn require_valid(p: &Params) -> Result<()> {
    let v = validate_params(p)?;
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Parameter(
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "),
        ))
    }
}

/// The default margin exponent ℘ = 0.05·min(κ₁−η, κ₃) (a "small portion"
/// of the available gap; always respects ℘ < κ₁∧κ₃ and κ₁−℘ > η).
pub fn default_wp(p: &Params) -> f64 {
    let kappa1 = (p.beta_prime + 1.0).min(p.beta_prime - p.eta / 2.0 + 1.5 * p.xi);
    let kappa3 = p.beta_prime - p.eta / 2.0 + 1.5 * p.alpha;
    0.05 * (kappa1 - p.eta).min(kappa3)
}

/// Rate constants and experiment thresholds derived from a valid vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    /// The source exponent vector.
    pub params: Params,
    /// κ₁ = min(β′+1, β′ − η/2 + 3ξ/2).
    pub kappa1: f64,
    /// κ₂ = α^{N₀}/4.
    pub kappa2: f64,
    /// κ₃ = β′ − η/2 + 3α/2.
    pub kappa3: f64,
    /// Margin exponent ℘ ∈ (0, κ₁∧κ₃), κ₁ − ℘ > η.
    pub wp: f64,
    /// Threshold scale K* of the competing-mass bound (configured, echoed
    /// into every report; not derived).
    pub k_star: f64,
    /// Largest radius on the 2⁻²⁰ grid with Δ > 0 on (0, r₀].
    pub r0: f64,
}

impl DerivedConstants {
    /// The margin function Δ(r) = ½·min((r^η/4 − 2K* r^{κ₁−℘})/(2+2r^β), 1).
    pub fn delta(&self, r: f64) -> f64 {
        let p = &self.params;
        let num = r.powf(p.eta) / 4.0 - 2.0 * self.k_star * r.powf(self.kappa1 - self.wp);
        0.5 * (num / (2.0 + 2.0 * r.powf(p.beta))).min(1.0)
    }

    /// Regime threshold ε₀(r) = min(r^{(κ₁−κ₃)/κ₂}, r, 1/(8ψ(1)), 1);
    /// `psi_total` is the total immigration mass ψ(1).
    pub fn eps0(&self, r: f64, psi_total: f64) -> f64 {
        let expo = (self.kappa1 - self.kappa3) / self.kappa2;
        r.powf(expo)
            .min(r)
            .min(1.0 / (8.0 * psi_total))
            .min(1.0)
    }

    /// Per-cluster competing-mass ceiling of the growth event at elapsed
    /// time u = s − s_i: K*·(u^{κ₁−℘} + ε^{κ₂}·u^{κ₃−℘}).
    pub fn competing_mass_ceiling(&self, u: f64, eps: f64) -> f64 {
        self.k_star * (u.powf(self.kappa1 - self.wp) + eps.powf(self.kappa2) * u.powf(self.kappa3 - self.wp))
    }

    /// Mass floor of the growth event at elapsed time u: u^η/4.
    pub fn mass_floor(&self, u: f64) -> f64 {
        u.powf(self.params.eta) / 4.0
    }
}

/// Derives (κ₁, κ₂, κ₃), validates ℘, and grid-searches r₀.
///
/// Errors: invalid vector → parameter error; ℘ outside (0, κ₁∧κ₃) or
/// κ₁−℘ ≤ η → parameter error; Δ not positive even at r = 2⁻²⁰ →
/// infeasibility naming K*.
pub fn derive_constants(p: &Params, k_star: f64, wp: f64) -> Result<DerivedConstants> {
    require_valid(p)?;
    if !(k_star > 0.0) || !k_star.is_finite() {
        return Err(Error::Parameter(format!("K* must be positive and finite, got {k_star}")));
    }
    let kappa1 = (p.beta_prime + 1.0).min(p.beta_prime - p.eta / 2.0 + 1.5 * p.xi);
    let kappa2 = p.alpha.powi(p.n0 as i32) / 4.0;
    let kappa3 = p.beta_prime - p.eta / 2.0 + 1.5 * p.alpha;
    debug_assert!(kappa1 > 0.0 && kappa2 > 0.0 && kappa3 > 0.0);
    if !(wp > 0.0 && wp < kappa1.min(kappa3)) {
        return Err(Error::Parameter(format!(
            "℘ = {wp} outside (0, min(κ₁,κ₃)) = (0, {})",
            kappa1.min(kappa3)
        )));
    }
    if !(kappa1 - wp > p.eta) {
        return Err(Error::Parameter(format!(
            "κ₁ − ℘ = {} must exceed η = {}",
            kappa1 - wp,
            p.eta
        )));
    }
    let mut dc = DerivedConstants {
        params: *p,
        kappa1,
        kappa2,
        kappa3,
        wp,
        k_star,
        r0: R0_GRID,
    };
    // Δ(r) > 0 ⟺ r^η/4 > 2K* r^{κ₁−℘} ⟺ r^{κ₁−℘−η} < 1/(8K*): a single
    // sign change in r (κ₁−℘ > η), so binary search over the grid index is
    // exact. Search the largest k ∈ [1, 2²⁰] with Δ(k·2⁻²⁰) > 0.
    if !(dc.delta(R0_GRID) > 0.0) {
        return Err(Error::Infeasible(format!(
            "Δ(r) not positive even at r = 2⁻²⁰ with K* = {k_star}; no admissible r₀"
        )));
    }
    let (mut lo, mut hi) = (1u64, 1u64 << 20); // Δ(lo·grid) > 0 invariant
    if dc.delta(hi as f64 * R0_GRID) > 0.0 {
        lo = hi;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if dc.delta(mid as f64 * R0_GRID) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    dc.r0 = lo as f64 * R0_GRID;
    // Defensive positivity audit on a log-spaced subsample of (0, r₀]
    // (the sign argument above makes a full scan redundant).
    let mut r = dc.r0;
    while r > f64::MIN_POSITIVE * 1e6 {
        debug_assert!(dc.delta(r) > 0.0, "Δ({r}) ≤ 0 inside (0, r₀]");
        r *= 0.5;
    }
    Ok(dc)
}

/// `derive_constants` with the default margin exponent.
pub fn derive_constants_default_wp(p: &Params, k_star: f64) -> Result<DerivedConstants> {
    derive_constants(p, k_star, default_wp(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vector_is_valid() {
        let v = validate_params(&Params::default()).unwrap();
        assert!(v.is_empty(), "unexpected violations: {v:?}");
    }

    #[test]
    fn partial_sums_pin_constraint_a() {
        // 0.49^j partial sums: 0.49, 0.7301, 0.847749, 0.90539701.
        let a = 0.49;
        assert!((geom_partial(a, 3) - 0.847749).abs() < 1e-12);
        assert!((geom_partial(a, 4) - 0.90539701).abs() < 1e-12);
    }

    #[test]
    fn xi_half_violates_a_and_d() {
        let p = Params { xi: 0.5, ..Params::default() };
        let v = validate_params(&p).unwrap();
        let names: Vec<&str> = v.iter().map(|x| x.name.as_str()).collect();
        assert!(names.contains(&"a_lower"), "got {names:?}");
        assert!(names.contains(&"d"), "got {names:?}");
        assert_eq!(v.len(), 2, "exactly (a) and (d) fail: {v:?}");
    }

    #[test]
    fn equal_betas_violate_b_upper() {
        let p = Params { beta: 0.45, beta_prime: 0.45, ..Params::default() };
        let v = validate_params(&p).unwrap();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].name, "b_upper");
        assert_eq!(v[0].lhs, 1.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        let p = Params { eta: f64::NAN, ..Params::default() };
        assert!(matches!(validate_params(&p), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn kappas_at_default_vector() {
        let dc = derive_constants_default_wp(&Params::default(), 1.0).unwrap();
        assert!((dc.kappa1 - 1.295).abs() < 1e-12, "κ₁ = {}", dc.kappa1);
        assert!((dc.kappa2 - 0.02941225).abs() < 1e-12, "κ₂ = {}", dc.kappa2);
        assert!((dc.kappa3 - 0.68).abs() < 1e-12, "κ₃ = {}", dc.kappa3);
        assert!((dc.wp - 0.01425).abs() < 1e-12, "℘ = {}", dc.wp);
        assert!(dc.kappa1 > dc.params.eta, "(d) forces κ₁ > η");
    }

    #[test]
    fn r0_at_default_vector() {
        // Sign change of Δ at r* = (8K*)^{−1/(κ₁−℘−η)}; largest grid point
        // below it is 484·2⁻²⁰.
        let dc = derive_constants_default_wp(&Params::default(), 1.0).unwrap();
        assert_eq!(dc.r0, 484.0 / (1u64 << 20) as f64, "r₀ = {}", dc.r0);
        assert!(dc.delta(dc.r0) > 0.0);
        assert!(dc.delta(dc.r0 + R0_GRID) <= 0.0);
        // Frozen margin values.
        assert!((dc.delta(dc.r0) - 3.94108e-9).abs() / 3.94108e-9 < 1e-4, "Δ(r₀) = {:e}", dc.delta(dc.r0));
        let half = dc.delta(dc.r0 / 2.0);
        assert!((half - 2.2346464e-6).abs() / 2.2346464e-6 < 1e-6, "Δ(r₀/2) = {half:e}");
        let d02 = dc.delta(0.2);
        assert!((d02 + 0.0353).abs() < 2e-4, "Δ(0.2) = {d02}");
    }

    #[test]
    fn delta_capped_at_half() {
        let dc = derive_constants_default_wp(&Params::default(), 1e-9).unwrap();
        for &r in &[1e-6, 1e-3, 0.1, 0.5, 1.0] {
            assert!(dc.delta(r) <= 0.5 + 1e-15, "Δ({r}) = {}", dc.delta(r));
        }
    }

    #[test]
    fn eps0_respects_every_cap() {
        let dc = derive_constants_default_wp(&Params::default(), 1.0).unwrap();
        let expo = (dc.kappa1 - dc.kappa3) / dc.kappa2;
        assert!((expo - 20.909654990039002).abs() < 1e-9, "exponent {expo}");
        let psi_total = 1.0;
        for &r in &[1e-3, 0.01, 0.1, 0.3, 1.0] {
            let e0 = dc.eps0(r, psi_total);
            assert!(e0 > 0.0);
            assert!(e0.powf(dc.kappa2) <= r.powf(dc.kappa1 - dc.kappa3) * (1.0 + 1e-12));
            assert!(e0 <= r && e0 <= 1.0 / (8.0 * psi_total) && e0 <= 1.0);
        }
        // At r = r₀ the power cap dominates and is astronomically small.
        let e0 = dc.eps0(dc.r0, 1.0);
        assert!(e0 < 1e-69 && e0 > 1e-71, "ε₀(r₀) = {e0:e}");
    }

    #[test]
    fn huge_k_star_is_infeasible() {
        // At r = 2⁻²⁰, Δ > 0 needs K* < r^{η−κ₁+℘}/8 ≈ 5.3e3; 1e9 fails.
        let err = derive_constants_default_wp(&Params::default(), 1e9).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1e9") || msg.contains("1000000000"), "error must name K*: {msg}");
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn wp_out_of_range_is_parameter_error() {
        let p = Params::default();
        assert!(matches!(derive_constants(&p, 1.0, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(derive_constants(&p, 1.0, 0.7), Err(Error::Parameter(_))));
        // ℘ large enough that κ₁ − ℘ ≤ η (needs ℘ ≥ 0.285) but < κ₁∧κ₃.
        assert!(matches!(derive_constants(&p, 1.0, 0.3), Err(Error::Parameter(_))));
    }

    #[test]
    fn small_k_star_pushes_r0_to_one() {
        let dc = derive_constants_default_wp(&Params::default(), 1e-3).unwrap();
        // Δ(1) = ½·min((1/4 − 2e-3)/4, 1) > 0 → r₀ = 1.
        assert_eq!(dc.r0, 1.0);
    }

    #[test]
    fn validation_is_pure() {
        let p = Params { xi: 0.5, ..Params::default() };
        assert_eq!(validate_params(&p).unwrap(), validate_params(&p).unwrap());
    }
}
