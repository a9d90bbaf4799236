//! Deterministic analysis helpers: the iterated modulus-of-continuity
//! bound, the singular triangle integral I(a,b,c,T), exponent allocation,
//! space-time parabola geometry, and cluster index classification.
//!
//! Everything here is a pure closed-form or monotone-root computation; all
//! root finding is bisection with a fixed iteration count (unconditionally
//! convergent, bit-reproducible).

use crate::tolerances::BISECT_ITERS;
use crate::{Error, Result};
use statrs::function::gamma::ln_gamma;

/// Search horizon for contact times.
const CONTACT_HORIZON: f64 = 1e6;

// ---------------------------------------------------------------------------
// Iterated modulus of continuity
// ---------------------------------------------------------------------------

/// Picks the iteration depth N′ with Σ_{j=1}^{N′} a^j ≤ ξ′ < Σ_{j=1}^{N′+1} a^j.
///
/// Errors: ξ′ below the first partial sum a, or at/above the geometric cap
/// a/(1−a), leaves no representable depth.
pub fn imc_pick_n(a: f64, xi_prime: f64) -> Result<u32> {
    if !(a > 0.0 && a < 0.5) {
        return Err(Error::rejected(format!("a must lie in (0, ½), got {a}")));
    }
    if !(xi_prime > 0.0 && xi_prime < 1.0) {
        return Err(Error::rejected(format!("ξ′ must lie in (0, 1), got {xi_prime}")));
    }
    if xi_prime < a {
        return Err(Error::NoSolution(format!(
            "ξ′ = {xi_prime} is below the first partial sum a = {a}"
        )));
    }
    let cap = a / (1.0 - a);
    if xi_prime >= cap {
        return Err(Error::NoSolution(format!(
            "ξ′ = {xi_prime} is at or above the geometric cap a/(1−a) = {cap}"
        )));
    }
    let mut partial = 0.0;
    let mut n = 0u32;
    loop {
        let next = partial + a.powi(n as i32 + 1);
        if next > xi_prime {
            // partial = Σ_{j≤n} ≤ ξ′ < Σ_{j≤n+1} = next.
            return Ok(n);
        }
        partial = next;
        n += 1;
        debug_assert!(n < 10_000, "partial sums must cross ξ′ < a/(1−a)");
    }
}

/// The iterated self-improvement bound: for a function with f(0) = f₀ whose
/// increments obey |f(t)−f(0)| ≤ b·t + c·(∫₀ᵗ |f| ds)^a-type control on
/// [0, 1], the closed-form majorant of |f(t)−f(0)| after N′ improvement
/// rounds is
///
/// ```text
/// (c^{1/(1−a)}+1)·Σ_{j=1}^{N′} |f₀|^{a^j} · t^a
///   + [ b + (c^{1/(1−a)}+1)·Σ_{j=1}^{N′} (b/2)^{a^j} + c^{1/(1−a)} + 1 ] · t^{ξ′}.
/// ```
pub fn imc_bound(
    f0: f64,
    b: f64,
    c: f64,
    a: f64,
    xi_prime: f64,
    n_prime: u32,
    t: f64,
) -> Result<f64> {
    if !(a > 0.0 && a < 0.5) {
        return Err(Error::rejected(format!("a must lie in (0, ½), got {a}")));
    }
    if b < 0.0 || c < 0.0 {
        return Err(Error::rejected(format!("b, c must be ≥ 0, got b={b}, c={c}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::rejected(format!("t must lie in [0, 1], got {t}")));
    }
    let amp = c.powf(1.0 / (1.0 - a)) + 1.0;
    let mut s_f0 = 0.0;
    let mut s_b = 0.0;
    for j in 1..=n_prime {
        let e = a.powi(j as i32);
        s_f0 += f0.abs().powf(e);
        s_b += (b / 2.0).powf(e);
    }
    Ok(amp * s_f0 * t.powf(a) + (b + amp * s_b + amp) * t.powf(xi_prime))
}

// ---------------------------------------------------------------------------
// The triangle integral I(a,b,c,T) = ∫₀ᵀ s^b ∫₀ˢ r^a (s−r)^c dr ds
// ---------------------------------------------------------------------------

/// Value of [`integral_i`]: `finite` is false (and `value` is +∞) when the
/// integral diverges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralI {
    pub finite: bool,
    pub value: f64,
}

/// Closed form of the triangle integral: substituting r = s·v factors it
/// into B(a+1, c+1) · T^{a+b+c+2} / (a+b+c+2), finite iff a > −1, c > −1
/// and a+b+c > −2.
pub fn integral_i(a: f64, b: f64, c: f64, t_cap: f64) -> Result<IntegralI> {
    if !(t_cap > 0.0) || !t_cap.is_finite() {
        return Err(Error::rejected(format!("T must be positive and finite, got {t_cap}")));
    }
    let sigma = a + b + c + 2.0;
    if !(a > -1.0 && c > -1.0 && sigma > 0.0) {
        return Ok(IntegralI {
            finite: false,
            value: f64::INFINITY,
        });
    }
    let value = beta_integral(a, c) * t_cap.powf(sigma) / sigma;
    Ok(IntegralI { finite: true, value })
}

/// The Beta integral ∫₀¹ v^a (1−v)^c dv for a, c > −1.
///
/// Uses the log-Gamma identity in the regular range and direct singular
/// quadrature when either exponent is in (−1, −0.5], where the integrand's
/// endpoint singularity is strongest.
pub fn beta_integral(a: f64, c: f64) -> f64 {
    assert!(a > -1.0 && c > -1.0, "Beta integral needs a, c > −1");
    if a <= -0.5 || c <= -0.5 {
        beta_integral_quadrature(a, c)
    } else {
        (ln_gamma(a + 1.0) + ln_gamma(c + 1.0) - ln_gamma(a + c + 2.0)).exp()
    }
}

/// 16-point Gauss–Legendre nodes (positive half) and weights on [−1, 1].
const GL16_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Composite 16-point Gauss–Legendre quadrature of `f` over [lo, hi] with
/// `panels` equal panels.
fn gauss_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * h;
        let mid = a + 0.5 * h;
        let half = 0.5 * h;
        let mut acc = 0.0;
        for k in 0..8 {
            acc += GL16_W[k] * (f(mid - half * GL16_X[k]) + f(mid + half * GL16_X[k]));
        }
        total += acc * half;
    }
    total
}

/// Direct quadrature of ∫₀¹ v^a (1−v)^c dv: split at ½ and pull each
/// endpoint singularity into a smooth integrand by the power substitution
/// v = ½·u^k with k chosen so the transformed exponent k(a+1)−1 is ≥ 1.
fn beta_integral_quadrature(a: f64, c: f64) -> f64 {
    let half_piece = |p: f64, q: f64| -> f64 {
        // ∫₀^{1/2} v^p (1−v)^q dv with v = ½ u^k.
        let k = (2.0 / (1.0 + p)).ceil().max(1.0);
        let scale = 0.5f64.powf(p + 1.0) * k;
        gauss_legendre(
            |u: f64| {
                if u <= 0.0 {
                    return 0.0;
                }
                let v = 0.5 * u.powf(k);
                u.powf(k * (p + 1.0) - 1.0) * (1.0 - v).powf(q)
            },
            0.0,
            1.0,
            64,
        ) * scale
    };
    half_piece(a, c) + half_piece(c, a)
}

/// Independent check of the closed form: the exact substitution r = s·v
/// factors the double integral into two one-dimensional integrals,
/// ∫₀ᵀ s^{a+b+c+1} ds · ∫₀¹ v^a(1−v)^c dv, each quadratured directly with
/// its own endpoint-singularity substitution. Shares no code path with
/// [`integral_i`]'s Gamma-function route (for a, c > −0.5 where that route
/// is active).
pub fn integral_i_quadrature(a: f64, b: f64, c: f64, t_cap: f64) -> f64 {
    let sigma = a + b + c + 2.0;
    assert!(a > -1.0 && c > -1.0 && sigma > 0.0, "divergent integral");
    // Time factor ∫₀ᵀ s^{σ−1} ds via s = T·t^q, q·σ−1 ≥ 1.
    let q = (2.0 / sigma).ceil().max(1.0);
    let time_factor = t_cap.powf(sigma)
        * q
        * gauss_legendre(
            |t: f64| {
                if t <= 0.0 {
                    return 0.0;
                }
                t.powf(q * sigma - 1.0)
            },
            0.0,
            1.0,
            64,
        );
    time_factor * beta_integral_quadrature(a, c)
}

// ---------------------------------------------------------------------------
// Exponent allocation
// ---------------------------------------------------------------------------

/// Splits a negative exponent b into b = b₁ + b₂ with a + b₁ > −1 and
/// b₂ + c > −1, both parts negative; the midpoint of the feasible interval
/// keeps a symmetric margin on both constraints.
///
/// Errors: hypotheses a > −1, c > −1, b < 0, a+b+c > −2 violated.
pub fn allocate_exponents(a: f64, b: f64, c: f64) -> Result<(f64, f64)> {
    if !(a > -1.0 && c > -1.0 && b < 0.0 && a + b + c > -2.0) {
        return Err(Error::NoSolution(format!(
            "allocation needs a > −1, c > −1, b < 0, a+b+c > −2; got ({a}, {b}, {c})"
        )));
    }
    // Feasible b₁ interval: (max(−(a+1), b), min(b+c+1, 0)); nonempty
    // exactly under the hypotheses.
    let lo = (-(a + 1.0)).max(b);
    let hi = (b + c + 1.0).min(0.0);
    debug_assert!(lo < hi);
    let b1 = 0.5 * (lo + hi);
    let b2 = b - b1;
    debug_assert!(b1 < 0.0 && b2 < 0.0 && a + b1 > -1.0 && b2 + c > -1.0);
    Ok((b1, b2))
}

// ---------------------------------------------------------------------------
// Parabola geometry
// ---------------------------------------------------------------------------

/// A space-time parabola: the envelope |x − center| ≤ shoulder + (t−birth)^exponent
/// that holds a cluster's support after its birth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Parabola {
    /// Deposit location.
    pub center: f64,
    /// Deposit time.
    pub birth: f64,
    /// Width at birth (typically √ε).
    pub shoulder: f64,
    /// Growth exponent (typically β ∈ (0, ½)).
    pub exponent: f64,
}

impl Parabola {
    /// Validating constructor: shoulder > 0 and exponent ∈ (0, ½).
    pub fn new(center: f64, birth: f64, shoulder: f64, exponent: f64) -> Result<Parabola> {
        if !(shoulder > 0.0) {
            return Err(Error::rejected(format!("shoulder must be > 0, got {shoulder}")));
        }
        if !(exponent > 0.0 && exponent < 0.5) {
            return Err(Error::rejected(format!("exponent must lie in (0, ½), got {exponent}")));
        }
        Ok(Parabola { center, birth, shoulder, exponent })
    }

    /// Half-width at time t ≥ birth.
    pub fn width(&self, t: f64) -> f64 {
        debug_assert!(t >= self.birth);
        self.shoulder + (t - self.birth).powf(self.exponent)
    }

    /// The spatial section [lo, hi] at time t ≥ birth.
    pub fn section(&self, t: f64) -> (f64, f64) {
        let w = self.width(t);
        (self.center - w, self.center + w)
    }
}

/// First time the two widening sections touch, at or after the later birth;
/// +∞ (as `None`) beyond the horizon.
///
/// The gap function g(s) = w_p(s) + w_q(s) − |centers| is strictly
/// increasing, so the root is unique. Bisection runs in the transformed
/// variable τ = (s − s_min)^e with e the *smaller* exponent: the later-born
/// parabola's width contributes τ itself (slope 1) or a smooth power ≥ 1 of
/// τ, removing the infinite time-derivative at s_min and guaranteeing the
/// residual tolerance.
fn contact_time_general(p: &Parabola, q: &Parabola) -> Option<f64> {
    let s_min = p.birth.max(q.birth);
    let gap = (p.center - q.center).abs();
    let width_at = |s: f64| -> f64 {
        (s - p.birth).max(0.0).powf(p.exponent)
            + (s - q.birth).max(0.0).powf(q.exponent)
            + p.shoulder
            + q.shoulder
    };
    if width_at(s_min) >= gap {
        return Some(s_min);
    }
    if width_at(CONTACT_HORIZON) < gap {
        return None;
    }
    let e = p.exponent.min(q.exponent);
    let mut lo = 0.0f64;
    let mut hi = (CONTACT_HORIZON - s_min).powf(e);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if width_at(s_min + mid.powf(1.0 / e)) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let t = s_min + tau.powf(1.0 / e);
    #[cfg(debug_assertions)]
    {
        // When the root lies within a few ulps of a birth time the width
        // function jumps by ~ulp^exponent between adjacent f64 values and
        // no representable t can meet the raw residual; the achievable
        // tolerance is the width's variation across t's f64 neighbors.
        let du = 2.0 * t.abs().max(f64::MIN_POSITIVE) * f64::EPSILON;
        let granularity = width_at(t + du) - width_at((t - du).max(s_min));
        debug_assert!(
            (width_at(t) - gap).abs() < crate::tolerances::CONTACT_RESIDUAL + granularity,
            "contact residual {} at t = {t} (granularity {granularity})",
            (width_at(t) - gap).abs()
        );
    }
    Some(t)
}

/// The support contact time of two equal-shoulder, equal-exponent parabolas
/// born at s_i (center x_i) and t_j (center y): the unique root t ≥ t_j of
///
/// ```text
/// √ε + (t−s_i)^β + √ε + (t−t_j)^β = |y − x_i|.
/// ```
///
/// Returns t_j itself when the sections already touch at t_j.
///
/// Errors: t_j ≤ s_i or |y−x_i| < 2√ε (born overlapping) are rejected;
/// a root beyond 10⁶ is a horizon error.
pub fn contact_time(x_i: f64, s_i: f64, y: f64, t_j: f64, eps: f64, beta: f64) -> Result<f64> {
    if !(t_j > s_i) {
        return Err(Error::rejected(format!("need t_j > s_i, got t_j = {t_j}, s_i = {s_i}")));
    }
    if !(eps > 0.0) || !(beta > 0.0 && beta < 0.5) {
        return Err(Error::rejected(format!("need ε > 0 and β ∈ (0, ½), got ε = {eps}, β = {beta}")));
    }
    let shoulder = eps.sqrt();
    if (y - x_i).abs() < 2.0 * shoulder {
        return Err(Error::rejected(format!(
            "parabolas born overlapping: |y − x_i| = {} < 2√ε = {}",
            (y - x_i).abs(),
            2.0 * shoulder
        )));
    }
    let p = Parabola { center: x_i, birth: s_i, shoulder, exponent: beta };
    let q = Parabola { center: y, birth: t_j, shoulder, exponent: beta };
    contact_time_general(&p, &q).ok_or_else(|| {
        Error::Horizon(format!("no contact below t = {CONTACT_HORIZON:e}"))
    })
}

/// True iff the two sections stay disjoint at every time in
/// [max(birth), t]; decided in closed form by the contact time, not by
/// sampling.
pub fn parabolas_disjoint(p: &Parabola, q: &Parabola, t: f64) -> bool {
    debug_assert!(t >= p.birth.max(q.birth));
    match contact_time_general(p, q) {
        Some(tc) => tc > t,
        None => true, // contact beyond the 1e6 horizon
    }
}

// ---------------------------------------------------------------------------
// The opening factor A(r) and the release time t*
// ---------------------------------------------------------------------------

/// The unique A ∈ [1, 1 + r^{1−β′/β}] solving A^β + (A − r^{1−β′/β})^β = 2.
///
/// Requires ⅓ ≤ β′ < β < ½ and r ∈ (0, 1].
pub fn a_of_r(r: f64, beta: f64, beta_prime: f64) -> Result<f64> {
    let third = 1.0 / 3.0;
    if !(beta_prime >= third && beta_prime < beta && beta < 0.5) {
        return Err(Error::rejected(format!(
            "need ⅓ ≤ β′ < β < ½, got β = {beta}, β′ = {beta_prime}"
        )));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::rejected(format!("need r ∈ (0, 1], got {r}")));
    }
    let rho = r.powf(1.0 - beta_prime / beta);
    let f = |a: f64| a.powf(beta) + (a - rho).max(0.0).powf(beta) - 2.0;
    // f(1) = (1−ρ)^β − 1 ≤ 0 and f(1+ρ) = (1+ρ)^β − 1 ≥ 0.
    let (mut lo, mut hi) = (1.0, 1.0 + rho);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    debug_assert!(f(a).abs() < crate::tolerances::ROOT_RESIDUAL * 10.0);
    Ok(a)
}

/// The release time t* = s_i + A(t_j−s_i)·(t_j−s_i)^{β′/β} ≥ t_j after
/// which a laterally-landed cluster can no longer influence the parabola of
/// the cluster born at s_i.
///
/// Requires s_i < t_j ≤ s_i + 1.
pub fn t_star(s_i: f64, t_j: f64, beta: f64, beta_prime: f64) -> Result<f64> {
    let d = t_j - s_i;
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::rejected(format!(
            "need 0 < t_j − s_i ≤ 1, got {d}"
        )));
    }
    let a = a_of_r(d, beta, beta_prime)?;
    Ok(s_i + a * d.powf(beta_prime / beta))
}

// ---------------------------------------------------------------------------
// Index classification
// ---------------------------------------------------------------------------

/// Classification of competing-cluster indices relative to a reference
/// cluster born at (x_i, s_i): `all` lands inside the widened window by
/// time t, `critical` lands close enough at birth to touch the envelope
/// immediately, `lateral` is the rest. `critical` and `lateral` partition
/// `all`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexClassification {
    pub all: Vec<usize>,
    pub critical: Vec<usize>,
    pub lateral: Vec<usize>,
}

/// Classifies the competing deposits `(y_j, t_j)`:
///
/// ```text
/// all      = { j : |y_j − x_i| ≤ 2(√ε + (t − s_i)^{β′}),  s_i < t_j ≤ t′ }
/// critical = { j ∈ all : |y_j − x_i| < 2(√ε + (t_j − s_i)^{β′}) }
/// lateral  = all ∖ critical   (boundary cases land here: the lateral
///                              inequality is non-strict)
/// ```
///
/// Requires t ≥ t′ > s_i and ε > 0.
pub fn classify_indices(
    x_i: f64,
    s_i: f64,
    landing: &[(f64, f64)],
    t: f64,
    t_prime: f64,
    eps: f64,
    beta_prime: f64,
) -> Result<IndexClassification> {
    if !(t >= t_prime && t_prime > s_i) {
        return Err(Error::rejected(format!(
            "need t ≥ t′ > s_i, got t = {t}, t′ = {t_prime}, s_i = {s_i}"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::rejected(format!("need ε > 0, got {eps}")));
    }
    let sqrt_eps = eps.sqrt();
    let window = 2.0 * (sqrt_eps + (t - s_i).powf(beta_prime));
    let mut out = IndexClassification::default();
    for (j, &(y_j, t_j)) in landing.iter().enumerate() {
        if !(t_j > s_i && t_j <= t_prime) {
            continue;
        }
        let dist = (y_j - x_i).abs();
        if dist > window {
            continue;
        }
        out.all.push(j);
        let birth_window = 2.0 * (sqrt_eps + (t_j - s_i).powf(beta_prime));
        if dist < birth_window {
            out.critical.push(j);
        } else {
            out.lateral.push(j);
        }
    }
    Ok(out)
}
