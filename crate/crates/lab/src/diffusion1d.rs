//! Exact laws and samplers of the one-dimensional total-mass processes.
//!
//! The total mass of a single cluster evolves as the Feller branching
//! diffusion dZ = √Z dB, which is ¼·BESQ⁰(4z) in squared-Bessel terms.
//! Its transition over time t is classical: with N ~ Poisson(2z/t),
//!
//! ```text
//! Z_t = 0                     if N = 0        (extinction atom e^{−2z/t})
//! Z_t ~ Gamma(N, scale t/2)   otherwise,
//! ```
//!
//! with Laplace transform E[e^{−λZ_t}] = exp(−2λz/(2+λt)).
//!
//! Conditioning the cluster to reach total mass 1 before dying turns the
//! law into ¼·BESQ⁴(4z) (up to the hitting time), whose exact transition is
//! a scaled noncentral χ² with 4 degrees of freedom. Conditioning instead
//! on survival *at* a fixed horizon T tilts the drift by
//! F(x) = x e^{−x}/(1−e^{−x}), which interpolates from F(0) = 1 (strong
//! upward push near extinction) to F(∞) = 0.
//!
//! Everything here takes an explicit RNG handle and is pure given it.

use crate::params::Params;
use crate::rng::uniform_from_u64;
use crate::{Error, Result};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, Poisson};

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// Survival probability of the Feller diffusion: P_z(Z_t > 0) = 1 − e^{−2z/t}.
pub fn survival_prob(z: f64, t: f64) -> f64 {
    debug_assert!(z >= 0.0 && t > 0.0);
    -(-2.0 * z / t).exp_m1()
}

/// Scale-function hitting probability: starting at z ∈ [0, 1], the
/// driftless Feller diffusion hits 1 before 0 with probability exactly z.
pub fn hit_prob_one_before_zero(z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::rejected(format!("initial mass must lie in [0, 1], got {z}")));
    }
    Ok(z)
}

/// The h-transform drift F(x) = x e^{−x} / (1 − e^{−x}), F(0) = 1,
/// continuous and strictly decreasing to 0.
pub fn drift_f(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    let em = -(-x).exp_m1(); // 1 − e^{−x}, accurate near 0
    x * (-x).exp() / em
}

/// Ceiling for fractional moments of the surviving mass: for z, T ∈ (0, 1]
/// and p > 0,
///
/// ```text
/// K_p · [ (z^{p α^{N₀}} T^{p α} + z^p) · P_z(survive to T) + z·T^{p ξ − 1} ].
/// ```
pub fn fractional_moment_bound(z: f64, t_cap: f64, p: f64, k_p: f64, params: &Params) -> Result<f64> {
    if !(z > 0.0 && z <= 1.0 && t_cap > 0.0 && t_cap <= 1.0) {
        return Err(Error::rejected(format!(
            "need z, T ∈ (0, 1], got z = {z}, T = {t_cap}"
        )));
    }
    if !(p > 0.0 && k_p > 0.0) {
        return Err(Error::rejected(format!("need p, K_p > 0, got p = {p}, K_p = {k_p}")));
    }
    let a_pow = params.alpha.powi(params.n0 as i32);
    let surv = survival_prob(z, t_cap);
    Ok(k_p
        * ((z.powf(p * a_pow) * t_cap.powf(p * params.alpha) + z.powf(p)) * surv
            + z * t_cap.powf(p * params.xi - 1.0)))
}

/// Probability that a diffusion bridge from z0 to z1 over dt (both below
/// `level`) crossed `level` in between, under the Gaussian-bridge
/// approximation with the diffusion's local variance z̄ = (z0+z1)/2:
/// exp(−2(level−z0)(level−z1)/(z̄·dt)).
pub fn bridge_crossing_prob(z0: f64, z1: f64, level: f64, dt: f64) -> f64 {
    debug_assert!(z0 < level && z1 < level && dt > 0.0);
    let zbar = 0.5 * (z0 + z1);
    if zbar <= 0.0 {
        return 0.0;
    }
    (-2.0 * (level - z0) * (level - z1) / (zbar * dt)).exp()
}

// ---------------------------------------------------------------------------
// Exact transition samplers
// ---------------------------------------------------------------------------

/// One exact Feller transition over time t from state z ≥ 0.
pub fn feller_transition_sample<R: Rng + ?Sized>(z: f64, t: f64, rng: &mut R) -> f64 {
    debug_assert!(z >= 0.0 && t > 0.0);
    let lambda = 2.0 * z / t;
    if lambda == 0.0 {
        return 0.0;
    }
    let n = Poisson::new(lambda).expect("λ > 0").sample(rng);
    if n < 0.5 {
        return 0.0;
    }
    Gamma::new(n, t / 2.0).expect("shape ≥ 1").sample(rng)
}

/// One exact transition of ¼·BESQ⁴(4z) over dt:
/// (dt/4)·[(√(4z/dt) + G₁)² + G₂² + G₃² + G₄²]; mean z + dt, leaves 0
/// immediately.
pub fn besq4_quarter_step<R: Rng + ?Sized>(z: f64, dt: f64, rng: &mut R) -> f64 {
    debug_assert!(z >= 0.0 && dt > 0.0);
    let sqrt_nc = (4.0 * z / dt).sqrt();
    let g1: f64 = rng.sample(rand_distr::StandardNormal);
    let g2: f64 = rng.sample(rand_distr::StandardNormal);
    let g3: f64 = rng.sample(rand_distr::StandardNormal);
    let g4: f64 = rng.sample(rand_distr::StandardNormal);
    let a = sqrt_nc + g1;
    (dt / 4.0) * (a * a + g2 * g2 + g3 * g3 + g4 * g4)
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

/// Which diffusion a [`DiffusionSpec`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionKind {
    /// Driftless branching diffusion dZ = √Z dB (absorbing at 0).
    Feller,
    /// ¼·BESQ⁴(4z): the cluster mass conditioned to reach 1.
    Besq4Quarter,
    /// Feller conditioned on survival at the horizon (h-transform drift F).
    ConditionedFeller,
}

/// A sampling request for one of the three mass diffusions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    pub kind: DiffusionKind,
    /// Initial mass z ≥ 0.
    pub z0: f64,
    /// Required for `ConditionedFeller` (the survival horizon); also the
    /// path length for the other kinds.
    pub horizon: f64,
    /// Sampling step; must not exceed horizon/10.
    pub dt: f64,
}

impl DiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.z0 >= 0.0 && self.z0.is_finite()) {
            return Err(Error::rejected(format!("z0 must be finite and ≥ 0, got {}", self.z0)));
        }
        if !(self.horizon > 0.0 && self.dt > 0.0) {
            return Err(Error::rejected(format!(
                "horizon and dt must be positive, got {} and {}",
                self.horizon, self.dt
            )));
        }
        if self.dt > self.horizon / 10.0 {
            return Err(Error::rejected(format!(
                "dt = {} exceeds horizon/10 = {}",
                self.dt,
                self.horizon / 10.0
            )));
        }
        if self.kind == DiffusionKind::ConditionedFeller && self.z0 == 0.0 {
            return Err(Error::rejected("conditioned diffusion needs z0 > 0".to_string()));
        }
        Ok(())
    }
}

/// First hit of a level: index of the first grid point at/past the level
/// and the linearly interpolated crossing instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitMark {
    pub index: usize,
    pub time: f64,
}

/// A discretely sampled mass path with its level-0 and level-1 markers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub hit_zero: Option<HitMark>,
    pub hit_one: Option<HitMark>,
}

impl DiffusionPath {
    fn from_values(times: Vec<f64>, values: Vec<f64>) -> Self {
        let mut hit_zero = None;
        let mut hit_one = None;
        for (k, &v) in values.iter().enumerate() {
            if hit_zero.is_none() && v == 0.0 && k > 0 {
                hit_zero = Some(HitMark { index: k, time: times[k] });
            }
            if hit_one.is_none() && v >= 1.0 {
                let time = if k == 0 {
                    times[0]
                } else {
                    // Linear interpolation of the first crossing instant.
                    let (v0, v1) = (values[k - 1], v);
                    let frac = if v1 > v0 { (1.0 - v0) / (v1 - v0) } else { 1.0 };
                    times[k - 1] + frac.clamp(0.0, 1.0) * (times[k] - times[k - 1])
                };
                hit_one = Some(HitMark { index: k, time });
            }
        }
        DiffusionPath { times, values, hit_zero, hit_one }
    }

    /// Value at grid index k of the path stopped at level 1: once the
    /// level-1 marker has passed, the stopped value is pinned to 1.
    pub fn value_stopped_at_one(&self, k: usize) -> f64 {
        match self.hit_one {
            Some(m) if k >= m.index => 1.0,
            _ => self.values[k],
        }
    }
}

/// Samples a full path per the spec on the uniform grid
/// {0, dt, 2dt, …, horizon}.
pub fn sample_path<R: Rng + ?Sized>(spec: &DiffusionSpec, rng: &mut R) -> Result<DiffusionPath> {
    spec.validate()?;
    let n = (spec.horizon / spec.dt).round() as usize;
    let dt = spec.horizon / n as f64;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let mut values = Vec::with_capacity(n + 1);
    values.push(spec.z0);
    match spec.kind {
        DiffusionKind::Feller => {
            let mut z = spec.z0;
            for _ in 0..n {
                z = feller_transition_sample(z, dt, rng);
                values.push(z);
            }
        }
        DiffusionKind::Besq4Quarter => {
            let mut z = spec.z0;
            for _ in 0..n {
                z = besq4_quarter_step(z, dt, rng);
                values.push(z);
            }
        }
        DiffusionKind::ConditionedFeller => {
            let mut z = spec.z0;
            for k in 0..n {
                let s = k as f64 * dt;
                let remaining = spec.horizon - s;
                let drift = drift_f(2.0 * z / remaining);
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                z = (z + drift * dt + z.sqrt() * g * dt.sqrt()).max(0.0);
                values.push(z);
            }
        }
    }
    Ok(DiffusionPath::from_values(times, values))
}

/// Euler path of the conditioned (survival-at-T) diffusion; negatives are
/// clamped to 0 and re-enter through the drift F(0) = 1.
pub fn conditioned_feller_path<R: Rng + ?Sized>(
    z: f64,
    t_cap: f64,
    dt: f64,
    rng: &mut R,
) -> Result<DiffusionPath> {
    if dt >= t_cap {
        return Err(Error::Step {
            step: 0,
            time: 0.0,
            msg: format!("dt = {dt} must be below the horizon T = {t_cap}"),
        });
    }
    sample_path(
        &DiffusionSpec {
            kind: DiffusionKind::ConditionedFeller,
            z0: z,
            horizon: t_cap,
            dt,
        },
        rng,
    )
}

// ---------------------------------------------------------------------------
// Hitting estimator (exact transitions + bridge correction)
// ---------------------------------------------------------------------------

/// Monte Carlo estimate of P_z(hit 1 before 0) over `n` paths.
///
/// Each path advances by exact Feller transitions on a dt grid; crossings
/// of level 1 inside a step are recovered by a Gaussian-bridge coin, and a
/// path still alive below 1 at the horizon is resolved by one exact
/// Bernoulli(z_end) draw (optional stopping of the bounded martingale
/// Z_{·∧T₀∧T₁}). Returns the number of hits.
pub fn hit_one_before_zero_mc<R: RngCore + ?Sized>(
    z: f64,
    dt: f64,
    horizon: f64,
    n: u64,
    rng: &mut R,
) -> u64 {
    assert!((0.0..=1.0).contains(&z) && dt > 0.0 && horizon > dt);
    let steps = (horizon / dt).ceil() as u64;
    let mut hits = 0u64;
    for _ in 0..n {
        let mut zc = z;
        let mut resolved = false;
        for _ in 0..steps {
            let znext = feller_transition_sample(zc, dt, rng);
            if znext >= 1.0 {
                hits += 1;
                resolved = true;
                break;
            }
            // Crossing hidden inside the step?
            let p_cross = bridge_crossing_prob(zc, znext, 1.0, dt);
            if p_cross > 0.0 && uniform_from_u64(rng.next_u64()) < p_cross {
                hits += 1;
                resolved = true;
                break;
            }
            if znext == 0.0 {
                resolved = true;
                break;
            }
            zc = znext;
        }
        if !resolved {
            // Alive below 1 at the horizon: hit probability from here is
            // exactly the current mass.
            if uniform_from_u64(rng.next_u64()) < zc {
                hits += 1;
            }
        }
    }
    hits
}

/// The mass at `t_obs` of ¼·BESQ⁴(4z) *stopped at level 1*, sampled by
/// exact transitions with the same Gaussian-bridge crossing recovery as the
/// hitting estimator: returns 1.0 when the path reached 1 before `t_obs`,
/// otherwise the (sub-1) value at `t_obs`.
pub fn besq4_stopped_mass_at<R: RngCore + ?Sized>(
    z: f64,
    t_obs: f64,
    dt: f64,
    rng: &mut R,
) -> f64 {
    assert!(z >= 0.0 && t_obs > dt && dt > 0.0);
    let steps = (t_obs / dt).round().max(1.0) as u64;
    let dt = t_obs / steps as f64;
    let mut zc = z;
    for _ in 0..steps {
        let znext = besq4_quarter_step(zc, dt, rng);
        if znext >= 1.0 {
            return 1.0;
        }
        let p_cross = bridge_crossing_prob(zc, znext, 1.0, dt);
        if p_cross > 0.0 && uniform_from_u64(rng.next_u64()) < p_cross {
            return 1.0;
        }
        zc = znext;
    }
    zc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::scalar_rng;
    use crate::stats::{mean_se, wilson_interval};
    use crate::tolerances::STAT_SIGMA;

    #[test]
    fn survival_closed_form() {
        assert_eq!(survival_prob(0.0, 1.0), 0.0);
        let s = survival_prob(0.5, 1.0);
        assert!((s - 0.6321205588285577).abs() < 1e-12, "1−e⁻¹ = {s}");
        // Upper bound 2z/t everywhere.
        for &z in &[0.01, 0.1, 0.5, 2.0] {
            for &t in &[0.05, 0.3, 1.0, 10.0] {
                assert!(survival_prob(z, t) <= 2.0 * z / t + 1e-15);
            }
        }
    }

    #[test]
    fn scale_function_is_identity() {
        assert_eq!(hit_prob_one_before_zero(0.0).unwrap(), 0.0);
        assert_eq!(hit_prob_one_before_zero(1.0).unwrap(), 1.0);
        assert_eq!(hit_prob_one_before_zero(0.05).unwrap(), 0.05);
        assert!(hit_prob_one_before_zero(1.2).is_err());
        assert!(hit_prob_one_before_zero(-0.1).is_err());
    }

    #[test]
    fn drift_f_values() {
        assert_eq!(drift_f(0.0), 1.0);
        let f1 = drift_f(1.0);
        assert!((f1 - 0.5819767068693265).abs() < 1e-12, "F(1) = {f1}");
        // Strictly decreasing on a grid.
        let mut prev = drift_f(0.0);
        for k in 1..=200 {
            let f = drift_f(k as f64 * 0.05);
            assert!(f < prev, "F not decreasing at {}", k as f64 * 0.05);
            prev = f;
        }
        // Continuity at 0: F(x) → 1.
        assert!((drift_f(1e-12) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn feller_zero_is_absorbing() {
        let mut rng = scalar_rng(1, 100);
        for _ in 0..100 {
            assert_eq!(feller_transition_sample(0.0, 0.7, &mut rng), 0.0);
        }
    }

    #[test]
    fn feller_extinction_atom_matches() {
        // P(Z_1 = 0 | z = 0.1) = e^{−0.2} ≈ 0.8187.
        let mut rng = scalar_rng(2, 101);
        let n = 20_000u64;
        let zeros = (0..n)
            .filter(|_| feller_transition_sample(0.1, 1.0, &mut rng) == 0.0)
            .count() as u64;
        let p = (-0.2f64).exp();
        let iv = wilson_interval(zeros, n, STAT_SIGMA);
        assert!(
            iv.lo <= p && p <= iv.hi,
            "zero fraction {} ∉ 3σ interval around {p}",
            zeros as f64 / n as f64
        );
    }

    #[test]
    fn feller_laplace_transform() {
        // E[e^{−Z_1} | z = 0.5] = e^{−1/3}.
        let mut rng = scalar_rng(3, 102);
        let n = 20_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| (-feller_transition_sample(0.5, 1.0, &mut rng)).exp())
            .collect();
        let (m, se) = mean_se(&vals);
        let want = (-1.0f64 / 3.0).exp();
        assert!(
            (m - want).abs() <= STAT_SIGMA * se,
            "Laplace mean {m} vs {want} (se {se})"
        );
    }

    #[test]
    fn feller_transition_is_mean_preserving() {
        // One 5000-sample transition: martingale property E[Z_t] = z.
        let mut rng = scalar_rng(4, 103);
        let vals: Vec<f64> = (0..5000)
            .map(|_| feller_transition_sample(0.4, 0.8, &mut rng))
            .collect();
        let (m, se) = mean_se(&vals);
        assert!((m - 0.4).abs() <= STAT_SIGMA * se, "mean {m} (se {se})");
    }

    #[test]
    fn besq4_entrance_and_moments() {
        let mut rng = scalar_rng(5, 104);
        // Leaves zero immediately.
        for _ in 0..200 {
            assert!(besq4_quarter_step(0.0, 0.1, &mut rng) > 0.0);
        }
        // Mean z + dt and variance dt²/2 + z·dt.
        let (z, dt) = (0.3, 0.1);
        let vals: Vec<f64> = (0..20_000).map(|_| besq4_quarter_step(z, dt, &mut rng)).collect();
        let (m, se) = mean_se(&vals);
        assert!((m - (z + dt)).abs() <= STAT_SIGMA * se, "mean {m} (se {se})");
        let var = crate::stats::variance(&vals);
        let want_var = dt * dt / 2.0 + z * dt;
        // Sample variance se ≈ var·√(2/(n−1)) for near-Gaussian summands;
        // allow 5× for the χ² kurtosis.
        assert!(
            (var - want_var).abs() < 5.0 * want_var * (2.0f64 / 19_999.0).sqrt(),
            "var {var} vs {want_var}"
        );
    }

    #[test]
    fn conditioned_paths_survive() {
        let mut rng = scalar_rng(6, 105);
        let t_cap = 0.4;
        let mut positive = 0;
        let n = 400;
        for _ in 0..n {
            let path = conditioned_feller_path(0.05, t_cap, t_cap / 2000.0, &mut rng).unwrap();
            if *path.values.last().unwrap() > 0.0 {
                positive += 1;
            }
            // Nonnegativity along the way.
            assert!(path.values.iter().all(|&v| v >= 0.0));
        }
        assert!(
            positive >= n - 2,
            "conditioned paths must survive to T: {positive}/{n}"
        );
    }

    #[test]
    fn conditioned_path_rejects_bad_dt() {
        let mut rng = scalar_rng(7, 106);
        assert!(matches!(
            conditioned_feller_path(0.1, 0.2, 0.3, &mut rng),
            Err(Error::Step { .. })
        ));
    }

    #[test]
    fn fractional_moment_bound_cases() {
        let p = Params::default();
        // z → 0 → bound → 0 (every term carries a positive z power).
        let tiny = fractional_moment_bound(1e-12, 0.5, 0.5, 10.0, &p).unwrap();
        assert!(tiny < 1e-5, "bound at z→0 is {tiny}");
        let v = fractional_moment_bound(0.01, 0.5, 0.5, 10.0, &p).unwrap();
        assert!(v.is_finite() && v > 0.0);
        assert!(fractional_moment_bound(0.0, 0.5, 0.5, 10.0, &p).is_err());
        assert!(fractional_moment_bound(0.5, 1.5, 0.5, 10.0, &p).is_err());
    }

    #[test]
    fn hit_estimator_matches_scale_function() {
        // z = 0.2: frequency within 3σ + a small bridge-bias margin.
        let mut rng = scalar_rng(8, 107);
        let n = 5000u64;
        let hits = hit_one_before_zero_mc(0.2, 2e-3, 20.0, n, &mut rng);
        let freq = hits as f64 / n as f64;
        let sigma = (0.2 * 0.8 / n as f64).sqrt();
        assert!(
            (freq - 0.2).abs() <= STAT_SIGMA * sigma + 0.01,
            "hit frequency {freq} vs 0.2 (σ = {sigma:.4})"
        );
    }

    #[test]
    fn absorption_invariant_along_paths() {
        let mut rng = scalar_rng(9, 108);
        for _ in 0..50 {
            let path = sample_path(
                &DiffusionSpec {
                    kind: DiffusionKind::Feller,
                    z0: 0.3,
                    horizon: 2.0,
                    dt: 0.01,
                },
                &mut rng,
            )
            .unwrap();
            if let Some(m) = path.hit_zero {
                assert!(path.values[m.index..].iter().all(|&v| v == 0.0), "revival after absorption");
            }
        }
    }

    #[test]
    fn stopped_value_pins_after_hit() {
        let times = vec![0.0, 0.1, 0.2, 0.3];
        let values = vec![0.5, 0.9, 1.2, 0.8];
        let path = DiffusionPath::from_values(times, values);
        let m = path.hit_one.unwrap();
        assert_eq!(m.index, 2);
        // Interpolated crossing between 0.9 and 1.2: frac = 1/3.
        assert!((m.time - (0.1 + 0.1 / 3.0)).abs() < 1e-12);
        assert_eq!(path.value_stopped_at_one(1), 0.9);
        assert_eq!(path.value_stopped_at_one(2), 1.0);
        assert_eq!(path.value_stopped_at_one(3), 1.0);
    }

    #[test]
    fn spec_validation() {
        let ok = DiffusionSpec { kind: DiffusionKind::Feller, z0: 0.1, horizon: 1.0, dt: 0.05 };
        assert!(ok.validate().is_ok());
        let bad_dt = DiffusionSpec { dt: 0.2, ..ok };
        assert!(bad_dt.validate().is_err(), "dt > horizon/10 must fail");
        let bad_z = DiffusionSpec { z0: -0.1, ..ok };
        assert!(bad_z.validate().is_err());
        let cond_zero = DiffusionSpec {
            kind: DiffusionKind::ConditionedFeller,
            z0: 0.0,
            ..ok
        };
        assert!(cond_zero.validate().is_err());
    }
}
