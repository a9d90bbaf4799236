//! The coupled ε-approximating pair (X, Y) driven by one shared discrete
//! white noise, with intermittent immigration and per-cluster
//! decomposition.
//!
//! Immigrants land at the alternating times s_i = (i−½)ε (into X) and
//! t_i = iε (into Y), each starting a fresh cluster with initial measure
//! ψ(1)·ε times a unit-mass mollified bump at an i.i.d. target drawn from
//! ψ/ψ(1). Every cluster evolves by the explicit scheme
//!
//! ```text
//! c ← heat(c);   c ← noise substep driven by ξ with Var = c·dt/dx per cell,
//! ```
//!
//! where the per-cell unit normals ξ of all clusters are built from ONE
//! shared normal g per (step, cell) plus auxiliary normals, rotated by a
//! Householder reflection so that (i) Σ_j √c_j ξ_j = √(Σ c_j)·g exactly and
//! (ii) the ξ_j are uncorrelated with unit variance. X consumes g first,
//! then Y consumes the SAME g with its own auxiliaries — the two solutions
//! are coupled through the noise and only through it. Aggregates are
//! recomputed as cluster sums, so X = Σ X^i holds identically.
//!
//! The default noise substep is moment-exact (quadratic-exponential): it
//! matches the conditional mean and variance of the cell transition and
//! has an atom at 0, so cells (and clusters) die exactly. The literal
//! Euler update with truncation at 0 is retained as `NoiseScheme::EulerClamp`;
//! truncation injects mass (the clamp only ever adds), a bias that grows
//! with dt/dx and is measured by a regression test below.

use crate::diffusion1d::{DiffusionPath, HitMark};
use crate::lattice::{mollifier_field, Grid, LatticeField, MollifierShape};
use crate::rng::{
    normal_cdf, uniform_from_u64, AddressedRng, STREAM_AUX_X_BASE, STREAM_AUX_Y_BASE,
    STREAM_SHARED, STREAM_TARGETS_X, STREAM_TARGETS_Y,
};
use crate::tolerances::{FIELD_TRIM, RECORD_CADENCE_DEFAULT, SUPPORT_THRESHOLD};
use crate::{Error, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

// ---------------------------------------------------------------------------
// Immigration
// ---------------------------------------------------------------------------

/// Draws n i.i.d. targets from ψ(x)dx/ψ(1) by inverse CDF on the
/// grid-interpolated cumulative (piecewise-uniform within cells).
pub fn sample_targets(psi: &LatticeField, n: usize, seed: u64, stream: u64) -> Result<Vec<f64>> {
    psi.validate()?;
    let total = psi.total_mass();
    if total <= 0.0 {
        return Err(Error::rejected("ψ must not vanish identically".to_string()));
    }
    let dx = psi.grid.dx;
    let mut cum = Vec::with_capacity(psi.values.len());
    let mut acc = 0.0;
    for &v in &psi.values {
        acc += v * dx;
        cum.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = uniform_from_u64(rng.next_u64());
        let target_mass = u * total;
        let mut i = cum.partition_point(|&c| c < target_mass);
        // Guard against landing exactly on a boundary of a zero cell.
        while psi.values[i] == 0.0 && i + 1 < cum.len() {
            i += 1;
        }
        let below = if i == 0 { 0.0 } else { cum[i - 1] };
        let frac = ((target_mass - below) / (psi.values[i] * dx)).clamp(0.0, 1.0);
        out.push(psi.grid.x_min + (i as f64 + frac) * dx);
    }
    Ok(out)
}

/// Landing times and targets for both solutions up to a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmigrationSchedule {
    pub eps: f64,
    /// s_i = (i−½)ε for i = 1..
    pub s_times: Vec<f64>,
    /// t_i = iε for i = 1..
    pub t_times: Vec<f64>,
    pub targets_x: Vec<f64>,
    pub targets_y: Vec<f64>,
}

impl ImmigrationSchedule {
    /// Validates ε ∈ (0, 1/(8ψ(1)) ∧ 1] and draws the target sequences
    /// from their dedicated streams.
    pub fn build(psi: &LatticeField, eps: f64, horizon: f64, seed: u64) -> Result<Self> {
        let psi_total = psi.total_mass();
        let eps_cap = (1.0 / (8.0 * psi_total)).min(1.0);
        if !(eps > 0.0 && eps <= eps_cap) {
            return Err(Error::rejected(format!(
                "eps = {eps} outside (0, {eps_cap}] = (0, 1/(8ψ(1)) ∧ 1]"
            )));
        }
        let mut s_times = Vec::new();
        let mut t_times = Vec::new();
        let mut i = 1u64;
        while (i as f64 - 0.5) * eps <= horizon * (1.0 + 1e-12) {
            s_times.push((i as f64 - 0.5) * eps);
            i += 1;
        }
        let mut j = 1u64;
        while j as f64 * eps <= horizon * (1.0 + 1e-12) {
            t_times.push(j as f64 * eps);
            j += 1;
        }
        let targets_x = sample_targets(psi, s_times.len(), seed, STREAM_TARGETS_X)?;
        let targets_y = sample_targets(psi, t_times.len(), seed, STREAM_TARGETS_Y)?;
        Ok(ImmigrationSchedule { eps, s_times, t_times, targets_x, targets_y })
    }

    /// Checks strict interleaving s_1 < t_1 < s_2 < t_2 < … and that all
    /// targets lie inside the support of ψ.
    pub fn validate(&self, psi: &LatticeField) -> Result<()> {
        for k in 0..self.s_times.len() {
            if let Some(&t) = self.t_times.get(k) {
                if !(self.s_times[k] < t) {
                    return Err(Error::rejected(format!("s_{} ≥ t_{}", k + 1, k + 1)));
                }
            }
            if let Some(&s) = self.s_times.get(k + 1) {
                if !(self.t_times[k] < s) {
                    return Err(Error::rejected(format!("t_{} ≥ s_{}", k + 1, k + 2)));
                }
            }
        }
        let (lo, hi) = psi
            .support_interval(0.0)
            .ok_or_else(|| Error::rejected("ψ has empty support".to_string()))?;
        let dx = psi.grid.dx;
        for &x in self.targets_x.iter().chain(&self.targets_y) {
            if !(lo - dx <= x && x <= hi + dx) {
                return Err(Error::rejected(format!("target {x} outside supp ψ")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Noise allocation
// ---------------------------------------------------------------------------

/// Rotates (shared_g, aux…) into per-cluster unit normals ξ with
/// Σ_j √m_j ξ_j = √(Σ m_j)·shared_g exactly and E[ξ ξᵀ] = I.
///
/// ξ = M·(shared_g, aux…) where M is the orthogonal map sending e₁ to
/// u = (√m_j)/√(Σm) (u = e₁ when Σm = 0), built from the Householder
/// reflector v = u + e₁ as M = 2vvᵀ/|v|² − I. Taking v = u + e₁ instead
/// of u − e₁ keeps |v|² = 2(1+u₁) ≥ 2 — the u ≈ e₁ case (one dominant
/// cluster) is exactly where the textbook choice loses all precision.
/// Zero masses receive fresh unit noise that never feeds back into the
/// shared sum; a mass vector with a single positive entry is an exact
/// permutation (that cluster gets shared_g, the others the auxiliaries).
pub fn allocate_noise(masses: &[f64], shared_g: f64, aux: &[f64]) -> Vec<f64> {
    let k = masses.len();
    assert_eq!(aux.len(), k.saturating_sub(1), "need k−1 auxiliary normals");
    if k == 0 {
        return Vec::new();
    }
    let mut xi = Vec::with_capacity(k);
    xi.push(shared_g);
    xi.extend_from_slice(aux);
    if k == 1 {
        return xi;
    }
    let positive = masses.iter().filter(|m| **m > 0.0).count();
    if positive == 0 {
        return xi; // u = e₁: identity
    }
    if positive == 1 {
        // Exact permutation: rotate shared_g into the positive slot.
        let j = masses.iter().position(|m| *m > 0.0).unwrap();
        xi[..=j].rotate_left(1);
        return xi;
    }
    let total: f64 = masses.iter().sum();
    let inv = 1.0 / total.sqrt();
    let u: Vec<f64> = masses.iter().map(|m| m.sqrt() * inv).collect();
    householder_apply(&u, &mut xi);
    xi
}

/// Applies M = 2vvᵀ/|v|² − I, v = u + e₁, in place; M·e₁ = u for unit u.
fn householder_apply(u: &[f64], xi: &mut [f64]) {
    let vv = 2.0 * (1.0 + u[0]);
    // v·ξ with v = u + e₁.
    let mut vdot = (u[0] + 1.0) * xi[0];
    for i in 1..u.len() {
        vdot += u[i] * xi[i];
    }
    let coef = 2.0 * vdot / vv;
    xi[0] = coef * (u[0] + 1.0) - xi[0];
    for i in 1..u.len() {
        xi[i] = coef * u[i] - xi[i];
    }
}

/// How the per-cell noise substep realizes the √c·ξ·√(dt/dx) increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoiseScheme {
    /// Quadratic-exponential substep: matches the conditional mean c and
    /// variance c·dt/dx exactly, with an atom at 0 (the default).
    MomentExact,
    /// Literal Euler update max(0, c + √c·ξ·√(dt/dx)); the truncation
    /// injects mass at rates that grow with dt/dx.
    EulerClamp,
}

/// One moment-exact noise substep on a positive cell value m with driving
/// unit normal ξ and variance ratio ψ = τ/m, τ = dt/dx: a scaled shifted
/// χ²₁ when ψ ≤ 1.5, otherwise an atom at 0 plus an exponential tail; both
/// branches have mean m and variance m·τ.
pub(crate) fn qe_update(m: f64, xi: f64, tau: f64) -> f64 {
    debug_assert!(m > 0.0 && tau > 0.0);
    let psi = tau / m;
    if psi <= 1.5 {
        let i2p = 2.0 / psi;
        let b2 = i2p - 1.0 + i2p.sqrt() * (i2p - 1.0).sqrt();
        let a = m / (1.0 + b2);
        let s = b2.sqrt() + xi;
        a * s * s
    } else {
        let p = (psi - 1.0) / (psi + 1.0);
        let u = normal_cdf(xi);
        if u <= p {
            0.0
        } else {
            let beta = (1.0 - p) / m;
            ((1.0 - p) / (1.0 - u)).ln() / beta
        }
    }
}

fn euler_clamp_update(m: f64, xi: f64, tau: f64) -> f64 {
    (m + m.sqrt() * xi * tau.sqrt()).max(0.0)
}

// ---------------------------------------------------------------------------
// Simulation config and state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClusterKind {
    X,
    Y,
}

impl ClusterKind {
    pub fn letter(&self) -> char {
        match self {
            ClusterKind::X => 'X',
            ClusterKind::Y => 'Y',
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub grid: Grid,
    /// Immigration source ψ (compactly supported, nonnegative, ≠ 0).
    pub psi: LatticeField,
    pub eps: f64,
    pub horizon: f64,
    /// The actual dt divides ε/2 exactly: dt = (ε/2)/⌈(ε/2)/dt_target⌉.
    pub dt_target: f64,
    /// Heat sub-sweeps per noise step: the Laplacian advances in
    /// `heat_subcycles` stencil passes of dt/heat_subcycles each, so the
    /// noise cadence dt may exceed the stencil stability bound as long as
    /// dt/heat_subcycles respects it. 1 recovers the plain splitting.
    pub heat_subcycles: u32,
    pub seed: u64,
    pub scheme: NoiseScheme,
    pub mollifier: MollifierShape,
    /// Record traces every this many steps (births, deaths, level-1
    /// crossings and the final step are always recorded).
    pub record_cadence: u64,
    /// Deterministic runs: skip the noise substep entirely.
    pub zero_noise: bool,
    /// Caps on how many scheduled deposits actually land (None = all).
    pub max_deposits_x: Option<u64>,
    pub max_deposits_y: Option<u64>,
    /// Covariation integrals are accumulated for X-cluster i, Y-cluster j
    /// with i, j < pair_cap.
    pub pair_cap: usize,
    /// Optional spatial window [lo, hi]: per recorded step, each cluster's
    /// mass restricted to the window is traced as well.
    pub spatial_window: Option<(f64, f64)>,
    /// Diagnostic mode: the j-th Y deposit reuses the j-th X target, so the
    /// two systems differ only through their interleaved landing times.
    pub force_equal_targets: bool,
}

impl SimConfig {
    pub fn new(grid: Grid, psi: LatticeField, eps: f64, horizon: f64, seed: u64) -> Self {
        let dt_target = grid.dx * grid.dx / 4.0;
        SimConfig {
            grid,
            psi,
            eps,
            horizon,
            dt_target,
            seed,
            scheme: NoiseScheme::MomentExact,
            mollifier: MollifierShape::Triangle,
            record_cadence: RECORD_CADENCE_DEFAULT as u64,
            zero_noise: false,
            max_deposits_x: None,
            max_deposits_y: None,
            pair_cap: 4,
            spatial_window: None,
            force_equal_targets: false,
        }
    }
}

/// Recorded per-cluster history (at the record cadence plus all events).
#[derive(Debug, Clone, Default)]
pub struct ClusterTrace {
    pub steps: Vec<u64>,
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    /// NaN entries mean "no support above threshold".
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    /// Mass restricted to the configured spatial window (empty when none).
    pub window_masses: Vec<f64>,
}

/// One immigrant cluster and its recorded history.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub kind: ClusterKind,
    pub index: usize,
    pub birth_step: u64,
    pub birth_time: f64,
    pub target: f64,
    pub field: LatticeField,
    pub trace: ClusterTrace,
    pub alive: bool,
    pub death: Option<(u64, f64)>,
    /// First crossing of total mass 1, with linearly interpolated instant.
    pub hit_one: Option<(u64, f64)>,
    /// Current tight support bounds (cell indices), meaningful while alive.
    lo: usize,
    hi: usize,
    /// Mass at the end of the previous step (for crossing detection).
    prev_mass: f64,
}

impl Cluster {
    pub fn mass(&self) -> f64 {
        self.field.grid.dx * self.field.values[self.lo..=self.hi.max(self.lo)].iter().sum::<f64>()
    }
}

/// Covariation integrals over one recording window for cluster pairs
/// (i, j) with i, j < pair_cap, stored row-major as i·pair_cap + j:
/// c = ∫ dx Σ_x √(X^i Y^j)·ρ dt (the scheme's exact conditional mass
/// covariation; ρ = u^X_i u^Y_j is the shared-noise correlation) and
/// b = ∫ dx Σ_x √(X^i Y^j) dt (the domination integrand).
#[derive(Debug, Clone)]
pub struct CovWindow {
    pub t0: f64,
    pub t1: f64,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
}

/// Snapshot types for reporting.
#[derive(Debug, Clone)]
pub struct ClusterSnapshot {
    pub birth_time: f64,
    pub target: f64,
    pub field: LatticeField,
}

#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub clusters: Vec<ClusterSnapshot>,
    pub aggregate: LatticeField,
}

#[derive(Debug, Clone)]
pub struct CoupledState {
    pub time: f64,
    pub x: ClusterSet,
    pub y: ClusterSet,
    pub shared_noise_digest: u64,
}

/// Max-norm decomposition gap: max over cells of
/// |Σ clusters − aggregate| / (1 + aggregate).
pub fn decomposition_gap(cs: &ClusterSet) -> f64 {
    let n = cs.aggregate.values.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let sum: f64 = cs.clusters.iter().map(|c| c.field.values[i]).sum();
        let agg = cs.aggregate.values[i];
        worst = worst.max((sum - agg).abs() / (1.0 + agg));
    }
    worst
}

// ---------------------------------------------------------------------------
// The coupled simulator
// ---------------------------------------------------------------------------

pub struct CoupledSim {
    pub config: SimConfig,
    pub schedule: ImmigrationSchedule,
    /// Steps per ε/2: deposits land exactly at step (2i−1)·n_he (X) and
    /// 2i·n_he (Y).
    pub n_he: u64,
    pub dt: f64,
    pub step: u64,
    pub total_steps: u64,
    pub x_clusters: Vec<Cluster>,
    pub y_clusters: Vec<Cluster>,
    pub cov_windows: Vec<CovWindow>,
    /// Cheap fold of every consumed shared normal, keyed by (step, cell).
    pub shared_noise_digest: u64,
    /// Largest density ever seen in the two boundary cells (leak monitor).
    pub max_boundary_density: f64,
    shared_rng: AddressedRng,
    aux_x: Vec<AddressedRng>,
    aux_y: Vec<AddressedRng>,
    deposited_x: u64,
    deposited_y: u64,
    cov_c_acc: Vec<f64>,
    cov_b_acc: Vec<f64>,
    cov_t0: f64,
}

impl CoupledSim {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.psi.validate()?;
        if config.psi.grid != config.grid {
            return Err(Error::Config("ψ must live on the simulation grid".to_string()));
        }
        if config.record_cadence == 0 || config.pair_cap == 0 {
            return Err(Error::Config("record_cadence and pair_cap must be ≥ 1".to_string()));
        }
        if !(config.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".to_string()));
        }
        let half = config.eps / 2.0;
        if !(config.dt_target > 0.0) {
            return Err(Error::Config("dt_target must be positive".to_string()));
        }
        let n_he = (half / config.dt_target).ceil().max(1.0) as u64;
        let dt = half / n_he as f64;
        let dx = config.grid.dx;
        if dt > dx * dx / 2.0 {
            return Err(Error::Config(format!(
                "dt = {dt} violates the stability bound dx²/2 = {}",
                dx * dx / 2.0
            )));
        }
        let mut schedule =
            ImmigrationSchedule::build(&config.psi, config.eps, config.horizon, config.seed)?;
        if config.force_equal_targets {
            let n = schedule.targets_x.len().min(schedule.targets_y.len());
            schedule.targets_y[..n].copy_from_slice(&schedule.targets_x[..n]);
        }
        schedule.validate(&config.psi)?;
        let total_steps = (config.horizon / dt + 1e-9).floor() as u64;
        let shared_rng = AddressedRng::new(config.seed, STREAM_SHARED);
        let pc = config.pair_cap;
        Ok(CoupledSim {
            config,
            schedule,
            n_he,
            dt,
            step: 0,
            total_steps,
            x_clusters: Vec::new(),
            y_clusters: Vec::new(),
            cov_windows: Vec::new(),
            shared_noise_digest: 0,
            max_boundary_density: 0.0,
            shared_rng,
            aux_x: Vec::new(),
            aux_y: Vec::new(),
            deposited_x: 0,
            deposited_y: 0,
            cov_c_acc: vec![0.0; pc * pc],
            cov_b_acc: vec![0.0; pc * pc],
            cov_t0: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    /// Runs all remaining steps to the horizon.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.total_steps {
            self.advance()?;
        }
        self.flush_cov_window();
        Ok(())
    }

    /// One full step: deposits due at the current time, then heat, then
    /// the shared-noise substep, then bookkeeping and recording.
    pub fn advance(&mut self) -> Result<()> {
        if self.step % self.n_he == 0 && self.step > 0 {
            self.handle_deposits()?;
        }
        self.heat_pass()?;
        if !self.config.zero_noise {
            self.noise_pass();
        }
        self.finish_step()?;
        self.step += 1;
        Ok(())
    }

    fn handle_deposits(&mut self) -> Result<()> {
        let idx = self.step / self.n_he; // landing slot: odd → X, even → Y
        if idx % 2 == 1 {
            let i = (idx + 1) / 2; // X deposit number (1-based)
            let cap_ok = self.config.max_deposits_x.map_or(true, |c| self.deposited_x < c);
            if cap_ok && i as usize <= self.schedule.targets_x.len() {
                let target = self.schedule.targets_x[i as usize - 1];
                self.spawn_cluster(ClusterKind::X, target)?;
                self.deposited_x += 1;
            }
        } else {
            let j = idx / 2; // Y deposit number (1-based)
            let cap_ok = self.config.max_deposits_y.map_or(true, |c| self.deposited_y < c);
            if cap_ok && j as usize <= self.schedule.targets_y.len() {
                let target = self.schedule.targets_y[j as usize - 1];
                self.spawn_cluster(ClusterKind::Y, target)?;
                self.deposited_y += 1;
            }
        }
        Ok(())
    }

    fn spawn_cluster(&mut self, kind: ClusterKind, target: f64) -> Result<()> {
        let mut field =
            mollifier_field(&self.config.grid, target, self.config.eps, self.config.mollifier)?;
        // Renormalize the sampled bump so the deposit carries exactly
        // ψ(1)·ε regardless of quadrature error.
        let deposit_mass = self.config.psi.total_mass() * self.config.eps;
        let discrete = field.total_mass();
        let scale = deposit_mass / discrete;
        for v in &mut field.values {
            *v *= scale;
        }
        let (lo, hi) = field
            .support_interval(0.0)
            .ok_or_else(|| Error::Config("empty deposit".to_string()))?;
        let (lo, hi) = (self.config.grid.cell_of(lo), self.config.grid.cell_of(hi));
        if lo < 2 || hi + 2 >= self.config.grid.n_cells {
            return Err(Error::Config(format!(
                "deposit at {target} violates the 2-cell boundary margin"
            )));
        }
        let step = self.step;
        let time = self.time();
        let window = self.config.spatial_window;
        let list = match kind {
            ClusterKind::X => &mut self.x_clusters,
            ClusterKind::Y => &mut self.y_clusters,
        };
        let index = list.len();
        let mut cluster = Cluster {
            kind,
            index,
            birth_step: step,
            birth_time: time,
            target,
            field,
            trace: ClusterTrace::default(),
            alive: true,
            death: None,
            hit_one: None,
            lo,
            hi,
            prev_mass: deposit_mass,
        };
        record_cluster(&mut cluster, step, time, &window);
        list.push(cluster);
        Ok(())
    }

    fn heat_pass(&mut self) -> Result<()> {
        let dx = self.config.grid.dx;
        let r = 0.5 * self.dt / (dx * dx);
        let n = self.config.grid.n_cells;
        let mut boundary = self.max_boundary_density;
        for cluster in self.x_clusters.iter_mut().chain(self.y_clusters.iter_mut()) {
            if !cluster.alive {
                continue;
            }
            // Widen by one cell (the stencil's reach), clamped to the grid.
            let lo = cluster.lo.saturating_sub(1);
            let hi = (cluster.hi + 1).min(n - 1);
            {
                let v = &mut cluster.field.values;
                // In-place second-difference sweep over [lo, hi] with
                // zero-Dirichlet ghosts, identical arithmetic to the global
                // operator (values outside the span are exact zeros).
                let mut left = 0.0; // v[i−1] before this sweep touched it
                for i in lo..=hi {
                    let cur = v[i];
                    let right = if i + 1 < n { v[i + 1] } else { 0.0 };
                    v[i] = cur + r * (left - 2.0 * cur + right);
                    left = cur;
                }
                if lo == 0 {
                    boundary = boundary.max(v[0]);
                }
                if hi == n - 1 {
                    boundary = boundary.max(v[n - 1]);
                }
            }
            cluster.lo = lo;
            cluster.hi = hi;
            tighten_span(cluster);
        }
        self.max_boundary_density = boundary;
        Ok(())
    }

    fn noise_pass(&mut self) {
        let n = self.config.grid.n_cells;
        let dx = self.config.grid.dx;
        let tau = self.dt / dx;
        let step = self.step;
        let pc = self.config.pair_cap;
        // Active cell range across both populations.
        let mut glo = usize::MAX;
        let mut ghi = 0usize;
        for c in self.x_clusters.iter().chain(self.y_clusters.iter()) {
            if c.alive {
                glo = glo.min(c.lo);
                ghi = ghi.max(c.hi);
            }
        }
        if glo > ghi {
            return;
        }
        let scheme = self.config.scheme;
        let mut alive_x: Vec<(usize, f64)> = Vec::new();
        let mut alive_y: Vec<(usize, f64)> = Vec::new();
        let mut u_buf: Vec<f64> = Vec::new();
        let mut xi_buf: Vec<f64> = Vec::new();
        for cell in glo..=ghi.min(n - 1) {
            alive_x.clear();
            alive_y.clear();
            for c in &self.x_clusters {
                if c.alive && c.lo <= cell && cell <= c.hi && c.field.values[cell] > 0.0 {
                    alive_x.push((c.index, c.field.values[cell]));
                }
            }
            for c in &self.y_clusters {
                if c.alive && c.lo <= cell && cell <= c.hi && c.field.values[cell] > 0.0 {
                    alive_y.push((c.index, c.field.values[cell]));
                }
            }
            if alive_x.is_empty() && alive_y.is_empty() {
                continue;
            }
            let g = self.shared_rng.normal_at(step, cell as u64);
            self.shared_noise_digest ^= crate::rng::splitmix64(
                g.to_bits() ^ ((step << crate::rng::CELL_ADDR_BITS) | cell as u64),
            );
            // Covariation accumulators (pre-noise masses).
            if !alive_x.is_empty() && !alive_y.is_empty() {
                let cx_tot: f64 = alive_x.iter().map(|(_, m)| m).sum();
                let cy_tot: f64 = alive_y.iter().map(|(_, m)| m).sum();
                let norm = (cx_tot * cy_tot).sqrt();
                for &(i, cx) in alive_x.iter().filter(|(i, _)| *i < pc) {
                    for &(j, cy) in alive_y.iter().filter(|(j, _)| *j < pc) {
                        let w = self.dt * dx * (cx * cy).sqrt();
                        self.cov_b_acc[i * pc + j] += w;
                        self.cov_c_acc[i * pc + j] += w * (cx * cy).sqrt() / norm;
                    }
                }
            }
            // X first, then Y with the same g and its own auxiliaries.
            for (pop, aux_base) in [(0usize, STREAM_AUX_X_BASE), (1, STREAM_AUX_Y_BASE)] {
                let alive = if pop == 0 { &alive_x } else { &alive_y };
                let k = alive.len();
                if k == 0 {
                    continue;
                }
                xi_buf.clear();
                xi_buf.push(g);
                if k > 1 {
                    let seed = self.config.seed;
                    let aux_rngs = if pop == 0 { &mut self.aux_x } else { &mut self.aux_y };
                    while aux_rngs.len() < k - 1 {
                        let slot = aux_rngs.len() as u64;
                        aux_rngs.push(AddressedRng::new(seed, aux_base + slot));
                    }
                    for slot in 0..k - 1 {
                        xi_buf.push(aux_rngs[slot].normal_at(step, cell as u64));
                    }
                    let total: f64 = alive.iter().map(|(_, m)| m).sum();
                    let inv = 1.0 / total.sqrt();
                    u_buf.clear();
                    u_buf.extend(alive.iter().map(|(_, m)| m.sqrt() * inv));
                    householder_apply(&u_buf, &mut xi_buf);
                }
                let clusters = if pop == 0 { &mut self.x_clusters } else { &mut self.y_clusters };
                for (slot, &(idx, m)) in alive.iter().enumerate() {
                    let xi = xi_buf[slot];
                    let updated = match scheme {
                        NoiseScheme::MomentExact => qe_update(m, xi, tau),
                        NoiseScheme::EulerClamp => euler_clamp_update(m, xi, tau),
                    };
                    clusters[idx].field.values[cell] = updated;
                }
            }
        }
    }

    fn finish_step(&mut self) -> Result<()> {
        let step = self.step;
        let t_next = (step + 1) as f64 * self.dt;
        let dt = self.dt;
        let cadence_hit = (step + 1) % self.config.record_cadence == 0;
        let final_step = step + 1 == self.total_steps;
        let window = self.config.spatial_window;
        for cluster in self.x_clusters.iter_mut().chain(self.y_clusters.iter_mut()) {
            if !cluster.alive {
                continue;
            }
            // Trim denormal-range residue; both noise branches and the
            // heat sweep preserve exact zeros, so this only removes dust.
            for v in &mut cluster.field.values[cluster.lo..=cluster.hi] {
                if *v != 0.0 && *v < FIELD_TRIM {
                    *v = 0.0;
                }
            }
            tighten_span(cluster);
            let mass = cluster.mass();
            if !mass.is_finite() {
                return Err(Error::Step {
                    step,
                    time: t_next,
                    msg: format!(
                        "non-finite mass in cluster {}{}",
                        cluster.kind.letter(),
                        cluster.index
                    ),
                });
            }
            let mut event = false;
            if cluster.hit_one.is_none() && cluster.prev_mass < 1.0 && mass >= 1.0 {
                let frac = (1.0 - cluster.prev_mass) / (mass - cluster.prev_mass);
                cluster.hit_one = Some((step + 1, t_next - dt + frac.clamp(0.0, 1.0) * dt));
                event = true;
            }
            if mass == 0.0 {
                cluster.alive = false;
                cluster.death = Some((step + 1, t_next));
                event = true;
            }
            cluster.prev_mass = mass;
            if cadence_hit || final_step || event {
                record_cluster(cluster, step + 1, t_next, &window);
            }
        }
        if cadence_hit || final_step {
            self.flush_cov_window();
        }
        Ok(())
    }

    fn flush_cov_window(&mut self) {
        let t1 = (self.step + 1).min(self.total_steps) as f64 * self.dt;
        if self.cov_b_acc.iter().any(|&v| v != 0.0) || self.cov_c_acc.iter().any(|&v| v != 0.0) {
            self.cov_windows.push(CovWindow {
                t0: self.cov_t0,
                t1,
                c: self.cov_c_acc.clone(),
                b: self.cov_b_acc.clone(),
            });
            self.cov_c_acc.iter_mut().for_each(|v| *v = 0.0);
            self.cov_b_acc.iter_mut().for_each(|v| *v = 0.0);
        }
        self.cov_t0 = t1;
    }

    /// Aggregate field of one population, recomputed as the cluster sum.
    pub fn aggregate(&self, kind: ClusterKind) -> LatticeField {
        let list = match kind {
            ClusterKind::X => &self.x_clusters,
            ClusterKind::Y => &self.y_clusters,
        };
        let mut agg = LatticeField::zero(self.config.grid);
        for c in list {
            for (a, v) in agg.values.iter_mut().zip(&c.field.values) {
                *a += v;
            }
        }
        agg
    }

    pub fn cluster_set(&self, kind: ClusterKind) -> ClusterSet {
        let list = match kind {
            ClusterKind::X => &self.x_clusters,
            ClusterKind::Y => &self.y_clusters,
        };
        ClusterSet {
            clusters: list
                .iter()
                .map(|c| ClusterSnapshot {
                    birth_time: c.birth_time,
                    target: c.target,
                    field: c.field.clone(),
                })
                .collect(),
            aggregate: self.aggregate(kind),
        }
    }

    pub fn state(&self) -> CoupledState {
        CoupledState {
            time: self.time(),
            x: self.cluster_set(ClusterKind::X),
            y: self.cluster_set(ClusterKind::Y),
            shared_noise_digest: self.shared_noise_digest,
        }
    }

    /// SHA-256 over every cluster field of both populations (birth order),
    /// a pure function of (config, seed).
    pub fn state_digest(&self) -> [u8; 32] {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        for c in self.x_clusters.iter().chain(self.y_clusters.iter()) {
            c.field.digest_update(&mut h);
        }
        h.finalize().into()
    }

    /// The recorded total-mass path of one cluster with level-0/1 markers.
    pub fn mass_process(&self, kind: ClusterKind, index: usize) -> Result<DiffusionPath> {
        let list = match kind {
            ClusterKind::X => &self.x_clusters,
            ClusterKind::Y => &self.y_clusters,
        };
        let c = list.get(index).ok_or_else(|| {
            Error::MissingRecord(format!("no cluster {}{index}", kind.letter()))
        })?;
        let times = c.trace.times.clone();
        let values = c.trace.masses.clone();
        let hit_zero = c.death.and_then(|(_, t)| {
            times.iter().position(|&tt| tt >= t).map(|index| HitMark { index, time: t })
        });
        let hit_one = c.hit_one.and_then(|(_, t)| {
            times.iter().position(|&tt| tt >= t).map(|index| HitMark { index, time: t })
        });
        Ok(DiffusionPath { times, values, hit_zero, hit_one })
    }

    /// Frees the payload of dead clusters (traces are kept).
    pub fn compact_dead(&mut self) {
        for c in self.x_clusters.iter_mut().chain(self.y_clusters.iter_mut()) {
            if !c.alive {
                c.field.values = Vec::new();
            }
        }
    }
}

fn tighten_span(cluster: &mut Cluster) {
    let v = &cluster.field.values;
    let mut lo = cluster.lo;
    let mut hi = cluster.hi;
    while lo < hi && v[lo] == 0.0 {
        lo += 1;
    }
    while hi > lo && v[hi] == 0.0 {
        hi -= 1;
    }
    cluster.lo = lo;
    cluster.hi = hi;
}

fn record_cluster(cluster: &mut Cluster, step: u64, time: f64, window: &Option<(f64, f64)>) {
    let dx = cluster.field.grid.dx;
    let mass = if cluster.alive { cluster.mass() } else { 0.0 };
    let tr = &mut cluster.trace;
    tr.steps.push(step);
    tr.times.push(time);
    tr.masses.push(mass);
    match cluster.field.support_interval(SUPPORT_THRESHOLD) {
        Some((lo, hi)) => {
            tr.support_lo.push(lo);
            tr.support_hi.push(hi);
        }
        None => {
            tr.support_lo.push(f64::NAN);
            tr.support_hi.push(f64::NAN);
        }
    }
    if let Some((wl, wr)) = window {
        let g = cluster.field.grid;
        let mut wm = 0.0;
        if cluster.alive {
            let lo_cell = g.cell_of(*wl);
            let hi_cell = g.cell_of(*wr);
            for i in lo_cell.max(cluster.lo)..=hi_cell.min(cluster.hi) {
                let x = g.cell_center(i);
                if *wl <= x && x <= *wr {
                    wm += cluster.field.values[i];
                }
            }
        }
        tr.window_masses.push(wm * dx);
    }
}

// ---------------------------------------------------------------------------
// Checks on recorded histories
// ---------------------------------------------------------------------------

/// One trial of the covariation bound: |Σ_w H_w·C_w| ≤ Σ_w |H_w|·B_w.
#[derive(Debug, Clone, Serialize)]
pub struct CovTrial {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovariationReport {
    pub pair: (usize, usize),
    pub trials: Vec<CovTrial>,
    pub all_hold: bool,
}

/// Verifies the mass-covariation domination for X-cluster i vs Y-cluster j
/// using the recorded window integrals, for H ≡ 1 and 10 random bounded H
/// (piecewise constant on windows, values in [−1, 1]).
pub fn covariation_check(
    windows: &[CovWindow],
    pair_cap: usize,
    i: usize,
    j: usize,
    seed: u64,
) -> Result<CovariationReport> {
    if i >= pair_cap || j >= pair_cap {
        return Err(Error::rejected(format!(
            "pair ({i}, {j}) outside the recorded pair_cap = {pair_cap}"
        )));
    }
    let slot = i * pair_cap + j;
    let c: Vec<f64> = windows.iter().map(|w| w.c[slot]).collect();
    let b: Vec<f64> = windows.iter().map(|w| w.b[slot]).collect();
    let mut trials = Vec::new();
    let mut eval = |label: String, h: &[f64]| {
        let lhs: f64 = h.iter().zip(&c).map(|(hh, cc)| hh * cc).sum::<f64>().abs();
        let rhs: f64 = h.iter().zip(&b).map(|(hh, bb)| hh.abs() * bb).sum();
        trials.push(CovTrial { label, lhs, rhs, margin: rhs - lhs });
    };
    eval("H ≡ 1".to_string(), &vec![1.0; windows.len()]);
    let mut rng = crate::rng::scalar_rng(seed, 0xC0BA);
    for trial in 0..10 {
        let h: Vec<f64> =
            (0..windows.len()).map(|_| 2.0 * uniform_from_u64(rng.next_u64()) - 1.0).collect();
        eval(format!("random H #{trial}"), &h);
    }
    let all_hold = trials.iter().all(|t| t.margin >= -1e-12 * (1.0 + t.rhs));
    Ok(CovariationReport { pair: (i, j), trials, all_hold })
}

/// First recorded escape of a cluster's support from the envelope
/// [target − ε^{1/2} − (s−birth)^β, target + ε^{1/2} + (s−birth)^β].
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeEscape {
    pub index: usize,
    pub escape_time: Option<f64>,
}

pub fn support_envelope_check(sim: &CoupledSim, kind: ClusterKind, beta: f64) -> Vec<EnvelopeEscape> {
    let list = match kind {
        ClusterKind::X => &sim.x_clusters,
        ClusterKind::Y => &sim.y_clusters,
    };
    let root_eps = sim.config.eps.sqrt();
    list.iter()
        .map(|c| {
            let mut escape_time = None;
            for (k, &t) in c.trace.times.iter().enumerate() {
                let lo = c.trace.support_lo[k];
                if lo.is_nan() {
                    continue;
                }
                let radius = root_eps + (t - c.birth_time).max(0.0).powf(beta);
                if lo < c.target - radius || c.trace.support_hi[k] > c.target + radius {
                    escape_time = Some(t);
                    break;
                }
            }
            EnvelopeEscape { index: c.index, escape_time }
        })
        .collect()
}

/// Per-cluster mass CSV: step, time, cluster_id, kind, mass, support_lo,
/// support_hi (empty support fields when the cluster has none).
pub fn write_cluster_csv<W: std::io::Write>(w: &mut W, sim: &CoupledSim) -> Result<()> {
    writeln!(w, "step,time,cluster_id,kind,mass,support_lo,support_hi")?;
    for c in sim.x_clusters.iter().chain(sim.y_clusters.iter()) {
        for k in 0..c.trace.steps.len() {
            let (lo, hi) = (c.trace.support_lo[k], c.trace.support_hi[k]);
            let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                c.trace.steps[k],
                c.trace.times[k],
                c.index,
                c.kind.letter(),
                c.trace.masses[k],
                fmt(lo),
                fmt(hi)
            )?;
        }
    }
    Ok(())
}
