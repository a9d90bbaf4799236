//! Spatial substrate: grid, fields, discrete white noise, heat operator,
//! rapidly-decreasing norm, and mollified deposits.
//!
//! The line is truncated to a window [x_min, x_max] split into cells of
//! width dx; a field stores one density value per cell center. The heat
//! semigroup acts by the explicit second-difference update
//!
//! ```text
//! f_i ← f_i + (dt/2)·(f_{i+1} − 2 f_i + f_{i−1})/dx²
//! ```
//!
//! with zero-Dirichlet ghosts, so dx·Σ f changes only through the two
//! boundary cells. Space-time white noise enters per cell as an i.i.d.
//! standard normal scaled by √(dt/dx); with that scaling the pairing
//! dx·Σ φ_k ξ_k √(dt/dx) has variance dt·dx·Σ φ², the discrete analogue of
//! E[W(φ)²] = t·‖φ‖₂². All draws are counter-addressed by
//! (seed, stream, step, cell), so fields and noise are pure functions of
//! the configuration and master seed regardless of execution order.
//!
//! The state-space norm is Σ_{λ=1}^{Λ} min(|f|_λ, 1)·2^{−λ}, with
//! |f|_λ = max |f(x)| e^{λ|x|}; truncating the series at Λ costs at most
//! 2^{−Λ}, which is reported separately rather than folded in.

use crate::rng::AddressedRng;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform cell-centered grid on [x_min, x_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
    pub dx: f64,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(Error::rejected(format!("bad window [{x_min}, {x_max}]")));
        }
        if n_cells == 0 {
            return Err(Error::rejected("n_cells must be positive".to_string()));
        }
        let dx = (x_max - x_min) / n_cells as f64;
        Ok(Grid { x_min, x_max, n_cells, dx })
    }

    /// Center of cell i.
    pub fn cell_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx
    }

    /// Cell containing x, clamped to the window.
    pub fn cell_of(&self, x: f64) -> usize {
        let raw = ((x - self.x_min) / self.dx).floor();
        (raw.max(0.0) as usize).min(self.n_cells - 1)
    }

    /// Whether [lo, hi] sits at least `margin_cells` full cells away from
    /// both window edges.
    pub fn contains_with_margin(&self, lo: f64, hi: f64, margin_cells: usize) -> bool {
        let m = margin_cells as f64 * self.dx;
        lo >= self.x_min + m && hi <= self.x_max - m
    }
}

/// Nonnegative density sampled at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl LatticeField {
    pub fn zero(grid: Grid) -> Self {
        LatticeField { grid, values: vec![0.0; grid.n_cells] }
    }

    /// Total mass dx·Σ values.
    pub fn total_mass(&self) -> f64 {
        self.grid.dx * self.values.iter().sum::<f64>()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, &v| a.max(v.abs()))
    }

    /// Checks the type invariants: matching length, nonnegative entries,
    /// finite mass.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.n_cells {
            return Err(Error::rejected(format!(
                "field has {} values on a {}-cell grid",
                self.values.len(),
                self.grid.n_cells
            )));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::rejected("field values must be finite and ≥ 0".to_string()));
        }
        Ok(())
    }

    /// Smallest closed interval of cell centers where the density exceeds
    /// `threshold`, or None for an (effectively) empty field.
    pub fn support_interval(&self, threshold: f64) -> Option<(f64, f64)> {
        let first = self.values.iter().position(|&v| v > threshold)?;
        let last = self.values.iter().rposition(|&v| v > threshold)?;
        Some((self.grid.cell_center(first), self.grid.cell_center(last)))
    }

    /// Folds the raw little-endian payload into a running digest.
    pub fn digest_update(&self, hasher: &mut sha2::Sha256) {
        use sha2::Digest;
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
    }
}

/// One time-step's worth of per-cell standard normals.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSlice {
    pub stream_id: u64,
    pub step: u64,
    pub gaussians: Vec<f64>,
}

/// Explicit half-Laplacian step with zero-Dirichlet boundary.
pub fn heat_half_step(f: &LatticeField, dt: f64) -> Result<LatticeField> {
    let dx = f.grid.dx;
    if !(dt > 0.0) || dt > dx * dx / 2.0 {
        return Err(Error::Config(format!(
            "explicit heat step unstable: dt = {dt} exceeds dx²/2 = {}",
            dx * dx / 2.0
        )));
    }
    let r = 0.5 * dt / (dx * dx);
    let n = f.values.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let left = if i > 0 { f.values[i - 1] } else { 0.0 };
        let right = if i + 1 < n { f.values[i + 1] } else { 0.0 };
        out[i] = f.values[i] + r * (left - 2.0 * f.values[i] + right);
    }
    Ok(LatticeField { grid: f.grid, values: out })
}

/// The counter-addressed noise row for one step: draw k is a pure function
/// of (seed, stream, step, k).
pub fn white_noise_increment(grid: &Grid, seed: u64, stream: u64, step: u64) -> NoiseSlice {
    let mut rng = AddressedRng::new(seed, stream);
    let mut gaussians = vec![0.0; grid.n_cells];
    rng.fill_normals(step, 0, &mut gaussians);
    NoiseSlice { stream_id: stream, step, gaussians }
}

/// The truncated rapidly-decreasing norm and its series tail bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrapNorm {
    /// Σ_{λ=1}^{Λmax} min(|f|_λ, 1)·2^{−λ}.
    pub value: f64,
    /// 2^{−Λmax}, an upper bound for the discarded λ > Λmax terms.
    pub tail_bound: f64,
}

/// Computes the norm on the grid; `lambda_max ≥ 1`.
pub fn crap_norm(f: &LatticeField, lambda_max: u32) -> CrapNorm {
    assert!(lambda_max >= 1, "lambda_max must be ≥ 1");
    let mut value = 0.0;
    for lambda in 1..=lambda_max {
        let mut sup = 0.0f64;
        for (i, &v) in f.values.iter().enumerate() {
            if v != 0.0 {
                let x = f.grid.cell_center(i);
                sup = sup.max(v.abs() * (lambda as f64 * x.abs()).exp());
            }
        }
        value += sup.min(1.0) / 2f64.powi(lambda as i32);
    }
    CrapNorm { value, tail_bound: 2f64.powi(-(lambda_max as i32)) }
}

/// Admissible deposit shapes: even, bounded by 1, supported in [−1, 1],
/// unit integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MollifierShape {
    /// (1 − |u|)₊ — the default.
    Triangle,
    /// (1 + cos πu)/2 on [−1, 1].
    Cosine,
}

impl MollifierShape {
    pub fn eval(&self, u: f64) -> f64 {
        let a = u.abs();
        if a >= 1.0 {
            return 0.0;
        }
        match self {
            MollifierShape::Triangle => 1.0 - a,
            MollifierShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * u).cos()),
        }
    }
}

/// Unit-mass deposit density z ↦ ε^{−1/2} J((x−z) ε^{−1/2}) sampled on the
/// grid; support has radius ε^{1/2} around the target x. A deposit of
/// total mass m is m·this.
pub fn mollifier_field(grid: &Grid, x: f64, eps: f64, shape: MollifierShape) -> Result<LatticeField> {
    if !(eps > 0.0) {
        return Err(Error::rejected(format!("eps must be positive, got {eps}")));
    }
    let scale = eps.sqrt();
    if scale < 3.0 * grid.dx {
        return Err(Error::Config(format!(
            "mollifier under-resolved: ε^(1/2) = {scale} < 3·dx = {}",
            3.0 * grid.dx
        )));
    }
    let mut field = LatticeField::zero(*grid);
    let lo = grid.cell_of(x - scale);
    let hi = grid.cell_of(x + scale);
    for i in lo..=hi {
        let z = grid.cell_center(i);
        field.values[i] = shape.eval((x - z) / scale) / scale;
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Frame magic: "SBLF" + format version 0001.
pub const FRAME_MAGIC: &[u8; 8] = b"SBLF0001";

/// Writes one binary frame: magic, x_min, x_max, n_cells (u64), step
/// (u64), then n_cells little-endian f64 values.
pub fn write_frame<W: std::io::Write>(w: &mut W, f: &LatticeField, step: u64) -> Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&f.grid.x_min.to_le_bytes())?;
    w.write_all(&f.grid.x_max.to_le_bytes())?;
    w.write_all(&(f.grid.n_cells as u64).to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    for v in &f.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one frame written by [`write_frame`]; returns the field and step.
pub fn read_frame<R: std::io::Read>(r: &mut R) -> Result<(LatticeField, u64)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FRAME_MAGIC {
        return Err(Error::Config(format!("bad frame magic {magic:?}")));
    }
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut b8)?;
        Ok(b8)
    };
    let x_min = f64::from_le_bytes(next(r)?);
    let x_max = f64::from_le_bytes(next(r)?);
    let n_cells = u64::from_le_bytes(next(r)?) as usize;
    let step = u64::from_le_bytes(next(r)?);
    let grid = Grid::new(x_min, x_max, n_cells)?;
    let mut values = vec![0.0; n_cells];
    for v in &mut values {
        *v = f64::from_le_bytes(next(r)?);
    }
    Ok((LatticeField { grid, values }, step))
}

/// Writes the field as CSV rows `x,value`.
pub fn write_csv<W: std::io::Write>(w: &mut W, f: &LatticeField) -> Result<()> {
    writeln!(w, "x,value")?;
    for (i, v) in f.values.iter().enumerate() {
        writeln!(w, "{},{}", f.grid.cell_center(i), v)?;
    }
    Ok(())
}
