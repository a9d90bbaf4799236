//! Batch front door for the coupled-pair laboratory: validator suites, a
//! single coupled simulation, the cluster-decomposition audit, rejection
//! conditioning statistics, and the separation experiment.
//!
//! Subcommands: `validate | simulate | decompose | condition | separation`.
//! Configuration is flat `key = value` text with `#` comments and dotted
//! keys (`params.eta = 1.01`); trailing `KEY=VALUE` arguments and the
//! dedicated flags override the file. Every artifact begins with a header
//! embedding the configuration digest and the seed, so identical inputs
//! produce identical files (the JSON reports differ only in the runtime
//! field, which is excluded from the digest).
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage error, 3 runtime
//! abort. The worker pool is sized by `--workers` (default: logical
//! cores); results are independent of the pool size because replicas are
//! seeded counter-style and merged in index order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use sbmlab::experiments::{
    condition_on_hit, experiment_grid, run_separation, stopping_times, validate_separation_config,
    validator_suite, ExperimentReport, MassSeries, PsiShape, PsiSpec, SeparationConfig,
};
use sbmlab::lattice::write_frame;
use sbmlab::params::{validate_params, Params, Violation};
use sbmlab::rng::replica_seed;
use sbmlab::spde::{decomposition_gap, ClusterKind, CoupledSim, SimConfig};
use sbmlab::stats::{mean_se, quantile_sorted, wilson_interval, Interval};
use sbmlab::tolerances::{
    ABORT_FRACTION_MAX, BOUNDARY_DENSITY_MAX, DECOMP_REL, STAT_SIGMA, VALIDATE_SIGMA,
};

#[derive(Parser)]
#[command(name = "sbmlab", version, about = "coupled super-Brownian-motion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cross-module validator suite (hard checks + statistical
    /// checks at the 4σ gate).
    Validate(CommonArgs),
    /// Run one coupled ε-pair simulation and dump traces (and optionally
    /// field frames).
    Simulate(CommonArgs),
    /// Run one coupled pair and audit the cluster decomposition identity.
    Decompose(CommonArgs),
    /// Replicated single-cluster runs: rejection-conditioning acceptance
    /// statistics and stopping-time quantiles.
    Condition(CommonArgs),
    /// The separation experiment: growth/confinement events over an ε
    /// ladder with the implication audit and the K* sensitivity table.
    Separation(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Simulate(_) => "simulate",
            Command::Decompose(_) => "decompose",
            Command::Condition(_) => "condition",
            Command::Separation(_) => "separation",
        }
    }
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Validate(a)
            | Command::Simulate(a)
            | Command::Decompose(a)
            | Command::Condition(a)
            | Command::Separation(a) => a,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key = value configuration file (# comments allowed).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the `seed` config key).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replica parallelism (default: logical cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Output directory for artifacts (overrides the `out` config key).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Restrict `validate` to one module (params, mathkernel, diffusion1d,
    /// lattice, spde, experiments).
    #[arg(long, value_name = "MODULE")]
    only: Option<String>,
    /// Inline overrides, same keys as the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure classes mapped onto the exit-code contract. Validation
/// failures are not errors: commands report them and return exit 1
/// themselves, after writing their artifacts.
#[derive(Debug)]
enum Failure {
    /// Exit 2: the invocation or configuration is malformed.
    Usage(String),
    /// Exit 3: the run itself aborted.
    Abort(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Abort(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Abort(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn abort<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Abort(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Every key the config file and inline overrides may set.
const KNOWN_KEYS: [&str; 33] = [
    "params.eta",
    "params.alpha",
    "params.l",
    "params.beta",
    "params.beta_prime",
    "params.xi",
    "params.n0",
    "derived.k_star",
    "derived.wp",
    "psi.shape",
    "psi.lo",
    "psi.hi",
    "psi.amplitude",
    "sim.eps",
    "sim.horizon",
    "sim.record_cadence",
    "sim.zero_noise",
    "sim.force_equal_targets",
    "sim.dx_divisor",
    "sim.pair_cap",
    "sim.max_deposits_x",
    "sim.max_deposits_y",
    "sim.frames",
    "sim.frame_cadence",
    "condition.replicas",
    "condition.horizon",
    "separation.r",
    "separation.eps_list",
    "separation.replicas",
    "separation.k_star_grid",
    "separation.allow_unverified_regime",
    "separation.sample_cadence",
    "seed",
];

const MODULES: [&str; 6] = ["params", "mathkernel", "diffusion1d", "lattice", "spde", "experiments"];

/// The merged flat configuration (file, then inline overrides, then flags).
#[derive(Debug)]
struct Cfg(BTreeMap<String, String>);

fn parse_kv(line: &str, origin: &str) -> Result<Option<(String, String)>, Failure> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| usage(format!("{origin}: expected key = value, got `{line}`")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl Cfg {
    fn load(args: &CommonArgs) -> Result<Cfg, Failure> {
        let mut map = BTreeMap::new();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) = parse_kv(line, &format!("{}:{}", path.display(), i + 1))? {
                    map.insert(k, v);
                }
            }
        }
        for ov in &args.overrides {
            match parse_kv(ov, "override")? {
                Some((k, v)) => map.insert(k, v),
                None => return Err(usage(format!("empty override `{ov}`"))),
            };
        }
        if let Some(seed) = args.seed {
            map.insert("seed".into(), seed.to_string());
        }
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) && key != "out" && key != "workers" {
                return Err(usage(format!("unknown configuration key `{key}`")));
            }
        }
        Ok(Cfg(map))
    }

    /// SHA-256 over the sorted `key=value` lines, with the non-semantic
    /// keys (`out`, `workers`) excluded: two configs with equal digests
    /// describe the same computation.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.0 {
            if k != "out" && k != "workers" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, Failure> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                usage(format!("key `{key}`: cannot parse `{v}` as {}", std::any::type_name::<T>()))
            }),
        }
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                usage(format!("key `{key}`: cannot parse `{v}` as {}", std::any::type_name::<T>()))
            }),
        }
    }

    fn require_f64(&self, key: &str) -> Result<f64, Failure> {
        self.opt(key)?.ok_or_else(|| usage(format!("missing required key `{key}`")))
    }

    fn list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, Failure> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        usage(format!("key `{key}`: cannot parse `{}` as a number", s.trim()))
                    })
                })
                .collect(),
        }
    }

    fn params(&self) -> Result<Params, Failure> {
        let d = Params::default();
        Ok(Params {
            eta: self.parse("params.eta", d.eta)?,
            alpha: self.parse("params.alpha", d.alpha)?,
            l: self.parse("params.l", d.l)?,
            beta: self.parse("params.beta", d.beta)?,
            beta_prime: self.parse("params.beta_prime", d.beta_prime)?,
            xi: self.parse("params.xi", d.xi)?,
            n0: self.parse("params.n0", d.n0)?,
        })
    }

    /// Params gate for commands that only consume a valid vector.
    fn valid_params(&self) -> Result<Params, Failure> {
        let p = self.params()?;
        let violations = validate_params(&p).map_err(usage)?;
        match violations.first() {
            None => Ok(p),
            Some(v) => Err(usage(format!("parameter vector inadmissible: {v}"))),
        }
    }

    fn psi(&self) -> Result<PsiSpec, Failure> {
        let shape = match self.raw("psi.shape").unwrap_or("flat") {
            "flat" => PsiShape::Flat,
            "cosine" => PsiShape::Cosine,
            other => return Err(usage(format!("key `psi.shape`: `{other}` is not flat|cosine"))),
        };
        Ok(PsiSpec {
            shape,
            lo: self.parse("psi.lo", 0.0)?,
            hi: self.parse("psi.hi", 1.0)?,
            amplitude: self.parse("psi.amplitude", 1.0)?,
        })
    }

    fn seed(&self) -> Result<u64, Failure> {
        self.parse("seed", 1)
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Leading block of every artifact: which computation produced it.
#[derive(Serialize, Clone)]
struct Header {
    command: String,
    config_digest: String,
    seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(abort)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| abort(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// A CSV writer whose file starts with `#`-comment header lines.
fn csv_file(path: &Path, header: &Header) -> Result<csv::Writer<fs::File>, Failure> {
    let mut f = fs::File::create(path).map_err(|e| abort(format!("{}: {e}", path.display())))?;
    writeln!(f, "# command: {}", header.command).map_err(abort)?;
    writeln!(f, "# config_digest: {}", header.config_digest).map_err(abort)?;
    writeln!(f, "# seed: {}", header.seed).map_err(abort)?;
    Ok(csv::Writer::from_writer(f))
}

fn finish_csv(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(abort)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidateReport<'a> {
    header: &'a Header,
    params: Params,
    violations: Vec<Violation>,
    checks: Vec<sbmlab::experiments::CheckResult>,
    hard_gate: &'static str,
    stat_gate_sigma: f64,
    passed: bool,
}

fn cmd_validate(cfg: &Cfg, header: &Header, out: &Path, only: Option<&str>) -> Result<u8, Failure> {
    let params = cfg.params()?;
    let violations = validate_params(&params).map_err(usage)?;
    if !violations.is_empty() {
        for v in &violations {
            println!("constraint {v}");
        }
        let report = ValidateReport {
            header,
            params,
            violations,
            checks: Vec::new(),
            hard_gate: "exact",
            stat_gate_sigma: VALIDATE_SIGMA,
            passed: false,
        };
        write_json(&out.join("report.json"), &report)?;
        return Ok(1);
    }
    if let Some(m) = only {
        if !MODULES.contains(&m) {
            return Err(usage(format!("--only {m}: expected one of {}", MODULES.join(", "))));
        }
    }
    let checks = validator_suite(only);
    let mut module = "";
    for c in &checks {
        if c.module != module {
            module = c.module;
            println!("── {module} ──");
        }
        println!("{c}");
    }
    let passed = checks.iter().all(|c| c.passed);
    let n_ok = checks.iter().filter(|c| c.passed).count();
    println!("validators: {n_ok}/{} passed", checks.len());

    let path = out.join("summary.csv");
    let mut w = csv_file(&path, header)?;
    w.write_record(["module", "name", "hard", "passed", "sigma", "detail"]).map_err(abort)?;
    for c in &checks {
        w.write_record([
            c.module.to_string(),
            c.name.to_string(),
            c.hard.to_string(),
            c.passed.to_string(),
            fmt_opt(c.sigma),
            c.detail.clone(),
        ])
        .map_err(abort)?;
    }
    finish_csv(w, &path)?;
    let report = ValidateReport {
        header,
        params,
        violations: Vec::new(),
        checks,
        hard_gate: "exact",
        stat_gate_sigma: VALIDATE_SIGMA,
        passed,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(if passed { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// simulate / decompose
// ---------------------------------------------------------------------------

fn build_sim(cfg: &Cfg, horizon_key: (&str, f64), seed: u64) -> Result<CoupledSim, Failure> {
    let p = cfg.valid_params()?;
    let psi = cfg.psi()?;
    let eps = cfg.parse("sim.eps", 0.1)?;
    let horizon = cfg.parse(horizon_key.0, horizon_key.1)?;
    let dx_divisor = cfg.parse("sim.dx_divisor", 8.0)?;
    let grid = experiment_grid(&psi, eps, horizon, p.beta, dx_divisor).map_err(usage)?;
    let field = psi.field(grid).map_err(usage)?;
    let mut sc = SimConfig::new(grid, field, eps, horizon, seed);
    sc.record_cadence = cfg.parse("sim.record_cadence", sc.record_cadence)?;
    sc.zero_noise = cfg.parse("sim.zero_noise", false)?;
    sc.force_equal_targets = cfg.parse("sim.force_equal_targets", false)?;
    sc.pair_cap = cfg.parse("sim.pair_cap", sc.pair_cap)?;
    sc.max_deposits_x = cfg.opt("sim.max_deposits_x")?;
    sc.max_deposits_y = cfg.opt("sim.max_deposits_y")?;
    CoupledSim::new(sc).map_err(usage)
}

#[derive(Serialize)]
struct ClusterReport {
    kind: char,
    index: usize,
    birth_time: f64,
    target: f64,
    alive: bool,
    final_mass: f64,
    hit_one_time: Option<f64>,
    death_time: Option<f64>,
}

fn cluster_reports(sim: &CoupledSim) -> Vec<ClusterReport> {
    sim.x_clusters
        .iter()
        .chain(sim.y_clusters.iter())
        .map(|c| ClusterReport {
            kind: c.kind.letter(),
            index: c.index,
            birth_time: c.birth_time,
            target: c.target,
            alive: c.alive,
            final_mass: if c.alive { *c.trace.masses.last().unwrap_or(&0.0) } else { 0.0 },
            hit_one_time: c.hit_one.map(|(_, t)| t),
            death_time: c.death.map(|(_, t)| t),
        })
        .collect()
}

fn write_trace_csv(path: &Path, header: &Header, sim: &CoupledSim) -> Result<(), Failure> {
    let mut w = csv_file(path, header)?;
    w.write_record(["kind", "index", "step", "time", "mass", "support_lo", "support_hi"])
        .map_err(abort)?;
    for c in sim.x_clusters.iter().chain(sim.y_clusters.iter()) {
        let tr = &c.trace;
        for k in 0..tr.times.len() {
            w.write_record([
                c.kind.letter().to_string(),
                c.index.to_string(),
                tr.steps[k].to_string(),
                tr.times[k].to_string(),
                tr.masses[k].to_string(),
                tr.support_lo[k].to_string(),
                tr.support_hi[k].to_string(),
            ])
            .map_err(abort)?;
        }
    }
    finish_csv(w, path)
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    header: &'a Header,
    eps: f64,
    horizon: f64,
    dt: f64,
    total_steps: u64,
    n_cells: usize,
    dx: f64,
    psi_total: f64,
    state_digest: String,
    max_boundary_density: f64,
    boundary_ok: bool,
    x_cluster_count: usize,
    y_cluster_count: usize,
    clusters: Vec<ClusterReport>,
}

fn cmd_simulate(cfg: &Cfg, header: &Header, out: &Path, seed: u64) -> Result<u8, Failure> {
    let mut sim = build_sim(cfg, ("sim.horizon", 0.3), seed)?;
    let frames_on: bool = cfg.parse("sim.frames", false)?;
    let frame_cadence: u64 = cfg.parse("sim.frame_cadence", 64)?;
    if frame_cadence == 0 {
        return Err(usage("key `sim.frame_cadence`: must be ≥ 1"));
    }
    let frames_dir = out.join("frames");
    let mut frame_index = Vec::new();
    if frames_on {
        fs::create_dir_all(&frames_dir).map_err(abort)?;
    }
    while sim.step < sim.total_steps {
        sim.advance().map_err(abort)?;
        if frames_on && (sim.step % frame_cadence == 0 || sim.step == sim.total_steps) {
            for kind in [ClusterKind::X, ClusterKind::Y] {
                let name = format!("{}_{:08}.sblf", kind.letter(), sim.step);
                let path = frames_dir.join(&name);
                let mut f = fs::File::create(&path).map_err(abort)?;
                write_frame(&mut f, &sim.aggregate(kind), sim.step).map_err(abort)?;
                frame_index.push((sim.step, sim.time(), name));
            }
        }
    }
    if frames_on {
        let path = frames_dir.join("index.csv");
        let mut w = csv_file(&path, header)?;
        w.write_record(["step", "time", "file"]).map_err(abort)?;
        for (step, time, name) in &frame_index {
            w.write_record([step.to_string(), time.to_string(), name.clone()]).map_err(abort)?;
        }
        finish_csv(w, &path)?;
    }
    let digest = sim.state_digest().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let boundary_ok = sim.max_boundary_density <= BOUNDARY_DENSITY_MAX;
    let clusters = cluster_reports(&sim);
    let report = SimulateReport {
        header,
        eps: sim.config.eps,
        horizon: sim.config.horizon,
        dt: sim.dt,
        total_steps: sim.total_steps,
        n_cells: sim.config.grid.n_cells,
        dx: sim.config.grid.dx,
        psi_total: sim.config.psi.total_mass(),
        state_digest: digest,
        max_boundary_density: sim.max_boundary_density,
        boundary_ok,
        x_cluster_count: sim.x_clusters.len(),
        y_cluster_count: sim.y_clusters.len(),
        clusters,
    };
    println!(
        "simulated {} X + {} Y clusters to t = {} ({} steps, digest {})",
        sim.x_clusters.len(),
        sim.y_clusters.len(),
        sim.time(),
        sim.total_steps,
        &report.state_digest[..12],
    );
    write_trace_csv(&out.join("summary.csv"), header, &sim)?;
    write_json(&out.join("report.json"), &report)?;
    if !boundary_ok {
        return Err(abort(format!(
            "boundary density {:.3e} exceeded {BOUNDARY_DENSITY_MAX:.1e}; widen the window",
            sim.max_boundary_density
        )));
    }
    Ok(0)
}

#[derive(Serialize)]
struct DecomposeReport<'a> {
    header: &'a Header,
    eps: f64,
    horizon: f64,
    x_clusters: usize,
    y_clusters: usize,
    gap_x: f64,
    gap_y: f64,
    tolerance: f64,
    passed: bool,
}

fn cmd_decompose(cfg: &Cfg, header: &Header, out: &Path, seed: u64) -> Result<u8, Failure> {
    let mut sim = build_sim(cfg, ("sim.horizon", 0.2), seed)?;
    sim.run().map_err(abort)?;
    let gap_x = decomposition_gap(&sim.cluster_set(ClusterKind::X));
    let gap_y = decomposition_gap(&sim.cluster_set(ClusterKind::Y));
    let passed = gap_x <= DECOMP_REL && gap_y <= DECOMP_REL;
    println!(
        "decomposition gap: X = {gap_x:.3e}, Y = {gap_y:.3e} (tolerance {DECOMP_REL:.1e}) ... {}",
        if passed { "ok" } else { "FAIL" }
    );
    let path = out.join("summary.csv");
    let mut w = csv_file(&path, header)?;
    w.write_record(["kind", "clusters", "gap", "tolerance", "passed"]).map_err(abort)?;
    for (kind, n, gap) in
        [('X', sim.x_clusters.len(), gap_x), ('Y', sim.y_clusters.len(), gap_y)]
    {
        w.write_record([
            kind.to_string(),
            n.to_string(),
            gap.to_string(),
            DECOMP_REL.to_string(),
            (gap <= DECOMP_REL).to_string(),
        ])
        .map_err(abort)?;
    }
    finish_csv(w, &path)?;
    let report = DecomposeReport {
        header,
        eps: sim.config.eps,
        horizon: sim.config.horizon,
        x_clusters: sim.x_clusters.len(),
        y_clusters: sim.y_clusters.len(),
        gap_x,
        gap_y,
        tolerance: DECOMP_REL,
        passed,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(if passed { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// condition
// ---------------------------------------------------------------------------

struct ConditionRow {
    hit: bool,
    stopped_mass: f64,
    tau_gap: f64,
    censored: bool,
}

#[derive(Serialize)]
struct ConditionReport<'a> {
    header: &'a Header,
    replicas: usize,
    aborts: usize,
    eps: f64,
    horizon: f64,
    deposit_mass: f64,
    acceptances: u64,
    acceptance_rate: f64,
    acceptance_ci: Interval,
    estimator_mean: f64,
    estimator_se: f64,
    z: f64,
    gate_sigma: f64,
    tau_quantiles: Vec<(f64, Option<f64>)>,
    tau_censored: u64,
    passed: bool,
}

fn cmd_condition(cfg: &Cfg, header: &Header, out: &Path, seed: u64) -> Result<u8, Failure> {
    let p = cfg.valid_params()?;
    let psi = cfg.psi()?;
    let eps: f64 = cfg.parse("sim.eps", 0.1)?;
    let horizon: f64 = cfg.parse("condition.horizon", 0.4)?;
    let replicas: usize = cfg.parse("condition.replicas", 400)?;
    if replicas == 0 {
        return Err(usage("key `condition.replicas`: must be ≥ 1"));
    }
    let dx_divisor = cfg.parse("sim.dx_divisor", 4.0)?;
    let record_cadence: u64 = cfg.parse("sim.record_cadence", 8)?;
    let grid = experiment_grid(&psi, eps, horizon, p.beta, dx_divisor).map_err(usage)?;
    let field = psi.field(grid).map_err(usage)?;
    let deposit = field.total_mass() * eps;

    let results: Vec<Result<ConditionRow, String>> = (0..replicas)
        .into_par_iter()
        .map(|k| {
            let mut sc =
                SimConfig::new(grid, field.clone(), eps, horizon, replica_seed(seed, k as u64));
            sc.record_cadence = record_cadence;
            sc.pair_cap = 1;
            sc.max_deposits_x = Some(1);
            sc.max_deposits_y = Some(0);
            let mut sim = CoupledSim::new(sc).map_err(|e| e.to_string())?;
            sim.run().map_err(|e| e.to_string())?;
            if sim.max_boundary_density > BOUNDARY_DENSITY_MAX {
                return Err(format!(
                    "boundary density {:.3e} exceeded {BOUNDARY_DENSITY_MAX:.1e}",
                    sim.max_boundary_density
                ));
            }
            let c = &sim.x_clusters[0];
            let stopped_mass = if c.hit_one.is_some() {
                1.0
            } else {
                *c.trace.masses.last().unwrap_or(&0.0)
            };
            let st = stopping_times(&MassSeries::from_cluster(c), &[], deposit, &p, sim.time());
            Ok(ConditionRow {
                hit: condition_on_hit(&sim, 0),
                stopped_mass,
                tau_gap: st.tau - c.birth_time,
                censored: st.censored,
            })
        })
        .collect();

    let mut rows = Vec::new();
    let mut aborts = 0usize;
    let mut first_abort = String::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(msg) => {
                aborts += 1;
                if first_abort.is_empty() {
                    first_abort = msg;
                }
            }
        }
    }
    if aborts as f64 > ABORT_FRACTION_MAX * replicas as f64 {
        return Err(abort(format!(
            "{aborts} of {replicas} replicas aborted (limit {:.0}%): {first_abort}",
            ABORT_FRACTION_MAX * 100.0
        )));
    }
    let masses: Vec<f64> = rows.iter().map(|r| r.stopped_mass).collect();
    let (mean, se) = mean_se(&masses);
    let z = (mean - deposit) / se.max(1e-12);
    let acceptances = rows.iter().filter(|r| r.hit).count() as u64;
    let mut gaps: Vec<f64> = rows
        .iter()
        .filter(|r| r.hit)
        .map(|r| if r.censored { f64::INFINITY } else { r.tau_gap })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let tau_quantiles: Vec<(f64, Option<f64>)> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&q| {
            let v = if gaps.is_empty() { f64::INFINITY } else { quantile_sorted(&gaps, q) };
            (q, v.is_finite().then_some(v))
        })
        .collect();
    let passed = z.abs() <= VALIDATE_SIGMA;
    println!(
        "acceptance estimator {mean:.5} vs deposit ψ(1)ε = {deposit:.5} (z = {z:.2}) ... {}",
        if passed { "ok" } else { "FAIL" }
    );
    println!("raw acceptances: {acceptances}/{} replicas within the horizon", rows.len());

    let path = out.join("summary.csv");
    let mut w = csv_file(&path, header)?;
    w.write_record(["replica", "hit", "stopped_mass", "tau_gap", "censored"]).map_err(abort)?;
    for (k, r) in rows.iter().enumerate() {
        w.write_record([
            k.to_string(),
            r.hit.to_string(),
            r.stopped_mass.to_string(),
            r.tau_gap.to_string(),
            r.censored.to_string(),
        ])
        .map_err(abort)?;
    }
    finish_csv(w, &path)?;
    let report = ConditionReport {
        header,
        replicas,
        aborts,
        eps,
        horizon,
        deposit_mass: deposit,
        acceptances,
        acceptance_rate: acceptances as f64 / rows.len().max(1) as f64,
        acceptance_ci: wilson_interval(acceptances, rows.len() as u64, STAT_SIGMA),
        estimator_mean: mean,
        estimator_se: se,
        z,
        gate_sigma: VALIDATE_SIGMA,
        tau_quantiles,
        tau_censored: rows.iter().filter(|r| r.hit && r.censored).count() as u64,
        passed,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(if passed { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// separation
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SeparationArtifact<'a> {
    header: &'a Header,
    report: &'a ExperimentReport,
}

const PLOT_SCRIPT: &str = r##"set datafile separator ","
set datafile commentschars "#"
set key autotitle columnhead
set terminal svg size 900,600
set logscale x
set xlabel "epsilon"

set output "s_frequency.svg"
set ylabel "S(r) frequency"
set yrange [-0.02:1.02]
plot "summary.csv" using 1:6:7:8 with yerrorbars pt 7 title "S(r) frequency (Wilson band)", \
     "summary.csv" using 1:6 with lines notitle

set output "sup_norm.svg"
set ylabel "sup weighted sup-norm of X - Y"
unset yrange
plot "summary.csv" using 1:14 with linespoints pt 7 title "mean", \
     "summary.csv" using 1:15 with linespoints pt 6 title "median", \
     "summary.csv" using 1:16 with linespoints pt 4 title "max"
"##;

fn cmd_separation(cfg: &Cfg, header: &Header, out: &Path, seed: u64) -> Result<u8, Failure> {
    let params = cfg.params()?;
    let psi = cfg.psi()?;
    let r = cfg.require_f64("separation.r")?;
    let eps_list = cfg.list_f64("separation.eps_list", &[0.08, 0.04])?;
    let replicas: usize = cfg.parse("separation.replicas", 200)?;
    let k_star: f64 = cfg.parse("derived.k_star", 1.0)?;
    let mut scfg = SeparationConfig::new(params, k_star, psi, eps_list, r, replicas, seed);
    if let Some(wp) = cfg.opt("derived.wp")? {
        scfg.wp = wp;
    }
    scfg.sample_cadence = cfg.parse("separation.sample_cadence", scfg.sample_cadence)?;
    scfg.allow_unverified_regime = cfg.parse("separation.allow_unverified_regime", false)?;
    if cfg.raw("separation.k_star_grid").is_some() {
        scfg.k_star_grid = cfg.list_f64("separation.k_star_grid", &[])?;
    }
    validate_separation_config(&scfg).map_err(usage)?;
    let report = run_separation(&scfg).map_err(abort)?;

    for note in &report.regime_notes {
        println!("regime note: {note}");
    }
    println!(
        "r = {r}, Δ(r) = {:.6}, floor ψ(1)r/4 = {:.6}, ε₀(r) = {:.3e}",
        report.delta_r, report.floor, report.eps0_of_r
    );
    for t in &report.tallies {
        println!(
            "ε = {:<8} S(r) {:>4}/{:<5} freq {:.4} ∈ [{:.4}, {:.4}]  implication failures {}  aborts {}",
            t.eps,
            t.s_count,
            t.replicas - t.aborts,
            t.s_freq,
            t.s_lo,
            t.s_hi,
            t.implication_failures,
            t.aborts,
        );
    }
    match report.trend_ok {
        Some(ok) => println!("ε-trend (no collapse at small ε): {}", if ok { "ok" } else { "FAIL" }),
        None => println!("ε-trend: not applicable"),
    }

    let path = out.join("summary.csv");
    let mut w = csv_file(&path, header)?;
    w.write_record([
        "eps",
        "i_max",
        "replicas",
        "aborts",
        "s_count",
        "s_freq",
        "s_lo",
        "s_hi",
        "acceptance_total",
        "implication_checked",
        "implication_failures",
        "delta_half_exceed",
        "gamma_failures",
        "sup_crap_mean",
        "sup_crap_median",
        "sup_crap_max",
        "delta1_hat",
        "delta1_samples",
        "delta1_censored",
    ])
    .map_err(abort)?;
    for t in &report.tallies {
        w.write_record([
            t.eps.to_string(),
            t.i_max.to_string(),
            t.replicas.to_string(),
            t.aborts.to_string(),
            t.s_count.to_string(),
            t.s_freq.to_string(),
            t.s_lo.to_string(),
            t.s_hi.to_string(),
            t.acceptance_total.to_string(),
            t.implication_checked.to_string(),
            t.implication_failures.to_string(),
            t.delta_half_exceed.to_string(),
            t.gamma_failures.to_string(),
            t.sup_crap_mean.to_string(),
            t.sup_crap_median.to_string(),
            t.sup_crap_max.to_string(),
            fmt_opt(t.delta1_hat),
            t.delta1_samples.to_string(),
            t.delta1_censored.to_string(),
        ])
        .map_err(abort)?;
    }
    finish_csv(w, &path)?;

    let gp = out.join("plot.gp");
    let mut script = format!(
        "# command: separation\n# config_digest: {}\n# seed: {}\n{PLOT_SCRIPT}",
        header.config_digest, header.seed
    );
    if !script.ends_with('\n') {
        script.push('\n');
    }
    fs::write(&gp, script).map_err(abort)?;
    println!("wrote {}", gp.display());

    write_json(&out.join("report.json"), &SeparationArtifact { header, report: &report })?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<u8, Failure> {
    let args = cli.command.args();
    let cfg = Cfg::load(args)?;
    let workers = match args.workers {
        Some(w) => Some(w),
        None => cfg.parse("workers", 0usize).map(|w| (w > 0).then_some(w))?,
    };
    if let Some(w) = workers {
        if w == 0 {
            return Err(usage("--workers must be ≥ 1"));
        }
        // Pool size affects scheduling only, never results (replicas are
        // merged in index order); a pre-existing global pool is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let seed = cfg.seed()?;
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => cfg
            .raw("out")
            .map_or_else(|| PathBuf::from("out").join(cli.command.name()), PathBuf::from),
    };
    fs::create_dir_all(&out).map_err(|e| usage(format!("output dir {}: {e}", out.display())))?;
    let header =
        Header { command: cli.command.name().to_string(), config_digest: cfg.digest(), seed };
    match &cli.command {
        Command::Validate(a) => cmd_validate(&cfg, &header, &out, a.only.as_deref()),
        Command::Simulate(_) => cmd_simulate(&cfg, &header, &out, seed),
        Command::Decompose(_) => cmd_decompose(&cfg, &header, &out, seed),
        Command::Condition(_) => cmd_condition(&cfg, &header, &out, seed),
        Command::Separation(_) => cmd_separation(&cfg, &header, &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
