//! Configuration-driven experiment runner.
//!
//! A run is fully determined by a flat TOML configuration plus a seed. Every
//! artifact starts with a header carrying the experiment name, its anchor label,
//! the SHA-256 of the effective configuration and the seed, so identical
//! `(config, seed)` pairs produce byte-identical output directories.
//!
//! Configuration keys (all optional, unknown keys are rejected):
//!
//! | key | type | used by |
//! |-----|------|---------|
//! | `experiment` | string | must match the subcommand when present |
//! | `dim`, `points`, `length` | int, int, float | grid of every experiment |
//! | `beta`, `potential`, `potential_amplitude`, `potential_width` | float, `gaussian`/`constant`/`zero`, float, float | nbody-converge, bounds scaling |
//! | `b0`, `lambda2`, `lambda3`, `reference_factor` | float | nls, duhamel-residual, nbody-converge |
//! | `initial_data`, `packet_width`, `packet_momentum` | `gaussian`/`trig`/`random`, float, float | nls, duhamel-residual, nbody-converge |
//! | `dt`, `total_time`, `record_every`, `steps_per_node` | float, float, int, int | time stepping |
//! | `nodes`, `quadrature`, `anti_factor` | int list, `simpson`/`trapezoid`, float | duhamel-residual, bounds spacetime |
//! | `particles`, `k`, `j` | int list, int, int | nbody-converge, kernels, bounds |
//! | `r`, `n` | int | boardgame, commutation |
//! | `samples`, `rank`, `decay`, `seed` | int, int, float, int | random sampling |
//! | `probes`, `alpha`, `p_exponent`, `p_max`, `p_grid_points`, `kappa`, `ladder`, `window` | mixed | bounds |
//! | `memory_cap`, `enumeration_cap`, `move_budget`, `rank_cap` | int | resource caps |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::board;
use crate::bounds::{self, BoundReport, Mollifier, Observable};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::kernels::{self, Contraction, Quadrature};
use crate::nbody::{self, BasePotential, ConvergenceConfig, PotentialSpec};
use crate::nls::{self, NlsParams, WaveFunction};
use crate::C64;

/// Seed used when neither the command line nor the configuration sets one.
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Nls,
    NbodyConverge,
    DuhamelResidual,
    Boardgame,
    Bounds,
    Commutation,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Nls,
        Experiment::NbodyConverge,
        Experiment::DuhamelResidual,
        Experiment::Boardgame,
        Experiment::Bounds,
        Experiment::Commutation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Nls => "nls",
            Experiment::NbodyConverge => "nbody-converge",
            Experiment::DuhamelResidual => "duhamel-residual",
            Experiment::Boardgame => "boardgame",
            Experiment::Bounds => "bounds",
            Experiment::Commutation => "commutation",
        }
    }

    /// Short label of the result the experiment probes.
    pub fn anchor(&self) -> &'static str {
        match self {
            Experiment::Nls => "quintic NLS reference flow",
            Experiment::NbodyConverge => "finite-N factorization trend",
            Experiment::DuhamelResidual => "integral hierarchy residual of factorized solutions",
            Experiment::Boardgame => "collapse-map classes and echelon count bound",
            Experiment::Bounds => "weighted integral and multilinear bound probes",
            Experiment::Commutation => "reordering identity of contraction integrands",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Experiment::ALL
            .iter()
            .copied()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown experiment '{name}'")))
    }
}

/// Flat run configuration; see the module documentation for the key schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<String>,
    pub dim: Option<usize>,
    pub points: Option<usize>,
    pub length: Option<f64>,
    pub beta: Option<f64>,
    pub potential: Option<String>,
    pub potential_amplitude: Option<f64>,
    pub potential_width: Option<f64>,
    pub b0: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub reference_factor: Option<f64>,
    pub initial_data: Option<String>,
    pub packet_width: Option<f64>,
    pub packet_momentum: Option<f64>,
    pub dt: Option<f64>,
    pub total_time: Option<f64>,
    pub record_every: Option<usize>,
    pub steps_per_node: Option<usize>,
    pub nodes: Option<Vec<usize>>,
    pub quadrature: Option<String>,
    pub anti_factor: Option<f64>,
    pub particles: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub j: Option<usize>,
    pub r: Option<usize>,
    pub n: Option<usize>,
    pub samples: Option<usize>,
    pub rank: Option<usize>,
    pub decay: Option<f64>,
    pub seed: Option<u64>,
    pub probes: Option<Vec<String>>,
    pub alpha: Option<f64>,
    pub p_exponent: Option<f64>,
    pub p_max: Option<f64>,
    pub p_grid_points: Option<usize>,
    pub kappa: Option<f64>,
    pub ladder: Option<Vec<f64>>,
    pub window: Option<f64>,
    pub memory_cap: Option<u64>,
    pub enumeration_cap: Option<u64>,
    pub move_budget: Option<usize>,
    pub rank_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config does not parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form; fields serialize in declaration order.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Collects every violated constraint before failing.
#[derive(Default)]
struct Checks(Vec<String>);

impl Checks {
    fn require(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }

    fn positive_f(&mut self, name: &str, v: f64) {
        self.require(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"));
    }

    fn positive_u(&mut self, name: &str, v: u64) {
        self.require(v > 0, || format!("{name} must be positive, got {v}"));
    }

    fn grid(&mut self, dim: usize, points: usize, length: f64) {
        self.require(dim == 1 || dim == 2, || format!("dim must be 1 or 2, got {dim}"));
        self.require(points >= 4 && points.is_power_of_two(), || {
            format!("points must be a power of two >= 4, got {points}")
        });
        self.positive_f("length", length);
    }

    /// Overlapping validators may report the same violation; each is listed once.
    fn finish(mut self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        self.0.retain(|m| seen.insert(m.clone()));
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.0))
        }
    }
}

/// Artifact header shared by every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Header {
    pub experiment: String,
    pub anchor: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub version: String,
}

impl Header {
    fn csv_prefix(&self) -> String {
        format!(
            "# experiment={}\n# anchor={}\n# config_sha256={}\n# seed={}\n# threads={}\n# version={}\n",
            self.experiment, self.anchor, self.config_sha256, self.seed, self.threads, self.version
        )
    }
}

/// Summary of one run: written artifacts and one-line results for the console.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub header: Header,
    pub artifacts: Vec<PathBuf>,
    pub lines: Vec<String>,
}

struct Sink<'a> {
    dir: &'a Path,
    header: Header,
    artifacts: Vec<PathBuf>,
    lines: Vec<String>,
}

impl Sink<'_> {
    fn csv(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let mut bytes = self.header.csv_prefix().into_bytes();
        bytes.extend_from_slice(body);
        fs::write(&path, bytes)?;
        self.artifacts.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            header: &'a Header,
            data: &'a T,
        }
        let text = serde_json::to_string_pretty(&Doc {
            header: &self.header,
            data,
        })
        .map_err(|e| Error::Serialization(e.to_string()))?;
        let path = self.dir.join(name);
        fs::write(&path, text + "\n")?;
        self.artifacts.push(path);
        Ok(())
    }

    /// Binary dump plus a `.meta.json` sidecar holding the header.
    fn binary(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body)?;
        self.artifacts.push(path);
        let meta = format!("{name}.meta.json");
        self.json(&meta, &name)
    }

    fn say(&mut self, line: String) {
        self.lines.push(line);
    }
}

/// Validates the configuration for `exp` and runs it, writing artifacts into `out`.
pub fn run(exp: Experiment, cfg: &ExperimentConfig, seed: Option<u64>, out: &Path, threads: usize) -> Result<RunOutcome> {
    let mut checks = Checks::default();
    if let Some(name) = &cfg.experiment {
        checks.require(name == exp.name(), || {
            format!("config names experiment '{name}' but '{}' was requested", exp.name())
        });
    }
    checks.require(threads > 0, || "threads must be positive".to_string());
    checks.finish()?;
    let mut effective = cfg.clone();
    effective.experiment = Some(exp.name().to_string());
    effective.seed = Some(seed.or(cfg.seed).unwrap_or(DEFAULT_SEED));
    let seed = effective.seed.unwrap_or(DEFAULT_SEED);
    let header = Header {
        experiment: exp.name().to_string(),
        anchor: exp.anchor().to_string(),
        config_sha256: effective.hash(),
        seed,
        threads,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    // Validate before touching the file system.
    let plan = Plan::resolve(exp, &effective)?;
    fs::create_dir_all(out)?;
    let mut sink = Sink {
        dir: out,
        header,
        artifacts: Vec::new(),
        lines: Vec::new(),
    };
    match plan {
        Plan::Nls(p) => run_nls(&p, &mut sink)?,
        Plan::Nbody(p) => run_nbody(&p, &mut sink)?,
        Plan::Duhamel(p) => run_duhamel(&p, &mut sink)?,
        Plan::Board(p) => run_board(&p, seed, &mut sink)?,
        Plan::Bounds(p) => run_bounds(&p, seed, &mut sink)?,
        Plan::Commutation(p) => run_commutation(&p, seed, &mut sink)?,
    }
    sink.json("config.json", &effective)?;
    Ok(RunOutcome {
        header: sink.header,
        artifacts: sink.artifacts,
        lines: sink.lines,
    })
}

enum Plan {
    Nls(NlsPlan),
    Nbody(ConvergenceConfig),
    Duhamel(DuhamelPlan),
    Board(BoardPlan),
    Bounds(BoundsPlan),
    Commutation(CommutationPlan),
}

impl Plan {
    fn resolve(exp: Experiment, c: &ExperimentConfig) -> Result<Self> {
        Ok(match exp {
            Experiment::Nls => Plan::Nls(NlsPlan::resolve(c)?),
            Experiment::NbodyConverge => Plan::Nbody(resolve_nbody(c)?),
            Experiment::DuhamelResidual => Plan::Duhamel(DuhamelPlan::resolve(c)?),
            Experiment::Boardgame => Plan::Board(BoardPlan::resolve(c)?),
            Experiment::Bounds => Plan::Bounds(BoundsPlan::resolve(c)?),
            Experiment::Commutation => Plan::Commutation(CommutationPlan::resolve(c)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitialData {
    Gaussian { width: f64, momentum: f64 },
    /// `1 + cos x / 2 + 0.3 i sin 2x` in every axis, normalized.
    Trig,
    /// Seeded band-limited random field with spectral decay `(1 + |k|^2)^{-decay/2}`.
    Random { decay: f64 },
}

fn initial_data(c: &ExperimentConfig, default: &str, checks: &mut Checks) -> InitialData {
    match c.initial_data.as_deref().unwrap_or(default) {
        "gaussian" => {
            let width = c.packet_width.unwrap_or(0.8);
            checks.positive_f("packet_width", width);
            InitialData::Gaussian {
                width,
                momentum: c.packet_momentum.unwrap_or(1.0),
            }
        }
        "trig" => InitialData::Trig,
        "random" => InitialData::Random {
            decay: c.decay.unwrap_or(1.0),
        },
        other => {
            checks.0.push(format!("initial_data must be 'gaussian', 'trig' or 'random', got '{other}'"));
            InitialData::Trig
        }
    }
}

fn build_initial(grid: GridSpec, data: InitialData, seed: u64) -> Result<WaveFunction> {
    match data {
        InitialData::Random { decay } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            WaveFunction::new(grid, crate::grid::random_band_limited(&grid, &mut rng, decay))
        }
        InitialData::Gaussian { width, momentum } => Ok(WaveFunction::gaussian(grid, width, [0.0; 2], [momentum, 0.0])),
        InitialData::Trig => {
            let scale = 2.0 * std::f64::consts::PI / grid.length();
            let dim = grid.dim();
            WaveFunction::from_fn(grid, |x| {
                let axis = |v: f64| C64::new(1.0 + 0.5 * (scale * v).cos(), 0.3 * (2.0 * scale * v).sin());
                if dim == 1 {
                    axis(x[0])
                } else {
                    axis(x[0]) * axis(x[1])
                }
            })
            .normalized()
        }
    }
}

struct NlsPlan {
    seed: u64,
    grid: GridSpec,
    params: NlsParams,
    total: f64,
    record_every: usize,
    data: InitialData,
}

impl NlsPlan {
    fn resolve(c: &ExperimentConfig) -> Result<Self> {
        let mut checks = Checks::default();
        let (dim, points, length) = (c.dim.unwrap_or(1), c.points.unwrap_or(64), c.length.unwrap_or(2.0 * std::f64::consts::PI));
        checks.grid(dim, points, length);
        let dt = c.dt.unwrap_or(1e-4);
        let total = c.total_time.unwrap_or(0.1);
        checks.positive_f("dt", dt);
        checks.positive_f("total_time", total);
        let record_every = c.record_every.unwrap_or(100);
        checks.positive_u("record_every", record_every as u64);
        let data = initial_data(c, "gaussian", &mut checks);
        let params = NlsParams {
            b0: c.b0.unwrap_or(if c.lambda3.is_some() || c.lambda2.is_some() { 0.0 } else { 1.0 }),
            lambda2: c.lambda2.unwrap_or(0.0),
            lambda3: c.lambda3.unwrap_or(0.0),
            dt,
        };
        if let Err(Error::Validation(v)) = params.validated() {
            checks.0.extend(v);
        }
        checks.finish()?;
        Ok(NlsPlan {
            seed: c.seed.unwrap_or(DEFAULT_SEED),
            grid: GridSpec::new(dim, points, length)?,
            params,
            total,
            record_every,
            data,
        })
    }
}

fn run_nls(p: &NlsPlan, sink: &mut Sink) -> Result<()> {
    let phi0 = build_initial(p.grid, p.data, p.seed)?;
    let traj = nls::evolve(&phi0, &p.params, p.total, p.record_every)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    sink.csv("trajectory.csv", &csv)?;
    let mut dump = Vec::new();
    traj.last().write_dump(&mut dump)?;
    sink.binary("final_field.bin", &dump)?;
    let m0 = nls::mass(&phi0);
    let e0 = nls::energy(&phi0, &p.params);
    let last = traj.last();
    let mass_drift = (nls::mass(last) - m0).abs();
    let energy_drift = (nls::energy(last, &p.params) - e0).abs();
    let summary = serde_json::json!({
        "mass_initial": m0,
        "mass_drift": mass_drift,
        "energy_initial": e0,
        "energy_drift": energy_drift,
        "final_time": last.t,
        "snapshots": traj.snapshots.len(),
        "final_checksum": last.checksum(),
    });
    sink.say(format!(
        "nls: t={:.6} mass drift {:.3e} energy drift {:.3e}",
        last.t, mass_drift, energy_drift
    ));
    sink.json("summary.json", &summary)
}

fn base_potential(c: &ExperimentConfig, checks: &mut Checks) -> BasePotential {
    let amplitude = c.potential_amplitude.unwrap_or(1.0);
    match c.potential.as_deref().unwrap_or("gaussian") {
        "gaussian" => {
            let width = c.potential_width.unwrap_or(0.5);
            checks.positive_f("potential_width", width);
            checks.require(amplitude.is_finite() && amplitude >= 0.0, || {
                format!("potential_amplitude must be >= 0, got {amplitude}")
            });
            BasePotential::Gaussian { amplitude, width }
        }
        "constant" => BasePotential::Constant { value: amplitude },
        "zero" => BasePotential::Zero,
        other => {
            checks.0.push(format!("potential must be gaussian, constant or zero, got '{other}'"));
            BasePotential::Zero
        }
    }
}

fn resolve_nbody(c: &ExperimentConfig) -> Result<ConvergenceConfig> {
    let mut checks = Checks::default();
    let d = ConvergenceConfig::default();
    let dim = c.dim.unwrap_or(d.dim);
    let points = c.points.unwrap_or(d.requested_points);
    let length = c.length.unwrap_or(d.length);
    checks.grid(dim, points, length);
    let base = base_potential(c, &mut checks);
    let beta = c.beta.unwrap_or(d.beta);
    let limit = PotentialSpec::beta_limit(dim);
    checks.require(beta > 0.0 && beta < limit, || {
        format!("beta must satisfy 0 < beta < 1/(4(d+1)) = {limit} for d={dim}, got {beta}")
    });
    let particles = c.particles.clone().unwrap_or(d.particle_counts.clone());
    let max_n = if dim == 1 { nbody::MAX_PARTICLES_1D } else { nbody::MAX_PARTICLES_2D };
    checks.require(!particles.is_empty(), || "particles must not be empty".to_string());
    for &n in &particles {
        checks.require((3..=max_n).contains(&n), || {
            format!("particle number {n} outside 3..={max_n} for d={dim}")
        });
    }
    let total_time = c.total_time.unwrap_or(d.total_time);
    checks.positive_f("total_time", total_time);
    let max_dt = c.dt.unwrap_or(d.max_dt);
    checks.positive_f("dt", max_dt);
    let k = c.k.unwrap_or(d.k);
    checks.require(k >= 1 && particles.iter().all(|&n| k <= n), || {
        format!("marginal order k={k} must lie in 1..=min(particles)")
    });
    let memory_cap = c.memory_cap.unwrap_or(d.memory_cap);
    checks.positive_u("memory_cap", memory_cap);
    let data = initial_data(c, "gaussian", &mut checks);
    let (packet_width, packet_momentum) = match data {
        InitialData::Gaussian { width, momentum } => (width, momentum),
        InitialData::Trig | InitialData::Random { .. } => {
            checks.0.push("nbody-converge uses Gaussian product data only".to_string());
            (d.packet_width, d.packet_momentum)
        }
    };
    let reference_factor = c.reference_factor.unwrap_or(d.reference_factor);
    checks.require(reference_factor.is_finite() && reference_factor >= 0.0, || {
        format!("reference_factor must be >= 0, got {reference_factor}")
    });
    if let Some(b0) = c.b0 {
        checks.require(b0.is_finite() && b0 >= 0.0, || format!("b0 must be >= 0, got {b0}"));
    }
    checks.finish()?;
    Ok(ConvergenceConfig {
        dim,
        length,
        requested_points: points,
        base,
        beta,
        particle_counts: particles,
        total_time,
        max_dt,
        k,
        memory_cap,
        packet_width,
        packet_momentum,
        reference_factor,
        reference_coupling: c.b0,
    })
}

fn run_nbody(cfg: &ConvergenceConfig, sink: &mut Sink) -> Result<()> {
    let rows = nbody::convergence_experiment(cfg)?;
    let mut csv = Vec::new();
    nbody::write_convergence_csv(&mut csv, &rows)?;
    sink.csv("convergence.csv", &csv)?;
    for r in &rows {
        sink.say(format!(
            "nbody-converge: N={} M={} trace distance {:.6e}",
            r.particles, r.points, r.trace_distance
        ));
    }
    let decreasing = rows.windows(2).all(|w| w[1].trace_distance < w[0].trace_distance);
    sink.json(
        "log.json",
        &serde_json::json!({ "config": cfg, "rows": rows, "strictly_decreasing": decreasing }),
    )
}

struct DuhamelPlan {
    seed: u64,
    grid: GridSpec,
    b0: f64,
    total: f64,
    k: usize,
    nodes: Vec<usize>,
    rule: Quadrature,
    steps_per_node: usize,
    anti_factor: f64,
    data: InitialData,
}

impl DuhamelPlan {
    fn resolve(c: &ExperimentConfig) -> Result<Self> {
        let mut checks = Checks::default();
        let (dim, points, length) = (c.dim.unwrap_or(1), c.points.unwrap_or(32), c.length.unwrap_or(2.0 * std::f64::consts::PI));
        checks.grid(dim, points, length);
        let b0 = c.b0.unwrap_or(1.0);
        checks.require(b0.is_finite() && b0 >= 0.0, || format!("b0 must be >= 0, got {b0}"));
        let total = c.total_time.unwrap_or(0.1);
        checks.positive_f("total_time", total);
        let k = c.k.unwrap_or(1);
        checks.require((1..=3).contains(&k), || format!("k must lie in 1..=3, got {k}"));
        let nodes = c.nodes.clone().unwrap_or(vec![64, 128, 256]);
        checks.require(!nodes.is_empty(), || "nodes must not be empty".to_string());
        let rule = match c.quadrature.as_deref().unwrap_or("simpson") {
            "simpson" => Quadrature::Simpson,
            "trapezoid" => Quadrature::Trapezoid,
            other => {
                checks.0.push(format!("quadrature must be simpson or trapezoid, got '{other}'"));
                Quadrature::Simpson
            }
        };
        for &q in &nodes {
            checks.require(q > 0 && (rule != Quadrature::Simpson || q % 2 == 0), || {
                format!("node count {q} must be positive (and even for Simpson)")
            });
        }
        let max = nodes.iter().copied().max().unwrap_or(1);
        for &q in &nodes {
            checks.require(q > 0 && max % q == 0, || format!("node count {q} must divide the largest count {max}"));
        }
        let steps_per_node = c.steps_per_node.unwrap_or(64);
        checks.positive_u("steps_per_node", steps_per_node as u64);
        let anti_factor = c.anti_factor.unwrap_or(2.0);
        checks.require(anti_factor.is_finite() && anti_factor >= 0.0, || {
            format!("anti_factor must be >= 0, got {anti_factor}")
        });
        let data = initial_data(c, "random", &mut checks);
        checks.finish()?;
        Ok(DuhamelPlan {
            seed: c.seed.unwrap_or(DEFAULT_SEED),
            grid: GridSpec::new(dim, points, length)?,
            b0,
            total,
            k,
            nodes,
            rule,
            steps_per_node,
            anti_factor,
            data,
        })
    }
}

/// Residual rows `(nodes, residual, anti_residual)` of the Duhamel experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuhamelRow {
    pub nodes: usize,
    pub residual: f64,
    pub anti_residual: f64,
    /// `log2(residual at nodes / 2 / residual at nodes)`, absent for the first row.
    pub observed_order: Option<f64>,
}

fn duhamel_rows(p: &DuhamelPlan) -> Result<Vec<DuhamelRow>> {
    let phi0 = build_initial(p.grid, p.data, p.seed)?;
    let max = *p.nodes.iter().max().expect("validated nonempty");
    let dt = p.total / (max * p.steps_per_node) as f64;
    let traj = nls::evolve(&phi0, &NlsParams::quintic(p.b0, dt)?, p.total, 1)?;
    let mut nodes = p.nodes.clone();
    nodes.sort_unstable();
    nodes.dedup();
    let mut rows: Vec<DuhamelRow> = Vec::new();
    for q in nodes {
        let residual = kernels::duhamel_residual(&traj, p.k, p.b0, q, p.rule)?;
        let anti_residual = kernels::duhamel_residual(&traj, p.k, p.anti_factor * p.b0, q, p.rule)?;
        let observed_order = rows
            .last()
            .filter(|prev| prev.nodes * 2 == q)
            .map(|prev| (prev.residual / residual).log2());
        rows.push(DuhamelRow {
            nodes: q,
            residual,
            anti_residual,
            observed_order,
        });
    }
    Ok(rows)
}

fn run_duhamel(p: &DuhamelPlan, sink: &mut Sink) -> Result<()> {
    let rows = duhamel_rows(p)?;
    let mut csv = String::from("nodes,residual,anti_residual,observed_order\n");
    for r in &rows {
        let order = r.observed_order.map(|o| format!("{o:.6}")).unwrap_or_default();
        writeln!(csv, "{},{:.12e},{:.12e},{}", r.nodes, r.residual, r.anti_residual, order).expect("string write");
        sink.say(format!(
            "duhamel-residual: nodes={} residual {:.3e} anti {:.3e}",
            r.nodes, r.residual, r.anti_residual
        ));
    }
    sink.csv("residual.csv", csv.as_bytes())?;
    sink.json("log.json", &rows)
}

struct BoardPlan {
    r: usize,
    n: usize,
    cap: u64,
    budget: usize,
    random_orders: usize,
}

impl BoardPlan {
    fn resolve(c: &ExperimentConfig) -> Result<Self> {
        let mut checks = Checks::default();
        let r = c.r.unwrap_or(2);
        let n = c.n.unwrap_or(3);
        checks.require(r >= 1, || "r must be at least 1".to_string());
        checks.require(n >= 1, || "n must be at least 1".to_string());
        let cap = c.enumeration_cap.unwrap_or(board::DEFAULT_ENUMERATION_CAP);
        checks.positive_u("enumeration_cap", cap);
        let budget = c.move_budget.unwrap_or(board::default_move_budget(r, n));
        checks.positive_u("move_budget", budget as u64);
        let random_orders = c.samples.unwrap_or(10);
        checks.finish()?;
        let count = board::map_count(r, n);
        if count > cap {
            return Err(Error::cap(format!("enumeration of (r={r}, n={n}) collapse maps"), count, cap));
        }
        Ok(BoardPlan {
            r,
            n,
            cap,
            budget,
            random_orders,
        })
    }
}

fn run_board(p: &BoardPlan, seed: u64, sink: &mut Sink) -> Result<()> {
    let classes = board::equivalence_classes(p.r, p.n, p.cap, p.budget)?;
    let echelon = board::count_echelon(p.r, p.n, p.cap)?;
    let summary = board::summarize(p.r, p.n, &classes, echelon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut confluent = true;
    for c in &classes {
        for m in &c.members {
            for _ in 0..p.random_orders {
                let got = board::to_echelon_random(&m.map, p.budget, &mut rng)?;
                confluent &= got.state.map == c.canonical && got.state.sigma() == m.sigma;
            }
        }
    }
    let mut csv = Vec::new();
    board::write_class_csv(&mut csv, &classes, echelon, summary.bound)?;
    sink.csv("classes.csv", &csv)?;
    sink.say(format!(
        "boardgame: r={} n={} maps={} classes={} echelon={} bound={} {}",
        p.r,
        p.n,
        summary.map_count,
        summary.class_count,
        echelon,
        summary.bound,
        if summary.within_bound { "within bound" } else { "BOUND VIOLATED" }
    ));
    sink.json(
        "summary.json",
        &serde_json::json!({
            "summary": summary,
            "random_orders_per_map": p.random_orders,
            "confluent": confluent,
            "partition_count": board::partition_count(p.n)?.to_string(),
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Crucialint,
    CAlpha,
    Trilinear,
    Highreg,
    Km,
    Poincare,
    Scaling,
    Spacetime,
}

impl Probe {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "crucialint" => Probe::Crucialint,
            "c_alpha" => Probe::CAlpha,
            "trilinear" => Probe::Trilinear,
            "highreg" => Probe::Highreg,
            "km" => Probe::Km,
            "poincare" => Probe::Poincare,
            "scaling" => Probe::Scaling,
            "spacetime" => Probe::Spacetime,
            _ => return None,
        })
    }
}

struct BoundsPlan {
    cfg: ExperimentConfig,
    dim: usize,
    probes: Vec<Probe>,
}

impl BoundsPlan {
    fn resolve(c: &ExperimentConfig) -> Result<Self> {
        let mut checks = Checks::default();
        let dim = c.dim.unwrap_or(1);
        checks.require(dim == 1 || dim == 2, || format!("dim must be 1 or 2, got {dim}"));
        let names = c.probes.clone().unwrap_or_else(|| {
            let list: &[&str] = if dim == 1 {
                &["crucialint", "c_alpha", "trilinear", "highreg", "km", "poincare", "scaling"]
            } else {
                &["crucialint", "trilinear", "highreg", "km", "scaling", "spacetime"]
            };
            list.iter().map(|s| s.to_string()).collect()
        });
        let mut probes = Vec::new();
        for name in &names {
            match Probe::parse(name) {
                Some(p) => probes.push(p),
                None => checks.0.push(format!("unknown probe '{name}'")),
            }
        }
        if let Some(a) = c.alpha {
            checks.require(a.is_finite() && a > 0.0, || format!("alpha must be positive, got {a}"));
            if probes.contains(&Probe::Crucialint) || probes.contains(&Probe::CAlpha) {
                checks.require(a <= 1.0, || format!("crucialint needs alpha in (0, 1], got {a}"));
            }
            if probes.contains(&Probe::Km) {
                let ok = if dim == 1 { a <= 1.0 } else { a < 1.0 };
                checks.require(ok, || format!("km needs alpha <= 1 (d = 1) or alpha < 1 (d = 2), got {a}"));
            }
        }
        if let Some(p) = c.p_exponent {
            if probes.contains(&Probe::Trilinear) {
                let ok = if dim == 1 { p > 1.0 } else { p >= 2.0 * dim as f64 };
                checks.require(ok, || format!("trilinear needs p > 1 (d = 1) or p >= 2d (d >= 2), got {p}"));
            }
        }
        if probes.contains(&Probe::Spacetime) {
            checks.require(dim == 2, || "the spacetime probe needs dim = 2".to_string());
        }
        if probes.contains(&Probe::Scaling) {
            if let Some(beta) = c.beta {
                checks.require(beta > 0.0 && beta < PotentialSpec::beta_limit(dim), || {
                    format!("beta must satisfy 0 < beta < {} for d={dim}, got {beta}", PotentialSpec::beta_limit(dim))
                });
            }
        }
        for (name, v) in [("samples", c.samples), ("rank", c.rank), ("p_grid_points", c.p_grid_points)] {
            if let Some(v) = v {
                checks.positive_u(name, v as u64);
            }
        }
        checks.finish()?;
        Ok(BoundsPlan {
            cfg: c.clone(),
            dim,
            probes,
        })
    }

    fn grid(&self, points: usize, length: f64) -> Result<GridSpec> {
        GridSpec::new(self.dim, self.cfg.points.unwrap_or(points), self.cfg.length.unwrap_or(length))
    }
}

fn run_bounds(p: &BoundsPlan, seed: u64, sink: &mut Sink) -> Result<()> {
    let c = &p.cfg;
    let d = p.dim;
    let two_pi = 2.0 * std::f64::consts::PI;
    let samples = c.samples.unwrap_or(100);
    let rank = c.rank.unwrap_or(2);
    let decay = c.decay.unwrap_or(1.0);
    let k = c.k.unwrap_or(1);
    let j = c.j.unwrap_or(1);
    let mut reports: Vec<BoundReport> = Vec::new();
    let mut extras = serde_json::Map::new();
    for probe in &p.probes {
        match probe {
            Probe::Crucialint => {
                let alpha = c.alpha.unwrap_or(0.5);
                let r = bounds::crucialint_ratio_report(alpha, d, c.p_grid_points.unwrap_or(32), c.p_max.unwrap_or(1e3))?;
                reports.push(r);
            }
            Probe::CAlpha => {
                let alpha = c.alpha.unwrap_or(1.0);
                let r = bounds::c_alpha(alpha, d, c.p_grid_points.unwrap_or(8), c.p_max.unwrap_or(100.0))?;
                extras.insert("c_alpha".into(), serde_json::to_value(&r.values).expect("serializable"));
                reports.push(r.report);
            }
            Probe::Trilinear => {
                let pe = c.p_exponent.unwrap_or(if d == 1 { 2.0 } else { 4.0 });
                let grid = p.grid(if d == 1 { 16 } else { 8 }, two_pi)?;
                reports.push(bounds::trilinear_report(grid, pe, samples, decay, seed)?);
            }
            Probe::Highreg => {
                let grid = p.grid(if d == 1 { 16 } else { 8 }, two_pi)?;
                let alpha = c.alpha.unwrap_or(0.75);
                reports.push(bounds::highreg_report(grid, k, j, alpha, rank, samples, decay, seed)?);
            }
            Probe::Km => {
                let grid = p.grid(if d == 1 { 16 } else { 8 }, two_pi)?;
                let alpha = c.alpha.unwrap_or(if d == 1 { 1.0 } else { 0.5 });
                reports.push(bounds::km_report(grid, k, j, alpha, rank, samples, seed)?);
            }
            Probe::Poincare => {
                let grid = p.grid(64, 1.6)?;
                let ladder = c.ladder.clone().unwrap_or(vec![0.4, 0.2, 0.1, 0.05]);
                let kappa = c.kappa.unwrap_or(0.5);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gamma = kernels::random_positive_kernel(grid, 3, rank, decay, &mut rng)?;
                let ladder = bounds::poincare_ladder(Mollifier::Gaussian, &ladder, kappa, &gamma, Observable::Identity)?;
                let mut csv = String::from("a,lhs,bound_factor,lhs_over_a_kappa\n");
                for (v, s) in ladder.values.iter().zip(&ladder.scaled) {
                    writeln!(csv, "{},{:.12e},{:.12e},{:.12e}", v.a, v.lhs, v.bound_factor, s).expect("string write");
                }
                sink.csv("poincare.csv", csv.as_bytes())?;
                sink.say(format!(
                    "bounds poincare: kappa={} variation of lhs/a^kappa {:.3} fitted exponent {:.3}",
                    kappa, ladder.variation, ladder.fitted_exponent
                ));
                extras.insert("poincare".into(), serde_json::to_value(&ladder).expect("serializable"));
            }
            Probe::Scaling => {
                let beta = c.beta.unwrap_or(if d == 1 { 0.1 } else { 0.05 });
                let pe = c.p_exponent.unwrap_or(if d == 1 { 2.0 } else { 4.0 });
                let n_list = c.particles.clone().unwrap_or(vec![10, 100, 1000, 10000]);
                let mut checks = Checks::default();
                let base = base_potential(c, &mut checks);
                checks.finish()?;
                let table = bounds::potential_scaling_check(&base, beta, &n_list, pe, d, c.points.unwrap_or(if d == 1 { 48 } else { 20 }))?;
                let mut csv = String::from("N,norm,ratio\n");
                for r in &table.rows {
                    writeln!(csv, "{},{:.12e},{:.12e}", r.n, r.norm, r.ratio).expect("string write");
                }
                sink.csv("scaling.csv", csv.as_bytes())?;
                sink.say(format!(
                    "bounds scaling: slope {:.6} predicted {:.6}",
                    table.slope, table.predicted
                ));
                extras.insert("scaling".into(), serde_json::to_value(&table).expect("serializable"));
            }
            Probe::Spacetime => {
                let grid = p.grid(16, two_pi)?;
                let alpha = c.alpha.unwrap_or(0.9);
                let window = c.window.unwrap_or(1.0);
                let nodes = c.nodes.as_ref().and_then(|n| n.first().copied()).unwrap_or(32);
                let phi = WaveFunction::gaussian(grid, 0.8, [0.0; 2], [1.0, 0.0]);
                let gamma0 = kernels::factorized(&phi, k + 2)?;
                let probe = bounds::spacetime_bound_probe(&gamma0, j, alpha, window, nodes)?;
                let mut csv = String::from("window,lhs\n");
                for (w, v) in &probe.window_curve {
                    writeln!(csv, "{w},{v:.12e}").expect("string write");
                }
                sink.csv("spacetime.csv", csv.as_bytes())?;
                sink.say(format!(
                    "bounds spacetime: alpha={alpha} lhs {:.6e} rhs {:.6e}",
                    probe.lhs, probe.rhs
                ));
                extras.insert("spacetime".into(), serde_json::to_value(&probe).expect("serializable"));
            }
        }
    }
    for r in &reports {
        sink.say(format!(
            "bounds {}: sup {:.6e} change {:.3e} {}",
            r.name,
            r.observed_sup,
            r.relative_change,
            r.verdict.as_str()
        ));
    }
    let mut csv = Vec::new();
    bounds::write_reports_csv(&mut csv, &reports)?;
    sink.csv("bounds.csv", &csv)?;
    sink.json("bounds.json", &serde_json::json!({ "reports": reports, "tables": extras }))
}

struct CommutationPlan {
    grid: GridSpec,
    r: usize,
    n: usize,
    rank: usize,
    samples: usize,
    decay: f64,
}

impl CommutationPlan {
    fn resolve(c: &ExperimentConfig) -> Result<Self> {
        let mut checks = Checks::default();
        let (dim, points, length) = (c.dim.unwrap_or(1), c.points.unwrap_or(16), c.length.unwrap_or(2.0 * std::f64::consts::PI));
        checks.grid(dim, points, length);
        let r = c.r.unwrap_or(1);
        let n = c.n.unwrap_or(3);
        checks.require(r >= 1 && n >= 1, || "r and n must be at least 1".to_string());
        let rank = c.rank.unwrap_or(3);
        let samples = c.samples.unwrap_or(20);
        checks.positive_u("rank", rank as u64);
        checks.positive_u("samples", samples as u64);
        let order = r + 2 * n;
        let cap = c.rank_cap.unwrap_or(kernels::DEFAULT_RANK_CAP);
        checks.positive_u("rank_cap", cap as u64);
        checks.finish()?;
        let needed = (rank as u64) << (2 * n);
        if needed > cap as u64 {
            return Err(Error::cap("contracted kernel rank", needed, cap as u64));
        }
        let bytes = needed * (2 * order) as u64 * GridSpec::new(dim, points, length)?.len() as u64 * 16;
        let mem = c.memory_cap.unwrap_or(2 << 30);
        if bytes > mem {
            return Err(Error::cap("separable kernel storage", bytes, mem));
        }
        Ok(CommutationPlan {
            grid: GridSpec::new(dim, points, length)?,
            r,
            n,
            rank,
            samples,
            decay: c.decay.unwrap_or(1.0),
        })
    }
}

/// One discrepancy of the commutation experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommutationRow {
    pub kind: &'static str,
    pub sample: usize,
    /// `i,l` for the operator identity, `picks>j` for a board move.
    pub label: String,
    pub part: &'static str,
    pub discrepancy: f64,
}

fn part_name(p: Contraction) -> &'static str {
    match p {
        Contraction::Full => "full",
        Contraction::Plus => "plus",
        Contraction::Minus => "minus",
    }
}

/// Strictly decreasing times with uniform gaps in `[0.05, 1)`.
pub fn random_times<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    let mut t = vec![0.0; count];
    for q in (0..count.saturating_sub(1)).rev() {
        t[q] = t[q + 1] + rng.gen_range(0.05..1.0);
    }
    t
}

/// Operator identity over all admissible `(i, l)` and the integrand identity
/// over every enabled board move.
pub fn commutation_rows(
    grid: GridSpec,
    r: usize,
    n: usize,
    rank: usize,
    samples: usize,
    decay: f64,
    seed: u64,
) -> Result<Vec<CommutationRow>> {
    let order = r + 2 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for s in 0..samples {
        let gamma = kernels::random_kernel(grid, order, rank, decay, &mut rng)?;
        let t = random_times(&mut rng, 4);
        let times = [t[0], t[1], t[2], t[3]];
        for i in 1..=order.saturating_sub(4) {
            for l in 1..=order - 4 {
                if i == l {
                    continue;
                }
                for part in [Contraction::Full, Contraction::Plus] {
                    rows.push(CommutationRow {
                        kind: "operator",
                        sample: s,
                        label: format!("{i},{l}"),
                        part: part_name(part),
                        discrepancy: kernels::commutation_check(&gamma, times, i, l, part)?,
                    });
                }
            }
        }
        let parts: Vec<(C64, Vec<C64>, Vec<C64>)> = (0..rank)
            .map(|_| {
                let f = crate::grid::random_band_limited(&grid, &mut rng, decay);
                (C64::new(rng.gen_range(-1.0..1.0), 0.0), f.clone(), f)
            })
            .collect();
        let gamma0 = kernels::bosonic(grid, order, &parts)?;
        let times = random_times(&mut rng, n + 1);
        for map in board::enumerate_maps(r, n, board::DEFAULT_ENUMERATION_CAP)? {
            for j in map.enabled_moves() {
                let moved = board::acceptable_move(&board::BoardState::initial(map.clone()), j)?;
                let lhs = kernels::duhamel_integrand(&gamma0, r, &map.picks, &times, Contraction::Full)?;
                let mut swapped = times.clone();
                swapped.swap(j, j + 1);
                let rhs = kernels::duhamel_integrand(&gamma0, r, &moved.map.picks, &swapped, Contraction::Full)?;
                let perm = kernels::move_term_perm(rank, n, j, Contraction::Full);
                rows.push(CommutationRow {
                    kind: "move",
                    sample: s,
                    label: format!("{}>{j}", map.label()),
                    part: "full",
                    discrepancy: kernels::matched_distance(&lhs, &rhs, &perm, 0.0)?,
                });
            }
        }
    }
    Ok(rows)
}

fn run_commutation(p: &CommutationPlan, seed: u64, sink: &mut Sink) -> Result<()> {
    let rows = commutation_rows(p.grid, p.r, p.n, p.rank, p.samples, p.decay, seed)?;
    let mut csv = String::from("kind,sample,label,part,discrepancy\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{:.6e}", r.kind, r.sample, r.label, r.part, r.discrepancy).expect("string write");
    }
    sink.csv("commutation.csv", csv.as_bytes())?;
    let worst = |kind: &str| {
        rows.iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.discrepancy)
            .fold(None, |a: Option<f64>, b| Some(a.map_or(b, |a| a.max(b))))
    };
    let count = |kind: &str| rows.iter().filter(|r| r.kind == kind).count();
    for kind in ["operator", "move"] {
        match worst(kind) {
            Some(w) => sink.say(format!(
                "commutation {kind}: {} checks, worst discrepancy {w:.3e}",
                count(kind)
            )),
            None => sink.say(format!(
                "commutation {kind}: no admissible configuration at r={} n={}",
                p.r, p.n
            )),
        }
    }
    sink.json(
        "log.json",
        &serde_json::json!({
            "r": p.r,
            "n": p.n,
            "rank": p.rank,
            "samples": p.samples,
            "worst_operator": worst("operator"),
            "worst_move": worst("move"),
            "rows": rows,
        }),
    )
}

/// Usage text listing every experiment.
pub fn usage() -> String {
    let mut s = String::from(
        "usage: quintic <experiment> [--config <path>] [--out <dir>] [--seed <u64>] [--threads <n>]\n\nexperiments:\n",
    );
    for e in Experiment::ALL {
        writeln!(s, "  {:<18} {}", e.name(), e.anchor()).expect("string write");
    }
    s
}
