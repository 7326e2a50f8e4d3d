//! Exact evolution of a few bosons under the scaled three-body Hamiltonian
//!
//! ```text
//! H_N = sum_j (-Laplacian_j) + N^-2 sum_{i<j<k} V_N(x_i - x_j, x_i - x_k),
//! V_N(x, y) = N^{2 d beta} V(N^beta x, N^beta y)
//! ```
//!
//! on the periodic grid. The state is a dense tensor with `d N` axes of `M`
//! points each (particle 0 slowest). Differences `x_i - x_j` use the minimal
//! image on the torus.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{AxisFft, Direction, GridSpec};
use crate::nls::{self, NlsParams, WaveFunction};
use crate::C64;

/// Largest particle number handled per dimension.
pub const MAX_PARTICLES_1D: usize = 5;
pub const MAX_PARTICLES_2D: usize = 3;

/// Bytes per tensor node: state, potential field and a scratch copy.
const BYTES_PER_NODE: u64 = 16 + 8 + 16;

/// Closed-form base potentials `V(x, y)` on `R^d x R^d`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasePotential {
    /// `A exp(-(|x|^2 + |y|^2 + |x - y|^2) / (2 w^2))`, symmetric under every
    /// relabelling of the three particles.
    Gaussian { amplitude: f64, width: f64 },
    Constant { value: f64 },
    Zero,
}

impl BasePotential {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            BasePotential::Gaussian { amplitude, width } => {
                let q: f64 = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| a * a + b * b + (a - b) * (a - b))
                    .sum();
                amplitude * (-q / (2.0 * width * width)).exp()
            }
            BasePotential::Constant { value } => value,
            BasePotential::Zero => 0.0,
        }
    }

    /// Gradient with respect to `(x, y)`, length `2d`.
    pub fn gradient(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match *self {
            BasePotential::Gaussian { width, .. } => {
                let v = self.eval(x, y);
                let s = -v / (width * width);
                let mut g: Vec<f64> = x.iter().zip(y).map(|(a, b)| s * (2.0 * a - b)).collect();
                g.extend(x.iter().zip(y).map(|(a, b)| s * (2.0 * b - a)));
                g
            }
            _ => vec![0.0; 2 * x.len()],
        }
    }

    /// `int V` over `R^{2d}` in closed form, `None` when not integrable.
    pub fn integral(&self, dim: usize) -> Option<f64> {
        match *self {
            BasePotential::Gaussian { amplitude, width } => Some(
                amplitude
                    * (2.0 * std::f64::consts::PI * width * width / 3f64.sqrt()).powi(dim as i32),
            ),
            BasePotential::Constant { value } if value == 0.0 => Some(0.0),
            BasePotential::Constant { .. } => None,
            BasePotential::Zero => Some(0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BasePotential::Zero)
            || matches!(self, BasePotential::Constant { value } if *value == 0.0)
            || matches!(self, BasePotential::Gaussian { amplitude, .. } if *amplitude == 0.0)
    }
}

/// `b0 = int V` by tensor trapezoid quadrature on a box sized to the decay of `V`.
pub fn coupling_b0(base: &BasePotential, dim: usize) -> Result<f64> {
    match *base {
        BasePotential::Gaussian { width, .. } => {
            let n = 32usize;
            let half = 8.0 * width;
            let h = 2.0 * half / n as f64;
            let axes = 2 * dim;
            let total = n.pow(axes as u32);
            let mut coords = vec![0.0; axes];
            let mut sum = 0.0;
            for flat in 0..total {
                let mut r = flat;
                for c in coords.iter_mut().rev() {
                    *c = -half + (r % n) as f64 * h;
                    r /= n;
                }
                sum += base.eval(&coords[..dim], &coords[dim..]);
            }
            Ok(sum * h.powi(axes as i32))
        }
        _ => base
            .integral(dim)
            .ok_or_else(|| Error::invalid("potential is not integrable over R^{2d}; b0 undefined")),
    }
}

/// Base potential plus the mean-field scaling.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PotentialSpec {
    pub base: BasePotential,
    pub beta: f64,
    pub particles: usize,
    pub dim: usize,
}

impl PotentialSpec {
    pub fn new(base: BasePotential, beta: f64, particles: usize, dim: usize) -> Result<Self> {
        let spec = PotentialSpec {
            base,
            beta,
            particles,
            dim,
        };
        let problems = spec.violations();
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Upper end of the admissible scaling range, `1 / (4 (d + 1))`.
    pub fn beta_limit(dim: usize) -> f64 {
        1.0 / (4.0 * (dim as f64 + 1.0))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dim == 1 || self.dim == 2) {
            v.push(format!("dimension must be 1 or 2, got {}", self.dim));
        }
        let limit = Self::beta_limit(self.dim);
        if !(self.beta > 0.0 && self.beta < limit) {
            v.push(format!(
                "beta must satisfy 0 < beta < 1/(4(d+1)) = {limit:.6}, got {}",
                self.beta
            ));
        }
        let cap = if self.dim == 2 {
            MAX_PARTICLES_2D
        } else {
            MAX_PARTICLES_1D
        };
        if self.particles == 0 || self.particles > cap {
            v.push(format!(
                "particle number must be in 1..={cap} for d={}, got {}",
                self.dim, self.particles
            ));
        }
        if let BasePotential::Gaussian { width, amplitude } = self.base {
            if !(width > 0.0) {
                v.push(format!("gaussian width must be positive, got {width}"));
            }
            if !(amplitude >= 0.0) {
                v.push(format!("potential must be nonnegative, amplitude {amplitude}"));
            }
        }
        if let BasePotential::Constant { value } = self.base {
            if !(value >= 0.0) {
                v.push(format!("potential must be nonnegative, got {value}"));
            }
        }
        v
    }

    pub fn scale(&self) -> f64 {
        (self.particles as f64).powf(self.beta)
    }

    /// `V_N(x, y)`.
    pub fn scaled(&self, x: &[f64], y: &[f64]) -> f64 {
        let s = self.scale();
        let xs: Vec<f64> = x.iter().map(|a| a * s).collect();
        let ys: Vec<f64> = y.iter().map(|a| a * s).collect();
        s.powi(2 * self.dim as i32) * self.base.eval(&xs, &ys)
    }

    pub fn b0(&self) -> Result<f64> {
        coupling_b0(&self.base, self.dim)
    }
}

/// Tensor multi-index helpers for `N` particles on a `d`-dimensional grid.
#[derive(Debug, Clone, Copy)]
struct Layout {
    points: usize,
    dim: usize,
    particles: usize,
}

impl Layout {
    fn nodes_per_particle(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    fn len(&self) -> usize {
        self.nodes_per_particle().pow(self.particles as u32)
    }

    fn axes(&self) -> usize {
        self.dim * self.particles
    }

    /// Splits a flat tensor index into per-particle node indices.
    fn split(&self, mut flat: usize, out: &mut [usize]) {
        let n = self.nodes_per_particle();
        for slot in out.iter_mut().rev() {
            *slot = flat % n;
            flat /= n;
        }
    }

    fn join(&self, nodes: &[usize]) -> usize {
        let n = self.nodes_per_particle();
        nodes.iter().fold(0, |acc, &p| acc * n + p)
    }

    /// Node index of `a - b` (periodic) for two single-particle node indices.
    fn difference(&self, a: usize, b: usize) -> usize {
        let m = self.points;
        match self.dim {
            1 => (a + m - b) % m,
            _ => {
                let (a0, a1) = (a / m, a % m);
                let (b0, b1) = (b / m, b % m);
                ((a0 + m - b0) % m) * m + (a1 + m - b1) % m
            }
        }
    }
}

/// Minimal-image coordinate of an index difference along one axis.
fn minimal_image(delta: usize, grid: &GridSpec) -> f64 {
    let m = grid.points() as i64;
    let mut d = delta as i64;
    if d >= m / 2 {
        d -= m;
    }
    d as f64 * grid.spacing()
}

/// Largest power of two `<= requested` (and `>= 4`) whose tensor fits `cap_bytes`.
pub fn select_points(requested: usize, dim: usize, particles: usize, cap_bytes: u64) -> Result<usize> {
    let mut m = requested.next_power_of_two();
    if m > requested {
        m /= 2;
    }
    while m >= 4 {
        if tensor_bytes(m, dim, particles) <= cap_bytes {
            return Ok(m);
        }
        m /= 2;
    }
    Err(Error::cap(
        format!("{particles}-body tensor in d={dim} with M>=4"),
        tensor_bytes(4, dim, particles),
        cap_bytes,
    ))
}

/// Estimated working-set bytes for an `N`-body run.
pub fn tensor_bytes(points: usize, dim: usize, particles: usize) -> u64 {
    (points as u64)
        .saturating_pow((dim * particles) as u32)
        .saturating_mul(BYTES_PER_NODE)
}

fn check_cap(grid: &GridSpec, particles: usize, cap_bytes: u64) -> Result<()> {
    let need = tensor_bytes(grid.points(), grid.dim(), particles);
    if need > cap_bytes {
        return Err(Error::cap(
            format!(
                "{particles}-body tensor on M={} d={}",
                grid.points(),
                grid.dim()
            ),
            need,
            cap_bytes,
        ));
    }
    Ok(())
}

/// The real potential field `W` on the tensor grid.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub values: Vec<f64>,
    pub particles: usize,
    pub grid: GridSpec,
}

impl PotentialField {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Tabulates `V_N` on every pair of grid differences and checks the symmetry,
/// positivity and decay requirements on the table.
fn difference_table(spec: &PotentialSpec, grid: &GridSpec) -> Result<Vec<f64>> {
    let n = grid.len();
    let d = grid.dim();
    let m = grid.points();
    let coords = |node: usize| -> [f64; 2] {
        match d {
            1 => [minimal_image(node, grid), 0.0],
            _ => [minimal_image(node / m, grid), minimal_image(node % m, grid)],
        }
    };
    let mut table = vec![0.0; n * n];
    for a in 0..n {
        let xa = coords(a);
        for b in 0..n {
            let xb = coords(b);
            table[a * n + b] = spec.scaled(&xa[..d], &xb[..d]);
        }
    }
    let vmax = table.iter().cloned().fold(0.0, f64::max);
    let neg = |a: usize| -> usize {
        match d {
            1 => (m - a) % m,
            _ => ((m - a / m) % m) * m + (m - a % m) % m,
        }
    };
    let layout = Layout {
        points: m,
        dim: d,
        particles: 3,
    };
    let mut problems = Vec::new();
    for a in 0..n {
        for b in 0..n {
            let v = table[a * n + b];
            if v < 0.0 {
                problems.push(format!("V_N is negative ({v}) at sampled pair ({a}, {b})"));
            }
            if v != table[b * n + a] {
                problems.push(format!("V_N(x, y) != V_N(y, x) at sampled pair ({a}, {b})"));
            }
            // Relabelling the centre particle: V(x, y) = V(-x, y - x).
            let w = table[neg(a) * n + layout.difference(b, a)];
            if (v - w).abs() > 1e-12 * vmax.max(f64::MIN_POSITIVE) {
                problems.push(format!(
                    "V_N is not symmetric under particle relabelling at pair ({a}, {b})"
                ));
            }
            if problems.len() > 8 {
                break;
            }
        }
    }
    // Decay check on the boundary of the minimal-image cell.
    let half = m / 2;
    let mut edge = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            let on_edge = match d {
                1 => a == half || b == half,
                _ => a / m == half || a % m == half || b / m == half || b % m == half,
            };
            if on_edge {
                edge = edge.max(table[a * n + b]);
            }
        }
    }
    if vmax > 0.0 && edge >= 1e-8 * vmax {
        problems.push(format!(
            "V_N does not decay within L/2: boundary value {edge:.3e} vs max {vmax:.3e}"
        ));
    }
    if problems.is_empty() {
        Ok(table)
    } else {
        Err(Error::Validation(problems))
    }
}

/// `W = N^-2 sum_{i<j<k} V_N(x_i - x_j, x_i - x_k)` on the tensor grid.
///
/// The potential has been checked to be symmetric under every relabelling of a
/// triple, so `W` is evaluated at the sorted multi-index; this makes the field
/// bit-identical under any permutation of particle slots.
pub fn potential_energy_field(
    spec: &PotentialSpec,
    grid: &GridSpec,
    cap_bytes: u64,
) -> Result<PotentialField> {
    if spec.dim != grid.dim() {
        return Err(Error::invalid("potential and grid dimensions differ"));
    }
    check_cap(grid, spec.particles, cap_bytes)?;
    let layout = Layout {
        points: grid.points(),
        dim: grid.dim(),
        particles: spec.particles,
    };
    let len = layout.len();
    let np = spec.particles;
    if np < 3 || spec.base.is_zero() {
        return Ok(PotentialField {
            values: vec![0.0; len],
            particles: np,
            grid: *grid,
        });
    }
    let table = difference_table(spec, grid)?;
    let n = grid.len();
    let norm = 1.0 / (np * np) as f64;
    let mut nodes = vec![0usize; np];
    let mut values = vec![0.0; len];
    for (flat, w) in values.iter_mut().enumerate() {
        layout.split(flat, &mut nodes);
        nodes.sort_unstable();
        let mut s = 0.0;
        for i in 0..np {
            for j in i + 1..np {
                let dij = layout.difference(nodes[i], nodes[j]);
                for k in j + 1..np {
                    let dik = layout.difference(nodes[i], nodes[k]);
                    s += table[dij * n + dik];
                }
            }
        }
        *w = s * norm;
    }
    Ok(PotentialField {
        values,
        particles: np,
        grid: *grid,
    })
}

/// Symmetric `N`-particle wave function on the tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NBodyState {
    pub grid: GridSpec,
    pub particles: usize,
    pub values: Vec<C64>,
    pub t: f64,
}

impl NBodyState {
    /// `phi (x) phi (x) ... (x) phi`.
    pub fn product(phi: &WaveFunction, particles: usize, cap_bytes: u64) -> Result<Self> {
        if particles == 0 {
            return Err(Error::invalid("need at least one particle"));
        }
        check_cap(&phi.grid, particles, cap_bytes)?;
        let mut values = vec![C64::new(1.0, 0.0)];
        for _ in 0..particles {
            let mut next = Vec::with_capacity(values.len() * phi.values.len());
            for a in &values {
                next.extend(phi.values.iter().map(|b| a * b));
            }
            values = next;
        }
        Ok(NBodyState {
            grid: phi.grid,
            particles,
            values,
            t: phi.t,
        })
    }

    fn layout(&self) -> Layout {
        Layout {
            points: self.grid.points(),
            dim: self.grid.dim(),
            particles: self.particles,
        }
    }

    /// `h^{dN}`.
    pub fn cell_volume(&self) -> f64 {
        self.grid.cell_volume().powi(self.particles as i32)
    }

    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.cell_volume()).sqrt()
    }

    /// State with particle slots `a` and `b` (0-based) exchanged.
    pub fn transposed(&self, a: usize, b: usize) -> Self {
        let layout = self.layout();
        let mut nodes = vec![0usize; self.particles];
        let mut values = vec![C64::new(0.0, 0.0); self.values.len()];
        for (flat, v) in self.values.iter().enumerate() {
            layout.split(flat, &mut nodes);
            nodes.swap(a, b);
            values[layout.join(&nodes)] = *v;
        }
        NBodyState {
            values,
            ..self.clone()
        }
    }

    /// `max_tau || Psi - Psi o tau ||_2` over every transposition.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.particles {
            for b in a + 1..self.particles {
                let t = self.transposed(a, b);
                let s: f64 = self
                    .values
                    .iter()
                    .zip(&t.values)
                    .map(|(x, y)| (x - y).norm_sqr())
                    .sum();
                worst = worst.max((s * self.cell_volume()).sqrt());
            }
        }
        worst
    }

    pub fn write_dump<W: std::io::Write>(&self, w: W) -> Result<()> {
        nls::write_field_dump(
            w,
            self.grid.dim() * self.particles,
            self.grid.points(),
            self.grid.length(),
            self.t,
            &self.values,
        )
    }
}

/// Split-step propagator for `H_N`.
#[derive(Debug, Clone)]
pub struct NBodyStepper {
    fft: AxisFft,
    field: PotentialField,
    dt: f64,
    half_symbol: Vec<C64>,
    full_symbol: Vec<C64>,
    phase: Vec<C64>,
}

impl NBodyStepper {
    pub fn new(field: PotentialField, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let g = field.grid;
        let symbol = |tau: f64| -> Vec<C64> {
            (0..g.points())
                .map(|j| C64::from_polar(1.0, -tau * g.wavenumber(j).powi(2)))
                .collect()
        };
        let phase = field
            .values
            .iter()
            .map(|w| C64::from_polar(1.0, -dt * w))
            .collect();
        Ok(NBodyStepper {
            fft: AxisFft::new(g.points()),
            half_symbol: symbol(0.5 * dt),
            full_symbol: symbol(dt),
            phase,
            field,
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn kinetic(&self, psi: &mut NBodyState, symbol: &[C64]) {
        let axes = psi.grid.dim() * psi.particles;
        for axis in 0..axes {
            self.fft.multiply_axis(&mut psi.values, axes, axis, symbol);
        }
    }

    fn potential(&self, psi: &mut NBodyState) -> Result<()> {
        for (i, (v, p)) in psi.values.iter_mut().zip(&self.phase).enumerate() {
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::numerical(format!("non-finite amplitude at tensor node {i}")));
            }
            *v *= p;
        }
        Ok(())
    }

    fn check(&self, psi: &NBodyState) -> Result<()> {
        if psi.grid != self.field.grid || psi.particles != self.field.particles {
            return Err(Error::invalid("state does not match the potential field"));
        }
        Ok(())
    }

    /// One Strang step: half kinetic, potential phase, half kinetic.
    pub fn step(&self, psi: &mut NBodyState) -> Result<()> {
        self.check(psi)?;
        self.kinetic(psi, &self.half_symbol);
        self.potential(psi)?;
        self.kinetic(psi, &self.half_symbol);
        psi.t += self.dt;
        Ok(())
    }

    /// `steps` Strang steps with adjacent half kinetic flows fused.
    pub fn advance(&self, psi: &mut NBodyState, steps: usize) -> Result<()> {
        self.check(psi)?;
        if steps == 0 {
            return Ok(());
        }
        self.kinetic(psi, &self.half_symbol);
        for n in 0..steps {
            self.potential(psi)?;
            if n + 1 < steps {
                self.kinetic(psi, &self.full_symbol);
            }
        }
        self.kinetic(psi, &self.half_symbol);
        psi.t += steps as f64 * self.dt;
        Ok(())
    }
}

/// One Strang step of the N-body flow.
pub fn step_strang_nbody(psi: &NBodyState, field: &PotentialField, dt: f64) -> Result<NBodyState> {
    let stepper = NBodyStepper::new(field.clone(), dt)?;
    let mut out = psi.clone();
    stepper.step(&mut out)?;
    Ok(out)
}

/// Dense `k`-particle density matrix in the orthonormal node basis.
///
/// Entry `(a, b)` is `h^{dk} gamma(x_a; x_b)`, so the matrix trace is the
/// trace of the operator.
#[derive(Debug, Clone)]
pub struct MarginalDensity {
    pub k: usize,
    pub matrix: DMatrix<C64>,
}

impl MarginalDensity {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let m = &self.matrix;
        let mut worst = 0.0f64;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        hermitian_eigenvalues(self.matrix.clone())
    }

    /// `|phi><phi|^{(x)k}` for a unit-mass wave function.
    pub fn pure_product(phi: &WaveFunction, k: usize) -> Self {
        let w = phi.grid.cell_volume().sqrt();
        let mut vec = vec![C64::new(1.0, 0.0)];
        for _ in 0..k {
            let mut next = Vec::with_capacity(vec.len() * phi.values.len());
            for a in &vec {
                next.extend(phi.values.iter().map(|b| a * b * w));
            }
            vec = next;
        }
        let n = vec.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| vec[i] * vec[j].conj());
        MarginalDensity { k, matrix }
    }

    /// Partial trace over the last particle slot.
    pub fn trace_last(&self, nodes_per_particle: usize) -> Result<Self> {
        if self.k < 2 {
            return Err(Error::invalid("cannot trace out the only particle"));
        }
        let n = nodes_per_particle;
        let rows = self.dim() / n;
        let matrix = DMatrix::from_fn(rows, rows, |a, b| {
            (0..n).map(|c| self.matrix[(a * n + c, b * n + c)]).sum()
        });
        Ok(MarginalDensity {
            k: self.k - 1,
            matrix,
        })
    }
}

fn hermitian_eigenvalues(m: DMatrix<C64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m, 1e-15, 1000 + 100 * n)
        .ok_or_else(|| Error::numerical(format!("Hermitian eigen-solver failed on {n}x{n} matrix")))?;
    Ok(eig.eigenvalues.iter().cloned().collect())
}

/// Partial trace of `|Psi><Psi|` over the last `N - k` particles.
pub fn marginal(psi: &NBodyState, k: usize, cap_bytes: u64) -> Result<MarginalDensity> {
    if k == 0 || k > psi.particles {
        return Err(Error::invalid(format!(
            "marginal order must be in 1..={}, got {k}",
            psi.particles
        )));
    }
    let nodes = psi.grid.len();
    let rows = nodes.pow(k as u32);
    let bytes = (rows as u64).saturating_pow(2).saturating_mul(16);
    if bytes > cap_bytes {
        return Err(Error::cap(format!("order-{k} marginal matrix"), bytes, cap_bytes));
    }
    let cols = psi.values.len() / rows;
    let w = psi.cell_volume();
    let v = &psi.values;
    let mut matrix = DMatrix::from_element(rows, rows, C64::new(0.0, 0.0));
    for a in 0..rows {
        let ra = &v[a * cols..(a + 1) * cols];
        for b in a..rows {
            let rb = &v[b * cols..(b + 1) * cols];
            let s: C64 = ra.iter().zip(rb).map(|(x, y)| x * y.conj()).sum::<C64>() * w;
            matrix[(a, b)] = s;
            matrix[(b, a)] = s.conj();
        }
    }
    Ok(MarginalDensity { k, matrix })
}

/// `Tr |gamma - rho|`, the sum of absolute eigenvalues of the difference.
pub fn trace_distance(gamma: &MarginalDensity, rho: &MarginalDensity) -> Result<f64> {
    if gamma.matrix.shape() != rho.matrix.shape() {
        return Err(Error::invalid(format!(
            "density shapes differ: {:?} vs {:?}",
            gamma.matrix.shape(),
            rho.matrix.shape()
        )));
    }
    let diff = &gamma.matrix - &rho.matrix;
    let ev = hermitian_eigenvalues(diff)?;
    Ok(ev.iter().map(|e| e.abs()).sum())
}

/// `sum_{axes} |k|^2` weights of a frequency-space tensor, applied to `|psi_hat|^2`.
fn frequency_weighted_sum<F: Fn(&[usize]) -> f64>(psi: &NBodyState, weight: F) -> f64 {
    let layout = psi.layout();
    let axes = layout.axes();
    let mut freq = psi.values.clone();
    AxisFft::new(psi.grid.points()).transform(&mut freq, axes, Direction::Forward);
    let m = psi.grid.points();
    let mut digits = vec![0usize; axes];
    let mut s = 0.0;
    for (flat, v) in freq.iter().enumerate() {
        let mut r = flat;
        for dgt in digits.iter_mut().rev() {
            *dgt = r % m;
            r /= m;
        }
        s += weight(&digits) * v.norm_sqr();
    }
    s * psi.cell_volume()
}

/// `<Psi, H_N Psi> / N`.
pub fn energy_per_particle(psi: &NBodyState, field: &PotentialField) -> Result<f64> {
    if field.values.len() != psi.values.len() {
        return Err(Error::invalid("potential field does not match the state"));
    }
    let g = psi.grid;
    let kinetic = frequency_weighted_sum(psi, |digits| {
        digits.iter().map(|&j| g.wavenumber(j).powi(2)).sum()
    });
    let potential: f64 = psi
        .values
        .iter()
        .zip(&field.values)
        .map(|(v, w)| w * v.norm_sqr())
        .sum::<f64>()
        * psi.cell_volume();
    Ok((kinetic + potential) / psi.particles as f64)
}

/// `Tr prod_{j<=k} (1 - Laplacian_j) gamma^(k) = <Psi, prod_{j<=k}(1 - Laplacian_j) Psi>`.
pub fn energy_trace(psi: &NBodyState, k: usize) -> Result<f64> {
    if k == 0 || k > psi.particles {
        return Err(Error::invalid(format!("order {k} out of range")));
    }
    let g = psi.grid;
    let d = g.dim();
    Ok(frequency_weighted_sum(psi, |digits| {
        (0..k)
            .map(|p| {
                1.0 + digits[p * d..(p + 1) * d]
                    .iter()
                    .map(|&j| g.wavenumber(j).powi(2))
                    .sum::<f64>()
            })
            .product()
    }))
}

/// Settings of the finite-N factorization experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceConfig {
    pub dim: usize,
    pub length: f64,
    pub requested_points: usize,
    pub base: BasePotential,
    pub beta: f64,
    pub particle_counts: Vec<usize>,
    pub total_time: f64,
    /// Upper bound on the step; reduced until `dt ||W||_inf < 0.1`.
    pub max_dt: f64,
    pub k: usize,
    pub memory_cap: u64,
    /// Width of the Gaussian initial packet phi_0.
    pub packet_width: f64,
    pub packet_momentum: f64,
    /// Reference NLS coupling as a multiple of `b0 = int V`.
    pub reference_factor: f64,
    /// Explicit reference coupling; overrides `reference_factor * b0`.
    pub reference_coupling: Option<f64>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            dim: 1,
            length: 2.0 * std::f64::consts::PI,
            requested_points: 16,
            base: BasePotential::Gaussian {
                amplitude: 1.0,
                width: 0.5,
            },
            beta: 0.1,
            particle_counts: vec![3, 4, 5],
            total_time: 0.1,
            max_dt: 1e-3,
            k: 1,
            memory_cap: 2 << 30,
            packet_width: 0.8,
            packet_momentum: 1.0,
            reference_factor: 0.5,
            reference_coupling: None,
        }
    }
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConvergenceRow {
    pub particles: usize,
    pub points: usize,
    pub beta: f64,
    pub total_time: f64,
    pub k: usize,
    pub trace_distance: f64,
    pub energy_trace_diag: f64,
    pub dt: f64,
    pub reference_coupling: f64,
    pub energy_per_particle_start: f64,
    pub energy_per_particle_end: f64,
    pub symmetry_defect: f64,
}

/// Runs one particle number of the experiment.
pub fn convergence_row(cfg: &ConvergenceConfig, particles: usize) -> Result<ConvergenceRow> {
    let spec = PotentialSpec::new(cfg.base, cfg.beta, particles, cfg.dim)?;
    if cfg.k == 0 || cfg.k > particles {
        return Err(Error::invalid(format!(
            "marginal order {} exceeds particle number {particles}",
            cfg.k
        )));
    }
    let points = select_points(cfg.requested_points, cfg.dim, particles, cfg.memory_cap)?;
    if points < 8 {
        return Err(Error::cap(
            format!("{particles}-body tensor with M>=8"),
            tensor_bytes(8, cfg.dim, particles),
            cfg.memory_cap,
        ));
    }
    let grid = GridSpec::new(cfg.dim, points, cfg.length)?;
    let field = potential_energy_field(&spec, &grid, cfg.memory_cap)?;
    let wmax = field.max();
    let mut steps = (cfg.total_time / cfg.max_dt).ceil().max(1.0) as usize;
    while cfg.total_time / steps as f64 * wmax >= 0.1 {
        steps += 1;
    }
    let dt = cfg.total_time / steps as f64;

    let phi0 = WaveFunction::gaussian(
        grid,
        cfg.packet_width,
        [0.0; 2],
        [cfg.packet_momentum, 0.0],
    );
    let mut psi = NBodyState::product(&phi0, particles, cfg.memory_cap)?;
    let e_start = energy_per_particle(&psi, &field)?;
    let stepper = NBodyStepper::new(field.clone(), dt)?;
    stepper.advance(&mut psi, steps)?;
    let e_end = energy_per_particle(&psi, &field)?;

    let coupling = match cfg.reference_coupling {
        Some(c) => c,
        None if spec.base.is_zero() => 0.0,
        None => cfg.reference_factor * spec.b0()?,
    };
    let params = NlsParams::quintic(coupling, dt)?;
    let reference = nls::evolve(&phi0, &params, cfg.total_time, steps)?;
    let rho = MarginalDensity::pure_product(reference.last(), cfg.k);
    let gamma = marginal(&psi, cfg.k, cfg.memory_cap)?;
    let distance = trace_distance(&gamma, &rho)?;
    Ok(ConvergenceRow {
        particles,
        points,
        beta: cfg.beta,
        total_time: cfg.total_time,
        k: cfg.k,
        trace_distance: distance,
        energy_trace_diag: energy_trace(&psi, cfg.k)?,
        dt,
        reference_coupling: coupling,
        energy_per_particle_start: e_start,
        energy_per_particle_end: e_end,
        symmetry_defect: psi.symmetry_defect(),
    })
}

/// One row per particle number.
pub fn convergence_experiment(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    cfg.particle_counts
        .iter()
        .map(|&n| convergence_row(cfg, n))
        .collect()
}

/// CSV with columns `N,M,beta,T,k,trace_distance,energy_trace_diag`.
pub fn write_convergence_csv<W: std::io::Write>(mut w: W, rows: &[ConvergenceRow]) -> Result<()> {
    writeln!(w, "N,M,beta,T,k,trace_distance,energy_trace_diag")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.12e},{:.12e}",
            r.particles, r.points, r.beta, r.total_time, r.k, r.trace_distance, r.energy_trace_diag
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const CAP: u64 = 1 << 30;

    fn grid(m: usize) -> GridSpec {
        GridSpec::new(1, m, 2.0 * PI).unwrap()
    }

    fn gauss() -> BasePotential {
        BasePotential::Gaussian {
            amplitude: 1.0,
            width: 0.5,
        }
    }

    #[test]
    fn beta_window_enforced() {
        assert!(PotentialSpec::new(gauss(), 0.3, 3, 1).is_err());
        assert!(PotentialSpec::new(gauss(), 0.125, 3, 1).is_err());
        assert!(PotentialSpec::new(gauss(), 0.0, 3, 1).is_err());
        assert!(PotentialSpec::new(gauss(), 0.1, 3, 1).is_ok());
        assert!(PotentialSpec::new(gauss(), 0.1, 6, 1).is_err());
        assert!(PotentialSpec::new(gauss(), 0.05, 4, 2).is_err());
    }

    #[test]
    fn b0_quadrature_matches_closed_form() {
        for d in [1, 2] {
            let q = coupling_b0(&gauss(), d).unwrap();
            let exact = gauss().integral(d).unwrap();
            assert!((q - exact).abs() < 1e-10 * exact, "d={d}: {q} vs {exact}");
        }
    }

    #[test]
    fn two_particles_have_no_potential() {
        let spec = PotentialSpec::new(gauss(), 0.1, 2, 1).unwrap();
        let f = potential_energy_field(&spec, &grid(8), CAP).unwrap();
        assert!(f.values.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn constant_potential_field() {
        let c = 0.7;
        let spec = PotentialSpec::new(BasePotential::Constant { value: c }, 0.1, 3, 1);
        // A constant does not decay, so the full validation rejects it ...
        let spec = spec.unwrap();
        assert!(potential_energy_field(&spec, &grid(8), CAP).is_err());
        // ... while the table-free formula for one triple is c N^{2 d beta} / N^2.
        let expect = c * 3f64.powf(0.2) / 9.0;
        assert!((spec.scaled(&[0.3], &[-1.0]) / 9.0 - expect).abs() < 1e-15);
    }

    #[test]
    fn field_is_permutation_invariant_bitwise() {
        let spec = PotentialSpec::new(gauss(), 0.1, 4, 1).unwrap();
        let g = grid(8);
        let f = potential_energy_field(&spec, &g, CAP).unwrap();
        assert!(f.values.iter().all(|&w| w >= 0.0));
        let as_state = NBodyState {
            grid: g,
            particles: 4,
            values: f.values.iter().map(|&w| C64::new(w, 0.0)).collect(),
            t: 0.0,
        };
        for (a, b) in [(0, 1), (1, 3), (0, 3)] {
            assert_eq!(as_state.transposed(a, b).values, as_state.values);
        }
    }

    #[test]
    fn three_body_field_matches_direct_sum() {
        let spec = PotentialSpec::new(gauss(), 0.1, 3, 1).unwrap();
        let g = grid(8);
        let f = potential_energy_field(&spec, &g, CAP).unwrap();
        let m = 8;
        let mi = |a: usize, b: usize| minimal_image((a + m - b) % m, &g);
        for &(i, j, k) in &[(0usize, 1usize, 2usize), (3, 5, 7), (6, 2, 2)] {
            let direct = spec.scaled(&[mi(i, j)], &[mi(i, k)]) / 9.0;
            let w = f.values[(i * m + j) * m + k];
            assert!((w - direct).abs() < 1e-14, "{w} vs {direct}");
        }
    }

    #[test]
    fn asymmetric_potential_is_rejected() {
        // Width too large to decay within L/2.
        let wide = BasePotential::Gaussian {
            amplitude: 1.0,
            width: 3.0,
        };
        let spec = PotentialSpec::new(wide, 0.1, 3, 1).unwrap();
        match potential_energy_field(&spec, &grid(8), CAP) {
            Err(Error::Validation(v)) => assert!(v.iter().any(|s| s.contains("decay"))),
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn memory_cap_reports_bytes() {
        let spec = PotentialSpec::new(gauss(), 0.1, 5, 1).unwrap();
        match potential_energy_field(&spec, &grid(16), 1 << 20) {
            Err(Error::ResourceCap { required, allowed, .. }) => {
                assert_eq!(required, 16u64.pow(5) * BYTES_PER_NODE);
                assert_eq!(allowed, 1 << 20);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
        assert_eq!(select_points(16, 1, 5, 2 << 20).unwrap(), 8);
        assert_eq!(select_points(16, 1, 5, 1 << 30).unwrap(), 16);
        assert_eq!(select_points(12, 1, 2, 1 << 30).unwrap(), 8);
    }

    #[test]
    fn free_product_stays_product() {
        let g = grid(8);
        let phi = WaveFunction::gaussian(g, 0.8, [0.2, 0.0], [1.0, 0.0]);
        let psi = NBodyState::product(&phi, 3, CAP).unwrap();
        let spec = PotentialSpec::new(BasePotential::Zero, 0.1, 3, 1).unwrap();
        let field = potential_energy_field(&spec, &g, CAP).unwrap();
        let stepper = NBodyStepper::new(field, 0.01).unwrap();
        let mut evolved = psi.clone();
        stepper.advance(&mut evolved, 20).unwrap();
        let free = nls::evolve(&phi, &NlsParams::free(0.01).unwrap(), 0.2, 20).unwrap();
        let expect = NBodyState::product(free.last(), 3, CAP).unwrap();
        let err: f64 = evolved
            .values
            .iter()
            .zip(&expect.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "err {err}");
    }

    #[test]
    fn one_particle_is_free_flow() {
        let g = grid(16);
        let phi = WaveFunction::gaussian(g, 0.6, [0.0; 2], [2.0, 0.0]);
        let psi = NBodyState::product(&phi, 1, CAP).unwrap();
        let spec = PotentialSpec::new(gauss(), 0.1, 1, 1).unwrap();
        let field = potential_energy_field(&spec, &g, CAP).unwrap();
        let out = step_strang_nbody(&psi, &field, 0.05).unwrap();
        let free = nls::step_strang(&phi, &NlsParams::free(0.05).unwrap()).unwrap();
        for (a, b) in out.values.iter().zip(&free.values) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn norm_and_symmetry_preserved() {
        let g = grid(8);
        let phi = WaveFunction::gaussian(g, 0.8, [0.0; 2], [1.0, 0.0]);
        let psi0 = NBodyState::product(&phi, 3, CAP).unwrap();
        let spec = PotentialSpec::new(
            BasePotential::Gaussian {
                amplitude: 20.0,
                width: 0.5,
            },
            0.1,
            3,
            1,
        )
        .unwrap();
        let field = potential_energy_field(&spec, &g, CAP).unwrap();
        let stepper = NBodyStepper::new(field, 1e-3).unwrap();
        let mut psi = psi0.clone();
        for _ in 0..100 {
            stepper.step(&mut psi).unwrap();
        }
        assert!((psi.norm() - 1.0).abs() < 1e-11);
        assert!(psi.symmetry_defect() < 1e-12);
    }

    #[test]
    fn product_marginals_are_pure() {
        let g = grid(8);
        let phi = WaveFunction::gaussian(g, 0.8, [0.1, 0.0], [1.0, 0.0]);
        let psi = NBodyState::product(&phi, 3, CAP).unwrap();
        for k in 1..=2 {
            let gamma = marginal(&psi, k, CAP).unwrap();
            let rho = MarginalDensity::pure_product(&phi, k);
            let diff = (&gamma.matrix - &rho.matrix).iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "k={k}: {diff}");
        }
        let one = NBodyState::product(&phi, 1, CAP).unwrap();
        let g1 = marginal(&one, 1, CAP).unwrap();
        assert!((g1.trace().re - 1.0).abs() < 1e-12);
        assert!(marginal(&psi, 4, CAP).is_err());
    }

    #[test]
    fn trace_distance_simple_cases() {
        let g = grid(8);
        let a = WaveFunction::from_fn(g, |x| C64::from_polar(1.0, x[0])).normalized().unwrap();
        let b = WaveFunction::from_fn(g, |x| C64::from_polar(1.0, 2.0 * x[0])).normalized().unwrap();
        let pa = MarginalDensity::pure_product(&a, 1);
        let pb = MarginalDensity::pure_product(&b, 1);
        assert!(trace_distance(&pa, &pa).unwrap() < 1e-12);
        assert!((trace_distance(&pa, &pb).unwrap() - 2.0).abs() < 1e-12);
        let p2 = MarginalDensity::pure_product(&a, 2);
        assert!(trace_distance(&pa, &p2).is_err());
    }

    #[test]
    fn plane_wave_energy_per_particle() {
        let g = grid(8);
        let phi = WaveFunction::from_fn(g, |x| C64::from_polar(1.0, x[0])).normalized().unwrap();
        let psi = NBodyState::product(&phi, 3, CAP).unwrap();
        let spec = PotentialSpec::new(BasePotential::Zero, 0.1, 3, 1).unwrap();
        let field = potential_energy_field(&spec, &g, CAP).unwrap();
        assert!((energy_per_particle(&psi, &field).unwrap() - 1.0).abs() < 1e-12);
        let c = WaveFunction::from_fn(g, |_| C64::new(1.0, 0.0)).normalized().unwrap();
        let psi = NBodyState::product(&c, 3, CAP).unwrap();
        assert!(energy_per_particle(&psi, &field).unwrap().abs() < 1e-12);
        // (1 + 1)^k for the plane wave
        let psi = NBodyState::product(&phi, 3, CAP).unwrap();
        assert!((energy_trace(&psi, 2).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn interaction_energy_is_nonnegative() {
        let g = grid(8);
        let phi = WaveFunction::gaussian(g, 0.8, [0.0; 2], [0.0; 2]);
        let psi = NBodyState::product(&phi, 3, CAP).unwrap();
        let zero = potential_energy_field(&PotentialSpec::new(BasePotential::Zero, 0.1, 3, 1).unwrap(), &g, CAP).unwrap();
        let field = potential_energy_field(&PotentialSpec::new(gauss(), 0.1, 3, 1).unwrap(), &g, CAP).unwrap();
        assert!(energy_per_particle(&psi, &field).unwrap() >= energy_per_particle(&psi, &zero).unwrap());
    }
}
