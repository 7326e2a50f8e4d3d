//! Strang split-step integration of the defocusing quintic and mixed
//! cubic-quintic NLS
//!
//! ```text
//! i d/dt phi = -Laplacian phi + lambda2 |phi|^2 phi + q |phi|^4 phi,   q = b0 + lambda3
//! ```
//!
//! Each step is half a free flow, an exact pointwise nonlinear phase rotation
//! (|phi| is constant along the isolated nonlinear flow) and another half free
//! flow. Both substeps have unit modulus, so the discrete mass is conserved to
//! roundoff.
//!
//! The conserved energy is
//! `E = int |grad phi|^2 + (lambda2/2) int |phi|^4 + (q/3) int |phi|^6`;
//! the coefficients 1/2 and 1/3 are fixed by requiring `dE/dphi-bar` to equal
//! the right-hand side above.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{apply_multiplier_with, AxisFft, Direction, GridSpec, SpectralMultiplier};
use crate::C64;

/// Single-particle wave function on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    pub grid: GridSpec,
    pub values: Vec<C64>,
    pub t: f64,
}

impl WaveFunction {
    pub fn new(grid: GridSpec, values: Vec<C64>) -> Result<Self> {
        grid.check_len(&values)?;
        Ok(WaveFunction {
            grid,
            values,
            t: 0.0,
        })
    }

    pub fn from_fn<F: Fn([f64; 2]) -> C64>(grid: GridSpec, f: F) -> Self {
        WaveFunction {
            values: grid.sample(f),
            grid,
            t: 0.0,
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        WaveFunction {
            values: vec![C64::new(0.0, 0.0); grid.len()],
            grid,
            t: 0.0,
        }
    }

    /// Rescales to unit mass. Fails on the zero field.
    pub fn normalized(mut self) -> Result<Self> {
        let n = self.grid.norm(&self.values);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite field"));
        }
        self.values.iter_mut().for_each(|v| *v /= n);
        Ok(self)
    }

    /// Normalized Gaussian packet `exp(-|x - x0|^2 / (2 w^2) + i p.x)`.
    pub fn gaussian(grid: GridSpec, width: f64, center: [f64; 2], momentum: [f64; 2]) -> Self {
        let wf = WaveFunction::from_fn(grid, |x| {
            let dx = [x[0] - center[0], x[1] - center[1]];
            let r2 = dx[0] * dx[0] + if grid.dim() == 2 { dx[1] * dx[1] } else { 0.0 };
            let phase = momentum[0] * x[0] + if grid.dim() == 2 { momentum[1] * x[1] } else { 0.0 };
            C64::from_polar((-r2 / (2.0 * width * width)).exp(), phase)
        });
        wf.normalized().expect("gaussian packet is nonzero")
    }

    pub fn mass(&self) -> f64 {
        mass(self)
    }

    /// Short content hash of the field bytes.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.re.to_le_bytes());
            h.update(v.im.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Couplings and time step. The quintic coefficient of the flow is `b0 + lambda3`:
/// the pure quintic model sets `lambda2 = lambda3 = 0`, the mixed model `b0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NlsParams {
    pub b0: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub dt: f64,
}

impl NlsParams {
    pub fn quintic(b0: f64, dt: f64) -> Result<Self> {
        NlsParams {
            b0,
            lambda2: 0.0,
            lambda3: 0.0,
            dt,
        }
        .validated()
    }

    pub fn mixed(lambda2: f64, lambda3: f64, dt: f64) -> Result<Self> {
        NlsParams {
            b0: 0.0,
            lambda2,
            lambda3,
            dt,
        }
        .validated()
    }

    pub fn free(dt: f64) -> Result<Self> {
        Self::quintic(0.0, dt)
    }

    pub fn validated(self) -> Result<Self> {
        let mut problems = Vec::new();
        for (name, v) in [("b0", self.b0), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and >= 0 (defocusing), got {v}"));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn quintic_coupling(&self) -> f64 {
        self.b0 + self.lambda3
    }
}

/// Reusable split-step propagator for one grid and parameter set.
#[derive(Debug, Clone)]
pub struct StrangStepper {
    grid: GridSpec,
    params: NlsParams,
    fft: AxisFft,
    half_flow: SpectralMultiplier,
}

impl StrangStepper {
    pub fn new(grid: GridSpec, params: NlsParams) -> Result<Self> {
        let params = params.validated()?;
        Ok(StrangStepper {
            grid,
            params,
            fft: AxisFft::new(grid.points()),
            half_flow: SpectralMultiplier::free_flow(&grid, 0.5 * params.dt),
        })
    }

    pub fn params(&self) -> &NlsParams {
        &self.params
    }

    /// Advances `phi` by one step in place.
    pub fn step(&self, phi: &mut WaveFunction) -> Result<()> {
        if phi.grid != self.grid {
            return Err(Error::invalid("wave function grid differs from stepper grid"));
        }
        let d = self.grid.dim();
        apply_multiplier_with(&self.fft, &mut phi.values, &self.half_flow, d);
        self.nonlinear_phase(&mut phi.values, self.params.dt)?;
        apply_multiplier_with(&self.fft, &mut phi.values, &self.half_flow, d);
        phi.t += self.params.dt;
        Ok(())
    }

    fn nonlinear_phase(&self, values: &mut [C64], dt: f64) -> Result<()> {
        let (c, q) = (self.params.lambda2, self.params.quintic_coupling());
        if c == 0.0 && q == 0.0 {
            return check_finite(values);
        }
        for (i, v) in values.iter_mut().enumerate() {
            let rho = v.norm_sqr();
            if !rho.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite value {v} at node {i} before nonlinear substep"
                )));
            }
            *v *= C64::from_polar(1.0, -dt * (c * rho + q * rho * rho));
        }
        Ok(())
    }
}

fn check_finite(values: &[C64]) -> Result<()> {
    match values
        .iter()
        .position(|v| !(v.re.is_finite() && v.im.is_finite()))
    {
        Some(i) => Err(Error::numerical(format!(
            "non-finite value {} at node {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// One Strang step.
pub fn step_strang(phi: &WaveFunction, p: &NlsParams) -> Result<WaveFunction> {
    let stepper = StrangStepper::new(phi.grid, *p)?;
    let mut out = phi.clone();
    stepper.step(&mut out)?;
    Ok(out)
}

pub fn mass(phi: &WaveFunction) -> f64 {
    phi.grid.norm_sqr(&phi.values)
}

/// Kinetic energy `int |grad phi|^2`, evaluated spectrally.
pub fn kinetic_energy(phi: &WaveFunction) -> f64 {
    let g = &phi.grid;
    let mut freq = phi.values.clone();
    AxisFft::new(g.points()).transform(&mut freq, g.dim(), Direction::Forward);
    let s: f64 = freq
        .iter()
        .enumerate()
        .map(|(i, v)| g.k_squared(i) * v.norm_sqr())
        .sum();
    s * g.cell_volume()
}

pub fn energy(phi: &WaveFunction, p: &NlsParams) -> f64 {
    let g = &phi.grid;
    let (c, q) = (p.lambda2, p.quintic_coupling());
    let potential = g.integrate(phi.values.iter().map(|v| {
        let rho = v.norm_sqr();
        0.5 * c * rho * rho + q / 3.0 * rho * rho * rho
    }));
    kinetic_energy(phi) + potential
}

/// Snapshots of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: NlsParams,
    pub snapshots: Vec<WaveFunction>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &WaveFunction {
        self.snapshots.last().expect("trajectory holds the initial snapshot")
    }

    /// Columnar `t,mass,energy,checksum` records.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,mass,energy,checksum")?;
        for s in &self.snapshots {
            writeln!(
                w,
                "{:.12e},{:.16e},{:.16e},{}",
                s.t,
                mass(s),
                energy(s, &self.params),
                s.checksum()
            )?;
        }
        Ok(())
    }
}

/// Evolves to time `total` (rounded to a whole number of steps), recording the
/// initial state and every `record_every`-th step. The final state is always
/// recorded.
pub fn evolve(
    phi0: &WaveFunction,
    p: &NlsParams,
    total: f64,
    record_every: usize,
) -> Result<Trajectory> {
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::invalid(format!("total time must be positive, got {total}")));
    }
    if record_every == 0 {
        return Err(Error::invalid("record_every must be at least 1"));
    }
    let steps = (total / p.dt).round() as usize;
    if steps == 0 {
        return Err(Error::invalid(format!(
            "total time {total} is shorter than half a step dt = {}",
            p.dt
        )));
    }
    let stepper = StrangStepper::new(phi0.grid, *p)?;
    let mut phi = phi0.clone();
    let mut snapshots = vec![phi.clone()];
    for n in 1..=steps {
        stepper.step(&mut phi)?;
        // Step index times dt keeps snapshots on the uniform grid.
        phi.t = phi0.t + n as f64 * p.dt;
        if n % record_every == 0 || n == steps {
            snapshots.push(phi.clone());
        }
    }
    Ok(Trajectory {
        params: *p,
        snapshots,
    })
}

/// Size of the fixed field-dump header in bytes.
pub const FIELD_HEADER_BYTES: usize = 32;

/// Writes a field dump: little-endian `u64 axes, u64 M, f64 L, f64 t`, then
/// `M^axes` pairs `(re, im)` of `f64`.
///
/// For single-particle fields `axes = d`; N-body tensors use `axes = d N`.
pub fn write_field_dump<W: Write>(
    mut w: W,
    axes: usize,
    points: usize,
    length: f64,
    t: f64,
    values: &[C64],
) -> Result<()> {
    if values.len() != points.pow(axes as u32) {
        return Err(Error::invalid("field length does not match header"));
    }
    w.write_all(&(axes as u64).to_le_bytes())?;
    w.write_all(&(points as u64).to_le_bytes())?;
    w.write_all(&length.to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    for v in values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

/// Header of a field dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldHeader {
    pub axes: usize,
    pub points: usize,
    pub length: f64,
    pub t: f64,
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads one field dump written by [`write_field_dump`].
pub fn read_field_dump<R: Read>(mut r: R) -> Result<(FieldHeader, Vec<C64>)> {
    let axes = read_u64(&mut r)? as usize;
    let points = read_u64(&mut r)? as usize;
    let length = read_f64(&mut r)?;
    let t = read_f64(&mut r)?;
    if axes == 0 || axes > 16 || points == 0 || points > (1 << 20) {
        return Err(Error::Serialization(format!(
            "implausible field header: axes {axes}, points {points}"
        )));
    }
    let n = (points as u128).pow(axes as u32);
    if n > (1u128 << 36) {
        return Err(Error::Serialization(format!("field of {n} nodes is too large")));
    }
    let mut values = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let re = read_f64(&mut r)?;
        let im = read_f64(&mut r)?;
        values.push(C64::new(re, im));
    }
    Ok((
        FieldHeader {
            axes,
            points,
            length,
            t,
        },
        values,
    ))
}

impl WaveFunction {
    pub fn write_dump<W: Write>(&self, w: W) -> Result<()> {
        write_field_dump(
            w,
            self.grid.dim(),
            self.grid.points(),
            self.grid.length(),
            self.t,
            &self.values,
        )
    }

    pub fn read_dump<R: Read>(r: R) -> Result<Self> {
        let (h, values) = read_field_dump(r)?;
        let grid = GridSpec::new(h.axes, h.points, h.length)?;
        Ok(WaveFunction {
            grid,
            values,
            t: h.t,
        })
    }
}
