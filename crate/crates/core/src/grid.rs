//! Periodic uniform grids, unitary Fourier transforms and spectral multipliers.
//!
//! A grid is the torus `[-L/2, L/2)^d` sampled at `M` points per axis, node
//! `j` sitting at `x_j = -L/2 + j h` with `h = L / M`. Fields are stored
//! row-major (axis 0 slowest).
//!
//! Frequency bins use the native FFT ordering `j = 0, 1, ..., M/2 - 1, -M/2,
//! ..., -1`; bin `j` maps to the physical wavenumber `k = 2 pi j' / L` where
//! `j'` is the signed index. Both transform directions are scaled by
//! `1/sqrt(M)` per axis so the discrete Plancherel identity is exact.
//!
//! Norms and inner products carry the quadrature weight `h^d`, so the constant
//! field has norm `L^{d/2}`.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::C64;

/// Spatial grid description.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    dim: usize,
    points: usize,
    length: f64,
}

impl GridSpec {
    pub fn new(dim: usize, points: usize, length: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(dim == 1 || dim == 2) {
            problems.push(format!("grid dimension must be 1 or 2, got {dim}"));
        }
        if points < 4 || !points.is_power_of_two() {
            problems.push(format!(
                "points per axis must be a power of two >= 4, got {points}"
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            problems.push(format!("box length must be positive and finite, got {length}"));
        }
        if problems.is_empty() {
            Ok(GridSpec {
                dim,
                points,
                length,
            })
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.points as f64
    }

    /// Number of nodes, `M^d`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of a single node, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Coordinate of node `j` along one axis.
    pub fn coordinate(&self, j: usize) -> f64 {
        -0.5 * self.length + j as f64 * self.spacing()
    }

    /// Physical coordinates of a flat node index (second entry is 0 in d=1).
    pub fn position(&self, flat: usize) -> [f64; 2] {
        match self.dim {
            1 => [self.coordinate(flat), 0.0],
            _ => [
                self.coordinate(flat / self.points),
                self.coordinate(flat % self.points),
            ],
        }
    }

    /// Signed frequency index of FFT bin `j`.
    pub fn signed_bin(&self, j: usize) -> i64 {
        let m = self.points as i64;
        let j = j as i64;
        if j < m / 2 {
            j
        } else {
            j - m
        }
    }

    /// Physical wavenumber of FFT bin `j` along one axis.
    pub fn wavenumber(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.signed_bin(j) as f64 / self.length
    }

    /// `|k|^2` at a flat frequency index.
    pub fn k_squared(&self, flat: usize) -> f64 {
        match self.dim {
            1 => self.wavenumber(flat).powi(2),
            _ => {
                self.wavenumber(flat / self.points).powi(2)
                    + self.wavenumber(flat % self.points).powi(2)
            }
        }
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn([f64; 2]) -> C64>(&self, f: F) -> Vec<C64> {
        (0..self.len()).map(|i| f(self.position(i))).collect()
    }

    pub fn check_len(&self, field: &[C64]) -> Result<()> {
        if field.len() != self.len() {
            return Err(Error::invalid(format!(
                "field has {} nodes, grid expects {}",
                field.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Discrete `L^2` inner product `h^d sum conj(a) b`.
    pub fn inner(&self, a: &[C64], b: &[C64]) -> C64 {
        let s: C64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
        s * self.cell_volume()
    }

    pub fn norm_sqr(&self, a: &[C64]) -> f64 {
        a.iter().map(|x| x.norm_sqr()).sum::<f64>() * self.cell_volume()
    }

    pub fn norm(&self, a: &[C64]) -> f64 {
        self.norm_sqr(a).sqrt()
    }

    /// Quadrature of a real density over the box.
    pub fn integrate(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        values.into_iter().sum::<f64>() * self.cell_volume()
    }
}

/// Direction of a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Unitary FFT along every axis of a cubic tensor with `M` points per axis.
///
/// Also used for N-body tensors, which are simply tensors with `d N` axes.
#[derive(Clone)]
pub struct AxisFft {
    points: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for AxisFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AxisFft").field("points", &self.points).finish()
    }
}

impl AxisFft {
    pub fn new(points: usize) -> Self {
        let mut planner = FftPlanner::new();
        AxisFft {
            points,
            forward: planner.plan_fft_forward(points),
            inverse: planner.plan_fft_inverse(points),
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// Transforms `data` (length `M^axes`) along every axis in place.
    pub fn transform(&self, data: &mut [C64], axes: usize, dir: Direction) {
        for axis in 0..axes {
            self.transform_axis(data, axes, axis, dir);
        }
    }

    /// Forward transform, multiplication by `symbol[bin]`, inverse transform,
    /// along one axis in a single gather/scatter pass.
    pub fn multiply_axis(&self, data: &mut [C64], axes: usize, axis: usize, symbol: &[C64]) {
        let m = self.points;
        debug_assert_eq!(symbol.len(), m);
        let stride = m.pow((axes - 1 - axis) as u32);
        let block = stride * m;
        let scratch_len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        let mut scratch = vec![C64::new(0.0, 0.0); scratch_len];
        let scale = 1.0 / m as f64;
        let mut buf = vec![C64::new(0.0, 0.0); block];
        for chunk in data.chunks_mut(block) {
            for t in 0..m {
                for o in 0..stride {
                    buf[o * m + t] = chunk[t * stride + o];
                }
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for row in buf.chunks_mut(m) {
                row.iter_mut().zip(symbol).for_each(|(v, s)| *v *= s * scale);
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for t in 0..m {
                for o in 0..stride {
                    chunk[t * stride + o] = buf[o * m + t];
                }
            }
        }
    }

    /// Transforms along a single axis in place.
    pub fn transform_axis(&self, data: &mut [C64], axes: usize, axis: usize, dir: Direction) {
        let m = self.points;
        debug_assert_eq!(data.len(), m.pow(axes as u32));
        let fft = match dir {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        let scale = 1.0 / (m as f64).sqrt();
        let stride = m.pow((axes - 1 - axis) as u32);
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            data.iter_mut().for_each(|v| *v *= scale);
            return;
        }
        // Gather each block [t][o] into [o][t] so the FFTs run on contiguous rows.
        let block = stride * m;
        let mut buf = vec![C64::new(0.0, 0.0); block];
        for chunk in data.chunks_mut(block) {
            for t in 0..m {
                for o in 0..stride {
                    buf[o * m + t] = chunk[t * stride + o];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for t in 0..m {
                for o in 0..stride {
                    chunk[t * stride + o] = buf[o * m + t] * scale;
                }
            }
        }
    }
}

/// Forward unitary transform of a grid field.
pub fn transform_forward(field: &[C64], grid: &GridSpec) -> Result<Vec<C64>> {
    grid.check_len(field)?;
    let mut out = field.to_vec();
    AxisFft::new(grid.points()).transform(&mut out, grid.dim(), Direction::Forward);
    Ok(out)
}

/// Inverse unitary transform of a frequency field.
pub fn transform_inverse(freq: &[C64], grid: &GridSpec) -> Result<Vec<C64>> {
    grid.check_len(freq)?;
    let mut out = freq.to_vec();
    AxisFft::new(grid.points()).transform(&mut out, grid.dim(), Direction::Inverse);
    Ok(out)
}

/// Kind of diagonal Fourier multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MultiplierKind {
    /// `-|k|^2`
    Laplacian,
    /// `(1 + |k|^2)^{alpha/2}`
    Sobolev(f64),
    /// `exp(-i t |k|^2)`, i.e. the free Schrödinger flow `e^{i t Laplacian}`.
    FreeFlow(f64),
}

impl MultiplierKind {
    pub fn symbol(&self, k2: f64) -> C64 {
        match *self {
            MultiplierKind::Laplacian => C64::new(-k2, 0.0),
            MultiplierKind::Sobolev(alpha) => C64::new((1.0 + k2).powf(0.5 * alpha), 0.0),
            MultiplierKind::FreeFlow(t) => C64::from_polar(1.0, -t * k2),
        }
    }
}

/// Multiplier values tabulated on the frequency grid.
#[derive(Debug, Clone)]
pub struct SpectralMultiplier {
    kind: MultiplierKind,
    values: Vec<C64>,
}

impl SpectralMultiplier {
    pub fn new(grid: &GridSpec, kind: MultiplierKind) -> Self {
        let values = (0..grid.len())
            .map(|i| kind.symbol(grid.k_squared(i)))
            .collect();
        SpectralMultiplier { kind, values }
    }

    pub fn laplacian(grid: &GridSpec) -> Self {
        Self::new(grid, MultiplierKind::Laplacian)
    }

    pub fn sobolev(grid: &GridSpec, alpha: f64) -> Self {
        Self::new(grid, MultiplierKind::Sobolev(alpha))
    }

    pub fn free_flow(grid: &GridSpec, t: f64) -> Self {
        Self::new(grid, MultiplierKind::FreeFlow(t))
    }

    pub fn kind(&self) -> MultiplierKind {
        self.kind
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }
}

/// Applies a multiplier with a prepared FFT; avoids re-planning in hot loops.
pub fn apply_multiplier_with(
    fft: &AxisFft,
    field: &mut [C64],
    mult: &SpectralMultiplier,
    dim: usize,
) {
    fft.transform(field, dim, Direction::Forward);
    field
        .iter_mut()
        .zip(&mult.values)
        .for_each(|(v, m)| *v *= m);
    fft.transform(field, dim, Direction::Inverse);
}

/// `inverse(mult * forward(field))`.
pub fn apply_multiplier(
    field: &[C64],
    mult: &SpectralMultiplier,
    grid: &GridSpec,
) -> Result<Vec<C64>> {
    grid.check_len(field)?;
    if mult.values.len() != field.len() {
        return Err(Error::invalid(format!(
            "multiplier has {} bins, field has {} nodes",
            mult.values.len(),
            field.len()
        )));
    }
    let mut out = field.to_vec();
    apply_multiplier_with(&AxisFft::new(grid.points()), &mut out, mult, grid.dim());
    Ok(out)
}

/// `|| (1 - Laplacian)^{alpha/2} field ||_2`, evaluated directly in frequency space.
pub fn sobolev_norm(field: &[C64], alpha: f64, grid: &GridSpec) -> Result<f64> {
    let freq = transform_forward(field, grid)?;
    let s: f64 = freq
        .iter()
        .enumerate()
        .map(|(i, v)| v.norm_sqr() * (1.0 + grid.k_squared(i)).powf(alpha))
        .sum();
    Ok((s * grid.cell_volume()).sqrt())
}

/// Random smooth field of unit `L^2` norm.
///
/// Fourier coefficients are uniform in the unit square scaled by
/// `(1 + |k|^2)^{-decay/2}`; bins with `|j| > M/3` on any axis are zero, so the
/// field is band-limited well inside the grid's resolution.
pub fn random_band_limited<R: rand::Rng + ?Sized>(grid: &GridSpec, rng: &mut R, decay: f64) -> Vec<C64> {
    let m = grid.points();
    let cutoff = m as i64 / 3;
    let inside = |flat: usize| -> bool {
        match grid.dim() {
            1 => grid.signed_bin(flat).abs() <= cutoff,
            _ => grid.signed_bin(flat / m).abs() <= cutoff && grid.signed_bin(flat % m).abs() <= cutoff,
        }
    };
    let mut freq: Vec<C64> = (0..grid.len())
        .map(|i| {
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if inside(i) {
                c * (1.0 + grid.k_squared(i)).powf(-0.5 * decay)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    AxisFft::new(m).transform(&mut freq, grid.dim(), Direction::Inverse);
    let n = grid.norm(&freq);
    if n > 0.0 {
        freq.iter_mut().for_each(|v| *v /= n);
    }
    freq
}
