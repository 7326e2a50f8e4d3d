//! Low-rank separable kernels of `k`-particle density matrices and the
//! operators of the hierarchy acting on them.
//!
//! A kernel of order `k` is
//!
//! ```text
//! gamma(x_1..x_k; x'_1..x'_k) = sum_m c_m prod_i f_{m,i}(x_i) conj(g_{m,i}(x'_i))
//! ```
//!
//! with every factor a single-particle field on one shared grid. Slots are
//! numbered from 1 in the public API.
//!
//! Delta contractions are pointwise products: a grid delta is the density
//! `1/h^d` at a node, so `int delta f = f` and no `h` factors appear.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{random_band_limited, AxisFft, Direction, GridSpec};
use crate::nls::{self, Trajectory, WaveFunction};
use crate::C64;

/// Default upper bound on the number of terms of any kernel.
pub const DEFAULT_RANK_CAP: usize = 1 << 16;

/// Largest dense kernel (complex entries) materialized for distance evaluation.
pub const DENSE_LIMIT: usize = 1 << 22;

/// One separable term `c prod_i f_i (x) conj(g_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTerm {
    pub coeff: C64,
    pub f: Vec<Vec<C64>>,
    pub g: Vec<Vec<C64>>,
}

/// Immutable separable kernel. Every operation returns a new kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    grid: GridSpec,
    order: usize,
    terms: Vec<KernelTerm>,
    rank_cap: usize,
}

/// Which part of `B = B+ - B-` to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contraction {
    Plus,
    Minus,
    Full,
}

impl SeparableKernel {
    pub fn zero(grid: GridSpec, order: usize) -> Self {
        SeparableKernel {
            grid,
            order,
            terms: Vec::new(),
            rank_cap: DEFAULT_RANK_CAP,
        }
    }

    pub fn from_terms(grid: GridSpec, order: usize, terms: Vec<KernelTerm>) -> Result<Self> {
        let n = grid.len();
        for (m, t) in terms.iter().enumerate() {
            if t.f.len() != order || t.g.len() != order {
                return Err(Error::invalid(format!(
                    "term {m} has {} f-factors and {} g-factors, expected {order}",
                    t.f.len(),
                    t.g.len()
                )));
            }
            if t.f.iter().chain(&t.g).any(|v| v.len() != n) {
                return Err(Error::invalid(format!(
                    "term {m} has a factor not on the {n}-node grid"
                )));
            }
        }
        Ok(SeparableKernel {
            grid,
            order,
            rank_cap: DEFAULT_RANK_CAP.max(terms.len()),
            terms,
        })
    }

    pub fn with_rank_cap(mut self, cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::invalid("rank cap must be positive"));
        }
        if self.rank() > cap {
            return Err(Error::cap("kernel rank", self.rank() as u64, cap as u64));
        }
        self.rank_cap = cap;
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn rank_cap(&self) -> usize {
        self.rank_cap
    }

    pub fn terms(&self) -> &[KernelTerm] {
        &self.terms
    }

    fn derived(&self, order: usize, terms: Vec<KernelTerm>) -> Result<Self> {
        if terms.len() > self.rank_cap {
            return Err(Error::cap("kernel rank", terms.len() as u64, self.rank_cap as u64));
        }
        Ok(SeparableKernel {
            grid: self.grid,
            order,
            terms,
            rank_cap: self.rank_cap,
        })
    }

    /// `gamma(x; x')` at flat node multi-indices.
    pub fn value(&self, x: &[usize], xp: &[usize]) -> C64 {
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coeff;
                for i in 0..self.order {
                    v *= t.f[i][x[i]] * t.g[i][xp[i]].conj();
                }
                v
            })
            .sum()
    }

    /// `integral of gamma(x; x) dx`.
    pub fn trace(&self) -> C64 {
        let h = self.grid.cell_volume();
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coeff;
                for i in 0..self.order {
                    let s: C64 = t.f[i].iter().zip(&t.g[i]).map(|(a, b)| a * b.conj()).sum();
                    v *= s * h;
                }
                v
            })
            .sum()
    }

    /// Kernel of the operator adjoint: `gamma*(x; x') = conj(gamma(x'; x))`.
    pub fn adjoint(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| KernelTerm {
                coeff: t.coeff.conj(),
                f: t.g.clone(),
                g: t.f.clone(),
            })
            .collect();
        SeparableKernel {
            terms,
            ..self.clone()
        }
    }

    pub fn scaled(&self, s: C64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| KernelTerm {
                coeff: t.coeff * s,
                ..t.clone()
            })
            .collect();
        SeparableKernel {
            terms,
            ..self.clone()
        }
    }

    /// Concatenation of the term lists.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        self.derived(self.order, terms)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.order != other.order {
            return Err(Error::invalid(format!(
                "kernel orders differ: {} vs {}",
                self.order, other.order
            )));
        }
        if self.grid != other.grid {
            return Err(Error::invalid("kernels live on different grids"));
        }
        Ok(())
    }

    /// Terms permuted so that term `i` of the result is term `perm[i]` of `self`.
    pub fn permuted_terms(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rank() {
            return Err(Error::invalid("term permutation has the wrong length"));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("term permutation is not a bijection"));
            }
        }
        let terms = perm.iter().map(|&p| self.terms[p].clone()).collect();
        Ok(SeparableKernel {
            terms,
            ..self.clone()
        })
    }

    /// Slots permuted: slot `i` of the result is slot `perm[i]` of `self` (0-based).
    pub fn permuted_slots(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.order {
            return Err(Error::invalid("slot permutation has the wrong length"));
        }
        let terms = self
            .terms
            .iter()
            .map(|t| KernelTerm {
                coeff: t.coeff,
                f: perm.iter().map(|&p| t.f[p].clone()).collect(),
                g: perm.iter().map(|&p| t.g[p].clone()).collect(),
            })
            .collect();
        Ok(SeparableKernel {
            terms,
            ..self.clone()
        })
    }

    /// Dense kernel, row index `(x_1..x_k)` and column index `(x'_1..x'_k)`,
    /// each a row-major tuple of flat node indices. Entries are kernel values.
    pub fn to_dense(&self) -> Result<Vec<C64>> {
        let n = self.grid.len();
        let side = n.pow(self.order as u32);
        let len = side * side;
        if len > DENSE_LIMIT {
            return Err(Error::cap("dense kernel entries", len as u64, DENSE_LIMIT as u64));
        }
        let mut out = vec![C64::new(0.0, 0.0); len];
        for t in &self.terms {
            let mut acc = vec![t.coeff];
            for i in 0..self.order {
                acc = outer(&acc, &t.f[i]);
            }
            let conj_g: Vec<Vec<C64>> = t
                .g
                .iter()
                .map(|g| g.iter().map(|v| v.conj()).collect())
                .collect();
            let mut col = vec![C64::new(1.0, 0.0)];
            for g in &conj_g {
                col = outer(&col, g);
            }
            for (a, row) in out.chunks_mut(side).enumerate() {
                let ra = acc[a];
                row.iter_mut().zip(&col).for_each(|(v, c)| *v += ra * c);
            }
        }
        Ok(out)
    }
}

fn outer(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

/// `|phi><phi|^{(x)k}`.
pub fn factorized(phi: &WaveFunction, k: usize) -> Result<SeparableKernel> {
    if k == 0 {
        return Err(Error::invalid("kernel order must be at least 1"));
    }
    let term = KernelTerm {
        coeff: C64::new(1.0, 0.0),
        f: vec![phi.values.clone(); k],
        g: vec![phi.values.clone(); k],
    };
    SeparableKernel::from_terms(phi.grid, k, vec![term])
}

/// Bosonic kernel `sum_m c_m (|f_m><g_m|)^{(x)k}`.
pub fn bosonic(grid: GridSpec, k: usize, parts: &[(C64, Vec<C64>, Vec<C64>)]) -> Result<SeparableKernel> {
    let terms = parts
        .iter()
        .map(|(c, f, g)| KernelTerm {
            coeff: *c,
            f: vec![f.clone(); k],
            g: vec![g.clone(); k],
        })
        .collect();
    SeparableKernel::from_terms(grid, k, terms)
}

/// Random kernel with band-limited unit-norm factors and coefficients in the
/// unit square.
pub fn random_kernel<R: Rng + ?Sized>(
    grid: GridSpec,
    order: usize,
    rank: usize,
    decay: f64,
    rng: &mut R,
) -> Result<SeparableKernel> {
    let terms = (0..rank)
        .map(|_| KernelTerm {
            coeff: C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            f: (0..order).map(|_| random_band_limited(&grid, rng, decay)).collect(),
            g: (0..order).map(|_| random_band_limited(&grid, rng, decay)).collect(),
        })
        .collect();
    SeparableKernel::from_terms(grid, order, terms)
}

/// Random positive kernel `sum_m lambda_m |psi_m1 (x) ... (x) psi_mk><same|`,
/// `lambda_m >= 0` summing to one.
pub fn random_positive_kernel<R: Rng + ?Sized>(
    grid: GridSpec,
    order: usize,
    rank: usize,
    decay: f64,
    rng: &mut R,
) -> Result<SeparableKernel> {
    let weights: Vec<f64> = (0..rank).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let terms = weights
        .iter()
        .map(|w| {
            let f: Vec<Vec<C64>> = (0..order).map(|_| random_band_limited(&grid, rng, decay)).collect();
            KernelTerm {
                coeff: C64::new(w / total, 0.0),
                g: f.clone(),
                f,
            }
        })
        .collect();
    SeparableKernel::from_terms(grid, order, terms)
}

/// Plans free-flow and Sobolev symbols on one grid.
struct Spectral {
    fft: AxisFft,
    grid: GridSpec,
    k2: Vec<f64>,
}

impl Spectral {
    fn new(grid: &GridSpec) -> Self {
        Spectral {
            fft: AxisFft::new(grid.points()),
            grid: *grid,
            k2: (0..grid.len()).map(|i| grid.k_squared(i)).collect(),
        }
    }

    fn forward(&self, v: &[C64]) -> Vec<C64> {
        let mut out = v.to_vec();
        self.fft.transform(&mut out, self.grid.dim(), Direction::Forward);
        out
    }

    fn free_flow(&self, v: &[C64], t: f64) -> Vec<C64> {
        if t == 0.0 {
            return v.to_vec();
        }
        let mut out = self.forward(v);
        out.iter_mut()
            .zip(&self.k2)
            .for_each(|(x, k2)| *x *= C64::from_polar(1.0, -t * k2));
        self.fft.transform(&mut out, self.grid.dim(), Direction::Inverse);
        out
    }

    fn weights(&self, alpha: f64) -> Vec<f64> {
        self.k2.iter().map(|k2| (1.0 + k2).powf(alpha)).collect()
    }
}

/// `U(t) gamma = e^{i t Lap_x} gamma e^{-i t Lap_x'}` on every slot.
pub fn free_propagate(gamma: &SeparableKernel, t: f64) -> SeparableKernel {
    free_propagate_slots(gamma, &vec![t; gamma.order])
        .unwrap_or_else(|_| unreachable!("slot count matches order"))
}

/// Slot-masked free flow: slot `i` is propagated by `times[i]`.
pub fn free_propagate_slots(gamma: &SeparableKernel, times: &[f64]) -> Result<SeparableKernel> {
    if times.len() != gamma.order {
        return Err(Error::invalid(format!(
            "{} slot times given for an order-{} kernel",
            times.len(),
            gamma.order
        )));
    }
    let sp = Spectral::new(&gamma.grid);
    let terms = gamma
        .terms
        .iter()
        .map(|t| KernelTerm {
            coeff: t.coeff,
            f: t.f.iter().zip(times).map(|(v, &s)| sp.free_flow(v, s)).collect(),
            g: t.g.iter().zip(times).map(|(v, &s)| sp.free_flow(v, s)).collect(),
        })
        .collect();
    Ok(SeparableKernel {
        terms,
        ..gamma.clone()
    })
}

/// Contraction of slots `a`, `b` onto slot `j` (all 1-based, distinct).
///
/// The plus part multiplies `f_j` by `f_a conj(g_a) f_b conj(g_b)`, the minus
/// part multiplies `g_j` by `g_a conj(f_a) g_b conj(f_b)`. Slots `a` and `b`
/// are removed and the others keep their relative order. For [`Contraction::Full`]
/// the plus terms come first, followed by the negated minus terms.
pub fn contract_slots(
    gamma: &SeparableKernel,
    j: usize,
    a: usize,
    b: usize,
    part: Contraction,
) -> Result<SeparableKernel> {
    let k = gamma.order;
    if k < 3 {
        return Err(Error::invalid(format!("contraction needs order >= 3, got {k}")));
    }
    for (name, s) in [("j", j), ("a", a), ("b", b)] {
        if s == 0 || s > k {
            return Err(Error::invalid(format!("slot {name}={s} out of range 1..={k}")));
        }
    }
    if j == a || j == b || a == b {
        return Err(Error::invalid(format!("slots j={j}, a={a}, b={b} must be distinct")));
    }
    let (j, a, b) = (j - 1, a - 1, b - 1);
    let keep: Vec<usize> = (0..k).filter(|&s| s != a && s != b).collect();
    let build = |t: &KernelTerm, plus: bool, sign: f64| -> KernelTerm {
        let (pin, other) = if plus { (&t.f, &t.g) } else { (&t.g, &t.f) };
        let mut pinned = pin[j].clone();
        for s in [a, b] {
            pinned
                .iter_mut()
                .zip(pin[s].iter().zip(&other[s]))
                .for_each(|(v, (p, o))| *v *= p * o.conj());
        }
        let mut f = Vec::with_capacity(k - 2);
        let mut g = Vec::with_capacity(k - 2);
        for &s in &keep {
            if s == j {
                if plus {
                    f.push(pinned.clone());
                    g.push(t.g[s].clone());
                } else {
                    f.push(t.f[s].clone());
                    g.push(pinned.clone());
                }
            } else {
                f.push(t.f[s].clone());
                g.push(t.g[s].clone());
            }
        }
        KernelTerm {
            coeff: t.coeff * sign,
            f,
            g,
        }
    };
    let mut terms = Vec::new();
    if matches!(part, Contraction::Plus | Contraction::Full) {
        terms.extend(gamma.terms.iter().map(|t| build(t, true, 1.0)));
    }
    if matches!(part, Contraction::Minus | Contraction::Full) {
        let sign = if part == Contraction::Full { -1.0 } else { 1.0 };
        terms.extend(gamma.terms.iter().map(|t| build(t, false, sign)));
    }
    gamma.derived(k - 2, terms)
}

fn last_pair(gamma: &SeparableKernel) -> (usize, usize) {
    (gamma.order.saturating_sub(1), gamma.order)
}

fn check_target(gamma: &SeparableKernel, j: usize) -> Result<()> {
    let k = gamma.order.saturating_sub(2);
    if gamma.order < 3 || j == 0 || j > k {
        return Err(Error::invalid(format!(
            "contraction target j={j} out of range 1..={k} for an order-{} kernel",
            gamma.order
        )));
    }
    Ok(())
}

/// `B+_{j;k+1,k+2}`.
pub fn contract_plus(gamma: &SeparableKernel, j: usize) -> Result<SeparableKernel> {
    check_target(gamma, j)?;
    let (a, b) = last_pair(gamma);
    contract_slots(gamma, j, a, b, Contraction::Plus)
}

/// `B-_{j;k+1,k+2}`.
pub fn contract_minus(gamma: &SeparableKernel, j: usize) -> Result<SeparableKernel> {
    check_target(gamma, j)?;
    let (a, b) = last_pair(gamma);
    contract_slots(gamma, j, a, b, Contraction::Minus)
}

/// `B_{j;k+1,k+2} = B+ - B-`; the rank doubles.
pub fn contract(gamma: &SeparableKernel, j: usize) -> Result<SeparableKernel> {
    check_target(gamma, j)?;
    let (a, b) = last_pair(gamma);
    contract_slots(gamma, j, a, b, Contraction::Full)
}

/// Sobolev-weighted Fourier images of every factor.
struct WeightedFactors {
    f: Vec<Vec<Vec<C64>>>,
    g: Vec<Vec<Vec<C64>>>,
}

fn weighted_factors(gamma: &SeparableKernel, sp: &Spectral, w: &[f64]) -> WeightedFactors {
    let tr = |v: &Vec<C64>| -> Vec<C64> {
        let mut x = sp.forward(v);
        x.iter_mut().zip(w).for_each(|(a, s)| *a *= s.sqrt());
        x
    };
    WeightedFactors {
        f: gamma.terms.iter().map(|t| t.f.iter().map(tr).collect()).collect(),
        g: gamma.terms.iter().map(|t| t.g.iter().map(tr).collect()).collect(),
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `<gamma_1, gamma_2>` in `L^2` after applying the Sobolev multiplier of
/// order `alpha` in every primed and unprimed variable; `O(R_1 R_2 k)` inner
/// products, never materializing the dense kernel.
pub fn kernel_inner(g1: &SeparableKernel, g2: &SeparableKernel, alpha: f64) -> Result<C64> {
    g1.check_compatible(g2)?;
    let sp = Spectral::new(&g1.grid);
    let w = sp.weights(alpha);
    let a = weighted_factors(g1, &sp, &w);
    let b = weighted_factors(g2, &sp, &w);
    let h = g1.grid.cell_volume();
    let mut total = C64::new(0.0, 0.0);
    for (m, tm) in g1.terms.iter().enumerate() {
        for (n, tn) in g2.terms.iter().enumerate() {
            let mut v = tm.coeff.conj() * tn.coeff;
            for i in 0..g1.order {
                v *= dot(&a.f[m][i], &b.f[n][i]) * h * dot(&b.g[n][i], &a.g[m][i]) * h;
            }
            total += v;
        }
    }
    Ok(total)
}

pub fn kernel_norm(gamma: &SeparableKernel, alpha: f64) -> Result<f64> {
    Ok(kernel_inner(gamma, gamma, alpha)?.re.max(0.0).sqrt())
}

/// `|| S (dense kernel) ||_2` computed on the dense tensor.
pub fn dense_norm(gamma: &SeparableKernel, alpha: f64) -> Result<f64> {
    let mut dense = gamma.to_dense()?;
    let grid = gamma.grid;
    let h = grid.cell_volume();
    if alpha == 0.0 {
        let s: f64 = dense.iter().map(|v| v.norm_sqr()).sum();
        return Ok((s * h.powi(2 * gamma.order as i32)).sqrt());
    }
    let d = grid.dim();
    let slots = 2 * gamma.order;
    AxisFft::new(grid.points()).transform(&mut dense, slots * d, Direction::Forward);
    let n = grid.len();
    let w: Vec<f64> = (0..n).map(|i| (1.0 + grid.k_squared(i)).powf(alpha)).collect();
    let mut s = 0.0;
    for (flat, v) in dense.iter().enumerate() {
        let mut r = flat;
        let mut weight = 1.0;
        for _ in 0..slots {
            weight *= w[r % n];
            r /= n;
        }
        s += weight * v.norm_sqr();
    }
    Ok((s * h.powi(2 * gamma.order as i32)).sqrt())
}

/// `|| S (a - b) ||_2`; dense when the kernel fits, Gram expansion otherwise.
///
/// The Gram route loses roughly half the significant digits when `a` and `b`
/// nearly agree; use [`matched_distance`] for such comparisons.
pub fn distance(a: &SeparableKernel, b: &SeparableKernel, alpha: f64) -> Result<f64> {
    let diff = a.sub(b)?;
    let side = a.grid.len().pow(a.order as u32);
    if side.saturating_mul(side) <= DENSE_LIMIT {
        dense_norm(&diff, alpha)
    } else {
        kernel_norm(&diff, alpha)
    }
}

/// Term-matched telescoped difference `a - b`, where term `m` of `a` is
/// paired with term `perm[m]` of `b`.
///
/// `c A_1..A_s - c' B_1..B_s = (c - c') A + c' sum_s B_1..B_{s-1} (A_s - B_s) A_{s+1}..`,
/// over all `2k` factors, so nearly equal terms yield small factors and the
/// Gram norm stays accurate.
pub fn telescoped_difference(
    a: &SeparableKernel,
    b: &SeparableKernel,
    perm: &[usize],
) -> Result<SeparableKernel> {
    a.check_compatible(b)?;
    if a.rank() != b.rank() {
        return Err(Error::invalid(format!(
            "matched difference needs equal ranks, got {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let b = b.permuted_terms(perm)?;
    let k = a.order;
    let mut terms = Vec::with_capacity(a.rank() * (2 * k + 1));
    for (ta, tb) in a.terms.iter().zip(&b.terms) {
        if ta.coeff != tb.coeff {
            terms.push(KernelTerm {
                coeff: ta.coeff - tb.coeff,
                ..ta.clone()
            });
        }
        // Factor s in 0..2k: f-slots first, then g-slots.
        for s in 0..2 * k {
            let pick = |t: usize, ua: &Vec<Vec<C64>>, ub: &Vec<Vec<C64>>, base: usize| -> Vec<C64> {
                let idx = base + t;
                if idx < s {
                    ub[t].clone()
                } else if idx > s {
                    ua[t].clone()
                } else {
                    ua[t].iter().zip(&ub[t]).map(|(x, y)| x - y).collect()
                }
            };
            let f: Vec<Vec<C64>> = (0..k).map(|t| pick(t, &ta.f, &tb.f, 0)).collect();
            let g: Vec<Vec<C64>> = (0..k).map(|t| pick(t, &ta.g, &tb.g, k)).collect();
            let diff = if s < k { &f[s] } else { &g[s - k] };
            if diff.iter().all(|v| *v == C64::new(0.0, 0.0)) {
                continue;
            }
            terms.push(KernelTerm {
                coeff: tb.coeff,
                f,
                g,
            });
        }
    }
    SeparableKernel::from_terms(a.grid, k, terms)
}

/// `|| S (a - b) ||_2` through [`telescoped_difference`].
pub fn matched_distance(
    a: &SeparableKernel,
    b: &SeparableKernel,
    perm: &[usize],
    alpha: f64,
) -> Result<f64> {
    kernel_norm(&telescoped_difference(a, b, perm)?, alpha)
}

/// `hermitian(gamma)` test: `|| gamma - gamma* || <= tol max(1, ||gamma||)`.
pub fn is_hermitian(gamma: &SeparableKernel, tol: f64) -> Result<bool> {
    let d = distance(gamma, &gamma.adjoint(), 0.0)?;
    Ok(d <= tol * kernel_norm(gamma, 0.0)?.max(1.0))
}

/// Time quadrature rule for Duhamel integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

impl Quadrature {
    /// Weights for `intervals` equal intervals of width `h`.
    pub fn weights(&self, intervals: usize, h: f64) -> Result<Vec<f64>> {
        if intervals == 0 {
            return Err(Error::invalid("quadrature needs at least one interval"));
        }
        match self {
            Quadrature::Trapezoid => Ok((0..=intervals)
                .map(|q| if q == 0 || q == intervals { 0.5 * h } else { h })
                .collect()),
            Quadrature::Simpson => {
                if !intervals.is_multiple_of(2) {
                    return Err(Error::invalid(format!(
                        "Simpson's rule needs an even number of intervals, got {intervals}"
                    )));
                }
                Ok((0..=intervals)
                    .map(|q| {
                        let c = if q == 0 || q == intervals {
                            1.0
                        } else if q % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        c * h / 3.0
                    })
                    .collect())
            }
        }
    }
}

/// Snapshots at `nodes + 1` equally spaced times covering the whole trajectory.
fn quadrature_snapshots(traj: &Trajectory, nodes: usize) -> Result<Vec<&WaveFunction>> {
    let snaps = &traj.snapshots;
    if snaps.len() < 2 || nodes == 0 || !(snaps.len() - 1).is_multiple_of(nodes) {
        return Err(Error::invalid(format!(
            "trajectory has {} snapshots; {} quadrature intervals need 1 + a multiple of {nodes}",
            snaps.len(),
            nodes
        )));
    }
    let stride = (snaps.len() - 1) / nodes;
    let picked: Vec<&WaveFunction> = snaps.iter().step_by(stride).collect();
    let t0 = picked[0].t;
    let h = (picked[nodes].t - t0) / nodes as f64;
    for (q, s) in picked.iter().enumerate() {
        if (s.t - t0 - q as f64 * h).abs() > 1e-9 * h.abs().max(1e-300) {
            return Err(Error::invalid(format!(
                "snapshot {q} at t={} is not on the uniform quadrature grid",
                s.t
            )));
        }
    }
    Ok(picked)
}

/// Residual of the integral hierarchy equation along a factorized trajectory:
///
/// ```text
/// || gamma_t - U(t) gamma_0 + i b0 sum_j int_0^t U(t - s) B_{j;k+1,k+2} gamma^{(k+2)}_s ds ||_2
/// ```
///
/// with `gamma_s = |phi_s><phi_s|^{(x)k}` and the time integral replaced by the
/// chosen rule on `nodes` intervals.
pub fn duhamel_residual(
    traj: &Trajectory,
    k: usize,
    b0: f64,
    nodes: usize,
    rule: Quadrature,
) -> Result<f64> {
    let snaps = quadrature_snapshots(traj, nodes)?;
    let first = snaps[0];
    let last = snaps[nodes];
    let t = last.t - first.t;
    let weights = rule.weights(nodes, t / nodes as f64)?;
    let mut rhs = free_propagate(&factorized(first, k)?, t);
    let mut integral = SeparableKernel::zero(first.grid, k);
    for (q, phi) in snaps.iter().enumerate() {
        let upper = factorized(phi, k + 2)?;
        let mut sum = SeparableKernel::zero(first.grid, k);
        for j in 1..=k {
            sum = sum.add(&contract(&upper, j)?)?;
        }
        let s = phi.t - first.t;
        integral = integral.add(&free_propagate(&sum, t - s).scaled(C64::new(weights[q], 0.0)))?;
    }
    rhs = rhs.add(&integral.scaled(C64::new(0.0, -b0)))?;
    distance(&factorized(last, k)?, &rhs, 0.0)
}

/// `U(a-b) B_{l;K-3,K-2} U(b-c) B_{i;K-1,K} U(c-d) gamma` for an order-`K` kernel.
pub fn commutation_lhs(
    gamma: &SeparableKernel,
    times: [f64; 4],
    i: usize,
    l: usize,
    part: Contraction,
) -> Result<SeparableKernel> {
    let k = gamma.order;
    let [a, b, c, d] = times;
    let x = free_propagate(gamma, c - d);
    let x = contract_slots(&x, i, k - 1, k, part)?;
    let x = free_propagate(&x, b - c);
    let x = contract_slots(&x, l, k - 3, k - 2, part)?;
    Ok(free_propagate(&x, a - b))
}

/// Reordered side: `U(a-c) B_{i;K-1,K} U(c-b) B_{l;K-3,K-2} U(b-d) gamma`.
///
/// After the first contraction the slots `K-1, K` sit at positions `K-3, K-2`.
pub fn commutation_rhs(
    gamma: &SeparableKernel,
    times: [f64; 4],
    i: usize,
    l: usize,
    part: Contraction,
) -> Result<SeparableKernel> {
    let k = gamma.order;
    let [a, b, c, d] = times;
    let x = free_propagate(gamma, b - d);
    let x = contract_slots(&x, l, k - 3, k - 2, part)?;
    let x = free_propagate(&x, c - b);
    let x = contract_slots(&x, i, k - 3, k - 2, part)?;
    Ok(free_propagate(&x, a - c))
}

/// Pairs term `(s_i, s_l, m)` of the left side with the same term of the right.
fn commutation_perm(rank: usize, part: Contraction) -> Vec<usize> {
    let p = if part == Contraction::Full { 2 } else { 1 };
    let mut perm = vec![0; p * p * rank];
    for s_l in 0..p {
        for s_i in 0..p {
            for m in 0..rank {
                perm[s_l * p * rank + s_i * rank + m] = s_i * p * rank + s_l * rank + m;
            }
        }
    }
    perm
}

/// `|| LHS - RHS ||_2` of the reordering identity for the two innermost
/// contractions of an order-`K` kernel. Needs distinct `i, l <= K - 4`.
pub fn commutation_check(
    gamma: &SeparableKernel,
    times: [f64; 4],
    i: usize,
    l: usize,
    part: Contraction,
) -> Result<f64> {
    let k = gamma.order;
    if k < 5 || i == 0 || l == 0 || i > k - 4 || l > k - 4 {
        return Err(Error::invalid(format!(
            "targets i={i}, l={l} must lie in 1..={} for an order-{k} kernel",
            k.saturating_sub(4)
        )));
    }
    let lhs = commutation_lhs(gamma, times, i, l, part)?;
    let rhs = commutation_rhs(gamma, times, i, l, part)?;
    matched_distance(&lhs, &rhs, &commutation_perm(gamma.rank(), part), 0.0)
}

/// Duhamel integrand of depth `n` at base order `r`:
///
/// ```text
/// U(t_r - t_{r+2}) B_{picks_1; r+1, r+2} U(t_{r+2} - t_{r+4}) ... B_{picks_n; r+2n-1, r+2n} U(t_{r+2n}) gamma_0
/// ```
///
/// `times = [t_r, t_{r+2}, ..., t_{r+2n}]`, `picks` 1-based.
pub fn duhamel_integrand(
    gamma0: &SeparableKernel,
    r: usize,
    picks: &[usize],
    times: &[f64],
    part: Contraction,
) -> Result<SeparableKernel> {
    let n = picks.len();
    if gamma0.order != r + 2 * n {
        return Err(Error::invalid(format!(
            "integrand of depth {n} at base order {r} needs an order-{} kernel, got {}",
            r + 2 * n,
            gamma0.order
        )));
    }
    if times.len() != n + 1 {
        return Err(Error::invalid(format!("need {} times, got {}", n + 1, times.len())));
    }
    let mut x = free_propagate(gamma0, times[n]);
    for c in (1..=n).rev() {
        let p = picks[c - 1];
        if p == 0 || p > r + 2 * c - 2 {
            return Err(Error::invalid(format!(
                "pick {p} of column {c} out of range 1..={}",
                r + 2 * c - 2
            )));
        }
        x = contract_slots(&x, p, r + 2 * c - 1, r + 2 * c, part)?;
        x = free_propagate(&x, times[c - 1] - times[c]);
    }
    Ok(x)
}

/// Term permutation matching an integrand with its image under a move at
/// column `j` (1-based): the sign digits of columns `j` and `j+1` trade places.
pub fn move_term_perm(rank: usize, n: usize, j: usize, part: Contraction) -> Vec<usize> {
    let p: usize = if part == Contraction::Full { 2 } else { 1 };
    let total = rank * p.pow(n as u32);
    // Digit of column c has weight rank * p^{n - c}: column 1 is applied last.
    let weight = |c: usize| rank * p.pow((n - c) as u32);
    (0..total)
        .map(|idx| {
            let m = idx % rank;
            let mut digits: Vec<usize> = (1..=n).map(|c| (idx / weight(c)) % p).collect();
            digits.swap(j - 1, j);
            m + (1..=n).map(|c| digits[c - 1] * weight(c)).sum::<usize>()
        })
        .collect()
}

const KERNEL_MAGIC: &[u8; 8] = b"SEPKERN1";

/// Writes `magic, u64 k, u64 R, u64 d, u64 M, f64 L`, then per term the
/// coefficient `(re, im)` and `2k` field records (`f_1..f_k`, `g_1..g_k`).
pub fn write_kernel<W: Write>(mut w: W, gamma: &SeparableKernel) -> Result<()> {
    let g = gamma.grid;
    w.write_all(KERNEL_MAGIC)?;
    for v in [gamma.order as u64, gamma.rank() as u64, g.dim() as u64, g.points() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&g.length().to_le_bytes())?;
    for t in &gamma.terms {
        w.write_all(&t.coeff.re.to_le_bytes())?;
        w.write_all(&t.coeff.im.to_le_bytes())?;
        for field in t.f.iter().chain(&t.g) {
            nls::write_field_dump(&mut w, g.dim(), g.points(), g.length(), 0.0, field)?;
        }
    }
    Ok(())
}

pub fn read_kernel<R: Read>(mut r: R) -> Result<SeparableKernel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != KERNEL_MAGIC {
        return Err(Error::Serialization("not a separable kernel file".into()));
    }
    let mut u = [0u64; 4];
    let mut buf = [0u8; 8];
    for v in u.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = u64::from_le_bytes(buf);
    }
    r.read_exact(&mut buf)?;
    let length = f64::from_le_bytes(buf);
    let [order, rank, dim, points] = u.map(|v| v as usize);
    let grid = GridSpec::new(dim, points, length)?;
    let mut terms = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let re = f64::from_le_bytes(buf);
        r.read_exact(&mut buf)?;
        let im = f64::from_le_bytes(buf);
        let mut fields = Vec::with_capacity(2 * order);
        for _ in 0..2 * order {
            let (h, v) = nls::read_field_dump(&mut r)?;
            if h.axes != dim || h.points != points {
                return Err(Error::Serialization("factor record does not match the kernel grid".into()));
            }
            fields.push(v);
        }
        let g = fields.split_off(order);
        terms.push(KernelTerm {
            coeff: C64::new(re, im),
            f: fields,
            g,
        });
    }
    SeparableKernel::from_terms(grid, order, terms)
}
