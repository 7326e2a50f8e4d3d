//! Dense multi-index oracles built from explicit sums, sharing no code paths
//! with the separable implementation beyond reading factors.

#![allow(dead_code)]

use quintic::grid::{random_band_limited, GridSpec};
use quintic::kernels::*;
use quintic::nbody::{marginal, NBodyState};
use quintic::nls::{evolve, NlsParams, Trajectory, WaveFunction};
use quintic::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense kernel `gamma[x_1..x_k, x'_1..x'_k]`, row-major over flat node indices.
#[derive(Debug, Clone)]
pub struct Dense {
    pub grid: GridSpec,
    pub order: usize,
    pub data: Vec<C64>,
}

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

impl Dense {
    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    fn digits(&self, mut flat: usize, slots: usize) -> Vec<usize> {
        let n = self.nodes();
        let mut d = vec![0; slots];
        for v in d.iter_mut().rev() {
            *v = flat % n;
            flat /= n;
        }
        d
    }

    fn flat(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |a, &d| a * self.nodes() + d)
    }

    pub fn from_kernel(g: &SeparableKernel) -> Self {
        let n = g.grid().len();
        let k = g.order();
        let total = n.pow(2 * k as u32);
        let mut out = Dense {
            grid: *g.grid(),
            order: k,
            data: vec![zero(); total],
        };
        for flat in 0..total {
            let d = out.digits(flat, 2 * k);
            let mut v = zero();
            for t in g.terms() {
                let mut p = t.coeff;
                for i in 0..k {
                    p *= t.f[i][d[i]] * t.g[i][d[k + i]].conj();
                }
                v += p;
            }
            out.data[flat] = v;
        }
        out
    }

    /// Unitary DFT matrix on flat nodes, in the grid's native bin order.
    pub fn dft(grid: &GridSpec) -> Vec<C64> {
        let n = grid.len();
        let m = grid.points();
        let axes = |flat: usize| -> Vec<usize> {
            if grid.dim() == 1 {
                vec![flat]
            } else {
                vec![flat / m, flat % m]
            }
        };
        let scale = (n as f64).sqrt();
        let mut f = vec![zero(); n * n];
        for kf in 0..n {
            for xf in 0..n {
                let phase: f64 = axes(kf)
                    .iter()
                    .zip(axes(xf))
                    .map(|(&k, x)| -2.0 * std::f64::consts::PI * (k * x) as f64 / m as f64)
                    .sum();
                f[kf * n + xf] = C64::from_polar(1.0 / scale, phase);
            }
        }
        f
    }

    /// `e^{i t Lap}` as an explicit matrix.
    pub fn free_matrix(grid: &GridSpec, t: f64) -> Vec<C64> {
        let n = grid.len();
        let f = Self::dft(grid);
        let mut u = vec![zero(); n * n];
        for x in 0..n {
            for y in 0..n {
                let mut s = zero();
                for k in 0..n {
                    s += f[k * n + x].conj() * C64::from_polar(1.0, -t * grid.k_squared(k)) * f[k * n + y];
                }
                u[x * n + y] = s;
            }
        }
        u
    }

    /// Applies `A_s` to unprimed slot `s` and `conj(A_s)` to primed slot `s`.
    pub fn apply_slots(&self, ops: &[Vec<C64>]) -> Self {
        let n = self.nodes();
        let k = self.order;
        let mut cur = self.data.clone();
        for slot in 0..2 * k {
            let (op, conj) = if slot < k { (&ops[slot], false) } else { (&ops[slot - k], true) };
            let mut next = vec![zero(); cur.len()];
            for flat in 0..cur.len() {
                let d = self.digits(flat, 2 * k);
                let mut dd = d.clone();
                let mut s = zero();
                for y in 0..n {
                    dd[slot] = y;
                    let a = op[d[slot] * n + y];
                    s += if conj { a.conj() } else { a } * cur[self.flat(&dd)];
                }
                next[flat] = s;
            }
            cur = next;
        }
        Dense {
            data: cur,
            ..self.clone()
        }
    }

    pub fn free_propagate(&self, t: f64) -> Self {
        let u = Self::free_matrix(&self.grid, t);
        self.apply_slots(&vec![u; self.order])
    }

    pub fn free_propagate_slots(&self, times: &[f64]) -> Self {
        let ops: Vec<Vec<C64>> = times.iter().map(|&t| Self::free_matrix(&self.grid, t)).collect();
        self.apply_slots(&ops)
    }

    /// Pins slots `a`, `b` (1-based) to node of `j` in the unprimed (plus) or
    /// primed (minus) variables and removes them.
    pub fn contract(&self, j: usize, a: usize, b: usize, plus: bool) -> Self {
        let k = self.order;
        let keep: Vec<usize> = (0..k).filter(|&s| s != a - 1 && s != b - 1).collect();
        let out_order = k - 2;
        let n = self.nodes();
        let total = n.pow(2 * out_order as u32);
        let mut out = Dense {
            grid: self.grid,
            order: out_order,
            data: vec![zero(); total],
        };
        for flat in 0..total {
            let d = out.digits(flat, 2 * out_order);
            let mut full = vec![0usize; 2 * k];
            for (pos, &s) in keep.iter().enumerate() {
                full[s] = d[pos];
                full[k + s] = d[out_order + pos];
            }
            let pin = if plus { full[j - 1] } else { full[k + j - 1] };
            for s in [a - 1, b - 1] {
                full[s] = pin;
                full[k + s] = pin;
            }
            out.data[flat] = self.data[self.flat(&full)];
        }
        out
    }

    pub fn contract_full(&self, j: usize) -> Self {
        let k = self.order;
        let p = self.contract(j, k - 1, k, true);
        let m = self.contract(j, k - 1, k, false);
        p.sub(&m)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Dense {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }

    pub fn trace(&self) -> C64 {
        let n = self.nodes();
        let k = self.order;
        let h = self.grid.cell_volume().powi(k as i32);
        let mut s = zero();
        for x in 0..n.pow(k as u32) {
            let d = self.digits(x, k);
            let mut both = d.clone();
            both.extend(&d);
            s += self.data[self.flat(&both)];
        }
        s * h
    }

    pub fn adjoint(&self) -> Self {
        let k = self.order;
        let mut out = self.clone();
        for flat in 0..self.data.len() {
            let d = self.digits(flat, 2 * k);
            let mut swapped = d[k..].to_vec();
            swapped.extend(&d[..k]);
            out.data[flat] = self.data[self.flat(&swapped)].conj();
        }
        out
    }

    /// `<a, b>` with the Sobolev weight of order `alpha` in every variable.
    pub fn inner(&self, other: &Self, alpha: f64) -> C64 {
        let f = Self::dft(&self.grid);
        let a = self.apply_slots(&vec![f.clone(); self.order]);
        let b = other.apply_slots(&vec![f; self.order]);
        let n = self.nodes();
        let w: Vec<f64> = (0..n).map(|i| (1.0 + self.grid.k_squared(i)).powf(alpha)).collect();
        let mut s = zero();
        for flat in 0..a.data.len() {
            let weight: f64 = self.digits(flat, 2 * self.order).iter().map(|&d| w[d]).product();
            s += a.data[flat].conj() * b.data[flat] * weight;
        }
        s * self.grid.cell_volume().powi(2 * self.order as i32)
    }

    pub fn norm(&self, alpha: f64) -> f64 {
        self.inner(self, alpha).re.max(0.0).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Dense `|phi><phi|^{(x)k}`.
pub fn dense_factorized(phi: &WaveFunction, k: usize) -> Dense {
    let term = KernelTerm {
        coeff: C64::new(1.0, 0.0),
        f: vec![phi.values.clone(); k],
        g: vec![phi.values.clone(); k],
    };
    Dense::from_kernel(&SeparableKernel::from_terms(phi.grid, k, vec![term]).unwrap())
}

/// Hierarchy residual evaluated entrywise on dense tensors.
pub fn dense_duhamel_residual(traj: &Trajectory, k: usize, b0: f64, nodes: usize, rule: Quadrature) -> f64 {
    let stride = (traj.snapshots.len() - 1) / nodes;
    let snaps: Vec<&WaveFunction> = traj.snapshots.iter().step_by(stride).collect();
    let (first, last) = (snaps[0], snaps[nodes]);
    let t = last.t - first.t;
    let w = rule.weights(nodes, t / nodes as f64).unwrap();
    let mut rhs = dense_factorized(first, k).free_propagate(t);
    for (q, phi) in snaps.iter().enumerate() {
        let upper = dense_factorized(phi, k + 2);
        for j in 1..=k {
            let term = upper.contract_full(j).free_propagate(t - (phi.t - first.t));
            for (r, v) in rhs.data.iter_mut().zip(&term.data) {
                *r += C64::new(0.0, -b0) * w[q] * v;
            }
        }
    }
    let diff = dense_factorized(last, k).sub(&rhs);
    diff.norm(0.0)
}

/// `gamma(x; x') = h^{d(N-k)} sum_rest Psi(x, rest) conj(Psi(x', rest))`, scaled
/// by `h^{dk}` into the node basis.
pub fn dense_marginal(psi: &NBodyState, k: usize) -> Vec<C64> {
    let n = psi.grid.len();
    let rows = n.pow(k as u32);
    let rest = psi.values.len() / rows;
    let h = psi.grid.cell_volume();
    let scale = h.powi((psi.particles - k) as i32) * h.powi(k as i32);
    let mut out = vec![zero(); rows * rows];
    for a in 0..rows {
        for b in 0..rows {
            let mut s = zero();
            for c in 0..rest {
                s += psi.values[a * rest + c] * psi.values[b * rest + c].conj();
            }
            out[a * rows + b] = s * scale;
        }
    }
    out
}

/// Relative discrepancy `|a - b| / max(1, |b|)`.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Entrywise discrepancy scaled by the oracle's largest entry.
fn rel_dense(a: &Dense, b: &Dense) -> f64 {
    let scale = b.data.iter().map(|v| v.norm()).fold(1.0, f64::max);
    a.max_abs_diff(b) / scale
}

/// Every kernel operation compared with its dense oracle on small grids.
/// Returns `(label, relative discrepancy)` pairs.
pub fn oracle_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let grids = [
        GridSpec::new(1, 4, 2.0 * std::f64::consts::PI).unwrap(),
        GridSpec::new(1, 4, 3.0).unwrap(),
        GridSpec::new(2, 4, 2.5).unwrap(),
    ];
    for (gi, grid) in grids.iter().enumerate() {
        let max_order = if grid.dim() == 1 { 2 } else { 1 };
        for k in 1..=max_order {
            for rank in 1..=3 {
                let tag = format!("g{gi} k{k} R{rank}");
                let g = random_kernel(*grid, k, rank, 1.0, &mut rng).unwrap();
                let dg = Dense::from_kernel(&g);
                let flat: Vec<C64> = g.to_dense().unwrap();
                let d2 = Dense { data: flat, ..dg.clone() };
                out.push((format!("{tag} to_dense"), rel_dense(&d2, &dg)));
                let probe: Vec<usize> = (0..k).map(|i| (i + 1) % grid.len()).collect();
                let probe_p: Vec<usize> = (0..k).map(|i| (2 * i + 3) % grid.len()).collect();
                let mut idx = probe.clone();
                idx.extend(&probe_p);
                let fl = idx.iter().fold(0, |a, &d| a * grid.len() + d);
                out.push((
                    format!("{tag} value"),
                    (g.value(&probe, &probe_p) - dg.data[fl]).norm() / dg.data[fl].norm().max(1.0),
                ));
                let tr = g.trace();
                out.push((format!("{tag} trace"), (tr - dg.trace()).norm() / dg.trace().norm().max(1.0)));
                out.push((format!("{tag} adjoint"), rel_dense(&Dense::from_kernel(&g.adjoint()), &dg.adjoint())));
                for &t in &[0.0, 0.37, -1.3] {
                    let lhs = Dense::from_kernel(&free_propagate(&g, t));
                    out.push((format!("{tag} free t={t}"), rel_dense(&lhs, &dg.free_propagate(t))));
                }
                let times: Vec<f64> = (0..k).map(|i| 0.25 + 0.6 * i as f64).collect();
                let lhs = Dense::from_kernel(&free_propagate_slots(&g, &times).unwrap());
                out.push((format!("{tag} free slots"), rel_dense(&lhs, &dg.free_propagate_slots(&times))));
                let g2 = random_kernel(*grid, k, 2, 1.0, &mut rng).unwrap();
                let dg2 = Dense::from_kernel(&g2);
                for &alpha in &[0.0, 0.5, 1.0] {
                    let a = kernel_inner(&g, &g2, alpha).unwrap();
                    let b = dg.inner(&dg2, alpha);
                    out.push((format!("{tag} inner a={alpha}"), (a - b).norm() / b.norm().max(1.0)));
                    let n0 = dg.norm(alpha);
                    out.push((format!("{tag} norm a={alpha}"), rel(kernel_norm(&g, alpha).unwrap(), n0)));
                    out.push((format!("{tag} dense norm a={alpha}"), rel(dense_norm(&g, alpha).unwrap(), n0)));
                }
                let tele = telescoped_difference(&g, &g.scaled(C64::new(0.5, 0.25)), &(0..rank).collect::<Vec<_>>())
                    .unwrap();
                let direct = dg.sub(&Dense::from_kernel(&g.scaled(C64::new(0.5, 0.25))));
                out.push((format!("{tag} telescoped"), rel_dense(&Dense::from_kernel(&tele), &direct)));
                if k == 2 {
                    let p = g.permuted_slots(&[1, 0]).unwrap();
                    let dp = dense_swap_slots(&dg);
                    out.push((format!("{tag} permuted slots"), rel_dense(&Dense::from_kernel(&p), &dp)));
                }
            }
        }
        // Contractions from orders 3 and 4 down to orders 1 and 2.
        let max_upper = if grid.dim() == 1 { 4 } else { 3 };
        for upper in 3..=max_upper {
            let g = random_kernel(*grid, upper, 2, 1.0, &mut rng).unwrap();
            let dg = Dense::from_kernel(&g);
            for j in 1..=upper {
                for a in 1..=upper {
                    for b in (a + 1)..=upper {
                        if j == a || j == b {
                            continue;
                        }
                        let tag = format!("g{gi} K{upper} B{j};{a},{b}");
                        let plus = contract_slots(&g, j, a, b, Contraction::Plus).unwrap();
                        let minus = contract_slots(&g, j, a, b, Contraction::Minus).unwrap();
                        let full = contract_slots(&g, j, a, b, Contraction::Full).unwrap();
                        let dp = dg.contract(j, a, b, true);
                        let dm = dg.contract(j, a, b, false);
                        out.push((format!("{tag} plus"), rel_dense(&Dense::from_kernel(&plus), &dp)));
                        out.push((format!("{tag} minus"), rel_dense(&Dense::from_kernel(&minus), &dm)));
                        out.push((format!("{tag} full"), rel_dense(&Dense::from_kernel(&full), &dp.sub(&dm))));
                    }
                }
            }
            let k = upper - 2;
            for j in 1..=k {
                let c = contract(&g, j).unwrap();
                out.push((
                    format!("g{gi} K{upper} contract j={j}"),
                    rel_dense(&Dense::from_kernel(&c), &dg.contract_full(j)),
                ));
            }
        }
    }
    // Hierarchy residual along a short quintic run.
    let grid = GridSpec::new(1, 4, 2.0 * std::f64::consts::PI).unwrap();
    let phi = WaveFunction::new(grid, random_band_limited(&grid, &mut rng, 1.0))
        .unwrap()
        .normalized()
        .unwrap();
    let p = NlsParams::quintic(1.0, 1e-3).unwrap();
    let traj = evolve(&phi, &p, 0.032, 1).unwrap();
    for rule in [Quadrature::Trapezoid, Quadrature::Simpson] {
        let a = duhamel_residual(&traj, 1, 1.0, 8, rule).unwrap();
        let b = dense_duhamel_residual(&traj, 1, 1.0, 8, rule);
        // Unit-mass data: kernels have norm one, so the absolute gap is relative.
        out.push((format!("duhamel {rule:?}"), (a - b).abs()));
    }
    // Partial traces of a symmetric three-particle state.
    for grid in [GridSpec::new(1, 4, 3.0).unwrap(), GridSpec::new(2, 4, 3.0).unwrap()] {
        let phi = WaveFunction::new(grid, random_band_limited(&grid, &mut rng, 1.0))
            .unwrap()
            .normalized()
            .unwrap();
        let mut psi2 = NBodyState::product(&phi, 3, u64::MAX).unwrap();
        for v in psi2.values.iter_mut() {
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        for k in 1..=2 {
            if grid.dim() == 2 && k == 2 {
                continue;
            }
            let m = marginal(&psi2, k, u64::MAX).unwrap();
            let o = dense_marginal(&psi2, k);
            let rows = m.matrix.nrows();
            let mut worst = 0.0f64;
            for a in 0..rows {
                for b in 0..rows {
                    worst = worst.max((m.matrix[(a, b)] - o[a * rows + b]).norm());
                }
            }
            out.push((format!("marginal d{} k{k}", grid.dim()), worst));
        }
    }
    out
}

/// Swaps the two slots of an order-two dense kernel.
pub fn dense_swap_slots(d: &Dense) -> Dense {
    assert_eq!(d.order, 2);
    let n = d.nodes();
    let mut out = d.clone();
    for x1 in 0..n {
        for x2 in 0..n {
            for y1 in 0..n {
                for y2 in 0..n {
                    let dst = ((x1 * n + x2) * n + y1) * n + y2;
                    let src = ((x2 * n + x1) * n + y2) * n + y1;
                    out.data[dst] = d.data[src];
                }
            }
        }
    }
    out
}
