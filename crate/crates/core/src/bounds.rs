//! Numerical probes of weighted integral bounds and multilinear estimates.
//!
//! Every probe reports a supremum over a finite sample together with the
//! relative change of that supremum when the sample is doubled. A probe is
//! `bounded` when the change is below [`STABILITY_TOLERANCE`]; nothing here is
//! a proof.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{AxisFft, Direction, GridSpec};
use crate::kernels::{self, Contraction, SeparableKernel};
use crate::nbody::BasePotential;
use crate::C64;

/// Largest relative change of a supremum under doubling that still counts as stable.
pub const STABILITY_TOLERANCE: f64 = 0.10;

/// Absolute accuracy requested from each quadrature panel.
const PANEL_TOL: f64 = 1e-11;

/// Inner log-radius cutoff; the neglected disc contributes `O(e^{2 V_MIN})`.
const V_MIN: f64 = -20.0;

/// Outer log-radius margin beyond `ln(|P| + 1)`.
const V_MARGIN: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Bounded,
    UnboundedTrend,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Bounded => "bounded",
            Verdict::UnboundedTrend => "unbounded_trend",
        }
    }
}

/// Stabilized supremum of one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub observed_sup: f64,
    /// Supremum over the half-size sample.
    pub half_sup: f64,
    pub relative_change: f64,
    pub sample_size: usize,
    pub verdict: Verdict,
    pub seed: Option<u64>,
    /// Every sampled ratio of the full sample, in sampling order.
    pub samples: Vec<f64>,
}

impl BoundReport {
    /// Classifies a sample whose first half is the half-size sample.
    pub fn from_samples(
        name: &str,
        params: &[(&str, f64)],
        samples: Vec<f64>,
        half_len: usize,
        seed: Option<u64>,
    ) -> Self {
        let sup = |s: &[f64]| s.iter().cloned().fold(0.0f64, |a, b| if b.is_nan() { a } else { a.max(b) });
        let full = sup(&samples);
        let half = sup(&samples[..half_len.min(samples.len())]);
        Self::from_sups(name, params, full, half, samples, seed)
    }

    pub fn from_sups(
        name: &str,
        params: &[(&str, f64)],
        full: f64,
        half: f64,
        samples: Vec<f64>,
        seed: Option<u64>,
    ) -> Self {
        let change = relative_change(full, half);
        let verdict = if full.is_finite() && change < STABILITY_TOLERANCE {
            Verdict::Bounded
        } else {
            Verdict::UnboundedTrend
        };
        BoundReport {
            name: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            observed_sup: full,
            half_sup: half,
            relative_change: change,
            sample_size: samples.len(),
            verdict,
            seed,
            samples,
        }
    }
}

fn relative_change(full: f64, half: f64) -> f64 {
    if !(full.is_finite() && half.is_finite()) {
        return f64::INFINITY;
    }
    if full == 0.0 && half == 0.0 {
        return 0.0;
    }
    (full - half).abs() / full.abs().max(half.abs())
}

/// CSV with columns `name,params,observed_sup,half_sup,relative_change,sample_size,verdict,seed`.
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[BoundReport]) -> Result<()> {
    writeln!(w, "name,params,observed_sup,half_sup,relative_change,sample_size,verdict,seed")?;
    for r in reports {
        let params: Vec<String> = r.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(
            w,
            "{},{},{:.12e},{:.12e},{:.6e},{},{},{}",
            r.name,
            params.join(";"),
            r.observed_sup,
            r.half_sup,
            r.relative_change,
            r.sample_size,
            r.verdict.as_str(),
            r.seed.map(|s| s.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

/// Quadrature result with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadValue {
    pub value: f64,
    pub error: f64,
    /// False when the integral diverges; `value` is then infinite.
    pub converged: bool,
}

/// Sum of tanh-sinh panels between consecutive sorted breakpoints.
fn integrate_panels<F: Fn(f64) -> f64>(f: &F, breaks: &mut Vec<f64>) -> (f64, f64) {
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * a.abs().max(1.0));
    let mut value = 0.0;
    let mut error = 0.0;
    for w in breaks.windows(2) {
        let out = quadrature::double_exponential::integrate(f, w[0], w[1], PANEL_TOL);
        value += out.integral;
        error += out.error_estimate;
    }
    (value, error)
}

fn japanese(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}

/// `int_{R^d} dy <P - y>^{-(2 - 2 alpha)} <y>^{-2}`.
///
/// In `d = 1` the substitution `y = tan(theta)` maps the integral to a finite
/// interval with a bounded integrand, so no tail is neglected. In `d = 2`
/// polar coordinates with log-radius `v = ln rho` are cut at `v = -20` and
/// `V = ln(|P| + 1) + 15`; the outer remainder equals `2 pi e^{-s V} / s` up to
/// a relative `O(e^{-2V})` and is added analytically. At `s = 0` (`alpha = 1`)
/// the `d = 2` integral diverges and is returned as non-converged.
pub fn crucialint(alpha: f64, d: usize, p: &[f64]) -> Result<QuadValue> {
    check_alpha_d(alpha, d)?;
    if p.len() != d {
        return Err(Error::invalid(format!("P must have {d} components, got {}", p.len())));
    }
    let s = 2.0 - 2.0 * alpha;
    match d {
        1 => Ok(crucialint_1d(s, p[0])),
        _ => Ok(crucialint_2d(s, (p[0] * p[0] + p[1] * p[1]).sqrt())),
    }
}

fn check_alpha_d(alpha: f64, d: usize) -> Result<()> {
    let mut v = Vec::new();
    if !(alpha > 0.0 && alpha <= 1.0) {
        v.push(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    if d != 1 && d != 2 {
        v.push(format!("dimension must be 1 or 2, got {d}"));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

fn crucialint_1d(s: f64, p: f64) -> QuadValue {
    let half = 0.5 * PI;
    let f = |theta: f64| japanese(p - theta.tan()).powf(-s);
    let mut breaks = vec![-half, half, p.atan()];
    for delta in [0.5, 4.0, 32.0] {
        breaks.push((p - delta).atan());
        breaks.push((p + delta).atan());
    }
    let (value, error) = integrate_panels(&f, &mut breaks);
    QuadValue {
        value,
        error,
        converged: true,
    }
}

/// `int_0^{2 pi} <P - rho e^{i phi}>^{-s} d phi` for `|P| = p`.
fn angular_2d(s: f64, p: f64, rho: f64) -> (f64, f64) {
    let base = 1.0 + p * p + rho * rho;
    let f = |phi: f64| (base - 2.0 * p * rho * phi.cos()).powf(-0.5 * s);
    let mut breaks = vec![0.0, PI];
    for delta in [0.5, 4.0, 32.0] {
        let b = delta / rho.max(1e-300);
        if b < PI {
            breaks.push(b);
        }
    }
    let (v, e) = integrate_panels(&f, &mut breaks);
    (2.0 * v, 2.0 * e)
}

fn log_radial_breaks(p: f64, upper: f64) -> Vec<f64> {
    let mut breaks = vec![V_MIN, upper, 0.0];
    if p > 0.0 {
        breaks.push(p.ln());
        for delta in [0.5, 4.0, 32.0] {
            if p - delta > 0.0 {
                breaks.push((p - delta).ln());
            }
            breaks.push((p + delta).ln());
        }
    }
    breaks.retain(|b| *b >= V_MIN && *b <= upper);
    breaks
}

fn crucialint_2d(s: f64, p: f64) -> QuadValue {
    if s == 0.0 {
        return QuadValue {
            value: f64::INFINITY,
            error: f64::INFINITY,
            converged: false,
        };
    }
    let upper = (p + 1.0).ln() + V_MARGIN;
    let err = std::cell::Cell::new(0.0);
    let f = |v: f64| {
        let rho = v.exp();
        let (a, e) = angular_2d(s, p, rho);
        let w = rho * rho / (1.0 + rho * rho);
        err.set(err.get() + e * w);
        w * a
    };
    let mut breaks = log_radial_breaks(p, upper);
    let (body, body_err) = integrate_panels(&f, &mut breaks);
    let tail = 2.0 * PI * (-s * upper).exp() / s;
    QuadValue {
        value: body + tail,
        error: body_err + tail * (-2.0 * upper).exp() + (2.0 * V_MIN).exp(),
        converged: true,
    }
}

/// `{0} ∪` `count - 1` log-spaced points in `[1e-2, p_max]`.
pub fn p_grid(count: usize, p_max: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    if count > 1 {
        let (lo, hi) = (1e-2f64.ln(), p_max.ln());
        let n = count - 1;
        out.extend((0..n).map(|i| (lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64).exp()));
    }
    out
}

/// `sup_P <P>^{2 - 2 alpha} crucialint(alpha, d, P)` over a P-grid of `count`
/// points up to `p_max`, compared with the grid of `count / 2` points.
pub fn crucialint_ratio_report(alpha: f64, d: usize, count: usize, p_max: f64) -> Result<BoundReport> {
    check_alpha_d(alpha, d)?;
    let s = 2.0 - 2.0 * alpha;
    let ratio = |p: f64| -> Result<f64> {
        let mut v = vec![0.0; d];
        v[0] = p;
        let q = crucialint(alpha, d, &v)?;
        Ok(if q.converged { q.value * japanese(p).powf(s) } else { f64::INFINITY })
    };
    let full: Vec<f64> = p_grid(count, p_max).into_iter().map(ratio).collect::<Result<_>>()?;
    let half: Vec<f64> = p_grid(count / 2, p_max).into_iter().map(ratio).collect::<Result<_>>()?;
    let sup = |x: &[f64]| x.iter().cloned().fold(0.0, f64::max);
    Ok(BoundReport::from_sups(
        "crucialint",
        &[("alpha", alpha), ("d", d as f64), ("p_max", p_max)],
        sup(&full),
        sup(&half),
        full,
        None,
    ))
}

/// Ratio `<P>^{s} crucialint(P)` at `P` and `2P`; a log-type growth of the
/// ratio shows up as a positive difference.
pub fn crucialint_growth(alpha: f64, d: usize, p: f64) -> Result<(f64, f64)> {
    let s = 2.0 - 2.0 * alpha;
    let at = |q: f64| -> Result<f64> {
        let mut v = vec![0.0; d];
        v[0] = q;
        Ok(crucialint(alpha, d, &v)?.value * japanese(q).powf(s))
    };
    Ok((at(p)?, at(2.0 * p)?))
}

/// `C(P) = int dy dz <P - y - z>^{-s} <y>^{-2} <z>^{-2}`, evaluated as
/// `int dz <z>^{-2} crucialint(P - z)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CAlphaValue {
    pub p: f64,
    pub value: f64,
    /// Difference to the run with refined truncation and inner accuracy.
    pub error_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CAlphaReport {
    pub alpha: f64,
    pub d: usize,
    pub values: Vec<CAlphaValue>,
    pub sup: f64,
    pub report: BoundReport,
}

fn c_alpha_1d(s: f64, p: f64) -> (f64, f64) {
    let half = 0.5 * PI;
    let f = |theta: f64| crucialint_1d(s, p - theta.tan()).value;
    let mut breaks = vec![-half, half, p.atan()];
    for delta in [0.5, 4.0, 32.0] {
        breaks.push((p - delta).atan());
        breaks.push((p + delta).atan());
    }
    integrate_panels(&f, &mut breaks)
}

/// Radial table of the `d = 2` inner integral with log-linear interpolation.
struct RadialTable {
    logq: Vec<f64>,
    values: Vec<f64>,
    at_zero: f64,
}

impl RadialTable {
    fn new(s: f64, q_max: f64, per_decade: usize) -> Self {
        let lo = -3.0f64;
        let hi = q_max.log10();
        let n = ((hi - lo) * per_decade as f64).ceil() as usize + 1;
        let logq: Vec<f64> = (0..n)
            .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64) * std::f64::consts::LN_10)
            .collect();
        let values = logq.iter().map(|l| crucialint_2d(s, l.exp()).value).collect();
        RadialTable {
            logq,
            values,
            at_zero: crucialint_2d(s, 0.0).value,
        }
    }

    fn eval(&self, q: f64) -> f64 {
        let l0 = self.logq[0];
        if q <= l0.exp() {
            let t = q / l0.exp();
            return self.at_zero + (self.values[0] - self.at_zero) * t * t;
        }
        let l = q.ln();
        let last = self.logq.len() - 1;
        if l >= self.logq[last] {
            return self.values[last];
        }
        let step = self.logq[1] - self.logq[0];
        let i = (((l - l0) / step) as usize).min(last - 1);
        let t = (l - self.logq[i]) / step;
        let (a, b) = (self.values[i].ln(), self.values[i + 1].ln());
        (a + (b - a) * t).exp()
    }
}

fn c_alpha_2d(s: f64, p: f64, table: &RadialTable, margin: f64) -> f64 {
    let upper = (p + 1.0).ln() + margin;
    let f = |v: f64| {
        let rho = v.exp();
        let inner = |phi: f64| table.eval((p * p + rho * rho - 2.0 * p * rho * phi.cos()).max(0.0).sqrt());
        let mut breaks = vec![0.0, PI];
        for delta in [0.5, 4.0] {
            let b = delta / rho.max(1e-300);
            if b < PI {
                breaks.push(b);
            }
        }
        let (a, _) = integrate_panels(&inner, &mut breaks);
        rho * rho / (1.0 + rho * rho) * 2.0 * a
    };
    let mut breaks = log_radial_breaks(p, upper);
    let (body, _) = integrate_panels(&f, &mut breaks);
    // Remainder with g(rho) ~ g(R) (R / rho)^s ln(rho) / ln(R).
    let r = upper.exp();
    let g = table.eval(r);
    body + 2.0 * PI * g * (1.0 / s + 1.0 / (s * s * upper))
}

/// `sup_P C(P)` over the P-grid of `count` points up to `p_max`.
pub fn c_alpha(alpha: f64, d: usize, count: usize, p_max: f64) -> Result<CAlphaReport> {
    check_alpha_d(alpha, d)?;
    let s = 2.0 - 2.0 * alpha;
    if d == 2 && s == 0.0 {
        let report = BoundReport::from_sups(
            "c_alpha",
            &[("alpha", alpha), ("d", 2.0)],
            f64::INFINITY,
            f64::INFINITY,
            vec![],
            None,
        );
        return Ok(CAlphaReport {
            alpha,
            d,
            values: vec![],
            sup: f64::INFINITY,
            report,
        });
    }
    let grid = p_grid(count, p_max);
    let values: Vec<CAlphaValue> = match d {
        1 => grid
            .iter()
            .map(|&p| {
                let (v, e) = c_alpha_1d(s, p);
                CAlphaValue {
                    p,
                    value: v,
                    error_bar: e,
                }
            })
            .collect(),
        _ => {
            let q_max = (p_max + 1.0) * (V_MARGIN + 5.0).exp() * 4.0;
            let coarse = RadialTable::new(s, q_max, 8);
            let fine = RadialTable::new(s, q_max, 16);
            grid.iter()
                .map(|&p| {
                    let a = c_alpha_2d(s, p, &coarse, V_MARGIN);
                    let b = c_alpha_2d(s, p, &fine, V_MARGIN + 5.0);
                    CAlphaValue {
                        p,
                        value: b,
                        error_bar: (a - b).abs(),
                    }
                })
                .collect()
        }
    };
    let sup = values.iter().map(|v| v.value).fold(0.0, f64::max);
    let half_grid: Vec<f64> = p_grid(count / 2, p_max);
    let half = values
        .iter()
        .filter(|v| half_grid.iter().any(|h| (h - v.p).abs() <= 1e-12 * v.p.max(1.0)))
        .map(|v| v.value)
        .fold(0.0, f64::max);
    let half = if half > 0.0 { half } else { sup };
    let report = BoundReport::from_sups(
        "c_alpha",
        &[("alpha", alpha), ("d", d as f64), ("p_max", p_max)],
        sup,
        half,
        values.iter().map(|v| v.value).collect(),
        None,
    );
    Ok(CAlphaReport {
        alpha,
        d,
        values,
        sup,
        report,
    })
}

/// Two-particle field on a `d`-dimensional grid: `2d` axes of `M` points.
#[derive(Debug, Clone, PartialEq)]
pub struct PairField {
    pub grid: GridSpec,
    pub values: Vec<C64>,
}

impl PairField {
    pub fn new(grid: GridSpec, values: Vec<C64>) -> Result<Self> {
        let need = grid.len() * grid.len();
        if values.len() != need {
            return Err(Error::invalid(format!(
                "two-particle field needs {need} values, got {}",
                values.len()
            )));
        }
        Ok(PairField { grid, values })
    }

    pub fn constant(grid: GridSpec, c: C64) -> Self {
        PairField {
            values: vec![c; grid.len() * grid.len()],
            grid,
        }
    }

    fn cell(&self) -> f64 {
        self.grid.cell_volume().powi(2)
    }

    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.cell()).sqrt()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        (self.values.iter().map(|v| v.norm().powf(p)).sum::<f64>() * self.cell()).powf(1.0 / p)
    }

    /// `|| <grad_1> <grad_2> psi ||_2`.
    pub fn mixed_h1_norm(&self) -> f64 {
        let n = self.grid.len();
        let mut freq = self.values.clone();
        AxisFft::new(self.grid.points()).transform(&mut freq, 2 * self.grid.dim(), Direction::Forward);
        let s: f64 = freq
            .iter()
            .enumerate()
            .map(|(i, v)| (1.0 + self.grid.k_squared(i / n)) * (1.0 + self.grid.k_squared(i % n)) * v.norm_sqr())
            .sum();
        (s * self.cell()).sqrt()
    }

    pub fn random<R: Rng + ?Sized>(grid: GridSpec, decay: f64, rng: &mut R) -> Self {
        let n = grid.len();
        let m = grid.points() as i64;
        let cutoff = m / 3;
        let d = grid.dim();
        let pm = grid.points();
        let inside = |node: usize| -> bool {
            match d {
                1 => grid.signed_bin(node).abs() <= cutoff,
                _ => grid.signed_bin(node / pm).abs() <= cutoff && grid.signed_bin(node % pm).abs() <= cutoff,
            }
        };
        let mut freq: Vec<C64> = (0..n * n)
            .map(|i| {
                let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let (a, b) = (i / n, i % n);
                if inside(a) && inside(b) {
                    c * ((1.0 + grid.k_squared(a)) * (1.0 + grid.k_squared(b))).powf(-0.5 * decay)
                } else {
                    C64::new(0.0, 0.0)
                }
            })
            .collect();
        AxisFft::new(grid.points()).transform(&mut freq, 2 * d, Direction::Inverse);
        let mut f = PairField { grid, values: freq };
        let nrm = f.norm();
        if nrm > 0.0 {
            f.values.iter_mut().for_each(|v| *v /= nrm);
        }
        f
    }
}

fn check_trilinear_p(p: f64, d: usize) -> Result<()> {
    let ok = match d {
        1 => p > 1.0,
        _ => p >= 2.0 * d as f64,
    };
    if ok && p.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "exponent p={p} outside the admissible range for d={d} (p > 1 in d = 1, p >= 2d otherwise)"
        )))
    }
}

/// `|<psi_1, V psi_2>| / (||V||_p ||psi_1||_2 ||<grad_1><grad_2> psi_2||_2)`;
/// `None` when the denominator vanishes.
pub fn sobolev_trilinear_ratio(v: &PairField, psi1: &PairField, psi2: &PairField, p: f64) -> Result<Option<f64>> {
    check_trilinear_p(p, v.grid.dim())?;
    if v.grid != psi1.grid || v.grid != psi2.grid {
        return Err(Error::invalid("fields live on different grids"));
    }
    let den = v.lp_norm(p) * psi1.norm() * psi2.mixed_h1_norm();
    if den == 0.0 {
        return Ok(None);
    }
    let num: C64 = psi1
        .values
        .iter()
        .zip(&v.values)
        .zip(&psi2.values)
        .map(|((a, w), b)| a.conj() * w * b)
        .sum::<C64>()
        * psi1.cell();
    Ok(Some(num.norm() / den))
}

/// Sup of the trilinear ratio over random smooth `(psi_1, psi_2, V >= 0)`.
pub fn trilinear_report(grid: GridSpec, p: f64, samples: usize, decay: f64, seed: u64) -> Result<BoundReport> {
    check_trilinear_p(p, grid.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        let a = PairField::random(grid, decay, &mut rng);
        let b = PairField::random(grid, decay, &mut rng);
        let w = PairField::random(grid, decay, &mut rng);
        let v = PairField {
            grid,
            values: w.values.iter().map(|x| C64::new(x.norm_sqr(), 0.0)).collect(),
        };
        if let Some(r) = sobolev_trilinear_ratio(&v, &a, &b, p)? {
            out.push(r);
        }
    }
    Ok(BoundReport::from_samples(
        "sobolev_trilinear",
        &[("p", p), ("d", grid.dim() as f64), ("decay", decay)],
        out,
        samples / 2,
        Some(seed),
    ))
}

/// `||S^(alpha) B_j gamma|| / ||S^(alpha) gamma||`; `None` for the zero kernel.
pub fn highreg_ratio(gamma: &SeparableKernel, j: usize, alpha: f64) -> Result<Option<f64>> {
    let den = kernels::kernel_norm(gamma, alpha)?;
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some(kernels::kernel_norm(&kernels::contract(gamma, j)?, alpha)? / den))
}

/// Sup of [`highreg_ratio`] over random rank-`rank` kernels of order `k + 2`.
#[allow(clippy::too_many_arguments)]
pub fn highreg_report(
    grid: GridSpec,
    k: usize,
    j: usize,
    alpha: f64,
    rank: usize,
    samples: usize,
    decay: f64,
    seed: u64,
) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        let g = kernels::random_kernel(grid, k + 2, rank, decay, &mut rng)?;
        if let Some(r) = highreg_ratio(&g, j, alpha)? {
            out.push(r);
        }
    }
    Ok(BoundReport::from_samples(
        "highreg",
        &[("alpha", alpha), ("d", grid.dim() as f64), ("decay", decay), ("rank", rank as f64)],
        out,
        samples / 2,
        Some(seed),
    ))
}

/// Structural positivity: every term is `c |psi><psi|` with `c >= 0`.
fn check_positive(gamma: &SeparableKernel) -> Result<()> {
    for (m, t) in gamma.terms().iter().enumerate() {
        if !(t.coeff.im == 0.0 && t.coeff.re >= 0.0) || t.f != t.g {
            return Err(Error::invalid(format!(
                "kernel term {m} is not of the form c |psi><psi| with c >= 0"
            )));
        }
    }
    Ok(())
}

/// `sum_m c_m prod_i ||S^1 f_{m,i}||^2 = Tr prod_i (1 - Lap_i) gamma` for positive kernels.
pub fn energy_trace(gamma: &SeparableKernel) -> Result<f64> {
    check_positive(gamma)?;
    let grid = *gamma.grid();
    let w: Vec<f64> = (0..grid.len()).map(|i| 1.0 + grid.k_squared(i)).collect();
    let fft = AxisFft::new(grid.points());
    let h = grid.cell_volume();
    let mut total = 0.0;
    for t in gamma.terms() {
        let mut v = t.coeff.re;
        for f in &t.f {
            let mut x = f.clone();
            fft.transform(&mut x, grid.dim(), Direction::Forward);
            v *= x.iter().zip(&w).map(|(a, s)| s * a.norm_sqr()).sum::<f64>() * h;
        }
        total += v;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KmCheck {
    /// `||S^(alpha) B_j gamma||_2`.
    pub lhs: f64,
    /// `||S^(alpha) B+_j gamma||_2`.
    pub lhs_plus: f64,
    pub rhs: f64,
}

fn check_km_alpha(alpha: f64, d: usize) -> Result<()> {
    let ok = match d {
        1 => (0.0..=1.0).contains(&alpha),
        _ => (0.0..1.0).contains(&alpha),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha={alpha} outside the admissible range for d={d} (alpha <= 1 in d = 1, alpha < 1 in d = 2)"
        )))
    }
}

/// Contraction norm against the energy trace of a positive kernel.
pub fn km_bound_check(gamma: &SeparableKernel, j: usize, alpha: f64) -> Result<KmCheck> {
    check_km_alpha(alpha, gamma.grid().dim())?;
    check_positive(gamma)?;
    if gamma.rank() == 0 {
        return Ok(KmCheck {
            lhs: 0.0,
            lhs_plus: 0.0,
            rhs: 0.0,
        });
    }
    Ok(KmCheck {
        lhs: kernels::kernel_norm(&kernels::contract(gamma, j)?, alpha)?,
        lhs_plus: kernels::kernel_norm(&kernels::contract_plus(gamma, j)?, alpha)?,
        rhs: energy_trace(gamma)?,
    })
}

pub fn km_report(grid: GridSpec, k: usize, j: usize, alpha: f64, rank: usize, samples: usize, seed: u64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let g = kernels::random_positive_kernel(grid, k + 2, rank, 1.0, &mut rng)?;
        let c = km_bound_check(&g, j, alpha)?;
        out.push(c.lhs / c.rhs);
    }
    Ok(BoundReport::from_samples(
        "km_trace",
        &[("alpha", alpha), ("d", grid.dim() as f64), ("rank", rank as f64)],
        out,
        samples / 2,
        Some(seed),
    ))
}

/// Mollifier profile `h` with `int h = 1`, used as `h_a(x) = a^{-d} h(x / a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mollifier {
    Gaussian,
    /// The grid delta itself; the control case with vanishing left side.
    GridDelta,
}

/// One-particle observable, a real Fourier multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Identity,
    /// `(1 - Lap)^{-s/2}`
    Smoothing(f64),
}

impl Observable {
    fn symbol(&self, k2: f64) -> f64 {
        match *self {
            Observable::Identity => 1.0,
            Observable::Smoothing(s) => (1.0 + k2).powf(-0.5 * s),
        }
    }

    /// Operator norm, the sup of the symbol.
    pub fn norm(&self) -> f64 {
        1.0
    }
}

/// Periodic mollifier tabulated on the grid and normalized so that `h^d sum h_a = 1`.
pub fn mollifier_field(grid: &GridSpec, profile: Mollifier, a: f64) -> Vec<C64> {
    let n = grid.len();
    let m = grid.points();
    let d = grid.dim();
    let h = grid.spacing();
    let image = |j: usize| -> f64 {
        let j = j as i64;
        let m = m as i64;
        (if j >= m / 2 { j - m } else { j }) as f64 * h
    };
    let mut out: Vec<C64> = match profile {
        Mollifier::Gaussian => (0..n)
            .map(|i| {
                let r2 = match d {
                    1 => image(i).powi(2),
                    _ => image(i / m).powi(2) + image(i % m).powi(2),
                };
                C64::new((-0.5 * r2 / (a * a)).exp(), 0.0)
            })
            .collect(),
        Mollifier::GridDelta => {
            let mut v = vec![C64::new(0.0, 0.0); n];
            v[0] = C64::new(1.0, 0.0);
            v
        }
    };
    let total: f64 = out.iter().map(|v| v.re).sum::<f64>() * grid.cell_volume();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// `(h_a * u)(x) = h^d sum_y h_a(x - y) u(y)` through the FFT.
pub fn periodic_convolve(grid: &GridSpec, kernel: &[C64], u: &[C64]) -> Vec<C64> {
    let fft = AxisFft::new(grid.points());
    let d = grid.dim();
    let mut a = kernel.to_vec();
    let mut b = u.to_vec();
    fft.transform(&mut a, d, Direction::Forward);
    fft.transform(&mut b, d, Direction::Forward);
    let scale = (grid.len() as f64).sqrt() * grid.cell_volume();
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y * scale);
    fft.transform(&mut a, d, Direction::Inverse);
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoincareValue {
    pub a: f64,
    pub lhs: f64,
    pub bound_factor: f64,
}

/// Mollified against exact pair contraction for `k = 1`:
///
/// ```text
/// lhs = | sum_m c_m int conj(J g_1) f_1 [ (h_a * u_2)(h_a * u_3) - u_2 u_3 ] |,  u_i = conj(g_i) f_i,
/// ```
///
/// and `bound_factor = a^kappa |||J||| Tr |S_1 S_2 S_3 gamma S_3 S_2 S_1|`.
pub fn poincare_check(
    profile: Mollifier,
    a: f64,
    kappa: f64,
    gamma: &SeparableKernel,
    obs: Observable,
) -> Result<PoincareValue> {
    let grid = *gamma.grid();
    if gamma.order() != 3 {
        return Err(Error::invalid(format!("needs an order-3 kernel, got {}", gamma.order())));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::invalid(format!("kappa must lie in [0, 1), got {kappa}")));
    }
    if profile == Mollifier::Gaussian && !(a >= 2.0 * grid.spacing()) {
        return Err(Error::invalid(format!(
            "mollifier width a={a} is below twice the grid spacing {}",
            grid.spacing()
        )));
    }
    let bound = a.powf(kappa) * obs.norm() * energy_trace(gamma)?;
    let ha = mollifier_field(&grid, profile, a);
    let fft = AxisFft::new(grid.points());
    let symbol: Vec<f64> = (0..grid.len()).map(|i| obs.symbol(grid.k_squared(i))).collect();
    let h = grid.cell_volume();
    let mut total = C64::new(0.0, 0.0);
    for t in gamma.terms() {
        let mut jg = t.g[0].clone();
        fft.transform(&mut jg, grid.dim(), Direction::Forward);
        jg.iter_mut().zip(&symbol).for_each(|(v, s)| *v *= s);
        fft.transform(&mut jg, grid.dim(), Direction::Inverse);
        let u2: Vec<C64> = t.f[1].iter().zip(&t.g[1]).map(|(f, g)| g.conj() * f).collect();
        let u3: Vec<C64> = t.f[2].iter().zip(&t.g[2]).map(|(f, g)| g.conj() * f).collect();
        let s2 = periodic_convolve(&grid, &ha, &u2);
        let s3 = periodic_convolve(&grid, &ha, &u3);
        let s: C64 = (0..grid.len())
            .map(|x| jg[x].conj() * t.f[0][x] * (s2[x] * s3[x] - u2[x] * u3[x]))
            .sum();
        total += t.coeff * s * h;
    }
    Ok(PoincareValue {
        a,
        lhs: total.norm(),
        bound_factor: bound,
    })
}

/// Ladder of [`poincare_check`] values with `lhs / a^kappa` spread.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoincareLadder {
    pub kappa: f64,
    pub values: Vec<PoincareValue>,
    /// `lhs / a^kappa` per rung.
    pub scaled: Vec<f64>,
    /// `max / min - 1` of the scaled values.
    pub variation: f64,
    /// Fitted exponent `q` of `lhs ~ a^q`.
    pub fitted_exponent: f64,
}

pub fn poincare_ladder(
    profile: Mollifier,
    ladder: &[f64],
    kappa: f64,
    gamma: &SeparableKernel,
    obs: Observable,
) -> Result<PoincareLadder> {
    let values: Vec<PoincareValue> = ladder
        .iter()
        .map(|&a| poincare_check(profile, a, kappa, gamma, obs))
        .collect::<Result<_>>()?;
    let scaled: Vec<f64> = values.iter().map(|v| v.lhs / v.a.powf(kappa)).collect();
    let max = scaled.iter().cloned().fold(0.0, f64::max);
    let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let pts: Vec<(f64, f64)> = values.iter().map(|v| (v.a.ln(), v.lhs.ln())).collect();
    Ok(PoincareLadder {
        kappa,
        variation: if min > 0.0 { max / min - 1.0 } else { f64::INFINITY },
        fitted_exponent: fit_slope(&pts),
        values,
        scaled,
    })
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub norm: f64,
    /// `norm / ||grad V||_{2p}`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    pub predicted: f64,
}

/// `|| grad V_N ||_{L^{2p}(R^{2d})}` by tensor trapezoid quadrature on the box
/// `[-8 w N^{-beta}, 8 w N^{-beta}]^{2d}` with `points` nodes per axis.
pub fn gradient_norm(base: &BasePotential, beta: f64, n: usize, p: f64, d: usize, points: usize) -> Result<f64> {
    let width = match *base {
        BasePotential::Gaussian { width, .. } => width,
        _ => return Err(Error::invalid("gradient norm needs a decaying potential")),
    };
    let scale = (n as f64).powf(beta);
    let half = 8.0 * width / scale;
    let h = 2.0 * half / points as f64;
    let axes = 2 * d;
    let total = points.pow(axes as u32);
    let amp = scale.powi(2 * d as i32 + 1);
    let mut coords = vec![0.0; axes];
    let mut scaled = vec![0.0; axes];
    let mut sum = 0.0;
    for flat in 0..total {
        let mut r = flat;
        for c in coords.iter_mut().rev() {
            *c = -half + (r % points) as f64 * h;
            r /= points;
        }
        scaled.iter_mut().zip(&coords).for_each(|(s, c)| *s = c * scale);
        let g = base.gradient(&scaled[..d], &scaled[d..]);
        let g2: f64 = g.iter().map(|v| (amp * v).powi(2)).sum();
        sum += g2.powf(p);
    }
    let value = (sum * h.powi(axes as i32)).powf(1.0 / (2.0 * p));
    if !value.is_finite() {
        return Err(Error::numerical("gradient norm quadrature produced a non-finite value"));
    }
    Ok(value)
}

/// Predicted exponent `2 beta (d + 1/2 - d / (2p))`.
pub fn scaling_exponent(beta: f64, p: f64, d: usize) -> f64 {
    2.0 * beta * (d as f64 + 0.5 - d as f64 / (2.0 * p))
}

pub fn potential_scaling_check(
    base: &BasePotential,
    beta: f64,
    n_list: &[usize],
    p: f64,
    d: usize,
    points: usize,
) -> Result<ScalingTable> {
    if n_list.len() < 2 {
        return Err(Error::invalid("need at least two particle numbers"));
    }
    let reference = gradient_norm(base, 0.0, 1, p, d, points)?;
    let rows: Vec<ScalingRow> = n_list
        .iter()
        .map(|&n| {
            let norm = gradient_norm(base, beta, n, p, d, points)?;
            Ok(ScalingRow {
                n,
                norm,
                ratio: norm / reference,
            })
        })
        .collect::<Result<_>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.n as f64).ln(), r.norm.ln())).collect();
    Ok(ScalingTable {
        slope: fit_slope(&pts),
        predicted: scaling_exponent(beta, p, d),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpacetimeProbe {
    pub lhs: f64,
    pub rhs: f64,
    /// `(window, lhs)` for the windows `T_w / 2^i`.
    pub window_curve: Vec<(f64, f64)>,
    /// Whether `alpha` lies in `(5/6, 1)`.
    pub within_range: bool,
}

/// Finite-window `L^2_t` norm of `S B_j U(t) gamma_0` against `||S gamma_0||`.
pub fn spacetime_bound_probe(
    gamma0: &SeparableKernel,
    j: usize,
    alpha: f64,
    window: f64,
    nodes: usize,
) -> Result<SpacetimeProbe> {
    if gamma0.grid().dim() != 2 {
        return Err(Error::invalid(format!(
            "space-time probe needs d = 2, got d = {}",
            gamma0.grid().dim()
        )));
    }
    if !(window > 0.0) || nodes < 2 || !nodes.is_multiple_of(2) {
        return Err(Error::invalid("need a positive window and an even node count >= 2"));
    }
    let step = window / nodes as f64;
    let integrand: Vec<f64> = (0..=nodes)
        .map(|q| {
            let g = kernels::free_propagate(gamma0, q as f64 * step);
            Ok(kernels::kernel_norm(&kernels::contract_slots(
                &g,
                j,
                gamma0.order() - 1,
                gamma0.order(),
                Contraction::Full,
            )?, alpha)?
            .powi(2))
        })
        .collect::<Result<_>>()?;
    let simpson = |upto: usize| -> f64 {
        let w = kernels::Quadrature::Simpson.weights(upto, step).unwrap_or_default();
        w.iter().zip(&integrand).map(|(a, b)| a * b).sum::<f64>().sqrt()
    };
    let mut curve = Vec::new();
    let mut upto = nodes;
    while upto >= 2 && upto.is_multiple_of(2) {
        curve.push((upto as f64 * step, simpson(upto)));
        upto /= 2;
    }
    curve.reverse();
    Ok(SpacetimeProbe {
        lhs: simpson(nodes),
        rhs: kernels::kernel_norm(gamma0, alpha)?,
        window_curve: curve,
        within_range: alpha > 5.0 / 6.0 && alpha < 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crucialint_spot_values() {
        let v = crucialint(0.5, 1, &[0.0]).unwrap();
        assert!((v.value - 2.0).abs() < 1e-10, "{v:?}");
        let v = crucialint(1.0, 1, &[0.0]).unwrap();
        assert!((v.value - PI).abs() < 1e-10);
        let v = crucialint(0.5, 2, &[0.0, 0.0]).unwrap();
        assert!((v.value - 2.0 * PI).abs() < 1e-8, "{v:?}");
        assert!(!crucialint(1.0, 2, &[3.0, 0.0]).unwrap().converged);
        assert!(crucialint(1.2, 1, &[0.0]).is_err());
        assert!(crucialint(0.5, 3, &[0.0; 3]).is_err());
    }

    #[test]
    fn crucialint_1d_closed_form_alpha_one() {
        for p in [0.5, 10.0, 700.0] {
            assert!((crucialint(1.0, 1, &[p]).unwrap().value - PI).abs() < 1e-10);
        }
    }

    #[test]
    fn crucialint_depends_on_modulus_only() {
        let a = crucialint(0.7, 2, &[3.0, 4.0]).unwrap().value;
        let b = crucialint(0.7, 2, &[5.0, 0.0]).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn c_alpha_at_one_in_1d() {
        let r = c_alpha(1.0, 1, 4, 10.0).unwrap();
        assert!((r.sup - PI * PI).abs() < 1e-8, "{}", r.sup);
    }

    #[test]
    fn trilinear_constant_fields() {
        let grid = GridSpec::new(1, 8, 2.0 * PI).unwrap();
        let one = PairField::constant(grid, C64::new(1.0, 0.0));
        for p in [2.0, 3.0] {
            let r = sobolev_trilinear_ratio(&one, &one, &one, p).unwrap().unwrap();
            assert!((r - (2.0 * PI).powf(-2.0 / p)).abs() < 1e-12);
        }
        let zero = PairField::constant(grid, C64::new(0.0, 0.0));
        assert!(sobolev_trilinear_ratio(&one, &one, &zero, 2.0).unwrap().is_none());
        assert!(sobolev_trilinear_ratio(&one, &one, &one, 1.0).is_err());
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let grid = GridSpec::new(1, 16, 2.0).unwrap();
        let k = mollifier_field(&grid, Mollifier::Gaussian, 0.3);
        let u: Vec<C64> = (0..16).map(|i| C64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let fast = periodic_convolve(&grid, &k, &u);
        for x in 0..16 {
            let direct: C64 = (0..16).map(|y| k[(x + 16 - y) % 16] * u[y]).sum::<C64>() * grid.spacing();
            assert!((fast[x] - direct).norm() < 1e-13);
        }
        let delta = mollifier_field(&grid, Mollifier::GridDelta, 0.0);
        let same = periodic_convolve(&grid, &delta, &u);
        assert!(same.iter().zip(&u).all(|(a, b)| (a - b).norm() < 1e-13));
    }

    #[test]
    fn scaling_exponents() {
        assert!((scaling_exponent(0.1, 2.0, 1) - 0.25).abs() < 1e-15);
        assert!((scaling_exponent(0.05, 4.0, 2) - 0.225).abs() < 1e-15);
        let g = BasePotential::Gaussian {
            amplitude: 1.0,
            width: 0.5,
        };
        let t = potential_scaling_check(&g, 0.0, &[2, 4], 2.0, 1, 48).unwrap();
        assert!(t.rows.iter().all(|r| (r.ratio - 1.0).abs() < 1e-12));
    }

    #[test]
    fn verdict_rule() {
        let r = BoundReport::from_samples("x", &[], vec![1.0, 2.0, 2.1, 1.5], 2, None);
        assert_eq!(r.verdict, Verdict::Bounded);
        let r = BoundReport::from_samples("x", &[], vec![1.0, 1.0, 3.0, 1.5], 2, None);
        assert_eq!(r.verdict, Verdict::UnboundedTrend);
    }
}
