//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! status if any criterion or its time budget fails.

mod common;

use std::collections::HashSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use quintic::board::{
    count_echelon, default_move_budget, enumerate_maps, equivalence_classes, map_count, partition_count,
    to_echelon_random, DEFAULT_ENUMERATION_CAP,
};
use quintic::bounds::{
    c_alpha, crucialint, crucialint_growth, crucialint_ratio_report, highreg_report, poincare_ladder,
    potential_scaling_check, Mollifier, Observable, Verdict,
};
use quintic::grid::GridSpec;
use quintic::harness::{self, commutation_rows, Experiment, ExperimentConfig, DEFAULT_SEED};
use quintic::kernels::random_positive_kernel;
use quintic::nbody::{convergence_experiment, BasePotential, ConvergenceConfig};
use quintic::nls::{evolve, mass, NlsParams, WaveFunction};
use quintic::C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line summary of the evidence.
type Outcome = (bool, String);

/// Name, time budget in seconds and check of one criterion.
type Criterion = (&'static str, u64, fn() -> Outcome);

fn board_game() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
    for r in 1..=3 {
        for n in 1..=4 {
            let expected: u64 = (1..=n).map(|j| (r + 2 * j - 2) as u64).product();
            let maps = enumerate_maps(r, n, DEFAULT_ENUMERATION_CAP).unwrap();
            let budget = default_move_budget(r, n);
            let classes = match equivalence_classes(r, n, DEFAULT_ENUMERATION_CAP, budget) {
                Ok(c) => c,
                Err(e) => {
                    notes.push(format!("r={r} n={n}: {e}"));
                    ok = false;
                    continue;
                }
            };
            let mut seen = HashSet::new();
            let mut members = 0usize;
            let mut confluent = true;
            for c in &classes {
                ok &= c.sigmas_distinct() && c.canonical.is_echelon();
                for m in &c.members {
                    members += 1;
                    seen.insert(m.map.picks.clone());
                    for _ in 0..10 {
                        let got = to_echelon_random(&m.map, budget, &mut rng).unwrap();
                        confluent &= got.state.map == c.canonical && got.state.sigma() == m.sigma;
                    }
                }
            }
            let echelon = count_echelon(r, n, DEFAULT_ENUMERATION_CAP).unwrap();
            let cell = map_count(r, n) == expected
                && maps.len() as u64 == expected
                && members as u64 == expected
                && seen.len() as u64 == expected
                && confluent
                && classes.len() as u64 == echelon
                && echelon <= 1u64 << (r + 3 * n - 2);
            if !cell {
                notes.push(format!("r={r} n={n} failed"));
            }
            ok &= cell;
        }
    }
    let mut p = Vec::new();
    for n in 1..=20usize {
        let v = partition_count(n).unwrap();
        ok &= v == 1 + p.iter().sum::<u128>() && v <= 1u128 << n;
        p.push(v);
    }
    notes.push(format!("12 (r,n) cells exhaustive, P_20={}", p[19]));
    (ok, notes.join("; "))
}

fn max_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn nls_solver() -> Outcome {
    let grid = GridSpec::new(1, 64, 2.0 * PI).unwrap();
    let (amp, b0, wave) = (0.8, 1.0, 3.0);
    let plane = WaveFunction::from_fn(grid, |x| C64::from_polar(amp, wave * x[0]));
    let traj = evolve(&plane, &NlsParams::quintic(b0, 1e-4).unwrap(), 0.1, 1000).unwrap();
    let last = traj.last();
    let rot = C64::from_polar(1.0, -(wave * wave + b0 * amp.powi(4)) * last.t);
    let expect: Vec<C64> = plane.values.iter().map(|v| v * rot).collect();
    let phase_err = max_diff(&last.values, &expect) / amp;
    let mut drift = 0.0f64;
    for s in &traj.snapshots {
        drift = drift.max((mass(s) - mass(&plane)).abs() / mass(&plane));
    }

    let phi0 = WaveFunction::gaussian(grid, 0.6, [0.0; 2], [1.0, 0.0]).normalized().unwrap();
    let run = |dt: f64| evolve(&phi0, &NlsParams::quintic(b0, dt).unwrap(), 0.1, 1_000_000).unwrap();
    let (a, b, c) = (run(4e-3), run(2e-3), run(1e-3));
    for t in [&a, &b, &c] {
        drift = drift.max((mass(t.last()) - mass(&phi0)).abs() / mass(&phi0));
    }
    let diff = |x: &WaveFunction, y: &WaveFunction| {
        grid.norm(&x.values.iter().zip(&y.values).map(|(p, q)| p - q).collect::<Vec<_>>())
    };
    let order = (diff(a.last(), b.last()) / diff(b.last(), c.last())).log2();
    let ok = phase_err < 1e-8 && drift < 1e-12 && (1.9..=2.1).contains(&order);
    (ok, format!("phase error {phase_err:.2e}, mass drift {drift:.2e}, Strang order {order:.4}"))
}

fn duhamel() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    harness::run(Experiment::DuhamelResidual, &ExperimentConfig::default(), None, dir.path(), 1).unwrap();
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("log.json")).unwrap()).unwrap();
    let rows = log["data"].as_array().unwrap();
    let get = |r: &serde_json::Value, k: &str| r[k].as_f64().unwrap_or(f64::NAN);
    let orders: Vec<f64> = rows.iter().skip(1).map(|r| get(r, "observed_order")).collect();
    let last = rows.iter().find(|r| r["nodes"] == 256).expect("256-node row");
    let (res, anti) = (get(last, "residual"), get(last, "anti_residual"));
    let ok = orders.iter().all(|&o| o >= 2.0) && res < 1e-6 && rows.iter().all(|r| get(r, "anti_residual") >= 100.0 * get(r, "residual"));
    (
        ok,
        format!(
            "orders {:?}, residual {res:.2e} at 256 nodes, anti {anti:.2e} ({:.1e}x)",
            orders.iter().map(|o| (o * 100.0).round() / 100.0).collect::<Vec<_>>(),
            anti / res
        ),
    )
}

fn commutation() -> Outcome {
    let grid = GridSpec::new(1, 16, 2.0 * PI).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for (r, n) in [(1, 2), (1, 3), (3, 2)] {
        let rows = commutation_rows(grid, r, n, 3, 20, 1.0, DEFAULT_SEED).unwrap();
        if rows.is_empty() {
            notes.push(format!("r={r} n={n} vacuous (no admissible pair, no enabled move)"));
            continue;
        }
        let worst = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
        ok &= worst <= 1e-10;
        notes.push(format!("r={r} n={n}: {} checks, worst {worst:.1e}", rows.len()));
    }
    (ok, notes.join("; "))
}

fn mean_field() -> Outcome {
    let cfg = ConvergenceConfig::default();
    let rows = convergence_experiment(&cfg).unwrap();
    let d: Vec<f64> = rows.iter().map(|r| r.trace_distance).collect();
    let decreasing = d.windows(2).all(|w| w[1] < w[0]);
    let points_ok = rows.iter().all(|r| r.points >= 8);
    let control = convergence_experiment(&ConvergenceConfig {
        base: BasePotential::Zero,
        ..cfg
    })
    .unwrap();
    let c: Vec<f64> = control.iter().map(|r| r.trace_distance).collect();
    let ok = decreasing && points_ok && c.iter().all(|&v| v < 1e-8);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ");
    (ok, format!("N=3,4,5 distances {}; V=0 control max {:.1e}", fmt(&d), c.iter().cloned().fold(0.0, f64::max)))
}

fn dense_oracle() -> Outcome {
    let rows = common::oracle_suite(DEFAULT_SEED);
    let (label, worst) = rows
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    (worst <= 1e-12, format!("{} comparisons, worst {worst:.1e} ({label})", rows.len()))
}

fn bounds_lab() -> Outcome {
    let mut notes = Vec::new();
    let s1 = crucialint(0.5, 1, &[0.0]).unwrap().value;
    let s2 = crucialint(1.0, 1, &[0.0]).unwrap().value;
    let spots = (s1 - 2.0).abs() < 1e-6 && (s2 - PI).abs() < 1e-6;
    notes.push(format!("spots {s1:.9} {s2:.9}"));
    let c1 = c_alpha(1.0, 1, 8, 100.0).unwrap().sup;
    let cal = (c1 - PI * PI).abs() < 1e-4;
    notes.push(format!("C_1 {c1:.8}"));

    let mut verdicts = true;
    for (d, alpha, want) in [
        (1, 0.5, Verdict::Bounded),
        (1, 0.75, Verdict::Bounded),
        (1, 1.0, Verdict::Bounded),
        (2, 0.5, Verdict::Bounded),
        (2, 0.75, Verdict::Bounded),
        (2, 0.9, Verdict::Bounded),
        (2, 1.0, Verdict::UnboundedTrend),
    ] {
        let r = crucialint_ratio_report(alpha, d, 32, 1e3).unwrap();
        verdicts &= r.verdict == want;
        if r.verdict != want {
            notes.push(format!("d={d} alpha={alpha} got {}", r.verdict.as_str()));
        }
    }
    let (g1, g2) = crucialint_growth(0.5, 2, 1e3).unwrap();
    notes.push(format!("d=2 alpha=0.5 ratio {g1:.2} at P=1e3, {g2:.2} at P=2e3"));

    let base = BasePotential::Gaussian {
        amplitude: 1.0,
        width: 0.5,
    };
    let mut slopes = true;
    for (d, beta, p, pts) in [(1, 0.1, 2.0, 48), (2, 0.05, 4.0, 20)] {
        let t = potential_scaling_check(&base, beta, &[10, 100, 1000, 10000], p, d, pts).unwrap();
        slopes &= ((t.slope - t.predicted) / t.predicted).abs() < 0.01;
        notes.push(format!("d={d} slope {:.5}/{:.5}", t.slope, t.predicted));
    }
    let grid = GridSpec::new(1, 16, 2.0 * PI).unwrap();
    let h = highreg_report(grid, 1, 1, 0.75, 2, 100, 1.0, DEFAULT_SEED).unwrap();
    let stable = h.verdict == Verdict::Bounded;
    notes.push(format!("highreg change {:.3}", h.relative_change));
    (spots && cal && verdicts && slopes && stable, notes.join("; "))
}

fn poincare() -> Outcome {
    let grid = GridSpec::new(1, 64, 1.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
    let gamma = random_positive_kernel(grid, 3, 2, 1.0, &mut rng).unwrap();
    let l = poincare_ladder(Mollifier::Gaussian, &[0.4, 0.2, 0.1, 0.05], 0.5, &gamma, Observable::Identity).unwrap();
    (
        l.variation < 0.5,
        format!("variation of lhs/a^0.5 {:.3}, fitted exponent {:.3}", l.variation, l.fitted_exponent),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 board game", 60, board_game),
        ("2 nls solver", 30, nls_solver),
        ("3 duhamel residual", 120, duhamel),
        ("4 commutation", 120, commutation),
        ("5 mean-field trend", 600, mean_field),
        ("6 dense oracle", 60, dense_oracle),
        ("7 bounds lab", 300, bounds_lab),
        ("8 poincare probe", 120, poincare),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, note) = check();
        let took = start.elapsed();
        let in_budget = took <= Duration::from_secs(budget);
        let pass = ok && in_budget;
        failed += usize::from(!pass);
        println!(
            "{} criterion {name}: {note} [{:.1}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
