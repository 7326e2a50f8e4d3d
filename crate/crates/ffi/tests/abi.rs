use std::ffi::{CStr, CString};
use std::ptr;

use quintic_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(quintic_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn grid_wave_and_kernel_round_trip() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(quintic_grid_new(1, 16, 2.0 * std::f64::consts::PI, &mut grid), QuinticStatus::Ok);
        let mut len = 0;
        assert_eq!(quintic_grid_len(grid, &mut len), QuinticStatus::Ok);
        assert_eq!(len, 16);

        let mut wave = ptr::null_mut();
        assert_eq!(quintic_wave_gaussian(grid, 0.8, 1.0, &mut wave), QuinticStatus::Ok);
        let mut mass = 0.0;
        assert_eq!(quintic_wave_mass(wave, &mut mass), QuinticStatus::Ok);
        assert!((mass - 1.0).abs() < 1e-12);

        let mut evolved = ptr::null_mut();
        assert_eq!(quintic_nls_evolve(wave, 1.0, 0.0, 0.0, 1e-3, 0.05, &mut evolved), QuinticStatus::Ok);
        let mut t = 0.0;
        quintic_wave_time(evolved, &mut t);
        assert!((t - 0.05).abs() < 1e-12);
        let (mut re, mut im) = (vec![0.0; 16], vec![0.0; 16]);
        assert_eq!(quintic_wave_values(evolved, re.as_mut_ptr(), im.as_mut_ptr(), 16), QuinticStatus::Ok);
        let mut copy = ptr::null_mut();
        assert_eq!(quintic_wave_from_values(grid, re.as_ptr(), im.as_ptr(), 16, &mut copy), QuinticStatus::Ok);
        let mut m2 = 0.0;
        quintic_wave_mass(copy, &mut m2);
        assert!((m2 - 1.0).abs() < 1e-12);

        let mut k3 = ptr::null_mut();
        assert_eq!(quintic_kernel_factorized(wave, 3, &mut k3), QuinticStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(quintic_kernel_contract(k3, 1, &mut c), QuinticStatus::Ok);
        let mut order = 0;
        quintic_kernel_order(c, &mut order);
        assert_eq!(order, 1);
        let mut prop = ptr::null_mut();
        assert_eq!(quintic_kernel_free_propagate(k3, 0.3, &mut prop), QuinticStatus::Ok);
        let (mut a, mut b) = (0.0, 0.0);
        quintic_kernel_norm(k3, 0.0, &mut a);
        quintic_kernel_norm(prop, 0.0, &mut b);
        assert!((a - 1.0).abs() < 1e-12 && (a - b).abs() < 1e-12);

        for k in [k3, c, prop] {
            quintic_kernel_free(k);
        }
        quintic_wave_free(copy);
        quintic_wave_free(evolved);
        quintic_wave_free(wave);
        quintic_grid_free(grid);
        quintic_grid_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut grid = ptr::null_mut();
        assert_eq!(quintic_grid_new(3, 16, 1.0, &mut grid), QuinticStatus::InvalidInput);
        assert!(grid.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(quintic_grid_new(1, 16, 1.0, ptr::null_mut()), QuinticStatus::NullPointer);
        assert!(last_error().contains("out_grid"));

        let mut count = 0;
        assert_eq!(quintic_board_count_echelon(3, 4, 10, &mut count), QuinticStatus::ResourceCap);
        assert!(last_error().contains("required"));

        let (mut v, mut e, mut conv) = (0.0, 0.0, 1);
        assert_eq!(quintic_crucialint(1.0, 2, [1.0, 0.0].as_ptr(), &mut v, &mut e, &mut conv), QuinticStatus::Ok);
        assert_eq!(conv, 0);
        assert!(v.is_infinite());
        assert_eq!(quintic_crucialint(1.5, 1, [0.0].as_ptr(), &mut v, &mut e, &mut conv), QuinticStatus::InvalidInput);
    }
}

#[test]
fn board_and_bounds_values() {
    unsafe {
        let mut count = 0;
        assert_eq!(quintic_board_map_count(2, 3, &mut count), QuinticStatus::Ok);
        assert_eq!(count, 2 * 4 * 6);
        assert_eq!(quintic_board_count_echelon(2, 3, 1000, &mut count), QuinticStatus::Ok);
        assert!(count <= 1 << 9);

        let picks = [1usize, 1, 2];
        let (mut cp, mut cs, mut moves) = ([0usize; 3], [0usize; 3], 0usize);
        assert_eq!(
            quintic_board_to_echelon(2, picks.as_ptr(), 3, 100, cp.as_mut_ptr(), cs.as_mut_ptr(), &mut moves),
            QuinticStatus::Ok
        );
        assert_eq!(moves, 0);
        assert_eq!(cp, picks);
        assert_eq!(cs, [1, 2, 3]);

        let (mut v, mut e, mut conv) = (0.0, 0.0, 0);
        assert_eq!(quintic_crucialint(1.0, 1, [0.0].as_ptr(), &mut v, &mut e, &mut conv), QuinticStatus::Ok);
        assert!((v - std::f64::consts::PI).abs() < 1e-10);
        assert_eq!(conv, 1);
    }
}

#[test]
fn experiment_runs_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let name = CString::new("boardgame").unwrap();
    let cfg = CString::new("r = 1\nn = 2\n").unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let status = unsafe { quintic_run_experiment(name.as_ptr(), cfg.as_ptr(), out.as_ptr(), 9, 1, 1) };
    assert_eq!(status, QuinticStatus::Ok);
    let csv = std::fs::read_to_string(dir.path().join("classes.csv")).unwrap();
    assert!(csv.contains("# seed=9"));

    let bad = CString::new("beta = 0.3").unwrap();
    let nb = CString::new("nbody-converge").unwrap();
    let status = unsafe { quintic_run_experiment(nb.as_ptr(), bad.as_ptr(), out.as_ptr(), 0, 0, 1) };
    assert_eq!(status, QuinticStatus::InvalidInput);
    assert!(last_error().contains("beta"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/quintic.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/quintic.h"))
        .status()
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
