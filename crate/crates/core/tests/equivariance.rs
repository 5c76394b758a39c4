//! Symmetries the full forecast pipeline must respect: periodic translation
//! commutes with every stage, and a global phase never reaches the output.

use num_complex::Complex64;
use wavecast::model::{self, EncoderParams};
use wavecast::physics::{self, EvolutionConfig};
use wavecast::rng::CounterRng;
use wavecast::{ComplexField, GridSpec, RealField};

const TOL: f64 = 1e-10;

fn history(grid: &GridSpec, k: usize, seed: u64) -> Vec<RealField> {
    let mut r = CounterRng::new(seed, 11);
    (0..k).map(|_| RealField::from_fn(grid, |_| r.uniform())).collect()
}

fn roll_all(f: &RealField, shifts: &[isize]) -> RealField {
    shifts
        .iter()
        .enumerate()
        .fold(f.clone(), |acc, (axis, &s)| acc.roll(axis, s).unwrap())
}

fn max_abs_diff(a: &RealField, b: &RealField) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_shift(dims: &[usize], shifts: &[isize], seed: u64) {
    let grid = GridSpec::new(dims).unwrap();
    let params = EncoderParams::init(dims.len(), 5, 4, seed).unwrap();
    let h = history(&grid, 5, seed);
    let cfg = EvolutionConfig::new(10).unwrap();
    let base = model::forecast(&h, &params, &cfg, 1e-8).unwrap();
    let shifted_h: Vec<RealField> = h.iter().map(|f| roll_all(f, shifts)).collect();
    let shifted = model::forecast(&shifted_h, &params, &cfg, 1e-8).unwrap();
    let err = max_abs_diff(&shifted.x_hat, &roll_all(&base.x_hat, shifts));
    assert!(err < TOL, "dims {dims:?} shifts {shifts:?}: {err:e}");
    let err_v = max_abs_diff(&shifted.triplet.potential, &roll_all(&base.triplet.potential, shifts));
    assert!(err_v < TOL, "potential: {err_v:e}");
}

#[test]
fn forecast_commutes_with_periodic_shifts_2d() {
    for (i, s) in [[1, 0], [0, -3], [5, 7], [-8, 15]].iter().enumerate() {
        check_shift(&[16, 16], s, i as u64);
    }
}

#[test]
fn forecast_commutes_with_periodic_shifts_3d() {
    check_shift(&[8, 8, 8], &[1, -2, 3], 4);
    check_shift(&[8, 6, 4], &[4, 3, -1], 5);
}

#[test]
fn global_phase_is_invisible() {
    let grid = GridSpec::new(&[12, 12]).unwrap();
    let mut r = CounterRng::new(3, 5);
    let psi = ComplexField::from_fn(&grid, |_| Complex64::new(r.uniform_in(-1.0, 1.0), r.uniform_in(-1.0, 1.0)));
    let v = RealField::from_fn(&grid, |_| r.uniform_in(-1.0, 1.0));
    let cfg = EvolutionConfig::new(20).unwrap();
    let (out, _) = physics::evolve(&psi, &v, &cfg).unwrap();
    let x = model::reconstruct_intensity(&out, 1e-8).unwrap();
    for alpha in [0.3, 1.0, -2.5, std::f64::consts::PI] {
        let phase = Complex64::from_polar(1.0, alpha);
        let x_direct = model::reconstruct_intensity(&psi.scale_complex(phase), 1e-8).unwrap();
        let x_ref = model::reconstruct_intensity(&psi, 1e-8).unwrap();
        assert!(max_abs_diff(&x_direct, &x_ref) < TOL);
        // Evolution is linear, so the phase rides along to the end.
        let (out_p, _) = physics::evolve(&psi.scale_complex(phase), &v, &cfg).unwrap();
        let x_p = model::reconstruct_intensity(&out_p, 1e-8).unwrap();
        assert!(max_abs_diff(&x_p, &x) < TOL, "alpha {alpha}");
    }
}

#[test]
fn evolution_commutes_with_shifts() {
    let grid = GridSpec::new(&[8, 8, 8]).unwrap();
    let mut r = CounterRng::new(9, 1);
    let psi = ComplexField::from_fn(&grid, |_| Complex64::new(r.normal(), r.normal()));
    let v = RealField::from_fn(&grid, |_| r.uniform_in(-1.0, 1.0));
    let cfg = EvolutionConfig::new(25).unwrap();
    let (a, _) = physics::evolve(&psi.roll(2, 3).unwrap(), &v.roll(2, 3).unwrap(), &cfg).unwrap();
    let (b, _) = physics::evolve(&psi, &v, &cfg).unwrap();
    let b = b.roll(2, 3).unwrap();
    let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(err < TOL, "{err:e}");
}
