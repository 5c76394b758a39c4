//! Physics self-checks: Crank–Nicolson unitarity, the explicit integrator's
//! order against it, and the a-priori norm-drift bound.

use num_complex::Complex64;
use serde::Serialize;
use wavecast::physics::{self, EvolutionConfig};
use wavecast::rng::CounterRng;
use wavecast::{ComplexField, GridSpec, RealField};

use crate::config::OracleSection;
use crate::error::CliError;

pub const CN_TOL: f64 = 1e-10;
pub const SLOPE_RANGE: (f64, f64) = (1.7, 2.3);
const ORACLE_STREAM: u64 = 0x4F52_4143_4C45_0000;

/// Random `ψ` (components in [−1, 1]) and `V ∈ [−1, 1]` for one instance.
pub fn random_instance(grid: &GridSpec, seed: u64, instance: u64) -> (ComplexField, RealField) {
    let mut r = CounterRng::new(seed, ORACLE_STREAM + instance);
    let psi = ComplexField::from_fn(grid, |_| Complex64::new(r.uniform_in(-1.0, 1.0), r.uniform_in(-1.0, 1.0)));
    let v = RealField::from_fn(grid, |_| r.uniform_in(-1.0, 1.0));
    (psi, v)
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitarityCheck {
    pub dims: Vec<usize>,
    pub instances: usize,
    pub steps: usize,
    pub dt: f64,
    pub max_rel_norm_change: f64,
    pub passed: bool,
}

pub fn cn_unitarity(dims: &[usize], o: &OracleSection, offset: u64) -> Result<UnitarityCheck, CliError> {
    let grid = GridSpec::new(dims)?;
    let mut worst: f64 = 0.0;
    for i in 0..o.cn_instances as u64 {
        let (psi, v) = random_instance(&grid, o.seed, offset + i);
        let out = physics::crank_nicolson_reference(&psi, &v, o.cn_dt, o.cn_steps)?;
        worst = worst.max((out.l2_norm() / psi.l2_norm() - 1.0).abs());
    }
    Ok(UnitarityCheck {
        dims: dims.to_vec(),
        instances: o.cn_instances,
        steps: o.cn_steps,
        dt: o.cn_dt,
        max_rel_norm_change: worst,
        passed: worst <= CN_TOL,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderCheck {
    pub dims: Vec<usize>,
    pub dts: Vec<f64>,
    /// `discrepancy[instance][dt]`: max |ψ_explicit − ψ_CN| at total time 1.
    pub discrepancy: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
    pub passed: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn integrator_order(o: &OracleSection) -> Result<OrderCheck, CliError> {
    let dims = vec![8, 8, 8];
    let grid = GridSpec::new(&dims)?;
    let mut discrepancy = Vec::new();
    let mut slopes = Vec::new();
    for i in 0..o.order_instances as u64 {
        let (psi, v) = random_instance(&grid, o.seed, 1000 + i);
        let mut row = Vec::new();
        for &dt in &o.order_dts {
            let steps = (1.0 / dt).round() as usize;
            let cfg = EvolutionConfig::with_dt(steps, dt)?;
            let (explicit, _) = physics::evolve(&psi, &v, &cfg)?;
            let cn = physics::crank_nicolson_reference(&psi, &v, dt, steps)?;
            let err = explicit
                .data()
                .iter()
                .zip(cn.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            row.push(err);
        }
        slopes.push(loglog_slope(&o.order_dts, &row));
        discrepancy.push(row);
    }
    let passed = !slopes.is_empty() && slopes.iter().all(|s| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(s));
    Ok(OrderCheck {
        dims,
        dts: o.order_dts.clone(),
        discrepancy,
        slopes,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftCheck {
    pub dims: Vec<usize>,
    pub instances: usize,
    pub steps: usize,
    pub dt: f64,
    /// Bound at |V|max = 1, the sampling range.
    pub nominal_bound: f64,
    pub max_measured: f64,
    /// Largest measured/bound ratio, each instance using its own |V|max.
    pub max_ratio: f64,
    pub passed: bool,
}

pub fn norm_drift(o: &OracleSection) -> Result<DriftCheck, CliError> {
    let dims = vec![8, 8, 8];
    let grid = GridSpec::new(&dims)?;
    let cfg = EvolutionConfig::with_dt(o.drift_steps, o.drift_dt)?;
    let (mut max_measured, mut max_ratio) = (0.0f64, 0.0f64);
    let mut passed = true;
    for i in 0..o.drift_instances as u64 {
        let (psi, v) = random_instance(&grid, o.seed, 2000 + i);
        let (out, _) = physics::evolve(&psi, &v, &cfg)?;
        let measured = (out.l2_norm() / psi.l2_norm() - 1.0).abs();
        let vmax = v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bound = physics::norm_drift_bound(vmax, &grid, o.drift_dt, o.drift_steps);
        passed &= measured <= bound;
        max_measured = max_measured.max(measured);
        max_ratio = max_ratio.max(measured / bound);
    }
    Ok(DriftCheck {
        dims,
        instances: o.drift_instances,
        steps: o.drift_steps,
        dt: o.drift_dt,
        nominal_bound: physics::norm_drift_bound(1.0, &grid, o.drift_dt, o.drift_steps),
        max_measured,
        max_ratio,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub cn_unitarity: Vec<UnitarityCheck>,
    pub integrator_order: OrderCheck,
    pub norm_drift: DriftCheck,
    pub passed: bool,
}

pub fn run(o: &OracleSection) -> Result<OracleReport, CliError> {
    let cn = vec![cn_unitarity(&[8, 8, 8], o, 0)?, cn_unitarity(&[16, 16], o, 500)?];
    let order = integrator_order(o)?;
    let drift = norm_drift(o)?;
    let passed = cn.iter().all(|c| c.passed) && order.passed && drift.passed;
    Ok(OracleReport {
        cn_unitarity: cn,
        integrator_order: order,
        norm_drift: drift,
        passed,
    })
}
