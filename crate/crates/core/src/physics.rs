//! Hamiltonian, unrolled predictor–corrector evolution and the dense
//! Crank–Nicolson reference.
//!
//! Units are normalized (ħ = m = 1) and the Hamiltonian is
//! `H = -½∇² + V` with the periodic second-difference Laplacian. The explicit
//! step is the two-stage midpoint update
//!
//! ```text
//! ψ½   = ψ − i·dt/2 · Hψ
//! ψ'   = ψ − i·dt   · Hψ½
//! ```
//!
//! which, on an eigenvector with eigenvalue λ, multiplies by
//! `1 − iλdt − (λdt)²/2` and therefore grows the norm by
//! `sqrt(1 + (λdt)⁴/4)` per step.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ComplexField, Field, GridSpec, RealField};

/// Largest grid the dense reference solver accepts.
pub const DENSE_MAX_VOXELS: usize = 4096;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub unroll_steps: usize,
    pub dt: f64,
    pub potential_static: bool,
}

impl EvolutionConfig {
    /// `N` steps with `dt = 1/N`.
    pub fn new(unroll_steps: usize) -> Result<Self> {
        if unroll_steps == 0 {
            return Err(Error::Argument("unroll_steps must be at least 1".into()));
        }
        Self::with_dt(unroll_steps, 1.0 / unroll_steps as f64)
    }

    pub fn with_dt(unroll_steps: usize, dt: f64) -> Result<Self> {
        let cfg = Self {
            unroll_steps,
            dt,
            potential_static: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll_steps == 0 {
            return Err(Error::Argument("unroll_steps must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Argument(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.potential_static {
            return Err(Error::Argument(
                "only a static potential is supported during unrolling".into(),
            ));
        }
        Ok(())
    }
}

/// A wavefunction and the potential it evolves under, on one grid.
#[derive(Debug, Clone)]
pub struct HamiltonianOperands<'a> {
    psi: &'a ComplexField,
    potential: &'a RealField,
}

impl<'a> HamiltonianOperands<'a> {
    pub fn new(psi: &'a ComplexField, potential: &'a RealField) -> Result<Self> {
        psi.grid().check_same(potential.grid(), "hamiltonian operands")?;
        Ok(Self { psi, potential })
    }

    pub fn psi(&self) -> &ComplexField {
        self.psi
    }

    pub fn potential(&self) -> &RealField {
        self.potential
    }
}

/// Adds `Σ_a (f[+1] + f[−1] − 2f)/h_a²` into `out`.
pub(crate) fn add_laplacian(grid: &GridSpec, f: &[Complex64], out: &mut [Complex64]) {
    for axis in 0..grid.rank() {
        let (outer, n, inner) = grid.axis_blocks(axis);
        let inv_h2 = 1.0 / (grid.spacing()[axis] * grid.spacing()[axis]);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let prev = base + ((i + n - 1) % n) * inner;
                let next = base + ((i + 1) % n) * inner;
                let cur = base + i * inner;
                for j in 0..inner {
                    out[cur + j] +=
                        (f[next + j] + f[prev + j] - f[cur + j] * 2.0) * inv_h2;
                }
            }
        }
    }
}

/// `out = -½∇²ψ + V ψ`.
pub(crate) fn hamiltonian_into(
    grid: &GridSpec,
    psi: &[Complex64],
    potential: &[f64],
    out: &mut [Complex64],
) {
    out.iter_mut().for_each(|z| *z = Complex64::default());
    add_laplacian(grid, psi, out);
    for ((o, p), v) in out.iter_mut().zip(psi).zip(potential) {
        *o = *o * -0.5 + p * v;
    }
}

/// One explicit predictor–corrector step, written into `out`.
/// `scratch` needs two buffers of the field length.
pub(crate) fn step_into(
    grid: &GridSpec,
    psi: &[Complex64],
    potential: &[f64],
    dt: f64,
    out: &mut [Complex64],
    scratch: &mut [Vec<Complex64>; 2],
) {
    let [h_psi, mid] = scratch;
    hamiltonian_into(grid, psi, potential, h_psi);
    let half = I * (dt * 0.5);
    for ((m, p), h) in mid.iter_mut().zip(psi).zip(h_psi.iter()) {
        *m = p - half * h;
    }
    hamiltonian_into(grid, mid, potential, h_psi);
    let full = I * dt;
    for ((o, p), h) in out.iter_mut().zip(psi).zip(h_psi.iter()) {
        *o = p - full * h;
    }
}

pub fn laplacian_periodic(f: &ComplexField) -> ComplexField {
    let mut out = vec![Complex64::default(); f.len()];
    add_laplacian(f.grid(), f.data(), &mut out);
    Field::from_parts(f.grid().clone(), out)
}

pub fn apply_hamiltonian(ops: &HamiltonianOperands<'_>) -> ComplexField {
    let grid = ops.psi.grid();
    let mut out = vec![Complex64::default(); grid.len()];
    hamiltonian_into(grid, ops.psi.data(), ops.potential.data(), &mut out);
    Field::from_parts(grid.clone(), out)
}

pub fn step_predictor_corrector(
    psi: &ComplexField,
    potential: &RealField,
    dt: f64,
) -> Result<ComplexField> {
    psi.grid().check_same(potential.grid(), "predictor-corrector step")?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    let n = psi.len();
    let mut scratch = [vec![Complex64::default(); n], vec![Complex64::default(); n]];
    let mut out = vec![Complex64::default(); n];
    step_into(psi.grid(), psi.data(), potential.data(), dt, &mut out, &mut scratch);
    let out = Field::from_parts(psi.grid().clone(), out);
    if !out.all_finite() {
        return Err(Error::Numeric("non-finite state after predictor-corrector step".into()));
    }
    Ok(out)
}

/// Unrolls `cfg.unroll_steps` explicit steps under a frozen potential.
/// Returns the final state and the `N + 1` norms along the way.
pub fn evolve(
    psi0: &ComplexField,
    potential: &RealField,
    cfg: &EvolutionConfig,
) -> Result<(ComplexField, Vec<f64>)> {
    cfg.validate()?;
    psi0.grid().check_same(potential.grid(), "evolve")?;
    let grid = psi0.grid();
    let n = psi0.len();
    let mut cur = psi0.data().to_vec();
    let mut next = vec![Complex64::default(); n];
    let mut scratch = [vec![Complex64::default(); n], vec![Complex64::default(); n]];
    let cell = grid.cell_volume();
    let norm = |d: &[Complex64]| (d.iter().map(|z| z.norm_sqr()).sum::<f64>() * cell).sqrt();
    let mut trace = Vec::with_capacity(cfg.unroll_steps + 1);
    trace.push(norm(&cur));
    for step in 0..cfg.unroll_steps {
        step_into(grid, &cur, potential.data(), cfg.dt, &mut next, &mut scratch);
        std::mem::swap(&mut cur, &mut next);
        let nrm = norm(&cur);
        if !nrm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite wavefunction after unrolled step {}",
                step + 1
            )));
        }
        trace.push(nrm);
    }
    Ok((Field::from_parts(grid.clone(), cur), trace))
}

/// Dense `H` as a row-major `n×n` matrix. Only for small grids.
pub fn dense_hamiltonian(grid: &GridSpec, potential: &RealField) -> Result<Vec<Complex64>> {
    let n = grid.len();
    if n > DENSE_MAX_VOXELS {
        return Err(Error::Capability(format!(
            "dense operator limited to {DENSE_MAX_VOXELS} voxels, grid has {n}"
        )));
    }
    grid.check_same(potential.grid(), "dense hamiltonian")?;
    let mut mat = vec![Complex64::default(); n * n];
    let mut basis = vec![Complex64::default(); n];
    let mut col = vec![Complex64::default(); n];
    for j in 0..n {
        basis[j] = Complex64::new(1.0, 0.0);
        hamiltonian_into(grid, &basis, potential.data(), &mut col);
        for (i, v) in col.iter().enumerate() {
            mat[i * n + j] = *v;
        }
        basis[j] = Complex64::default();
    }
    Ok(mat)
}

/// LU factorization with partial pivoting of a dense complex matrix.
pub(crate) struct DenseLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
}

impl DenseLu {
    pub(crate) fn factor(mut a: Vec<Complex64>, n: usize) -> Result<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, -1.0), |best, cand| if cand.1 > best.1 { cand } else { best });
            if pivot <= f64::EPSILON * 1e-3 {
                return Err(Error::Numeric(format!("singular system at column {k}")));
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let inv = 1.0 / a[k * n + k];
            for r in k + 1..n {
                let factor = a[r * n + k] * inv;
                if factor == Complex64::default() {
                    continue;
                }
                a[r * n + k] = factor;
                for c in k + 1..n {
                    let u = a[k * n + c];
                    a[r * n + c] -= factor * u;
                }
            }
        }
        Ok(Self { n, lu: a, perm })
    }

    pub(crate) fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.lu[r * n + c] * x[c];
            }
            x[r] = acc / self.lu[r * n + r];
        }
        x
    }
}

/// Exact Crank–Nicolson stepping `(I + i·dt/2·H)ψ' = (I − i·dt/2·H)ψ` on a
/// small grid. The left operator is factored once and reused for all steps.
pub fn crank_nicolson_reference(
    psi0: &ComplexField,
    potential: &RealField,
    dt: f64,
    steps: usize,
) -> Result<ComplexField> {
    let grid = psi0.grid();
    let n = grid.len();
    let h = dense_hamiltonian(grid, potential)?;
    let half = I * (dt * 0.5);
    let mut lhs: Vec<Complex64> = h.iter().map(|v| half * v).collect();
    for i in 0..n {
        lhs[i * n + i] += 1.0;
    }
    let lu = DenseLu::factor(lhs, n)?;
    let mut cur = psi0.data().to_vec();
    let mut h_psi = vec![Complex64::default(); n];
    for step in 0..steps {
        hamiltonian_into(grid, &cur, potential.data(), &mut h_psi);
        let rhs: Vec<Complex64> = cur.iter().zip(&h_psi).map(|(p, hp)| p - half * hp).collect();
        cur = lu.solve(&rhs);
        if cur.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite Crank-Nicolson state at step {}",
                step + 1
            )));
        }
    }
    Ok(Field::from_parts(grid.clone(), cur))
}

/// Upper bound on `|‖ψ_N‖/‖ψ_0‖ − 1|` for the explicit scheme, using
/// `λ_max = Σ_a 2/h_a² + |V|_max` as the spectral radius of `H`.
pub fn norm_drift_bound(v_max_abs: f64, grid: &GridSpec, dt: f64, steps: usize) -> f64 {
    let kinetic: f64 = grid.spacing().iter().map(|h| 2.0 / (h * h)).sum();
    let x = (kinetic + v_max_abs) * dt;
    (1.0 + x.powi(4) / 4.0).powf(steps as f64 / 2.0) - 1.0
}

/// Per-voxel `|Hψ|²`.
pub fn energy_density(psi: &ComplexField, potential: &RealField) -> Result<RealField> {
    let ops = HamiltonianOperands::new(psi, potential)?;
    Ok(apply_hamiltonian(&ops).abs_sqr())
}
