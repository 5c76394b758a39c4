//! Reverse-mode gradients of `loss(forecast(history))` with respect to the
//! encoder parameters, written out stage by stage.
//!
//! Complex gradients follow the convention `g = ∂L/∂Re ψ + i·∂L/∂Im ψ`, so
//! that `dL = Re⟨g, dψ⟩`. Under this convention the adjoint of one explicit
//! step is the same step with `dt → −dt` (H is Hermitian), plus a potential
//! term because H depends on V.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, conv_backward, encoder_activations, EncoderActivations, EncoderParams, ForecastOutput,
    LossValue, TensorId,
};
use crate::physics::{hamiltonian_into, step_into, EvolutionConfig};
use crate::rng::{streams, CounterRng};
use crate::tensor::{ComplexField, Field, GridSpec, RealField};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Everything the backward pass needs from one forward pass.
///
/// Unrolled states are not stored; they are recomputed from `psi0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    fingerprint: u64,
    grid: GridSpec,
    cfg: EvolutionConfig,
    epsilon: f64,
    act: EncoderActivations,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    potential: Vec<f64>,
    psi0: Vec<Complex64>,
    psi_final: Vec<Complex64>,
    x_hat: Vec<f64>,
    argmax: usize,
}

impl Tape {
    /// Runs a forecast and records its activations.
    pub fn record(
        history: &[RealField],
        params: &EncoderParams,
        cfg: &EvolutionConfig,
        epsilon: f64,
    ) -> Result<(Tape, ForecastOutput)> {
        let (grid, act) = encoder_activations(history, params)?;
        let raw = model::RawHeads {
            a_raw: Field::from_parts(grid.clone(), act.a_raw.clone()),
            phi_raw: Field::from_parts(grid.clone(), act.phi_raw.clone()),
            v_raw: Field::from_parts(grid.clone(), act.v_raw.clone()),
        };
        if !(raw.a_raw.all_finite() && raw.phi_raw.all_finite() && raw.v_raw.all_finite()) {
            return Err(Error::Numeric("encoder stage produced non-finite heads".into()));
        }
        let triplet = model::assemble_triplet(&raw)?;
        let psi0 = model::assemble_psi(&triplet);
        let (psi_final, norm_trace) = crate::physics::evolve(&psi0, &triplet.potential, cfg)
            .map_err(|e| Error::Numeric(format!("evolution stage: {e}")))?;
        let x_hat = model::reconstruct_intensity(&psi_final, epsilon)?;
        let sq = psi_final.abs_sqr();
        let max = sq.max();
        let argmax = sq.data().iter().position(|&v| v == max).unwrap_or(0);
        let tape = Tape {
            fingerprint: params.fingerprint(),
            grid,
            cfg: *cfg,
            epsilon,
            act,
            amplitude: triplet.amplitude.data().to_vec(),
            phase: triplet.phase.data().to_vec(),
            potential: triplet.potential.data().to_vec(),
            psi0: psi0.data().to_vec(),
            psi_final: psi_final.data().to_vec(),
            x_hat: x_hat.data().to_vec(),
            argmax,
        };
        let out = ForecastOutput {
            x_hat,
            psi_final,
            triplet,
            norm_trace,
        };
        Ok((tape, out))
    }

    /// Re-runs the forward pass from the recorded history.
    pub fn replay(&self, params: &EncoderParams) -> Result<ForecastOutput> {
        let history: Vec<RealField> = self
            .act
            .input
            .iter()
            .map(|d| Field::from_parts(self.grid.clone(), d.clone()))
            .collect();
        let (tape, out) = Tape::record(&history, params, &self.cfg, self.epsilon)?;
        if tape != *self {
            return Err(Error::Integrity("replayed forward pass diverged from the tape".into()));
        }
        Ok(out)
    }

    pub fn x_hat(&self) -> RealField {
        Field::from_parts(self.grid.clone(), self.x_hat.clone())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
}

/// One gradient tensor per parameter tensor, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub EncoderParams);

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        ParamGrads(
            EncoderParams::zeros(params.rank(), params.in_frames(), params.channels())
                .expect("shape taken from valid params"),
        )
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        self.0.tensor(id)
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        self.0.tensor_mut(id)
    }

    /// `self += other * scale`.
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for id in TensorId::ALL {
            for (a, b) in self.0.tensor_mut(id).iter_mut().zip(other.0.tensor(id)) {
                *a += b * scale;
            }
        }
    }

    pub fn dot(&self, direction: &EncoderParams) -> f64 {
        TensorId::ALL
            .iter()
            .map(|&id| {
                self.0
                    .tensor(id)
                    .iter()
                    .zip(direction.tensor(id))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Multiplies the loss (and therefore every gradient).
    pub loss_scale: f64,
    /// Flips the sign of one tensor's adjoint. Used to prove gradcheck
    /// catches a broken adjoint.
    pub corrupt: Option<TensorId>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            loss_scale: 1.0,
            corrupt: None,
        }
    }
}

pub fn backward(
    tape: &Tape,
    params: &EncoderParams,
    x_true: &RealField,
    lambda: f64,
) -> Result<(ParamGrads, LossValue)> {
    backward_with(tape, params, x_true, lambda, &BackwardOptions::default())
}

fn check_finite(stage: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient in {stage} stage")))
    }
}

pub fn backward_with(
    tape: &Tape,
    params: &EncoderParams,
    x_true: &RealField,
    lambda: f64,
    opts: &BackwardOptions,
) -> Result<(ParamGrads, LossValue)> {
    if params.fingerprint() != tape.fingerprint {
        return Err(Error::Integrity(
            "tape was recorded with different parameters".into(),
        ));
    }
    tape.grid.check_same(x_true.grid(), "backward target")?;
    let grid = &tape.grid;
    let n = grid.len();
    let x_hat = tape.x_hat();
    let value = model::loss(&x_hat, x_true, lambda)?;

    // Loss: MSE plus anisotropic periodic TV, sign(0) = 0.
    let scale = opts.loss_scale;
    let mut g_x: Vec<f64> = tape
        .x_hat
        .iter()
        .zip(x_true.data())
        .map(|(a, b)| scale * 2.0 * (a - b) / n as f64)
        .collect();
    if lambda != 0.0 {
        let w = scale * lambda / n as f64;
        for axis in 0..grid.rank() {
            let (outer, len, inner) = grid.axis_blocks(axis);
            for o in 0..outer {
                let base = o * len * inner;
                for i in 0..len {
                    let prev = base + ((i + len - 1) % len) * inner;
                    let cur = base + i * inner;
                    for j in 0..inner {
                        let d = tape.x_hat[cur + j] - tape.x_hat[prev + j];
                        let s = if d > 0.0 {
                            w
                        } else if d < 0.0 {
                            -w
                        } else {
                            0.0
                        };
                        g_x[cur + j] += s;
                        g_x[prev + j] -= s;
                    }
                }
            }
        }
    }

    // Normalization x = s / (s[argmax] + ε), argmax held fixed.
    let sq: Vec<f64> = tape.psi_final.iter().map(|z| z.norm_sqr()).collect();
    let denom = sq[tape.argmax] + tape.epsilon;
    let mut g_s: Vec<f64> = g_x.iter().map(|g| g / denom).collect();
    let g_max: f64 = -g_x.iter().zip(&sq).map(|(g, s)| g * s).sum::<f64>() / (denom * denom);
    g_s[tape.argmax] += g_max;
    let g_psi_n: Vec<Complex64> = tape
        .psi_final
        .iter()
        .zip(&g_s)
        .map(|(z, g)| z * (2.0 * g))
        .collect();
    check_finite("normalization", g_psi_n.iter().flat_map(|z| [z.re, z.im]))?;

    let (g_psi0, g_v) = evolve_adjoint_raw(grid, &tape.psi0, &tape.potential, &tape.cfg, g_psi_n);
    check_finite("evolution", g_psi0.iter().flat_map(|z| [z.re, z.im]).chain(g_v.iter().copied()))?;

    // Polar assembly and head nonlinearities.
    let act = &tape.act;
    let mut g_a_raw = vec![0.0; n];
    let mut g_phi_raw = vec![0.0; n];
    let mut g_v_raw = vec![0.0; n];
    for x in 0..n {
        let (a, phi) = (tape.amplitude[x], tape.phase[x]);
        let (s, c) = phi.sin_cos();
        let g = g_psi0[x];
        let g_a = g.re * c + g.im * s;
        let g_phi = a * (g.im * c - g.re * s);
        g_a_raw[x] = if act.a_raw[x] > 0.0 { g_a } else { 0.0 };
        let t = act.phi_raw[x].tanh();
        g_phi_raw[x] = g_phi * PI * (1.0 - t * t);
        let v = tape.potential[x];
        g_v_raw[x] = g_v[x] * (1.0 - v * v);
    }
    check_finite("head", g_a_raw.iter().chain(&g_phi_raw).chain(&g_v_raw).copied())?;

    let mut grads = ParamGrads::zeros_like(params);
    let heads = [
        (TensorId::HeadAWeight, TensorId::HeadABias, &g_a_raw),
        (TensorId::HeadPhiWeight, TensorId::HeadPhiBias, &g_phi_raw),
        (TensorId::HeadVWeight, TensorId::HeadVBias, &g_v_raw),
    ];
    let channels = params.channels();
    let mut g_pre2 = vec![vec![0.0; n]; channels];
    for (w_id, b_id, g_raw) in heads {
        grads.tensor_mut(b_id)[0] = g_raw.iter().sum();
        let w = params.tensor(w_id);
        for c in 0..channels {
            grads.tensor_mut(w_id)[c] = act.hidden2[c].iter().zip(g_raw.iter()).map(|(h, g)| h * g).sum();
            for x in 0..n {
                g_pre2[c][x] += w[c] * g_raw[x];
            }
        }
    }
    mask_relu(&mut g_pre2, &act.pre2);

    let conv2 = conv_backward(grid, &act.hidden1, params.tensor(TensorId::Conv2Weight), &g_pre2, true);
    grads.tensor_mut(TensorId::Conv2Weight).copy_from_slice(&conv2.weight);
    grads.tensor_mut(TensorId::Conv2Bias).copy_from_slice(&conv2.bias);
    let mut g_pre1 = conv2.input;
    mask_relu(&mut g_pre1, &act.pre1);

    let conv1 = conv_backward(grid, &act.input, params.tensor(TensorId::Conv1Weight), &g_pre1, false);
    grads.tensor_mut(TensorId::Conv1Weight).copy_from_slice(&conv1.weight);
    grads.tensor_mut(TensorId::Conv1Bias).copy_from_slice(&conv1.bias);

    if let Some(id) = opts.corrupt {
        grads.tensor_mut(id).iter_mut().for_each(|g| *g = -*g);
    }
    if !grads.0.all_finite() {
        return Err(Error::Numeric("non-finite gradient in convolution stage".into()));
    }
    Ok((grads, value))
}

fn mask_relu(grad: &mut [Vec<f64>], pre: &[Vec<f64>]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        g.iter_mut().zip(p).for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
    }
}

/// Adjoint of [`crate::physics::evolve`] for a given output gradient.
/// Returns the gradients with respect to `ψ0` and `V`.
pub fn evolve_adjoint(
    psi0: &ComplexField,
    potential: &RealField,
    cfg: &EvolutionConfig,
    grad_out: &ComplexField,
) -> Result<(ComplexField, RealField)> {
    cfg.validate()?;
    psi0.grid().check_same(potential.grid(), "evolve adjoint")?;
    psi0.grid().check_same(grad_out.grid(), "evolve adjoint")?;
    let grid = psi0.grid();
    let (g_psi, g_v) = evolve_adjoint_raw(
        grid,
        psi0.data(),
        potential.data(),
        cfg,
        grad_out.data().to_vec(),
    );
    Ok((Field::from_parts(grid.clone(), g_psi), Field::from_parts(grid.clone(), g_v)))
}

/// Reverse sweep over the unrolled steps. States are rebuilt segment by
/// segment from checkpoints every `ceil(sqrt(N))` steps.
fn evolve_adjoint_raw(
    grid: &GridSpec,
    psi0: &[Complex64],
    potential: &[f64],
    cfg: &EvolutionConfig,
    mut g: Vec<Complex64>,
) -> (Vec<Complex64>, Vec<f64>) {
    let n = grid.len();
    let steps = cfg.unroll_steps;
    let dt = cfg.dt;
    let seg = ((steps as f64).sqrt().ceil() as usize).max(1);
    let mut scratch = [vec![Complex64::default(); n], vec![Complex64::default(); n]];

    let mut checkpoints = vec![psi0.to_vec()];
    let mut cur = psi0.to_vec();
    let mut next = vec![Complex64::default(); n];
    for step in 0..steps {
        if step > 0 && step % seg == 0 {
            checkpoints.push(cur.clone());
        }
        step_into(grid, &cur, potential, dt, &mut next, &mut scratch);
        std::mem::swap(&mut cur, &mut next);
    }

    let mut g_v = vec![0.0; n];
    let mut h_buf = vec![Complex64::default(); n];
    let mut mid = vec![Complex64::default(); n];
    let mut g_mid = vec![Complex64::default(); n];
    for (k, start) in checkpoints.iter().enumerate().rev() {
        let first = k * seg;
        let last = (first + seg).min(steps);
        let mut states = Vec::with_capacity(last - first);
        states.push(start.clone());
        for _ in first + 1..last {
            let prev = states.last().unwrap();
            step_into(grid, prev, potential, dt, &mut next, &mut scratch);
            states.push(next.clone());
        }
        for psi in states.iter().rev() {
            // Recompute the midpoint m = ψ − i·dt/2·Hψ.
            hamiltonian_into(grid, psi, potential, &mut h_buf);
            for ((m, p), h) in mid.iter_mut().zip(psi).zip(&h_buf) {
                *m = p - I * (0.5 * dt) * h;
            }
            // g_m = i·dt·H g
            hamiltonian_into(grid, &g, potential, &mut h_buf);
            for (gm, h) in g_mid.iter_mut().zip(&h_buf) {
                *gm = I * dt * h;
            }
            for x in 0..n {
                g_v[x] += dt * (g[x].conj() * mid[x]).im + 0.5 * dt * (g_mid[x].conj() * psi[x]).im;
            }
            // g_ψ = g + g_m + i·dt/2·H g_m
            hamiltonian_into(grid, &g_mid, potential, &mut h_buf);
            for x in 0..n {
                g[x] = g[x] + g_mid[x] + I * (0.5 * dt) * h_buf[x];
            }
        }
    }
    (g, g_v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dims: Vec<usize>,
    pub in_frames: usize,
    pub channels: usize,
    pub unroll_steps: usize,
    pub seed: u64,
    pub tol: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Finite-difference step relative to `max(|θ|, 1)`.
    pub fd_step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: vec![12, 12],
            in_frames: 3,
            channels: 4,
            unroll_steps: 5,
            seed: 7,
            tol: 1e-5,
            lambda: model::DEFAULT_LAMBDA_TV,
            epsilon: model::DEFAULT_EPSILON,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub parameter_count: usize,
    /// Screening attempt that produced the instance.
    pub instance_attempt: u64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

/// Relative error with a small absolute floor, so entries whose true
/// gradient is at round-off level do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Smallest distance of any kink input (ReLU pre-activations, amplitude
/// head) from zero, and the relative gap between the two largest `|ψ_N|²`.
fn kink_margins(tape: &Tape) -> (f64, f64) {
    let act = &tape.act;
    let relu = act
        .pre1
        .iter()
        .chain(&act.pre2)
        .flatten()
        .chain(&act.a_raw)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let mut sq: Vec<f64> = tape.psi_final.iter().map(|z| z.norm_sqr()).collect();
    sq.sort_unstable_by(|a, b| b.total_cmp(a));
    let gap = if sq[0] > 0.0 { (sq[0] - sq[1]) / sq[0] } else { 0.0 };
    (relu, gap)
}

const SCREEN_ATTEMPTS: u64 = 64;
const RELU_MARGIN: f64 = 1e-3;
const ARGMAX_GAP: f64 = 1e-3;

/// A random gradcheck instance: parameters, a history and a target.
///
/// Draws are screened so that no ReLU input or argmax tie sits within
/// finite-difference reach of a kink; the returned attempt index is part of
/// the instance's seed lineage.
pub fn gradcheck_instance(
    cfg: &GradcheckConfig,
) -> Result<(EncoderParams, Vec<RealField>, RealField, u64)> {
    let grid = GridSpec::new(&cfg.dims)?;
    if grid.len() > crate::physics::DENSE_MAX_VOXELS {
        return Err(Error::Capability(format!(
            "gradcheck is limited to {} voxels",
            crate::physics::DENSE_MAX_VOXELS
        )));
    }
    let evo = EvolutionConfig::new(cfg.unroll_steps)?;
    let mut last = None;
    for attempt in 0..SCREEN_ATTEMPTS {
        let mut params = EncoderParams::init(grid.rank(), cfg.in_frames, cfg.channels, cfg.seed)?;
        let mut rng = CounterRng::new(cfg.seed, streams::GRADCHECK.wrapping_add(attempt));
        for id in TensorId::ALL {
            for v in params.tensor_mut(id) {
                *v += rng.uniform_in(-0.1, 0.1);
            }
        }
        let history: Vec<RealField> = (0..cfg.in_frames)
            .map(|_| RealField::from_fn(&grid, |_| rng.uniform()))
            .collect();
        let target = RealField::from_fn(&grid, |_| rng.uniform());
        let (tape, _) = Tape::record(&history, &params, &evo, cfg.epsilon)?;
        let (relu, gap) = kink_margins(&tape);
        let instance = (params, history, target, attempt);
        if relu > RELU_MARGIN && gap > ARGMAX_GAP {
            return Ok(instance);
        }
        last = Some(instance);
    }
    Ok(last.expect("at least one attempt"))
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, &BackwardOptions::default())
}

/// Compares [`backward_with`] against central differences on every
/// parameter, or on a seeded 5% subsample per tensor above 1000 parameters.
pub fn gradcheck_with(cfg: &GradcheckConfig, opts: &BackwardOptions) -> Result<GradcheckReport> {
    let (params, history, target, attempt) = gradcheck_instance(cfg)?;
    let evo = EvolutionConfig::new(cfg.unroll_steps)?;
    let (tape, _) = Tape::record(&history, &params, &evo, cfg.epsilon)?;
    let (grads, value) = backward_with(&tape, &params, &target, cfg.lambda, opts)?;

    let loss_at = |p: &EncoderParams| -> Result<f64> {
        let out = model::forecast(&history, p, &evo, cfg.epsilon)?;
        Ok(model::loss(&out.x_hat, &target, cfg.lambda)?.total * opts.loss_scale)
    };

    let total = params.parameter_count();
    let mut pick = CounterRng::new(cfg.seed, streams::GRADCHECK ^ 0xFFFF);
    let mut tensors = Vec::new();
    for id in TensorId::ALL {
        let len = params.tensor(id).len();
        let mut indices: Vec<usize> = (0..len).collect();
        if total > 1000 {
            pick.shuffle(&mut indices);
            indices.truncate(((len as f64 * 0.05).ceil() as usize).max(1));
            indices.sort_unstable();
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &indices {
            let theta = params.tensor(id)[i];
            let h = cfg.fd_step * theta.abs().max(1.0);
            let mut p = params.clone();
            p.tensor_mut(id)[i] = theta + h;
            let up = loss_at(&p)?;
            p.tensor_mut(id)[i] = theta - h;
            let down = loss_at(&p)?;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensor(id)[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: id.name().to_string(),
            checked: indices.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < cfg.tol,
        });
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradcheckReport {
        config: cfg.clone(),
        parameter_count: total,
        instance_attempt: attempt,
        loss: value.total,
        tensors,
        passed,
    })
}
