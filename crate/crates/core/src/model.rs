//! Convolutional encoder, field heads, wavefunction assembly, intensity
//! reconstruction and the training loss.
//!
//! The encoder is two periodic 3^rank convolutions with ReLU, followed by
//! three 1×1 heads:
//!
//! ```text
//! A = max(a_raw, 0)      Φ = π·tanh(φ_raw)      V = tanh(v_raw)
//! ```

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{self, EvolutionConfig};
use crate::rng::{streams, CounterRng};
use crate::tensor::{ComplexField, Field, GridSpec, RealField};

pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_LAMBDA_TV: f64 = 1e-4;

/// Names the trainable tensors, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorId {
    Conv1Weight,
    Conv1Bias,
    Conv2Weight,
    Conv2Bias,
    HeadAWeight,
    HeadABias,
    HeadPhiWeight,
    HeadPhiBias,
    HeadVWeight,
    HeadVBias,
}

impl TensorId {
    pub const ALL: [TensorId; 10] = [
        TensorId::Conv1Weight,
        TensorId::Conv1Bias,
        TensorId::Conv2Weight,
        TensorId::Conv2Bias,
        TensorId::HeadAWeight,
        TensorId::HeadABias,
        TensorId::HeadPhiWeight,
        TensorId::HeadPhiBias,
        TensorId::HeadVWeight,
        TensorId::HeadVBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorId::Conv1Weight => "conv1.weight",
            TensorId::Conv1Bias => "conv1.bias",
            TensorId::Conv2Weight => "conv2.weight",
            TensorId::Conv2Bias => "conv2.bias",
            TensorId::HeadAWeight => "head_a.weight",
            TensorId::HeadABias => "head_a.bias",
            TensorId::HeadPhiWeight => "head_phi.weight",
            TensorId::HeadPhiBias => "head_phi.bias",
            TensorId::HeadVWeight => "head_v.weight",
            TensorId::HeadVBias => "head_v.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// All trainable weights of the encoder.
///
/// Convolution weights are stored `[out][in][tap]`, where taps enumerate the
/// 3^rank neighbourhood offsets in row-major order over `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    rank: usize,
    in_frames: usize,
    channels: usize,
    tensors: [Vec<f64>; 10],
}

impl EncoderParams {
    pub fn zeros(rank: usize, in_frames: usize, channels: usize) -> Result<Self> {
        if !(2..=3).contains(&rank) {
            return Err(Error::Argument(format!("rank must be 2 or 3, got {rank}")));
        }
        if in_frames == 0 || channels == 0 {
            return Err(Error::Argument(
                "encoder needs at least one input frame and one channel".into(),
            ));
        }
        let mut p = Self {
            rank,
            in_frames,
            channels,
            tensors: Default::default(),
        };
        for id in TensorId::ALL {
            let len = p.shape(id).iter().product();
            p.tensors[id as usize] = vec![0.0; len];
        }
        Ok(p)
    }

    /// He-uniform initialization, rounded to f32 so checkpoints are exact.
    pub fn init(rank: usize, in_frames: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(rank, in_frames, channels)?;
        let mut rng = CounterRng::new(seed, streams::PARAM_INIT);
        let taps = p.taps();
        let fan_in = [
            (TensorId::Conv1Weight, in_frames * taps),
            (TensorId::Conv2Weight, channels * taps),
            (TensorId::HeadAWeight, channels),
            (TensorId::HeadPhiWeight, channels),
            (TensorId::HeadVWeight, channels),
        ];
        for (id, fan) in fan_in {
            let bound = (6.0 / fan as f64).sqrt();
            for w in p.tensor_mut(id) {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        // Positive amplitude bias keeps the initial wavefunction alive.
        p.tensor_mut(TensorId::HeadABias)[0] = 0.5;
        p.tensor_mut(TensorId::Conv1Bias).fill(0.01);
        p.tensor_mut(TensorId::Conv2Bias).fill(0.01);
        p.round_to_f32();
        Ok(p)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_frames(&self) -> usize {
        self.in_frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial taps per convolution kernel (`3^rank`).
    pub fn taps(&self) -> usize {
        3usize.pow(self.rank as u32)
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        let (k, c, t) = (self.in_frames, self.channels, self.taps());
        match id {
            TensorId::Conv1Weight => vec![c, k, t],
            TensorId::Conv2Weight => vec![c, c, t],
            TensorId::Conv1Bias | TensorId::Conv2Bias => vec![c],
            TensorId::HeadAWeight | TensorId::HeadPhiWeight | TensorId::HeadVWeight => vec![c],
            TensorId::HeadABias | TensorId::HeadPhiBias | TensorId::HeadVBias => vec![1],
        }
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        &self.tensors[id as usize]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        &mut self.tensors[id as usize]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.rank == other.rank && self.in_frames == other.in_frames && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for v in self.tensors.iter_mut().flatten() {
            *v = *v as f32 as f64;
        }
    }

    /// Deterministic fingerprint of shapes and values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::mix64((self.rank * 1_000_003 + self.in_frames * 1009 + self.channels) as u64);
        for v in self.tensors.iter().flatten() {
            h = crate::rng::mix64(h ^ v.to_bits());
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldTriplet {
    pub amplitude: RealField,
    pub phase: RealField,
    pub potential: RealField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeads {
    pub a_raw: RealField,
    pub phi_raw: RealField,
    pub v_raw: RealField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub x_hat: RealField,
    pub psi_final: ComplexField,
    pub triplet: FieldTriplet,
    pub norm_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub tv: f64,
}

/// Offsets of the `3^rank` kernel taps.
pub(crate) fn tap_offsets(rank: usize) -> Vec<Vec<isize>> {
    let taps = 3usize.pow(rank as u32);
    (0..taps)
        .map(|t| {
            let mut off = vec![0isize; rank];
            let mut rem = t;
            for a in (0..rank).rev() {
                off[a] = (rem % 3) as isize - 1;
                rem /= 3;
            }
            off
        })
        .collect()
}

/// `out[x] = src[x + offset]` with periodic wrap.
pub(crate) fn gather_shifted(grid: &GridSpec, src: &[f64], offset: &[isize], out: &mut [f64]) {
    let dims = grid.dims();
    let strides = grid.strides();
    let table = |a: usize| -> Vec<usize> {
        let n = dims[a] as isize;
        (0..n)
            .map(|i| ((i + offset[a]).rem_euclid(n) as usize) * strides[a])
            .collect()
    };
    match grid.rank() {
        2 => {
            let (t0, t1) = (table(0), table(1));
            let mut j = 0;
            for &b0 in &t0 {
                for &b1 in &t1 {
                    out[j] = src[b0 + b1];
                    j += 1;
                }
            }
        }
        3 => {
            let (t0, t1, t2) = (table(0), table(1), table(2));
            let mut j = 0;
            for &b0 in &t0 {
                for &b1 in &t1 {
                    let b01 = b0 + b1;
                    for &b2 in &t2 {
                        out[j] = src[b01 + b2];
                        j += 1;
                    }
                }
            }
        }
        r => unreachable!("rank {r} grid"),
    }
}

/// Periodic same-size cross-correlation: `out[o] = b[o] + Σ_i Σ_t w[o][i][t]·in[i](x + off_t)`.
pub(crate) fn conv_forward(
    grid: &GridSpec,
    input: &[Vec<f64>],
    weight: &[f64],
    bias: &[f64],
) -> Vec<Vec<f64>> {
    let n = grid.len();
    let offsets = tap_offsets(grid.rank());
    let taps = offsets.len();
    let cin = input.len();
    let mut out: Vec<Vec<f64>> = bias.iter().map(|&b| vec![b; n]).collect();
    let mut shifted = vec![0.0; n];
    for (i, chan) in input.iter().enumerate() {
        for (t, off) in offsets.iter().enumerate() {
            gather_shifted(grid, chan, off, &mut shifted);
            for (o, dst) in out.iter_mut().enumerate() {
                let w = weight[(o * cin + i) * taps + t];
                if w != 0.0 {
                    dst.iter_mut().zip(&shifted).for_each(|(d, s)| *d += w * s);
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Adjoint of [`conv_forward`]. The input gradient correlates the output
/// gradient with the flipped kernel; the kernel gradient cross-correlates
/// input and output gradient.
pub(crate) fn conv_backward(
    grid: &GridSpec,
    input: &[Vec<f64>],
    weight: &[f64],
    grad_out: &[Vec<f64>],
    need_input: bool,
) -> ConvGrads {
    let n = grid.len();
    let offsets = tap_offsets(grid.rank());
    let taps = offsets.len();
    let cin = input.len();
    let cout = grad_out.len();
    let mut g_w = vec![0.0; cout * cin * taps];
    let bias = grad_out.iter().map(|g| g.iter().sum()).collect();
    let mut g_in = if need_input { vec![vec![0.0; n]; cin] } else { Vec::new() };
    let mut shifted = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for (i, chan) in input.iter().enumerate() {
        for (t, off) in offsets.iter().enumerate() {
            gather_shifted(grid, chan, off, &mut shifted);
            for (o, go) in grad_out.iter().enumerate() {
                g_w[(o * cin + i) * taps + t] = go.iter().zip(&shifted).map(|(a, b)| a * b).sum();
            }
            if need_input {
                acc.fill(0.0);
                for (o, go) in grad_out.iter().enumerate() {
                    let w = weight[(o * cin + i) * taps + t];
                    if w != 0.0 {
                        acc.iter_mut().zip(go).for_each(|(a, g)| *a += w * g);
                    }
                }
                let neg: Vec<isize> = off.iter().map(|o| -o).collect();
                gather_shifted(grid, &acc, &neg, &mut shifted);
                g_in[i].iter_mut().zip(&shifted).for_each(|(d, s)| *d += s);
            }
        }
    }
    ConvGrads {
        input: g_in,
        weight: g_w,
        bias,
    }
}

/// Activations of one encoder pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderActivations {
    pub input: Vec<Vec<f64>>,
    pub pre1: Vec<Vec<f64>>,
    pub hidden1: Vec<Vec<f64>>,
    pub pre2: Vec<Vec<f64>>,
    pub hidden2: Vec<Vec<f64>>,
    pub a_raw: Vec<f64>,
    pub phi_raw: Vec<f64>,
    pub v_raw: Vec<f64>,
}

fn relu_all(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().map(|c| c.iter().map(|&v| v.max(0.0)).collect()).collect()
}

fn head(hidden: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    let n = hidden[0].len();
    let mut out = vec![b; n];
    for (chan, &wc) in hidden.iter().zip(w) {
        out.iter_mut().zip(chan).for_each(|(o, h)| *o += wc * h);
    }
    out
}

pub(crate) fn check_history(history: &[RealField], params: &EncoderParams) -> Result<GridSpec> {
    let first = history
        .first()
        .ok_or_else(|| Error::Argument("empty history".into()))?;
    if history.len() != params.in_frames {
        return Err(Error::Argument(format!(
            "history has {} frames, encoder expects {}",
            history.len(),
            params.in_frames
        )));
    }
    if first.grid().rank() != params.rank {
        return Err(Error::Argument(format!(
            "rank-{} frames for a rank-{} encoder",
            first.grid().rank(),
            params.rank
        )));
    }
    for f in &history[1..] {
        first.grid().check_same(f.grid(), "history frames")?;
    }
    Ok(first.grid().clone())
}

pub(crate) fn encoder_activations(
    history: &[RealField],
    params: &EncoderParams,
) -> Result<(GridSpec, EncoderActivations)> {
    let grid = check_history(history, params)?;
    let input: Vec<Vec<f64>> = history.iter().map(|f| f.data().to_vec()).collect();
    let pre1 = conv_forward(
        &grid,
        &input,
        params.tensor(TensorId::Conv1Weight),
        params.tensor(TensorId::Conv1Bias),
    );
    let hidden1 = relu_all(&pre1);
    let pre2 = conv_forward(
        &grid,
        &hidden1,
        params.tensor(TensorId::Conv2Weight),
        params.tensor(TensorId::Conv2Bias),
    );
    let hidden2 = relu_all(&pre2);
    let a_raw = head(&hidden2, params.tensor(TensorId::HeadAWeight), params.tensor(TensorId::HeadABias)[0]);
    let phi_raw = head(
        &hidden2,
        params.tensor(TensorId::HeadPhiWeight),
        params.tensor(TensorId::HeadPhiBias)[0],
    );
    let v_raw = head(&hidden2, params.tensor(TensorId::HeadVWeight), params.tensor(TensorId::HeadVBias)[0]);
    Ok((
        grid,
        EncoderActivations {
            input,
            pre1,
            hidden1,
            pre2,
            hidden2,
            a_raw,
            phi_raw,
            v_raw,
        },
    ))
}

pub fn encoder_forward(history: &[RealField], params: &EncoderParams) -> Result<RawHeads> {
    let (grid, act) = encoder_activations(history, params)?;
    let wrap = |d: Vec<f64>| -> Result<RealField> {
        RealField::new(grid.clone(), d).map_err(|e| Error::Numeric(format!("encoder output: {e}")))
    };
    Ok(RawHeads {
        a_raw: wrap(act.a_raw)?,
        phi_raw: wrap(act.phi_raw)?,
        v_raw: wrap(act.v_raw)?,
    })
}

pub fn assemble_triplet(raw: &RawHeads) -> Result<FieldTriplet> {
    raw.a_raw.grid().check_same(raw.phi_raw.grid(), "raw heads")?;
    raw.a_raw.grid().check_same(raw.v_raw.grid(), "raw heads")?;
    Ok(FieldTriplet {
        amplitude: raw.a_raw.map(|v| v.max(0.0)),
        phase: raw.phi_raw.map(|v| PI * v.tanh()),
        potential: raw.v_raw.map(f64::tanh),
    })
}

/// `ψ = A·(cos Φ + i sin Φ)`.
pub fn assemble_psi(t: &FieldTriplet) -> ComplexField {
    let data = t
        .amplitude
        .data()
        .iter()
        .zip(t.phase.data())
        .map(|(&a, &p)| Complex64::new(a * p.cos(), a * p.sin()))
        .collect();
    Field::from_parts(t.amplitude.grid().clone(), data)
}

/// `|ψ|² / (max|ψ|² + ε)`.
pub fn reconstruct_intensity(psi: &ComplexField, epsilon: f64) -> Result<RealField> {
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let sq = psi.abs_sqr();
    let denom = sq.max() + epsilon;
    Ok(sq.map(|s| s / denom))
}

/// Mean over voxels of `Σ_axes |x − roll(x, axis, 1)|`.
pub fn tv_penalty(x: &RealField) -> f64 {
    let grid = x.grid();
    let d = x.data();
    let mut total = 0.0;
    for axis in 0..grid.rank() {
        let (outer, n, inner) = grid.axis_blocks(axis);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let prev = base + ((i + n - 1) % n) * inner;
                let cur = base + i * inner;
                for j in 0..inner {
                    total += (d[cur + j] - d[prev + j]).abs();
                }
            }
        }
    }
    total / x.len() as f64
}

pub fn loss(x_hat: &RealField, x_true: &RealField, lambda: f64) -> Result<LossValue> {
    x_hat.grid().check_same(x_true.grid(), "loss")?;
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be nonnegative, got {lambda}")));
    }
    let mse = x_hat
        .data()
        .iter()
        .zip(x_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_hat.len() as f64;
    let tv = tv_penalty(x_hat);
    Ok(LossValue {
        total: mse + lambda * tv,
        mse,
        tv,
    })
}

pub fn forecast(
    history: &[RealField],
    params: &EncoderParams,
    cfg: &EvolutionConfig,
    epsilon: f64,
) -> Result<ForecastOutput> {
    let raw = encoder_forward(history, params)?;
    let triplet = assemble_triplet(&raw)?;
    let psi0 = assemble_psi(&triplet);
    let (psi_final, norm_trace) = physics::evolve(&psi0, &triplet.potential, cfg)
        .map_err(|e| Error::Numeric(format!("evolution stage: {e}")))?;
    let x_hat = reconstruct_intensity(&psi_final, epsilon)?;
    Ok(ForecastOutput {
        x_hat,
        psi_final,
        triplet,
        norm_trace,
    })
}

/// Repeats the last observed frame.
pub fn persistence_baseline(history: &[RealField]) -> Result<RealField> {
    history
        .last()
        .cloned()
        .ok_or_else(|| Error::Argument("persistence baseline needs at least one frame".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_field(grid: &GridSpec, seed: u64, lo: f64, hi: f64) -> RealField {
        let mut r = CounterRng::new(seed, 77);
        RealField::from_fn(grid, |_| r.uniform_in(lo, hi))
    }

    fn history(grid: &GridSpec, k: usize, seed: u64) -> Vec<RealField> {
        (0..k).map(|i| random_field(grid, seed + i as u64, 0.0, 1.0)).collect()
    }

    fn max_diff(a: &RealField, b: &RealField) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn parameter_shapes_and_count() {
        let p = EncoderParams::zeros(2, 3, 4).unwrap();
        assert_eq!(p.shape(TensorId::Conv1Weight), vec![4, 3, 9]);
        assert_eq!(p.parameter_count(), 4 * 3 * 9 + 4 + 4 * 4 * 9 + 4 + 3 * 5);
        let q = EncoderParams::zeros(3, 5, 8).unwrap();
        assert_eq!(q.parameter_count(), 8 * 5 * 27 + 8 + 8 * 8 * 27 + 8 + 3 * 9);
        assert!(EncoderParams::zeros(4, 5, 8).is_err());
        for id in TensorId::ALL {
            assert_eq!(TensorId::from_name(id.name()), Some(id));
        }
    }

    #[test]
    fn zero_weights_give_zero_heads() {
        let g = GridSpec::new(&[6, 5]).unwrap();
        let p = EncoderParams::zeros(2, 3, 4).unwrap();
        let raw = encoder_forward(&history(&g, 3, 1), &p).unwrap();
        for f in [&raw.a_raw, &raw.phi_raw, &raw.v_raw] {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pass_through_kernels_reproduce_selected_frame() {
        let g = GridSpec::new(&[5, 6, 4]).unwrap();
        let mut p = EncoderParams::zeros(3, 4, 3).unwrap();
        let taps = p.taps();
        let centre = (taps - 1) / 2;
        let selected = 2;
        p.tensor_mut(TensorId::Conv1Weight)[(0 * 4 + selected) * taps + centre] = 1.0;
        p.tensor_mut(TensorId::Conv2Weight)[0 * taps + centre] = 1.0;
        p.tensor_mut(TensorId::HeadAWeight)[0] = 1.0;
        let hist = history(&g, 4, 9);
        let raw = encoder_forward(&hist, &p).unwrap();
        assert_eq!(raw.a_raw, hist[selected]);
    }

    #[test]
    fn encoder_rejects_channel_mismatch() {
        let g = GridSpec::new(&[6, 6]).unwrap();
        let p = EncoderParams::zeros(2, 3, 4).unwrap();
        assert!(encoder_forward(&history(&g, 2, 0), &p).is_err());
        assert!(encoder_forward(&[], &p).is_err());
    }

    #[test]
    fn encoder_is_shift_equivariant() {
        let g = GridSpec::new(&[7, 6, 5]).unwrap();
        let p = EncoderParams::init(3, 3, 4, 12).unwrap();
        let hist = history(&g, 3, 4);
        let shifted: Vec<RealField> = hist.iter().map(|f| f.roll(0, 3).unwrap().roll(2, -1).unwrap()).collect();
        let a = encoder_forward(&hist, &p).unwrap();
        let b = encoder_forward(&shifted, &p).unwrap();
        for (x, y) in [(&a.a_raw, &b.a_raw), (&a.phi_raw, &b.phi_raw), (&a.v_raw, &b.v_raw)] {
            let expect = x.roll(0, 3).unwrap().roll(2, -1).unwrap();
            assert!(max_diff(&expect, y) < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let g = GridSpec::new(&[4, 5]).unwrap();
        let p = EncoderParams::init(2, 2, 3, 5).unwrap();
        let input: Vec<Vec<f64>> = history(&g, 2, 3).into_iter().map(|f| f.into_data()).collect();
        let w = p.tensor(TensorId::Conv1Weight);
        let b = [0.1, -0.2, 0.3];
        let out = conv_forward(&g, &input, w, &b);
        let offs = tap_offsets(2);
        for o in 0..3 {
            for x in 0..g.len() {
                let pos = g.unravel(x);
                let mut acc = b[o];
                for i in 0..2 {
                    for (t, off) in offs.iter().enumerate() {
                        let src = [
                            (pos[0] as isize + off[0]).rem_euclid(4) as usize,
                            (pos[1] as isize + off[1]).rem_euclid(5) as usize,
                        ];
                        acc += w[(o * 2 + i) * 9 + t] * input[i][g.ravel(&src)];
                    }
                }
                assert!((acc - out[o][x]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn triplet_nonlinearities() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let zero = RealField::zeros(&g);
        let t = assemble_triplet(&RawHeads {
            a_raw: zero.clone(),
            phi_raw: zero.clone(),
            v_raw: zero.clone(),
        })
        .unwrap();
        assert!(t.amplitude.data().iter().chain(t.phase.data()).chain(t.potential.data()).all(|&v| v == 0.0));

        let t = assemble_triplet(&RawHeads {
            a_raw: RealField::filled(&g, -3.0),
            phi_raw: RealField::filled(&g, 10.0),
            v_raw: RealField::filled(&g, -1e6),
        })
        .unwrap();
        assert!(t.amplitude.data().iter().all(|&v| v == 0.0));
        let phi = t.phase.data()[0];
        assert!((phi - 3.141_592_641_1).abs() < 1e-9 && phi < PI);
        assert!(t.potential.data().iter().all(|&v| v >= -1.0));
    }

    #[test]
    fn triplet_ranges_hold_for_extreme_inputs() {
        let g = GridSpec::new(&[8, 8]).unwrap();
        for seed in 0..20 {
            let raw = RawHeads {
                a_raw: random_field(&g, seed, -1e6, 1e6),
                phi_raw: random_field(&g, seed + 100, -1e6, 1e6),
                v_raw: random_field(&g, seed + 200, -1e6, 1e6),
            };
            let t = assemble_triplet(&raw).unwrap();
            assert!(t.amplitude.data().iter().all(|&a| a >= 0.0));
            assert!(t.phase.data().iter().all(|&p| (-PI..=PI).contains(&p)));
            assert!(t.potential.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn psi_from_polar_fields() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let t = FieldTriplet {
            amplitude: RealField::filled(&g, 1.0),
            phase: RealField::zeros(&g),
            potential: RealField::zeros(&g),
        };
        assert!(assemble_psi(&t).data().iter().all(|z| *z == Complex64::new(1.0, 0.0)));
        let t = FieldTriplet {
            amplitude: RealField::filled(&g, 2.0),
            phase: RealField::filled(&g, PI / 2.0),
            potential: RealField::zeros(&g),
        };
        assert!(assemble_psi(&t).data().iter().all(|z| (z - Complex64::new(0.0, 2.0)).norm() < 1e-12));

        let t = FieldTriplet {
            amplitude: random_field(&g, 1, 0.0, 3.0),
            phase: random_field(&g, 2, -PI, PI),
            potential: RealField::zeros(&g),
        };
        let psi = assemble_psi(&t);
        for ((z, a), p) in psi.data().iter().zip(t.amplitude.data()).zip(t.phase.data()) {
            assert!((z.norm() - a).abs() < 1e-12);
            assert!((z.arg() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_cases() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let x = reconstruct_intensity(&ComplexField::zeros(&g), 1e-8).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));

        let mut psi = ComplexField::zeros(&g);
        psi.data_mut()[7] = Complex64::new(0.0, 2.0);
        let x = reconstruct_intensity(&psi, 1e-8).unwrap();
        assert!((x.data()[7] - (1.0 - 2.5e-9)).abs() < 1e-15);
        assert_eq!(x.data().iter().filter(|&&v| v == 0.0).count(), 15);

        let uni = ComplexField::filled(&g, Complex64::from_polar(0.8, 1.1));
        let x = reconstruct_intensity(&uni, 1e-8).unwrap();
        assert!(x.data().iter().all(|&v| v < 1.0 && v > 1.0 - 1e-7 && v == x.data()[0]));
        assert!(reconstruct_intensity(&uni, 0.0).is_err());
    }

    #[test]
    fn reconstruction_ignores_global_phase() {
        let g = GridSpec::new(&[6, 6, 4]).unwrap();
        let mut r = CounterRng::new(3, 3);
        let psi = ComplexField::from_fn(&g, |_| Complex64::new(r.uniform_in(-1.0, 1.0), r.uniform_in(-1.0, 1.0)));
        let base = reconstruct_intensity(&psi, 1e-8).unwrap();
        for k in 0..10 {
            let theta = r.uniform_in(-PI, PI) + k as f64;
            let rot = reconstruct_intensity(&psi.scale_complex(Complex64::from_polar(1.0, theta)), 1e-8).unwrap();
            assert!(max_diff(&base, &rot) < 1e-12);
        }
    }

    #[test]
    fn tv_cases() {
        let g = GridSpec::new(&[4, 8]).unwrap();
        assert_eq!(tv_penalty(&RealField::filled(&g, 0.3)), 0.0);
        // Every row is a half-0/half-1 ring of length 8: two unit jumps per row.
        let step = RealField::from_fn(&g, |i| if i[1] < 4 { 0.0 } else { 1.0 });
        assert!((tv_penalty(&step) - 2.0 / 8.0).abs() < 1e-15);
        let f = random_field(&g, 4, 0.0, 1.0);
        assert!((tv_penalty(&f) - tv_penalty(&f.map(|v| v + 0.37))).abs() < 1e-12);
    }

    #[test]
    fn loss_cases() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let c = RealField::filled(&g, 0.4);
        let l = loss(&c, &c, 1e-4).unwrap();
        assert_eq!((l.total, l.mse, l.tv), (0.0, 0.0, 0.0));
        let l = loss(&RealField::filled(&g, 0.5), &c, 0.0).unwrap();
        assert!((l.total - 0.01).abs() < 1e-15);
        let a = random_field(&g, 1, 0.0, 1.0);
        let b = random_field(&g, 2, 0.0, 1.0);
        let l = loss(&a, &b, 1e-4).unwrap();
        assert!((l.total - (l.mse + 1e-4 * l.tv)).abs() < 1e-15);
        assert!((l.total - 1e-4 * l.tv - l.mse).abs() < 1e-15);
        assert!(loss(&a, &RealField::zeros(&GridSpec::new(&[4, 5]).unwrap()), 0.0).is_err());
        assert!(loss(&a, &b, -1.0).is_err());
    }

    #[test]
    fn zero_model_forecasts_zero() {
        let g = GridSpec::new(&[6, 6]).unwrap();
        let p = EncoderParams::zeros(2, 5, 4).unwrap();
        let out = forecast(&history(&g, 5, 0), &p, &EvolutionConfig::new(4).unwrap(), 1e-8).unwrap();
        assert!(out.x_hat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forecast_is_composition_of_stages() {
        let g = GridSpec::new(&[8, 6]).unwrap();
        let p = EncoderParams::init(2, 3, 4, 2).unwrap();
        let hist = history(&g, 3, 5);
        let cfg = EvolutionConfig::new(6).unwrap();
        let out = forecast(&hist, &p, &cfg, 1e-8).unwrap();
        let raw = encoder_forward(&hist, &p).unwrap();
        let t = assemble_triplet(&raw).unwrap();
        let psi0 = assemble_psi(&t);
        let (psi_n, trace) = physics::evolve(&psi0, &t.potential, &cfg).unwrap();
        assert_eq!(out.triplet, t);
        assert_eq!(out.psi_final, psi_n);
        assert_eq!(out.norm_trace, trace);
        assert_eq!(out.x_hat, reconstruct_intensity(&psi_n, 1e-8).unwrap());
        assert!(out.x_hat.max() < 1.0);
    }

    #[test]
    fn forecast_is_shift_equivariant() {
        let g = GridSpec::new(&[8, 8, 6]).unwrap();
        let p = EncoderParams::init(3, 3, 4, 8).unwrap();
        let hist = history(&g, 3, 1);
        let cfg = EvolutionConfig::new(5).unwrap();
        let base = forecast(&hist, &p, &cfg, 1e-8).unwrap();
        let shifted: Vec<RealField> = hist.iter().map(|f| f.roll(1, 3).unwrap()).collect();
        let moved = forecast(&shifted, &p, &cfg, 1e-8).unwrap();
        assert!(max_diff(&base.x_hat.roll(1, 3).unwrap(), &moved.x_hat) < 1e-10);
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let g = GridSpec::new(&[4, 4]).unwrap();
        let hist = history(&g, 3, 2);
        assert_eq!(persistence_baseline(&hist).unwrap(), hist[2]);
        assert_eq!(persistence_baseline(&hist[..1]).unwrap(), hist[0]);
        assert!(persistence_baseline(&[]).is_err());
        let frame = random_field(&g, 9, 0.0, 1.0);
        let pred = persistence_baseline(&[frame.clone(), frame.clone()]).unwrap();
        assert_eq!(loss(&pred, &frame, 0.0).unwrap().mse, 0.0);
    }
}
