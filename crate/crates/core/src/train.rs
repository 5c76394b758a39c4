//! Adam, the mini-batch training loop and checkpoints.
//!
//! Parameters and optimizer moments are rounded to f32 after every update, so
//! a checkpoint (f32 payload) captures the in-memory state exactly and a
//! resumed run is bit-identical to an uninterrupted one.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamGrads, Tape};
use crate::error::{Error, Result};
use crate::model::{self, EncoderParams, LossValue, TensorId};
use crate::physics::EvolutionConfig;
use crate::rng::{streams, CounterRng};
use crate::synthgen::SequenceSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda_tv: f64,
    pub unroll_steps: usize,
    /// Overrides the default step `1/unroll_steps`.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub channels: usize,
    pub in_frames: usize,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda_tv: model::DEFAULT_LAMBDA_TV,
            unroll_steps: 20,
            dt: None,
            seed: 0,
            checkpoint_every: 0,
            channels: model::DEFAULT_CHANNELS,
            in_frames: 5,
            epsilon: model::DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0) || !(self.epsilon > 0.0) {
            return bad("eps_adam and epsilon must be positive".into());
        }
        if !(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite()) {
            return bad(format!("lambda_tv must be non-negative, got {}", self.lambda_tv));
        }
        if self.channels == 0 || !(1..=5).contains(&self.in_frames) {
            return bad("channels must be ≥ 1 and in_frames in 1..=5".into());
        }
        self.evolution().map(|_| ())
    }

    pub fn evolution(&self) -> Result<EvolutionConfig> {
        match self.dt {
            Some(dt) => EvolutionConfig::with_dt(self.unroll_steps, dt),
            None => EvolutionConfig::new(self.unroll_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &EncoderParams, cfg: &TrainConfig) -> Self {
        let zeros = ParamGrads::zeros_like(params).0;
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
        }
    }

    fn round_to_f32(&mut self) {
        self.m.round_to_f32();
        self.v.round_to_f32();
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(params: &mut EncoderParams, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(&grads.0) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Argument("adam_step: parameter, gradient and moment shapes differ".into()));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for id in TensorId::ALL {
        let g = grads.tensor(id);
        let m = state.m.tensor_mut(id);
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.tensor_mut(id);
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m.tensor(id), state.v.tensor(id));
        for ((p, mi), vi) in params.tensor_mut(id).iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_mse: f64,
    pub mean_tv: f64,
    pub wall_seconds: f64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub curve: Vec<EpochStats>,
}

impl TrainState {
    /// Seeded initial parameters for a rank-`rank` model.
    pub fn fresh(cfg: &TrainConfig, rank: usize) -> Result<Self> {
        let params = EncoderParams::init(rank, cfg.in_frames, cfg.channels, cfg.seed)?;
        Ok(Self::from_params(params, cfg))
    }

    pub fn from_params(params: EncoderParams, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(&params, cfg);
        Self {
            params,
            adam,
            epochs_done: 0,
            curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanLoss {
    pub total: f64,
    pub mse: f64,
    pub tv: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub held_out: Option<&'a [SequenceSample]>,
    pub on_epoch: Option<&'a (dyn Fn(&EpochStats) + Sync)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub held_out: Option<MeanLoss>,
}

fn check_dataset(data: &[SequenceSample], params: &EncoderParams) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("training set is empty".into()))?;
    let grid = first.frames[0].grid();
    if grid.rank() != params.rank() {
        return Err(Error::Argument(format!(
            "rank-{} data for a rank-{} model",
            grid.rank(),
            params.rank()
        )));
    }
    for s in data {
        for f in &s.frames {
            grid.check_same(f.grid(), "dataset frame")?;
        }
    }
    Ok(())
}

/// Loss and gradients for one sample.
pub fn sample_gradients(
    sample: &SequenceSample,
    params: &EncoderParams,
    cfg: &TrainConfig,
    evo: &EvolutionConfig,
) -> Result<(ParamGrads, LossValue)> {
    let (history, target) = sample.split(cfg.in_frames)?;
    let (tape, _) = Tape::record(history, params, evo, cfg.epsilon)?;
    autodiff::backward(&tape, params, target, cfg.lambda_tv)
}

/// Mean loss over a set without updating anything.
pub fn evaluate_loss(data: &[SequenceSample], params: &EncoderParams, cfg: &TrainConfig) -> Result<MeanLoss> {
    let evo = cfg.evolution()?;
    let losses: Vec<LossValue> = data
        .par_iter()
        .map(|s| {
            let (history, target) = s.split(cfg.in_frames)?;
            let out = model::forecast(history, params, &evo, cfg.epsilon)?;
            model::loss(&out.x_hat, target, cfg.lambda_tv)
        })
        .collect::<Result<_>>()?;
    Ok(mean_loss(&losses))
}

fn mean_loss(losses: &[LossValue]) -> MeanLoss {
    let n = losses.len().max(1) as f64;
    MeanLoss {
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        mse: losses.iter().map(|l| l.mse).sum::<f64>() / n,
        tv: losses.iter().map(|l| l.tv).sum::<f64>() / n,
    }
}

/// Sample order for one epoch, from the `(seed, epoch)` shuffle stream.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::new(seed, streams::SHUFFLE.wrapping_add(epoch as u64)).shuffle(&mut order);
    order
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains from `state` until `cfg.epochs` epochs are complete.
///
/// Per-sample work inside a batch runs in parallel; gradients are averaged in
/// batch order, so results do not depend on the thread count.
pub fn train(
    data: &[SequenceSample],
    cfg: &TrainConfig,
    mut state: TrainState,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, &state.params)?;
    let evo = cfg.evolution()?;
    if let Some(dir) = opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Hyperparameters come from the config, moments from the state.
    state.adam.lr = cfg.lr;
    state.adam.beta1 = cfg.beta1;
    state.adam.beta2 = cfg.beta2;
    state.adam.eps = cfg.eps_adam;

    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done + 1;
        let start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut losses = Vec::with_capacity(data.len());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let params = &state.params;
            let results: Vec<Result<(ParamGrads, LossValue)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(&data[i], params, cfg, &evo))
                .collect();
            let mut grads = ParamGrads::zeros_like(params);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in results.into_iter().zip(batch) {
                let (g, l) = r.map_err(|e| abort(epoch, b, i, &e.to_string(), &last_good))?;
                if !l.total.is_finite() {
                    return Err(abort(epoch, b, i, "non-finite loss", &last_good));
                }
                grads.accumulate(&g, scale);
                losses.push(l);
            }
            adam_step(&mut state.params, &grads, &mut state.adam)?;
            state.params.round_to_f32();
            state.adam.round_to_f32();
            if !state.params.all_finite() {
                return Err(abort(epoch, b, batch[0], "non-finite parameters", &last_good));
            }
        }
        let m = mean_loss(&losses);
        let stats = EpochStats {
            epoch,
            mean_total: m.total,
            mean_mse: m.mse,
            mean_tv: m.tv,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        state.curve.push(stats);
        state.epochs_done = epoch;
        if let Some(cb) = opts.on_epoch {
            cb(&stats);
        }
        if let Some(dir) = opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
                let path = checkpoint_path(dir, epoch);
                save_checkpoint(&state, &path)?;
                last_good = Some(path.clone());
                checkpoints.push(path);
            }
        }
    }
    let held_out = match opts.held_out {
        Some(set) if !set.is_empty() => Some(evaluate_loss(set, &state.params, cfg)?),
        _ => None,
    };
    Ok(TrainOutcome {
        state,
        checkpoints,
        held_out,
    })
}

fn abort(epoch: usize, batch: usize, sample: usize, what: &str, last_good: &Option<PathBuf>) -> Error {
    let kept = match last_good {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint written yet".into(),
    };
    Error::Numeric(format!(
        "training aborted at epoch {epoch}, batch {batch}, sample {sample}: {what}; {kept}"
    ))
}

pub fn loss_curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_total,mean_mse,mean_tv,wall_seconds\n");
    for s in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch, s.mean_total, s.mean_mse, s.mean_tv, s.wall_seconds
        );
    }
    out
}

pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    fs::write(path, loss_curve_csv(curve)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoints: "WCK1" | u32 LE header length | JSON header | f32 LE payload.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    rank: usize,
    in_frames: usize,
    channels: usize,
    epoch: usize,
    adam: AdamHeader,
    curve: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
}

fn slots(state: &TrainState) -> Vec<(String, &[f64], Vec<usize>)> {
    let p = &state.params;
    let mut out = Vec::with_capacity(30);
    for (prefix, src) in [("", p), ("adam.m.", &state.adam.m), ("adam.v.", &state.adam.v)] {
        for id in TensorId::ALL {
            out.push((format!("{prefix}{}", id.name()), src.tensor(id), p.shape(id)));
        }
    }
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, values, shape) in slots(state) {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
            len: values.len(),
        });
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let a = &state.adam;
    let header = CheckpointHeader {
        version: 1,
        rank: state.params.rank(),
        in_frames: state.params.in_frames(),
        channels: state.params.channels(),
        epoch: state.epochs_done,
        adam: AdamHeader {
            t: a.t,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        },
        curve: state.curve.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt("missing WCK1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| fmt(&format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(fmt(&format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[8 + hlen..];
    let mut params = EncoderParams::zeros(header.rank, header.in_frames, header.channels)
        .map_err(|e| fmt(&e.to_string()))?;
    let mut m = params.clone();
    let mut v = params.clone();
    let expected = 3 * TensorId::ALL.len();
    if header.tensors.len() != expected {
        return Err(fmt(&format!("{} tensors listed, expected {expected}", header.tensors.len())));
    }
    let mut consumed = 0;
    for entry in &header.tensors {
        let (target, name) = if let Some(n) = entry.name.strip_prefix("adam.m.") {
            (&mut m, n)
        } else if let Some(n) = entry.name.strip_prefix("adam.v.") {
            (&mut v, n)
        } else {
            (&mut params, entry.name.as_str())
        };
        let id = TensorId::from_name(name).ok_or_else(|| fmt(&format!("unknown tensor {}", entry.name)))?;
        if entry.shape != target.shape(id) || entry.len != target.tensor(id).len() {
            return Err(fmt(&format!("tensor {} has shape {:?}", entry.name, entry.shape)));
        }
        let raw = payload
            .get(entry.offset..entry.offset + 4 * entry.len)
            .ok_or_else(|| fmt(&format!("payload truncated in {}", entry.name)))?;
        for (dst, c) in target.tensor_mut(id).iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        consumed += 4 * entry.len;
    }
    if consumed != payload.len() {
        return Err(fmt(&format!("payload is {} bytes, header accounts for {consumed}", payload.len())));
    }
    if !(params.all_finite() && m.all_finite() && v.all_finite()) {
        return Err(fmt("non-finite values"));
    }
    let a = header.adam;
    Ok(TrainState {
        params,
        adam: AdamState {
            m,
            v,
            t: a.t,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        },
        epochs_done: header.epoch,
        curve: header.curve,
    })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
