//! One function per subcommand. Each validates its inputs, does its work and
//! writes its outputs under the configured output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use wavecast::autodiff::{self, GradcheckReport};
use wavecast::metrics::{self, CaseMetrics, DiceSweep, ErrorHistogram, MetricsReport, Profile};
use wavecast::model::{self, EncoderParams};
use wavecast::physics::{self, EvolutionConfig};
use wavecast::synthgen::{self, Manifest, SequenceSample, Split};
use wavecast::train::{self, TrainOptions, TrainState};
use wavecast::{vf1, ComplexField, RealField};

use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::oracle::{self, OracleReport};
use crate::plot;

type Result<T> = std::result::Result<T, CliError>;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

// ---------------------------------------------------------------------------
// gen

pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    synthgen::build_dataset(&cfg.dataset_spec(), &cfg.io.data_dir)?;
    Ok(cfg.io.data_dir.join(synthgen::MANIFEST_FILE))
}

/// Loads a split, checking the dataset on disk matches the config.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SequenceSample>> {
    let dir = &cfg.io.data_dir;
    let manifest = Manifest::read(dir).map_err(|e| {
        CliError::Data(format!("{e} (run `wavecast gen` with this config first)"))
    })?;
    if manifest.spec() != cfg.dataset_spec() {
        return Err(CliError::Data(format!(
            "dataset in {} was generated from a different dataset section",
            dir.display()
        )));
    }
    Ok(synthgen::load_split(dir, split)?)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_train_total: f64,
    pub final_train_mse: f64,
    pub held_out: Option<train::MeanLoss>,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn check_model_shape(params: &EncoderParams, cfg: &RunConfig) -> Result<()> {
    let rank = cfg.dataset.kind.rank();
    if params.rank() != rank || params.channels() != cfg.model.channels || params.in_frames() != cfg.model.in_frames {
        return Err(CliError::Config(format!(
            "checkpoint model (rank {}, C={}, k={}) does not match the config (rank {rank}, C={}, k={})",
            params.rank(),
            params.channels(),
            params.in_frames(),
            cfg.model.channels,
            cfg.model.in_frames
        )));
    }
    Ok(())
}

/// Trains with an explicit config (the sweep retrains with other unroll depths).
fn train_model(
    cfg: &RunConfig,
    tc: &train::TrainConfig,
    data: &[SequenceSample],
    held_out: &[SequenceSample],
    out_dir: &Path,
    quiet: bool,
) -> Result<(train::TrainOutcome, PathBuf, PathBuf)> {
    let state = match &cfg.io.resume {
        Some(p) => train::load_checkpoint(p)?,
        None => TrainState::fresh(tc, cfg.dataset.kind.rank())?,
    };
    check_model_shape(&state.params, cfg)?;
    let ckpt_dir = out_dir.join("checkpoints");
    let every = cfg.train.log_every;
    let progress = |s: &train::EpochStats| {
        if !quiet && every > 0 && s.epoch % every == 0 {
            eprintln!(
                "epoch {:>4}  loss {:.6e}  mse {:.6e}  tv {:.4e}  ({:.2}s)",
                s.epoch, s.mean_total, s.mean_mse, s.mean_tv, s.wall_seconds
            );
        }
    };
    let outcome = train::train(
        data,
        tc,
        state,
        &TrainOptions {
            checkpoint_dir: Some(&ckpt_dir),
            held_out: Some(held_out),
            on_epoch: Some(&progress),
        },
    )?;
    let final_path = out_dir.join("final.ckpt");
    train::save_checkpoint(&outcome.state, &final_path)?;
    let curve_path = out_dir.join("loss_curve.csv");
    train::write_loss_curve(&curve_path, &outcome.state.curve)?;
    Ok((outcome, final_path, curve_path))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let tc = cfg.train_config();
    let data = load_split(cfg, Split::Train)?;
    let held_out = load_split(cfg, Split::Test)?;
    let out = &cfg.io.out_dir;
    ensure_dir(out)?;
    let (outcome, checkpoint, loss_curve) = train_model(cfg, &tc, &data, &held_out, out, false)?;
    let final_train = train::evaluate_loss(&data, &outcome.state.params, &tc)?;
    let summary = TrainSummary {
        epochs: outcome.state.epochs_done,
        final_train_total: final_train.total,
        final_train_mse: final_train.mse,
        held_out: outcome.held_out,
        checkpoint,
        loss_curve,
        checkpoints: outcome.checkpoints,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval

/// Something that turns a history into a forecast of the next frame.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model {
        params: &'a EncoderParams,
        evolution: EvolutionConfig,
        epsilon: f64,
    },
    Persistence,
    /// The target itself; a sanity reference.
    GroundTruth,
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model { .. } => "model",
            Predictor::Persistence => "persistence",
            Predictor::GroundTruth => "ground_truth",
        }
    }

    pub fn predict(&self, sample: &SequenceSample, in_frames: usize) -> Result<RealField> {
        let (history, target) = sample.split(in_frames)?;
        Ok(match self {
            Predictor::Model {
                params,
                evolution,
                epsilon,
            } => model::forecast(history, params, evolution, *epsilon)?.x_hat,
            Predictor::Persistence => model::persistence_baseline(history)?,
            Predictor::GroundTruth => target.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitEvaluation {
    pub predictor: String,
    pub report: MetricsReport,
    pub dice_sweep: DiceSweep,
    pub histogram: ErrorHistogram,
}

/// Per-case metrics (parallel, kept in sample order), the mean Dice sweep
/// and the pooled error histogram.
pub fn evaluate_split(
    cfg: &RunConfig,
    samples: &[SequenceSample],
    predictor: Predictor<'_>,
) -> Result<SplitEvaluation> {
    if samples.is_empty() {
        return Err(CliError::Data("evaluation split is empty".into()));
    }
    let e = &cfg.eval;
    let k = cfg.model.in_frames;
    let per_case: Vec<(CaseMetrics, Vec<f64>, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let pred = predictor.predict(s, k)?;
            let (_, target) = s.split(k)?;
            let row = CaseMetrics::compute(format!("{:05}", s.sample_index), &pred, target, e.tau, e.spectral_cutoff)?;
            let sweep = metrics::dice_sweep(&pred, target, &e.tau_sweep)?;
            let err: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
            Ok((row, sweep.dice, err))
        })
        .collect::<Result<_>>()?;
    let n = per_case.len() as f64;
    let mut mean_curve = vec![0.0; e.tau_sweep.len()];
    for (_, curve, _) in &per_case {
        for (m, d) in mean_curve.iter_mut().zip(curve) {
            *m += d / n;
        }
    }
    let pooled: Vec<f64> = per_case.iter().flat_map(|(_, _, err)| err.iter().copied()).collect();
    let rows = per_case.into_iter().map(|(r, _, _)| r).collect();
    Ok(SplitEvaluation {
        predictor: predictor.name().into(),
        report: MetricsReport::new(rows, None),
        dice_sweep: DiceSweep::from_curve(&e.tau_sweep, mean_curve),
        histogram: metrics::histogram_of(&pooled, e.histogram_bins),
    })
}

/// Single-volume forecast latency on the first sample.
pub fn profile_model(
    cfg: &RunConfig,
    sample: &SequenceSample,
    params: &EncoderParams,
    evolution: &EvolutionConfig,
) -> Result<Profile> {
    let (history, _) = sample.split(cfg.model.in_frames)?;
    Ok(metrics::profile(
        || model::forecast(history, params, evolution, cfg.model.epsilon).map(|_| ()),
        cfg.eval.profile_warmup,
        cfg.eval.profile_runs,
    )?)
}

pub fn load_params(cfg: &RunConfig) -> Result<EncoderParams> {
    let params = train::load_checkpoint(&cfg.checkpoint_path())?.params;
    check_model_shape(&params, cfg)?;
    Ok(params)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub split: Split,
    pub unroll_steps: usize,
    pub checkpoint: PathBuf,
    pub model: SplitEvaluation,
    pub persistence: SplitEvaluation,
    pub peak_rss_mb: Option<f64>,
}

fn dice_svg(title: &str, evals: &[(String, &DiceSweep)]) -> String {
    let series: Vec<plot::Series> = evals
        .iter()
        .map(|(name, s)| plot::Series {
            name,
            points: s.taus.iter().copied().zip(s.dice.iter().copied()).collect(),
        })
        .collect();
    plot::line_chart(title, "threshold", "mean Dice", &series)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let params = load_params(cfg)?;
    let samples = load_split(cfg, cfg.eval.split)?;
    let evolution = cfg.train_config().evolution()?;
    let out = &cfg.io.out_dir;
    ensure_dir(out)?;
    let model_pred = Predictor::Model {
        params: &params,
        evolution,
        epsilon: cfg.model.epsilon,
    };
    let mut model_eval = evaluate_split(cfg, &samples, model_pred)?;
    model_eval.report.profile = Some(profile_model(cfg, &samples[0], &params, &evolution)?);
    let persistence = evaluate_split(cfg, &samples, Predictor::Persistence)?;
    write_file(&out.join("report_model.csv"), model_eval.report.to_csv())?;
    write_file(&out.join("report_persistence.csv"), persistence.report.to_csv())?;
    if cfg.eval.plots {
        let sweeps = [
            ("model".to_string(), &model_eval.dice_sweep),
            ("persistence".to_string(), &persistence.dice_sweep),
        ];
        write_file(&out.join("dice_sweep.svg"), dice_svg("Dice vs threshold", &sweeps))?;
        let h = &model_eval.histogram;
        write_file(
            &out.join("error_histogram.svg"),
            plot::bar_chart("Voxelwise forecast error (model)", "prediction − target", &h.edges, &h.counts),
        )?;
    }
    let summary = EvalSummary {
        split: cfg.eval.split,
        unroll_steps: evolution.unroll_steps,
        checkpoint: cfg.checkpoint_path(),
        model: model_eval,
        persistence,
        peak_rss_mb: metrics::peak_rss_mb(),
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// sweep-unroll

pub const SWEEP_COLUMNS: [&str; 16] = [
    "unroll",
    "ssim",
    "psnr_db",
    "mse",
    "dice",
    "highfreq_frac",
    "lowfreq_frac",
    "hd95_vox",
    "assd_vox",
    "surface_dice_1vox",
    "pred_vol",
    "gt_vol",
    "abs_vol_err_pct",
    "com_err_vox",
    "latency_ms",
    "throughput_per_s",
];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub unroll: usize,
    /// Aggregate means keyed by column name.
    pub values: BTreeMap<String, f64>,
    pub latency_sd_ms: f64,
    pub dice_sweep: DiceSweep,
}

impl SweepRow {
    pub fn get(&self, column: &str) -> f64 {
        self.values.get(column).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub split: Split,
    pub retrained: bool,
    pub rows: Vec<SweepRow>,
    pub peak_rss_mb: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}", r.unroll);
        for c in &SWEEP_COLUMNS[1..] {
            let _ = write!(out, ",{}", r.get(c));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_sweep_unroll(cfg: &RunConfig) -> Result<SweepSummary> {
    let samples = load_split(cfg, cfg.eval.split)?;
    let out = &cfg.io.out_dir;
    ensure_dir(out)?;
    let shared = if cfg.eval.sweep_retrain { None } else { Some(load_params(cfg)?) };
    let train_data = if cfg.eval.sweep_retrain {
        Some((load_split(cfg, Split::Train)?, load_split(cfg, Split::Test)?))
    } else {
        None
    };
    let mut rows = Vec::new();
    for &n in &cfg.eval.unroll_list {
        let mut tc = cfg.train_config();
        tc.unroll_steps = n;
        tc.dt = None;
        let evolution = tc.evolution()?;
        let params = match (&shared, &train_data) {
            (Some(p), _) => p.clone(),
            (None, Some((tr, te))) => {
                let dir = out.join(format!("unroll_{n}"));
                ensure_dir(&dir)?;
                train_model(cfg, &tc, tr, te, &dir, true)?.0.state.params
            }
            (None, None) => unreachable!("either a checkpoint or training data is loaded"),
        };
        let eval = evaluate_split(
            cfg,
            &samples,
            Predictor::Model {
                params: &params,
                evolution,
                epsilon: cfg.model.epsilon,
            },
        )?;
        let prof = profile_model(cfg, &samples[0], &params, &evolution)?;
        let mut values: BTreeMap<String, f64> = eval.report.mean.clone();
        values.insert("latency_ms".into(), prof.latency_ms);
        values.insert("throughput_per_s".into(), prof.throughput_per_s);
        rows.push(SweepRow {
            unroll: n,
            values,
            latency_sd_ms: prof.latency_sd_ms,
            dice_sweep: eval.dice_sweep,
        });
    }
    write_file(&out.join("sweep.csv"), sweep_csv(&rows))?;
    if cfg.eval.plots {
        let sweeps: Vec<(String, &DiceSweep)> = rows.iter().map(|r| (format!("N={}", r.unroll), &r.dice_sweep)).collect();
        write_file(&out.join("sweep_dice.svg"), dice_svg("Dice vs threshold per unroll depth", &sweeps))?;
        let lat = plot::Series {
            name: "latency",
            points: rows.iter().map(|r| (r.unroll as f64, r.get("latency_ms"))).collect(),
        };
        write_file(
            &out.join("sweep_latency.svg"),
            plot::line_chart("Forecast latency", "unroll steps N", "latency (ms)", &[lat]),
        )?;
    }
    let summary = SweepSummary {
        split: cfg.eval.split,
        retrained: cfg.eval.sweep_retrain,
        rows,
        peak_rss_mb: metrics::peak_rss_mb(),
    };
    write_json(&out.join("sweep.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// gradcheck / oracle

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let report = autodiff::gradcheck(&cfg.gradcheck)?;
    ensure_dir(&cfg.io.out_dir)?;
    write_json(&cfg.io.out_dir.join("gradcheck.json"), &report)?;
    if !report.passed {
        let bad: Vec<&str> = report.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect();
        return Err(CliError::Verification(format!("gradient check failed on {}", bad.join(", "))));
    }
    Ok(report)
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleReport> {
    let report = oracle::run(&cfg.oracle)?;
    ensure_dir(&cfg.io.out_dir)?;
    write_json(&cfg.io.out_dir.join("oracle.json"), &report)?;
    if !report.passed {
        return Err(CliError::Verification("physics oracle checks failed; see oracle.json".into()));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// interpret

/// The mid-slice of a field as `(width, height, row-major values)`: the
/// whole field in 2D, the plane at `z = n_z/2` in 3D.
pub fn mid_slice(f: &RealField) -> (usize, usize, Vec<f64>) {
    let dims = f.grid().dims();
    match dims.len() {
        2 => (dims[1], dims[0], f.data().to_vec()),
        _ => {
            let plane = dims[1] * dims[2];
            let z = dims[0] / 2;
            (dims[2], dims[1], f.data()[z * plane..(z + 1) * plane].to_vec())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpretSummary {
    pub sample_index: u64,
    pub slice_width: usize,
    pub slice_height: usize,
    pub files: Vec<PathBuf>,
}

fn round_f32(f: &RealField) -> RealField {
    f.map(|v| v as f32 as f64)
}

pub fn cmd_interpret(cfg: &RunConfig) -> Result<InterpretSummary> {
    let it = &cfg.interpret;
    let samples = load_split(cfg, it.split)?;
    let sample = samples.get(it.sample).ok_or_else(|| {
        CliError::Config(format!(
            "interpret.sample {} is out of range for a {}-sample split",
            it.sample,
            samples.len()
        ))
    })?;
    let params = if it.zero_model {
        EncoderParams::zeros(cfg.dataset.kind.rank(), cfg.model.in_frames, cfg.model.channels)?
    } else {
        load_params(cfg)?
    };
    let evolution = cfg.train_config().evolution()?;
    let (history, _) = sample.split(cfg.model.in_frames)?;
    let out = model::forecast(history, &params, &evolution, cfg.model.epsilon)?;
    // Panels are derived from the f32 values that are written to disk, so
    // they can be recomputed exactly from the stored volumes.
    let potential = round_f32(&out.triplet.potential);
    let psi: ComplexField = out.psi_final.map(|z| num_complex::Complex64::new(z.re as f32 as f64, z.im as f32 as f64));
    let energy = physics::energy_density(&psi, &potential)?;
    let dir = cfg.io.out_dir.join("interpret");
    ensure_dir(&dir)?;
    let mut prov = BTreeMap::new();
    prov.insert("sample_index".to_string(), sample.sample_index.into());
    prov.insert("unroll_steps".to_string(), evolution.unroll_steps.into());
    let mut files = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> wavecast::Result<()>| -> Result<()> {
        let p = dir.join(name);
        f(&p)?;
        files.push(p);
        Ok(())
    };
    put("potential.vf1", &|p| vf1::write_real(p, &potential, prov.clone()))?;
    put("psi.vf1", &|p| vf1::write_complex(p, &psi, prov.clone()))?;
    put("energy.vf1", &|p| vf1::write_real(p, &energy, prov.clone()))?;
    let panels = [
        ("potential_mid.pgm", potential.clone()),
        ("psi_abs_mid.pgm", psi.abs()),
        ("energy_mid.pgm", energy.clone()),
    ];
    let mut dims = (0, 0);
    for (name, field) in panels {
        let (w, h, values) = mid_slice(&field);
        dims = (w, h);
        let p = dir.join(name);
        write_file(&p, plot::pgm(w, h, &values))?;
        files.push(p);
    }
    let summary = InterpretSummary {
        sample_index: sample.sample_index,
        slice_width: dims.0,
        slice_height: dims.1,
        files,
    };
    write_json(&dir.join("interpret.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// profile

#[derive(Debug, Clone, Serialize)]
pub struct ProfileSummary {
    pub unroll_steps: usize,
    pub dims: Vec<usize>,
    pub profile: Profile,
    pub peak_rss_mb: Option<f64>,
}

pub fn cmd_profile(cfg: &RunConfig) -> Result<ProfileSummary> {
    let params = load_params(cfg)?;
    let samples = load_split(cfg, cfg.eval.split)?;
    let evolution = cfg.train_config().evolution()?;
    let sample = samples.first().ok_or_else(|| CliError::Data("split is empty".into()))?;
    let profile = profile_model(cfg, sample, &params, &evolution)?;
    ensure_dir(&cfg.io.out_dir)?;
    let summary = ProfileSummary {
        unroll_steps: evolution.unroll_steps,
        dims: cfg.dataset.dims.clone(),
        profile,
        peak_rss_mb: metrics::peak_rss_mb(),
    };
    write_json(&cfg.io.out_dir.join("profile.json"), &summary)?;
    Ok(summary)
}
