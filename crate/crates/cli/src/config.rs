//! `RunConfig`: the single JSON document every subcommand reads.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. [`RunConfig::validate`] runs before any command touches disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wavecast::autodiff::GradcheckConfig;
use wavecast::synthgen::{DatasetKind, DatasetSpec, Split};
use wavecast::train::TrainConfig;
use wavecast::GridSpec;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoD,
            dims: vec![32, 32],
            n_train: 200,
            n_test: 50,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub in_frames: usize,
    pub epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            channels: t.channels,
            in_frames: t.in_frames,
            epsilon: t.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSection {
    pub unroll_steps: usize,
    /// Defaults to `1 / unroll_steps`.
    pub dt: Option<f64>,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        Self {
            unroll_steps: 20,
            dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda_tv: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Print every n-th epoch to stderr; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            lambda_tv: t.lambda_tv,
            seed: t.seed,
            checkpoint_every: 10,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub tau: f64,
    pub tau_sweep: Vec<f64>,
    pub spectral_cutoff: f64,
    pub histogram_bins: usize,
    pub unroll_list: Vec<usize>,
    /// Train one model per unroll depth instead of reusing the checkpoint.
    pub sweep_retrain: bool,
    pub profile_warmup: usize,
    pub profile_runs: usize,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            tau: 0.5,
            tau_sweep: (1..20).map(|i| i as f64 * 0.05).collect(),
            spectral_cutoff: 0.5,
            histogram_bins: 41,
            unroll_list: vec![10, 20, 50, 100],
            sweep_retrain: false,
            profile_warmup: 2,
            profile_runs: 10,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub seed: u64,
    pub cn_instances: usize,
    pub cn_steps: usize,
    pub cn_dt: f64,
    pub order_instances: usize,
    pub order_dts: Vec<f64>,
    pub drift_instances: usize,
    pub drift_steps: usize,
    pub drift_dt: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            seed: 1,
            cn_instances: 20,
            cn_steps: 100,
            cn_dt: 0.02,
            order_instances: 3,
            order_dts: vec![0.1, 0.05, 0.025, 0.0125],
            drift_instances: 100,
            drift_steps: 50,
            drift_dt: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub split: Split,
    /// Position within the split.
    pub sample: usize,
    /// Use an all-zero model instead of a checkpoint.
    pub zero_model: bool,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            sample: 0,
            zero_model: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Model to evaluate; defaults to `<out_dir>/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub evolution: EvolutionSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckConfig,
    pub oracle: OracleSection,
    pub interpret: InterpretSection,
    pub io: IoSection,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| cfg_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => cfg_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.dims.len() != d.kind.rank() {
            return Err(cfg_err(format!(
                "dataset.dims has {} entries for a {:?} dataset",
                d.dims.len(),
                d.kind
            )));
        }
        GridSpec::new(&d.dims).map_err(|e| cfg_err(format!("dataset.dims: {e}")))?;
        if d.n_train == 0 {
            return Err(cfg_err("dataset.n_train must be at least 1"));
        }
        self.train_config()
            .validate()
            .map_err(|e| cfg_err(format!("train/model/evolution: {e}")))?;
        let e = &self.eval;
        if !(e.tau > 0.0 && e.tau < 1.0) {
            return Err(cfg_err(format!("eval.tau must lie in (0, 1), got {}", e.tau)));
        }
        if e.tau_sweep.is_empty()
            || e.tau_sweep.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || e.tau_sweep.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(cfg_err("eval.tau_sweep must be strictly increasing within (0, 1)"));
        }
        if !(e.spectral_cutoff > 0.0 && e.spectral_cutoff < 1.0) {
            return Err(cfg_err("eval.spectral_cutoff must lie in (0, 1)"));
        }
        if e.histogram_bins < 2 {
            return Err(cfg_err("eval.histogram_bins must be at least 2"));
        }
        if e.unroll_list.is_empty() || e.unroll_list.contains(&0) {
            return Err(cfg_err("eval.unroll_list must be non-empty with positive entries"));
        }
        if e.profile_runs < 3 {
            return Err(cfg_err("eval.profile_runs must be at least 3"));
        }
        let g = &self.gradcheck;
        GridSpec::new(&g.dims).map_err(|e| cfg_err(format!("gradcheck.dims: {e}")))?;
        if g.in_frames == 0 || g.channels == 0 || g.unroll_steps == 0 || !(g.tol > 0.0) || !(g.fd_step > 0.0) {
            return Err(cfg_err("gradcheck: frames, channels, steps, tol and fd_step must be positive"));
        }
        let o = &self.oracle;
        if o.order_dts.len() < 2 || o.order_dts.iter().any(|dt| !(*dt > 0.0)) {
            return Err(cfg_err("oracle.order_dts needs at least two positive steps"));
        }
        if !(o.cn_dt > 0.0 && o.drift_dt > 0.0) {
            return Err(cfg_err("oracle time steps must be positive"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset.kind,
            dims: self.dataset.dims.clone(),
            n_train: self.dataset.n_train,
            n_test: self.dataset.n_test,
            master_seed: self.dataset.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            lambda_tv: t.lambda_tv,
            unroll_steps: self.evolution.unroll_steps,
            dt: self.evolution.dt,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            channels: self.model.channels,
            in_frames: self.model.in_frames,
            epsilon: self.model.epsilon,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.io
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.io.out_dir.join("final.ckpt"))
    }
}
