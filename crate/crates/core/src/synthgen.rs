//! Seeded synthetic tumour-like sequences in 2D and 3D.
//!
//! Each sample draws growth, rotation, irregularity and centre shift from
//! its own counter-based stream, then renders `T = 6` frames of a perturbed
//! shell `exp(-(dist - r_eff)² / w)` followed by Gaussian smoothing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};
use crate::tensor::{GridSpec, RealField};
use crate::vf1;

pub const TIMESTEPS: usize = 6;
pub const MAX_RETRIES: u64 = 10;
/// Minimum distance (voxels) between the perturbed radius and any face.
pub const FACE_MARGIN: f64 = 2.0;
const DRAWS_PER_ATTEMPT: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl DatasetKind {
    pub fn rank(self) -> usize {
        match self {
            DatasetKind::TwoD => 2,
            DatasetKind::ThreeD => 3,
        }
    }

    /// Grid extent the default parameter ranges were chosen for.
    pub fn reference_extent(self) -> f64 {
        match self {
            DatasetKind::TwoD => 128.0,
            DatasetKind::ThreeD => 64.0,
        }
    }

    /// Denominator of the shell profile exponent.
    fn shell_width(self) -> f64 {
        match self {
            DatasetKind::TwoD => 10.0,
            DatasetKind::ThreeD => 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub r0: f64,
    pub growth_rate: f64,
    pub rotation_speed: f64,
    pub irregularity: f64,
    pub center_shift: Vec<f64>,
    pub smooth_sigma: f64,
}

impl DynamicsParams {
    pub fn validate(&self, rank: usize) -> Result<()> {
        if !(self.r0 > 0.0) {
            return Err(Error::Argument(format!("r0 must be positive, got {}", self.r0)));
        }
        if !(0.0..1.0).contains(&self.irregularity) {
            return Err(Error::Argument(format!(
                "irregularity must lie in [0, 1), got {}",
                self.irregularity
            )));
        }
        if !(self.smooth_sigma > 0.0) {
            return Err(Error::Argument("smoothing sigma must be positive".into()));
        }
        if self.center_shift.len() != rank {
            return Err(Error::Argument(format!(
                "center_shift has {} entries for rank {rank}",
                self.center_shift.len()
            )));
        }
        Ok(())
    }

    pub fn center(&self, dims: &[usize]) -> Vec<f64> {
        dims.iter()
            .zip(&self.center_shift)
            .map(|(&n, s)| n as f64 / 2.0 + s)
            .collect()
    }

    /// Largest perturbed radius over the sequence stays `FACE_MARGIN` voxels
    /// inside every face.
    pub fn fits(&self, dims: &[usize]) -> bool {
        let r_last = self.r0 + (TIMESTEPS - 1) as f64 * self.growth_rate.max(0.0);
        let r_max = self.r0.max(r_last) * (1.0 + self.irregularity);
        self.center(dims).iter().zip(dims).all(|(&c, &n)| {
            c - r_max >= FACE_MARGIN && c + r_max <= (n - 1) as f64 - FACE_MARGIN
        })
    }
}

/// Sampling ranges for the dynamics of one dataset kind and grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub r0: (f64, f64),
    pub growth_rate: (f64, f64),
    pub rotation_speed: (f64, f64),
    pub irregularity: (f64, f64),
    pub center_shift: (f64, f64),
    pub smooth_sigma: f64,
}

impl ParamRanges {
    /// Defaults at the reference extent (64³ / 128²). Smaller grids shrink
    /// radius and shift by `s = min_extent / reference` and growth by `√s`.
    pub fn for_grid(kind: DatasetKind, dims: &[usize]) -> Self {
        let min_extent = dims.iter().copied().min().unwrap_or(0) as f64;
        let s = (min_extent / kind.reference_extent()).min(1.0);
        let g = s.sqrt();
        let r0 = match kind {
            DatasetKind::TwoD => (10.0, 18.0),
            DatasetKind::ThreeD => (6.0, 10.0),
        };
        Self {
            r0: (r0.0 * s, r0.1 * s),
            growth_rate: (0.5 * g, 1.5 * g),
            rotation_speed: (0.1, 0.5),
            irregularity: (0.05, 0.3),
            center_shift: (-3.0 * s, 3.0 * s),
            smooth_sigma: 1.0,
        }
    }

    fn draw(&self, rng: &mut CounterRng, rank: usize) -> DynamicsParams {
        let mut u = |(lo, hi): (f64, f64)| rng.uniform_in(lo, hi);
        let r0 = u(self.r0);
        let growth_rate = u(self.growth_rate);
        let rotation_speed = u(self.rotation_speed);
        let irregularity = u(self.irregularity);
        let center_shift = (0..rank).map(|_| u(self.center_shift)).collect();
        DynamicsParams {
            r0,
            growth_rate,
            rotation_speed,
            irregularity,
            center_shift,
            smooth_sigma: self.smooth_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<RealField>,
    pub params: DynamicsParams,
    pub sample_index: u64,
    pub master_seed: u64,
    /// Retry that produced an in-domain shape.
    pub attempt: u64,
}

impl SequenceSample {
    /// The last `k` input frames (of the first `T − 1`) and the target frame.
    pub fn split(&self, k: usize) -> Result<(&[RealField], &RealField)> {
        let inputs = self.frames.len() - 1;
        if k == 0 || k > inputs {
            return Err(Error::Argument(format!(
                "cannot take {k} history frames from a {}-frame sequence",
                self.frames.len()
            )));
        }
        Ok((&self.frames[inputs - k..inputs], &self.frames[inputs]))
    }
}

/// Draws in-domain dynamics for one sample, retrying up to [`MAX_RETRIES`].
pub fn draw_params(
    kind: DatasetKind,
    dims: &[usize],
    master_seed: u64,
    sample_index: u64,
) -> Result<(DynamicsParams, u64)> {
    let ranges = ParamRanges::for_grid(kind, dims);
    let mut rng = CounterRng::new(master_seed, streams::SAMPLE_BASE.wrapping_add(sample_index));
    for attempt in 0..=MAX_RETRIES {
        rng.set_counter(attempt * DRAWS_PER_ATTEMPT);
        let p = ranges.draw(&mut rng, kind.rank());
        if p.fits(dims) {
            return Ok((p, attempt));
        }
    }
    Err(Error::Generation(format!(
        "sample {sample_index}: shape escapes the {dims:?} domain after {MAX_RETRIES} retries"
    )))
}

/// Separable periodic Gaussian filter, radius `⌈3σ⌉`, kernel summing to 1.
pub fn gaussian_smooth(f: &RealField, sigma: f64) -> Result<RealField> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let grid = f.grid().clone();
    let mut cur = f.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..grid.rank() {
        let (outer, n, inner) = grid.axis_blocks(axis);
        let ni = n as isize;
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let dst = base + i * inner;
                next[dst..dst + inner].fill(0.0);
                for (k, w) in kernel.iter().enumerate() {
                    let src_i = (i as isize + k as isize - radius).rem_euclid(ni) as usize;
                    let src = base + src_i * inner;
                    for j in 0..inner {
                        next[dst + j] += w * cur[src + j];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    RealField::new(grid, cur)
}

/// Renders the 3D sequence for explicit dynamics.
///
/// Axes are `(z, y, x)`; θ is the azimuth about z and φ the polar angle, and
/// `r_eff = r·(1 + irregularity·sin(3(θ + ω t))·cos 2φ)`.
pub fn render_sequence_3d(dims: &[usize], p: &DynamicsParams) -> Result<Vec<RealField>> {
    let grid = GridSpec::new(dims)?;
    if grid.rank() != 3 {
        return Err(Error::Argument("3D sequences need a rank-3 grid".into()));
    }
    p.validate(3)?;
    let c = p.center(dims);
    // Angular factors are time-independent apart from the rotation phase.
    let n = grid.len();
    let mut dist = vec![0.0; n];
    let mut sin3 = vec![0.0; n];
    let mut cos3 = vec![0.0; n];
    let mut cos2phi = vec![0.0; n];
    let mut idx = 0;
    for z in 0..dims[0] {
        let dz = z as f64 - c[0];
        for y in 0..dims[1] {
            let dy = y as f64 - c[1];
            for x in 0..dims[2] {
                let dx = x as f64 - c[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                let theta = dy.atan2(dx);
                let cos_phi = if d > 0.0 { dz / d } else { 1.0 };
                dist[idx] = d;
                sin3[idx] = (3.0 * theta).sin();
                cos3[idx] = (3.0 * theta).cos();
                cos2phi[idx] = 2.0 * cos_phi * cos_phi - 1.0;
                idx += 1;
            }
        }
    }
    let width = DatasetKind::ThreeD.shell_width();
    (0..TIMESTEPS)
        .map(|t| {
            let t = t as f64;
            let r = p.r0 + t * p.growth_rate;
            let (s_rot, c_rot) = (3.0 * p.rotation_speed * t).sin_cos();
            let data = (0..n)
                .map(|i| {
                    let wave = sin3[i] * c_rot + cos3[i] * s_rot;
                    let r_eff = r * (1.0 + p.irregularity * wave * cos2phi[i]);
                    let e = dist[i] - r_eff;
                    (-(e * e) / width).exp()
                })
                .collect();
            let raw = RealField::new(grid.clone(), data)?;
            let smooth = gaussian_smooth(&raw, p.smooth_sigma)?;
            Ok(smooth.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Renders the 2D sequence for explicit dynamics. Axes are `(y, x)` and
/// `r_eff = r·(1 + irregularity·sin(3(θ + ω t)))`; frames are min–max
/// normalized after smoothing.
pub fn render_sequence_2d(dims: &[usize], p: &DynamicsParams) -> Result<Vec<RealField>> {
    let grid = GridSpec::new(dims)?;
    if grid.rank() != 2 {
        return Err(Error::Argument("2D sequences need a rank-2 grid".into()));
    }
    p.validate(2)?;
    let c = p.center(dims);
    let width = DatasetKind::TwoD.shell_width();
    (0..TIMESTEPS)
        .map(|t| {
            let t = t as f64;
            let r = p.r0 + t * p.growth_rate;
            let raw = RealField::from_fn(&grid, |i| {
                let dy = i[0] as f64 - c[0];
                let dx = i[1] as f64 - c[1];
                let d = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let r_eff = r * (1.0 + p.irregularity * (3.0 * (theta + p.rotation_speed * t)).sin());
                let e = d - r_eff;
                (-(e * e) / width).exp()
            });
            let smooth = gaussian_smooth(&raw, p.smooth_sigma)?;
            let (lo, hi) = (smooth.min(), smooth.max());
            Ok(if hi > lo {
                smooth.map(|v| (v - lo) / (hi - lo))
            } else {
                RealField::zeros(&grid)
            })
        })
        .collect()
}

pub fn gen_sequence(
    kind: DatasetKind,
    master_seed: u64,
    sample_index: u64,
    dims: &[usize],
) -> Result<SequenceSample> {
    if dims.len() != kind.rank() {
        return Err(Error::Argument(format!(
            "{kind:?} dataset needs {} extents, got {}",
            kind.rank(),
            dims.len()
        )));
    }
    let (params, attempt) = draw_params(kind, dims, master_seed, sample_index)?;
    let frames = match kind {
        DatasetKind::TwoD => render_sequence_2d(dims, &params)?,
        DatasetKind::ThreeD => render_sequence_3d(dims, &params)?,
    };
    Ok(SequenceSample {
        frames,
        params,
        sample_index,
        master_seed,
        attempt,
    })
}

pub fn gen_sequence_3d(master_seed: u64, sample_index: u64, dims: &[usize]) -> Result<SequenceSample> {
    gen_sequence(DatasetKind::ThreeD, master_seed, sample_index, dims)
}

pub fn gen_sequence_2d(master_seed: u64, sample_index: u64, dims: &[usize]) -> Result<SequenceSample> {
    gen_sequence(DatasetKind::TwoD, master_seed, sample_index, dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub master_seed: u64,
}

impl DatasetSpec {
    /// Sample indices of a split; train and test ranges are disjoint.
    pub fn indices(&self, split: Split) -> std::ops::Range<u64> {
        let n_train = self.n_train as u64;
        match split {
            Split::Train => 0..n_train,
            Split::Test => n_train..n_train + self.n_test as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub attempt: u64,
    pub params: DynamicsParams,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub dims: Vec<usize>,
    pub master_seed: u64,
    pub timesteps: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "wavecast-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.kind,
            dims: self.dims.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
            master_seed: self.master_seed,
        }
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("{}: not a dataset manifest", path.display())));
        }
        Ok(m)
    }
}

pub fn frame_file(split: Split, index: u64, t: usize) -> String {
    format!("{}/{index:05}_{t}.vf1", split.as_str())
}

fn write_sample(out_dir: &Path, split: Split, s: &SequenceSample, kind: DatasetKind) -> Result<ManifestEntry> {
    let mut files = Vec::with_capacity(TIMESTEPS);
    for (t, frame) in s.frames.iter().enumerate() {
        let rel = frame_file(split, s.sample_index, t);
        let mut prov = BTreeMap::new();
        prov.insert("kind".into(), serde_json::to_value(kind).unwrap());
        prov.insert("master_seed".into(), s.master_seed.into());
        prov.insert("sample_index".into(), s.sample_index.into());
        prov.insert("split".into(), split.as_str().into());
        prov.insert("t".into(), t.into());
        vf1::write_real(&out_dir.join(&rel), frame, prov)?;
        files.push(rel);
    }
    Ok(ManifestEntry {
        index: s.sample_index,
        attempt: s.attempt,
        params: s.params.clone(),
        files,
    })
}

/// Generates every sample (in parallel) and writes VF1 frames plus
/// `manifest.json`. Output bytes depend only on the spec.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    GridSpec::new(&spec.dims)?;
    let mut entries = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let written: Vec<ManifestEntry> = spec
            .indices(split)
            .into_par_iter()
            .map(|index| {
                let s = gen_sequence(spec.kind, spec.master_seed, index, &spec.dims)?;
                write_sample(out_dir, split, &s, spec.kind)
            })
            .collect::<Result<_>>()?;
        entries.insert(split, written);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        kind: spec.kind,
        dims: spec.dims.clone(),
        master_seed: spec.master_seed,
        timesteps: TIMESTEPS,
        n_train: spec.n_train,
        n_test: spec.n_test,
        train: entries.remove(&Split::Train).unwrap_or_default(),
        test: entries.remove(&Split::Test).unwrap_or_default(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads one split of a dataset written by [`build_dataset`].
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SequenceSample>> {
    let manifest = Manifest::read(dir)?;
    manifest
        .entries(split)
        .par_iter()
        .map(|e| {
            let frames = e
                .files
                .iter()
                .map(|f| vf1::read_real(&dir.join(f)))
                .collect::<Result<Vec<_>>>()?;
            if frames.len() != TIMESTEPS {
                return Err(Error::Format(format!(
                    "sample {} lists {} frames",
                    e.index,
                    frames.len()
                )));
            }
            Ok(SequenceSample {
                frames,
                params: e.params.clone(),
                sample_index: e.index,
                master_seed: manifest.master_seed,
                attempt: e.attempt,
            })
        })
        .collect()
}

/// Paths of every file a dataset directory should contain.
pub fn dataset_files(manifest: &Manifest) -> Vec<PathBuf> {
    let mut out = vec![PathBuf::from(MANIFEST_FILE)];
    for e in manifest.train.iter().chain(&manifest.test) {
        for f in &e.files {
            out.push(PathBuf::from(f));
            out.push(vf1::sidecar_path(Path::new(f)));
        }
    }
    out
}
