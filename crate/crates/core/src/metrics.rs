//! Forecast evaluation: voxel, overlap, surface, spectral, volume and timing
//! metrics, plus the per-case report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, GridSpec, RealField};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_CUTOFF: f64 = 0.5;

fn same_grid(a: &RealField, b: &RealField) -> Result<()> {
    a.grid()
        .check_same(b.grid(), "metric operand")
        .map_err(|e| Error::Metric(e.to_string()))
}

pub fn mse(a: &RealField, b: &RealField) -> Result<f64> {
    same_grid(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR for unit data range, given an MSE.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &RealField, b: &RealField) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Periodic moving mean with a uniform window of `SSIM_WINDOW` per axis.
fn box_mean(grid: &GridSpec, src: &[f64]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut cur = src.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..grid.rank() {
        let (outer, n, inner) = grid.axis_blocks(axis);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let dst = base + i * inner;
                next[dst..dst + inner].fill(0.0);
                for k in -r..=r {
                    let s = base + (i as isize + k).rem_euclid(n as isize) as usize * inner;
                    for j in 0..inner {
                        next[dst + j] += cur[s + j];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let norm = (SSIM_WINDOW as f64).powi(grid.rank() as i32);
    cur.iter_mut().for_each(|v| *v /= norm);
    cur
}

/// Mean local SSIM (uniform 7-window, periodic, L = 1).
pub fn ssim(a: &RealField, b: &RealField) -> Result<f64> {
    same_grid(a, b)?;
    let g = a.grid();
    let (x, y) = (a.data(), b.data());
    let mu_x = box_mean(g, x);
    let mu_y = box_mean(g, y);
    let xx = box_mean(g, &x.iter().map(|v| v * v).collect::<Vec<_>>());
    let yy = box_mean(g, &y.iter().map(|v| v * v).collect::<Vec<_>>());
    let xy = box_mean(g, &x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>());
    let mut total = 0.0;
    for i in 0..x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cxy = xy[i] - mx * my;
        let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / x.len() as f64)
}

/// Voxels with value ≥ τ.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: GridSpec,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn threshold(f: &RealField, tau: f64) -> Self {
        Self {
            grid: f.grid().clone(),
            bits: f.data().iter().map(|&v| v >= tau).collect(),
        }
    }

    pub fn from_bits(grid: &GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::Argument(format!(
                "mask has {} voxels, grid has {}",
                bits.len(),
                grid.len()
            )));
        }
        Ok(Self { grid: grid.clone(), bits })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Foreground voxels with a background face-neighbour; outside the grid
    /// counts as background.
    pub fn surface(&self) -> Vec<usize> {
        let g = &self.grid;
        let dims = g.dims();
        let strides = g.strides();
        let mut out = Vec::new();
        for (i, &on) in self.bits.iter().enumerate() {
            if !on {
                continue;
            }
            let idx = g.unravel(i);
            let boundary = (0..g.rank()).any(|a| {
                idx[a] == 0
                    || idx[a] + 1 == dims[a]
                    || !self.bits[i - strides[a]]
                    || !self.bits[i + strides[a]]
            });
            if boundary {
                out.push(i);
            }
        }
        out
    }
}

pub fn dice_masks(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.grid
        .check_same(&b.grid, "mask")
        .map_err(|e| Error::Metric(e.to_string()))?;
    let (na, nb) = (a.count(), b.count());
    Ok(match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * a.intersection_count(b) as f64 / (na + nb) as f64,
    })
}

pub fn dice(a: &RealField, b: &RealField, tau: f64) -> Result<f64> {
    same_grid(a, b)?;
    dice_masks(&BinaryMask::threshold(a, tau), &BinaryMask::threshold(b, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceSweep {
    pub taus: Vec<f64>,
    pub dice: Vec<f64>,
    pub peak_tau: f64,
    pub peak_dice: f64,
    /// Widest contiguous τ-interval around the peak with Dice ≥ 0.99·peak.
    pub plateau: (f64, f64),
}

pub fn dice_sweep(a: &RealField, b: &RealField, taus: &[f64]) -> Result<DiceSweep> {
    if taus.is_empty()
        || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0))
        || taus.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Argument("taus must be strictly increasing within (0, 1)".into()));
    }
    let curve = taus.iter().map(|&t| dice(a, b, t)).collect::<Result<Vec<_>>>()?;
    Ok(DiceSweep::from_curve(taus, curve))
}

impl DiceSweep {
    /// Peak and plateau of an already computed curve (e.g. a mean over cases).
    pub fn from_curve(taus: &[f64], curve: Vec<f64>) -> Self {
        assert_eq!(taus.len(), curve.len());
        assert!(!curve.is_empty());
        let mut peak = 0;
        for (i, &d) in curve.iter().enumerate() {
            if d > curve[peak] {
                peak = i;
            }
        }
        let bar = 0.99 * curve[peak];
        let mut lo = peak;
        while lo > 0 && curve[lo - 1] >= bar {
            lo -= 1;
        }
        let mut hi = peak;
        while hi + 1 < curve.len() && curve[hi + 1] >= bar {
            hi += 1;
        }
        Self {
            taus: taus.to_vec(),
            peak_tau: taus[peak],
            peak_dice: curve[peak],
            dice: curve,
            plateau: (taus[lo], taus[hi]),
        }
    }
}

/// 1D lower envelope of parabolas (squared distance transform of `f`).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let sq = |q: usize| (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = f[p] + d * d;
    }
}

/// Exact squared Euclidean distance (in voxels) from every voxel to the
/// nearest seed, non-periodic. Infinite when there are no seeds.
pub fn squared_edt(grid: &GridSpec, seeds: &[usize]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; grid.len()];
    for &s in seeds {
        d[s] = 0.0;
    }
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in 0..grid.rank() {
        let (outer, n, inner) = grid.axis_blocks(axis);
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                for i in 0..n {
                    line[i] = d[at(i)];
                }
                edt_1d(&line, &mut res, &mut v, &mut z);
                for i in 0..n {
                    d[at(i)] = res[i];
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95_vox: f64,
    pub assd_vox: f64,
    pub surface_dice_1vox: f64,
}

/// Percentile of sorted values with linear interpolation between ranks.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Directed surface distances from `from` to the surface `to`.
pub fn surface_distances(grid: &GridSpec, from: &[usize], to: &[usize]) -> Vec<f64> {
    let d2 = squared_edt(grid, to);
    from.iter().map(|&i| d2[i].sqrt()).collect()
}

pub fn surface_metrics(a: &BinaryMask, b: &BinaryMask) -> Result<SurfaceMetrics> {
    a.grid
        .check_same(&b.grid, "mask")
        .map_err(|e| Error::Metric(e.to_string()))?;
    let (sa, sb) = (a.surface(), b.surface());
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Metric(
            "empty surface: a mask has no foreground at this threshold; review the threshold".into(),
        ));
    }
    let dab = surface_distances(&a.grid, &sa, &sb);
    let dba = surface_distances(&a.grid, &sb, &sa);
    Ok(pooled_surface_metrics(&dab, &dba))
}

/// HD95 / ASSD / Surface Dice@1 from the two directed distance lists.
pub fn pooled_surface_metrics(dab: &[f64], dba: &[f64]) -> SurfaceMetrics {
    let mut pooled: Vec<f64> = dab.iter().chain(dba).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len() as f64;
    // Sum in sorted order so swapping the operands gives identical results.
    let assd = pooled.iter().sum::<f64>() / n;
    let within = pooled.iter().filter(|&&d| d <= 1.0).count() as f64;
    SurfaceMetrics {
        hd95_vox: percentile_sorted(&pooled, 95.0),
        assd_vox: assd,
        surface_dice_1vox: within / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSplit {
    pub highfreq_frac: f64,
    pub lowfreq_frac: f64,
    /// The error field had zero energy; both fractions are 0.
    pub zero_energy: bool,
}

/// Normalized radial frequency in `[0, 1]` of every DFT bin.
pub fn radial_frequency(grid: &GridSpec) -> Vec<f64> {
    let dims = grid.dims().to_vec();
    let norm = 0.5 * (grid.rank() as f64).sqrt();
    (0..grid.len())
        .map(|i| {
            let idx = grid.unravel(i);
            let s: f64 = idx
                .iter()
                .zip(&dims)
                .map(|(&k, &n)| {
                    let f = if 2 * k < n { k as f64 } else { k as f64 - n as f64 } / n as f64;
                    f * f
                })
                .sum();
            s.sqrt() / norm
        })
        .collect()
}

pub fn spectral_split(pred: &RealField, gt: &RealField, cutoff_frac: f64) -> Result<SpectralSplit> {
    same_grid(pred, gt)?;
    if !(cutoff_frac > 0.0 && cutoff_frac < 1.0) {
        return Err(Error::Argument(format!("cutoff must lie in (0, 1), got {cutoff_frac}")));
    }
    let e = RealField::new(
        pred.grid().clone(),
        pred.data().iter().zip(gt.data()).map(|(p, g)| p - g).collect(),
    )?;
    let spec = tensor::dft(&e.to_complex());
    let rho = radial_frequency(pred.grid());
    let (mut low, mut high) = (0.0, 0.0);
    for (z, r) in spec.data().iter().zip(&rho) {
        if *r <= cutoff_frac {
            low += z.norm_sqr();
        } else {
            high += z.norm_sqr();
        }
    }
    let total = low + high;
    if total == 0.0 {
        return Ok(SpectralSplit {
            highfreq_frac: 0.0,
            lowfreq_frac: 0.0,
            zero_energy: true,
        });
    }
    Ok(SpectralSplit {
        highfreq_frac: high / total,
        lowfreq_frac: low / total,
        zero_energy: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeCom {
    pub pred_vol: f64,
    pub gt_vol: f64,
    pub abs_vol_err_pct: f64,
    /// NaN when the prediction mask is empty.
    pub com_err_vox: f64,
}

/// Unweighted centroid of a mask, in voxel index coordinates.
pub fn centroid(m: &BinaryMask) -> Option<Vec<f64>> {
    let g = &m.grid;
    let mut acc = vec![0.0; g.rank()];
    let mut n = 0usize;
    for (i, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
        for (a, v) in g.unravel(i).into_iter().enumerate() {
            acc[a] += v as f64;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|s| s / n as f64).collect())
}

pub fn volume_com(pred: &RealField, gt: &RealField, tau: f64) -> Result<VolumeCom> {
    same_grid(pred, gt)?;
    let (mp, mg) = (BinaryMask::threshold(pred, tau), BinaryMask::threshold(gt, tau));
    let gt_vol = mg.count() as f64;
    if gt_vol == 0.0 {
        return Err(Error::Metric(format!("ground-truth mask is empty at threshold {tau}")));
    }
    let pred_vol = mp.count() as f64;
    let cg = centroid(&mg).expect("non-empty");
    let com_err_vox = match centroid(&mp) {
        Some(cp) => cp.iter().zip(&cg).map(|(p, g)| (p - g) * (p - g)).sum::<f64>().sqrt(),
        None => f64::NAN,
    };
    Ok(VolumeCom {
        pred_vol,
        gt_vol,
        abs_vol_err_pct: 100.0 * (pred_vol - gt_vol).abs() / gt_vol,
        com_err_vox,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub sd: f64,
}

/// Signed voxel error `pred − gt` binned over `[−max|e|, max|e|]`.
pub fn error_histogram(pred: &RealField, gt: &RealField, n_bins: usize) -> Result<ErrorHistogram> {
    same_grid(pred, gt)?;
    if n_bins < 2 {
        return Err(Error::Argument("histogram needs at least 2 bins".into()));
    }
    let e: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(p, g)| p - g).collect();
    Ok(histogram_of(&e, n_bins))
}

/// Histogram of arbitrary signed errors over `[−max|e|, max|e|]`.
pub fn histogram_of(e: &[f64], n_bins: usize) -> ErrorHistogram {
    assert!(n_bins >= 2 && !e.is_empty());
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let sd = (e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let m = e.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut counts = vec![0u64; n_bins];
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| -m + 2.0 * m * i as f64 / n_bins as f64)
        .collect();
    for v in e {
        let bin = if m == 0.0 {
            n_bins / 2
        } else {
            (((v + m) / (2.0 * m)) * n_bins as f64).floor().clamp(0.0, (n_bins - 1) as f64) as usize
        };
        counts[bin] += 1;
    }
    ErrorHistogram { edges, counts, mean, sd }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub latency_ms: f64,
    pub latency_sd_ms: f64,
    pub throughput_per_s: f64,
    pub runs: usize,
}

/// Wall-clock timing of single forecasts after `n_warmup` untimed calls.
pub fn profile<F: FnMut() -> Result<()>>(mut forecast: F, n_warmup: usize, n_runs: usize) -> Result<Profile> {
    if n_runs < 3 {
        return Err(Error::Argument(format!("profiling needs ≥ 3 runs, got {n_runs}")));
    }
    for _ in 0..n_warmup {
        forecast()?;
    }
    let mut ms = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        forecast()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = ms.iter().sum::<f64>() / n_runs as f64;
    let var = ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_runs - 1) as f64;
    Ok(Profile {
        latency_ms: mean,
        latency_sd_ms: var.sqrt(),
        throughput_per_s: 1000.0 / mean,
        runs: n_runs,
    })
}

/// Peak resident set size in MiB, where the platform reports it.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// One row of the per-case report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub dice: f64,
    pub hd95_vox: f64,
    pub assd_vox: f64,
    pub surface_dice_1vox: f64,
    pub highfreq_frac: f64,
    pub lowfreq_frac: f64,
    pub pred_vol: f64,
    pub gt_vol: f64,
    pub abs_vol_err_pct: f64,
    pub com_err_vox: f64,
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "case",
    "ssim",
    "psnr_db",
    "mse",
    "dice",
    "hd95_vox",
    "assd_vox",
    "surface_dice_1vox",
    "highfreq_frac",
    "lowfreq_frac",
    "pred_vol",
    "gt_vol",
    "abs_vol_err_pct",
    "com_err_vox",
];

impl CaseMetrics {
    /// Every metric for one prediction. Surface metrics are NaN when either
    /// mask is empty at `tau`.
    pub fn compute(case: impl Into<String>, pred: &RealField, gt: &RealField, tau: f64, cutoff: f64) -> Result<Self> {
        let mse_v = mse(pred, gt)?;
        let (mp, mg) = (BinaryMask::threshold(pred, tau), BinaryMask::threshold(gt, tau));
        let surf = match surface_metrics(&mp, &mg) {
            Ok(s) => s,
            Err(Error::Metric(_)) if mp.count() == 0 || mg.count() == 0 => SurfaceMetrics {
                hd95_vox: f64::NAN,
                assd_vox: f64::NAN,
                surface_dice_1vox: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        let spec = spectral_split(pred, gt, cutoff)?;
        let vol = volume_com(pred, gt, tau)?;
        Ok(Self {
            case: case.into(),
            ssim: ssim(pred, gt)?,
            psnr_db: psnr_from_mse(mse_v),
            mse: mse_v,
            dice: dice_masks(&mp, &mg)?,
            hd95_vox: surf.hd95_vox,
            assd_vox: surf.assd_vox,
            surface_dice_1vox: surf.surface_dice_1vox,
            highfreq_frac: spec.highfreq_frac,
            lowfreq_frac: spec.lowfreq_frac,
            pred_vol: vol.pred_vol,
            gt_vol: vol.gt_vol,
            abs_vol_err_pct: vol.abs_vol_err_pct,
            com_err_vox: vol.com_err_vox,
        })
    }

    pub fn values(&self) -> [f64; 13] {
        [
            self.ssim,
            self.psnr_db,
            self.mse,
            self.dice,
            self.hd95_vox,
            self.assd_vox,
            self.surface_dice_1vox,
            self.highfreq_frac,
            self.lowfreq_frac,
            self.pred_vol,
            self.gt_vol,
            self.abs_vol_err_pct,
            self.com_err_vox,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<CaseMetrics>,
    /// Column means over finite entries, keyed like the CSV header.
    pub mean: std::collections::BTreeMap<String, f64>,
    pub profile: Option<Profile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_rss_mb: Option<f64>,
}

/// Mean of the finite entries; NaN when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn new(rows: Vec<CaseMetrics>, profile: Option<Profile>) -> Self {
        let mean = REPORT_COLUMNS[1..]
            .iter()
            .enumerate()
            .map(|(c, name)| (name.to_string(), finite_mean(rows.iter().map(|r| r.values()[c]))))
            .collect();
        Self {
            rows,
            mean,
            profile,
            peak_rss_mb: None,
        }
    }

    pub fn mean_of(&self, column: &str) -> f64 {
        self.mean.get(column).copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.case);
            for v in r.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        // serde_json writes NaN (empty-mask entries) as null.
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
