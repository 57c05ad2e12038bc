//! Fidelity metrics (PSNR, 3D SSIM), the spectrum-concentration measure with
//! its FFT, expert-utilization reports and rate-distortion table emission.
//!
//! Metrics are computed on the original intensity scale (after
//! denormalization) with the peak defaulting to the source range; the
//! normalization to [0, 100] is an internal training detail.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{MoecError, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::Matrix;
use crate::router::top_k_select;
use crate::volume::{grid_coord, Volume};

/// Default PSNR/SSIM peak for a volume: its original intensity range.
pub fn default_peak(v: &Volume) -> f64 {
    v.norm().1 - v.norm().0
}

fn check_same_dims(a: &Volume, b: &Volume, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MoecError::shape(
            op,
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// 10·log10(peak²/MSE) over original-scale intensities; +∞ (None) when the
/// volumes match exactly.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    check_same_dims(a, b, "psnr")?;
    let da = a.denormalized();
    let db = b.denormalized();
    let mut mse = 0.0;
    for (x, y) in da.iter().zip(&db) {
        let d = x - y;
        mse += d * d;
    }
    mse /= da.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / mse).log10())
    }
}

/// SSIM windowing parameters (uniform cubic window).
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// 3D prefix-sum table for O(1) window sums.
struct Integral {
    dims: [usize; 3],
    table: Vec<f64>,
}

impl Integral {
    fn build(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [h, w, d] = dims;
        let (sw, sd) = (w + 1, d + 1);
        let mut table = vec![0.0; (h + 1) * sw * sd];
        let at = |x: usize, y: usize, z: usize| (x * sw + y) * sd + z;
        for x in 1..=h {
            for y in 1..=w {
                for z in 1..=d {
                    let v = f(((x - 1) * w + (y - 1)) * d + (z - 1));
                    table[at(x, y, z)] = v + table[at(x - 1, y, z)] + table[at(x, y - 1, z)]
                        + table[at(x, y, z - 1)]
                        - table[at(x - 1, y - 1, z)]
                        - table[at(x - 1, y, z - 1)]
                        - table[at(x, y - 1, z - 1)]
                        + table[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Integral { dims, table }
    }

    /// Sum over the window [x0, x1) × [y0, y1) × [z0, z1).
    fn window(&self, x0: usize, y0: usize, z0: usize, x1: usize, y1: usize, z1: usize) -> f64 {
        let [_, w, d] = self.dims;
        let (sw, sd) = (w + 1, d + 1);
        let at = |x: usize, y: usize, z: usize| (x * sw + y) * sd + z;
        self.table[at(x1, y1, z1)] - self.table[at(x0, y1, z1)] - self.table[at(x1, y0, z1)]
            - self.table[at(x1, y1, z0)]
            + self.table[at(x0, y0, z1)]
            + self.table[at(x0, y1, z0)]
            + self.table[at(x1, y0, z0)]
            - self.table[at(x0, y0, z0)]
    }
}

/// Mean SSIM over every valid uniform-window position.
pub fn ssim3d(a: &Volume, b: &Volume, params: SsimParams, peak: f64) -> Result<f64> {
    check_same_dims(a, b, "ssim3d")?;
    let [h, w, d] = a.dims();
    let win = params.window;
    if win < 1 || h < win || w < win || d < win {
        return Err(MoecError::InvalidArgument(format!(
            "dims {:?} smaller than the {win}³ window",
            a.dims()
        )));
    }
    let da = a.denormalized();
    let db = b.denormalized();
    let sa = Integral::build(a.dims(), |i| da[i]);
    let sb = Integral::build(a.dims(), |i| db[i]);
    let saa = Integral::build(a.dims(), |i| da[i] * da[i]);
    let sbb = Integral::build(a.dims(), |i| db[i] * db[i]);
    let sab = Integral::build(a.dims(), |i| da[i] * db[i]);

    let c1 = (params.k1 * peak) * (params.k1 * peak);
    let c2 = (params.k2 * peak) * (params.k2 * peak);
    let n = (win * win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for x in 0..=(h - win) {
        for y in 0..=(w - win) {
            for z in 0..=(d - win) {
                let (x1, y1, z1) = (x + win, y + win, z + win);
                let mu_a = sa.window(x, y, z, x1, y1, z1) / n;
                let mu_b = sb.window(x, y, z, x1, y1, z1) / n;
                let var_a = (saa.window(x, y, z, x1, y1, z1) / n - mu_a * mu_a).max(0.0);
                let var_b = (sbb.window(x, y, z, x1, y1, z1) / n - mu_b * mu_b).max(0.0);
                let cov = sab.window(x, y, z, x1, y1, z1) / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Complex 3D frequency grid of a volume (unnormalized forward DFT).
pub struct Spectrum {
    pub dims: [usize; 3],
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    /// Magnitudes sorted descending.
    pub fn magnitudes_sorted(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.bins.iter().map(|c| c.norm()).collect();
        m.sort_by(|a, b| b.total_cmp(a));
        m
    }

    /// Relative Parseval residual |Σ|X|²/N − Σ|x|²| / Σ|x|².
    pub fn parseval_residual(&self, volume: &Volume) -> f64 {
        let spatial: f64 = volume.data().iter().map(|&v| v * v).sum();
        let spectral: f64 =
            self.bins.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.bins.len() as f64;
        if spatial == 0.0 {
            spectral.abs()
        } else {
            (spectral - spatial).abs() / spatial
        }
    }
}

/// Forward 3D DFT of the normalized intensities.
pub fn fft3(volume: &Volume) -> Spectrum {
    let [h, w, d] = volume.dims();
    let mut data: Vec<Complex64> = volume
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();

    let fz = planner.plan_fft_forward(d);
    for run in data.chunks_exact_mut(d) {
        fz.process(run);
    }

    let fy = planner.plan_fft_forward(w);
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    for x in 0..h {
        for z in 0..d {
            for y in 0..w {
                buf[y] = data[(x * w + y) * d + z];
            }
            fy.process(&mut buf);
            for y in 0..w {
                data[(x * w + y) * d + z] = buf[y];
            }
        }
    }

    let fx = planner.plan_fft_forward(h);
    let mut bufx = vec![Complex64::new(0.0, 0.0); h];
    for y in 0..w {
        for z in 0..d {
            for x in 0..h {
                bufx[x] = data[(x * w + y) * d + z];
            }
            fx.process(&mut bufx);
            for x in 0..h {
                data[(x * w + y) * d + z] = bufx[x];
            }
        }
    }

    Spectrum {
        dims: [h, w, d],
        bins: data,
    }
}

/// Spectrum concentration: the fraction of total spectral magnitude carried
/// by the M largest components. An identically-zero spectrum concentrates
/// trivially (D = 1).
pub fn spectrum_concentration(volume: &Volume, m: usize) -> Result<f64> {
    let total_bins = volume.voxel_count();
    if m < 1 || m > total_bins {
        return Err(MoecError::InvalidArgument(format!(
            "M must lie in 1..={total_bins}, got {m}"
        )));
    }
    let mags = fft3(volume).magnitudes_sorted();
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let top: f64 = mags[..m].iter().sum();
    Ok(top / total)
}

/// Default M for spectrum concentration: 1% of the component count.
pub fn default_concentration_m(volume: &Volume) -> usize {
    (volume.voxel_count() / 100).max(1)
}

/// Expert utilization over the full voxel grid (inference routing).
pub struct ExpertReport {
    /// Fraction of voxels whose top-1 route is each expert; sums to 1.
    pub shares: Vec<f64>,
    /// Top-1 expert id per voxel in flat-index order.
    pub assignment: Vec<u8>,
}

/// Evaluate the router over every voxel and tally top-1 expert choices.
pub fn expert_report(params: &ModelParams, config: &ModelConfig) -> Result<ExpertReport> {
    if config.n_experts > 256 {
        return Err(MoecError::InvalidArgument("expert map supports ≤ 256 experts".into()));
    }
    let dims = config.dims;
    let total = dims[0] * dims[1] * dims[2];
    let chunk = 8192usize;
    let mut assignment = Vec::with_capacity(total);
    let mut counts = vec![0usize; config.n_experts];
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let mut coords = Matrix::zeros(end - start, 3);
        for (row, idx) in (start..end).enumerate() {
            coords.row_mut(row).copy_from_slice(&grid_coord(idx, dims)?);
        }
        let (_, info) = model::evaluate(&coords, params, config)?;
        let sel = top_k_select(&info.probs, 1)?;
        for ids in &sel.expert_ids {
            counts[ids[0]] += 1;
            assignment.push(ids[0] as u8);
        }
        start = end;
    }
    let shares = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ExpertReport { shares, assignment })
}

/// Write one binary PGM per x-slice of the assignment map (expert ids spread
/// across the gray range). Returns the written paths.
pub fn write_assignment_pgms(
    report: &ExpertReport,
    dims: [usize; 3],
    n_experts: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let [h, w, d] = dims;
    let scale = if n_experts > 1 {
        255 / (n_experts - 1) as u32
    } else {
        0
    };
    let mut paths = Vec::with_capacity(h);
    for x in 0..h {
        let mut body = format!("P5\n{d} {w}\n255\n").into_bytes();
        for y in 0..w {
            for z in 0..d {
                let id = report.assignment[(x * w + y) * d + z] as u32;
                body.push((id * scale).min(255) as u8);
            }
        }
        let path = dir.join(format!("slice_{x:04}.pgm"));
        std::fs::write(&path, body)?;
        paths.push(path);
    }
    Ok(paths)
}

/// One rate-distortion measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub ratio: f64,
    pub bytes: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
}

/// CSV emission, sorted by ratio. Infinite PSNR prints as `inf`.
pub fn rate_distortion_csv(rows: &[RdRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let mut s = String::from("ratio,bytes,psnr_db,ssim,seconds\n");
    for r in &sorted {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.ratio, r.bytes, r.psnr_db, r.ssim, r.seconds
        ));
    }
    s
}

pub fn parse_rate_distortion_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(MoecError::Format(format!(
                "rate-distortion CSV line {i} has {} cells",
                cells.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| MoecError::Format(format!("CSV number '{s}': {e}")))
        };
        rows.push(RdRow {
            ratio: parse(cells[0])?,
            bytes: parse(cells[1])? as u64,
            psnr_db: parse(cells[2])?,
            ssim: parse(cells[3])?,
            seconds: parse(cells[4])?,
        });
    }
    Ok(rows)
}

pub fn rate_distortion_markdown(rows: &[RdRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let mut s = String::from("| ratio | bytes | PSNR (dB) | SSIM | seconds |\n|---|---|---|---|---|\n");
    for r in &sorted {
        s.push_str(&format!(
            "| {:.1} | {} | {:.2} | {:.4} | {:.1} |\n",
            r.ratio, r.bytes, r.psnr_db, r.ssim, r.seconds
        ));
    }
    s
}

/// Summary of a compress/evaluate cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// None encodes +∞ (bit-exact reconstruction).
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub ratio: f64,
    pub artifact_bytes: u64,
    pub drop_fraction: f64,
    pub per_expert_share: Vec<f64>,
    /// (M, D) pairs of the spectrum-concentration measure.
    pub d_of_x: Vec<(usize, f64)>,
    pub compress_seconds: Option<f64>,
    pub decompress_seconds: Option<f64>,
}
