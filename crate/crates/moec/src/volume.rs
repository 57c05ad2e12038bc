//! Volume I/O, intensity normalization, coordinate grids, random batch
//! sampling, synthetic test volumes and dense reconstruction.
//!
//! On-disk format is a raw little/big-endian u8/u16 brick next to a JSON
//! sidecar (`<name>.raw` + `<name>.json`). Intensities are affinely mapped to
//! the training range [0, 100]; the original (lo, hi) range is kept so
//! decompression can invert the mapping.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoecError, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::Matrix;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Intensity range all volumes are normalized into.
pub const NORM_RANGE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

impl Default for Endianness {
    fn default() -> Self {
        Endianness::Little
    }
}

/// JSON sidecar describing a raw brick.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub voxel_bits: u8,
    #[serde(default)]
    pub endianness: Endianness,
}

/// Dense 3D scalar grid with normalization metadata.
///
/// `data` holds normalized intensities in [0, 100]; `norm = (lo, hi)` is the
/// original intensity range so the mapping can be inverted exactly.
#[derive(Debug, Clone)]
pub struct Volume {
    dims: [usize; 3],
    voxel_bits: u8,
    data: Vec<f64>,
    norm: (f64, f64),
}

impl Volume {
    /// Build a volume from original-scale values, normalizing by the observed
    /// (min, max). A constant volume gets `hi = lo + 1` so the mapping stays
    /// invertible; its normalized data is all zero.
    pub fn from_raw_values(dims: [usize; 3], voxel_bits: u8, values: Vec<f64>) -> Result<Self> {
        check_dims_bits(dims, voxel_bits)?;
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(MoecError::Format(format!(
                "expected {} values for dims {:?}, got {}",
                dims[0] * dims[1] * dims[2],
                dims,
                values.len()
            )));
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            eprintln!("warning: constant volume (min = max = {lo}); forcing hi = lo + 1");
            hi = lo + 1.0;
        }
        let scale = NORM_RANGE / (hi - lo);
        let data = values.into_iter().map(|v| (v - lo) * scale).collect();
        Ok(Volume {
            dims,
            voxel_bits,
            data,
            norm: (lo, hi),
        })
    }

    /// Build a volume whose data is already in normalized [0, 100] space.
    pub fn from_normalized(
        dims: [usize; 3],
        voxel_bits: u8,
        data: Vec<f64>,
        norm: (f64, f64),
    ) -> Result<Self> {
        check_dims_bits(dims, voxel_bits)?;
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(MoecError::Format(format!(
                "expected {} values for dims {:?}, got {}",
                dims[0] * dims[1] * dims[2],
                dims,
                data.len()
            )));
        }
        if norm.1 <= norm.0 {
            return Err(MoecError::Format(format!("invalid norm range {norm:?}")));
        }
        Ok(Volume {
            dims,
            voxel_bits,
            data,
            norm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_bits(&self) -> u8 {
        self.voxel_bits
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Source size in bytes (voxel count × bytes per voxel).
    pub fn original_bytes(&self) -> usize {
        self.voxel_count() * (self.voxel_bits as usize / 8)
    }

    pub fn norm(&self) -> (f64, f64) {
        self.norm
    }

    /// Normalized intensities in [0, 100].
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Original-scale intensities (inverse of the normalization map).
    pub fn denormalized(&self) -> Vec<f64> {
        let (lo, hi) = self.norm;
        let scale = (hi - lo) / NORM_RANGE;
        self.data.iter().map(|v| lo + v * scale).collect()
    }

    /// Snap data to the integer voxel grid of `voxel_bits`, exactly as
    /// [`Volume::save_raw`] would when writing bytes. Reconstructions pass
    /// through this so in-memory metrics match the decompressed file.
    pub fn quantized_to_grid(&self) -> Volume {
        let max_val = ((1u32 << self.voxel_bits) - 1) as f64;
        let (lo, hi) = self.norm;
        let scale = (hi - lo) / NORM_RANGE;
        let inv = NORM_RANGE / (hi - lo);
        let data = self
            .data
            .iter()
            .map(|v| {
                let orig = (lo + v * scale).round().clamp(0.0, max_val);
                (orig - lo) * inv
            })
            .collect();
        Volume {
            dims: self.dims,
            voxel_bits: self.voxel_bits,
            data,
            norm: self.norm,
        }
    }

    /// Decode a raw brick. The file length must equal `H·W·D·(bits/8)`.
    pub fn load_raw(
        path: &Path,
        dims: [usize; 3],
        voxel_bits: u8,
        endianness: Endianness,
    ) -> Result<Self> {
        check_dims_bits(dims, voxel_bits)?;
        let bytes = std::fs::read(path)?;
        let expected = dims[0] * dims[1] * dims[2] * (voxel_bits as usize / 8);
        if bytes.len() != expected {
            return Err(MoecError::Format(format!(
                "{}: file is {} bytes, dims {:?} at {} bits need {}",
                path.display(),
                bytes.len(),
                dims,
                voxel_bits,
                expected
            )));
        }
        let values: Vec<f64> = match voxel_bits {
            8 => bytes.iter().map(|&b| b as f64).collect(),
            16 => bytes
                .chunks_exact(2)
                .map(|c| {
                    let v = match endianness {
                        Endianness::Little => u16::from_le_bytes([c[0], c[1]]),
                        Endianness::Big => u16::from_be_bytes([c[0], c[1]]),
                    };
                    v as f64
                })
                .collect(),
            _ => unreachable!(),
        };
        Volume::from_raw_values(dims, voxel_bits, values)
    }

    /// Load `<name>.raw` using its `<name>.json` sidecar.
    pub fn load_with_sidecar(raw_path: &Path) -> Result<Self> {
        let sidecar_path = sidecar_path_for(raw_path);
        let text = std::fs::read_to_string(&sidecar_path).map_err(|e| {
            MoecError::Format(format!("missing sidecar {}: {e}", sidecar_path.display()))
        })?;
        let sc: Sidecar = serde_json::from_str(&text)
            .map_err(|e| MoecError::Format(format!("bad sidecar {}: {e}", sidecar_path.display())))?;
        Volume::load_raw(raw_path, sc.dims, sc.voxel_bits, sc.endianness)
    }

    /// Encode to raw bytes (denormalize, round to nearest, clamp to the
    /// voxel integer range).
    pub fn to_raw_bytes(&self, endianness: Endianness) -> Vec<u8> {
        let max_val = ((1u32 << self.voxel_bits) - 1) as f64;
        let (lo, hi) = self.norm;
        let scale = (hi - lo) / NORM_RANGE;
        match self.voxel_bits {
            8 => self
                .data
                .iter()
                .map(|v| (lo + v * scale).round().clamp(0.0, max_val) as u8)
                .collect(),
            16 => {
                let mut out = Vec::with_capacity(self.data.len() * 2);
                for v in &self.data {
                    let q = (lo + v * scale).round().clamp(0.0, max_val) as u16;
                    let b = match endianness {
                        Endianness::Little => q.to_le_bytes(),
                        Endianness::Big => q.to_be_bytes(),
                    };
                    out.extend_from_slice(&b);
                }
                out
            }
            _ => unreachable!(),
        }
    }

    /// Write `<name>.raw` plus its JSON sidecar.
    pub fn save_raw(&self, raw_path: &Path, endianness: Endianness) -> Result<()> {
        std::fs::write(raw_path, self.to_raw_bytes(endianness))?;
        let sc = Sidecar {
            dims: self.dims,
            voxel_bits: self.voxel_bits,
            endianness,
        };
        std::fs::write(
            sidecar_path_for(raw_path),
            serde_json::to_string_pretty(&sc).expect("sidecar serializes"),
        )?;
        Ok(())
    }
}

fn check_dims_bits(dims: [usize; 3], voxel_bits: u8) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(MoecError::Format(format!("dims must be ≥ 1, got {dims:?}")));
    }
    if voxel_bits != 8 && voxel_bits != 16 {
        return Err(MoecError::Format(format!(
            "voxel_bits must be 8 or 16, got {voxel_bits}"
        )));
    }
    Ok(())
}

pub fn sidecar_path_for(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

/// Map a flat voxel index to its grid coordinate in [-1, 1]³.
///
/// Axis with extent N maps index k to −1 + 2k/(N−1); a singleton axis maps
/// to 0. Flat order is x-major: `flat = (x·W + y)·D + z` for dims `[H, W, D]`.
pub fn grid_coord(flat_index: usize, dims: [usize; 3]) -> Result<[f64; 3]> {
    let [h, w, d] = dims;
    let total = h * w * d;
    if flat_index >= total {
        return Err(MoecError::InvalidArgument(format!(
            "flat index {flat_index} out of range for dims {dims:?}"
        )));
    }
    let x = flat_index / (w * d);
    let y = (flat_index / d) % w;
    let z = flat_index % d;
    Ok([axis_coord(x, h), axis_coord(y, w), axis_coord(z, d)])
}

fn axis_coord(k: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (n - 1) as f64
    }
}

/// A sampled training batch: grid coordinates, their normalized intensities
/// and the flat indices they came from.
#[derive(Debug, Clone)]
pub struct CoordBatch {
    pub coords: Matrix,
    pub targets: Vec<f64>,
    pub flat_indices: Vec<usize>,
}

/// Draw `batch` voxel indices uniformly with replacement; deterministic for a
/// given RNG state.
pub fn sample_batch(volume: &Volume, batch: usize, rng: &mut ChaCha8Rng) -> CoordBatch {
    assert!(batch >= 1, "batch size must be ≥ 1");
    let total = volume.voxel_count();
    let mut coords = Matrix::zeros(batch, 3);
    let mut targets = Vec::with_capacity(batch);
    let mut flat_indices = Vec::with_capacity(batch);
    for b in 0..batch {
        let idx = rng.gen_range(0..total);
        let c = grid_coord(idx, volume.dims()).expect("index in range");
        coords.row_mut(b).copy_from_slice(&c);
        targets.push(volume.data()[idx]);
        flat_indices.push(idx);
    }
    CoordBatch {
        coords,
        targets,
        flat_indices,
    }
}

/// Synthetic fixture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two intensity plateaus separated by a smooth spherical shell.
    TwoMaterialSphere,
    /// Strictly increasing ramp along x with mild y/z tilt.
    SmoothGradient,
    /// DC plus M integer-frequency cosine modes of small total amplitude.
    BandLimited(usize),
}

/// Deterministic synthetic volume generator (desk-scale stand-ins for large
/// scanned organs).
pub fn make_synthetic(kind: SyntheticKind, dims: [usize; 3], seed: u64) -> Result<Volume> {
    if dims.iter().any(|&d| d < 4) {
        return Err(MoecError::InvalidArgument(format!(
            "synthetic volumes need dims ≥ 4, got {dims:?}"
        )));
    }
    let [h, w, d] = dims;
    let total = h * w * d;
    match kind {
        SyntheticKind::TwoMaterialSphere => {
            let (lo_v, hi_v) = (20.0, 230.0);
            let (radius, shell) = (0.75, 0.15);
            let mut values = Vec::with_capacity(total);
            for idx in 0..total {
                let c = grid_coord(idx, dims)?;
                let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                let s = ((radius - r) / shell + 0.5).clamp(0.0, 1.0);
                let smooth = s * s * (3.0 - 2.0 * s);
                values.push(lo_v + (hi_v - lo_v) * smooth);
            }
            Volume::from_raw_values(dims, 8, values)
        }
        SyntheticKind::SmoothGradient => {
            let mut values = Vec::with_capacity(total);
            for idx in 0..total {
                let c = grid_coord(idx, dims)?;
                let s = 0.7 * c[0] + 0.25 * c[1] + 0.05 * c[2];
                values.push(120.0 + 100.0 * s);
            }
            Volume::from_raw_values(dims, 8, values)
        }
        SyntheticKind::BandLimited(modes) => {
            if modes == 0 {
                return Err(MoecError::InvalidArgument("band_limited needs M ≥ 1".into()));
            }
            use rand::SeedableRng;
            // fixed stream tag so different kinds never share a stream
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x62616e64);
            let kmax = ((modes as f64).cbrt().ceil() as i64 + 1).max(2);
            let mut freqs: Vec<[i64; 3]> = Vec::new();
            while freqs.len() < modes {
                let k = [
                    rng.gen_range(-kmax..=kmax),
                    rng.gen_range(-kmax..=kmax),
                    rng.gen_range(-kmax..=kmax),
                ];
                if k == [0, 0, 0] || freqs.contains(&k) {
                    continue;
                }
                freqs.push(k);
            }
            let phases: Vec<f64> = (0..modes)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            // Total AC amplitude 4 against a DC of 50 keeps the top
            // frequency component above 90% of the spectral mass.
            let amp = 4.0 / modes as f64;
            let mut data = Vec::with_capacity(total);
            for idx in 0..total {
                let x = idx / (w * d);
                let y = (idx / d) % w;
                let z = idx % d;
                let mut v = 50.0;
                for (k, phi) in freqs.iter().zip(&phases) {
                    let t = std::f64::consts::TAU
                        * (k[0] as f64 * x as f64 / h as f64
                            + k[1] as f64 * y as f64 / w as f64
                            + k[2] as f64 * z as f64 / d as f64);
                    v += amp * (t + phi).cos();
                }
                data.push(v);
            }
            Volume::from_normalized(dims, 16, data, (0.0, 65535.0))
        }
    }
}

/// Evaluate a trained model on every voxel in flat-index order, `chunk_size`
/// coordinates at a time, clamping predictions to the normalized range and
/// attaching the stored normalization so the result can be denormalized.
///
/// Output is bit-identical for any chunk size and thread count: every row is
/// evaluated independently and chunks are merged in flat order.
pub fn reconstruct_grid(
    params: &ModelParams,
    config: &ModelConfig,
    chunk_size: usize,
) -> Result<Volume> {
    let dims = config.dims;
    let total = dims[0] * dims[1] * dims[2];
    let chunk = chunk_size.max(1);
    let n_chunks = total.div_ceil(chunk);

    let eval_chunk = |ci: usize| -> Result<Vec<f64>> {
        let start = ci * chunk;
        let end = (start + chunk).min(total);
        let mut coords = Matrix::zeros(end - start, 3);
        for (row, idx) in (start..end).enumerate() {
            coords.row_mut(row).copy_from_slice(&grid_coord(idx, dims)?);
        }
        let (pred, _) = model::evaluate(&coords, params, config)?;
        Ok(pred
            .into_iter()
            .map(|v| v.clamp(0.0, NORM_RANGE))
            .collect())
    };

    #[cfg(feature = "parallel")]
    let chunks: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(eval_chunk)
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Vec<f64>> = (0..n_chunks).map(eval_chunk).collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(total);
    for c in chunks {
        data.extend(c);
    }
    Volume::from_normalized(dims, config.voxel_bits, data, config.normalization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = Volume::from_raw_values([2, 2, 2], 8, vec![7.0; 8]).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(v.norm(), (7.0, 8.0));
    }

    #[test]
    fn affine_endpoints_map_to_0_and_100() {
        let v = Volume::from_raw_values([1, 1, 2], 16, vec![0.0, 65535.0]).unwrap();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 100.0);
    }

    #[test]
    fn original_bytes_accounting() {
        // 256³ at 16 bits is the 32 MiB source of the reference tables
        let v = Volume::from_raw_values([1, 1, 1], 16, vec![1.0]).unwrap();
        let _ = v;
        let dims = [256usize, 256, 256];
        assert_eq!(dims[0] * dims[1] * dims[2] * 2, 32 * 1024 * 1024);
    }

    #[test]
    fn grid_coord_corners_and_center() {
        assert_eq!(grid_coord(0, [3, 3, 3]).unwrap(), [-1.0, -1.0, -1.0]);
        assert_eq!(grid_coord(13, [3, 3, 3]).unwrap(), [0.0, 0.0, 0.0]);
        assert_eq!(grid_coord(26, [3, 3, 3]).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(grid_coord(7, [2, 2, 2]).unwrap(), [1.0, 1.0, 1.0]);
        assert!(grid_coord(27, [3, 3, 3]).is_err());
    }

    #[test]
    fn grid_coord_singleton_axis_maps_to_zero() {
        assert_eq!(grid_coord(0, [1, 1, 1]).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_coord_is_injective_and_spans_endpoints() {
        let dims = [3, 4, 5];
        let mut seen = std::collections::HashSet::new();
        for i in 0..60 {
            let c = grid_coord(i, dims).unwrap();
            let key = format!("{:?}", c);
            assert!(seen.insert(key), "coordinate collision at {i}");
        }
        let first = grid_coord(0, dims).unwrap();
        let last = grid_coord(59, dims).unwrap();
        assert_eq!(first, [-1.0, -1.0, -1.0]);
        assert_eq!(last, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn sampling_is_deterministic_and_covers_single_voxel() {
        let v = Volume::from_raw_values([1, 1, 1], 8, vec![42.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&v, 1, &mut rng);
        assert_eq!(b.flat_indices, vec![0]);
        assert_eq!(b.coords.row(0), &[0.0, 0.0, 0.0]);

        let v2 = make_synthetic(SyntheticKind::TwoMaterialSphere, [8, 8, 8], 0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        let b1 = sample_batch(&v2, 64, &mut r1);
        let b2 = sample_batch(&v2, 64, &mut r2);
        assert_eq!(b1.flat_indices, b2.flat_indices);
        assert_eq!(b1.targets, b2.targets);
    }

    #[test]
    fn gradient_is_strictly_increasing_along_x() {
        let v = make_synthetic(SyntheticKind::SmoothGradient, [4, 4, 4], 0).unwrap();
        for y in 0..4 {
            for z in 0..4 {
                let mut prev = f64::NEG_INFINITY;
                for x in 0..4 {
                    let idx = (x * 4 + y) * 4 + z;
                    let val = v.data()[idx];
                    assert!(val > prev, "not increasing at x={x} y={y} z={z}");
                    prev = val;
                }
            }
        }
    }

    #[test]
    fn sphere_histogram_has_two_dominant_modes() {
        let v = make_synthetic(SyntheticKind::TwoMaterialSphere, [32, 32, 32], 0).unwrap();
        // histogram over 10 equal bins of the normalized range
        let mut bins = [0usize; 10];
        for &x in v.data() {
            let b = ((x / NORM_RANGE * 10.0) as usize).min(9);
            bins[b] += 1;
        }
        let mut sorted = bins;
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        // the two plateau bins dominate everything else
        assert!(bins[0] > v.voxel_count() / 10, "low plateau missing: {bins:?}");
        assert!(bins[9] > v.voxel_count() / 20, "high plateau missing: {bins:?}");
        assert!(
            sorted[0] + sorted[1] > v.voxel_count() * 7 / 10,
            "plateaus are not dominant: {bins:?}"
        );
    }

    #[test]
    fn save_then_load_is_identity_on_bytes() {
        let dir = std::env::temp_dir().join(format!("moec-vol-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let v = make_synthetic(SyntheticKind::TwoMaterialSphere, [8, 8, 8], 1).unwrap();
        let p = dir.join("t.raw");
        v.save_raw(&p, Endianness::Little).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();
        let loaded = Volume::load_with_sidecar(&p).unwrap();
        assert_eq!(loaded.to_raw_bytes(Endianness::Little), bytes1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_raw_size_mismatch_is_format_error() {
        let dir = std::env::temp_dir().join(format!("moec-vol2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.raw");
        std::fs::write(&p, [0u8; 7]).unwrap();
        let err = Volume::load_raw(&p, [2, 2, 2], 8, Endianness::Little);
        assert!(matches!(err, Err(MoecError::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
