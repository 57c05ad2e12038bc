//! Compressor/decompressor for 3D scalar volumes that overfits a
//! mixture-of-experts sinusoidal coordinate network to the data and stores the
//! trained weights as the compressed artifact.
//!
//! Pipeline: coordinates are lifted by a shared sinusoidal encoder, routed by a
//! learned gating network to a bank of sine-activated expert MLPs, and the
//! gate-weighted mixture is projected back to an intensity value by a shared
//! decoder. The trained weights (optionally int8-quantized and Huffman-coded)
//! are the artifact; decompression is a dense re-evaluation of the network on
//! the voxel grid.
//!
//! Module map:
//! - [`numeric`] — dense matrices, per-layer forward/backward passes, a
//!   finite-difference gradient-check harness
//! - [`volume`] — raw volume I/O, normalization, coordinate grids, sampling,
//!   synthetic fixtures, dense reconstruction
//! - [`router`] — gating network, top-k selection, capacity-limited dispatch,
//!   combine, balancing loss
//! - [`model`] — encoder/experts/decoder assembly and the parameter-budget
//!   solver
//! - [`trainer`] — Adam loop with exponential LR decay, gating freeze,
//!   checkpointing
//! - [`codec`] — bit-exact artifact format, int8 symmetric quantization,
//!   Huffman entropy coding
//! - [`analysis`] — PSNR, 3D SSIM, spectrum concentration, expert-utilization
//!   reports, rate-distortion tables

pub mod analysis;
pub mod codec;
pub mod error;
pub mod model;
pub mod numeric;
pub mod router;
pub mod trainer;
pub mod volume;

pub use error::{MoecError, Result};

/// Number of worker threads honoured by the parallel kernels.
///
/// Resolution order: explicit `MOEC_THREADS` env var, then the rayon global
/// pool size (when the `parallel` feature is on), then 1.
pub fn effective_threads() -> usize {
    if let Ok(v) = std::env::var("MOEC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
