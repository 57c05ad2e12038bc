//! Symmetric int8 post-training weight quantization. Weights only — the
//! model's activations are never quantized.

use crate::error::{MoecError, Result};

/// Per-tensor symmetric quantization: `scale = max|w| / 127`,
/// `q = round(w/scale)` clamped to [-127, 127]. An all-zero tensor gets
/// scale 1 and all-zero codes.
pub fn quantize_tensor(weights: &[f32]) -> Result<(Vec<i8>, f32)> {
    if weights.is_empty() {
        return Err(MoecError::InvalidArgument("quantize_tensor on empty tensor".into()));
    }
    let max_abs = weights.iter().fold(0.0f32, |m, &w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Ok((vec![0; weights.len()], 1.0));
    }
    let scale = max_abs / 127.0;
    let q = weights
        .iter()
        .map(|&w| (w / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((q, scale))
}

/// w' = q · scale.
pub fn dequantize_tensor(q: &[i8], scale: f32) -> Result<Vec<f32>> {
    if scale <= 0.0 {
        return Err(MoecError::InvalidArgument(format!(
            "dequantize scale must be > 0, got {scale}"
        )));
    }
    Ok(q.iter().map(|&v| v as f32 * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_example() {
        let (q, scale) = quantize_tensor(&[-1.0, 0.5, 1.0]).unwrap();
        assert_eq!(scale, 1.0 / 127.0);
        assert_eq!(q, vec![-127, 64, 127]);
    }

    #[test]
    fn all_zero_tensor() {
        let (q, scale) = quantize_tensor(&[0.0, 0.0, -0.0]).unwrap();
        assert_eq!(scale, 1.0);
        assert!(q.iter().all(|&v| v == 0));
    }

    #[test]
    fn dequantize_example() {
        let w = dequantize_tensor(&[-127], 0.01).unwrap();
        assert!((w[0] + 1.27).abs() < 1e-7);
        assert!(dequantize_tensor(&[1], 0.0).is_err());
    }

    #[test]
    fn roundtrip_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(1..200);
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let (q, scale) = quantize_tensor(&w).unwrap();
            let deq = dequantize_tensor(&q, scale).unwrap();
            for (a, b) in w.iter().zip(&deq) {
                let bound = scale as f64 / 2.0 + (a.abs() as f64) * f32::EPSILON as f64;
                assert!(
                    ((a - b).abs() as f64) <= bound,
                    "|{a} - {b}| > {bound}"
                );
            }
        }
    }

    #[test]
    fn quantize_dequantize_quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f32> = (0..500).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let (q1, s1) = quantize_tensor(&w).unwrap();
        let deq = dequantize_tensor(&q1, s1).unwrap();
        let (q2, s2) = quantize_tensor(&deq).unwrap();
        assert_eq!(q1, q2);
        let deq2 = dequantize_tensor(&q2, s2).unwrap();
        assert_eq!(deq, deq2);
    }
}
