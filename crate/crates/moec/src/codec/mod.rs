//! Bit-exact compressed-artifact format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic "MOEC" | u16 version | u32 header_len | JSON header |
//!   per tensor: u16 tensor_id | u8 mode | u32 byte_len | payload |
//! u32 crc32 over everything before it
//! ```
//!
//! Tensors follow the model's canonical layer order, two per layer (weights,
//! then bias). Weights serialize as f32; biases are few and sensitive and are
//! always stored as raw f32 regardless of the artifact mode. Per-tensor mode
//! bytes encode the quantization/entropy decision, including the automatic
//! raw fallback when Huffman coding would inflate a tensor.

pub mod huffman;
pub mod quant;

use serde::{Deserialize, Serialize};

use crate::error::{MoecError, Result};
use crate::model::{ModelConfig, ModelParams};

pub use huffman::{huffman_build, huffman_decode, huffman_encode, HuffmanEncoded, HuffmanTree};
pub use quant::{dequantize_tensor, quantize_tensor};

const MAGIC: &[u8; 4] = b"MOEC";
const VERSION: u16 = 1;

const TENSOR_MODE_F32: u8 = 0;
const TENSOR_MODE_INT8: u8 = 1;
const TENSOR_MODE_INT8_HUFF: u8 = 2;

/// Requested artifact encoding. Serialized as a number so every mode costs
/// the same header bytes (Huffman fallback may then never inflate an
/// artifact).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ArtifactMode {
    /// f32 weights verbatim.
    Raw,
    /// int8 symmetric per-tensor quantization.
    Quant,
    /// Quantization plus Huffman coding of the int8 codes (per-tensor raw
    /// fallback when coding would not shrink the tensor).
    QuantHuffman,
}

impl From<ArtifactMode> for u8 {
    fn from(m: ArtifactMode) -> u8 {
        match m {
            ArtifactMode::Raw => 0,
            ArtifactMode::Quant => 1,
            ArtifactMode::QuantHuffman => 2,
        }
    }
}

impl TryFrom<u8> for ArtifactMode {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(ArtifactMode::Raw),
            1 => Ok(ArtifactMode::Quant),
            2 => Ok(ArtifactMode::QuantHuffman),
            other => Err(format!("unknown artifact mode {other}")),
        }
    }
}

impl std::str::FromStr for ArtifactMode {
    type Err = MoecError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ArtifactMode::Raw),
            "quant" => Ok(ArtifactMode::Quant),
            "quant+huffman" => Ok(ArtifactMode::QuantHuffman),
            other => Err(MoecError::InvalidArgument(format!(
                "unknown artifact mode '{other}' (raw | quant | quant+huffman)"
            ))),
        }
    }
}

impl std::fmt::Display for ArtifactMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArtifactMode::Raw => write!(f, "raw"),
            ArtifactMode::Quant => write!(f, "quant"),
            ArtifactMode::QuantHuffman => write!(f, "quant+huffman"),
        }
    }
}

/// JSON header carried inside every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub mode: ArtifactMode,
    /// Initialization scheme identifier (for reproducibility).
    pub init: String,
    /// Bias storage policy flag.
    pub bias_mode: String,
}

/// Standard IEEE CRC32 (reflected, poly 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn weight_tensor_payloads(values: &[f64], mode: ArtifactMode) -> Result<(u8, Vec<u8>)> {
    match mode {
        ArtifactMode::Raw => Ok((TENSOR_MODE_F32, f32_bytes(values))),
        ArtifactMode::Quant | ArtifactMode::QuantHuffman => {
            let f32s: Vec<f32> = values.iter().map(|&v| v as f32).collect();
            let (q, scale) = quantize_tensor(&f32s)?;
            let mut int8_payload = Vec::with_capacity(4 + q.len());
            int8_payload.extend_from_slice(&scale.to_le_bytes());
            int8_payload.extend(q.iter().map(|&v| v as u8));
            if mode == ArtifactMode::Quant {
                return Ok((TENSOR_MODE_INT8, int8_payload));
            }
            let bytes: Vec<u8> = q.iter().map(|&v| v as u8).collect();
            let enc = huffman_encode(&bytes)?;
            let mut huff_payload = Vec::with_capacity(4 + 8 + 256 + 8 + enc.bitstream.len());
            huff_payload.extend_from_slice(&scale.to_le_bytes());
            huff_payload.extend_from_slice(&enc.n_values.to_le_bytes());
            huff_payload.extend_from_slice(&enc.lengths);
            huff_payload.extend_from_slice(&enc.bit_len.to_le_bytes());
            huff_payload.extend_from_slice(&enc.bitstream);
            if huff_payload.len() < int8_payload.len() {
                Ok((TENSOR_MODE_INT8_HUFF, huff_payload))
            } else {
                // coding would inflate this tensor; keep the plain int8 form
                Ok((TENSOR_MODE_INT8, int8_payload))
            }
        }
    }
}

/// Serialize trained parameters into the artifact byte format.
pub fn pack_artifact(
    params: &ModelParams,
    config: &ModelConfig,
    mode: ArtifactMode,
    seed: u64,
) -> Result<Vec<u8>> {
    if !params.is_finite() {
        return Err(MoecError::Numeric("refusing to pack non-finite parameters".into()));
    }
    let header = ArtifactHeader {
        model: config.clone(),
        seed,
        mode,
        init: "siren-uniform-omega".to_string(),
        bias_mode: "f32".to_string(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);

    let mut tensor_id: u16 = 0;
    for (_, layer) in params.layers() {
        let (wmode, wpayload) = weight_tensor_payloads(layer.w.as_slice(), mode)?;
        push_record(&mut buf, tensor_id, wmode, &wpayload);
        tensor_id += 1;
        // biases are never quantized
        let bpayload = f32_bytes(&layer.b);
        push_record(&mut buf, tensor_id, TENSOR_MODE_F32, &bpayload);
        tensor_id += 1;
    }

    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn push_record(buf: &mut Vec<u8>, id: u16, mode: u8, payload: &[u8]) {
    buf.extend_from_slice(&id.to_le_bytes());
    buf.push(mode);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(payload);
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.off + n {
            return Err(MoecError::CorruptArtifact("artifact truncated".into()));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.off == self.bytes.len()
    }
}

fn decode_weight_payload(mode: u8, payload: &[u8], expected_len: usize) -> Result<Vec<f64>> {
    let mut r = Reader {
        bytes: payload,
        off: 0,
    };
    let values: Vec<f64> = match mode {
        TENSOR_MODE_F32 => {
            let raw = r.take(expected_len * 4)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        TENSOR_MODE_INT8 => {
            let scale = r.f32()?;
            let q: Vec<i8> = r.take(expected_len)?.iter().map(|&b| b as i8).collect();
            dequantize_tensor(&q, scale)?.iter().map(|&v| v as f64).collect()
        }
        TENSOR_MODE_INT8_HUFF => {
            let scale = r.f32()?;
            let n_values = r.u64()?;
            if n_values as usize != expected_len {
                return Err(MoecError::CorruptArtifact(format!(
                    "tensor length {n_values} does not match config shape {expected_len}"
                )));
            }
            let lengths: [u8; 256] = r.take(256)?.try_into().unwrap();
            let bit_len = r.u64()?;
            let bitstream = r.take(payload.len() - r.off)?;
            let bytes = huffman_decode(lengths, bitstream, bit_len, n_values)?;
            let q: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
            dequantize_tensor(&q, scale)?.iter().map(|&v| v as f64).collect()
        }
        other => {
            return Err(MoecError::CorruptArtifact(format!(
                "unknown tensor mode {other}"
            )))
        }
    };
    if !r.done() {
        return Err(MoecError::CorruptArtifact("trailing bytes in tensor payload".into()));
    }
    Ok(values)
}

/// Parse and validate an artifact, reconstructing a runnable model.
pub fn unpack_artifact(bytes: &[u8]) -> Result<(ModelParams, ArtifactHeader)> {
    if bytes.len() < 14 {
        return Err(MoecError::CorruptArtifact("artifact too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(body) != stored {
        return Err(MoecError::CorruptArtifact("artifact checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        off: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(MoecError::CorruptArtifact("bad artifact magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(MoecError::CorruptArtifact(format!(
            "unsupported artifact version {version}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: ArtifactHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| MoecError::CorruptArtifact(format!("bad artifact header: {e}")))?;
    header.model.validate().map_err(|e| {
        MoecError::CorruptArtifact(format!("artifact carries an invalid model config: {e}"))
    })?;

    let mut params = ModelParams::zeros(&header.model)?;
    let mut expected_id: u16 = 0;
    for layer in params.layers_mut() {
        for (want_bias, len) in [(false, layer.w.rows() * layer.w.cols()), (true, layer.b.len())] {
            let id = r.u16()?;
            if id != expected_id {
                return Err(MoecError::CorruptArtifact(format!(
                    "tensor id {id} out of order (expected {expected_id})"
                )));
            }
            let mode = r.take(1)?[0];
            if want_bias && mode != TENSOR_MODE_F32 {
                return Err(MoecError::CorruptArtifact("bias tensor is not raw f32".into()));
            }
            let byte_len = r.u32()? as usize;
            let payload = r.take(byte_len)?;
            let values = decode_weight_payload(mode, payload, len)?;
            if want_bias {
                layer.b.copy_from_slice(&values);
            } else {
                layer.w.as_mut_slice().copy_from_slice(&values);
            }
            expected_id += 1;
        }
    }
    if !r.done() {
        return Err(MoecError::CorruptArtifact("trailing bytes after tensors".into()));
    }
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{solve_width, ARCH_PRESET_STD};

    fn config(n: usize, f: usize) -> ModelConfig {
        ModelConfig {
            n_experts: n,
            top_k: 1,
            feature_width: f,
            expert_depth: 5,
            encoder_depth: 2,
            decoder_depth: 1,
            omega: 30.0,
            output_gain: 50.0,
            lambda_balance: 0.01,
            capacity_factor: 1.25,
            normalization: (0.0, 65535.0),
            dims: [256, 256, 256],
            voxel_bits: 16,
            arch_preset: ARCH_PRESET_STD.to_string(),
        }
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn raw_roundtrip_is_byte_identical() {
        let cfg = config(2, 6);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let a = pack_artifact(&params, &cfg, ArtifactMode::Raw, 1).unwrap();
        let (unpacked, header) = unpack_artifact(&a).unwrap();
        assert_eq!(header.mode, ArtifactMode::Raw);
        let b = pack_artifact(&unpacked, &header.model, ArtifactMode::Raw, header.seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quant_modes_restore_dequantized_weights_exactly() {
        let cfg = config(2, 6);
        let params = ModelParams::init(&cfg, 2).unwrap();
        let qa = pack_artifact(&params, &cfg, ArtifactMode::Quant, 2).unwrap();
        let ha = pack_artifact(&params, &cfg, ArtifactMode::QuantHuffman, 2).unwrap();
        let (qp, _) = unpack_artifact(&qa).unwrap();
        let (hp, _) = unpack_artifact(&ha).unwrap();
        // huffman layer is lossless over the quantized codes
        assert_eq!(qp.flatten(), hp.flatten());
        // biases survive exactly (f32 view)
        for ((_, l0), (_, l1)) in params.layers().iter().zip(qp.layers().iter()) {
            for (a, b) in l0.b.iter().zip(l1.b.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn artifact_size_modes_are_monotone() {
        let cfg = config(2, 12);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let raw = pack_artifact(&params, &cfg, ArtifactMode::Raw, 3).unwrap();
        let quant = pack_artifact(&params, &cfg, ArtifactMode::Quant, 3).unwrap();
        let huff = pack_artifact(&params, &cfg, ArtifactMode::QuantHuffman, 3).unwrap();
        assert!(quant.len() < raw.len());
        assert!(huff.len() <= quant.len());
    }

    #[test]
    fn reference_budget_size_accounting() {
        // a 32,768-parameter model serializes to ≈128 KiB of weights plus a
        // bounded header
        let skeleton = config(2, 1);
        let width = solve_width(32_768, &skeleton).unwrap();
        let cfg = config(2, width);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let raw = pack_artifact(&params, &cfg, ArtifactMode::Raw, 4).unwrap();
        let payload = 4 * cfg.param_count();
        assert!(payload <= 32_768 * 4);
        // header + record framing stays under 1 KiB beyond the weight payload
        assert!(raw.len() > payload);
        assert!(
            raw.len() <= payload + 1024,
            "framing overhead {} bytes",
            raw.len() - payload
        );
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = config(1, 4);
        let params = ModelParams::init(&cfg, 5).unwrap();
        let mut a = pack_artifact(&params, &cfg, ArtifactMode::Quant, 5).unwrap();
        let mid = a.len() / 2;
        a[mid] ^= 0x01;
        assert!(matches!(
            unpack_artifact(&a),
            Err(MoecError::CorruptArtifact(_))
        ));
        assert!(matches!(
            unpack_artifact(&a[..10]),
            Err(MoecError::CorruptArtifact(_))
        ));
    }
}
