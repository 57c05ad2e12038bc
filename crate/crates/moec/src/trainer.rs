//! The optimization loop: Adam with exponential learning-rate decay, total
//! loss `L_all = L_d + λ·L_b`, phased gating freeze, checkpointing and
//! metrics logging.
//!
//! Per-step batch sampling draws from a counter-derived RNG stream
//! (`derive_rng(seed, step)`), so a resumed run replays exactly the same
//! batches as an uninterrupted one.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::crc32;
use crate::error::{MoecError, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::mse_loss;
use crate::volume::{sample_batch, Volume};

/// Reserved stream id for parameter initialization.
pub const STREAM_INIT: u64 = u64::MAX;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-stream RNG: stream 0..steps are batch streams,
/// [`STREAM_INIT`] seeds initialization.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F)))
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// lr(steps) / lr(0); the exponential decay factor per step is
    /// `lr_final_ratio^(1/steps)`.
    pub lr_final_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the balancing loss in the total loss.
    pub lambda: f64,
    /// Router updates are skipped from this step on.
    pub freeze_step: usize,
    pub seed: u64,
    /// Record every k-th step in the train log (1 = every step).
    pub log_every: usize,
}

/// Default balancing-loss weight.
///
/// The loss value is O(1) but its per-probability gradient carries a 1/B²
/// factor, so the weight has to offset the batch scale to hold against the
/// task gradient reaching the gates; 1e-2-style weights let the router
/// collapse within a few hundred steps at desk batch sizes.
pub const DEFAULT_LAMBDA: f64 = 100.0;

impl TrainConfig {
    /// Desk-scale profile: 64³-class volumes, batch 8,192, 20,000 steps.
    pub fn desk(seed: u64) -> Self {
        let steps = 20_000;
        TrainConfig {
            steps,
            batch_size: 8_192,
            lr0: 5e-4,
            lr_final_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: DEFAULT_LAMBDA,
            freeze_step: steps * 3 / 4,
            seed,
            log_every: 1,
        }
    }

    /// Full-scale profile from the reference experiments: batches of 200,000
    /// coordinates over 80,000 steps.
    pub fn paper(seed: u64) -> Self {
        let steps = 80_000;
        TrainConfig {
            steps,
            batch_size: 200_000,
            lr0: 5e-4,
            lr_final_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: DEFAULT_LAMBDA,
            freeze_step: steps * 3 / 4,
            seed,
            log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(MoecError::InvalidArgument("steps and batch size must be ≥ 1".into()));
        }
        if !(0.0 < self.lr_final_ratio && self.lr_final_ratio <= 1.0) {
            return Err(MoecError::InvalidArgument(format!(
                "lr_final_ratio must lie in (0, 1], got {}",
                self.lr_final_ratio
            )));
        }
        if self.freeze_step > self.steps {
            return Err(MoecError::InvalidArgument(format!(
                "freeze_step {} exceeds steps {}",
                self.freeze_step, self.steps
            )));
        }
        if self.log_every == 0 {
            return Err(MoecError::InvalidArgument("log_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// lr(step) = lr0 · gamma^step with gamma chosen so lr(steps) = lr0·ratio.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    config.lr0
        * config
            .lr_final_ratio
            .powf(step as f64 / config.steps as f64)
}

/// Adam first/second moments plus the bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One bias-corrected Adam update in place. `skip` is a flat-index range left
/// untouched (parameters and moments), used for the router freeze.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
    skip: Option<(usize, usize)>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(MoecError::shape(
            "adam_step",
            format!("params {}, grads {}, moments {}", params.len(), grads.len(), state.m.len()),
        ));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(MoecError::Numeric(format!(
            "non-finite gradient {} at flat index {idx} (step {})",
            grads[idx],
            state.t + 1
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (skip_start, skip_end) = skip.unwrap_or((usize::MAX, usize::MAX));
    for i in 0..params.len() {
        if i >= skip_start && i < skip_end {
            continue;
        }
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_d: f64,
    pub l_b: f64,
    pub lr: f64,
    pub drop_fraction: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Full optimizer/progress state; everything needed to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_step: usize,
    pub adam: AdamState,
    pub best_loss: f64,
    pub best_step: usize,
    pub initial_loss: f64,
    pub divergence_run: usize,
}

impl TrainState {
    fn new(param_count: usize) -> Self {
        TrainState {
            next_step: 0,
            adam: AdamState::new(param_count),
            best_loss: f64::INFINITY,
            best_step: 0,
            initial_loss: f64::NAN,
            divergence_run: 0,
        }
    }
}

/// A finished (or checkpointed) training run.
pub struct TrainRun {
    pub params: ModelParams,
    pub state: TrainState,
    pub log: TrainLog,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 1000;

/// Train a fresh model on a volume. Deterministic: (seed, configs) fixes the
/// parameter bits and the whole log.
pub fn train(volume: &Volume, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainRun> {
    train_cfg.validate()?;
    let params = ModelParams::init(model_cfg, train_cfg.seed)?;
    let state = TrainState::new(params.param_count());
    let mut run = TrainRun {
        params,
        state,
        log: TrainLog::default(),
    };
    run_steps(volume, model_cfg, train_cfg, &mut run, train_cfg.steps)?;
    Ok(run)
}

/// Continue a resumed run up to `until_step`.
pub fn train_continue(
    volume: &Volume,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run: &mut TrainRun,
    until_step: usize,
) -> Result<()> {
    train_cfg.validate()?;
    run_steps(volume, model_cfg, train_cfg, run, until_step)
}

fn run_steps(
    volume: &Volume,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    run: &mut TrainRun,
    until_step: usize,
) -> Result<()> {
    let until = until_step.min(train_cfg.steps);
    let router_range = run.params.router_flat_range();
    while run.state.next_step < until {
        let step = run.state.next_step;
        if step >= train_cfg.freeze_step && !run.params.router.is_frozen() {
            run.params.router.freeze();
        }
        let mut rng = derive_rng(train_cfg.seed, step as u64);
        let batch = sample_batch(volume, train_cfg.batch_size, &mut rng);

        let (pred, taps) = model::forward(&batch.coords, &run.params, model_cfg, true)?;
        let (l_d, dpred) = mse_loss(&pred, &batch.targets)?;
        if !l_d.is_finite() {
            return Err(MoecError::Numeric(format!("non-finite loss at step {step}")));
        }
        let (l_b, dlb) = taps.balance()?;
        // The balance term steers the partition only while the router can
        // still move; after the freeze it is logged but no longer trained
        // against (it would only distort the encoder).
        let grads = if run.params.router.is_frozen() {
            model::backward(&run.params, model_cfg, &taps, &dpred, None)?
        } else {
            let mut extra = dlb;
            extra.scale(train_cfg.lambda);
            model::backward(&run.params, model_cfg, &taps, &dpred, Some(&extra))?
        };

        let mut flat = run.params.flatten();
        let lr = lr_at(step, train_cfg);
        let skip = run.params.router.is_frozen().then_some(router_range);
        adam_step(&mut flat, &grads.flatten(), &mut run.state.adam, lr, train_cfg, skip)?;
        run.params.unflatten(&flat)?;

        if step == 0 {
            run.state.initial_loss = l_d;
        }
        if l_d < run.state.best_loss {
            run.state.best_loss = l_d;
            run.state.best_step = step;
        }
        if l_d > DIVERGENCE_FACTOR * run.state.initial_loss {
            run.state.divergence_run += 1;
            if run.state.divergence_run >= DIVERGENCE_PATIENCE {
                return Err(MoecError::Numeric(format!(
                    "diverged: L_d {l_d:.3e} stayed above {DIVERGENCE_FACTOR}x the initial loss for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            run.state.divergence_run = 0;
        }

        if step % train_cfg.log_every == 0 || step + 1 == until {
            run.log.records.push(LogRecord {
                step,
                l_d,
                l_b,
                lr,
                drop_fraction: taps.plan.drop_fraction(),
                counts: taps.plan.counts.clone(),
            });
        }
        run.state.next_step = step + 1;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MCKP";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    next_step: usize,
    adam_t: u64,
    best_loss: f64,
    best_step: usize,
    initial_loss: f64,
    divergence_run: usize,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], off: &mut usize) -> Result<Vec<f64>> {
    let n = read_u64(bytes, off)? as usize;
    if bytes.len() < *off + n * 8 {
        return Err(MoecError::CorruptArtifact("checkpoint truncated".into()));
    }
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let s = *off + i * 8;
        v.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
    }
    *off += n * 8;
    Ok(v)
}

fn read_u64(bytes: &[u8], off: &mut usize) -> Result<u64> {
    if bytes.len() < *off + 8 {
        return Err(MoecError::CorruptArtifact("checkpoint truncated".into()));
    }
    let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
    *off += 8;
    Ok(v)
}

/// Serialize a run to `path`: the full-precision parameters and optimizer
/// moments (the appendix that makes `resume ∘ checkpoint` bit-exact) behind a
/// JSON header, with a trailing CRC32.
pub fn checkpoint(
    path: &Path,
    run: &TrainRun,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        next_step: run.state.next_step,
        adam_t: run.state.adam.t,
        best_loss: run.state.best_loss,
        best_step: run.state.best_step,
        initial_loss: run.state.initial_loss,
        divergence_run: run.state.divergence_run,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    push_f64s(&mut buf, &run.params.flatten());
    push_f64s(&mut buf, &run.state.adam.m);
    push_f64s(&mut buf, &run.state.adam.v);
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Deserialize a checkpoint. When `expected_train` is given, its fields must
/// match the stored config exactly (in particular the seed), otherwise the
/// resume is rejected.
pub fn resume(
    path: &Path,
    expected_train: Option<&TrainConfig>,
) -> Result<(TrainRun, ModelConfig, TrainConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 14 {
        return Err(MoecError::CorruptArtifact("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(MoecError::CorruptArtifact("checkpoint checksum mismatch".into()));
    }
    if &body[0..4] != CKPT_MAGIC {
        return Err(MoecError::CorruptArtifact("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(MoecError::CorruptArtifact(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    if body.len() < 10 + header_len {
        return Err(MoecError::CorruptArtifact("checkpoint truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[10..10 + header_len])
        .map_err(|e| MoecError::CorruptArtifact(format!("bad checkpoint header: {e}")))?;
    if let Some(expected) = expected_train {
        if *expected != header.train {
            return Err(MoecError::CheckpointMismatch(format!(
                "stored train config (seed {}) differs from requested (seed {})",
                header.train.seed, expected.seed
            )));
        }
    }
    let mut off = 10 + header_len;
    let flat = read_f64s(body, &mut off)?;
    let m = read_f64s(body, &mut off)?;
    let v = read_f64s(body, &mut off)?;

    let mut params = ModelParams::zeros(&header.model)?;
    params.unflatten(&flat)?;
    if header.next_step >= header.train.freeze_step {
        params.router.freeze();
    }
    let state = TrainState {
        next_step: header.next_step,
        adam: AdamState {
            t: header.adam_t,
            m,
            v,
        },
        best_loss: header.best_loss,
        best_step: header.best_step,
        initial_loss: header.initial_loss,
        divergence_run: header.divergence_run,
    };
    Ok((
        TrainRun {
            params,
            state,
            log: TrainLog::default(),
        },
        header.model,
        header.train,
    ))
}
