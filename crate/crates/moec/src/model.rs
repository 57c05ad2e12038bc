//! Assembly of the shared sinusoidal encoder, the expert bank, the gating
//! network and the shared decoder, plus the parameter-budget solver mapping a
//! target compression ratio to layer widths.
//!
//! Layer/tensor canonical order (used by flatten, the optimizer and the
//! artifact codec): encoder layers, router pre-layers, router gate, experts
//! in index order (hidden layers then the final linear), decoder hidden
//! layers, decoder output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoecError, Result};
use crate::numeric::{
    sine_backward, sine_forward, LinearGrads, LinearLayer, LinearTape, Matrix, SineTape,
};
use crate::router::{
    balancing_loss, build_dispatch, build_dispatch_dense, combine, combine_backward,
    dispatch_features, gate_backward, gate_forward, selection_backward, top_k_select,
    DispatchPlan, GateTape, RouterGrads, RouterParams, Selection,
};

/// Architecture preset: 5 hidden sine layers per expert plus a final linear.
pub const ARCH_PRESET_STD: &str = "sine5";
/// Alternate preset with 7 fully-connected layers per expert (6 sine + linear).
pub const ARCH_PRESET_DEEP: &str = "deep7";

/// Architecture hyperparameters and volume metadata; serialized verbatim into
/// the artifact header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub feature_width: usize,
    /// Hidden sine layers per expert (the final linear layer is extra).
    pub expert_depth: usize,
    /// Sine layers in the encoder (the first maps 3 → feature_width).
    pub encoder_depth: usize,
    /// Sine layers in the decoder before the final feature → 1 linear.
    pub decoder_depth: usize,
    pub omega: f64,
    pub lambda_balance: f64,
    pub capacity_factor: f64,
    /// Fixed (non-trainable) gain applied to the decoder's final linear
    /// output. Intensities are normalized to [0, 100] while sine features
    /// live in [-1, 1]; the gain lets Adam traverse the output amplitude in
    /// a realistic number of steps at the reference learning rate.
    #[serde(default = "default_output_gain")]
    pub output_gain: f64,
    /// Original intensity range (lo, hi) of the source volume.
    pub normalization: (f64, f64),
    pub dims: [usize; 3],
    pub voxel_bits: u8,
    pub arch_preset: String,
}

fn default_output_gain() -> f64 {
    crate::volume::NORM_RANGE / 2.0
}

impl ModelConfig {
    /// Depths for a named architecture preset:
    /// (encoder_depth, expert_depth, decoder_depth).
    pub fn preset_depths(preset: &str) -> Result<(usize, usize, usize)> {
        match preset {
            ARCH_PRESET_STD => Ok((2, 5, 1)),
            ARCH_PRESET_DEEP => Ok((2, 6, 1)),
            other => Err(MoecError::InvalidArgument(format!(
                "unknown architecture preset '{other}'"
            ))),
        }
    }

    /// Build a config for a volume, solving the feature width from the
    /// compression-ratio parameter budget.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        dims: [usize; 3],
        voxel_bits: u8,
        normalization: (f64, f64),
        ratio: f64,
        n_experts: usize,
        top_k: usize,
        lambda_balance: f64,
        capacity_factor: f64,
        preset: &str,
    ) -> Result<Self> {
        let (encoder_depth, expert_depth, decoder_depth) = Self::preset_depths(preset)?;
        let mut cfg = ModelConfig {
            n_experts,
            top_k,
            feature_width: 1,
            expert_depth,
            encoder_depth,
            decoder_depth,
            omega: 30.0,
            output_gain: default_output_gain(),
            lambda_balance,
            capacity_factor,
            normalization,
            dims,
            voxel_bits,
            arch_preset: preset.to_string(),
        };
        cfg.validate()?;
        let budget = budget_params(dims, voxel_bits, ratio)?;
        cfg.feature_width = solve_width(budget, &cfg)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 1 {
            return Err(MoecError::InvalidArgument("need at least one expert".into()));
        }
        if self.top_k < 1 || self.top_k > self.n_experts {
            return Err(MoecError::InvalidArgument(format!(
                "top_k must lie in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        if self.feature_width < 1 {
            return Err(MoecError::InvalidArgument("feature width must be ≥ 1".into()));
        }
        if self.encoder_depth < 1 || self.decoder_depth < 1 || self.expert_depth < 1 {
            return Err(MoecError::InvalidArgument("depths must be ≥ 1".into()));
        }
        if self.omega <= 0.0 {
            return Err(MoecError::InvalidArgument("omega must be > 0".into()));
        }
        if self.output_gain <= 0.0 || !self.output_gain.is_finite() {
            return Err(MoecError::InvalidArgument("output gain must be positive".into()));
        }
        Ok(())
    }

    pub fn with_width(mut self, feature_width: usize) -> Self {
        self.feature_width = feature_width;
        self
    }

    /// Canonical (in, out) shape of every linear layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let f = self.feature_width;
        let n = self.n_experts;
        let mut v = Vec::new();
        v.push((3, f));
        for _ in 1..self.encoder_depth {
            v.push((f, f));
        }
        v.push((f, f)); // router pre 0
        v.push((f, f)); // router pre 1
        v.push((f, n)); // router gate
        for _ in 0..n {
            for _ in 0..self.expert_depth {
                v.push((f, f));
            }
            v.push((f, f)); // expert final linear
        }
        for _ in 0..self.decoder_depth {
            v.push((f, f));
        }
        v.push((f, 1)); // decoder output
        v
    }

    /// Total trainable parameter count at this width.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }

    /// Voxel payload of the source volume in bytes.
    pub fn original_bytes(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2] * (self.voxel_bits as usize / 8)
    }
}

/// Maximum parameter count for a target ratio: weights serialize at 4 bytes
/// each, so the budget is `floor(source_bytes / ratio / 4)`. Header overhead
/// is excluded here and reported separately by the codec.
pub fn budget_params(dims: [usize; 3], voxel_bits: u8, ratio: f64) -> Result<usize> {
    if ratio <= 0.0 {
        return Err(MoecError::InvalidArgument(format!("ratio must be > 0, got {ratio}")));
    }
    let bytes = (dims[0] * dims[1] * dims[2]) as f64 * (voxel_bits as f64 / 8.0);
    let budget = (bytes / ratio / 4.0).floor();
    if budget < 1.0 {
        return Err(MoecError::Budget {
            budget: 0,
            needed: 1,
        });
    }
    Ok(budget as usize)
}

/// Largest feature width whose total parameter count fits the budget, found
/// by integer bisection (the count is strictly increasing in the width).
pub fn solve_width(max_param_count: usize, skeleton: &ModelConfig) -> Result<usize> {
    let count = |f: usize| skeleton.clone().with_width(f).param_count();
    if count(1) > max_param_count {
        return Err(MoecError::Budget {
            budget: max_param_count,
            needed: count(1),
        });
    }
    let mut lo = 1usize; // feasible
    let mut hi = 2usize;
    while count(hi) <= max_param_count {
        lo = hi;
        hi *= 2;
        if hi > 1 << 24 {
            break;
        }
    }
    // invariant: count(lo) ≤ budget < count(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) <= max_param_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// One expert: hidden sine layers plus a final linear feature map.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub hidden: Vec<LinearLayer>,
    pub out: LinearLayer,
}

/// Shared decoder: sine layers plus the final feature → intensity linear.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub hidden: Vec<LinearLayer>,
    pub out: LinearLayer,
}

/// All trainable weights θ.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: Vec<LinearLayer>,
    pub router: RouterParams,
    pub experts: Vec<ExpertParams>,
    pub decoder: DecoderParams,
}

fn uniform_layer(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, limit: f64) -> LinearLayer {
    LinearLayer {
        w: Matrix::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-limit..limit)),
        b: vec![0.0; out_dim],
    }
}

impl ModelParams {
    /// Sinusoidal-network initialization, deterministic for a given seed.
    ///
    /// First layer U(−1/in, 1/in); every other sine layer and the final
    /// linears U(−√(6/in)/ω, √(6/in)/ω); router pre-layers (ReLU) use
    /// He-uniform U(−√(6/in), √(6/in)); the gate layer reuses the small sine
    /// bound so initial routing starts near-uniform. Biases are zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.feature_width;
        let n = config.n_experts;
        let omega = config.omega;
        let mut rng = crate::trainer::derive_rng(seed, crate::trainer::STREAM_INIT);
        let sine_limit = |in_dim: usize| (6.0 / in_dim as f64).sqrt() / omega;

        let mut encoder = Vec::with_capacity(config.encoder_depth);
        encoder.push(uniform_layer(&mut rng, 3, f, 1.0 / 3.0));
        for _ in 1..config.encoder_depth {
            encoder.push(uniform_layer(&mut rng, f, f, sine_limit(f)));
        }

        let he = (6.0 / f as f64).sqrt();
        let pre0 = uniform_layer(&mut rng, f, f, he);
        let pre1 = uniform_layer(&mut rng, f, f, he);
        let gate = uniform_layer(&mut rng, f, n, sine_limit(f));
        let router = RouterParams::new([pre0, pre1], gate);

        let mut experts = Vec::with_capacity(n);
        for _ in 0..n {
            let hidden = (0..config.expert_depth)
                .map(|_| uniform_layer(&mut rng, f, f, sine_limit(f)))
                .collect();
            let out = uniform_layer(&mut rng, f, f, sine_limit(f));
            experts.push(ExpertParams { hidden, out });
        }

        let dec_hidden = (0..config.decoder_depth)
            .map(|_| uniform_layer(&mut rng, f, f, sine_limit(f)))
            .collect();
        let dec_out = uniform_layer(&mut rng, f, 1, sine_limit(f));
        let decoder = DecoderParams {
            hidden: dec_hidden,
            out: dec_out,
        };

        Ok(ModelParams {
            encoder,
            router,
            experts,
            decoder,
        })
    }

    /// Allocate zeroed parameters with the config's shapes (used when
    /// decoding artifacts).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let f = config.feature_width;
        let n = config.n_experts;
        let encoder: Vec<LinearLayer> = (0..config.encoder_depth)
            .map(|i| LinearLayer::zeros(if i == 0 { 3 } else { f }, f))
            .collect();
        let router = RouterParams::new(
            [LinearLayer::zeros(f, f), LinearLayer::zeros(f, f)],
            LinearLayer::zeros(f, n),
        );
        let experts = (0..n)
            .map(|_| ExpertParams {
                hidden: (0..config.expert_depth).map(|_| LinearLayer::zeros(f, f)).collect(),
                out: LinearLayer::zeros(f, f),
            })
            .collect();
        let decoder = DecoderParams {
            hidden: (0..config.decoder_depth).map(|_| LinearLayer::zeros(f, f)).collect(),
            out: LinearLayer::zeros(f, 1),
        };
        Ok(ModelParams {
            encoder,
            router,
            experts,
            decoder,
        })
    }

    /// Layers in canonical order with stable names.
    pub fn layers(&self) -> Vec<(String, &LinearLayer)> {
        let mut v = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            v.push((format!("encoder.{i}"), l));
        }
        v.push(("router.pre0".to_string(), &self.router.pre[0]));
        v.push(("router.pre1".to_string(), &self.router.pre[1]));
        v.push(("router.gate".to_string(), &self.router.gate));
        for (e, ex) in self.experts.iter().enumerate() {
            for (i, l) in ex.hidden.iter().enumerate() {
                v.push((format!("expert{e}.h{i}"), l));
            }
            v.push((format!("expert{e}.out"), &ex.out));
        }
        for (i, l) in self.decoder.hidden.iter().enumerate() {
            v.push((format!("decoder.h{i}"), l));
        }
        v.push(("decoder.out".to_string(), &self.decoder.out));
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut v: Vec<&mut LinearLayer> = Vec::new();
        for l in &mut self.encoder {
            v.push(l);
        }
        let [p0, p1] = &mut self.router.pre;
        v.push(p0);
        v.push(p1);
        v.push(&mut self.router.gate);
        for ex in &mut self.experts {
            for l in &mut ex.hidden {
                v.push(l);
            }
            v.push(&mut ex.out);
        }
        for l in &mut self.decoder.hidden {
            v.push(l);
        }
        v.push(&mut self.decoder.out);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    /// Flatten all parameters in canonical order (per layer: weights
    /// row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, l) in self.layers() {
            flat.extend_from_slice(l.w.as_slice());
            flat.extend_from_slice(&l.b);
        }
        flat
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(MoecError::shape(
                "unflatten",
                format!("expected {} params, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let wlen = l.w.rows() * l.w.cols();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = l.b.len();
            l.b.copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }

    /// Flat-index range holding the router parameters (for the optimizer's
    /// freeze skip).
    pub fn router_flat_range(&self) -> (usize, usize) {
        let mut off = 0;
        for l in &self.encoder {
            off += l.param_count();
        }
        let start = off;
        let len = self.router.pre[0].param_count()
            + self.router.pre[1].param_count()
            + self.router.gate.param_count();
        (start, start + len)
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|(_, l)| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Routing facts exposed by the tape-free inference pass.
pub struct RoutingInfo {
    pub probs: Matrix,
    pub plan: DispatchPlan,
}

fn sine_chain_apply(mut x: Matrix, layers: &[LinearLayer], omega: f64) -> Result<Matrix> {
    for layer in layers {
        let h = crate::numeric::linear_apply(&x, &layer.w, &layer.b)?;
        x = crate::numeric::sine_apply(&h, omega);
    }
    Ok(x)
}

/// Dense top-k inference without tapes: the pure deterministic function of
/// (coords, params) used by reconstruction.
pub fn evaluate(
    coords: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(Vec<f64>, RoutingInfo)> {
    if coords.cols() != 3 {
        return Err(MoecError::shape(
            "evaluate",
            format!("coords must be B×3, got B×{}", coords.cols()),
        ));
    }
    let batch = coords.rows();
    let features = sine_chain_apply(coords.clone(), &params.encoder, config.omega)?;
    let (probs, _) = gate_forward(&features, &params.router)?;
    let sel = top_k_select(&probs, config.top_k)?;
    let plan = build_dispatch_dense(&sel, batch, config.n_experts)?;
    let inputs = dispatch_features(&plan, &features);
    let mut expert_outputs = Vec::with_capacity(config.n_experts);
    for (ex, input) in params.experts.iter().zip(inputs) {
        let h = sine_chain_apply(input, &ex.hidden, config.omega)?;
        expert_outputs.push(crate::numeric::linear_apply(&h, &ex.out.w, &ex.out.b)?);
    }
    let combined = combine(&expert_outputs, &plan)?;
    let dec_h = sine_chain_apply(combined, &params.decoder.hidden, config.omega)?;
    let pred_mat = crate::numeric::linear_apply(&dec_h, &params.decoder.out.w, &params.decoder.out.b)?;
    let pred = (0..batch)
        .map(|i| config.output_gain * pred_mat.get(i, 0))
        .collect();
    Ok((pred, RoutingInfo { probs, plan }))
}

struct SineStack {
    tapes: Vec<(LinearTape, SineTape)>,
}

fn sine_chain_forward(
    mut x: Matrix,
    layers: &[LinearLayer],
    omega: f64,
) -> Result<(Matrix, SineStack)> {
    let mut tapes = Vec::with_capacity(layers.len());
    for layer in layers {
        let (h, lt) = layer.forward(&x)?;
        let (a, st) = sine_forward(&h, omega)?;
        tapes.push((lt, st));
        x = a;
    }
    Ok((x, SineStack { tapes }))
}

fn sine_chain_backward(
    mut dy: Matrix,
    layers: &[LinearLayer],
    stack: &SineStack,
    omega: f64,
) -> Result<(Matrix, Vec<LinearGrads>)> {
    let mut grads = vec![None; layers.len()];
    for i in (0..layers.len()).rev() {
        let (lt, st) = &stack.tapes[i];
        let dh = sine_backward(st, omega, &dy)?;
        let (dx, g) = layers[i].backward(lt, &dh)?;
        grads[i] = Some(g);
        dy = dx;
    }
    Ok((dy, grads.into_iter().map(|g| g.unwrap()).collect()))
}

struct ExpertTape {
    stack: SineStack,
    out: LinearTape,
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct ForwardTaps {
    encoder: SineStack,
    gate: GateTape,
    pub probs: Matrix,
    pub sel: Selection,
    pub plan: DispatchPlan,
    expert_tapes: Vec<ExpertTape>,
    expert_outputs: Vec<Matrix>,
    decoder_stack: SineStack,
    decoder_out: LinearTape,
}

impl ForwardTaps {
    /// Balancing loss of this batch and its gradient w.r.t. the gate
    /// probabilities.
    pub fn balance(&self) -> Result<(f64, Matrix)> {
        balancing_loss(&self.plan, &self.probs)
    }
}

/// Full forward pass per the gated-mixture composition
/// `pred = decoder(Σ_i gate_i · expert_i(encoder(x)))`.
///
/// `training = true` applies expert capacity (with deterministic drop and
/// zero-pad); `training = false` evaluates the dense top-k with no capacity
/// limit, making inference a pure function of (coords, params).
pub fn forward(
    coords: &Matrix,
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
) -> Result<(Vec<f64>, ForwardTaps)> {
    if coords.cols() != 3 {
        return Err(MoecError::shape(
            "forward",
            format!("coords must be B×3, got B×{}", coords.cols()),
        ));
    }
    let batch = coords.rows();
    let (features, encoder_stack) = sine_chain_forward(coords.clone(), &params.encoder, config.omega)?;
    let (probs, gate_tape) = gate_forward(&features, &params.router)?;
    let sel = top_k_select(&probs, config.top_k)?;
    let plan = if training {
        build_dispatch(&sel, batch, config.n_experts, config.capacity_factor)?
    } else {
        build_dispatch_dense(&sel, batch, config.n_experts)?
    };
    let inputs = dispatch_features(&plan, &features);
    let mut expert_outputs = Vec::with_capacity(config.n_experts);
    let mut expert_tapes = Vec::with_capacity(config.n_experts);
    for (ex, input) in params.experts.iter().zip(inputs) {
        let (h, stack) = sine_chain_forward(input, &ex.hidden, config.omega)?;
        let (out, out_tape) = ex.out.forward(&h)?;
        expert_outputs.push(out);
        expert_tapes.push(ExpertTape {
            stack,
            out: out_tape,
        });
    }
    let combined = combine(&expert_outputs, &plan)?;
    let (dec_h, decoder_stack) = sine_chain_forward(combined, &params.decoder.hidden, config.omega)?;
    let (pred_mat, decoder_out) = params.decoder.out.forward(&dec_h)?;
    let pred: Vec<f64> = (0..batch)
        .map(|i| config.output_gain * pred_mat.get(i, 0))
        .collect();
    Ok((
        pred,
        ForwardTaps {
            encoder: encoder_stack,
            gate: gate_tape,
            probs,
            sel,
            plan,
            expert_tapes,
            expert_outputs,
            decoder_stack,
            decoder_out,
        },
    ))
}

/// Gradients for every section of [`ModelParams`], flattened in canonical
/// order by [`ModelGrads::flatten`].
pub struct ModelGrads {
    pub encoder: Vec<LinearGrads>,
    pub router: RouterGrads,
    pub experts: Vec<(Vec<LinearGrads>, LinearGrads)>,
    pub decoder: (Vec<LinearGrads>, LinearGrads),
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        let mut push = |g: &LinearGrads| {
            flat.extend_from_slice(g.dw.as_slice());
            flat.extend_from_slice(&g.db);
        };
        for g in &self.encoder {
            push(g);
        }
        push(&self.router.pre[0]);
        push(&self.router.pre[1]);
        push(&self.router.gate);
        for (hidden, out) in &self.experts {
            for g in hidden {
                push(g);
            }
            push(out);
        }
        for g in &self.decoder.0 {
            push(g);
        }
        push(&self.decoder.1);
        flat
    }
}

fn zero_grads_like(layer: &LinearLayer) -> LinearGrads {
    LinearGrads {
        dw: Matrix::zeros(layer.w.rows(), layer.w.cols()),
        db: vec![0.0; layer.b.len()],
    }
}

/// Backward pass over a training-mode tape.
///
/// `extra_dprobs` lets the caller add a gradient flowing directly into the
/// gate probabilities (the λ·∂L_b/∂G term of the total loss). A frozen router
/// reports identically-zero gradients for its own parameters while still
/// passing gradient through to the encoder.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    taps: &ForwardTaps,
    dpred: &[f64],
    extra_dprobs: Option<&Matrix>,
) -> Result<ModelGrads> {
    let batch = taps.plan.batch;
    if dpred.len() != batch {
        return Err(MoecError::shape(
            "backward",
            format!("dpred len {} vs batch {batch}", dpred.len()),
        ));
    }
    let mut dy = Matrix::zeros(batch, 1);
    for i in 0..batch {
        dy.set(i, 0, config.output_gain * dpred[i]);
    }
    let (d_dec_h, g_dec_out) = params.decoder.out.backward(&taps.decoder_out, &dy)?;
    let (d_comb, g_dec_hidden) = sine_chain_backward(
        d_dec_h,
        &params.decoder.hidden,
        &taps.decoder_stack,
        config.omega,
    )?;

    let (d_expert_outs, d_gates) = combine_backward(&d_comb, &taps.expert_outputs, &taps.plan)?;

    let mut d_features = Matrix::zeros(batch, config.feature_width);
    let mut expert_grads = Vec::with_capacity(config.n_experts);
    for (e, ex) in params.experts.iter().enumerate() {
        let tape = &taps.expert_tapes[e];
        let (d_hidden_out, g_out) = ex.out.backward(&tape.out, &d_expert_outs[e])?;
        let (d_input, g_hidden) =
            sine_chain_backward(d_hidden_out, &ex.hidden, &tape.stack, config.omega)?;
        for (row, slot) in taps.plan.expert_slots[e].iter().enumerate() {
            if let Some(point) = slot {
                let src = d_input.row(row);
                let dst = d_features.row_mut(*point);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        expert_grads.push((g_hidden, g_out));
    }

    let mut dprobs = selection_backward(&taps.sel, &d_gates, config.n_experts);
    if let Some(extra) = extra_dprobs {
        dprobs.add_assign(extra)?;
    }
    let (d_feat_router, router_grads) = gate_backward(&params.router, &taps.gate, &dprobs)?;
    d_features.add_assign(&d_feat_router)?;

    let router_grads = if params.router.is_frozen() {
        RouterGrads {
            pre: [
                zero_grads_like(&params.router.pre[0]),
                zero_grads_like(&params.router.pre[1]),
            ],
            gate: zero_grads_like(&params.router.gate),
        }
    } else {
        router_grads
    };

    let (_, encoder_grads) =
        sine_chain_backward(d_features, &params.encoder, &taps.encoder, config.omega)?;

    Ok(ModelGrads {
        encoder: encoder_grads,
        router: router_grads,
        experts: expert_grads,
        decoder: (g_dec_hidden, g_dec_out),
    })
}
