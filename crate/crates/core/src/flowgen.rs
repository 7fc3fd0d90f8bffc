//! Flow-matching generator: noise path, token-wise velocity network,
//! trainer, and Euler sampler.
//!
//! The noise path is linear, l(t) = (1-t) l0 + t eps, and the network
//! regresses the constant velocity eps - l0. Sampling integrates the
//! learned field backwards from t = 1 with uniform Euler steps. The same
//! network class serves all three generators (coarse structure, fine
//! structure, fine latent); they differ only in token channel count and
//! checkpoint stage tag.
//!
//! Numerics policy: parameters and optimizer moments rest in f32 (the
//! checkpoint width); every forward, gradient, and update runs in f64 and
//! rounds back once per step. That keeps reload-and-continue bit-exact
//! while leaving the loss smooth enough for finite-difference checks.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeds;
use crate::voxcore::{DenseMask, DenseVolume, SparseGrid, VoxError, VoxelCoord};

/// Structure-stage patch edge; tokens are PATCH^3 occupancy blocks.
pub const PATCH: u32 = 4;
/// Structure token channel count (PATCH^3).
pub const STRUCT_TOKEN_CHANNELS: usize = 64;
/// Default Euler sampling steps.
pub const DEFAULT_SAMPLE_STEPS: u32 = 50;
/// Condition vector length.
pub const CONDITION_LEN: usize = 16;
/// Per-token position encoding width: normalized coords + one sin/cos
/// octave per axis.
pub const POS_ENC_DIM: usize = 9;
/// Time feature width: [t, 1-t, sin(pi t), cos(pi t)].
pub const TIME_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("token set must be non-empty")]
    EmptyTokenSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("bad dimensions: {0}")]
    BadDims(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("voxel error: {0}")]
    Vox(#[from] VoxError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// L tokens of C channels plus a position encoding per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    channels: usize,
    values: Vec<f64>,
    positions: Vec<[f64; POS_ENC_DIM]>,
}

/// Encoding of an integer cell position within a known grid extent.
pub fn position_encoding(p: [u32; 3], dims: [u32; 3]) -> [f64; POS_ENC_DIM] {
    let mut enc = [0.0; POS_ENC_DIM];
    for a in 0..3 {
        let x = (p[a] as f64 + 0.5) / dims[a].max(1) as f64;
        enc[a] = x;
        enc[3 + 2 * a] = (std::f64::consts::TAU * x).sin();
        enc[4 + 2 * a] = (std::f64::consts::TAU * x).cos();
    }
    enc
}

impl TokenSet {
    pub fn new(
        channels: usize,
        values: Vec<f64>,
        positions: Vec<[f64; POS_ENC_DIM]>,
    ) -> Result<Self, FlowError> {
        if channels == 0 || positions.is_empty() {
            return Err(FlowError::EmptyTokenSet);
        }
        if values.len() != channels * positions.len() {
            return Err(FlowError::ShapeMismatch(format!(
                "{} values for {} tokens x {} channels",
                values.len(),
                positions.len(),
                channels
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("token values".into()));
        }
        Ok(TokenSet {
            channels,
            values,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor enforces L >= 1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn position(&self, i: usize) -> &[f64; POS_ENC_DIM] {
        &self.positions[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn same_shape(&self, other: &TokenSet) -> Result<(), FlowError> {
        if self.channels != other.channels || self.len() != other.len() {
            return Err(FlowError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.len(),
                self.channels,
                other.len(),
                other.channels
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> TokenSet {
        TokenSet {
            channels: self.channels,
            values: vec![0.0; self.values.len()],
            positions: self.positions.clone(),
        }
    }

    /// Same layout, entries drawn standard normal from the rng.
    pub fn gaussian_like(&self, rng: &mut ChaCha8Rng) -> TokenSet {
        TokenSet {
            channels: self.channels,
            values: self
                .values
                .iter()
                .map(|_| seeds::standard_normal(rng))
                .collect(),
            positions: self.positions.clone(),
        }
    }

    /// Single-channel view of per-token scalars (used for token masks).
    pub fn scalar(channel_values: Vec<f64>, positions: Vec<[f64; POS_ENC_DIM]>) -> Result<Self, FlowError> {
        TokenSet::new(1, channel_values, positions)
    }
}

/// (1 - t) l0 + t eps, elementwise. Endpoints are exact.
pub fn add_noise(l0: &TokenSet, t: f64, eps: &TokenSet) -> Result<TokenSet, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTime(t));
    }
    l0.same_shape(eps)?;
    if t == 0.0 {
        return Ok(l0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let values = l0
        .values
        .iter()
        .zip(&eps.values)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect();
    Ok(TokenSet {
        channels: l0.channels,
        values,
        positions: l0.positions.clone(),
    })
}

/// The regression target eps - l0.
pub fn flow_target(l0: &TokenSet, eps: &TokenSet) -> Result<TokenSet, FlowError> {
    l0.same_shape(eps)?;
    let values = eps
        .values
        .iter()
        .zip(&l0.values)
        .map(|(e, a)| e - a)
        .collect();
    Ok(TokenSet {
        channels: l0.channels,
        values,
        positions: l0.positions.clone(),
    })
}

/// Run-constant conditioning vector, stand-in for an encoded scene prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn from_seed(seed: u64, len: usize) -> Self {
        let mut rng = seeds::rng_for(seed, seeds::tag::CONDITION, 0);
        ConditionVector((0..len).map(|_| seeds::standard_normal(&mut rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    CoarseStructure,
    FineStructure,
    FineLatent,
}

impl StageTag {
    pub fn tag(self) -> u8 {
        match self {
            StageTag::CoarseStructure => 1,
            StageTag::FineStructure => 2,
            StageTag::FineLatent => 3,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self, FlowError> {
        match t {
            1 => Ok(StageTag::CoarseStructure),
            2 => Ok(StageTag::FineStructure),
            3 => Ok(StageTag::FineLatent),
            _ => Err(FlowError::Format(format!("unknown stage tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::CoarseStructure => "coarse-structure",
            StageTag::FineStructure => "fine-structure",
            StageTag::FineLatent => "fine-latent",
        }
    }
}

/// Token-wise two-layer tanh perceptron. Input per token is the
/// conditioning bundle [noisy | mask | known] (2C + 1 channels), the
/// token's position encoding, the mean bundle over the token set (global
/// context), time features, and the condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub stage: StageTag,
    pub seed: u64,
    c_bundle: usize,
    c_out: usize,
    hidden: usize,
    cond_len: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

impl GeneratorModel {
    /// `c_token` is the token channel count; the bundle adds mask and
    /// known channels for an input of 2 c_token + 1 per token.
    pub fn new(
        stage: StageTag,
        c_token: usize,
        hidden: usize,
        cond_len: usize,
        seed: u64,
    ) -> Result<Self, FlowError> {
        if c_token == 0 || hidden == 0 {
            return Err(FlowError::BadDims("zero width".into()));
        }
        let c_bundle = 2 * c_token + 1;
        let c_in_total = Self::input_width(c_bundle, cond_len);
        let mut rng = seeds::rng_for(seed, seeds::tag::MODEL_INIT, stage.tag() as u64);
        let mut xavier = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f32> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
        };
        let w1 = xavier(c_in_total, hidden, c_in_total * hidden);
        let b1 = vec![0.0; hidden];
        let w2 = xavier(hidden, c_token, hidden * c_token);
        let b2 = vec![0.0; c_token];
        Ok(GeneratorModel {
            stage,
            seed,
            c_bundle,
            c_out: c_token,
            hidden,
            cond_len,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn input_width(c_bundle: usize, cond_len: usize) -> usize {
        2 * c_bundle + POS_ENC_DIM + TIME_DIM + cond_len
    }

    pub fn token_channels(&self) -> usize {
        self.c_out
    }

    pub fn bundle_channels(&self) -> usize {
        self.c_bundle
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn condition_len(&self) -> usize {
        self.cond_len
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat parameter read in the [w1 | b1 | w2 | b2] layout used by the
    /// probe API, for external finite-difference checks.
    pub fn parameter(&self, i: usize) -> f64 {
        self.params64()[i]
    }

    fn params64(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .map(|&v| v as f64)
            .collect()
    }

    fn store_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for v in dst.iter_mut() {
                *v = flat[at] as f32;
                at += 1;
            }
        }
    }
}

/// Dimensions needed to interpret a flat parameter vector.
#[derive(Clone, Copy)]
struct Dims {
    c_in: usize,
    hidden: usize,
    c_out: usize,
}

impl Dims {
    fn of(model: &GeneratorModel) -> Dims {
        Dims {
            c_in: GeneratorModel::input_width(model.c_bundle, model.cond_len),
            hidden: model.hidden,
            c_out: model.c_out,
        }
    }

    fn w1(&self) -> usize {
        0
    }

    fn b1(&self) -> usize {
        self.c_in * self.hidden
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.hidden * self.c_out
    }

    fn total(&self) -> usize {
        self.b2() + self.c_out
    }
}

/// Forward pass for one token input; returns (hidden activations, output).
fn forward_token(p: &[f64], d: Dims, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0f64; d.hidden];
    for r in 0..d.hidden {
        let mut a = p[d.b1() + r];
        let row = &p[d.w1() + r * d.c_in..d.w1() + (r + 1) * d.c_in];
        for (w, xv) in row.iter().zip(x) {
            a += w * xv;
        }
        h[r] = a.tanh();
    }
    let mut y = vec![0.0f64; d.c_out];
    for r in 0..d.c_out {
        let mut a = p[d.b2() + r];
        let row = &p[d.w2() + r * d.hidden..d.w2() + (r + 1) * d.hidden];
        for (w, hv) in row.iter().zip(&h) {
            a += w * hv;
        }
        y[r] = a;
    }
    (h, y)
}

/// Assemble the per-token model inputs for one (state, mask, known) triple.
/// `mask` has one channel; `known` shares the state's channel count.
fn model_inputs(
    model: &GeneratorModel,
    state: &TokenSet,
    mask: &TokenSet,
    known: &TokenSet,
    t: f64,
    cond: &ConditionVector,
) -> Result<Vec<Vec<f64>>, FlowError> {
    state.same_shape(known)?;
    if mask.channels() != 1 || mask.len() != state.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "mask {}x{} for state {}x{}",
            mask.len(),
            mask.channels(),
            state.len(),
            state.channels()
        )));
    }
    if state.channels() != model.c_out {
        return Err(FlowError::ShapeMismatch(format!(
            "state channels {} vs model {}",
            state.channels(),
            model.c_out
        )));
    }
    if cond.len() != model.cond_len {
        return Err(FlowError::ShapeMismatch(format!(
            "condition length {} vs model {}",
            cond.len(),
            model.cond_len
        )));
    }
    let l = state.len();
    let cb = model.c_bundle;
    let mut bundles = vec![0.0f64; l * cb];
    for i in 0..l {
        let row = &mut bundles[i * cb..(i + 1) * cb];
        row[..model.c_out].copy_from_slice(state.row(i));
        row[model.c_out] = mask.row(i)[0];
        row[model.c_out + 1..].copy_from_slice(known.row(i));
    }
    let mut pooled = vec![0.0f64; cb];
    for i in 0..l {
        for c in 0..cb {
            pooled[c] += bundles[i * cb + c];
        }
    }
    for v in pooled.iter_mut() {
        *v /= l as f64;
    }
    let time = [
        t,
        1.0 - t,
        (std::f64::consts::PI * t).sin(),
        (std::f64::consts::PI * t).cos(),
    ];
    let mut inputs = Vec::with_capacity(l);
    for i in 0..l {
        let mut x = Vec::with_capacity(GeneratorModel::input_width(cb, model.cond_len));
        x.extend_from_slice(&bundles[i * cb..(i + 1) * cb]);
        x.extend_from_slice(state.position(i));
        x.extend_from_slice(&pooled);
        x.extend_from_slice(&time);
        x.extend_from_slice(&cond.0);
        inputs.push(x);
    }
    Ok(inputs)
}

/// Anything the Euler sampler can integrate. Implemented by the model
/// bound to its conditioning, and by analytic oracles in tests.
pub trait VelocityField {
    fn velocity(&self, state: &TokenSet, t: f64) -> Result<TokenSet, FlowError>;
}

/// A generator model bound to fixed mask, known content, and condition.
pub struct ConditionedField<'a> {
    pub model: &'a GeneratorModel,
    pub mask: &'a TokenSet,
    pub known: &'a TokenSet,
    pub condition: &'a ConditionVector,
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&self, state: &TokenSet, t: f64) -> Result<TokenSet, FlowError> {
        let inputs = model_inputs(self.model, state, self.mask, self.known, t, self.condition)?;
        let p = self.model.params64();
        let d = Dims::of(self.model);
        let mut values = Vec::with_capacity(state.len() * state.channels());
        for x in &inputs {
            let (_, y) = forward_token(&p, d, x);
            values.extend_from_slice(&y);
        }
        TokenSet::new(state.channels(), values, state.positions.clone())
    }
}

/// Integrate from `start` at time `t_start` down to 0 with uniform Euler
/// steps: l(t - dt) = l(t) - dt v(l(t), t).
pub fn sample_from(
    field: &dyn VelocityField,
    start: TokenSet,
    t_start: f64,
    steps: u32,
) -> Result<TokenSet, FlowError> {
    if steps == 0 {
        return Err(FlowError::BadDims("steps must be >= 1".into()));
    }
    if !(t_start > 0.0 && t_start <= 1.0) {
        return Err(FlowError::BadTime(t_start));
    }
    let dt = t_start / steps as f64;
    let mut state = start;
    for k in 0..steps {
        let t = t_start - k as f64 * dt;
        let v = field.velocity(&state, t)?;
        state.same_shape(&v)?;
        for (s, vi) in state.values.iter_mut().zip(&v.values) {
            *s -= dt * vi;
        }
        if state.values.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(format!("sampler state at step {k}")));
        }
    }
    Ok(state)
}

/// Full backward integration from seeded standard-normal noise at t = 1.
/// `template` supplies the token layout; its values are ignored.
pub fn sample(
    field: &dyn VelocityField,
    template: &TokenSet,
    steps: u32,
    seed: u64,
) -> Result<TokenSet, FlowError> {
    let mut rng = seeds::rng(seed);
    let eps = template.gaussian_like(&mut rng);
    sample_from(field, eps, 1.0, steps)
}

/// One training example: clean tokens and their 1-channel token mask
/// (1 = to be generated, 0 = known context).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tokens: TokenSet,
    pub mask: TokenSet,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Steps to run in this call (the optimizer's global step keeps
    /// counting across calls).
    pub steps: u32,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// AdamW first/second moments, f32 at rest like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    pub fn new(model: &GeneratorModel) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; model.parameter_count()],
            v: vec![0.0; model.parameter_count()],
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Draw one training batch. All randomness comes from a stream keyed by
/// the optimizer's global step, so interrupted and uninterrupted runs see
/// identical batches.
struct Batch {
    /// Per sample: assembled per-token inputs and per-token targets.
    inputs: Vec<Vec<Vec<f64>>>,
    targets: Vec<Vec<f64>>, // flattened L*C per sample
    entries: usize,
}

fn draw_batch(
    model: &GeneratorModel,
    data: &[TrainSample],
    cond: &ConditionVector,
    cfg: &TrainConfig,
    global_step: u64,
) -> Result<Batch, FlowError> {
    let mut rng = seeds::rng_for(cfg.seed, seeds::tag::TRAIN_STEP, global_step);
    let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..data.len())).collect();
    let mut inputs = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    let mut entries = 0usize;
    for &idx in &indices {
        let sample = &data[idx];
        let t: f64 = rng.gen_range(0.0..1.0);
        let eps = sample.tokens.gaussian_like(&mut rng);
        let noisy = add_noise(&sample.tokens, t, &eps)?;
        let known = known_tokens(&sample.tokens, &sample.mask)?;
        let target = flow_target(&sample.tokens, &eps)?;
        inputs.push(model_inputs(model, &noisy, &sample.mask, &known, t, cond)?);
        entries += target.values.len();
        targets.push(target.values);
    }
    Ok(Batch {
        inputs,
        targets,
        entries,
    })
}

/// l0 masked down to its known part: l0 (1 - m) per token.
pub fn known_tokens(l0: &TokenSet, mask: &TokenSet) -> Result<TokenSet, FlowError> {
    if mask.channels() != 1 || mask.len() != l0.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "mask {}x{} for tokens {}x{}",
            mask.len(),
            mask.channels(),
            l0.len(),
            l0.channels()
        )));
    }
    let mut values = Vec::with_capacity(l0.values.len());
    for i in 0..l0.len() {
        let keep = 1.0 - mask.row(i)[0];
        values.extend(l0.row(i).iter().map(|v| v * keep));
    }
    Ok(TokenSet {
        channels: l0.channels,
        values,
        positions: l0.positions.clone(),
    })
}

/// Mean squared error and its parameter gradient over one batch.
fn batch_loss_grad(p: &[f64], d: Dims, batch: &Batch, want_grad: bool) -> (f64, Vec<f64>) {
    let mut loss = 0.0f64;
    let mut grad = if want_grad { vec![0.0f64; d.total()] } else { Vec::new() };
    let scale = 2.0 / batch.entries as f64;
    for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
        for (i, x) in inputs.iter().enumerate() {
            let (h, y) = forward_token(p, d, x);
            let target = &targets[i * d.c_out..(i + 1) * d.c_out];
            let mut dy = vec![0.0f64; d.c_out];
            for (r, (yv, tv)) in y.iter().zip(target).enumerate() {
                let e = yv - tv;
                loss += e * e;
                dy[r] = e * scale;
            }
            if !want_grad {
                continue;
            }
            let mut dh = vec![0.0f64; d.hidden];
            for r in 0..d.c_out {
                grad[d.b2() + r] += dy[r];
                let wrow = d.w2() + r * d.hidden;
                for c in 0..d.hidden {
                    grad[wrow + c] += dy[r] * h[c];
                    dh[c] += p[wrow + c] * dy[r];
                }
            }
            for r in 0..d.hidden {
                let da = dh[r] * (1.0 - h[r] * h[r]);
                if da == 0.0 {
                    continue;
                }
                grad[d.b1() + r] += da;
                let wrow = d.w1() + r * d.c_in;
                for (g, xv) in grad[wrow..wrow + d.c_in].iter_mut().zip(x) {
                    *g += da * xv;
                }
            }
        }
    }
    (loss / batch.entries as f64, grad)
}

/// Run `cfg.steps` AdamW steps. Returns the per-step loss curve; training
/// aborts with `Diverged` the moment the loss stops being finite.
pub fn train(
    model: &mut GeneratorModel,
    opt: &mut AdamState,
    data: &[TrainSample],
    cond: &ConditionVector,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, FlowError> {
    if data.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    if opt.m.len() != model.parameter_count() {
        return Err(FlowError::BadDims("optimizer state size mismatch".into()));
    }
    let d = Dims::of(model);
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = draw_batch(model, data, cond, cfg, opt.step)?;
        let p = model.params64();
        let (loss, grad) = batch_loss_grad(&p, d, &batch, true);
        if !loss.is_finite() {
            return Err(FlowError::Diverged {
                step: opt.step,
                loss,
            });
        }
        curve.push(loss);
        let t = (opt.step + 1) as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let mut new_p = p;
        for i in 0..grad.len() {
            let g = grad[i];
            let m = ADAM_BETA1 * opt.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * opt.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            opt.m[i] = m as f32;
            opt.v[i] = v as f32;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            new_p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * new_p[i]);
        }
        model.store_params(&new_p);
        opt.step += 1;
    }
    Ok(curve)
}

/// Deterministically assembled batch for gradient diagnostics: fixed t,
/// seeded noise, no optimizer involvement.
pub struct ProbeBatch {
    batch: Batch,
}

pub fn assemble_probe(
    model: &GeneratorModel,
    sample: &TrainSample,
    cond: &ConditionVector,
    t: f64,
    seed: u64,
) -> Result<ProbeBatch, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTime(t));
    }
    let mut rng = seeds::rng_for(seed, seeds::tag::TRAIN_STEP, 0);
    let eps = sample.tokens.gaussian_like(&mut rng);
    let noisy = add_noise(&sample.tokens, t, &eps)?;
    let known = known_tokens(&sample.tokens, &sample.mask)?;
    let target = flow_target(&sample.tokens, &eps)?;
    let inputs = model_inputs(model, &noisy, &sample.mask, &known, t, cond)?;
    let entries = target.values.len();
    Ok(ProbeBatch {
        batch: Batch {
            inputs: vec![inputs],
            targets: vec![target.values],
            entries,
        },
    })
}

/// Loss with selected flat parameters overridden in f64 (bypassing f32
/// storage so finite differences stay clean).
pub fn probe_loss(
    model: &GeneratorModel,
    probe: &ProbeBatch,
    overrides: &[(usize, f64)],
) -> f64 {
    let mut p = model.params64();
    for &(i, v) in overrides {
        p[i] = v;
    }
    batch_loss_grad(&p, Dims::of(model), &probe.batch, false).0
}

/// Loss and the full analytic gradient, flat layout [w1 | b1 | w2 | b2].
pub fn probe_gradient(model: &GeneratorModel, probe: &ProbeBatch) -> (f64, Vec<f64>) {
    batch_loss_grad(&model.params64(), Dims::of(model), &probe.batch, true)
}

const CKPT_MAGIC: &[u8; 4] = b"WGCK";

/// Checkpoint: header (stage, bundle channels, output channels, hidden,
/// condition length, seed) + f32 parameter blobs + optimizer state.
pub fn save_checkpoint(
    model: &GeneratorModel,
    opt: &AdamState,
    path: &Path,
) -> Result<(), FlowError> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(1u8);
    out.push(model.stage.tag());
    out.extend_from_slice(&(model.c_bundle as u32).to_le_bytes());
    out.extend_from_slice(&(model.c_out as u32).to_le_bytes());
    out.extend_from_slice(&(model.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(model.cond_len as u32).to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    for blob in [&model.w1, &model.b1, &model.w2, &model.b2, &opt.m, &opt.v] {
        for v in blob.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&opt.step.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GeneratorModel, AdamState), FlowError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], FlowError> {
        if *at + n > buf.len() {
            return Err(FlowError::Format("truncated checkpoint".into()));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CKPT_MAGIC {
        return Err(FlowError::Format("bad magic".into()));
    }
    if take(&mut at, 1)?[0] != 1 {
        return Err(FlowError::Format("unknown version".into()));
    }
    let stage = StageTag::from_tag(take(&mut at, 1)?[0])?;
    let c_bundle = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let c_out = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let cond_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    if c_bundle != 2 * c_out + 1 || c_out == 0 || hidden == 0 {
        return Err(FlowError::Format("inconsistent dimensions".into()));
    }
    let c_in = GeneratorModel::input_width(c_bundle, cond_len);
    let floats = |at: &mut usize, n: usize| -> Result<Vec<f32>, FlowError> {
        if *at + 4 * n > buf.len() {
            return Err(FlowError::Format("truncated checkpoint".into()));
        }
        let out = buf[*at..*at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *at += 4 * n;
        Ok(out)
    };
    let w1 = floats(&mut at, c_in * hidden)?;
    let b1 = floats(&mut at, hidden)?;
    let w2 = floats(&mut at, hidden * c_out)?;
    let b2 = floats(&mut at, c_out)?;
    let pcount = w1.len() + b1.len() + w2.len() + b2.len();
    let m = floats(&mut at, pcount)?;
    let v = floats(&mut at, pcount)?;
    let step = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    if at != buf.len() {
        return Err(FlowError::Format("trailing bytes".into()));
    }
    Ok((
        GeneratorModel {
            stage,
            seed,
            c_bundle,
            c_out,
            hidden,
            cond_len,
            w1,
            b1,
            w2,
            b2,
        },
        AdamState { step, m, v },
    ))
}

/// Dense volume -> PATCH^3 occupancy tokens. Every dimension must be a
/// multiple of PATCH. Token p = px + nx (py + ny pz), channel
/// c = lx + PATCH (ly + PATCH lz).
pub fn tokenize_occupancy(vol: &DenseVolume) -> Result<TokenSet, FlowError> {
    let res = vol.resolution();
    if res.iter().any(|&r| r == 0 || r % PATCH != 0) {
        return Err(FlowError::BadDims(format!(
            "resolution {res:?} not divisible by patch {PATCH}"
        )));
    }
    let n = [res[0] / PATCH, res[1] / PATCH, res[2] / PATCH];
    let c = (PATCH * PATCH * PATCH) as usize;
    let mut values = Vec::with_capacity((n[0] * n[1] * n[2]) as usize * c);
    let mut positions = Vec::with_capacity((n[0] * n[1] * n[2]) as usize);
    // Loop nesting emits tokens in exactly p = px + nx (py + ny pz) order.
    for pz in 0..n[2] {
        for py in 0..n[1] {
            for px in 0..n[0] {
                for lz in 0..PATCH {
                    for ly in 0..PATCH {
                        for lx in 0..PATCH {
                            values.push(vol.get(
                                px * PATCH + lx,
                                py * PATCH + ly,
                                pz * PATCH + lz,
                            ));
                        }
                    }
                }
                positions.push(position_encoding([px, py, pz], n));
            }
        }
    }
    TokenSet::new(c, values, positions)
}

/// Inverse of `tokenize_occupancy` for the given resolution.
pub fn detokenize_occupancy(tokens: &TokenSet, res: [u32; 3]) -> Result<DenseVolume, FlowError> {
    if res.iter().any(|&r| r == 0 || r % PATCH != 0) {
        return Err(FlowError::BadDims(format!(
            "resolution {res:?} not divisible by patch {PATCH}"
        )));
    }
    let n = [res[0] / PATCH, res[1] / PATCH, res[2] / PATCH];
    let c = (PATCH * PATCH * PATCH) as usize;
    if tokens.channels() != c || tokens.len() != (n[0] * n[1] * n[2]) as usize {
        return Err(FlowError::ShapeMismatch(format!(
            "{}x{} tokens for resolution {res:?}",
            tokens.len(),
            tokens.channels()
        )));
    }
    let mut vol = DenseVolume::zeros(res);
    for pz in 0..n[2] {
        for py in 0..n[1] {
            for px in 0..n[0] {
                let p = (px + n[0] * (py + n[1] * pz)) as usize;
                let row = tokens.row(p);
                for lz in 0..PATCH {
                    for ly in 0..PATCH {
                        for lx in 0..PATCH {
                            let ch = (lx + PATCH * (ly + PATCH * lz)) as usize;
                            vol.set(
                                px * PATCH + lx,
                                py * PATCH + ly,
                                pz * PATCH + lz,
                                row[ch],
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Voxel mask -> 1-channel token mask: a token is masked iff any voxel in
/// its patch is masked (conservative; unknown never leaks in as known).
pub fn tokenize_mask(mask: &DenseMask) -> Result<TokenSet, FlowError> {
    let res = mask.resolution();
    if res.iter().any(|&r| r == 0 || r % PATCH != 0) {
        return Err(FlowError::BadDims(format!(
            "resolution {res:?} not divisible by patch {PATCH}"
        )));
    }
    let n = [res[0] / PATCH, res[1] / PATCH, res[2] / PATCH];
    let mut values = vec![0.0f64; (n[0] * n[1] * n[2]) as usize];
    let mut positions = vec![[0.0; POS_ENC_DIM]; values.len()];
    for pz in 0..n[2] {
        for py in 0..n[1] {
            for px in 0..n[0] {
                let p = (px + n[0] * (py + n[1] * pz)) as usize;
                let mut any = false;
                'scan: for lz in 0..PATCH {
                    for ly in 0..PATCH {
                        for lx in 0..PATCH {
                            if mask.get(px * PATCH + lx, py * PATCH + ly, pz * PATCH + lz) {
                                any = true;
                                break 'scan;
                            }
                        }
                    }
                }
                values[p] = if any { 1.0 } else { 0.0 };
                positions[p] = position_encoding([px, py, pz], n);
            }
        }
    }
    TokenSet::new(1, values, positions)
}

/// Active voxels (sorted coordinate order) -> latent tokens; returns the
/// coordinate list so the inverse mapping is unambiguous.
pub fn tokenize_latents(grid: &SparseGrid) -> Result<(TokenSet, Vec<VoxelCoord>), FlowError> {
    if grid.len() == 0 {
        return Err(FlowError::EmptyTokenSet);
    }
    let res = grid.resolution();
    let c = grid.channels();
    let mut values = Vec::with_capacity(grid.len() * c);
    let mut positions = Vec::with_capacity(grid.len());
    let mut coords = Vec::with_capacity(grid.len());
    for (coord, f) in grid.iter() {
        values.extend(f.iter().map(|&v| v as f64));
        positions.push(position_encoding(coord.as_array(), res));
        coords.push(*coord);
    }
    Ok((TokenSet::new(c, values, positions)?, coords))
}

/// Inverse of `tokenize_latents` over the same coordinate list.
pub fn detokenize_latents(
    tokens: &TokenSet,
    coords: &[VoxelCoord],
    resolution: [u32; 3],
    cell_size: [f32; 3],
) -> Result<SparseGrid, FlowError> {
    if tokens.len() != coords.len() {
        return Err(FlowError::ShapeMismatch(format!(
            "{} tokens for {} coordinates",
            tokens.len(),
            coords.len()
        )));
    }
    let mut grid = SparseGrid::new(resolution, cell_size, tokens.channels())?;
    for (i, coord) in coords.iter().enumerate() {
        grid.insert(*coord, tokens.row(i).iter().map(|&v| v as f32).collect())?;
    }
    Ok(grid)
}
