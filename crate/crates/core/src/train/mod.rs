//! Float SGD and quantization-aware SGD.
//!
//! A quantization-aware step re-quantizes the float masters, runs the
//! forward pass through the integer pipeline, backpropagates in full
//! precision with the float masters and applies the update to the masters.
//! No quantization term enters the gradient.

mod backprop;
mod params;
mod schedule;

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::FloatMatrix;
use crate::nn::{Model, Precision, QuantScope, TrainingPhase};
use crate::quant::DEFAULT_SCALE;

pub use backprop::{backward, Gradients};
pub use params::{param, param_ids, param_mut, TensorId, TensorKind};
pub use schedule::{lr_global, lr_proj_multiplier, LrConfig, ProjSchedule};

/// Frame-labelled input sequence (`frames × input_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: FloatMatrix,
    pub labels: Vec<usize>,
}

impl Sequence {
    pub fn new(inputs: FloatMatrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid("one label per frame required"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let cols = self.inputs.cols();
        let values = self.inputs.as_slice()[start * cols..(start + len) * cols].to_vec();
        Self {
            inputs: FloatMatrix::from_raw(len, cols, values),
            labels: self.labels[start..start + len].to_vec(),
        }
    }
}

/// Learning rate applied to each tensor for the given schedule values.
/// Only projection matrices receive the multiplier.
pub fn effective_learning_rates(model: &Model, eta_g: f64, eta_p: f64) -> Vec<(TensorId, f64)> {
    param_ids(model)
        .into_iter()
        .map(|id| {
            (
                id,
                if id.is_projection() {
                    eta_g * eta_p
                } else {
                    eta_g
                },
            )
        })
        .collect()
}

/// `w ← w − η·∂C/∂w` on the float masters. Every shadow is invalidated.
/// A gradient or an updated parameter that is not finite is a divergence.
pub fn sgd_step(model: &mut Model, grads: &Gradients, eta_g: f64, eta_p: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    if grads.ids() != param_ids(model).as_slice() {
        return Err(Error::invalid("gradients are not congruent with the model"));
    }
    for ((id, lr), (_, g)) in effective_learning_rates(model, eta_g, eta_p)
        .into_iter()
        .zip(grads.iter())
    {
        let w = param_mut(model, id)?;
        if w.len() != g.len() {
            return Err(Error::invalid("gradient tensor has the wrong size"));
        }
        let mut finite = true;
        for (w, g) in w.iter_mut().zip(g) {
            *w -= lr * g;
            finite &= w.is_finite();
        }
        if !finite {
            return Err(Error::Divergence(alloc::format!(
                "non-finite parameter in {id:?}"
            )));
        }
    }
    model.clear_shadows();
    Ok(())
}

fn apply_step(
    model: &mut Model,
    batch: &[Sequence],
    precision: Precision,
    lr: &LrConfig,
    step: usize,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let traces = batch
        .iter()
        .map(|s| model.forward_trace(&s.inputs, precision))
        .collect::<Result<Vec<_>>>()?;
    let (loss, mut grads) = backward(model, batch, &traces, None)?;
    if let Some(max_norm) = grad_clip {
        let norm = grads.norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
    let t = lr.schedule_time(step);
    sgd_step(model, &grads, lr_global(t, lr), lr_proj_multiplier(t, lr))?;
    Ok(loss)
}

/// Float forward, backward and SGD update; returns the batch loss before
/// the update.
pub fn float_train_step(
    model: &mut Model,
    batch: &[Sequence],
    lr: &LrConfig,
    step: usize,
    grad_clip: Option<f64>,
) -> Result<f64> {
    apply_step(model, batch, Precision::Float, lr, step, grad_clip)
}

/// Quantization-aware step: re-quantize the layers in `scope` from the
/// masters with `weight_scale` steps, quantized forward, full-precision
/// backward, SGD on the masters.
pub fn qat_train_step(
    model: &mut Model,
    batch: &[Sequence],
    lr: &LrConfig,
    step: usize,
    scope: QuantScope,
    weight_scale: u32,
    grad_clip: Option<f64>,
) -> Result<f64> {
    model.set_scope(scope);
    model.requantize(weight_scale)?;
    apply_step(model, batch, Precision::Quantized, lr, step, grad_clip)
}

/// Random `bptt_len` windows drawn from `data`.
pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    data: &[Sequence],
    batch_size: usize,
    bptt_len: usize,
) -> Vec<Sequence> {
    (0..batch_size)
        .map(|_| {
            let seq = &data[rng.random_range(0..data.len())];
            let len = bptt_len.min(seq.len());
            let start = rng.random_range(0..=seq.len() - len);
            seq.window(start, len)
        })
        .collect()
}

/// Fraction of frames whose arg-max posterior equals the label.
pub fn frame_accuracy(model: &Model, data: &[Sequence], precision: Precision) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in data {
        let p = model.forward(&seq.inputs, precision)?;
        for (t, &label) in seq.labels.iter().enumerate() {
            let row = p.row(t);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
            correct += usize::from(best == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(correct as f64 / total as f64)
}

/// Mean per-frame cross-entropy of `model` on `data`.
pub fn mean_loss(model: &Model, data: &[Sequence], precision: Precision) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for seq in data {
        let trace = model.forward_trace(&seq.inputs, precision)?;
        for (z, &label) in trace.logits.iter().zip(&seq.labels) {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + crate::math::ln(z.iter().map(|&v| crate::math::exp(v - max)).sum());
            total += lse - z[label];
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseConfig {
    pub steps: usize,
    pub lr: LrConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub bptt_len: usize,
    /// Float training.
    pub phase1: PhaseConfig,
    /// Quantization-aware fine-tuning.
    pub phase2: PhaseConfig,
    pub quant_scope: QuantScope,
    /// Quantization steps for weight shadows; activations always use 8 bits.
    pub weight_scale: u32,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bptt_len == 0 {
            return Err(Error::invalid("batch_size and bptt_len must be positive"));
        }
        self.phase1.lr.validate()?;
        if self.phase2.steps > 0 {
            self.phase2.lr.validate()?;
            if self.quant_scope == QuantScope::None {
                return Err(Error::invalid(
                    "quantization-aware phase needs quant or quant-all",
                ));
            }
        }
        if self.weight_scale == 0 || self.weight_scale > DEFAULT_SCALE {
            return Err(Error::invalid("weight_scale must be in 1..=255"));
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Metric {
    pub phase: TrainingPhase,
    pub step: usize,
    pub schedule_time: f64,
    pub eta_g: f64,
    pub eta_p: f64,
    pub loss: f64,
    /// Held-out frame accuracy per evaluation condition, when evaluated.
    pub heldout: Vec<(&'static str, f64)>,
}

pub trait MetricsSink {
    fn record(&mut self, metric: &Metric);
}

impl<F: FnMut(&Metric)> MetricsSink for F {
    fn record(&mut self, metric: &Metric) {
        self(metric)
    }
}

/// Discards all metrics.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &Metric) {}
}

fn phase_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn heldout_conditions(
    model: &Model,
    heldout: &[Sequence],
    phase: TrainingPhase,
    scope: QuantScope,
    weight_scale: u32,
) -> Result<Vec<(&'static str, f64)>> {
    match phase {
        TrainingPhase::QuantAware => {
            let mut q = model.clone();
            q.set_scope(scope);
            q.requantize(weight_scale)?;
            Ok(alloc::vec![(
                scope.name(),
                frame_accuracy(&q, heldout, Precision::Quantized)?
            )])
        }
        _ => Ok(alloc::vec![(
            "match",
            frame_accuracy(model, heldout, Precision::Float)?
        )]),
    }
}

/// Phase 1: float SGD for `cfg.phase1.steps` steps.
pub fn train_float(
    model: &mut Model,
    train: &[Sequence],
    heldout: &[Sequence],
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    run_phase(
        model,
        train,
        heldout,
        cfg,
        TrainingPhase::Float,
        QuantScope::None,
        sink,
    )
}

/// Phase 2: quantization-aware SGD in `scope`; leaves the model flagged
/// for `scope` with fresh shadows.
pub fn train_qat(
    model: &mut Model,
    train: &[Sequence],
    heldout: &[Sequence],
    cfg: &TrainConfig,
    scope: QuantScope,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    if scope == QuantScope::None {
        return Err(Error::invalid(
            "quantization-aware training needs quant or quant-all",
        ));
    }
    run_phase(
        model,
        train,
        heldout,
        cfg,
        TrainingPhase::QuantAware,
        scope,
        sink,
    )?;
    model.set_scope(scope);
    model.requantize(cfg.weight_scale)
}

fn run_phase(
    model: &mut Model,
    train: &[Sequence],
    heldout: &[Sequence],
    cfg: &TrainConfig,
    phase: TrainingPhase,
    scope: QuantScope,
    sink: &mut dyn MetricsSink,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let (pc, stream) = match phase {
        TrainingPhase::QuantAware => (&cfg.phase2, 2),
        _ => (&cfg.phase1, 1),
    };
    if pc.steps > 0 {
        pc.lr.validate()?;
    }
    let mut rng = phase_rng(cfg.seed, stream);
    for step in 0..pc.steps {
        let batch = sample_batch(&mut rng, train, cfg.batch_size, cfg.bptt_len);
        let loss = match phase {
            TrainingPhase::QuantAware => qat_train_step(
                model,
                &batch,
                &pc.lr,
                step,
                scope,
                cfg.weight_scale,
                cfg.grad_clip,
            ),
            _ => float_train_step(model, &batch, &pc.lr, step, cfg.grad_clip),
        }
        .map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(alloc::format!("step {step}: {m}")),
            other => other,
        })?;
        let t = pc.lr.schedule_time(step);
        let last = step + 1 == pc.steps;
        let heldout = if cfg.eval_every > 0
            && !heldout.is_empty()
            && ((step + 1) % cfg.eval_every == 0 || last)
        {
            heldout_conditions(model, heldout, phase, scope, cfg.weight_scale)?
        } else {
            Vec::new()
        };
        sink.record(&Metric {
            phase,
            step,
            schedule_time: t,
            eta_g: lr_global(t, &pc.lr),
            eta_p: lr_proj_multiplier(t, &pc.lr),
            loss,
            heldout,
        });
    }
    model.meta.phase = phase;
    Ok(())
}
