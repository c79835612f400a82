use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::{activate_in_place, Activation};
use super::fc::FcLayer;
use super::lstm::{LstmLayer, LstmState, StepTrace};
use super::weight::Weight;
use super::{Precision, QuantScope};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::FloatMatrix;
use crate::quant::DEFAULT_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TrainingPhase {
    Initial,
    /// Trained with float forward passes.
    Float,
    /// Fine-tuned with quantization-aware SGD.
    QuantAware,
}

impl TrainingPhase {
    pub fn code(self) -> u32 {
        match self {
            TrainingPhase::Initial => 0,
            TrainingPhase::Float => 1,
            TrainingPhase::QuantAware => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => TrainingPhase::Initial,
            1 => TrainingPhase::Float,
            2 => TrainingPhase::QuantAware,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub phase: TrainingPhase,
}

/// Stacked LSTM layers followed by a softmax output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub meta: ModelMeta,
    layers: Vec<LstmLayer>,
    output: FcLayer,
}

/// Activations of a forward pass over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `layers[l][t]`
    pub layers: Vec<Vec<StepTrace>>,
    /// Output-layer pre-activations per frame.
    pub logits: Vec<Vec<f64>>,
    pub posteriors: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn frames(&self) -> usize {
        self.logits.len()
    }

    /// Input of the output layer at frame `t`.
    pub fn top_output<'a>(&'a self, inputs: &'a FloatMatrix, t: usize) -> &'a [f64] {
        match self.layers.last() {
            Some(steps) => &steps[t].r,
            None => inputs.row(t),
        }
    }
}

impl Model {
    pub fn new(meta: ModelMeta, layers: Vec<LstmLayer>, output: FcLayer) -> Result<Self> {
        let mut dim = meta.input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.input_dim() != dim {
                return Err(Error::invalid(alloc::format!(
                    "layer {l} expects input {} but receives {dim}",
                    layer.input_dim()
                )));
            }
            dim = layer.output_dim();
        }
        if output.input_dim() != dim || output.output_dim() != meta.n_classes {
            return Err(Error::invalid(
                "output layer dimensions do not match the model",
            ));
        }
        if output.activation != Activation::Softmax {
            return Err(Error::invalid("output layer must use softmax"));
        }
        let model = Self {
            meta,
            layers,
            output,
        };
        model.scope()?;
        Ok(model)
    }

    /// Randomly initialized float model; `layers` lists `(cells, projection)`.
    pub fn random(
        input_dim: usize,
        n_classes: usize,
        layers: &[(usize, Option<usize>)],
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || n_classes < 2 {
            return Err(Error::invalid(
                "need input_dim > 0 and at least two classes",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = input_dim;
        let mut lstm = Vec::with_capacity(layers.len());
        for &(cells, proj) in layers {
            let layer = LstmLayer::random(dim, cells, proj, &mut rng)?;
            dim = layer.output_dim();
            lstm.push(layer);
        }
        let s = 1.0 / math::sqrt(dim as f64);
        let w = (0..n_classes * dim)
            .map(|_| rand::Rng::random_range(&mut rng, -s..s))
            .collect();
        let output = FcLayer::new(
            Weight::from_master(FloatMatrix::new(n_classes, dim, w)?),
            vec![0.0; n_classes],
            Activation::Softmax,
        )?;
        Self::new(
            ModelMeta {
                input_dim,
                n_classes,
                seed,
                phase: TrainingPhase::Initial,
            },
            lstm,
            output,
        )
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.layers
    }

    pub fn output(&self) -> &FcLayer {
        &self.output
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LstmLayer] {
        &mut self.layers
    }

    pub(crate) fn output_mut(&mut self) -> &mut FcLayer {
        &mut self.output
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(LstmLayer::param_count)
            .sum::<usize>()
            + self.output.output_dim() * (self.output.input_dim() + 1)
    }

    pub fn weights(&self) -> impl Iterator<Item = &Weight> {
        self.layers
            .iter()
            .flat_map(LstmLayer::weights)
            .chain(core::iter::once(&self.output.weight))
    }

    fn weights_mut(&mut self) -> impl Iterator<Item = &mut Weight> {
        self.layers
            .iter_mut()
            .flat_map(LstmLayer::weights_mut)
            .chain(core::iter::once(&mut self.output.weight))
    }

    /// The quantization scope described by the per-layer flags.
    pub fn scope(&self) -> Result<QuantScope> {
        let lstm_on = self.layers.iter().filter(|l| l.quantize_enabled).count();
        let all_lstm = lstm_on == self.layers.len();
        match (lstm_on, all_lstm, self.output.quantize_enabled) {
            (0, _, false) => Ok(QuantScope::None),
            (_, true, false) => Ok(QuantScope::Quant),
            (_, true, true) => Ok(QuantScope::QuantAll),
            _ => Err(Error::state("layer quantization flags form no valid scope")),
        }
    }

    /// Sets the per-layer flags; shadows are left untouched.
    pub fn set_scope(&mut self, scope: QuantScope) {
        let lstm = scope != QuantScope::None;
        for l in &mut self.layers {
            l.quantize_enabled = lstm;
        }
        self.output.quantize_enabled = scope == QuantScope::QuantAll;
    }

    /// Re-derives shadows of every flagged layer from the masters and drops
    /// the shadows of unflagged layers.
    pub fn requantize(&mut self, scale: u32) -> Result<()> {
        for layer in &mut self.layers {
            let on = layer.quantize_enabled;
            for w in layer.weights_mut() {
                if on {
                    w.requantize(scale)?;
                } else {
                    w.clear_shadow();
                }
            }
        }
        if self.output.quantize_enabled {
            self.output.weight.requantize(scale)
        } else {
            self.output.weight.clear_shadow();
            Ok(())
        }
    }

    pub fn clear_shadows(&mut self) {
        self.weights_mut().for_each(Weight::clear_shadow);
    }

    /// Whether every flagged layer has shadows for quantized inference.
    pub fn has_shadows(&self) -> bool {
        self.layers
            .iter()
            .filter(|l| l.quantize_enabled)
            .all(|l| l.weights().all(|w| w.shadow().is_some()))
            && (!self.output.quantize_enabled || self.output.weight.shadow().is_some())
    }

    pub fn has_masters(&self) -> bool {
        self.weights().all(|w| w.master().is_some())
    }

    /// Drops the masters of quantized weights, leaving a deployment model.
    pub fn drop_quantized_masters(&mut self) -> Result<()> {
        for w in self.weights_mut() {
            if w.shadow().is_some() {
                w.drop_master()?;
            }
        }
        Ok(())
    }

    /// Rounds every master and bias to the nearest `f32`, the storage
    /// precision of model files. Shadows of rounded masters are re-derived
    /// at their previous scale; master-less shadows are kept as they are.
    pub fn round_to_f32(&mut self) -> Result<()> {
        let round = |v: &mut f64| *v = *v as f32 as f64;
        for layer in &mut self.layers {
            for g in &mut layer.gates {
                g.bias.iter_mut().for_each(round);
            }
        }
        self.output.bias.iter_mut().for_each(round);
        for w in self.weights_mut() {
            if w.master().is_none() {
                continue;
            }
            let scale = w.shadow().map(|q| q.params().scale());
            if let Ok(values) = w.master_values_mut() {
                values.iter_mut().for_each(round);
            }
            if let Some(scale) = scale {
                w.requantize(scale)?;
            }
        }
        Ok(())
    }

    pub fn forward_trace(
        &self,
        inputs: &FloatMatrix,
        precision: Precision,
    ) -> Result<ForwardTrace> {
        if inputs.cols() != self.meta.input_dim {
            return Err(Error::dims(
                "model_forward",
                inputs.shape(),
                (inputs.rows(), self.meta.input_dim),
            ));
        }
        let frames = inputs.rows();
        let mut states: Vec<LstmState> = self.layers.iter().map(LstmState::zeros).collect();
        let mut layers: Vec<Vec<StepTrace>> = self
            .layers
            .iter()
            .map(|_| Vec::with_capacity(frames))
            .collect();
        let mut logits = Vec::with_capacity(frames);
        let mut posteriors = Vec::with_capacity(frames);
        for t in 0..frames {
            for (l, layer) in self.layers.iter().enumerate() {
                let x = match l {
                    0 => inputs.row(t),
                    _ => &layers[l - 1][t].r,
                };
                let step = layer.step_trace(x, &states[l], precision)?;
                states[l] = step.state();
                layers[l].push(step);
            }
            let top = match layers.last() {
                Some(steps) => &steps[t].r[..],
                None => inputs.row(t),
            };
            let z = self.output.pre_activation(top, precision)?;
            let mut p = z.clone();
            activate_in_place(Activation::Softmax, &mut p);
            logits.push(z);
            posteriors.push(p);
        }
        Ok(ForwardTrace {
            layers,
            logits,
            posteriors,
        })
    }

    /// Per-frame posteriors (`frames × n_classes`).
    pub fn forward(&self, inputs: &FloatMatrix, precision: Precision) -> Result<FloatMatrix> {
        let trace = self.forward_trace(inputs, precision)?;
        let values = trace.posteriors.concat();
        FloatMatrix::new(inputs.rows(), self.meta.n_classes, values)
    }
}

pub fn model_forward(
    model: &Model,
    inputs: &FloatMatrix,
    precision: Precision,
) -> Result<FloatMatrix> {
    model.forward(inputs, precision)
}

/// Copy of `model` with the layers of `scope` flagged and quantized.
/// Masters and biases are kept unchanged.
pub fn quantize_model(model: &Model, scope: QuantScope) -> Result<Model> {
    quantize_model_with_scale(model, scope, DEFAULT_SCALE)
}

pub fn quantize_model_with_scale(model: &Model, scope: QuantScope, scale: u32) -> Result<Model> {
    let mut out = model.clone();
    out.set_scope(scope);
    out.requantize(scale)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        Model::random(3, 4, &[(5, Some(2)), (4, None)], 11).unwrap()
    }

    fn inputs() -> FloatMatrix {
        FloatMatrix::from_rows(&[[0.1, -0.4, 0.9], [1.2, 0.0, -0.3], [-0.8, 0.5, 0.2]]).unwrap()
    }

    #[test]
    fn zero_softmax_layer_gives_uniform_posteriors() {
        let output = FcLayer::new(
            Weight::from_master(FloatMatrix::zeros(4, 3)),
            vec![0.0; 4],
            Activation::Softmax,
        )
        .unwrap();
        let meta = ModelMeta {
            input_dim: 3,
            n_classes: 4,
            seed: 0,
            phase: TrainingPhase::Initial,
        };
        let model = Model::new(meta, vec![], output).unwrap();
        let p = model.forward(&inputs(), Precision::Float).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn float_forward_is_layer_composition() {
        let model = toy();
        let x = inputs();
        let p = model.forward(&x, Precision::Float).unwrap();
        let mut states: Vec<_> = model.layers().iter().map(LstmState::zeros).collect();
        for t in 0..x.rows() {
            let mut v = x.row(t).to_vec();
            for (l, layer) in model.layers().iter().enumerate() {
                let (r, s) =
                    super::super::lstm_step(layer, &v, &states[l], Precision::Float).unwrap();
                states[l] = s;
                v = r;
            }
            let y = model.output().forward_vec(&v, Precision::Float).unwrap();
            assert_eq!(p.row(t), &y[..]);
            assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn quantized_mode_without_flags_equals_float() {
        let model = toy();
        let x = inputs();
        assert_eq!(
            model.forward(&x, Precision::Quantized).unwrap(),
            model.forward(&x, Precision::Float).unwrap()
        );
    }

    #[test]
    fn quantize_model_scopes() {
        let model = toy();
        let q = quantize_model(&model, QuantScope::Quant).unwrap();
        assert!(!q.output().quantize_enabled);
        assert!(q.output().weight.shadow().is_none());
        assert!(q.layers().iter().all(|l| l.quantize_enabled));
        assert_eq!(q.scope().unwrap(), QuantScope::Quant);
        assert!(q.has_shadows());

        let qa = quantize_model(&model, QuantScope::QuantAll).unwrap();
        assert!(qa.output().quantize_enabled && qa.output().weight.shadow().is_some());
        assert_eq!(quantize_model(&qa, QuantScope::QuantAll).unwrap(), qa);

        // Masters and biases are untouched.
        for (a, b) in model.weights().zip(qa.weights()) {
            assert_eq!(a.master(), b.master());
        }
        assert_eq!(model.output().bias, qa.output().bias);
    }

    #[test]
    fn quant_and_quant_all_differ_only_in_output_layer() {
        let model = toy();
        let x = inputs();
        let q = quantize_model(&model, QuantScope::Quant).unwrap();
        let qa = quantize_model(&model, QuantScope::QuantAll).unwrap();
        let tq = q.forward_trace(&x, Precision::Quantized).unwrap();
        let tqa = qa.forward_trace(&x, Precision::Quantized).unwrap();
        assert_eq!(tq.layers, tqa.layers);
        assert_ne!(tq.logits, tqa.logits);
        for t in 0..x.rows() {
            let top = tq.top_output(&x, t);
            assert_eq!(
                tq.logits[t],
                model
                    .output()
                    .pre_activation(top, Precision::Float)
                    .unwrap()
            );
        }
    }

    #[test]
    fn posteriors_normalized_in_both_modes() {
        let q = quantize_model(&toy(), QuantScope::QuantAll).unwrap();
        for precision in [Precision::Float, Precision::Quantized] {
            let p = q.forward(&inputs(), precision).unwrap();
            for t in 0..p.rows() {
                assert!((p.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rounding_to_f32_rederives_shadows() {
        let mut q = quantize_model_with_scale(&toy(), QuantScope::Quant, 63).unwrap();
        q.round_to_f32().unwrap();
        for w in q.weights() {
            let m = w.master().unwrap();
            assert!(m.as_slice().iter().all(|&v| v == v as f32 as f64));
            match w.shadow() {
                Some(s) => {
                    assert_eq!(s.params().scale(), 63);
                    assert_eq!(s, &crate::quant::quantize_matrix(m, 63).unwrap());
                }
                None => assert!(!q.output().quantize_enabled),
            }
        }
        let again = {
            let mut c = q.clone();
            c.round_to_f32().unwrap();
            c
        };
        assert_eq!(again, q);
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        let mut model = toy();
        model.layers_mut()[0].quantize_enabled = true;
        assert!(model.scope().is_err());
    }

    #[test]
    fn cell_state_bounded_and_outputs_in_unit_box() {
        let model = Model::random(3, 4, &[(6, None)], 5).unwrap();
        let rows: Vec<[f64; 3]> = (0..50)
            .map(|t| [(t as f64).sin() * 4.0, 4.0, -4.0])
            .collect();
        let x = FloatMatrix::from_rows(&rows).unwrap();
        let trace = model.forward_trace(&x, Precision::Float).unwrap();
        for (t, step) in trace.layers[0].iter().enumerate() {
            assert!(step.c.iter().all(|c| c.abs() <= (t + 1) as f64));
            assert!(step.m.iter().all(|m| m.abs() <= 1.0));
            assert!(step.r.iter().all(|r| r.abs() <= 1.0));
        }
    }

    #[test]
    fn drop_masters_makes_deployment_model() {
        let mut q = quantize_model(&toy(), QuantScope::Quant).unwrap();
        q.drop_quantized_masters().unwrap();
        assert!(!q.has_masters());
        assert!(q.output().weight.master().is_some());
        assert!(q.forward(&inputs(), Precision::Float).is_err());
        assert!(q.forward(&inputs(), Precision::Quantized).is_ok());
    }
}
