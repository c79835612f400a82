//! Float and quantized forward passes.
//!
//! Every layer receives and produces floats. In quantized mode each
//! matrix-vector product quantizes its input vector on the fly (range taken
//! from the vector itself), multiplies against the layer's pre-quantized
//! weight shadow with integer arithmetic and recovers the result before the
//! float bias and activation are applied.

mod activation;
mod fc;
mod lstm;
mod model;
mod weight;

pub use activation::{activate_in_place, activation, Activation};
pub use fc::{fc_forward, FcLayer};
pub use lstm::{lstm_step, Gate, GateParams, LstmLayer, LstmState, StepTrace};
pub use model::{
    model_forward, quantize_model, quantize_model_with_scale, ForwardTrace, Model, ModelMeta,
    TrainingPhase,
};
pub use weight::{Operand, Weight};

/// Arithmetic used for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Precision {
    Float,
    /// Layers with quantization enabled use their shadows; the others still
    /// run in float.
    Quantized,
}

/// Which layers of a model are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum QuantScope {
    None,
    /// Every layer except the final softmax layer.
    Quant,
    QuantAll,
}

impl QuantScope {
    pub fn name(self) -> &'static str {
        match self {
            QuantScope::None => "none",
            QuantScope::Quant => "quant",
            QuantScope::QuantAll => "quant-all",
        }
    }
}

impl core::str::FromStr for QuantScope {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "none" => Ok(QuantScope::None),
            "quant" => Ok(QuantScope::Quant),
            "quant-all" => Ok(QuantScope::QuantAll),
            other => Err(crate::Error::invalid(alloc::format!(
                "unknown quantization scope '{other}'"
            ))),
        }
    }
}
