use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{quantize_model_with_scale, Model, Precision, QuantScope};
use crate::quant::DEFAULT_SCALE;
use crate::train::{frame_accuracy, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Condition {
    /// Float forward on the float masters.
    Match,
    /// Float-trained model quantized after training (`quant` scope).
    Mismatch,
    /// Fine-tuned model with every LSTM layer quantized.
    Quant,
    /// Fine-tuned model with every layer quantized, softmax included.
    QuantAll,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Match,
        Condition::Mismatch,
        Condition::Quant,
        Condition::QuantAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Match => "match",
            Condition::Mismatch => "mismatch",
            Condition::Quant => "quant",
            Condition::QuantAll => "quant-all",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown condition `{s}`")))
    }
}

/// Frame accuracy of `model` on `data` under `condition`.
///
/// `match` runs on a copy stripped of every shadow, so it cannot read
/// quantized weights. `quant` and `quant-all` require the model to be
/// flagged for that scope with current shadows.
pub fn evaluate(model: &Model, data: &[Sequence], condition: Condition) -> Result<f64> {
    evaluate_with_scale(model, data, condition, DEFAULT_SCALE)
}

/// [`evaluate`] with `weight_scale` steps for the post-hoc quantization of
/// the mismatch condition.
pub fn evaluate_with_scale(
    model: &Model,
    data: &[Sequence],
    condition: Condition,
    weight_scale: u32,
) -> Result<f64> {
    match condition {
        Condition::Match => {
            if !model.has_masters() {
                return Err(Error::state("match evaluation needs float masters"));
            }
            let mut float = model.clone();
            float.set_scope(QuantScope::None);
            float.clear_shadows();
            frame_accuracy(&float, data, Precision::Float)
        }
        Condition::Mismatch => {
            if !model.has_masters() {
                return Err(Error::state("mismatch evaluation needs float masters"));
            }
            let q = quantize_model_with_scale(model, QuantScope::Quant, weight_scale)?;
            frame_accuracy(&q, data, Precision::Quantized)
        }
        Condition::Quant | Condition::QuantAll => {
            let want = if condition == Condition::Quant {
                QuantScope::Quant
            } else {
                QuantScope::QuantAll
            };
            let scope = model.scope()?;
            if scope != want {
                return Err(Error::state(alloc::format!(
                    "{condition} evaluation needs a model quantized with scope {}, found {}",
                    want.name(),
                    scope.name()
                )));
            }
            if !model.has_shadows() {
                return Err(Error::state(alloc::format!(
                    "{condition} evaluation without quantized shadows"
                )));
            }
            frame_accuracy(model, data, Precision::Quantized)
        }
    }
}

/// Frame error, `1 − accuracy`.
pub fn frame_error(accuracy: f64) -> f64 {
    1.0 - accuracy
}

/// `(err_cond − err_match) / err_match`; undefined when `err_match` is 0.
pub fn relative_loss(err_match: f64, err_cond: f64) -> Option<f64> {
    (err_match > 0.0).then(|| (err_cond - err_match) / err_match)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::FloatMatrix;
    use crate::nn::quantize_model;
    use alloc::vec;

    fn data() -> alloc::vec::Vec<Sequence> {
        let x = FloatMatrix::new(4, 2, vec![0.1, 0.2, -0.3, 0.5, 0.9, -1.0, 0.0, 0.4]).unwrap();
        vec![Sequence::new(x, vec![0, 1, 1, 2]).unwrap()]
    }

    #[test]
    fn table_relative_loss() {
        let r = relative_loss(0.136, 0.143).unwrap();
        assert!((r - 0.0514706).abs() < 1e-6);
        assert_eq!(libm::round(r * 1000.0) / 10.0, 5.1);
        assert_eq!(relative_loss(0.0, 0.1), None);
        assert_eq!(relative_loss(0.2, 0.2), Some(0.0));
    }

    #[test]
    fn quantized_conditions_need_shadows() {
        let m = Model::random(2, 3, &[(4, None)], 1).unwrap();
        for c in [Condition::Quant, Condition::QuantAll] {
            assert!(matches!(evaluate(&m, &data(), c), Err(Error::State(_))));
        }
        let mut q = m.clone();
        q.set_scope(QuantScope::Quant);
        assert!(matches!(
            evaluate(&q, &data(), Condition::Quant),
            Err(Error::State(_))
        ));
        q.requantize(255).unwrap();
        evaluate(&q, &data(), Condition::Quant).unwrap();
        assert!(matches!(
            evaluate(&q, &data(), Condition::QuantAll),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn match_ignores_shadows() {
        let m = Model::random(2, 3, &[(4, Some(2))], 5).unwrap();
        let q = quantize_model(&m, QuantScope::QuantAll).unwrap();
        let a = evaluate(&m, &data(), Condition::Match).unwrap();
        assert_eq!(a, evaluate(&q, &data(), Condition::Match).unwrap());
        assert_eq!(a, evaluate(&m, &data(), Condition::Match).unwrap());
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
        }
        assert!("float".parse::<Condition>().is_err());
    }
}
