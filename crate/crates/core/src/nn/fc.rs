use alloc::vec::Vec;

use super::activation::{activate_in_place, Activation};
use super::weight::{Operand, Weight};
use super::Precision;
use crate::error::{Error, Result};
use crate::matrix::FloatMatrix;
use crate::qgemm::{gemm_float, qgemm_expanded};
use crate::quant::{quantize_matrix, ACTIVATION_SCALE};

/// `y = F(W·x + b)`. The bias is never quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub weight: Weight,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub quantize_enabled: bool,
}

impl FcLayer {
    pub fn new(weight: Weight, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("fc bias", weight.shape(), (bias.len(), 1)));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            quantize_enabled: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn uses_integer_path(&self, precision: Precision) -> bool {
        precision == Precision::Quantized && self.quantize_enabled
    }

    /// `W·x + b` for one input vector.
    pub fn pre_activation(&self, x: &[f64], precision: Precision) -> Result<Vec<f64>> {
        let mut y = self
            .weight
            .apply(&mut Operand::new(x), self.uses_integer_path(precision))?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64], precision: Precision) -> Result<Vec<f64>> {
        let mut y = self.pre_activation(x, precision)?;
        activate_in_place(self.activation, &mut y);
        Ok(y)
    }
}

/// Forward pass over the columns of `x` (`input_dim × n`).
///
/// In quantized mode `x` is quantized as one tensor at
/// [`ACTIVATION_SCALE`], with its range taken from all of its entries.
pub fn fc_forward(layer: &FcLayer, x: &FloatMatrix, precision: Precision) -> Result<FloatMatrix> {
    if x.rows() != layer.input_dim() {
        return Err(Error::dims("fc_forward", layer.weight.shape(), x.shape()));
    }
    let product = if layer.uses_integer_path(precision) {
        let shadow = layer
            .weight
            .shadow()
            .ok_or_else(|| Error::state("quantized fc_forward without a weight shadow"))?;
        let xq = quantize_matrix(x, ACTIVATION_SCALE)?;
        qgemm_expanded(shadow, &xq)?
    } else {
        gemm_float(layer.weight.require_master()?, x)?
    };
    let (rows, cols) = product.shape();
    let mut values = product.into_values();
    let mut column = Vec::with_capacity(rows);
    for j in 0..cols {
        column.clear();
        column.extend((0..rows).map(|i| values[i * cols + j] + layer.bias[i]));
        activate_in_place(layer.activation, &mut column);
        for (i, v) in column.iter().enumerate() {
            values[i * cols + j] = *v;
        }
    }
    FloatMatrix::new(rows, cols, values)
}
