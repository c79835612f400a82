use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::FloatMatrix;
use crate::qgemm::qgemm_expanded;
use crate::quant::{quantize_matrix, QuantizedMatrix, ACTIVATION_SCALE};

/// A weight matrix: full-precision master and/or its quantized shadow.
///
/// Training updates the master and drops the shadow; the shadow is only
/// ever re-derived from the master. Deployment models may carry the shadow
/// alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    rows: usize,
    cols: usize,
    master: Option<FloatMatrix>,
    shadow: Option<QuantizedMatrix>,
}

impl Weight {
    pub fn from_master(master: FloatMatrix) -> Self {
        Self {
            rows: master.rows(),
            cols: master.cols(),
            master: Some(master),
            shadow: None,
        }
    }

    pub fn from_parts(
        master: Option<FloatMatrix>,
        shadow: Option<QuantizedMatrix>,
    ) -> Result<Self> {
        let shape = match (&master, &shadow) {
            (Some(m), Some(q)) if m.shape() != q.shape() => {
                return Err(Error::invalid("master and shadow shapes differ"))
            }
            (Some(m), _) => m.shape(),
            (None, Some(q)) => q.shape(),
            (None, None) => return Err(Error::invalid("weight needs a master or a shadow")),
        };
        Ok(Self {
            rows: shape.0,
            cols: shape.1,
            master,
            shadow,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn master(&self) -> Option<&FloatMatrix> {
        self.master.as_ref()
    }

    pub fn shadow(&self) -> Option<&QuantizedMatrix> {
        self.shadow.as_ref()
    }

    pub(crate) fn require_master(&self) -> Result<&FloatMatrix> {
        self.master
            .as_ref()
            .ok_or_else(|| Error::state("weight has no full-precision master"))
    }

    /// Mutable master values; any shadow becomes stale and is dropped.
    pub(crate) fn master_values_mut(&mut self) -> Result<&mut [f64]> {
        self.shadow = None;
        self.master
            .as_mut()
            .map(FloatMatrix::as_mut_slice)
            .ok_or_else(|| Error::state("weight has no full-precision master"))
    }

    /// Re-derives the shadow from the master.
    pub fn requantize(&mut self, scale: u32) -> Result<()> {
        let q = quantize_matrix(self.require_master()?, scale)?;
        self.shadow = Some(q);
        Ok(())
    }

    pub fn clear_shadow(&mut self) {
        self.shadow = None;
    }

    /// Drops the master, keeping only the shadow.
    pub fn drop_master(&mut self) -> Result<()> {
        if self.shadow.is_none() {
            return Err(Error::state(
                "cannot drop the master of an unquantized weight",
            ));
        }
        self.master = None;
        Ok(())
    }

    /// `W · x`, through the integer pipeline when `quantized` is set. The
    /// operand is quantized at [`ACTIVATION_SCALE`].
    pub fn apply(&self, x: &mut Operand<'_>, quantized: bool) -> Result<Vec<f64>> {
        if x.values.len() != self.cols {
            return Err(Error::dims(
                "weight apply",
                self.shape(),
                (x.values.len(), 1),
            ));
        }
        if quantized {
            let shadow = self
                .shadow
                .as_ref()
                .ok_or_else(|| Error::state("weight has no quantized shadow"))?;
            let xq = x.quantized()?;
            Ok(qgemm_expanded(shadow, xq)?.into_values())
        } else {
            Ok(self.require_master()?.matvec(x.values))
        }
    }
}

/// Input vector of one or more matrix-vector products.
///
/// The on-the-fly quantization is computed at most once and shared by every
/// weight applied to the same vector (e.g. the four LSTM gates).
pub struct Operand<'a> {
    values: &'a [f64],
    cached: Option<QuantizedMatrix>,
}

impl<'a> Operand<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        Self {
            values,
            cached: None,
        }
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    fn quantized(&mut self) -> Result<&QuantizedMatrix> {
        if self.cached.is_none() {
            let column = FloatMatrix::column(self.values)?;
            self.cached = Some(quantize_matrix(&column, ACTIVATION_SCALE)?);
        }
        Ok(self.cached.as_ref().expect("populated above"))
    }
}
