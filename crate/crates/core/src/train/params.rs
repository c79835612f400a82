use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Gate, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    GateInput(Gate),
    GateRecurrent(Gate),
    GateBias(Gate),
    Projection,
    OutputWeight,
    OutputBias,
}

/// Address of one parameter tensor. The output layer has
/// `layer == model.layers().len()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    pub layer: usize,
    pub kind: TensorKind,
}

impl TensorId {
    pub fn is_projection(&self) -> bool {
        self.kind == TensorKind::Projection
    }
}

/// Every trainable tensor in canonical order: per LSTM layer the gates
/// (input, recurrent, bias) then the projection; finally the output layer.
pub fn param_ids(model: &Model) -> Vec<TensorId> {
    let mut ids = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        for gate in Gate::ALL {
            for kind in [
                TensorKind::GateInput(gate),
                TensorKind::GateRecurrent(gate),
                TensorKind::GateBias(gate),
            ] {
                ids.push(TensorId { layer: l, kind });
            }
        }
        if layer.projection.is_some() {
            ids.push(TensorId {
                layer: l,
                kind: TensorKind::Projection,
            });
        }
    }
    let out = model.layers().len();
    ids.push(TensorId {
        layer: out,
        kind: TensorKind::OutputWeight,
    });
    ids.push(TensorId {
        layer: out,
        kind: TensorKind::OutputBias,
    });
    ids
}

fn master(w: &crate::nn::Weight) -> Result<&[f64]> {
    w.require_master().map(|m| m.as_slice())
}

fn missing(id: TensorId) -> Error {
    Error::state(alloc::format!("model has no tensor {id:?}"))
}

pub fn param(model: &Model, id: TensorId) -> Result<&[f64]> {
    if id.layer == model.layers().len() {
        let out = model.output();
        return match id.kind {
            TensorKind::OutputWeight => master(&out.weight),
            TensorKind::OutputBias => Ok(&out.bias),
            _ => Err(missing(id)),
        };
    }
    let layer = model.layers().get(id.layer).ok_or_else(|| missing(id))?;
    match id.kind {
        TensorKind::GateInput(g) => master(&layer.gates[g.index()].input),
        TensorKind::GateRecurrent(g) => master(&layer.gates[g.index()].recurrent),
        TensorKind::GateBias(g) => Ok(&layer.gates[g.index()].bias),
        TensorKind::Projection => layer
            .projection
            .as_ref()
            .ok_or_else(|| missing(id))
            .and_then(master),
        _ => Err(missing(id)),
    }
}

/// Mutable master values of a tensor. Drops the tensor's shadow.
pub fn param_mut(model: &mut Model, id: TensorId) -> Result<&mut [f64]> {
    let n_layers = model.layers().len();
    if id.layer == n_layers {
        let out = model.output_mut();
        return match id.kind {
            TensorKind::OutputWeight => out.weight.master_values_mut(),
            TensorKind::OutputBias => Ok(&mut out.bias),
            _ => Err(missing(id)),
        };
    }
    let layer = model
        .layers_mut()
        .get_mut(id.layer)
        .ok_or_else(|| missing(id))?;
    match id.kind {
        TensorKind::GateInput(g) => layer.gates[g.index()].input.master_values_mut(),
        TensorKind::GateRecurrent(g) => layer.gates[g.index()].recurrent.master_values_mut(),
        TensorKind::GateBias(g) => Ok(&mut layer.gates[g.index()].bias),
        TensorKind::Projection => match layer.projection.as_mut() {
            Some(p) => p.master_values_mut(),
            None => Err(missing(id)),
        },
        _ => Err(missing(id)),
    }
}
