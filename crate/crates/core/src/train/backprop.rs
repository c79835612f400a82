//! Backpropagation through time in full precision.
//!
//! Errors are propagated with the float master weights while the
//! activations come from whatever forward pass produced the traces, so the
//! same code serves float training and quantization-aware training.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{param_ids, TensorId};
use super::Sequence;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{ForwardTrace, LstmLayer, Model, StepTrace};

/// One gradient tensor per model parameter, in [`param_ids`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    ids: Vec<TensorId>,
    values: Vec<Vec<f64>>,
}

impl Gradients {
    /// All-zero gradients congruent with `model`.
    pub fn zeros(model: &Model) -> Result<Self> {
        let ids = param_ids(model);
        let values = ids
            .iter()
            .map(|&id| super::params::param(model, id).map(|p| vec![0.0; p.len()]))
            .collect::<Result<_>>()?;
        Ok(Self { ids, values })
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|k| self.values[k].as_slice())
    }

    pub fn get_mut(&mut self, id: TensorId) -> Option<&mut [f64]> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|k| self.values[k].as_mut_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &[f64])> {
        self.ids
            .iter()
            .copied()
            .zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.values.iter().flatten().map(|v| v * v).sum())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= factor);
    }
}

#[derive(Clone)]
struct GateGrads {
    input: Vec<f64>,
    recurrent: Vec<f64>,
    bias: Vec<f64>,
}

struct LayerGrads {
    gates: [GateGrads; 4],
    projection: Option<Vec<f64>>,
}

impl LayerGrads {
    fn zeros(layer: &LstmLayer) -> Self {
        let n = layer.cells();
        let g = GateGrads {
            input: vec![0.0; n * layer.input_dim()],
            recurrent: vec![0.0; n * layer.output_dim()],
            bias: vec![0.0; n],
        };
        Self {
            gates: [g.clone(), g.clone(), g.clone(), g],
            projection: layer.projection_dim().map(|p| vec![0.0; p * n]),
        }
    }
}

#[inline]
fn outer_acc(acc: &mut [f64], rows: &[f64], cols: &[f64]) {
    let n = cols.len();
    for (i, &d) in rows.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (a, &c) in acc[i * n..(i + 1) * n].iter_mut().zip(cols) {
            *a += d * c;
        }
    }
}

/// Cross-entropy loss over every frame of `batch` and its gradient.
///
/// `traces[s]` must come from a forward pass over `batch[s]`. The loss is
/// `Σ w·CE / frames`; `frame_weights` default to 1.
pub fn backward(
    model: &Model,
    batch: &[Sequence],
    traces: &[ForwardTrace],
    frame_weights: Option<&[Vec<f64>]>,
) -> Result<(f64, Gradients)> {
    if batch.len() != traces.len() {
        return Err(Error::invalid("one trace per sequence required"));
    }
    if let Some(w) = frame_weights {
        if w.len() != batch.len() || w.iter().zip(batch).any(|(w, s)| w.len() != s.len()) {
            return Err(Error::invalid("frame weights do not match the batch"));
        }
    }
    let frames: usize = batch.iter().map(Sequence::len).sum();
    if frames == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let norm = 1.0 / frames as f64;

    let out = model.output();
    let w_out = out.weight.require_master()?;
    let (n_classes, top_dim) = w_out.shape();
    let mut g_out_w = vec![0.0; n_classes * top_dim];
    let mut g_out_b = vec![0.0; n_classes];
    let mut layer_grads: Vec<LayerGrads> = model.layers().iter().map(LayerGrads::zeros).collect();
    let mut loss = 0.0;

    for (s, (seq, trace)) in batch.iter().zip(traces).enumerate() {
        if trace.frames() != seq.len() || trace.layers.len() != model.layers().len() {
            return Err(Error::invalid("trace does not match sequence or model"));
        }
        let mut d_top: Vec<Vec<f64>> = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let label = seq.labels[t];
            if label >= n_classes {
                return Err(Error::invalid("label out of range"));
            }
            let w = frame_weights.map_or(1.0, |fw| fw[s][t]) * norm;
            let z = &trace.logits[t];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(z.iter().map(|&v| math::exp(v - max)).sum());
            loss += w * (lse - z[label]);

            let mut dz: Vec<f64> = trace.posteriors[t].iter().map(|&p| w * p).collect();
            dz[label] -= w;
            let top = trace.top_output(&seq.inputs, t);
            outer_acc(&mut g_out_w, &dz, top);
            g_out_b.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
            let mut dr = vec![0.0; top_dim];
            w_out.matvec_t_acc(&dz, &mut dr);
            d_top.push(dr);
        }
        for (l, layer) in model.layers().iter().enumerate().rev() {
            d_top = layer_backward(layer, &trace.layers[l], &d_top, &mut layer_grads[l], l > 0)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(alloc::format!("non-finite loss {loss}")));
    }

    let ids = param_ids(model);
    let mut values = Vec::with_capacity(ids.len());
    for lg in layer_grads {
        for g in lg.gates {
            values.push(g.input);
            values.push(g.recurrent);
            values.push(g.bias);
        }
        if let Some(p) = lg.projection {
            values.push(p);
        }
    }
    values.push(g_out_w);
    values.push(g_out_b);
    debug_assert_eq!(ids.len(), values.len());
    Ok((loss, Gradients { ids, values }))
}

/// BPTT through one layer. `d_out[t]` is the loss gradient w.r.t. the
/// layer output `r_t` from above; returns the gradient w.r.t. the layer
/// inputs when `want_dx` is set.
fn layer_backward(
    layer: &LstmLayer,
    steps: &[StepTrace],
    d_out: &[Vec<f64>],
    grads: &mut LayerGrads,
    want_dx: bool,
) -> Result<Vec<Vec<f64>>> {
    let n = layer.cells();
    let r_dim = layer.output_dim();
    let mut wx = Vec::with_capacity(4);
    let mut wr = Vec::with_capacity(4);
    for g in &layer.gates {
        wx.push(g.input.require_master()?);
        wr.push(g.recurrent.require_master()?);
    }
    let proj = match &layer.projection {
        Some(p) => Some(p.require_master()?),
        None => None,
    };

    let mut dx_all = vec![Vec::new(); if want_dx { steps.len() } else { 0 }];
    let mut dc_next = vec![0.0; n];
    let mut dr_rec = vec![0.0; r_dim];
    let mut dm = vec![0.0; n];
    let mut da = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let dr: Vec<f64> = d_out[t].iter().zip(&dr_rec).map(|(a, b)| a + b).collect();
        match (proj, grads.projection.as_mut()) {
            (Some(p), Some(gp)) => {
                outer_acc(gp, &dr, &s.m);
                dm.fill(0.0);
                p.matvec_t_acc(&dr, &mut dm);
            }
            _ => dm.copy_from_slice(&dr),
        }
        for k in 0..n {
            let (i, f, g, o, tc) = (s.i[k], s.f[k], s.g[k], s.o[k], s.tanh_c[k]);
            let d_o = dm[k] * tc;
            let dc = dc_next[k] + dm[k] * o * (1.0 - tc * tc);
            da[0][k] = dc * g * i * (1.0 - i);
            da[1][k] = dc * s.c_prev[k] * f * (1.0 - f);
            da[2][k] = dc * i * (1.0 - g * g);
            da[3][k] = d_o * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        dr_rec.fill(0.0);
        let mut dx = if want_dx {
            vec![0.0; layer.input_dim()]
        } else {
            Vec::new()
        };
        for (gate, d) in da.iter().enumerate() {
            let gg = &mut grads.gates[gate];
            outer_acc(&mut gg.input, d, &s.x);
            outer_acc(&mut gg.recurrent, d, &s.r_prev);
            gg.bias.iter_mut().zip(d).for_each(|(b, v)| *b += v);
            wr[gate].matvec_t_acc(d, &mut dr_rec);
            if want_dx {
                wx[gate].matvec_t_acc(d, &mut dx);
            }
        }
        if want_dx {
            dx_all[t] = dx;
        }
    }
    Ok(dx_all)
}
