use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::weight::{Operand, Weight};
use super::Precision;
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::FloatMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Weights of one gate. Each matrix is quantized independently.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `N × input_dim`
    pub input: Weight,
    /// `N × R` where `R` is the projection size, or `N` without projection.
    pub recurrent: Weight,
    pub bias: Vec<f64>,
}

/// LSTM layer with an optional linear recurrent projection, no peepholes.
///
/// ```text
/// i  = σ(W_ix x + W_ir r + b_i)
/// f  = σ(W_fx x + W_fr r + b_f)
/// g  = tanh(W_cx x + W_cr r + b_c)
/// c' = f ⊙ c + i ⊙ g
/// o  = σ(W_ox x + W_or r + b_o)
/// m  = o ⊙ tanh(c')
/// r' = W_rm m   (or m without projection)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    input_dim: usize,
    cells: usize,
    pub gates: [GateParams; 4],
    /// `P × N`
    pub projection: Option<Weight>,
    pub quantize_enabled: bool,
}

impl LstmLayer {
    pub fn new(gates: [GateParams; 4], projection: Option<Weight>) -> Result<Self> {
        let cells = gates[0].input.rows();
        let input_dim = gates[0].input.cols();
        let out_dim = match &projection {
            Some(p) => {
                if p.cols() != cells {
                    return Err(Error::dims("lstm projection", p.shape(), (cells, 1)));
                }
                p.rows()
            }
            None => cells,
        };
        for g in &gates {
            if g.input.shape() != (cells, input_dim) {
                return Err(Error::dims(
                    "lstm input weight",
                    g.input.shape(),
                    (cells, input_dim),
                ));
            }
            if g.recurrent.shape() != (cells, out_dim) {
                return Err(Error::dims(
                    "lstm recurrent weight",
                    g.recurrent.shape(),
                    (cells, out_dim),
                ));
            }
            if g.bias.len() != cells {
                return Err(Error::dims("lstm bias", (g.bias.len(), 1), (cells, 1)));
            }
        }
        Ok(Self {
            input_dim,
            cells,
            gates,
            projection,
            quantize_enabled: false,
        })
    }

    /// Uniform `±1/√fan_in` initialization, forget-gate bias 1.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        cells: usize,
        projection: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || cells == 0 || projection == Some(0) {
            return Err(Error::invalid("lstm dimensions must be positive"));
        }
        let out_dim = projection.unwrap_or(cells);
        let fan_in = (input_dim + out_dim) as f64;
        let gates = Gate::ALL.map(|gate| GateParams {
            input: Weight::from_master(uniform(rng, cells, input_dim, fan_in)),
            recurrent: Weight::from_master(uniform(rng, cells, out_dim, fan_in)),
            bias: vec![if gate == Gate::Forget { 1.0 } else { 0.0 }; cells],
        });
        let projection =
            projection.map(|p| Weight::from_master(uniform(rng, p, cells, cells as f64)));
        Self::new(gates, projection)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn projection_dim(&self) -> Option<usize> {
        self.projection.as_ref().map(Weight::rows)
    }

    /// Size of `r`: the projection size, or the cell count.
    pub fn output_dim(&self) -> usize {
        self.projection_dim().unwrap_or(self.cells)
    }

    pub fn param_count(&self) -> usize {
        let gate = self.cells * (self.input_dim + self.output_dim()) + self.cells;
        4 * gate + self.projection_dim().map_or(0, |p| p * self.cells)
    }

    pub fn weights(&self) -> impl Iterator<Item = &Weight> {
        self.gates
            .iter()
            .flat_map(|g| [&g.input, &g.recurrent])
            .chain(self.projection.as_ref())
    }

    pub fn weights_mut(&mut self) -> impl Iterator<Item = &mut Weight> {
        self.gates
            .iter_mut()
            .flat_map(|g| [&mut g.input, &mut g.recurrent])
            .chain(self.projection.as_mut())
    }

    pub fn step_trace(
        &self,
        x: &[f64],
        state: &LstmState,
        precision: Precision,
    ) -> Result<StepTrace> {
        if x.len() != self.input_dim {
            return Err(Error::dims(
                "lstm_step input",
                (x.len(), 1),
                (self.input_dim, 1),
            ));
        }
        if state.c.len() != self.cells || state.r.len() != self.output_dim() {
            return Err(Error::invalid("lstm state does not match the layer"));
        }
        let quantized = precision == Precision::Quantized && self.quantize_enabled;
        let mut xo = Operand::new(x);
        let mut ro = Operand::new(&state.r);
        let mut pre = |g: &GateParams| -> Result<Vec<f64>> {
            let mut a = g.input.apply(&mut xo, quantized)?;
            let b = g.recurrent.apply(&mut ro, quantized)?;
            for ((a, b), bias) in a.iter_mut().zip(b).zip(&g.bias) {
                *a += b + bias;
            }
            Ok(a)
        };
        let mut i = pre(&self.gates[0])?;
        let mut f = pre(&self.gates[1])?;
        let mut g = pre(&self.gates[2])?;
        let mut o = pre(&self.gates[3])?;
        i.iter_mut().for_each(|v| *v = math::sigmoid(*v));
        f.iter_mut().for_each(|v| *v = math::sigmoid(*v));
        g.iter_mut().for_each(|v| *v = math::tanh(*v));
        o.iter_mut().for_each(|v| *v = math::sigmoid(*v));

        let c: Vec<f64> = (0..self.cells)
            .map(|k| f[k] * state.c[k] + i[k] * g[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|&v| math::tanh(v)).collect();
        let m: Vec<f64> = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
        let r = match &self.projection {
            Some(p) => p.apply(&mut Operand::new(&m), quantized)?,
            None => m.clone(),
        };
        Ok(StepTrace {
            x: x.to_vec(),
            r_prev: state.r.clone(),
            c_prev: state.c.clone(),
            i,
            f,
            g,
            o,
            c,
            tanh_c,
            m,
            r,
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: f64) -> FloatMatrix {
    let s = 1.0 / math::sqrt(fan_in);
    let values = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    FloatMatrix::from_raw(rows, cols, values)
}

/// Cell state and recurrent output carried between time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub r: Vec<f64>,
}

impl LstmState {
    pub fn zeros(layer: &LstmLayer) -> Self {
        Self {
            c: vec![0.0; layer.cells()],
            r: vec![0.0; layer.output_dim()],
        }
    }
}

/// Everything one step computed, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub x: Vec<f64>,
    pub r_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
}

impl StepTrace {
    pub fn state(&self) -> LstmState {
        LstmState {
            c: self.c.clone(),
            r: self.r.clone(),
        }
    }
}

pub fn lstm_step(
    layer: &LstmLayer,
    x: &[f64],
    state: &LstmState,
    precision: Precision,
) -> Result<(Vec<f64>, LstmState)> {
    let trace = layer.step_trace(x, state, precision)?;
    let next = LstmState {
        c: trace.c,
        r: trace.r.clone(),
    };
    Ok((trace.r, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(input_dim: usize, cells: usize, proj: Option<usize>) -> LstmLayer {
        let r = proj.unwrap_or(cells);
        let gates = Gate::ALL.map(|_| GateParams {
            input: Weight::from_master(FloatMatrix::zeros(cells, input_dim)),
            recurrent: Weight::from_master(FloatMatrix::zeros(cells, r)),
            bias: vec![0.0; cells],
        });
        let projection = proj.map(|p| {
            let mut m = FloatMatrix::zeros(p, cells);
            for (k, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v = 0.1 * (k as f64 + 1.0);
            }
            Weight::from_master(m)
        });
        LstmLayer::new(gates, projection).unwrap()
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let layer = zero_layer(2, 3, Some(2));
        let state = LstmState {
            c: vec![1.0, -2.0, 0.5],
            r: vec![0.3, -0.3],
        };
        let t = layer
            .step_trace(&[4.0, -1.0], &state, Precision::Float)
            .unwrap();
        assert_eq!(t.i, vec![0.5; 3]);
        assert_eq!(t.f, vec![0.5; 3]);
        assert_eq!(t.o, vec![0.5; 3]);
        assert_eq!(t.g, vec![0.0; 3]);
        assert_eq!(t.c, vec![0.5, -1.0, 0.25]);
        let m: Vec<f64> = t.c.iter().map(|&c| 0.5 * libm::tanh(c)).collect();
        assert_eq!(t.m, m);
        let p = layer.projection.as_ref().unwrap().master().unwrap();
        assert_eq!(t.r, p.matvec(&m));
    }

    #[test]
    fn zero_everything_gives_zero_output() {
        let layer = zero_layer(2, 3, None);
        let (r, s) = lstm_step(
            &layer,
            &[0.0, 0.0],
            &LstmState::zeros(&layer),
            Precision::Float,
        )
        .unwrap();
        assert_eq!(r, vec![0.0; 3]);
        assert_eq!(s.c, vec![0.0; 3]);
    }

    #[test]
    fn single_cell_matches_scripted_oracle() {
        // Hand-set N=1, D=2 layer, no projection.
        let w = |x: f64, y: f64, r: f64| {
            (
                Weight::from_master(FloatMatrix::from_rows(&[[x, y]]).unwrap()),
                Weight::from_master(FloatMatrix::from_rows(&[[r]]).unwrap()),
            )
        };
        let params = [
            (0.3, -0.2, 0.5, 0.1),
            (-0.4, 0.6, 0.2, 1.0),
            (0.7, 0.1, -0.3, -0.2),
            (0.2, 0.2, 0.9, 0.05),
        ];
        let gates = [0, 1, 2, 3].map(|k| {
            let (a, b, r, bias) = params[k];
            let (input, recurrent) = w(a, b, r);
            GateParams {
                input,
                recurrent,
                bias: vec![bias],
            }
        });
        let layer = LstmLayer::new(gates, None).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xs = [[0.5, -1.0], [1.5, 0.25], [-0.75, 0.8]];
        let (mut c, mut r) = (0.0f64, 0.0f64);
        let mut state = LstmState::zeros(&layer);
        for x in xs {
            let pre =
                |k: usize| params[k].0 * x[0] + params[k].1 * x[1] + params[k].2 * r + params[k].3;
            let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
            c = f * c + i * g;
            r = o * c.tanh();
            let (out, next) = lstm_step(&layer, &x, &state, Precision::Float).unwrap();
            assert!((out[0] - r).abs() <= 1e-12);
            assert!((next.c[0] - c).abs() <= 1e-12);
            state = next;
        }
    }

    #[test]
    fn unflagged_layer_is_float_in_quantized_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = LstmLayer::random(3, 4, Some(2), &mut rng).unwrap();
        let s = LstmState::zeros(&layer);
        let x = [0.2, -0.1, 0.9];
        assert_eq!(
            layer.step_trace(&x, &s, Precision::Quantized).unwrap(),
            layer.step_trace(&x, &s, Precision::Float).unwrap()
        );
    }

    #[test]
    fn param_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LstmLayer::random(5, 4, Some(3), &mut rng).unwrap();
        assert_eq!(l.param_count(), 4 * (4 * 5 + 4 * 3 + 4) + 3 * 4);
        let l = LstmLayer::random(5, 4, None, &mut rng).unwrap();
        assert_eq!(l.param_count(), 4 * (4 * 5 + 4 * 4 + 4));
    }
}
