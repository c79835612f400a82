use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
            Activation::Softmax => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Sigmoid,
            1 => Activation::Tanh,
            2 => Activation::Softmax,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

pub fn activate_in_place(kind: Activation, v: &mut [f64]) {
    match kind {
        Activation::Sigmoid => v.iter_mut().for_each(|x| *x = math::sigmoid(*x)),
        Activation::Tanh => v.iter_mut().for_each(|x| *x = math::tanh(*x)),
        Activation::Identity => {}
        Activation::Softmax => {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in v.iter_mut() {
                *x = math::exp(*x - max);
                sum += *x;
            }
            v.iter_mut().for_each(|x| *x /= sum);
        }
    }
}

pub fn activation(kind: Activation, v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    activate_in_place(kind, &mut out);
    out
}
