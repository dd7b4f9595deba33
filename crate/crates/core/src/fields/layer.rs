use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::Result;

/// Fully connected layer, `weight` is `out × in`, `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Kaiming-style uniform init: `U(±gain·√(3/fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            rng.random_range(-bound..=bound)
        });
        Self {
            weight,
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn macs(&self) -> u64 {
        (self.fan_in() * self.fan_out()) as u64
    }
}

/// Weight and bias handles of a [`Linear`] bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Value,
    pub bias: Value,
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Value) -> Result<Value> {
        g.linear(x, self.weight, self.bias)
    }
}

/// Named parameter traversal shared by both field networks.
pub trait Module {
    fn linears(&self) -> Vec<(String, &Linear)>;
    fn linears_mut(&mut self) -> Vec<&mut Linear>;

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.linears()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.linears_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Copies every parameter onto `g`, in [`Module::named_params`] order.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<LinearVars> {
        self.linears()
            .into_iter()
            .map(|(_, l)| LinearVars {
                weight: g.leaf(l.weight.clone(), trainable),
                bias: g.leaf(l.bias.clone(), trainable),
            })
            .collect()
    }
}

/// Flattens bound layers into parameter order.
pub fn flat_values(vars: &[LinearVars]) -> Vec<Value> {
    vars.iter().flat_map(|v| [v.weight, v.bias]).collect()
}
