use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Linear, LinearVars, Module};
use super::EncodingConfig;
use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFieldConfig {
    pub width: usize,
    pub depth: usize,
    /// The encoded input is concatenated onto the output of this (1-based) layer.
    /// Values outside `1..depth` disable the skip.
    pub skip_after: usize,
    pub n_samples: usize,
    pub origin_encoding: EncodingConfig,
    pub direction_encoding: EncodingConfig,
}

impl Default for SampleFieldConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 8,
            skip_after: 4,
            n_samples: 192,
            origin_encoding: EncodingConfig::new(10),
            direction_encoding: EncodingConfig::new(10),
        }
    }
}

impl SampleFieldConfig {
    pub fn input_dim(&self) -> usize {
        self.origin_encoding.output_dim(3) + self.direction_encoding.output_dim(3)
    }

    fn has_skip(&self) -> bool {
        self.skip_after >= 1 && self.skip_after < self.depth
    }

    /// Input width of trunk layer `i` (0-based).
    fn layer_input(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim()
        } else if self.has_skip() && i == self.skip_after {
            self.width + self.input_dim()
        } else {
            self.width
        }
    }

    /// Multiply-accumulates of one forward evaluation (one per ray), from layer shapes alone.
    pub fn macs(&self) -> u64 {
        let trunk: usize = (0..self.depth).map(|i| self.layer_input(i) * self.width).sum();
        (trunk + self.width * self.n_samples) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::config("sample_field", "width and depth must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("sample_field.n_samples", "must be positive"));
        }
        Ok(())
    }
}

/// Maps a ray `(o, d)` to `N` relative depths in `(0, 1)`: encoded input, a ReLU trunk with one
/// skip concatenation, and a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleField {
    pub config: SampleFieldConfig,
    pub trunk: Vec<Linear>,
    pub head: Linear,
}

impl SampleField {
    pub fn new<R: Rng + ?Sized>(config: SampleFieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let trunk = (0..config.depth)
            .map(|i| Linear::init(config.layer_input(i), config.width, 2f64.sqrt(), rng))
            .collect();
        let head = Linear::init(config.width, config.n_samples, 1.0, rng);
        Ok(Self {
            config,
            trunk,
            head,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.head.fan_out()
    }

    /// `[γ(o), γ(d)]` for a batch of rays.
    pub fn encode_rays(&self, origins: &[[f64; 3]], directions: &[[f64; 3]]) -> Tensor {
        let dim = self.config.input_dim();
        let mut out = Array2::zeros((origins.len(), dim));
        for (i, (o, d)) in origins.iter().zip(directions).enumerate() {
            let eo = self.config.origin_encoding.encode(o);
            let ed = self.config.direction_encoding.encode(d);
            for (j, v) in eo.into_iter().chain(ed).enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Relative depths `t̂` for every row of an encoded ray batch (`B × N`).
    pub fn forward(&self, g: &mut Graph, vars: &[LinearVars], input: Value) -> Result<Value> {
        let (_, h) = self.forward_hidden(g, vars, input)?;
        let logits = vars[self.config.depth].apply(g, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Trunk activations of every layer plus the final hidden value.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        vars: &[LinearVars],
        input: Value,
    ) -> Result<(Vec<Value>, Value)> {
        let mut h = input;
        let mut hidden = Vec::with_capacity(self.config.depth);
        for (i, layer) in vars[..self.config.depth].iter().enumerate() {
            let pre = layer.apply(g, h)?;
            h = g.relu(pre);
            hidden.push(h);
            if self.config.has_skip() && i + 1 == self.config.skip_after {
                h = g.concat(&[input, h])?;
            }
        }
        Ok((hidden, h))
    }

    /// Evaluates one ray. Directions off unit length by more than `1e-6` are an error when
    /// `strict`, otherwise normalized with a warning.
    pub fn predict(&self, origin: [f64; 3], direction: [f64; 3], strict: bool) -> Result<Vec<f64>> {
        let dir = checked_unit(direction, strict)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(self.encode_rays(&[origin], &[dir]));
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.data(out).iter().copied().collect())
    }

    pub fn macs(&self) -> u64 {
        self.trunk.iter().map(Linear::macs).sum::<u64>() + self.head.macs()
    }
}

pub(crate) fn checked_unit(d: [f64; 3], strict: bool) -> Result<[f64; 3]> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (n - 1.0).abs() <= 1e-6 {
        return Ok(d);
    }
    if strict || n == 0.0 || !n.is_finite() {
        return Err(Error::invalid(
            "sample_field_forward",
            format!("direction {d:?} has norm {n}"),
        ));
    }
    log::warn!("normalizing non-unit ray direction {d:?} (norm {n})");
    Ok([d[0] / n, d[1] / n, d[2] / n])
}

impl Module for SampleField {
    fn linears(&self) -> Vec<(String, &Linear)> {
        self.trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .chain(std::iter::once(("head".to_string(), &self.head)))
            .collect()
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .collect()
    }
}
