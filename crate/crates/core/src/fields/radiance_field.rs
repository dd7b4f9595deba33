use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Linear, LinearVars, Module};
use super::EncodingConfig;
use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadianceFieldConfig {
    pub width: usize,
    pub depth: usize,
    /// Encoded position is concatenated onto the output of this (1-based) layer.
    pub skip_after: usize,
    pub position_encoding: EncodingConfig,
    pub direction_encoding: EncodingConfig,
}

impl Default for RadianceFieldConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 8,
            skip_after: 5,
            position_encoding: EncodingConfig::new(10),
            direction_encoding: EncodingConfig::new(4),
        }
    }
}

impl RadianceFieldConfig {
    pub fn position_dim(&self) -> usize {
        self.position_encoding.output_dim(3)
    }

    pub fn direction_dim(&self) -> usize {
        self.direction_encoding.output_dim(3)
    }

    fn has_skip(&self) -> bool {
        self.skip_after >= 1 && self.skip_after < self.depth
    }

    fn layer_input(&self, i: usize) -> usize {
        if i == 0 {
            self.position_dim()
        } else if self.has_skip() && i == self.skip_after {
            self.width + self.position_dim()
        } else {
            self.width
        }
    }

    pub fn view_width(&self) -> usize {
        (self.width / 2).max(1)
    }

    /// Multiply-accumulates of one forward evaluation, from layer shapes alone.
    pub fn macs(&self) -> u64 {
        let w = self.width;
        let trunk: usize = (0..self.depth).map(|i| self.layer_input(i) * w).sum();
        let heads = w + w * w + (w + self.direction_dim()) * self.view_width() + self.view_width() * 3;
        (trunk + heads) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::config(
                "radiance_field",
                "width and depth must be positive",
            ));
        }
        Ok(())
    }
}

/// Position + view direction → raw density and RGB.
///
/// Density is read off the position trunk before the view direction is seen, so it cannot
/// depend on direction.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub config: RadianceFieldConfig,
    pub trunk: Vec<Linear>,
    pub density: Linear,
    pub feature: Linear,
    pub view: Linear,
    pub rgb: Linear,
}

impl RadianceField {
    pub fn new<R: Rng + ?Sized>(config: RadianceFieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let gain = 2f64.sqrt();
        let trunk = (0..config.depth)
            .map(|i| Linear::init(config.layer_input(i), w, gain, rng))
            .collect();
        let density = Linear::init(w, 1, 1.0, rng);
        let feature = Linear::init(w, w, 1.0, rng);
        let view = Linear::init(w + config.direction_dim(), config.view_width(), gain, rng);
        let rgb = Linear::init(config.view_width(), 3, 1.0, rng);
        Ok(Self {
            config,
            trunk,
            density,
            feature,
            view,
            rgb,
        })
    }

    pub fn encode_positions(&self, xs: &[[f64; 3]]) -> Tensor {
        encode_rows(&self.config.position_encoding, xs)
    }

    pub fn encode_directions(&self, ds: &[[f64; 3]]) -> Tensor {
        encode_rows(&self.config.direction_encoding, ds)
    }

    /// `(raw density M×1, rgb M×3)` for encoded positions and directions.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[LinearVars],
        enc_x: Value,
        enc_d: Value,
    ) -> Result<(Value, Value)> {
        let depth = self.config.depth;
        let mut h = enc_x;
        for (i, layer) in vars[..depth].iter().enumerate() {
            let pre = layer.apply(g, h)?;
            h = g.relu(pre);
            if self.config.has_skip() && i + 1 == self.config.skip_after {
                h = g.concat(&[enc_x, h])?;
            }
        }
        let raw = vars[depth].apply(g, h)?;
        let feat = vars[depth + 1].apply(g, h)?;
        let joined = g.concat(&[feat, enc_d])?;
        let pre = vars[depth + 2].apply(g, joined)?;
        let v = g.relu(pre);
        let logits = vars[depth + 3].apply(g, v)?;
        let rgb = g.sigmoid(logits);
        Ok((raw, rgb))
    }

    /// Evaluates a single point.
    pub fn query(&self, x: [f64; 3], d: [f64; 3]) -> Result<(f64, [f64; 3])> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let ex = g.constant(self.encode_positions(&[x]));
        let ed = g.constant(self.encode_directions(&[d]));
        let (raw, rgb) = self.forward(&mut g, &vars, ex, ed)?;
        let c = g.data(rgb);
        Ok((g.scalar(raw), [c[[0, 0]], c[[0, 1]], c[[0, 2]]]))
    }

    pub fn macs(&self) -> u64 {
        self.linears().iter().map(|(_, l)| l.macs()).sum()
    }
}

pub(crate) fn encode_rows(cfg: &EncodingConfig, rows: &[[f64; 3]]) -> Tensor {
    let dim = cfg.output_dim(3);
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in cfg.encode(r).into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

impl Module for RadianceField {
    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .collect();
        out.push(("density".into(), &self.density));
        out.push(("feature".into(), &self.feature));
        out.push(("view".into(), &self.view));
        out.push(("rgb".into(), &self.rgb));
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.trunk.iter_mut().collect();
        out.push(&mut self.density);
        out.push(&mut self.feature);
        out.push(&mut self.view);
        out.push(&mut self.rgb);
        out
    }
}
