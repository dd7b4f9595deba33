use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Sinusoidal positional encoding. Each scalar `p` becomes
/// `[p?, sin(b⁰πp), cos(b⁰πp), …, sin(b^{L-1}πp), cos(b^{L-1}πp)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_identity: bool,
    #[serde(default = "default_base")]
    pub frequency_base: f64,
}

fn default_base() -> f64 {
    2.0
}

impl EncodingConfig {
    pub fn new(num_frequencies: usize) -> Self {
        Self {
            num_frequencies,
            include_identity: true,
            frequency_base: 2.0,
        }
    }

    pub fn width_per_scalar(&self) -> usize {
        2 * self.num_frequencies + usize::from(self.include_identity)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.width_per_scalar()
    }

    /// Angular frequencies `b^l·π` for `l = 0..L`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.num_frequencies)
            .map(|l| self.frequency_base.powi(l as i32) * PI)
            .collect()
    }

    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        let freqs = self.frequencies();
        let mut out = Vec::with_capacity(self.output_dim(v.len()));
        for &p in v {
            if self.include_identity {
                out.push(p);
            }
            for &w in &freqs {
                let (s, c) = (w * p).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::Array2;

    #[test]
    fn zero_with_two_frequencies() {
        let cfg = EncodingConfig::new(2);
        assert_eq!(cfg.encode(&[0.0]), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_without_identity() {
        let cfg = EncodingConfig {
            include_identity: false,
            ..EncodingConfig::new(1)
        };
        let out = cfg.encode(&[1.0]);
        assert_eq!(out.len(), 2);
        assert!(out[0].abs() < 1e-15);
        assert_eq!(out[1], -1.0);
    }

    #[test]
    fn three_vector_at_ten_frequencies() {
        let cfg = EncodingConfig::new(10);
        assert_eq!(cfg.encode(&[0.1, 0.2, 0.3]).len(), 63);
        assert_eq!(cfg.output_dim(3), 63);
    }

    #[test]
    fn graph_op_matches_plain_encoding() {
        let cfg = EncodingConfig::new(4);
        let v = [0.3, -0.7, 1.9];
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_vec((1, 3), v.to_vec()).unwrap());
        let e = g.positional_encode(x, cfg);
        let got: Vec<f64> = g.data(e).iter().copied().collect();
        assert_eq!(got, cfg.encode(&v));
    }
}
