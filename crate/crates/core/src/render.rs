//! Quadrature volume rendering and the training losses.
//!
//! Two routes compute the same quantities: [`composite`] works on plain per-ray data and is
//! used for inspection and oracles, [`composite_graph`] records the batched computation on a
//! [`Graph`] for training.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::sampling::SampleSet;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Activated densities actually composited.
    pub sigma: Vec<f64>,
    /// Weighted sum of sample depths; zero for an empty ray.
    pub depth: f64,
    /// `Σ w_i`.
    pub opacity: f64,
}

/// Composites one ray. `noise_std > 0` adds Gaussian noise to the raw densities before the
/// ReLU activation.
pub fn composite<R: Rng + ?Sized>(
    samples: &SampleSet,
    raw_density: &[f64],
    rgb: &[[f64; 3]],
    noise_std: f64,
    background: Option<[f64; 3]>,
    rng: &mut R,
) -> Result<RenderOutput> {
    let n = samples.len();
    if raw_density.len() != n || rgb.len() != n {
        return Err(Error::Shape {
            op: "composite",
            lhs: (n, 1),
            rhs: (raw_density.len(), rgb.len()),
        });
    }
    if !samples.is_sorted() {
        return Err(Error::invalid("composite", "sample depths are not ascending"));
    }
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).map_err(|e| Error::invalid("composite", e.to_string()))?)
    } else {
        None
    };
    let mut out = RenderOutput {
        color: [0.0; 3],
        weights: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
        depth: 0.0,
        opacity: 0.0,
    };
    let mut trans = 1.0;
    for i in 0..n {
        let eps = noise.as_ref().map_or(0.0, |d| d.sample(rng));
        let sigma = (raw_density[i] + eps).max(0.0);
        let decay = (-sigma * samples.gaps[i]).exp();
        let w = trans * (1.0 - decay);
        for c in 0..3 {
            out.color[c] += w * rgb[i][c];
        }
        out.depth += w * samples.depths[i];
        out.opacity += w;
        out.weights.push(w);
        out.transmittance.push(trans);
        out.sigma.push(sigma);
        trans *= decay;
    }
    if let Some(bg) = background {
        for c in 0..3 {
            out.color[c] += bg[c] * (1.0 - out.opacity);
        }
    }
    Ok(out)
}

/// Batched compositing handles recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphRender {
    /// `B × 3`, background included.
    pub color: Value,
    /// `B × N`.
    pub weights: Value,
    /// `B × N` activated densities.
    pub sigma: Value,
    /// `B × 1`.
    pub depth: Value,
    /// `B × 1`.
    pub opacity: Value,
    /// `(B·N) × 3` per-sample colors.
    pub rgb: Value,
}

/// Composites a batch: `depths` is `B × N` (ascending per row), `raw` is `B × N`, `rgb` is
/// `(B·N) × 3` in ray-major order. `noise` (if any) is added to `raw` before activation.
pub fn composite_graph(
    g: &mut Graph,
    depths: Value,
    far: &[f64],
    raw: Value,
    rgb: Value,
    noise: Option<Tensor>,
    background: Option<[f64; 3]>,
) -> Result<GraphRender> {
    let (b, n) = g.shape(depths);
    if g.shape(raw) != (b, n) || g.shape(rgb) != (b * n, 3) {
        return Err(Error::Shape {
            op: "composite",
            lhs: g.shape(raw),
            rhs: g.shape(rgb),
        });
    }
    let delta = g.gaps(depths, far)?;
    let pre = match noise {
        Some(eps) => {
            let e = g.constant(eps);
            g.add(raw, e)?
        }
        None => raw,
    };
    let sigma = g.relu(pre);
    let tau = g.mul(sigma, delta)?;
    let neg_tau = g.neg(tau);
    let decay = g.exp(neg_tau);
    let alpha = {
        let m = g.neg(decay);
        g.add_scalar(m, 1.0)
    };
    let acc = g.cumsum_exclusive(tau);
    let neg_acc = g.neg(acc);
    let trans = g.exp(neg_acc);
    let weights = g.mul(trans, alpha)?;
    let wcol = g.reshape(weights, b * n, 1)?;
    let contrib = g.mul(wcol, rgb)?;
    let mut color = g.segment_sum(contrib, n)?;
    let opacity = g.row_sums(weights);
    let wt = g.mul(weights, depths)?;
    let depth = g.row_sums(wt);
    if let Some(bg) = background {
        let neg = g.neg(opacity);
        let remaining = g.add_scalar(neg, 1.0);
        let bgv = g.constant(Array2::from_shape_vec((1, 3), bg.to_vec()).expect("3 values"));
        let fill = g.mul(remaining, bgv)?;
        color = g.add(color, fill)?;
    }
    Ok(GraphRender {
        color,
        weights,
        sigma,
        depth,
        opacity,
        rgb,
    })
}

/// `Σ_rays ‖Ĉ − C‖² / normalizer`. With `normalizer = B` this is the batch mean.
pub fn color_loss_graph(g: &mut Graph, rendered: Value, reference: Value, normalizer: f64) -> Result<Value> {
    if g.shape(rendered) != g.shape(reference) {
        return Err(Error::Shape {
            op: "color_loss",
            lhs: g.shape(rendered),
            rhs: g.shape(reference),
        });
    }
    let diff = g.sub(rendered, reference)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / normalizer))
}

/// Mean over the batch of the squared L2 color error.
pub fn color_loss(rendered: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(Error::Shape {
            op: "color_loss",
            lhs: (rendered.len(), 3),
            rhs: (reference.len(), 3),
        });
    }
    let total: f64 = rendered
        .iter()
        .zip(reference)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / rendered.len() as f64)
}

/// `|mean(t^e) − d_r|` for one ray.
pub fn depth_boost_loss(extracted: &[f64], target: f64) -> Result<f64> {
    if extracted.is_empty() {
        return Err(Error::invalid("depth_boost_loss", "no extracted samples"));
    }
    let mean = extracted.iter().sum::<f64>() / extracted.len() as f64;
    Ok((mean - target).abs())
}

/// Batched depth-boost loss: `depths` is `B × N_e`, `target` is a `B × 1` constant. Returns
/// `Σ_rays |mean_row − d_r| / normalizer`.
pub fn depth_boost_loss_graph(
    g: &mut Graph,
    depths: Value,
    target: Value,
    normalizer: f64,
) -> Result<Value> {
    let (b, n) = g.shape(depths);
    if g.shape(target) != (b, 1) || n == 0 {
        return Err(Error::Shape {
            op: "depth_boost_loss",
            lhs: (b, n),
            rhs: g.shape(target),
        });
    }
    let sums = g.row_sums(depths);
    let mean = g.scale(sums, 1.0 / n as f64);
    let diff = g.sub(mean, target)?;
    let abs = g.abs(diff);
    let total = g.sum(abs);
    Ok(g.scale(total, 1.0 / normalizer))
}
