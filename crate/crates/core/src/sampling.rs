//! Ray-to-depth sample placement: stratified bins, inverse-CDF resampling for the hierarchical
//! baseline, and the mapping from sample-field outputs to ordered world-space samples.

use rand::Rng;

use crate::autodiff::MIN_GAP;
use crate::error::{Error, Result};
use crate::fields::{checked_unit, SampleField};

/// Default mass floor added to every bin before normalizing a resampling PDF.
pub const WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64) -> Result<Self> {
        if !(near < far) {
            return Err(Error::invalid("ray", format!("near {near} must be below far {far}")));
        }
        let direction = checked_unit(direction, true)?;
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        let (o, d) = (self.origin, self.direction);
        [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
    }
}

/// Ordered samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    /// `δ_i = t_{i+1} − t_i`; the last gap runs to the far bound, clamped below by [`MIN_GAP`].
    pub gaps: Vec<f64>,
}

impl SampleSet {
    /// Builds positions and gaps from ascending depths.
    pub fn from_depths(ray: &Ray, depths: Vec<f64>) -> Self {
        let positions = depths.iter().map(|&t| ray.at(t)).collect();
        let gaps = gaps(&depths, ray.far);
        Self {
            depths,
            positions,
            gaps,
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.depths.windows(2).all(|w| w[0] <= w[1])
    }
}

pub fn gaps(depths: &[f64], far: f64) -> Vec<f64> {
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = depths.last() {
        out.push((far - last).max(MIN_GAP));
    }
    out
}

/// One depth per evenly partitioned bin of `[near, far]`, placed at `near + (i + u_i)·Δ` with
/// `u_i` drawn from `jitter`.
pub fn stratified_depths(near: f64, far: f64, n: usize, mut jitter: impl FnMut() -> f64) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|i| near + (i as f64 + jitter()) * step)
        .collect()
}

pub fn stratified_sample<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: &mut R) -> SampleSet {
    let depths = stratified_depths(ray.near, ray.far, n, || rng.random::<f64>());
    SampleSet::from_depths(ray, depths)
}

/// Bin midpoints, the deterministic variant used at evaluation time.
pub fn midpoint_depths(near: f64, far: f64, n: usize) -> Vec<f64> {
    stratified_depths(near, far, n, || 0.5)
}

/// Bin edges around ascending sample depths: interior edges at midpoints between neighbours,
/// outer edges at the ray bounds.
pub fn bin_edges(centers: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut edges = Vec::with_capacity(centers.len() + 1);
    edges.push(near);
    edges.extend(centers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(far);
    edges
}

/// Piecewise-constant density over bins, sampled by inverting its CDF.
#[derive(Clone, Debug)]
pub struct PiecewiseConstantPdf {
    edges: Vec<f64>,
    cdf: Vec<f64>,
}

impl PiecewiseConstantPdf {
    /// `weights[i]` is the (unnormalized) mass of `[edges[i], edges[i+1]]`. A zero total falls
    /// back to uniform mass.
    pub fn new(edges: Vec<f64>, weights: &[f64], floor: f64) -> Result<Self> {
        if edges.len() != weights.len() + 1 || weights.is_empty() {
            return Err(Error::Shape {
                op: "inverse_cdf_resample",
                lhs: (edges.len(), 1),
                rhs: (weights.len(), 1),
            });
        }
        let mass: Vec<f64> = weights.iter().map(|w| w.max(0.0) + floor).collect();
        let total: f64 = mass.iter().sum();
        let mut cdf = Vec::with_capacity(edges.len());
        cdf.push(0.0);
        let mut acc = 0.0;
        for m in &mass {
            acc += if total > 0.0 {
                m / total
            } else {
                1.0 / mass.len() as f64
            };
            cdf.push(acc);
        }
        let last = cdf.len() - 1;
        cdf[last] = 1.0;
        Ok(Self { edges, cdf })
    }

    pub fn bin_mass(&self, i: usize) -> f64 {
        self.cdf[i + 1] - self.cdf[i]
    }

    /// Inverse CDF at `u ∈ [0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        // first bin whose upper CDF exceeds u; zero-mass bins are skipped automatically
        let i = self.cdf[1..]
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 2);
        let mass = self.bin_mass(i);
        let frac = if mass > 0.0 {
            ((u - self.cdf[i]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        self.edges[i] + frac * (self.edges[i + 1] - self.edges[i])
    }
}

/// Draws `n_fine` depths from the PDF with mass `∝ weights[i] + floor` on the bin around
/// `coarse[i]`, returned ascending.
pub fn inverse_cdf_resample<R: Rng + ?Sized>(
    coarse: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    floor: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let pdf = PiecewiseConstantPdf::new(bin_edges(coarse, near, far), weights, floor)?;
    let mut out: Vec<f64> = (0..n_fine).map(|_| pdf.quantile(rng.random())).collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Deterministic counterpart of [`inverse_cdf_resample`] at evenly spaced quantiles.
pub fn inverse_cdf_quantiles(
    coarse: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    floor: f64,
) -> Result<Vec<f64>> {
    let pdf = PiecewiseConstantPdf::new(bin_edges(coarse, near, far), weights, floor)?;
    Ok((0..n_fine)
        .map(|k| pdf.quantile((k as f64 + 0.5) / n_fine as f64))
        .collect())
}

/// `t_i = (1 − t̂_i)·t_n + t̂_i·t_f`, sorted ascending.
pub fn relative_to_absolute(ray: &Ray, rel: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = rel
        .iter()
        .map(|&u| (1.0 - u) * ray.near + u * ray.far)
        .collect();
    t.sort_by(f64::total_cmp);
    t
}

pub fn to_world_samples(ray: &Ray, rel: &[f64]) -> SampleSet {
    SampleSet::from_depths(ray, relative_to_absolute(ray, rel))
}

/// Head channels kept when shrinking `n` outputs to `n_e`: `⌊(i + ½)·n / n_e⌋`.
pub fn extraction_indices(n: usize, n_e: usize) -> Result<Vec<usize>> {
    if n_e == 0 || n_e > n {
        return Err(Error::invalid(
            "extract_field_params",
            format!("cannot extract {n_e} outputs from a field with {n}"),
        ));
    }
    Ok((0..n_e).map(|i| ((2 * i + 1) * n) / (2 * n_e)).collect())
}

/// Copies the trunk verbatim and evenly selects head rows (weights and bias).
pub fn extract_field_params(regular: &SampleField, n_e: usize) -> Result<SampleField> {
    let rows = extraction_indices(regular.n_samples(), n_e)?;
    let mut out = regular.clone();
    out.config.n_samples = n_e;
    out.head.weight = regular.head.weight.select(ndarray::Axis(0), &rows);
    out.head.bias = regular.head.bias.select(ndarray::Axis(1), &rows);
    Ok(out)
}
