//! The two rendering pipelines: single-shot NeuSample (sample field → radiance field) and the
//! hierarchical coarse/fine baseline.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::fields::{
    encode_rows, LinearVars, Module, RadianceField, RadianceFieldConfig, SampleField,
    SampleFieldConfig,
};
use crate::render::{composite_graph, GraphRender};
use crate::sampling::{
    inverse_cdf_quantiles, inverse_cdf_resample, midpoint_depths, stratified_depths, Ray,
    WEIGHT_FLOOR,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Neusample,
    Hierarchical,
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineKind::Neusample => "neusample",
            PipelineKind::Hierarchical => "hierarchical",
        })
    }
}

/// Architecture of a pipeline, without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PipelineSpec {
    Neusample {
        sample_field: SampleFieldConfig,
        radiance: RadianceFieldConfig,
    },
    /// Coarse and fine networks share one architecture.
    Hierarchical {
        radiance: RadianceFieldConfig,
        n_coarse: usize,
        n_fine: usize,
    },
}

impl PipelineSpec {
    pub fn kind(&self) -> PipelineKind {
        match self {
            PipelineSpec::Neusample { .. } => PipelineKind::Neusample,
            PipelineSpec::Hierarchical { .. } => PipelineKind::Hierarchical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PipelineSpec::Neusample {
                sample_field,
                radiance,
            } => {
                sample_field.validate()?;
                radiance.validate()
            }
            PipelineSpec::Hierarchical {
                radiance,
                n_coarse,
                n_fine,
            } => {
                if *n_coarse == 0 || *n_fine == 0 {
                    return Err(Error::config(
                        "pipeline.n_coarse/n_fine",
                        "sample counts must be positive",
                    ));
                }
                radiance.validate()
            }
        }
    }

    /// Freshly initialized networks.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Pipeline> {
        self.validate()?;
        Ok(match self {
            PipelineSpec::Neusample {
                sample_field,
                radiance,
            } => Pipeline::NeuSample(NeuSample {
                sample_field: SampleField::new(sample_field.clone(), rng)?,
                radiance: RadianceField::new(radiance.clone(), rng)?,
            }),
            PipelineSpec::Hierarchical {
                radiance,
                n_coarse,
                n_fine,
            } => Pipeline::Hierarchical(Hierarchical {
                coarse: RadianceField::new(radiance.clone(), rng)?,
                fine: RadianceField::new(radiance.clone(), rng)?,
                n_coarse: *n_coarse,
                n_fine: *n_fine,
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuSample {
    pub sample_field: SampleField,
    pub radiance: RadianceField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchical {
    pub coarse: RadianceField,
    pub fine: RadianceField,
    pub n_coarse: usize,
    pub n_fine: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pipeline {
    NeuSample(NeuSample),
    Hierarchical(Hierarchical),
}

/// Per-call sampling behaviour. Training draws stratified jitter, random inverse-CDF samples
/// and density noise from `rng`; evaluation is fully deterministic.
pub enum Sampling<'a, R: Rng + ?Sized> {
    Train { rng: &'a mut R, noise_std: f64 },
    Eval,
}

/// Graph handles produced by one pipeline forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PipelineRender {
    pub fine: GraphRender,
    pub coarse: Option<GraphRender>,
    /// `B × N` ascending depths fed to the final radiance pass.
    pub depths: Value,
}

impl Pipeline {
    pub fn spec(&self) -> PipelineSpec {
        match self {
            Pipeline::NeuSample(p) => PipelineSpec::Neusample {
                sample_field: p.sample_field.config.clone(),
                radiance: p.radiance.config.clone(),
            },
            Pipeline::Hierarchical(p) => PipelineSpec::Hierarchical {
                radiance: p.coarse.config.clone(),
                n_coarse: p.n_coarse,
                n_fine: p.n_fine,
            },
        }
    }

    pub fn kind(&self) -> PipelineKind {
        match self {
            Pipeline::NeuSample(_) => PipelineKind::Neusample,
            Pipeline::Hierarchical(_) => PipelineKind::Hierarchical,
        }
    }

    /// Networks in parameter order, with their checkpoint prefixes.
    pub fn networks(&self) -> Vec<(&'static str, &dyn Module)> {
        match self {
            Pipeline::NeuSample(p) => vec![
                ("sample_field", &p.sample_field as &dyn Module),
                ("radiance", &p.radiance),
            ],
            Pipeline::Hierarchical(p) => vec![("coarse", &p.coarse as &dyn Module), ("fine", &p.fine)],
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.networks()
            .into_iter()
            .flat_map(|(prefix, net)| {
                net.named_params()
                    .into_iter()
                    .map(move |(name, t)| (format!("{prefix}.{name}"), t))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Pipeline::NeuSample(p) => {
                let mut v = p.sample_field.params_mut();
                v.extend(p.radiance.params_mut());
                v
            }
            Pipeline::Hierarchical(p) => {
                let mut v = p.coarse.params_mut();
                v.extend(p.fine.params_mut());
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Radiance-field evaluations per rendered ray.
    pub fn samples_per_ray(&self) -> usize {
        match self {
            Pipeline::NeuSample(p) => p.sample_field.n_samples(),
            Pipeline::Hierarchical(p) => p.n_fine + 2 * p.n_coarse,
        }
    }

    /// Samples composited for the final color.
    pub fn final_samples(&self) -> usize {
        match self {
            Pipeline::NeuSample(p) => p.sample_field.n_samples(),
            Pipeline::Hierarchical(p) => p.n_coarse + p.n_fine,
        }
    }

    /// Binds each network's parameters; `trainable[k]` applies to network `k`.
    pub fn bind(&self, g: &mut Graph, trainable: &[bool]) -> Vec<Vec<LinearVars>> {
        self.networks()
            .into_iter()
            .enumerate()
            .map(|(k, (_, net))| net.bind(g, trainable.get(k).copied().unwrap_or(false)))
            .collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Vec<LinearVars>],
        rays: &[Ray],
        background: Option<[f64; 3]>,
        sampling: &mut Sampling<'_, R>,
    ) -> Result<PipelineRender> {
        if rays.is_empty() {
            return Err(Error::invalid("render", "empty ray batch"));
        }
        match self {
            Pipeline::NeuSample(p) => p.forward(g, vars, rays, background, sampling),
            Pipeline::Hierarchical(p) => p.forward(g, vars, rays, background, sampling),
        }
    }
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

/// Renders `depths` (`B × N`, ascending) through a radiance field.
pub fn render_along<R: Rng + ?Sized>(
    g: &mut Graph,
    field: &RadianceField,
    vars: &[LinearVars],
    rays: &[Ray],
    depths: Value,
    background: Option<[f64; 3]>,
    sampling: &mut Sampling<'_, R>,
) -> Result<GraphRender> {
    let (b, n) = g.shape(depths);
    if b != rays.len() {
        return Err(Error::Shape {
            op: "render_along",
            lhs: (b, n),
            rhs: (rays.len(), 1),
        });
    }
    let mut origins = Array2::zeros((b * n, 3));
    let mut dirs = Array2::zeros((b * n, 3));
    for (i, ray) in rays.iter().enumerate() {
        for j in 0..n {
            for c in 0..3 {
                origins[[i * n + j, c]] = ray.origin[c];
                dirs[[i * n + j, c]] = ray.direction[c];
            }
        }
    }
    let tcol = g.reshape(depths, b * n, 1)?;
    let x = if g.requires_grad(depths) {
        let o = g.constant(origins);
        let d = g.constant(dirs);
        let step = g.mul(tcol, d)?;
        g.add(o, step)?
    } else {
        let pos = origins + &(g.data(tcol) * &dirs);
        g.constant(pos)
    };
    let ex = g.positional_encode(x, field.config.position_encoding);
    let per_ray = encode_rows(
        &field.config.direction_encoding,
        &rays.iter().map(|r| r.direction).collect::<Vec<_>>(),
    );
    let repeat: Vec<usize> = (0..b * n).map(|k| k / n).collect();
    let ed = g.constant(per_ray.select(ndarray::Axis(0), &repeat));
    let (raw, rgb) = field.forward(g, vars, ex, ed)?;
    let raw = g.reshape(raw, b, n)?;
    let noise = match sampling {
        Sampling::Train { rng, noise_std } if *noise_std > 0.0 => {
            let s = *noise_std;
            Some(Array2::from_shape_simple_fn((b, n), || {
                let z: f64 = StandardNormal.sample(&mut **rng);
                s * z
            }))
        }
        _ => None,
    };
    let far: Vec<f64> = rays.iter().map(|r| r.far).collect();
    composite_graph(g, depths, &far, raw, rgb, noise, background)
}

impl NeuSample {
    /// `B × N` absolute depths `t_n + t̂·(t_f − t_n)`, unsorted.
    pub fn absolute_depths(
        &self,
        g: &mut Graph,
        vars: &[LinearVars],
        rays: &[Ray],
    ) -> Result<Value> {
        let origins: Vec<[f64; 3]> = rays.iter().map(|r| r.origin).collect();
        let dirs: Vec<[f64; 3]> = rays.iter().map(|r| r.direction).collect();
        let enc = g.constant(self.sample_field.encode_rays(&origins, &dirs));
        let rel = self.sample_field.forward(g, vars, enc)?;
        let span = g.constant(column(rays.iter().map(|r| r.far - r.near)));
        let near = g.constant(column(rays.iter().map(|r| r.near)));
        let scaled = g.mul(rel, span)?;
        g.add(scaled, near)
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Vec<LinearVars>],
        rays: &[Ray],
        background: Option<[f64; 3]>,
        sampling: &mut Sampling<'_, R>,
    ) -> Result<PipelineRender> {
        let t = self.absolute_depths(g, &vars[0], rays)?;
        let depths = g.sort_rows(t);
        let fine = render_along(g, &self.radiance, &vars[1], rays, depths, background, sampling)?;
        Ok(PipelineRender {
            fine,
            coarse: None,
            depths,
        })
    }
}

impl Hierarchical {
    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &[Vec<LinearVars>],
        rays: &[Ray],
        background: Option<[f64; 3]>,
        sampling: &mut Sampling<'_, R>,
    ) -> Result<PipelineRender> {
        let (b, nc, nf) = (rays.len(), self.n_coarse, self.n_fine);
        let mut coarse_t = Array2::zeros((b, nc));
        for (i, ray) in rays.iter().enumerate() {
            let row = match sampling {
                Sampling::Train { rng, .. } => {
                    stratified_depths(ray.near, ray.far, nc, || rng.random::<f64>())
                }
                Sampling::Eval => midpoint_depths(ray.near, ray.far, nc),
            };
            coarse_t.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        let tc = g.constant(coarse_t.clone());
        let coarse = render_along(g, &self.coarse, &vars[0], rays, tc, background, sampling)?;

        let weights = g.data(coarse.weights).clone();
        let mut merged = Array2::zeros((b, nc + nf));
        for (i, ray) in rays.iter().enumerate() {
            let ct: Vec<f64> = coarse_t.row(i).to_vec();
            let w: Vec<f64> = weights.row(i).to_vec();
            let mut all = match sampling {
                Sampling::Train { rng, .. } => {
                    inverse_cdf_resample(&ct, &w, ray.near, ray.far, nf, WEIGHT_FLOOR, &mut **rng)?
                }
                Sampling::Eval => inverse_cdf_quantiles(&ct, &w, ray.near, ray.far, nf, WEIGHT_FLOOR)?,
            };
            all.extend_from_slice(&ct);
            all.sort_by(f64::total_cmp);
            merged.row_mut(i).assign(&ndarray::Array1::from(all));
        }
        let depths = g.constant(merged);
        let fine = render_along(g, &self.fine, &vars[1], rays, depths, background, sampling)?;
        Ok(PipelineRender {
            fine,
            coarse: Some(coarse),
            depths,
        })
    }
}
