//! Shrinking a trained NeuSample pipeline to fewer samples per ray.
//!
//! The regular sample field's trunk is copied and an evenly spaced subset of its head outputs
//! is kept. Optionally the extracted field is then "depth boosted": its mean sample depth is
//! regressed onto the expected depth the regular pipeline renders, over rays from a spiral of
//! poses. Finally both extracted networks are fine-tuned with the photometric loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, LrSchedule, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::{NeuSample, Pipeline, Sampling};
use crate::render::depth_boost_loss_graph;
use crate::sampling::{extract_field_params, Ray};
use crate::scene::{Camera, SceneDataset};
use crate::train::{collect_grads, derive_seed, reduce_chunks, trainable_params_mut, TrainOptions, Trainer, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionPlan {
    /// Samples per ray after extraction.
    pub n_e: usize,
    pub depth_boost: bool,
    pub boost_pose_count: usize,
    pub boost_rays_per_iter: usize,
    pub boost_lr: f64,
    pub boost_epochs: usize,
    pub finetune_iters: u64,
}

impl Default for ExtractionPlan {
    fn default() -> Self {
        Self {
            n_e: 64,
            depth_boost: false,
            boost_pose_count: 120,
            boost_rays_per_iter: 8192,
            boost_lr: 5e-5,
            boost_epochs: 1,
            finetune_iters: 40_000,
        }
    }
}

impl ExtractionPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_e == 0 || self.n_e > n {
            return Err(Error::config(
                "extraction.n_e",
                format!("must lie in 1..={n} for a field with {n} samples, got {}", self.n_e),
            ));
        }
        if self.depth_boost
            && (self.boost_pose_count == 0 || self.boost_rays_per_iter == 0 || self.boost_epochs == 0)
        {
            return Err(Error::config(
                "extraction.boost_*",
                "pose count, rays per iteration and epochs must be positive",
            ));
        }
        if self.depth_boost && !(self.boost_lr > 0.0) {
            return Err(Error::config("extraction.boost_lr", "must be positive"));
        }
        Ok(())
    }
}

fn as_neusample(p: &Pipeline) -> Result<&NeuSample> {
    match p {
        Pipeline::NeuSample(ns) => Ok(ns),
        Pipeline::Hierarchical(_) => Err(Error::config(
            "pipeline",
            "extraction needs a NeuSample pipeline, found hierarchical",
        )),
    }
}

/// Regular pipeline with its sample field reduced to `n_e` outputs and the radiance field
/// copied unchanged.
pub fn extract_pipeline(regular: &Pipeline, n_e: usize) -> Result<Pipeline> {
    let ns = as_neusample(regular)?;
    Ok(Pipeline::NeuSample(NeuSample {
        sample_field: extract_field_params(&ns.sample_field, n_e)?,
        radiance: ns.radiance.clone(),
    }))
}

/// Expected depth `Σ w_i t_i` rendered by the regular pipeline, without noise.
pub fn predict_ray_depth(
    regular: &Pipeline,
    rays: &[Ray],
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = pool.install(|| {
        rays.par_chunks(chunk_rays.max(1))
            .map(|chunk| {
                let mut g = Graph::new();
                let vars = regular.bind(&mut g, &[]);
                let out = regular.forward::<ChaCha8Rng>(&mut g, &vars, chunk, None, &mut Sampling::Eval)?;
                Ok(g.data(out.fine.depth).iter().copied().collect())
            })
            .collect()
    });
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Spiral camera path around a vertical axis through `center`: radius and height move
/// linearly from their minimum to their maximum over `turns` revolutions. When the training
/// cameras only cover an arc, the path sweeps back and forth across that arc instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spiral {
    pub center: [f64; 3],
    pub radius: (f64, f64),
    pub height: (f64, f64),
    pub turns: f64,
    /// Azimuth range `(from, to)` in radians; `None` circles the full ring.
    #[serde(default)]
    pub arc: Option<(f64, f64)>,
}

impl Spiral {
    /// Envelope of the training cameras, centred on the dataset's focus point.
    pub fn from_dataset(ds: &SceneDataset) -> Self {
        let center = ds.focus_point();
        let (mut r, mut h) = ((f64::MAX, f64::MIN), (f64::MAX, f64::MIN));
        let mut phis = Vec::new();
        for i in ds.train_indices() {
            let c = ds.cameras[i].center();
            let (dx, dy, dz) = (c[0] - center[0], c[1] - center[1], c[2] - center[2]);
            let rad = dx.hypot(dy);
            r = (r.0.min(rad), r.1.max(rad));
            h = (h.0.min(dz), h.1.max(dz));
            phis.push(dy.atan2(dx));
        }
        Self {
            center,
            radius: r,
            height: h,
            turns: 2.0,
            arc: azimuth_arc(phis),
        }
    }

    /// Point at path parameter `s ∈ [0, 1]`.
    pub fn point(&self, s: f64) -> [f64; 3] {
        let r = self.radius.0 + (self.radius.1 - self.radius.0) * s;
        let h = self.height.0 + (self.height.1 - self.height.0) * s;
        let turn = std::f64::consts::TAU * self.turns * s;
        let phi = match self.arc {
            None => turn,
            Some((from, to)) => from + (to - from) * 0.5 * (1.0 - turn.cos()),
        };
        [
            self.center[0] + r * phi.cos(),
            self.center[1] + r * phi.sin(),
            self.center[2] + h,
        ]
    }

    /// `count` cameras at `s = k / count`, looking at the centre, with the intrinsics of
    /// `template`.
    pub fn poses(&self, count: usize, template: &Camera) -> Result<Vec<Camera>> {
        (0..count)
            .map(|k| {
                Camera::look_at(
                    self.point(k as f64 / count as f64),
                    self.center,
                    [0.0, 0.0, 1.0],
                    template.focal,
                    template.width,
                    template.height,
                )
            })
            .collect()
    }
}

/// The arc left after removing the widest gap between camera azimuths, if that gap exceeds
/// half a turn.
fn azimuth_arc(mut phis: Vec<f64>) -> Option<(f64, f64)> {
    use std::f64::consts::{PI, TAU};
    if phis.len() < 2 {
        return None;
    }
    phis.sort_by(f64::total_cmp);
    let n = phis.len();
    let (gap, after) = (0..n)
        .map(|i| {
            let next = if i + 1 < n { phis[i + 1] } else { phis[0] + TAU };
            (next - phis[i], (i + 1) % n)
        })
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a });
    (gap > PI).then(|| (phis[after], phis[after] + TAU - gap))
}

/// Regresses the extracted field's mean sample depth onto the regular pipeline's expected
/// depth. Only the extracted sample field is updated.
pub fn depth_boost(
    extracted: &mut Pipeline,
    regular: &Pipeline,
    ds: &SceneDataset,
    plan: &ExtractionPlan,
    seed: u64,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<Vec<f64>> {
    if !plan.depth_boost {
        return Ok(Vec::new());
    }
    as_neusample(extracted)?;
    let template = &ds.cameras[ds.train_indices()[0]];
    let poses = Spiral::from_dataset(ds).poses(plan.boost_pose_count, template)?;
    let mut rays = Vec::new();
    for cam in &poses {
        rays.extend(cam.rays(ds.near, ds.far)?);
    }
    let targets = predict_ray_depth(regular, &rays, chunk_rays, pool)?;
    boost_on_rays(extracted, &rays, &targets, plan, seed, chunk_rays, pool)
}

/// Depth boost against given targets; returns the mean loss of every iteration.
pub fn boost_on_rays(
    extracted: &mut Pipeline,
    rays: &[Ray],
    targets: &[f64],
    plan: &ExtractionPlan,
    seed: u64,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<Vec<f64>> {
    let trainable = [true, false];
    let mut adam = AdamState::new(
        crate::train::trainable_params(extracted, &trainable),
        LrSchedule::constant(plan.boost_lr),
    );
    let mut order: Vec<usize> = (0..rays.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..plan.boost_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, 1)));
        for batch in order.chunks(plan.boost_rays_per_iter) {
            let n = batch.len();
            let pipeline = &*extracted;
            let Pipeline::NeuSample(ns) = pipeline else {
                unreachable!("checked by caller")
            };
            let (loss, grads) = reduce_chunks(pool, n.div_ceil(chunk_rays), |c| {
                let idx = &batch[c * chunk_rays..((c + 1) * chunk_rays).min(n)];
                let chunk: Vec<Ray> = idx.iter().map(|&i| rays[i]).collect();
                let mut g = Graph::new();
                let vars = pipeline.bind(&mut g, &trainable);
                let depths = ns.absolute_depths(&mut g, &vars[0], &chunk)?;
                let target = g.constant(Tensor::from_shape_fn((idx.len(), 1), |(i, _)| targets[idx[i]]));
                let loss = depth_boost_loss_graph(&mut g, depths, target, n as f64)?;
                let value = g.scalar(loss);
                g.backward(loss)?;
                Ok((value, collect_grads(&mut g, pipeline, &vars, &trainable)))
            })?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("depth boost loss became {loss}")));
            }
            let mut params = trainable_params_mut(extracted, &trainable);
            adam.update(&mut params, &grads)?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// End-to-end photometric fine-tuning of both extracted networks.
pub fn finetune(
    extracted: Pipeline,
    data: &TrainingSet,
    iters: u64,
    options: &TrainOptions,
    pool: &ThreadPool,
) -> Result<Pipeline> {
    if iters == 0 {
        return Ok(extracted);
    }
    let mut trainer = Trainer::all(extracted, options.clone())?;
    trainer.run(data, iters, pool, |_, _| Ok(()))?;
    Ok(trainer.pipeline)
}

/// Extract, optionally boost, then fine-tune. `finetune_options.schedule` should already be
/// the tail of the base schedule.
pub fn run_extraction(
    regular: &Pipeline,
    ds: &SceneDataset,
    plan: &ExtractionPlan,
    finetune_options: &TrainOptions,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<Pipeline> {
    let n = as_neusample(regular)?.sample_field.n_samples();
    plan.validate(n)?;
    let mut extracted = extract_pipeline(regular, plan.n_e)?;
    depth_boost(&mut extracted, regular, ds, plan, finetune_options.seed, chunk_rays, pool)?;
    let data = TrainingSet::from_dataset(ds)?;
    finetune(extracted, &data, plan.finetune_iters, finetune_options, pool)
}
