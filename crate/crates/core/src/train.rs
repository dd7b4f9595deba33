//! End-to-end training and batched evaluation rendering.
//!
//! A batch is split into fixed-size ray chunks, each evaluated on its own graph. Chunk results
//! are collected in chunk order and reduced sequentially, and each chunk draws its randomness
//! from a generator keyed by `(seed, step, chunk)`, so the result does not depend on the
//! worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, LrSchedule, Tensor};
use crate::error::{Error, Result};
use crate::fields::flat_values;
use crate::pipeline::{Pipeline, Sampling};
use crate::render::color_loss_graph;
use crate::sampling::Ray;
use crate::scene::{Camera, RgbImage, SceneDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub iters: u64,
    pub batch_rays: usize,
    pub schedule: LrSchedule,
    /// Std-dev of Gaussian noise added to raw density during training.
    pub noise_std: f64,
    /// Rays per graph; also the unit of parallel work.
    pub chunk_rays: usize,
    /// Set from the run configuration rather than stored with the options.
    #[serde(skip)]
    pub seed: u64,
    /// Steps between log records; 0 disables logging.
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 400_000,
            batch_rays: 4096,
            schedule: LrSchedule::default(),
            noise_std: 1.0,
            chunk_rays: 256,
            seed: 0,
            log_every: 1000,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::config("train.batch_rays", "must be positive"));
        }
        if self.chunk_rays == 0 {
            return Err(Error::config("train.chunk_rays", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("train.noise_std", "must be non-negative"));
        }
        if !(self.schedule.initial > 0.0 && self.schedule.last > 0.0) {
            return Err(Error::config("train.schedule", "learning rates must be positive"));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser over the three keys.
pub fn derive_seed(seed: u64, step: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    if workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))
}

/// Runs `chunk_fn` for chunks `0..n_chunks` on `pool` and sums the `(loss, grads)` results in
/// chunk order.
pub fn reduce_chunks<F>(pool: &ThreadPool, n_chunks: usize, chunk_fn: F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(usize) -> Result<(f64, Vec<Tensor>)> + Sync,
{
    let parts: Vec<Result<(f64, Vec<Tensor>)>> =
        pool.install(|| (0..n_chunks).into_par_iter().map(&chunk_fn).collect());
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    *a += g;
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Gradients of every parameter of the networks flagged in `trainable`, in pipeline order.
/// Parameters that did not influence the loss get zeros.
pub(crate) fn collect_grads(
    g: &mut Graph,
    pipeline: &Pipeline,
    vars: &[Vec<crate::fields::LinearVars>],
    trainable: &[bool],
) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (k, net_vars) in vars.iter().enumerate() {
        if !trainable.get(k).copied().unwrap_or(false) {
            continue;
        }
        for v in flat_values(net_vars) {
            let grad = g
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.push(grad);
        }
    }
    debug_assert_eq!(out.len(), trainable_params(pipeline, trainable).len());
    out
}

pub(crate) fn trainable_params<'a>(pipeline: &'a Pipeline, trainable: &[bool]) -> Vec<&'a Tensor> {
    pipeline
        .networks()
        .into_iter()
        .enumerate()
        .filter(|(k, _)| trainable.get(*k).copied().unwrap_or(false))
        .flat_map(|(_, (_, net))| net.params())
        .collect()
}

pub(crate) fn trainable_params_mut<'a>(
    pipeline: &'a mut Pipeline,
    trainable: &[bool],
) -> Vec<&'a mut Tensor> {
    let counts: Vec<usize> = pipeline
        .networks()
        .iter()
        .map(|(_, n)| n.params().len())
        .collect();
    let mut mask = Vec::new();
    for (k, c) in counts.into_iter().enumerate() {
        mask.extend(std::iter::repeat_n(trainable.get(k).copied().unwrap_or(false), c));
    }
    pipeline
        .params_mut()
        .into_iter()
        .zip(mask)
        .filter_map(|(p, keep)| keep.then_some(p))
        .collect()
}

/// Mean photometric loss of one batch and its gradients. The hierarchical pipeline adds the
/// coarse render's loss, as both passes are supervised.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    pipeline: &Pipeline,
    trainable: &[bool],
    rays: &[Ray],
    colors: &[[f64; 3]],
    background: Option<[f64; 3]>,
    noise_std: f64,
    seeds: (u64, u64),
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<(f64, Vec<Tensor>)> {
    if rays.len() != colors.len() || rays.is_empty() {
        return Err(Error::invalid(
            "loss_and_grads",
            format!("{} rays and {} colors", rays.len(), colors.len()),
        ));
    }
    let n = rays.len();
    let norm = n as f64;
    let n_chunks = n.div_ceil(chunk_rays);
    reduce_chunks(pool, n_chunks, |c| {
        let range = c * chunk_rays..((c + 1) * chunk_rays).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seeds.0, seeds.1, c as u64));
        let mut g = Graph::new();
        let vars = pipeline.bind(&mut g, trainable);
        let mut sampling = Sampling::Train {
            rng: &mut rng,
            noise_std,
        };
        let out = pipeline.forward(&mut g, &vars, &rays[range.clone()], background, &mut sampling)?;
        let reference = g.constant(color_matrix(&colors[range]));
        let mut loss = color_loss_graph(&mut g, out.fine.color, reference, norm)?;
        if let Some(coarse) = out.coarse {
            let extra = color_loss_graph(&mut g, coarse.color, reference, norm)?;
            loss = g.add(loss, extra)?;
        }
        let value = g.scalar(loss);
        g.backward(loss)?;
        Ok((value, collect_grads(&mut g, pipeline, &vars, trainable)))
    })
}

pub(crate) fn color_matrix(colors: &[[f64; 3]]) -> Tensor {
    Tensor::from_shape_fn((colors.len(), 3), |(i, c)| colors[i][c])
}

/// All training pixels of a dataset.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    pub background: Option<[f64; 3]>,
}

impl TrainingSet {
    pub fn from_dataset(ds: &SceneDataset) -> Result<Self> {
        let (rays, colors) = ds.training_rays()?;
        Ok(Self {
            rays,
            colors,
            background: ds.background,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Adam training of the networks selected by `trainable`.
pub struct Trainer {
    pub pipeline: Pipeline,
    pub trainable: Vec<bool>,
    pub adam: AdamState,
    pub options: TrainOptions,
}

impl Trainer {
    pub fn new(pipeline: Pipeline, trainable: Vec<bool>, options: TrainOptions) -> Result<Self> {
        options.validate()?;
        let adam = AdamState::new(trainable_params(&pipeline, &trainable), options.schedule.clone());
        Ok(Self {
            pipeline,
            trainable,
            adam,
            options,
        })
    }

    /// Trains every network.
    pub fn all(pipeline: Pipeline, options: TrainOptions) -> Result<Self> {
        let n = pipeline.networks().len();
        Self::new(pipeline, vec![true; n], options)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self, data: &TrainingSet, pool: &ThreadPool) -> Result<StepRecord> {
        let step = self.adam.step;
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(self.options.seed, step, u64::MAX));
        let idx: Vec<usize> = (0..self.options.batch_rays)
            .map(|_| pick.random_range(0..data.rays.len()))
            .collect();
        let rays: Vec<Ray> = idx.iter().map(|&i| data.rays[i]).collect();
        let colors: Vec<[f64; 3]> = idx.iter().map(|&i| data.colors[i]).collect();
        let (loss, grads) = loss_and_grads(
            &self.pipeline,
            &self.trainable,
            &rays,
            &colors,
            data.background,
            self.options.noise_std,
            (self.options.seed, step),
            self.options.chunk_rays,
            pool,
        )?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss = {loss}, lr = {})",
                self.adam.current_lr()
            )));
        }
        let mut params = trainable_params_mut(&mut self.pipeline, &self.trainable);
        let lr = self.adam.update(&mut params, &grads)?;
        Ok(StepRecord { step, loss, lr })
    }

    /// Runs `iters` steps, passing every `log_every`-th record (and the last) to `log`.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        iters: u64,
        pool: &ThreadPool,
        mut log: impl FnMut(&Trainer, StepRecord) -> Result<()>,
    ) -> Result<()> {
        let every = self.options.log_every;
        for i in 0..iters {
            let rec = self.step(data, pool)?;
            if (every > 0 && (rec.step + 1) % every == 0) || i + 1 == iters {
                log(self, rec)?;
            }
        }
        Ok(())
    }
}

/// Deterministic (noise-free) colors for a list of rays.
pub fn render_rays(
    pipeline: &Pipeline,
    rays: &[Ray],
    background: Option<[f64; 3]>,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<Vec<[f64; 3]>> {
    let chunk_rays = chunk_rays.max(1);
    let parts: Vec<Result<Vec<[f64; 3]>>> = pool.install(|| {
        rays.par_chunks(chunk_rays)
            .map(|chunk| {
                let mut g = Graph::new();
                let vars = pipeline.bind(&mut g, &[]);
                let out = pipeline.forward::<ChaCha8Rng>(
                    &mut g,
                    &vars,
                    chunk,
                    background,
                    &mut Sampling::Eval,
                )?;
                let c = g.data(out.fine.color);
                Ok((0..chunk.len())
                    .map(|i| [c[[i, 0]], c[[i, 1]], c[[i, 2]]])
                    .collect())
            })
            .collect()
    });
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn render_image(
    pipeline: &Pipeline,
    camera: &Camera,
    near: f64,
    far: f64,
    background: Option<[f64; 3]>,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<RgbImage> {
    let rays = camera.rays(near, far)?;
    let pixels = render_rays(pipeline, &rays, background, chunk_rays, pool)?;
    RgbImage::new(camera.width, camera.height, pixels)
}

pub fn render_view(
    pipeline: &Pipeline,
    ds: &SceneDataset,
    view: usize,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<RgbImage> {
    render_image(
        pipeline,
        &ds.cameras[view],
        ds.near,
        ds.far,
        ds.background,
        chunk_rays,
        pool,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{EncodingConfig, RadianceField, RadianceFieldConfig, SampleField, SampleFieldConfig};
    use crate::pipeline::{Hierarchical, NeuSample};
    use crate::scene::{generate_toy_scene, ToySpec};

    fn tiny_neusample(seed: u64) -> Pipeline {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pipeline::NeuSample(NeuSample {
            sample_field: SampleField::new(
                SampleFieldConfig {
                    width: 16,
                    depth: 2,
                    skip_after: 1,
                    n_samples: 8,
                    origin_encoding: EncodingConfig::new(2),
                    direction_encoding: EncodingConfig::new(2),
                },
                &mut rng,
            )
            .unwrap(),
            radiance: RadianceField::new(
                RadianceFieldConfig {
                    width: 16,
                    depth: 2,
                    skip_after: 1,
                    position_encoding: EncodingConfig::new(3),
                    direction_encoding: EncodingConfig::new(1),
                },
                &mut rng,
            )
            .unwrap(),
        })
    }

    fn small_scene() -> TrainingSet {
        let mut spec = ToySpec::default_scene();
        spec.cameras.width = 8;
        spec.cameras.height_px = 8;
        let (ds, _) = generate_toy_scene(&spec).unwrap();
        TrainingSet::from_dataset(&ds).unwrap()
    }

    fn options() -> TrainOptions {
        TrainOptions {
            iters: 3,
            batch_rays: 40,
            schedule: LrSchedule::constant(1e-3),
            chunk_rays: 16,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let data = small_scene();
        let mut finals = Vec::new();
        for workers in [1, 3] {
            let pool = worker_pool(workers).unwrap();
            let mut t = Trainer::all(tiny_neusample(1), options()).unwrap();
            t.run(&data, 3, &pool, |_, _| Ok(())).unwrap();
            finals.push(t.pipeline);
        }
        assert_eq!(finals[0], finals[1]);
    }

    #[test]
    fn chunking_matches_single_graph() {
        let data = small_scene();
        let pool = worker_pool(1).unwrap();
        let p = tiny_neusample(2);
        let rays = &data.rays[..30];
        let colors = &data.colors[..30];
        let run = |chunk| {
            loss_and_grads(&p, &[true, true], rays, colors, data.background, 0.0, (0, 0), chunk, &pool)
                .unwrap()
        };
        let (l1, g1) = run(30);
        let (l2, g2) = run(7);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            let diff = (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn frozen_networks_are_untouched() {
        let data = small_scene();
        let pool = worker_pool(1).unwrap();
        let start = tiny_neusample(3);
        let mut t = Trainer::new(start.clone(), vec![true, false], options()).unwrap();
        t.run(&data, 2, &pool, |_, _| Ok(())).unwrap();
        let (Pipeline::NeuSample(a), Pipeline::NeuSample(b)) = (&start, &t.pipeline) else {
            unreachable!()
        };
        assert_eq!(a.radiance, b.radiance);
        assert_ne!(a.sample_field, b.sample_field);
    }

    #[test]
    fn hierarchical_trains() {
        let data = small_scene();
        let pool = worker_pool(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = RadianceFieldConfig {
            width: 16,
            depth: 2,
            skip_after: 1,
            position_encoding: EncodingConfig::new(2),
            direction_encoding: EncodingConfig::new(1),
        };
        let p = Pipeline::Hierarchical(Hierarchical {
            coarse: RadianceField::new(cfg.clone(), &mut rng).unwrap(),
            fine: RadianceField::new(cfg, &mut rng).unwrap(),
            n_coarse: 4,
            n_fine: 8,
        });
        let mut t = Trainer::all(p, options()).unwrap();
        let mut losses = Vec::new();
        let mut opts = options();
        opts.log_every = 1;
        t.options = opts;
        t.run(&data, 3, &pool, |_, r| {
            losses.push(r.loss);
            Ok(())
        })
        .unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn render_is_repeatable() {
        let mut spec = ToySpec::default_scene();
        spec.cameras.width = 6;
        spec.cameras.height_px = 5;
        let (ds, _) = generate_toy_scene(&spec).unwrap();
        let pool = worker_pool(2).unwrap();
        let p = tiny_neusample(4);
        let a = render_view(&p, &ds, 0, 7, &pool).unwrap();
        let b = render_view(&p, &ds, 0, 30, &pool).unwrap();
        assert_eq!(a.dims(), (6, 5));
        assert_eq!(a, b);
    }
}
