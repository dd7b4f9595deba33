//! Evaluation against reference views, wall-clock benchmarking and per-sample dumps.

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::pipeline::{Pipeline, Sampling};
use crate::report::{MetricsReport, ReportRow};
use crate::sampling::Ray;
use crate::scene::{RgbImage, SceneDataset};
use crate::train::render_rays;

/// Renders `views` of `ds` and scores them against the reference images.
pub fn evaluate(
    pipeline: &Pipeline,
    ds: &SceneDataset,
    views: &[usize],
    cost_ratio: f64,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<(MetricsReport, Vec<RgbImage>)> {
    let mut refs = Vec::with_capacity(views.len());
    for &v in views {
        let img = ds
            .images
            .get(v)
            .ok_or_else(|| Error::Data(format!("view {v} is not in the dataset")))?;
        refs.push(img.clone());
    }
    evaluate_against(pipeline, ds, views, &refs, false, cost_ratio, chunk_rays, pool)
}

/// Like [`evaluate`] with explicit references. With `quantize` the renders are rounded to
/// 8 bits first, as when comparing against PNG files.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_against(
    pipeline: &Pipeline,
    ds: &SceneDataset,
    views: &[usize],
    references: &[RgbImage],
    quantize: bool,
    cost_ratio: f64,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<(MetricsReport, Vec<RgbImage>)> {
    let mut report = MetricsReport::default();
    let mut images = Vec::with_capacity(views.len());
    for (&v, reference) in views.iter().zip(references) {
        let cam = ds
            .cameras
            .get(v)
            .ok_or_else(|| Error::Data(format!("view {v} is not in the dataset")))?;
        if reference.dims() != (cam.width, cam.height) {
            return Err(Error::Data(format!(
                "view {v}: reference is {}x{} but the camera is {}x{}",
                reference.width, reference.height, cam.width, cam.height
            )));
        }
        let start = Instant::now();
        let rays = cam.rays(ds.near, ds.far)?;
        let pixels = render_rays(pipeline, &rays, ds.background, chunk_rays, pool)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut img = RgbImage::new(cam.width, cam.height, pixels)?;
        if quantize {
            img = img.quantized();
        }
        report.push(ReportRow {
            name: format!("{v:04}"),
            psnr: psnr(&img, reference)?,
            ssim: ssim(&img, reference)?,
            cost_ratio,
            wall_ms,
        });
        images.push(img);
    }
    Ok((report.finalized(), images))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub repeats: usize,
    pub threads: usize,
    pub rays: usize,
    pub samples_per_ray: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    /// Radiance evaluations per second at the median time.
    pub samples_per_second: f64,
}

/// Times `repeats` deterministic renders of `rays`.
pub fn bench_render(
    pipeline: &Pipeline,
    rays: &[Ray],
    background: Option<[f64; 3]>,
    repeats: usize,
    chunk_rays: usize,
    pool: &ThreadPool,
) -> Result<BenchStats> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        render_rays(pipeline, rays, background, chunk_rays, pool)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    let samples = rays.len() * pipeline.samples_per_ray();
    Ok(BenchStats {
        repeats,
        threads: pool.current_num_threads(),
        rays: rays.len(),
        samples_per_ray: pipeline.samples_per_ray(),
        median_ms,
        min_ms: times[0],
        samples_per_second: samples as f64 / (median_ms / 1e3),
    })
}

/// One composited sample of one ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub ray: usize,
    pub index: usize,
    pub depth: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub sigma: f64,
    pub weight: f64,
}

/// Final-pass samples of every ray plus each ray's accumulated opacity.
pub fn dump_samples(pipeline: &Pipeline, rays: &[Ray]) -> Result<(Vec<SampleRecord>, Vec<f64>)> {
    let mut g = Graph::new();
    let vars = pipeline.bind(&mut g, &[]);
    let out = pipeline.forward::<ChaCha8Rng>(&mut g, &vars, rays, None, &mut Sampling::Eval)?;
    let depths = g.data(out.depths);
    let weights = g.data(out.fine.weights);
    let sigma = g.data(out.fine.sigma);
    let rgb = g.data(out.fine.rgb);
    let n = depths.ncols();
    let mut records = Vec::with_capacity(rays.len() * n);
    for i in 0..rays.len() {
        for j in 0..n {
            let k = i * n + j;
            records.push(SampleRecord {
                ray: i,
                index: j,
                depth: depths[[i, j]],
                r: rgb[[k, 0]],
                g: rgb[[k, 1]],
                b: rgb[[k, 2]],
                sigma: sigma[[i, j]],
                weight: weights[[i, j]],
            });
        }
    }
    let opacity = g.data(out.fine.opacity).iter().copied().collect();
    Ok((records, opacity))
}

pub fn write_samples(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
