use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use neusample::bench::{bench_render, dump_samples, evaluate, evaluate_against, write_samples, BenchStats};
use neusample::checkpoint::{checkpoint_paths, Checkpoint, SavedOptimizer};
use neusample::config::{preset, RunConfig, SceneSource};
use neusample::cost::{ray_cost, RayCost};
use neusample::extraction::{run_extraction, Spiral};
use neusample::pipeline::{Pipeline, PipelineSpec};
use neusample::report::{MetricsReport, ReportRow};
use neusample::scene::{generate_toy_scene, write_blender_scene, Camera, RgbImage, SceneDataset, ToySpec};
use neusample::train::{render_image, worker_pool, Trainer, TrainingSet};
use neusample::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;
use serde::Serialize;

use crate::{Cli, Command, Global};

const CONFIG_FILE: &str = "config.toml";

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Train {
            iters,
            pipeline,
            samples,
            resume,
            checkpoint_every,
        } => {
            let mut cfg = resolve_config(&g, resume.as_deref())?;
            if let Some(n) = samples {
                cfg.pipeline = with_samples(&cfg.pipeline, n);
            }
            if let Some(kind) = pipeline {
                cfg = cfg.with_pipeline_kind(kind);
            }
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            cfg.validate()?;
            train(&cfg, resume.as_deref(), checkpoint_every)
        }
        Command::Render {
            checkpoint,
            views,
            dump_samples,
        } => {
            let (cfg, ck) = config_and_checkpoint(&g, &checkpoint)?;
            render(&cfg, &ck.pipeline, &views, dump_samples.as_deref())
        }
        Command::Extract {
            checkpoint,
            n_e,
            depth_boost,
            no_depth_boost,
            finetune_iters,
        } => {
            let (mut cfg, ck) = config_and_checkpoint(&g, &checkpoint)?;
            if let Some(n) = n_e {
                cfg.extraction.n_e = n;
            }
            if let Some(n) = finetune_iters {
                cfg.extraction.finetune_iters = n;
            }
            cfg.extraction.depth_boost = if depth_boost {
                true
            } else if no_depth_boost {
                false
            } else {
                let complex = cfg.scene.toy_spec()?.is_some_and(|s| s.depth_complex);
                cfg.extraction.depth_boost || complex
            };
            extract(&cfg, &ck.pipeline)
        }
        Command::Eval {
            checkpoint,
            compare,
            views,
            reference,
        } => {
            let (cfg, ck) = config_and_checkpoint(&g, &checkpoint)?;
            let other = compare
                .as_deref()
                .map(|p| Checkpoint::load(p).map(|c| (p.to_path_buf(), c.pipeline)))
                .transpose()?;
            eval(&cfg, &ck.pipeline, other, &views, reference.as_deref())
        }
        Command::Bench {
            checkpoint,
            repeats,
            rays,
        } => {
            let (cfg, candidate) = match &checkpoint {
                Some(p) => {
                    let (cfg, ck) = config_and_checkpoint(&g, p)?;
                    (cfg, ck.pipeline)
                }
                None => {
                    let cfg = resolve_config(&g, None)?;
                    let p = cfg.pipeline.build(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
                    (cfg, p)
                }
            };
            bench(&cfg, &candidate, repeats, rays)
        }
        Command::GenToy { preset: name, spec } => {
            let cfg = resolve_config(&g, None)?;
            let toy = match (&name, &spec) {
                (_, Some(path)) => ToySpec::load(path)?,
                (Some(name), None) => preset(name)?,
                (None, None) => match cfg.scene.toy_spec()? {
                    Some(s) => s,
                    None => ToySpec::default_scene(),
                },
            };
            gen_toy(&cfg, &toy)
        }
    }
}

/// `--config`, else `--profile`, else the config stored next to `checkpoint`, else desk; then
/// flag overrides.
fn resolve_config(g: &Global, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = if let Some(path) = &g.config {
        RunConfig::load(path)?
    } else if let Some(name) = &g.profile {
        RunConfig::profile(name)?
    } else if let Some(path) = checkpoint.and_then(sibling_config) {
        info!("using {}", path.display());
        RunConfig::load(&path)?
    } else {
        RunConfig::desk()
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(d) = g.downscale {
        cfg.downscale = d;
    }
    if let Some(s) = &g.scene {
        cfg.scene = parse_scene(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let (manifest, _) = checkpoint_paths(checkpoint);
    let dir = manifest.parent()?;
    Some(dir.join(CONFIG_FILE)).filter(|p| p.is_file())
}

/// Loads a checkpoint for a read-only command. An explicit `--config`/`--profile` must describe
/// the stored architecture; otherwise the checkpoint's architecture is adopted.
fn config_and_checkpoint(g: &Global, path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let mut cfg = resolve_config(g, Some(path))?;
    let ck = if g.config.is_some() || g.profile.is_some() {
        Checkpoint::load_expecting(path, &cfg.pipeline)?
    } else {
        let ck = Checkpoint::load(path)?;
        cfg.pipeline = ck.pipeline.spec();
        ck
    };
    Ok((cfg, ck))
}

fn parse_scene(s: &str) -> Result<SceneSource> {
    let (kind, rest) = s.split_once(':').ok_or_else(|| {
        Error::config(
            "scene",
            format!("{s:?} should be preset:<name>, toy:<spec.toml> or blender:<dir>"),
        )
    })?;
    match kind {
        "preset" => {
            preset(rest)?;
            Ok(SceneSource::Preset { name: rest.into() })
        }
        "toy" => Ok(SceneSource::Toy { path: rest.into() }),
        "blender" => Ok(SceneSource::Blender { dir: rest.into() }),
        other => Err(Error::config(
            "scene",
            format!("unknown scene kind {other:?}; expected preset, toy or blender"),
        )),
    }
}

/// Sets the per-ray budget: `N` for NeuSample, `N/4` coarse plus `N/2` fine for hierarchical.
fn with_samples(spec: &PipelineSpec, n: usize) -> PipelineSpec {
    let mut spec = spec.clone();
    match &mut spec {
        PipelineSpec::Neusample { sample_field, .. } => sample_field.n_samples = n,
        PipelineSpec::Hierarchical {
            n_coarse, n_fine, ..
        } => {
            *n_coarse = (n / 4).max(1);
            *n_fine = (n / 2).max(1);
        }
    }
    spec
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Output directory of a non-training command, with the resolved config written into it.
fn command_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out.join(name);
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

fn test_psnr(pipeline: &Pipeline, ds: &SceneDataset, cfg: &RunConfig, pool: &ThreadPool) -> Result<f64> {
    let (report, _) = evaluate(pipeline, ds, &ds.test_indices(), 0.0, cfg.render_chunk, pool)?;
    Ok(report.aggregate().map_or(f64::NAN, |r| r.psnr))
}

fn train(cfg: &RunConfig, resume: Option<&Path>, checkpoint_every: u64) -> Result<()> {
    let ds = cfg.scene.load(cfg.downscale)?;
    let pool = worker_pool(cfg.workers)?;
    create_dir(&cfg.out)?;
    cfg.save(&cfg.out.join(CONFIG_FILE))?;
    let options = cfg.train_options();
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load_expecting(path, &cfg.pipeline)?;
            info!("resuming {} at step {}", path.display(), ck.step);
            let mut trainer = Trainer::all(ck.pipeline, options)?;
            match ck.optimizer {
                Some(SavedOptimizer { trainable, adam }) => {
                    trainer.trainable = trainable;
                    trainer.adam = adam;
                }
                None => {
                    warn!("checkpoint has no optimizer state; starting Adam from scratch");
                    trainer.adam.step = ck.step;
                }
            }
            trainer
        }
        None => {
            let pipeline = cfg.pipeline.build(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            Trainer::all(pipeline, options)?
        }
    };
    let save = |trainer: &Trainer, name: &str| -> Result<PathBuf> {
        let path = cfg.out.join(name);
        Checkpoint {
            pipeline: trainer.pipeline.clone(),
            step: trainer.step_count(),
            optimizer: Some(SavedOptimizer {
                trainable: trainer.trainable.clone(),
                adam: trainer.adam.clone(),
            }),
        }
        .save(&path)?;
        Ok(path)
    };
    let start = trainer.step_count();
    let end = cfg.train.iters.max(start);
    if start == end {
        let path = save(&trainer, "final")?;
        info!("wrote {}", path.display());
        return Ok(());
    }

    let data = TrainingSet::from_dataset(&ds)?;
    let log_path = cfg.out.join("train_log.csv");
    let fresh = !log_path.exists() || resume.is_none();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "step,loss,lr,test_psnr").map_err(|e| Error::io(&log_path, e))?;
    }
    info!(
        "training {} ({} parameters) for steps {start}..{end} on {} views",
        cfg.pipeline.kind(),
        trainer.pipeline.param_count(),
        ds.train_indices().len()
    );
    let every = cfg.train.log_every;
    while trainer.step_count() < end {
        let rec = match trainer.step(&data, &pool) {
            Ok(rec) => rec,
            Err(e @ Error::Numerical(_)) => {
                let abort = cfg.out.join("abort.txt");
                let dump = format!("{e}\nstep = {}\nlr = {}\n", trainer.step_count(), trainer.adam.current_lr());
                fs::write(&abort, dump).map_err(|err| Error::io(&abort, err))?;
                let path = save(&trainer, "abort")?;
                warn!("state before the failing step saved to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let done = rec.step + 1;
        if (every > 0 && done % every == 0) || done == end {
            let psnr = test_psnr(&trainer.pipeline, &ds, cfg, &pool)?;
            info!("step {done}: loss {:.6} lr {:.3e} test psnr {psnr:.2}", rec.loss, rec.lr);
            writeln!(log, "{done},{},{},{psnr}", rec.loss, rec.lr).map_err(|e| Error::io(&log_path, e))?;
        }
        if checkpoint_every > 0 && done % checkpoint_every == 0 && done != end {
            save(&trainer, &format!("step_{done:07}"))?;
        }
    }
    let path = save(&trainer, "final")?;
    info!("wrote {}", path.display());
    Ok(())
}

enum Views {
    Dataset(Vec<usize>),
    Spiral(usize),
}

fn parse_views(s: &str, ds: &SceneDataset) -> Result<Views> {
    let bad = |reason: String| Error::config("views", reason);
    let views = match s {
        "test" => ds.test_indices(),
        "train" => ds.train_indices(),
        "all" => (0..ds.cameras.len()).collect(),
        _ => {
            if let Some(n) = s.strip_prefix("spiral:") {
                let n: usize = n.parse().map_err(|_| bad(format!("bad pose count in {s:?}")))?;
                if n == 0 {
                    return Err(bad("spiral needs at least one pose".into()));
                }
                return Ok(Views::Spiral(n));
            }
            let mut out = Vec::new();
            for part in s.split(',') {
                let v: usize = part
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("{part:?} is not a view index")))?;
                if v >= ds.cameras.len() {
                    return Err(bad(format!("view {v} out of range (dataset has {})", ds.cameras.len())));
                }
                out.push(v);
            }
            out
        }
    };
    if views.is_empty() {
        return Err(bad(format!("{s:?} selects no views")));
    }
    Ok(Views::Dataset(views))
}

fn render(cfg: &RunConfig, pipeline: &Pipeline, views: &str, dump: Option<&str>) -> Result<()> {
    let ds = cfg.scene.load(cfg.downscale)?;
    let pool = worker_pool(cfg.workers)?;
    let cameras: Vec<(String, Camera)> = match parse_views(views, &ds)? {
        Views::Dataset(v) => v.into_iter().map(|i| (format!("{i:04}"), ds.cameras[i].clone())).collect(),
        Views::Spiral(n) => {
            let template = &ds.cameras[ds.train_indices()[0]];
            Spiral::from_dataset(&ds)
                .poses(n, template)?
                .into_iter()
                .enumerate()
                .map(|(k, c)| (format!("spiral_{k:04}"), c))
                .collect()
        }
    };
    let dir = command_dir(cfg, "render")?;
    if let Some(spec) = dump {
        let cam = &cameras[0].1;
        let rays = dump_rays(spec, cam, &ds)?;
        let (records, _) = dump_samples(pipeline, &rays)?;
        let path = dir.join("samples.csv");
        write_samples(&path, &records)?;
        info!("wrote {} sample records to {}", records.len(), path.display());
    }
    for (name, cam) in &cameras {
        let img = render_image(pipeline, cam, ds.near, ds.far, ds.background, cfg.render_chunk, &pool)?;
        img.write_png(&dir.join(format!("{name}.png")))?;
    }
    info!("rendered {} views to {}", cameras.len(), dir.display());
    Ok(())
}

fn dump_rays(spec: &str, cam: &Camera, ds: &SceneDataset) -> Result<Vec<neusample::sampling::Ray>> {
    let bad = || Error::config("dump_samples", format!("{spec:?} should be ROW or ROW:COL"));
    let (row, col) = match spec.split_once(':') {
        Some((r, c)) => (r.parse().map_err(|_| bad())?, Some(c.parse::<usize>().map_err(|_| bad())?)),
        None => (spec.parse::<usize>().map_err(|_| bad())?, None),
    };
    if row >= cam.height || col.is_some_and(|c| c >= cam.width) {
        return Err(Error::config(
            "dump_samples",
            format!("pixel {spec} lies outside the {}x{} image", cam.width, cam.height),
        ));
    }
    let cols: Vec<usize> = match col {
        Some(c) => vec![c],
        None => (0..cam.width).collect(),
    };
    cols.into_iter()
        .map(|c| cam.ray_for_pixel(c, row, ds.near, ds.far))
        .collect()
}

/// Collapses a per-view report into one row named `name`.
fn summary_row(report: &MetricsReport, name: &str) -> ReportRow {
    let mut row = report.aggregate().expect("at least one view");
    row.name = name.into();
    row
}

fn extract(cfg: &RunConfig, regular: &Pipeline) -> Result<()> {
    let ds = cfg.scene.load(cfg.downscale)?;
    let pool = worker_pool(cfg.workers)?;
    let dir = command_dir(cfg, "extract")?;
    info!(
        "extracting N_e = {} (depth boost {}, {} fine-tuning steps)",
        cfg.extraction.n_e,
        if cfg.extraction.depth_boost { "on" } else { "off" },
        cfg.extraction.finetune_iters
    );
    let extracted = run_extraction(
        regular,
        &ds,
        &cfg.extraction,
        &cfg.finetune_options(),
        cfg.render_chunk,
        &pool,
    )?;
    Checkpoint {
        pipeline: extracted.clone(),
        step: 0,
        optimizer: None,
    }
    .save(&dir.join("extracted"))?;
    let views = ds.test_indices();
    let mut report = MetricsReport::default();
    for (name, p) in [("regular", regular), ("extracted", &extracted)] {
        let ratio = cfg.cost_ratio(&p.spec())?;
        let (r, _) = evaluate(p, &ds, &views, ratio, cfg.render_chunk, &pool)?;
        let row = summary_row(&r, name);
        println!(
            "{name:>9}: psnr {:.3} ssim {:.4} cost ratio {:.4}",
            row.psnr, row.ssim, row.cost_ratio
        );
        report.push(row);
    }
    report.save(&dir.join("metrics.csv"))
}

fn load_references(dir: &Path, views: &[usize], background: [f64; 3]) -> Result<Vec<RgbImage>> {
    views
        .iter()
        .map(|v| RgbImage::read_png(&dir.join(format!("{v:04}.png")), background))
        .collect()
}

fn eval(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    compare: Option<(PathBuf, Pipeline)>,
    views: &str,
    reference: Option<&Path>,
) -> Result<()> {
    let ds = cfg.scene.load(cfg.downscale)?;
    let pool = worker_pool(cfg.workers)?;
    let Views::Dataset(views) = parse_views(views, &ds)? else {
        return Err(Error::config("views", "spiral poses have no reference images"));
    };
    let refs = match reference {
        Some(dir) => Some(load_references(dir, &views, ds.background.unwrap_or([0.0; 3]))?),
        None => None,
    };
    let dir = command_dir(cfg, "eval")?;
    let score = |p: &Pipeline| -> Result<MetricsReport> {
        let ratio = cfg.cost_ratio(&p.spec())?;
        let (report, _) = match &refs {
            Some(r) => evaluate_against(p, &ds, &views, r, true, ratio, cfg.render_chunk, &pool)?,
            None => evaluate(p, &ds, &views, ratio, cfg.render_chunk, &pool)?,
        };
        Ok(report)
    };
    let main = score(pipeline)?;
    main.save(&dir.join("metrics.csv"))?;
    let other = match &compare {
        Some((path, p)) => {
            let r = score(p)?;
            r.save(&dir.join("compare.csv"))?;
            Some((path, r))
        }
        None => None,
    };
    println!("{:>10} {:>9} {:>7}{}", "view", "psnr", "ssim", if other.is_some() { "   compare psnr    ssim" } else { "" });
    for (i, row) in main.rows.iter().enumerate() {
        print!("{:>10} {:>9.3} {:>7.4}", row.name, row.psnr, row.ssim);
        if let Some((_, r)) = &other {
            print!("   {:>12.3} {:>7.4}", r.rows[i].psnr, r.rows[i].ssim);
        }
        println!();
    }
    println!("analytic cost ratio: {:.4}", cfg.cost_ratio(&pipeline.spec())?);
    if let Some((path, r)) = &other {
        println!(
            "analytic cost ratio of {}: {:.4}",
            path.display(),
            r.rows.last().map_or(f64::NAN, |x| x.cost_ratio)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchEntry {
    spec: PipelineSpec,
    cost: RayCost,
    timing: BenchStats,
}

#[derive(Serialize)]
struct BenchReport {
    analytic_ratio: f64,
    measured_ratio: f64,
    candidate: BenchEntry,
    baseline: BenchEntry,
}

fn bench(cfg: &RunConfig, candidate: &Pipeline, repeats: usize, n_rays: usize) -> Result<()> {
    if n_rays == 0 {
        return Err(Error::config("rays", "must be at least 1"));
    }
    let ds = cfg.scene.load(cfg.downscale)?;
    let pool = worker_pool(cfg.workers)?;
    let view = ds.test_indices()[0];
    let pool_rays = ds.view_rays(view)?;
    let rays: Vec<_> = pool_rays.iter().cycle().take(n_rays).copied().collect();
    let spec = candidate.spec();
    let base_spec = cfg.cost_baseline_for(&spec);
    let baseline = base_spec.build(&mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let dir = command_dir(cfg, "bench")?;
    info!("timing {} rays x {repeats} repeats on {} worker(s)", rays.len(), cfg.workers);
    let cand = bench_render(candidate, &rays, ds.background, repeats, cfg.render_chunk, &pool)?;
    let base = bench_render(&baseline, &rays, ds.background, repeats, cfg.render_chunk, &pool)?;
    let report = BenchReport {
        analytic_ratio: cfg.cost_ratio(&spec)?,
        measured_ratio: cand.median_ms / base.median_ms,
        candidate: BenchEntry {
            cost: ray_cost(&spec),
            spec,
            timing: cand,
        },
        baseline: BenchEntry {
            cost: ray_cost(&base_spec),
            spec: base_spec,
            timing: base,
        },
    };
    println!("analytic cost ratio: {:.3}", report.analytic_ratio);
    println!(
        "measured cost ratio: {:.3} ({:.1} ms vs {:.1} ms median)",
        report.measured_ratio, report.candidate.timing.median_ms, report.baseline.timing.median_ms
    );
    let path = dir.join("bench.json");
    let text = serde_json::to_string_pretty(&report).expect("bench report serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn gen_toy(cfg: &RunConfig, spec: &ToySpec) -> Result<()> {
    let (ds, _) = generate_toy_scene(spec)?;
    let dir = command_dir(cfg, "gen-toy")?;
    write_blender_scene(&ds, &dir)?;
    let path = dir.join("scene.toml");
    fs::write(&path, spec.to_toml()).map_err(|e| Error::io(&path, e))?;
    info!("wrote {} views of {:?} to {}", ds.cameras.len(), spec.name, dir.display());
    Ok(())
}
