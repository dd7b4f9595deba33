//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.
//!
//! Runs without the libtest harness so that the lines always reach the terminal.

mod common;

use std::time::Instant;

use neusample::bench::evaluate;
use neusample::checkpoint::{Checkpoint, SavedOptimizer};
use neusample::config::RunConfig;
use neusample::cost::{reference_baseline, reference_neusample, relative_cost};
use neusample::extraction::{extract_pipeline, run_extraction, ExtractionPlan};
use neusample::fields::SampleFieldConfig;
use neusample::pipeline::{Pipeline, PipelineKind, PipelineSpec};
use neusample::render::composite;
use neusample::sampling::{stratified_sample, Ray, SampleSet};
use neusample::scene::{generate_toy_scene, SceneDataset, ToySpec};
use neusample::train::{render_view, worker_pool, Trainer, TrainingSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use common::*;

const COST_TOL: f64 = 0.02;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const SLAB_REL_TOL: f64 = 0.01;
const ORACLE_MAX_ERR: f64 = 2.0 / 255.0;
const COMPOSITE_SAMPLES: usize = 256;
const TV_TOL: f64 = 0.02;
const TV_DRAWS: usize = 100_000;
const PARITY_DB: f64 = 0.5;
const EXTRACTION_LOSS_DB: f64 = 1.5;
/// Parity is judged at the end of a full 20k-step schedule.
const PARITY_ITERS: u64 = 20_000;
/// Both regular models of criterion 6 train on a 2000-step schedule to fit its time budget.
const EXTRACTION_ITERS: u64 = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cost_ratios() -> Outcome {
    let base = reference_baseline();
    let regular = |n| relative_cost(&base, &reference_neusample(n)).unwrap();
    let cases = [(192, 0.754), (128, 0.504), (64, 0.254), (32, 0.129)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, want) in cases {
        let got = regular(n);
        pass &= (got - want).abs() <= COST_TOL;
        parts.push(format!("N={n}: {got:.4} (want {want})"));
    }
    outcome(pass, parts.join(", "))
}

fn gradient_suite() -> Outcome {
    let ops = op_errors();
    let (worst_name, worst_op) = ops
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let sf = sample_field_error();
    let rf = radiance_field_error();
    let e2e = end_to_end_error();
    let pass = worst_op < OP_TOL && sf < OP_TOL && rf < OP_TOL && e2e < E2E_TOL;
    outcome(
        pass,
        format!(
            "{} ops, worst {worst_name} {worst_op:.1e}; sample field {sf:.1e}; radiance field {rf:.1e}; end-to-end {e2e:.1e}",
            ops.len()
        ),
    )
}

fn analytic_compositing() -> Outcome {
    // homogeneous slab filling the whole ray
    let (sigma, near, far) = (0.5, 2.0, 6.0);
    let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], near, far).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let want = 1.0 - (-sigma * (far - near)).exp();
    let mut slab_err = 0.0f64;
    for _ in 0..16 {
        let s = stratified_sample(&ray, COMPOSITE_SAMPLES, &mut rng);
        let dens = vec![sigma; s.len()];
        let out = composite(&s, &dens, &vec![[0.5; 3]; s.len()], 0.0, None, &mut rng).unwrap();
        slab_err = slab_err.max((out.opacity - want).abs() / want);
    }

    let spec = ToySpec::default_scene();
    let (ds, oracle) = generate_toy_scene(&spec).unwrap();
    let view = ds.test_indices()[0];
    let cam = &ds.cameras[view];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errors = Vec::new();
    for r in cam.rays(ds.near, ds.far).unwrap() {
        let s: SampleSet = stratified_sample(&r, COMPOSITE_SAMPLES, &mut rng);
        let (dens, rgb): (Vec<f64>, Vec<[f64; 3]>) =
            s.positions.iter().map(|p| oracle.medium_at(*p)).unzip();
        let got = composite(&s, &dens, &rgb, 0.0, ds.background, &mut rng).unwrap().color;
        let exact = oracle.trace(&r).color;
        errors.push((0..3).map(|c| (got[c] - exact[c]).abs()).fold(0.0, f64::max));
    }
    errors.sort_by(f64::total_cmp);
    let max = *errors.last().unwrap();
    let within = errors.iter().filter(|&&e| e <= ORACLE_MAX_ERR).count();
    let pass = slab_err <= SLAB_REL_TOL && max <= ORACLE_MAX_ERR;
    outcome(
        pass,
        format!(
            "slab α_acc rel err {slab_err:.2e}; oracle view {view} ({}x{}) max err {:.2}/255, {within}/{} pixels within 2/255, p99 {:.2}/255",
            cam.width,
            cam.height,
            max * 255.0,
            errors.len(),
            errors[errors.len() * 99 / 100] * 255.0
        ),
    )
}

fn sampler_distribution() -> Outcome {
    let tv = inverse_cdf_tv(TV_DRAWS, neusample::sampling::WEIGHT_FLOOR, 17);
    let failures = stratified_coverage_failures(500);
    outcome(
        tv < TV_TOL && failures == 0,
        format!("TV distance {tv:.4} over {TV_DRAWS} draws; stratified coverage failures {failures}/500"),
    )
}

fn mean_test_psnr(p: &Pipeline, ds: &SceneDataset, pool: &ThreadPool) -> f64 {
    let (report, _) = evaluate(p, ds, &ds.test_indices(), 0.0, 1024, pool).unwrap();
    report.aggregate().unwrap().psnr
}

fn with_samples(cfg: &RunConfig, n: usize) -> RunConfig {
    let mut cfg = cfg.clone();
    if let PipelineSpec::Neusample { sample_field, .. } = &mut cfg.pipeline {
        *sample_field = SampleFieldConfig {
            n_samples: n,
            ..sample_field.clone()
        };
    }
    cfg
}

fn train(cfg: &RunConfig, ds: &SceneDataset, pool: &ThreadPool) -> Pipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.pipeline.build(&mut rng).unwrap();
    let mut t = Trainer::all(p, cfg.train_options()).unwrap();
    t.run(&TrainingSet::from_dataset(ds).unwrap(), cfg.train.iters, pool, |_, _| Ok(()))
        .unwrap();
    t.pipeline
}

fn desk_scene(name: &str) -> SceneDataset {
    let spec = match name {
        "occluder" => ToySpec::occluder_scene(),
        _ => ToySpec::default_scene(),
    };
    generate_toy_scene(&spec).unwrap().0
}

fn training_parity(pool: &ThreadPool) -> Outcome {
    let ds = desk_scene("default");
    let mut cfg = RunConfig::desk();
    cfg.train.iters = PARITY_ITERS;
    cfg.train.schedule.total_steps = PARITY_ITERS;
    let ns = mean_test_psnr(&train(&cfg, &ds, pool), &ds, pool);
    let h_cfg = cfg.clone().with_pipeline_kind(PipelineKind::Hierarchical);
    let h = mean_test_psnr(&train(&h_cfg, &ds, pool), &ds, pool);
    let n = match &cfg.pipeline {
        PipelineSpec::Neusample { sample_field, .. } => sample_field.n_samples,
        _ => unreachable!(),
    };
    let (nc, nf) = match &h_cfg.pipeline {
        PipelineSpec::Hierarchical { n_coarse, n_fine, .. } => (*n_coarse, *n_fine),
        _ => unreachable!(),
    };
    outcome(
        h - ns <= PARITY_DB,
        format!(
            "{} iters: NeuSample-{n} {ns:.2} dB vs hierarchical {nc}+{nf} {h:.2} dB (gap {:+.2} dB)",
            cfg.train.iters,
            h - ns
        ),
    )
}

fn extract_and_score(
    regular: &Pipeline,
    ds: &SceneDataset,
    cfg: &RunConfig,
    n_e: usize,
    boost: bool,
    pool: &ThreadPool,
) -> f64 {
    let plan = ExtractionPlan {
        n_e,
        depth_boost: boost,
        ..cfg.extraction.clone()
    };
    let p = run_extraction(regular, ds, &plan, &cfg.finetune_options(), 1024, pool).unwrap();
    mean_test_psnr(&p, ds, pool)
}

fn extraction_pipeline(pool: &ThreadPool) -> Outcome {
    let mut cfg = with_samples(&RunConfig::desk(), 64);
    cfg.train.iters = EXTRACTION_ITERS;
    cfg.train.schedule.total_steps = EXTRACTION_ITERS;

    let ds = desk_scene("default");
    let regular = train(&cfg, &ds, pool);
    let reg = mean_test_psnr(&regular, &ds, pool);
    let ext = extract_and_score(&regular, &ds, &cfg, 16, false, pool);

    let identity = extract_pipeline(&regular, 64).unwrap();
    let view = ds.test_indices()[0];
    let a = render_view(&regular, &ds, view, 1024, pool).unwrap();
    let b = render_view(&identity, &ds, view, 1024, pool).unwrap();
    let bit_exact = identity == regular && a.pixels == b.pixels;

    let occ = desk_scene("occluder");
    let occ_regular = train(&cfg, &occ, pool);
    let occ_reg = mean_test_psnr(&occ_regular, &occ, pool);
    let plain = extract_and_score(&occ_regular, &occ, &cfg, 16, false, pool);
    let boosted = extract_and_score(&occ_regular, &occ, &cfg, 16, true, pool);

    let pass = reg - ext <= EXTRACTION_LOSS_DB && boosted >= plain && bit_exact;
    outcome(
        pass,
        format!(
            "64->16 + {} finetune: {reg:.2} -> {ext:.2} dB (loss {:.2}); occluder regular {occ_reg:.2}, boost {boosted:.2} vs no boost {plain:.2} dB; identity bit-exact {bit_exact}",
            cfg.extraction.finetune_iters,
            reg - ext
        ),
    )
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    if let PipelineSpec::Neusample { sample_field, radiance } = &mut cfg.pipeline {
        sample_field.width = 16;
        sample_field.n_samples = 8;
        radiance.width = 16;
    }
    cfg.train.batch_rays = 64;
    cfg.train.chunk_rays = 32;
    cfg.train.noise_std = 0.5;
    cfg
}

fn determinism_and_round_trip() -> Outcome {
    let mut spec = ToySpec::default_scene();
    spec.cameras.width = 16;
    spec.cameras.height_px = 16;
    let (ds, _) = generate_toy_scene(&spec).unwrap();
    let data = TrainingSet::from_dataset(&ds).unwrap();
    let cfg = tiny_config();
    let pool = worker_pool(1).unwrap();
    let run = || {
        let p = cfg.pipeline.build(&mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let mut t = Trainer::all(p, cfg.train_options()).unwrap();
        t.run(&data, 25, &pool, |_, _| Ok(())).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let bits = |t: &Trainer| -> Vec<u64> {
        t.pipeline.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
    };
    let reproducible = bits(&a) == bits(&b) && a.adam == b.adam;

    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint {
        pipeline: a.pipeline.clone(),
        step: a.step_count(),
        optimizer: Some(SavedOptimizer {
            trainable: a.trainable.clone(),
            adam: a.adam.clone(),
        }),
    };
    let path = dir.path().join("ck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let round_trip = back == ck
        && back.pipeline.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect::<Vec<_>>()
            == bits(&a);

    let fx = tempfile::tempdir().unwrap();
    write_fixture(fx.path());
    let ray_err = fixture_ray_error(fx.path());

    outcome(
        reproducible && round_trip && ray_err < RAY_TOL,
        format!(
            "same-seed training bit-identical {reproducible}; checkpoint round-trip bit-exact {round_trip}; fixture ray max err {ray_err:.1e}"
        ),
    )
}

fn main() {
    let pool = worker_pool(1).unwrap();
    // Time budgets in seconds. Criterion 5 has only a target for an 8-core machine, so its
    // time is reported but not checked.
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Option<f64>, Check)> = vec![
        ("1 cost-ratio reproduction", Some(1.0), Box::new(cost_ratios)),
        ("2 gradient suite", Some(120.0), Box::new(gradient_suite)),
        ("3 analytic compositing", Some(60.0), Box::new(analytic_compositing)),
        ("4 sampler distribution", Some(30.0), Box::new(sampler_distribution)),
        ("5 desk-scale training parity", None, Box::new(|| training_parity(&pool))),
        ("6 extraction pipeline", Some(1200.0), Box::new(|| extraction_pipeline(&pool))),
        ("7 determinism and round-trip", Some(120.0), Box::new(determinism_and_round_trip)),
    ];
    // Optional positional arguments select criteria by number, e.g. `-- 1 3`.
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, budget, check) in &criteria {
        if !selected.is_empty() && !selected.iter().any(|s| name.split(' ').next() == Some(s.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let in_time = budget.is_none_or(|b| secs < b);
        let pass = o.pass && in_time;
        let verdict = if pass { "PASS" } else { "FAIL" };
        let limit = budget.map_or(String::new(), |b| format!(" of {b:.0}s"));
        println!("{verdict} criterion {name}: {} [{secs:.1}s{limit}]", o.detail);
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
