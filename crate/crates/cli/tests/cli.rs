use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neusample::config::{RunConfig, SceneSource};
use neusample::pipeline::PipelineSpec;
use neusample::report::MetricsReport;
use neusample::scene::ToySpec;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neusample"));
    c.env("RUST_LOG", "warn").env_remove("NEUSAMPLE_DATA");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16x16 toy scene and a config with width-16 networks, stored in `dir`.
fn tiny_setup(dir: &Path) -> PathBuf {
    let mut spec = ToySpec::default_scene();
    spec.cameras.width = 16;
    spec.cameras.height_px = 16;
    spec.cameras.count = 10;
    let spec_path = dir.join("scene.toml");
    std::fs::write(&spec_path, spec.to_toml()).unwrap();

    let mut cfg = RunConfig::desk();
    cfg.scene = SceneSource::Toy { path: spec_path };
    cfg.out = dir.join("run");
    if let PipelineSpec::Neusample {
        sample_field,
        radiance,
    } = &mut cfg.pipeline
    {
        sample_field.width = 16;
        sample_field.n_samples = 8;
        radiance.width = 16;
    }
    cfg.train.iters = 4;
    cfg.train.batch_rays = 32;
    cfg.train.chunk_rays = 16;
    cfg.train.log_every = 2;
    cfg.extraction.n_e = 4;
    cfg.extraction.finetune_iters = 2;
    cfg.extraction.boost_pose_count = 2;
    cfg.extraction.boost_rays_per_iter = 32;
    let path = dir.join("config.toml");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn config_errors_exit_with_2() {
    let out = run(&["train", "--workers", "0", "--iters", "0", "--out", "/nonexistent/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("workers"));
    let out = run(&["bench", "--profile", "huge"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_scene");
    let scene = format!("blender:{}", s(&missing));
    let out = run(&["train", "--iters", "0", "--scene", &scene, "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn numerical_abort_exits_with_4_and_dumps_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_setup(dir.path());
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.train.schedule.initial = 1e300;
    cfg.train.schedule.last = 1e300;
    cfg.train.iters = 50;
    cfg.save(&cfg_path).unwrap();
    let out = run(&["train", "--config", s(&cfg_path)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("run");
    assert!(run_dir.join("abort.txt").exists());
    assert!(run_dir.join("abort.manifest").exists());
}

#[test]
fn zero_iterations_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    ok(&["train", "--config", s(&cfg), "--iters", "0"]);
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["config.toml", "final.blob", "final.manifest"]);
}

#[test]
fn train_render_extract_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--checkpoint-every", "2"]);
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(run_dir.join("step_0000002.manifest").exists());

    // the written config reproduces the run bit for bit
    let final_blob = std::fs::read(run_dir.join("final.blob")).unwrap();
    let rerun = dir.path().join("rerun");
    ok(&["train", "--config", s(&run_dir.join("config.toml")), "--out", s(&rerun)]);
    assert_eq!(std::fs::read(rerun.join("final.blob")).unwrap(), final_blob);

    let ck = run_dir.join("final");
    let manifest = std::fs::read(run_dir.join("final.manifest")).unwrap();
    ok(&["render", "--checkpoint", s(&ck), "--views", "4"]);
    let render_dir = run_dir.join("render");
    let first = std::fs::read(render_dir.join("0004.png")).unwrap();
    ok(&["render", "--checkpoint", s(&ck), "--views", "4", "--dump-samples", "3:5"]);
    assert_eq!(std::fs::read(render_dir.join("0004.png")).unwrap(), first);
    let samples = std::fs::read_to_string(render_dir.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 8, "{samples}");

    let out = ok(&["eval", "--checkpoint", s(&ck), "--views", "4", "--reference", s(&render_dir)]);
    assert!(out.contains("analytic cost ratio"), "{out}");
    let report = MetricsReport::load(&run_dir.join("eval/metrics.csv")).unwrap();
    assert!(report.views().all(|r| r.psnr == 99.0), "{report:?}");
    let text = std::fs::read_to_string(run_dir.join("eval/metrics.csv")).unwrap();
    assert_eq!(MetricsReport::from_csv(&text).unwrap().to_csv().unwrap(), text);

    ok(&["extract", "--checkpoint", s(&ck), "--depth-boost"]);
    let report = MetricsReport::load(&run_dir.join("extract/metrics.csv")).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["regular", "extracted"]);
    assert!(report.rows[1].cost_ratio < report.rows[0].cost_ratio);
    assert!(run_dir.join("extract/extracted.manifest").exists());

    // inputs are never modified
    assert_eq!(std::fs::read(run_dir.join("final.manifest")).unwrap(), manifest);
    assert_eq!(std::fs::read(run_dir.join("final.blob")).unwrap(), final_blob);
}

#[test]
fn identity_extraction_reports_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    ok(&["train", "--config", s(&cfg), "--iters", "2"]);
    let ck = dir.path().join("run/final");
    ok(&["extract", "--checkpoint", s(&ck), "--n-e", "8", "--finetune-iters", "0", "--no-depth-boost"]);
    let report = MetricsReport::load(&dir.path().join("run/extract/metrics.csv")).unwrap();
    let (a, b) = (&report.rows[0], &report.rows[1]);
    assert_eq!((a.psnr, a.ssim, a.cost_ratio), (b.psnr, b.ssim, b.cost_ratio));

    let out = run(&["extract", "--checkpoint", s(&ck), "--n-e", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    ok(&["train", "--config", s(&cfg), "--iters", "0"]);
    let ck = dir.path().join("run/final");
    let out = run(&["render", "--checkpoint", s(&ck), "--profile", "desk"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_reports_the_reference_cost_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "bench",
        "--profile",
        "full",
        "--rays",
        "1",
        "--repeats",
        "1",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.contains("analytic cost ratio: 0.754"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench/bench.json")).unwrap())
            .unwrap();
    assert!((json["analytic_ratio"].as_f64().unwrap() - 0.754).abs() < 1e-3);
}

#[test]
fn gen_toy_writes_a_loadable_blender_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    ok(&["gen-toy", "--config", s(&cfg)]);
    let scene = dir.path().join("run/gen-toy");
    assert!(scene.join("transforms_train.json").exists());
    let out = dir.path().join("b");
    let arg = format!("blender:{}", s(&scene));
    ok(&["train", "--config", s(&cfg), "--scene", &arg, "--iters", "1", "--out", s(&out)]);
    assert!(out.join("final.manifest").exists());
}
