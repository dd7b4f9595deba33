//! Checks shared by the focused test targets and the acceptance suite.
#![allow(dead_code)]

use ndarray::Array2;
use neusample::autodiff::{grad_check, relative_error, GradCheckConfig, Graph, Tensor, Value};
use neusample::fields::{
    EncodingConfig, LinearVars, Module, RadianceField, RadianceFieldConfig, SampleField,
    SampleFieldConfig,
};
use neusample::pipeline::{Pipeline, PipelineSpec};
use neusample::sampling::{bin_edges, inverse_cdf_resample, midpoint_depths, stratified_sample, Ray};
use neusample::train::{loss_and_grads, worker_pool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use neusample::scene::{load_blender_scene, RgbImage};

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Values bounded away from 0 so kinks (relu, abs) are not straddled by the difference step.
pub fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values, so a sort permutation is stable under the difference step.
pub fn distinct(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        0.1 * (c as f64 + 1.0) + 0.01 * r as f64 + rng.random_range(0.0..0.004)
    })
}

/// Projects any output onto a fixed random direction so every element's gradient matters.
pub fn project(g: &mut Graph, v: Value, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = g.shape(v);
    let w = g.constant(random(r, c, &mut rng));
    let m = g.mul(v, w).unwrap();
    g.sum(m)
}

fn max_error<F>(params: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Graph, &[Value]) -> Value,
{
    grad_check(
        &params,
        |g, vs| {
            let out = f(g, vs);
            Ok(project(g, out, 99))
        },
        GradCheckConfig::default(),
    )
    .unwrap()
    .max_rel_error
}

/// Worst relative finite-difference error of every tape op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Value]) -> Value| {
        out.push((name, max_error(params, f)));
    };
    check("matmul", vec![random(3, 4, r), random(4, 2, r)], &|g, v| g.matmul(v[0], v[1]).unwrap());
    check("linear", vec![random(5, 3, r), random(4, 3, r), random(1, 4, r)], &|g, v| {
        g.linear(v[0], v[1], v[2]).unwrap()
    });
    check("add broadcast", vec![random(3, 4, r), random(1, 4, r)], &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub broadcast", vec![random(3, 4, r), random(3, 1, r)], &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul broadcast", vec![random(3, 4, r), random(3, 1, r)], &|g, v| g.mul(v[0], v[1]).unwrap());
    check("concat", vec![random(3, 2, r), random(3, 3, r)], &|g, v| g.concat(&[v[0], v[1]]).unwrap());
    check("relu", vec![away_from_zero(3, 4, r)], &|g, v| g.relu(v[0]));
    check("sigmoid", vec![random(3, 4, r)], &|g, v| g.sigmoid(v[0]));
    check("exp", vec![random(3, 4, r)], &|g, v| g.exp(v[0]));
    check("neg", vec![random(3, 4, r)], &|g, v| g.neg(v[0]));
    check("abs", vec![away_from_zero(3, 4, r)], &|g, v| g.abs(v[0]));
    check("square", vec![random(3, 4, r)], &|g, v| g.square(v[0]));
    check("sin", vec![random(3, 4, r)], &|g, v| g.sin(v[0]));
    check("cos", vec![random(3, 4, r)], &|g, v| g.cos(v[0]));
    check("scale", vec![random(3, 4, r)], &|g, v| g.scale(v[0], -2.5));
    check("add_scalar", vec![random(3, 4, r)], &|g, v| g.add_scalar(v[0], 0.7));
    check("sum", vec![random(3, 4, r)], &|g, v| g.sum(v[0]));
    check("mean", vec![random(3, 4, r)], &|g, v| g.mean(v[0]));
    check("row_sums", vec![random(3, 4, r)], &|g, v| g.row_sums(v[0]));
    check("segment_sum", vec![random(6, 3, r)], &|g, v| g.segment_sum(v[0], 3).unwrap());
    check("reshape", vec![random(3, 4, r)], &|g, v| g.reshape(v[0], 2, 6).unwrap());
    check("gather_rows", vec![random(3, 4, r)], &|g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap());
    check("sort_rows", vec![-distinct(3, 5, r)], &|g, v| g.sort_rows(v[0]));
    check("cumsum_exclusive", vec![random(3, 5, r)], &|g, v| g.cumsum_exclusive(v[0]));
    check("gaps", vec![distinct(3, 5, r)], &|g, v| g.gaps(v[0], &[1.0, 2.0, 0.9]).unwrap());
    check("positional_encode", vec![random(3, 3, r)], &|g, v| {
        g.positional_encode(v[0], EncodingConfig::new(4))
    });
    out
}

pub fn sample_config() -> SampleFieldConfig {
    SampleFieldConfig {
        width: 16,
        depth: 4,
        skip_after: 2,
        n_samples: 6,
        origin_encoding: EncodingConfig::new(3),
        direction_encoding: EncodingConfig::new(3),
    }
}

pub fn radiance_config() -> RadianceFieldConfig {
    RadianceFieldConfig {
        width: 16,
        depth: 4,
        skip_after: 2,
        position_encoding: EncodingConfig::new(3),
        direction_encoding: EncodingConfig::new(2),
    }
}

/// Rebuilds layer handles from a flat `[w0, b0, w1, b1, …]` parameter list.
pub fn layers(vs: &[Value]) -> Vec<LinearVars> {
    vs.chunks(2)
        .map(|p| LinearVars {
            weight: p[0],
            bias: p[1],
        })
        .collect()
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Worst relative error over every sample-field parameter (width 16).
pub fn sample_field_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let field = SampleField::new(sample_config(), &mut rng).unwrap();
    let origins = [[0.3, -3.9, 1.0], [2.0, 2.5, 0.4], [-3.0, 0.1, 1.7]];
    let dirs = [unit([0.0, 1.0, -0.2]), unit([-0.5, -0.6, -0.1]), unit([0.8, 0.0, -0.4])];
    let input = field.encode_rays(&origins, &dirs);
    let params: Vec<Tensor> = field.params().into_iter().cloned().collect();
    let report = grad_check(
        &params,
        |g, vs| {
            let x = g.constant(input.clone());
            let out = field.forward(g, &layers(vs), x)?;
            Ok(project(g, out, 5))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_error
}

/// Worst relative error over every radiance-field parameter (width 16).
pub fn radiance_field_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = RadianceField::new(radiance_config(), &mut rng).unwrap();
    let xs = [[0.1, 0.2, -0.3], [0.5, -0.4, 0.2], [-0.7, 0.6, 0.1], [0.0, 0.0, 0.9]];
    let ds = [
        unit([0.0, 1.0, 0.0]),
        unit([1.0, 1.0, 0.0]),
        unit([0.2, -1.0, 0.3]),
        unit([0.0, 0.3, -1.0]),
    ];
    let ex = field.encode_positions(&xs);
    let ed = field.encode_directions(&ds);
    let params: Vec<Tensor> = field.params().into_iter().cloned().collect();
    let report = grad_check(
        &params,
        |g, vs| {
            let (px, pd) = (g.constant(ex.clone()), g.constant(ed.clone()));
            let (raw, rgb) = field.forward(g, &layers(vs), px, pd)?;
            let a = project(g, raw, 6);
            let b = project(g, rgb, 7);
            g.add(a, b)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_error
}

pub fn tiny_neusample(seed: u64) -> Pipeline {
    PipelineSpec::Neusample {
        sample_field: sample_config(),
        radiance: radiance_config(),
    }
    .build(&mut ChaCha8Rng::seed_from_u64(seed))
    .unwrap()
}

pub fn scene_rays() -> (Vec<Ray>, Vec<[f64; 3]>) {
    let rays = vec![
        Ray::new([0.0, -4.0, 0.5], unit([0.05, 1.0, -0.1]), 2.0, 6.0).unwrap(),
        Ray::new([3.0, 2.0, 1.0], unit([-0.8, -0.5, -0.2]), 2.0, 6.0).unwrap(),
        Ray::new([-2.5, 3.0, 0.2], unit([0.6, -0.7, 0.0]), 2.0, 6.0).unwrap(),
    ];
    let colors = vec![[0.9, 0.2, 0.1], [0.1, 0.6, 0.3], [0.5, 0.5, 0.9]];
    (rays, colors)
}

/// Photometric loss of a NeuSample pipeline against finite differences in every parameter of
/// both networks, through sorting, compositing and the background fill.
pub fn end_to_end_error() -> f64 {
    let pool = worker_pool(1).unwrap();
    let (rays, colors) = scene_rays();
    let pipeline = tiny_neusample(4);
    let loss = |p: &Pipeline| {
        loss_and_grads(p, &[true, true], &rays, &colors, Some([1.0; 3]), 0.0, (0, 0), 64, &pool)
            .unwrap()
    };
    let (_, analytic) = loss(&pipeline);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = pipeline.clone();
    let n_params = probe.params().len();
    assert_eq!(analytic.len(), n_params);
    for k in 0..n_params {
        let (rows, cols) = probe.params()[k].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = probe.params()[k][[r, c]];
                probe.params_mut()[k][[r, c]] = orig + h;
                let up = loss(&probe).0;
                probe.params_mut()[k][[r, c]] = orig - h;
                let down = loss(&probe).0;
                probe.params_mut()[k][[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(relative_error(analytic[k][[r, c]], numeric, 1e-6));
            }
        }
    }
    worst
}

pub const TV_WEIGHTS: [f64; 8] = [0.02, 0.1, 0.4, 0.9, 0.3, 0.0, 0.05, 0.6];

/// Total-variation distance between binned draws and target bin masses.
pub fn tv_distance(draws: &[f64], edges: &[f64], target: &[f64]) -> f64 {
    let mut counts = vec![0usize; target.len()];
    for &t in draws {
        let i = edges[1..].partition_point(|&e| e <= t).min(target.len() - 1);
        counts[i] += 1;
    }
    let n = draws.len() as f64;
    0.5 * counts
        .iter()
        .zip(target)
        .map(|(&c, &p)| (c as f64 / n - p).abs())
        .sum::<f64>()
}

pub fn target_masses(weights: &[f64], floor: f64) -> Vec<f64> {
    let mass: Vec<f64> = weights.iter().map(|w| w + floor).collect();
    let total: f64 = mass.iter().sum();
    mass.iter().map(|m| m / total).collect()
}

/// TV distance of `draws` inverse-CDF samples against the fixed 8-bin PDF.
pub fn inverse_cdf_tv(draws: usize, floor: f64, seed: u64) -> f64 {
    let coarse = midpoint_depths(2.0, 6.0, 8);
    let edges = bin_edges(&coarse, 2.0, 6.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = inverse_cdf_resample(&coarse, &TV_WEIGHTS, 2.0, 6.0, draws, floor, &mut rng).unwrap();
    tv_distance(&d, &edges, &target_masses(&TV_WEIGHTS, floor))
}

/// Number of `(seed, n)` trials in which some stratified bin did not hold exactly one sample.
pub fn stratified_coverage_failures(trials: u64) -> usize {
    let mut failures = 0;
    for seed in 0..trials {
        let n = 1 + (seed as usize * 7) % 193;
        let ray = Ray::new([0.0; 3], [0.0, 1.0, 0.0], 2.0, 6.0).unwrap();
        let s = stratified_sample(&ray, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let step = 4.0 / n as f64;
        let mut hits = vec![0usize; n];
        for &t in &s.depths {
            hits[(((t - 2.0) / step).floor() as usize).min(n - 1)] += 1;
        }
        if hits.iter().any(|&h| h != 1) {
            failures += 1;
        }
    }
    failures
}

pub const RAY_TOL: f64 = 1e-9;

pub fn write_fixture(dir: &Path) {
    // 4x2 images, 90° horizontal field of view, so the focal length is exactly 2 pixels.
    let train = r#"{
        "camera_angle_x": 1.5707963267948966,
        "frames": [
            {"file_path": "./train/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,4],[0,0,0,1]]},
            {"file_path": "./train/r_1.png", "transform_matrix": [[0,-1,0,1],[1,0,0,2],[0,0,1,3],[0,0,0,1]]}
        ]
    }"#;
    let test = r#"{
        "camera_angle_x": 1.5707963267948966,
        "frames": [
            {"file_path": "./test/r_0", "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,-4],[0,0,0,1]]}
        ]
    }"#;
    std::fs::write(dir.join("transforms_train.json"), train).unwrap();
    std::fs::write(dir.join("transforms_test.json"), test).unwrap();
    for sub in ["train", "test"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let img = RgbImage::filled(4, 2, [0.2, 0.4, 0.6]);
    img.write_png(&dir.join("train/r_0.png")).unwrap();
    img.write_png(&dir.join("train/r_1.png")).unwrap();
    img.write_png(&dir.join("test/r_0.png")).unwrap();
}

pub fn close(a: [f64; 3], b: [f64; 3]) -> bool {
    (0..3).all(|k| (a[k] - b[k]).abs() < RAY_TOL)
}

/// Largest coordinate error of the fixture's corner rays against hand-computed values.
pub fn fixture_ray_error(dir: &Path) -> f64 {
    let ds = load_blender_scene(dir, 1).unwrap();
    let mut worst = 0.0f64;
    let mut diff = |a: [f64; 3], b: [f64; 3]| {
        for k in 0..3 {
            worst = worst.max((a[k] - b[k]).abs());
        }
    };
    // pixel centres: x = (px + ½ − W/2)/f, y = −(py + ½ − H/2)/f, camera looks down −z
    let n = 1.625f64.sqrt();
    let corners = [
        ((0, 0), [-0.75, 0.25, -1.0]),
        ((3, 0), [0.75, 0.25, -1.0]),
        ((0, 1), [-0.75, -0.25, -1.0]),
        ((3, 1), [0.75, -0.25, -1.0]),
    ];
    for ((px, py), d) in corners {
        let want = [d[0] / n, d[1] / n, d[2] / n];
        let r = ds.cameras[0].ray_for_pixel(px, py, 2.0, 6.0).unwrap();
        diff(r.origin, [0.0, 0.0, 4.0]);
        diff(r.direction, want);
        // 90° about z maps camera (x, y, z) to world (−y, x, z)
        let r = ds.cameras[1].ray_for_pixel(px, py, 2.0, 6.0).unwrap();
        diff(r.origin, [1.0, 2.0, 3.0]);
        diff(r.direction, [-want[1], want[0], want[2]]);
    }
    worst
}
