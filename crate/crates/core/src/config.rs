//! Run configuration shared by every command, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::LrSchedule;
use crate::error::{Error, Result};
use crate::extraction::ExtractionPlan;
use crate::fields::{EncodingConfig, RadianceFieldConfig, SampleFieldConfig};
use crate::pipeline::{PipelineKind, PipelineSpec};
use crate::scene::{generate_toy_scene, load_blender_scene, SceneDataset, ToySpec};
use crate::train::TrainOptions;

/// Environment variable holding the directory relative scene paths resolve against.
pub const DATA_ROOT_VAR: &str = "NEUSAMPLE_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SceneSource {
    /// NeRF-synthetic directory with `transforms_{train,test}.json`.
    Blender { dir: PathBuf },
    /// A built-in toy scene (`default` or `occluder`).
    Preset { name: String },
    /// A toy scene spec file.
    Toy { path: PathBuf },
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(root) if !path.exists() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn preset(name: &str) -> Result<ToySpec> {
    match name {
        "default" | "toy" => Ok(ToySpec::default_scene()),
        "occluder" => Ok(ToySpec::occluder_scene()),
        other => Err(Error::config(
            "scene.name",
            format!("unknown preset {other:?}; expected \"default\" or \"occluder\""),
        )),
    }
}

impl SceneSource {
    pub fn toy_spec(&self) -> Result<Option<ToySpec>> {
        match self {
            SceneSource::Blender { .. } => Ok(None),
            SceneSource::Preset { name } => preset(name).map(Some),
            SceneSource::Toy { path } => ToySpec::load(&resolve(path)).map(Some),
        }
    }

    pub fn load(&self, downscale: usize) -> Result<SceneDataset> {
        match self {
            SceneSource::Blender { dir } => load_blender_scene(&resolve(dir), downscale),
            _ => {
                let spec = self.toy_spec()?.expect("toy source");
                let (ds, _) = generate_toy_scene(&spec)?;
                if downscale > 1 {
                    downscale_dataset(ds, downscale)
                } else {
                    Ok(ds)
                }
            }
        }
    }
}

fn downscale_dataset(mut ds: SceneDataset, factor: usize) -> Result<SceneDataset> {
    for img in &mut ds.images {
        *img = img.downscale(factor)?;
    }
    for cam in &mut ds.cameras {
        *cam = cam.downscaled(factor);
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBaseline {
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for CostBaseline {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub downscale: usize,
    /// Rays per graph when rendering images.
    pub render_chunk: usize,
    pub scene: SceneSource,
    pub pipeline: PipelineSpec,
    /// Sample counts of the hierarchical pipeline that cost ratios are reported against.
    pub cost_baseline: CostBaseline,
    pub train: TrainOptions,
    pub extraction: ExtractionPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized profile: the default toy scene, width-64 networks, 32 samples per ray.
    pub fn desk() -> Self {
        let radiance = RadianceFieldConfig {
            width: 64,
            depth: 4,
            skip_after: 2,
            position_encoding: EncodingConfig::new(6),
            direction_encoding: EncodingConfig::new(4),
        };
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("runs/desk"),
            downscale: 1,
            render_chunk: 1024,
            scene: SceneSource::Preset {
                name: "default".into(),
            },
            pipeline: PipelineSpec::Neusample {
                sample_field: SampleFieldConfig {
                    width: 64,
                    depth: 8,
                    skip_after: 4,
                    n_samples: 32,
                    origin_encoding: EncodingConfig::new(4),
                    direction_encoding: EncodingConfig::new(4),
                },
                radiance,
            },
            cost_baseline: CostBaseline::default(),
            train: TrainOptions {
                iters: 5000,
                batch_rays: 128,
                schedule: LrSchedule {
                    initial: 1e-3,
                    last: 1e-4,
                    total_steps: 5000,
                    power: 1.0,
                },
                noise_std: 0.0,
                chunk_rays: 128,
                seed: 0,
                log_every: 500,
            },
            extraction: ExtractionPlan {
                n_e: 8,
                depth_boost: false,
                boost_pose_count: 24,
                boost_rays_per_iter: 1024,
                boost_lr: 1e-4,
                boost_epochs: 2,
                finetune_iters: 1000,
            },
        }
    }

    /// Full-size networks and schedule; very slow on a CPU.
    pub fn full() -> Self {
        Self {
            out: PathBuf::from("runs/full"),
            pipeline: PipelineSpec::Neusample {
                sample_field: SampleFieldConfig::default(),
                radiance: RadianceFieldConfig::default(),
            },
            train: TrainOptions::default(),
            extraction: ExtractionPlan::default(),
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(
                "profile",
                format!("unknown profile {other:?}; expected \"desk\" or \"full\""),
            )),
        }
    }

    /// Switches the pipeline kind, keeping the radiance architecture. The hierarchical
    /// baseline splits the NeuSample budget as `N/4` coarse and `N/2` fine samples, so both
    /// evaluate the radiance network `N` times per ray.
    pub fn with_pipeline_kind(mut self, kind: PipelineKind) -> Self {
        self.pipeline = match (&self.pipeline, kind) {
            (
                PipelineSpec::Neusample {
                    sample_field,
                    radiance,
                },
                PipelineKind::Hierarchical,
            ) => PipelineSpec::Hierarchical {
                radiance: radiance.clone(),
                n_coarse: (sample_field.n_samples / 4).max(1),
                n_fine: (sample_field.n_samples / 2).max(1),
            },
            (
                PipelineSpec::Hierarchical {
                    radiance,
                    n_coarse,
                    n_fine,
                },
                PipelineKind::Neusample,
            ) => PipelineSpec::Neusample {
                sample_field: SampleFieldConfig {
                    width: radiance.width,
                    depth: radiance.depth,
                    skip_after: radiance.depth / 2,
                    n_samples: 2 * n_coarse + n_fine,
                    ..Default::default()
                },
                radiance: radiance.clone(),
            },
            _ => self.pipeline,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.downscale == 0 {
            return Err(Error::config("downscale", "must be at least 1"));
        }
        if self.render_chunk == 0 {
            return Err(Error::config("render_chunk", "must be positive"));
        }
        self.pipeline.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Hierarchical pipeline with the baseline sample counts and `spec`'s radiance network.
    pub fn cost_baseline_for(&self, spec: &PipelineSpec) -> PipelineSpec {
        let radiance = match spec {
            PipelineSpec::Neusample { radiance, .. } | PipelineSpec::Hierarchical { radiance, .. } => {
                radiance.clone()
            }
        };
        PipelineSpec::Hierarchical {
            radiance,
            n_coarse: self.cost_baseline.n_coarse,
            n_fine: self.cost_baseline.n_fine,
        }
    }

    /// Analytic per-ray cost of `spec` relative to [`RunConfig::cost_baseline_for`].
    pub fn cost_ratio(&self, spec: &PipelineSpec) -> Result<f64> {
        crate::cost::relative_cost(&self.cost_baseline_for(spec), spec)
    }

    /// Training options with the run seed applied.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Fine-tuning options: the tail of the base schedule.
    pub fn finetune_options(&self) -> TrainOptions {
        let mut o = self.train_options();
        o.schedule = o.schedule.tail(self.extraction.finetune_iters);
        o.iters = self.extraction.finetune_iters;
        o
    }
}
