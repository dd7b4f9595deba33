//! Analytic inference cost.
//!
//! The unit is multiply-accumulates of affine layers. Encodings, activations and compositing
//! are left out; they are a small fraction of the total and scale the same way in both
//! pipelines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{RadianceFieldConfig, SampleFieldConfig};
use crate::pipeline::PipelineSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RayCost {
    /// Radiance-network evaluations per ray.
    pub radiance_evals: u64,
    /// Sample-network evaluations per ray.
    pub sample_field_evals: u64,
    pub macs: u64,
}

pub fn ray_cost(spec: &PipelineSpec) -> RayCost {
    match spec {
        PipelineSpec::Neusample {
            sample_field,
            radiance,
        } => {
            let n = sample_field.n_samples as u64;
            RayCost {
                radiance_evals: n,
                sample_field_evals: 1,
                macs: sample_field.macs() + n * radiance.macs(),
            }
        }
        PipelineSpec::Hierarchical {
            radiance,
            n_coarse,
            n_fine,
        } => {
            // the coarse net sees the coarse samples, the fine net sees them again plus the
            // resampled ones
            let evals = (2 * n_coarse + n_fine) as u64;
            RayCost {
                radiance_evals: evals,
                sample_field_evals: 0,
                macs: evals * radiance.macs(),
            }
        }
    }
}

/// Cost of `candidate` per ray as a fraction of `baseline`.
pub fn relative_cost(baseline: &PipelineSpec, candidate: &PipelineSpec) -> Result<f64> {
    let base = ray_cost(baseline).macs;
    if base == 0 {
        return Err(Error::invalid("relative_cost", "baseline has zero cost"));
    }
    Ok(ray_cost(candidate).macs as f64 / base as f64)
}

/// NeRF baseline: 8×256 radiance nets, 64 coarse and 128 fine samples.
pub fn reference_baseline() -> PipelineSpec {
    PipelineSpec::Hierarchical {
        radiance: RadianceFieldConfig::default(),
        n_coarse: 64,
        n_fine: 128,
    }
}

/// Full-size NeuSample with `n` samples per ray.
pub fn reference_neusample(n: usize) -> PipelineSpec {
    PipelineSpec::Neusample {
        sample_field: SampleFieldConfig {
            n_samples: n,
            ..Default::default()
        },
        radiance: RadianceFieldConfig::default(),
    }
}
