//! Versioned checkpoints: a TOML manifest next to a blob of little-endian `f64` arrays.
//!
//! `<name>.manifest` lists the architecture, training step, every stored array (name and
//! shape, in blob order) and the SHA-256 of `<name>.blob`. The blob is verified before any
//! array is decoded, so a damaged file never yields a partial load.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamState, LrSchedule, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, PipelineSpec};

pub const FORMAT: &str = "neusample-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    pipeline: PipelineSpec,
    blob: BlobInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerInfo>,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobInfo {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerInfo {
    trainable: Vec<bool>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: LrSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

/// Optimizer state with the per-network trainable mask its moments were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub trainable: Vec<bool>,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub step: u64,
    pub optimizer: Option<SavedOptimizer>,
}

/// `(manifest, blob)` paths for a checkpoint name; a trailing `.manifest` is accepted.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().is_some_and(|e| e == "manifest") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("manifest"), with("blob"))
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.pipeline.named_params();
        if let Some(opt) = &self.optimizer {
            for (i, m) in opt.adam.m.iter().enumerate() {
                out.push((format!("adam.m.{i}"), m));
            }
            for (i, v) in opt.adam.v.iter().enumerate() {
                out.push((format!("adam.v.{i}"), v));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest_path, blob_path) = checkpoint_paths(path);
        let arrays = self.arrays();
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(arrays.len());
        for (name, t) in &arrays {
            let (r, c) = t.dim();
            tensors.push(TensorInfo {
                name: name.clone(),
                shape: [r, c],
            });
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            pipeline: self.pipeline.spec(),
            blob: BlobInfo {
                file: blob_path
                    .file_name()
                    .expect("blob path has a file name")
                    .to_string_lossy()
                    .into_owned(),
                bytes: blob.len() as u64,
                sha256: hex::encode(Sha256::digest(&blob)),
            },
            optimizer: self.optimizer.as_ref().map(|o| OptimizerInfo {
                trainable: o.trainable.clone(),
                step: o.adam.step,
                beta1: o.adam.beta1,
                beta2: o.adam.beta2,
                eps: o.adam.eps,
                schedule: o.adam.schedule.clone(),
            }),
            tensors,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    /// Reads the architecture recorded in a manifest without touching the blob.
    pub fn read_spec(path: &Path) -> Result<PipelineSpec> {
        Ok(read_manifest(&checkpoint_paths(path).0)?.pipeline)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest_path, _) = checkpoint_paths(path);
        let manifest = read_manifest(&manifest_path)?;
        let blob_path = manifest_path.with_file_name(&manifest.blob.file);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob.bytes {
            return Err(Error::Checkpoint(format!(
                "{}: blob is {} bytes, manifest records {}",
                blob_path.display(),
                blob.len(),
                manifest.blob.bytes
            )));
        }
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != manifest.blob.sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: sha256 {digest} does not match manifest {}",
                blob_path.display(),
                manifest.blob.sha256
            )));
        }

        // weights are overwritten below; the rng only shapes the arrays
        let mut pipeline = manifest.pipeline.build(&mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, (usize, usize))> = pipeline
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.dim()))
            .collect();
        let mut values = decode_arrays(&manifest.tensors, &blob)?.into_iter();
        for (name, shape) in &expected {
            let (stored, t) = values
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            check_entry(name, *shape, &stored, &t)?;
        }
        let mut values = decode_arrays(&manifest.tensors, &blob)?.into_iter();
        for p in pipeline.params_mut() {
            *p = values.next().expect("counted above").1;
        }

        let optimizer = match manifest.optimizer {
            None => None,
            Some(info) => {
                let trainable_shapes: Vec<(usize, usize)> =
                    crate::train::trainable_params(&pipeline, &info.trainable)
                        .iter()
                        .map(|t| t.dim())
                        .collect();
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (kind, out) in [("m", &mut m), ("v", &mut v)] {
                    for (i, shape) in trainable_shapes.iter().enumerate() {
                        let name = format!("adam.{kind}.{i}");
                        let (stored, t) = values
                            .next()
                            .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
                        check_entry(&name, *shape, &stored, &t)?;
                        out.push(t);
                    }
                }
                Some(SavedOptimizer {
                    trainable: info.trainable,
                    adam: AdamState {
                        step: info.step,
                        m,
                        v,
                        beta1: info.beta1,
                        beta2: info.beta2,
                        eps: info.eps,
                        schedule: info.schedule,
                    },
                })
            }
        };
        if let Some((name, _)) = values.next() {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
        Ok(Checkpoint {
            pipeline,
            step: manifest.step,
            optimizer,
        })
    }

    /// Loads a checkpoint whose architecture must equal `expected`.
    pub fn load_expecting(path: &Path, expected: &PipelineSpec) -> Result<Self> {
        let found = Self::read_spec(path)?;
        if &found != expected {
            return Err(Error::Checkpoint(format!(
                "{}: stored architecture {} does not match the requested {}",
                path.display(),
                describe(&found),
                describe(expected)
            )));
        }
        Self::load(path)
    }
}

fn describe(spec: &PipelineSpec) -> String {
    match spec {
        PipelineSpec::Neusample {
            sample_field,
            radiance,
        } => format!(
            "neusample(N={}, sample width {}x{}, radiance width {}x{})",
            sample_field.n_samples,
            sample_field.width,
            sample_field.depth,
            radiance.width,
            radiance.depth
        ),
        PipelineSpec::Hierarchical {
            radiance,
            n_coarse,
            n_fine,
        } => format!(
            "hierarchical(N_c={n_coarse}, N_f={n_fine}, width {}x{})",
            radiance.width, radiance.depth
        ),
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // check the version before strict parsing so old or future files get a clear message
    let loose: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    match loose.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint manifest (format {other:?})",
                path.display()
            )))
        }
    }
    match loose.get("version").and_then(|v| v.as_integer()) {
        Some(v) if v == VERSION as i64 => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {other:?}, expected {VERSION}",
                path.display()
            )))
        }
    }
    toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn decode_arrays(infos: &[TensorInfo], blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut offset = 0usize;
    let mut out = Vec::with_capacity(infos.len());
    for info in infos {
        let [r, c] = info.shape;
        let len = r * c * 8;
        let bytes = blob.get(offset..offset + len).ok_or_else(|| {
            Error::Checkpoint(format!("blob too short for {}", info.name))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((
            info.name.clone(),
            Tensor::from_shape_vec((r, c), data).expect("sized from shape"),
        ));
        offset += len;
    }
    if offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    Ok(out)
}

fn check_entry(name: &str, shape: (usize, usize), stored: &str, t: &Tensor) -> Result<()> {
    if stored != name || t.dim() != shape {
        return Err(Error::Checkpoint(format!(
            "expected {name} with shape {shape:?}, found {stored} with shape {:?}",
            t.dim()
        )));
    }
    Ok(())
}
