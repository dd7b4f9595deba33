//! Loader for the NeRF synthetic (Blender) layout: `transforms_{train,test}.json` next to the
//! referenced PNG files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, RgbImage, SceneDataset, Split};
use crate::error::{Error, Result};

pub const BLENDER_NEAR: f64 = 2.0;
pub const BLENDER_FAR: f64 = 6.0;
const WHITE: [f64; 3] = [1.0; 3];

#[derive(Debug, Serialize, Deserialize)]
struct Transforms {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Pinhole focal length in pixels from the horizontal field of view.
pub fn focal_from_fov(camera_angle_x: f64, width: usize) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

fn read_transforms(path: &Path) -> Result<Transforms> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads train and test frames, composites RGBA onto white and downscales by `downscale`.
pub fn load_blender_scene(dir: &Path, downscale: usize) -> Result<SceneDataset> {
    if downscale == 0 {
        return Err(Error::config("downscale", "factor must be at least 1"));
    }
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut splits = Vec::new();
    let mut first_size = None;
    for (split, file) in [
        (Split::Train, "transforms_train.json"),
        (Split::Test, "transforms_test.json"),
    ] {
        let tf = read_transforms(&dir.join(file))?;
        if !(tf.camera_angle_x > 0.0 && tf.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::Data(format!(
                "{file}: camera_angle_x {} is not a valid field of view",
                tf.camera_angle_x
            )));
        }
        for (k, frame) in tf.frames.iter().enumerate() {
            let mut path = dir.join(&frame.file_path);
            if path.extension().is_none() {
                path.set_extension("png");
            }
            let full = RgbImage::read_png(&path, WHITE)?;
            let cam = Camera::new(
                frame.transform_matrix,
                focal_from_fov(tf.camera_angle_x, full.width),
                full.width,
                full.height,
            )
            .map_err(|e| Error::Data(format!("{file}: frames[{k}].transform_matrix: {e}")))?;
            match first_size {
                None => first_size = Some((cam.width, cam.height)),
                Some((w, h)) if (w, h) != (cam.width, cam.height) => {
                    return Err(Error::Data(format!(
                        "{}: image is {}x{} but earlier frames are {w}x{h}",
                        path.display(),
                        cam.width,
                        cam.height,
                    )));
                }
                Some(_) => {}
            }
            images.push(full.downscale(downscale)?);
            cameras.push(cam.downscaled(downscale));
            splits.push(split);
        }
    }
    let ds = SceneDataset {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "blender".into()),
        cameras,
        images,
        splits,
        near: BLENDER_NEAR,
        far: BLENDER_FAR,
        background: Some(WHITE),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` in the layout [`load_blender_scene`] reads: `{train,test}/r_<k>.png` plus one
/// transforms file per split. Views come back split by split, train first. All cameras must
/// share one focal length and resolution.
pub fn write_blender_scene(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let first = &ds.cameras[0];
    if ds
        .cameras
        .iter()
        .any(|c| c.focal != first.focal || (c.width, c.height) != (first.width, first.height))
    {
        return Err(Error::Data(
            "the Blender layout needs one shared focal length and resolution".into(),
        ));
    }
    let camera_angle_x = 2.0 * (0.5 * first.width as f64 / first.focal).atan();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut frames = Vec::new();
        for (view, _) in ds.splits.iter().enumerate().filter(|(_, s)| **s == split) {
            let k = frames.len();
            ds.images[view].write_png(&sub.join(format!("r_{k}.png")))?;
            frames.push(Frame {
                file_path: format!("./{name}/r_{k}"),
                transform_matrix: ds.cameras[view].pose,
            });
        }
        let path = dir.join(format!("transforms_{name}.json"));
        let text = serde_json::to_string_pretty(&Transforms {
            camera_angle_x,
            frames,
        })
        .expect("transforms serialize");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lego_focal() {
        let f = focal_from_fov(0.6911112070083618, 800);
        assert!((f - 1111.1110311937682).abs() < 1e-6, "{f}");
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("transforms_train.json"), r#"{"frames": []}"#).unwrap();
        let err = load_blender_scene(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("camera_angle_x"), "{err}");
    }

    #[test]
    fn written_scene_loads_back() {
        let mut spec = crate::scene::ToySpec::default_scene();
        spec.cameras.width = 8;
        spec.cameras.height_px = 6;
        let (ds, _) = crate::scene::generate_toy_scene(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_blender_scene(&ds, dir.path()).unwrap();
        let back = load_blender_scene(dir.path(), 1).unwrap();
        let order: Vec<usize> = ds.train_indices().into_iter().chain(ds.test_indices()).collect();
        assert_eq!(back.cameras.len(), ds.cameras.len());
        for (b, &v) in order.iter().enumerate() {
            assert_eq!(back.splits[b], ds.splits[v]);
            assert!((back.cameras[b].focal - ds.cameras[v].focal).abs() < 1e-9);
            for (r, q) in back.cameras[b].pose.iter().zip(&ds.cameras[v].pose) {
                for c in 0..4 {
                    assert!((r[c] - q[c]).abs() < 1e-12);
                }
            }
            for (p, q) in back.images[b].pixels.iter().zip(&ds.images[v].pixels) {
                for c in 0..3 {
                    assert!((p[c] - q[c]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
        }
    }
}
