mod blender;
mod camera;
mod dataset;
mod image;
mod toy;

pub use blender::{focal_from_fov, load_blender_scene, write_blender_scene, BLENDER_FAR, BLENDER_NEAR};
pub use camera::Camera;
pub use dataset::{SceneDataset, Split};
pub use image::RgbImage;
pub use toy::{generate_toy_scene, CameraLayout, CameraRig, OracleSample, Shape, ToyOracle, ToySpec};
