//! Procedural scenes of constant-density spheres and boxes with an exact renderer.
//!
//! Inside a shape the medium has constant σ and emitted color, so transmittance along a ray is
//! piecewise exponential and the rendering integral has a closed form per segment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::{dot, sub};
use super::{Camera, RgbImage, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::sampling::Ray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
        sigma: f64,
        rgb: [f64; 3],
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        sigma: f64,
        rgb: [f64; 3],
    },
}

impl Shape {
    pub fn sigma(&self) -> f64 {
        match self {
            Shape::Sphere { sigma, .. } | Shape::Box { sigma, .. } => *sigma,
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Shape::Sphere { rgb, .. } | Shape::Box { rgb, .. } => *rgb,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius, .. } => {
                let v = sub(p, *center);
                dot(v, v) < radius * radius
            }
            Shape::Box {
                center, half_size, ..
            } => (0..3).all(|k| (p[k] - center[k]).abs() < half_size[k]),
        }
    }

    /// Parameter interval where the ray is inside the shape, if any.
    fn interval(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { center, radius, .. } => {
                let oc = sub(o, *center);
                let b = dot(d, oc);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box {
                center, half_size, ..
            } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let (a, b) = (center[k] - half_size[k], center[k] + half_size[k]);
                    if d[k] == 0.0 {
                        if o[k] <= a || o[k] >= b {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((a - o[k]) / d[k], (b - o[k]) / d[k]);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                (lo < hi).then_some((lo, hi))
            }
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let field = |name: &str| format!("shapes[{i}].{name}");
        if !(self.sigma() >= 0.0) || !self.sigma().is_finite() {
            return Err(Error::config(field("sigma"), "must be finite and non-negative"));
        }
        if self.rgb().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config(field("rgb"), "channels must lie in [0, 1]"));
        }
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(Error::config(field("radius"), "must be positive"))
            }
            Shape::Box { half_size, .. } if half_size.iter().any(|h| !(*h > 0.0)) => {
                Err(Error::config(field("half_size"), "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraLayout {
    /// Full circle around the target.
    Ring,
    /// Partial arc of `arc_degrees` centred on the +x axis; a forward-facing capture.
    Arc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub layout: CameraLayout,
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    #[serde(default = "default_arc")]
    pub arc_degrees: f64,
    /// Every `test_every`-th view (starting with view 0) is held out.
    pub test_every: usize,
    pub width: usize,
    pub height_px: usize,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
}

fn default_arc() -> f64 {
    120.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub name: String,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Marks scenes with layered geometry; extraction enables depth boost for them by default.
    #[serde(default)]
    pub depth_complex: bool,
    /// Later shapes override earlier ones where they overlap.
    #[serde(default)]
    pub shapes: Vec<Shape>,
    pub cameras: CameraRig,
}

impl ToySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ToySpec =
            toml::from_str(text).map_err(|e| Error::config("toy spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("toy spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::config("near/far", "need 0 <= near < far < inf"));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            s.validate(i)?;
        }
        let rig = &self.cameras;
        if rig.count == 0 || rig.width == 0 || rig.height_px == 0 {
            return Err(Error::config("cameras", "count and resolution must be positive"));
        }
        if rig.test_every < 2 || rig.test_every > rig.count {
            return Err(Error::config(
                "cameras.test_every",
                "must be at least 2 and at most the camera count",
            ));
        }
        if !(rig.fov_degrees > 0.0 && rig.fov_degrees < 180.0) {
            return Err(Error::config("cameras.fov_degrees", "must lie in (0, 180)"));
        }
        if !(rig.radius > 0.0) {
            return Err(Error::config("cameras.radius", "must be positive"));
        }
        Ok(())
    }

    /// Two overlapping coloured volumes inside a faint halo, viewed from a full ring.
    pub fn default_scene() -> Self {
        ToySpec {
            name: "toy".into(),
            near: 2.0,
            far: 6.0,
            background: [1.0; 3],
            depth_complex: false,
            shapes: vec![
                Shape::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                    sigma: 0.6,
                    rgb: [0.9, 0.6, 0.2],
                },
                Shape::Box {
                    center: [0.0, 0.0, -0.3],
                    half_size: [0.45, 0.45, 0.45],
                    sigma: 6.0,
                    rgb: [0.2, 0.35, 0.8],
                },
                Shape::Sphere {
                    center: [0.35, 0.35, 0.45],
                    radius: 0.35,
                    sigma: 12.0,
                    rgb: [0.85, 0.15, 0.2],
                },
            ],
            cameras: CameraRig {
                layout: CameraLayout::Ring,
                count: 25,
                radius: 4.0,
                height: 1.2,
                target: [0.0; 3],
                arc_degrees: default_arc(),
                test_every: 5,
                width: 64,
                height_px: 64,
                fov_degrees: 40.0,
            },
        }
    }

    /// A forward-facing scene: a translucent bar in front of a sphere, both in front of a
    /// backdrop wall, so every ray ends on a surface and many carry mass at two depths.
    pub fn occluder_scene() -> Self {
        ToySpec {
            name: "occluder".into(),
            near: 2.0,
            far: 7.5,
            background: [0.0; 3],
            depth_complex: true,
            shapes: vec![
                Shape::Sphere {
                    center: [-0.6, 0.0, 0.0],
                    radius: 0.8,
                    sigma: 8.0,
                    rgb: [0.2, 0.7, 0.3],
                },
                Shape::Box {
                    center: [0.6, 0.0, 0.0],
                    half_size: [0.1, 0.7, 0.25],
                    sigma: 5.0,
                    rgb: [0.8, 0.2, 0.6],
                },
                Shape::Box {
                    center: [0.6, 0.0, 0.55],
                    half_size: [0.1, 0.35, 0.2],
                    sigma: 5.0,
                    rgb: [0.95, 0.8, 0.1],
                },
                Shape::Box {
                    center: [-1.4, 0.0, 0.0],
                    half_size: [0.1, 3.5, 3.0],
                    sigma: 20.0,
                    rgb: [0.55, 0.6, 0.7],
                },
            ],
            cameras: CameraRig {
                layout: CameraLayout::Arc,
                count: 25,
                radius: 4.0,
                height: 0.6,
                target: [0.0; 3],
                arc_degrees: 40.0,
                test_every: 5,
                width: 64,
                height_px: 64,
                fov_degrees: 45.0,
            },
        }
    }

    pub fn camera_centers(&self) -> Vec<[f64; 3]> {
        let rig = &self.cameras;
        (0..rig.count)
            .map(|i| {
                let phi = match rig.layout {
                    CameraLayout::Ring => std::f64::consts::TAU * i as f64 / rig.count as f64,
                    CameraLayout::Arc => {
                        let span = rig.arc_degrees.to_radians();
                        let s = if rig.count == 1 {
                            0.5
                        } else {
                            i as f64 / (rig.count - 1) as f64
                        };
                        -0.5 * span + s * span
                    }
                };
                [
                    rig.target[0] + rig.radius * phi.cos(),
                    rig.target[1] + rig.radius * phi.sin(),
                    rig.target[2] + rig.height,
                ]
            })
            .collect()
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let rig = &self.cameras;
        let focal = 0.5 * rig.width as f64 / (0.5 * rig.fov_degrees.to_radians()).tan();
        self.camera_centers()
            .into_iter()
            .map(|eye| {
                Camera::look_at(eye, rig.target, [0.0, 0.0, 1.0], focal, rig.width, rig.height_px)
            })
            .collect()
    }
}

/// Closed-form answers for a single ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSample {
    pub color: [f64; 3],
    /// Accumulated opacity `1 − T(t_f)`.
    pub opacity: f64,
    /// `∫ t σ(t) T(t) dt` over the bounds, the weight-sum depth.
    pub depth: f64,
}

/// Exact renderer for a [`ToySpec`].
#[derive(Clone, Debug)]
pub struct ToyOracle {
    pub spec: ToySpec,
}

impl ToyOracle {
    pub fn new(spec: ToySpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    /// Density and color of the medium at `p`.
    pub fn medium_at(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        self.spec
            .shapes
            .iter()
            .rev()
            .find(|s| s.contains(p))
            .map_or((0.0, [0.0; 3]), |s| (s.sigma(), s.rgb()))
    }

    /// Constant-medium segments `(t0, t1, σ, rgb)` covering the ray bounds.
    pub fn segments(&self, ray: &Ray) -> Vec<(f64, f64, f64, [f64; 3])> {
        let mut cuts = vec![ray.near, ray.far];
        for s in &self.spec.shapes {
            if let Some((a, b)) = s.interval(ray.origin, ray.direction) {
                for t in [a, b] {
                    if t > ray.near && t < ray.far {
                        cuts.push(t);
                    }
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let (sigma, rgb) = self.medium_at(ray.at(0.5 * (w[0] + w[1])));
                (w[0], w[1], sigma, rgb)
            })
            .collect()
    }

    pub fn trace(&self, ray: &Ray) -> OracleSample {
        let bg = self.spec.background;
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        for (a, b, sigma, rgb) in self.segments(ray) {
            if sigma == 0.0 {
                continue;
            }
            let len = b - a;
            let decay = (-sigma * len).exp();
            let absorbed = 1.0 - decay;
            for c in 0..3 {
                color[c] += trans * absorbed * rgb[c];
            }
            depth += trans * (a * absorbed - len * decay + absorbed / sigma);
            trans *= decay;
        }
        for c in 0..3 {
            color[c] += trans * bg[c];
        }
        OracleSample {
            color,
            opacity: 1.0 - trans,
            depth,
        }
    }

    pub fn render(&self, camera: &Camera) -> Result<RgbImage> {
        let pixels = camera
            .rays(self.spec.near, self.spec.far)?
            .iter()
            .map(|r| self.trace(r).color)
            .collect();
        RgbImage::new(camera.width, camera.height, pixels)
    }
}

/// Renders every rig view exactly and tags every `test_every`-th one for testing.
pub fn generate_toy_scene(spec: &ToySpec) -> Result<(SceneDataset, ToyOracle)> {
    let oracle = ToyOracle::new(spec.clone())?;
    let cameras = spec.cameras()?;
    for (i, cam) in cameras.iter().enumerate() {
        if let Some(k) = spec.shapes.iter().position(|s| s.contains(cam.center())) {
            return Err(Error::Data(format!(
                "camera {i} at {:?} is inside shapes[{k}]",
                cam.center()
            )));
        }
    }
    let images = cameras
        .iter()
        .map(|c| oracle.render(c))
        .collect::<Result<Vec<_>>>()?;
    let splits = (0..cameras.len())
        .map(|i| {
            if i % spec.cameras.test_every == 0 {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    let ds = SceneDataset {
        name: spec.name.clone(),
        cameras,
        images,
        splits,
        near: spec.near,
        far: spec.far,
        background: Some(spec.background),
    };
    ds.validate()?;
    Ok((ds, oracle))
}
