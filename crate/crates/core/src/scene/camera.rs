use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Ray;

/// Pinhole camera. `pose` is camera-to-world (right-handed, looking along −z, +y up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: [[f64; 4]; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(pose: [[f64; 4]; 4], focal: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            pose,
            focal,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` resolving the roll.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = cross(forward, up);
        if dot(right, right) < 1e-18 {
            return Err(Error::invalid("look_at", "view direction is parallel to up"));
        }
        let right = normalize(right);
        let cam_up = cross(right, forward);
        let back = [-forward[0], -forward[1], -forward[2]];
        let mut pose = [[0.0; 4]; 4];
        for r in 0..3 {
            pose[r] = [right[r], cam_up[r], back[r], eye[r]];
        }
        pose[3] = [0.0, 0.0, 0.0, 1.0];
        Camera::new(pose, focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pose.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("camera pose is not finite".into()));
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Data(format!(
                "camera intrinsics invalid: focal {} size {}x{}",
                self.focal, self.width, self.height
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.pose[k][i] * self.pose[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::Data(format!(
                        "camera rotation is not orthonormal (column {i}·{j} = {d})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// Unit viewing axis (the camera's −z in world space).
    pub fn forward(&self) -> [f64; 3] {
        [-self.pose[0][2], -self.pose[1][2], -self.pose[2][2]]
    }

    /// Ray through the centre of pixel `(px, py)` (`py` counts rows from the top).
    pub fn ray_for_pixel(&self, px: usize, py: usize, near: f64, far: f64) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::invalid(
                "ray_for_pixel",
                format!("pixel ({px}, {py}) outside {}x{}", self.width, self.height),
            ));
        }
        let x = (px as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(py as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let cam = [x, y, -1.0];
        let mut d = [0.0; 3];
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = (0..3).map(|k| self.pose[r][k] * cam[k]).sum();
        }
        Ray::new(self.center(), normalize(d), near, far)
    }

    /// Row-major rays for every pixel.
    pub fn rays(&self, near: f64, far: f64) -> Result<Vec<Ray>> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                out.push(self.ray_for_pixel(px, py, near, far)?);
            }
        }
        Ok(out)
    }

    /// Same pose at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Camera {
        Camera {
            pose: self.pose,
            focal: self.focal / factor as f64,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}
