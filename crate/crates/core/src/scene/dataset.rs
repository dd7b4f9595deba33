use serde::{Deserialize, Serialize};

use super::{Camera, RgbImage};
use crate::error::{Error, Result};
use crate::sampling::Ray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Posed views with reference images. Immutable once loaded.
#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub name: String,
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
    pub splits: Vec<Split>,
    pub near: f64,
    pub far: f64,
    /// Color composited behind the volume, `None` for black.
    pub background: Option<[f64; 3]>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() || self.cameras.len() != self.splits.len() {
            return Err(Error::Data(format!(
                "{} cameras, {} images and {} split tags",
                self.cameras.len(),
                self.images.len(),
                self.splits.len()
            )));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if (cam.width, cam.height) != img.dims() {
                return Err(Error::Data(format!(
                    "view {i}: camera is {}x{} but image is {}x{}",
                    cam.width, cam.height, img.width, img.height
                )));
            }
        }
        if self.train_indices().is_empty() || self.test_indices().is_empty() {
            return Err(Error::Data(
                "dataset needs at least one train and one test view".into(),
            ));
        }
        if !(self.near < self.far) {
            return Err(Error::Data(format!(
                "near bound {} must be below far bound {}",
                self.near, self.far
            )));
        }
        Ok(())
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    pub fn view_rays(&self, view: usize) -> Result<Vec<Ray>> {
        self.cameras[view].rays(self.near, self.far)
    }

    /// Every training pixel as a ray with its reference color.
    pub fn training_rays(&self) -> Result<(Vec<Ray>, Vec<[f64; 3]>)> {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for i in self.train_indices() {
            rays.extend(self.view_rays(i)?);
            colors.extend_from_slice(&self.images[i].pixels);
        }
        Ok((rays, colors))
    }

    /// Point closest to every camera's view axis in the least-squares sense, or the centroid of
    /// the camera centers when the axes are (nearly) parallel. Generated paths look at it.
    pub fn focus_point(&self) -> [f64; 3] {
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for cam in &self.cameras {
            let d = cam.forward();
            let c = cam.center();
            for i in 0..3 {
                for j in 0..3 {
                    let m = if i == j { 1.0 } else { 0.0 } - d[i] * d[j];
                    a[i][j] += m;
                    b[i] += m * c[j];
                }
            }
        }
        solve3(a, b).unwrap_or_else(|| {
            let n = self.cameras.len().max(1) as f64;
            let mut c = [0.0; 3];
            for cam in &self.cameras {
                for k in 0..3 {
                    c[k] += cam.center()[k] / n;
                }
            }
            c
        })
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-9 {
        return None;
    }
    let mut x = [0.0; 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *xk = det(m) / d;
    }
    Some(x)
}
