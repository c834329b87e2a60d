//! Analytic Gaussian-blob scenes and their ground-truth renders.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::field::{CameraPose, Sampling, Vec3};
use crate::trainer::{Dataset, View};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec3,
    pub radius: f64,
    pub peak: f64,
    pub color: Vec3,
}

/// Cameras on a circle around the vertical axis, looking at the origin.
/// Held-out views sit halfway between training views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub train_views: usize,
    pub test_views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    /// Focal length in units of image width.
    pub focal_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub blobs: Vec<Blob>,
    pub ring: CameraRing,
    pub image_size: usize,
    /// Midpoint quadrature samples per ground-truth ray.
    pub gt_samples: usize,
}

impl SceneSpec {
    pub fn toy() -> Self {
        let blob = |center, radius, peak, color| Blob {
            center,
            radius,
            peak,
            color,
        };
        Self {
            name: "blobs".into(),
            blobs: vec![
                blob([0.0, 0.0, 0.0], 0.35, 20.0, [0.9, 0.35, 0.2]),
                blob([0.45, 0.25, -0.3], 0.25, 25.0, [0.2, 0.8, 0.35]),
                blob([-0.4, -0.3, 0.35], 0.3, 15.0, [0.25, 0.4, 0.9]),
                blob([0.15, -0.5, -0.4], 0.2, 30.0, [0.9, 0.85, 0.25]),
            ],
            ring: CameraRing {
                train_views: 8,
                test_views: 2,
                radius: 3.5,
                elevation_deg: 20.0,
                focal_ratio: 1.1,
            },
            image_size: 64,
            gt_samples: 256,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(format!("scene: {m}")));
        if let Some(b) = self.blobs.iter().find(|b| b.center.iter().any(|c| c.abs() > 1.0)) {
            return bad(format!("blob center {:?} outside [-1, 1]^3", b.center));
        }
        if let Some(b) = self
            .blobs
            .iter()
            .find(|b| !(b.radius > 0.0) || b.peak < 0.0 || b.color.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return bad(format!("blob {b:?}"));
        }
        if self.ring.train_views < 4 || self.ring.test_views < 2 {
            return bad("need at least 4 training and 2 held-out views".into());
        }
        if !(self.ring.radius > 3f64.sqrt()) {
            return bad(format!("ring radius {} inside the scene box", self.ring.radius));
        }
        if self.image_size == 0 || self.gt_samples == 0 || !(self.ring.focal_ratio > 0.0) {
            return bad("image size, samples and focal ratio must be positive".into());
        }
        Ok(())
    }
}

/// Density and density-weighted color at `p`.
pub fn density_at(blobs: &[Blob], p: Vec3) -> (f64, Vec3) {
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    for b in blobs {
        let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
        let s = b.peak * (-d2 / (b.radius * b.radius)).exp();
        sigma += s;
        for c in 0..3 {
            rgb[c] += s * b.color[c];
        }
    }
    if sigma > 0.0 {
        rgb.iter_mut().for_each(|c| *c /= sigma);
    }
    (sigma, rgb)
}

/// Composited color along one pixel ray; black when the ray misses the box.
pub fn render_gt_pixel(blobs: &[Blob], pose: &CameraPose, col: usize, row: usize, samples: usize) -> Vec3 {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let Some(ray) = pose.pixel_ray(col, row, samples, Sampling::Midpoint, &mut rng) else {
        return [0.0; 3];
    };
    let mut transmittance = 1.0;
    let mut out = [0.0; 3];
    for (p, &dt) in ray.points().zip(&ray.deltas) {
        let (sigma, rgb) = density_at(blobs, p);
        let alpha = 1.0 - (-sigma * dt).exp();
        for c in 0..3 {
            out[c] += transmittance * alpha * rgb[c];
        }
        transmittance *= 1.0 - alpha;
    }
    out
}

/// `[3, H, W]` ground-truth image.
pub fn render_gt_image(blobs: &[Blob], pose: &CameraPose, samples: usize) -> Tensor {
    let (w, h) = (pose.width, pose.height);
    let mut img = Tensor::zeros(vec![3, h, w]);
    let data = img.data_mut();
    for row in 0..h {
        for col in 0..w {
            let c = render_gt_pixel(blobs, pose, col, row, samples);
            for k in 0..3 {
                data[k * h * w + row * w + col] = c[k];
            }
        }
    }
    img
}

fn ring_pose(ring: &CameraRing, azimuth: f64, size: usize) -> Result<CameraPose, HarnessError> {
    let el = ring.elevation_deg.to_radians();
    let eye = [
        ring.radius * el.cos() * azimuth.sin(),
        ring.radius * el.sin(),
        ring.radius * el.cos() * azimuth.cos(),
    ];
    Ok(CameraPose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], ring.focal_ratio * size as f64, size, size)?)
}

/// Training and held-out poses.
pub fn ring_poses(ring: &CameraRing, size: usize) -> Result<(Vec<CameraPose>, Vec<CameraPose>), HarnessError> {
    let step = std::f64::consts::TAU / ring.train_views as f64;
    let train = (0..ring.train_views)
        .map(|i| ring_pose(ring, i as f64 * step, size))
        .collect::<Result<_, _>>()?;
    let test = (0..ring.test_views)
        .map(|i| {
            let slot = (i * ring.train_views) / ring.test_views;
            ring_pose(ring, (slot as f64 + 0.5) * step, size)
        })
        .collect::<Result<_, _>>()?;
    Ok((train, test))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let (train, test) = ring_poses(&spec.ring, spec.image_size)?;
    let views = |poses: Vec<CameraPose>| -> Vec<View> {
        poses
            .into_iter()
            .map(|pose| View {
                image: render_gt_image(&spec.blobs, &pose, spec.gt_samples),
                pose,
            })
            .collect()
    };
    Ok(Dataset::new(views(train), views(test))?)
}
