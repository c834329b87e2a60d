//! Tri-plane radiance field: feature planes, density grid, MLP renderer and
//! alpha-composited volume rendering.
//!
//! Scene coordinates live in the normalized box `[-1, 1]^3`. A point
//! `(x, y, z)` projects to `(x, y)` on the xy plane, `(x, z)` on xz and
//! `(y, z)` on yz; the first projected coordinate indexes plane width, the
//! second plane height. The density grid is laid out `[Dy, Dx, Dz]`.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid field layout: {0}")]
    Layout(String),
    #[error("invalid ray: {0}")]
    Ray(String),
    #[error("invalid camera: {0}")]
    Camera(String),
}

pub type Result<T> = std::result::Result<T, FieldError>;

pub type Vec3 = [f64; 3];

/// Names of the three planes in storage order.
pub const PLANE_NAMES: [&str; 3] = ["plane.xy", "plane.xz", "plane.yz"];
pub const GRID_NAME: &str = "density";

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlanes {
    pub xy: Tensor,
    pub xz: Tensor,
    pub yz: Tensor,
}

impl FeaturePlanes {
    pub fn new(xy: Tensor, xz: Tensor, yz: Tensor) -> Result<Self> {
        let p = Self { xy, xz, yz };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.xy.shape().first().copied().unwrap_or(0);
        for (name, t) in PLANE_NAMES.iter().zip(self.iter()) {
            let s = t.shape();
            if s.len() != 3 || s[0] != c || s[0] == 0 || s[1] < 2 || s[2] < 2 {
                return Err(FieldError::Layout(format!("{name} has shape {s:?}, channels {c}")));
            }
        }
        Ok(())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let t = Tensor::filled(vec![channels, height, width], value);
        Self {
            xy: t.clone(),
            xz: t.clone(),
            yz: t,
        }
    }

    pub fn random(channels: usize, height: usize, width: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut make = || {
            let data = (0..channels * height * width)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            Tensor::new(vec![channels, height, width], data).expect("consistent shape")
        };
        Self {
            xy: make(),
            xz: make(),
            yz: make(),
        }
    }

    pub fn channels(&self) -> usize {
        self.xy.shape()[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        [&self.xy, &self.xz, &self.yz].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [&mut self.xy, &mut self.xz, &mut self.yz].into_iter()
    }

    pub fn as_array(&self) -> [&Tensor; 3] {
        [&self.xy, &self.xz, &self.yz]
    }

    pub fn from_array(planes: [Tensor; 3]) -> Result<Self> {
        let [xy, xz, yz] = planes;
        Self::new(xy, xz, yz)
    }
}

/// Raw (pre-activation) density values, shape `[Dy, Dx, Dz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub values: Tensor,
}

impl DensityGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s.iter().any(|&d| d < 2) {
            return Err(FieldError::Layout(format!("density grid shape {s:?}")));
        }
        Ok(Self { values })
    }

    pub fn filled(dy: usize, dx: usize, dz: usize, value: f64) -> Self {
        Self {
            values: Tensor::filled(vec![dy, dx, dz], value),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Two hidden ReLU layers, then a 4-wide head: density logit and RGB logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RendererMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

pub const MLP_NAMES: [&str; 6] = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "mlp.w3", "mlp.b3"];

impl RendererMlp {
    pub fn input_width(channels: usize) -> usize {
        3 * channels + 1 + 3
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let inp = Self::input_width(channels);
        Self {
            w1: Tensor::zeros(vec![hidden, inp]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, hidden]),
            b2: Tensor::zeros(vec![hidden]),
            w3: Tensor::zeros(vec![4, hidden]),
            b3: Tensor::zeros(vec![4]),
        }
    }

    /// He-uniform hidden layers, small output layer.
    pub fn random(channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let inp = Self::input_width(channels);
        let mut layer = |out: usize, fan_in: usize, gain: f64| {
            let a = gain * (6.0 / fan_in as f64).sqrt();
            let data = (0..out * fan_in).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(vec![out, fan_in], data).expect("consistent shape")
        };
        let w1 = layer(hidden, inp, 1.0);
        let w2 = layer(hidden, hidden, 1.0);
        let w3 = layer(4, hidden, 0.1);
        Self {
            w1,
            b1: Tensor::zeros(vec![hidden]),
            w2,
            b2: Tensor::zeros(vec![hidden]),
            w3,
            b3: Tensor::zeros(vec![4]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
        .into_iter()
    }
}

/// Complete renderable model.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub planes: FeaturePlanes,
    pub grid: DensityGrid,
    pub mlp: RendererMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDims {
    pub channels: usize,
    pub plane_height: usize,
    pub plane_width: usize,
    pub grid: [usize; 3],
    pub hidden: usize,
}

impl Default for FieldDims {
    fn default() -> Self {
        Self {
            channels: 12,
            plane_height: 32,
            plane_width: 32,
            grid: [32, 32, 32],
            hidden: 64,
        }
    }
}

impl FieldDims {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.channels, self.plane_height, self.plane_width, self.hidden];
        if sizes.iter().chain(&self.grid).any(|&n| n == 0) {
            return Err(FieldError::Layout(format!("field dims {self:?} must be positive")));
        }
        Ok(())
    }
}

impl RadianceField {
    pub fn init(dims: &FieldDims, rng: &mut impl Rng) -> Self {
        let planes = FeaturePlanes::random(dims.channels, dims.plane_height, dims.plane_width, 0.1, rng);
        let [dy, dx, dz] = dims.grid;
        let grid = DensityGrid::filled(dy, dx, dz, -2.0);
        let mlp = RendererMlp::random(dims.channels, dims.hidden, rng);
        Self { planes, grid, mlp }
    }

    /// Tensors in checkpoint order with their names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = PLANE_NAMES.iter().copied().zip(self.planes.iter()).collect();
        out.push((GRID_NAME, &self.grid.values));
        out.extend(MLP_NAMES.iter().copied().zip(self.mlp.iter()));
        out
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.planes
            .iter_mut()
            .chain(std::iter::once(&mut self.grid.values))
            .chain(self.mlp.iter_mut())
    }

    /// Rebuilds a field from named tensors (any order).
    pub fn from_named(mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut take = |name: &str| lookup(name).ok_or_else(|| FieldError::Layout(format!("missing tensor {name}")));
        let planes = FeaturePlanes::new(take(PLANE_NAMES[0])?, take(PLANE_NAMES[1])?, take(PLANE_NAMES[2])?)?;
        let grid = DensityGrid::new(take(GRID_NAME)?)?;
        let mlp = RendererMlp {
            w1: take(MLP_NAMES[0])?,
            b1: take(MLP_NAMES[1])?,
            w2: take(MLP_NAMES[2])?,
            b2: take(MLP_NAMES[3])?,
            w3: take(MLP_NAMES[4])?,
            b3: take(MLP_NAMES[5])?,
        };
        let c = planes.channels();
        if mlp.w1.shape() != [mlp.hidden(), RendererMlp::input_width(c)] || mlp.w3.shape() != [4, mlp.hidden()] {
            return Err(FieldError::Layout("mlp widths do not match planes".into()));
        }
        Ok(Self { planes, grid, mlp })
    }
}

/// Plane, grid and MLP handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars<'t> {
    pub planes: [Var<'t>; 3],
    pub grid: Var<'t>,
    pub mlp: MlpVars<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub w3: Var<'t>,
    pub b3: Var<'t>,
}

impl<'t> MlpVars<'t> {
    pub fn params(tape: &'t Tape, mlp: &RendererMlp) -> Self {
        Self::with(tape, mlp, true)
    }

    pub fn constants(tape: &'t Tape, mlp: &RendererMlp) -> Self {
        Self::with(tape, mlp, false)
    }

    fn with(tape: &'t Tape, mlp: &RendererMlp, trainable: bool) -> Self {
        let f = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        Self {
            w1: f(&mlp.w1),
            b1: f(&mlp.b1),
            w2: f(&mlp.w2),
            b2: f(&mlp.b2),
            w3: f(&mlp.w3),
            b3: f(&mlp.b3),
        }
    }

    pub fn iter(&self) -> [Var<'t>; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

impl<'t> FieldVars<'t> {
    pub fn constants(tape: &'t Tape, field: &RadianceField) -> Self {
        Self {
            planes: [
                tape.constant(&field.planes.xy),
                tape.constant(&field.planes.xz),
                tape.constant(&field.planes.yz),
            ],
            grid: tape.constant(&field.grid.values),
            mlp: MlpVars::constants(tape, &field.mlp),
        }
    }

    pub fn params(tape: &'t Tape, field: &RadianceField) -> Self {
        Self {
            planes: [
                tape.param(&field.planes.xy),
                tape.param(&field.planes.xz),
                tape.param(&field.planes.yz),
            ],
            grid: tape.param(&field.grid.values),
            mlp: MlpVars::params(tape, &field.mlp),
        }
    }
}

fn point_coords<'t>(tape: &'t Tape, points: &[Vec3], axes: &[usize]) -> Result<Var<'t>> {
    let data = points
        .iter()
        .flat_map(|p| axes.iter().map(move |&a| p[a]))
        .collect();
    Ok(tape.constant_from(vec![points.len(), axes.len()], data)?)
}

/// Concatenated bilinear features `[N, 3C]` at the projections of `points`.
pub fn sample_triplane<'t>(planes: &[Var<'t>; 3], points: &[Vec3]) -> Result<Var<'t>> {
    let tape = planes[0].tape();
    let projections = [[0usize, 1], [0, 2], [1, 2]];
    let mut feats = Vec::with_capacity(3);
    for (plane, axes) in planes.iter().zip(projections) {
        let coords = point_coords(tape, points, &axes)?;
        feats.push(plane.bilinear(coords)?);
    }
    Ok(Var::concat(&feats)?)
}

/// Trilinear density feature `[N, 1]`.
pub fn sample_density<'t>(grid: Var<'t>, points: &[Vec3]) -> Result<Var<'t>> {
    let coords = point_coords(grid.tape(), points, &[0, 1, 2])?;
    Ok(grid.trilinear(coords)?)
}

/// Decodes per-sample `(sigma [N,1], color [N,3])`.
///
/// `sigma = softplus(density_head + s)`, `color = sigmoid(color_head)`.
pub fn decode<'t>(
    features: Var<'t>,
    density_feature: Var<'t>,
    view_dirs: Var<'t>,
    mlp: &MlpVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let input = Var::concat(&[features, density_feature, view_dirs])?;
    let h1 = input.linear(mlp.w1, mlp.b1)?.relu();
    let h2 = h1.linear(mlp.w2, mlp.b2)?.relu();
    let out = h2.linear(mlp.w3, mlp.b3)?;
    let sigma = out.columns(0, 1)?.add(density_feature)?.softplus();
    let color = out.columns(1, 4)?.sigmoid();
    Ok((sigma, color))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t: Vec<f64>, deltas: Vec<f64>) -> Result<Self> {
        let norm = dot3(direction, direction).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(FieldError::Ray(format!("direction norm {norm}")));
        }
        if t.is_empty() || t.len() != deltas.len() {
            return Err(FieldError::Ray("sample and spacing counts differ or are empty".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) || deltas.iter().any(|&d| d <= 0.0) {
            return Err(FieldError::Ray("samples must strictly increase".into()));
        }
        Ok(Self {
            origin,
            direction,
            t,
            deltas,
        })
    }

    pub fn point(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.t.iter().map(|&t| self.point(t))
    }
}

/// How sample depths are placed inside `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Bin midpoints.
    Midpoint,
    /// One uniform jitter per bin.
    Stratified,
}

/// Builds `count` samples over `[near, far]`. The last spacing is padded by half a bin past `far`.
pub fn place_samples(near: f64, far: f64, count: usize, sampling: Sampling, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let bin = (far - near) / count as f64;
    let t: Vec<f64> = (0..count)
        .map(|k| {
            let u = match sampling {
                Sampling::Midpoint => 0.5,
                Sampling::Stratified => rng.gen_range(0.0..1.0),
            };
            near + (k as f64 + u) * bin
        })
        .collect();
    let end = far + 0.5 * bin;
    let deltas = (0..count)
        .map(|k| if k + 1 < count { t[k + 1] - t[k] } else { end - t[k] })
        .collect();
    (t, deltas)
}

/// Entry and exit distances of a ray through `[-1, 1]^3`.
pub fn intersect_unit_box(origin: Vec3, direction: Vec3) -> Option<(f64, f64)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        if direction[a].abs() < 1e-12 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let t1 = (-1.0 - origin[a]) / direction[a];
        let t2 = (1.0 - origin[a]) / direction[a];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    let near = near.max(0.0);
    (far - near > 1e-9).then_some((near, far))
}

/// Renders one batch of rays sharing a sample count. Output `[R, 4]` (RGB, opacity).
pub fn render_rays<'t>(vars: &FieldVars<'t>, rays: &[Ray]) -> Result<Var<'t>> {
    let tape = vars.grid.tape();
    let k = rays.first().map(|r| r.t.len()).unwrap_or(0);
    if rays.iter().any(|r| r.t.len() != k) || k == 0 {
        return Err(FieldError::Ray("batch rays need the same nonzero sample count".into()));
    }
    let points: Vec<Vec3> = rays.iter().flat_map(|r| r.points()).collect();
    let dirs: Vec<f64> = rays
        .iter()
        .flat_map(|r| std::iter::repeat_n(r.direction, k).flatten())
        .collect();
    let deltas: Vec<f64> = rays.iter().flat_map(|r| r.deltas.iter().copied()).collect();
    let features = sample_triplane(&vars.planes, &points)?;
    let density = sample_density(vars.grid, &points)?;
    let view = tape.constant_from(vec![points.len(), 3], dirs)?;
    let (sigma, color) = decode(features, density, view, &vars.mlp)?;
    let sigma = sigma.reshape(vec![rays.len(), k])?;
    let color = color.reshape(vec![rays.len(), k, 3])?;
    Ok(Var::composite(sigma, color, deltas)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayColor {
    pub rgb: Vec3,
    pub opacity: f64,
}

/// Forward-only render of a single ray.
pub fn render_ray(field: &RadianceField, ray: &Ray) -> Result<RayColor> {
    let tape = Tape::new();
    let vars = FieldVars::constants(&tape, field);
    let out = render_rays(&vars, std::slice::from_ref(ray))?;
    let v = out.value();
    Ok(RayColor {
        rgb: [v[0], v[1], v[2]],
        opacity: v[3],
    })
}

/// Pinhole camera with a camera-to-world transform (OpenGL axes: camera looks down -z).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub c2w: [[f64; 4]; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraPose {
    pub fn new(c2w: [[f64; 4]; 3], fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| c2w[r][i] * c2w[r][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(FieldError::Camera("rotation block is not orthonormal".into()));
                }
            }
        }
        if width == 0 || height == 0 || fx <= 0.0 || fy <= 0.0 {
            return Err(FieldError::Camera("degenerate intrinsics".into()));
        }
        Ok(Self {
            c2w,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, square pixels, principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let right = cross(up, back);
        if dot3(right, right) < 1e-12 {
            return Err(FieldError::Camera("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let mut c2w = [[0.0; 4]; 3];
        for r in 0..3 {
            c2w[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        Self::new(c2w, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn origin(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Unit direction through the center of pixel `(col, row)`.
    pub fn pixel_direction(&self, col: usize, row: usize) -> Vec3 {
        let d = [
            (col as f64 + 0.5 - self.cx) / self.fx,
            -(row as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        ];
        normalize([
            self.c2w[0][0] * d[0] + self.c2w[0][1] * d[1] + self.c2w[0][2] * d[2],
            self.c2w[1][0] * d[0] + self.c2w[1][1] * d[1] + self.c2w[1][2] * d[2],
            self.c2w[2][0] * d[0] + self.c2w[2][1] * d[1] + self.c2w[2][2] * d[2],
        ])
    }

    /// Sampled ray through a pixel, or `None` when it misses the scene box.
    pub fn pixel_ray(&self, col: usize, row: usize, samples: usize, sampling: Sampling, rng: &mut impl Rng) -> Option<Ray> {
        let origin = self.origin();
        let direction = self.pixel_direction(col, row);
        let (near, far) = intersect_unit_box(origin, direction)?;
        let (t, deltas) = place_samples(near, far, samples, sampling, rng);
        Some(Ray {
            origin,
            direction,
            t,
            deltas,
        })
    }
}

/// Deterministic midpoint render of every pixel; rays missing the box stay black.
/// Output `[3, height, width]`.
pub fn render_image(field: &RadianceField, pose: &CameraPose, samples_per_ray: usize) -> Result<Tensor> {
    const CHUNK: usize = 512;
    let (w, h) = (pose.width, pose.height);
    let mut image = Tensor::zeros(vec![3, h, w]);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut rays = Vec::new();
    let mut pixels = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if let Some(ray) = pose.pixel_ray(col, row, samples_per_ray, Sampling::Midpoint, &mut rng) {
                rays.push(ray);
                pixels.push(row * w + col);
            }
        }
    }
    for (ray_chunk, pix_chunk) in rays.chunks(CHUNK).zip(pixels.chunks(CHUNK)) {
        let tape = Tape::new();
        let vars = FieldVars::constants(&tape, field);
        let out = render_rays(&vars, ray_chunk)?;
        let v = out.value();
        let data = image.data_mut();
        for (i, &p) in pix_chunk.iter().enumerate() {
            for c in 0..3 {
                data[c * h * w + p] = v[i * 4 + c];
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane_vars<'t>(tape: &'t Tape, planes: &FeaturePlanes) -> [Var<'t>; 3] {
        [tape.constant(&planes.xy), tape.constant(&planes.xz), tape.constant(&planes.yz)]
    }

    #[test]
    fn triplane_constant_planes() {
        let planes = FeaturePlanes::filled(2, 4, 5, 0.7);
        let tape = Tape::new();
        let f = sample_triplane(&plane_vars(&tape, &planes), &[[0.3, -0.2, 0.9], [1.5, -3.0, 0.0]]).unwrap();
        assert_eq!(f.shape(), vec![2, 6]);
        assert!(f.value().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn triplane_node_and_cell_center() {
        // 2x2 plane with corners 0,1 (top row) and 2,3 (bottom row).
        let corners = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let planes = FeaturePlanes::new(corners.clone(), corners.clone(), corners).unwrap();
        let tape = Tape::new();
        let vars = plane_vars(&tape, &planes);
        let node = sample_triplane(&vars, &[[1.0, -1.0, -1.0]]).unwrap();
        // xy: (x=1 -> col 1, y=-1 -> row 0) = 1; xz: (1, -1) = 1; yz: (-1, -1) = 0
        assert_eq!(&*node.value(), &[1.0, 1.0, 0.0]);
        let center = sample_triplane(&vars, &[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(&*center.value(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn density_trilinear_examples() {
        let tape = Tape::new();
        let grid = tape.constant(&Tensor::filled(vec![3, 4, 2], -1.25));
        let s = sample_density(grid, &[[0.1, 0.2, -0.9]]).unwrap();
        assert!((s.item() + 1.25).abs() < 1e-15);

        let cube = tape.constant(&Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        assert_eq!(sample_density(cube, &[[0.0, 0.0, 0.0]]).unwrap().item(), 3.5);
        // node (x=1, y=-1, z=1) -> [iy=0, ix=1, iz=1] -> offset 3
        assert_eq!(sample_density(cube, &[[1.0, -1.0, 1.0]]).unwrap().item(), 3.0);
    }

    #[test]
    fn zero_network_decode() {
        let tape = Tape::new();
        let mlp = MlpVars::constants(&tape, &RendererMlp::zeros(2, 4));
        let f = tape.constant(&Tensor::zeros(vec![1, 6]));
        let s = tape.constant(&Tensor::zeros(vec![1, 1]));
        let d = tape.constant_from(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let (sigma, color) = decode(f, s, d, &mlp).unwrap();
        assert!((sigma.item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(&*color.value(), &[0.5, 0.5, 0.5]);

        let s = tape.constant(&Tensor::filled(vec![1, 1], -60.0));
        let (sigma, _) = decode(f, s, d, &mlp).unwrap();
        assert!(sigma.item() < 1e-20);
    }

    /// Field whose decoded density is `softplus(raw)` and whose color is `sigmoid(logit)`.
    fn flat_field(raw: f64, logit: [f64; 3]) -> RadianceField {
        let mut mlp = RendererMlp::zeros(1, 2);
        mlp.b3 = Tensor::from_vec(vec![0.0, logit[0], logit[1], logit[2]]);
        RadianceField {
            planes: FeaturePlanes::filled(1, 2, 2, 0.0),
            grid: DensityGrid::filled(2, 2, 2, raw),
            mlp,
        }
    }

    fn inv_softplus(y: f64) -> f64 {
        y.exp_m1().ln()
    }

    #[test]
    fn compositing_hand_cases() {
        let field = flat_field(-80.0, [0.0; 3]);
        let ray = Ray::new([0.0, 0.0, -0.5], [0.0, 0.0, 1.0], vec![0.1, 0.2], vec![0.1, 0.1]).unwrap();
        let out = render_ray(&field, &ray).unwrap();
        assert!(out.rgb.iter().all(|&c| c < 1e-30) && out.opacity < 1e-30);

        // sigma * delta = ln 2 for each sample
        let sigma = 2f64.ln() / 0.25;
        let field = flat_field(inv_softplus(sigma), [1.0, -2.0, 0.5]);
        let c = [sigmoid(1.0), sigmoid(-2.0), sigmoid(0.5)];
        let one = Ray::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], vec![0.2], vec![0.25]).unwrap();
        let out = render_ray(&field, &one).unwrap();
        for ch in 0..3 {
            assert!((out.rgb[ch] - 0.5 * c[ch]).abs() < 1e-12);
        }
        assert!((out.opacity - 0.5).abs() < 1e-12);
        let two = Ray::new([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], vec![0.2, 0.45], vec![0.25, 0.25]).unwrap();
        let out = render_ray(&field, &two).unwrap();
        for ch in 0..3 {
            assert!((out.rgb[ch] - 0.75 * c[ch]).abs() < 1e-12);
        }
        assert!((out.opacity - 0.75).abs() < 1e-12);
    }

    use crate::autodiff::sigmoid;

    #[test]
    fn ray_validation() {
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 2.0], vec![0.1], vec![0.1]).is_err());
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 1.0], vec![0.2, 0.1], vec![0.1, 0.1]).is_err());
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 1.0], vec![], vec![]).is_err());
    }

    #[test]
    fn box_intersection_and_samples() {
        let (near, far) = intersect_unit_box([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((near - 2.0).abs() < 1e-12 && (far - 4.0).abs() < 1e-12);
        assert!(intersect_unit_box([0.0, 3.0, 3.0], [0.0, 0.0, -1.0]).is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, d) = place_samples(2.0, 4.0, 4, Sampling::Midpoint, &mut rng);
        assert_eq!(t, vec![2.25, 2.75, 3.25, 3.75]);
        assert_eq!(d, vec![0.5; 4]);
        let (t, d) = place_samples(2.0, 4.0, 16, Sampling::Stratified, &mut rng);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert!(d.iter().all(|&x| x > 0.0));
        assert!((t[0] + d.iter().sum::<f64>() - 4.0625).abs() < 1e-12);
    }

    #[test]
    fn camera_rays_point_at_target() {
        let pose = CameraPose::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 4, 4).unwrap();
        let d = pose.pixel_direction(2, 2);
        // pixel (2,2) center is half a pixel off the principal point
        assert!(d[2] < -0.999);
        let top = pose.pixel_direction(2, 0);
        assert!(top[1] > 0.0, "row 0 looks up");
        let right = pose.pixel_direction(3, 2);
        assert!(right[0] > 0.0, "last column looks right");
        assert!(CameraPose::new([[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]], 1.0, 1.0, 0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn zero_density_scene_is_black() {
        let field = flat_field(-80.0, [3.0; 3]);
        let pose = CameraPose::look_at([0.0, 0.5, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 8.0, 6, 5).unwrap();
        let img = render_image(&field, &pose, 8).unwrap();
        assert_eq!(img.shape(), &[3, 5, 6]);
        assert!(img.data().iter().all(|&v| v < 1e-30));
    }

    #[test]
    fn pixel_loss_gradient_wrt_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let field = RadianceField::init(
            &FieldDims {
                channels: 2,
                plane_height: 3,
                plane_width: 4,
                grid: [3, 3, 3],
                hidden: 4,
            },
            &mut rng,
        );
        let ray = Ray::new([-0.9, -0.3, 0.2], [0.8, 0.6, 0.0], vec![0.3, 0.8, 1.4], vec![0.5, 0.6, 0.4]).unwrap();
        let err = finite_difference_check(
            |tape, xy| {
                let mut vars = FieldVars::constants(tape, &field);
                vars.planes[0] = xy;
                Ok(render_rays(&vars, std::slice::from_ref(&ray)).unwrap().square().sum())
            },
            &field.planes.xy,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
