//! Losses, Adam, the codec-in-the-loop training step, and the two-stage
//! pipeline (vanilla pretraining, then finetuning through the codec).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::cache::{
    CacheError, CachePolicy, CacheState, CodecPipeline, EncodedField, EncodedTensor, PipelineConfig, RefreshReason, SpsaRequest,
};
use crate::codec::CodecConfig;
use crate::field::{self, CameraPose, DensityGrid, FeaturePlanes, FieldError, FieldVars, RadianceField, Ray, Sampling};
use crate::metrics;
use crate::quantpack::{PackKind, QuantScheme};
use crate::surrogate::{apply_surrogate, SurrogateConfig, SurrogateContext, SurrogateError, SurrogateKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_rec: f64,
    pub lambda_tv: f64,
    pub lr_field: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub rays_per_batch: usize,
    /// Stratified samples per training ray.
    pub samples_per_ray: usize,
    /// Midpoint samples per ray when rendering evaluation images.
    pub eval_samples: usize,
    pub cache: CachePolicy,
    pub surrogate: SurrogateConfig,
    pub pipeline: PipelineConfig,
    /// Gradient entries sampled for the p99 diagnostic.
    pub diag_sample: usize,
    /// Supplied by the experiment, not the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_tv: 5e-5,
            lr_field: 0.02,
            lr_mlp: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain_steps: 2000,
            finetune_steps: 1000,
            rays_per_batch: 1024,
            samples_per_ray: 32,
            eval_samples: 64,
            cache: CachePolicy::default(),
            surrogate: SurrogateConfig::default(),
            pipeline: PipelineConfig::new(QuantScheme::AbsMax, PackKind::FlattenGray, CodecConfig::jpeg(20)),
            diag_sample: 200_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_tv", self.lambda_tv),
            ("lr_field", self.lr_field),
            ("lr_mlp", self.lr_mlp),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(TrainError::Config(format!("{name} = {v}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config(format!("adam betas {} {}", self.beta1, self.beta2)));
        }
        if self.pretrain_steps == 0 || self.finetune_steps == 0 {
            return Err(TrainError::Config("step counts must be positive".into()));
        }
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.eval_samples == 0 || self.diag_sample == 0 {
            return Err(TrainError::Config("batch, sample and diagnostic counts must be positive".into()));
        }
        if self.cache.interval == 0 {
            return Err(TrainError::Config("cache interval must be positive".into()));
        }
        self.surrogate.validate()?;
        self.pipeline.codec.validate().map_err(CacheError::from)?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments of every field tensor, in `RadianceField::tensors_mut` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_field(field: &RadianceField) -> Self {
        let sizes: Vec<usize> = field.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; `t` counts from 1.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// TV of the three planes (spatial axes) plus TV of the grid (all axes).
pub fn tv_loss<'t>(planes: &[Var<'t>; 3], grid: Var<'t>) -> Result<Var<'t>> {
    let mut total = grid.total_variation(&[0, 1, 2])?;
    for p in planes {
        total = total.add(p.total_variation(&[1, 2])?)?;
    }
    Ok(total)
}

pub fn tv_value(planes: &FeaturePlanes, grid: &DensityGrid) -> Result<f64> {
    let tape = Tape::new();
    let vars = [
        tape.constant(&planes.xy),
        tape.constant(&planes.xz),
        tape.constant(&planes.yz),
    ];
    Ok(tv_loss(&vars, tape.constant(&grid.values))?.item())
}

/// Mean absolute error.
pub fn reconstruction_loss<'t>(rendered: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if rendered.shape() != target.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "reconstruction_loss",
            left: rendered.shape(),
            right: target.shape(),
        }
        .into());
    }
    Ok(rendered.sub(target)?.abs().mean())
}

/// A posed image; `image` is `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pose: CameraPose,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Training pixels `(view, col, row)` whose rays cross the scene box.
    hits: Vec<(usize, usize, usize)>,
}

impl Dataset {
    pub fn new(train: Vec<View>, test: Vec<View>) -> Result<Self> {
        for v in train.iter().chain(&test) {
            if v.image.shape() != [3, v.pose.height, v.pose.width] {
                return Err(TrainError::Data(format!(
                    "image {:?} for a {}x{} camera",
                    v.image.shape(),
                    v.pose.width,
                    v.pose.height
                )));
            }
        }
        let mut hits = Vec::new();
        for (i, v) in train.iter().enumerate() {
            for row in 0..v.pose.height {
                for col in 0..v.pose.width {
                    if field::intersect_unit_box(v.pose.origin(), v.pose.pixel_direction(col, row)).is_some() {
                        hits.push((i, col, row));
                    }
                }
            }
        }
        if hits.is_empty() {
            return Err(TrainError::Data("no training ray crosses the scene box".into()));
        }
        Ok(Self { train, test, hits })
    }

    pub fn training_pixels(&self) -> usize {
        self.hits.len()
    }

    /// Random training rays (with replacement) and their `[R, 3]` target colors.
    pub fn sample_batch(&self, rays: usize, samples: usize, rng: &mut impl Rng) -> (Vec<Ray>, Vec<f64>) {
        let mut out = Vec::with_capacity(rays);
        let mut targets = Vec::with_capacity(3 * rays);
        while out.len() < rays {
            let (vi, col, row) = self.hits[rng.gen_range(0..self.hits.len())];
            let view = &self.train[vi];
            let Some(ray) = view.pose.pixel_ray(col, row, samples, Sampling::Stratified, rng) else {
                continue;
            };
            let (h, w) = (view.pose.height, view.pose.width);
            let img = view.image.data();
            targets.extend((0..3).map(|c| img[c * h * w + row * w + col]));
            out.push(ray);
        }
        (out, targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: u64,
    pub mse: f64,
    pub grad_l2: f64,
    pub grad_over_param: f64,
    pub grad_p99: f64,
    pub refreshed: u8,
    pub bits: u64,
}

impl DiagnosticsRecord {
    pub fn is_finite(&self) -> bool {
        [self.mse, self.grad_l2, self.grad_over_param, self.grad_p99]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub rec: f64,
    pub tv: f64,
    pub diagnostics: DiagnosticsRecord,
    pub refresh: Option<RefreshReason>,
}

/// 99th percentile (nearest rank) of `|g|` over at most `limit` entries drawn
/// without replacement.
pub fn grad_p99(grads: &[&[f64]], limit: usize, rng: &mut impl Rng) -> f64 {
    let n: usize = grads.iter().map(|g| g.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let at = |mut i: usize| {
        for g in grads {
            if i < g.len() {
                return g[i].abs();
            }
            i -= g.len();
        }
        unreachable!("index within total length")
    };
    let mut vals: Vec<f64> = if n <= limit {
        (0..n).map(at).collect()
    } else {
        index::sample(rng, n, limit).into_iter().map(at).collect()
    };
    vals.sort_by(f64::total_cmp);
    let rank = ((0.99 * vals.len() as f64).ceil() as usize).clamp(1, vals.len());
    vals[rank - 1]
}

const GRAD_RATIO_EPS: f64 = 1e-8;
const PHASE_PRETRAIN: u64 = 0x5052_4554;
const PHASE_FINETUNE: u64 = 0x4649_4e45;
const PHASE_DIAG: u64 = 0x4449_4147;

/// How the renderer sees the planes and grid in a step.
pub enum FeatureSource<'a> {
    /// The raw parameters.
    Raw,
    /// Cached codec output through a gradient surrogate.
    Codec {
        cache: &'a mut CacheState,
        pipeline: &'a CodecPipeline,
    },
}

/// Field plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub field: RadianceField,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(field: RadianceField) -> Self {
        let adam = AdamState::for_field(&field);
        Self { field, adam }
    }

    /// One optimization step at phase-local step `g`.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        data: &Dataset,
        source: FeatureSource<'_>,
        g: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        let mut refresh = None;
        let mut bits = 0;
        let decoded = match source {
            FeatureSource::Raw => None,
            FeatureSource::Codec { cache, pipeline } => {
                let planes = self.field.planes.as_array();
                let grid = &self.field.grid.values;
                refresh = cache.refresh_reason(g, &cfg.cache, planes, grid);
                if refresh.is_some() {
                    let spsa = (cfg.surrogate.kind == SurrogateKind::SteSpsa).then_some(SpsaRequest {
                        eps: cfg.surrogate.spsa_eps,
                        draws: cfg.surrogate.spsa_draws,
                    });
                    cache.refresh(g, planes, grid, pipeline, spsa.map(|r| (r, &mut *rng)))?;
                }
                let entry = cache.entry().expect("refreshed when empty");
                bits = entry.encoded.total_bits();
                Some(&entry.encoded)
            }
        };

        let (rays, targets) = data.sample_batch(cfg.rays_per_batch, cfg.samples_per_ray, rng);
        let tape = Tape::new();
        let raw = FieldVars::params(&tape, &self.field);
        let render_vars = match decoded {
            None => raw,
            Some(enc) => {
                let refreshed = refresh.is_some();
                fn ctx(e: &EncodedTensor, refresh: bool) -> SurrogateContext<'_> {
                    SurrogateContext {
                        refresh,
                        sensitivity: e.sensitivity.as_ref(),
                    }
                }
                let mut planes = raw.planes;
                for (k, p) in planes.iter_mut().enumerate() {
                    let e = &enc.planes[k];
                    *p = apply_surrogate(&cfg.surrogate, raw.planes[k], &e.decoded, ctx(e, refreshed))?;
                }
                let grid = apply_surrogate(&cfg.surrogate, raw.grid, &enc.density.decoded, ctx(&enc.density, refreshed))?;
                FieldVars {
                    planes,
                    grid,
                    mlp: raw.mlp,
                }
            }
        };
        let rendered = field::render_rays(&render_vars, &rays)?.columns(0, 3)?;
        let target = tape.constant_from(vec![rays.len(), 3], targets)?;
        let rec = reconstruction_loss(rendered, target)?;
        let tv = tv_loss(&raw.planes, raw.grid)?;
        let loss = rec.mul_scalar(cfg.lambda_rec).add(tv.mul_scalar(cfg.lambda_tv))?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss(g));
        }
        let grads = tape.backward(loss)?;
        let mse = rendered.sub(target)?.square().mean().item();

        let vars: Vec<Var<'_>> = raw
            .planes
            .iter()
            .copied()
            .chain(std::iter::once(raw.grid))
            .chain(raw.mlp.iter())
            .collect();
        let grad_data: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
            .collect();
        drop(grads);

        let plane_grads: Vec<&[f64]> = grad_data[..3].iter().map(Vec::as_slice).collect();
        let grad_sq: f64 = plane_grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
        let param_sq: f64 = self.field.planes.iter().flat_map(|t| t.data()).map(|x| x * x).sum();
        let grad_l2 = grad_sq.sqrt();
        let mut diag_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PHASE_DIAG ^ g.rotate_left(17));
        let diagnostics = DiagnosticsRecord {
            step: g,
            mse,
            grad_l2,
            grad_over_param: grad_l2 / (param_sq.sqrt() + GRAD_RATIO_EPS),
            grad_p99: grad_p99(&plane_grads, cfg.diag_sample, &mut diag_rng),
            refreshed: refresh.is_some() as u8,
            bits,
        };
        let (rec_value, tv_value) = (rec.item(), tv.item());
        drop(tape);

        self.adam.t += 1;
        let adam_cfg = cfg.adam();
        for (k, tensor) in self.field.tensors_mut().enumerate() {
            let lr = if k < 4 { cfg.lr_field } else { cfg.lr_mlp };
            adam_update(
                tensor.data_mut(),
                &grad_data[k],
                &mut self.adam.m[k],
                &mut self.adam.v[k],
                self.adam.t,
                lr,
                &adam_cfg,
            );
        }
        Ok(StepOutcome {
            loss: loss_value,
            rec: rec_value,
            tv: tv_value,
            diagnostics,
            refresh,
        })
    }
}

/// Per-step record of a training phase.
#[derive(Debug, Clone, Default)]
pub struct PhaseLog {
    pub losses: Vec<f64>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub refreshes: Vec<(u64, RefreshReason, u64)>,
}

impl PhaseLog {
    fn record(&mut self, out: &StepOutcome) {
        self.losses.push(out.loss);
        self.diagnostics.push(out.diagnostics);
        if let Some(r) = out.refresh {
            self.refreshes.push((out.diagnostics.step, r, out.diagnostics.bits));
        }
    }
}

/// Stage one: train on raw planes and grid.
pub fn pretrain_vanilla(trainer: &mut Trainer, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PHASE_PRETRAIN);
    let mut log = PhaseLog::default();
    for g in 0..cfg.pretrain_steps {
        let out = trainer.step(cfg, data, FeatureSource::Raw, g, &mut rng)?;
        log.record(&out);
    }
    Ok(log)
}

/// Continue training on raw tensors for the finetune budget; the
/// codec-agnostic baseline.
pub fn finetune_vanilla(trainer: &mut Trainer, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PHASE_FINETUNE);
    let mut log = PhaseLog::default();
    for g in 0..cfg.finetune_steps {
        let out = trainer.step(cfg, data, FeatureSource::Raw, g, &mut rng)?;
        log.record(&out);
    }
    Ok(log)
}

/// Held-out quality of the decoded model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub canvas_bits: u64,
    pub side_bits: u64,
    pub bits_total: u64,
    /// Always true: the render used only decoded planes and grid.
    pub from_decoded: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub log: PhaseLog,
    pub eval: Evaluation,
}

/// Stage two: train through the codec, then encode the final parameters
/// and evaluate the decoded model.
pub fn finetune_scl(trainer: &mut Trainer, data: &Dataset, cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let pipeline = CodecPipeline::new(cfg.pipeline.clone())?;
    let mut cache = CacheState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PHASE_FINETUNE);
    let mut log = PhaseLog::default();
    for g in 0..cfg.finetune_steps {
        let source = FeatureSource::Codec {
            cache: &mut cache,
            pipeline: &pipeline,
        };
        let out = trainer.step(cfg, data, source, g, &mut rng)?;
        log.record(&out);
    }
    let eval = evaluate_decoded(&trainer.field, &data.test, &pipeline, cfg.eval_samples)?;
    Ok(FinetuneOutcome { log, eval })
}

/// The model a client reconstructs: planes and grid replaced by their codec
/// round trip, MLP unchanged.
pub fn decode_field(field: &RadianceField, pipeline: &CodecPipeline) -> Result<(RadianceField, EncodedField)> {
    let none: Option<(SpsaRequest, &mut ChaCha8Rng)> = None;
    let enc = pipeline.encode_field(field.planes.as_array(), &field.grid.values, none)?;
    let decoded = RadianceField {
        planes: FeaturePlanes::from_array(enc.decoded_planes())?,
        grid: DensityGrid::new(enc.density.decoded.clone())?,
        mlp: field.mlp.clone(),
    };
    Ok((decoded, enc))
}

/// Mean PSNR of renders against the view images.
pub fn evaluate_views(field: &RadianceField, views: &[View], samples: usize) -> Result<f64> {
    if views.is_empty() {
        return Err(TrainError::Data("no evaluation views".into()));
    }
    let mut total = 0.0;
    for v in views {
        let img = field::render_image(field, &v.pose, samples)?;
        total += metrics::psnr(img.data(), v.image.data()).expect("same shape");
    }
    Ok(total / views.len() as f64)
}

pub fn evaluate_decoded(field: &RadianceField, views: &[View], pipeline: &CodecPipeline, samples: usize) -> Result<Evaluation> {
    let (decoded, enc) = decode_field(field, pipeline)?;
    Ok(Evaluation {
        psnr: evaluate_views(&decoded, views, samples)?,
        canvas_bits: enc.canvas_bits(),
        side_bits: enc.side_bits(),
        bits_total: enc.total_bits(),
        from_decoded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    #[test]
    fn tv_examples() {
        let plane = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let tape = Tape::new();
        let v = tape.constant(&plane);
        assert_eq!(v.total_variation(&[1, 2]).unwrap().item(), 0.5);
        let planes = FeaturePlanes::filled(3, 4, 5, 0.3);
        let grid = DensityGrid::filled(3, 3, 3, -1.0);
        assert_eq!(tv_value(&planes, &grid).unwrap(), 0.0);
        let three = FeaturePlanes::new(plane.clone(), plane.clone(), plane).unwrap();
        let flat = DensityGrid::filled(2, 2, 2, 4.0);
        assert_eq!(tv_value(&three, &flat).unwrap(), 1.5);
    }

    #[test]
    fn tv_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let planes = FeaturePlanes::random(2, 4, 3, 1.0, &mut rng);
        let grid = DensityGrid::new(Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i * i) as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let base = tv_value(&planes, &grid).unwrap();
        let k = 1.7;
        let scale = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * k).collect()).unwrap();
        let planes_k = FeaturePlanes::new(scale(&planes.xy), scale(&planes.xz), scale(&planes.yz)).unwrap();
        let grid_k = DensityGrid::new(scale(&grid.values)).unwrap();
        let scaled = tv_value(&planes_k, &grid_k).unwrap();
        assert!((scaled - k * k * base).abs() < 1e-12 * scaled.max(1.0));
    }

    #[test]
    fn l1_examples_and_gradient() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap());
        assert_eq!(reconstruction_loss(a, a).unwrap().item(), 0.0);
        let shifted = a.add_scalar(0.1);
        assert!((reconstruction_loss(shifted, a).unwrap().item() - 0.1).abs() < 1e-15);
        let bad = tape.constant(&Tensor::zeros(vec![3, 2]));
        assert!(reconstruction_loss(a, bad).is_err());

        let target = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, 0.1, 1.0, 0.0, 0.25, 0.5]).unwrap();
        let t2 = Tape::new();
        let xv = t2.param(&x);
        let l = reconstruction_loss(xv, t2.constant(&target)).unwrap();
        let g = t2.backward(l).unwrap();
        for ((gi, xi), ti) in g.get(xv).unwrap().iter().zip(x.data()).zip(target.data()) {
            assert_eq!(*gi, (xi - ti).signum() / 6.0);
        }
        let err = finite_difference_check(
            |tape, v| reconstruction_loss(v, tape.constant(&target)).map_err(|e| match e {
                TrainError::Autodiff(a) => a,
                other => AutodiffError::InvalidArgument(other.to_string()),
            }),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![1.0, -2.0, 0.5];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &[0.0; 3], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(m, vec![0.0; 3]);

        let g = [0.3, -4.0, 1e-3];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1, &cfg);
        // first step: m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
        for ((pi, p0), gi) in p.iter().zip([1.0, -2.0, 0.5]).zip(g) {
            let expected = p0 - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-12);
            assert!(((p0 - pi) - 0.1 * gi.signum()).abs() < 1e-5 * 0.1 / gi.abs());
        }
        let m1 = m.clone();
        adam_update(&mut p, &[0.0; 3], &mut m, &mut v, 2, 0.1, &cfg);
        for (a, b) in m.iter().zip(&m1) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn p99_nearest_rank() {
        let g: Vec<f64> = (1..=100).map(|i| -(i as f64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(grad_p99(&[&g[..50], &g[50..]], 1000, &mut rng), 99.0);
        let sampled = grad_p99(&[&g], 10, &mut rng);
        assert!(sampled >= 1.0 && sampled <= 100.0);
        assert_eq!(grad_p99(&[], 10, &mut rng), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_tv: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            finetune_steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let toml_text = toml::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(back, TrainConfig::default());
    }
}
