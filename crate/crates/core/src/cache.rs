//! Cache of decoded planes and density, refreshed every `M` steps or when
//! the raw parameters drift away from the snapshot taken at the last refresh.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::codec::{self, CodecConfig, CodecError};
use crate::quantpack::{
    self, Bounds, Canvas, PackKind, PackLayout, QuantPackError, QuantScheme, QuantSpec, APPEARANCE_RANGE, DENSITY_RANGE,
};
use crate::surrogate::spsa_diag_jacobian;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    QuantPack(#[from] QuantPackError),
}

pub type Result<T> = std::result::Result<T, CacheError>;

pub const DRIFT_GUARD: f64 = 1e-8;

/// `‖current − snapshot‖ / (‖snapshot‖ + 1e-8)`.
pub fn compute_drift(current: &Tensor, snapshot: &Tensor) -> Result<f64> {
    if current.shape() != snapshot.shape() {
        return Err(CacheError::Shape(current.shape().to_vec(), snapshot.shape().to_vec()));
    }
    let diff = current
        .data()
        .iter()
        .zip(snapshot.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (snapshot.l2_norm() + DRIFT_GUARD))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scheme: QuantScheme,
    pub pack: PackKind,
    pub codec: CodecConfig,
    /// Codec for the density canvas; the appearance codec when unset.
    #[serde(default)]
    pub density_codec: Option<CodecConfig>,
}

impl PipelineConfig {
    pub fn new(scheme: QuantScheme, pack: PackKind, codec: CodecConfig) -> Self {
        Self {
            scheme,
            pack,
            codec,
            density_codec: None,
        }
    }

    pub fn density_codec(&self) -> &CodecConfig {
        self.density_codec.as_ref().unwrap_or(&self.codec)
    }
}

/// One tensor after quantize, pack, round trip, unpack, dequantize.
#[derive(Debug, Clone)]
pub struct EncodedTensor {
    pub decoded: Tensor,
    pub canvas: Canvas,
    pub bits: u64,
    pub side_bits: u64,
    pub spec: QuantSpec,
    /// Elementwise SPSA sensitivity in tensor space.
    pub sensitivity: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EncodedField {
    pub planes: [EncodedTensor; 3],
    pub density: EncodedTensor,
}

impl EncodedField {
    pub fn iter(&self) -> impl Iterator<Item = &EncodedTensor> {
        self.planes.iter().chain(std::iter::once(&self.density))
    }

    pub fn canvas_bits(&self) -> u64 {
        self.iter().map(|e| e.bits).sum()
    }

    pub fn side_bits(&self) -> u64 {
        self.iter().map(|e| e.side_bits).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.canvas_bits() + self.side_bits()
    }

    pub fn decoded_planes(&self) -> [Tensor; 3] {
        self.planes.clone().map(|e| e.decoded)
    }
}

/// SPSA settings for a refresh.
#[derive(Debug, Clone, Copy)]
pub struct SpsaRequest {
    pub eps: f64,
    pub draws: usize,
}

#[derive(Debug, Clone)]
pub struct CodecPipeline {
    pub cfg: PipelineConfig,
}

impl CodecPipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.codec.validate()?;
        cfg.density_codec().validate()?;
        Ok(Self { cfg })
    }

    fn appearance_spec(&self, x: &Tensor) -> Result<QuantSpec> {
        Ok(match self.cfg.scheme {
            QuantScheme::AbsMax => QuantSpec::AbsMax(APPEARANCE_RANGE),
            QuantScheme::Channelwise => QuantSpec::channelwise(quantpack::estimate_channelwise_bounds(x)?)?,
        })
    }

    /// Density uses one range for the whole grid: the static one, or the
    /// central 95% of all values.
    fn density_spec(&self, x: &Tensor) -> Result<(QuantSpec, u64)> {
        Ok(match self.cfg.scheme {
            QuantScheme::AbsMax => (QuantSpec::AbsMax(DENSITY_RANGE), 0),
            QuantScheme::Channelwise => {
                let flat = x.clone().reshape(vec![1, x.len()]).expect("same size");
                let b: Bounds = quantpack::estimate_channelwise_bounds(&flat)?[0];
                (QuantSpec::AbsMax(b), 64)
            }
        })
    }

    fn encode<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        spec: QuantSpec,
        side_bits: u64,
        layout: &PackLayout,
        codec_cfg: &CodecConfig,
        spsa: Option<(SpsaRequest, &mut R)>,
    ) -> Result<EncodedTensor> {
        let x01 = quantpack::quantize(x, &spec)?;
        let canvas = quantpack::pack(&x01, layout)?;
        let rt = codec::round_trip(&canvas, codec_cfg)?;
        let decoded = quantpack::dequantize(&quantpack::unpack(&rt.decoded, layout)?, &spec)?;
        let sensitivity = match spsa {
            Some((req, rng)) => {
                let (c, h, w) = canvas.dims();
                let map = |buf: &[f64]| -> std::result::Result<Vec<f64>, CodecError> {
                    let y = Canvas::new(c, h, w, buf.to_vec())?;
                    Ok(codec::round_trip(&y, codec_cfg)?.decoded.data().to_vec())
                };
                let g = spsa_diag_jacobian(map, canvas.data(), req.eps, req.draws, rng)?;
                Some(layout.gather(&g)?)
            }
            None => None,
        };
        Ok(EncodedTensor {
            decoded,
            canvas: rt.decoded,
            bits: rt.bits,
            side_bits,
            spec,
            sensitivity,
        })
    }

    pub fn encode_plane<R: Rng + ?Sized>(&self, x: &Tensor, spsa: Option<(SpsaRequest, &mut R)>) -> Result<EncodedTensor> {
        let layout = PackLayout::new(self.cfg.pack, source_shape(x)?)?;
        let spec = self.appearance_spec(x)?;
        let side = spec.side_info_bits();
        self.encode(x, spec, side, &layout, &self.cfg.codec, spsa)
    }

    pub fn encode_density<R: Rng + ?Sized>(&self, x: &Tensor, spsa: Option<(SpsaRequest, &mut R)>) -> Result<EncodedTensor> {
        let layout = quantpack::density_layout(source_shape(x)?)?;
        let (spec, side) = self.density_spec(x)?;
        self.encode(x, spec, side, &layout, self.cfg.density_codec(), spsa)
    }

    /// Runs the three planes and the density grid through the codec.
    pub fn encode_field<R: Rng + ?Sized>(
        &self,
        planes: [&Tensor; 3],
        grid: &Tensor,
        spsa: Option<(SpsaRequest, &mut R)>,
    ) -> Result<EncodedField> {
        match spsa {
            Some((req, rng)) => {
                let [a, b, c] = planes;
                Ok(EncodedField {
                    planes: [
                        self.encode_plane(a, Some((req, &mut *rng)))?,
                        self.encode_plane(b, Some((req, &mut *rng)))?,
                        self.encode_plane(c, Some((req, &mut *rng)))?,
                    ],
                    density: self.encode_density(grid, Some((req, rng)))?,
                })
            }
            None => {
                let none = || None::<(SpsaRequest, &mut rand::rngs::mock::StepRng)>;
                let [a, b, c] = planes;
                Ok(EncodedField {
                    planes: [self.encode_plane(a, none())?, self.encode_plane(b, none())?, self.encode_plane(c, none())?],
                    density: self.encode_density(grid, none())?,
                })
            }
        }
    }
}

fn source_shape(x: &Tensor) -> Result<[usize; 3]> {
    x.shape()
        .try_into()
        .map_err(|_| CacheError::Shape(x.shape().to_vec(), vec![0, 0, 0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CachePolicy {
    /// Refresh interval `M` in global steps.
    pub interval: u64,
    /// Drift threshold; `f64::INFINITY` disables change-based refresh.
    pub drift_threshold: f64,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self {
            interval: 128,
            drift_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefreshReason {
    Empty,
    Interval,
    Drift(f64),
}

impl RefreshReason {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Empty => "empty",
            Self::Interval => "interval",
            Self::Drift(_) => "drift",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub encoded: EncodedField,
    pub snapshot_planes: [Tensor; 3],
    pub snapshot_density: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CacheState {
    entry: Option<CacheEntry>,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entry.is_none()
    }

    pub fn entry(&self) -> Option<&CacheEntry> {
        self.entry.as_ref()
    }

    /// Largest drift of the planes and density from their snapshots.
    pub fn max_drift(&self, planes: [&Tensor; 3], grid: &Tensor) -> Result<f64> {
        let Some(e) = &self.entry else {
            return Ok(f64::INFINITY);
        };
        let mut worst = compute_drift(grid, &e.snapshot_density)?;
        for (p, s) in planes.iter().zip(&e.snapshot_planes) {
            worst = worst.max(compute_drift(p, s)?);
        }
        Ok(worst)
    }

    pub fn refresh_reason(&self, step: u64, policy: &CachePolicy, planes: [&Tensor; 3], grid: &Tensor) -> Option<RefreshReason> {
        let Some(e) = &self.entry else {
            return Some(RefreshReason::Empty);
        };
        if step.saturating_sub(e.step) >= policy.interval {
            return Some(RefreshReason::Interval);
        }
        match self.max_drift(planes, grid) {
            Ok(d) if d > policy.drift_threshold => Some(RefreshReason::Drift(d)),
            Ok(_) => None,
            Err(_) => Some(RefreshReason::Drift(f64::INFINITY)),
        }
    }

    pub fn should_refresh(&self, step: u64, policy: &CachePolicy, planes: [&Tensor; 3], grid: &Tensor) -> bool {
        self.refresh_reason(step, policy, planes, grid).is_some()
    }

    /// Re-encodes the current tensors and snapshots them.
    pub fn refresh<R: Rng + ?Sized>(
        &mut self,
        step: u64,
        planes: [&Tensor; 3],
        grid: &Tensor,
        pipeline: &CodecPipeline,
        spsa: Option<(SpsaRequest, &mut R)>,
    ) -> Result<&CacheEntry> {
        let encoded = pipeline.encode_field(planes, grid, spsa)?;
        self.entry = Some(CacheEntry {
            encoded,
            snapshot_planes: planes.map(|p| p.clone()),
            snapshot_density: grid.clone(),
            step,
        });
        Ok(self.entry.as_ref().expect("just set"))
    }

    pub fn clear(&mut self) {
        self.entry = None;
    }
}
