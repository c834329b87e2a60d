//! Quantization of feature tensors to `[0, 1]` and packing of multi-channel
//! tensors into 1- or 3-channel canvases that image/video codecs accept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum QuantPackError {
    #[error("invalid quantization bounds: {0}")]
    Bounds(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("canvas error: {0}")]
    Canvas(String),
}

pub type Result<T> = std::result::Result<T, QuantPackError>;

/// Smallest channelwise range; narrower ranges are widened symmetrically.
pub const MIN_CHANNEL_RANGE: f64 = 1e-3;

/// Fixed static-scene AbsMax ranges.
pub const APPEARANCE_RANGE: Bounds = Bounds { lo: -5.0, hi: 5.0 };
pub const DENSITY_RANGE: Bounds = Bounds { lo: -25.0, hi: 25.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(QuantPackError::Bounds(format!("[{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn quantize(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn dequantize(&self, v: f64) -> f64 {
        v * (self.hi - self.lo) + self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    AbsMax,
    Channelwise,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantSpec {
    /// One range shared by every channel.
    AbsMax(Bounds),
    /// One range per leading-axis channel.
    Channelwise(Vec<Bounds>),
}

impl QuantSpec {
    pub fn abs_max(lo: f64, hi: f64) -> Result<Self> {
        Ok(Self::AbsMax(Bounds::new(lo, hi)?))
    }

    pub fn channelwise(bounds: Vec<Bounds>) -> Result<Self> {
        for b in &bounds {
            Bounds::new(b.lo, b.hi)?;
        }
        Ok(Self::Channelwise(bounds))
    }

    pub fn scheme(&self) -> QuantScheme {
        match self {
            Self::AbsMax(_) => QuantScheme::AbsMax,
            Self::Channelwise(_) => QuantScheme::Channelwise,
        }
    }

    /// Bits of side information a decoder needs: 2 float32 per channel for channelwise ranges.
    pub fn side_info_bits(&self) -> u64 {
        match self {
            Self::AbsMax(_) => 0,
            Self::Channelwise(b) => 64 * b.len() as u64,
        }
    }

    fn per_channel(&self, x: &Tensor) -> Result<Vec<(Bounds, usize)>> {
        match self {
            Self::AbsMax(b) => Ok(vec![(*b, x.len())]),
            Self::Channelwise(bounds) => {
                let c = x.shape().first().copied().unwrap_or(0);
                if c != bounds.len() || c == 0 {
                    return Err(QuantPackError::Bounds(format!(
                        "{} channel ranges for a tensor of shape {:?}",
                        bounds.len(),
                        x.shape()
                    )));
                }
                Ok(bounds.iter().map(|b| (*b, x.len() / c)).collect())
            }
        }
    }

    fn map(&self, x: &Tensor, f: impl Fn(&Bounds, f64) -> f64) -> Result<Tensor> {
        let mut out = x.clone();
        let mut offset = 0;
        for (b, n) in self.per_channel(x)? {
            for v in &mut out.data_mut()[offset..offset + n] {
                *v = f(&b, *v);
            }
            offset += n;
        }
        Ok(out)
    }
}

/// `clip((x - lo) / (hi - lo), 0, 1)` elementwise.
pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    spec.map(x, |b, v| b.quantize(v))
}

/// `x01 * (hi - lo) + lo` elementwise.
pub fn dequantize(x01: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    spec.map(x01, |b, v| b.dequantize(v))
}

/// Linear-interpolation percentile of sorted values, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Central 95% range (2.5th to 97.5th percentile) of every leading-axis channel.
pub fn estimate_channelwise_bounds(x: &Tensor) -> Result<Vec<Bounds>> {
    let c = x.shape().first().copied().unwrap_or(0);
    if c == 0 || x.len() / c < 2 {
        return Err(QuantPackError::Bounds(format!("need >= 2 values per channel, shape {:?}", x.shape())));
    }
    let per = x.len() / c;
    x.data()
        .chunks(per)
        .map(|chunk| {
            let mut sorted = chunk.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut lo = percentile(&sorted, 0.025);
            let mut hi = percentile(&sorted, 0.975);
            if hi - lo < MIN_CHANNEL_RANGE {
                let mid = 0.5 * (lo + hi);
                lo = mid - 0.5 * MIN_CHANNEL_RANGE;
                hi = mid + 0.5 * MIN_CHANNEL_RANGE;
            }
            Bounds::new(lo, hi)
        })
        .collect()
}

/// 8-bit code of a `[0, 1]` value; rounds half away from zero.
pub fn to_level(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_level(q: u8) -> f64 {
    q as f64 / 255.0
}

/// Planar image with values in `[0, 1]`, row-major, top-left origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Canvas {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(QuantPackError::Canvas(format!("{channels} channels")));
        }
        if data.len() != channels * height * width || height == 0 || width == 0 {
            return Err(QuantPackError::Canvas(format!(
                "{} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(QuantPackError::Canvas(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    /// Canvas from planar 8-bit levels.
    pub fn from_levels(channels: usize, height: usize, width: usize, levels: &[u8]) -> Result<Self> {
        Self::new(channels, height, width, levels.iter().map(|&q| from_level(q)).collect())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Planar 8-bit view.
    pub fn to_levels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_level(v)).collect()
    }

    /// Interleaved 8-bit pixels (`L` or `RGB`), the layout image encoders take.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..n {
            for c in 0..self.channels {
                out.push(to_level(self.data[c * n + p]));
            }
        }
        out
    }

    pub fn from_interleaved(channels: usize, height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        let n = height * width;
        if pixels.len() != channels * n {
            return Err(QuantPackError::Canvas(format!(
                "{} interleaved bytes for {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        let mut data = vec![0.0; channels * n];
        for p in 0..n {
            for c in 0..channels {
                data[c * n + p] = from_level(pixels[p * channels + c]);
            }
        }
        Self::new(channels, height, width, data)
    }

    /// The canvas after the 8-bit round trip.
    pub fn rounded(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| from_level(to_level(v))).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackKind {
    /// Every channel tiled into one monochrome canvas.
    FlattenGray,
    /// Three channel groups, each tiled into one color plane.
    FlattenRgb,
    /// Space-to-depth into a 3-channel canvas.
    PixelShuffle,
    /// Density slices tiled into one monochrome canvas.
    DensityMono,
}

/// Near-square tile grid holding `n` tiles.
///
/// `rows` is the largest divisor of `n` not above `ceil(sqrt(n))`; primes above 3
/// are first padded to the next composite so the grid does not degenerate to one row.
pub fn tile_grid(n: usize) -> (usize, usize) {
    let mut m = n.max(1);
    if m > 3 && is_prime(m) {
        m += 1;
    }
    let limit = (m as f64).sqrt().ceil() as usize;
    let rows = (1..=limit).rev().find(|r| m % r == 0).unwrap_or(1);
    (rows, m / rows)
}

fn is_prime(n: usize) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackLayout {
    pub kind: PackKind,
    /// Source `[C, H, W]` (or `[Dy, Dx, Dz]` for density).
    pub source: [usize; 3],
    pub rows: usize,
    pub cols: usize,
    /// Space-to-depth factor; 1 for tiled layouts.
    pub shuffle: usize,
    pub out_channels: usize,
}

impl PackLayout {
    pub fn new(kind: PackKind, source: [usize; 3]) -> Result<Self> {
        let [c, h, w] = source;
        if c == 0 || h == 0 || w == 0 {
            return Err(QuantPackError::Layout(format!("empty source {source:?}")));
        }
        match kind {
            PackKind::FlattenGray | PackKind::DensityMono => {
                let (rows, cols) = tile_grid(c);
                Ok(Self {
                    kind,
                    source,
                    rows,
                    cols,
                    shuffle: 1,
                    out_channels: 1,
                })
            }
            PackKind::FlattenRgb => {
                if c % 3 != 0 {
                    return Err(QuantPackError::Layout(format!("{c} channels do not split into 3 groups")));
                }
                let (rows, cols) = tile_grid(c / 3);
                Ok(Self {
                    kind,
                    source,
                    rows,
                    cols,
                    shuffle: 1,
                    out_channels: 3,
                })
            }
            PackKind::PixelShuffle => {
                if c % 3 != 0 {
                    return Err(QuantPackError::Layout(format!("{c} channels do not split into 3 groups")));
                }
                let r = ((c / 3) as f64).sqrt().round() as usize;
                if r * r != c / 3 {
                    return Err(QuantPackError::Layout(format!("{c}/3 is not a perfect square")));
                }
                Ok(Self {
                    kind,
                    source,
                    rows: r,
                    cols: r,
                    shuffle: r,
                    out_channels: 3,
                })
            }
        }
    }

    /// Canvas `(channels, height, width)`.
    pub fn canvas_dims(&self) -> (usize, usize, usize) {
        let [_, h, w] = self.source;
        (self.out_channels, self.rows * h, self.cols * w)
    }

    /// Planar canvas offset of source element `(c, i, j)`.
    fn canvas_offset(&self, c: usize, i: usize, j: usize) -> usize {
        let [channels, h, w] = self.source;
        let (_, ch_h, ch_w) = self.canvas_dims();
        let (plane, row, col) = match self.kind {
            PackKind::FlattenGray | PackKind::DensityMono => (0, (c / self.cols) * h + i, (c % self.cols) * w + j),
            PackKind::FlattenRgb => {
                let group = channels / 3;
                let (g, k) = (c / group, c % group);
                (g, (k / self.cols) * h + i, (k % self.cols) * w + j)
            }
            PackKind::PixelShuffle => {
                let r = self.shuffle;
                let (g, k) = (c / (r * r), c % (r * r));
                (g, r * i + k / r, r * j + k % r)
            }
        };
        (plane * ch_h + row) * ch_w + col
    }

    fn check_source(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.source {
            return Err(QuantPackError::Layout(format!(
                "tensor shape {:?} does not match layout source {:?}",
                x.shape(),
                self.source
            )));
        }
        Ok(())
    }

    /// Scatters source values into a planar canvas buffer; unused tiles are zero.
    pub fn scatter(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_source(x)?;
        let (cc, ch, cw) = self.canvas_dims();
        let mut out = vec![0.0; cc * ch * cw];
        let [c, h, w] = self.source;
        let src = x.data();
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[self.canvas_offset(k, i, j)] = src[(k * h + i) * w + j];
                }
            }
        }
        Ok(out)
    }

    /// Gathers source values back from a planar canvas buffer.
    pub fn gather(&self, buf: &[f64]) -> Result<Tensor> {
        let (cc, ch, cw) = self.canvas_dims();
        if buf.len() != cc * ch * cw {
            return Err(QuantPackError::Layout(format!(
                "canvas buffer of {} values, layout expects {cc}x{ch}x{cw}",
                buf.len()
            )));
        }
        let [c, h, w] = self.source;
        let mut out = vec![0.0; c * h * w];
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(k * h + i) * w + j] = buf[self.canvas_offset(k, i, j)];
                }
            }
        }
        Ok(Tensor::new(self.source.to_vec(), out).expect("layout source shape"))
    }
}

pub fn pack(x01: &Tensor, layout: &PackLayout) -> Result<Canvas> {
    let (c, h, w) = layout.canvas_dims();
    Canvas::new(c, h, w, layout.scatter(x01)?)
}

pub fn unpack(canvas: &Canvas, layout: &PackLayout) -> Result<Tensor> {
    if canvas.dims() != layout.canvas_dims() {
        return Err(QuantPackError::Layout(format!(
            "canvas {:?} does not match layout {:?}",
            canvas.dims(),
            layout.canvas_dims()
        )));
    }
    layout.gather(canvas.data())
}

pub fn density_layout(grid_shape: [usize; 3]) -> Result<PackLayout> {
    PackLayout::new(PackKind::DensityMono, grid_shape)
}

/// Tiles the `y` slices of a `[Dy, Dx, Dz]` grid into one monochrome canvas.
pub fn tile_density(d01: &Tensor) -> Result<Canvas> {
    let shape: [usize; 3] = d01
        .shape()
        .try_into()
        .map_err(|_| QuantPackError::Layout(format!("density shape {:?}", d01.shape())))?;
    pack(d01, &density_layout(shape)?)
}

pub fn untile_density(canvas: &Canvas, grid_shape: [usize; 3]) -> Result<Tensor> {
    unpack(canvas, &density_layout(grid_shape)?)
}
