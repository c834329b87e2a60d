//! Encode-then-decode round trips of canvases through standard codecs.
//!
//! The identity backend only rounds to 8 bits. JPEG runs in-process. Video
//! codecs run as external processes fed a YUV4MPEG2 stream on stdin; the
//! encoded file is decoded back by a second command writing YUV4MPEG2 to stdout.

pub mod y4m;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantpack::{Canvas, QuantPackError};
use y4m::{Chroma, StreamHeader, YuvFrame};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("{tool} exited with {status}: {stderr}")]
    ToolFailed {
        tool: String,
        status: String,
        stderr: String,
    },
    #[error("malformed raw video stream: {0}")]
    Stream(String),
    #[error("decoded {got:?}, expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("jpeg: {0}")]
    Jpeg(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Canvas(#[from] QuantPackError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Identity,
    Jpeg,
    ExternalVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChromaFormat {
    #[default]
    Yuv444,
    Yuv420,
}

impl ChromaFormat {
    fn y4m(self) -> Chroma {
        match self {
            ChromaFormat::Yuv444 => Chroma::C444,
            ChromaFormat::Yuv420 => Chroma::C420,
        }
    }

    pub fn pix_fmt(self) -> &'static str {
        match self {
            ChromaFormat::Yuv444 => "yuv444p",
            ChromaFormat::Yuv420 => "yuv420p",
        }
    }
}

/// Command templates for an external encoder/decoder pair.
///
/// Arguments may contain the placeholders `{input}`, `{output}`, `{qp}`,
/// `{width}`, `{height}` and `{pix_fmt}`. The encoder reads YUV4MPEG2 from
/// stdin and writes `{output}`; the decoder reads `{input}` and writes
/// YUV4MPEG2 to stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCodec {
    pub name: String,
    pub encode: Vec<String>,
    pub decode: Vec<String>,
    /// Probe command; availability means it exits 0 and, when
    /// `probe_match` is set, prints that string.
    #[serde(default)]
    pub probe: Vec<String>,
    #[serde(default)]
    pub probe_match: Option<String>,
    /// Extension of the encoded file, e.g. `webm`.
    pub extension: String,
    pub max_qp: i32,
}

fn args(s: &[&str]) -> Vec<String> {
    s.iter().map(|a| a.to_string()).collect()
}

fn ffmpeg_decode() -> Vec<String> {
    args(&[
        "ffmpeg",
        "-hide_banner",
        "-loglevel",
        "error",
        "-threads",
        "1",
        "-i",
        "{input}",
        "-f",
        "yuv4mpegpipe",
        "-pix_fmt",
        "{pix_fmt}",
        "-strict",
        "-1",
        "-",
    ])
}

fn ffmpeg_encode(codec_args: &[&str]) -> Vec<String> {
    let mut v = args(&[
        "ffmpeg",
        "-hide_banner",
        "-loglevel",
        "error",
        "-y",
        "-f",
        "yuv4mpegpipe",
        "-i",
        "-",
    ]);
    v.extend(args(codec_args));
    v.extend(args(&["-threads", "1", "-fflags", "+bitexact", "{output}"]));
    v
}

impl ExternalCodec {
    fn ffmpeg(name: &str, encoder: &str, extension: &str, max_qp: i32, codec_args: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            encode: ffmpeg_encode(codec_args),
            decode: ffmpeg_decode(),
            probe: args(&["ffmpeg", "-hide_banner", "-encoders"]),
            probe_match: Some(encoder.to_string()),
            extension: extension.to_string(),
            max_qp,
        }
    }

    pub fn vp9() -> Self {
        Self::ffmpeg(
            "vp9",
            "libvpx-vp9",
            "webm",
            63,
            &[
                "-c:v",
                "libvpx-vp9",
                "-crf",
                "{qp}",
                "-b:v",
                "0",
                "-deadline",
                "good",
                "-cpu-used",
                "4",
                "-row-mt",
                "0",
            ],
        )
    }

    pub fn hevc() -> Self {
        Self::ffmpeg(
            "hevc",
            "libx265",
            "mkv",
            51,
            &[
                "-c:v",
                "libx265",
                "-preset",
                "medium",
                "-x265-params",
                "qp={qp}:pools=1:frame-threads=1:log-level=error",
            ],
        )
    }

    pub fn av1() -> Self {
        Self::ffmpeg(
            "av1",
            "libaom-av1",
            "mkv",
            63,
            &[
                "-c:v",
                "libaom-av1",
                "-crf",
                "{qp}",
                "-b:v",
                "0",
                "-cpu-used",
                "6",
                "-row-mt",
                "0",
            ],
        )
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vp9" => Some(Self::vp9()),
            "hevc" | "h265" => Some(Self::hevc()),
            "av1" => Some(Self::av1()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub backend: Backend,
    /// JPEG quality (1..=100) or video QP/CRF (0..=max_qp).
    pub quality: i32,
    #[serde(default)]
    pub external: Option<ExternalCodec>,
    #[serde(default)]
    pub chroma: ChromaFormat,
    /// Directory for temporary bitstreams; the system temp dir when unset.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

impl CodecConfig {
    pub fn identity() -> Self {
        Self {
            backend: Backend::Identity,
            quality: 0,
            external: None,
            chroma: ChromaFormat::Yuv444,
            work_dir: None,
        }
    }

    pub fn jpeg(quality: i32) -> Self {
        Self {
            backend: Backend::Jpeg,
            quality,
            ..Self::identity()
        }
    }

    pub fn external(codec: ExternalCodec, qp: i32, chroma: ChromaFormat) -> Self {
        Self {
            backend: Backend::ExternalVideo,
            quality: qp,
            external: Some(codec),
            chroma,
            work_dir: None,
        }
    }

    pub fn with_quality(&self, quality: i32) -> Self {
        Self {
            quality,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.backend {
            Backend::Identity => Ok(()),
            Backend::Jpeg if (1..=100).contains(&self.quality) => Ok(()),
            Backend::Jpeg => Err(CodecError::Config(format!("jpeg quality {} outside 1..=100", self.quality))),
            Backend::ExternalVideo => {
                let ext = self
                    .external
                    .as_ref()
                    .ok_or_else(|| CodecError::Config("external backend without command templates".into()))?;
                if ext.encode.is_empty() || ext.decode.is_empty() {
                    return Err(CodecError::Config(format!("{}: empty command template", ext.name)));
                }
                if !(0..=ext.max_qp).contains(&self.quality) {
                    return Err(CodecError::Config(format!(
                        "{} qp {} outside 0..={}",
                        ext.name, self.quality, ext.max_qp
                    )));
                }
                Ok(())
            }
        }
    }

    /// Short label used in reports, e.g. `jpeg` or `vp9`.
    pub fn label(&self) -> String {
        match (self.backend, &self.external) {
            (Backend::Identity, _) => "identity".into(),
            (Backend::Jpeg, _) => "jpeg".into(),
            (Backend::ExternalVideo, Some(ext)) => ext.name.clone(),
            (Backend::ExternalVideo, None) => "external".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundTripResult {
    pub decoded: Canvas,
    pub bits: u64,
    pub encode_time: Duration,
    pub decode_time: Duration,
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub decoded: Vec<Canvas>,
    pub bits: u64,
    pub encode_time: Duration,
    pub decode_time: Duration,
}

pub fn round_trip(canvas: &Canvas, cfg: &CodecConfig) -> Result<RoundTripResult> {
    cfg.validate()?;
    match cfg.backend {
        Backend::Identity => {
            let t = Instant::now();
            let decoded = canvas.rounded();
            let (c, h, w) = canvas.dims();
            Ok(RoundTripResult {
                decoded,
                bits: 8 * (c * h * w) as u64,
                encode_time: t.elapsed(),
                decode_time: Duration::ZERO,
            })
        }
        Backend::Jpeg => jpeg_round_trip(canvas, cfg.quality as u8),
        Backend::ExternalVideo => {
            let seq = round_trip_sequence(std::slice::from_ref(canvas), cfg)?;
            Ok(RoundTripResult {
                decoded: seq.decoded.into_iter().next().expect("one frame"),
                bits: seq.bits,
                encode_time: seq.encode_time,
                decode_time: seq.decode_time,
            })
        }
    }
}

fn jpeg_round_trip(canvas: &Canvas, quality: u8) -> Result<RoundTripResult> {
    let (c, h, w) = canvas.dims();
    let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let t = Instant::now();
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality).encode(&canvas.to_interleaved(), w as u32, h as u32, color)?;
    let encode_time = t.elapsed();
    let t = Instant::now();
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?;
    let pixels = if c == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    let got = (c, img.height() as usize, img.width() as usize);
    if got != (c, h, w) {
        return Err(CodecError::DimensionMismatch {
            expected: (c, h, w),
            got,
        });
    }
    let decoded = Canvas::from_interleaved(c, h, w, &pixels)?;
    Ok(RoundTripResult {
        decoded,
        bits: 8 * bytes.len() as u64,
        encode_time,
        decode_time: t.elapsed(),
    })
}

/// Encode frames as one video stream with the external tool and decode it back.
pub fn round_trip_sequence(frames: &[Canvas], cfg: &CodecConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    if cfg.backend != Backend::ExternalVideo {
        return Err(CodecError::Config("sequence round trip needs the external video backend".into()));
    }
    let ext = cfg.external.as_ref().expect("validated");
    let first = frames
        .first()
        .ok_or_else(|| CodecError::Config("empty frame sequence".into()))?;
    let dims = first.dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
        return Err(CodecError::DimensionMismatch {
            expected: dims,
            got: f.dims(),
        });
    }
    let (_, h, w) = dims;
    let (ph, pw) = match cfg.chroma {
        ChromaFormat::Yuv444 => (h, w),
        ChromaFormat::Yuv420 => (h.next_multiple_of(2), w.next_multiple_of(2)),
    };
    let header = StreamHeader {
        width: pw,
        height: ph,
        fps: (30, 1),
        chroma: cfg.chroma.y4m(),
    };
    let yuv: Vec<YuvFrame> = frames.iter().map(|f| canvas_to_yuv(f, cfg.chroma, ph, pw)).collect();
    let stream = y4m::write_stream(&header, &yuv);

    let dir = match &cfg.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            tempfile::Builder::new().prefix("codec").tempdir_in(d)?
        }
        None => tempfile::Builder::new().prefix("codec").tempdir()?,
    };
    let encoded = dir.path().join(format!("stream.{}", ext.extension));
    let subst = |arg: &str| {
        arg.replace("{input}", &encoded.to_string_lossy())
            .replace("{output}", &encoded.to_string_lossy())
            .replace("{qp}", &cfg.quality.to_string())
            .replace("{width}", &pw.to_string())
            .replace("{height}", &ph.to_string())
            .replace("{pix_fmt}", cfg.chroma.pix_fmt())
    };

    let t = Instant::now();
    run_tool(&ext.encode, &subst, Some(stream), dir.path())?;
    let encode_time = t.elapsed();
    let bits = 8 * std::fs::metadata(&encoded)
        .map_err(|e| CodecError::Stream(format!("encoder produced no output file: {e}")))?
        .len();

    let t = Instant::now();
    let out = run_tool(&ext.decode, &subst, None, dir.path())?;
    let decode_time = t.elapsed();
    let (got_header, got_frames) = y4m::read_stream(&out)?;
    if got_frames.len() != frames.len() {
        return Err(CodecError::Stream(format!(
            "decoder returned {} frames for {}",
            got_frames.len(),
            frames.len()
        )));
    }
    if (got_header.height, got_header.width) != (ph, pw) {
        return Err(CodecError::DimensionMismatch {
            expected: (dims.0, ph, pw),
            got: (dims.0, got_header.height, got_header.width),
        });
    }
    let decoded = got_frames
        .iter()
        .map(|f| yuv_to_canvas(f, got_header.chroma, dims, ph, pw))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceResult {
        decoded,
        bits,
        encode_time,
        decode_time,
    })
}

fn run_tool(template: &[String], subst: &dyn Fn(&str) -> String, stdin: Option<Vec<u8>>, cwd: &Path) -> Result<Vec<u8>> {
    let argv: Vec<String> = template.iter().map(|a| subst(a)).collect();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(cwd)
        .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CodecError::Unavailable(format!("{} not found", argv[0])),
            _ => CodecError::Io(e),
        })?;
    let writer = stdin.map(|bytes| {
        let mut pipe = child.stdin.take().expect("piped stdin");
        std::thread::spawn(move || pipe.write_all(&bytes))
    });
    let output = child.wait_with_output()?;
    let write_result = writer.map(|h| h.join().expect("stdin writer panicked"));
    if !output.status.success() {
        return Err(CodecError::ToolFailed {
            tool: argv[0].clone(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    if let Some(Err(e)) = write_result {
        return Err(CodecError::Stream(format!("{} closed its input early: {e}", argv[0])));
    }
    Ok(output.stdout)
}

/// Replicate-pad a `h x w` plane of levels to `ph x pw`.
fn pad_plane(src: &[u8], h: usize, w: usize, ph: usize, pw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        let row = &src[r.min(h - 1) * w..][..w];
        out.extend((0..pw).map(|c| row[c.min(w - 1)]));
    }
    out
}

fn crop_plane(src: &[u8], pw: usize, h: usize, w: usize) -> Vec<u8> {
    (0..h).flat_map(|r| src[r * pw..r * pw + w].iter().copied()).collect()
}

/// 2x2 box average of an even-sized plane.
fn downsample(src: &[f64], ph: usize, pw: usize) -> Vec<u8> {
    let (ch, cw) = (ph / 2, pw / 2);
    let mut out = Vec::with_capacity(ch * cw);
    for r in 0..ch {
        for c in 0..cw {
            let i = 2 * r * pw + 2 * c;
            let s = src[i] + src[i + 1] + src[i + pw] + src[i + pw + 1];
            out.push((s / 4.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn clamp_level(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Gray canvases go to luma with neutral chroma. RGB canvases map channels
/// straight onto Y/U/V planes for 4:4:4, and through a full-range BT.601
/// transform for 4:2:0 so that subsampling hits the chroma differences.
fn canvas_to_yuv(canvas: &Canvas, chroma: ChromaFormat, ph: usize, pw: usize) -> YuvFrame {
    let (c, h, w) = canvas.dims();
    let levels = canvas.to_levels();
    let planes: Vec<Vec<u8>> = (0..c)
        .map(|k| pad_plane(&levels[k * h * w..(k + 1) * h * w], h, w, ph, pw))
        .collect();
    let (cw, chh) = chroma.y4m().chroma_dims(pw, ph).expect("color format");
    match (c, chroma) {
        (1, _) => YuvFrame {
            y: planes[0].clone(),
            u: vec![128; cw * chh],
            v: vec![128; cw * chh],
        },
        (_, ChromaFormat::Yuv444) => YuvFrame {
            y: planes[0].clone(),
            u: planes[1].clone(),
            v: planes[2].clone(),
        },
        (_, ChromaFormat::Yuv420) => {
            let n = ph * pw;
            let (mut y, mut u, mut v) = (Vec::with_capacity(n), vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (r, g, b) = (planes[0][i] as f64, planes[1][i] as f64, planes[2][i] as f64);
                y.push(clamp_level(0.299 * r + 0.587 * g + 0.114 * b));
                u[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
                v[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
            }
            YuvFrame {
                y,
                u: downsample(&u, ph, pw),
                v: downsample(&v, ph, pw),
            }
        }
    }
}

fn yuv_to_canvas(
    frame: &YuvFrame,
    chroma: Chroma,
    dims: (usize, usize, usize),
    ph: usize,
    pw: usize,
) -> Result<Canvas> {
    let (c, h, w) = dims;
    if c == 1 {
        return Ok(Canvas::from_levels(1, h, w, &crop_plane(&frame.y, pw, h, w))?);
    }
    let planes: [Vec<u8>; 3] = match chroma {
        Chroma::C444 => [frame.y.clone(), frame.u.clone(), frame.v.clone()],
        Chroma::C420 => {
            let cw = pw.div_ceil(2);
            let n = ph * pw;
            let (mut r, mut g, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let ci = (i / pw / 2) * cw + (i % pw) / 2;
                let y = frame.y[i] as f64;
                let (u, v) = (frame.u[ci] as f64 - 128.0, frame.v[ci] as f64 - 128.0);
                r.push(clamp_level(y + 1.402 * v));
                g.push(clamp_level(y - 0.344136 * u - 0.714136 * v));
                b.push(clamp_level(y + 1.772 * u));
            }
            [r, g, b]
        }
        Chroma::Mono => return Err(CodecError::Stream("decoder returned luma-only frames for a color canvas".into())),
    };
    let levels: Vec<u8> = planes.iter().flat_map(|p| crop_plane(p, pw, h, w)).collect();
    Ok(Canvas::from_levels(3, h, w, &levels)?)
}

/// Whether the configured backend can run here. Never fails.
pub fn codec_availability(cfg: &CodecConfig) -> bool {
    match cfg.backend {
        Backend::Identity | Backend::Jpeg => true,
        Backend::ExternalVideo => {
            let Some(ext) = &cfg.external else { return false };
            let probe = if ext.probe.is_empty() { &ext.encode } else { &ext.probe };
            let Some((prog, rest)) = probe.split_first() else { return false };
            if ext.probe.is_empty() {
                return which(prog);
            }
            match Command::new(prog).args(rest).stdin(Stdio::null()).stderr(Stdio::null()).output() {
                Ok(out) if out.status.success() => ext
                    .probe_match
                    .as_ref()
                    .is_none_or(|m| String::from_utf8_lossy(&out.stdout).contains(m.as_str())),
                _ => false,
            }
        }
    }
}

fn which(prog: &str) -> bool {
    if prog.contains('/') {
        return Path::new(prog).is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(prog).is_file()))
        .unwrap_or(false)
}

/// A lossless stand-in for an external codec: the "bitstream" is the raw
/// y4m stream itself. Useful to exercise the subprocess plumbing.
pub fn passthrough_codec() -> ExternalCodec {
    ExternalCodec {
        name: "passthrough".into(),
        encode: args(&["sh", "-c", "cat > \"$1\"", "sh", "{output}"]),
        decode: args(&["cat", "{input}"]),
        probe: args(&["sh", "-c", "true"]),
        probe_match: None,
        extension: "y4m".into(),
        max_qp: 63,
    }
}
