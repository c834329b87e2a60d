//! Runs that write artifacts: training, RD sweeps and SCL-versus-CA
//! comparisons, plus the CSV and manifest formats they emit.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache::{CachePolicy, CodecPipeline, PipelineConfig, RefreshReason};
use crate::codec::{codec_availability, Backend, CodecConfig};
use crate::field::RadianceField;
use crate::metrics::{RDCurve, RDPoint};
use crate::surrogate::SurrogateConfig;
use crate::trainer::{
    self, evaluate_decoded, finetune_scl, finetune_vanilla, pretrain_vanilla, Dataset, DiagnosticsRecord,
    Evaluation, PhaseLog, TrainConfig, Trainer,
};

use super::checkpoint::{load_trainer, save_trainer};
use super::config::{hex_digest, ExperimentConfig};
use super::scene::generate_scene;
use super::HarnessError;

pub const GRAY_CONVENTION: &str = "mono canvases: JPEG as 8-bit luma; video as the Y plane with U = V = 128";

#[derive(Debug, Serialize)]
struct CodecEntry {
    label: String,
    quality: i32,
    version: String,
    encode: Vec<String>,
    decode: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    crate_version: &'static str,
    config_hash: String,
    seed: u64,
    gray_convention: &'static str,
    codecs: Vec<CodecEntry>,
    config: String,
}

/// First line the codec's probe prints, or a fixed description for
/// in-process backends.
pub fn codec_version(cfg: &CodecConfig) -> String {
    match (cfg.backend, &cfg.external) {
        (Backend::Identity, _) => "identity: 8-bit rounding, raw payload".into(),
        (Backend::Jpeg, _) => "jpeg: baseline encoder of the image crate".into(),
        (Backend::ExternalVideo, None) => "unconfigured".into(),
        (Backend::ExternalVideo, Some(ext)) => {
            let Some((prog, args)) = ext.probe.split_first() else {
                return "no probe".into();
            };
            match Command::new(prog).args(args).output() {
                Ok(out) if out.status.success() => String::from_utf8_lossy(&out.stdout)
                    .lines()
                    .next()
                    .unwrap_or("")
                    .trim()
                    .to_string(),
                _ => "unavailable".into(),
            }
        }
    }
}

pub fn write_manifest(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut codecs: Vec<&CodecConfig> = vec![&cfg.train.pipeline.codec];
    codecs.extend(cfg.train.pipeline.density_codec.as_ref());
    codecs.extend(&cfg.sweep);
    let manifest = Manifest {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        gray_convention: GRAY_CONVENTION,
        codecs: codecs
            .into_iter()
            .map(|c| CodecEntry {
                label: c.label(),
                quality: c.quality,
                version: codec_version(c),
                encode: c.external.as_ref().map(|e| e.encode.clone()).unwrap_or_default(),
                decode: c.external.as_ref().map(|e| e.decode.clone()).unwrap_or_default(),
            })
            .collect(),
        config: cfg.to_toml(),
    };
    let path = cfg.out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Io(e.into()))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Hash of everything that determines the pretrained field.
pub fn pretrain_key(cfg: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        scene: &'a super::scene::SceneSpec,
        field: &'a crate::field::FieldDims,
        train: TrainConfig,
        seed: u64,
    }
    let d = TrainConfig::default();
    let train = TrainConfig {
        finetune_steps: d.finetune_steps,
        eval_samples: d.eval_samples,
        diag_sample: d.diag_sample,
        cache: CachePolicy::default(),
        surrogate: SurrogateConfig::default(),
        pipeline: d.pipeline,
        ..cfg.train.clone()
    };
    let key = Key {
        scene: &cfg.scene,
        field: &cfg.field,
        train,
        seed: cfg.seed,
    };
    let bytes = serde_json::to_vec(&key).expect("key serializes");
    hex_digest(&bytes)
}

pub fn pretrain_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("pretrain").join(format!("{}.ckpt", pretrain_key(cfg)))
}

/// Stage one, reused from disk when an identical run already exists.
pub fn pretrained(cfg: &ExperimentConfig, data: &Dataset) -> Result<Trainer, HarnessError> {
    let path = pretrain_path(cfg);
    if path.exists() {
        log::info!("reusing pretrained field {}", path.display());
        return load_trainer(&path);
    }
    let train = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut trainer = Trainer::new(RadianceField::init(&cfg.field, &mut rng));
    let log = pretrain_vanilla(&mut trainer, data, &train)?;
    log::info!(
        "pretrained {} steps, final loss {:.6}",
        train.pretrain_steps,
        log.losses.last().copied().unwrap_or(f64::NAN)
    );
    save_trainer(&path, &trainer)?;
    Ok(trainer)
}

pub fn write_diagnostics(path: &Path, records: &[DiagnosticsRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "mse", "grad_l2", "grad_over_param", "grad_p99", "refreshed", "bits"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.mse.to_string(),
            r.grad_l2.to_string(),
            r.grad_over_param.to_string(),
            r.grad_p99.to_string(),
            r.refreshed.to_string(),
            r.bits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_refreshes(path: &Path, refreshes: &[(u64, RefreshReason, u64)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "reason", "drift", "bits"])?;
    for (step, reason, bits) in refreshes {
        let drift = match reason {
            RefreshReason::Drift(d) => d.to_string(),
            _ => String::new(),
        };
        w.write_record([step.to_string(), reason.label().to_string(), drift, bits.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_log(dir: &Path, tag: &str, log: &PhaseLog) -> Result<(), HarnessError> {
    write_diagnostics(&dir.join(format!("diagnostics{tag}.csv")), &log.diagnostics)?;
    write_refreshes(&dir.join(format!("refreshes{tag}.csv")), &log.refreshes)
}

fn point_tag(codec: &CodecConfig) -> String {
    format!("_{}_q{}", codec.label(), codec.quality)
}

fn with_codec(train: &TrainConfig, codec: &CodecConfig) -> TrainConfig {
    TrainConfig {
        pipeline: PipelineConfig {
            codec: codec.clone(),
            ..train.pipeline.clone()
        },
        ..train.clone()
    }
}

fn require_available(pipeline: &PipelineConfig) -> Result<(), HarnessError> {
    for c in [&pipeline.codec, pipeline.density_codec()] {
        if !codec_availability(c) {
            return Err(HarnessError::Unavailable(format!("{} encoder not found", c.label())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub pretrained: Evaluation,
    pub finetuned: Evaluation,
    pub log: PhaseLog,
}

/// Pretrain (cached), finetune through the configured codec, save the
/// final checkpoint and logs.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport, HarnessError> {
    let train = cfg.train_config();
    require_available(&train.pipeline)?;
    write_manifest(cfg, "train")?;
    let data = generate_scene(&cfg.scene)?;
    let mut trainer = pretrained(cfg, &data)?;
    let pipeline = CodecPipeline::new(train.pipeline.clone()).map_err(HarnessError::from)?;
    let before = evaluate_decoded(&trainer.field, &data.test, &pipeline, train.eval_samples)?;
    let out = finetune_scl(&mut trainer, &data, &train)?;
    write_log(&cfg.out_dir, "", &out.log)?;
    save_trainer(&cfg.out_dir.join("final.ckpt"), &trainer)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("summary.csv"))?;
    w.write_record(["stage", "psnr_decoded", "canvas_bits", "side_bits", "bits_total"])?;
    for (stage, e) in [("pretrained", &before), ("finetuned", &out.eval)] {
        w.write_record([
            stage.to_string(),
            e.psnr.to_string(),
            e.canvas_bits.to_string(),
            e.side_bits.to_string(),
            e.bits_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(TrainReport {
        pretrained: before,
        finetuned: out.eval,
        log: out.log,
    })
}

/// One RD sweep row; rate and quality are empty when the codec was
/// unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scene: String,
    pub codec: String,
    pub quality: i32,
    pub bits_total: Option<u64>,
    pub psnr_decoded: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rd_points(path: &Path, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene", "codec", "quality", "bits_total", "psnr_decoded"])?;
    for r in rows {
        w.write_record([
            r.scene.clone(),
            r.codec.clone(),
            r.quality.to_string(),
            opt(r.bits_total),
            opt(r.psnr_decoded),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Points of an rd_points.csv that carry both rate and quality.
pub fn read_rd_points(path: &Path) -> Result<Vec<RDPoint>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Config(format!("{}: missing column {name}", path.display())))
    };
    let (bits, psnr) = (col("bits_total")?, col("psnr_decoded")?);
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (b, q) = (rec.get(bits).unwrap_or(""), rec.get(psnr).unwrap_or(""));
        if b.is_empty() || q.is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("{}: bad number {s:?}", path.display())))
        };
        points.push(RDPoint {
            bitrate: parse(b)?,
            quality: parse(q)?,
        });
    }
    Ok(points)
}

pub fn read_rd_curve(path: &Path) -> Result<RDCurve, HarnessError> {
    Ok(RDCurve::new(read_rd_points(path)?)?)
}

/// Shared pretrain, then SCL finetuning at every codec point.
pub fn run_rd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    if cfg.sweep.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one codec point".into()));
    }
    write_manifest(cfg, "sweep")?;
    let train = cfg.train_config();
    let data = generate_scene(&cfg.scene)?;
    let base = pretrained(cfg, &data)?;
    let mut rows = Vec::new();
    for codec in &cfg.sweep {
        let point_cfg = with_codec(&train, codec);
        let mut row = SweepRow {
            scene: cfg.scene.name.clone(),
            codec: codec.label(),
            quality: codec.quality,
            bits_total: None,
            psnr_decoded: None,
        };
        if let Err(e) = require_available(&point_cfg.pipeline) {
            log::warn!("skipping {} q{}: {e}", row.codec, row.quality);
            rows.push(row);
            continue;
        }
        let mut trainer = base.clone();
        let out = finetune_scl(&mut trainer, &data, &point_cfg)?;
        row.bits_total = Some(out.eval.bits_total);
        row.psnr_decoded = Some(out.eval.psnr);
        rows.push(row);
    }
    write_rd_points(&cfg.out_dir.join("rd_points.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub codec: String,
    pub quality: i32,
    pub ca: Option<Evaluation>,
    pub scl: Option<Evaluation>,
}

impl CompareRow {
    pub fn delta_psnr(&self) -> Option<f64> {
        Some(self.scl.as_ref()?.psnr - self.ca.as_ref()?.psnr)
    }
}

pub fn write_compare(path: &Path, rows: &[CompareRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["codec", "quality", "ca_bits", "ca_psnr", "scl_bits", "scl_psnr", "delta_psnr"])?;
    for r in rows {
        w.write_record([
            r.codec.clone(),
            r.quality.to_string(),
            opt(r.ca.as_ref().map(|e| e.bits_total)),
            opt(r.ca.as_ref().map(|e| e.psnr)),
            opt(r.scl.as_ref().map(|e| e.bits_total)),
            opt(r.scl.as_ref().map(|e| e.psnr)),
            opt(r.delta_psnr()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Codec-agnostic baseline against SCL at every codec point. Both start
/// from the same pretrained field and train for the same number of
/// finetune steps; the baseline trains on raw tensors and is compressed
/// once at the end.
pub fn compare_sc_vs_ca(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>, HarnessError> {
    write_manifest(cfg, "compare")?;
    let train = cfg.train_config();
    let data = generate_scene(&cfg.scene)?;
    let base = pretrained(cfg, &data)?;
    let mut ca = base.clone();
    let ca_log = finetune_vanilla(&mut ca, &data, &train)?;
    write_log(&cfg.out_dir, "_ca", &ca_log)?;
    let mut rows = Vec::new();
    for codec in cfg.codec_points() {
        let point_cfg = with_codec(&train, &codec);
        let tag = point_tag(&codec);
        let mut row = CompareRow {
            codec: codec.label(),
            quality: codec.quality,
            ca: None,
            scl: None,
        };
        if let Err(e) = require_available(&point_cfg.pipeline) {
            log::warn!("skipping {} q{}: {e}", row.codec, row.quality);
            rows.push(row);
            continue;
        }
        let pipeline = CodecPipeline::new(point_cfg.pipeline.clone()).map_err(HarnessError::from)?;
        row.ca = Some(trainer::evaluate_decoded(&ca.field, &data.test, &pipeline, train.eval_samples)?);
        let mut scl = base.clone();
        let out = finetune_scl(&mut scl, &data, &point_cfg)?;
        write_log(&cfg.out_dir, &format!("_scl{tag}"), &out.log)?;
        row.scl = Some(out.eval);
        log::info!(
            "{} q{}: ca {:.3} dB, scl {:.3} dB",
            row.codec,
            row.quality,
            row.ca.as_ref().map_or(f64::NAN, |e| e.psnr),
            row.scl.as_ref().map_or(f64::NAN, |e| e.psnr)
        );
        rows.push(row);
    }
    write_compare(&cfg.out_dir.join("compare.csv"), &rows)?;
    Ok(rows)
}

/// Ground-truth training and held-out images as PNG files.
pub fn preview_scene(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let data = generate_scene(&cfg.scene)?;
    let dir = cfg.out_dir.join("scene");
    std::fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for (split, views) in [("train", &data.train), ("test", &data.test)] {
        for (i, v) in views.iter().enumerate() {
            let (h, w) = (v.image.shape()[1], v.image.shape()[2]);
            let px = v.image.data();
            let mut rgb = Vec::with_capacity(3 * h * w);
            for p in 0..h * w {
                for c in 0..3 {
                    rgb.push(crate::quantpack::to_level(px[c * h * w + p].clamp(0.0, 1.0)));
                }
            }
            let path = dir.join(format!("{split}_{i:02}.png"));
            image::save_buffer(&path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
                .map_err(|e| HarnessError::Io(std::io::Error::other(e)))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Payload report for every tensor of a checkpoint, as CSV.
pub fn payload_csv(path: &Path, mut out: impl Write) -> Result<(), HarnessError> {
    let trainer = load_trainer(path)?;
    let mut report = crate::metrics::PayloadReport::default();
    for (name, t) in trainer.field.named_tensors() {
        report.push(crate::metrics::payload_estimate(
            name,
            t.data(),
            t.shape(),
            crate::metrics::PAYLOAD_Q_BITS,
        )?);
    }
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Opens `path` for writing, creating parent directories.
pub fn create_file(path: &Path) -> Result<File, HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}
