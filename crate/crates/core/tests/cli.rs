use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sclrf::codec::{codec_availability, CodecConfig, ExternalCodec};
use sclrf::field::{FieldDims, RadianceField};
use sclrf::harness::checkpoint::save_trainer;
use sclrf::harness::config::ExperimentConfig;
use sclrf::harness::scene::SceneSpec;
use sclrf::metrics::payload_header_bits;
use sclrf::trainer::Trainer;

fn sclrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sclrf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut scene = SceneSpec::toy();
    scene.image_size = 12;
    scene.gt_samples = 48;
    scene.ring.train_views = 4;
    let mut cfg = ExperimentConfig {
        seed: 3,
        out_dir: out.to_path_buf(),
        scene,
        field: FieldDims {
            channels: 3,
            plane_height: 8,
            plane_width: 8,
            grid: [8, 8, 8],
            hidden: 8,
        },
        ..Default::default()
    };
    cfg.train.pretrain_steps = 12;
    cfg.train.finetune_steps = 6;
    cfg.train.rays_per_batch = 32;
    cfg.train.samples_per_ray = 8;
    cfg.train.eval_samples = 8;
    cfg.train.cache.interval = 4;
    cfg.train.cache.drift_threshold = f64::INFINITY;
    cfg.sweep = vec![CodecConfig::identity(), CodecConfig::jpeg(20), CodecConfig::external(ExternalCodec::vp9(), 40, Default::default())];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn bdrate_of_a_curve_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    std::fs::write(
        &a,
        "scene,codec,quality,bits_total,psnr_decoded\n\
         s,jpeg,20,1000,30.0\ns,jpeg,35,1500,31.5\ns,jpeg,50,2100,32.6\ns,jpeg,65,3000,33.9\ns,vp9,40,,\n",
    )
    .unwrap();
    let out = sclrf(&["bdrate", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.00%");
}

#[test]
fn payload_header_column_follows_tensor_rank() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let field = RadianceField::init(&FieldDims::default(), &mut rng);
    let ranks: Vec<(String, usize)> = field.named_tensors().iter().map(|(n, t)| (n.to_string(), t.shape().len())).collect();
    let ckpt = dir.path().join("fresh.ckpt");
    save_trainer(&ckpt, &Trainer::new(field)).unwrap();
    let out = sclrf(&["payload", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(&out.stdout[..]);
    let headers = rdr.headers().unwrap().clone();
    let col = |n: &str| headers.iter().position(|h| h == n).unwrap();
    let (name, hdr) = (col("tensor"), col("header_bits"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), ranks.len());
    for (row, (tensor, d)) in rows.iter().zip(&ranks) {
        assert_eq!(&row[name], tensor);
        assert_eq!(row[hdr].parse::<u64>().unwrap(), 2 * 32 + 8 + 32 * *d as u64);
        assert_eq!(row[hdr].parse::<u64>().unwrap(), payload_header_bits(*d));
    }
}

#[test]
fn unknown_flag_exits_two() {
    let out = sclrf(&["sweep", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sclrf(&["bdrate", "only-one.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.train.samples_per_ray = 0;
    let text = cfg.to_toml();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = sclrf(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[2]"));
}

#[test]
fn missing_training_codec_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    let mut ext = ExternalCodec::vp9();
    ext.name = "nonexistent".into();
    ext.encode[0] = "sclrf-no-such-encoder".into();
    ext.probe = vec!["sclrf-no-such-encoder".into()];
    cfg.train.pipeline.codec = CodecConfig::external(ext, 30, Default::default());
    let path = write_config(dir.path(), &cfg);
    let out = sclrf(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_writes_schema_and_reuses_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("run"));
    let path = write_config(dir.path(), &cfg);
    let out = sclrf(&["--config", path.to_str().unwrap(), "sweep"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv_path = cfg.out_dir.join("rd_points.csv");
    let first = read(&csv_path);
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "scene,codec,quality,bits_total,psnr_decoded");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("blobs,identity,0,"));
    assert!(lines[2].starts_with("blobs,jpeg,20,"));
    let vp9 = lines[3];
    if codec_availability(&cfg.sweep[2]) {
        assert!(!vp9.ends_with(",,"), "{vp9}");
    } else {
        assert_eq!(vp9, "blobs,vp9,40,,");
    }
    // identity: 8 bits per canvas sample, no side info under absmax
    let identity_bits: u64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    let planes = 3 * 3 * 8 * 8;
    let grid = 8 * 8 * 8;
    assert!(identity_bits >= 8 * (planes + grid) as u64);

    let ckpts: Vec<_> = std::fs::read_dir(cfg.out_dir.join("pretrain")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    let manifest: serde_json::Value = serde_json::from_str(&read(&cfg.out_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap(), cfg.hash());
    assert!(manifest["codecs"].as_array().unwrap().iter().any(|c| c["label"] == "vp9"));

    let again = sclrf(&["--config", path.to_str().unwrap(), "sweep"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(read(&csv_path), first);
}

#[test]
fn train_and_compare_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("run"));
    cfg.sweep.truncate(2);
    let path = write_config(dir.path(), &cfg);
    let out = sclrf(&["--config", path.to_str().unwrap(), "--seed", "4", "train"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let diag = read(&cfg.out_dir.join("diagnostics.csv"));
    assert_eq!(diag.lines().next().unwrap(), "step,mse,grad_l2,grad_over_param,grad_p99,refreshed,bits");
    assert_eq!(diag.lines().count(), 1 + 6);
    let refreshes = read(&cfg.out_dir.join("refreshes.csv"));
    let steps: Vec<&str> = refreshes.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "4"]);
    assert!(cfg.out_dir.join("final.ckpt").exists());
    let manifest: serde_json::Value = serde_json::from_str(&read(&cfg.out_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 4);

    let out = sclrf(&["--config", path.to_str().unwrap(), "compare"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp = read(&cfg.out_dir.join("compare.csv"));
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines[0], "codec,quality,ca_bits,ca_psnr,scl_bits,scl_psnr,delta_psnr");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let d: f64 = f[6].parse().unwrap();
        let (ca, scl): (f64, f64) = (f[3].parse().unwrap(), f[5].parse().unwrap());
        assert!((scl - ca - d).abs() < 1e-9);
    }
    assert!(cfg.out_dir.join("diagnostics_scl_jpeg_q20.csv").exists());
    assert!(cfg.out_dir.join("diagnostics_ca.csv").exists());
}

#[test]
fn scene_preview_writes_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let out = sclrf(&["--config", path.to_str().unwrap(), "scene", "preview"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8_lossy(&out.stdout).lines().count();
    assert_eq!(listed, cfg.scene.ring.train_views + cfg.scene.ring.test_views);
    let img = image::open(dir.path().join("scene/train_00.png")).unwrap();
    assert_eq!((img.width(), img.height()), (12, 12));
}
