//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::metrics::bd_rate;
use crate::trainer::TrainError;

use super::config::ExperimentConfig;
use super::experiment::{
    compare_sc_vs_ca, create_file, payload_csv, preview_scene, read_rd_curve, run_rd_sweep, run_train,
};
use super::HarnessError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNAVAILABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sclrf", version, about = "Codec-in-the-loop training of tri-plane radiance fields")]
pub struct Cli {
    /// Experiment config (TOML); built-in toy experiment when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Pretrain (cached) and finetune through the configured codec.
    Train,
    /// SCL finetuning at every sweep point; writes rd_points.csv.
    Sweep,
    /// Codec-agnostic baseline against SCL; writes compare.csv.
    Compare,
    /// BD-rate of curve B against anchor A, from rd_points.csv files.
    Bdrate { a: PathBuf, b: PathBuf },
    /// Entropy-bound payload of every tensor in a checkpoint.
    Payload {
        checkpoint: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Scene utilities.
    Scene {
        #[command(subcommand)]
        action: SceneCmd,
    },
    /// Print the effective config in canonical form.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum SceneCmd {
    /// Write ground-truth images as PNG.
    Preview,
}

pub fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Config(_) | HarnessError::Train(TrainError::Config(_)) => EXIT_CONFIG,
        HarnessError::Unavailable(_) => EXIT_UNAVAILABLE,
        _ => EXIT_FAILURE,
    }
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn all_skipped(n: usize, available: usize) -> Result<(), HarnessError> {
    if n > 0 && available == 0 {
        return Err(HarnessError::Unavailable("no codec point could run".into()));
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), HarnessError> {
    match &cli.command {
        Cmd::Bdrate { a, b } => {
            let (a, b) = (read_rd_curve(a)?, read_rd_curve(b)?);
            writeln!(out, "{:.2}%", bd_rate(&a, &b)?)?;
        }
        Cmd::Payload { checkpoint, csv } => match csv {
            Some(path) => payload_csv(checkpoint, create_file(path)?)?,
            None => payload_csv(checkpoint, &mut *out)?,
        },
        Cmd::Config => write!(out, "{}", experiment(cli)?.to_toml())?,
        Cmd::Scene {
            action: SceneCmd::Preview,
        } => {
            for p in preview_scene(&experiment(cli)?)? {
                writeln!(out, "{}", p.display())?;
            }
        }
        Cmd::Train => {
            let r = run_train(&experiment(cli)?)?;
            writeln!(
                out,
                "pretrained {:.3} dB @ {} bits, finetuned {:.3} dB @ {} bits",
                r.pretrained.psnr, r.pretrained.bits_total, r.finetuned.psnr, r.finetuned.bits_total
            )?;
        }
        Cmd::Sweep => {
            let rows = run_rd_sweep(&experiment(cli)?)?;
            for r in &rows {
                match (r.bits_total, r.psnr_decoded) {
                    (Some(b), Some(p)) => writeln!(out, "{} q{}: {b} bits, {p:.3} dB", r.codec, r.quality)?,
                    _ => writeln!(out, "{} q{}: unavailable", r.codec, r.quality)?,
                }
            }
            all_skipped(rows.len(), rows.iter().filter(|r| r.bits_total.is_some()).count())?;
        }
        Cmd::Compare => {
            let rows = compare_sc_vs_ca(&experiment(cli)?)?;
            for r in &rows {
                match r.delta_psnr() {
                    Some(d) => writeln!(out, "{} q{}: delta psnr {d:+.3} dB", r.codec, r.quality)?,
                    None => writeln!(out, "{} q{}: unavailable", r.codec, r.quality)?,
                }
            }
            all_skipped(rows.len(), rows.iter().filter(|r| r.scl.is_some()).count())?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "error[{code}]: {e}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("sclrf").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_args(&["train", "--bogus"]).0, EXIT_CONFIG);
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_CONFIG);
        assert_eq!(run_args(&[]).0, EXIT_CONFIG);
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("bdrate"));
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seed = 1\nnonsense = true\n").unwrap();
        let (code, _, err) = run_args(&["--config", path.to_str().unwrap(), "config"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.starts_with("error[2]"));
        let missing = dir.path().join("missing.toml");
        assert_eq!(run_args(&["--config", missing.to_str().unwrap(), "train"]).0, EXIT_CONFIG);
    }

    #[test]
    fn overrides_apply_to_printed_config() {
        let (code, out, _) = run_args(&["config", "--seed", "9", "--out", "elsewhere"]);
        assert_eq!(code, EXIT_OK);
        let cfg = ExperimentConfig::parse(&out).unwrap();
        assert_eq!((cfg.seed, cfg.out_dir), (9, PathBuf::from("elsewhere")));
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&HarnessError::Unavailable("x".into())), EXIT_UNAVAILABLE);
        assert_eq!(exit_code(&HarnessError::Checkpoint("x".into())), EXIT_FAILURE);
        assert_eq!(exit_code(&HarnessError::Train(TrainError::Config("x".into()))), EXIT_CONFIG);
    }
}
