//! Argument parsing and dispatch for the `dragscene` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dragscene_core::scene::{SceneKind, SceneOptions, DEFAULT_VIEWS};

use crate::app;
use crate::config::RunConfig;
use crate::exec::RayonExecutor;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dragscene", version, about = "Multi-view consistent drag editing on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view scene with ground-truth geometry.
    Synth(SynthArgs),
    /// Drag-edit the reference view of a scene directory.
    EditRef(EditRefArgs),
    /// Align the edited reference with the auxiliary views.
    Align(DirArgs),
    /// Build the attributed cloud and edit every view.
    Propagate(DirArgs),
    /// Full pipeline plus the independent-drag baseline and a report.
    Run(RunArgs),
    /// Score an output directory and write report.json.
    Metrics(DirArgs),
    /// Propagate at several inversion strengths and write sweep.csv.
    Sweep(SweepArgs),
    /// Print tensor headers and manifest summaries.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// plane-billboards, textured-blobs or two-box.
    #[arg(long, default_value = "two-box")]
    pub kind: String,
    #[arg(long, default_value_t = DEFAULT_VIEWS)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long, default_value = "scene")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditRefArgs {
    /// Scene directory written by `synth`.
    #[arg(long = "in")]
    pub dir: PathBuf,
    /// Run config; defaults to the directory's config.json, then built-ins.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Edit file (edit.json); defaults to the config's edit source.
    #[arg(long)]
    pub edit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DirArgs {
    #[arg(long = "in")]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated inversion strengths in (0, 1).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub etas: Vec<f64>,
    /// Directory for sweep.csv; defaults to the config's output_dir, then `.`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A .dstn tensor, a JSON file or a directory.
    pub path: PathBuf,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn output_dir(cli: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set output_dir in the config".into()))
}

/// Executes one parsed command, writing human output to `out`.
pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::Synth(a) => {
            let kind = SceneKind::parse(&a.kind).ok_or_else(|| Error::Usage(format!("unknown scene kind `{}`", a.kind)))?;
            let mut opts = SceneOptions::default();
            opts.width = a.width.unwrap_or(opts.width);
            opts.height = a.height.unwrap_or(opts.height);
            let scene = app::synth(kind, a.views, a.seed, &opts, &a.out)?;
            say(out, format!("wrote {} ({} views) to {}", scene.scene_id, scene.views.len(), a.out.display()));
        }
        Command::EditRef(a) => {
            app::edit_ref(&a.dir, a.config.as_deref(), a.edit.as_deref())?;
            say(out, format!("dragged reference view in {}", a.dir.display()));
        }
        Command::Align(a) => {
            app::align(&a.dir)?;
            say(out, format!("aligned views in {}", a.dir.display()));
        }
        Command::Propagate(a) => {
            app::propagate(&a.dir, &RayonExecutor::from_env()?)?;
            say(out, format!("propagated edit in {}", a.dir.display()));
        }
        Command::Run(a) => {
            let cfg = load_config(a.config.as_ref())?;
            let dir = output_dir(a.out, &cfg)?;
            let start = std::time::Instant::now();
            let report = app::run(&cfg, &dir, &RayonExecutor::from_env()?)?;
            say(out, format!("run finished in {:.2} s", start.elapsed().as_secs_f64()));
            say(out, summary("dragscene", &report.dragscene));
            if let Some(b) = &report.baseline {
                say(out, summary("baseline", b));
            }
        }
        Command::Metrics(a) => {
            let report = app::metrics(&a.dir)?;
            say(out, summary("dragscene", &report.dragscene));
            if let Some(b) = &report.baseline {
                say(out, summary("baseline", b));
            }
        }
        Command::Sweep(a) => {
            let cfg = load_config(a.config.as_ref())?;
            // a sweep only writes one CSV, so the working directory is a fine default
            let dir = output_dir(a.out, &cfg).unwrap_or_else(|_| PathBuf::from("."));
            let rows = app::sweep(&cfg, &a.etas, &dir, &RayonExecutor::from_env()?)?;
            for r in rows {
                match r.result {
                    Ok(rep) => say(
                        out,
                        format!(
                            "eta {:.3} t_r {:>3}: variance {:.3e}, min psnr {:.2} dB, {:.3} s",
                            r.eta,
                            r.t_r.unwrap_or(0),
                            rep.masked_latent_variance,
                            rep.min_preservation_psnr,
                            r.seconds
                        ),
                    ),
                    Err(e) => say(out, format!("eta {:.3}: failed: {e}", r.eta)),
                }
            }
        }
        Command::Inspect(a) => {
            let _ = write!(out, "{}", app::inspect(&a.path)?);
        }
    }
    Ok(())
}

fn summary(label: &str, r: &app::ReportJson) -> String {
    format!(
        "{label}: masked latent variance {:.4e} over {} points, agreement L1 {:.4}, preservation PSNR min {:.2} / mean {:.2} dB",
        r.masked_latent_variance,
        r.variance_points,
        r.masked_agreement_l1,
        r.min_preservation_psnr,
        r.mean_preservation_psnr
    )
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success
/// (including `--help`), 1 for usage and IO errors, 2 for numerical failures.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let _ = writeln!(err, "  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}
