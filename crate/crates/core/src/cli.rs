//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{parse_config, scan_dataset, Preset, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricOptions};
use crate::model::{count_macs, count_params, Gapnet, ModelConfig, SITES};
use crate::pipeline::{decompose_dir, infer, train, InferOptions, TrainOptions};

/// Reference efficiency figures of the published model at 384×384.
pub const REFERENCE_PARAMS: f64 = 1.99e6;
pub const REFERENCE_MACS: f64 = 1.26e9;

#[derive(Debug, Parser)]
#[command(name = "gapnet", version, about = "Granularity-aware salient object detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Toy,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the preset of the config file.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Disables the pooled-attention branch of every GPC block.
    #[arg(long)]
    pub no_gpc_attention: bool,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(RunConfig, ModelConfig)> {
        let mut run = match &self.config {
            Some(p) => parse_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            run.preset = match p {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Toy => Preset::Toy,
            };
        }
        let mut model = run.model_config()?;
        if self.no_gpc_attention {
            model.gpc.attention = false;
        }
        Ok((run, model))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on an `images/`+`masks/` tree (or `clips/` in video mode).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Start from the matching tensors of this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Disables random horizontal flips.
        #[arg(long)]
        no_flip: bool,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write saliency maps for a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Square inference size; defaults to `infer_size` of the config.
        #[arg(long)]
        size: Option<usize>,
        /// Also write the p1 and p2 maps.
        #[arg(long)]
        all_outputs: bool,
        /// Also write the region split of the binarized prediction.
        #[arg(long)]
        regions: bool,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Writes `key=value` lines here as well.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        wf_beta2: f64,
    },
    /// Write paletted boundary/center/others maps for a mask directory.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        threshold: u8,
    },
    /// Print parameter and MAC breakdowns.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 384)]
        size: usize,
    },
}

fn millions(n: f64) -> String {
    format!("{:.3}M", n / 1e6)
}

fn run_command(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e));
    match cmd {
        Command::Train {
            data,
            out: out_dir,
            model,
            init,
            no_flip,
            max_steps,
        } => {
            let (run, model) = model.resolve()?;
            let scan = scan_dataset(&data, model.mode)?;
            for warning in &scan.warnings {
                w(out, format!("warning: {warning}"))?;
            }
            let mut opts = TrainOptions::new(run)?;
            opts.model = model;
            opts.flip = !no_flip;
            opts.max_steps = max_steps;
            let manifest = train(&scan.records, opts, init.as_deref(), &out_dir)?;
            let last = manifest.losses.last().copied().unwrap_or(f64::NAN);
            w(out, format!("steps={} final_loss={last:.6}", manifest.losses.len()))?;
            w(out, format!("checkpoint={}", out_dir.join("model.ckpt").display()))
        }
        Command::Infer {
            checkpoint,
            input,
            out: out_dir,
            model,
            size,
            all_outputs,
            regions,
        } => {
            let (run, model) = model.resolve()?;
            let n = infer(
                &model,
                &checkpoint,
                &input,
                &out_dir,
                size.unwrap_or(run.infer_size),
                InferOptions { all_outputs, regions },
            )?;
            w(out, format!("wrote {n} maps to {}", out_dir.display()))
        }
        Command::Eval {
            pred,
            gt,
            report,
            wf_beta2,
        } => {
            let r = evaluate_dataset(&pred, &gt, MetricOptions { wf_beta2 })?;
            for (name, why) in &r.skipped {
                w(out, format!("skipped {name}: {why}"))?;
            }
            w(out, r.table())?;
            let kv = r.key_values();
            if let Some(p) = report {
                fs::write(&p, &kv).map_err(|e| Error::io(&p, e))?;
            }
            w(out, kv)
        }
        Command::Decompose { input, out: out_dir, threshold } => {
            let n = decompose_dir(&input, &out_dir, threshold)?;
            w(out, format!("wrote {n} region maps to {}", out_dir.display()))
        }
        Command::Profile { model, size } => {
            let (_, cfg) = model.resolve()?;
            let t0 = Instant::now();
            let (net, store) = Gapnet::build::<f32>(&cfg, 0)?;
            let params = count_params(&store);
            let macs = count_macs(&net, &store, (size, size))?;
            w(out, format!("input {size}x{size}"))?;
            w(out, "params:".into())?;
            for (k, v) in &params.components {
                w(out, format!("  {k:<12} {v:>10}"))?;
            }
            for s in SITES {
                w(out, format!("  {s:<20} {:>10}", params.sites.get(s).copied().unwrap_or(0)))?;
            }
            w(out, format!("  {:<12} {:>10}", "total", params.total))?;
            w(out, "macs:".into())?;
            for (k, v) in macs.by_component() {
                w(out, format!("  {k:<20} {v:>14}"))?;
            }
            w(out, format!("  {:<20} {:>14}", "total", macs.total()))?;
            let dp = (params.total as f64 / REFERENCE_PARAMS - 1.0) * 100.0;
            let dm = (macs.total() as f64 / REFERENCE_MACS - 1.0) * 100.0;
            w(
                out,
                format!(
                    "reference: params {} (measured {}, {dp:+.1}%), macs {:.2}G (measured {:.3}G, {dm:+.1}%)",
                    millions(REFERENCE_PARAMS),
                    millions(params.total as f64),
                    REFERENCE_MACS / 1e9,
                    macs.total() as f64 / 1e9
                ),
            )?;
            w(out, format!("total_params={}", params.total))?;
            w(out, format!("total_macs={}", macs.total()))?;
            w(out, format!("elapsed={:.2}s", t0.elapsed().as_secs_f64()))
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 for usage and input errors, 2 for
/// internal failures.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run_command(cli.command, out))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
        Err(_) => {
            let _ = writeln!(err, "error: internal failure");
            2
        }
    }
}
