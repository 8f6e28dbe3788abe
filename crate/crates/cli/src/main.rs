use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panodiff::pano::MaskSpec;
use panodiff::pipeline::{self, OutpaintArgs, RunConfig, Stage, Workdir};
use panodiff::synth::Split;
use panodiff::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "panodiff", version, about = "RGB-D latent diffusion for 360° panorama outpainting")]
struct Cli {
    /// JSON run configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for all artifacts.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,

    /// Global seed override.
    #[arg(long, global = true, env = "PANODIFF_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic room dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train one stage; the diffusion model needs both autoencoders.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
        /// Overrides the number of diffusion training steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    Outpaint(OutpaintCmd),
    /// Compare result images against reference images and print a JSON report.
    Evaluate {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Half-visible seam requests with alignment on and off.
    AblateRotation {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct OutpaintCmd {
    /// Input RGB panorama; mutually exclusive with `--split`.
    #[arg(long, conflicts_with = "split", required_unless_present = "split")]
    input: Option<PathBuf>,
    /// Outpaint every item of a dataset split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Binary mask PNG (white = visible); takes precedence over `--mask-spec`.
    #[arg(long)]
    mask_file: Option<PathBuf>,
    /// Mask spec as inline JSON, e.g. `{"kind":"layout","ceiling_frac":0.2,"floor_frac":0.2}`.
    #[arg(long)]
    mask_spec: Option<String>,
    /// Optional depth PNG (16-bit millimeters) used as a fully visible hint.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    align: Option<Toggle>,
    #[arg(long, value_enum)]
    composite: Option<Toggle>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    VaeRgb,
    VaeDepth,
    Ldm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

fn print_json<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let wd = Workdir::new(&cli.workdir);
    match cli.command {
        Command::GenData { n, height } => {
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(h) = height {
                cfg.data.height = h;
            }
            cfg.validate()?;
            let manifest = pipeline::gen_data(&cfg, &wd)?;
            for split in Split::ALL {
                println!("{}: {}", split.as_str(), manifest.ids(split).len());
            }
        }
        Command::Train { stage, steps } => {
            if let Some(s) = steps {
                cfg.ldm.train_steps = s;
            }
            let stage = match stage {
                StageArg::VaeRgb => Stage::VaeRgb,
                StageArg::VaeDepth => Stage::VaeDepth,
                StageArg::Ldm => Stage::Ldm,
            };
            print_json(&pipeline::train(&cfg, &wd, stage)?, None)?;
        }
        Command::Outpaint(cmd) => {
            if let Some(spec) = &cmd.mask_spec {
                let spec: MaskSpec = serde_json::from_str(spec).map_err(|e| Error::InvalidArgument(format!("--mask-spec: {e}")))?;
                spec.validate()?;
                cfg.outpaint.mask = spec;
            }
            if let Some(n) = cmd.samples {
                cfg.outpaint.n_samples = n;
            }
            if let Some(a) = cmd.align {
                cfg.outpaint.align = a.on();
            }
            if let Some(c) = cmd.composite {
                cfg.outpaint.composite = c.on();
            }
            let written = match (cmd.input, cmd.split) {
                (Some(input), _) => pipeline::outpaint_file(&cfg, &wd, &OutpaintArgs { input, mask_file: cmd.mask_file, depth: cmd.depth, out_dir: cmd.out })?,
                (None, Some(split)) => {
                    let split = match split {
                        SplitArg::Train => Split::Train,
                        SplitArg::Val => Split::Val,
                        SplitArg::Test => Split::Test,
                    };
                    pipeline::outpaint_split(&cfg, &wd, split, cmd.out.as_deref())?
                }
                (None, None) => return Err(Error::InvalidArgument("outpaint needs --input or --split".into())),
            };
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { results, reference, out } => {
            print_json(&pipeline::evaluate(&cfg, &results, &reference)?, out.as_ref())?;
        }
        Command::AblateRotation { n, out } => {
            let n = n.unwrap_or(cfg.ablation.n_requests);
            print_json(&pipeline::ablate_rotation(&cfg, &wd, n)?, out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
