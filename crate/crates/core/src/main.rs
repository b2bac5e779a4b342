use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvprompt_core::metrics::MetricReport;
use mvprompt_core::model::{ModelConfig, MultiViewModel};
use mvprompt_core::pipeline::{self, Mode, RunManifest};
use mvprompt_core::Result;

#[derive(Parser)]
#[command(name = "mvprompt", version, about = "Multi-image prompted multi-view diffusion and SDS 3D generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample four orthogonal views
    Mvgen(RunArgs),
    /// Optimize a radiance field with score distillation
    Gen3d(RunArgs),
    /// Score a directory of images
    Eval(RunArgs),
    /// Execute a manifest.json or a key = value run file
    #[command(alias = "rerun")]
    Run {
        manifest: PathBuf,
        /// Write to this directory instead of the recorded one
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write freshly initialized model weights to a checkpoint
    InitWeights {
        #[arg(long, default_value_t = 0)]
        weights_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Controller config, e.g. "pixel(f) + local(fb)"
    #[arg(long)]
    config: String,
    /// Front image (mvgen, gen3d) or prompt image (eval)
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to $MVPROMPT_OUT/<name>_<mode>_s<seed>
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "MVPROMPT_OUT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
    /// DDIM steps
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// SDS iterations
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Directory with user-supplied back/left/right views (back.png or b.png, ...)
    #[arg(long)]
    real_views: Option<PathBuf>,
    /// Images to score (eval)
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value = RunManifest::DEFAULT_TEXT)]
    text: String,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance_scale: f64,
    #[arg(long, default_value_t = 0)]
    weights_seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prefix for per-view files; defaults to the image file stem
    #[arg(long)]
    name: Option<String>,
    /// gen3d only: pull every view toward the front image instead of the denoiser
    #[arg(long)]
    mock_guidance: bool,
}

impl RunArgs {
    fn manifest(self, mode: Mode) -> Result<RunManifest> {
        let mut m = RunManifest::new(mode, &self.config, self.image, PathBuf::new(), self.seed)?;
        if let Some(name) = self.name {
            m.name = name;
        }
        m.out = self
            .out
            .unwrap_or_else(|| self.out_root.join(format!("{}_{mode}_s{}", m.name, m.seed)));
        m.steps = self.steps;
        m.iters = self.iters;
        m.real_views = self.real_views;
        m.images = self.images;
        m.text = self.text;
        m.image_size = self.image_size;
        m.guidance_scale = self.guidance_scale;
        m.weights_seed = self.weights_seed;
        m.checkpoint = self.checkpoint;
        m.mock_guidance = self.mock_guidance;
        m.validate()?;
        Ok(m)
    }
}

fn print_report(m: &RunManifest, report: &MetricReport) {
    print!("{}", report.to_table());
    println!("outputs in {}", m.out.display());
}

fn execute(cli: Cli) -> Result<()> {
    let m = match cli.command {
        Command::Mvgen(a) => a.manifest(Mode::Mvgen)?,
        Command::Gen3d(a) => a.manifest(Mode::Gen3d)?,
        Command::Eval(a) => a.manifest(Mode::Eval)?,
        Command::Run { manifest, out } => {
            let mut m = RunManifest::load(&manifest)?;
            if let Some(out) = out {
                m.out = out;
            }
            m
        }
        Command::InitWeights { weights_seed, out } => {
            MultiViewModel::init(ModelConfig::default(), weights_seed)?.save(&out)?;
            println!("wrote {}", out.display());
            return Ok(());
        }
    };
    let report = pipeline::run(&m)?;
    print_report(&m, &report);
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
