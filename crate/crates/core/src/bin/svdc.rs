use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use svdc::config::RunConfig;
use svdc::io::{dump_clip, load_corpus, read_pfm, read_ppm, write_sparse_csv};
use svdc::net::{FusionMode, ModelParams};
use svdc::scene::{simulate_dtof, DToFConfig};
use svdc::train::{generate_clip, run_eval, run_training, Split, StepStats};

const RUN_CONFIG: &str = "run.cfg";

#[derive(Parser)]
#[command(name = "svdc", version, about = "Sparse dToF video depth completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/eval corpora described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes run.cfg, loss_curve.csv and checkpoint.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_cross_loss: bool,
        #[arg(long)]
        no_opw_loss: bool,
        #[arg(long)]
        no_csea: bool,
        /// Replace adaptive fusion by a single kernel path.
        #[arg(long, value_name = "small|large")]
        fixed_kernel: Option<String>,
    },
    /// Evaluate a checkpoint on a corpus directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Simulate one sensor readout for a depth map and image.
    SimDtof {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config; only its dtof.* keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    for (split, name, n) in [(Split::Train, "train", cfg.data.train_clips), (Split::Eval, "eval", cfg.data.eval_clips)] {
        for i in 0..n {
            let clip = generate_clip(&cfg.data, &cfg.dtof, split, i)?;
            let dir = out.join(name).join(format!("clip_{i:03}"));
            dump_clip(&dir, &clip).with_context(|| format!("writing {}", dir.display()))?;
        }
        eprintln!("{name}: {n} clips of {} frames", cfg.data.clip_frames);
    }
    cfg.save(&out.join(RUN_CONFIG))?;
    Ok(())
}

fn train(config: &Path, out: &Path, flags: (bool, bool, bool), fixed_kernel: Option<&str>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    let (no_cross, no_opw, no_csea) = flags;
    cfg.train.use_cross_loss &= !no_cross;
    cfg.train.use_opw_loss &= !no_opw;
    cfg.model.use_csea &= !no_csea;
    if let Some(k) = fixed_kernel {
        cfg.model.fusion = match k.parse::<FusionMode>()? {
            FusionMode::Adaptive => bail!("--fixed-kernel takes small or large"),
            m => m,
        };
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join(RUN_CONFIG))?;
    let corpus = (0..cfg.data.train_clips)
        .map(|i| generate_clip(&cfg.data, &cfg.dtof, Split::Train, i))
        .collect::<svdc::Result<Vec<_>>>()?;
    let every = (cfg.train.steps / 20).max(1);
    let mut log = |step: usize, s: &StepStats| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            eprintln!("step {step:>6}  lr {:.2e}  loss {:.4}", s.lr, s.loss.total);
        }
    };
    let outcome = run_training(&cfg.train, &cfg.model, &cfg.loss, &corpus, Some(out), Some(&mut log))?;
    if let Some(p) = outcome.checkpoint {
        eprintln!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<()> {
    let run_cfg = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG);
    let cfg = RunConfig::load(&run_cfg).with_context(|| format!("model config {} next to the checkpoint", run_cfg.display()))?;
    let params = ModelParams::load(checkpoint, &cfg.model)?;
    let eval_dir = data.join("eval");
    let dir = if eval_dir.is_dir() { eval_dir } else { data.to_path_buf() };
    let clips = load_corpus(&dir)?;
    let r = run_eval(&params, &cfg.model, &clips, cfg.loss.beta_mask)?;
    r.write(report)?;
    let base = r.baseline.map_or(f64::NAN, |b| b.rmse);
    eprintln!("rmse {:.4} (baseline {:.4}) over {} frames", r.model.rmse, base, r.frames.len());
    Ok(())
}

fn sim_dtof(depth: &Path, rgb: &Path, out: &Path, config: Option<&Path>, frame: usize) -> Result<()> {
    let dtof = match config {
        Some(p) => RunConfig::load(p)?.dtof,
        None => DToFConfig::default(),
    };
    let depth = read_pfm(depth)?;
    let rgb = read_ppm(rgb)?;
    if rgb.shape()[1..] != [depth.height(), depth.width()] {
        bail!("image {:?} and depth {}x{} differ in size", &rgb.shape()[1..], depth.height(), depth.width());
    }
    let sparse = simulate_dtof(&depth, &rgb, &dtof, frame)?;
    write_sparse_csv(out, &sparse)?;
    eprintln!("{} samples", sparse.samples.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train { config, out, no_cross_loss, no_opw_loss, no_csea, fixed_kernel } => {
            train(&config, &out, (no_cross_loss, no_opw_loss, no_csea), fixed_kernel.as_deref())
        }
        Command::Eval { checkpoint, data, report } => eval(&checkpoint, &data, &report),
        Command::SimDtof { depth, rgb, out, config, frame } => sim_dtof(&depth, &rgb, &out, config.as_deref(), frame),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            eprintln!("{}", head.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
