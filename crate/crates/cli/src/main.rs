use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use moth_core::checkpoint::Checkpoint;
use moth_core::config::{Ablation, RunConfig};
use moth_core::dataset::Dataset;
use moth_core::fine::predict_chunk;
use moth_core::runs;
use moth_core::synth::{self, Split};
use moth_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "moth", version, about = "Train and evaluate the hierarchical hand-to-action policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint at --ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split.
    Eval(Common),
    /// Train and compare the four ablation arms.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds per arm, counting up from --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Run one inference and dump all three stages.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episode: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the single-CPU preset instead of the reference defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// File config with flags applied on top.
    fn config(&self) -> moth_core::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.steps {
            c.train.steps = s;
        }
        if let Some(a) = &self.ablation {
            c.ablation = a.parse::<Ablation>()?.flags();
        }
        if let Some(s) = self.cfg_scale {
            c.sampling.cfg_scale = s;
        }
        if let Some(s) = self.flow_steps {
            c.sampling.flow_steps = s;
        }
        if self.ckpt.is_some() {
            c.paths.checkpoint = self.ckpt.clone();
        }
        if self.dataset.is_some() {
            c.paths.dataset = self.dataset.clone();
        }
        if self.out.is_some() {
            c.paths.out = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn split(&self, default: Split) -> moth_core::Result<Split> {
        self.split.as_deref().map_or(Ok(default), str::parse)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> moth_core::Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("no {what} path given")))
}

fn load_dataset(cfg: &RunConfig) -> moth_core::Result<Dataset> {
    let d = Dataset::load(need(&cfg.paths.dataset, "dataset")?)?;
    d.check_model(&cfg.effective_model())?;
    Ok(d)
}

fn output(cfg: &RunConfig) -> anyhow::Result<Box<dyn Write>> {
    Ok(match &cfg.paths.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| p.display().to_string())?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn gen(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let data = Dataset::generate(&cfg.world, &cfg.splits, &cfg.model, cfg.seed)?;
    let out = need(&cfg.paths.out, "output").or_else(|_| need(&cfg.paths.dataset, "dataset"))?;
    data.save(out)?;
    for split in [Split::Train, Split::HeldOutInstruction, Split::HeldOutLayout] {
        let eps: Vec<_> = data.split(split).collect();
        let hand = eps.iter().filter(|e| e.hand.is_some()).count();
        let robot = eps.iter().filter(|e| e.actions.is_some()).count();
        println!("{split:<22} episodes {:>6}  hand {:>6}  robot {:>6}", eps.len(), hand, robot);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(c: &Common, resume: bool) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let data = load_dataset(&cfg)?;
    let ckpt = need(&cfg.paths.checkpoint, "checkpoint")?;
    let start = if resume { Some(Checkpoint::load(ckpt)?) } else { None };
    let mut log = output(&cfg)?;
    let (_, records) = runs::train(&cfg, &data, start.as_ref(), Some(ckpt), &mut log)?;
    log.flush()?;
    if let Some(r) = records.last() {
        eprintln!("step {} loss {:.5} ({:.1}s)", r.step, r.total, r.wall);
    }
    Ok(())
}

fn eval(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let data = load_dataset(&cfg)?;
    let ck = Checkpoint::load(need(&cfg.paths.checkpoint, "checkpoint")?)?;
    let model = runs::inference_model(&cfg, &ck)?;
    let report = runs::evaluate(&cfg, &model, &data, c.split(Split::HeldOutLayout)?)?;
    print!("{}", report.table());
    if let Some(p) = &cfg.paths.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn ablate(c: &Common, n: u64) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let data = match &cfg.paths.dataset {
        Some(_) => load_dataset(&cfg)?,
        None => Dataset::generate(&cfg.world, &cfg.splits, &cfg.model, cfg.seed)?,
    };
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n).collect();
    let mut log = output(&cfg)?;
    let report = runs::ablate(&cfg, &data, &seeds, c.split(Split::HeldOutInstruction)?, &mut log)?;
    log.flush()?;
    eprint!("{}", report.table());
    Ok(())
}

fn sample(c: &Common, episode: u64) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let data = load_dataset(&cfg)?;
    let ck = Checkpoint::load(need(&cfg.paths.checkpoint, "checkpoint")?)?;
    let model = runs::inference_model(&cfg, &ck)?;
    let e = data
        .episodes
        .iter()
        .find(|e| e.id == episode)
        .ok_or_else(|| Error::Data(format!("no episode {episode}")))?;
    let inp = data.inputs(e)?;
    let p = predict_chunk(&model, &inp.objects, Some(&inp.text), &runs::sample_settings(&cfg), cfg.seed)?;
    let raw = synth::denormalize(&p.actions, &data.header.action_mean, &data.header.action_std)?;
    let doc = json!({
        "episode": episode,
        "seed": cfg.seed,
        "waypoints": p.plan.as_ref().map(|pl| json!({ "bins": pl.bins, "positions": pl.positions() })),
        "hand": p.hand.as_ref().map(|h| json!({ "frames": h.frames, "valid": h.valid })),
        "actions": { "normalized": p.actions.data, "raw": raw.data, "dim": raw.dim },
    });
    let mut out = output(&cfg)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Data(_) | Error::Version { .. } | Error::Checksum { .. } | Error::Io(_)) => 3,
        Some(Error::NonFinite(_)) => 4,
        _ if err.downcast_ref::<std::io::Error>().is_some() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Gen(c) => gen(c),
        Cmd::Train { common, resume } => train(common, *resume),
        Cmd::Eval(c) => eval(c),
        Cmd::Ablate { common, seeds } => ablate(common, *seeds),
        Cmd::Sample { common, episode } => sample(common, *episode),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
