use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use tracklabel::keyframe::Strategy;
use tracklabel::pipeline::{
    sweep_strategy, sweep_tau, write_sweep, AssocMode, Pipeline, PipelineConfig, SweepParam, OUT_ENV,
};
use tracklabel::Result;

#[derive(Parser)]
#[command(
    name = "tracklabel",
    version,
    about = "Multi-view label consensus and toy referring-field training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON with synth/assoc/consensus/keyframe/train/eval sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every seeded stage; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to $TRACKLABEL_OUT, then ./tracklabel-run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Existing dataset manifest to use instead of a synthetic scene.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker threads; 1 gives the sequential reference path.
    #[arg(long)]
    threads: Option<usize>,
    /// Re-run the requested stage even if its outputs exist.
    #[arg(long)]
    force: bool,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Synonym clustering threshold in (0, 1).
    #[arg(long)]
    tau_sem: Option<f64>,
    /// Keyframe strategy: weighting, maximum, minimum, random or medium.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Visibility spread in sqrt-pixels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Auto,
    Import,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    TauSem,
    Strategy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noisy synthetic scene with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of views.
        #[arg(long)]
        n_views: Option<usize>,
        /// Number of objects.
        #[arg(long)]
        n_objects: Option<usize>,
    },
    /// Group detections into trajectories.
    Associate {
        #[command(flatten)]
        common: Common,
        /// Association mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Weight of mask IoU against label similarity.
        #[arg(long)]
        iou_weight: Option<f64>,
        /// Minimum score to extend a track.
        #[arg(long)]
        match_threshold: Option<f64>,
        /// Views a track may go unmatched.
        #[arg(long)]
        max_gap: Option<usize>,
    },
    /// Cluster labels, vote per trajectory and propagate.
    Consensus {
        #[command(flatten)]
        common: Common,
        /// Synonym clustering threshold in (0, 1).
        #[arg(long)]
        tau_sem: Option<f64>,
    },
    /// Select keyframes and attach descriptions.
    Keyframe {
        #[command(flatten)]
        common: Common,
        /// Keyframe strategy: weighting, maximum, minimum, random or medium.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        /// Visibility spread in sqrt-pixels.
        #[arg(long)]
        sigma: Option<f64>,
        /// External descriptions file keyed by (track, view).
        #[arg(long)]
        descriptions: Option<PathBuf>,
    },
    /// Train the toy referring field.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Contrastive loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Contrastive temperature.
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated views withheld from training.
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<usize>>,
        /// Use referral texts as the only positives.
        #[arg(long)]
        long_only: bool,
    },
    /// Score consensus and the trained field.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated views to score.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
    },
    /// Sweep one parameter and write a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep.
        #[arg(long, value_enum, default_value = "tau-sem")]
        param: Param,
        /// Comma-separated values; defaults to the config's sweep values or every strategy.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Run every stage.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn setup(common: &Common) -> Result<Pipeline> {
    let filter = if common.verbose { "info" } else { "warn" };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(filter)))
        .with_writer(std::io::stderr)
        .try_init();
    if let Some(n) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tracklabel-run"));
    let mut p = Pipeline::new(cfg, out);
    p.input = common.manifest.clone();
    Ok(p)
}

/// Runs the stages before `upto` without forcing, then `upto` itself.
fn run_through(p: &mut Pipeline, upto: &str) -> Result<()> {
    let force = p.force;
    p.force = false;
    for stage in tracklabel::pipeline::STAGES {
        if stage == upto {
            p.force = force;
        }
        match stage {
            "synth" => p.synth()?,
            "associate" => p.associate()?,
            "consensus" => p.consensus()?,
            "keyframe" => p.keyframe()?,
            "train" => p.train()?,
            _ => p.eval()?,
        };
        if stage == upto {
            break;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            n_views,
            n_objects,
        } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if let Some(n) = n_views {
                p.cfg.synth.n_views = n;
            }
            if let Some(n) = n_objects {
                p.cfg.synth.n_objects = n;
            }
            run_through(&mut p, "synth")?;
            println!("{}", p.scene_path().display());
        }
        Command::Associate {
            common,
            mode,
            iou_weight,
            match_threshold,
            max_gap,
        } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if let Some(m) = mode {
                p.cfg.assoc.mode = match m {
                    Mode::Auto => AssocMode::Auto,
                    Mode::Import => AssocMode::Import,
                    Mode::Greedy => AssocMode::Greedy,
                };
            }
            p.cfg.assoc.iou_weight = iou_weight.or(p.cfg.assoc.iou_weight);
            p.cfg.assoc.match_threshold = match_threshold.or(p.cfg.assoc.match_threshold);
            p.cfg.assoc.max_gap = max_gap.or(p.cfg.assoc.max_gap);
            run_through(&mut p, "associate")?;
            println!("{}", p.path("tracks.jsonl").display());
        }
        Command::Consensus { common, tau_sem } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if let Some(t) = tau_sem {
                p.cfg.consensus.tau_sem = t;
            }
            run_through(&mut p, "consensus")?;
            println!("{}", p.path("consensus.jsonl").display());
        }
        Command::Keyframe {
            common,
            strategy,
            sigma,
            descriptions,
        } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if let Some(s) = strategy {
                p.cfg.keyframe.strategy = s;
            }
            if let Some(s) = sigma {
                p.cfg.keyframe.sigma = s;
            }
            if descriptions.is_some() {
                p.cfg.keyframe.descriptions = descriptions;
            }
            run_through(&mut p, "keyframe")?;
            println!("{}", p.path("descriptions.jsonl").display());
        }
        Command::Train {
            common,
            epochs,
            lambda,
            tau,
            holdout,
            long_only,
        } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            let t = &mut p.cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lambda = lambda.unwrap_or(t.lambda);
            t.tau = tau.unwrap_or(t.tau);
            if let Some(h) = holdout {
                t.holdout_views = h;
            }
            if long_only {
                t.positives = tracklabel::field::PositiveMode::ReferralsOnly;
            }
            run_through(&mut p, "train")?;
            println!("{}", p.path("model.json").display());
        }
        Command::Eval { common, views } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if views.is_some() {
                p.cfg.eval.views = views;
            }
            run_through(&mut p, "eval")?;
            let report = std::fs::read_to_string(p.path("report.json")).map_err(|e| tracklabel::Error::Io {
                path: p.path("report.json"),
                source: e,
            })?;
            print!("{report}");
        }
        Command::Sweep { common, param, values } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            let rows = match param {
                Param::TauSem => {
                    run_through(&mut p, "associate")?;
                    let taus = match values {
                        Some(v) => v
                            .iter()
                            .map(|s| {
                                s.parse::<f64>()
                                    .map_err(|_| tracklabel::Error::InvalidParameter(format!("not a threshold: {s:?}")))
                            })
                            .collect::<Result<Vec<_>>>()?,
                        None => p.cfg.eval.tau_sweep.clone(),
                    };
                    write_sweep(&p, SweepParam::TauSem, &sweep_tau(&p, &taus)?)?
                }
                Param::Strategy => {
                    run_through(&mut p, "consensus")?;
                    let strategies = match values {
                        Some(v) => v.iter().map(|s| s.parse::<Strategy>()).collect::<Result<Vec<_>>>()?,
                        None => vec![
                            Strategy::Weighting,
                            Strategy::Maximum,
                            Strategy::Minimum,
                            Strategy::Random,
                            Strategy::Medium,
                        ],
                    };
                    write_sweep(&p, SweepParam::Strategy, &sweep_strategy(&p, &strategies)?)?
                }
            };
            print!(
                "{}",
                std::fs::read_to_string(&rows).map_err(|e| tracklabel::Error::Io {
                    path: rows.clone(),
                    source: e
                })?
            );
        }
        Command::Run { common, overrides } => {
            let mut p = setup(&common)?;
            p.force = common.force;
            if let Some(t) = overrides.tau_sem {
                p.cfg.consensus.tau_sem = t;
            }
            if let Some(s) = overrides.strategy {
                p.cfg.keyframe.strategy = s;
            }
            if let Some(s) = overrides.sigma {
                p.cfg.keyframe.sigma = s;
            }
            if let Some(e) = overrides.epochs {
                p.cfg.train.epochs = e;
            }
            let manifest = p.run_all()?;
            for s in &manifest.stages {
                println!("{:<10} {}", s.stage, if s.ran { "ran" } else { "skipped" });
            }
            println!("report: {}", p.path("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
