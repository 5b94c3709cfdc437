//! `fldm`: command-line front end for the latent-fusion editing harness.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fldm_core::denoisers::Role;
use fldm_core::harness::{cmd_train, write_error_record, ExperimentConfig, Session, SweepOutput};

#[derive(Parser, Debug)]
#[command(name = "fldm", version, about = "Latent-fusion video editing on toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Edit every seed's source clip with the configured fusion settings.
    Edit(Common),
    /// Sweep the fusion ratio over the configured alpha grid.
    SweepAlpha(Common),
    /// Sweep the number of unfused steps over the configured tau grid.
    SweepTau(Common),
    /// Compare fixed and linear-to-one alpha schedules.
    AblateSchedule(Common),
    /// Video-only, image-only and fused runs per seed.
    Baselines(Common),
    /// Train the network denoisers on clips from the configured world.
    Train {
        #[command(flatten)]
        common: Common,
        /// Which roles to train.
        #[arg(long, value_enum, default_value_t = Roles::Both)]
        roles: Roles,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; the built-in standard world when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds as a list and/or ranges: `0..20`, `0..=4`, `1,2,7`, `0..3,10`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Roles {
    Image,
    Video,
    Both,
}

/// An error raised while checking inputs, before any compute.
#[derive(Debug)]
struct Invalid(anyhow::Error);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(e.into()))
}

fn parse_seeds(list: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let lo: u64 = a.trim().parse().with_context(|| format!("bad seed range start in `{part}`"))?;
            let (hi, inclusive) = match b.strip_prefix('=') {
                Some(h) => (h, true),
                None => (b, false),
            };
            let hi: u64 = hi.trim().parse().with_context(|| format!("bad seed range end in `{part}`"))?;
            let end = if inclusive { hi.checked_add(1).ok_or_else(|| anyhow!("seed range overflows"))? } else { hi };
            if end <= lo {
                bail!("empty seed range `{part}`");
            }
            seeds.extend(lo..end);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| invalid(anyhow!(e).context(format!("loading {}", path.display()))))?,
        None => ExperimentConfig::standard(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(list) = &common.seeds {
        cfg.seeds = parse_seeds(list).map_err(invalid)?;
    }
    if common.jobs == Some(0) {
        return Err(invalid(anyhow!("--jobs must be at least 1")));
    }
    cfg.validate().map_err(|e| invalid(anyhow!(e)))?;
    Ok(cfg)
}

fn report_sweep(out: &SweepOutput) {
    for s in &out.summaries {
        println!(
            "{:>14}  consistency {:7.3} [{:7.3}, {:7.3}]  alignment {:7.3} [{:7.3}, {:7.3}]  failed {}",
            s.key,
            s.consistency.mean,
            s.consistency.lo,
            s.consistency.hi,
            s.alignment.mean,
            s.alignment.lo,
            s.alignment.hi,
            s.n_failed
        );
    }
    for c in &out.contrasts {
        println!(
            "{} {} - {}: {:.3} [{:.3}, {:.3}]",
            c.metric, c.minuend, c.subtrahend, c.diff.mean, c.diff.lo, c.diff.hi
        );
    }
    print_files(&out.files);
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Train { common, roles } => {
            let cfg = load_config(common)?;
            let roles: &[Role] = match roles {
                Roles::Image => &[Role::Image],
                Roles::Video => &[Role::Video],
                Roles::Both => &[Role::Image, Role::Video],
            };
            let (summaries, files) = cmd_train(&cfg, roles)?;
            for s in summaries {
                println!(
                    "{:?}: held-out eps-MSE {:.4} (initial {:.4}, analytic {:.4})",
                    s.role, s.held_out_loss, s.initial_held_out, s.analytic_held_out
                );
            }
            print_files(&files);
        }
        Command::Edit(common) => {
            let session = session(common)?;
            print_files(&session.edit()?);
        }
        Command::SweepAlpha(common) => report_sweep(&session(common)?.sweep_alpha()?),
        Command::SweepTau(common) => report_sweep(&session(common)?.sweep_tau()?),
        Command::AblateSchedule(common) => report_sweep(&session(common)?.ablate_schedule()?),
        Command::Baselines(common) => report_sweep(&session(common)?.baselines()?),
    }
    Ok(())
}

fn session(common: &Common) -> anyhow::Result<Session> {
    let cfg = load_config(common)?;
    Session::new(cfg, common.jobs).map_err(|e| {
        let validation = e.is_validation();
        let e = anyhow!(e).context("building models");
        if validation {
            invalid(e)
        } else {
            e
        }
    })
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Edit(c)
        | Command::SweepAlpha(c)
        | Command::SweepTau(c)
        | Command::AblateSchedule(c)
        | Command::Baselines(c)
        | Command::Train { common: c, .. } => c,
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Edit(_) => "edit",
        Command::SweepAlpha(_) => "sweep-alpha",
        Command::SweepTau(_) => "sweep-tau",
        Command::AblateSchedule(_) => "ablate-schedule",
        Command::Baselines(_) => "baselines",
        Command::Train { .. } => "train",
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<Invalid>() || c.downcast_ref::<fldm_core::Error>().is_some_and(|e| e.is_validation()))
}

/// Best-effort `error.json` in the `--out` directory; `edit` writes its own
/// for failures past validation.
fn record_error(command: &Command, err: &anyhow::Error) {
    let validation = is_validation(err);
    if matches!(command, Command::Edit(_)) && !validation {
        return;
    }
    let Some(dir) = &common(command).out else { return };
    let message = format!("{err:#}");
    let core = if validation {
        fldm_core::Error::Config(message)
    } else {
        fldm_core::Error::Io(std::io::Error::other(message))
    };
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = write_error_record(&dir.join("error.json"), command_name(command), None, &core);
    }
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
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            record_error(&cli.command, &e);
            if is_validation(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
