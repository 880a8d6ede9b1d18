//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};

use rottrans_core::data::{Split, SynthSpec};
use rottrans_core::train::Variant;

use crate::config;
use crate::error::{exit, AppError, AppResult};
use crate::report::{self, metrics_csv};
use crate::run;

static KEY_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{}\nExit codes: 0 success, 2 usage, 3 config, 4 data, 5 numeric abort.",
        config::describe_keys()
    )
});

#[derive(Debug, Parser)]
#[command(name = "rottrans", version, about = "Rotation-invariant ViT re-identification on synthetic data")]
#[command(after_long_help = KEY_HELP.as_str())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic rotated-identity dataset.
    Synth(SynthArgs),
    /// Train one model and write a run directory.
    #[command(after_long_help = KEY_HELP.as_str())]
    Train(TrainArgs),
    /// Print query/gallery metrics of a checkpoint as CSV.
    Eval(EvalArgs),
    /// Train the four ablation variants over several seeds.
    #[command(after_long_help = KEY_HELP.as_str())]
    Compare(CompareArgs),
    /// Write retrieval embeddings as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total identities, train and test.
    #[arg(long, default_value_t = 48)]
    pub num_ids: usize,
    #[arg(long, default_value_t = 32)]
    pub num_train_ids: usize,
    #[arg(long, default_value_t = 12)]
    pub images_per_id: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Rotation bound for training images, degrees.
    #[arg(long, default_value_t = 10.0)]
    pub train_rotation_max: f64,
    /// Rotation bound for query and gallery images, degrees.
    #[arg(long, default_value_t = 45.0)]
    pub test_rotation_max: f64,
    #[arg(long, default_value_t = 0.1)]
    pub scale_jitter: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.1)]
    pub occlusion_prob: f64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` file; absent keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory holding `manifest.csv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Delete the rotated branches before evaluating.
    #[arg(long)]
    pub strip_rotated: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Subset of a,b,c,d.
    #[arg(long, value_delimiter = ',', default_value = "a,b,c,d")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Splits to include: train, query, gallery.
    #[arg(long, value_delimiter = ',', default_value = "query,gallery")]
    pub split: Vec<String>,
}

fn parse_variants(names: &[String]) -> AppResult<Vec<Variant>> {
    names
        .iter()
        .map(|n| {
            Variant::ALL
                .into_iter()
                .find(|v| v.letter().to_string() == *n || v.name() == n)
                .ok_or_else(|| AppError::Usage(format!("unknown variant `{n}`, expected a|b|c|d")))
        })
        .collect()
}

fn parse_splits(names: &[String]) -> AppResult<Vec<Split>> {
    names
        .iter()
        .map(|n| Split::parse(n).ok_or_else(|| AppError::Usage(format!("unknown split `{n}`"))))
        .collect()
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> AppResult<()> {
    let emit = |w: &mut dyn Write, s: &str| {
        let _ = w.write_all(s.as_bytes());
    };
    match cli.command {
        Command::Synth(a) => {
            let spec = SynthSpec {
                num_ids: a.num_ids,
                num_train_ids: a.num_train_ids,
                images_per_id: a.images_per_id,
                image_size: a.image_size,
                train_rotation_max: a.train_rotation_max,
                test_rotation_max: a.test_rotation_max,
                scale_jitter: a.scale_jitter,
                background_noise_std: a.noise_std,
                occlusion_prob: a.occlusion_prob,
                seed: a.seed,
                ..SynthSpec::default()
            };
            let n = run::synth(&a.out, &spec)?;
            emit(err, &format!("wrote {n} images to {}\n", a.out.display()));
        }
        Command::Train(a) => {
            let cfg = config::load_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
            let quiet = a.quiet;
            let o = run::train(&cfg, &a.data, &a.out, |l| {
                if !quiet {
                    let tail = l
                        .metrics
                        .as_ref()
                        .map(|m| format!(" rank1={:.4} map={:.4}", m.rank(1), m.map))
                        .unwrap_or_default();
                    eprintln!(
                        "epoch {} total={:.5} l_ori={:.5} l_rot={:.5} l_inv={:.5} lr={:.6}{tail}",
                        l.epoch, l.total, l.l_ori, l.l_rot, l.l_inv, l.lr
                    );
                }
            })?;
            emit(
                err,
                &format!(
                    "parameters: {} (analytic {})\n",
                    o.param_count, o.analytic_param_count
                ),
            );
            emit(out, &metrics_csv(&o.metrics));
        }
        Command::Eval(a) => {
            let m = run::eval(&a.checkpoint, &a.data, a.strip_rotated)?;
            emit(out, &metrics_csv(&m));
        }
        Command::Compare(a) => {
            let cfg = config::load_config(a.cfg.config.as_deref(), &a.cfg.overrides)?;
            let variants = parse_variants(&a.variants)?;
            let rows = run::compare(&cfg, &a.data, &a.out, &a.seeds, &variants, |r| {
                eprintln!(
                    "({}) {} seed {}: rank1={:.4} map={:.4} minp={:.4} [{:.0}s]",
                    r.variant.letter(),
                    r.variant.name(),
                    r.seed,
                    r.metrics.rank(1),
                    r.metrics.map,
                    r.metrics.minp,
                    r.seconds
                );
            })?;
            emit(out, "variant,name,mean_rank1,mean_map,mean_minp\n");
            for (v, r1, map, minp) in report::summarize(&rows) {
                emit(out, &format!("{},{},{r1},{map},{minp}\n", v.letter(), v.name()));
            }
        }
        Command::DumpEmbeddings(a) => {
            let splits = parse_splits(&a.split)?;
            let n = run::dump_embeddings(&a.checkpoint, &a.data, &splits, &a.out)?;
            emit(err, &format!("wrote {n} embeddings to {}\n", a.out.display()));
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command; returns the process exit code.
/// Failures print a single `error[kind]: message` line.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        exit::USAGE
                    } else {
                        exit::OK
                    }
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
                    let _ = writeln!(err, "{}", AppError::Usage(first.to_string()).line());
                    exit::USAGE
                }
            };
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.line());
            e.exit_code()
        }
    }
}
