//! `pw`: dataset generation, training, evaluation, oracle checks and ELO.
//!
//! Exit status: 0 on success, 1 for invalid input (flags, configuration,
//! missing files), 2 for runtime or numeric failures.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pw_core::checkpoint::{load_params, load_training_state};
use pw_core::config::TrainConfig;
use pw_core::eval::{elo_tournament, paired_compare, read_votes_csv, rollout_eval, win_rate, write_paired_csv, write_ratings_csv, ELO_K};
use pw_core::experiment::{eval_settings, make_split, Split};
use pw_core::oracle::{run_oracle_suite, write_oracle_csv};
use pw_core::rewards::{read_metric_csv, write_metric_csv, Scorer};
use pw_core::trainer::{posttrain, pretrain, PosttrainState};
use pw_core::world::{load_dataset, save_dataset, Dataset};
use pw_core::world_model::DiffusionModel;
use pw_core::Error;

const DEFAULT_OUT: &str = "pw_out";

#[derive(Parser)]
#[command(name = "pw", version, about = "Post-training of a toy multi-view diffusion world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $PW_OUT, else ./pw_out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is supported and reproduces the same outputs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` configuration overrides.
    #[arg(global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and/or test datasets.
    GenData {
        #[arg(long)]
        split: Option<Split>,
        #[command(flatten)]
        common: Common,
    },
    /// Teacher-forced pretraining.
    Pretrain {
        /// Total update count (overrides `pretrain_steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint and its optimizer state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reward-driven post-training from a pretrained (or post-training) checkpoint.
    Posttrain {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        /// Output table (default: <out>/eval_<checkpoint stem>.csv).
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Paired sign test between two evaluation tables (A versus B).
    Paired {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the analytic oracle suite.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// ELO ratings from a vote file (model_a,model_b,winner).
    Elo {
        #[arg(long)]
        votes: PathBuf,
        #[arg(long, default_value_t = ELO_K)]
        k: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Error with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_validation() { 1 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

struct Context {
    config: TrainConfig,
    out: PathBuf,
}

impl Common {
    fn context(&self) -> Result<Context, Failure> {
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(invalid("--threads must be at least 1"));
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| invalid(format!("cannot size the thread pool: {e}")))?;
        }
        let mut config = match &self.config {
            Some(p) if !p.exists() => return Err(invalid(format!("config file {} does not exist", p.display()))),
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os("PW_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        fs::create_dir_all(&out).map_err(|e| invalid(format!("cannot create output directory {}: {e}", out.display())))?;
        let probe = out.join(".pw_write_test");
        fs::write(&probe, b"").map_err(|e| invalid(format!("output directory {} is not writable: {e}", out.display())))?;
        let _ = fs::remove_file(probe);
        fs::write(out.join("config.txt"), config.to_text())?;
        Ok(Context { config, out })
    }
}

fn dataset_path(out: &Path, split: Split) -> PathBuf {
    out.join(format!("{}.pwds", split.name()))
}

/// Loads a split from the output directory, generating and saving it when
/// absent. A stored dataset must match the configured world.
fn dataset(ctx: &Context, split: Split) -> Result<Dataset, Failure> {
    let path = dataset_path(&ctx.out, split);
    if path.exists() {
        let ds = load_dataset(&path)?;
        if ds.config != ctx.config.model.world {
            return Err(invalid(format!("{} was generated with a different world configuration", path.display())));
        }
        return Ok(ds);
    }
    let ds = make_split(&ctx.config, split)?;
    save_dataset(&ds, &path)?;
    Ok(ds)
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    let p = path.clone().ok_or_else(|| invalid(format!("{what} needs --checkpoint")))?;
    if !p.exists() {
        return Err(invalid(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { split, common } => {
            let ctx = common.context()?;
            let splits = match split {
                Some(s) => vec![s],
                None => vec![Split::Train, Split::Test],
            };
            for s in splits {
                let ds = make_split(&ctx.config, s)?;
                let path = dataset_path(&ctx.out, s);
                save_dataset(&ds, &path)?;
                println!("wrote {} ({} episodes)", path.display(), ds.episodes.len());
            }
        }
        Command::Pretrain { steps, checkpoint, common } => {
            let mut ctx = common.context()?;
            if let Some(s) = steps {
                ctx.config.pretrain_steps = s;
                fs::write(ctx.out.join("config.txt"), ctx.config.to_text())?;
            }
            let resume = match &checkpoint {
                Some(_) => {
                    let p = require(&checkpoint, "resuming")?;
                    let (params, state) = load_training_state(&p)?;
                    let state = state.ok_or_else(|| invalid(format!("{} has no optimizer state to resume from", p.display())))?;
                    Some((params, state))
                }
                None => None,
            };
            let train = dataset(&ctx, Split::Train)?;
            let run = pretrain(&ctx.config, &train.episodes, resume, Some(&ctx.out))?;
            println!("pretrained to step {}; final loss {:.6}", run.state.step, run.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Posttrain { steps, checkpoint, common } => {
            let mut ctx = common.context()?;
            if let Some(s) = steps {
                ctx.config.steps = s;
                fs::write(ctx.out.join("config.txt"), ctx.config.to_text())?;
            }
            let p = require(&checkpoint, "posttrain")?;
            let state = PosttrainState::open(&ctx.config, &p)?;
            let train = dataset(&ctx, Split::Train)?;
            let (state, reports) = posttrain(&ctx.config, &train.episodes, state, Some(&ctx.out))?;
            let last = reports.last().map_or(f64::NAN, |r| r.mean_r);
            println!("post-trained to step {}; last mean reward {last:.6}", state.step());
        }
        Command::Eval { checkpoint, split, table, common } => {
            let ctx = common.context()?;
            let p = require(&checkpoint, "eval")?;
            let params = load_params(&p)?;
            ctx.config.model.check_params(&params)?;
            let ds = dataset(&ctx, split.unwrap_or(Split::Test))?;
            let eps = &ds.episodes[..ctx.config.eval_episodes.min(ds.episodes.len())];
            let model = DiffusionModel { params: &params, config: &ctx.config.model, sampler: ctx.config.sampler };
            let rows = rollout_eval(&model, &ctx.config.model, eps, &Scorer::new(ctx.config.model.world.channels), &eval_settings(&ctx.config))?;
            let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let path = table.unwrap_or_else(|| ctx.out.join(format!("eval_{stem}.csv")));
            write_metric_csv(BufWriter::new(File::create(&path)?), &rows)?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
        Command::Paired { a, b, common } => {
            let ctx = common.context()?;
            let read = |p: &Path| -> Result<_, Failure> {
                let f = File::open(p).map_err(|e| invalid(format!("cannot open {}: {e}", p.display())))?;
                Ok(read_metric_csv(BufReader::new(f))?)
            };
            let r = paired_compare(&read(&a)?, &read(&b)?)?;
            write_paired_csv(BufWriter::new(File::create(ctx.out.join("paired.csv"))?), &r)?;
            let summary = format!(
                "wins,losses,ties,win_rate,p_two_sided,p_one_sided\n{},{},{},{},{:e},{:e}\n",
                r.wins,
                r.losses,
                r.ties,
                win_rate(r.wins, r.losses),
                r.p_two_sided,
                r.p_one_sided
            );
            fs::write(ctx.out.join("paired_summary.csv"), &summary)?;
            print!("{summary}");
        }
        Command::Oracle { common } => {
            let ctx = common.context()?;
            let rows = run_oracle_suite(ctx.config.seed)?;
            write_oracle_csv(BufWriter::new(File::create(ctx.out.join("oracle.csv"))?), &rows)?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            println!("{} checks, {failed} failed", rows.len());
            if failed > 0 {
                return Err(Failure { code: 2, message: format!("{failed} oracle checks failed") });
            }
        }
        Command::Elo { votes, k, common } => {
            let ctx = common.context()?;
            let f = File::open(&votes).map_err(|e| invalid(format!("cannot open {}: {e}", votes.display())))?;
            let state = elo_tournament(&read_votes_csv(BufReader::new(f))?, k)?;
            write_ratings_csv(BufWriter::new(File::create(ctx.out.join("elo.csv"))?), &state)?;
            for (id, r) in &state.ratings {
                println!("{id}: {r:.1}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
