use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sgtn::data_io::{load_table, split, synth, write_whitespace4, NamedTable, Scenario, SynthSpec};
use sgtn::pipeline::Model;
use sgtn::sstg::TrajectoryWindow;
use sgtn::trainer::config::parse_pairs;
use sgtn::trainer::eval::{self, write_predictions};
use sgtn::trainer::{plot, sha256_hex, train_with, RunConfig};

/// Files written next to the checkpoint by `train`.
const CHECKPOINT_FILE: &str = "model.sgtn";
const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "run.cfg";

#[derive(Parser)]
#[command(
    name = "sgtn",
    version,
    about = "Graph-transformer trajectory forecasting"
)]
struct Cli {
    /// Log per-step training losses.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, manifest and config to a directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metrics report of a checkpoint on a data split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        select: Select,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report as `name value count` lines.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report the constant-velocity baseline instead of the model.
        #[arg(long)]
        baseline: bool,
    },
    /// Write sampled future trajectories as `frame agent sample x y` lines.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        select: Select,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one window and its sampled forecasts as SVG.
    Plot {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        select: Select,
        /// Without a checkpoint only observed and ground-truth paths are drawn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index of the window within the selected split.
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic scene as a whitespace-separated `frame agent x y` table.
    Synth {
        /// solo-linear, parallel-pair, opposing-pair, opposing-pair-collide,
        /// crossing or crowd(N).
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Configuration sources, later ones winning: the config saved next to a
/// checkpoint, `--config`, then individual flags.
#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trajectory tables; each file's stem names its dataset.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// whitespace4, ngsim-csv or apollo.
    #[arg(long)]
    format: Option<String>,
    /// pedestrian, vehicle or apollo.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// off, dense or sparse.
    #[arg(long)]
    attention_mode: Option<String>,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    nce_lambda: Option<f64>,
}

#[derive(Args)]
struct Select {
    /// Which windows to use.
    #[arg(long, value_enum, default_value_t = Part::Test)]
    split: Part,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
    All,
}

impl RunArgs {
    fn resolve(&self, checkpoint: Option<&Path>) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(saved) = checkpoint
            .and_then(Path::parent)
            .map(|d| d.join(CONFIG_FILE))
        {
            if saved.is_file() {
                pairs.extend(read_pairs(&saved)?);
            }
        }
        if let Some(path) = &self.config {
            pairs.extend(read_pairs(path)?);
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        flag("format", self.format.clone());
        flag("protocol", self.protocol.clone());
        flag("samples", self.samples.map(|v| v.to_string()));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("attention_mode", self.attention_mode.clone());
        flag("no_spatial", self.no_spatial.then(|| "true".into()));
        flag("no_temporal", self.no_temporal.then(|| "true".into()));
        flag("nce_lambda", self.nce_lambda.map(|v| v.to_string()));
        Ok(RunConfig::from_pairs(&pairs)?)
    }

    fn tables(&self, cfg: &RunConfig) -> Result<Vec<(NamedTable, String)>> {
        if self.data.is_empty() {
            bail!("no input given; pass one or more --data files");
        }
        let classes = cfg.data.classes()?;
        self.data
            .iter()
            .map(|path| {
                let bytes =
                    fs::read(path).with_context(|| format!("reading {}", path.display()))?;
                let table = load_table(path, cfg.data.format, &classes)?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((NamedTable { name, table }, sha256_hex(&bytes)))
            })
            .collect()
    }

    fn windows(&self, cfg: &RunConfig, part: Part) -> Result<Vec<TrajectoryWindow>> {
        let tables: Vec<NamedTable> = self.tables(cfg)?.into_iter().map(|(t, _)| t).collect();
        let m = &cfg.model;
        let stride = cfg.data.window_stride;
        let ws = match part {
            Part::All => {
                let mut all = Vec::new();
                for t in &tables {
                    all.extend(sgtn::data_io::windows(&t.table, m.t_obs, m.t_pred, stride)?);
                }
                all
            }
            _ => {
                let s = split(
                    &tables,
                    &cfg.data.split_protocol(),
                    m.t_obs,
                    m.t_pred,
                    stride,
                )?;
                match part {
                    Part::Train => s.train,
                    Part::Val => s.val,
                    _ => s.test,
                }
            }
        };
        if ws.is_empty() {
            bail!("the selected split has no windows");
        }
        Ok(ws)
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("in {}", path.display()))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    model
        .load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out } => {
            let cfg = run.resolve(None)?;
            let tables = run.tables(&cfg)?;
            let named: Vec<NamedTable> = tables.iter().map(|(t, _)| t.clone()).collect();
            let m = &cfg.model;
            let s = split(
                &named,
                &cfg.data.split_protocol(),
                m.t_obs,
                m.t_pred,
                cfg.data.window_stride,
            )?;
            log::info!(
                "{} train / {} val / {} test windows",
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let verbose = cli.verbose;
            let mut manifest = train_with(&mut model, &s.train, &s.val, &cfg.train, |step| {
                if verbose {
                    log::info!(
                        "step {} epoch {} nll {:.4} total {:.4} |g| {:.3}",
                        step.step,
                        step.epoch,
                        step.nll,
                        step.total,
                        step.grad_norm
                    );
                }
            })?;
            manifest.config = cfg.pairs();
            manifest.datasets = tables
                .iter()
                .map(|(t, h)| (t.name.clone(), h.clone()))
                .collect();
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            model.save(&out.join(CHECKPOINT_FILE))?;
            fs::write(out.join(MANIFEST_FILE), manifest.to_json()?)?;
            fs::write(out.join(CONFIG_FILE), cfg.to_file())?;
            println!("wrote {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval {
            run,
            select,
            checkpoint,
            out,
            baseline,
        } => {
            let cfg = run.resolve(Some(&checkpoint))?;
            let ws = run.windows(&cfg, select.split)?;
            let report = if baseline {
                eval::evaluate_constant_velocity(&ws, &cfg.eval)?
            } else {
                eval::evaluate(
                    &load_model(&cfg, &checkpoint)?,
                    &ws,
                    &cfg.eval,
                    cfg.train.seed,
                )?
            };
            print!("{}", report.to_text());
            if let Some(p) = out {
                fs::write(&p, report.to_kv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Predict {
            run,
            select,
            checkpoint,
            out,
        } => {
            let cfg = run.resolve(Some(&checkpoint))?;
            let ws = run.windows(&cfg, select.split)?;
            let model = load_model(&cfg, &checkpoint)?;
            let forecasts = eval::forecast(&model, &ws, cfg.eval.samples, cfg.train.seed)?;
            let mut w = output(out.as_deref())?;
            for (window, f) in ws.iter().zip(&forecasts) {
                write_predictions(&mut w, window, f)?;
            }
            w.flush()?;
        }
        Command::Plot {
            run,
            select,
            checkpoint,
            window,
            out,
        } => {
            let cfg = run.resolve(checkpoint.as_deref())?;
            let ws = run.windows(&cfg, select.split)?;
            let Some(w) = ws.get(window) else {
                bail!("window {window} out of range ({} windows)", ws.len());
            };
            let f = match &checkpoint {
                Some(c) => {
                    let model = load_model(&cfg, c)?;
                    Some(
                        eval::forecast(
                            &model,
                            std::slice::from_ref(w),
                            cfg.eval.samples,
                            cfg.train.seed,
                        )?
                        .remove(0),
                    )
                }
                None => None,
            };
            fs::write(&out, plot::render(w, f.as_ref()))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Synth {
            scenario,
            noise,
            seed,
            frames,
            out,
        } => {
            let scenario: Scenario = scenario.parse()?;
            let table = synth(&SynthSpec {
                scenario,
                noise,
                seed,
                frames,
            })?;
            let mut w = output(out.as_deref())?;
            write_whitespace4(&table, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn is_broken_pipe(e: &(dyn std::error::Error + 'static)) -> bool {
    let io = match e.downcast_ref::<sgtn::Error>() {
        Some(sgtn::Error::Io(io)) => Some(io),
        _ => e.downcast_ref::<io::Error>(),
    };
    io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Output piped into a reader that stopped early.
        Err(e) if e.chain().any(is_broken_pipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
