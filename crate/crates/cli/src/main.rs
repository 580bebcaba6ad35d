use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use hcl_core::datio::{
    load_embeddings, load_state, save_embeddings, save_state, synth_stream, write_atomic, EmbeddingDataset, RunConfig,
    Scenario, TaskStream,
};
use hcl_core::engine::fewshot::{run_episodes, FewShotConfig};
use hcl_core::engine::{predict, predict_given_task, predict_marginal, train_sequence, Event, ModelState};
use hcl_core::evaluation::{evaluate_scenario, render_svg, render_table, tii_accuracy, MetricsReport};
use hcl_core::theory::{empirical_bounds_from_model, run_random_suite, BoundReport};

#[derive(Parser, Debug)]
#[command(name = "hcl", version, about = "Continual learning over a frozen backbone")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded numerics. Every build already runs that way.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Training events as JSON lines on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic stream as embedding files.
    Gen {
        /// Directory for train.hide, test.hide and holdout.hide.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every task of the stream, then write state and metrics.
    Train {
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Recompute metrics of a saved state on test data.
    Eval {
        #[arg(long)]
        state: Option<PathBuf>,
        /// Test embeddings; defaults to the configured data or stream.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Predict every sample of an embedding file, one JSON line each.
    Predict {
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Known task (task-incremental prediction).
        #[arg(long)]
        task: Option<usize>,
    },
    /// Bound and identity checks on random tables, and optionally on a
    /// trained model.
    CheckTheorems {
        #[arg(long, default_value_t = 10_000)]
        random_tables: usize,
        /// Chance that a random distribution gets an exact zero entry.
        #[arg(long, default_value_t = 0.01)]
        zero_rate: f64,
        #[arg(long, requires = "test")]
        state: Option<PathBuf>,
        #[arg(long, requires = "state")]
        test: Option<PathBuf>,
    },
    /// N-way K-shot episodes on classes the stream never showed.
    Fewshot {
        #[arg(long)]
        state: Option<PathBuf>,
        /// Embeddings of unseen classes.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[command(flatten)]
        episode: EpisodeArgs,
    },
    /// Render a metrics file as a table, and optionally an SVG heatmap.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 5)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    no_shared_lora: bool,
    /// Also fine-tune an episode copy of the adapter.
    #[arg(long)]
    episode_adapter: bool,
    /// Permute query labels (chance control).
    #[arg(long)]
    shuffle_labels: bool,
}

enum Failure {
    /// Bad flags, config or input paths.
    Usage(anyhow::Error),
    /// A check ran and failed.
    Check(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<hcl_core::Error> for Failure {
    fn from(e: hcl_core::Error) -> Self {
        match e {
            hcl_core::Error::Config(_) => Failure::Usage(e.into()),
            e => Failure::Runtime(e.into()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code.clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

/// The flag if given, else the configured path, else `name` under the
/// configured output directory.
fn resolve(flag: &Option<PathBuf>, configured: &Option<String>, cfg: &RunConfig, name: &str) -> std::result::Result<PathBuf, Failure> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Some(p) = configured {
        return Ok(PathBuf::from(p));
    }
    if let Some(dir) = &cfg.paths.out_dir {
        return Ok(Path::new(dir).join(name));
    }
    Err(usage(anyhow!("no path for {name}: pass a flag or set it in the config")))
}

fn read_embeddings(path: &Path) -> std::result::Result<EmbeddingDataset, Failure> {
    load_embeddings(path).with_context(|| format!("reading {}", path.display())).map_err(usage)
}

fn read_state(path: &Path) -> std::result::Result<ModelState, Failure> {
    load_state(path).with_context(|| format!("reading state {}", path.display())).map_err(usage)
}

fn load_stream(cfg: &RunConfig) -> std::result::Result<TaskStream, Failure> {
    match (&cfg.paths.train_data, &cfg.paths.test_data) {
        (Some(tr), Some(te)) => {
            let train = read_embeddings(Path::new(tr))?;
            let test = read_embeddings(Path::new(te))?;
            Ok(TaskStream::from_datasets(&train, &test, cfg.scenario)?)
        }
        _ => Ok(synth_stream(cfg.seed, &cfg.synth)?.stream),
    }
}

/// Test samples of each trained task, split by task id.
fn split_by_task(ds: &EmbeddingDataset, tasks: usize) -> Vec<EmbeddingDataset> {
    (0..tasks as u32).map(|t| ds.filter(|s| s.task_id == t)).collect()
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> std::result::Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_bound(title: &str, r: &BoundReport) {
    println!("{title}");
    println!("  δ (E H_WTP)  {:.6}", r.delta);
    println!("  ε (E H_TII)  {:.6}", r.epsilon);
    println!("  η (E H_TAP)  {:.6}", r.eta);
    println!("  L2           {:.6}", r.l2);
    println!("  L1           {:.6}", r.l1);
    println!("  L            {:.6}", r.loss);
    println!("  bound        {:.6}", r.bound);
    println!("  slack        {:.3e}", r.slack);
    println!("  infinite     {}", r.infinite);
    println!("  holds        {}", r.holds);
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    let verbose = cli.verbose;
    match &cli.command {
        Command::Gen { out } => {
            let dir = match (out, &cfg.paths.out_dir) {
                (Some(d), _) => d.clone(),
                (None, Some(d)) => PathBuf::from(d),
                (None, None) => return Err(usage(anyhow!("gen needs --out or paths.out_dir"))),
            };
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let synth = synth_stream(cfg.seed, &cfg.synth)?;
            let (train, test) = synth.stream.to_datasets();
            save_embeddings(&train, &dir.join("train.hide"))?;
            save_embeddings(&test, &dir.join("test.hide"))?;
            if let Some(h) = &synth.holdout {
                save_embeddings(h, &dir.join("holdout.hide"))?;
            }
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), dir.display());
        }
        Command::Train { state, metrics } => {
            let state_path = resolve(state, &cfg.paths.state, &cfg, "state.json")?;
            let metrics_path = resolve(metrics, &cfg.paths.metrics, &cfg, "metrics.json")?;
            let stream = load_stream(&cfg)?;
            let mut sink = |e: &Event| {
                if verbose {
                    if let Ok(line) = serde_json::to_string(e) {
                        let _ = writeln!(std::io::stderr(), "{line}");
                    }
                }
            };
            let (model, matrix) = train_sequence(&stream, &cfg.train, &mut sink)?;
            let tests: Vec<&EmbeddingDataset> = stream.tasks.iter().map(|t| &t.test).collect();
            let tii = tii_accuracy(&model, &tests)?;
            let report = MetricsReport::from_matrix(stream.scenario, matrix, Some(tii))?;
            save_state(&model, &state_path)?;
            write_json(&report, &metrics_path)?;
            print!("{}", render_table(&report));
        }
        Command::Eval { state, test, metrics } => {
            let model = read_state(&resolve(state, &cfg.paths.state, &cfg, "state.json")?)?;
            let sets = match test {
                Some(p) => split_by_task(&read_embeddings(p)?, model.tasks()),
                None => load_stream(&cfg)?.tasks.into_iter().take(model.tasks()).map(|t| t.test).collect(),
            };
            let refs: Vec<&EmbeddingDataset> = sets.iter().collect();
            let row = evaluate_scenario(&model, &refs, model.scenario)?;
            let tii = tii_accuracy(&model, &refs)?;
            let report = MetricsReport::from_matrix(model.scenario, model.accuracy.clone(), Some(tii))?;
            if let Some(p) = metrics {
                write_json(&report, p)?;
            }
            print!("{}", render_table(&report));
            let stored = model.accuracy.rows().last().cloned().unwrap_or_default();
            if stored != row {
                return Err(Failure::Check(format!("final row recomputed as {row:?}, state holds {stored:?}")));
            }
            println!("final row reproduced");
        }
        Command::Predict { state, input, task } => {
            let model = read_state(&resolve(state, &cfg.paths.state, &cfg, "state.json")?)?;
            let ds = read_embeddings(input)?;
            let mut correct = 0usize;
            let mut out = std::io::stdout().lock();
            for (n, s) in ds.samples.iter().enumerate() {
                let (class_id, task_out) = match (task, model.scenario) {
                    (Some(t), _) => (predict_given_task(&model, &s.features, *t)?.0, Some(*t)),
                    (None, Scenario::Dil) => (predict_marginal(&model, &s.features)?.0, None),
                    (None, _) => {
                        let p = predict(&model, &s.features)?;
                        (p.class_id, Some(p.task))
                    }
                };
                correct += usize::from(class_id == s.class_id);
                let line = serde_json::json!({ "index": n, "class_id": class_id, "task": task_out, "truth": s.class_id });
                match writeln!(out, "{line}") {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
                    Err(e) => return Err(anyhow::Error::from(e).into()),
                }
            }
            if verbose && !ds.is_empty() {
                eprintln!("accuracy {:.4}", correct as f64 / ds.len() as f64);
            }
        }
        Command::CheckTheorems { random_tables, zero_rate, state, test } => {
            if *random_tables == 0 {
                return Err(usage(anyhow!("--random-tables must be >= 1")));
            }
            let r = run_random_suite(*random_tables, cfg.seed, *zero_rate)?;
            println!("random tables            {} CIL + {} DIL", r.tables, r.tables);
            println!("identity max deviation   {:.3e}", r.identity_max_deviation);
            println!("task-given max deviation {:.3e}", r.til_max_deviation);
            println!("CIL bound violations     {}", r.cil_violations);
            println!("DIL bound violations     {}", r.dil_violations);
            println!("TIL bound violations     {}", r.til_violations);
            println!("necessity violations     {}", r.necessity_violations);
            println!("necessity not applicable {}", r.necessity_not_applicable);
            println!("vacuous (infinite)       {}", r.vacuous);
            let mut failed = !r.passed();
            if let (Some(sp), Some(tp)) = (state, test) {
                let model = read_state(sp)?;
                let sets = split_by_task(&read_embeddings(tp)?, model.tasks());
                let refs: Vec<&EmbeddingDataset> = sets.iter().filter(|d| !d.is_empty()).collect();
                if refs.len() != sets.len() {
                    return Err(usage(anyhow!("test file lacks samples for some trained task")));
                }
                let b = empirical_bounds_from_model(&model, &refs)?;
                print_bound("trained model", &b);
                failed |= !b.holds;
            }
            if failed {
                return Err(Failure::Check("a bound, identity or inequality was violated".into()));
            }
        }
        Command::Fewshot { state, pool, episodes, episode } => {
            let model = read_state(&resolve(state, &cfg.paths.state, &cfg, "state.json")?)?;
            let pool = read_embeddings(pool)?;
            let fs_cfg = FewShotConfig {
                n_way: episode.n_way,
                k_shot: episode.k_shot,
                query_per_class: episode.query,
                steps: episode.steps,
                use_shared_lora: !episode.no_shared_lora,
                episode_adapter: episode.episode_adapter,
                shuffle_query_labels: episode.shuffle_labels,
                ..FewShotConfig::default()
            };
            fs_cfg.validate()?;
            if *episodes == 0 {
                return Err(usage(anyhow!("--episodes must be >= 1")));
            }
            let acc = run_episodes(&model, &pool, &fs_cfg, cfg.seed, *episodes)?;
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let sd = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            println!("{}-way {}-shot over {} episodes: mean {:.4} sd {:.4}", fs_cfg.n_way, fs_cfg.k_shot, acc.len(), mean, sd);
        }
        Command::Report { metrics, svg } => {
            let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display())).map_err(usage)?;
            let report: MetricsReport = serde_json::from_str(&text).context("parsing metrics").map_err(usage)?;
            print!("{}", render_table(&report));
            if let Some(p) = svg {
                write_atomic(p, render_svg(&report.matrix).as_bytes())?;
            }
        }
    }
    Ok(())
}
