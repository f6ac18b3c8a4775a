use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use semgraph::data::{format_anchoring, parse_dataset, tokenize, write_dataset};
use semgraph::eval::{exact_match, format_accuracy, program_lines, FAIL};
use semgraph::grammar::{parse_grammar, serialize_ast};
use semgraph::graph::{build_graph, check_feasible, solution_to_ast, WeightFile};
use semgraph::losses::{decode, score_graph, train, ScorerParams, TrainConfig, TrainMode};
use semgraph::selftest::{format_report, run_selftest, SelftestConfig};
use semgraph::solver::{latent_anchor, map_relaxation, SolveResult, SolverConfig};
use semgraph::synth::synthetic_dataset;
use semgraph::{ExtendedGraph, Grammar};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: semgraph::Error },
    #[error(transparent)]
    Core(#[from] semgraph::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "semgraph", version, about = "Graph-based semantic parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Conditional-gradient iterations
    #[arg(long, global = true, default_value_t = 500)]
    iters: usize,
    /// Dual-gap tolerance
    #[arg(long, global = true, default_value_t = 1e-6)]
    eps: f64,
    /// Initial penalty scale
    #[arg(long, global = true, default_value_t = 1.0)]
    beta0: f64,
    /// Worker threads (0: one per core)
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Skip rounding and report the relaxed solution
    #[arg(long, global = true)]
    no_round: bool,
    /// Solver traces on stderr
    #[arg(long, global = true)]
    verbose: bool,
    /// Where to write the run manifest (default: next to the output file)
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one program per sentence
    Parse {
        #[arg(long)]
        grammar: PathBuf,
        #[command(flatten)]
        scorer: Scorer,
        /// One sentence per line; only the first tab-separated field is read
        #[arg(long)]
        input: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Anchor the programs of a dataset on its sentences
    Align {
        #[arg(long)]
        grammar: PathBuf,
        #[command(flatten)]
        scorer: Scorer,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Fit the linear scorer
    Train {
        #[arg(long)]
        grammar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Supervised)]
        mode: Mode,
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        /// Starting parameters
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Exact-match accuracy of predicted against gold programs
    Eval {
        #[arg(long)]
        gold: PathBuf,
        /// Predictions; only the first tab-separated field is read
        #[arg(long)]
        pred: PathBuf,
    },
    /// Oracle-backed property checks
    Selftest {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Multiplies every numeric tolerance
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic grammar and corpus
    Gen {
        #[arg(long, default_value_t = 8)]
        tags: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Scorer {
    /// Hand-written weight file, shared by every sentence
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    weights: Option<PathBuf>,
    /// Trained scorer parameters
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Supervised,
    Weak,
}

#[derive(Serialize)]
struct Timing {
    total_ms: f64,
    items: usize,
    median_item_ms: Option<f64>,
    max_item_ms: Option<f64>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    grammar: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: BTreeMap<String, Value>,
    seed: u64,
    timing: Timing,
}

struct Run {
    text: String,
    outputs: Vec<PathBuf>,
    item_times: Vec<Duration>,
    ok: bool,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn load_grammar(path: &Path) -> Result<Arc<Grammar>> {
    let text = read(path)?;
    parse_grammar(&text).map(Arc::new).map_err(|source| CliError::Input {
        path: path.to_owned(),
        source,
    })
}

fn solver_config(c: &Common) -> Result<SolverConfig> {
    let cfg = SolverConfig {
        beta0: c.beta0,
        max_iters: c.iters,
        eps: c.eps,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

enum Weights {
    File(WeightFile, PathBuf),
    Params(ScorerParams),
}

impl Weights {
    fn load(s: &Scorer, grammar: &Grammar) -> Result<Self> {
        match (&s.weights, &s.checkpoint) {
            (Some(p), _) => {
                let wf = WeightFile::parse(&read(p)?, grammar).map_err(|source| CliError::Input {
                    path: p.clone(),
                    source,
                })?;
                Ok(Weights::File(wf, p.clone()))
            }
            (None, Some(p)) => {
                let params = ScorerParams::from_text(&read(p)?).map_err(|source| CliError::Input {
                    path: p.clone(),
                    source,
                })?;
                Ok(Weights::Params(params))
            }
            (None, None) => Err(CliError::Invalid("either --weights or --checkpoint is required".into())),
        }
    }

    fn graph(&self, words: &[String], grammar: &Arc<Grammar>) -> Result<ExtendedGraph> {
        match self {
            Weights::File(wf, path) => {
                if wf.max_word() > words.len() {
                    return Err(CliError::Invalid(format!(
                        "{}: mentions word {} but the sentence has {} words",
                        path.display(),
                        wf.max_word(),
                        words.len()
                    )));
                }
                Ok(build_graph(words.len(), grammar.clone(), wf))
            }
            Weights::Params(p) => Ok(score_graph(p, words, grammar)),
        }
    }

    fn path(&self, s: &Scorer) -> Option<PathBuf> {
        s.weights.clone().or_else(|| s.checkpoint.clone())
    }
}

fn trace(verbose: bool, item: usize, solve: &SolveResult) {
    if verbose {
        for r in &solve.trace {
            eprintln!("[{item}] {r}");
        }
    }
}

// Relaxed point only: the program when it happens to be feasible and
// integral, plus the arcs carrying mass.
fn relaxed_line(g: &ExtendedGraph, solve: &SolveResult, tol: f64) -> String {
    let z = &solve.z_fractional;
    let integral = z.is_integral(1e-9) && check_feasible(g, &z.rounded()).is_ok();
    let program = if integral {
        solution_to_ast(g, &z.rounded())
            .map(|p| serialize_ast(g.grammar(), &p.ast))
            .unwrap_or_else(|_| FAIL.into())
    } else {
        FAIL.into()
    };
    let support: Vec<String> = (0..g.num_arcs())
        .filter(|&a| z.y()[a] > tol)
        .map(|a| format!("{}={:.4}", g.arc_name(a), z.y()[a]))
        .collect();
    format!(
        "{program}\tgap={:.3e}\tintegral={integral}\tobjective={:.6}\tsupport={}",
        solve.dual_gap,
        z.dot(&g.weights()),
        support.join(",")
    )
}

fn cmd_parse(c: &Common, grammar: &Arc<Grammar>, weights: &Weights, input: &str) -> Result<Run> {
    let cfg = solver_config(c)?;
    let sentences: Vec<Vec<String>> = input
        .lines()
        .map(|l| tokenize(l.split('\t').next().unwrap_or("")))
        .filter(|w| !w.is_empty())
        .collect();
    let graphs = sentences
        .iter()
        .map(|w| weights.graph(w, grammar))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<(String, Duration)> = pool(c.jobs)?.install(|| {
        graphs
            .par_iter()
            .enumerate()
            .map(|(k, g)| -> Result<(String, Duration)> {
                let start = Instant::now();
                let line = if c.no_round {
                    let solve = map_relaxation(g, &cfg)?;
                    trace(c.verbose, k + 1, &solve);
                    relaxed_line(g, &solve, cfg.support_tol)
                } else {
                    let p = decode(g, &cfg)?;
                    trace(c.verbose, k + 1, &p.solve);
                    format!(
                        "{}\tgap={:.3e}\tintegral={}",
                        p.program(grammar).unwrap_or_else(|| FAIL.into()),
                        p.solve.dual_gap,
                        p.solve.integral_feasible
                    )
                };
                Ok((line, start.elapsed()))
            })
            .collect::<Result<_>>()
    })?;
    Ok(lines_run(results))
}

fn lines_run(results: Vec<(String, Duration)>) -> Run {
    let mut text = String::new();
    let mut item_times = Vec::new();
    for (line, t) in results {
        text.push_str(&line);
        text.push('\n');
        item_times.push(t);
    }
    Run {
        text,
        outputs: Vec::new(),
        item_times,
        ok: true,
    }
}

fn cmd_align(c: &Common, grammar: &Arc<Grammar>, weights: &Weights, data: &str) -> Result<Run> {
    let cfg = solver_config(c)?;
    let data = parse_dataset(data, grammar)?;
    let graphs = data
        .iter()
        .map(|inst| weights.graph(&inst.words, grammar))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<(String, Duration)> = pool(c.jobs)?.install(|| {
        data.par_iter()
            .zip(&graphs)
            .enumerate()
            .map(|(k, (inst, g))| {
                let start = Instant::now();
                let line = match latent_anchor(g, &inst.program, &cfg) {
                    Ok(r) => {
                        trace(c.verbose, k + 1, &r.solve);
                        if r.solve.integral_feasible {
                            format!(
                                "{}\tgap={:.3e}",
                                format_anchoring(&r.alignment.words(g)),
                                r.solve.dual_gap
                            )
                        } else {
                            format!("{FAIL}\tanchoring is not injective")
                        }
                    }
                    Err(e) => format!("{FAIL}\t{e}"),
                };
                (line, start.elapsed())
            })
            .collect()
    });
    Ok(lines_run(results))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    c: &Common,
    grammar: &Arc<Grammar>,
    data: &str,
    dev: Option<&str>,
    mode: Mode,
    epochs: usize,
    lr: f64,
    init: Option<&str>,
    out: &Path,
) -> Result<Run> {
    let data = parse_dataset(data, grammar)?;
    let dev = match dev {
        Some(d) => parse_dataset(d, grammar)?,
        None => Vec::new(),
    };
    let mut params = match init {
        Some(text) => ScorerParams::from_text(text)?,
        None => ScorerParams::new(ScorerParams::DEFAULT_SLOTS, lr, c.seed),
    };
    params.learning_rate = lr;
    let cfg = TrainConfig {
        mode: match mode {
            Mode::Supervised => TrainMode::Supervised,
            Mode::Weak => TrainMode::Weak,
        },
        epochs,
        solver: solver_config(c)?,
        target_dev: None,
    };
    let mut text = String::new();
    let mut item_times = Vec::new();
    let mut last = Instant::now();
    pool(c.jobs)?.install(|| {
        train(&data, grammar, &cfg, &mut params, &dev, |log| {
            let mut line = format!("epoch={} loss={:.6}", log.epoch, log.loss);
            if let Some(d) = log.dev_exact {
                line.push_str(&format!(" dev_exact={}", format_accuracy(d)));
            }
            if c.verbose {
                eprintln!("{line}");
            }
            text.push_str(&line);
            text.push('\n');
            item_times.push(last.elapsed());
            last = Instant::now();
        })
    })?;
    write(out, &params.to_text())?;
    Ok(Run {
        text,
        outputs: vec![out.to_owned()],
        item_times,
        ok: true,
    })
}

fn cmd_eval(gold: &str, pred: &str) -> Result<Run> {
    let gold = program_lines(gold);
    let pred: Vec<&str> = program_lines(pred)
        .into_iter()
        .map(|l| l.split('\t').next().unwrap_or(""))
        .collect();
    let acc = exact_match(&gold, &pred)?;
    Ok(Run {
        text: format!("{}\n", format_accuracy(acc)),
        outputs: Vec::new(),
        item_times: Vec::new(),
        ok: true,
    })
}

fn cmd_selftest(c: &Common, instances: usize, tolerance_scale: f64) -> Result<Run> {
    let cfg = SelftestConfig {
        seed: c.seed,
        instances,
        tolerance_scale,
    };
    let results = pool(c.jobs)?.install(|| run_selftest(&cfg));
    Ok(Run {
        text: format_report(&cfg, &results),
        outputs: Vec::new(),
        item_times: Vec::new(),
        ok: results.iter().all(|r| r.passed),
    })
}

fn cmd_gen(c: &Common, tags: usize, train: usize, test: usize, dir: &Path) -> Result<Run> {
    if tags <= 4 {
        return Err(CliError::Invalid("--tags must exceed 4".into()));
    }
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let (corpus, tr, te) = synthetic_dataset(&mut rng, tags, train, test)?;
    let g = &corpus.grammar;
    let files = [
        ("grammar.txt", g.to_text()),
        ("train.tsv", write_dataset(&tr, g)),
        ("test.tsv", write_dataset(&te, g)),
        ("test.sentences", te.iter().map(|i| i.words.join(" ") + "\n").collect()),
        ("test.gold", te.iter().map(|i| serialize_ast(g, &i.program) + "\n").collect()),
    ];
    let mut outputs = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write(&path, &text)?;
        outputs.push(path);
    }
    Ok(Run {
        text: String::new(),
        outputs,
        item_times: Vec::new(),
        ok: true,
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    let start = Instant::now();
    let mut config = BTreeMap::new();
    config.insert("iters".to_string(), json!(c.iters));
    config.insert("eps".to_string(), json!(c.eps));
    config.insert("beta0".to_string(), json!(c.beta0));
    config.insert("jobs".to_string(), json!(c.jobs));
    config.insert("no_round".to_string(), json!(c.no_round));
    let mut inputs = Vec::new();
    let mut grammar_path = None;
    let (name, out, mut run, manifest_default) = match &cli.command {
        Command::Parse {
            grammar,
            scorer,
            input,
            output,
        } => {
            let g = load_grammar(grammar)?;
            let w = Weights::load(scorer, &g)?;
            grammar_path = Some(display(grammar));
            inputs.extend(w.path(scorer).iter().map(|p| display(p)));
            inputs.push(display(input));
            ("parse", output.clone(), cmd_parse(c, &g, &w, &read(input)?)?, output.clone())
        }
        Command::Align {
            grammar,
            scorer,
            data,
            output,
        } => {
            let g = load_grammar(grammar)?;
            let w = Weights::load(scorer, &g)?;
            grammar_path = Some(display(grammar));
            inputs.extend(w.path(scorer).iter().map(|p| display(p)));
            inputs.push(display(data));
            let text = read(data)?;
            let r = cmd_align(c, &g, &w, &text).map_err(|e| match e {
                CliError::Core(source) => CliError::Input {
                    path: data.clone(),
                    source,
                },
                e => e,
            })?;
            ("align", output.clone(), r, output.clone())
        }
        Command::Train {
            grammar,
            data,
            dev,
            mode,
            epochs,
            lr,
            checkpoint,
            output,
        } => {
            let g = load_grammar(grammar)?;
            grammar_path = Some(display(grammar));
            inputs.push(display(data));
            inputs.extend(dev.iter().map(|p| display(p)));
            inputs.extend(checkpoint.iter().map(|p| display(p)));
            config.insert(
                "mode".to_string(),
                json!(match mode {
                    Mode::Supervised => "supervised",
                    Mode::Weak => "weak",
                }),
            );
            config.insert("epochs".to_string(), json!(epochs));
            config.insert("lr".to_string(), json!(lr));
            let data_text = read(data)?;
            let dev_text = dev.as_deref().map(read).transpose()?;
            let init = checkpoint.as_deref().map(read).transpose()?;
            let r = cmd_train(
                c,
                &g,
                &data_text,
                dev_text.as_deref(),
                *mode,
                *epochs,
                *lr,
                init.as_deref(),
                output,
            )?;
            ("train", None, r, Some(output.clone()))
        }
        Command::Eval { gold, pred } => {
            inputs.push(display(gold));
            inputs.push(display(pred));
            ("eval", None, cmd_eval(&read(gold)?, &read(pred)?)?, None)
        }
        Command::Selftest {
            instances,
            tolerance_scale,
            output,
        } => {
            config.insert("instances".to_string(), json!(instances));
            config.insert("tolerance_scale".to_string(), json!(tolerance_scale));
            (
                "selftest",
                output.clone(),
                cmd_selftest(c, *instances, *tolerance_scale)?,
                output.clone(),
            )
        }
        Command::Gen {
            tags,
            train,
            test,
            out_dir,
        } => {
            config.insert("tags".to_string(), json!(tags));
            config.insert("train".to_string(), json!(train));
            config.insert("test".to_string(), json!(test));
            let r = cmd_gen(c, *tags, *train, *test, out_dir)?;
            ("gen", None, r, Some(out_dir.join("corpus")))
        }
    };
    match &out {
        Some(path) => {
            write(path, &run.text)?;
            run.outputs.push(path.clone());
        }
        None => print!("{}", run.text),
    }
    let manifest_path = c
        .manifest
        .clone()
        .or_else(|| manifest_default.map(|p| PathBuf::from(format!("{}.manifest.json", p.display()))));
    if let Some(path) = manifest_path {
        let mut times = run.item_times.clone();
        times.sort();
        let manifest = RunManifest {
            command: name.to_string(),
            grammar: grammar_path,
            inputs,
            outputs: run.outputs.iter().map(|p| display(p)).collect(),
            config,
            seed: c.seed,
            timing: Timing {
                total_ms: ms(start.elapsed()),
                items: times.len(),
                median_item_ms: times.get(times.len() / 2).copied().map(ms),
                max_item_ms: times.last().copied().map(ms),
            },
        };
        write(&path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    }
    Ok(run.ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
