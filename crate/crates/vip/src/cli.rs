//! The `vip` command line.
//!
//! Exit status is 0 on success, 1 for bad flags and 2 when a command fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vip_core::data::{generate_synthetic, load_csv, planted_model, CsvSchema, Dataset, SyntheticSpec};
use vip_core::metrics::{
    accuracy_vs_length_curve, budget_curve, normalized_auc, oracle_agreement, visited_histories, write_budget_csv,
    Agreement, BudgetPoint, CurvePoint, SweepRule, DEFAULT_AGREEMENT_EPSILON,
};
use vip_core::networks::Checkpoint;
use vip_core::oracle::{sample_from_model, DiscreteJointModel};
use vip_core::pursuit::{run_pursuit, run_pursuit_batch, LearnedPolicy, StoppingRule, Strategy};
use vip_core::query::{encode_answer, AnswerDomain, AnswerVector, QuerySet, Trajectory};
use vip_core::rng::derive_seed;
use vip_core::trainer::{train, TrainConfig};

use crate::service::{port_from_env, serve, AppState};

type CmdResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

/// Stopping rule for the trajectories whose histories are scored against
/// the oracle.
pub const DEFAULT_AGREEMENT_STOP: &str = "map:0.05";
/// ε values swept for the accuracy-vs-length curve.
pub const DEFAULT_SWEEP: [f64; 7] = [0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01];

#[derive(Parser, Debug)]
#[command(name = "vip", version, about = "Learned sequential query selection with an exact oracle")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    SymcatMini,
    Planted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Binary01,
    Pm1,
    Ternary,
}

impl From<DomainArg> for AnswerDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Binary01 => AnswerDomain::Binary01,
            DomainArg::Pm1 => AnswerDomain::BinaryPM1,
            DomainArg::Ternary => AnswerDomain::TernaryPM10,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train.csv, test.csv, model.json and queries.json to a directory.
    Generate {
        #[arg(long, value_enum, default_value = "symcat-mini")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_rows: Option<usize>,
        #[arg(long)]
        test_rows: Option<usize>,
        /// Query count for the planted profile.
        #[arg(long, default_value_t = 4)]
        num_queries: usize,
    },
    /// Train a classifier/querier pair and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with TrainConfig fields; missing fields take profile values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "fast")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines; defaults to `<out>.report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Query set JSON; defaults to queries.json next to the data.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy curves, normalized AUC and oracle agreement as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth model for the agreement score.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Budget curves as CSV.
        #[arg(long)]
        curve_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        trajectories: usize,
        #[arg(long, default_value = DEFAULT_AGREEMENT_STOP)]
        agreement_stop: String,
        #[arg(long, default_value_t = DEFAULT_AGREEMENT_EPSILON)]
        epsilon_mi: f64,
        #[arg(long, default_value_t = 0)]
        random_seed: u64,
    },
    /// Run one pursuit and print its steps.
    Pursue {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON object mapping query names to raw answers, or an array of
        /// raw answers in query order.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "map:0.05")]
        stop: String,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
    /// Start the HTTP session service.
    Serve {
        /// Checkpoint files, each served under its file stem.
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        /// Overrides VIP_PORT and the default 8650.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            2
        }
    }
}

pub fn execute(command: Command) -> CmdResult {
    match command {
        Command::Generate {
            profile,
            seed,
            out,
            train_rows,
            test_rows,
            num_queries,
        } => generate(profile, seed, &out, train_rows, test_rows, num_queries),
        Command::Train {
            data,
            config,
            profile,
            out,
            report,
            queries,
            domain,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => config_with_profile(&fs::read_to_string(path)?, &profile)?,
                None => TrainConfig::profile(&profile)?,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let dataset = load_training_data(&data, queries.as_deref(), domain)?;
            let report = report.unwrap_or_else(|| with_suffix(&out, ".report.jsonl"));
            train_command(&dataset, &cfg, &out, &report)
        }
        Command::Eval {
            ckpt,
            data,
            oracle,
            out,
            curve_csv,
            trajectories,
            agreement_stop,
            epsilon_mi,
            random_seed,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let dataset = load_csv(&data, &CsvSchema::for_dataset(&ckpt.queries, &ckpt.labels))?;
            let oracle = oracle.map(|p| DiscreteJointModel::from_json(&fs::read_to_string(p)?)).transpose()?;
            let stop: StoppingRule = agreement_stop.parse()?;
            let options = EvalOptions {
                trajectories,
                agreement_stop: stop,
                epsilon_mi,
                random_seed,
            };
            let report = evaluate(&ckpt, &dataset, oracle.as_ref(), &options)?;
            if let Some(path) = curve_csv {
                write_budget_csv(
                    &[("learned", &report.budget_curve), ("random", &report.budget_curve_random)],
                    fs::File::create(path)?,
                )?;
            }
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Pursue {
            ckpt,
            input,
            stop,
            top_k,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let x = read_answers(&fs::read_to_string(input)?, &ckpt.queries)?;
            let stop: StoppingRule = stop.parse()?;
            let t = run_pursuit(&x, &Strategy::Learned(&ckpt.querier), &ckpt.classifier, stop)?;
            let stdout = std::io::stdout();
            print_trajectory(&mut stdout.lock(), &t, &ckpt, top_k)?;
            Ok(())
        }
        Command::Serve { ckpt, port, host } => {
            let state = Arc::new(AppState::from_files(&ckpt)?);
            let port = port.unwrap_or_else(port_from_env);
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            eprintln!("serving {} checkpoint(s) on http://{addr}", ckpt.len());
            runtime.block_on(serve(addr, state))?;
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Overlays the fields present in `json` onto the named profile.
pub fn config_with_profile(json: &str, profile: &str) -> CmdResult<TrainConfig> {
    let mut base = serde_json::to_value(TrainConfig::profile(profile)?)?;
    let overlay: Value = serde_json::from_str(json)?;
    let Value::Object(fields) = overlay else {
        return Err("config must be a JSON object".into());
    };
    for (k, v) in fields {
        base[k] = v;
    }
    Ok(TrainConfig::from_json(&base.to_string())?)
}

fn generate(
    profile: Profile,
    seed: u64,
    out: &Path,
    train_rows: Option<usize>,
    test_rows: Option<usize>,
    num_queries: usize,
) -> CmdResult {
    let (train, test, model) = match profile {
        Profile::SymcatMini => {
            let base = SyntheticSpec::symcat_mini(seed);
            generate_synthetic(&SyntheticSpec {
                train_rows: train_rows.unwrap_or(base.train_rows),
                test_rows: test_rows.unwrap_or(base.test_rows),
                ..base
            })?
        }
        Profile::Planted => {
            let model = planted_model(num_queries)?;
            let train = sample_from_model(&model, train_rows.unwrap_or(2000), derive_seed(seed, 1))?;
            let test = sample_from_model(&model, test_rows.unwrap_or(1000), derive_seed(seed, 2))?;
            (train, test, model)
        }
    };
    fs::create_dir_all(out)?;
    train.save_csv(out.join("train.csv"))?;
    test.save_csv(out.join("test.csv"))?;
    fs::write(out.join("model.json"), model.to_json()? + "\n")?;
    fs::write(out.join("queries.json"), train.queries().to_json()? + "\n")?;
    println!(
        "wrote {} train and {} test rows ({} labels, {} queries) to {}",
        train.len(),
        test.len(),
        train.num_labels(),
        train.num_queries(),
        out.display()
    );
    Ok(())
}

fn load_training_data(data: &Path, queries: Option<&Path>, domain: Option<DomainArg>) -> CmdResult<Dataset> {
    let sibling = data.parent().map(|d| d.join("queries.json"));
    let schema = match (queries, domain) {
        (Some(path), _) => CsvSchema {
            queries: Some(QuerySet::from_json(&fs::read_to_string(path)?)?),
            ..Default::default()
        },
        (None, Some(domain)) => CsvSchema::uniform(domain.into()),
        (None, None) => match sibling.filter(|p| p.exists()) {
            Some(path) => CsvSchema {
                queries: Some(QuerySet::from_json(&fs::read_to_string(path)?)?),
                ..Default::default()
            },
            None => return Err("no query set: pass --queries or --domain, or put queries.json next to the data".into()),
        },
    };
    Ok(load_csv(data, &schema)?)
}

fn train_command(dataset: &Dataset, config: &TrainConfig, out: &Path, report_path: &Path) -> CmdResult {
    let trained = train(dataset, config)?;
    let ckpt = Checkpoint::new(
        dataset.queries().clone(),
        dataset.labels().to_vec(),
        trained.classifier,
        trained.querier,
        config.fingerprint(),
    )?;
    ckpt.save(out)?;
    let mut report = trained.report;
    report.checkpoint = Some(out.display().to_string());
    report.write_jsonl(fs::File::create(report_path)?)?;
    let last = report.epochs.last();
    println!(
        "trained {} epochs in {:.1}s; final loss {}; checkpoint {}",
        report.epochs.len(),
        report.wall_time_secs,
        last.map(|e| format!("{:.4}", e.loss)).unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub trajectories: usize,
    pub agreement_stop: StoppingRule,
    pub epsilon_mi: f64,
    pub random_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            trajectories: 500,
            agreement_stop: DEFAULT_AGREEMENT_STOP.parse().expect("valid default"),
            epsilon_mi: DEFAULT_AGREEMENT_EPSILON,
            random_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub agreement: f64,
    pub histories: usize,
    pub exact_matches: usize,
    pub epsilon_mi: f64,
    pub trajectories: usize,
    pub stop: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: usize,
    pub auc: f64,
    pub auc_random: f64,
    pub budget_curve: Vec<BudgetPoint>,
    pub budget_curve_random: Vec<BudgetPoint>,
    pub length_curve: Vec<CurvePoint>,
    pub agreement: Option<AgreementReport>,
}

pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    oracle: Option<&DiscreteJointModel>,
    options: &EvalOptions,
) -> CmdResult<EvalReport> {
    let n = ckpt.queries.len();
    let learned = Strategy::Learned(&ckpt.querier);
    let random = Strategy::Random {
        seed: options.random_seed,
    };
    let budget = budget_curve(dataset.rows(), &learned, &ckpt.classifier)?;
    let budget_random = budget_curve(dataset.rows(), &random, &ckpt.classifier)?;
    let length_curve = accuracy_vs_length_curve(dataset.rows(), &learned, &ckpt.classifier, SweepRule::Map, &DEFAULT_SWEEP)?;
    let agreement = match oracle {
        Some(model) => {
            if model.num_queries() != n {
                return Err(format!("oracle has {} queries, checkpoint has {n}", model.num_queries()).into());
            }
            let count = options.trajectories.min(dataset.len());
            let xs: Vec<&AnswerVector> = dataset.rows()[..count].iter().map(|r| &r.answers).collect();
            let runs = run_pursuit_batch(&xs, &learned, &ckpt.classifier, options.agreement_stop)?;
            let histories = visited_histories(&runs, n);
            let a: Agreement =
                oracle_agreement(&mut LearnedPolicy(&ckpt.querier), model, &histories, options.epsilon_mi)?;
            Some(AgreementReport {
                agreement: a.rate(),
                histories: a.total,
                exact_matches: a.exact,
                epsilon_mi: options.epsilon_mi,
                trajectories: count,
                stop: options.agreement_stop.to_string(),
            })
        }
        None => None,
    };
    Ok(EvalReport {
        rows: dataset.len(),
        auc: normalized_auc(&budget, n)?,
        auc_random: normalized_auc(&budget_random, n)?,
        budget_curve: budget,
        budget_curve_random: budget_random,
        length_curve,
        agreement,
    })
}

/// Raw answers keyed by query name, or listed in query order.
pub fn read_answers(text: &str, queries: &QuerySet) -> CmdResult<AnswerVector> {
    let token = |v: &Value| -> CmdResult<String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            other => Err(format!("unsupported answer {other}").into()),
        }
    };
    let value: Value = serde_json::from_str(text)?;
    let value = match value {
        Value::Object(mut m) if m.contains_key("answers") => m.remove("answers").expect("checked"),
        v => v,
    };
    let raw: Vec<String> = match value {
        Value::Array(items) => {
            if items.len() != queries.len() {
                return Err(format!("expected {} answers, got {}", queries.len(), items.len()).into());
            }
            items.iter().map(token).collect::<CmdResult<_>>()?
        }
        Value::Object(map) => queries
            .queries()
            .iter()
            .map(|q| {
                map.get(&q.name)
                    .or_else(|| map.get(&format!("q_{}", q.name)))
                    .ok_or_else(|| format!("no answer for query {:?}", q.name).into())
                    .and_then(token)
            })
            .collect::<CmdResult<_>>()?,
        _ => return Err("input must be a JSON object or array".into()),
    };
    let values = queries
        .queries()
        .iter()
        .zip(&raw)
        .map(|(q, r)| encode_answer(r, q).map_err(|e| format!("query {:?}: {e}", q.name).into()))
        .collect::<CmdResult<Vec<f64>>>()?;
    Ok(AnswerVector::new(values))
}

/// Step table: query, answer and the top posterior labels after each step.
pub fn print_trajectory<W: Write>(out: &mut W, t: &Trajectory, ckpt: &Checkpoint, top_k: usize) -> std::io::Result<()> {
    let top = |p: &vip_core::query::Posterior| {
        p.top_k(top_k.max(1))
            .into_iter()
            .map(|(y, prob)| format!("{} {:.3}", ckpt.labels[y], prob))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let width = ckpt.queries.queries().iter().map(|q| q.name.len()).max().unwrap_or(5).max(7);
    writeln!(out, "{:>4}  {:<width$}  {:<8}  top posterior", "step", "query", "answer")?;
    writeln!(out, "{:>4}  {:<width$}  {:<8}  {}", 0, "(prior)", "", top(&t.prior))?;
    for (i, s) in t.steps.iter().enumerate() {
        let spec = &ckpt.queries.queries()[s.query];
        let answer = spec.domain.raw_token(s.answer).unwrap_or("?");
        writeln!(out, "{:>4}  {:<width$}  {:<8}  {}", i + 1, spec.name, answer, top(&s.posterior))?;
    }
    let p = t.final_posterior();
    writeln!(
        out,
        "prediction: {} (p = {:.3}) after {} queries, stopped by {:?}",
        ckpt.labels[t.prediction],
        p.probs()[t.prediction],
        t.len(),
        t.stop_reason
    )
}
