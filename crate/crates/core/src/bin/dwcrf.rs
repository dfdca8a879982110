//! `dwcrf` command-line tool.
//!
//! Every command first writes `<out-dir>/<command>.config.json`, the fully resolved flag set.
//! Passing that file back through `--config` reproduces the run.
//!
//! Exit codes: 0 success, 2 usage or contract error, 3 training budget exhausted
//! (artifacts are still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use dwcrf::data::{
    generate_synthetic, imbalance_subsample, load_dataset, load_dataset_with_alphabet, read_raw_trials,
    save_passthrough, Dataset, Mode, SynthConfig, ROOM2_LIKE,
};
use dwcrf::features::{extract_features, feature_names, FeatureConfig};
use dwcrf::metrics::{confusion, cross_validate, independent_t_test, mean_std, precision_recall_f, ConfusionMatrix, CvReport, CvScheme};
use dwcrf::model::{load_model, save_model, THETA_GRID, TAU_GRID};
use dwcrf::trainer::{train, Decoder};
use dwcrf::{Error, Method, TrainingConfig};

const OUT_DIR_ENV: &str = "DWCRF_OUT_DIR";

#[derive(Parser)]
#[command(name = "dwcrf", version, about = "Dynamically weighted CRFs for imbalanced sequence labeling")]
struct Cli {
    /// JSON document of flag values (keys are the long flag names). Explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $DWCRF_OUT_DIR or .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Raw sensor CSV -> feature CSV plus a feature-name manifest.
    Extract(ExtractArgs),
    /// Train a model on a feature CSV.
    Train(TrainArgs),
    /// Score a model on a feature CSV.
    Eval(EvalArgs),
    /// Cross-validate one or more methods and compare them.
    Cv(CvArgs),
    /// Thin non-preserved label runs to one position in n.
    Subsample(SubsampleArgs),
    /// Write a synthetic feature CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Window length in seconds [default: 4]
    #[arg(long)]
    window: Option<f64>,
    /// Number of RFID antennas [default: 4]
    #[arg(long)]
    antennas: Option<usize>,
    #[arg(long)]
    bed_antenna: Option<usize>,
    #[arg(long)]
    chair_antenna: Option<usize>,
    /// Allow rows without labels; they are written as `unlabeled`.
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// crf, fwcrf or dwcrf [default: crf]
    #[arg(long)]
    method: Option<String>,
    /// L2 strength [default: 0.01]
    #[arg(long)]
    theta: Option<f64>,
    /// Iterations before dynamic weighting; `inf` disables it [default: 5]
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip feature standardization.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// Forward-only (real-time) predictions.
    #[arg(long)]
    stream: bool,
    /// Jointly most likely path instead of per-position marginals.
    #[arg(long, conflicts_with = "stream")]
    viterbi: bool,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// 10fold622 or 4fold211 [default: 10fold622]
    #[arg(long)]
    scheme: Option<String>,
    /// Comma-separated methods [default: crf,dwcrf]
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated theta values.
    #[arg(long)]
    theta_grid: Option<String>,
    /// Comma-separated tau values for dwcrf.
    #[arg(long)]
    tau_grid: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stream: bool,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Keep one position in n inside non-preserved runs.
    #[arg(long)]
    n: Option<usize>,
    /// Class left untouched [default: majority class]
    #[arg(long)]
    preserve: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: Option<PathBuf>,
    /// Named class distribution [default: room2-like]
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated class distribution; overrides --preset.
    #[arg(long)]
    distribution: Option<String>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    stickiness: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    mean_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Outcome {
    Done,
    BudgetExhausted,
}

/// Merges explicit flags over the config document over defaults, remembering every value.
struct Resolver {
    doc: Map<String, Value>,
    resolved: Map<String, Value>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let doc = match path {
            None => Map::new(),
            Some(p) => {
                let text = fs::read(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                match serde_json::from_slice(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(Error::Config(format!("{}: config must be a JSON object", p.display()))),
                    Err(e) => return Err(Error::Config(format!("{}: {e}", p.display()))),
                }
            }
        };
        Ok(Self {
            doc,
            resolved: Map::new(),
        })
    }

    fn from_doc<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, Error> {
        match self.doc.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::Config(format!("config key {key:?}: {e}"))),
        }
    }

    fn get<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Error> {
        let value = match flag {
            Some(v) => v,
            None => self.from_doc(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_owned(), serde_json::to_value(&value).expect("flag values serialize"));
        Ok(value)
    }

    fn required<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> Result<T, Error> {
        let value = match flag {
            Some(v) => v,
            None => self
                .from_doc(key)?
                .ok_or_else(|| Error::Config(format!("--{key} is required")))?,
        };
        self.resolved.insert(key.to_owned(), serde_json::to_value(&value).expect("flag values serialize"));
        Ok(value)
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Error> {
        let value = flag || self.from_doc(key)?.unwrap_or(false);
        self.resolved.insert(key.to_owned(), Value::Bool(value));
        Ok(value)
    }

    fn explicit(&self, key: &str, flag_given: bool) -> bool {
        flag_given || self.doc.get(key).is_some_and(|v| !v.is_null())
    }

    fn write_snapshot(&self, out_dir: &Path, command: &str) -> Result<(), Error> {
        let path = out_dir.join(format!("{command}.config.json"));
        let mut text = serde_json::to_string_pretty(&Value::Object(self.resolved.clone())).expect("snapshot serializes");
        text.push('\n');
        write_file(&path, text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_tau(s: &str) -> Result<Option<u64>, Error> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "none" => Ok(None),
        v => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("tau must be a positive integer or `inf`, got {s:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::BudgetExhausted) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let mut r = Resolver::load(cli.config.as_deref())?;
    let env_dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from);
    let out_dir: PathBuf = r.get("out-dir", cli.out_dir, env_dir)?;
    let threads: usize = r.get("threads", cli.threads, 0)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Extract(a) => cmd_extract(&mut r, &out_dir, a),
        Command::Train(a) => cmd_train(&mut r, &out_dir, a),
        Command::Eval(a) => cmd_eval(&mut r, &out_dir, a),
        Command::Cv(a) => cmd_cv(&mut r, &out_dir, a),
        Command::Subsample(a) => cmd_subsample(&mut r, &out_dir, a),
        Command::Synth(a) => cmd_synth(&mut r, &out_dir, a),
    }
}

fn cmd_extract(r: &mut Resolver, out_dir: &Path, a: ExtractArgs) -> Result<Outcome, Error> {
    let defaults = FeatureConfig::default();
    let input: PathBuf = r.required("input", a.input)?;
    let output: PathBuf = r.get("output", a.output, out_dir.join("features.csv"))?;
    let cfg = FeatureConfig {
        window: r.get("window", a.window, defaults.window)?,
        antenna_count: r.get("antennas", a.antennas, defaults.antenna_count)?,
        bed_antenna: r.get("bed-antenna", a.bed_antenna, defaults.bed_antenna)?,
        chair_antenna: r.get("chair-antenna", a.chair_antenna, defaults.chair_antenna)?,
        labeled: !r.switch("unlabeled", a.unlabeled)?,
    };
    r.write_snapshot(out_dir, "extract")?;
    cfg.validate()?;

    let file = fs::File::open(&input).map_err(|e| Error::Io {
        path: input.clone(),
        source: e,
    })?;
    let trials = read_raw_trials(file, cfg.labeled, &input.display().to_string())?;
    let names = feature_names(&cfg);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv output: {e}"));
    let header = ["sequence_id", "label"].into_iter().map(String::from).chain(names.iter().cloned());
    w.write_record(header).map_err(csv_err)?;
    let mut rows_written = 0;
    for trial in &trials {
        let rows = extract_features(&trial.records, &FeatureConfig { labeled: false, ..cfg.clone() })?;
        for (row, label) in rows.iter().zip(&trial.labels) {
            let mut rec = vec![trial.id.clone(), label.clone().unwrap_or_else(|| "unlabeled".into())];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
            rows_written += 1;
        }
    }
    let mut bytes = format!("# extract window={} antennas={}\n", cfg.window, cfg.antenna_count).into_bytes();
    bytes.extend(w.into_inner().map_err(|e| Error::Config(format!("csv output: {e}")))?);
    write_file(&output, &bytes)?;
    let manifest = output.with_extension("features.txt");
    write_file(&manifest, (names.join("\n") + "\n").as_bytes())?;
    info!(
        "{} trials, {rows_written} rows, {} features -> {}",
        trials.len(),
        names.len(),
        output.display()
    );
    Ok(Outcome::Done)
}

fn resolve_training(r: &mut Resolver, f: TrainFlags) -> Result<TrainingConfig, Error> {
    let d = TrainingConfig::default();
    let method: String = r.get("method", f.method, d.method.as_str().to_owned())?;
    let method: Method = method.parse()?;
    let tau_given = r.explicit("tau", f.tau.is_some());
    let tau: String = r.get("tau", f.tau, d.tau.map_or("inf".into(), |t| t.to_string()))?;
    if method != Method::Dwcrf && tau_given {
        warn!("--tau only applies to dwcrf; ignored for {method}");
    }
    let config = TrainingConfig {
        method,
        theta: r.get("theta", f.theta, d.theta)?,
        tau: parse_tau(&tau)?,
        beta: r.get("beta", f.beta, d.beta)?,
        max_iterations: r.get("max-iterations", f.max_iterations, d.max_iterations)?,
        convergence_tol: r.get("tol", f.tol, d.convergence_tol)?,
        history_size: r.get("history", f.history, d.history_size)?,
        seed: r.get("seed", f.seed, d.seed)?,
        standardize: !r.switch("no-standardize", f.no_standardize)?,
    };
    config.validate()?;
    Ok(config)
}

fn cmd_train(r: &mut Resolver, out_dir: &Path, a: TrainArgs) -> Result<Outcome, Error> {
    let input: PathBuf = r.required("input", a.input)?;
    let config = resolve_training(r, a.flags)?;
    r.write_snapshot(out_dir, "train")?;

    let ds = load_dataset(&input, &Mode::Passthrough)?;
    info!(
        "{} sequences, {} positions, {} features, classes {:?}",
        ds.sequences.len(),
        ds.num_positions(),
        ds.dim(),
        ds.alphabet.names()
    );
    let model = train(&ds.sequences, &ds.alphabet, &config)?;
    let bundle = model.to_bundle(ds.feature_names.clone());
    save_model(&bundle, &out_dir.join("model.json"))?;
    let trace_path = out_dir.join("trace.csv");
    let mut trace = Vec::new();
    model
        .trace
        .write_csv(&mut trace)
        .map_err(|e| Error::Io {
            path: trace_path.clone(),
            source: e,
        })?;
    write_file(&trace_path, &trace)?;
    let last = model.trace.records.last().expect("trace holds the starting point");
    info!(
        "{} after {} iterations: objective {:.6}, train macro F {:.4}",
        if model.converged { "converged" } else { "budget exhausted" },
        model.iterations_used,
        last.objective,
        last.train_macro_f
    );
    Ok(if model.converged {
        Outcome::Done
    } else {
        Outcome::BudgetExhausted
    })
}

fn decoder_of(stream: bool, viterbi: bool) -> Decoder {
    if stream {
        Decoder::Stream
    } else if viterbi {
        Decoder::Viterbi
    } else {
        Decoder::Marginal
    }
}

fn cmd_eval(r: &mut Resolver, out_dir: &Path, a: EvalArgs) -> Result<Outcome, Error> {
    let model_path: PathBuf = r.required("model", a.model)?;
    let input: PathBuf = r.required("input", a.input)?;
    let stream = r.switch("stream", a.stream)?;
    let viterbi = r.switch("viterbi", a.viterbi)?;
    r.write_snapshot(out_dir, "eval")?;
    if stream && viterbi {
        return Err(Error::Config("--stream and --viterbi are exclusive".into()));
    }

    let bundle = load_model(&model_path)?;
    let ds = load_dataset_with_alphabet(&input, &Mode::Passthrough, Some(&bundle.alphabet))?;
    if ds.dim() != bundle.feature_names.len() {
        return Err(Error::Dimension {
            context: "feature columns vs model".into(),
            expected: bundle.feature_names.len(),
            actual: ds.dim(),
        });
    }
    if ds.feature_names != bundle.feature_names {
        warn!("feature column names differ from those the model was trained on");
    }
    let decoder = decoder_of(stream, viterbi);
    let mut cm = ConfusionMatrix::zeros(bundle.alphabet.len());
    for s in &ds.sequences {
        let pred = bundle.predict(s, decoder)?;
        cm.merge(&confusion(&pred, s.labels(), bundle.alphabet.len())?)?;
    }
    let report = precision_recall_f(&cm).with_names(&bundle.alphabet);
    write_file(&out_dir.join("eval.json"), (report.to_json() + "\n").as_bytes())?;
    write_file(&out_dir.join("eval.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(Outcome::Done)
}

fn cmd_cv(r: &mut Resolver, out_dir: &Path, a: CvArgs) -> Result<Outcome, Error> {
    let input: PathBuf = r.required("input", a.input)?;
    let scheme: String = r.get("scheme", a.scheme, "10fold622".into())?;
    let methods: String = r.get("methods", a.methods, "crf,dwcrf".into())?;
    let theta_default = THETA_GRID.map(|t| t.to_string()).join(",");
    let theta_grid: String = r.get("theta-grid", a.theta_grid, theta_default)?;
    let tau_default = TAU_GRID.map(|t| t.to_string()).join(",");
    let tau_grid: String = r.get("tau-grid", a.tau_grid, tau_default)?;
    let d = TrainingConfig::default();
    let max_iterations = r.get("max-iterations", a.max_iterations, d.max_iterations)?;
    let seed: u64 = r.get("seed", a.seed, 0)?;
    let stream = r.switch("stream", a.stream)?;
    r.write_snapshot(out_dir, "cv")?;

    let scheme: CvScheme = scheme.parse()?;
    let methods: Vec<Method> = parse_list(&methods, "method")?;
    let thetas: Vec<f64> = parse_list(&theta_grid, "theta")?;
    let taus = tau_grid.split(',').map(parse_tau).collect::<Result<Vec<_>, _>>()?;
    let ds = load_dataset(&input, &Mode::Passthrough)?;
    let decoder = decoder_of(stream, false);

    let mut reports: Vec<(Method, CvReport)> = Vec::new();
    for &method in &methods {
        let method_taus = if method == Method::Dwcrf { taus.clone() } else { vec![d.tau] };
        let grid: Vec<TrainingConfig> = thetas
            .iter()
            .flat_map(|&theta| {
                method_taus.iter().map(move |&tau| TrainingConfig {
                    method,
                    theta,
                    tau,
                    max_iterations,
                    seed,
                    ..TrainingConfig::default()
                })
            })
            .collect();
        info!("{method}: {} grid entries", grid.len());
        let report = cross_validate(&ds.sequences, &ds.alphabet, scheme, &grid, seed, decoder)?;
        reports.push((method, report));
    }
    write_cv_outputs(out_dir, &ds, &reports)?;
    Ok(Outcome::Done)
}

fn write_cv_outputs(out_dir: &Path, ds: &Dataset, reports: &[(Method, CvReport)]) -> Result<(), Error> {
    let classes = ds.alphabet.names();
    let mut summary = String::from("method,mean_macro_f,sd_macro_f");
    for c in classes {
        summary.push_str(&format!(",mean_f_{c}"));
    }
    summary.push('\n');
    let mut folds = String::from("method,rotation,class,precision,recall,fscore,support\n");
    let mut table = format!("{:<8} {:>16}", "method", "macro F");
    for c in classes {
        table.push_str(&format!(" {:>10}", truncate(c, 10)));
    }
    table.push('\n');
    let mut json_methods = Vec::new();
    for (method, rep) in reports {
        let per_class_mean: Vec<f64> = (0..classes.len())
            .map(|k| mean_std(&rep.folds.iter().map(|f| f.report.per_class[k].fscore).collect::<Vec<_>>()).0)
            .collect();
        summary.push_str(&format!("{method},{},{}", rep.mean_macro_f, rep.std_macro_f));
        table.push_str(&format!(
            "{:<8} {:>16}",
            method.as_str(),
            format!("{:.4} ± {:.4}", rep.mean_macro_f, rep.std_macro_f)
        ));
        for v in &per_class_mean {
            summary.push_str(&format!(",{v}"));
            table.push_str(&format!(" {v:>10.4}"));
        }
        summary.push('\n');
        table.push('\n');
        for f in &rep.folds {
            for c in &f.report.per_class {
                folds.push_str(&format!(
                    "{method},{},{},{},{},{},{}\n",
                    f.rotation, c.class, c.precision, c.recall, c.fscore, c.support
                ));
            }
            folds.push_str(&format!("{method},{},macro,,,{},\n", f.rotation, f.report.macro_f));
        }
        json_methods.push(serde_json::json!({
            "method": method.as_str(),
            "mean_macro_f": rep.mean_macro_f,
            "sd_macro_f": rep.std_macro_f,
            "fold_of_sequence": rep.fold_of_sequence,
            "folds": rep.folds.iter().map(|f| serde_json::json!({
                "rotation": f.rotation,
                "test_sequences": f.test_indices.iter().map(|&i| ds.sequences[i].id()).collect::<Vec<_>>(),
                "theta": f.best_config.theta,
                "tau": f.best_config.tau,
                "iterations_used": f.iterations_used,
                "report": f.report,
            })).collect::<Vec<_>>(),
        }));
    }
    let mut pvalues = String::from("method_a,method_b,t,p\n");
    let mut json_p = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (t, p) = independent_t_test(&reports[i].1.macro_f_values(), &reports[j].1.macro_f_values())?;
            pvalues.push_str(&format!("{},{},{t},{p}\n", reports[i].0, reports[j].0));
            table.push_str(&format!("t-test {} vs {}: t = {t:.4}, p = {p:.4}\n", reports[i].0, reports[j].0));
            json_p.push(serde_json::json!({
                "method_a": reports[i].0.as_str(),
                "method_b": reports[j].0.as_str(),
                "t": finite_or_string(t),
                "p": p,
            }));
        }
    }
    let json = serde_json::json!({ "methods": json_methods, "t_tests": json_p });
    write_file(&out_dir.join("cv_summary.csv"), summary.as_bytes())?;
    write_file(&out_dir.join("cv_folds.csv"), folds.as_bytes())?;
    write_file(&out_dir.join("cv_pvalues.csv"), pvalues.as_bytes())?;
    write_file(
        &out_dir.join("cv_report.json"),
        (serde_json::to_string_pretty(&json).expect("report serializes") + "\n").as_bytes(),
    )?;
    print!("{table}");
    Ok(())
}

fn finite_or_string(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else {
        Value::from(v.to_string())
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn cmd_subsample(r: &mut Resolver, out_dir: &Path, a: SubsampleArgs) -> Result<Outcome, Error> {
    let input: PathBuf = r.required("input", a.input)?;
    let output: PathBuf = r.get("output", a.output, out_dir.join("subsampled.csv"))?;
    let n: usize = r.required("n", a.n)?;
    let preserve: Option<String> = r.get("preserve", a.preserve.map(Some), None)?;
    r.write_snapshot(out_dir, "subsample")?;

    let ds = load_dataset(&input, &Mode::Passthrough)?;
    let preserved = match preserve {
        Some(name) => ds
            .alphabet
            .index_of(&name)
            .ok_or_else(|| Error::Contract(format!("preserved class {name:?} not in {:?}", ds.alphabet.names())))?,
        None => {
            let k = ds.majority_class();
            info!("preserving the majority class {:?}", ds.alphabet.name(k).unwrap_or_default());
            k
        }
    };
    let reduced = imbalance_subsample(&ds, n, preserved)?;
    let name = ds.alphabet.name(preserved).unwrap_or_default();
    save_passthrough(&reduced, &[format!("subsample n={n} preserved={name}")], &output)?;
    info!("{} -> {} positions", ds.num_positions(), reduced.num_positions());
    Ok(Outcome::Done)
}

fn cmd_synth(r: &mut Resolver, out_dir: &Path, a: SynthArgs) -> Result<Outcome, Error> {
    let output: PathBuf = r.get("output", a.output, out_dir.join("synthetic.csv"))?;
    let preset: String = r.get("preset", a.preset, "room2-like".into())?;
    let distribution: Option<String> = r.get("distribution", a.distribution.map(Some), None)?;
    let base = SynthConfig::room2_like(8, 40, 300, 0);
    let features = r.get("features", a.features, base.num_features)?;
    let stickiness = r.get("stickiness", a.stickiness, base.transition_stickiness)?;
    let separation = r.get("separation", a.separation, base.emission_separation)?;
    let sequences = r.get("sequences", a.sequences, base.sequence_count)?;
    let mean_length = r.get("mean-length", a.mean_length, base.mean_length)?;
    let seed = r.get("seed", a.seed, base.seed)?;
    r.write_snapshot(out_dir, "synth")?;

    let class_distribution = match distribution {
        Some(d) => parse_list::<f64>(&d, "distribution")?,
        None => match preset.as_str() {
            "room2-like" => ROOM2_LIKE.to_vec(),
            "balanced" => vec![0.25; 4],
            other => return Err(Error::Config(format!("unknown preset {other:?} (room2-like, balanced)"))),
        },
    };
    let cfg = SynthConfig {
        num_classes: class_distribution.len(),
        num_features: features,
        class_distribution,
        transition_stickiness: stickiness,
        emission_separation: separation,
        sequence_count: sequences,
        mean_length,
        seed,
    };
    let ds = generate_synthetic(&cfg)?;
    save_passthrough(&ds, std::slice::from_ref(&ds.provenance), &output)?;
    info!("{} sequences, {} positions -> {}", ds.sequences.len(), ds.num_positions(), output.display());
    Ok(Outcome::Done)
}
