//! `ehi` command-line tool.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use ehi::corpus::{read_jsonl_path, split_corpus, write_jsonl_path, ScoreRecord, SplitSpec};
use ehi::service::{RewardService, TcpServer, DEFAULT_MAX_BATCH};
use ehi::text::NormalizeOptions;
use ehi::trainer::{train, write_checkpoint, SyntheticTask, TrainConfig};
use ehi::{score_pair, CorpusError, Gazetteer, GazetteerError, GazetteerExtractor, MetricConfig, TrainError};
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "ehi", version, about = "Entity Hallucination Index: scoring, corpus tools, toy training, reward serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one summary against its source and print the report as JSON.
    Score(ScoreArgs),
    /// Score every record of a JSONL corpus.
    ScoreCorpus(ScoreCorpusArgs),
    /// Split a JSONL corpus into train/val/test files.
    Split(SplitArgs),
    /// Train the toy REINFORCE policy against EHI.
    TrainToy(TrainArgs),
    /// Run the newline-delimited JSON reward service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct MetricFlags {
    /// Flat JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gazetteer TSV (`surface<TAB>TYPE`); the bundled one is used if omitted.
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    of_repeat_cap: Option<usize>,
    #[arg(long)]
    lf_importance_threshold: Option<usize>,
    /// Ignore any reference summary.
    #[arg(long)]
    reference_free: bool,
    /// Disable the capitalization heuristic.
    #[arg(long)]
    no_heuristics: bool,
    /// Keep possessives and trailing periods in entity keys.
    #[arg(long)]
    no_strip_affixes: bool,
    /// Use e^x terms instead of e^x - 1.
    #[arg(long)]
    literal_exponent: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    metric: MetricFlags,
}

#[derive(Args)]
struct ScoreCorpusArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    metric: MetricFlags,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated train,val,test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fractions)]
    fractions: (f64, f64, f64),
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    regen_interval: Option<u64>,
    #[arg(long)]
    val_size: Option<usize>,
    /// Weight gradients by raw EHI instead of batch-normalized rewards.
    #[arg(long)]
    raw_rewards: bool,
    /// Score against the placed entities as a reference summary.
    #[arg(long)]
    use_reference_entities: bool,
    /// Train on a cached rollout pool resampled every regen_interval updates.
    #[arg(long)]
    regenerate_pool: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("transport").required(true).args(["stdio", "listen"])))]
struct ServeArgs {
    /// Serve on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Listen on a TCP address, e.g. 127.0.0.1:7431.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_BATCH)]
    max_batch: usize,
    #[command(flatten)]
    metric: MetricFlags,
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected 3 comma-separated fractions, got {}", parts.len())),
    }
}

enum Failure {
    /// Bad arguments, invalid configuration values, missing input files.
    Usage(String),
    Parse(String),
    Diverged(String),
    /// Failures writing outputs or serving.
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Parse(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Parse(m) | Failure::Diverged(m) | Failure::Runtime(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn input_error(path: &Path, e: io::Error) -> Failure {
    Failure::Usage(format!("cannot read {}: {e}", path.display()))
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| input_error(path, e))
}

fn corpus_failure(e: CorpusError) -> Failure {
    match e {
        CorpusError::Io { path, source } => input_error(&path, source),
        CorpusError::InvalidSplit(_) | CorpusError::TooSmall { .. } => Failure::Usage(e.to_string()),
        other => Failure::Parse(other.to_string()),
    }
}

fn load_config_map(path: Option<&Path>) -> CliResult<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = read_text(path)?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => {
            warn_unknown_keys(&map);
            Ok(map)
        }
        Ok(_) => Err(Failure::Parse(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(Failure::Parse(format!("{}: {e}", path.display()))),
    }
}

fn warn_unknown_keys(map: &Map<String, Value>) {
    let known: Vec<Value> = vec![
        serde_json::to_value(MetricConfig::default()).expect("serializable"),
        serde_json::to_value(TrainConfig::default()).expect("serializable"),
        serde_json::to_value(SyntheticTask::default()).expect("serializable"),
    ];
    for key in map.keys() {
        if !known.iter().any(|k| k.get(key).is_some()) {
            eprintln!("warning: ignoring unknown config key {key:?}");
        }
    }
}

fn from_map<T: DeserializeOwned>(map: &Map<String, Value>, what: &str) -> CliResult<T> {
    serde_json::from_value(Value::Object(map.clone())).map_err(|e| Failure::Parse(format!("{what} config: {e}")))
}

fn metric_config(flags: &MetricFlags) -> CliResult<MetricConfig> {
    let mut map = load_config_map(flags.config.as_deref())?;
    if let Some(k) = flags.of_repeat_cap {
        map.insert("of_repeat_cap".into(), json!(k));
    }
    if let Some(t) = flags.lf_importance_threshold {
        map.insert("lf_importance_threshold".into(), json!(t));
    }
    if flags.reference_free {
        map.insert("reference_mode".into(), json!("reference_free"));
    }
    if flags.no_heuristics {
        map.insert("heuristics_enabled".into(), json!(false));
    }
    if flags.no_strip_affixes {
        map.insert("strip_affixes".into(), json!(false));
    }
    if flags.literal_exponent {
        map.insert("literal_exponent".into(), json!(true));
    }
    let config: MetricConfig = from_map(&map, "metric")?;
    config.validate().map_err(Failure::Usage)?;
    Ok(config)
}

fn load_gazetteer(path: Option<&Path>, normalize: NormalizeOptions) -> CliResult<Gazetteer> {
    let Some(path) = path else {
        return Ok(Gazetteer::builtin_with(normalize));
    };
    let file = File::open(path).map_err(|e| input_error(path, e))?;
    Gazetteer::load_with(BufReader::new(file), normalize).map_err(|e| match e {
        GazetteerError::Io(io) => input_error(path, io),
        parse => Failure::Parse(format!("{}: {parse}", path.display())),
    })
}

fn metric_setup(flags: &MetricFlags) -> CliResult<(MetricConfig, Gazetteer)> {
    let config = metric_config(flags)?;
    let normalize = NormalizeOptions {
        strip_affixes: config.strip_affixes,
    };
    let gazetteer = load_gazetteer(flags.gazetteer.as_deref(), normalize)?;
    Ok((config, gazetteer))
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let source = read_text(&args.source)?;
    let summary = read_text(&args.summary)?;
    let reference = args.reference.as_deref().map(read_text).transpose()?;
    let (config, gazetteer) = metric_setup(&args.metric)?;
    let extractor = GazetteerExtractor {
        gazetteer: &gazetteer,
        heuristics: config.heuristics_enabled,
    };
    let report = score_pair(&extractor, &source, &summary, reference.as_deref(), &config);
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_score_corpus(args: ScoreCorpusArgs) -> CliResult<()> {
    let (config, gazetteer) = metric_setup(&args.metric)?;
    let records = read_jsonl_path(&args.input).map_err(corpus_failure)?;
    let extractor = GazetteerExtractor {
        gazetteer: &gazetteer,
        heuristics: config.heuristics_enabled,
    };
    let scored: Vec<Option<ScoreRecord>> = records
        .par_iter()
        .map(|r| {
            let summary = r.summary.as_deref()?;
            let mut out = r.clone();
            out.scores = Some(score_pair(&extractor, &r.source, summary, r.reference.as_deref(), &config));
            Some(out)
        })
        .collect();
    let skipped = scored.iter().filter(|r| r.is_none()).count();
    let scored: Vec<ScoreRecord> = scored.into_iter().flatten().collect();
    write_jsonl_path(&scored, &args.out).map_err(|e| output_error(&args.out, e))?;

    let n = scored.len();
    let reports = scored.iter().filter_map(|r| r.scores.as_ref());
    let (mut ehi, mut f1, mut in_band) = (0.0, 0.0, 0usize);
    for rep in reports {
        ehi += rep.ehi;
        f1 += rep.entity_f1;
        in_band += usize::from((0.3..=0.6).contains(&rep.ehi));
    }
    let mean = |x: f64| if n == 0 { Value::Null } else { json!(x / n as f64) };
    let stats = json!({
        "n": n,
        "mean_ehi": mean(ehi),
        "mean_f1": mean(f1),
        "frac_ehi_ge_0.3_le_0.6": mean(in_band as f64),
        "skipped": skipped,
    });
    eprintln!("{stats}");
    Ok(())
}

fn cmd_split(args: SplitArgs) -> CliResult<()> {
    let (train_frac, val_frac, test_frac) = args.fractions;
    let spec = SplitSpec::new(train_frac, val_frac, test_frac, args.seed).map_err(corpus_failure)?;
    let records = read_jsonl_path(&args.input).map_err(corpus_failure)?;
    let (train, val, test) = split_corpus(&records, &spec).map_err(corpus_failure)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| output_error(&args.out_dir, e))?;
    for (name, part) in [("train.jsonl", &train), ("val.jsonl", &val), ("test.jsonl", &test)] {
        let path = args.out_dir.join(name);
        write_jsonl_path(part, &path).map_err(|e| output_error(&path, e))?;
    }
    eprintln!(
        "{}",
        json!({"train": train.len(), "val": val.len(), "test": test.len()})
    );
    Ok(())
}

fn cmd_train_toy(args: TrainArgs) -> CliResult<()> {
    let mut map = load_config_map(args.config.as_deref())?;
    map.insert("seed".into(), json!(args.seed));
    let overrides = [
        ("max_updates", args.max_updates.map(|v| json!(v))),
        ("learning_rate", args.learning_rate.map(|v| json!(v))),
        ("batch_size", args.batch_size.map(|v| json!(v))),
        ("regen_interval", args.regen_interval.map(|v| json!(v))),
        ("val_size", args.val_size.map(|v| json!(v))),
        ("normalize_rewards", args.raw_rewards.then_some(json!(false))),
        ("use_reference_entities", args.use_reference_entities.then_some(json!(true))),
        ("regenerate_pool", args.regenerate_pool.then_some(json!(true))),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            map.insert(key.into(), v);
        }
    }
    let config: TrainConfig = from_map(&map, "train")?;
    let task: SyntheticTask = from_map(&map, "task")?;
    let gazetteer = load_gazetteer(args.gazetteer.as_deref(), NormalizeOptions::default())?;

    fs::create_dir_all(&args.out_dir).map_err(|e| output_error(&args.out_dir, e))?;
    let outcome = match train(&task, &config, &gazetteer) {
        Ok(outcome) => outcome,
        Err(TrainError::InvalidConfig(msg)) => return Err(Failure::Usage(msg)),
        Err(TrainError::NumericalDivergence { update, what, state }) => {
            let path = args.out_dir.join("diverged_state.json");
            let file = File::create(&path).map_err(|e| output_error(&path, e))?;
            write_checkpoint(&state, update, f64::NAN, BufWriter::new(file)).map_err(|e| output_error(&path, e))?;
            return Err(Failure::Diverged(format!(
                "numerical divergence at update {update}: {what}; state written to {}",
                path.display()
            )));
        }
    };

    let metrics_path = args.out_dir.join("metrics.jsonl");
    let write_metrics = || -> io::Result<()> {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        for entry in &outcome.log {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write_metrics().map_err(|e| output_error(&metrics_path, e))?;

    let ckpt_path = args.out_dir.join("best_checkpoint.json");
    let file = File::create(&ckpt_path).map_err(|e| output_error(&ckpt_path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&outcome.best, outcome.best_update, outcome.best_val_ehi, &mut w)
        .map_err(|e| output_error(&ckpt_path, e))?;
    w.flush().map_err(|e| output_error(&ckpt_path, e))?;

    let initial = outcome.log.first().map(|e| e.mean_val_ehi);
    println!(
        "{}",
        json!({
            "best_val_ehi": outcome.best_val_ehi,
            "best_update": outcome.best_update,
            "initial_val_ehi": initial,
            "updates": config.max_updates,
        })
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> CliResult<()> {
    let (config, gazetteer) = metric_setup(&args.metric)?;
    let service = RewardService::new(Arc::new(gazetteer), config).with_max_batch(args.max_batch);
    if args.stdio {
        // responses are flushed per line, so nothing is pending at interrupt
        ctrlc::set_handler(|| std::process::exit(0)).map_err(|e| Failure::Runtime(e.to_string()))?;
        return service.serve_stdio().map_err(|e| Failure::Runtime(e.to_string()));
    }
    let addr = args.listen.expect("clap enforces one transport");
    let server = TcpServer::bind(addr.as_str(), service).map_err(|e| Failure::Usage(e.to_string()))?;
    let local = server.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
    let shutdown = server.shutdown_handle();
    ctrlc::set_handler(move || shutdown.store(true, Ordering::SeqCst)).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("listening on {local}");
    server.run().map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::ScoreCorpus(a) => cmd_score_corpus(a),
        Command::Split(a) => cmd_split(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
