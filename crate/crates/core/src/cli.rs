//! The `syntrace` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::datagen::{
    build_dataset, corpus_prompts, llm_generate, offline_pool, perturb_with_fallback, read_samples,
    write_samples_with_config, BenignSource, BuildOptions, Dataset, GenBackend, HttpBackend, OfflineBackend,
    PerturbOp, Role, Sample, SplitSizes,
};
use crate::defense::{detect, Defender, DetectorConfig, Method, DEFAULT_DIVERSITY_K, DEFAULT_PERTURB_TRIALS};
use crate::error::Error;
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::model::Checkpoint;
use crate::numerics::prng;
use crate::syntax::{mine_file, parse, select_rare, CorpusFormat, PosLexicon, SyntacticTemplate};
use crate::train::{log_to_jsonl, train, ExperimentConfig, TrainLogRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const DEFAULT_TARGET: &str = "the eiffel tower glows";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::PromptTooShort(_) => Failure::Usage(msg),
            Error::NonFiniteLoss { .. }
            | Error::BackendUnavailable(_)
            | Error::BudgetExhausted { .. }
            | Error::NoConvergence(_)
            | Error::CannotEscapeTemplate { .. }
            | Error::Io(_) => Failure::Runtime(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "syntrace", version, about = "Syntactic-trigger backdoor injection and detection on a desk-scale encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count POS templates in a corpus and print the rarest first.
    Mine(MineArgs),
    /// Generate backdoor samples that follow a template.
    Gen(GenArgs),
    /// Turn samples into benign partners with swap/add/delete edits.
    Augment(AugmentArgs),
    /// Assemble train/val/test splits.
    BuildDataset(BuildArgs),
    /// Inject the backdoor into a student encoder.
    Train(TrainArgs),
    /// Score the test split with one detector.
    Detect(DetectArgs),
    /// ASR, drift and detection rates on the test split.
    Evaluate(EvaluateArgs),
    /// Retrain and evaluate over a list of values for one config key.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// POS lexicon (TSV word, tag); defaults to the built-in one.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Lines,
    Jsonl,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "lines")]
    format: FormatArg,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Also write the table as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Template such as "(DET)(NOUN)(VERB)"; defaults to the built-in trigger.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    count: usize,
    /// Generation endpoint; overrides SYNTRACE_GEN_URL.
    #[arg(long)]
    backend: Option<String>,
    /// Candidates examined before giving up; defaults to 10 x count.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenignArg {
    Operations,
    Corpus,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Backdoor pool from `gen`; generated offline when absent.
    #[arg(long)]
    backdoor: Option<PathBuf>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long, default_value = DEFAULT_TARGET)]
    target: String,
    #[arg(long, default_value_t = 0.4)]
    poison_rate: f64,
    #[arg(long, default_value_t = 900)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, value_enum, default_value = "operations")]
    benign: BenignArg,
    /// One prompt per line, used with `--benign corpus`; synthetic when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed when given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Print a progress line every N epochs (0 disables).
    #[arg(long, default_value_t = 50)]
    progress: usize,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[arg(long, default_value_t = 0.05)]
    fpr: f64,
    #[arg(long, default_value_t = DEFAULT_DIVERSITY_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_PERTURB_TRIALS)]
    trials: usize,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    det: DetectorArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated detectors to run.
    #[arg(long, default_value = "ftt,diversity,perturb")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    det: DetectorArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// `key=v1,v2,...`
    #[arg(long)]
    sweep: String,
    #[arg(long, default_value = "ftt,diversity,perturb")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[command(flatten)]
    det: DetectorArgs,
}

/// Runs with the process's stdout and stderr.
pub fn run<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return CommandOutcome {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    let mut ctx = Ctx {
        out,
        err,
        artifacts: Vec::new(),
    };
    let result = match cli.command {
        Command::Mine(a) => cmd_mine(&mut ctx, a),
        Command::Gen(a) => cmd_gen(&mut ctx, a),
        Command::Augment(a) => cmd_augment(&mut ctx, a),
        Command::BuildDataset(a) => cmd_build(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Detect(a) => cmd_detect(&mut ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&mut ctx, a),
        Command::Ablate(a) => cmd_ablate(&mut ctx, a),
    };
    match result {
        Ok(()) => CommandOutcome {
            exit_code: EXIT_OK,
            artifacts: ctx.artifacts,
        },
        Err(f) => {
            let _ = writeln!(ctx.err, "error: {}", f.message());
            CommandOutcome {
                exit_code: f.code(),
                artifacts: ctx.artifacts,
            }
        }
    }
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(path, bytes).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    fn say(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", line.as_ref());
    }
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("reading {}: {e}", path.display())))
}

fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("reading {}: {e}", path.display())))
}

fn load_lexicon(path: Option<&Path>) -> CliResult<PosLexicon> {
    match path {
        None => Ok(PosLexicon::builtin()),
        Some(p) => Ok(PosLexicon::from_tsv(&read_text(p)?)?),
    }
}

fn template_or_default(t: Option<&str>) -> CliResult<SyntacticTemplate> {
    match t {
        None => Ok(SyntacticTemplate::default_trigger()),
        Some(s) => s.parse().map_err(|e: Error| Failure::Usage(format!("--template: {e}"))),
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::read_jsonl(open(path)?)?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::from_json(&read_text(path)?)?)
}

fn to_map<T: Serialize>(v: &T) -> CliResult<Map<String, Value>> {
    match serde_json::to_value(v).map_err(Error::from)? {
        Value::Object(m) => Ok(m),
        _ => Err(Failure::Runtime("configuration is not an object".into())),
    }
}

fn pretty<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn cmd_mine(ctx: &mut Ctx<'_>, a: MineArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let format = match a.format {
        FormatArg::Lines => CorpusFormat::Lines,
        FormatArg::Jsonl => CorpusFormat::Jsonl,
    };
    let table = match mine_file(&a.corpus, format, (a.min_len, a.max_len), &lexicon) {
        Err(e @ Error::CorpusUnreadable { .. }) => return Err(Failure::Data(e.to_string())),
        r => r?,
    };
    let k = a.top.min(table.len());
    if k == 0 {
        return Err(Failure::Data("no templates in the requested length range".into()));
    }
    let rare = select_rare(&table, k)?;
    ctx.say(format!("{:>4}  {:>8}  {:>3}  template", "rank", "count", "len"));
    let mut rows = Vec::with_capacity(k);
    for (i, t) in rare.iter().enumerate() {
        let c = table.count(t);
        ctx.say(format!("{:>4}  {:>8}  {:>3}  {t}", i + 1, c, t.len()));
        rows.push(json!({ "template": t.to_string(), "count": c }));
    }
    if let Some(out) = &a.out {
        let doc = json!({
            "config": {
                "corpus": a.corpus.display().to_string(),
                "format": format!("{:?}", a.format).to_lowercase(),
                "min_len": a.min_len,
                "max_len": a.max_len,
                "top": a.top,
                "seed": a.common.seed,
            },
            "total": table.total,
            "distinct": table.len(),
            "rarest": rows,
        });
        ctx.write(out, &pretty(&doc)?)?;
    }
    Ok(())
}

fn cmd_gen(ctx: &mut Ctx<'_>, a: GenArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let template = template_or_default(a.template.as_deref())?;
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let budget = a.budget.unwrap_or(a.count.saturating_mul(10));
    let mut backend: Box<dyn GenBackend> = match a.backend.clone() {
        Some(url) => Box::new(HttpBackend::new(url)),
        None => match HttpBackend::from_env() {
            Some(b) => Box::new(b),
            None => Box::new(OfflineBackend::new(&lexicon, a.common.seed)),
        },
    };
    let backend_name = a
        .backend
        .clone()
        .or_else(|| std::env::var(crate::datagen::GEN_URL_ENV).ok().filter(|u| !u.trim().is_empty()))
        .unwrap_or_else(|| "offline".into());
    let samples = llm_generate(&template, a.count, backend.as_mut(), &lexicon, budget)?;
    let config = json!({
        "command": "gen",
        "template": template.to_string(),
        "count": a.count,
        "budget": budget,
        "backend": backend_name,
        "seed": a.common.seed,
    });
    let mut buf = Vec::new();
    write_samples_with_config(&mut buf, config.as_object(), &samples)?;
    ctx.write(&a.out, &buf)?;
    ctx.say(format!("wrote {} samples to {}", samples.len(), a.out.display()));
    Ok(())
}

fn cmd_augment(ctx: &mut Ctx<'_>, a: AugmentArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let trigger = template_or_default(a.template.as_deref())?;
    let input = read_samples(open(&a.input)?)?;
    let vocab = lexicon.words().to_vec();
    let mut out = Vec::with_capacity(input.len());
    for (i, s) in input.iter().enumerate() {
        let op = PerturbOp::CYCLE[i % PerturbOp::CYCLE.len()];
        let mut rng = prng(a.common.seed, (2 << 32) + s.id);
        out.push(perturb_with_fallback(s, op, &vocab, &trigger, &lexicon, &mut rng)?);
    }
    let config = json!({
        "command": "augment",
        "input": a.input.display().to_string(),
        "template": trigger.to_string(),
        "seed": a.common.seed,
    });
    let mut buf = Vec::new();
    write_samples_with_config(&mut buf, config.as_object(), &out)?;
    ctx.write(&a.out, &buf)?;
    ctx.say(format!("wrote {} benign samples to {}", out.len(), a.out.display()));
    Ok(())
}

fn cmd_build(ctx: &mut Ctx<'_>, a: BuildArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let trigger = template_or_default(a.template.as_deref())?;
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let pool = match &a.backdoor {
        Some(p) => read_samples(open(p)?)?,
        None => offline_pool(&trigger, sizes.total(), &lexicon, a.common.seed)?,
    };
    let benign = match a.benign {
        BenignArg::Operations => BenignSource::Operations,
        BenignArg::Corpus => BenignSource::Corpus(match &a.corpus {
            Some(p) => open(p)?
                .lines()
                .map(|l| l.map_err(|e| Failure::Data(e.to_string())))
                .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
                .map(|l| Ok(parse(&l?, &lexicon)?))
                .collect::<CliResult<Vec<_>>>()?,
            None => corpus_prompts(2 * sizes.total(), &lexicon, a.common.seed)?,
        }),
    };
    let opts = BuildOptions {
        trigger: &trigger,
        lexicon: &lexicon,
        corpus_vocab: lexicon.words(),
        benign,
    };
    let ds = build_dataset(&pool, &a.target, a.poison_rate, sizes, a.common.seed, &opts)?;
    let config = json!({
        "command": "build-dataset",
        "backdoor": a.backdoor.as_ref().map(|p| p.display().to_string()),
        "benign": format!("{:?}", a.benign).to_lowercase(),
        "corpus": a.corpus.as_ref().map(|p| p.display().to_string()),
        "sizes": { "train": a.train, "val": a.val, "test": a.test },
    });
    let mut buf = Vec::new();
    ds.write_jsonl_with_config(&mut buf, config.as_object().cloned().unwrap_or_default())?;
    ctx.write(&a.out, &buf)?;
    let count = |split: &[Sample], r: Role| split.iter().filter(|s| s.role == r).count();
    ctx.say(format!(
        "train {}+{}  val {}+{}  test {}+{}  (backdoor+benign)",
        count(&ds.train, Role::Backdoor),
        count(&ds.train, Role::Benign),
        count(&ds.val, Role::Backdoor),
        count(&ds.val, Role::Benign),
        count(&ds.test, Role::Backdoor),
        count(&ds.test, Role::Benign),
    ));
    Ok(())
}

fn experiment(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::parse(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

/// Trains into `dir`. On a non-finite loss the last good state is saved as
/// `checkpoint.last_good.json` and the run fails with a runtime error.
fn train_into(
    ctx: &mut Ctx<'_>,
    dir: &Path,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    lexicon: &PosLexicon,
    progress: usize,
) -> CliResult<Checkpoint> {
    let err = &mut *ctx.err;
    let mut observer = |r: &TrainLogRecord| {
        if progress > 0 && (r.epoch % progress == 0 || r.epoch == 1) {
            let _ = writeln!(
                err,
                "epoch {:>5}  benign {:.3e}  backdoor {:.3e}  kmmd {:.3e}  val_asr {:.3}  frob bd/bn {:.4}/{:.4}",
                r.epoch, r.benign, r.backdoor, r.kmmdr, r.val_asr, r.val_frob_backdoor, r.val_frob_benign
            );
        }
    };
    let result = train(ds, lexicon, &cfg.model, &cfg.train, &mut observer);
    match result {
        Ok(out) => {
            ctx.write(&dir.join("config.txt"), cfg.render().as_bytes())?;
            ctx.write(&dir.join("train_log.jsonl"), log_to_jsonl(&out.log)?.as_bytes())?;
            ctx.write(&dir.join("checkpoint.json"), out.checkpoint.to_json()?.as_bytes())?;
            Ok(out.checkpoint)
        }
        Err(abort) => {
            if let Some(ck) = &abort.last_good {
                ctx.write(&dir.join("checkpoint.last_good.json"), ck.to_json()?.as_bytes())?;
            }
            Err(abort.error.into())
        }
    }
}

fn cmd_train(ctx: &mut Ctx<'_>, a: TrainArgs) -> CliResult<()> {
    let cfg = experiment(a.config.as_deref(), &a.overrides, a.seed)?;
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let ds = load_dataset(&a.data)?;
    train_into(ctx, &a.out, &cfg, &ds, &lexicon, a.progress)?;
    ctx.say(format!("checkpoint written to {}", a.out.join("checkpoint.json").display()));
    Ok(())
}

fn detector_configs(methods: &str, d: &DetectorArgs, seed: u64) -> CliResult<Vec<DetectorConfig>> {
    methods
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| {
            let method: Method = m.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            Ok(DetectorConfig {
                method,
                target_fpr: d.fpr,
                k: d.k,
                trials: d.trials,
                seed,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct DetectOutput<'a> {
    config: Map<String, Value>,
    #[serde(flatten)]
    report: &'a crate::defense::DetectionReport,
}

fn cmd_detect(ctx: &mut Ctx<'_>, a: DetectArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let cfg = detector_configs(&a.method, &a.det, a.common.seed)?;
    let [cfg] = cfg[..] else {
        return Err(Failure::Usage("--method takes exactly one of ftt, diversity, perturb".into()));
    };
    let defender = Defender::with_attack(&ck, &lexicon, ds.trigger.clone(), &ds.target)?;
    let report = detect(&defender, &ds.val, &ds.test, &cfg)?;
    let mut config = ck.extra.clone();
    config.insert("checkpoint".into(), Value::from(a.checkpoint.display().to_string()));
    config.insert("data".into(), Value::from(a.data.display().to_string()));
    config.insert("detector".into(), serde_json::to_value(cfg).map_err(Error::from)?);
    ctx.write(&a.out, &pretty(&DetectOutput { config, report: &report })?)?;
    ctx.say(format!(
        "{}  threshold {:.6}  dsr {:.4}  fpr {:.4}",
        report.method, report.threshold, report.summary.dsr, report.summary.fpr
    ));
    Ok(())
}

fn cmd_evaluate(ctx: &mut Ctx<'_>, a: EvaluateArgs) -> CliResult<()> {
    let lexicon = load_lexicon(a.common.lexicon.as_deref())?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let opts = EvalOptions {
        detectors: detector_configs(&a.methods, &a.det, a.common.seed)?,
        seed: a.common.seed,
    };
    let report = evaluate(&ck, &ds, &lexicon, &opts)?;
    let mut bytes = report.to_json()?.into_bytes();
    bytes.push(b'\n');
    ctx.write(&a.out, &bytes)?;
    let table = report.table();
    let _ = write!(ctx.out, "{table}");
    Ok(())
}

fn cmd_ablate(ctx: &mut Ctx<'_>, a: AblateArgs) -> CliResult<()> {
    let (key, values) = a
        .sweep
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--sweep expects key=v1,v2,..., got {:?}", a.sweep)))?;
    let key = key.trim();
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage("--sweep lists no values".into()));
    }
    let base = experiment(a.config.as_deref(), &a.overrides, a.seed)?;
    // validate every setting before spending time on training
    let settings = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v).map_err(|e| Failure::Usage(format!("--sweep {key}={v}: {e}")))?;
            Ok((v.to_string(), c))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let detectors = detector_configs(&a.methods, &a.det, base.train.seed)?;
    let mut rows = Vec::new();
    ctx.say(format!("{:<12}{:>10}{:>12}{}", key, "asr", "drift", detectors.iter().map(|d| format!("{:>12}", format!("{}_dsr", d.method))).collect::<String>()));
    for (v, cfg) in settings {
        let dir = a.out.join(format!("{key}={v}"));
        let ck = train_into(ctx, &dir, &cfg, &ds, &lexicon, 0)?;
        let opts = EvalOptions {
            detectors: detectors.clone(),
            seed: cfg.train.seed,
        };
        let report: MetricsReport = evaluate(&ck, &ds, &lexicon, &opts)?;
        let mut bytes = report.to_json()?.into_bytes();
        bytes.push(b'\n');
        ctx.write(&dir.join("report.json"), &bytes)?;
        let s = &report.summary;
        ctx.say(format!(
            "{:<12}{:>10.4}{:>12.3e}{}",
            v,
            s.asr,
            s.benign_drift,
            s.detectors.values().map(|d| format!("{:>12.4}", d.dsr)).collect::<String>()
        ));
        rows.push(json!({
            "value": v,
            "asr": s.asr,
            "benign_drift": s.benign_drift,
            "dsr": s.detectors.iter().map(|(m, d)| (m.to_string(), Value::from(d.dsr))).collect::<Map<_, _>>(),
            "fpr": s.detectors.iter().map(|(m, d)| (m.to_string(), Value::from(d.fpr))).collect::<Map<_, _>>(),
        }));
    }
    let doc = json!({
        "config": {
            "base": to_map(&base)?,
            "sweep": { "key": key, "values": values },
            "data": a.data.display().to_string(),
            "detectors": serde_json::to_value(&detectors).map_err(Error::from)?,
        },
        "rows": rows,
    });
    ctx.write(&a.out.join("ablation.json"), &pretty(&doc)?)?;
    Ok(())
}
