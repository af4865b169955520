use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mdrive::ablate::{self, Axis};
use mdrive::certify;
use mdrive::checkpoint;
use mdrive::config::RunConfig;
use mdrive::eval::{check_vocab, evaluate, score_records};
use mdrive::metrics::{self, read_predictions, write_predictions, MetricsError};
use mdrive::model::Model;
use mdrive::report;
use mdrive::saliency;
use mdrive::scenes::dataset::{generate_split, read_dataset, write_dataset, DatasetError, Split};
use mdrive::scenes::SceneSample;
use mdrive::train::{corpus_vocab, prepare_examples, train};
use mdrive::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "mdrive", version, about = "Multi-view driving QA: data, training, evaluation and analysis")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, or an override of train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, written atomically.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Evaluate samples concurrently (MD_THREADS caps the worker count).
    #[arg(long, global = true)]
    parallel: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test corpus.
    Generate {
        #[arg(long)]
        train: u32,
        #[arg(long)]
        test: u32,
        /// Pixels per view side.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        /// Dataset root with train/ and test/ (overrides data.dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy-decode a split and score it, or rescore a predictions file.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Score an existing predictions file instead of decoding.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Sweep expert count or tokens per image.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Gradient saliency maps of one sample.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: String,
    },
    /// Parameter and multiply-add counts of the configured model.
    Report {
        /// Vocabulary size; defaults to the closed template vocabulary.
        #[arg(long)]
        vocab: Option<usize>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Validation(_) => EXIT_VALIDATION,
                Failure::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } | Error::Dataset(DatasetError::Io { .. }) | Error::Metrics(MetricsError::Io(_)) => EXIT_IO,
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return if matches!(e, DatasetError::Io { .. }) { EXIT_IO } else { EXIT_VALIDATION };
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return if matches!(e, MetricsError::Io(_)) { EXIT_IO } else { EXIT_VALIDATION };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MD_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("MD_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Loaded configuration plus the document echoed into artifacts.
struct Loaded {
    cfg: RunConfig,
    echo: Value,
}

fn load_config(cli: &Cli) -> anyhow::Result<Loaded> {
    let (mut cfg, echo) = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let c = RunConfig::default();
            let e = c.echo();
            (c, e)
        }
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(Loaded { cfg, echo })
}

/// Output directory staged next to its destination and renamed into
/// place on success; dropped stages are removed.
struct Staged {
    tmp: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl Staged {
    fn new(dest: &Path, force: bool) -> anyhow::Result<Self> {
        if dest.exists() {
            let empty = dest.is_dir() && fs::read_dir(dest).map_err(|e| io(dest, e))?.next().is_none();
            if !empty && !force {
                return Err(Failure::Validation(format!(
                    "{} exists and is not empty (use --force to replace it)",
                    dest.display()
                ))
                .into());
            }
        }
        let name = dest
            .file_name()
            .ok_or_else(|| Failure::Validation(format!("invalid output path {}", dest.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| io(&tmp, e))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            done: false,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.join(rel)
    }

    fn commit(mut self) -> anyhow::Result<()> {
        if self.dest.exists() {
            if self.dest.is_dir() {
                fs::remove_dir_all(&self.dest).map_err(|e| io(&self.dest, e))?;
            } else {
                fs::remove_file(&self.dest).map_err(|e| io(&self.dest, e))?;
            }
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| io(&self.dest, e))?;
        self.done = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(())
}

fn require_out(cli: &Cli) -> anyhow::Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::Validation("--out is required for this command".into()).into())
}

fn data_root(flag: &Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::Validation("no dataset given (--data or data.dir)".into()).into())
}

fn read_split(root: &Path, split: &str) -> anyhow::Result<Vec<SceneSample>> {
    let dir = root.join(split);
    Ok(read_dataset(&dir).with_context(|| format!("reading the {split} split"))?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate { train, test, size } => cmd_generate(&cli, *train, *test, *size),
        Command::Train { data } => cmd_train(&cli, data),
        Command::Eval {
            checkpoint,
            data,
            split,
            predictions,
        } => match predictions {
            Some(p) => cmd_rescore(&cli, p),
            None => cmd_eval(&cli, checkpoint.as_deref().expect("clap enforces"), data, split),
        },
        Command::Gradcheck { trials } => cmd_gradcheck(&cli, *trials),
        Command::Ablate { axis, data } => cmd_ablate(&cli, axis, data),
        Command::Saliency {
            checkpoint,
            data,
            sample,
        } => cmd_saliency(&cli, checkpoint, data, sample),
        Command::Report { vocab } => cmd_report(&cli, *vocab),
    }
}

fn cmd_generate(cli: &Cli, n_train: u32, n_test: u32, size: usize) -> anyhow::Result<()> {
    if n_train == 0 {
        bail!(Failure::Validation("--train must be at least 1".into()));
    }
    if size == 0 || size % mdrive::scenes::GRID != 0 {
        bail!(Failure::Validation(format!(
            "--size must be a positive multiple of {}",
            mdrive::scenes::GRID
        )));
    }
    let out = require_out(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let stage = Staged::new(out, cli.force)?;
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let samples = generate_split(seed, split, n, size);
        write_dataset(&samples, &stage.path(split.name()))?;
        log::info!("{}: {} samples", split.name(), samples.len());
    }
    stage.commit()?;
    println!("wrote {} train and {} test samples to {}", n_train, n_test, out.display());
    Ok(())
}

fn loss_csv(losses: &[f32]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn cmd_train(cli: &Cli, data: &Option<PathBuf>) -> anyhow::Result<()> {
    let Loaded { cfg, echo } = load_config(cli)?;
    let out = require_out(cli)?;
    let root = data_root(data, &cfg)?;
    let train_set = read_split(&root, &cfg.data.split)?;
    let test_dir = root.join(Split::Test.name());
    let test_set = if cfg.data.split == "train" && test_dir.exists() {
        read_split(&root, "test")?
    } else {
        Vec::new()
    };
    let vocab = corpus_vocab(&train_set);
    let mut model = Model::new(cfg.model(), vocab, cfg.train.seed)?;
    // Shapes and vocabulary are checked before the first step.
    let examples = prepare_examples(&model, &train_set)?;
    check_vocab(&model, &test_set)?;
    let test_examples = prepare_examples(&model, &test_set)?;
    let stage = Staged::new(out, cli.force)?;
    let frozen_before = cfg.encoder.frozen.then(|| encoder_bytes(&model));
    let every = (cfg.train.steps / 20).max(1);
    let losses = train(&mut model, &examples, &cfg.train, cli.parallel, |step, loss, _| {
        if step % every == 0 || step + 1 == cfg.train.steps {
            log::info!("step {step} loss {loss:.4}");
        }
    })?;
    if let Some(before) = frozen_before {
        if before != encoder_bytes(&model) {
            bail!(Failure::Numerical("frozen encoder parameters changed during training".into()));
        }
    }
    let ckpt_echo = json!({ "config": echo, "seed": cfg.train.seed });
    let hash = checkpoint::save(&stage.path("checkpoint"), &model, &ckpt_echo, losses.len())?;
    write_text(&stage.path("loss.csv"), &loss_csv(&losses))?;
    if !test_examples.is_empty() {
        let (records, report) = evaluate(&model, &test_examples, cli.parallel)?;
        write_records(&stage.path("predictions.jsonl"), &records)?;
        write_json(
            &stage.path("metrics.json"),
            &json!({ "config": echo, "seed": cfg.train.seed, "checkpoint_hash": hash, "report": report }),
        )?;
        print!("{}", metrics::table(&report));
    }
    stage.commit()?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint {hash}",
        losses.len(),
        losses.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}

fn encoder_bytes(model: &Model) -> Vec<u8> {
    model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .flat_map(|(_, p)| p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .collect()
}

fn write_records(path: &Path, records: &[metrics::PredictionRecord]) -> anyhow::Result<()> {
    let f = fs::File::create(path).map_err(|e| io(path, e))?;
    let mut w = BufWriter::new(f);
    write_predictions(&mut w, records).map_err(|e| io(path, e))?;
    w.flush().map_err(|e| io(path, e))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, ckpt: &Path, data: &Option<PathBuf>, split: &str) -> anyhow::Result<()> {
    let (model, manifest) = checkpoint::load(ckpt).context("loading checkpoint")?;
    let root = data_root(data, &load_config(cli)?.cfg)?;
    let samples = read_split(&root, split)?;
    if samples.is_empty() {
        bail!(Failure::Validation(format!("the {split} split is empty")));
    }
    check_vocab(&model, &samples)?;
    let examples = prepare_examples(&model, &samples)?;
    let (records, report) = evaluate(&model, &examples, cli.parallel)?;
    print!("{}", metrics::table(&report));
    if let Some(out) = &cli.out {
        let stage = Staged::new(out, cli.force)?;
        write_records(&stage.path("predictions.jsonl"), &records)?;
        write_json(
            &stage.path("report.json"),
            &json!({
                "config": manifest.config,
                "checkpoint_hash": manifest.params_hash,
                "split": split,
                "report": report,
            }),
        )?;
        stage.commit()?;
    }
    Ok(())
}

fn cmd_rescore(cli: &Cli, path: &Path) -> anyhow::Result<()> {
    let f = fs::File::open(path).map_err(|e| io(path, e))?;
    let records = read_predictions(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        bail!(Failure::Validation(format!("{} holds no predictions", path.display())));
    }
    let report = score_records(&records)?;
    print!("{}", metrics::table(&report));
    if let Some(out) = &cli.out {
        let stage = Staged::new(out, cli.force)?;
        write_json(&stage.path("report.json"), &json!({ "report": report }))?;
        stage.commit()?;
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, trials: usize) -> anyhow::Result<()> {
    if trials == 0 {
        bail!(Failure::Validation("--trials must be at least 1".into()));
    }
    // The configuration is validated even though certification runs at the
    // fixed tiny size.
    load_config(cli)?;
    let checks = certify::certify(trials, cli.seed.unwrap_or(0))?;
    print!("{}", certify::render(&checks));
    if let Some(out) = &cli.out {
        let stage = Staged::new(out, cli.force)?;
        write_json(&stage.path("gradcheck.json"), &checks)?;
        stage.commit()?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(Failure::Numerical(format!(
            "gradient check above {:e}: {}",
            certify::TOLERANCE,
            failed.join(", ")
        )));
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, axis: &str, data: &Option<PathBuf>) -> anyhow::Result<()> {
    let axis = Axis::parse(axis)?;
    let Loaded { cfg, echo } = load_config(cli)?;
    let root = data_root(data, &cfg)?;
    let train_set = read_split(&root, "train")?;
    let test_set = read_split(&root, "test")?;
    let rows = ablate::ablate(axis, &cfg, &train_set, &test_set, cli.parallel)?;
    let table = ablate::table(axis, &rows);
    print!("{table}");
    if let Some(out) = &cli.out {
        let stage = Staged::new(out, cli.force)?;
        write_text(&stage.path("ablation.txt"), &table)?;
        write_json(
            &stage.path("ablation.json"),
            &json!({ "config": echo, "seed": cfg.train.seed, "axis": axis, "rows": rows }),
        )?;
        stage.commit()?;
    }
    Ok(())
}

fn find_sample(root: &Path, id: &str) -> anyhow::Result<SceneSample> {
    let mut dirs = vec![root.to_path_buf()];
    dirs.extend([Split::Train, Split::Test].iter().map(|s| root.join(s.name())));
    for dir in dirs {
        if !dir.join(mdrive::scenes::dataset::MANIFEST).exists() {
            continue;
        }
        if let Some(s) = read_dataset(&dir)?.into_iter().find(|s| s.id == id) {
            return Ok(s);
        }
    }
    bail!(Failure::Validation(format!("sample {id} not found under {}", root.display())))
}

fn cmd_saliency(cli: &Cli, ckpt: &Path, data: &Option<PathBuf>, id: &str) -> anyhow::Result<()> {
    let out = require_out(cli)?;
    let (model, manifest) = checkpoint::load(ckpt).context("loading checkpoint")?;
    let root = data_root(data, &load_config(cli)?.cfg)?;
    let sample = find_sample(&root, id)?;
    check_vocab(&model, std::slice::from_ref(&sample))?;
    let (answer, maps) = saliency::saliency(&model, &sample.views, &sample.question)?;
    let summary = saliency::summarize(&sample.question, &answer, &maps);
    let stage = Staged::new(out, cli.force)?;
    saliency::write_maps(&stage.tmp, &maps)?;
    write_text(&stage.path("answer.txt"), &format!("{answer}\n"))?;
    write_json(
        &stage.path("saliency.json"),
        &json!({
            "checkpoint_hash": manifest.params_hash,
            "config": manifest.config,
            "sample": sample.id,
            "question": sample.question,
            "reference": sample.answer,
            "summary": summary,
        }),
    )?;
    stage.commit()?;
    println!("answer: {answer}");
    if let (Some(view), Some(is_max)) = (&summary.referenced_view, summary.referenced_is_max) {
        log::info!("referenced view {view} has the largest total saliency: {is_max}");
    }
    Ok(())
}

fn cmd_report(cli: &Cli, vocab: Option<usize>) -> anyhow::Result<()> {
    let Loaded { cfg, echo } = load_config(cli)?;
    cfg.validate()?;
    let vocab = vocab
        .or((cfg.lm.vocab_size > 0).then_some(cfg.lm.vocab_size))
        .unwrap_or_else(|| corpus_vocab(&[]).len());
    let r = report::model_report(&cfg.model(), vocab);
    print!("{}", report::render(&r));
    if let Some(out) = &cli.out {
        let stage = Staged::new(out, cli.force)?;
        write_json(&stage.path("report.json"), &json!({ "config": echo, "vocab_size": vocab, "report": r }))?;
        stage.commit()?;
    }
    Ok(())
}
