use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use irisseg::config::{self, Entry};
use irisseg::datasets::netpbm::save_mask;
use irisseg::datasets::{gen_synthetic, load_samples, mean_scale, write_dataset, Manifest, Preset, Sample, Split, SplitRatio, SyntheticSpec};
use irisseg::metrics::{
    aggregate, cdf_report, cdf_tsv, confusion, cross_grid, moments, parse_results, results_tsv, select_cases, GroupBy,
    ImageScore, ResultRow,
};
use irisseg::model::{Model, ModelConfig};
use irisseg::pipeline::{infer_mask, train, tune_heads, Checkpoint, TrainConfig};
use irisseg::{Error, Result};

#[derive(Parser)]
#[command(name = "irisseg", version, about = "Iris instance segmentation: data generation, training, inference and evaluation")]
struct Cli {
    /// key=value configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Gen(GenArgs),
    /// Train a model with the three-phase schedule.
    Train(TrainArgs),
    /// Retrain the proposal and ROI heads of a checkpoint.
    Tune(TuneArgs),
    /// Predict masks and write a results file.
    Infer(InferArgs),
    /// Aggregate metrics of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// F1 of every checkpoint on every dataset.
    Grid(GridArgs),
    /// CDF tables and best/worst cases from results files.
    Report(ReportArgs),
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    manifest: PathBuf,
    /// train, test, val or all.
    #[arg(long)]
    split: Option<String>,
    /// Keep only records with this dataset tag.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    preset: Option<String>,
    /// key=value generator settings, applied on top of the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(short = 'n', default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "40-30-30")]
    ratio: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: Selection,
    /// Checkpoint to write; the loss log goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Epochs per phase: `a,b,c`, or one number for every phase.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: Selection,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    /// Use the first this many selected samples.
    #[arg(long, default_value_t = 100)]
    limit: usize,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    data: Selection,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for masks and `results.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: Selection,
    #[arg(long)]
    checkpoint: PathBuf,
    /// image, subject, dataset or all.
    #[arg(long, default_value = "all")]
    group_by: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// `name=path`, repeatable; one column each.
    #[arg(long, required = true)]
    checkpoint: Vec<String>,
    /// `name=path`, repeatable; one row each.
    #[arg(long, required = true)]
    manifest: Vec<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Image { .. } | Error::Netpbm(_) | Error::Manifest { .. } | Error::Results { .. } | Error::Checkpoint { .. } => 5,
        Error::Dimension(_) => 6,
        Error::EmptyMask | Error::EmptyTrainingSet | Error::Invalid(_) => 7,
        Error::Tensor(_) => 1,
    }
}

/// Configuration entries with the owning config resolved.
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    model_entries: Vec<Entry>,
}

fn settings(path: Option<&Path>, seed: Option<u64>) -> Result<Settings> {
    let entries = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            config::parse_entries(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    let mut s = Settings {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        model_entries: Vec::new(),
    };
    for e in entries {
        if s.model.apply(&e)? {
            s.model_entries.push(e);
        } else if !s.train.apply(&e)? {
            return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
        }
    }
    if let Some(seed) = seed {
        s.train.seed = seed;
    }
    s.model.validate()?;
    s.train.validate()?;
    Ok(s)
}

fn log_config(title: &str, text: &str) {
    info!("resolved {title} config:\n{}", text.trim_end());
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_split(s: Option<&str>, default: Split) -> Result<Option<Split>> {
    match s {
        None => Ok(Some(default)),
        Some("all") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(Error::Config),
    }
}

fn select(manifest: &Path, split: Option<Split>, tag: Option<&str>) -> Result<Manifest> {
    let m = Manifest::load(manifest)?;
    let records: Vec<_> = m
        .records
        .into_iter()
        .filter(|r| split.map_or(true, |s| r.split == s) && tag.map_or(true, |t| r.dataset_tag == t))
        .collect();
    if records.is_empty() {
        return Err(Error::Invalid(format!("{}: no records match the selection", manifest.display())));
    }
    Ok(Manifest { records })
}

fn load_selection(sel: &Selection, default: Split) -> Result<(Manifest, Vec<Sample>)> {
    let m = select(&sel.manifest, parse_split(sel.split.as_deref(), default)?, sel.tag.as_deref())?;
    let samples = load_samples(&m)?;
    Ok((m, samples))
}

/// Loads a checkpoint and applies inference-time model settings, refusing
/// any that change the stored architecture.
fn load_model(path: &Path, s: &Settings) -> Result<Checkpoint> {
    let mut ck = Checkpoint::load(path)?;
    for e in &s.model_entries {
        ck.model.config.apply(e)?;
    }
    ck.model.config.validate()?;
    Checkpoint::from_bytes(&ck.to_bytes())
        .map_err(|d| Error::Config(format!("configuration does not fit checkpoint {}: {d}", path.display())))
}

fn cmd_gen(a: &GenArgs, s: &Settings) -> Result<()> {
    let base = match &a.preset {
        Some(p) => p.parse::<Preset>()?.spec(),
        None if a.spec.is_some() => Preset::CasiaLike.spec(),
        None => return Err(Error::Config("gen needs --preset or --spec".into())),
    };
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            SyntheticSpec::parse_kv(&text, base)?
        }
        None => {
            base.validate()?;
            base
        }
    };
    let ratio: SplitRatio = a.ratio.parse().map_err(Error::Config)?;
    let seed = s.train.seed;
    info!("gen {} n={} seed={seed}", spec.tag, a.n);
    let samples = gen_synthetic(&spec, a.n, seed)?;
    let manifest = write_dataset(&samples, &a.out, ratio, seed)?;
    println!(
        "{}\t{} samples\tmean scale {:.4}\t{}",
        spec.tag,
        manifest.len(),
        mean_scale(&samples),
        a.out.join("manifest.tsv").display()
    );
    Ok(())
}

fn parse_epochs(v: &str) -> Result<[usize; 3]> {
    if let Ok(n) = v.parse::<usize>() {
        return Ok([n; 3]);
    }
    config::array("epochs", v)
}

fn loss_log(history: &[f64]) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{}\t{l:.8}\n", i + 1));
    }
    out
}

fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.tsv");
    ckpt.with_file_name(name)
}

fn cmd_train(a: &TrainArgs, mut s: Settings) -> Result<()> {
    if let Some(e) = &a.epochs {
        s.train.epochs_per_stage = parse_epochs(e)?;
    }
    if let Some(lr) = a.lr {
        s.train.learning_rate = lr;
    }
    s.train.validate()?;
    log_config("model", &s.model.to_kv());
    log_config("training", &s.train.to_kv());
    let (_, samples) = load_selection(&a.data, Split::Train)?;
    let model = Model::new(s.model.clone(), s.train.seed)?;
    let ck = train(model, &samples, &s.train)?;
    ck.save(&a.out)?;
    write(&loss_log_path(&a.out), loss_log(&ck.history))?;
    println!(
        "trained on {} samples, {} steps, final loss {:.4}",
        samples.len(),
        ck.history.len(),
        ck.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_tune(a: &TuneArgs, mut s: Settings) -> Result<()> {
    if let Some(lr) = a.lr {
        s.train.learning_rate = lr;
    }
    s.train.validate()?;
    let ck = load_model(&a.checkpoint, &s)?;
    log_config("model", &ck.model.config.to_kv());
    log_config("training", &s.train.to_kv());
    let (_, mut samples) = load_selection(&a.data, Split::Train)?;
    samples.truncate(a.limit);
    let before = ck.history.len();
    let tuned = tune_heads(ck, &samples, a.epochs, &s.train)?;
    tuned.save(&a.out)?;
    write(&loss_log_path(&a.out), loss_log(&tuned.history))?;
    println!(
        "tuned heads on {} samples for {} epochs ({} steps)",
        samples.len(),
        a.epochs,
        tuned.history.len() - before
    );
    Ok(())
}

/// Runs inference on every sample; rows and masks come back in manifest order.
fn predict(model: &Model, manifest: &Manifest, samples: &[Sample], mask_dir: &str) -> Result<Vec<(ResultRow, irisseg::image::Mask)>> {
    let mut seen = BTreeSet::new();
    manifest
        .records
        .iter()
        .zip(samples)
        .map(|(r, s)| {
            let stem = r
                .image_path
                .file_stem()
                .map(|v| v.to_string_lossy().into_owned())
                .unwrap_or_default();
            if !seen.insert(stem.clone()) {
                return Err(Error::Invalid(format!("two images share the name `{stem}`")));
            }
            let out = infer_mask(model, &s.image)?;
            let c = confusion(&out.mask, &s.mask)?;
            let image = r.image_path.display().to_string();
            let row = ResultRow {
                image_path: image.clone(),
                subject_id: r.subject_id.clone(),
                dataset_tag: r.dataset_tag.clone(),
                width: s.image.width,
                height: s.image.height,
                bbox: out.bbox,
                score: out.score,
                scores: Some(ImageScore::from_counts(&image, &r.subject_id, &r.dataset_tag, s.image.width, s.image.height, &c)),
                mask_path: format!("{mask_dir}/{stem}.pbm"),
            };
            Ok((row, out.mask))
        })
        .collect()
}

fn cmd_infer(a: &InferArgs, s: &Settings) -> Result<()> {
    let ck = load_model(&a.checkpoint, s)?;
    log_config("model", &ck.model.config.to_kv());
    let (m, samples) = load_selection(&a.data, Split::Test)?;
    let rows = predict(&ck.model, &m, &samples, "masks")?;
    let dir = a.out.join("masks");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for (row, mask) in &rows {
        save_mask(&a.out.join(&row.mask_path), mask)?;
    }
    let rows: Vec<ResultRow> = rows.into_iter().map(|r| r.0).collect();
    write(&a.out.join("results.tsv"), results_tsv(&rows))?;
    let detected = rows.iter().filter(|r| r.bbox.is_some()).count();
    println!("{} images, {detected} with an iris detection", rows.len());
    Ok(())
}

fn scores_of(model: &Model, manifest: &Manifest, samples: &[Sample]) -> Result<Vec<ImageScore>> {
    let rows = predict(model, manifest, samples, "masks")?;
    let mut scores: Vec<ImageScore> = rows.into_iter().filter_map(|r| r.0.scores).collect();
    scores.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(scores)
}

fn cmd_eval(a: &EvalArgs, s: &Settings) -> Result<()> {
    let group_by: GroupBy = a.group_by.parse()?;
    let ck = load_model(&a.checkpoint, s)?;
    log_config("model", &ck.model.config.to_kv());
    let (m, samples) = load_selection(&a.data, Split::Test)?;
    let report = aggregate(&scores_of(&ck.model, &m, &samples)?, group_by)?;
    let table = report.to_tsv();
    print!("{table}");
    if let Some(out) = &a.out {
        write(out, &table)?;
    }
    Ok(())
}

fn named(v: &str) -> Result<(String, PathBuf)> {
    match v.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::Config(format!("expected name=path, got `{v}`"))),
    }
}

fn cmd_grid(a: &GridArgs, s: &Settings) -> Result<()> {
    let split = parse_split(a.split.as_deref(), Split::Test)?;
    let mut models = Vec::new();
    for v in &a.checkpoint {
        let (name, path) = named(v)?;
        let ck = load_model(&path, s)?;
        log_config(&format!("{name} model"), &ck.model.config.to_kv());
        models.push((name, ck.model));
    }
    let mut data = Vec::new();
    for v in &a.manifest {
        let (name, path) = named(v)?;
        let m = select(&path, split, None)?;
        let samples = load_samples(&m)?;
        data.push((name, (m, samples)));
    }
    let grid = cross_grid(&models, &data, |model, (m, samples)| {
        Ok(scores_of(model, m, samples)?.iter().map(|s| s.f1).collect())
    })?;
    let table = grid.to_tsv();
    print!("{table}");
    if let Some(out) = &a.out {
        write(out, &table)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut scores = Vec::new();
    for p in &a.results {
        let text = fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        for row in parse_results(&text, p)? {
            let s = row
                .scores
                .ok_or_else(|| Error::Invalid(format!("{}: {} has no F1 score", p.display(), row.image_path)))?;
            scores.push(s);
        }
    }
    if scores.is_empty() {
        return Err(Error::Invalid("results files hold no images".into()));
    }
    scores.sort_by(|a, b| a.image.cmp(&b.image));
    let per_image: Vec<f64> = scores.iter().map(|s| s.f1).collect();
    let mut subjects: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &scores {
        subjects.entry(&s.subject_id).or_default().push(s.f1);
    }
    let per_subject: Vec<f64> = subjects.values().map(|v| moments(v).mean).collect();
    write(&a.out.join("cdf_image.tsv"), cdf_tsv(&cdf_report(&per_image)?))?;
    write(&a.out.join("cdf_subject.tsv"), cdf_tsv(&cdf_report(&per_subject)?))?;
    let cases = select_cases(&per_image)?;
    let mut list = String::from("case\timage_path\tf1\n");
    for (kind, idx) in [("worst", &cases.worst), ("best", &cases.best)] {
        for &i in idx {
            list.push_str(&format!("{kind}\t{}\t{:.6}\n", scores[i].image, scores[i].f1));
        }
    }
    write(&a.out.join("cases.tsv"), list)?;
    let (mi, ms) = (moments(&per_image), moments(&per_subject));
    println!("images\t{}\tmean F1 {:.4}\tvariance {:.6}", per_image.len(), mi.mean, mi.variance);
    println!("subjects\t{}\tmean F1 {:.4}\tvariance {:.6}", per_subject.len(), ms.mean, ms.variance);
    println!("worst\t{}\tbest\t{}", cases.worst.len(), cases.best.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let s = settings(cli.config.as_deref(), cli.seed)?;
    info!("seed {}", s.train.seed);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &s),
        Command::Train(a) => cmd_train(a, s),
        Command::Tune(a) => cmd_tune(a, s),
        Command::Infer(a) => cmd_infer(a, &s),
        Command::Eval(a) => cmd_eval(a, &s),
        Command::Grid(a) => cmd_grid(a, &s),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
