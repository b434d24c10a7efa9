//! `tubemil` command line: dataset generation, training, evaluation and
//! seeded studies.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use tubemil::linking::LinkConfig;
use tubemil::model::{train, Model, TrainConfig};
use tubemil::study::{self, evaluate_model, EvalSpec, ExperimentSpec, Method, Prepared, Study};
use tubemil::synthgen::{tubelet_lookup, violation_rate, Dataset, SyntheticConfig, TubeletConfig, Window};

#[derive(Parser)]
#[command(
    name = "tubemil",
    version,
    about = "Weakly supervised action detection with uncertainty-aware MIL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Train a model on the bags of a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Run a seeded study.
    Study(StudyArgs),
}

#[derive(Args, Default)]
struct DataFlags {
    #[arg(long)]
    num_clips: Option<usize>,
    #[arg(long)]
    frames_per_clip: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    fn_rate: Option<f64>,
    #[arg(long)]
    fp_rate: Option<f64>,
    #[arg(long)]
    jitter_std: Option<f64>,
    #[arg(long)]
    feature_noise_std: Option<f64>,
    #[arg(long)]
    single_class_clips: bool,
    /// Generator seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataFlags {
    fn patch(&self) -> Value {
        let mut m = Map::new();
        put(&mut m, "num_clips", self.num_clips);
        put(&mut m, "frames_per_clip", self.frames_per_clip);
        put(&mut m, "num_classes", self.num_classes);
        put(&mut m, "feature_dim", self.feature_dim);
        put(&mut m, "fn_rate", self.fn_rate);
        put(&mut m, "fp_rate", self.fp_rate);
        put(&mut m, "jitter_std", self.jitter_std);
        put(&mut m, "feature_noise_std", self.feature_noise_std);
        put(&mut m, "seed", self.data_seed);
        if self.single_class_clips {
            m.insert("single_class_clips".into(), Value::Bool(true));
        }
        Value::Object(m)
    }
}

#[derive(Args, Default)]
struct TrainFlags {
    /// naive, mil-lse, mil-mean, mil-max or mil-max+uncertainty.
    #[arg(long)]
    method: Option<String>,
    /// Sharpness for mil-mean and mil-lse.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    bags_per_batch: Option<usize>,
    #[arg(long)]
    tubelets_per_bag: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn patch(&self) -> Result<Value, Invalid> {
        let mut base = TrainConfig::default();
        if let Some(m) = &self.method {
            base = m.parse::<Method>().map_err(invalid)?.apply(&base, self.r);
        }
        let mut v = to_value(&base);
        let m = v.as_object_mut().unwrap();
        put(m, "epochs", self.epochs);
        put(m, "learning_rate", self.learning_rate);
        put(m, "momentum", self.momentum);
        put(m, "bags_per_batch", self.bags_per_batch);
        put(m, "tubelets_per_bag", self.tubelets_per_bag);
        put(m, "seed", self.seed);
        Ok(v)
    }
}

#[derive(Args, Default)]
struct LinkFlags {
    #[arg(long)]
    link_threshold: Option<f64>,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    min_score: Option<f64>,
}

impl LinkFlags {
    fn patch(&self) -> Value {
        let mut m = Map::new();
        put(&mut m, "link_iou_threshold", self.link_threshold);
        put(&mut m, "max_gap", self.max_gap);
        put(&mut m, "min_score", self.min_score);
        Value::Object(m)
    }
}

#[derive(Args)]
struct GenData {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Keyframes per bag, or `whole`.
    #[arg(long)]
    window: Option<String>,
    #[command(flatten)]
    data: DataFlags,
    /// TOML file with `data`, `tubelets` and `window` entries; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// TOML file with a `train` table; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON result file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    link: LinkFlags,
    /// TOML file with `link` and `eval` tables; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// single, ablation, bag_batch_sweep or subclip_sweep.
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Keyframes per bag, or `whole`.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    test_clips: Option<usize>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    link: LinkFlags,
    /// TOML experiment spec; overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// An error caused by the arguments or configuration rather than the run.
#[derive(Debug)]
struct Invalid(anyhow::Error);

fn invalid(e: impl Into<anyhow::Error>) -> Invalid {
    Invalid(e.into())
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<tubemil::Error>() {
            Some(tubemil::Error::Config(_)) => Failure::Invalid(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn put<T: Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), to_value(&v));
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serialises")
}

/// Recursively overlays `patch` onto `base`; tables merge, values replace,
/// a missing (null) patch changes nothing.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (_, Value::Null) => {}
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<Value, Invalid> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    let table: toml::Table = toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(invalid)?;
    Ok(to_value(&table))
}

fn resolve<T: DeserializeOwned>(layers: Vec<Value>) -> Result<T, Invalid> {
    let mut v = Value::Object(Map::new());
    for layer in layers {
        merge(&mut v, layer);
    }
    serde_json::from_value(v)
        .context("invalid configuration")
        .map_err(invalid)
}

fn window_value(w: &Option<String>) -> Result<Option<Value>, Invalid> {
    w.as_deref()
        .map(|s| s.parse::<Window>().map(|w| to_value(&w)).map_err(invalid))
        .transpose()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let file = read_config(&args.config)?;
    let mut flags = json!({
        "data": args.data.patch(),
        "tubelets": to_value(&TubeletConfig::default()),
        "window": to_value(&Window::WholeClip),
    });
    if let Some(w) = window_value(&args.window)? {
        flags["window"] = w;
    }
    let mut root = json!({ "data": to_value(&SyntheticConfig::default()) });
    merge(&mut root, flags);
    merge(&mut root, file);
    let data: SyntheticConfig = resolve(vec![root["data"].take()])?;
    let tubelets: TubeletConfig = resolve(vec![root["tubelets"].take()])?;
    let window: Window = resolve(vec![root["window"].take()])?;
    data.validate().map_err(invalid)?;

    let ds = Dataset::build(&data, &tubelets, window).map_err(anyhow::Error::from)?;
    let mut bytes = Vec::new();
    ds.write(&mut bytes).map_err(anyhow::Error::from)?;
    study::write_atomic(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let bags = ds.training_bags().map_err(anyhow::Error::from)?;
    let lookup = tubelet_lookup(&ds.tubelets);
    println!(
        "clips={} tubelets={} bags={} violation_rate={:.4}",
        ds.world.clips.len(),
        lookup.len(),
        bags.len(),
        violation_rate(&bags, &lookup)
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), Failure> {
    let mut file = read_config(&args.config)?;
    let cfg: TrainConfig = resolve(vec![args.train.patch()?, file["train"].take()])?;
    cfg.validate().map_err(invalid)?;
    let ds = Dataset::read(open(&args.data)?).context("reading dataset")?;
    let bags = ds.training_bags().map_err(anyhow::Error::from)?;
    let (model, log) = train(&bags, &cfg).map_err(anyhow::Error::from)?;
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).map_err(anyhow::Error::from)?;
    study::write_atomic(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "bags={} epochs={} final_loss={:.6}",
        bags.len(),
        log.epoch_loss.len(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), Failure> {
    let mut file = read_config(&args.config)?;
    let link: LinkConfig = resolve(vec![
        to_value(&LinkConfig::default()),
        args.link.patch(),
        file["link"].take(),
    ])?;
    let eval: EvalSpec = resolve(vec![to_value(&EvalSpec::default()), file["eval"].take()])?;
    link.validate().map_err(invalid)?;
    let model = Model::read_checkpoint(open(&args.model)?).context("reading checkpoint")?;
    let ds = Dataset::read(open(&args.data)?).context("reading dataset")?;
    let prepared = Prepared {
        world: ds.world,
        tubelets: ds.tubelets,
    };
    let (frame, video) = evaluate_model(&model, &prepared, &link, &eval).map_err(anyhow::Error::from)?;
    println!("Frame AP\n{}", frame.table());
    println!("Video AP\n{}", video.table());
    if let Some(out) = &args.out {
        let record = json!({ "link": link, "eval": eval, "frame_ap": frame, "video_ap": video });
        let mut bytes = serde_json::to_vec_pretty(&record).context("encoding results")?;
        bytes.push(b'\n');
        study::write_atomic(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn study_cmd(args: StudyArgs) -> Result<(), Failure> {
    let file = read_config(&args.config)?;
    let mut flags = Map::new();
    if let Some(s) = &args.study {
        flags.insert("study".into(), to_value(&s.parse::<Study>().map_err(invalid)?));
    }
    put(&mut flags, "name", args.name.clone());
    put(&mut flags, "seeds", args.seeds.clone());
    put(&mut flags, "out_dir", args.out_dir.clone());
    put(&mut flags, "test_clips", args.test_clips);
    if let Some(w) = window_value(&args.window)? {
        flags.insert("window".into(), w);
    }
    flags.insert("data".into(), args.data.patch());
    flags.insert("link".into(), args.link.patch());
    if args.train.method.is_some() || has_train_flags(&args.train) {
        flags.insert("train".into(), args.train.patch()?);
    }
    let spec: ExperimentSpec = resolve(vec![to_value(&ExperimentSpec::default()), Value::Object(flags), file])?;
    spec.validate().map_err(invalid)?;
    let out = study::run(&spec).map_err(anyhow::Error::from)?;
    print!("{}", study::aggregate_csv(&spec, &out.rows));
    Ok(())
}

fn has_train_flags(t: &TrainFlags) -> bool {
    t.epochs.is_some()
        || t.learning_rate.is_some()
        || t.momentum.is_some()
        || t.bags_per_batch.is_some()
        || t.tubelets_per_bag.is_some()
        || t.seed.is_some()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Study(a) => study_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
