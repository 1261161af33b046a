use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attrformer::config::{Ablation, RunConfig};
use attrformer::data::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use attrformer::model::Model;
use attrformer::train::{dump_attention, evaluate_setting, localization_accuracy, train, write_epoch_log, Setting};
use attrformer::{Error, Result};

const SEED_ENV: &str = "ATTRFORMER_SEED";
const CONFIG_FILE: &str = "config.json";
const EPOCH_LOG_FILE: &str = "epoch_log.csv";

#[derive(Parser)]
#[command(name = "attrformer", version, about = "Attribute-guided Transformer for zero-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-attribute dataset.
    Generate(GenerateArgs),
    /// Train a model and write its weights, config and epoch log.
    Train(TrainArgs),
    /// Print test metrics of a trained model.
    Eval(EvalArgs),
    /// Write attention maps for test images.
    DumpAttention(DumpArgs),
    /// Train the full model and one ablation under the same seed.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file of generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_seen: Option<usize>,
    #[arg(long)]
    n_unseen: Option<usize>,
    #[arg(long)]
    n_attributes: Option<usize>,
    #[arg(long)]
    grid_rows: Option<usize>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_a: Option<usize>,
    #[arg(long)]
    examples_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

/// Command-line overrides applied on top of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_ar: Option<f64>,
    #[arg(long)]
    lambda_sc: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    d_g: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    clamp_eps: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Falls back to the config file, then ATTRFORMER_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    disable_fae: bool,
    #[arg(long)]
    disable_fa: bool,
    #[arg(long)]
    disable_dec: bool,
    #[arg(long)]
    decoder_residual: bool,
    #[arg(long)]
    train_va: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the dataset recorded in the model's config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "both", value_parser = ["czsl", "gzsl", "both"])]
    setting: String,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of test images to dump (seen split first).
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["no_fae", "no_fa", "no_dec", "no_sc", "no_ar"])]
    which: String,
    /// Also writes both trained models under `<out>/full` and `<out>/<which>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpAttention(args) => cmd_dump(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => read_json(path)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { spec.$field = v; })* };
    }
    set!(seed, n_seen, n_unseen, n_attributes, grid_rows, grid_cols, d_in, d_a, examples_per_class, test_per_class, signal, noise);
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "wrote {} ({} train, {} test seen, {} test unseen)",
        args.out.display(),
        ds.train.len(),
        ds.test_seen.len(),
        ds.test_unseen.len()
    );
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Defaults, then the config file, then flags. The seed falls back to the
/// environment only when neither the file nor a flag sets it.
fn merged_config(config: Option<&Path>, dataset: Option<&Path>, out: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let (mut cfg, file_has_seed) = match config {
        Some(path) => {
            let raw: serde_json::Value = read_json(path)?;
            let has_seed = raw.get("seed").is_some();
            let cfg: RunConfig = serde_json::from_value(raw).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
            (cfg, has_seed)
        }
        None => (RunConfig::default(), false),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = o.$field { cfg.$field = v; })* };
    }
    set!(lr, momentum, weight_decay, batch_size, epochs, lambda_ar, lambda_sc, d_model, d_g, heads, layers, dropout_rate, clamp_eps, gamma);
    if o.d_k.is_some() {
        cfg.d_k = o.d_k;
    }
    if o.d_ff.is_some() {
        cfg.d_ff = o.d_ff;
    }
    cfg.disable_fae |= o.disable_fae;
    cfg.disable_fa |= o.disable_fa;
    cfg.disable_dec |= o.disable_dec;
    cfg.decoder_residual |= o.decoder_residual;
    cfg.train_va |= o.train_va;
    match o.seed {
        Some(seed) => cfg.seed = seed,
        None if !file_has_seed => {
            if let Ok(text) = std::env::var(SEED_ENV) {
                cfg.seed = text
                    .trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?;
            }
        }
        None => {}
    }
    if let Some(d) = dataset {
        cfg.dataset = Some(d.display().to_string());
    }
    if let Some(d) = out {
        cfg.output = Some(d.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.dataset
        .as_deref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Invalid("no dataset given (use --dataset or the config's dataset key)".into()))
}

fn write_run(dir: &Path, model: &Model, logs: &[attrformer::train::EpochLog]) -> Result<()> {
    model.save(dir)?;
    model.config.save(&dir.join(CONFIG_FILE))?;
    write_epoch_log(&dir.join(EPOCH_LOG_FILE), logs)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = merged_config(args.config.as_deref(), args.dataset.as_deref(), args.out.as_deref(), &args.overrides)?;
    let out = cfg
        .output
        .as_deref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Invalid("no output directory given (use --out or the config's output key)".into()))?;
    let ds = load_dataset(&dataset_path(&cfg)?)?;
    let (model, logs) = train(&ds, &cfg)?;
    write_run(&out, &model, &logs)?;
    if let Some(last) = logs.last() {
        println!(
            "epoch {} loss={:.4} acc={:.1} U={:.1} S={:.1} H={:.1}",
            last.epoch, last.loss_total, last.acc, last.u, last.s, last.h
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn model_and_dataset(model_dir: &Path, dataset: Option<&Path>) -> Result<(Model, attrformer::ZslDataset)> {
    let model = Model::load(model_dir)?;
    let path = match dataset {
        Some(p) => p.to_path_buf(),
        None => dataset_path(&model.config)?,
    };
    let ds = load_dataset(&path)?;
    Ok((model, ds))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let setting = Setting::parse(&args.setting)?;
    let (model, ds) = model_and_dataset(&args.model, args.dataset.as_deref())?;
    let m = evaluate_setting(&model, &ds, setting)?;
    println!("{}", m.line(setting));
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let (model, ds) = model_and_dataset(&args.model, args.dataset.as_deref())?;
    let index = dump_attention(&model, &ds, &args.out, args.limit)?;
    print!("wrote {} attention maps to {}", index.len(), args.out.display());
    if ds.planted_cells.is_some() {
        print!(" (localization {:.1}%)", 100.0 * localization_accuracy(&model, &ds)?);
    }
    println!();
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let which = Ablation::parse(&args.which)?;
    let full = merged_config(args.config.as_deref(), args.dataset.as_deref(), None, &args.overrides)?;
    let ablated = which.apply(&full);
    let ds = load_dataset(&dataset_path(&full)?)?;
    for (name, cfg) in [("full", &full), (which.name(), &ablated)] {
        let (model, logs) = train(&ds, cfg)?;
        let m = evaluate_setting(&model, &ds, Setting::Both)?;
        println!("{name:<8} {}", m.line(Setting::Both));
        if let Some(out) = &args.out {
            write_run(&out.join(name), &model, &logs)?;
        }
    }
    Ok(())
}
