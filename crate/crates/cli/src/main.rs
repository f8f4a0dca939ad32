use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use tma_core::data::{
    corpus_stats, link_events, load_manifest, synth_generate, tokenize, Dataset, Split,
    SynthConfig, Transition,
};
use tma_core::decoding::{caption_day, CaptionRecord, DecodeConfig};
use tma_core::layers::check_layer_gradients;
use tma_core::metrics::{evaluate, EvalEntry};
use tma_core::model::{gradcheck_model, load_model, save_model, ModelVariant};
use tma_core::training::{train_loop, Optimizer, TrainingConfig};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "tma",
    version,
    about = "Train, decode and score multi-input attention captioners"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write weights, vocabulary sidecar and history.
    Train(TrainArgs),
    /// Caption events day by day, chaining each event into the next.
    Caption(CaptionArgs),
    /// Score hypothesis lines against manifest references.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus.
    Datagen(DatagenArgs),
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: ModelVariant,
    #[arg(long, value_parser = parse_optimizer, default_value = "adadelta")]
    optimizer: Optimizer,
    /// One seed, or a comma-separated list for repeated runs.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    /// Weight file; with several seeds `.seed<N>` is inserted before the extension.
    #[arg(long)]
    out: PathBuf,
    /// History log; defaults to `<out>.history.jsonl`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Override a training option, e.g. `--set batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Parser)]
#[command(group(clap::ArgGroup::new("which").required(true).args(["split", "day"])))]
struct CaptionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    day: Option<String>,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    max_length: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct GradcheckArgs {
    /// A variant name or `all`.
    #[arg(long, default_value = "all")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransitionArg {
    Uniform,
    Seeded,
}

#[derive(Parser)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    events_per_day: usize,
    #[arg(long, default_value_t = 8)]
    activities: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    transition: TransitionArg,
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    s.parse().map_err(|e: tma_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    s.parse().map_err(|e: tma_core::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: tma_core::Error| e.to_string())
}

fn jsonl_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<T: serde::Serialize>(out: &mut dyn Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn seeded_path(path: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

fn default_history(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.jsonl");
    PathBuf::from(s)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainingConfig {
        optimizer: args.optimizer,
        ..TrainingConfig::default()
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{kv}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let data = Dataset::load(&args.manifest)?;
    let many = args.seed.len() > 1;
    let mut best = Vec::new();
    for &seed in &args.seed {
        cfg.seed = seed;
        info!("training {} with seed {seed}", args.variant);
        let outcome = train_loop(&data, args.variant, &cfg)?;
        let weights = seeded_path(&args.out, seed, many);
        save_model(&weights, &outcome.model, &outcome.vocabulary)?;
        let history = seeded_path(
            &args
                .history
                .clone()
                .unwrap_or_else(|| default_history(&args.out)),
            seed,
            many,
        );
        write_jsonl(&mut *jsonl_writer(Some(&history))?, &outcome.history)?;
        let top = outcome
            .history
            .iter()
            .map(|h| h.val_bleu4)
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "seed {seed}: {} updates, best val BLEU-4 {top:.4}, weights {}",
            outcome.updates,
            weights.display()
        );
        best.push(top);
    }
    if many {
        best.sort_by(f64::total_cmp);
        println!(
            "median best val BLEU-4 over {} seeds: {:.4}",
            best.len(),
            best[best.len() / 2]
        );
    }
    Ok(())
}

fn cmd_caption(args: CaptionArgs) -> Result<()> {
    let (model, vocab) = load_model(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let data = Dataset::load(&args.manifest)?;
    if data.feature_dim != model.config.dims.feature_dim {
        bail!(
            "manifest features have width {}, model expects {}",
            data.feature_dim,
            model.config.dims.feature_dim
        );
    }
    let cfg = DecodeConfig {
        beam_size: args.beam,
        max_length: args.max_length,
        length_normalization: false,
    };
    cfg.validate()?;
    let days: Vec<_> = match (&args.split, &args.day) {
        (Some(split), _) => data.days_in(*split).collect(),
        (None, Some(id)) => vec![data
            .days
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| anyhow!("no day `{id}` in {}", args.manifest.display()))?],
        (None, None) => unreachable!("clap requires --split or --day"),
    };
    let mut records: Vec<CaptionRecord> = Vec::new();
    for day in days {
        records.extend(caption_day(&model, &vocab, day, &cfg)?);
    }
    write_jsonl(&mut *jsonl_writer(args.out.as_deref())?, &records)
}

fn read_hypotheses(path: &Path) -> Result<BTreeMap<(String, String), String>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CaptionRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad hypothesis line", path.display(), n + 1))?;
        if out
            .insert((r.day_id.clone(), r.event_id.clone()), r.caption)
            .is_some()
        {
            bail!(
                "{}: duplicate hypothesis for {}/{}",
                path.display(),
                r.day_id,
                r.event_id
            );
        }
    }
    if out.is_empty() {
        bail!("{} contains no hypotheses", path.display());
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let hyps = read_hypotheses(&args.hyp)?;
    let manifest = load_manifest(&args.manifest)?;
    let mut corpus = Vec::new();
    let mut missing = Vec::new();
    for day in manifest.days_in(args.split) {
        for ev in &day.events {
            let refs = ev.captions.iter().map(|c| tokenize(c)).collect();
            let id = format!("{}/{}", day.id, ev.id);
            match hyps.get(&(day.id.clone(), ev.id.clone())) {
                Some(h) => corpus.push(EvalEntry::new(id, tokenize(h), refs)),
                None => missing.push(id),
            }
        }
    }
    if !missing.is_empty() {
        bail!(
            "missing hypotheses for {} events: {}",
            missing.len(),
            missing.join(", ")
        );
    }
    let report = evaluate(&corpus)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, text + "\n").with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

/// Returns whether every error is under the tolerance.
fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let variants: Vec<ModelVariant> = if args.variant == "all" {
        ModelVariant::ALL.to_vec()
    } else {
        vec![args.variant.parse()?]
    };
    println!(
        "epsilon {:e}, tolerance {GRADCHECK_TOL:e}, seed {}",
        args.eps, args.seed
    );
    let mut ok = true;
    for (layer, err) in check_layer_gradients(args.seed, args.eps)? {
        ok &= err < GRADCHECK_TOL;
        println!("layer {layer:<24} max relative error {err:.3e}");
    }
    for v in variants {
        let r = gradcheck_model(v, args.seed, args.eps)?;
        ok &= r.max_relative_error < GRADCHECK_TOL;
        println!(
            "model {:<24} max relative error {:.3e} ({}; {} coordinates, largest coordinate error {:.1e})",
            v.as_str(),
            r.max_relative_error,
            r.worst.unwrap_or_default(),
            r.coordinates_checked,
            r.max_coordinate_relative_error
        );
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn cmd_datagen(args: DatagenArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        n_days: args.days,
        events_per_day: args.events_per_day,
        feature_dim: args.feature_dim,
        n_activities: args.activities,
        transition: match args.transition {
            TransitionArg::Uniform => Transition::Uniform,
            TransitionArg::Seeded => Transition::Seeded,
        },
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let manifest = synth_generate(&cfg, &args.out)?;
    println!("{}", corpus_stats(&manifest)?.table());
    let linked: usize = manifest
        .days
        .iter()
        .enumerate()
        .map(|(i, d)| link_events(i, d).len())
        .sum();
    println!("linked samples: {linked}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Caption(a) => cmd_caption(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Datagen(a) => cmd_datagen(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
