//! `bitrec` command-line tool.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bitrec::dataio::{generate_synthetic, load_interactions, make_splits, write_catalog, write_interactions, Splits};
use bitrec::diagnostics::grad_check_tiny;
use bitrec::evaluator::{behavior_masking_eval, evaluate, format_table, run_ablation, write_reports, Experiment, StudyCell, Variant};
use bitrec::model::{Model, Vocab};
use bitrec::numerics::init::named_rng;
use bitrec::schema::{BehaviorSchema, Catalog, UserSequence};
use bitrec::trainer::{load_checkpoint, save_checkpoint, train};
use clap::{Parser, Subcommand};
use rand::Rng;

use config::RunConfig;

/// Generative multi-behavior sequential recommender.
///
/// Any config key can also be given as a flag, e.g. `--model.d 32`.
#[derive(Parser, Debug)]
#[command(name = "bitrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tab-separated interaction log.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Tab-separated item catalog.
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Checkpoint file to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Fit a model, save a checkpoint and report test metrics.
    Train,
    /// Load a checkpoint and report full-catalog test metrics.
    Eval,
    /// Train and evaluate each variant in `run.variants`.
    Ablate,
    /// Retrain with each behavior in `run.masks` removed from training data.
    MaskEval,
    /// Write a synthetic funnel dataset.
    GenSynthetic,
    /// Finite-difference check of the tiny model's gradients.
    GradCheck,
    /// Top-K next items for the user `run.user`.
    Predict,
}

type Overrides = Vec<(String, String)>;

/// Pulls `--a.b value` and `--a.b=value` pairs out of `args`.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("flag --{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn resolve(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    let named = [
        ("run.seed", cli.seed.map(|s| s.to_string())),
        ("run.out", cli.out.as_ref().map(|p| p.display().to_string())),
        ("data.dataset", cli.dataset.as_ref().map(|p| p.display().to_string())),
        ("data.catalog", cli.catalog.as_ref().map(|p| p.display().to_string())),
        ("run.checkpoint", cli.checkpoint.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v).with_context(|| format!("flag --{k}"))?;
    }
    Ok(cfg)
}

/// Independent seeds for data, initialization and training draws.
struct Seeds {
    data: u64,
    init: u64,
    train: u64,
}

fn seeds(cfg: &RunConfig) -> Result<Seeds> {
    let s = cfg.seed()?;
    let draw = |label: &str| named_rng(s, label).random::<u64>();
    Ok(Seeds { data: draw("data"), init: draw("init"), train: draw("train") })
}

fn threads() -> Result<usize> {
    match std::env::var("BITREC_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("BITREC_THREADS=`{v}` is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

struct Data {
    schema: BehaviorSchema,
    catalog: Catalog,
    sequences: Vec<UserSequence>,
}

impl Data {
    fn vocab(&self) -> Vocab {
        Vocab { items: self.catalog.item_count(), behaviors: self.schema.len(), categories: self.catalog.category_count().max(1) }
    }
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let schema = BehaviorSchema::parse(cfg.str("data.schema"))?;
    let dataset = cfg.path("data.dataset").context("no dataset given (use --dataset PATH)")?;
    let catalog_path = cfg.path("data.catalog");
    let (catalog, sequences) = load_interactions(&dataset, &schema, catalog_path.as_deref())?;
    let violations = bitrec::schema::validate_schema(&schema, &catalog, &sequences);
    if let Some(v) = violations.first() {
        bail!("{} invalid interactions in {}; first: {v}", violations.len(), dataset.display());
    }
    Ok(Data { schema, catalog, sequences })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.str("run.out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_model(cfg: &RunConfig, data: &Data) -> Result<Model<f32>> {
    let path = cfg.path("run.checkpoint").context("no checkpoint given (use --checkpoint PATH)")?;
    let params = load_checkpoint::<f32>(&path)?;
    Ok(Model::from_params(cfg.model()?, data.vocab(), &data.schema, params)?)
}

fn experiment<'a>(cfg: &RunConfig, data: &'a Data, splits: &'a Splits, seeds: &Seeds) -> Result<Experiment<'a>> {
    let mut train_cfg = cfg.train()?;
    train_cfg.rng_seed = seeds.train;
    Ok(Experiment {
        schema: &data.schema,
        vocab: data.vocab(),
        splits,
        model: cfg.model()?,
        train: train_cfg,
        init_seed: seeds.init,
        cutoffs: cfg.cutoffs()?,
    })
}

fn report(dir: &Path, stem: &str, cells: &[StudyCell]) -> Result<()> {
    print!("{}", format_table(cells));
    write_reports(dir, stem, cells)?;
    println!("wrote {}/{stem}.tsv and {stem}.jsonl", dir.display());
    Ok(())
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let seeds = seeds(cfg)?;
    match command {
        Command::GenSynthetic => {
            let synth = cfg.synthetic(seeds.data)?;
            let (catalog, sequences) = generate_synthetic(&synth)?;
            let dir = out_dir(cfg)?;
            write_interactions(&dir.join("interactions.tsv"), &BehaviorSchema::ecommerce(), &sequences)?;
            write_catalog(&dir.join("catalog.tsv"), &catalog)?;
            let events: usize = sequences.iter().map(UserSequence::len).sum();
            println!("wrote {} users, {events} interactions, {} items to {}", sequences.len(), catalog.item_count(), dir.display());
        }
        Command::GradCheck => {
            let r = grad_check_tiny(seeds.init, cfg.parse("gradcheck.coordinates")?, cfg.parse("gradcheck.step")?)?;
            println!("max relative error {:.3e} over {} coordinates of {} tensors", r.max_relative_error, r.coordinates, r.parameters);
            if r.max_relative_error.is_nan() || r.max_relative_error >= 1e-5 {
                bail!("gradient check failed: {:.3e} >= 1e-5", r.max_relative_error);
            }
        }
        Command::Train => {
            let data = load_data(cfg)?;
            let splits = make_splits(&data.sequences, cfg.split()?);
            let exp = experiment(cfg, &data, &splits, &seeds)?;
            let dir = out_dir(cfg)?;
            let mut model = Model::<f32>::new(exp.model.clone(), exp.vocab, &data.schema, exp.init_seed)?;
            println!("{} parameters in {} tensors", model.params.parameter_count(), model.params.len());
            train(&mut model, &data.schema, &splits.train, &splits.val, &exp.train, |e| {
                let val = e.val.as_ref().map_or(String::new(), |r| format!("  val MRR {:.5}", r.overall.mrr));
                println!("epoch {:>3}  loss {:.5}  lr {:.3e}{val}", e.epoch, e.train_loss, e.learning_rate);
            })?;
            let ck = dir.join("model.bitr");
            save_checkpoint(&model.params, &ck)?;
            let mut resolved = cfg.clone();
            resolved.set("run.checkpoint", &ck.display().to_string())?;
            std::fs::write(dir.join("config.cfg"), resolved.render()).context("writing config.cfg")?;
            println!("saved {}", ck.display());
            let test = evaluate(&model, &data.schema, &splits.test, &exp.cutoffs)?;
            report(&dir, "train_report", &[StudyCell { variant: "model".into(), mask: "none".into(), report: test, log: Vec::new() }])?;
        }
        Command::Eval => {
            let data = load_data(cfg)?;
            let splits = make_splits(&data.sequences, cfg.split()?);
            let model = load_model(cfg, &data)?;
            let test = evaluate(&model, &data.schema, &splits.test, &cfg.cutoffs()?)?;
            report(
                &out_dir(cfg)?,
                "eval_report",
                &[StudyCell { variant: "model".into(), mask: "none".into(), report: test, log: Vec::new() }],
            )?;
        }
        Command::Ablate => {
            let variants = cfg.list("run.variants").iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?;
            let data = load_data(cfg)?;
            let splits = make_splits(&data.sequences, cfg.split()?);
            let exp = experiment(cfg, &data, &splits, &seeds)?;
            let cells = run_ablation(&variants, &exp)?;
            report(&out_dir(cfg)?, "ablation", &cells)?;
        }
        Command::MaskEval => {
            let data = load_data(cfg)?;
            let names = cfg.list("run.masks");
            let masks = if names.is_empty() {
                (0..data.schema.len()).collect()
            } else {
                names
                    .iter()
                    .map(|n| data.schema.id_of(n).with_context(|| format!("run.masks: `{n}` is not a behavior of the schema")))
                    .collect::<Result<Vec<_>>>()?
            };
            let splits = make_splits(&data.sequences, cfg.split()?);
            let exp = experiment(cfg, &data, &splits, &seeds)?;
            let cells = behavior_masking_eval(&masks, &exp)?;
            report(&out_dir(cfg)?, "masking", &cells)?;
        }
        Command::Predict => {
            let data = load_data(cfg)?;
            let model = load_model(cfg, &data)?;
            let user = cfg.str("run.user");
            let seq = data
                .sequences
                .iter()
                .find(|s| s.external_id == user)
                .with_context(|| format!("user `{user}` not found (set --run.user)"))?;
            let p = model.predict_next(seq, cfg.parse("run.top_k")?)?;
            println!("rank\titem\tscore");
            for (r, (item, score)) in p.items.iter().enumerate() {
                println!("{}\t{item}\t{score:.6}", r + 1);
            }
            for (b, prob) in data.schema.behaviors().iter().zip(&p.behaviors) {
                println!("behavior\t{}\t{prob:.6}", b.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(parts) => parts,
        Err(e) => return fail(e),
    };
    let cli = Cli::parse_from(args);
    let result = resolve(&cli, &overrides).and_then(|cfg| {
        rayon::ThreadPoolBuilder::new().num_threads(threads()?).build_global().context("starting worker pool")?;
        println!("# resolved config");
        print!("{}", cfg.render());
        run(cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::FAILURE
}
