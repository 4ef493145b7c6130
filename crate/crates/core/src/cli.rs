//! The `clipq` command line: `train`, `build`, `query`, `eval`, `inspect`,
//! plus `synth` for generating a synthetic dataset.
//!
//! Settings come from an optional TOML run-config file (`--config`), with any
//! command-line flag taking precedence. Outputs land in `--out`:
//! `params.cpqs`, `train_report.toml`, `database.cpqd`, `results.tsv`,
//! `metrics.toml` and `eta_sweep.tsv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::evaluation::{mean_average_precision, ApNormalization, EvalOptions, MetricsReport};
use crate::retrieval::{build_database, query_top_k};
use crate::store::{self, Manifest};
use crate::synth::{self, ClusterSpec};
use crate::trainer::{fit_with, Hyperparams, Model, TrainReport};

pub const PARAMS_FILE: &str = "params.cpqs";
pub const REPORT_FILE: &str = "train_report.toml";
pub const DATABASE_FILE: &str = "database.cpqd";
pub const RESULTS_FILE: &str = "results.tsv";
pub const METRICS_FILE: &str = "metrics.toml";
pub const SWEEP_FILE: &str = "eta_sweep.tsv";
/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CLIPQ_THREADS";

#[derive(Debug, Parser)]
#[command(name = "clipq", version, about = "Clipped contrastive product quantization")]
pub struct Cli {
    /// TOML run-config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn the projection head and codebooks from the training split.
    Train(CommonArgs),
    /// Encode the database split into a code database.
    Build(CommonArgs),
    /// Rank the database for every item of a query feature file.
    Query(QueryArgs),
    /// Compute mAP@R of the query split, or sweep eta.
    Eval(EvalArgs),
    /// Describe a feature, snapshot or database file.
    Inspect {
        path: PathBuf,
    },
    /// Write a synthetic clustered dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Code length; sets M = bits / log2(K).
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub eta: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Codewords per codebook (power of two, at most 256).
    #[arg(long)]
    pub codewords: Option<usize>,
    /// Projection output dimension (defaults to the input dimension).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lr_codebooks: Option<f64>,
    #[arg(long)]
    pub lr_head: Option<f64>,
    /// Parameter snapshot to use instead of `<out>/params.cpqs`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Feature file of queries (view 0 is used).
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    /// Database file instead of `<out>/database.cpqd`.
    #[arg(long)]
    pub database: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApDenominator {
    RetrievedRelevant,
    AllRelevant,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Cutoff R of mAP@R (defaults to the manifest's value).
    #[arg(long)]
    pub map_at: Option<usize>,
    #[arg(long, value_enum, default_value_t = ApDenominator::RetrievedRelevant)]
    pub ap_denominator: ApDenominator,
    /// Train and evaluate once per eta value, e.g. `0,5,10,15,20`.
    #[arg(long, value_delimiter = ',')]
    pub sweep_eta: Vec<usize>,
    /// Code lengths of the sweep columns (defaults to the configured bits).
    #[arg(long, value_delimiter = ',')]
    pub sweep_bits: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_cluster: usize,
    #[arg(long, default_value_t = 20)]
    pub query_per_cluster: usize,
    #[arg(long, default_value_t = 1.2)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.0)]
    pub duplicates: f64,
    #[arg(long, default_value_t = 100)]
    pub map_at: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Contents of a `--config` file: hyperparameters plus paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bits: Option<usize>,
    #[serde(flatten)]
    pub hyper: Hyperparams,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))
    }

    /// Applies command-line overrides and validates the result.
    pub fn merged(mut self, args: &CommonArgs) -> anyhow::Result<Self> {
        let h = &mut self.hyper;
        if let Some(v) = args.codewords {
            h.num_codewords = v;
        }
        if let Some(v) = args.eta {
            h.eta = v;
        }
        if let Some(v) = args.tau {
            h.tau = v;
        }
        if let Some(v) = args.alpha {
            h.alpha = v;
        }
        if let Some(v) = args.beta {
            h.beta = v;
        }
        if let Some(v) = args.gamma {
            h.gamma = v;
        }
        if let Some(v) = args.batch {
            h.batch_size = v;
        }
        if let Some(v) = args.epochs {
            h.max_epochs = v;
        }
        if let Some(v) = args.seed {
            h.seed = v;
        }
        if let Some(v) = args.dim {
            h.proj_dim = Some(v);
        }
        if let Some(v) = args.lr_codebooks {
            h.lr_codebooks = v;
        }
        if let Some(v) = args.lr_head {
            h.lr_head = v;
        }
        if args.manifest.is_some() {
            self.manifest = args.manifest.clone();
        }
        if args.out.is_some() {
            self.out = args.out.clone();
        }
        if args.bits.is_some() {
            self.bits = args.bits;
        }
        if let Some(bits) = self.bits {
            self.hyper.set_bits(bits)?;
        }
        self.hyper.validate()?;
        Ok(self)
    }

    fn manifest(&self) -> anyhow::Result<Manifest> {
        let path = self.manifest.as_ref().context("--manifest is required")?;
        Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        let out = self.out.as_deref().context("--out is required")?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }
}

fn load_config(cli_config: Option<&Path>, args: &CommonArgs) -> anyhow::Result<RunConfig> {
    let base = match cli_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.merged(args)
}

fn snapshot_path(config: &RunConfig, args: &CommonArgs) -> anyhow::Result<PathBuf> {
    match &args.params {
        Some(p) => Ok(p.clone()),
        None => Ok(config.out_dir()?.join(PARAMS_FILE)),
    }
}

fn load_model(path: &Path, manifest: Option<&Manifest>) -> anyhow::Result<Model> {
    let model = store::load_parameters(path).with_context(|| format!("loading snapshot {}", path.display()))?;
    if let Some(m) = manifest {
        let d_in = m.input_dim()?;
        if d_in != model.head.in_dim() {
            return Err(crate::Error::DimensionMismatch(format!(
                "snapshot expects {}-dim features, manifest files have {d_in}",
                model.head.in_dim()
            ))
            .into());
        }
    }
    Ok(model)
}

fn train_model(manifest: &Manifest, hyper: &Hyperparams, quiet: bool) -> anyhow::Result<(TrainReport, Model)> {
    let train = store::read_features(&manifest.train)
        .with_context(|| format!("reading {}", manifest.train.display()))?;
    let result = fit_with(&train, hyper, |p| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss/query {:.6}  total {:.4}  decay {:.4}  codeword-sim {:.4}  {:.1}s",
                p.epoch + 1,
                p.per_query,
                p.loss.total,
                p.loss.weight_decay,
                p.loss.codeword_reg,
                p.elapsed_secs
            );
        }
    })?;
    Ok(result)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    best_epoch: Option<usize>,
    stopped_early: bool,
    wall_clock_secs: f64,
    hyperparams: &'a Hyperparams,
    history: Vec<HistoryRow>,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    contrastive: f64,
    weight_decay: f64,
    codeword_reg: f64,
    total: f64,
}

fn report_toml(report: &TrainReport, hyper: &Hyperparams) -> anyhow::Result<String> {
    let file = ReportFile {
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        wall_clock_secs: report.wall_clock_secs,
        hyperparams: hyper,
        history: report
            .history
            .iter()
            .enumerate()
            .map(|(epoch, l)| HistoryRow {
                epoch,
                contrastive: l.contrastive,
                weight_decay: l.weight_decay,
                codeword_reg: l.codeword_reg,
                total: l.total,
            })
            .collect(),
    };
    Ok(toml::to_string(&file)?)
}

pub fn cmd_train(config: &RunConfig, quiet: bool) -> anyhow::Result<()> {
    let manifest = config.manifest()?;
    let out = config.out_dir()?;
    let (report, model) = train_model(&manifest, &config.hyper, quiet)?;
    store::save_parameters(&out.join(PARAMS_FILE), &model)?;
    store::write_atomic(&out.join(REPORT_FILE), report_toml(&report, &model.hyper)?.as_bytes())?;
    if !quiet {
        eprintln!(
            "trained {} bits (M = {}, K = {}), best epoch {:?}, {:.1}s",
            model.hyper.bits(),
            model.hyper.num_codebooks,
            model.hyper.num_codewords,
            report.best_epoch.map(|e| e + 1),
            report.wall_clock_secs
        );
    }
    Ok(())
}

pub fn cmd_build(config: &RunConfig, args: &CommonArgs) -> anyhow::Result<()> {
    let manifest = config.manifest()?;
    let model = load_model(&snapshot_path(config, args)?, Some(&manifest))?;
    let items = store::read_features(&manifest.database)
        .with_context(|| format!("reading {}", manifest.database.display()))?;
    let db = build_database(&items, &model)?;
    store::save_database(&config.out_dir()?.join(DATABASE_FILE), &db)?;
    if !args.quiet {
        eprintln!(
            "encoded {} items, {} code bytes per item",
            db.len(),
            db.code_width()
        );
    }
    Ok(())
}

pub fn cmd_query(config: &RunConfig, args: &QueryArgs) -> anyhow::Result<()> {
    let out = config.out_dir()?;
    let db_path = args.database.clone().unwrap_or_else(|| out.join(DATABASE_FILE));
    let db = store::load_database(&db_path).with_context(|| format!("loading {}", db_path.display()))?;
    let model = load_model(&snapshot_path(config, &args.common)?, None)?;
    let queries = store::read_features(&args.queries)?;
    let mut text = String::new();
    for q in 0..queries.len() {
        let raw: Vec<f64> = queries.view(q, 0).iter().map(|&x| x as f64).collect();
        let result = query_top_k(&db, &raw, &model.head, args.k)?;
        writeln!(text, "# query {}", queries.item_id(q))?;
        for (rank, (id, score)) in result.item_ids.iter().zip(&result.scores).enumerate() {
            writeln!(text, "{}\t{id}\t{score}", rank + 1)?;
        }
    }
    store::write_atomic(&out.join(RESULTS_FILE), text.as_bytes())?;
    Ok(())
}

fn eval_options(manifest: &Manifest, args: &EvalArgs) -> EvalOptions {
    EvalOptions {
        cutoff: args.map_at.unwrap_or(manifest.map_at),
        normalization: match args.ap_denominator {
            ApDenominator::RetrievedRelevant => ApNormalization::RetrievedRelevant,
            ApDenominator::AllRelevant => ApNormalization::AllRelevant,
        },
        exclude_self: manifest.exclude_query_from_database,
    }
}

pub fn cmd_eval(config: &RunConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let manifest = config.manifest()?;
    let out = config.out_dir()?;
    let options = eval_options(&manifest, args);
    let queries = store::read_features(&manifest.query)?;
    if !args.sweep_eta.is_empty() {
        return eta_sweep(config, args, &manifest, &options, &queries, out);
    }
    let model = load_model(&snapshot_path(config, &args.common)?, Some(&manifest))?;
    let db_path = out.join(DATABASE_FILE);
    let db = store::load_database(&db_path).with_context(|| format!("loading {}", db_path.display()))?;
    let result = mean_average_precision(&queries, &db, &model, &options)?;
    let report = MetricsReport::new(&manifest.name, &options, &result, &model.hyper);
    store::write_atomic(&out.join(METRICS_FILE), toml::to_string(&report)?.as_bytes())?;
    println!("{}\tmAP@{}\t{:.4}", manifest.name, options.cutoff, result.map);
    Ok(())
}

fn eta_sweep(
    config: &RunConfig,
    args: &EvalArgs,
    manifest: &Manifest,
    options: &EvalOptions,
    queries: &store::FeatureSet,
    out: &Path,
) -> anyhow::Result<()> {
    let bits = if args.sweep_bits.is_empty() {
        vec![config.hyper.bits()]
    } else {
        args.sweep_bits.clone()
    };
    let database = store::read_features(&manifest.database)?;
    let mut table = String::from("eta");
    for b in &bits {
        write!(table, "\t{b}-bit")?;
    }
    table.push('\n');
    for &eta in &args.sweep_eta {
        write!(table, "{eta}")?;
        for &b in &bits {
            let mut hyper = config.hyper.clone();
            hyper.eta = eta;
            hyper.set_bits(b)?;
            hyper.validate()?;
            let (_, model) = train_model(manifest, &hyper, true)?;
            let db = build_database(&database, &model)?;
            let result = mean_average_precision(queries, &db, &model, options)?;
            write!(table, "\t{:.4}", result.map)?;
        }
        table.push('\n');
    }
    store::write_atomic(&out.join(SWEEP_FILE), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into()?,
        None => bail!("{} is too short to identify", path.display()),
    };
    let mut s = String::new();
    match magic {
        store::FEATURE_MAGIC => {
            let set = store::decode_features(&bytes)?;
            writeln!(s, "feature file (version {})", store::FORMAT_VERSION)?;
            writeln!(s, "items        {}", set.len())?;
            writeln!(s, "views        {}", set.views())?;
            writeln!(s, "dimension    {}", set.dim())?;
            writeln!(s, "vocabulary   {}", set.vocab())?;
            writeln!(s, "flags        {:#x}", set.flags())?;
        }
        store::SNAPSHOT_MAGIC => {
            let model = store::decode_snapshot(&bytes)?;
            let h = &model.hyper;
            writeln!(s, "parameter snapshot (version {})", store::FORMAT_VERSION)?;
            writeln!(s, "bits         {} (M = {}, K = {})", h.bits(), h.num_codebooks, h.num_codewords)?;
            writeln!(s, "projection   {} -> {}", model.head.in_dim(), model.head.out_dim())?;
            writeln!(s, "sub-dim      {}", model.codebooks.sub_dim())?;
            writeln!(
                s,
                "alpha {}  tau {}  eta {}  beta {}  gamma {}  batch {}  seed {}",
                h.alpha, h.tau, h.eta, h.beta, h.gamma, h.batch_size, h.seed
            )?;
        }
        store::DATABASE_MAGIC => {
            let db = store::decode_database(&bytes)?;
            writeln!(s, "code database (version {})", store::FORMAT_VERSION)?;
            writeln!(s, "items        {}", db.len())?;
            writeln!(s, "code width   {} bytes", db.code_width())?;
            writeln!(s, "codewords    {}", db.codebooks().num_codewords())?;
            writeln!(s, "code bytes   {}", db.code_bytes())?;
            writeln!(s, "seed         {}", db.meta().seed)?;
        }
        other => bail!("unknown file magic {other:?}"),
    }
    Ok(s)
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<PathBuf> {
    let spec = ClusterSpec {
        clusters: args.clusters,
        dim: args.dim,
        train_per_cluster: args.train_per_cluster,
        query_per_cluster: args.query_per_cluster,
        spread: args.spread,
        duplicate_fraction: args.duplicates,
        seed: args.seed,
        ..ClusterSpec::default()
    };
    let data = synth::clustered(&spec)?;
    Ok(synth::write_dataset(&args.out, "synthetic", &data, args.map_at)?)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config_path = cli.config.as_deref();
    match &cli.command {
        Command::Train(args) => cmd_train(&load_config(config_path, args)?, args.quiet),
        Command::Build(args) => cmd_build(&load_config(config_path, args)?, args),
        Command::Query(args) => cmd_query(&load_config(config_path, &args.common)?, args),
        Command::Eval(args) => cmd_eval(&load_config(config_path, &args.common)?, args),
        Command::Inspect { path } => {
            print!("{}", cmd_inspect(path)?);
            Ok(())
        }
        Command::Synth(args) => {
            let manifest = cmd_synth(args)?;
            println!("{}", manifest.display());
            Ok(())
        }
    }
}
