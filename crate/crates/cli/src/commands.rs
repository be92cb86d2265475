use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;
use sarcasm_annotate::http::Assets;
use sarcasm_annotate::{
    cohen_kappa, kappa_of, load_gold, read_log, select_candidates, Service, ServiceConfig, State,
};
use sarcasm_core::corpus::{
    corpus_stats, load_corpus, save_corpus, subsample, Corpus, Label, Sample, Split,
};
use sarcasm_core::debias::{debias_corpus, EmojiLexicon};
use sarcasm_core::model::{
    joint_loss, load_checkpoint, save_checkpoint, EmbeddingProvider, FusionModel, InteractionKind,
    ModelConfig, ProviderConfig, ToyConfig, ToyProvider, ViewSet,
};
use sarcasm_core::numeric::{gradient_check, GradCheckConfig};
use sarcasm_core::train::{
    ablate, evaluate_split, export_attention, freeze_sweep, interaction_sweep, low_resource_sweep,
    train, FreezeMode, TrainConfig, DEFAULT_FRACTIONS,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "sarcasm",
    version,
    about = "Multimodal sarcasm corpus, annotation and training tools"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sentence and class counts per split.
    Stats(StatsArgs),
    /// Stratified fraction of the train split; other splits unchanged.
    Subsample(SubsampleArgs),
    /// Remove hashtag and emoji-word cues and report cue statistics.
    Debias(DebiasArgs),
    /// Run the annotation HTTP service.
    AnnotateServe(ServeArgs),
    /// Cohen's kappa from two labeled corpora or from an annotation log.
    Kappa(KappaArgs),
    /// Train the fusion model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Full model against each single-loss removal.
    Ablate(SweepArgs),
    /// Freeze both encoders, each one, or neither.
    FreezeSweep(SweepArgs),
    /// Transformer, cross-attention and MLP interaction layers.
    InteractionSweep(SweepArgs),
    /// Train on stratified fractions of the train split.
    LowResource(LowResourceArgs),
    /// Interaction-layer attention on image patches for one sample.
    VizAttention(VizArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Fraction in (0, 1].
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the cleaned corpus.
    #[arg(long)]
    out: PathBuf,
    /// Extra emoji words, one per line, beyond `emoji_<n>` placeholders.
    #[arg(long)]
    emoji_lexicon: Option<PathBuf>,
    /// Sidecar cue report; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Gold onboarding items, one JSON object per line.
    #[arg(long)]
    gold_onboarding: PathBuf,
    #[arg(long, env = "PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Append-only event log; replayed on start if present.
    #[arg(long, default_value = "annotation-events.jsonl")]
    log: PathBuf,
    /// Corrected corpus written by POST /api/export.
    #[arg(long, default_value = "corrected.jsonl")]
    export: PathBuf,
    /// Task-state snapshot written on export and shutdown.
    #[arg(long, default_value = "annotation-snapshot.json")]
    snapshot: PathBuf,
    /// Directory that image references resolve against.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Built annotation UI to serve at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct KappaArgs {
    /// First labeled corpus; paired with --b by sample id.
    #[arg(long, requires = "b", conflicts_with = "log")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Annotation event log; κ over its completed double-checks.
    #[arg(long, requires = "corpus")]
    log: Option<PathBuf>,
    /// Corpus the log was recorded against.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

/// Training settings. Precedence: flag, then `--config` file, then default.
#[derive(Args, Serialize)]
struct TrainOpts {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with any subset of the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Views whose loss terms are enabled, e.g. `t,v,f`.
    #[arg(long)]
    views: Option<ViewSet>,
    /// none | text_encoder | visual_encoder | all
    #[arg(long)]
    freeze: Option<FreezeMode>,
    /// transformer | cross_attention | mlp
    #[arg(long)]
    interaction: Option<InteractionKind>,
    /// Precomputed embedding file; selects the file-backed provider.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Drop views without a loss term from y_o at prediction time.
    #[arg(long)]
    drop_disabled_views_at_inference: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr_head {
            c.lr_head = v;
        }
        if let Some(v) = self.lr_backbone {
            c.lr_backbone = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.views {
            c.view_losses_enabled = v;
        }
        if let Some(v) = self.freeze {
            c.freeze = v;
        }
        if let Some(v) = self.interaction {
            c.model.interaction = v;
        }
        if let Some(p) = &self.embeddings {
            c.provider = ProviderConfig::File { path: p.clone() };
        }
        if self.drop_disabled_views_at_inference {
            c.drop_disabled_views_at_inference = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Where to save the kept parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LowResourceArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Comma-separated train fractions.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FRACTIONS)]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Views summed into y_o; defaults to the checkpoint's setting.
    #[arg(long)]
    views: Option<ViewSet>,
    /// Embedding file, overriding the provider recorded in the checkpoint.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample id.
    #[arg(long)]
    sample: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Dims {
    /// d = 16, 5 tokens, 4 patches, 4 heads.
    Toy,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Dims::Toy)]
    dims: Dims,
    #[arg(long, default_value = "transformer")]
    interaction: InteractionKind,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Print the per-parameter report as JSON after the summary line.
    #[arg(long)]
    json: bool,
}

/// A check that ran and did not pass.
#[derive(Debug)]
pub struct CheckFailed(String);

impl CheckFailed {
    pub fn kind(&self) -> &'static str {
        "check_failed"
    }
}

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// What `train` stores beside the parameters.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    provider: ProviderConfig,
    inference_views: ViewSet,
    train_config: TrainConfig,
    best_epoch: usize,
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Report with the resolved settings echoed next to the result.
fn envelope(command: &str, config: impl Serialize, result: impl Serialize) -> Result<Value> {
    Ok(json!({
        "command": command,
        "config": serde_json::to_value(config)?,
        "result": serde_json::to_value(result)?,
    }))
}

fn emit(report: &Value, table: Option<String>, json_out: bool, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        write_json(p, report)?;
    }
    match table {
        Some(t) if !json_out => {
            print!("{t}");
            if !t.ends_with('\n') {
                println!();
            }
            Ok(())
        }
        _ => print_json(report),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats(a) => stats(a),
        Command::Subsample(a) => {
            let corpus = read_corpus(&a.corpus)?;
            let out = subsample(&corpus, a.fraction, a.seed)?;
            save_corpus(&out, &a.out)?;
            let counts = corpus_stats(&out).ok();
            let report = envelope(
                "subsample",
                json!({"corpus": a.corpus, "fraction": a.fraction, "seed": a.seed, "out": a.out}),
                json!({"samples": out.len(), "stats": counts}),
            )?;
            print_json(&report)
        }
        Command::Debias(a) => debias(a),
        Command::AnnotateServe(a) => serve(a),
        Command::Kappa(a) => kappa(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => sweep("ablate", a, |c, p, cfg| {
            let r = ablate(c, p, cfg)?;
            Ok((r.to_table(), serde_json::to_value(r)?))
        }),
        Command::FreezeSweep(a) => sweep("freeze-sweep", a, |c, p, cfg| {
            let r = freeze_sweep(c, p, cfg)?;
            Ok((r.to_table(), serde_json::to_value(r)?))
        }),
        Command::InteractionSweep(a) => sweep("interaction-sweep", a, |c, p, cfg| {
            let r = interaction_sweep(c, p, cfg)?;
            Ok((r.to_table(), serde_json::to_value(r)?))
        }),
        Command::LowResource(a) => {
            let fractions = a.fractions;
            sweep("low-resource", a.sweep, move |c, p, cfg| {
                let r = low_resource_sweep(c, p, cfg, &fractions)?;
                Ok((r.to_table(), serde_json::to_value(r)?))
            })
        }
        Command::VizAttention(a) => viz(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn stats(a: StatsArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let report = corpus_stats(&corpus)?;
    let table = report.render_table();
    let env = envelope("stats", json!({"corpus": a.corpus}), &report)?;
    emit(&env, Some(table), a.json, None)
}

fn debias(a: DebiasArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let lexicon = a
        .emoji_lexicon
        .as_ref()
        .map(EmojiLexicon::load)
        .transpose()
        .context("loading emoji lexicon")?;
    let outcome = debias_corpus(&corpus, lexicon.as_ref())?;
    save_corpus(&outcome.corpus, &a.out)?;
    let sidecar = a.report.clone().unwrap_or_else(|| {
        let mut name = a.out.clone().into_os_string();
        name.push(".report.json");
        PathBuf::from(name)
    });
    let report = envelope(
        "debias",
        json!({"corpus": a.corpus, "out": a.out, "emoji_lexicon": a.emoji_lexicon, "report": sidecar}),
        json!({"before": outcome.before, "after": outcome.after, "emptied": outcome.emptied}),
    )?;
    emit(&report, None, true, Some(&sidecar))
}

fn serve(a: ServeArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let gold = load_gold(&a.gold_onboarding)?;
    let config = ServiceConfig {
        log_path: Some(a.log.clone()),
        export_path: Some(a.export.clone()),
        snapshot_path: Some(a.snapshot.clone()),
    };
    let service = Arc::new(Service::open(corpus, gold, config)?);
    let addr = SocketAddr::new(a.host, a.port);
    let echo = json!({
        "command": "annotate-serve",
        "config": {
            "corpus": a.corpus, "gold_onboarding": a.gold_onboarding, "address": addr.to_string(),
            "log": a.log, "export": a.export, "snapshot": a.snapshot, "images": a.images, "ui": a.ui,
        },
        "candidates": service.candidates().len(),
    });
    println!("{echo}");
    let assets = Assets {
        images: a.images,
        ui: a.ui,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(sarcasm_annotate::http::serve(service, assets, addr))?;
    Ok(())
}

fn kappa(a: KappaArgs) -> Result<()> {
    let (report, config) = match (&a.a, &a.b, &a.log, &a.corpus) {
        (Some(pa), Some(pb), None, _) => {
            let (ca, cb) = (read_corpus(pa)?, read_corpus(pb)?);
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for s in ca.samples() {
                let Some(other) = cb.get(&s.id) else { continue };
                match (s.label, other.label) {
                    (Some(x), Some(y)) => {
                        xs.push(x);
                        ys.push(y);
                    }
                    _ => bail!(sarcasm_core::Error::Unlabeled(vec![s.id.clone()])),
                }
            }
            if xs.is_empty() {
                bail!(sarcasm_core::Error::Argument(
                    "the two corpora share no sample ids".into()
                ));
            }
            (cohen_kappa(&xs, &ys)?, json!({"a": pa, "b": pb}))
        }
        (None, None, Some(log), Some(corpus)) => {
            let c = read_corpus(corpus)?;
            let records = read_log(log)?;
            let state = State::replay(&select_candidates(&c), &records)?;
            (kappa_of(&state)?, json!({"log": log, "corpus": corpus}))
        }
        _ => bail!(sarcasm_core::Error::Argument(
            "give either --a and --b, or --log and --corpus".into()
        )),
    };
    print_json(&envelope("kappa", config, report)?)
}

fn provider_for(config: &TrainConfig) -> Result<Box<dyn EmbeddingProvider>> {
    config
        .provider
        .build()
        .context("building the embedding provider")
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = a.opts.resolve()?;
    let corpus = read_corpus(&a.opts.corpus)?;
    let provider = provider_for(&config)?;
    let outcome = train(&corpus, provider.as_ref(), &config)?;
    if let Some(path) = &a.checkpoint {
        let meta = CheckpointMeta {
            model: config.model,
            provider: config.provider.clone(),
            inference_views: config.inference_views(),
            train_config: config.clone(),
            best_epoch: outcome.history.best_epoch,
        };
        save_checkpoint(path, &outcome.params, &serde_json::to_value(&meta)?)?;
    }
    let report = envelope(
        "train",
        json!({"corpus": a.opts.corpus, "checkpoint": a.checkpoint, "train": config}),
        &outcome.history,
    )?;
    emit(&report, None, true, a.opts.report.as_deref())
}

fn load_model(
    path: &Path,
    embeddings: Option<&PathBuf>,
) -> Result<(
    FusionModel,
    Box<dyn EmbeddingProvider>,
    sarcasm_core::numeric::ParamStore,
    CheckpointMeta,
)> {
    let (params, meta) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut meta: CheckpointMeta = serde_json::from_value(meta)
        .context("checkpoint metadata lacks the model and provider settings")?;
    if let Some(p) = embeddings {
        meta.provider = ProviderConfig::File { path: p.clone() };
    }
    let model = FusionModel::new(meta.model)?;
    let provider = meta.provider.build()?;
    Ok((model, provider, params, meta))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (model, provider, params, meta) = load_model(&a.checkpoint, a.embeddings.as_ref())?;
    let views = a.views.unwrap_or(meta.inference_views);
    let split = Split::from(a.split);
    let metrics = evaluate_split(&model, provider.as_ref(), &params, &corpus, split, views)?;
    let report = envelope(
        "evaluate",
        json!({"corpus": a.corpus, "checkpoint": a.checkpoint, "split": split, "views": views, "provider": meta.provider}),
        metrics,
    )?;
    print_json(&report)
}

type SweepFn<'a> =
    dyn FnOnce(&Corpus, &dyn EmbeddingProvider, &TrainConfig) -> Result<(String, Value)> + 'a;

fn sweep(
    name: &str,
    a: SweepArgs,
    f: impl FnOnce(&Corpus, &dyn EmbeddingProvider, &TrainConfig) -> Result<(String, Value)>,
) -> Result<()> {
    let f: Box<SweepFn<'_>> = Box::new(f);
    let config = a.opts.resolve()?;
    let corpus = read_corpus(&a.opts.corpus)?;
    let provider = provider_for(&config)?;
    let (table, result) = f(&corpus, provider.as_ref(), &config)?;
    let report = envelope(
        name,
        json!({"corpus": a.opts.corpus, "train": config}),
        result,
    )?;
    emit(&report, Some(table), a.json, a.opts.report.as_deref())
}

fn viz(a: VizArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (model, provider, params, _) = load_model(&a.checkpoint, a.embeddings.as_ref())?;
    let map = export_attention(
        &model,
        provider.as_ref(),
        &params,
        &corpus,
        &a.sample,
        Some(&a.out),
    )?;
    let report = envelope(
        "viz-attention",
        json!({"corpus": a.corpus, "checkpoint": a.checkpoint, "sample": a.sample, "out": a.out}),
        json!({"patches": map.patches, "heads": map.heads, "patch_mass": map.patch_mass}),
    )?;
    print_json(&report)
}

/// Toy-dimension gradient check: d = 16, 5 tokens, 4 patches, 4 heads.
fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let Dims::Toy = a.dims;
    let provider = ToyProvider::new(ToyConfig {
        d: 16,
        vocab: 64,
        patches: 4,
        feature_dim: 8,
        feature_seed: 1,
    })?;
    let model = FusionModel::new(ModelConfig {
        d: 16,
        heads: 4,
        interaction: a.interaction,
        ..ModelConfig::default()
    })?;
    let sample = Sample::new(
        "gradcheck",
        "never been so thrilled today",
        "img/0042.jpg",
        Some(Label::Sarcastic),
        Split::Train,
    );
    let params = model.init_params(&provider, a.seed)?;
    let report = gradient_check(
        |g, store| {
            let enc = provider.encode(g, store, &sample)?;
            let nodes = model.forward::<ChaCha8Rng>(g, store, &enc, None)?;
            joint_loss(g, &nodes, Label::Sarcastic, ViewSet::ALL)
        },
        &params,
        &GradCheckConfig::default(),
    )?;
    println!("{}", report.summary_line());
    if a.json {
        print_json(&envelope(
            "gradcheck",
            json!({"dims": a.dims, "interaction": a.interaction, "seed": a.seed}),
            &report,
        )?)?;
    }
    if !report.passed {
        bail!(CheckFailed(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, report.tol
        )));
    }
    Ok(())
}
