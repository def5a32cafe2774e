//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::backends::ImageRef;
use crate::config::AppConfig;
use crate::detection::Query;
use crate::dictionary::{self, Dictionary, DEFAULT_K, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, Weighting};
use crate::pipeline::{Ablation, PreparedScenario};
use crate::registry::Registry;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "slc", version, about = "Small-large VLM collaboration pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a concept from reference images (embedded via the configured embedder) or raw
    /// embeddings.
    Register(RegisterArgs),
    /// Cluster the registry into a meta-concept dictionary.
    BuildDict(BuildDictArgs),
    /// Print the adapter selected for the registry's scenario.
    Select(SelectArgs),
    /// Answer one question about an image with the full pipeline.
    Ask(AskArgs),
    /// Answer a text-only question from the concepts' identities.
    AskText(AskTextArgs),
    /// Evaluate a dataset and write the report and transcripts.
    RunEval(RunEvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub description: String,
    /// Reference image path or URL; repeatable. Requires --config.
    #[arg(long = "image")]
    pub images: Vec<String>,
    /// Reference embedding as comma-separated numbers; repeatable.
    #[arg(long = "embedding", value_parser = parse_vector)]
    pub embeddings: Vec<Vec<f64>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildDictArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON map from cluster index to adapter identifier. Defaults to `metac-<index>`.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long = "dict")]
    pub dictionary: PathBuf,
    #[arg(long, default_value_t = dictionary::DEFAULT_TOP_K)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's registry path.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Overrides the config's dictionary path.
    #[arg(long = "dict")]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Skip detection by the small model.
    #[arg(long)]
    pub no_small: bool,
    /// Forward raw cues to generation without verification.
    #[arg(long)]
    pub no_reflection: bool,
}

impl AblationArgs {
    fn ablation(&self) -> Ablation {
        Ablation {
            use_small: !self.no_small,
            use_reflection: !self.no_reflection,
        }
    }
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub question: String,
}

#[derive(Debug, Args)]
pub struct AskTextArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub question: String,
}

#[derive(Debug, Args)]
pub struct RunEvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub weighting: Option<Weighting>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Overrides the config's listen address.
    #[arg(long)]
    pub listen: Option<String>,
}

fn parse_vector(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect()
}

/// Config plus resolved registry and dictionary paths.
struct Loaded {
    config: AppConfig,
    registry_path: PathBuf,
    dictionary_path: PathBuf,
    top_k: usize,
}

impl PipelineArgs {
    fn load(&self) -> Result<Loaded> {
        let config = AppConfig::load(&self.config)?;
        let registry_path = self
            .registry
            .clone()
            .or_else(|| config.registry.clone())
            .ok_or_else(|| Error::Usage("no registry path: pass --registry or set `registry` in the config".into()))?;
        let dictionary_path = self
            .dictionary
            .clone()
            .or_else(|| config.dictionary.clone())
            .ok_or_else(|| Error::Usage("no dictionary path: pass --dict or set `dictionary` in the config".into()))?;
        let top_k = self.top_k.unwrap_or(config.top_k);
        if top_k == 0 {
            return Err(Error::Usage("--top-k must be at least 1".into()));
        }
        Ok(Loaded {
            config,
            registry_path,
            dictionary_path,
            top_k,
        })
    }
}

fn load_registry(path: &Path) -> Result<Registry> {
    if !path.exists() {
        return Err(Error::Usage(format!("registry {} does not exist", path.display())));
    }
    Ok(Registry::load(path)?)
}

fn load_prepared(loaded: &Loaded) -> Result<(Registry, Dictionary, PreparedScenario)> {
    let registry = load_registry(&loaded.registry_path)?;
    let dictionary = Dictionary::load(&loaded.dictionary_path)?;
    let prepared = PreparedScenario::new(registry.scenario()?, &dictionary, loaded.top_k)?;
    Ok((registry, dictionary, prepared))
}

fn print_json(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Runs one command, writing its result to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if !matches!(cli.command, Command::Serve(_)) {
        init_logging("warn");
    }
    match cli.command {
        Command::Register(a) => register(a, out),
        Command::BuildDict(a) => build_dict(a, out),
        Command::Select(a) => select(a, out),
        Command::Ask(a) => ask(a, out),
        Command::AskText(a) => {
            let loaded = a.pipeline.load()?;
            let (_, _, prepared) = load_prepared(&loaded)?;
            let (answer, transcript) = loaded.config.pipeline()?.ask_text(&prepared, &a.question)?;
            print_json(
                out,
                &serde_json::json!({"answer": answer, "identities": prepared.identity_transcript(), "transcript": transcript}),
            )
        }
        Command::RunEval(a) => run_eval(a, out),
        Command::Serve(a) => serve(a),
    }
}

fn register(a: RegisterArgs, out: &mut dyn Write) -> Result<()> {
    let mut embeddings = a.embeddings;
    if !a.images.is_empty() {
        let config = a
            .config
            .as_deref()
            .ok_or_else(|| Error::Usage("--image requires --config for the embedder".into()))?;
        let embedder = AppConfig::load(config)?.embedder()?;
        for image in &a.images {
            embeddings.push(embedder.embed(&ImageRef::parse(image))?);
        }
    }
    if embeddings.is_empty() {
        return Err(Error::Usage("pass at least one --image or --embedding".into()));
    }
    let mut registry = Registry::load(&a.registry)?;
    let concept = registry.register_concept(&a.id, &a.description, embeddings)?.clone();
    registry.save(&a.registry)?;
    print_json(
        out,
        &serde_json::json!({
            "id": concept.id,
            "embedding_dimension": concept.dimension(),
            "concept_embedding": concept.concept_embedding,
            "registry_size": registry.len(),
        }),
    )
}

fn build_dict(a: BuildDictArgs, out: &mut dyn Write) -> Result<()> {
    let registry = load_registry(&a.registry)?;
    let refs = match &a.adapters {
        Some(path) => dictionary::load_adapter_refs(path)?,
        None => (0..a.k).map(|i| (i, format!("metac-{i}"))).collect(),
    };
    let dict = dictionary::build_dictionary_with_iters(registry.concepts(), a.k, a.seed, &refs, a.max_iters)?;
    dict.save(&a.out)?;
    let summary: Vec<_> = dict
        .entries
        .iter()
        .map(|e| serde_json::json!({"index": e.index, "adapter_ref": e.adapter_ref, "representative": e.representative_id, "members": e.member_ids.len()}))
        .collect();
    print_json(out, &serde_json::json!({"k": dict.k, "seed": dict.seed, "entries": summary}))
}

fn select(a: SelectArgs, out: &mut dyn Write) -> Result<()> {
    let registry = load_registry(&a.registry)?;
    let dict = Dictionary::load(&a.dictionary)?;
    let scenario = registry.scenario()?;
    let selection = dict.select(scenario.embedding(), a.top_k)?;
    let manifest = dictionary::fusion_manifest(&selection)?;
    print_json(
        out,
        &serde_json::json!({
            "adapter_ref": selection.adapter_ref(),
            "score": selection.primary().score,
            "selection": selection,
            "fusion": manifest,
        }),
    )
}

fn ask(a: AskArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = a.pipeline.load()?;
    let (_, _, prepared) = load_prepared(&loaded)?;
    let query = Query::new(ImageRef::parse(&a.image), a.question)?;
    let turn = loaded.config.pipeline()?.ask(&prepared, &query, a.ablation.ablation())?;
    print_json(
        out,
        &serde_json::json!({"turn": turn, "identities": prepared.identity_transcript()}),
    )
}

fn run_eval(a: RunEvalArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = a.pipeline.load()?;
    let registry = load_registry(&loaded.registry_path)?;
    let dictionary = Dictionary::load(&loaded.dictionary_path)?;
    let dataset = evaluation::load_dataset(&a.dataset)?;
    let options = EvalOptions {
        ablation: a.ablation.ablation(),
        weighting: a.weighting.unwrap_or(loaded.config.weighting),
        top_k: loaded.top_k,
        parallelism: a.parallelism.unwrap_or(loaded.config.parallelism),
    };
    let run = evaluation::run_eval(&dataset, &registry, &dictionary, &loaded.config.pipeline()?, options)?;
    run.write(&a.out)?;
    print_json(out, &run.report)
}

fn serve(a: ServeArgs) -> Result<()> {
    let loaded = a.pipeline.load()?;
    init_logging(&loaded.config.log_level);
    let registry = Registry::load(&loaded.registry_path)?;
    let dictionary = Dictionary::load(&loaded.dictionary_path)?;
    dictionary.validate()?;
    let state = Arc::new(AppState::new(
        registry,
        Some(loaded.registry_path.clone()),
        dictionary,
        loaded.top_k,
        loaded.config.pipeline()?,
        loaded.config.embedder()?,
    ));
    let listen = a.listen.unwrap_or_else(|| loaded.config.listen.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let result = runtime.block_on(service::serve(state.clone(), &listen));
    drop(runtime);
    drop(state);
    Ok(result?)
}

/// Installs the stderr log subscriber. `RUST_LOG` wins over `default_level`.
pub fn init_logging(default_level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
