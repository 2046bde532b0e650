//! `cup`: augment, train, update, evaluate, type and retrieve.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cup_core::augment::{augment_dataset, read_groups, write_groups, CandidateGenerator};
use cup_core::llm::{Backend, ResponseCache};
use cup_core::metrics::{classify_update_type, evaluate_corpus, CountType, Prediction, SourceType};
use cup_core::pipeline::{Manifest, PipelineConfig, Ranker, Updater};
use cup_core::rank::{
    load_cuprank, load_ranknet, ranknet_train, save_cuprank, save_ranknet, top1_accuracy,
    train_groups, CupRank,
};
use cup_core::retrieve::{top_k_similar, DemonstrationPool, ExampleIndex};
use cup_core::sample::{load_dataset, CommentUpdateSample};
use cup_core::tokenize::EmbeddingProvider;

#[derive(Parser, Debug)]
#[command(name = "cup", version, about = "Update-then-rank comment updating")]
struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate candidates for a labelled dataset and write training groups.
    Augment(AugmentArgs),
    /// Train a ranker on augmented groups.
    Train(TrainArgs),
    /// Update the comments of a dataset.
    Update(UpdateArgs),
    /// Score predictions against gold comments.
    Evaluate(EvaluateArgs),
    /// Classify the update type of every sample.
    Type(TypeArgs),
    /// Retrieve nearest training samples for each query.
    Retrieve(RetrieveArgs),
}

#[derive(Args, Debug, Default)]
struct GenerationArgs {
    /// Demonstration corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Prebuilt example index for the corpus.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated demonstration counts.
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    generation: GenerationArgs,
    /// Output group file (JSONL).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum RankerKind {
    Cuprank,
    Ranknet,
    Random,
    #[value(name = "self")]
    SelfRank,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Validation groups (required for cuprank).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cuprank")]
    ranker: RankerKind,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct UpdateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cuprank")]
    ranker: RankerKind,
    #[command(flatten)]
    generation: GenerationArgs,
    /// Output predictions (JSONL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predictions (JSONL with `id` and `prediction`).
    #[arg(long)]
    pred: PathBuf,
    /// Gold dataset.
    #[arg(long)]
    gold: PathBuf,
    /// Report (JSONL rows followed by a summary line).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accuracy by update type as CSV.
    #[arg(long)]
    crosstab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TypeArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Query samples.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Prebuilt index to load instead of embedding the corpus.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Write the corpus index here.
    #[arg(long)]
    save_index: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            print_error("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            print_error("usage", &e.to_string());
            ExitCode::from(2)
        }
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<cup_core::Error>())
                .map_or("runtime", |c| c.kind());
            let message = e
                .chain()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(": ");
            print_error(kind, &message);
            ExitCode::from(1)
        }
    }
}

fn print_error(kind: &str, message: &str) {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => {
            PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    let ctx = Ctx {
        config,
        config_path: cli.config,
    };
    match cli.command {
        Command::Augment(a) => ctx.augment(a),
        Command::Train(a) => ctx.train(a),
        Command::Update(a) => ctx.update(a),
        Command::Evaluate(a) => ctx.evaluate(a),
        Command::Type(a) => ctx.classify(a),
        Command::Retrieve(a) => ctx.retrieve(a),
    }
}

/// An argument problem found after parsing; reported like a clap error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone()).ok_or_else(|| {
        UsageError(format!("missing --{name} (not set in the config either)")).into()
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{value}")?;
    Ok(())
}

struct Ctx {
    config: PipelineConfig,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self, command: &str, seed: u64) -> Result<Manifest> {
        let mut m = Manifest::new(command, seed).with_config(&self.config);
        if let Some(p) = &self.config_path {
            m.add_input("config", p)?;
        }
        Ok(m)
    }

    fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(self.config.provider.build()?)
    }

    /// Applies generation flags to the config.
    fn generation_config(&self, g: &GenerationArgs) -> Result<PipelineConfig> {
        let mut c = self.config.clone();
        if let Some(m) = &g.models {
            c.models = m.clone();
        }
        if let Some(s) = &g.shots {
            c.strategies.shots = s.clone();
        }
        if let Some(t) = g.temperature {
            c.strategies.temperature = t;
        }
        if let Some(s) = g.seed {
            c.seed = s;
        }
        if g.cache_dir.is_some() {
            c.paths.cache_dir = g.cache_dir.clone();
        }
        if g.corpus.is_some() {
            c.paths.corpus = g.corpus.clone();
        }
        if g.index.is_some() {
            c.paths.index = g.index.clone();
        }
        c.validate()?;
        if c.models.is_empty() {
            return Err(UsageError(
                "no models configured (use --models or `models` in the config)".into(),
            )
            .into());
        }
        Ok(c)
    }

    fn augment(&self, a: AugmentArgs) -> Result<()> {
        let config = self.generation_config(&a.generation)?;
        let dataset_path = required(a.dataset, &config.paths.dataset, "dataset")?;
        let out = required(a.out, &config.paths.groups, "out")?;
        let dataset = load_dataset(&dataset_path)?;
        let provider = self.provider()?;
        let session = Session::open(&config, provider.as_ref(), Some(&dataset))?;
        let generator = session.generator(&config, provider.as_ref());
        let concurrency = config.backend.as_ref().map_or(1, |b| b.concurrency);
        let output = augment_dataset(&dataset, &config.strategies()?, &generator, concurrency)?;
        write_groups(&out, &output.groups)?;

        let mut manifest = Manifest::new("augment", config.seed).with_config(&config);
        self.add_config(&mut manifest)?;
        manifest.add_input("dataset", &dataset_path)?;
        session.add_inputs(&mut manifest)?;
        manifest.write_for(&out)?;
        print_json(&serde_json::to_value(&output.summary)?)
    }

    fn add_config(&self, m: &mut Manifest) -> Result<()> {
        if let Some(p) = &self.config_path {
            m.add_input("config", p)?;
        }
        Ok(())
    }

    fn train(&self, a: TrainArgs) -> Result<()> {
        let groups_path = required(a.groups, &self.config.paths.groups, "groups")?;
        let out = required(a.out, &self.config.paths.checkpoint, "out")?;
        let seed = a.seed.unwrap_or(self.config.seed);
        let provider = self.provider()?;
        let groups = read_groups(&groups_path)?;
        let mut manifest = self.manifest("train", seed)?;
        manifest.add_input("groups", &groups_path)?;

        match a.ranker {
            RankerKind::Cuprank => {
                let val_path = required(a.val, &self.config.paths.val_groups, "val")?;
                let val = read_groups(&val_path)?;
                manifest.add_input("val", &val_path)?;
                let mut rc = self.config.ranker_config();
                rc.seed = seed;
                let outcome = train_groups::<f32>(&groups, &val, &rc, provider.as_ref())?;
                let prepared = val
                    .iter()
                    .map(|g| outcome.model.prepare_group(g, provider.as_ref()))
                    .collect::<cup_core::Result<Vec<_>>>()?;
                let val_top1 = top1_accuracy(&outcome.model, &prepared)?;
                save_cuprank(
                    &out,
                    &outcome.model,
                    provider.identity(),
                    Some(manifest.input_digest()),
                )?;
                let log_path = sidecar(&out, "log.jsonl");
                write_jsonl(&log_path, &outcome.log)?;
                manifest.write_for(&out)?;
                print_json(&serde_json::json!({
                    "ranker": "cuprank",
                    "groups": groups.len(),
                    "best_step": outcome.best_step,
                    "val_top1": val_top1,
                }))
            }
            RankerKind::Ranknet => {
                let mut rc = self.config.ranknet_config();
                rc.seed = seed;
                let model = ranknet_train::<f32>(&groups, &rc, provider.as_ref())?;
                let prepared = model.prepare(&groups, provider.as_ref())?;
                let train_accuracy = model.pairwise_accuracy(&prepared);
                save_ranknet(
                    &out,
                    &model,
                    provider.identity(),
                    Some(manifest.input_digest()),
                )?;
                manifest.write_for(&out)?;
                print_json(&serde_json::json!({
                    "ranker": "ranknet",
                    "groups": groups.len(),
                    "train_pairwise_accuracy": train_accuracy,
                }))
            }
            other => bail!("ranker `{}` is not trainable", ranker_name(other)),
        }
    }

    fn update(&self, a: UpdateArgs) -> Result<()> {
        let config = self.generation_config(&a.generation)?;
        let dataset_path = required(a.dataset, &config.paths.dataset, "dataset")?;
        let dataset = load_dataset(&dataset_path)?;
        let provider = self.provider()?;
        let session = Session::open(&config, provider.as_ref(), None)?;

        let mut manifest = Manifest::new("update", config.seed).with_config(&config);
        self.add_config(&mut manifest)?;
        manifest.add_input("dataset", &dataset_path)?;
        session.add_inputs(&mut manifest)?;

        let cuprank: CupRank<f32>;
        let ranknet;
        let ranker = match a.ranker {
            RankerKind::Cuprank => {
                let ckpt = required(a.checkpoint, &config.paths.checkpoint, "checkpoint")?;
                manifest.add_input("checkpoint", &ckpt)?;
                cuprank =
                    load_cuprank(&ckpt, provider.identity(), Some(&config.ranker_config()))?.0;
                Ranker::CupRank(&cuprank)
            }
            RankerKind::Ranknet => {
                let ckpt = required(a.checkpoint, &config.paths.checkpoint, "checkpoint")?;
                manifest.add_input("checkpoint", &ckpt)?;
                ranknet = load_ranknet(&ckpt, provider.identity())?.0;
                Ranker::RankNet(&ranknet)
            }
            RankerKind::Random => Ranker::Random { seed: config.seed },
            RankerKind::SelfRank => Ranker::SelfRank {
                model_id: config.models[0].clone(),
                temperature: config.strategies.temperature,
            },
        };
        let updater = Updater {
            generator: session.generator(&config, provider.as_ref()),
            strategies: config.strategies()?,
            ranker,
            provider: provider.as_ref(),
        };
        let concurrency = config.backend.as_ref().map_or(1, |b| b.concurrency);
        let results = updater.run_all(&dataset, concurrency)?;
        write_jsonl(&a.out, &results)?;
        manifest.write_for(&a.out)?;
        print_json(
            &serde_json::json!({ "ranker": ranker_name(a.ranker), "updated": results.len() }),
        )
    }

    fn evaluate(&self, a: EvaluateArgs) -> Result<()> {
        let out = required(a.out, &self.config.paths.reports, "out")?;
        let predictions = read_predictions(&a.pred)?;
        let gold = load_dataset(&a.gold)?;
        let provider = self.provider()?;
        let report = evaluate_corpus(&predictions, &gold, provider.as_ref())?;

        let summary = serde_json::json!({ "summary": { "averages": report.averages, "cross_tab": report.cross_tab } });
        let rows = report
            .rows
            .iter()
            .map(serde_json::to_value)
            .chain(std::iter::once(Ok(summary.clone())))
            .collect::<serde_json::Result<Vec<_>>>()?;
        write_jsonl(&out, &rows)?;

        let mut manifest = self.manifest("evaluate", self.config.seed)?;
        manifest.add_input("pred", &a.pred)?;
        manifest.add_input("gold", &a.gold)?;
        manifest.clone().write_for(&out)?;
        if let Some(path) = &a.crosstab {
            let mut w = csv::Writer::from_path(path)
                .with_context(|| format!("writing {}", path.display()))?;
            w.write_record(["source", "count", "samples", "accuracy"])?;
            for cell in &report.cross_tab {
                w.write_record([
                    source_name(cell.source).to_string(),
                    count_name(cell.count).to_string(),
                    cell.samples.to_string(),
                    cell.accuracy.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            drop(w);
            manifest.write_for(path)?;
        }
        print_json(&summary)
    }

    fn classify(&self, a: TypeArgs) -> Result<()> {
        let dataset_path = required(a.dataset, &self.config.paths.dataset, "dataset")?;
        let dataset = load_dataset(&dataset_path)?;
        let mut counts = std::collections::BTreeMap::<String, usize>::new();
        let mut rows = Vec::with_capacity(dataset.len());
        for s in &dataset {
            let t = classify_update_type(s)?;
            let key = format!("{}/{}", source_name(t.source), count_name(t.count));
            *counts.entry(key).or_default() += 1;
            rows.push(serde_json::json!({
                "id": s.id,
                "source": source_name(t.source),
                "count": count_name(t.count),
            }));
        }
        rows.push(serde_json::json!({ "summary": counts }));
        write_jsonl(&a.out, &rows)?;
        let mut manifest = self.manifest("type", self.config.seed)?;
        manifest.add_input("dataset", &dataset_path)?;
        manifest.write_for(&a.out)?;
        print_json(&serde_json::json!({ "summary": counts }))
    }

    fn retrieve(&self, a: RetrieveArgs) -> Result<()> {
        let dataset_path = required(a.dataset, &self.config.paths.dataset, "dataset")?;
        let provider = self.provider()?;
        let queries = load_dataset(&dataset_path)?;
        let mut manifest = self.manifest("retrieve", self.config.seed)?;
        manifest.add_input("dataset", &dataset_path)?;
        let index = match a.index.or_else(|| self.config.paths.index.clone()) {
            Some(path) if path.exists() => {
                manifest.add_input("index", &path)?;
                ExampleIndex::load(&path, provider.identity())?
            }
            _ => {
                let corpus_path = required(a.corpus, &self.config.paths.corpus, "corpus")?;
                manifest.add_input("corpus", &corpus_path)?;
                ExampleIndex::build(&load_dataset(&corpus_path)?, provider.as_ref())?
            }
        };
        if let Some(path) = &a.save_index {
            index.save(path)?;
            manifest.clone().write_for(path)?;
        }
        let rows = queries
            .iter()
            .map(|q| {
                let hits = top_k_similar(&index, provider.as_ref(), &q.new_code, a.k, Some(&q.id))?;
                Ok(serde_json::json!({
                    "id": q.id,
                    "neighbors": hits
                        .iter()
                        .map(|n| serde_json::json!({ "id": n.id, "similarity": n.similarity }))
                        .collect::<Vec<_>>(),
                }))
            })
            .collect::<cup_core::Result<Vec<_>>>()?;
        write_jsonl(&a.out, &rows)?;
        manifest.write_for(&a.out)?;
        print_json(&serde_json::json!({ "queries": rows.len(), "k": a.k }))
    }
}

/// Backend, cache and demonstration pool shared by augment and update.
struct Session {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    pool: DemonstrationPool,
    corpus_path: Option<PathBuf>,
    index_path: Option<PathBuf>,
}

impl Session {
    /// `fallback_corpus` serves as the corpus when none is configured.
    fn open(
        config: &PipelineConfig,
        provider: &dyn EmbeddingProvider,
        fallback_corpus: Option<&[CommentUpdateSample]>,
    ) -> Result<Self> {
        let backend = config.build_backend()?;
        let cache = config
            .paths
            .cache_dir
            .as_deref()
            .map(ResponseCache::open)
            .transpose()?;
        let corpus_path = config.paths.corpus.clone();
        let corpus = match (&corpus_path, fallback_corpus) {
            (Some(p), _) => load_dataset(p)?,
            (None, Some(c)) => c.to_vec(),
            (None, None) => bail!("missing --corpus (not set in the config either)"),
        };
        let index_path = config.paths.index.clone().filter(|p| p.exists());
        let pool = match &index_path {
            Some(p) => {
                DemonstrationPool::with_index(corpus, ExampleIndex::load(p, provider.identity())?)
            }
            None => DemonstrationPool::new(corpus, provider)?,
        };
        Ok(Self {
            backend,
            cache,
            pool,
            corpus_path,
            index_path,
        })
    }

    fn generator<'a>(
        &'a self,
        config: &PipelineConfig,
        provider: &'a dyn EmbeddingProvider,
    ) -> CandidateGenerator<'a> {
        let mut g = CandidateGenerator::new(
            self.backend.as_ref(),
            self.cache.as_ref(),
            &self.pool,
            provider,
        );
        g.seed = Some(config.seed);
        if let Some(b) = &config.backend {
            g.max_tokens = b.max_tokens;
        }
        g
    }

    fn add_inputs(&self, m: &mut Manifest) -> Result<()> {
        if let Some(p) = &self.corpus_path {
            m.add_input("corpus", p)?;
        }
        if let Some(p) = &self.index_path {
            m.add_input("index", p)?;
        }
        Ok(())
    }
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Prediction>(l)
                .with_context(|| format!("{}:{}: bad prediction", path.display(), i + 1))
        })
        .collect()
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}

fn ranker_name(kind: RankerKind) -> &'static str {
    match kind {
        RankerKind::Cuprank => "cuprank",
        RankerKind::Ranknet => "ranknet",
        RankerKind::Random => "random",
        RankerKind::SelfRank => "self",
    }
}

fn source_name(s: SourceType) -> &'static str {
    match s {
        SourceType::CodeInd => "CodeInd",
        SourceType::NonCodeInd => "NonCodeInd",
    }
}

fn count_name(c: CountType) -> &'static str {
    match c {
        CountType::SingleToken => "SingleToken",
        CountType::SingleSubToken => "SingleSubToken",
        CountType::MultiTokens => "MultiTokens",
    }
}
