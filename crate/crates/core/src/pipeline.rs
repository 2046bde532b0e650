//! End-to-end plumbing: run configuration, backend construction, the
//! generate-then-rank update step and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{expand_strategies, CandidateComment, CandidateGenerator};
use crate::error::{Error, Result};
use crate::llm::{Backend, HttpBackend, HttpBackendConfig, MockBackend, DEFAULT_MAX_TOKENS};
use crate::prompt::{PromptStrategy, DEFAULT_SHOTS, DEFAULT_TEMPERATURE, PROMPT_VERSION};
use crate::rank::{random_rank, self_rank, CupRank, RankNet, RankNetConfig, RankerConfig};
use crate::sample::CommentUpdateSample;
use crate::tokenize::{stable_hash64, EmbeddingProvider, ProviderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_shots() -> Vec<usize> {
    DEFAULT_SHOTS.to_vec()
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            shots: default_shots(),
            temperature: default_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendKind {
    /// Replies from a fixture file of [`crate::llm::MockFixture`] rules.
    Mock {
        fixture: PathBuf,
    },
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSettings {
    #[serde(flatten)]
    pub kind: BackendKind,
    /// Samples in flight at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_concurrency() -> usize {
    4
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSettings {
    pub dataset: Option<PathBuf>,
    /// Demonstration corpus for retrieval (usually the training split).
    pub corpus: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub val_groups: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl PathSettings {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dataset,
            &mut self.corpus,
            &mut self.groups,
            &mut self.val_groups,
            &mut self.checkpoint,
            &mut self.index,
            &mut self.cache_dir,
            &mut self.reports,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(p.as_path());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub strategies: StrategyConfig,
    pub backend: Option<BackendSettings>,
    #[serde(default)]
    pub ranker: Option<RankerConfig>,
    #[serde(default)]
    pub ranknet: Option<RankNetConfig>,
    #[serde(default)]
    pub paths: PathSettings,
}

fn default_seed() -> u64 {
    42
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            provider: ProviderConfig::default(),
            models: Vec::new(),
            strategies: StrategyConfig::default(),
            backend: None,
            ranker: None,
            ranknet: None,
            paths: PathSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.paths.resolve(base_dir);
        if let Some(BackendSettings {
            kind: BackendKind::Mock { fixture },
            ..
        }) = config.backend.as_mut()
        {
            if fixture.is_relative() {
                *fixture = base_dir.join(fixture.as_path());
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strategies.temperature) {
            return Err(Error::Config(format!(
                "strategy temperature {} outside [0, 1]",
                self.strategies.temperature
            )));
        }
        if let Some(r) = &self.ranker {
            r.validate()?;
        }
        if let Some(r) = &self.ranknet {
            r.validate()?;
        }
        if let Some(b) = &self.backend {
            if b.concurrency == 0 {
                return Err(Error::Config("backend concurrency must be positive".into()));
            }
        }
        Ok(())
    }

    /// Ranker configuration with `embed_dim` tied to the provider.
    pub fn ranker_config(&self) -> RankerConfig {
        let mut c = self.ranker.clone().unwrap_or_default();
        c.embed_dim = self.provider.dimension + crate::flatten::EDIT_FEATURES;
        c
    }

    pub fn ranknet_config(&self) -> RankNetConfig {
        let mut c = self.ranknet.clone().unwrap_or_default();
        c.embed_dim = self.provider.dimension;
        c
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn strategies(&self) -> Result<Vec<PromptStrategy>> {
        let templates: Vec<(usize, f64)> = self
            .strategies
            .shots
            .iter()
            .map(|&k| (k, self.strategies.temperature))
            .collect();
        expand_strategies(&self.models, &templates)
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        let settings = self
            .backend
            .as_ref()
            .ok_or_else(|| Error::Config("no [backend] section configured".into()))?;
        build_backend(&settings.kind)
    }
}

pub fn build_backend(kind: &BackendKind) -> Result<Box<dyn Backend>> {
    Ok(match kind {
        BackendKind::Mock { fixture } => Box::new(MockBackend::from_file(fixture)?),
        BackendKind::Http(c) => Box::new(HttpBackend::new(c.clone())?),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// How candidates are ordered.
pub enum Ranker<'a> {
    CupRank(&'a CupRank<f32>),
    RankNet(&'a RankNet<f32>),
    /// Seeded per sample from `seed` and the sample id.
    Random {
        seed: u64,
    },
    SelfRank {
        model_id: String,
        temperature: f64,
    },
}

impl Ranker<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Ranker::CupRank(_) => "cuprank",
            Ranker::RankNet(_) => "ranknet",
            Ranker::Random { .. } => "random",
            Ranker::SelfRank { .. } => "self",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub text: String,
    /// Ranker score; absent for order-only rankers.
    pub score: Option<f64>,
    pub model_id: String,
    pub shots: usize,
    pub temperature: f64,
}

impl RankedCandidate {
    fn of(c: &CandidateComment, score: Option<f64>) -> Self {
        Self {
            text: c.text.clone(),
            score,
            model_id: c.provenance.model_id.clone(),
            shots: c.provenance.shots,
            temperature: c.provenance.temperature,
        }
    }
}

/// One update result; `prediction` is the top-ranked candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub id: String,
    pub prediction: String,
    pub ranked: Vec<RankedCandidate>,
}

pub struct Updater<'a> {
    pub generator: CandidateGenerator<'a>,
    pub strategies: Vec<PromptStrategy>,
    pub ranker: Ranker<'a>,
    pub provider: &'a dyn EmbeddingProvider,
}

impl Updater<'_> {
    /// Generates one candidate per strategy, ranks them and picks the top.
    pub fn run_update(&self, sample: &CommentUpdateSample) -> Result<UpdateResult> {
        let query = sample.without_ground_truth();
        let candidates =
            self.generator
                .generate(&query, &self.strategies)
                .map_err(|e| match e {
                    Error::AllStrategiesFailed { .. } => Error::Pipeline(format!(
                        "no usable candidate for sample `{}`: {e}",
                        sample.id
                    )),
                    other => other,
                })?;
        let ranked = self.rank(&query, &candidates)?;
        let prediction = ranked.first().map(|r| r.text.clone()).ok_or_else(|| {
            Error::Pipeline(format!("no usable candidate for sample `{}`", sample.id))
        })?;
        Ok(UpdateResult {
            id: sample.id.clone(),
            prediction,
            ranked,
        })
    }

    fn rank(
        &self,
        sample: &CommentUpdateSample,
        candidates: &[CandidateComment],
    ) -> Result<Vec<RankedCandidate>> {
        if candidates.len() <= 1 {
            return Ok(candidates
                .iter()
                .map(|c| RankedCandidate::of(c, None))
                .collect());
        }
        Ok(match &self.ranker {
            Ranker::CupRank(model) => model
                .rank_candidates(sample, candidates, self.provider)?
                .iter()
                .map(|s| RankedCandidate::of(&s.candidate, Some(s.score)))
                .collect(),
            Ranker::RankNet(model) => model
                .rank(sample, candidates, self.provider)?
                .into_iter()
                .map(|(i, s)| RankedCandidate::of(&candidates[i], Some(s)))
                .collect(),
            Ranker::Random { seed } => {
                random_rank(candidates.len(), seed ^ stable_hash64(sample.id.as_bytes()))
                    .into_iter()
                    .map(|i| RankedCandidate::of(&candidates[i], None))
                    .collect()
            }
            Ranker::SelfRank {
                model_id,
                temperature,
            } => self_rank(
                sample,
                candidates,
                self.generator.backend,
                model_id,
                *temperature,
                self.generator.cache,
            )?
            .into_iter()
            .map(|i| RankedCandidate::of(&candidates[i], None))
            .collect(),
        })
    }

    /// Updates every sample, at most `concurrency` at a time, in input order.
    pub fn run_all(
        &self,
        samples: &[CommentUpdateSample],
        concurrency: usize,
    ) -> Result<Vec<UpdateResult>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency.max(1))
            .build()
            .map_err(|e| Error::Pipeline(format!("cannot start worker pool: {e}")))?;
        pool.install(|| samples.par_iter().map(|s| self.run_update(s)).collect())
    }
}

/// Provenance of one output file, written next to it as
/// `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_digest: Option<String>,
    pub prompt_version: String,
    pub seed: u64,
    /// Input role → hex SHA-256 of the file.
    pub inputs: BTreeMap<String, String>,
    /// Hex SHA-256 of the output file itself.
    pub output_sha256: Option<String>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_digest: None,
            prompt_version: PROMPT_VERSION.to_string(),
            seed,
            inputs: BTreeMap::new(),
            output_sha256: None,
        }
    }

    pub fn with_config(mut self, config: &PipelineConfig) -> Self {
        self.config_digest = Some(config.digest());
        self
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Digest of everything except the output hash; outputs derived from
    /// the same inputs share it.
    pub fn input_digest(&self) -> String {
        let mut m = self.clone();
        m.output_sha256 = None;
        sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    /// Hashes `output` and writes the sidecar next to it.
    pub fn write_for(mut self, output: &Path) -> Result<PathBuf> {
        self.output_sha256 = Some(file_sha256(output)?);
        let path = Self::sidecar_path(output);
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieve::DemonstrationPool;
    use crate::synthetic::{one_correct_fixture, separable_samples};
    use crate::tokenize::StubProvider;

    #[test]
    fn config_parses_with_defaults_and_relative_paths() {
        let text = r#"
            seed = 7
            models = ["mock"]
            [backend]
            kind = "mock"
            fixture = "fx.json"
            [paths]
            dataset = "data/test.jsonl"
        "#;
        let c = PipelineConfig::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.strategies.shots, [0, 1, 3, 5]);
        assert_eq!(
            c.paths.dataset.as_deref(),
            Some(Path::new("/base/data/test.jsonl"))
        );
        match &c.backend.as_ref().unwrap().kind {
            BackendKind::Mock { fixture } => assert_eq!(fixture, Path::new("/base/fx.json")),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.ranker_config().embed_dim, 32);
        assert_eq!(c.digest(), c.clone().digest());
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml("sed = 1", Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[strategies]\ntemperature = 3.0", Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml(
                "[provider]\nprovider = \"bert\"\ndimension = 4",
                Path::new(".")
            )
            .unwrap()
            .provider
            .build(),
            Err(Error::Config(_))
        ));
    }

    fn setup(
        shots: &[usize],
    ) -> (
        Vec<(CommentUpdateSample, Vec<String>)>,
        MockBackend,
        DemonstrationPool,
        StubProvider,
    ) {
        let provider = StubProvider::new(28, 1);
        let samples = separable_samples(12, 3, 5);
        let corpus: Vec<_> = separable_samples(20, 3, 99)
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let pool = DemonstrationPool::new(corpus, &provider).unwrap();
        let backend = MockBackend::new(one_correct_fixture(&samples, "m", shots, 3));
        (samples, backend, pool, provider)
    }

    #[test]
    fn single_strategy_returns_its_candidate() {
        let (samples, backend, pool, provider) = setup(&[1]);
        let updater = Updater {
            generator: CandidateGenerator::new(&backend, None, &pool, &provider),
            strategies: vec![PromptStrategy::new("m", 1, 0.2).unwrap()],
            ranker: Ranker::Random { seed: 1 },
            provider: &provider,
        };
        let r = updater.run_update(&samples[0].0).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.prediction, samples[0].0.new_comment.clone().unwrap());
    }

    #[test]
    fn audit_list_has_every_deduplicated_candidate() {
        let (samples, backend, pool, provider) = setup(&[0, 1, 3, 5]);
        let updater = Updater {
            generator: CandidateGenerator::new(&backend, None, &pool, &provider),
            strategies: PromptStrategy::defaults("m"),
            ranker: Ranker::Random { seed: 1 },
            provider: &provider,
        };
        let results = updater
            .run_all(
                &samples.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
                3,
            )
            .unwrap();
        for (r, (s, _)) in results.iter().zip(&samples) {
            assert_eq!(r.id, s.id);
            assert_eq!(r.ranked.len(), 4);
            assert_eq!(r.prediction, r.ranked[0].text);
        }
    }

    #[test]
    fn empty_replies_are_a_pipeline_error() {
        let provider = StubProvider::new(8, 1);
        let corpus: Vec<_> = separable_samples(3, 1, 9)
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let pool = DemonstrationPool::new(corpus, &provider).unwrap();
        let backend = MockBackend::with_responder(vec!["m".into()], |_| Some("```\n```".into()));
        let updater = Updater {
            generator: CandidateGenerator::new(&backend, None, &pool, &provider),
            strategies: vec![PromptStrategy::new("m", 0, 0.2).unwrap()],
            ranker: Ranker::Random { seed: 1 },
            provider: &provider,
        };
        let sample = separable_samples(1, 1, 4).remove(0).0;
        assert!(matches!(
            updater.run_update(&sample),
            Err(Error::Pipeline(_))
        ));
    }

    #[test]
    fn manifest_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.jsonl");
        std::fs::write(&out, "x\n").unwrap();
        let input = dir.path().join("in.jsonl");
        std::fs::write(&input, "y\n").unwrap();
        let mut m = Manifest::new("update", 3);
        m.add_input("dataset", &input).unwrap();
        let digest = m.input_digest();
        let path = m.clone().write_for(&out).unwrap();
        assert_eq!(path, dir.path().join("out.jsonl.manifest.json"));
        let back: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.input_digest(), digest);
        assert_eq!(back.output_sha256.unwrap(), file_sha256(&out).unwrap());
    }
}
