//! Subword tokenization and token/sentence embedding.
//!
//! Two providers ship: [`StubProvider`], a deterministic hash-seeded
//! embedding table used by tests and desk-scale runs, and
//! [`EncoderProvider`], an adapter that talks to a pretrained encoder served
//! by an external inference runtime over HTTP.
//!
//! Token sequences follow the byte-level BPE conventions of RoBERTa-family
//! encoders: `<s>`/`</s>` sentinels and a `Ġ` marker for a prefixed space.

use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const SPACE_MARKER: char = 'Ġ';
const NEWLINE_MARKER: char = 'Ċ';
const TAB_MARKER: char = 'ĉ';
const CR_MARKER: char = 'č';

/// Ordered subword tokens, sentinels included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reassembles the text, honoring the whitespace markers and dropping
    /// sentinels.
    pub fn detokenize(&self) -> String {
        detokenize(&self.tokens)
    }
}

pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for tok in tokens {
        if tok == BOS || tok == EOS {
            continue;
        }
        let mut chars = tok.chars();
        match chars.next() {
            Some(SPACE_MARKER) => {
                out.push(' ');
                out.push_str(chars.as_str());
            }
            Some(NEWLINE_MARKER) if tok.chars().count() == 1 => out.push('\n'),
            Some(TAB_MARKER) if tok.chars().count() == 1 => out.push('\t'),
            Some(CR_MARKER) if tok.chars().count() == 1 => out.push('\r'),
            _ => out.push_str(tok),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    PretrainedEncoder,
    DeterministicStub,
}

/// What a provider is; persisted into indexes and checkpoints so artifacts
/// built with one provider are refused by another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIdentity {
    pub name: String,
    pub kind: ProviderKind,
    pub dimension: usize,
    pub seed: Option<u64>,
}

pub trait EmbeddingProvider: Send + Sync {
    fn identity(&self) -> &ProviderIdentity;

    fn dimension(&self) -> usize {
        self.identity().dimension
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    /// Static (context-free) embedding of each token, one row per token.
    fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;

    fn sentence_vector(&self, text: &str) -> Result<Vec<f64>>;
}

/// Provider selection, as read from the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider: String,
    pub dimension: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub endpoint: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider: StubProvider::NAME.to_string(),
            dimension: 28,
            seed: Some(0x5EED),
            endpoint: None,
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        if self.dimension == 0 {
            return Err(Error::Config("provider dimension must be positive".into()));
        }
        match self.provider.as_str() {
            StubProvider::NAME => {
                let seed = self.seed.ok_or_else(|| {
                    Error::Config("the stub provider requires a fixed `seed`".into())
                })?;
                Ok(Arc::new(StubProvider::new(self.dimension, seed)))
            }
            EncoderProvider::NAME => {
                let endpoint = self.endpoint.as_deref().ok_or_else(|| {
                    Error::Config(format!(
                        "provider `{}` requires an `endpoint`",
                        EncoderProvider::NAME
                    ))
                })?;
                Ok(Arc::new(EncoderProvider::connect(
                    endpoint,
                    self.dimension,
                )?))
            }
            other => Err(Error::Config(format!(
                "unknown embedding provider `{other}` (available: `{}`, `{}`)",
                StubProvider::NAME,
                EncoderProvider::NAME
            ))),
        }
    }
}

pub fn subword_tokenize(text: &str, provider: &dyn EmbeddingProvider) -> Result<TokenSequence> {
    provider.tokenize(text)
}

/// Embeds each token of `seq`; row `i` is the embedding of token `i`.
pub fn embed_tokens(seq: &TokenSequence, provider: &dyn EmbeddingProvider) -> Result<Array2<f64>> {
    let dim = provider.dimension();
    let rows = provider.token_vectors(seq.tokens())?;
    if rows.len() != seq.len() {
        return Err(Error::ProviderContract(format!(
            "expected {} token vectors, provider returned {}",
            seq.len(),
            rows.len()
        )));
    }
    let mut out = Array2::zeros((seq.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        check_width(row, dim)?;
        out.row_mut(i)
            .iter_mut()
            .zip(row)
            .for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

pub fn sentence_embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    let v = provider.sentence_vector(text)?;
    check_width(&v, provider.dimension())?;
    Ok(v)
}

fn check_width(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::ProviderContract(format!(
            "vector has {} components, provider dimension is {dim}",
            v.len()
        )));
    }
    Ok(())
}

/// Cosine similarity; zero vectors yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Splits an identifier at lower→upper transitions, before the last capital
/// of an acronym run that is followed by a lowercase letter, and wherever
/// numeric-ness changes. Concatenating the pieces gives back `token`.
pub fn camel_case_split(token: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = token.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let (pos, cur) = chars[i];
        let prev = chars[i - 1].1;
        let next = chars.get(i + 1).map(|&(_, c)| c);
        let boundary = (prev.is_lowercase() && cur.is_uppercase())
            || (prev.is_numeric() != cur.is_numeric())
            || (prev.is_uppercase() && cur.is_uppercase() && next.is_some_and(char::is_lowercase));
        if boundary {
            pieces.push(&token[start..pos]);
            start = pos;
        }
    }
    if start < token.len() {
        pieces.push(&token[start..]);
    }
    pieces
}

/// Pre-tokenizer shared by the stub: word runs are camel-split, punctuation
/// becomes single-character tokens, a single space before a token becomes the
/// `Ġ` prefix and any other whitespace becomes a standalone marker token.
fn stub_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = vec![BOS.to_string()];
    let mut prefix = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            let next_is_text = chars.get(i + 1).is_some_and(|n| !n.is_whitespace());
            if c == ' ' && next_is_text {
                prefix = true;
            } else {
                tokens.push(match c {
                    ' ' => SPACE_MARKER.to_string(),
                    '\n' => NEWLINE_MARKER.to_string(),
                    '\t' => TAB_MARKER.to_string(),
                    '\r' => CR_MARKER.to_string(),
                    other => other.to_string(),
                });
            }
            i += 1;
            continue;
        }
        let pieces: Vec<String> = if c.is_alphanumeric() {
            let begin = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[begin..i].iter().collect();
            camel_case_split(&word)
                .into_iter()
                .map(str::to_string)
                .collect()
        } else {
            i += 1;
            vec![c.to_string()]
        };
        for (k, piece) in pieces.into_iter().enumerate() {
            if k == 0 && prefix {
                tokens.push(format!("{SPACE_MARKER}{piece}"));
            } else {
                tokens.push(piece);
            }
        }
        prefix = false;
    }
    tokens.push(EOS.to_string());
    tokens
}

/// FNV-1a, 64-bit. Stable across platforms and toolchains.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Deterministic provider: each distinct token maps to a pseudo-random unit
/// vector seeded by its stable hash and the provider seed.
#[derive(Debug, Clone)]
pub struct StubProvider {
    identity: ProviderIdentity,
}

impl StubProvider {
    pub const NAME: &'static str = "stub";

    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            identity: ProviderIdentity {
                name: Self::NAME.to_string(),
                kind: ProviderKind::DeterministicStub,
                dimension,
                seed: Some(seed),
            },
        }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let seed = self.identity.seed.unwrap_or(0);
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_hash64(token.as_bytes()) ^ seed.rotate_left(17));
        let mut v: Vec<f64> = (0..self.identity.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl EmbeddingProvider for StubProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(TokenSequence::new(stub_tokenize(text)))
    }

    fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens.iter().map(|t| self.token_vector(t)).collect())
    }

    fn sentence_vector(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = stub_tokenize(text);
        let mut acc = vec![0.0; self.identity.dimension];
        for t in &tokens {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        normalize(&mut acc);
        Ok(acc)
    }
}

/// Adapter for a pretrained encoder hosted by an inference server.
///
/// Wire protocol (JSON over HTTP POST, relative to the endpoint):
///
/// * `info` `{}` → `{"dimension": n}`
/// * `tokenize` `{"text": s}` → `{"tokens": [..]}`
/// * `token_embeddings` `{"tokens": [..]}` → `{"embeddings": [[..], ..]}`
/// * `sentence_embedding` `{"text": s}` → `{"embedding": [..]}`
pub struct EncoderProvider {
    identity: ProviderIdentity,
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct InfoReply {
    dimension: usize,
}

#[derive(Deserialize)]
struct TokenizeReply {
    tokens: Vec<String>,
}

#[derive(Deserialize)]
struct TokenEmbeddingsReply {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct SentenceReply {
    embedding: Vec<f64>,
}

impl EncoderProvider {
    pub const NAME: &'static str = "encoder";

    pub fn connect(endpoint: &str, dimension: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let provider = Self {
            identity: ProviderIdentity {
                name: Self::NAME.to_string(),
                kind: ProviderKind::PretrainedEncoder,
                dimension,
                seed: None,
            },
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client,
        };
        let info: InfoReply = provider.post("info", &serde_json::json!({}))?;
        if info.dimension != dimension {
            return Err(Error::ProviderContract(format!(
                "encoder reports dimension {}, config says {dimension}",
                info.dimension
            )));
        }
        Ok(provider)
    }

    fn post<R: serde::de::DeserializeOwned>(
        &self,
        route: &str,
        body: &serde_json::Value,
    ) -> Result<R> {
        let url = format!("{}/{route}", self.endpoint);
        let unavailable = |reason: String| Error::ProviderUnavailable {
            provider: Self::NAME.to_string(),
            reason,
        };
        let resp = self
            .client
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| unavailable(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("{url}: HTTP {}", resp.status())));
        }
        resp.json()
            .map_err(|e| Error::ProviderContract(format!("{url}: undecodable reply: {e}")))
    }
}

impl EmbeddingProvider for EncoderProvider {
    fn identity(&self) -> &ProviderIdentity {
        &self.identity
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let reply: TokenizeReply = self.post("tokenize", &serde_json::json!({ "text": text }))?;
        Ok(TokenSequence::new(reply.tokens))
    }

    fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply: TokenEmbeddingsReply =
            self.post("token_embeddings", &serde_json::json!({ "tokens": tokens }))?;
        Ok(reply.embeddings)
    }

    fn sentence_vector(&self, text: &str) -> Result<Vec<f64>> {
        let reply: SentenceReply =
            self.post("sentence_embedding", &serde_json::json!({ "text": text }))?;
        Ok(reply.embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> StubProvider {
        StubProvider::new(16, 7)
    }

    #[test]
    fn splits_identifier_into_subwords() {
        let seq = stub().tokenize("updateVersion").unwrap();
        assert_eq!(seq.tokens(), ["<s>", "update", "Version", "</s>"]);
    }

    #[test]
    fn empty_text_is_sentinels_only() {
        let seq = stub().tokenize("").unwrap();
        assert_eq!(seq.tokens(), [BOS, EOS]);
    }

    #[test]
    fn space_marker_prefixes_following_token() {
        let seq = stub().tokenize("return x;").unwrap();
        assert_eq!(seq.tokens(), ["<s>", "return", "Ġx", ";", "</s>"]);
        assert_eq!(seq.detokenize(), "return x;");
    }

    #[test]
    fn irregular_whitespace_round_trips() {
        let text = "  if (a  &&\tb)\n    return;\r\n";
        assert_eq!(stub().tokenize(text).unwrap().detokenize(), text);
    }

    #[test]
    fn camel_split_examples() {
        assert_eq!(camel_case_split("getName"), ["get", "Name"]);
        assert_eq!(
            camel_case_split("HTTPServer2x"),
            ["HTTP", "Server", "2", "x"]
        );
        assert_eq!(camel_case_split("lowercase"), ["lowercase"]);
        assert_eq!(camel_case_split("").len(), 0);
        assert_eq!(camel_case_split("ABC"), ["ABC"]);
        assert_eq!(camel_case_split("parseXMLFile"), ["parse", "XML", "File"]);
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let p = StubProvider::new(768, 1);
        let seq = TokenSequence::new(["a", "b", "a", "c", "d"].map(String::from).to_vec());
        let m = embed_tokens(&seq, &p).unwrap();
        assert_eq!(m.dim(), (5, 768));
        assert_eq!(m.row(0), m.row(2));
        let again = embed_tokens(&seq, &p).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn stub_cosines_are_reproducible() {
        let p = stub();
        let foo = sentence_embed("foo", &p).unwrap();
        let bar = sentence_embed("bar", &p).unwrap();
        assert!((cosine(&foo, &foo) - 1.0).abs() < 1e-12);
        let first = cosine(&foo, &bar);
        let p2 = stub();
        let second = cosine(
            &sentence_embed("foo", &p2).unwrap(),
            &sentence_embed("bar", &p2).unwrap(),
        );
        assert_eq!(first.to_bits(), second.to_bits());
    }

    #[test]
    fn seed_changes_vectors() {
        let a = StubProvider::new(8, 1).token_vector("x");
        let b = StubProvider::new(8, 2).token_vector("x");
        assert_ne!(a, b);
    }

    #[test]
    fn unknown_provider_is_named_in_error() {
        let cfg = ProviderConfig {
            provider: "codebert-local".into(),
            ..ProviderConfig::default()
        };
        let err = cfg.build().err().unwrap().to_string();
        assert!(err.contains("codebert-local"), "{err}");
    }

    #[test]
    fn stub_without_seed_is_rejected() {
        let cfg = ProviderConfig {
            seed: None,
            ..ProviderConfig::default()
        };
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    struct BadWidth(ProviderIdentity);

    impl EmbeddingProvider for BadWidth {
        fn identity(&self) -> &ProviderIdentity {
            &self.0
        }
        fn tokenize(&self, text: &str) -> Result<TokenSequence> {
            Ok(TokenSequence::new(stub_tokenize(text)))
        }
        fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(tokens.iter().map(|_| vec![0.0; 3]).collect())
        }
        fn sentence_vector(&self, _: &str) -> Result<Vec<f64>> {
            Ok(vec![0.0; 3])
        }
    }

    #[test]
    fn width_mismatch_is_a_contract_error() {
        let p = BadWidth(ProviderIdentity {
            name: "bad".into(),
            kind: ProviderKind::DeterministicStub,
            dimension: 4,
            seed: None,
        });
        let seq = p.tokenize("a b").unwrap();
        assert!(matches!(
            embed_tokens(&seq, &p),
            Err(Error::ProviderContract(_))
        ));
        assert!(matches!(
            sentence_embed("a", &p),
            Err(Error::ProviderContract(_))
        ));
    }

    #[test]
    fn unreachable_encoder_is_unavailable() {
        let err = EncoderProvider::connect("http://127.0.0.1:9", 8)
            .err()
            .unwrap();
        assert!(matches!(err, Error::ProviderUnavailable { .. }), "{err}");
    }
}
