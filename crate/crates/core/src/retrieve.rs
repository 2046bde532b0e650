//! Exact nearest-neighbour retrieval of demonstrations by new-code
//! similarity.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sample::CommentUpdateSample;
use crate::tokenize::{cosine, sentence_embed, EmbeddingProvider, ProviderIdentity};

const INDEX_MAGIC: &[u8; 8] = b"CUPIDX\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleIndex {
    provider: ProviderIdentity,
    entries: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

impl ExampleIndex {
    pub fn build(corpus: &[CommentUpdateSample], provider: &dyn EmbeddingProvider) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Index(
                "cannot build an index over an empty corpus".into(),
            ));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(corpus.len());
        for s in corpus {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Index(format!("duplicate sample id `{}`", s.id)));
            }
            entries.push((s.id.clone(), sentence_embed(&s.new_code, provider)?));
        }
        Ok(Self {
            provider: provider.identity().clone(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provider(&self) -> &ProviderIdentity {
        &self.provider
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    /// The `k` entries most similar to `query`, by descending cosine, ties by
    /// ascending id. `exclude_id` is never returned.
    pub fn top_k_by_vector(
        &self,
        query: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude_id)
            .map(|(id, v)| Neighbor {
                id: id.clone(),
                similarity: cosine(query, v),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.id.cmp(&b.id))
        });
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.provider).expect("identity serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a sidecar index, refusing it unless it was built by `expected`.
    pub fn load(path: &Path, expected: &ProviderIdentity) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes);
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::Index(format!(
                "{} is not an index file",
                path.display()
            )));
        }
        let header_len = r.u32()? as usize;
        let provider: ProviderIdentity = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Index(format!("bad index header: {e}")))?;
        if &provider != expected {
            return Err(Error::Index(format!(
                "index built with provider {provider:?}, current provider is {expected:?}"
            )));
        }
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::Index("non-UTF-8 id in index".into()))?;
            let v = (0..provider.dimension)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            entries.push((id, v));
        }
        if !r.is_done() {
            return Err(Error::Index("trailing bytes after index records".into()));
        }
        Ok(Self { provider, entries })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Index("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn build_index(
    corpus: &[CommentUpdateSample],
    provider: &dyn EmbeddingProvider,
) -> Result<ExampleIndex> {
    ExampleIndex::build(corpus, provider)
}

pub fn top_k_similar(
    index: &ExampleIndex,
    provider: &dyn EmbeddingProvider,
    query_new_code: &str,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<Neighbor>> {
    if index.provider() != provider.identity() {
        return Err(Error::Index(
            "query provider differs from index provider".into(),
        ));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let q = sentence_embed(query_new_code, provider)?;
    Ok(index.top_k_by_vector(&q, k, exclude_id))
}

/// A training corpus together with its index; hands out demonstrations.
pub struct DemonstrationPool {
    samples: HashMap<String, CommentUpdateSample>,
    index: ExampleIndex,
}

impl DemonstrationPool {
    pub fn new(corpus: Vec<CommentUpdateSample>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let index = ExampleIndex::build(&corpus, provider)?;
        Ok(Self::with_index(corpus, index))
    }

    pub fn with_index(corpus: Vec<CommentUpdateSample>, index: ExampleIndex) -> Self {
        let samples = corpus.into_iter().map(|s| (s.id.clone(), s)).collect();
        Self { samples, index }
    }

    pub fn index(&self) -> &ExampleIndex {
        &self.index
    }

    /// The `k` most similar training samples ordered by ascending similarity,
    /// so the closest one sits last, next to the query.
    pub fn demonstrations(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &CommentUpdateSample,
        k: usize,
    ) -> Result<Vec<&CommentUpdateSample>> {
        let mut hits = top_k_similar(&self.index, provider, &query.new_code, k, Some(&query.id))?;
        hits.reverse();
        Ok(hits
            .iter()
            .filter_map(|n| self.samples.get(&n.id))
            .collect())
    }
}
