//! Data flattening: a sample plus a candidate comment becomes two edit-token
//! sequences, one for the code change and one for the comment change.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::CommentUpdateSample;
use crate::scalar::Scalar;
use crate::tokenize::{EmbeddingProvider, TokenSequence};

pub const DEFAULT_MAX_EDIT_TOKENS: usize = 512;

/// Width of the operation one-hot plus the origin flag.
pub const EDIT_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Equal,
    Insert,
    Delete,
}

impl EditOp {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            EditOp::Equal => [1.0, 0.0, 0.0],
            EditOp::Insert => [0.0, 1.0, 0.0],
            EditOp::Delete => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Old,
    New,
}

impl Origin {
    pub fn flag(self) -> f64 {
        match self {
            Origin::Old => 0.0,
            Origin::New => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditToken {
    pub token: String,
    pub op: EditOp,
    pub origin: Origin,
}

impl EditToken {
    pub fn new(token: impl Into<String>, op: EditOp, origin: Origin) -> Self {
        Self {
            token: token.into(),
            op,
            origin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenedPair {
    pub code_change: Vec<EditToken>,
    pub comment_change: Vec<EditToken>,
}

/// Tokens on the old side of an edit script (equal and delete ops).
pub fn old_side(seq: &[EditToken]) -> Vec<&str> {
    seq.iter()
        .filter(|t| t.op != EditOp::Insert)
        .map(|t| t.token.as_str())
        .collect()
}

/// Tokens on the new side of an edit script (equal and insert ops).
pub fn new_side(seq: &[EditToken]) -> Vec<&str> {
    seq.iter()
        .filter(|t| t.op != EditOp::Delete)
        .map(|t| t.token.as_str())
        .collect()
}

/// Minimal edit script between two token sequences, in alignment order.
///
/// Built from a longest-common-subsequence table, so the number of non-equal
/// ops is `old.len() + new.len() - 2 * lcs`. Within a replaced region deletes
/// come before inserts. Equal tokens carry `Origin::Old`.
pub fn token_diff<S: AsRef<str>>(old: &[S], new: &[S]) -> Vec<EditToken> {
    let prefix = old
        .iter()
        .zip(new)
        .take_while(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    let suffix = old[prefix..]
        .iter()
        .rev()
        .zip(new[prefix..].iter().rev())
        .take_while(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    let a = &old[prefix..old.len() - suffix];
    let b = &new[prefix..new.len() - suffix];

    let mut script: Vec<EditToken> = old[..prefix]
        .iter()
        .map(|t| EditToken::new(t.as_ref(), EditOp::Equal, Origin::Old))
        .collect();

    // lcs[i][j] = LCS length of a[i..] and b[j..]
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut lcs = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * width + j] = if a[i].as_ref() == b[j].as_ref() {
                lcs[(i + 1) * width + j + 1] + 1
            } else {
                lcs[(i + 1) * width + j].max(lcs[i * width + j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i].as_ref() == b[j].as_ref() {
            script.push(EditToken::new(a[i].as_ref(), EditOp::Equal, Origin::Old));
            i += 1;
            j += 1;
        } else if i < n && (j == m || lcs[(i + 1) * width + j] >= lcs[i * width + j + 1]) {
            script.push(EditToken::new(a[i].as_ref(), EditOp::Delete, Origin::Old));
            i += 1;
        } else {
            script.push(EditToken::new(b[j].as_ref(), EditOp::Insert, Origin::New));
            j += 1;
        }
    }

    script.extend(
        old[old.len() - suffix..]
            .iter()
            .map(|t| EditToken::new(t.as_ref(), EditOp::Equal, Origin::Old)),
    );
    script
}

fn diff_sequences(old: &TokenSequence, new: &TokenSequence) -> Vec<EditToken> {
    token_diff(old.tokens(), new.tokens())
}

fn truncate(mut seq: Vec<EditToken>, max_len: usize, what: &str, id: &str) -> Vec<EditToken> {
    if seq.len() > max_len {
        log::debug!(
            "sample {id}: truncated {what} edit sequence by {} tokens",
            seq.len() - max_len
        );
        seq.truncate(max_len);
    }
    seq
}

/// Code change = diff(old code, new code); comment change =
/// diff(old comment, candidate). Both are truncated to `max_len` tokens.
pub fn flatten_sample(
    sample: &CommentUpdateSample,
    candidate: &str,
    provider: &dyn EmbeddingProvider,
    max_len: usize,
) -> Result<FlattenedPair> {
    let code_change = flatten_code(sample, provider, max_len)?;
    let comment_change = flatten_comment(sample, candidate, provider, max_len)?;
    Ok(FlattenedPair {
        code_change,
        comment_change,
    })
}

pub fn flatten_code(
    sample: &CommentUpdateSample,
    provider: &dyn EmbeddingProvider,
    max_len: usize,
) -> Result<Vec<EditToken>> {
    if sample.old_code.trim().is_empty() {
        return Err(Error::MalformedSample {
            id: sample.id.clone(),
            reason: "empty old code".into(),
        });
    }
    let old = provider.tokenize(&sample.old_code)?;
    let new = provider.tokenize(&sample.new_code)?;
    Ok(truncate(
        diff_sequences(&old, &new),
        max_len,
        "code",
        &sample.id,
    ))
}

pub fn flatten_comment(
    sample: &CommentUpdateSample,
    candidate: &str,
    provider: &dyn EmbeddingProvider,
    max_len: usize,
) -> Result<Vec<EditToken>> {
    if sample.old_comment.trim().is_empty() {
        return Err(Error::MalformedSample {
            id: sample.id.clone(),
            reason: "empty old comment".into(),
        });
    }
    if candidate.trim().is_empty() {
        return Err(Error::MalformedSample {
            id: sample.id.clone(),
            reason: "empty candidate comment".into(),
        });
    }
    let old = provider.tokenize(&sample.old_comment)?;
    let new = provider.tokenize(candidate)?;
    Ok(truncate(
        diff_sequences(&old, &new),
        max_len,
        "comment",
        &sample.id,
    ))
}

/// Row `i` = token embedding ‖ op one-hot ‖ origin flag.
pub fn embed_edit_tokens<T: Scalar>(
    seq: &[EditToken],
    provider: &dyn EmbeddingProvider,
) -> Result<Array2<T>> {
    let dim = provider.dimension();
    let tokens: Vec<String> = seq.iter().map(|t| t.token.clone()).collect();
    let vectors = provider.token_vectors(&tokens)?;
    if vectors.len() != seq.len() {
        return Err(Error::ProviderContract(format!(
            "expected {} token vectors, provider returned {}",
            seq.len(),
            vectors.len()
        )));
    }
    let mut out = Array2::zeros((seq.len(), dim + EDIT_FEATURES));
    for (i, (tok, vec)) in seq.iter().zip(&vectors).enumerate() {
        if vec.len() != dim {
            return Err(Error::ProviderContract(format!(
                "token vector has {} components, provider dimension is {dim}",
                vec.len()
            )));
        }
        let mut row = out.row_mut(i);
        let features = vec
            .iter()
            .copied()
            .chain(tok.op.one_hot())
            .chain([tok.origin.flag()]);
        for (slot, v) in row.iter_mut().zip(features) {
            *slot = T::of(v);
        }
    }
    Ok(out)
}
