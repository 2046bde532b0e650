//! The comment-update sample and its line-delimited dataset format.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::protocol_tokens;

/// Old code, old comment, new code and (when known) the developer-written
/// new comment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentUpdateSample {
    pub id: String,
    pub old_code: String,
    pub old_comment: String,
    pub new_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_comment: Option<String>,
}

/// Field-optional mirror used while parsing so a missing field can be
/// reported by name instead of as a generic decode failure.
#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    old_code: Option<String>,
    old_comment: Option<String>,
    new_code: Option<String>,
    new_comment: Option<String>,
}

impl CommentUpdateSample {
    pub fn new(
        id: impl Into<String>,
        old_code: impl Into<String>,
        old_comment: impl Into<String>,
        new_code: impl Into<String>,
        new_comment: Option<String>,
    ) -> Self {
        Self {
            id: id.into(),
            old_code: old_code.into(),
            old_comment: old_comment.into(),
            new_code: new_code.into(),
            new_comment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, message: &str| Error::Validation {
            id: self.id.clone(),
            field: field.to_string(),
            message: message.to_string(),
        };
        for (field, value) in [
            ("id", &self.id),
            ("old_code", &self.old_code),
            ("old_comment", &self.old_comment),
            ("new_code", &self.new_code),
        ] {
            if value.trim().is_empty() {
                return Err(invalid(field, "must be non-empty"));
            }
        }
        if let Some(gt) = &self.new_comment {
            if gt.trim().is_empty() {
                return Err(invalid("new_comment", "must be non-empty when present"));
            }
            if protocol_tokens(gt) == protocol_tokens(&self.old_comment) {
                return Err(invalid(
                    "new_comment",
                    "does not differ from old_comment under the token-matching protocol",
                ));
            }
        }
        Ok(())
    }

    /// The sample with its ground truth removed, as fed to an updater.
    pub fn without_ground_truth(&self) -> Self {
        Self {
            new_comment: None,
            ..self.clone()
        }
    }
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<CommentUpdateSample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = raw.id.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "record has no `id`".into(),
        })?;
        let missing = |field: &str| Error::Validation {
            id: id.clone(),
            field: field.to_string(),
            message: "missing".into(),
        };
        let sample = CommentUpdateSample {
            old_code: raw.old_code.ok_or_else(|| missing("old_code"))?,
            old_comment: raw.old_comment.ok_or_else(|| missing("old_comment"))?,
            new_code: raw.new_code.ok_or_else(|| missing("new_code"))?,
            new_comment: raw.new_comment,
            id,
        };
        sample.validate()?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Validation {
                id: sample.id,
                field: "id".into(),
                message: format!("duplicate id (line {line_no})"),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<CommentUpdateSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn write_dataset(path: &Path, samples: &[CommentUpdateSample]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
