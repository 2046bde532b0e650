//! Text normalization shared by response cleaning and the token-matching
//! protocol used for labeling, deduplication and Accuracy.

use crate::tokenize::camel_case_split;

/// Leading phrases that chat models like to put in front of the answer.
pub const DEFAULT_LABELS: &[&str] = &[
    "here is the updated comment:",
    "here's the updated comment:",
    "the updated comment is:",
    "updated comment:",
    "new comment:",
    "updated:",
    "comment:",
    "answer:",
    "output:",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizeOptions {
    /// Matched case-insensitively at the start of the text.
    pub labels: Vec<String>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl NormalizeOptions {
    pub fn with_extra_labels<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels
            .extend(extra.into_iter().map(|s| s.into().to_lowercase()));
        self
    }
}

/// Removes fences, language tags, backticks, labels and wrapping quotes, and
/// collapses all whitespace to single spaces. Runs to a fixed point, so it is
/// idempotent.
pub fn clean_response(raw: &str, opts: &NormalizeOptions) -> String {
    let mut cur = raw.to_string();
    loop {
        let next = clean_pass(&cur, opts);
        if next == cur {
            return next;
        }
        cur = next;
    }
}

fn clean_pass(text: &str, opts: &NormalizeOptions) -> String {
    let mut kept = Vec::new();
    for line in text.lines() {
        let mut t = line.trim();
        if let Some(rest) = t.strip_prefix("```") {
            let is_tag = |c: char| c.is_ascii_alphanumeric() || "_+#-.".contains(c);
            t = if rest.chars().all(is_tag) { "" } else { rest };
        }
        if let Some(rest) = t.strip_suffix("```") {
            t = rest;
        }
        kept.push(t.replace('`', ""));
    }
    let joined = kept.join(" ");
    let mut s = joined.split_whitespace().collect::<Vec<_>>().join(" ");
    s = strip_label(&s, opts);
    strip_quotes(&s).to_string()
}

fn strip_label(s: &str, opts: &NormalizeOptions) -> String {
    let body = s.strip_prefix("**").unwrap_or(s);
    let lower = body.to_lowercase();
    for label in &opts.labels {
        let label = label.to_lowercase();
        if lower.starts_with(&label) && body.is_char_boundary(label.len()) {
            let rest = &body[label.len()..];
            let rest = rest.strip_prefix("**").unwrap_or(rest);
            return rest.trim().to_string();
        }
    }
    s.to_string()
}

fn strip_quotes(s: &str) -> &str {
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”')] {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Drops block/line comment delimiters and leading `*` gutters.
pub fn strip_comment_delimiters(s: &str) -> String {
    s.split_whitespace()
        .filter_map(|w| {
            let w = w.trim_start_matches("/**").trim_start_matches("/*");
            let w = w.trim_end_matches("*/");
            let w = w.trim_start_matches("//");
            if w.is_empty() || w.chars().all(|c| c == '*') {
                None
            } else {
                Some(w)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Step 1 of the token-matching protocol.
pub fn strip_formatting(raw: &str) -> String {
    strip_comment_delimiters(&clean_response(raw, &NormalizeOptions::default()))
}

/// Whitespace-delimited words after formatting is stripped; the unit for the
/// word-level metrics.
pub fn metric_words(raw: &str) -> Vec<String> {
    strip_formatting(raw)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Alphanumeric runs, camel-split, plus single punctuation characters.
pub fn sub_tokens(word: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut Vec<String>| {
        if !run.is_empty() {
            out.extend(camel_case_split(run).into_iter().map(str::to_string));
            run.clear();
        }
    };
    for c in word.chars() {
        if c.is_alphanumeric() {
            run.push(c);
        } else {
            flush(&mut run, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    flush(&mut run, &mut out);
    out
}

/// The normalized token sequence compared by the token-matching protocol:
/// strip formatting, camel-case split, lowercase.
pub fn protocol_tokens(raw: &str) -> Vec<String> {
    metric_words(raw)
        .iter()
        .flat_map(|w| sub_tokens(w))
        .map(|t| t.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(s: &str) -> String {
        clean_response(s, &NormalizeOptions::default())
    }

    #[test]
    fn fence_and_language_tag_removed() {
        assert_eq!(
            clean("```java\n/** returns foo */\n```"),
            "/** returns foo */"
        );
    }

    #[test]
    fn label_and_newline_removed() {
        assert_eq!(clean("Updated comment: returns foo\n"), "returns foo");
        assert_eq!(clean("**Updated comment:** \"returns foo\""), "returns foo");
    }

    #[test]
    fn plain_text_untouched() {
        assert_eq!(clean("returns foo"), "returns foo");
    }

    #[test]
    fn inline_fence_keeps_content() {
        assert_eq!(clean("```returns foo```"), "returns foo");
    }

    #[test]
    fn extra_labels_are_honored() {
        let opts = NormalizeOptions::default().with_extra_labels(["Sure!"]);
        assert_eq!(clean_response("Sure! returns foo", &opts), "returns foo");
    }

    #[test]
    fn delimiters_and_gutters_dropped() {
        assert_eq!(
            strip_comment_delimiters("/** * Returns foo. */"),
            "Returns foo."
        );
        assert_eq!(strip_comment_delimiters("// returns x"), "returns x");
    }

    #[test]
    fn protocol_splits_and_lowercases() {
        assert_eq!(
            protocol_tokens("Returns the getName."),
            ["returns", "the", "get", "name", "."]
        );
    }
}
