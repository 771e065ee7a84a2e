//! Loading raw CI logs and counting tokens.
//!
//! Every budget decision in the pipeline goes through a [`Tokenizer`]. The
//! default [`RegexTokenizer`] counts maximal alphanumeric runs plus each
//! standalone punctuation glyph; whitespace is free.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Failed,
    Success,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    /// 1-based line number.
    pub number: usize,
    pub text: String,
}

/// One complete CI run log. Line numbers are `1..=len`, contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLog {
    pub run_id: String,
    pub task_key: String,
    pub outcome: Outcome,
    lines: Vec<LogLine>,
}

impl RawLog {
    /// Splits `text` on `\n`. A single trailing newline does not produce an
    /// extra empty line; `\r` is kept as part of the line content.
    pub fn from_text(
        run_id: impl Into<String>,
        task_key: impl Into<String>,
        outcome: Outcome,
        text: &str,
    ) -> Self {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let lines = if text.is_empty() {
            Vec::new()
        } else {
            body.split('\n')
                .enumerate()
                .map(|(i, t)| LogLine {
                    number: i + 1,
                    text: t.to_string(),
                })
                .collect()
        };
        RawLog {
            run_id: run_id.into(),
            task_key: task_key.into(),
            outcome,
            lines,
        }
    }

    pub fn from_lines<I, S>(
        run_id: impl Into<String>,
        task_key: impl Into<String>,
        outcome: Outcome,
        lines: I,
    ) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let lines = lines
            .into_iter()
            .enumerate()
            .map(|(i, t)| LogLine {
                number: i + 1,
                text: t.into(),
            })
            .collect();
        RawLog {
            run_id: run_id.into(),
            task_key: task_key.into(),
            outcome,
            lines,
        }
    }

    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Text of the 1-based line `number`, if it exists.
    pub fn line(&self, number: usize) -> Option<&str> {
        number
            .checked_sub(1)
            .and_then(|i| self.lines.get(i))
            .map(|l| l.text.as_str())
    }

    /// Joins the lines back with `\n` (no trailing newline).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.lines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&l.text);
        }
        out
    }
}

/// Reads a log file. Invalid UTF-8 is replaced with U+FFFD rather than
/// rejected so that line numbering stays faithful to the source.
pub fn load_log(
    path: &Path,
    run_id: impl Into<String>,
    task_key: impl Into<String>,
    outcome: Outcome,
) -> Result<RawLog, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    Ok(RawLog::from_text(run_id, task_key, outcome, &text))
}

/// Token counting contract used for all budget decisions.
///
/// Implementations must return 0 for the empty string, be deterministic, and
/// satisfy `count(a + b) <= count(a) + count(b) + 1`.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

impl fmt::Debug for dyn Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tokenizer({})", self.name())
    }
}

/// Default tokenizer: alphanumeric runs and single punctuation glyphs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegexTokenizer;

impl Tokenizer for RegexTokenizer {
    fn name(&self) -> &str {
        "alnum-punct"
    }

    fn count(&self, text: &str) -> usize {
        split_tokens(text).count()
    }
}

pub fn count_tokens(text: &str, tok: &dyn Tokenizer) -> usize {
    tok.count(text)
}

/// Iterates the default tokenizer's tokens as slices of `text`.
pub fn split_tokens(text: &str) -> TokenIter<'_> {
    TokenIter { text, pos: 0 }
}

pub struct TokenIter<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Iterator for TokenIter<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let rest = &self.text[self.pos..];
        let mut chars = rest.char_indices();
        let (start, first) = loop {
            let (i, c) = chars.next()?;
            if !c.is_whitespace() {
                break (i, c);
            }
        };
        let mut end = start + first.len_utf8();
        if first.is_alphanumeric() {
            for (i, c) in chars {
                if !c.is_alphanumeric() {
                    break;
                }
                end = i + c.len_utf8();
            }
        }
        let tok = &rest[start..end];
        self.pos += end;
        Some(tok)
    }
}

/// Keeps the longest prefix of `text` whose token count is at most `limit`.
pub(crate) fn truncate_to_tokens(text: &str, limit: usize) -> &str {
    let mut end = 0;
    for (n, tok) in split_tokens(text).enumerate() {
        if n >= limit {
            break;
        }
        end = tok.as_ptr() as usize - text.as_ptr() as usize + tok.len();
    }
    &text[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn three_line_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"a\nb\nc").unwrap();
        let log = load_log(f.path(), "r1", "t", Outcome::Failed).unwrap();
        let nums: Vec<_> = log.lines().iter().map(|l| l.number).collect();
        assert_eq!(nums, vec![1, 2, 3]);
        assert_eq!(log.line(2), Some("b"));
    }

    #[test]
    fn empty_file_is_zero_lines() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let log = load_log(f.path(), "r1", "t", Outcome::Success).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn invalid_utf8_is_replaced_not_dropped() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"first\nbad \xff\xfe bytes\nthird\n").unwrap();
        let log = load_log(f.path(), "r1", "t", Outcome::Failed).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.line(2).unwrap().contains('\u{FFFD}'));
        assert_eq!(log.line(3), Some("third"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_log(Path::new("/nonexistent/x.log"), "r", "t", Outcome::Failed);
        assert!(matches!(err, Err(IngestError::Io { .. })));
    }

    #[test]
    fn very_long_line_kept_whole() {
        let long = "x".repeat(40 * 1024);
        let log = RawLog::from_text("r", "t", Outcome::Failed, &format!("a\n{long}\nb"));
        assert_eq!(log.len(), 3);
        assert_eq!(log.line(2).unwrap().len(), long.len());
    }

    #[test]
    fn default_token_counts() {
        let t = RegexTokenizer;
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("error: build failed"), 4);
        assert_eq!(t.count("   "), 0);
        assert_eq!(t.count("--- FAIL: TestFoo (0.01s)"), 11);
        let toks: Vec<_> = split_tokens("a.b_c").collect();
        assert_eq!(toks, vec!["a", ".", "b", "_", "c"]);
    }

    #[test]
    fn truncate_keeps_prefix() {
        assert_eq!(truncate_to_tokens("one two three", 2), "one two");
        assert_eq!(truncate_to_tokens("one two", 5), "one two");
        assert_eq!(truncate_to_tokens("one", 0), "");
    }

    proptest! {
        #[test]
        fn subadditive(a in "\\PC{0,40}", b in "\\PC{0,40}") {
            let t = RegexTokenizer;
            let joined = format!("{a}{b}");
            prop_assert!(t.count(&joined) <= t.count(&a) + t.count(&b) + 1);
        }

        #[test]
        fn trailing_whitespace_invariant(a in "\\PC{0,40}", ws in "[ \\t]{0,5}") {
            let t = RegexTokenizer;
            prop_assert_eq!(t.count(&a), t.count(&format!("{a}{ws}")));
        }

        #[test]
        fn text_round_trip(lines in proptest::collection::vec("[^\\n]{0,20}", 0..20)) {
            let text = lines.join("\n");
            let log = RawLog::from_text("r", "t", Outcome::Failed, &text);
            if text.is_empty() {
                prop_assert!(log.is_empty());
            } else {
                prop_assert_eq!(log.to_text(), text.strip_suffix('\n').unwrap_or(&text));
                for (i, l) in log.lines().iter().enumerate() {
                    prop_assert_eq!(l.number, i + 1);
                }
            }
        }
    }
}
