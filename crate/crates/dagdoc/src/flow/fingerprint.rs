//! Content fingerprinting for flow sources.
//!
//! Two sources that differ only in comments, blank lines, trailing
//! whitespace, or line-ending style get the same fingerprint.

use sha2::{Digest, Sha256};

/// SHA-256 of the normalized flow source, as 64 lowercase hex chars.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowFingerprint(String);

impl FlowFingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for FlowFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical text form of a flow source.
///
/// Line endings become `\n`, comments are stripped (a `#` inside a
/// string is kept), trailing whitespace is trimmed per line, and empty
/// lines are dropped. Every remaining line ends with `\n`.
pub fn normalize_source(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    for raw_line in source.replace("\r\n", "\n").replace('\r', "\n").split('\n') {
        let stripped = strip_comment(raw_line);
        let trimmed = stripped.trim_end();
        if !trimmed.is_empty() {
            out.push_str(trimmed);
            out.push('\n');
        }
    }
    out
}

/// Cuts the line at the first `#` that sits outside a double-quoted
/// string. Escape handling matches the parser (`\"` and `\\`).
fn strip_comment(line: &str) -> &str {
    let mut in_string = false;
    let mut iter = line.char_indices();
    while let Some((i, c)) = iter.next() {
        match c {
            '"' => in_string = !in_string,
            '\\' if in_string => {
                iter.next();
            }
            '#' if !in_string => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Fingerprints a flow source; see [`normalize_source`].
pub fn flow_fingerprint(source: &str) -> FlowFingerprint {
    let digest = Sha256::digest(normalize_source(source).as_bytes());
    FlowFingerprint(hex::encode(digest))
}
