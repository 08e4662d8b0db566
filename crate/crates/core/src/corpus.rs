//! Prompt templates, test inputs and test pools.
//!
//! A pool file is UTF-8 JSON lines, one record per line:
//!
//! ```text
//! {"id": "t1", "variables": {"question": "2 + 2"}, "expected": "The answer is 4"}
//! ```
//!
//! `id` and `expected` are optional. Records without an id get the 1-based
//! line number as their id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed pool record: {message}")]
    MalformedRecord { path: String, line: usize, message: String },
    #[error("duplicate test id {0:?}")]
    DuplicateId(String),
    #[error("template error at byte {offset}: {message}")]
    Template { offset: usize, message: String },
    #[error("missing placeholder {0}")]
    MissingPlaceholder(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A prompt template with `{name}` placeholders. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    segments: Vec<Segment>,
    placeholders: Vec<String>,
}

/// Result of rendering a template. `unused_variables` lists input variables
/// that no placeholder consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub unused_variables: Vec<String>,
}

impl Rendered {
    pub fn warning_count(&self) -> usize {
        self.unused_variables.len()
    }
}

fn is_placeholder_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut seen = BTreeSet::new();
        let mut placeholders = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = text[i + 1..].find('}').ok_or_else(|| CorpusError::Template {
                        offset: i,
                        message: "unclosed '{'".into(),
                    })?;
                    let name = &text[i + 1..i + 1 + close];
                    if !is_placeholder_name(name) {
                        return Err(CorpusError::Template {
                            offset: i,
                            message: format!("invalid placeholder name {name:?} (use '{{{{' for a literal brace)"),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    if seen.insert(name.to_string()) {
                        placeholders.push(name.to_string());
                    }
                    segments.push(Segment::Placeholder(name.to_string()));
                    i += close + 2;
                }
                b'}' => {
                    return Err(CorpusError::Template {
                        offset: i,
                        message: "unmatched '}' (use '}}' for a literal brace)".into(),
                    })
                }
                _ => {
                    // Advance by a whole UTF-8 scalar.
                    let ch = text[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            text: text.to_string(),
            segments,
            placeholders,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Placeholder names in order of first appearance, deduplicated.
    pub fn placeholders(&self) -> &[String] {
        &self.placeholders
    }

    pub fn render(&self, input: &TestInput) -> Result<Rendered, CorpusError> {
        let mut text = String::with_capacity(self.text.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(s) => text.push_str(s),
                Segment::Placeholder(name) => {
                    let value = input
                        .variables
                        .get(name)
                        .ok_or_else(|| CorpusError::MissingPlaceholder(name.clone()))?;
                    text.push_str(value);
                }
            }
        }
        let unused_variables = input
            .variables
            .keys()
            .filter(|k| !self.placeholders.contains(k))
            .cloned()
            .collect();
        Ok(Rendered { text, unused_variables })
    }
}

/// One binding of a template's placeholders plus the expected answer.
/// An empty `expected` means the input is unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInput {
    pub id: String,
    pub variables: BTreeMap<String, String>,
    #[serde(default)]
    pub expected: String,
}

impl TestInput {
    pub fn new(id: impl Into<String>, variables: BTreeMap<String, String>, expected: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            variables,
            expected: expected.into(),
        }
    }

    /// Single-variable input under the key `input`.
    pub fn with_text(id: impl Into<String>, text: impl Into<String>, expected: impl Into<String>) -> Self {
        let mut variables = BTreeMap::new();
        variables.insert("input".to_string(), text.into());
        Self::new(id, variables, expected)
    }

    pub fn is_labeled(&self) -> bool {
        !self.expected.is_empty()
    }

    pub fn canonical_text(&self) -> String {
        canonical_text(self)
    }
}

/// Variable values in ascending key order joined by `\n`. The expected answer
/// is not part of it. Keys are not encoded, so two maps with different keys
/// but the same values in the same order collide.
pub fn canonical_text(input: &TestInput) -> String {
    let mut out = String::new();
    for (i, value) in input.variables.values().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(value);
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRecord {
    id: Option<String>,
    variables: BTreeMap<String, String>,
    #[serde(default)]
    expected: Option<String>,
}

/// Ordered collection of test inputs with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestPool {
    inputs: Vec<TestInput>,
    source_path: String,
    index: HashMap<String, usize>,
}

impl TestPool {
    pub fn new(inputs: Vec<TestInput>, source_path: impl Into<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            if index.insert(input.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(input.id.clone()));
            }
        }
        Ok(Self {
            inputs,
            source_path: source_path.into(),
            index,
        })
    }

    pub fn inputs(&self) -> &[TestInput] {
        &self.inputs
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TestInput> {
        self.index.get(id).map(|&i| &self.inputs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|t| t.id.as_str())
    }

    /// Writes the pool in the line-delimited pool format with every field explicit.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for input in &self.inputs {
            serde_json::to_writer(&mut out, input)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))
    }
}

pub fn parse_pool<R: BufRead>(reader: R, source_path: &str) -> Result<TestPool, CorpusError> {
    let mut inputs = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: source_path.to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoolRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: source_path.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = record.id.unwrap_or_else(|| line_no.to_string());
        if seen.insert(id.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateId(id));
        }
        inputs.push(TestInput {
            id,
            variables: record.variables,
            expected: record.expected.unwrap_or_default(),
        });
    }
    TestPool::new(inputs, source_path)
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<TestPool, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    parse_pool(BufReader::new(file), &path.display().to_string())
}
