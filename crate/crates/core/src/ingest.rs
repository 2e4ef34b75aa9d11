//! Normalization of tree sources into the canonical edge list, and the
//! validate-then-store ingest step.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::store::{EdgeStore, StoreError};
use crate::tree::{DecisionTree, MetaRole, NodeKey, TransitionEdge, TreeDocument, TreeError};
use crate::validate::{validate, ValidationReport};

/// Column order of the tabular format.
pub const CSV_COLUMNS: [&str; 7] = [
    "transition_key",
    "node_from",
    "node_to",
    "question",
    "answer",
    "extra_context",
    "flags",
];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed {source_name}: {reason}")]
    MalformedSource { source_name: String, reason: String },
    #[error("duplicate transition key '{0}'")]
    DuplicateKey(String),
    #[error("{source_name} record {record}: missing required field '{field}'")]
    MissingField {
        source_name: String,
        record: usize,
        field: &'static str,
    },
    #[error("no normalizer registered for format '{0}'")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Declared source format. Never inferred from content.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SourceFormat {
    CanonicalJson,
    TabularCsv,
    /// A format served by a registered custom normalizer.
    Other(String),
}

impl SourceFormat {
    pub fn as_str(&self) -> &str {
        match self {
            SourceFormat::CanonicalJson => "canonical-json",
            SourceFormat::TabularCsv => "tabular-csv",
            SourceFormat::Other(name) => name,
        }
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" | "canonical-json" => Ok(SourceFormat::CanonicalJson),
            "csv" | "tabular-csv" => Ok(SourceFormat::TabularCsv),
            "" => Err("empty source format".into()),
            other => Ok(SourceFormat::Other(other.to_string())),
        }
    }
}

impl From<SourceFormat> for String {
    fn from(f: SourceFormat) -> String {
        f.as_str().to_string()
    }
}

impl TryFrom<String> for SourceFormat {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub format: SourceFormat,
    pub payload: Vec<u8>,
    pub source_name: String,
}

impl SourceDocument {
    pub fn new(format: SourceFormat, source_name: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            format,
            payload: payload.into(),
            source_name: source_name.into(),
        }
    }

    fn text(&self) -> Result<&str, IngestError> {
        std::str::from_utf8(&self.payload).map_err(|e| self.malformed(e))
    }

    fn malformed(&self, reason: impl fmt::Display) -> IngestError {
        IngestError::MalformedSource {
            source_name: self.source_name.clone(),
            reason: reason.to_string(),
        }
    }
}

/// Overrides applied on top of whatever the source declares.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    #[serde(default)]
    pub tree_id: Option<String>,
    /// Entry node. Tabular sources default to the first record's source.
    #[serde(default)]
    pub entry: Option<String>,
}

/// A normalized tree plus non-blocking findings.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub tree: DecisionTree,
    pub warnings: Vec<String>,
}

pub trait Normalizer: Send + Sync {
    fn normalize(&self, source: &SourceDocument, opts: &NormalizeOptions) -> Result<Normalized, IngestError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct JsonNormalizer;

#[derive(Debug, Default, Clone, Copy)]
pub struct CsvNormalizer;

fn tree_error(source: &SourceDocument, e: TreeError) -> IngestError {
    match e {
        TreeError::DuplicateKey(k) => IngestError::DuplicateKey(k),
        other => source.malformed(other),
    }
}

fn resolve_tree_id(source: &SourceDocument, declared: Option<&str>, opts: &NormalizeOptions) -> String {
    if let Some(id) = opts.tree_id.as_deref().or(declared).filter(|s| !s.is_empty()) {
        return id.to_string();
    }
    let name = source.source_name.rsplit(['/', '\\']).next().unwrap_or_default();
    let stem = name.split('.').next().unwrap_or_default();
    if stem.is_empty() {
        "tree".to_string()
    } else {
        stem.to_string()
    }
}

fn resolve_entry(source: &SourceDocument, key: &str) -> Result<NodeKey, IngestError> {
    NodeKey::new(key.trim()).map_err(|e| source.malformed(e))
}

impl Normalizer for JsonNormalizer {
    fn normalize(&self, source: &SourceDocument, opts: &NormalizeOptions) -> Result<Normalized, IngestError> {
        let text = source.text()?;
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| source.malformed(e))?;
        let serde_json::Value::Object(obj) = &value else {
            return Err(source.malformed("top level must be an object"));
        };
        let edges = obj.get("edges").and_then(|e| e.as_array()).ok_or(IngestError::MissingField {
            source_name: source.source_name.clone(),
            record: 0,
            field: "edges",
        })?;
        for (i, edge) in edges.iter().enumerate() {
            for field in ["transition_key", "node_from", "node_to"] {
                let present = edge.get(field).and_then(|v| v.as_str()).is_some_and(|s| !s.trim().is_empty());
                if !present {
                    return Err(IngestError::MissingField {
                        source_name: source.source_name.clone(),
                        record: i + 1,
                        field,
                    });
                }
            }
        }
        // Entry and tree id may come from the options instead of the document.
        let mut value = value;
        let obj = value.as_object_mut().expect("checked above");
        let tree_id = resolve_tree_id(source, obj.get("tree_id").and_then(|v| v.as_str()), opts);
        obj.insert("tree_id".into(), tree_id.into());
        if let Some(entry) = &opts.entry {
            obj.insert("entry".into(), entry.trim().into());
        }
        if !obj.contains_key("entry") {
            let first = edges_first_source(obj).ok_or(IngestError::MissingField {
                source_name: source.source_name.clone(),
                record: 0,
                field: "entry",
            })?;
            obj.insert("entry".into(), first.into());
        }
        let doc: TreeDocument = serde_json::from_value(value).map_err(|e| source.malformed(e))?;
        let tree = DecisionTree::new(doc.tree_id, 0, doc.entry, doc.edges, doc.node_meta)
            .map_err(|e| tree_error(source, e))?;
        let warnings = lint(&tree);
        Ok(Normalized { tree, warnings })
    }
}

fn edges_first_source(obj: &serde_json::Map<String, serde_json::Value>) -> Option<String> {
    obj.get("edges")?
        .as_array()?
        .first()?
        .get("node_from")?
        .as_str()
        .map(|s| s.trim().to_string())
}

impl Normalizer for CsvNormalizer {
    fn normalize(&self, source: &SourceDocument, opts: &NormalizeOptions) -> Result<Normalized, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(source.payload.as_slice());
        let mut edges = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| source.malformed(e))?;
            if i == 0 && record.iter().map(str::trim).eq(CSV_COLUMNS.iter().copied()) {
                continue;
            }
            if record.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            if record.len() > CSV_COLUMNS.len() {
                return Err(source.malformed(format!(
                    "record {} has {} fields, expected at most {}",
                    i + 1,
                    record.len(),
                    CSV_COLUMNS.len()
                )));
            }
            let field = |n: usize| record.get(n).unwrap_or_default();
            let required = |n: usize| -> Result<&str, IngestError> {
                let v = field(n).trim();
                if v.is_empty() {
                    Err(IngestError::MissingField {
                        source_name: source.source_name.clone(),
                        record: i + 1,
                        field: CSV_COLUMNS[n],
                    })
                } else {
                    Ok(v)
                }
            };
            let transition_key = required(0)?.to_string();
            let node_from = resolve_entry(source, required(1)?)?;
            let node_to = resolve_entry(source, required(2)?)?;
            let flags_cell = field(6).trim();
            let flags: BTreeMap<String, serde_json::Value> = if flags_cell.is_empty() {
                BTreeMap::new()
            } else {
                serde_json::from_str(flags_cell)
                    .map_err(|e| source.malformed(format!("record {} flags: {e}", i + 1)))?
            };
            edges.push(TransitionEdge {
                transition_key,
                node_from,
                node_to,
                question: field(3).to_string(),
                answer: field(4).to_string(),
                extra_context: field(5).to_string(),
                flags,
            });
        }
        let entry = match &opts.entry {
            Some(e) => resolve_entry(source, e)?,
            None => edges
                .first()
                .map(|e| e.node_from.clone())
                .ok_or(IngestError::MissingField {
                    source_name: source.source_name.clone(),
                    record: 0,
                    field: "entry",
                })?,
        };
        let tree_id = resolve_tree_id(source, None, opts);
        let tree = DecisionTree::new(tree_id, 0, entry, edges, BTreeMap::new())
            .map_err(|e| tree_error(source, e))?;
        let warnings = lint(&tree);
        Ok(Normalized { tree, warnings })
    }
}

/// Serializes the edge list in the tabular format, header first.
/// Node metadata has no column and is dropped.
pub fn to_csv(tree: &DecisionTree) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(CSV_COLUMNS).expect("in-memory write");
    for e in tree.edges() {
        let flags = if e.flags.is_empty() {
            String::new()
        } else {
            serde_json::to_string(&e.flags).expect("flags serialize")
        };
        writer
            .write_record([
                e.transition_key.as_str(),
                e.node_from.as_str(),
                e.node_to.as_str(),
                &e.question,
                &e.answer,
                &e.extra_context,
                &flags,
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Non-blocking findings about a normalized tree.
pub fn lint(tree: &DecisionTree) -> Vec<String> {
    let mut out = Vec::new();
    if tree.node_meta().is_empty() {
        out.push("no node declarations: every edge endpoint is treated as defined".to_string());
    }
    for e in tree.edges() {
        if e.question.trim().is_empty() && tree.meta(&e.node_from).question.trim().is_empty() {
            out.push(format!("edge '{}' has empty question text", e.transition_key));
        }
    }
    let node_names: BTreeSet<&str> = tree.nodes().iter().map(NodeKey::as_str).collect();
    for e in tree.edges() {
        if node_names.contains(e.transition_key.as_str()) {
            out.push(format!(
                "transition key '{}' equals a node key; a stay verdict at that node is indistinguishable from this transition",
                e.transition_key
            ));
        }
    }
    for (key, meta) in tree.node_meta() {
        if !tree.contains(key.as_str()) {
            out.push(format!("metadata for '{key}', which no edge or entry mentions"));
        } else if meta.role == Some(MetaRole::TerminalHint) && !tree.is_terminal(key).unwrap_or(true) {
            out.push(format!("'{key}' is hinted terminal but has outgoing edges"));
        }
    }
    out
}

/// Normalizers by format name. The two built-in formats are always present.
#[derive(Clone)]
pub struct NormalizerRegistry {
    normalizers: HashMap<String, Arc<dyn Normalizer>>,
}

impl fmt::Debug for NormalizerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&String> = self.normalizers.keys().collect();
        names.sort();
        f.debug_struct("NormalizerRegistry").field("formats", &names).finish()
    }
}

impl Default for NormalizerRegistry {
    fn default() -> Self {
        let mut r = Self {
            normalizers: HashMap::new(),
        };
        r.register(SourceFormat::CanonicalJson, Arc::new(JsonNormalizer));
        r.register(SourceFormat::TabularCsv, Arc::new(CsvNormalizer));
        r
    }
}

impl NormalizerRegistry {
    pub fn register(&mut self, format: SourceFormat, normalizer: Arc<dyn Normalizer>) {
        self.normalizers.insert(format.as_str().to_string(), normalizer);
    }

    pub fn normalize(&self, source: &SourceDocument, opts: &NormalizeOptions) -> Result<Normalized, IngestError> {
        let n = self
            .normalizers
            .get(source.format.as_str())
            .ok_or_else(|| IngestError::UnsupportedFormat(source.format.to_string()))?;
        n.normalize(source, opts)
    }
}

pub fn normalize(source: &SourceDocument, opts: &NormalizeOptions) -> Result<DecisionTree, IngestError> {
    NormalizerRegistry::default().normalize(source, opts).map(|n| n.tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub tree_id: String,
    /// Version written, or the version the tree would have taken when rejected.
    pub version: u64,
    pub edge_count: usize,
    pub warnings: Vec<String>,
    pub validation: ValidationReport,
    /// Whether a new version was written.
    pub stored: bool,
}

/// Normalizes, validates and, only when the tree is valid, stores it as the
/// next version of its tree id.
pub fn ingest(
    source: &SourceDocument,
    opts: &NormalizeOptions,
    registry: &NormalizerRegistry,
    store: &EdgeStore,
) -> Result<IngestReport, IngestError> {
    let Normalized { tree, warnings } = registry.normalize(source, opts)?;
    let validation = validate(&tree);
    let tree_id = tree.tree_id().to_string();
    let edge_count = tree.edges().len();
    if !validation.is_valid {
        tracing::info!(tree_id, findings = validation.findings().len(), "ingest rejected");
        return Ok(IngestReport {
            version: store.latest_version(&tree_id).unwrap_or(0) + 1,
            tree_id,
            edge_count,
            warnings,
            validation,
            stored: false,
        });
    }
    let handle = store.put_tree(tree)?;
    tracing::info!(tree_id, version = handle.version(), edge_count, "ingested");
    Ok(IngestReport {
        tree_id,
        version: handle.version(),
        edge_count,
        warnings,
        validation,
        stored: true,
    })
}
