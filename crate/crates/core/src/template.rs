//! Double-brace prompt templates and structured-reply extraction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {name}: unbalanced or malformed placeholder near byte {offset}")]
    Malformed { name: String, offset: usize },
    #[error("template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)*)\s*\}\}").expect("valid regex")
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    source: String,
}

impl PromptTemplate {
    pub fn parse(name: impl Into<String>, source: impl Into<String>) -> Result<Self, TemplateError> {
        let name = name.into();
        let source = source.into();
        // Anything left after removing well-formed placeholders must not
        // contain a stray opener.
        let stripped = placeholder_re().replace_all(&source, "");
        if let Some(offset) = stripped.find("{{") {
            return Err(TemplateError::Malformed { name, offset });
        }
        Ok(Self { name, source })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in placeholder_re().captures_iter(&self.source) {
            let name = c[1].to_string();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Single pass: values containing braces are never re-expanded.
    pub fn render(&self, ctx: &TemplateContext) -> String {
        placeholder_re()
            .replace_all(&self.source, |c: &Captures<'_>| ctx.lookup(&c[1]))
            .into_owned()
    }
}

/// Values for one render. `member_context.X` resolves against the member
/// map; a bare `member_context` renders the whole map as a list. Unknown
/// names fall back to the member map, then to empty text.
#[derive(Debug, Clone, Default)]
pub struct TemplateContext {
    values: BTreeMap<String, String>,
    member: BTreeMap<String, String>,
}

impl TemplateContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.values.insert(key.into(), value.into());
        self
    }

    pub fn with_member_context(mut self, ctx: &BTreeMap<String, Value>) -> Self {
        self.member = ctx
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect();
        self
    }

    fn lookup(&self, name: &str) -> String {
        if let Some(v) = self.values.get(name) {
            return v.clone();
        }
        if name == "member_context" {
            if self.member.is_empty() {
                return "- (none provided)".to_string();
            }
            return self
                .member
                .iter()
                .map(|(k, v)| format!("- {k}: {v}"))
                .collect::<Vec<_>>()
                .join("\n");
        }
        let key = name.strip_prefix("member_context.").unwrap_or(name);
        self.member.get(key).cloned().unwrap_or_default()
    }
}

/// Every template the agent and the baseline use.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub evaluator: PromptTemplate,
    pub corrective: PromptTemplate,
    pub generation_question: PromptTemplate,
    pub generation_guidance: PromptTemplate,
    pub generation_terminal: PromptTemplate,
    pub baseline: PromptTemplate,
}

const FILES: [(&str, &str); 6] = [
    ("evaluator", include_str!("../templates/evaluator.txt")),
    ("corrective", include_str!("../templates/corrective.txt")),
    ("generation_question", include_str!("../templates/generation_question.txt")),
    ("generation_guidance", include_str!("../templates/generation_guidance.txt")),
    ("generation_terminal", include_str!("../templates/generation_terminal.txt")),
    ("baseline", include_str!("../templates/baseline.txt")),
];

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_sources(|_, builtin| Ok(builtin.to_string())).expect("built-in templates parse")
    }
}

impl PromptSet {
    /// Built-in templates, each replaced by `{name}.txt` from `dir` when present.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Self::from_sources(|name, builtin| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    name: name.to_string(),
                    source,
                })
            } else {
                Ok(builtin.to_string())
            }
        })
    }

    fn from_sources(
        mut read: impl FnMut(&str, &str) -> Result<String, TemplateError>,
    ) -> Result<Self, TemplateError> {
        let mut parsed = Vec::with_capacity(FILES.len());
        for (name, builtin) in FILES {
            parsed.push(PromptTemplate::parse(name, read(name, builtin)?)?);
        }
        let mut it = parsed.into_iter();
        let mut next = || it.next().expect("one template per file");
        Ok(Self {
            evaluator: next(),
            corrective: next(),
            generation_question: next(),
            generation_guidance: next(),
            generation_terminal: next(),
            baseline: next(),
        })
    }
}

/// Finds the first JSON object in a model reply: the whole text, a fenced
/// block, or the first `{` from which a complete object parses.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let trimmed = raw.trim();
    if let Ok(Value::Object(map)) = serde_json::from_str(trimmed) {
        return Some(map);
    }
    for (start, _) in trimmed.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}
