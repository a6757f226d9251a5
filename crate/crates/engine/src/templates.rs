//! Versioned prompt templates.
//!
//! Every prompt the engine sends is rendered from a named template with
//! `{placeholder}` slots. The built-in set is compiled into the binary;
//! any template can be overridden by a same-named `.txt` file in a template
//! directory. Run manifests record a content hash over the active set so a
//! run can be tied to the exact prompt text it used.

use std::collections::BTreeMap;
use std::path::Path;

const BUILTIN: &[(&str, &str)] = &[
    ("query", include_str!("../templates/query.txt")),
    ("describe", include_str!("../templates/describe.txt")),
    ("select", include_str!("../templates/select.txt")),
    (
        "select_ranked",
        include_str!("../templates/select_ranked.txt"),
    ),
    (
        "select_retry",
        include_str!("../templates/select_retry.txt"),
    ),
    ("rewrite", include_str!("../templates/rewrite.txt")),
    (
        "rewrite_fallback",
        include_str!("../templates/rewrite_fallback.txt"),
    ),
    ("judge", include_str!("../templates/judge.txt")),
    (
        "judge_evidence",
        include_str!("../templates/judge_evidence.txt"),
    ),
    (
        "judge_explain",
        include_str!("../templates/judge_explain.txt"),
    ),
    ("rationale", include_str!("../templates/rationale.txt")),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Builtin set with every `<name>.txt` found in `dir` overriding its
    /// builtin counterpart. Files that do not match a known template name
    /// are added as new templates.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::builtin();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path)?;
            set.templates.insert(name.to_string(), body);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    /// Renders `name`, replacing each `{key}` slot with its value.
    ///
    /// Substitution is single-pass: placeholder-like text inside a value is
    /// inserted verbatim, never re-expanded. Unknown slots are left as-is.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let template = self
            .templates
            .get(name)
            .unwrap_or_else(|| panic!("unknown template {name:?}"));
        render_str(template, vars)
    }

    /// SHA-256 over the sorted (name, body) list; recorded in run manifests.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for (name, body) in &self.templates {
            buf.extend_from_slice(name.as_bytes());
            buf.push(0);
            buf.extend_from_slice(body.as_bytes());
            buf.push(0);
        }
        crate::util::content_hash(&buf)
    }
}

fn render_str(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        match tail.find('}') {
            Some(close) => {
                let key = &tail[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, value)) => out.push_str(value),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}
