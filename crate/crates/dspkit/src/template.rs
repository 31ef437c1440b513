//! Prompt templates: render examples (plus demonstrations) into prompts and
//! extract labeled fields back out of completions.
//!
//! A template is an instruction plus an ordered list of field specs. Field
//! order is both the render order and the extraction order. Extraction is
//! label-delimited, with the first expected label optional because frozen
//! LMs usually do not repeat a label the prompt already printed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DspError, Result};
use crate::example::{Example, Value};

/// One field of a template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSpec {
    /// Example field this spec reads and writes.
    pub name: String,
    /// Literal prefix printed before the value, e.g. `Answer:`.
    pub label: String,
    /// Human description; not rendered into prompts.
    #[serde(default)]
    pub description: String,
    /// Rendered but never extracted (inputs like context and question).
    #[serde(default)]
    pub input_only: bool,
}

fn default_separator() -> String {
    "\n\n".to_string()
}

/// An instruction plus ordered field specs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    /// Registry name.
    pub name: String,
    /// Task instruction rendered at the top of every prompt.
    pub instruction: String,
    /// Ordered field specs; order is render order and extraction order.
    pub fields: Vec<FieldSpec>,
    /// Separator between the instruction, demo blocks, and the input block.
    #[serde(default = "default_separator")]
    pub demo_separator: String,
}

/// A rendered prompt plus the extraction offset that goes with it.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// The prompt text.
    pub text: String,
    /// How many extractable fields the input block rendered with values.
    pub already_filled: usize,
}

impl Template {
    /// Checks the template invariants: non-empty unique labels and at least
    /// one extractable field.
    pub fn validate(&self) -> Result<()> {
        if !self.fields.iter().any(|f| !f.input_only) {
            return Err(DspError::Render(format!(
                "template {}: no extractable field",
                self.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for field in &self.fields {
            if field.label.is_empty() {
                return Err(DspError::Render(format!(
                    "template {}: field {} has an empty label",
                    self.name, field.name
                )));
            }
            if !seen.insert(field.label.as_str()) {
                return Err(DspError::Render(format!(
                    "template {}: duplicate label {:?}",
                    self.name, field.label
                )));
            }
        }
        Ok(())
    }

    /// Parses a template from its declarative JSON form.
    pub fn from_json(raw: &str) -> Result<Template> {
        let t: Template = serde_json::from_str(raw)
            .map_err(|e| DspError::parse("<template json>", e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    /// Loads a template file.
    pub fn from_path(path: &Path) -> Result<Template> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| DspError::io(path.display().to_string(), e))?;
        let t: Template = serde_json::from_str(&raw)
            .map_err(|e| DspError::parse(path.display().to_string(), e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    /// Field specs that are extracted from completions, in order.
    pub fn extractable(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| !f.input_only)
    }

    /// The label of the first field; used as a default stop sequence so the
    /// LM does not start generating a fresh demo block.
    pub fn first_label(&self) -> &str {
        &self.fields[0].label
    }

    /// Renders the prompt for `x`. See [`Template::render_full`].
    pub fn render(&self, x: &Example) -> Result<String> {
        Ok(self.render_full(x)?.text)
    }

    /// Renders instruction, one block per demo in `x.demos`, then the input
    /// block. The input block stops immediately after the label of the first
    /// unfilled extractable field, where the LM continues. Absent input-only
    /// fields are skipped. Demos render the fields they carry; a demo with
    /// none of the template's fields is a render error.
    pub fn render_full(&self, x: &Example) -> Result<Rendered> {
        let mut parts: Vec<String> = Vec::new();
        if !self.instruction.is_empty() {
            parts.push(self.instruction.clone());
        }
        for (i, demo) in x.demos().iter().enumerate() {
            parts.push(self.render_demo(demo, i)?);
        }
        let (input_block, already_filled) = self.render_input(x)?;
        parts.push(input_block);
        Ok(Rendered {
            text: parts.join(&self.demo_separator),
            already_filled,
        })
    }

    fn render_demo(&self, demo: &Example, index: usize) -> Result<String> {
        let mut lines = Vec::new();
        for field in &self.fields {
            if let Some(value) = demo.get(&field.name) {
                lines.push(field_line(field, value)?);
            }
        }
        if lines.is_empty() {
            let first = self
                .extractable()
                .next()
                .map(|f| f.name.clone())
                .unwrap_or_default();
            return Err(DspError::Render(format!(
                "demo {index} fills none of template {}'s fields (missing {first})",
                self.name
            )));
        }
        Ok(lines.join("\n"))
    }

    fn render_input(&self, x: &Example) -> Result<(String, usize)> {
        let mut lines = Vec::new();
        let mut already_filled = 0;
        for field in &self.fields {
            match x.get(&field.name) {
                Some(value) => {
                    lines.push(field_line(field, value)?);
                    if !field.input_only {
                        already_filled += 1;
                    }
                }
                None if field.input_only => continue,
                None => {
                    lines.push(field.label.clone());
                    break;
                }
            }
        }
        Ok((lines.join("\n"), already_filled))
    }

    /// Extracts labeled field values from a completion. `already_filled` is
    /// the number of extractable fields the prompt rendered with values; the
    /// remaining fields are expected, in order. The value of field `i` is the
    /// text between label `i` (or the start, when the LM does not repeat the
    /// first label) and the next expected label that occurs (or the end),
    /// trimmed. Fields whose labels never appear are absent from the map.
    pub fn extract(&self, completion: &str, already_filled: usize) -> BTreeMap<String, String> {
        let expected: Vec<&FieldSpec> = self.extractable().skip(already_filled).collect();
        let mut out = BTreeMap::new();
        let Some(first) = expected.first() else {
            return out;
        };

        // (field, value start offset) of the field currently being read.
        let mut open: (&FieldSpec, usize) = match completion.find(&first.label) {
            Some(pos) => (first, pos + first.label.len()),
            None => (first, 0),
        };

        for field in expected.iter().skip(1) {
            let search_from = open.1.min(completion.len());
            if let Some(rel) = completion[search_from..].find(&field.label) {
                let pos = search_from + rel;
                out.insert(
                    open.0.name.clone(),
                    completion[open.1..pos].trim().to_string(),
                );
                open = (field, pos + field.label.len());
            }
        }
        let tail_start = open.1.min(completion.len());
        out.insert(
            open.0.name.clone(),
            completion[tail_start..].trim().to_string(),
        );
        out
    }
}

/// Renders one `label value` line; the label stands alone when the value is
/// empty text or an empty list.
fn field_line(field: &FieldSpec, value: &Value) -> Result<String> {
    let rendered = render_value(value).ok_or_else(|| {
        DspError::Render(format!(
            "field {} holds nested examples and cannot be rendered as text",
            field.name
        ))
    })?;
    if rendered.is_empty() {
        Ok(field.label.clone())
    } else {
        Ok(format!("{} {}", field.label, rendered))
    }
}

fn render_value(value: &Value) -> Option<String> {
    match value {
        Value::Text(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::List(items) => Some(
            items
                .iter()
                .enumerate()
                .map(|(i, item)| format!("[{}] \u{ab}{}\u{bb}", i + 1, item))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        Value::Pairs(pairs) => Some(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (a, b))| format!("[{}] \u{ab}{}\u{bb} \u{ab}{}\u{bb}", i + 1, a, b))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        Value::Examples(_) => None,
    }
}

/// The built-in templates plus any loaded from disk, addressable by name.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

const BUILTIN_TEMPLATES: &[&str] = &[
    include_str!("../templates/qa.json"),
    include_str!("../templates/qa_with_cot.json"),
    include_str!("../templates/hop.json"),
    include_str!("../templates/rewrite.json"),
    include_str!("../templates/mcq.json"),
    include_str!("../templates/conv_response.json"),
];

/// The self-ask prompt prefix, shipped as an editable file.
pub const SELFASK_PROMPT: &str = include_str!("../templates/selfask.txt");

impl TemplateSet {
    /// The six built-in templates.
    pub fn builtin() -> TemplateSet {
        let mut templates = BTreeMap::new();
        for raw in BUILTIN_TEMPLATES {
            let t = Template::from_json(raw).expect("built-in template is valid");
            templates.insert(t.name.clone(), t);
        }
        TemplateSet { templates }
    }

    /// Loads every `*.json` file in a directory, overriding built-ins with
    /// the same name.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| DspError::io(dir.display().to_string(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let t = Template::from_path(&path)?;
            self.templates.insert(t.name.clone(), t);
        }
        Ok(())
    }

    /// Looks up a template by name.
    pub fn get(&self, name: &str) -> Result<&Template> {
        self.templates.get(name).ok_or_else(|| {
            DspError::Config(format!(
                "unknown template {name:?}; available: {}",
                self.templates
                    .keys()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
    }

    /// Registered template names.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
