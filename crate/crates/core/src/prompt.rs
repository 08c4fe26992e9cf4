//! Template rendering and prompt assembly.
//!
//! Patterns use `{name}` placeholders. `{label}` (or the alias
//! `{answer_choices[label]}`) is the answer slot; every other name is looked
//! up in the example's fields. `{{` and `}}` render literal braces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PoemError, Result};
use crate::selection::Example;

const LABEL: &str = "label";
const LABEL_ALIAS: &str = "answer_choices[label]";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Field(String),
    Label,
}

fn parse_pattern(pattern: &str) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = pattern.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => {
                            return Err(PoemError::invalid(format!(
                                "unclosed placeholder in template {pattern:?}"
                            )))
                        }
                    }
                }
                let name = name.trim().to_string();
                if name.is_empty() || name.contains('{') {
                    return Err(PoemError::invalid(format!(
                        "malformed placeholder in template {pattern:?}"
                    )));
                }
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(if name == LABEL || name == LABEL_ALIAS {
                    Segment::Label
                } else {
                    Segment::Field(name)
                });
            }
            '}' => {
                return Err(PoemError::invalid(format!(
                    "unmatched `}}` in template {pattern:?}"
                )))
            }
            other => text.push(other),
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateDef {
    pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer_choices: Option<BTreeMap<String, String>>,
}

/// A parsed pattern plus an optional label verbalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateDef", into = "TemplateDef")]
pub struct Template {
    pattern: String,
    answer_choices: Option<BTreeMap<String, String>>,
    segments: Vec<Segment>,
}

impl TryFrom<TemplateDef> for Template {
    type Error = PoemError;

    fn try_from(def: TemplateDef) -> Result<Self> {
        Template::with_choices(def.pattern, def.answer_choices)
    }
}

impl From<Template> for TemplateDef {
    fn from(t: Template) -> Self {
        TemplateDef {
            pattern: t.pattern,
            answer_choices: t.answer_choices,
        }
    }
}

impl Template {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        Self::with_choices(pattern, None)
    }

    pub fn with_choices(
        pattern: impl Into<String>,
        answer_choices: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let pattern = pattern.into();
        let segments = parse_pattern(&pattern)?;
        Ok(Template {
            pattern,
            answer_choices,
            segments,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn answer_choices(&self) -> Option<&BTreeMap<String, String>> {
        self.answer_choices.as_ref()
    }

    /// Field names referenced by the pattern (excluding the label slot).
    pub fn field_placeholders(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Field(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn uses_label(&self) -> bool {
        self.segments.contains(&Segment::Label)
    }

    /// Surface form of a label after the verbalizer.
    pub fn verbalize<'a>(&'a self, label: &'a str) -> &'a str {
        self.answer_choices
            .as_ref()
            .and_then(|m| m.get(label))
            .map_or(label, String::as_str)
    }

    fn render_segments(
        &self,
        segments: &[Segment],
        fields: &BTreeMap<String, String>,
        label: Option<&str>,
    ) -> Result<String> {
        let mut out = String::with_capacity(self.pattern.len() + 32);
        for seg in segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Field(name) => match fields.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(PoemError::Render {
                            placeholder: name.clone(),
                        })
                    }
                },
                Segment::Label => match label {
                    Some(l) => out.push_str(self.verbalize(l)),
                    None => {
                        return Err(PoemError::Render {
                            placeholder: LABEL.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }

    pub fn render(&self, fields: &BTreeMap<String, String>, label: Option<&str>) -> Result<String> {
        self.render_segments(&self.segments, fields, label)
    }

    /// Renders the pattern up to (not including) the first label slot, with
    /// trailing whitespace removed: `"Sentiment: {label}"` becomes `"Sentiment:"`.
    pub fn render_open(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        let cut = self
            .segments
            .iter()
            .position(|s| *s == Segment::Label)
            .unwrap_or(self.segments.len());
        let rendered = self.render_segments(&self.segments[..cut], fields, None)?;
        Ok(rendered.trim_end().to_string())
    }
}

pub fn render_example(t: &Template, e: &Example) -> Result<String> {
    t.render(&e.fields, e.label.as_deref())
}

fn default_separator() -> String {
    "\n".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_description: Option<String>,
    pub template: Template,
    /// Defaults to `template` with the answer slot left open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_template: Option<Template>,
    #[serde(default = "default_separator")]
    pub separator: String,
}

impl PromptSpec {
    pub fn new(template: Template) -> Self {
        PromptSpec {
            task_description: None,
            template,
            query_template: None,
            separator: default_separator(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.separator.is_empty() {
            return Err(PoemError::invalid("prompt separator must not be empty"));
        }
        Ok(())
    }

    pub fn render_query(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        match &self.query_template {
            Some(q) if q.uses_label() => q.render_open(fields),
            Some(q) => q.render(fields, None),
            None => self.template.render_open(fields),
        }
    }

    /// Every field placeholder used by either template.
    pub fn field_placeholders(&self) -> Vec<&str> {
        let mut names = self.template.field_placeholders();
        if let Some(q) = &self.query_template {
            names.extend(q.field_placeholders());
        }
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// Task description, rendered demonstrations (in the given order) and the
/// open query, joined by the separator.
pub fn build_prompt(
    spec: &PromptSpec,
    ordered: &[Example],
    query: &BTreeMap<String, String>,
) -> Result<String> {
    spec.validate()?;
    let mut parts = Vec::with_capacity(ordered.len() + 2);
    if let Some(desc) = spec.task_description.as_deref().filter(|d| !d.is_empty()) {
        parts.push(desc.to_string());
    }
    for e in ordered {
        parts.push(render_example(&spec.template, e)?);
    }
    parts.push(spec.render_query(query)?);
    Ok(parts.join(&spec.separator))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Embedding;

    fn example(index: u64, sentence: &str, label: Option<&str>) -> Example {
        Example {
            index,
            fields: BTreeMap::from([("sentence".to_string(), sentence.to_string())]),
            label: label.map(str::to_string),
            embedding: Embedding::new(vec![1.0, 0.0]).unwrap(),
        }
    }

    fn fields(sentence: &str) -> BTreeMap<String, String> {
        BTreeMap::from([("sentence".to_string(), sentence.to_string())])
    }

    #[test]
    fn renders_review_template() {
        let t = Template::new("Review: {sentence}. Sentiment: {label}").unwrap();
        let out = render_example(&t, &example(0, "great film", Some("great"))).unwrap();
        assert_eq!(out, "Review: great film. Sentiment: great");
    }

    #[test]
    fn verbalizer_and_alias() {
        let t = Template::with_choices(
            "Review: {sentence}. Sentiment: {answer_choices[label]}",
            Some(BTreeMap::from([
                ("positive".to_string(), "great".to_string()),
                ("negative".to_string(), "terrible".to_string()),
            ])),
        )
        .unwrap();
        let out = render_example(&t, &example(0, "meh", Some("negative"))).unwrap();
        assert_eq!(out, "Review: meh. Sentiment: terrible");
    }

    #[test]
    fn constant_and_escaped_patterns() {
        let t = Template::new("no placeholders here").unwrap();
        assert_eq!(
            render_example(&t, &example(0, "x", None)).unwrap(),
            "no placeholders here"
        );
        let t = Template::new("{{literal}} {sentence}").unwrap();
        assert_eq!(
            render_example(&t, &example(0, "x", None)).unwrap(),
            "{literal} x"
        );
        assert!(Template::new("broken {sentence").is_err());
        assert!(Template::new("broken }").is_err());
    }

    #[test]
    fn missing_label_or_field_is_named() {
        let t = Template::new("{sentence} -> {label}").unwrap();
        match render_example(&t, &example(0, "x", None)).unwrap_err() {
            PoemError::Render { placeholder } => assert_eq!(placeholder, "label"),
            other => panic!("unexpected {other}"),
        }
        let t = Template::new("{passage}").unwrap();
        match render_example(&t, &example(0, "x", None)).unwrap_err() {
            PoemError::Render { placeholder } => assert_eq!(placeholder, "passage"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn prompt_layout() {
        let spec =
            PromptSpec::new(Template::new("Review: {sentence}. Sentiment: {label}").unwrap());
        let demos = [
            example(0, "a", Some("great")),
            example(1, "b", Some("terrible")),
        ];
        let p = build_prompt(&spec, &demos, &fields("c")).unwrap();
        assert_eq!(
            p,
            "Review: a. Sentiment: great\nReview: b. Sentiment: terrible\nReview: c. Sentiment:"
        );
        assert_eq!(p.lines().count(), 3);

        let swapped = [demos[1].clone(), demos[0].clone()];
        let q = build_prompt(&spec, &swapped, &fields("c")).unwrap();
        let (pl, ql): (Vec<_>, Vec<_>) = (p.lines().collect(), q.lines().collect());
        assert_eq!((pl[0], pl[1], pl[2]), (ql[1], ql[0], ql[2]));
    }

    #[test]
    fn task_description_leads() {
        let mut spec =
            PromptSpec::new(Template::new("Review: {sentence}. Sentiment: {label}").unwrap());
        spec.task_description = Some(
            "In this task, you are given sentences from movie reviews. The task is to classify \
             a sentence as \"great\" if the sentiment of the sentence is positive or as \
             \"terrible\" if the sentiment of the sentence is negative."
                .to_string(),
        );
        let p = build_prompt(&spec, &[example(0, "a", Some("great"))], &fields("b")).unwrap();
        assert!(p.starts_with("In this task, you are given sentences from movie reviews."));
    }

    #[test]
    fn explicit_query_template_and_zero_shot() {
        let mut spec = PromptSpec::new(Template::new("Q: {sentence} A: {label}").unwrap());
        spec.query_template = Some(Template::new("Question: {sentence}? Answer:").unwrap());
        assert_eq!(
            build_prompt(&spec, &[], &fields("why")).unwrap(),
            "Question: why? Answer:"
        );
    }

    #[test]
    fn deserializes_from_config() {
        let spec: PromptSpec = serde_json::from_str(
            r#"{"template": {"pattern": "{sentence} {label}", "answer_choices": {"1": "yes"}}}"#,
        )
        .unwrap();
        assert_eq!(spec.separator, "\n");
        assert_eq!(spec.template.field_placeholders(), ["sentence"]);
        assert!(serde_json::from_str::<Template>(r#"{"pattern": "{oops"}"#).is_err());
    }
}
