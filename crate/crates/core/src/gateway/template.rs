use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde_json::{Map, Value};

use super::PromptKind;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("no template for prompt kind {0}")]
    UnknownTemplate(PromptKind),
    #[error("template {kind} requires variable `{name}`")]
    MissingVariable { kind: PromptKind, name: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed placeholder in template {kind} at byte {offset}")]
    Malformed { kind: PromptKind, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Var(String),
}

/// A UTF-8 prompt with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pieces: Vec<Piece>,
    variables: BTreeSet<String>,
}

impl Template {
    pub fn parse(kind: PromptKind, source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut variables = BTreeSet::new();
        let mut rest = source;
        let mut offset = 0;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                pieces.push(Piece::Literal(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or(TemplateError::Malformed {
                kind,
                offset: offset + open,
            })?;
            let name = after[..close].trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(TemplateError::Malformed {
                    kind,
                    offset: offset + open,
                });
            }
            variables.insert(name.to_string());
            pieces.push(Piece::Var(name.to_string()));
            let consumed = open + 2 + close + 2;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Literal(rest.to_string()));
        }
        Ok(Self { pieces, variables })
    }

    /// Variables the template requires.
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(String::as_str)
    }

    /// Strings are inserted verbatim; every other value as pretty JSON.
    pub fn render(
        &self,
        kind: PromptKind,
        vars: &Map<String, Value>,
    ) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(text) => out.push_str(text),
                Piece::Var(name) => match vars.get(name) {
                    Some(Value::String(s)) => out.push_str(s),
                    Some(other) => out.push_str(
                        &serde_json::to_string_pretty(other).expect("JSON values always serialize"),
                    ),
                    None => {
                        return Err(TemplateError::MissingVariable {
                            kind,
                            name: name.clone(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

macro_rules! builtin_sources {
    ($($kind:ident => $file:literal),+ $(,)?) => {
        &[$((PromptKind::$kind, include_str!(concat!("../../prompts/", $file)))),+]
    };
}

const BUILTIN: &[(PromptKind, &str)] = builtin_sources! {
    CognitiveError => "cognitive_error.txt",
    PppppiAlign => "pppppi_align.txt",
    Tom => "tom.txt",
    TurnHistory => "turn_history.txt",
    PppppiUpdate => "pppppi_update.txt",
    SummaryUpdate => "summary_update.txt",
    LabelRound1 => "label_round1.txt",
    LabelRound2 => "label_round2.txt",
    StrategyGen => "strategy_gen.txt",
    QuestionIdeation => "question_ideation.txt",
    Draft => "draft.txt",
    Critic => "critic.txt",
    BaselineCounselor => "baseline_counselor.txt",
};

/// Prompt templates keyed by kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    templates: HashMap<PromptKind, Template>,
}

impl PromptTemplates {
    /// The templates shipped in `prompts/`, compiled into the binary.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(kind, src)| {
                let template =
                    Template::parse(*kind, src).expect("shipped templates are well-formed");
                (*kind, template)
            })
            .collect();
        Self { templates }
    }

    /// Built-in templates, overridden by any `<kind>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut out = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(format!("{}.txt", kind.as_str()));
            if !path.exists() {
                continue;
            }
            let src = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            out.templates.insert(*kind, Template::parse(*kind, &src)?);
        }
        Ok(out)
    }

    pub fn get(&self, kind: PromptKind) -> Option<&Template> {
        self.templates.get(&kind)
    }

    pub fn remove(&mut self, kind: PromptKind) {
        self.templates.remove(&kind);
    }

    pub fn render(
        &self,
        kind: PromptKind,
        vars: &Map<String, Value>,
    ) -> Result<String, TemplateError> {
        self.get(kind)
            .ok_or(TemplateError::UnknownTemplate(kind))?
            .render(kind, vars)
    }
}
