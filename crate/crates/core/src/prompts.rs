//! Fixed prompt templates for annotation and the two generation pipelines.
//!
//! Templates ship as assets and are rendered without any normalisation, so a
//! rendered prompt is byte-stable for a given input.

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const TASK_SYSTEM: &str = include_str!("../assets/prompts/task_system.txt");
pub const TASK_USER: &str = include_str!("../assets/prompts/task_user.txt");
pub const AEG_SYSTEM: &str = include_str!("../assets/prompts/aeg_system.txt");
pub const AEG_USER: &str = include_str!("../assets/prompts/aeg_user.txt");
pub const SPI_SYSTEM: &str = include_str!("../assets/prompts/spi_system.txt");
pub const SPI_USER: &str = include_str!("../assets/prompts/spi_user.txt");

pub const ANNOTATION_TEMPERATURE: f64 = 0.0;
pub const GENERATION_TEMPERATURE: f64 = 0.7;
pub const ANNOTATION_MAX_TOKENS: u32 = 1024;
pub const GENERATION_MAX_TOKENS: u32 = 2048;

/// One chat-completion call: a system and a user message plus decoding
/// parameters. The model name belongs to the endpoint, not the request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            temperature: ANNOTATION_TEMPERATURE,
            max_output_tokens: ANNOTATION_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature.max(0.0);
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// The annotation prompt: the note is appended directly after
/// "Here is the clinical note:".
pub fn build_task_prompt(note_text: &str) -> ChatRequest {
    ChatRequest::new(TASK_SYSTEM, task_user_message(note_text))
}

pub fn task_user_message(note_text: &str) -> String {
    let mut user = String::with_capacity(TASK_USER.len() + note_text.len());
    user.push_str(TASK_USER);
    user.push_str(note_text);
    user
}

/// Recovers the note from a user message built by [`task_user_message`].
pub fn note_from_task_user(user: &str) -> Option<&str> {
    user.strip_prefix(TASK_USER)
}

/// The example-guided generation prompt. Extra exemplar notes are appended
/// to the user message when given; with none the prompt is the fixed
/// template.
pub fn build_aeg_prompt(exemplars: &[&str]) -> ChatRequest {
    let mut user = AEG_USER.to_string();
    if !exemplars.is_empty() {
        user.push_str("\n\nHere are some example notes:");
        for e in exemplars {
            user.push_str("\n<EXAMPLE>\n");
            user.push_str(e.trim());
            user.push_str("\n<END OF EXAMPLE>");
        }
    }
    ChatRequest::new(AEG_SYSTEM, user)
        .with_temperature(GENERATION_TEMPERATURE)
        .with_max_output_tokens(GENERATION_MAX_TOKENS)
}

/// Substitutes `{{NAME}}` placeholders in one pass, so substituted values
/// are never rescanned.
pub(crate) fn render_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let key = &after[..close];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(key);
                        out.push_str("}}");
                    }
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Python `repr` of a JSON value: single-quoted strings, `True`/`False`,
/// `None`, and `{'k': v}` dictionaries in insertion order.
pub fn python_repr(value: &Value) -> String {
    let mut out = String::new();
    write_repr(value, &mut out);
    out
}

fn write_repr(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("None"),
        Value::Bool(true) => out.push_str("True"),
        Value::Bool(false) => out.push_str("False"),
        Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                out.push_str(&python_float(f));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&python_str(s)),
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_repr(v, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&python_str(k));
                out.push_str(": ");
                write_repr(v, out);
            }
            out.push('}');
        }
    }
}

fn python_float(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{f:?}");
    // Rust prints 1e16 and 1e-7 where Python prints 1e+16 and 1e-07.
    match s.split_once('e') {
        Some((mantissa, exp)) => {
            let (sign, digits) = match exp.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', exp),
            };
            format!("{mantissa}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

fn python_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}
