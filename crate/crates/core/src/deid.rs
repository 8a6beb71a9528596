//! Label-substitution de-identification: every PHI mention in a note is
//! replaced by its entity-type label, e.g. `[PERSON]`.
//!
//! Mentions are applied longest first (ties by canonical category order), so
//! a longer mention always governs text it shares with a shorter one. Text
//! outside replaced spans is copied byte for byte. Any rendered label that
//! already appears in the input is left alone, which makes the operation
//! idempotent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::sync::OnceLock;

use regex::{Regex, RegexBuilder};

use crate::exec::{self, Execution};
use crate::model::{EntityType, PhiDictionary};

pub const TYPE_PLACEHOLDER: &str = "{TYPE}";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeidError {
    #[error("label format must contain {TYPE_PLACEHOLDER} exactly once: `{0}`")]
    InvalidLabelFormat(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, try_from = "RawPolicy")]
pub struct DeidPolicy {
    label_format: String,
    pub case_insensitive: bool,
    /// Require word boundaries at mention edges that are letters or digits.
    pub word_boundary: bool,
}

#[derive(Deserialize)]
#[serde(default)]
struct RawPolicy {
    label_format: String,
    case_insensitive: bool,
    word_boundary: bool,
}

impl Default for RawPolicy {
    fn default() -> Self {
        let p = DeidPolicy::default();
        Self {
            label_format: p.label_format,
            case_insensitive: p.case_insensitive,
            word_boundary: p.word_boundary,
        }
    }
}

impl TryFrom<RawPolicy> for DeidPolicy {
    type Error = DeidError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        let mut p = DeidPolicy::with_label_format(raw.label_format)?;
        p.case_insensitive = raw.case_insensitive;
        p.word_boundary = raw.word_boundary;
        Ok(p)
    }
}

impl Default for DeidPolicy {
    fn default() -> Self {
        Self {
            label_format: "[{TYPE}]".to_string(),
            case_insensitive: true,
            word_boundary: true,
        }
    }
}

impl DeidPolicy {
    pub fn with_label_format(format: impl Into<String>) -> Result<Self, DeidError> {
        let format = format.into();
        if format.matches(TYPE_PLACEHOLDER).count() != 1 {
            return Err(DeidError::InvalidLabelFormat(format));
        }
        Ok(Self {
            label_format: format,
            ..Self::default()
        })
    }

    pub fn label_format(&self) -> &str {
        &self.label_format
    }

    pub fn label(&self, entity: EntityType) -> String {
        self.label_format.replace(TYPE_PLACEHOLDER, entity.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    #[serde(rename = "type")]
    pub entity: EntityType,
    pub original: String,
    /// Byte offsets into the original text.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residual {
    #[serde(rename = "type")]
    pub entity: EntityType,
    pub mention: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeidentifiedNote {
    pub text: String,
    /// Sorted, non-overlapping, offsets into the original text.
    pub replacements: Vec<Replacement>,
    /// Mentions that never occur in the text under the policy.
    pub residuals: Vec<Residual>,
}

/// Something `verify_clean` found.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Finding {
    /// Mention still present in the de-identified text (byte offsets into it).
    Leaked {
        entity: EntityType,
        mention: String,
        start: usize,
        end: usize,
    },
    /// Mention that was never located in the source note.
    Unlocated { entity: EntityType, mention: String },
}

struct Matcher {
    entity: EntityType,
    mention: String,
    case_insensitive: bool,
    /// Built on first use; ASCII text against an ASCII mention never needs it.
    regex: OnceLock<Regex>,
    check_left: bool,
    check_right: bool,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl Matcher {
    fn new(entity: EntityType, mention: &str, policy: &DeidPolicy) -> Self {
        let edge = |c: Option<char>| policy.word_boundary && c.is_some_and(is_word);
        Self {
            entity,
            mention: mention.to_string(),
            case_insensitive: policy.case_insensitive,
            regex: OnceLock::new(),
            check_left: edge(mention.chars().next()),
            check_right: edge(mention.chars().last()),
        }
    }

    fn regex(&self) -> &Regex {
        self.regex.get_or_init(|| {
            RegexBuilder::new(&regex::escape(&self.mention))
                .case_insensitive(true)
                .build()
                .expect("escaped literal compiles")
        })
    }

    /// First match at or after `pos`.
    fn find_at(&self, text: &str, pos: usize) -> Option<(usize, usize)> {
        let needle = self.mention.as_bytes();
        if !self.case_insensitive {
            return text[pos..]
                .find(&self.mention)
                .map(|i| (pos + i, pos + i + needle.len()));
        }
        if self.mention.is_ascii() && text.is_ascii() {
            // Same matches as Unicode case-insensitive search when both
            // sides are ASCII.
            let hay = text.as_bytes();
            if hay.len() < needle.len() {
                return None;
            }
            return (pos..=hay.len() - needle.len())
                .find(|&i| hay[i..i + needle.len()].eq_ignore_ascii_case(needle))
                .map(|i| (i, i + needle.len()));
        }
        self.regex().find_at(text, pos).map(|m| (m.start(), m.end()))
    }

    /// Every match start, including overlapping ones, with its end.
    fn occurrences<'a>(&'a self, text: &'a str) -> impl Iterator<Item = (usize, usize)> + 'a {
        let mut pos = 0;
        std::iter::from_fn(move || {
            if pos > text.len() {
                return None;
            }
            let (start, end) = self.find_at(text, pos)?;
            pos = start + text[start..].chars().next().map_or(1, char::len_utf8);
            Some((start, end))
        })
    }

    fn boundaries_ok(&self, before: Option<char>, after: Option<char>) -> bool {
        !(self.check_left && before.is_some_and(is_word)) && !(self.check_right && after.is_some_and(is_word))
    }
}

/// Unique mentions in application order: longest first, then category order.
fn matchers(phi: &PhiDictionary, policy: &DeidPolicy) -> Vec<Matcher> {
    let mut seen = std::collections::HashSet::new();
    let mut pairs: Vec<(EntityType, &str)> = phi
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .filter(|(_, m)| {
            let key = if policy.case_insensitive {
                m.to_lowercase()
            } else {
                m.to_string()
            };
            seen.insert(key)
        })
        .collect();
    pairs.sort_by(|(ta, a), (tb, b)| {
        b.chars()
            .count()
            .cmp(&a.chars().count())
            .then(ta.cmp(tb))
            .then(a.cmp(b))
    });
    pairs.into_iter().map(|(t, m)| Matcher::new(t, m, policy)).collect()
}

/// Spans of every rendered label already present in `text`.
fn label_spans(text: &str, policy: &DeidPolicy) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for entity in EntityType::ALL {
        let label = policy.label(entity);
        let mut pos = 0;
        while let Some(i) = text[pos..].find(&label) {
            let start = pos + i;
            spans.push((start, start + label.len()));
            pos = start + text[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    spans
}

fn overlaps(spans: &[(usize, usize)], start: usize, end: usize) -> bool {
    spans.iter().any(|&(s, e)| start < e && s < end)
}

pub fn deidentify(text: &str, phi: &PhiDictionary, policy: &DeidPolicy) -> DeidentifiedNote {
    let matchers = matchers(phi, policy);
    let protected = label_spans(text, policy);
    // Accepted replacements: (start, end, matcher index).
    let mut claims: Vec<(usize, usize, usize)> = Vec::new();

    // Character adjacent to a position as it will read in the output.
    let labels: Vec<String> = matchers.iter().map(|m| policy.label(m.entity)).collect();
    let char_before = |claims: &[(usize, usize, usize)], pos: usize| -> Option<char> {
        match claims.iter().find(|c| c.1 == pos) {
            Some(c) => labels[c.2].chars().last(),
            None => text[..pos].chars().next_back(),
        }
    };
    let char_after = |claims: &[(usize, usize, usize)], pos: usize| -> Option<char> {
        match claims.iter().find(|c| c.0 == pos) {
            Some(c) => labels[c.2].chars().next(),
            None => text[pos..].chars().next(),
        }
    };

    for (idx, m) in matchers.iter().enumerate() {
        for (start, end) in m.occurrences(text) {
            if overlaps(&protected, start, end) || claims.iter().any(|&(s, e, _)| start < e && s < end) {
                continue;
            }
            if m.boundaries_ok(char_before(&claims, start), char_after(&claims, end)) {
                claims.push((start, end, idx));
            }
        }
    }
    claims.sort_unstable();

    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    let mut replacements = Vec::with_capacity(claims.len());
    for &(start, end, idx) in &claims {
        out.push_str(&text[cursor..start]);
        out.push_str(&labels[idx]);
        cursor = end;
        replacements.push(Replacement {
            entity: matchers[idx].entity,
            original: text[start..end].to_string(),
            start,
            end,
        });
    }
    out.push_str(&text[cursor..]);

    let residuals = matchers
        .iter()
        .filter(|m| {
            !m.occurrences(text)
                .any(|(s, e)| m.boundaries_ok(text[..s].chars().next_back(), text[e..].chars().next()))
        })
        .map(|m| Residual {
            entity: m.entity,
            mention: m.mention.clone(),
        })
        .collect();

    DeidentifiedNote {
        text: out,
        replacements,
        residuals,
    }
}

/// Every mention occurrence still readable in the de-identified text, plus
/// the mentions that were never located. Empty means clean.
pub fn verify_clean(deid: &DeidentifiedNote, phi: &PhiDictionary, policy: &DeidPolicy) -> Vec<Finding> {
    let text = deid.text.as_str();
    let protected = label_spans(text, policy);
    let mut findings = Vec::new();
    for m in matchers(phi, policy) {
        for (start, end) in m.occurrences(text) {
            if overlaps(&protected, start, end) {
                continue;
            }
            if m.boundaries_ok(text[..start].chars().next_back(), text[end..].chars().next()) {
                findings.push(Finding::Leaked {
                    entity: m.entity,
                    mention: m.mention.clone(),
                    start,
                    end,
                });
            }
        }
    }
    findings.extend(deid.residuals.iter().map(|r| Finding::Unlocated {
        entity: r.entity,
        mention: r.mention.clone(),
    }));
    findings
}

/// De-identify many `(text, phi)` pairs; output order matches input order.
pub fn deidentify_batch(
    items: &[(&str, &PhiDictionary)],
    policy: &DeidPolicy,
    exec: Execution,
) -> Vec<DeidentifiedNote> {
    exec::map_slice(exec, items, |(text, phi)| deidentify(text, phi, policy))
}
