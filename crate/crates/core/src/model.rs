//! Shared domain types: the PHI entity schema, per-note PHI dictionaries,
//! corpus records, and mention normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// The closed set of PHI categories. Declaration order is the canonical
/// order used for serialization, reports and prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityType {
    Person,
    Location,
    Organization,
    Age,
    PhoneNumber,
    Email,
    DateTime,
    Zip,
    Profession,
    Username,
    Id,
    Url,
}

impl EntityType {
    pub const ALL: [EntityType; 12] = [
        EntityType::Person,
        EntityType::Location,
        EntityType::Organization,
        EntityType::Age,
        EntityType::PhoneNumber,
        EntityType::Email,
        EntityType::DateTime,
        EntityType::Zip,
        EntityType::Profession,
        EntityType::Username,
        EntityType::Id,
        EntityType::Url,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Location => "LOCATION",
            EntityType::Organization => "ORGANIZATION",
            EntityType::Age => "AGE",
            EntityType::PhoneNumber => "PHONE_NUMBER",
            EntityType::Email => "EMAIL",
            EntityType::DateTime => "DATE_TIME",
            EntityType::Zip => "ZIP",
            EntityType::Profession => "PROFESSION",
            EntityType::Username => "USERNAME",
            EntityType::Id => "ID",
            EntityType::Url => "URL",
        }
    }

    /// Position in the canonical ordering.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown entity type `{0}`")]
pub struct UnknownEntityType(pub String);

impl FromStr for EntityType {
    type Err = UnknownEntityType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownEntityType(s.to_string()))
    }
}

impl Serialize for EntityType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EntityType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Per-note multiset of PHI surface strings, keyed by category.
///
/// Empty lists are never stored, so a dictionary with an empty list under a
/// key compares equal to one without the key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PhiDictionary {
    entries: BTreeMap<EntityType, Vec<String>>,
}

impl PhiDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one mention. Blank mentions are ignored.
    pub fn push(&mut self, entity: EntityType, mention: impl Into<String>) {
        let mention = mention.into();
        if mention.trim().is_empty() {
            return;
        }
        self.entries.entry(entity).or_default().push(mention);
    }

    pub fn with(mut self, entity: EntityType, mentions: &[&str]) -> Self {
        for m in mentions {
            self.push(entity, *m);
        }
        self
    }

    pub fn get(&self, entity: EntityType) -> &[String] {
        self.entries.get(&entity).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of mentions across all categories.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Categories with at least one mention, in canonical order.
    pub fn entity_types(&self) -> impl Iterator<Item = EntityType> + '_ {
        self.entries.keys().copied()
    }

    /// `(type, mention)` pairs in canonical type order, list order within a type.
    pub fn iter(&self) -> impl Iterator<Item = (EntityType, &str)> + '_ {
        self.entries
            .iter()
            .flat_map(|(t, ms)| ms.iter().map(move |m| (*t, m.as_str())))
    }

    pub fn remove(&mut self, entity: EntityType) -> Vec<String> {
        self.entries.remove(&entity).unwrap_or_default()
    }

    /// Canonical compact JSON: keys in canonical order, empty keys omitted.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("string maps always serialize")
    }
}

impl Serialize for PhiDictionary {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            map.serialize_entry(k.as_str(), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PhiDictionary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        dictionary_from_value(value, ParseMode::Strict)
            .map(|p| p.dictionary)
            .map_err(de::Error::custom)
    }
}

/// Serialize a dictionary in canonical form.
pub fn serialize_phi_dictionary(d: &PhiDictionary) -> String {
    d.to_json()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// A single top-level object with list-of-string values under known keys.
    Strict,
    /// Repairs common model-output defects; every repair is logged.
    Lenient,
}

/// A repair applied while leniently parsing model output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Repair {
    ExtractedFromProse { start: usize, end: usize },
    DroppedUnknownKey(String),
    WrappedBareString(EntityType),
    CoercedNumber(EntityType),
    DroppedInvalidValue(EntityType),
    DroppedBlankMention(EntityType),
}

impl fmt::Display for Repair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Repair::ExtractedFromProse { start, end } => {
                write!(f, "extracted JSON object from bytes {start}..{end} of surrounding text")
            }
            Repair::DroppedUnknownKey(k) => write!(f, "dropped unknown key `{k}`"),
            Repair::WrappedBareString(t) => write!(f, "wrapped bare string under {t} into a list"),
            Repair::CoercedNumber(t) => write!(f, "coerced numeric value under {t} to string"),
            Repair::DroppedInvalidValue(t) => write!(f, "dropped non-string value under {t}"),
            Repair::DroppedBlankMention(t) => write!(f, "dropped blank mention under {t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedPhi {
    pub dictionary: PhiDictionary,
    pub repairs: Vec<Repair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhiParseError {
    #[error("no JSON object found in model output")]
    NoObject,
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

/// Parse a candidate PHI dictionary, discarding the repair log.
pub fn parse_phi_dictionary(text: &str, strict: bool) -> Result<PhiDictionary, PhiParseError> {
    let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
    parse_phi_dictionary_audited(text, mode).map(|p| p.dictionary)
}

/// Parse a candidate PHI dictionary and report what had to be repaired.
pub fn parse_phi_dictionary_audited(text: &str, mode: ParseMode) -> Result<ParsedPhi, PhiParseError> {
    let mut repairs = Vec::new();
    let value = match serde_json::from_str::<Value>(text.trim()) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) if mode == ParseMode::Strict => {
            return Err(PhiParseError::Schema("top-level value is not an object".into()))
        }
        Err(e) if mode == ParseMode::Strict => {
            return Err(if text.contains('{') {
                PhiParseError::Malformed(e.to_string())
            } else {
                PhiParseError::NoObject
            })
        }
        _ => {
            let (start, end) = first_balanced_object(text).ok_or(PhiParseError::NoObject)?;
            let v = serde_json::from_str::<Value>(&text[start..end])
                .map_err(|e| PhiParseError::Malformed(e.to_string()))?;
            repairs.push(Repair::ExtractedFromProse { start, end });
            v
        }
    };
    let mut parsed = dictionary_from_value(value, mode)?;
    repairs.append(&mut parsed.repairs);
    parsed.repairs = repairs;
    for r in &parsed.repairs {
        log::debug!("phi dictionary repair: {r}");
    }
    Ok(parsed)
}

fn dictionary_from_value(value: Value, mode: ParseMode) -> Result<ParsedPhi, PhiParseError> {
    let Value::Object(map) = value else {
        return Err(PhiParseError::Schema("top-level value is not an object".into()));
    };
    let strict = mode == ParseMode::Strict;
    let mut dictionary = PhiDictionary::new();
    let mut repairs = Vec::new();
    for (key, v) in map {
        let entity = match key.parse::<EntityType>() {
            Ok(t) => t,
            Err(_) if strict => return Err(PhiParseError::Schema(format!("unknown key `{key}`"))),
            Err(_) => {
                log::warn!("dropping unknown PHI key `{key}`");
                repairs.push(Repair::DroppedUnknownKey(key));
                continue;
            }
        };
        let items = match v {
            Value::Array(items) => items,
            Value::String(s) if !strict => {
                repairs.push(Repair::WrappedBareString(entity));
                vec![Value::String(s)]
            }
            Value::Number(n) if !strict => {
                repairs.push(Repair::WrappedBareString(entity));
                vec![Value::Number(n)]
            }
            Value::Null if !strict => continue,
            other if strict => {
                return Err(PhiParseError::Schema(format!(
                    "value under `{key}` is not a list: {other}"
                )))
            }
            _ => {
                repairs.push(Repair::DroppedInvalidValue(entity));
                continue;
            }
        };
        for item in items {
            let mention = match item {
                Value::String(s) => s,
                Value::Number(n) if !strict => {
                    repairs.push(Repair::CoercedNumber(entity));
                    n.to_string()
                }
                other if strict => {
                    return Err(PhiParseError::Schema(format!(
                        "non-string mention under `{key}`: {other}"
                    )))
                }
                _ => {
                    repairs.push(Repair::DroppedInvalidValue(entity));
                    continue;
                }
            };
            if mention.trim().is_empty() {
                if strict {
                    return Err(PhiParseError::Schema(format!("blank mention under `{key}`")));
                }
                repairs.push(Repair::DroppedBlankMention(entity));
                continue;
            }
            dictionary.push(entity, mention);
        }
    }
    Ok(ParsedPhi { dictionary, repairs })
}

/// Byte range of the first balanced `{...}` block, honoring JSON string
/// literals and escapes.
fn first_balanced_object(text: &str) -> Option<(usize, usize)> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in text.as_bytes().iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, i + 1));
                }
            }
            _ => {}
        }
    }
    None
}

/// Where a note came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Aeg,
    Spi,
    #[default]
    Unknown,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Aeg => "aeg",
            Source::Spi => "spi",
            Source::Unknown => "unknown",
        })
    }
}

fn source_or_unknown<'de, D: Deserializer<'de>>(d: D) -> Result<Source, D::Error> {
    Ok(Option::<Source>::deserialize(d)?.unwrap_or_default())
}

/// One line of a `notes.jsonl` corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub phi: Option<PhiDictionary>,
    #[serde(default, deserialize_with = "source_or_unknown")]
    pub source: Source,
}

impl NoteRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            phi: None,
            source: Source::Unknown,
        }
    }

    pub fn with_phi(mut self, phi: PhiDictionary) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate note id `{0}`")]
    DuplicateId(String),
}

/// Read a `notes.jsonl` corpus, validating id uniqueness and non-empty text.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<NoteRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: NoteRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.text.is_empty() {
            return Err(CorpusError::Line {
                line: i + 1,
                message: format!("note `{}` has empty text", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Vec<NoteRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

pub fn write_corpus<W: Write>(mut writer: W, notes: &[NoteRecord]) -> std::io::Result<()> {
    for note in notes {
        serde_json::to_writer(&mut writer, note)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_corpus_file(path: impl AsRef<Path>, notes: &[NoteRecord]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_corpus(std::io::BufWriter::new(file), notes)
}

/// Which transforms `normalize_mention` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationPolicy {
    pub case_fold: bool,
    pub collapse_whitespace: bool,
    pub strip_edge_punctuation: bool,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self::all()
    }
}

impl NormalizationPolicy {
    pub const fn all() -> Self {
        Self {
            case_fold: true,
            collapse_whitespace: true,
            strip_edge_punctuation: true,
        }
    }

    pub const fn exact() -> Self {
        Self {
            case_fold: false,
            collapse_whitespace: false,
            strip_edge_punctuation: false,
        }
    }
}

/// Trim, then collapse whitespace runs, then case-fold, then strip
/// punctuation from both edges (each step only if enabled).
pub fn normalize_mention(s: &str, policy: &NormalizationPolicy) -> String {
    let mut out = s.trim().to_string();
    if policy.collapse_whitespace {
        out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    if policy.case_fold {
        out = out.to_lowercase();
    }
    if policy.strip_edge_punctuation {
        // Stripping can expose whitespace (e.g. "( x"), so trim in the same pass.
        out = out
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || is_unicode_punct(c))
            .to_string();
    }
    out
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
    )
}
