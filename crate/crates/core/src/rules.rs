//! Rule-based PHI tagger: regular-expression patterns plus case-insensitive
//! lookup dictionaries.
//!
//! Pattern files hold one rule per line, `TYPE<TAB>priority<TAB>expression`,
//! with `#` comments and blank lines ignored. If an expression contains a
//! capture group, group 1 is the emitted mention; otherwise the whole match
//! is. Dictionary directories hold one `<TYPE>.txt` file per category with
//! one term per line.
//!
//! Overlapping candidates are resolved greedily by higher priority, then
//! longer span, then leftmost start, so emitted spans never overlap.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::model::{EntityType, NoteRecord, PhiDictionary};

/// Priority given to dictionary hits; every bundled pattern outranks it.
pub const DICTIONARY_PRIORITY: i32 = 10;

const BUNDLED_PATTERNS: &str = include_str!("../assets/rules/patterns.tsv");
const BUNDLED_DICTIONARIES: &[(EntityType, &str)] = &[
    (
        EntityType::Person,
        include_str!("../assets/rules/dictionaries/PERSON.txt"),
    ),
    (
        EntityType::Location,
        include_str!("../assets/rules/dictionaries/LOCATION.txt"),
    ),
    (
        EntityType::Organization,
        include_str!("../assets/rules/dictionaries/ORGANIZATION.txt"),
    ),
    (
        EntityType::Profession,
        include_str!("../assets/rules/dictionaries/PROFESSION.txt"),
    ),
];

#[derive(Debug, Error)]
pub enum RulesetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("pattern line {line}: {message}")]
    PatternCompile { line: usize, message: String },
    #[error("pattern line {line}: expected TYPE<TAB>priority<TAB>expression")]
    MalformedLine { line: usize },
    #[error("dictionary file {0} does not name an entity type")]
    UnknownDictionary(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Rule {
    pub entity: EntityType,
    pub priority: i32,
    pub source: String,
    regex: Regex,
}

#[derive(Clone, Debug)]
pub struct Dictionary {
    pub entity: EntityType,
    terms: Vec<String>,
    regex: Option<Regex>,
}

impl Dictionary {
    pub fn new(entity: EntityType, terms: impl IntoIterator<Item = String>) -> Self {
        let mut terms: Vec<String> = terms
            .into_iter()
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        terms.dedup();
        let regex = (!terms.is_empty()).then(|| {
            let alternatives: Vec<String> = terms.iter().map(|t| bounded_literal(t)).collect();
            Regex::new(&format!("(?i)(?:{})", alternatives.join("|"))).expect("escaped literals always compile")
        });
        Self { entity, terms, regex }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    fn from_lines(entity: EntityType, text: &str) -> Self {
        Self::new(entity, term_lines(text).map(str::to_string))
    }
}

/// Escaped literal with `\b` on each edge that starts or ends with a word char.
fn bounded_literal(term: &str) -> String {
    let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let mut out = String::new();
    if word(term.chars().next()) {
        out.push_str(r"\b");
    }
    out.push_str(&regex::escape(term));
    if word(term.chars().last()) {
        out.push_str(r"\b");
    }
    out
}

fn term_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Counts reported after loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RulesetStats {
    pub patterns: usize,
    pub dictionary_terms: usize,
}

/// A compiled, immutable set of tagging rules.
#[derive(Clone, Debug, Default)]
pub struct Ruleset {
    rules: Vec<Rule>,
    dictionaries: BTreeMap<EntityType, Dictionary>,
}

/// One resolved tag with byte offsets into the tagged text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSpan {
    pub entity: EntityType,
    pub start: usize,
    pub end: usize,
    pub priority: i32,
}

impl Ruleset {
    /// The starter ruleset shipped with the crate.
    pub fn bundled() -> Self {
        let mut rs = Self::from_patterns(BUNDLED_PATTERNS).expect("bundled patterns compile");
        for (entity, text) in BUNDLED_DICTIONARIES {
            rs.dictionaries.insert(*entity, Dictionary::from_lines(*entity, text));
        }
        rs
    }

    /// Parse a pattern file body; dictionaries start empty.
    pub fn from_patterns(text: &str) -> Result<Self, RulesetError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let mut parts = raw.splitn(3, '\t');
            let (Some(ty), Some(prio), Some(expr)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(RulesetError::MalformedLine { line });
            };
            let entity = ty
                .trim()
                .parse::<EntityType>()
                .map_err(|e| RulesetError::PatternCompile {
                    line,
                    message: e.to_string(),
                })?;
            let priority = prio
                .trim()
                .parse::<i32>()
                .map_err(|_| RulesetError::MalformedLine { line })?;
            let regex = Regex::new(expr).map_err(|e| RulesetError::PatternCompile {
                line,
                message: e.to_string(),
            })?;
            rules.push(Rule {
                entity,
                priority,
                source: expr.to_string(),
                regex,
            });
        }
        Ok(Self {
            rules,
            dictionaries: BTreeMap::new(),
        })
    }

    pub fn with_dictionary(mut self, dictionary: Dictionary) -> Self {
        self.dictionaries.insert(dictionary.entity, dictionary);
        self
    }

    /// Drop every pattern and dictionary for `entity`.
    pub fn without(mut self, entity: EntityType) -> Self {
        self.rules.retain(|r| r.entity != entity);
        self.dictionaries.remove(&entity);
        self
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn dictionary(&self, entity: EntityType) -> Option<&Dictionary> {
        self.dictionaries.get(&entity)
    }

    pub fn stats(&self) -> RulesetStats {
        RulesetStats {
            patterns: self.rules.len(),
            dictionary_terms: self.dictionaries.values().map(|d| d.terms.len()).sum(),
        }
    }

    pub fn covers(&self, entity: EntityType) -> bool {
        self.rules.iter().any(|r| r.entity == entity)
            || self.dictionaries.get(&entity).is_some_and(|d| !d.terms.is_empty())
    }

    /// Resolved, non-overlapping spans in text order.
    pub fn tag_spans(&self, text: &str) -> Vec<TaggedSpan> {
        // (span, rank) where rank breaks remaining ties deterministically.
        let mut candidates: Vec<(TaggedSpan, usize)> = Vec::new();
        for (rank, rule) in self.rules.iter().enumerate() {
            for caps in rule.regex.captures_iter(text) {
                let m = caps.get(1).or_else(|| caps.get(0)).expect("group 0 always present");
                if m.start() < m.end() {
                    candidates.push((
                        TaggedSpan {
                            entity: rule.entity,
                            start: m.start(),
                            end: m.end(),
                            priority: rule.priority,
                        },
                        rank,
                    ));
                }
            }
        }
        let base = self.rules.len();
        for dict in self.dictionaries.values() {
            let Some(re) = &dict.regex else { continue };
            let mut hits: Vec<TaggedSpan> = re
                .find_iter(text)
                .map(|m| TaggedSpan {
                    entity: dict.entity,
                    start: m.start(),
                    end: m.end(),
                    priority: DICTIONARY_PRIORITY,
                })
                .collect();
            if dict.entity == EntityType::Person {
                hits = merge_adjacent(text, hits);
            }
            candidates.extend(hits.into_iter().map(|s| (s, base + dict.entity.index())));
        }

        candidates.sort_by(|(a, ra), (b, rb)| {
            b.priority
                .cmp(&a.priority)
                .then((b.end - b.start).cmp(&(a.end - a.start)))
                .then(a.start.cmp(&b.start))
                .then(ra.cmp(rb))
        });
        let mut accepted: Vec<TaggedSpan> = Vec::new();
        for (span, _) in candidates {
            if accepted.iter().all(|s| span.end <= s.start || span.start >= s.end) {
                accepted.push(span);
            }
        }
        accepted.sort_by_key(|s| s.start);
        accepted
    }

    pub fn tag(&self, text: &str) -> PhiDictionary {
        let mut out = PhiDictionary::new();
        for span in self.tag_spans(text) {
            out.push(span.entity, &text[span.start..span.end]);
        }
        out
    }
}

/// Join consecutive hits separated by exactly one space ("Isla" "Wilson").
fn merge_adjacent(text: &str, hits: Vec<TaggedSpan>) -> Vec<TaggedSpan> {
    let mut out: Vec<TaggedSpan> = Vec::with_capacity(hits.len());
    for hit in hits {
        if let Some(last) = out.last_mut() {
            if hit.start == last.end + 1 && &text[last.end..hit.start] == " " {
                last.end = hit.end;
                continue;
            }
        }
        out.push(hit);
    }
    out
}

/// Load a pattern file and a directory of `<TYPE>.txt` dictionaries.
pub fn load_ruleset(pattern_file: &Path, dictionary_dir: &Path) -> Result<Ruleset, RulesetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RulesetError::Io { path, source }
    };
    let patterns = std::fs::read_to_string(pattern_file).map_err(io(pattern_file))?;
    let mut rs = Ruleset::from_patterns(&patterns)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dictionary_dir)
        .map_err(io(dictionary_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let entity = stem
            .parse::<EntityType>()
            .map_err(|_| RulesetError::UnknownDictionary(path.clone()))?;
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        rs.dictionaries.insert(entity, Dictionary::from_lines(entity, &text));
    }
    let stats = rs.stats();
    log::info!(
        "loaded ruleset: {} patterns, {} dictionary terms",
        stats.patterns,
        stats.dictionary_terms
    );
    Ok(rs)
}

pub fn tag_note(note: &NoteRecord, rules: &Ruleset) -> PhiDictionary {
    rules.tag(&note.text)
}

/// Tag every note; output order matches input order.
pub fn tag_corpus(notes: &[NoteRecord], rules: &Ruleset, exec: Execution) -> Vec<PhiDictionary> {
    exec::map_slice(exec, notes, |n| rules.tag(&n.text))
}
