//! Synthetic note generation: simulated identities, structured-record
//! prompts, reply parsing, corpus mixing and chat-format training export.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::annotate::{complete_with_retry, RetryError, RetryPolicy};
use crate::exec;
use crate::model::{
    normalize_mention, parse_phi_dictionary_audited, serialize_phi_dictionary, EntityType, NormalizationPolicy,
    NoteRecord, ParseMode, PhiDictionary, PhiParseError, Source,
};
use crate::prompts::{
    build_aeg_prompt, python_repr, render_template, task_user_message, ChatRequest, GENERATION_MAX_TOKENS,
    GENERATION_TEMPERATURE, SPI_SYSTEM, SPI_USER, TASK_SYSTEM,
};
use crate::transport::ChatTransport;

/// Timestamp format of record time fields.
pub const RECORD_TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

const SECTIONS: [(&str, &str); 5] = [
    ("ALLERGY", "allergy"),
    ("DIAGNOSIS", "diagnosis"),
    ("LAB", "lab"),
    ("MEDICATION", "medication"),
    ("TREATMENT", "treatment"),
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pool `{0}` is empty")]
    EmptyPool(&'static str),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file} line {line}: {message}")]
    PoolLine { file: String, line: usize, message: String },
    #[error("no exemplar notes supplied")]
    NoExemplars,
}

/// Mixes a master seed with an item index so each job's randomness is
/// independent of scheduling order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct City {
    pub name: String,
    pub state: String,
    /// Leading ZIP digits for the city; the rest are drawn at random.
    pub zip_prefix: String,
}

/// Name, street, city and e-mail domain pools for identity simulation.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub male_first: Vec<String>,
    pub female_first: Vec<String>,
    pub last: Vec<String>,
    pub streets: Vec<String>,
    pub cities: Vec<City>,
    pub email_domains: Vec<String>,
}

fn pool_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// `City, ST` or `City, ST, 752` (ZIP prefix of up to 5 digits).
fn parse_cities(text: &str, file: &str) -> Result<Vec<City>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |message: &str| SynthError::PoolLine {
            file: file.to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let (name, state, prefix) = match parts.as_slice() {
            [n, s] => (*n, *s, ""),
            [n, s, p] => (*n, *s, *p),
            _ => return Err(bad("expected `City, ST` or `City, ST, ZIPPREFIX`")),
        };
        if name.is_empty() || state.len() != 2 || !state.chars().all(|c| c.is_ascii_uppercase()) {
            return Err(bad("state must be a two-letter code"));
        }
        if prefix.len() > 5 || !prefix.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad("ZIP prefix must be at most 5 digits"));
        }
        out.push(City {
            name: name.to_string(),
            state: state.to_string(),
            zip_prefix: prefix.to_string(),
        });
    }
    Ok(out)
}

impl Pools {
    pub fn bundled() -> Self {
        Self {
            male_first: pool_lines(include_str!("../assets/pools/male_first.txt")),
            female_first: pool_lines(include_str!("../assets/pools/female_first.txt")),
            last: pool_lines(include_str!("../assets/pools/last.txt")),
            streets: pool_lines(include_str!("../assets/pools/streets.txt")),
            cities: parse_cities(include_str!("../assets/pools/cities.txt"), "cities.txt")
                .expect("bundled city pool is well formed"),
            email_domains: pool_lines(include_str!("../assets/pools/email_domains.txt")),
        }
    }

    /// Reads `male_first.txt`, `female_first.txt`, `last.txt`, `streets.txt`,
    /// `cities.txt` and `email_domains.txt` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| SynthError::Io { path, source })
        };
        let pools = Self {
            male_first: pool_lines(&read("male_first.txt")?),
            female_first: pool_lines(&read("female_first.txt")?),
            last: pool_lines(&read("last.txt")?),
            streets: pool_lines(&read("streets.txt")?),
            cities: parse_cities(&read("cities.txt")?, "cities.txt")?,
            email_domains: pool_lines(&read("email_domains.txt")?),
        };
        log::info!(
            "pools from {}: {} male, {} female, {} last names, {} streets, {} cities",
            dir.display(),
            pools.male_first.len(),
            pools.female_first.len(),
            pools.last.len(),
            pools.streets.len(),
            pools.cities.len()
        );
        Ok(pools)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    /// Case-insensitive; blank means unknown.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" => Some(Gender::Male),
            "female" => Some(Gender::Female),
            "unknown" | "" => Some(Gender::Unknown),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedIdentity {
    pub name: String,
    pub phone: String,
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    pub first_name: String,
    pub last_name: String,
    pub street: String,
    pub city: String,
    pub state: String,
    pub zip: String,
}

/// Draws an identity from the pools: a gender-matched first name, a last
/// name, ten uniform phone digits and a street address. Records of unknown
/// gender draw from both first-name pools.
pub fn simulate_identity(
    gender: Gender,
    pools: &Pools,
    seed: u64,
    with_email: bool,
) -> Result<SimulatedIdentity, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = match gender {
        Gender::Male => pools
            .male_first
            .choose(&mut rng)
            .ok_or(SynthError::EmptyPool("male_first"))?,
        Gender::Female => pools
            .female_first
            .choose(&mut rng)
            .ok_or(SynthError::EmptyPool("female_first"))?,
        Gender::Unknown => {
            let n = pools.male_first.len() + pools.female_first.len();
            if n == 0 {
                return Err(SynthError::EmptyPool("first names"));
            }
            let i = rng.random_range(0..n);
            pools
                .male_first
                .get(i)
                .unwrap_or_else(|| &pools.female_first[i - pools.male_first.len()])
        }
    }
    .clone();
    let last = pools
        .last
        .choose(&mut rng)
        .ok_or(SynthError::EmptyPool("last"))?
        .clone();
    let digits: String = (0..10).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
    let phone = format!("{}-{}-{}", &digits[..3], &digits[3..6], &digits[6..]);
    let number = rng.random_range(100..10_000u32);
    let street = format!(
        "{number} {}",
        pools.streets.choose(&mut rng).ok_or(SynthError::EmptyPool("streets"))?
    );
    let city = pools
        .cities
        .choose(&mut rng)
        .ok_or(SynthError::EmptyPool("cities"))?
        .clone();
    let mut zip = city.zip_prefix.clone();
    while zip.len() < 5 {
        zip.push(char::from(b'0' + rng.random_range(0..10u8)));
    }
    let email = if with_email {
        let domain = pools
            .email_domains
            .choose(&mut rng)
            .ok_or(SynthError::EmptyPool("email_domains"))?;
        let local: String = format!("{}.{}", first, last)
            .to_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '.')
            .collect();
        Some(format!("{local}{}@{domain}", rng.random_range(1..100u32)))
    } else {
        None
    };
    Ok(SimulatedIdentity {
        name: format!("{first} {last}"),
        phone,
        address: format!("{street}, {}, {} {zip}", city.name, city.state),
        email,
        first_name: first,
        last_name: last,
        street,
        city: city.name,
        state: city.state,
        zip,
    })
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing `patient` object")]
    MissingPatient,
    #[error("section `{0}` must be an object or a list of objects")]
    BadSection(String),
    #[error("invalid gender `{0}`")]
    InvalidGender(String),
    #[error("field `{field}` is not a `{}` timestamp: `{value}`", RECORD_TIME_FORMAT)]
    BadTimestamp { field: String, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One patient stay: demographics plus clinical rows by section. Field names
/// follow the eICU export; key order is preserved for prompt rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredRecord {
    pub patient: Map<String, Value>,
    pub allergy: Vec<Map<String, Value>>,
    pub diagnosis: Vec<Map<String, Value>>,
    pub lab: Vec<Map<String, Value>>,
    pub medication: Vec<Map<String, Value>>,
    pub treatment: Vec<Map<String, Value>>,
}

fn check_times(map: &Map<String, Value>) -> Result<(), RecordError> {
    for (k, v) in map {
        if !k.ends_with("time") {
            continue;
        }
        if let Value::String(s) = v {
            if !s.is_empty() && chrono::NaiveDateTime::parse_from_str(s, RECORD_TIME_FORMAT).is_err() {
                return Err(RecordError::BadTimestamp {
                    field: k.clone(),
                    value: s.clone(),
                });
            }
        }
    }
    Ok(())
}

fn section_rows(v: Option<&Value>, name: &str) -> Result<Vec<Map<String, Value>>, RecordError> {
    let rows = match v {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Object(m)) => vec![m.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| {
                i.as_object()
                    .cloned()
                    .ok_or_else(|| RecordError::BadSection(name.into()))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(RecordError::BadSection(name.into())),
    };
    for r in &rows {
        check_times(r)?;
    }
    Ok(rows)
}

impl StructuredRecord {
    pub fn from_value(v: &Value) -> Result<Self, RecordError> {
        let obj = v.as_object().ok_or(RecordError::NotAnObject)?;
        let patient = obj
            .get("patient")
            .and_then(Value::as_object)
            .cloned()
            .ok_or(RecordError::MissingPatient)?;
        match patient.get("gender") {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) if Gender::parse(s).is_some() => {}
            Some(other) => return Err(RecordError::InvalidGender(other.to_string())),
        }
        check_times(&patient)?;
        Ok(Self {
            patient,
            allergy: section_rows(obj.get("allergy"), "allergy")?,
            diagnosis: section_rows(obj.get("diagnosis"), "diagnosis")?,
            lab: section_rows(obj.get("lab"), "lab")?,
            medication: section_rows(obj.get("medication"), "medication")?,
            treatment: section_rows(obj.get("treatment"), "treatment")?,
        })
    }

    pub fn gender(&self) -> Gender {
        self.patient
            .get("gender")
            .and_then(Value::as_str)
            .and_then(Gender::parse)
            .unwrap_or(Gender::Unknown)
    }

    fn section(&self, key: &str) -> &[Map<String, Value>] {
        match key {
            "allergy" => &self.allergy,
            "diagnosis" => &self.diagnosis,
            "lab" => &self.lab,
            "medication" => &self.medication,
            _ => &self.treatment,
        }
    }
}

/// One record per line; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<StructuredRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| RecordError::Line { line: i + 1, message };
        let v: Value = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        out.push(StructuredRecord::from_value(&v).map_err(|e| fail(e.to_string()))?);
    }
    Ok(out)
}

pub fn bundled_records() -> Vec<StructuredRecord> {
    read_records(include_str!("../assets/records/sample_records.jsonl").as_bytes()).expect("bundled records are valid")
}

pub fn bundled_exemplars() -> Vec<String> {
    vec![
        include_str!("../assets/exemplars/exemplar_1.txt").trim().to_string(),
        include_str!("../assets/exemplars/exemplar_2.txt").trim().to_string(),
    ]
}

/// The `<INFORMATION>` block: patient demographics with the identity's
/// name, phone and address (and e-mail when simulated) added, then one
/// dictionary per clinical row under its section header.
pub fn render_information(record: &StructuredRecord, identity: &SimulatedIdentity) -> String {
    let mut patient = record.patient.clone();
    patient.insert("name".into(), Value::String(identity.name.clone()));
    patient.insert("phone".into(), Value::String(identity.phone.clone()));
    patient.insert("address".into(), Value::String(identity.address.clone()));
    if let Some(email) = &identity.email {
        patient.insert("email".into(), Value::String(email.clone()));
    }
    let mut out = String::from("PATIENT INFORMATION:\n");
    out.push_str(&python_repr(&Value::Object(patient)));
    for (header, key) in SECTIONS {
        let rows = record.section(key);
        if rows.is_empty() {
            continue;
        }
        out.push('\n');
        out.push_str(header);
        for row in rows {
            out.push('\n');
            out.push_str(&python_repr(&Value::Object(row.clone())));
        }
    }
    out
}

pub fn build_spi_prompt(record: &StructuredRecord, identity: &SimulatedIdentity, exemplar: &str) -> ChatRequest {
    let information = render_information(record, identity);
    let user = render_template(SPI_USER, &[("INFORMATION", &information), ("EXAMPLE", exemplar.trim())]);
    ChatRequest::new(SPI_SYSTEM, user)
        .with_temperature(GENERATION_TEMPERATURE)
        .with_max_output_tokens(GENERATION_MAX_TOKENS)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationParseError {
    #[error("reply has no `PHI:` marker")]
    MissingMarker,
    #[error("reply has an empty note")]
    EmptyNote,
    #[error("PHI block: {0}")]
    Phi(#[from] PhiParseError),
}

fn find_last_ci(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.to_ascii_lowercase();
    hay.rfind(&needle.to_ascii_lowercase())
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

/// Splits a generation reply on its last `PHI:` marker. The note loses a
/// leading `Clinical Note:` label, a trailing comma and wrapping quotes.
pub fn parse_generation(reply: &str) -> Result<(String, PhiDictionary), GenerationParseError> {
    let at = find_last_ci(reply, "PHI:").ok_or(GenerationParseError::MissingMarker)?;
    let (head, tail) = (&reply[..at], &reply[at + 4..]);
    let mut note = head.trim();
    if let Some(rest) = strip_prefix_ci(note, "Clinical Note:") {
        note = rest.trim_start();
    }
    note = note.trim_end().trim_end_matches(',').trim_end();
    for q in ['"', '\''] {
        if note.len() >= 2 && note.starts_with(q) && note.ends_with(q) {
            note = note[1..note.len() - 1].trim();
            break;
        }
    }
    if note.is_empty() {
        return Err(GenerationParseError::EmptyNote);
    }
    let parsed = parse_phi_dictionary_audited(tail, ParseMode::Lenient)?;
    Ok((note.to_string(), parsed.dictionary))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationWarning {
    MentionNotInNote { entity: EntityType, mention: String },
    IdentityFieldMissing { field: String },
}

impl fmt::Display for GenerationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GenerationWarning::MentionNotInNote { entity, mention } => {
                write!(f, "{entity} mention `{mention}` does not occur in the note")
            }
            GenerationWarning::IdentityFieldMissing { field } => {
                write!(f, "identity field `{field}` does not occur in the note")
            }
        }
    }
}

/// Flags claimed mentions that are not in the note and, for structured
/// generation, mandated identity fields the note left out. Comparison is on
/// normalised text.
pub fn validate_generated(
    note: &str,
    phi: &PhiDictionary,
    identity: Option<&SimulatedIdentity>,
) -> Vec<GenerationWarning> {
    let policy = NormalizationPolicy::default();
    let haystack = normalize_mention(note, &policy);
    let present = |s: &str| {
        let n = normalize_mention(s, &policy);
        !n.is_empty() && haystack.contains(&n)
    };
    let mut out: Vec<GenerationWarning> = phi
        .iter()
        .filter(|(_, m)| !present(m))
        .map(|(entity, m)| GenerationWarning::MentionNotInNote {
            entity,
            mention: m.to_string(),
        })
        .collect();
    if let Some(id) = identity {
        for (field, value) in [("name", &id.name), ("phone", &id.phone), ("address", &id.address)] {
            if !present(value) {
                out.push(GenerationWarning::IdentityFieldMissing { field: field.into() });
            }
        }
    }
    out
}

/// Concatenates both corpora and shuffles them with a seeded uniform
/// permutation. Ids that collide get a `~N` suffix.
pub fn mix_corpora(a: Vec<NoteRecord>, b: Vec<NoteRecord>, seed: u64) -> Vec<NoteRecord> {
    let all_ids: HashSet<String> = a.iter().chain(&b).map(|r| r.id.clone()).collect();
    let mut taken: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for mut r in a.into_iter().chain(b) {
        if taken.contains(&r.id) {
            let base = r.id.clone();
            let mut k = 2;
            loop {
                let candidate = format!("{base}~{k}");
                if !taken.contains(&candidate) && !all_ids.contains(&candidate) {
                    log::info!("mix: renamed duplicate id {base} to {candidate}");
                    r.id = candidate;
                    break;
                }
                k += 1;
            }
        }
        taken.insert(r.id.clone());
        out.push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub messages: Vec<ChatMessage>,
}

impl TrainingExample {
    pub fn from_record(record: &NoteRecord) -> Result<Self, ExportError> {
        let phi = record
            .phi
            .as_ref()
            .ok_or_else(|| ExportError::MissingGold(record.id.clone()))?;
        let msg = |role: &str, content: String| ChatMessage {
            role: role.into(),
            content,
        };
        Ok(Self {
            messages: vec![
                msg("system", TASK_SYSTEM.to_string()),
                msg("user", task_user_message(&record.text)),
                msg("assistant", serialize_phi_dictionary(phi)),
            ],
        })
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("record `{0}` has no gold PHI")]
    MissingGold(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes one chat-format example per record. Every record is checked for
/// gold PHI before anything is written.
pub fn export_training_set<W: Write>(corpus: &[NoteRecord], mut out: W) -> Result<usize, ExportError> {
    let examples = corpus
        .iter()
        .map(TrainingExample::from_record)
        .collect::<Result<Vec<_>, _>>()?;
    for e in &examples {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(examples.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Aeg,
    Spi,
}

impl GenerationMode {
    pub fn source(self) -> Source {
        match self {
            GenerationMode::Aeg => Source::Aeg,
            GenerationMode::Spi => Source::Spi,
        }
    }
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenerationMode::Aeg => "aeg",
            GenerationMode::Spi => "spi",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenerationJob {
    Aeg {
        seed: u64,
        exemplars: Vec<String>,
    },
    Spi {
        seed: u64,
        record: Box<StructuredRecord>,
        identity: Box<SimulatedIdentity>,
        exemplar: String,
    },
}

impl GenerationJob {
    pub fn mode(&self) -> GenerationMode {
        match self {
            GenerationJob::Aeg { .. } => GenerationMode::Aeg,
            GenerationJob::Spi { .. } => GenerationMode::Spi,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            GenerationJob::Aeg { seed, .. } | GenerationJob::Spi { seed, .. } => *seed,
        }
    }

    pub fn request(&self) -> ChatRequest {
        match self {
            GenerationJob::Aeg { seed, exemplars } => {
                let refs: Vec<&str> = exemplars.iter().map(String::as_str).collect();
                build_aeg_prompt(&refs).with_seed(*seed)
            }
            GenerationJob::Spi {
                seed,
                record,
                identity,
                exemplar,
            } => build_spi_prompt(record, identity, exemplar).with_seed(*seed),
        }
    }
}

/// `n` example-guided jobs with seeds derived from `master_seed`.
pub fn plan_aeg_jobs(n: usize, master_seed: u64, exemplars: &[String]) -> Vec<GenerationJob> {
    (0..n)
        .map(|i| GenerationJob::Aeg {
            seed: derive_seed(master_seed, i as u64),
            exemplars: exemplars.to_vec(),
        })
        .collect()
}

/// One structured-record job per record. Exemplars rotate by record index.
pub fn plan_spi_jobs(
    records: &[StructuredRecord],
    pools: &Pools,
    exemplars: &[String],
    master_seed: u64,
    with_email: bool,
) -> Result<Vec<GenerationJob>, SynthError> {
    if exemplars.is_empty() {
        return Err(SynthError::NoExemplars);
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let seed = derive_seed(master_seed, i as u64);
            Ok(GenerationJob::Spi {
                seed,
                identity: Box::new(simulate_identity(r.gender(), pools, seed, with_email)?),
                record: Box::new(r.clone()),
                exemplar: exemplars[i % exemplars.len()].clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedNote {
    pub record: NoteRecord,
    pub warnings: Vec<GenerationWarning>,
    pub attempts: u32,
}

pub type GenerateError = RetryError<GenerationParseError>;

/// Runs the jobs with at most `parallelism` calls in flight. Note ids are
/// `<mode>-<position>`, counted from 1 in job order.
pub fn generate(
    jobs: &[GenerationJob],
    transport: &dyn ChatTransport,
    retry: &RetryPolicy,
    parallelism: usize,
) -> Vec<Result<GeneratedNote, GenerateError>> {
    exec::bounded_map(jobs.len(), parallelism, |i| {
        let job = &jobs[i];
        let ((text, phi), attempts) = complete_with_retry(transport, &job.request(), retry, parse_generation)?;
        let identity = match job {
            GenerationJob::Spi { identity, .. } => Some(identity.as_ref()),
            GenerationJob::Aeg { .. } => None,
        };
        let warnings = validate_generated(&text, &phi, identity);
        let id = format!("{}-{:06}", job.mode(), i + 1);
        for w in &warnings {
            log::warn!("{id}: {w}");
        }
        Ok(GeneratedNote {
            record: NoteRecord::new(id, text).with_phi(phi).with_source(job.mode().source()),
            warnings,
            attempts,
        })
    })
}
