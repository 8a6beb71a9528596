//! A local stand-in for the chat endpoint. It answers the three fixed
//! prompts without any network access: annotation requests with the rule
//! tagger, generation requests with templated notes. Replies are a pure
//! function of the request, which makes whole pipelines reproducible
//! offline.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::model::{EntityType, PhiDictionary};
use crate::prompts::{note_from_task_user, ChatRequest, AEG_SYSTEM, SPI_SYSTEM, TASK_SYSTEM};
use crate::rules::Ruleset;
use crate::synth::{simulate_identity, Gender, Pools, SimulatedIdentity};
use crate::transport::{request_key, ChatTransport, TransportError};

const ORGANIZATIONS: &[&str] = &[
    "Mercy General Hospital",
    "Riverside Regional Medical Center",
    "St. Luke's Medical Center",
    "Lakeside Community Hospital",
    "Northwestern Memorial Hospital",
    "Valley Health Clinic",
];

const PROFESSIONS: &[&str] = &[
    "teacher",
    "electrician",
    "accountant",
    "nurse",
    "truck driver",
    "software engineer",
];

const RELATIONS: &[&str] = &["daughter", "son", "wife", "husband", "sister", "brother"];

/// (chief complaint, assessment, plan)
const PRESENTATIONS: &[(&str, &str, &str)] = &[
    (
        "Chest Pain",
        "non-ST elevation myocardial infarction",
        "Started aspirin, heparin drip and atorvastatin; cardiology to evaluate for catheterization.",
    ),
    (
        "Shortness of Breath",
        "acute exacerbation of congestive heart failure",
        "IV furosemide with strict intake and output; repeat echocardiogram.",
    ),
    (
        "Fall",
        "right hip fracture after mechanical fall",
        "Orthopedics consulted; pain control with acetaminophen; DVT prophylaxis with enoxaparin.",
    ),
    (
        "Fever and Cough",
        "community acquired pneumonia",
        "Ceftriaxone and azithromycin; blood cultures pending; incentive spirometry.",
    ),
    (
        "Abdominal Pain",
        "acute pancreatitis",
        "NPO, aggressive IV fluids, pain control; lipase trend and right upper quadrant ultrasound.",
    ),
];

const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

pub struct OfflineResponder {
    rules: Ruleset,
    pools: Pools,
    spi_field: Regex,
}

impl Default for OfflineResponder {
    fn default() -> Self {
        Self::new(Ruleset::bundled(), Pools::bundled())
    }
}

impl OfflineResponder {
    pub fn new(rules: Ruleset, pools: Pools) -> Self {
        Self {
            rules,
            pools,
            spi_field: Regex::new(r#"'(name|phone|address|gender|age|diagnosisname)': (?:'([^']*)'|"([^"]*)"|(\d+))"#)
                .expect("static regex"),
        }
    }

    fn seed_of(request: &ChatRequest) -> u64 {
        request.seed.unwrap_or_else(|| {
            let key = request_key(request);
            u64::from_str_radix(&key[..16], 16).expect("hex digest")
        })
    }

    fn annotate(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let note = note_from_task_user(&request.user)
            .ok_or_else(|| TransportError::Unsupported("annotation prompt does not use the task template".into()))?;
        Ok(self.rules.tag(note).to_json())
    }

    fn generate_aeg(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let seed = Self::seed_of(request);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gender = if rng.random_bool(0.5) {
            Gender::Female
        } else {
            Gender::Male
        };
        let identity = simulate_identity(gender, &self.pools, rng.random(), true)
            .map_err(|e| TransportError::Unsupported(e.to_string()))?;
        let age = rng.random_range(18..90u32).to_string();
        let (note, phi) = self.compose(&mut rng, &identity, gender, &age, None);
        Ok(format!("Clinical Note: \"{note}\", PHI: {}", phi.to_json()))
    }

    fn generate_spi(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut fields = std::collections::HashMap::new();
        for c in self.spi_field.captures_iter(&request.user) {
            let value = c
                .get(2)
                .or_else(|| c.get(3))
                .or_else(|| c.get(4))
                .map_or("", |m| m.as_str());
            fields.entry(c[1].to_string()).or_insert_with(|| value.to_string());
        }
        let get = |k: &str| fields.get(k).cloned().unwrap_or_default();
        let address = Regex::new(r"^(.+?), (.+?), ([A-Z]{2}) (\d{5})$").expect("static regex");
        let addr = get("address");
        let caps = address
            .captures(&addr)
            .ok_or_else(|| TransportError::Unsupported(format!("cannot read address `{addr}`")))?;
        let name = get("name");
        let (first, last) = name.split_once(' ').unwrap_or((name.as_str(), ""));
        let identity = SimulatedIdentity {
            name: name.clone(),
            phone: get("phone"),
            address: addr.clone(),
            email: None,
            first_name: first.to_string(),
            last_name: last.to_string(),
            street: caps[1].to_string(),
            city: caps[2].to_string(),
            state: caps[3].to_string(),
            zip: caps[4].to_string(),
        };
        let gender = Gender::parse(&get("gender")).unwrap_or(Gender::Unknown);
        let mut rng = ChaCha8Rng::seed_from_u64(Self::seed_of(request));
        let mut age = get("age");
        if age.is_empty() {
            age = rng.random_range(18..90u32).to_string();
        }
        let diagnosis = fields.get("diagnosisname").cloned();
        let (note, phi) = self.compose(&mut rng, &identity, gender, &age, diagnosis.as_deref());
        Ok(format!("Clinical note: {note}\nPHI: {}", phi.to_json()))
    }

    fn compose(
        &self,
        rng: &mut ChaCha8Rng,
        id: &SimulatedIdentity,
        gender: Gender,
        age: &str,
        diagnosis: Option<&str>,
    ) -> (String, PhiDictionary) {
        let mut phi = PhiDictionary::new();
        let (complaint, assessment, plan) = *PRESENTATIONS.choose(rng).expect("non-empty");
        let assessment = diagnosis.unwrap_or(assessment);
        let org = *ORGANIZATIONS.choose(rng).expect("non-empty");
        let doctor = self.pools.last.choose(rng).cloned().unwrap_or_else(|| "Smith".into());
        let relation = *RELATIONS.choose(rng).expect("non-empty");
        let profession = *PROFESSIONS.choose(rng).expect("non-empty");
        let year = rng.random_range(2018..2025u32);
        let month = rng.random_range(1..=12usize);
        let day = rng.random_range(1..=28u32);
        let date = format!("{} {day}, {year}", MONTHS[month - 1]);
        let follow_up = format!("{}/{}/{}", (month % 12) + 1, day, year);
        let mrn = rng.random_range(1_000_000..10_000_000u32).to_string();
        let email = id.email.clone().unwrap_or_else(|| {
            let domain = self
                .pools
                .email_domains
                .choose(rng)
                .cloned()
                .unwrap_or_else(|| "gmail.com".into());
            let local: String = id
                .name
                .to_lowercase()
                .chars()
                .map(|c| if c == ' ' { '.' } else { c })
                .filter(|c| c.is_ascii_alphanumeric() || *c == '.')
                .collect();
            format!("{local}@{domain}")
        });
        let (noun, pronoun) = match gender {
            Gender::Male => ("male", "He"),
            Gender::Female => ("female", "She"),
            Gender::Unknown => ("patient", "The patient"),
        };
        let note = format!(
            "Chief Complaint: {complaint}. History of Present Illness: {name} is a {age} y.o. {noun} who \
             presented to {org} on {date}. {pronoun} works as {article} {profession} and lives at {street}, {city}, \
             {state} {zip}. {pronoun} was accompanied by a {relation}. Assessment: {assessment}. Plan: {plan} \
             Attending physician: Dr. {doctor}. MRN: {mrn}. Contact: {phone}, {email}. Follow-up visit on \
             {follow_up}.",
            name = id.name,
            article = if profession.starts_with(['a', 'e', 'i', 'o', 'u']) {
                "an"
            } else {
                "a"
            },
            street = id.street,
            city = id.city,
            state = id.state,
            zip = id.zip,
            phone = id.phone,
        );
        phi.push(EntityType::Person, id.name.clone());
        phi.push(EntityType::Person, doctor);
        phi.push(EntityType::Age, age.to_string());
        phi.push(EntityType::Organization, org);
        phi.push(EntityType::DateTime, date);
        phi.push(EntityType::DateTime, follow_up);
        phi.push(EntityType::Profession, profession);
        phi.push(EntityType::Location, id.street.clone());
        phi.push(EntityType::Location, id.city.clone());
        phi.push(EntityType::Location, id.state.clone());
        phi.push(EntityType::Zip, id.zip.clone());
        phi.push(EntityType::Id, mrn);
        phi.push(EntityType::PhoneNumber, id.phone.clone());
        phi.push(EntityType::Email, email);
        (note, phi)
    }
}

impl ChatTransport for OfflineResponder {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        if request.system == TASK_SYSTEM {
            self.annotate(request)
        } else if request.system == AEG_SYSTEM {
            self.generate_aeg(request)
        } else if request.system == SPI_SYSTEM {
            self.generate_spi(request)
        } else {
            Err(TransportError::Unsupported(
                "the offline responder only answers the bundled prompts".into(),
            ))
        }
    }

    fn destination(&self) -> String {
        "offline".into()
    }
}
