//! Generated (note, phi) fixtures. Built from the name pools and local
//! templates only, so they share nothing with the offline responder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lppa_core::synth::{simulate_identity, Gender, Pools, SimulatedIdentity};
use lppa_core::{EntityType, PhiDictionary};

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

const HOSPITALS: &[&str] = &[
    "Mercy General Hospital",
    "Baylor University Medical Center",
    "Parkland Memorial Hospital",
    "Cedar Ridge Clinic",
];

const CONDITIONS: &[&str] = &[
    "acute respiratory failure",
    "community acquired pneumonia",
    "sepsis secondary to urinary tract infection",
    "atrial fibrillation with rapid ventricular response",
    "diabetic ketoacidosis",
];

fn identity(rng: &mut ChaCha8Rng, pools: &Pools) -> SimulatedIdentity {
    let gender = if rng.random_bool(0.5) {
        Gender::Female
    } else {
        Gender::Male
    };
    simulate_identity(gender, pools, rng.random(), true).expect("bundled pools are non-empty")
}

fn ordinal(day: u32) -> String {
    let suffix = match (day % 10, day % 100) {
        (1, 11) | (2, 12) | (3, 13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{day}{suffix}")
}

/// A date or time in one of the forms that show up in generated notes.
fn date_time(rng: &mut ChaCha8Rng) -> String {
    let (y, m, d) = (
        rng.random_range(2015..2025),
        rng.random_range(1..=12usize),
        rng.random_range(1..=28u32),
    );
    let (h, min) = (rng.random_range(1..=12u32), rng.random_range(0..60u32));
    match rng.random_range(0..9) {
        0 => format!("{} {d}, {y}", MONTHS[m - 1]),
        1 => format!("{} {}, {y}", MONTHS[m - 1], ordinal(d)),
        2 => format!("{m}/{d}/{y}"),
        3 => format!("{m:02}/{d:02}/{y}"),
        4 => format!("{y}-{m:02}-{d:02}"),
        5 => format!("2101-{m:02}-{d:02} {:02}:{min:02}:00", h + 8),
        6 => format!("{d} {} {y}", MONTHS[m - 1]),
        7 => format!("{h}:{min:02} {}", if rng.random_bool(0.5) { "AM" } else { "PM" }),
        _ => format!("{} {y}", MONTHS[m - 1]),
    }
}

fn phone(rng: &mut ChaCha8Rng) -> String {
    let (a, b, c) = (
        rng.random_range(201..990u32),
        rng.random_range(200..1000u32),
        rng.random_range(0..10000u32),
    );
    match rng.random_range(0..4) {
        0 => format!("{a}-{b}-{c:04}"),
        1 => format!("({a}) {b}-{c:04}"),
        2 => format!("{a}.{b}.{c:04}"),
        _ => format!("+1 {a}-{b}-{c:04}"),
    }
}

fn url(rng: &mut ChaCha8Rng, id: &SimulatedIdentity) -> String {
    let n = rng.random_range(1000..99999u32);
    match rng.random_range(0..4) {
        0 => format!(
            "https://portal.{}health.org/patients/{n}",
            id.city.to_lowercase().replace(' ', "")
        ),
        1 => format!("http://www.mychart-{n}.com/login"),
        2 => format!("www.{}clinic.com/records?id={n}", id.last_name.to_lowercase()),
        _ => format!("https://telehealth.example.org/visit/{n}"),
    }
}

/// Notes in the shape of structured-record generations: demographics,
/// contact details, visit dates, a patient-portal link.
pub fn spi_style_corpus(n: usize, seed: u64) -> Vec<(String, PhiDictionary)> {
    let pools = Pools::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let id = identity(&mut rng, &pools);
            let mut phi = PhiDictionary::new();
            let age = rng.random_range(19..95u32).to_string();
            let phone = phone(&mut rng);
            let email = id.email.clone().expect("identity drawn with email");
            let admitted = date_time(&mut rng);
            let discharged = date_time(&mut rng);
            let follow_up = date_time(&mut rng);
            let portal = url(&mut rng, &id);
            let hospital = *HOSPITALS.choose(&mut rng).unwrap();
            let condition = *CONDITIONS.choose(&mut rng).unwrap();
            let doctor = pools.last.choose(&mut rng).unwrap().clone();
            let text = format!(
                "Clinical Note\n\nPatient Name: {name}\nAge: {age}\nAddress: {address}\nPhone: {phone}\nEmail: {email}\n\n\
                 History of Present Illness: {name} is a {age}-year-old patient admitted to {hospital} on {admitted} \
                 with {condition}. The patient was seen by Dr. {doctor} and improved with treatment.\n\n\
                 Discharge: Discharged on {discharged}. Follow-up appointment scheduled for {follow_up}. \
                 Results are available at {portal}. For questions call {phone} or write to {email}.",
                name = id.name,
                address = id.address,
            );
            phi.push(EntityType::Person, id.name.clone());
            phi.push(EntityType::Person, id.name.clone());
            phi.push(EntityType::Person, doctor);
            phi.push(EntityType::Age, age.clone());
            phi.push(EntityType::Age, age);
            phi.push(EntityType::Location, id.street.clone());
            phi.push(EntityType::Location, id.city.clone());
            phi.push(EntityType::Location, id.state.clone());
            phi.push(EntityType::Zip, id.zip.clone());
            phi.push(EntityType::PhoneNumber, phone.clone());
            phi.push(EntityType::PhoneNumber, phone);
            phi.push(EntityType::Email, email.clone());
            phi.push(EntityType::Email, email);
            phi.push(EntityType::Organization, hospital);
            phi.push(EntityType::DateTime, admitted);
            phi.push(EntityType::DateTime, discharged);
            phi.push(EntityType::DateTime, follow_up);
            phi.push(EntityType::Url, portal);
            (text, phi)
        })
        .collect()
}

/// Varied notes for de-identification: clauses in random order, repeated
/// and case-shifted mentions, and mentions nested inside longer ones.
pub fn deid_corpus(n: usize, seed: u64) -> Vec<(String, PhiDictionary)> {
    let pools = Pools::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let id = identity(&mut rng, &pools);
            let age = rng.random_range(1..100u32).to_string();
            let when = date_time(&mut rng);
            let phone = phone(&mut rng);
            let hospital = *HOSPITALS.choose(&mut rng).unwrap();
            let mut clauses = vec![
                format!("{} is a {age}-year-old seen at {hospital}.", id.name),
                format!("Mr./Ms. {} was admitted on {when}.", id.last_name),
                format!("Lives at {}.", id.address),
                format!("Call {phone}; email {}.", id.email.as_deref().unwrap_or("none")),
                format!("{} agrees with the plan.", id.first_name),
            ];
            if rng.random_bool(0.3) {
                clauses.push(format!("Signed: {}.", id.name.to_uppercase()));
            }
            if rng.random_bool(0.3) {
                clauses.push(format!("({age} y.o.) reviewed at {hospital}, {when}."));
            }
            for i in (1..clauses.len()).rev() {
                clauses.swap(i, rng.random_range(0..=i));
            }
            let mut phi = PhiDictionary::new()
                .with(EntityType::Person, &[&id.name, &id.last_name, &id.first_name])
                .with(EntityType::Age, &[&age])
                .with(EntityType::DateTime, &[&when])
                .with(EntityType::PhoneNumber, &[&phone])
                .with(EntityType::Organization, &[hospital])
                .with(EntityType::Location, &[&id.street, &id.city])
                .with(EntityType::Zip, &[&id.zip]);
            if let Some(email) = &id.email {
                phi.push(EntityType::Email, email.clone());
            }
            (clauses.join(" "), phi)
        })
        .collect()
}
