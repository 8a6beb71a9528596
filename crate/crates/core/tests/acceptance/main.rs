//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod fixtures;
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lppa_core::annotate::RetryPolicy;
use lppa_core::cost::{estimate_cost, PricingConfig};
use lppa_core::deid::{deidentify, verify_clean, DeidPolicy};
use lppa_core::eval::{paired_t_test, render_report, score_corpus, score_note};
use lppa_core::model::{read_corpus, write_corpus};
use lppa_core::prompts::{
    build_aeg_prompt, build_task_prompt, task_user_message, ChatRequest, AEG_SYSTEM, TASK_SYSTEM,
};
use lppa_core::quality::{corpus_entropy, medical_plausibility, perplexity, self_bleu, NGramLm, Ontology};
use lppa_core::rules::{tag_corpus, Ruleset};
use lppa_core::synth::{
    build_spi_prompt, bundled_exemplars, bundled_records, export_training_set, generate, mix_corpora, plan_aeg_jobs,
    plan_spi_jobs, Pools, SimulatedIdentity, TrainingExample,
};
use lppa_core::transport::{ChatTransport, TransportError};
use lppa_core::{parse_phi_dictionary, EntityType, Execution, NormalizationPolicy, NoteRecord, PhiDictionary};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: &[Check] = &[
        ("metric oracle equivalence", metric_oracle),
        ("deid completeness", deid_completeness),
        ("prompt golden files", prompt_golden),
        ("synthqual analytic cases", synthqual_analytic),
        ("t-test oracle", t_test_oracle),
        ("pipeline determinism", pipeline_determinism),
        ("rule-tagger regression", rule_tagger_regression),
        ("cost arithmetic", cost_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_dictionary(rng: &mut ChaCha8Rng) -> PhiDictionary {
    const POOL: &[&str] = &[
        "John Doe",
        "john  doe",
        "Smith",
        "SMITH.",
        "45",
        "May 3, 2023",
        "(555) 123-4567",
        "x",
    ];
    let types = [
        EntityType::Person,
        EntityType::Age,
        EntityType::DateTime,
        EntityType::PhoneNumber,
        EntityType::Zip,
    ];
    let mut d = PhiDictionary::new();
    for _ in 0..rng.random_range(0..7) {
        d.push(*types.choose(rng).unwrap(), *POOL.choose(rng).unwrap());
    }
    d
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let pairs: Vec<(PhiDictionary, PhiDictionary)> = (0..200)
        .map(|_| (random_dictionary(&mut rng), random_dictionary(&mut rng)))
        .collect();
    for policy in [NormalizationPolicy::all(), NormalizationPolicy::exact()] {
        for (i, (g, p)) in pairs.iter().enumerate() {
            let got = score_note(g, p, &policy);
            let want = oracle::score_note(g, p, &policy);
            let o = got.overall;
            ensure!(
                (o.precision, o.recall, o.f1) == (want.overall.p, want.overall.r, want.overall.f),
                "pair {i}: overall {o:?} vs {:?}",
                want.overall
            );
            ensure!(
                got.per_type.len() == want.per_type.len(),
                "pair {i}: category sets differ"
            );
            for (e, w) in &want.per_type {
                let s = got.per_type[e];
                ensure!(
                    (s.precision, s.recall, s.f1) == (w.p, w.r, w.f),
                    "pair {i} {e}: {s:?} vs {w:?}"
                );
            }
        }
        let want = oracle::score_corpus(&pairs, &policy);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let got = score_corpus(&pairs, &policy, exec).map_err(|e| e.to_string())?;
            let o = got.overall;
            ensure!(
                (o.precision, o.recall, o.f1) == (want.overall.p, want.overall.r, want.overall.f),
                "corpus overall {o:?} vs {:?}",
                want.overall
            );
            for (e, w) in &want.per_type {
                let g = got.per_type[e].map(|s| (s.precision, s.recall, s.f1));
                ensure!(g == w.map(|w| (w.p, w.r, w.f)), "corpus {e}: {g:?} vs {w:?}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("200 pairs x 2 policies exact, {elapsed:.2?}"))
}

fn deid_completeness() -> Outcome {
    let policy = DeidPolicy::default();
    let corpus = fixtures::deid_corpus(500, 500);
    for (i, (text, phi)) in corpus.iter().enumerate() {
        let once = deidentify(text, phi, &policy);
        let findings = verify_clean(&once, phi, &policy);
        ensure!(findings.is_empty(), "fixture {i}: {findings:?}\n{text}\n{}", once.text);
        let twice = deidentify(&once.text, phi, &policy);
        ensure!(
            twice.text == once.text,
            "fixture {i} not idempotent:\n{}\n{}",
            once.text,
            twice.text
        );
    }
    let phi = PhiDictionary::new()
        .with(EntityType::Person, &["John Doe"])
        .with(EntityType::Age, &["45"])
        .with(EntityType::DateTime, &["May 3, 2023"]);
    let out = deidentify(
        "John Doe, a 45-year-old male, was diagnosed with hypertension on May 3, 2023",
        &phi,
        &policy,
    );
    let want = "[PERSON], a [AGE]-year-old male, was diagnosed with hypertension on [DATE_TIME]";
    ensure!(out.text == want, "got {:?}", out.text);
    Ok("500 fixtures clean and idempotent; example sentence exact".into())
}

fn prompt_golden() -> Outcome {
    let task = build_task_prompt("X");
    ensure!(
        task.system == include_str!("../golden/task_system.txt"),
        "task system prompt differs"
    );
    ensure!(
        task.user == include_str!("../golden/task_user_note_X.txt"),
        "task user prompt differs"
    );
    let aeg = build_aeg_prompt(&[]);
    ensure!(
        aeg.system == include_str!("../golden/aeg_system.txt"),
        "aeg system prompt differs"
    );
    ensure!(
        aeg.user == include_str!("../golden/aeg_user.txt"),
        "aeg user prompt differs"
    );
    let identity = SimulatedIdentity {
        name: "Isla Wilson".into(),
        phone: "958-780-1849".into(),
        address: "5687 Cedar Boulevard, Dallas, TX 75250".into(),
        email: None,
        first_name: "Isla".into(),
        last_name: "Wilson".into(),
        street: "5687 Cedar Boulevard".into(),
        city: "Dallas".into(),
        state: "TX".into(),
        zip: "75250".into(),
    };
    let exemplar = "Chief Complaint: Cardiac Arrest History Of Present Illness: [PERSON] is a [AGE] y.o. male with \
                    no known medical history brought in by EMS following cardiac arrest during intercourse...";
    let spi = build_spi_prompt(&bundled_records()[0], &identity, exemplar);
    ensure!(
        spi.system == include_str!("../golden/spi_system.txt"),
        "spi system prompt differs"
    );
    let golden_spi = include_str!("../golden/spi_user.txt");
    ensure!(spi.user == golden_spi, "spi user prompt differs");
    for marker in [
        "<INFORMATION>",
        "<END OF INFORMATION>",
        "<EXAMPLE>",
        "<END OF EXAMPLE>",
        "(End of Example)",
    ] {
        ensure!(spi.user.contains(marker), "missing marker {marker}");
    }
    ensure!(
        spi.user.contains("there are two special cases"),
        "missing PERSON special cases"
    );
    Ok("task, aeg and spi prompts byte-identical".into())
}

fn synthqual_analytic() -> Outcome {
    let same = vec!["The patient is a 69 y.o. female with acute respiratory failure."; 6];
    let bleu = self_bleu(&same, 4, Execution::Parallel).map_err(|e| e.to_string())?;
    ensure!((bleu - 1.0).abs() <= 1e-9, "self-BLEU {bleu}");

    let mut worst_h = 0.0f64;
    for k in [1usize, 2, 3, 7, 16, 100] {
        let words: Vec<String> = (0..k).map(|i| format!("w{i}")).collect();
        let note = vec![words.join(" "); 3].join(" ");
        let h = corpus_entropy(&[note.as_str(), note.as_str()]).map_err(|e| e.to_string())?;
        let err = (h - (k as f64).log2()).abs();
        ensure!(err <= 1e-9, "k={k}: entropy {h}");
        worst_h = worst_h.max(err);
    }

    let words: Vec<String> = (0..50).map(|i| format!("term{i}")).collect();
    let lm = NGramLm::uniform(1, &words, 0.1).map_err(|e| e.to_string())?;
    let v = lm.vocab_size() as f64;
    let text = ["term1 term7 term7 unseen words here", "term49"];
    let ppl = perplexity(&text, &lm, Execution::Sequential).map_err(|e| e.to_string())?;
    ensure!((ppl - v).abs() <= 1e-6, "perplexity {ppl} vs V={v}");

    let ontology = Ontology::bundled();
    let mut notes: Vec<String> = (0..9)
        .map(|i| format!("Note {i}: admitted with pneumonia and treated with antibiotics."))
        .collect();
    notes.push("Note 9: routine paperwork only.".into());
    ensure!(!ontology.matches(&notes[9]), "control note matched the ontology");
    let plaus = medical_plausibility(&notes, &ontology, Execution::Parallel).map_err(|e| e.to_string())?;
    ensure!(plaus == 0.9, "plausibility {plaus}");
    Ok(format!(
        "bleu {bleu}, max entropy error {worst_h:.1e}, perplexity {ppl} (V={v}), plausibility {plaus}"
    ))
}

fn t_test_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = rng.random_range(3..60);
        let shift = rng.random_range(-0.2..0.2);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + shift + rng.random_range(-0.3..0.3)).collect();
        let got = paired_t_test(&a, &b).map_err(|e| e.to_string())?;
        let want = oracle::paired_p(&a, &b);
        let err = (got.p - want).abs();
        ensure!(err <= 1e-6, "sample {i} (n={n}): p {} vs {want}", got.p);
        worst = worst.max(err);
    }

    let f1 = vec![0.5, 0.75, 1.0, 0.25];
    let zero = paired_t_test(&f1, &f1).map_err(|e| e.to_string())?;
    ensure!(zero.p == 1.0 && !zero.significant, "zero difference gave {zero:?}");
    let pairs: Vec<(PhiDictionary, PhiDictionary)> = (0..4)
        .map(|i| {
            let d = PhiDictionary::new().with(EntityType::Person, &[["A", "B", "C", "D"][i]]);
            (d.clone(), d)
        })
        .collect();
    let report = score_corpus(&pairs, &NormalizationPolicy::default(), Execution::Sequential).unwrap();
    let table = render_report(&[("base".into(), report.clone()), ("same".into(), report)], "base")
        .map_err(|e| e.to_string())?;
    ensure!(!table.contains('*'), "identical systems starred:\n{table}");
    Ok(format!(
        "50 samples, max |p - ref| {worst:.1e}; zero difference p=1, no star"
    ))
}

/// Replies to generation prompts from a fixed script keyed by the request
/// seed.
struct ScriptedGenerator;

impl ChatTransport for ScriptedGenerator {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let seed = request
            .seed
            .ok_or_else(|| TransportError::Unsupported("unseeded request".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = ["Emily Turner", "Raj Patel", "Maria Lopez", "Tom O'Brien"];
        let name = *names.choose(&mut rng).unwrap();
        let age = rng.random_range(20..90u32);
        let phone = format!(
            "555-{:03}-{:04}",
            rng.random_range(100..1000u32),
            rng.random_range(0..10000u32)
        );
        let note = format!(
            "{name}, a {age}-year-old patient, was seen on March {}, 2023 at Midtown Medical Center. \
             Contact: {phone}. Case {seed:016x}.",
            rng.random_range(1..29u32)
        );
        let date = note
            .split(" was seen on ")
            .nth(1)
            .unwrap()
            .split(" at ")
            .next()
            .unwrap()
            .to_string();
        let phi = PhiDictionary::new()
            .with(EntityType::Person, &[name])
            .with(EntityType::Age, &[&age.to_string()])
            .with(EntityType::DateTime, &[&date])
            .with(EntityType::Organization, &["Midtown Medical Center"])
            .with(EntityType::PhoneNumber, &[&phone]);
        Ok(if request.system == AEG_SYSTEM {
            format!("Clinical Note: \"{note}\", PHI: {}", phi.to_json())
        } else {
            format!("Clinical note: {note}\nPHI: {}", phi.to_json())
        })
    }

    fn destination(&self) -> String {
        "scripted".into()
    }
}

struct PipelineOutput {
    aeg: Vec<u8>,
    spi: Vec<u8>,
    mixed: Vec<u8>,
    export: Vec<u8>,
    exported: usize,
}

fn run_pipeline(per_mode: usize, seed: u64, parallelism: usize) -> Result<PipelineOutput, String> {
    let retry = RetryPolicy {
        backoff_base: Duration::ZERO,
        ..RetryPolicy::default()
    };
    let exemplars = bundled_exemplars();
    let aeg_jobs = plan_aeg_jobs(per_mode, seed, &exemplars[..1]);
    let records: Vec<_> = bundled_records().into_iter().cycle().take(per_mode).collect();
    let spi_jobs = plan_spi_jobs(&records, &Pools::bundled(), &exemplars, seed, false).map_err(|e| e.to_string())?;
    let collect = |jobs| -> Result<Vec<NoteRecord>, String> {
        generate(jobs, &ScriptedGenerator, &retry, parallelism)
            .into_iter()
            .map(|r| r.map(|g| g.record).map_err(|e| e.to_string()))
            .collect()
    };
    let aeg = collect(&aeg_jobs)?;
    let spi = collect(&spi_jobs)?;
    let mut out = PipelineOutput {
        aeg: Vec::new(),
        spi: Vec::new(),
        mixed: Vec::new(),
        export: Vec::new(),
        exported: 0,
    };
    write_corpus(&mut out.aeg, &aeg).map_err(|e| e.to_string())?;
    write_corpus(&mut out.spi, &spi).map_err(|e| e.to_string())?;
    let mixed = mix_corpora(aeg, spi, seed);
    write_corpus(&mut out.mixed, &mixed).map_err(|e| e.to_string())?;
    out.exported = export_training_set(&mixed, &mut out.export).map_err(|e| e.to_string())?;
    Ok(out)
}

fn pipeline_determinism() -> Outcome {
    let a = run_pipeline(2000, 42, 1)?;
    let b = run_pipeline(2000, 42, 8)?;
    ensure!(a.aeg == b.aeg, "aeg corpus differs between runs");
    ensure!(a.spi == b.spi, "spi corpus differs between runs");
    ensure!(a.mixed == b.mixed, "mixed corpus differs between runs");
    ensure!(a.export == b.export, "export differs between runs");
    let other = run_pipeline(50, 43, 4)?;
    ensure!(other.mixed[..200] != a.mixed[..200], "seed has no effect");

    let text = String::from_utf8(a.export).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    ensure!(
        a.exported == 4000 && lines.len() == 4000,
        "{} exported, {} lines",
        a.exported,
        lines.len()
    );
    let mixed = read_corpus(a.mixed.as_slice()).map_err(|e| e.to_string())?;
    ensure!(mixed.len() == 4000, "mixed corpus has {} records", mixed.len());
    for (i, (line, record)) in lines.iter().zip(&mixed).enumerate() {
        let ex: TrainingExample = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let roles: Vec<&str> = ex.messages.iter().map(|m| m.role.as_str()).collect();
        ensure!(
            roles == ["system", "user", "assistant"],
            "line {}: roles {roles:?}",
            i + 1
        );
        ensure!(ex.messages[0].content == TASK_SYSTEM, "line {}: system prompt", i + 1);
        ensure!(
            ex.messages[1].content == task_user_message(&record.text),
            "line {}: user message",
            i + 1
        );
        let phi = parse_phi_dictionary(&ex.messages[2].content, true).map_err(|e| format!("line {}: {e}", i + 1))?;
        ensure!(
            Some(&phi) == record.phi.as_ref(),
            "line {}: assistant PHI does not round-trip",
            i + 1
        );
    }
    Ok("two runs byte-identical; 4000 lines, every assistant message round-trips".into())
}

fn rule_tagger_regression() -> Outcome {
    let corpus = fixtures::spi_style_corpus(500, 7);
    let notes: Vec<NoteRecord> = corpus
        .iter()
        .enumerate()
        .map(|(i, (t, _))| NoteRecord::new(format!("n{i}"), t.clone()))
        .collect();
    let policy = NormalizationPolicy::default();
    let full = tag_corpus(&notes, &Ruleset::bundled(), Execution::Parallel);

    let recall = |entity: EntityType, preds: &[PhiDictionary]| {
        let (mut tp, mut gold) = (0, 0);
        for ((_, g), p) in corpus.iter().zip(preds) {
            tp += oracle::intersection(g.get(entity), p.get(entity), &policy);
            gold += g.get(entity).len();
        }
        tp as f64 / gold as f64
    };
    let mut summary = Vec::new();
    let mut shortfalls = Vec::new();
    for (entity, floor) in [
        (EntityType::PhoneNumber, 0.95),
        (EntityType::Email, 0.95),
        (EntityType::Zip, 0.95),
        (EntityType::Url, 0.95),
        (EntityType::DateTime, 0.80),
    ] {
        let r = recall(entity, &full);
        summary.push(format!("{entity} {r:.3}"));
        if r < floor {
            shortfalls.push(format!("{entity} {r:.3} < {floor}"));
        }
    }
    ensure!(shortfalls.is_empty(), "{}", shortfalls.join(", "));

    let no_age = tag_corpus(
        &notes,
        &Ruleset::bundled().without(EntityType::Age),
        Execution::Parallel,
    );
    let pairs = |preds: &[PhiDictionary]| -> Vec<(PhiDictionary, PhiDictionary)> {
        corpus
            .iter()
            .zip(preds)
            .map(|((_, g), p)| (g.clone(), p.clone()))
            .collect()
    };
    let with = score_corpus(&pairs(&full), &policy, Execution::Parallel).map_err(|e| e.to_string())?;
    let without = score_corpus(&pairs(&no_age), &policy, Execution::Parallel).map_err(|e| e.to_string())?;
    let table = render_report(&[("rules".into(), with), ("rules-no-age".into(), without)], "rules")
        .map_err(|e| e.to_string())?;
    let header: Vec<&str> = table.lines().next().unwrap().split(" | ").collect();
    let row: Vec<&str> = table
        .lines()
        .find(|l| l.starts_with("rules-no-age "))
        .unwrap()
        .split(" | ")
        .collect();
    let age_f1 = header.iter().position(|h| *h == "AGE F1").ok_or("no AGE column")?;
    ensure!(
        row[age_f1 - 2..=age_f1] == ["/", "/", "/"],
        "AGE cells {:?}",
        &row[age_f1 - 2..=age_f1]
    );
    Ok(format!(
        "recall {}; AGE renders / without an AGE rule",
        summary.join(", ")
    ))
}

fn cost_arithmetic() -> Outcome {
    let pricing = PricingConfig::new("model", 0.01, 0.03).map_err(|e| e.to_string())?;
    let est = estimate_cost(4000, 1600, 500, &pricing);
    ensure!(est.input_tokens == 6_400_000, "input tokens {}", est.input_tokens);
    ensure!(est.output_tokens == 2_000_000, "output tokens {}", est.output_tokens);
    ensure!(est.n_calls == 4000, "calls {}", est.n_calls);
    Ok(format!("6.4M input / 2.0M output tokens, ${:.2}", est.total_cost))
}
