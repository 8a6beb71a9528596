//! Entity-level precision/recall/F1 per category and overall, macro-averaged
//! over notes, with paired t-tests between systems.
//!
//! Matching is multiset intersection of normalized mention strings within a
//! category. A note's overall triple is micro-averaged across its categories;
//! corpus scores are the arithmetic mean of per-note triples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::model::{normalize_mention, EntityType, NormalizationPolicy, PhiDictionary};
use crate::stats;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("baseline `{0}` is not among the reports")]
    UnknownBaseline(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TypeCounts {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    #[serde(rename = "pr")]
    pub precision: f64,
    #[serde(rename = "re")]
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub const PERFECT: ScoreTriple = ScoreTriple {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    /// `None` when there is nothing on either side to score.
    pub fn from_counts(c: TypeCounts) -> Option<Self> {
        if c.n_pred == 0 && c.n_gold == 0 {
            return None;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Some(Self::new(ratio(c.tp, c.n_pred), ratio(c.tp, c.n_gold)))
    }
}

fn normalized_counts(mentions: &[String], policy: &NormalizationPolicy) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for m in mentions {
        *counts.entry(normalize_mention(m, policy)).or_insert(0) += 1;
    }
    counts
}

/// Per-category true positives and multiset sizes, for every category
/// present on either side.
pub fn match_counts(
    gold: &PhiDictionary,
    pred: &PhiDictionary,
    policy: &NormalizationPolicy,
) -> BTreeMap<EntityType, TypeCounts> {
    let mut out = BTreeMap::new();
    for entity in EntityType::ALL {
        let (g, p) = (gold.get(entity), pred.get(entity));
        if g.is_empty() && p.is_empty() {
            continue;
        }
        let gc = normalized_counts(g, policy);
        let pc = normalized_counts(p, policy);
        let tp = pc.iter().map(|(k, n)| gc.get(k).map_or(0, |m| (*n).min(*m))).sum();
        out.insert(
            entity,
            TypeCounts {
                tp,
                n_pred: p.len(),
                n_gold: g.len(),
            },
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoteScore {
    /// Only categories with a gold or predicted mention.
    pub per_type: BTreeMap<EntityType, ScoreTriple>,
    pub overall: ScoreTriple,
}

pub fn score_note(gold: &PhiDictionary, pred: &PhiDictionary, policy: &NormalizationPolicy) -> NoteScore {
    let counts = match_counts(gold, pred, policy);
    let per_type = counts
        .iter()
        .filter_map(|(t, c)| ScoreTriple::from_counts(*c).map(|s| (*t, s)))
        .collect();
    let total = counts.values().fold(TypeCounts::default(), |acc, c| TypeCounts {
        tp: acc.tp + c.tp,
        n_pred: acc.n_pred + c.n_pred,
        n_gold: acc.n_gold + c.n_gold,
    });
    // A note with no PHI and no predictions is a correct outcome.
    let overall = ScoreTriple::from_counts(total).unwrap_or(ScoreTriple::PERFECT);
    NoteScore { per_type, overall }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Every category; `None` marks a category the system never predicted.
    pub per_type: BTreeMap<EntityType, Option<ScoreTriple>>,
    pub overall: ScoreTriple,
    pub n_notes: usize,
    pub per_note_overall_f1: Vec<f64>,
    /// Gold mention totals per category, used to pick report columns.
    #[serde(default)]
    pub gold_mentions: BTreeMap<EntityType, usize>,
}

impl EvalReport {
    pub fn is_absent(&self, entity: EntityType) -> bool {
        self.per_type.get(&entity).is_none_or(Option::is_none)
    }
}

fn mean_triple(triples: &[ScoreTriple]) -> ScoreTriple {
    let n = triples.len() as f64;
    let (p, r, f) = triples.iter().fold((0.0, 0.0, 0.0), |(p, r, f), t| {
        (p + t.precision, r + t.recall, f + t.f1)
    });
    ScoreTriple {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

pub fn score_corpus(
    pairs: &[(PhiDictionary, PhiDictionary)],
    policy: &NormalizationPolicy,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let notes = exec::map_slice(exec, pairs, |(g, p)| score_note(g, p, policy));

    let mut per_type = BTreeMap::new();
    let mut gold_mentions = BTreeMap::new();
    for entity in EntityType::ALL {
        let predicted: usize = pairs.iter().map(|(_, p)| p.get(entity).len()).sum();
        let gold: usize = pairs.iter().map(|(g, _)| g.get(entity).len()).sum();
        if gold > 0 {
            gold_mentions.insert(entity, gold);
        }
        let score = (predicted > 0).then(|| {
            let scored: Vec<ScoreTriple> = notes.iter().filter_map(|n| n.per_type.get(&entity).copied()).collect();
            mean_triple(&scored)
        });
        per_type.insert(entity, score);
    }
    let overall: Vec<ScoreTriple> = notes.iter().map(|n| n.overall).collect();
    Ok(EvalReport {
        per_type,
        overall: mean_triple(&overall),
        n_notes: pairs.len(),
        per_note_overall_f1: overall.iter().map(|t| t.f1).collect(),
        gold_mentions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTestResult {
    /// `None` when every difference is zero.
    pub t: Option<f64>,
    pub p: f64,
    pub significant: bool,
    pub n_pairs: usize,
}

/// Two-tailed paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (None, 1.0)
        } else {
            (Some(f64::INFINITY.copysign(mean)), 0.0)
        }
    } else {
        let t = mean * (n as f64).sqrt() / sd;
        (Some(t), stats::student_t_two_tailed(t, (n - 1) as f64))
    };
    Ok(TTestResult {
        t,
        p,
        significant: t.is_some() && p < SIGNIFICANCE_LEVEL,
        n_pairs: n,
    })
}

/// Render a pipe-delimited comparison table.
///
/// Columns are Overall plus every category that has gold mentions or
/// predictions in any report. Absent categories print `/`; an overall F1
/// whose paired t-test against the baseline is significant gets a `*`.
pub fn render_report(reports: &[(String, EvalReport)], baseline: &str) -> Result<String, EvalError> {
    let base = reports
        .iter()
        .find(|(name, _)| name == baseline)
        .map(|(_, r)| r)
        .ok_or_else(|| EvalError::UnknownBaseline(baseline.to_string()))?;

    let columns: Vec<EntityType> = EntityType::ALL
        .into_iter()
        .filter(|t| {
            reports
                .iter()
                .any(|(_, r)| r.gold_mentions.contains_key(t) || !r.is_absent(*t))
        })
        .collect();

    let mut out = String::from("System | Overall Pr | Overall Re | Overall F1");
    for t in &columns {
        write!(out, " | {t} Pr | {t} Re | {t} F1").unwrap();
    }
    out.push('\n');
    for (name, report) in reports {
        let star = if name == baseline {
            false
        } else {
            paired_t_test(&report.per_note_overall_f1, &base.per_note_overall_f1)?.significant
        };
        let o = report.overall;
        write!(
            out,
            "{name} | {:.2} | {:.2} | {:.2}{}",
            o.precision,
            o.recall,
            o.f1,
            if star { "*" } else { "" }
        )
        .unwrap();
        for t in &columns {
            match report.per_type.get(t).copied().flatten() {
                Some(s) => write!(out, " | {:.2} | {:.2} | {:.2}", s.precision, s.recall, s.f1).unwrap(),
                None => out.push_str(" | / | / | /"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
