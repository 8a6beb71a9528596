//! Reference implementations written from the metric definitions, sharing
//! no code with the library.

use statrs::distribution::{ContinuousCDF, StudentsT};

use lppa_core::{normalize_mention, EntityType, NormalizationPolicy, PhiDictionary};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

fn prf(tp: usize, n_pred: usize, n_gold: usize) -> Prf {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Prf { p, r, f }
}

/// Size of the multiset intersection, by removing matched gold items one
/// at a time.
pub fn intersection(gold: &[String], pred: &[String], policy: &NormalizationPolicy) -> usize {
    let mut pool: Vec<String> = gold.iter().map(|g| normalize_mention(g, policy)).collect();
    let mut tp = 0;
    for p in pred {
        let p = normalize_mention(p, policy);
        if let Some(i) = pool.iter().position(|g| *g == p) {
            pool.swap_remove(i);
            tp += 1;
        }
    }
    tp
}

pub struct NoteOracle {
    pub overall: Prf,
    pub per_type: Vec<(EntityType, Prf)>,
}

pub fn score_note(gold: &PhiDictionary, pred: &PhiDictionary, policy: &NormalizationPolicy) -> NoteOracle {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let mut per_type = Vec::new();
    for e in EntityType::ALL {
        let (g, p) = (gold.get(e), pred.get(e));
        if g.is_empty() && p.is_empty() {
            continue;
        }
        let t = intersection(g, p, policy);
        per_type.push((e, prf(t, p.len(), g.len())));
        tp += t;
        np += p.len();
        ng += g.len();
    }
    let overall = if np == 0 && ng == 0 {
        Prf { p: 1.0, r: 1.0, f: 1.0 }
    } else {
        prf(tp, np, ng)
    };
    NoteOracle { overall, per_type }
}

fn mean(xs: &[Prf]) -> Prf {
    let n = xs.len() as f64;
    let mut acc = (0.0, 0.0, 0.0);
    for x in xs {
        acc.0 += x.p;
        acc.1 += x.r;
        acc.2 += x.f;
    }
    Prf {
        p: acc.0 / n,
        r: acc.1 / n,
        f: acc.2 / n,
    }
}

pub struct CorpusOracle {
    pub overall: Prf,
    /// `None` for categories with no prediction anywhere.
    pub per_type: Vec<(EntityType, Option<Prf>)>,
}

pub fn score_corpus(pairs: &[(PhiDictionary, PhiDictionary)], policy: &NormalizationPolicy) -> CorpusOracle {
    let notes: Vec<NoteOracle> = pairs.iter().map(|(g, p)| score_note(g, p, policy)).collect();
    let overall = mean(&notes.iter().map(|n| n.overall).collect::<Vec<_>>());
    let per_type = EntityType::ALL
        .into_iter()
        .map(|e| {
            let predicted = pairs.iter().any(|(_, p)| !p.get(e).is_empty());
            let scored: Vec<Prf> = notes
                .iter()
                .filter_map(|n| n.per_type.iter().find(|(t, _)| *t == e).map(|(_, s)| *s))
                .collect();
            (e, predicted.then(|| mean(&scored)))
        })
        .collect();
    CorpusOracle { overall, per_type }
}

/// Two-tailed p-value of the paired t-test through statrs' Student-t CDF.
pub fn paired_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let s = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = m / (s / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    2.0 * (1.0 - dist.cdf(t.abs()))
}
